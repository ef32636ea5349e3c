//! Procedural "geo-scan" generator: four anatomy analogs rendered with organs,
//! per-pixel labels, ground-truth concepts and rule-derived class labels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::schema::{apply_rules, ClassLabel, ConceptSchema, Measure};

/// Class counts of the clinical dataset in geo-scan class order
/// (bar/disk/ring/wedge, SP then NSP).
pub const REFERENCE_CLASS_COUNTS: [usize; 8] = [539, 59, 133, 545, 65, 556, 687, 82];

const BACKGROUND_LEVEL: f64 = -0.8;
const TISSUE_BASE: f64 = -0.45;
const BODY_SPAN: f64 = 0.5;
const ORGAN_SPAN: f64 = 0.55;
const RIM_BOOST: f64 = 0.25;
const END_FRACTION: f64 = 0.22;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("schema `{0}` lacks `{1}` required by the geo-scan generator")]
    SchemaMismatch(String, String),
    #[error("unknown anatomy `{0}`")]
    UnknownAnatomy(String),
    #[error("organ `{0}` is not present in this sample")]
    OrganAbsent(String),
    #[error("organ `{0}` is not part of this anatomy")]
    OrganNotInScene(String),
    #[error("no scene matching class `{0}` after {1} attempts")]
    RejectionExhausted(String, usize),
    #[error("class counts must be positive")]
    EmptyCounts,
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rendering and sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    /// Spread of organ contrast around the scene quality latent; larger values
    /// decouple organs from each other and produce more borderline scenes.
    pub kappa_spread: f64,
    /// Probability that a required organ is missing.
    pub missing_prob: f64,
    /// Probability that an organ whose absence is a quality criterion is present.
    pub optional_present_prob: f64,
    /// Upper bound on organ-like blob artifacts per scene (labeled as body).
    pub max_artifacts: usize,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 80,
            noise_sigma: 0.12,
            kappa_spread: 0.3,
            missing_prob: 0.1,
            optional_present_prob: 0.5,
            max_artifacts: 3,
            max_attempts: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Capsule {
        ax: f64,
        ay: f64,
        bx: f64,
        by: f64,
        r: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        rot_deg: f64,
    },
    Polygon {
        points: Vec<[f64; 2]>,
    },
    Polyline {
        points: Vec<[f64; 2]>,
        half_width: f64,
    },
}

fn seg_distance_sq(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> (f64, f64) {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy, t)
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Capsule { ax, ay, bx, by, r } => {
                seg_distance_sq(x, y, *ax, *ay, *bx, *by).0 <= r * r
            }
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                rot_deg,
            } => {
                let (s, c) = rot_deg.to_radians().sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Polygon { points } => {
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let [xi, yi] = points[i];
                    let [xj, yj] = points[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Polyline { points, half_width } => points.windows(2).any(|w| {
                seg_distance_sq(x, y, w[0][0], w[0][1], w[1][0], w[1][1]).0
                    <= half_width * half_width
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    /// Segmentation concept name.
    pub class: String,
    pub shapes: Vec<Shape>,
    pub kappa: f64,
    /// +1 renders brighter than tissue, -1 darker.
    pub polarity: f64,
    pub present: bool,
}

/// Full provenance of one rendered scene. Coordinates are in units of the
/// canvas height; x runs over [0, width/height].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub anatomy: String,
    pub quality: f64,
    pub body: Shape,
    pub body_kappa: f64,
    /// Rim thickness of a bright outline drawn inside an elliptical body.
    pub rim: f64,
    /// Contrast of the two end caps of a capsule body (left, right).
    pub end_kappa: Option<[f64; 2]>,
    pub angle_deg: f64,
    pub organs: Vec<OrganSpec>,
    /// Elliptical blobs drawn over tissue but under organs, with an intensity
    /// offset from tissue; they carry no label of their own.
    #[serde(default)]
    pub artifacts: Vec<(Shape, f64)>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    /// Row-major h*w intensities in [-1, 1].
    pub image: Vec<f64>,
    /// Row-major h*w segmentation indices.
    pub labels: Vec<u8>,
    /// Pixels of the left and right end caps still visible on the canvas.
    pub end_pixels: [usize; 2],
}

fn contrast(kappa: f64) -> f64 {
    0.25 + 0.75 * kappa
}

fn quantize(k: f64) -> f64 {
    (k.clamp(0.0, 1.0) * 10.0).round() / 10.0
}

/// Deterministic stream splitting (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// IoU of the foreground (non-background) mask with its mirror image about the
/// vertical midline.
pub fn mirror_iou(labels: &[u8], height: usize, width: usize) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..height {
        for j in 0..width {
            let a = labels[i * width + j] != 0;
            let b = labels[i * width + (width - 1 - j)] != 0;
            union += usize::from(a || b);
            inter += usize::from(a && b);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of non-background pixels.
pub fn foreground_ratio(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l != 0).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bar,
    Disk,
    Ring,
    Wedge,
}

impl Kind {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "bar" => Kind::Bar,
            "disk" => Kind::Disk,
            "ring" => Kind::Ring,
            "wedge" => Kind::Wedge,
            _ => return None,
        })
    }
}

const REQUIRED_SEGMENTS: [&str; 10] = [
    "background",
    "body",
    "stomach",
    "vein",
    "kidney",
    "thalamus",
    "csp",
    "cerebellum",
    "canal",
    "bladder",
];

/// Generator bound to a geo-scan schema.
#[derive(Debug, Clone)]
pub struct GeoScan {
    schema: ConceptSchema,
    config: SynthConfig,
}

impl GeoScan {
    pub fn new(schema: ConceptSchema, config: SynthConfig) -> Result<Self, SynthError> {
        for name in REQUIRED_SEGMENTS {
            if schema.segmentation_index(name).is_none() {
                return Err(SynthError::SchemaMismatch(
                    schema.name.clone(),
                    name.to_string(),
                ));
            }
        }
        for a in &schema.anatomies {
            if Kind::from_name(&a.name).is_none() {
                return Err(SynthError::SchemaMismatch(
                    schema.name.clone(),
                    format!("anatomy {}", a.name),
                ));
            }
        }
        for c in &schema.concepts {
            if c.measure.is_none() {
                return Err(SynthError::SchemaMismatch(
                    schema.name.clone(),
                    format!("measure of {}", c.name),
                ));
            }
        }
        Ok(Self { schema, config })
    }

    pub fn schema(&self) -> &ConceptSchema {
        &self.schema
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    fn seg(&self, name: &str) -> u8 {
        self.schema
            .segmentation_index(name)
            .expect("checked in new") as u8
    }

    fn aspect(&self) -> f64 {
        self.config.width as f64 / self.config.height as f64
    }

    /// Draws a random scene of the given anatomy.
    pub fn sample_scene(
        &self,
        anatomy: usize,
        rng: &mut impl Rng,
    ) -> Result<SceneSpec, SynthError> {
        let name = &self
            .schema
            .anatomies
            .get(anatomy)
            .ok_or_else(|| SynthError::UnknownAnatomy(anatomy.to_string()))?
            .name;
        let kind = Kind::from_name(name).ok_or_else(|| SynthError::UnknownAnatomy(name.clone()))?;
        let cfg = &self.config;
        let aspect = self.aspect();
        let q: f64 = rng.random();
        let spread = Normal::new(0.0, cfg.kappa_spread.max(1e-12)).expect("finite sigma");
        let kappa = |rng: &mut dyn rand::RngCore, lo: f64| -> f64 {
            quantize((q + spread.sample(rng)).clamp(lo, 1.0)).max(lo)
        };
        let missing = cfg.missing_prob;
        let optional = cfg.optional_present_prob;
        let mut organs = Vec::new();
        let organ =
            |class: &str, shapes: Vec<Shape>, k: f64, polarity: f64, present: bool| OrganSpec {
                class: class.to_string(),
                shapes,
                kappa: if present { k } else { 0.0 },
                polarity,
                present,
            };

        let cx = aspect / 2.0;
        let (body, rim, end_kappa, angle_deg);
        match kind {
            Kind::Bar => {
                let tilt = if rng.random_bool(0.8) {
                    rng.random_range(-40.0..40.0)
                } else {
                    let m: f64 = rng.random_range(40.0..80.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                };
                let len: f64 = rng.random_range(0.9..1.4);
                let r: f64 = rng.random_range(0.15..0.32);
                let (ox, oy) = (
                    cx + rng.random_range(-0.08..0.08),
                    0.5 + rng.random_range(-0.08..0.08),
                );
                let (s, c) = f64::to_radians(tilt).sin_cos();
                let (dx, dy) = (c * len / 2.0, -s * len / 2.0);
                body = Shape::Capsule {
                    ax: ox - dx,
                    ay: oy - dy,
                    bx: ox + dx,
                    by: oy + dy,
                    r,
                };
                rim = 0.0;
                end_kappa = Some([kappa(rng, 0.0), kappa(rng, 0.0)]);
                angle_deg = tilt;
            }
            Kind::Disk | Kind::Ring => {
                let a: f64 = rng.random_range(0.38..0.62);
                let b: f64 = rng.random_range(0.32..0.49);
                let rot: f64 = rng.random_range(-12.0..12.0);
                let ex = cx + rng.random_range(-0.1..0.1);
                let ey = 0.5 + rng.random_range(-0.05..0.05);
                body = Shape::Ellipse {
                    cx: ex,
                    cy: ey,
                    a,
                    b,
                    rot_deg: rot,
                };
                end_kappa = None;
                angle_deg = 0.0;
                let (s, c) = rot.to_radians().sin_cos();
                // Local ellipse frame (u along a, v along b) to canvas.
                let at =
                    |u: f64, v: f64| -> (f64, f64) { (ex + c * u - s * v, ey + s * u + c * v) };
                let ell = |u: f64, v: f64, ra: f64, rb: f64| {
                    let (x, y) = at(u, v);
                    Shape::Ellipse {
                        cx: x,
                        cy: y,
                        a: ra,
                        b: rb,
                        rot_deg: rot,
                    }
                };
                if kind == Kind::Disk {
                    rim = 0.0;
                    let present = !rng.random_bool(missing);
                    let k = kappa(rng, 0.1);
                    organs.push(organ(
                        "stomach",
                        vec![ell(-0.42 * a, -0.12 * b, 0.12, 0.09)],
                        k,
                        -1.0,
                        present,
                    ));
                    let present = !rng.random_bool(missing);
                    let k = kappa(rng, 0.1);
                    let p0 = at(0.05 * a, 0.1 * b);
                    let p1 = at(0.25 * a, -0.05 * b);
                    let p2 = at(0.4 * a, -0.3 * b);
                    organs.push(organ(
                        "vein",
                        vec![Shape::Polyline {
                            points: vec![[p0.0, p0.1], [p1.0, p1.1], [p2.0, p2.1]],
                            half_width: 0.04,
                        }],
                        k,
                        -1.0,
                        present,
                    ));
                    let present = rng.random_bool(optional);
                    let k = kappa(rng, 0.1);
                    organs.push(organ(
                        "kidney",
                        vec![
                            ell(-0.45 * a, 0.55 * b, 0.07, 0.06),
                            ell(0.45 * a, 0.55 * b, 0.07, 0.06),
                        ],
                        k,
                        1.0,
                        present,
                    ));
                } else {
                    rim = 0.06;
                    let present = !rng.random_bool(missing);
                    let k = kappa(rng, 0.1);
                    organs.push(organ(
                        "thalamus",
                        vec![
                            ell(-0.16 * a, 0.08 * b, 0.07, 0.1),
                            ell(0.16 * a, 0.08 * b, 0.07, 0.1),
                        ],
                        k,
                        -1.0,
                        present,
                    ));
                    let present = !rng.random_bool(missing);
                    let k = kappa(rng, 0.1);
                    let corners = [(-0.06, -0.5), (0.06, -0.5), (0.06, -0.3), (-0.06, -0.3)];
                    let points = corners
                        .iter()
                        .map(|&(u, v)| {
                            let (x, y) = at(u, v * b);
                            [x, y]
                        })
                        .collect();
                    organs.push(organ(
                        "csp",
                        vec![Shape::Polygon { points }],
                        k,
                        -1.0,
                        present,
                    ));
                    let present = rng.random_bool(optional);
                    let k = kappa(rng, 0.1);
                    organs.push(organ(
                        "cerebellum",
                        vec![ell(0.0, 0.6 * b, 0.15, 0.07)],
                        k,
                        1.0,
                        present,
                    ));
                }
            }
            Kind::Wedge => {
                let hgt: f64 = rng.random_range(0.55..1.0);
                let wt: f64 = rng.random_range(0.28..0.6);
                let wb: f64 = (wt * rng.random_range(1.0..1.5)).min(aspect / 2.0 + 0.05);
                let skew: f64 = if rng.random_bool(0.7) {
                    rng.random_range(-0.04..0.04)
                } else {
                    rng.random_range(-0.2..0.2)
                };
                let (yt, yb) = (0.5 - hgt / 2.0, 0.5 + hgt / 2.0);
                body = Shape::Polygon {
                    points: vec![
                        [cx - wt + skew, yt],
                        [cx + wt + skew, yt],
                        [cx + wb, yb],
                        [cx - wb, yb],
                    ],
                };
                rim = 0.0;
                end_kappa = None;
                angle_deg = 0.0;
                let present = !rng.random_bool(missing);
                let k = kappa(rng, 0.1);
                let mx = cx + skew / 2.0;
                let half = 0.7 * (wt + wb) / 2.0;
                let bend = rng.random_range(-0.05..0.05);
                organs.push(organ(
                    "canal",
                    vec![Shape::Polyline {
                        points: vec![[mx - half, 0.5], [mx, 0.5 + bend], [mx + half, 0.5]],
                        half_width: 0.035,
                    }],
                    k,
                    -1.0,
                    present,
                ));
                let present = rng.random_bool(optional);
                let k = kappa(rng, 0.1);
                organs.push(organ(
                    "bladder",
                    vec![Shape::Ellipse {
                        cx: cx - 0.5 * wt + skew,
                        cy: yt + 0.12,
                        a: 0.13,
                        b: 0.08,
                        rot_deg: 0.0,
                    }],
                    k,
                    -1.0,
                    present,
                ));
            }
        }
        let mut artifacts = Vec::new();
        for _ in 0..rng.random_range(0..=cfg.max_artifacts) {
            let mut placed = None;
            for _ in 0..20 {
                let (x, y) = (rng.random_range(0.0..aspect), rng.random_range(0.0..1.0));
                if body.contains(x, y) {
                    placed = Some((x, y));
                    break;
                }
            }
            let a: f64 = rng.random_range(0.04..0.09);
            let b: f64 = rng.random_range(0.04..0.09);
            let rot: f64 = rng.random_range(-90.0..90.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let level = sign * ORGAN_SPAN * contrast(rng.random());
            if let Some((x, y)) = placed {
                let shape = Shape::Ellipse {
                    cx: x,
                    cy: y,
                    a,
                    b,
                    rot_deg: rot,
                };
                artifacts.push((shape, level));
            }
        }
        Ok(SceneSpec {
            anatomy: name.clone(),
            quality: q,
            body,
            body_kappa: q,
            rim,
            end_kappa,
            angle_deg,
            organs,
            artifacts,
            noise_sigma: cfg.noise_sigma,
            noise_seed: rng.random(),
        })
    }

    /// Rasterizes a scene. Noise is drawn per pixel in row-major order from the
    /// scene's noise seed, so re-rendering an edited scene keeps the texture.
    pub fn render(&self, spec: &SceneSpec) -> Rendered {
        let (h, w) = (self.config.height, self.config.width);
        let mut image = vec![BACKGROUND_LEVEL; h * w];
        let mut labels = vec![0u8; h * w];
        let mut end_pixels = [0usize; 2];
        let body_label = self.seg("body");
        let tissue = TISSUE_BASE + BODY_SPAN * contrast(spec.body_kappa);
        let inner = match (&spec.body, spec.rim > 0.0) {
            (
                Shape::Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    rot_deg,
                },
                true,
            ) => Some(Shape::Ellipse {
                cx: *cx,
                cy: *cy,
                a: a - spec.rim,
                b: b - spec.rim,
                rot_deg: *rot_deg,
            }),
            _ => None,
        };
        let organ_labels: Vec<u8> = spec.organs.iter().map(|o| self.seg(&o.class)).collect();
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let x = (j as f64 + 0.5) / h as f64;
                let p = i * w + j;
                if !spec.body.contains(x, y) {
                    continue;
                }
                labels[p] = body_label;
                image[p] = tissue;
                if let Some(inner) = &inner {
                    if !inner.contains(x, y) {
                        image[p] = tissue + RIM_BOOST;
                    }
                }
                if let (Some(ends), Shape::Capsule { ax, ay, bx, by, .. }) =
                    (spec.end_kappa, &spec.body)
                {
                    let t = seg_distance_sq(x, y, *ax, *ay, *bx, *by).1;
                    let end = if t < END_FRACTION {
                        Some(0)
                    } else if t > 1.0 - END_FRACTION {
                        Some(1)
                    } else {
                        None
                    };
                    if let Some(e) = end {
                        end_pixels[e] += 1;
                        image[p] = TISSUE_BASE + BODY_SPAN * contrast(ends[e]);
                    }
                }
                for (shape, level) in &spec.artifacts {
                    if shape.contains(x, y) {
                        image[p] = tissue + level;
                    }
                }
                for (o, &label) in spec.organs.iter().zip(&organ_labels) {
                    if o.present && o.shapes.iter().any(|s| s.contains(x, y)) {
                        labels[p] = label;
                        image[p] = tissue + o.polarity * ORGAN_SPAN * contrast(o.kappa);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
        for v in &mut image {
            *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
        }
        Rendered {
            image,
            labels,
            end_pixels,
        }
    }

    /// Ground-truth concept values (binary as 0/1, unsmoothed) for a rendered scene.
    pub fn derive_concepts(
        &self,
        spec: &SceneSpec,
        rendered: &Rendered,
    ) -> Result<Vec<f64>, SynthError> {
        let s = &self.schema;
        let anatomy = s.anatomy_index(&spec.anatomy)?;
        let (h, w) = (self.config.height, self.config.width);
        let mut counts = vec![0usize; s.n()];
        for &l in &rendered.labels {
            counts[l as usize] += 1;
        }
        let mut out = vec![0.0; s.d()];
        for (i, c) in s.concepts.iter().enumerate() {
            if c.anatomy != anatomy {
                continue;
            }
            let (lo, hi) = c.range.unwrap_or((0.0, 1.0));
            out[i] = match c.measure.expect("checked in new") {
                Measure::Visibility => {
                    let end = if c.name.contains("left_end") {
                        Some(0)
                    } else if c.name.contains("right_end") {
                        Some(1)
                    } else {
                        None
                    };
                    match (end, spec.end_kappa) {
                        (Some(e), Some(k)) => {
                            if rendered.end_pixels[e] > 0 {
                                k[e]
                            } else {
                                0.0
                            }
                        }
                        _ => {
                            let organ = c.depends_on[0];
                            spec.organs
                                .iter()
                                .find(|o| o.present && self.seg(&o.class) as usize == organ)
                                .filter(|_| counts[organ] > 0)
                                .map_or(0.0, |o| o.kappa)
                        }
                    }
                }
                Measure::Angle => f64::from(u8::from(spec.angle_deg.abs() < hi)),
                Measure::Occupancy => {
                    let r = foreground_ratio(&rendered.labels);
                    f64::from(u8::from(r > lo && r <= hi))
                }
                Measure::Symmetry => f64::from(u8::from(mirror_iou(&rendered.labels, h, w) >= lo)),
                Measure::Caliper => spec.body_kappa,
            };
        }
        Ok(out)
    }

    /// Renders a scene and derives concepts and label.
    pub fn realize(&self, id: usize, spec: SceneSpec) -> Result<Sample, SynthError> {
        let rendered = self.render(&spec);
        let concepts = self.derive_concepts(&spec, &rendered)?;
        let anatomy = self.schema.anatomy_index(&spec.anatomy)?;
        let label = apply_rules(&self.schema, &concepts, anatomy)?;
        Ok(Sample {
            id,
            anatomy,
            label: label.index(),
            concepts,
            image: Tensor::new(
                vec![1, self.config.height, self.config.width],
                rendered.image,
            ),
            mask: rendered.labels,
            spec,
        })
    }

    /// One random sample of the given anatomy.
    pub fn generate_scene(&self, anatomy: usize, seed: u64) -> Result<Sample, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = self.sample_scene(anatomy, &mut rng)?;
        self.realize(0, spec)
    }

    /// Rejection-samples scenes until one carries the requested class.
    pub fn generate_class(
        &self,
        class: usize,
        id: usize,
        rng: &mut impl Rng,
    ) -> Result<Sample, SynthError> {
        let target = ClassLabel::from_index(class);
        for _ in 0..self.config.max_attempts {
            let spec = self.sample_scene(target.anatomy, rng)?;
            let sample = self.realize(id, spec)?;
            if sample.label == class {
                return Ok(sample);
            }
        }
        Err(SynthError::RejectionExhausted(
            self.schema.class_name(target),
            self.config.max_attempts,
        ))
    }

    /// Removes an organ and re-renders with the same noise; the region falls
    /// back to surrounding tissue. Concepts and label are recomputed.
    pub fn ablate_organ(&self, sample: &Sample, organ: &str) -> Result<Sample, SynthError> {
        let mut spec = sample.spec.clone();
        let o = spec
            .organs
            .iter_mut()
            .find(|o| o.class == organ)
            .ok_or_else(|| SynthError::OrganNotInScene(organ.to_string()))?;
        let label = self.seg(organ);
        if !o.present || !sample.mask.contains(&label) {
            return Err(SynthError::OrganAbsent(organ.to_string()));
        }
        o.present = false;
        o.kappa = 0.0;
        self.realize(sample.id, spec)
    }

    /// Generates a stratified dataset. Splits are 50/10/40 per class.
    pub fn generate_dataset(&self, counts: &[usize], seed: u64) -> Result<Dataset, SynthError> {
        let nc = self.schema.num_classes();
        if counts.len() != nc || counts.contains(&0) {
            return Err(SynthError::EmptyCounts);
        }
        let mut samples = Vec::with_capacity(counts.iter().sum());
        for (class, &count) in counts.iter().enumerate() {
            for j in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64, j as u64));
                let id = samples.len();
                samples.push(self.generate_class(class, id, &mut rng)?);
            }
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let splits = stratified_split(&labels, nc, derive_seed(seed, u64::MAX, 0));
        Ok(Dataset {
            schema_name: self.schema.name.clone(),
            height: self.config.height,
            width: self.config.width,
            channels: 1,
            samples,
            splits,
        })
    }
}

/// Class counts proportional to the clinical dataset, summing to about `total`.
pub fn reference_counts(total: usize) -> Vec<usize> {
    let sum: usize = REFERENCE_CLASS_COUNTS.iter().sum();
    REFERENCE_CLASS_COUNTS
        .iter()
        .map(|&c| ((c * total) as f64 / sum as f64).round().max(1.0) as usize)
        .collect()
}

/// Equal counts per class.
pub fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    vec![(total / classes).max(1); classes]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-class shuffled 50/10/40 split; each list is returned in ascending id order.
pub fn stratified_split(labels: &[usize], classes: usize, seed: u64) -> Splits {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..classes {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (n as f64 * 0.5).round() as usize;
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        out.train.extend_from_slice(&ids[..n_train]);
        out.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        out.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    out
}

/// Minority oversampling: each index of class c repeats
/// `max(1, round(0.5 * max_count / count_c))` times.
pub fn oversample(indices: &[usize], labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &i in indices {
        counts[labels[i]] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let mut out = Vec::new();
    for &i in indices {
        let c = counts[labels[i]] as f64;
        let reps = ((0.5 * max / c).round() as usize).max(1);
        out.extend(std::iter::repeat_n(i, reps));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub anatomy: usize,
    pub label: usize,
    /// Ground-truth concept values, binary entries in {0, 1}, padded entries 0.
    pub concepts: Vec<f64>,
    /// Image tensor [channels, height, width].
    pub image: Tensor,
    /// Row-major segmentation indices.
    pub mask: Vec<u8>,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema_name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(split)
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.splits.get(s).binary_search(&id).is_ok())
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    schema: String,
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    split: Split,
    anatomy: usize,
    label: usize,
    concepts: Vec<f64>,
    spec: SceneSpec,
}

const MANIFEST_FORMAT: &str = "geoscan-dataset/1";
const IMAGE_MAGIC: &[u8; 8] = b"PCBMIMG1";
const MASK_MAGIC: &[u8; 8] = b"PCBMMSK1";

fn image_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("images").join(format!("{id:06}.img"))
}

fn mask_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("masks").join(format!("{id:06}.msk"))
}

/// Writes `manifest.json`, `images/<id>.img` and `masks/<id>.msk`.
///
/// Image file: magic `PCBMIMG1`, height, width, channels as u32 LE, then
/// channel-major f64 LE values. Mask file: magic `PCBMMSK1`, height, width,
/// class count as u32 LE, then one u8 label per pixel, row-major.
pub fn write_dataset(
    dataset: &Dataset,
    num_classes_seg: usize,
    dir: &Path,
) -> Result<(), SynthError> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let split = dataset
            .split_of(s.id)
            .ok_or_else(|| SynthError::Format(format!("sample {} is in no split", s.id)))?;
        entries.push(ManifestEntry {
            id: s.id,
            split,
            anatomy: s.anatomy,
            label: s.label,
            concepts: s.concepts.clone(),
            spec: s.spec.clone(),
        });
        let mut buf = Vec::with_capacity(20 + s.image.len() * 8);
        buf.extend_from_slice(IMAGE_MAGIC);
        for v in [dataset.height, dataset.width, dataset.channels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(image_path(dir, s.id))?.write_all(&buf)?;
        let mut buf = Vec::with_capacity(20 + s.mask.len());
        buf.extend_from_slice(MASK_MAGIC);
        for v in [dataset.height, dataset.width, num_classes_seg] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&s.mask);
        fs::File::create(mask_path(dir, s.id))?.write_all(&buf)?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        schema: dataset.schema_name.clone(),
        height: dataset.height,
        width: dataset.width,
        channels: dataset.channels,
        samples: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_header(bytes: &[u8], magic: &[u8; 8], what: &str) -> Result<[usize; 3], SynthError> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(SynthError::Format(format!("bad {what} header")));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let o = 8 + 4 * k;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    Ok(dims)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(SynthError::Format(format!(
            "unsupported manifest format `{}`",
            manifest.format
        )));
    }
    let (h, w, m) = (manifest.height, manifest.width, manifest.channels);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (pos, e) in manifest.samples.into_iter().enumerate() {
        if e.id != pos {
            return Err(SynthError::Format(format!(
                "manifest ids must be dense; found {} at {pos}",
                e.id
            )));
        }
        let mut bytes = Vec::new();
        fs::File::open(image_path(dir, e.id))?.read_to_end(&mut bytes)?;
        let dims = read_header(&bytes, IMAGE_MAGIC, "image")?;
        if dims != [h, w, m] || bytes.len() != 20 + h * w * m * 8 {
            return Err(SynthError::Format(format!("image {} has wrong size", e.id)));
        }
        let data = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut mbytes = Vec::new();
        fs::File::open(mask_path(dir, e.id))?.read_to_end(&mut mbytes)?;
        let mdims = read_header(&mbytes, MASK_MAGIC, "mask")?;
        if mdims[..2] != [h, w] || mbytes.len() != 20 + h * w {
            return Err(SynthError::Format(format!("mask {} has wrong size", e.id)));
        }
        match e.split {
            Split::Train => splits.train.push(e.id),
            Split::Val => splits.val.push(e.id),
            Split::Test => splits.test.push(e.id),
        }
        samples.push(Sample {
            id: e.id,
            anatomy: e.anatomy,
            label: e.label,
            concepts: e.concepts,
            image: Tensor::new(vec![m, h, w], data),
            mask: mbytes[20..].to_vec(),
            spec: e.spec,
        });
    }
    Ok(Dataset {
        schema_name: manifest.schema,
        height: h,
        width: w,
        channels: m,
        samples,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> GeoScan {
        GeoScan::new(ConceptSchema::geoscan(), SynthConfig::default()).unwrap()
    }

    fn bar_spec(g: &GeoScan, tilt: f64, r: f64, ends: [f64; 2]) -> SceneSpec {
        let cx = 0.625;
        let len = 1.1;
        let (s, c) = f64::to_radians(tilt).sin_cos();
        let (dx, dy) = (c * len / 2.0, -s * len / 2.0);
        SceneSpec {
            anatomy: "bar".into(),
            quality: 0.8,
            body: Shape::Capsule {
                ax: cx - dx,
                ay: 0.5 - dy,
                bx: cx + dx,
                by: 0.5 + dy,
                r,
            },
            body_kappa: 0.8,
            rim: 0.0,
            end_kappa: Some(ends),
            angle_deg: tilt,
            organs: vec![],
            artifacts: vec![],
            noise_sigma: g.config.noise_sigma,
            noise_seed: 7,
        }
    }

    #[test]
    fn bar_examples_follow_rules() {
        let g = generator();
        let s = g.realize(0, bar_spec(&g, 30.0, 0.3, [0.9, 0.9])).unwrap();
        assert!(foreground_ratio(&s.mask) > 0.5);
        assert_eq!(&s.concepts[..4], &[0.9, 0.9, 1.0, 1.0]);
        assert_eq!(
            g.schema().class_name(ClassLabel::from_index(s.label)),
            "bar SP"
        );
        let s = g.realize(0, bar_spec(&g, 50.0, 0.3, [0.9, 0.9])).unwrap();
        assert_eq!(s.concepts[2], 0.0);
        assert_eq!(
            g.schema().class_name(ClassLabel::from_index(s.label)),
            "bar NSP"
        );
    }

    #[test]
    fn labels_match_rules_and_masks() {
        let g = generator();
        let schema = g.schema().clone();
        for a in 0..4 {
            for seed in 0..25 {
                let s = g.generate_scene(a, seed).unwrap();
                let l = apply_rules(&schema, &s.concepts, a).unwrap();
                assert_eq!(l.index(), s.label);
                assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                for (i, c) in schema.concepts.iter().enumerate() {
                    if c.anatomy != a {
                        assert_eq!(s.concepts[i], 0.0);
                    }
                    if c.measure == Some(Measure::Occupancy) && c.anatomy == a {
                        let (lo, hi) = c.range.unwrap();
                        let r = foreground_ratio(&s.mask);
                        assert_eq!(s.concepts[i] == 1.0, r > lo && r <= hi);
                    }
                }
            }
        }
    }

    #[test]
    fn cerebellum_present_makes_ring_nsp() {
        let g = generator();
        let schema = g.schema();
        let ring = schema.anatomy_index("ring").unwrap();
        let cb = schema.concept_index("cerebellum_visibility").unwrap();
        let mut found = 0;
        for seed in 0..200 {
            let s = g.generate_scene(ring, seed).unwrap();
            if s.concepts[cb] >= 0.5 {
                assert!(!ClassLabel::from_index(s.label).standard);
                found += 1;
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn ablation_zeroes_visibility_and_rejects_repeat() {
        let g = generator();
        let schema = g.schema();
        let disk = schema.anatomy_index("disk").unwrap();
        let stomach = schema.concept_index("stomach_visibility").unwrap();
        let vein = schema.concept_index("vein_visibility").unwrap();
        let mut checked = 0;
        for seed in 0..100 {
            let s = g.generate_scene(disk, seed).unwrap();
            if s.concepts[stomach] == 0.0 {
                assert!(matches!(
                    g.ablate_organ(&s, "stomach"),
                    Err(SynthError::OrganAbsent(_))
                ));
                continue;
            }
            let a = g.ablate_organ(&s, "stomach").unwrap();
            assert_eq!(a.concepts[stomach], 0.0);
            assert!(!a
                .mask
                .contains(&(schema.segmentation_index("stomach").unwrap() as u8)));
            assert!(matches!(
                g.ablate_organ(&a, "stomach"),
                Err(SynthError::OrganAbsent(_))
            ));
            if ClassLabel::from_index(s.label).standard {
                let v = g.ablate_organ(&s, "vein").unwrap();
                assert_eq!(v.concepts[vein], 0.0);
                assert!(!ClassLabel::from_index(v.label).standard);
            }
            checked += 1;
        }
        assert!(checked > 50);
        let s = g.generate_scene(disk, 1).unwrap();
        assert!(matches!(
            g.ablate_organ(&s, "thalamus"),
            Err(SynthError::OrganNotInScene(_))
        ));
    }

    #[test]
    fn contrast_tracks_kappa() {
        let g = generator();
        let mut spec = bar_spec(&g, 0.0, 0.3, [0.2, 0.9]);
        spec.noise_sigma = 0.0;
        let r = g.render(&spec);
        let w = g.config.width;
        let row = g.config.height / 2;
        let left = (0..w).find(|&j| r.labels[row * w + j] != 0).unwrap();
        let right = (0..w).rev().find(|&j| r.labels[row * w + j] != 0).unwrap();
        assert!(r.image[row * w + left] < r.image[row * w + right]);
    }

    #[test]
    fn reference_counts_mirror_imbalance() {
        let c = reference_counts(2666);
        assert_eq!(c, REFERENCE_CLASS_COUNTS.to_vec());
        let c = reference_counts(2000);
        let ratio = c[0] as f64 / c[1] as f64;
        assert!((ratio - 539.0 / 59.0).abs() < 0.3);
        assert_eq!(balanced_counts(80, 8), vec![10; 8]);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let s = stratified_split(&labels, 4, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (100, 20, 80));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn oversampling_repeats_minority() {
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 2, 2, 2];
        let idx: Vec<usize> = (0..labels.len()).collect();
        let o = oversample(&idx, &labels, 3);
        assert_eq!(o.iter().filter(|&&i| i == 8).count(), 4);
        assert_eq!(o.iter().filter(|&&i| i == 0).count(), 1);
        assert_eq!(o.iter().filter(|&&i| i == 9).count(), 1);
    }

    #[test]
    fn mirror_iou_cases() {
        let labels = vec![1, 0, 0, 2, 2, 1, 0, 0];
        assert!((mirror_iou(&labels, 2, 4) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(mirror_iou(&[0; 4], 2, 2), 0.0);
    }
}
