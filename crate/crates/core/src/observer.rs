//! Segmentation stage: an encoder-decoder producing per-pixel concept
//! probabilities, and soft-masking of the image by those probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::IouAccumulator;
use crate::numerics::{
    BatchNorm, Conv2d, ConvTranspose2d, Graph, Mode, NumericsError, ParamStore, Tensor, Var,
};
use crate::synth::Dataset;
use crate::train::{batched_mean, fit, TrainConfig, TrainError, TrainLog};

/// Where a segmentation map (and anything derived from it) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Predicted,
    Edited,
}

/// Per-pixel class probabilities `[classes, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub probs: Tensor,
    pub provenance: Provenance,
}

impl SegmentationMap {
    /// One-hot map from a label image.
    pub fn from_labels(labels: &[u8], classes: usize, height: usize, width: usize) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; classes * plane];
        for (p, &l) in labels.iter().enumerate() {
            data[l as usize * plane + p] = 1.0;
        }
        Self {
            probs: Tensor::new(vec![classes, height, width], data),
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Argmax label per pixel (first maximum wins).
    pub fn argmax(&self) -> Vec<u8> {
        let (c, plane) = (self.classes(), self.height() * self.width());
        let d = self.probs.data();
        (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * plane + p] > d[best * plane + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Probabilities of one class as a flat plane.
    pub fn channel(&self, class: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.probs.data()[class * plane..(class + 1) * plane]
    }
}

/// Soft-masked images, flattened to `[segments * channels, h, w]` with
/// segment index major and image channel minor.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedStack {
    pub data: Tensor,
    pub segments: usize,
    pub channels: usize,
    pub provenance: Provenance,
}

impl MaskedStack {
    /// Channel count of the flattened stack (segments times image channels).
    pub fn mu(&self) -> usize {
        self.segments * self.channels
    }
}

/// Multiplies every image channel by every class probability plane.
pub fn soft_mask(map: &SegmentationMap, image: &Tensor) -> Result<MaskedStack, NumericsError> {
    let is = image.shape();
    if is.len() != 3 || is[1] != map.height() || is[2] != map.width() {
        return Err(NumericsError::ShapeMismatch {
            kind: "soft-mask",
            detail: format!("image {:?} vs map {:?}", is, map.probs.shape()),
        });
    }
    let (m, plane, n) = (is[0], is[1] * is[2], map.classes());
    let x = image.data();
    let mut out = vec![0.0; n * m * plane];
    for s in 0..n {
        let p = map.channel(s);
        for j in 0..m {
            let dst = &mut out[(s * m + j) * plane..(s * m + j + 1) * plane];
            let src = &x[j * plane..(j + 1) * plane];
            for ((o, &pv), &xv) in dst.iter_mut().zip(p).zip(src) {
                *o = pv * xv;
            }
        }
    }
    Ok(MaskedStack {
        data: Tensor::new(vec![n * m, is[1], is[2]], out),
        segments: n,
        channels: m,
        provenance: map.provenance,
    })
}

/// Network input for a stack: the flattened tensor itself.
pub fn stack_input(stack: &MaskedStack) -> &Tensor {
    &stack.data
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    /// Resolution levels of the encoder; the input size must be divisible by 2^(levels-1).
    pub levels: usize,
    pub base_width: usize,
    /// Weight of the dice term; the focal term gets the remainder.
    pub dice_weight: f64,
    pub focal_gamma: f64,
    pub class_weight_min: f64,
    pub class_weight_max: f64,
    pub train: TrainConfig,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 16,
            dice_weight: 0.5,
            focal_gamma: 2.0,
            class_weight_min: 0.5,
            class_weight_max: 20.0,
            train: TrainConfig::new(30, 8),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

/// U-shaped segmenter with skip connections.
#[derive(Debug, Clone)]
pub struct Observer {
    pub store: ParamStore,
    pub in_channels: usize,
    pub classes: usize,
    pub levels: usize,
    encoder: Vec<[ConvBlock; 2]>,
    up: Vec<ConvTranspose2d>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
}

impl Observer {
    pub fn new(
        in_channels: usize,
        classes: usize,
        levels: usize,
        base_width: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let levels = levels.max(1);
        let width = |l: usize| base_width << l;
        let mut encoder = Vec::new();
        let mut cin = in_channels;
        for l in 0..levels {
            let a = ConvBlock::new(
                &mut store,
                &format!("observer.enc{l}a"),
                cin,
                width(l),
                &mut rng,
            );
            let b = ConvBlock::new(
                &mut store,
                &format!("observer.enc{l}b"),
                width(l),
                width(l),
                &mut rng,
            );
            encoder.push([a, b]);
            cin = width(l);
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            up.push(ConvTranspose2d::new(
                &mut store,
                &format!("observer.up{l}"),
                width(l + 1),
                width(l),
                2,
                &mut rng,
            ));
            decoder.push(ConvBlock::new(
                &mut store,
                &format!("observer.dec{l}"),
                2 * width(l),
                width(l),
                &mut rng,
            ));
        }
        let head = Conv2d::new(
            &mut store,
            "observer.head",
            width(0),
            classes,
            1,
            1,
            0,
            &mut rng,
        );
        Self {
            store,
            in_channels,
            classes,
            levels,
            encoder,
            up,
            decoder,
            head,
        }
    }

    /// Checks that an `h x w` input survives the pooling path.
    pub fn check_input(&self, height: usize, width: usize) -> Result<(), NumericsError> {
        let f = 1usize << (self.levels - 1);
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(NumericsError::ShapeMismatch {
                kind: "observer",
                detail: format!("{height}x{width} is not divisible by {f}"),
            });
        }
        Ok(())
    }

    /// Class logits `[b, classes, h, w]` for images `[b, channels, h, w]`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let mut skips = Vec::with_capacity(self.levels);
        let mut h = x;
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h)?;
            }
            h = a.forward(g, store, h, mode)?;
            h = b.forward(g, store, h, mode)?;
            skips.push(h);
        }
        for (k, (up, dec)) in self.up.iter().zip(&self.decoder).enumerate() {
            let l = self.levels - 2 - k;
            let u = up.forward(g, store, h)?;
            let cat = g.concat(&[skips[l], u])?;
            h = dec.forward(g, store, cat, mode)?;
        }
        self.head.forward(g, store, h)
    }

    /// Segmentation maps for a batch of images `[channels, h, w]`.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<SegmentationMap>, NumericsError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let s = images[0].shape();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(NumericsError::ShapeMismatch {
                kind: "observer",
                detail: format!("image {s:?} for {} input channels", self.in_channels),
            });
        }
        self.check_input(s[1], s[2])?;
        let mut g = Graph::inference();
        let x = g.input(Tensor::stack(images));
        let logits = self.logits(&mut g, &self.store, x, Mode::Eval)?;
        let probs = g.softmax(logits)?;
        let out = g.value(probs);
        Ok((0..images.len())
            .map(|i| SegmentationMap {
                probs: Tensor::new(vec![self.classes, s[1], s[2]], out.outer(i).to_vec()),
                provenance: Provenance::Predicted,
            })
            .collect())
    }
}

/// Inverse-frequency class weights, normalised so a uniform distribution gives
/// 1, clipped to `[lo, hi]`. Absent classes get `hi`.
pub fn class_weights(masks: &[&[u8]], classes: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    for m in masks {
        for &l in m.iter() {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                hi
            } else {
                (total as f64 / (classes as f64 * c as f64)).clamp(lo, hi)
            }
        })
        .collect()
}

struct SegBatch {
    images: Tensor,
    onehot: Tensor,
    labels: Vec<usize>,
}

fn seg_batch(data: &Dataset, ids: &[usize], classes: usize) -> SegBatch {
    let imgs: Vec<&Tensor> = ids.iter().map(|&i| &data.samples[i].image).collect();
    let plane = data.height * data.width;
    let mut onehot = vec![0.0; ids.len() * classes * plane];
    let mut labels = Vec::with_capacity(ids.len() * plane);
    for (b, &i) in ids.iter().enumerate() {
        for (p, &l) in data.samples[i].mask.iter().enumerate() {
            onehot[(b * classes + l as usize) * plane + p] = 1.0;
            labels.push(l as usize);
        }
    }
    SegBatch {
        images: Tensor::stack(&imgs),
        onehot: Tensor::new(vec![ids.len(), classes, data.height, data.width], onehot),
        labels,
    }
}

fn seg_loss(
    obs: &Observer,
    g: &mut Graph,
    store: &ParamStore,
    batch: &SegBatch,
    weights: &[f64],
    cfg: &ObserverConfig,
    mode: Mode,
) -> Result<Var, NumericsError> {
    let x = g.input(batch.images.clone());
    let logits = obs.logits(g, store, x, mode)?;
    let probs = g.softmax(logits)?;
    let dice = g.dice_loss(probs, &batch.onehot, 1.0)?;
    let focal = g.focal_loss(probs, &batch.labels, weights, cfg.focal_gamma)?;
    let a = g.scale(dice, cfg.dice_weight);
    let b = g.scale(focal, 1.0 - cfg.dice_weight);
    g.add(a, b)
}

/// Trains on (image, ground-truth mask) pairs; keeps the best-validation weights.
pub fn train_observer(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    classes: usize,
    cfg: &ObserverConfig,
    seed: u64,
) -> Result<(Observer, TrainLog), TrainError> {
    let mut obs = Observer::new(data.channels, classes, cfg.levels, cfg.base_width, seed);
    obs.check_input(data.height, data.width)
        .map_err(|source| TrainError::Numerics {
            stage: "observer".into(),
            source,
        })?;
    let masks: Vec<&[u8]> = train
        .iter()
        .map(|&i| data.samples[i].mask.as_slice())
        .collect();
    let weights = class_weights(&masks, classes, cfg.class_weight_min, cfg.class_weight_max);
    let mut store = std::mem::take(&mut obs.store);
    let tcfg = cfg.train.clone().with_seed(seed ^ 0x0b5e);
    let log = fit(
        "observer",
        "images -> ground-truth masks",
        &mut store,
        &tcfg,
        train,
        |g, store, ids| {
            let batch = seg_batch(data, ids, classes);
            seg_loss(&obs, g, store, &batch, &weights, cfg, Mode::Train)
        },
        |store| {
            batched_mean(val, 32, |ids| {
                let batch = seg_batch(data, ids, classes);
                let mut g = Graph::inference();
                let l = seg_loss(&obs, &mut g, store, &batch, &weights, cfg, Mode::Eval)?;
                Ok(g.value(l).item())
            })
        },
    );
    obs.store = store;
    Ok((obs, log?))
}

/// Predicted maps for dataset items, in order.
pub fn predict_segmentation(
    obs: &Observer,
    data: &Dataset,
    ids: &[usize],
) -> Result<Vec<SegmentationMap>, NumericsError> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(32) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.samples[i].image).collect();
        out.extend(obs.predict(&imgs)?);
    }
    Ok(out)
}

/// Accumulated argmax IoU of predicted maps against ground-truth masks.
pub fn segmentation_iou(
    maps: &[SegmentationMap],
    data: &Dataset,
    ids: &[usize],
    classes: usize,
) -> IouAccumulator {
    let mut acc = IouAccumulator::new(classes);
    for (m, &i) in maps.iter().zip(ids) {
        acc.add(&m.argmax(), &data.samples[i].mask);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_mask_examples() {
        let labels = vec![1u8; 4];
        let map = SegmentationMap::from_labels(&labels, 3, 2, 2);
        let img = Tensor::new(vec![1, 2, 2], vec![0.1, -0.2, 0.3, 0.4]);
        let s = soft_mask(&map, &img).unwrap();
        assert_eq!(s.mu(), 3);
        assert_eq!(&s.data.data()[4..8], img.data());
        assert!(s.data.data()[..4]
            .iter()
            .chain(&s.data.data()[8..])
            .all(|&v| v == 0.0));

        let uniform = SegmentationMap {
            probs: Tensor::full(&[4, 2, 2], 0.25),
            provenance: Provenance::Predicted,
        };
        let s = soft_mask(&uniform, &img).unwrap();
        for k in 0..4 {
            for p in 0..4 {
                assert!((s.data.data()[k * 4 + p] - img.data()[p] / 4.0).abs() < 1e-15);
            }
        }

        let half = SegmentationMap {
            probs: Tensor::full(&[2, 1, 1], 0.5),
            provenance: Provenance::Predicted,
        };
        let s = soft_mask(&half, &Tensor::full(&[1, 1, 1], 0.8)).unwrap();
        assert!((s.data.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stack_order_is_segment_major() {
        let map = SegmentationMap::from_labels(&[0, 1], 2, 1, 2);
        let img = Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = soft_mask(&map, &img).unwrap();
        assert_eq!(s.mu(), 6);
        assert_eq!(
            stack_input(&s).data(),
            &[1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 0.0, 2.0, 0.0, 4.0, 0.0, 6.0]
        );
    }

    #[test]
    fn prediction_is_a_simplex() {
        let obs = Observer::new(1, 5, 3, 4, 1);
        let img = Tensor::from_fn(&[1, 8, 12], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let maps = obs.predict(&[&img, &img]).unwrap();
        for m in &maps {
            for p in 0..96 {
                let s: f64 = (0..5).map(|k| m.channel(k)[p]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(maps[0], maps[1]);
        assert!(obs.predict(&[&Tensor::zeros(&[1, 6, 6])]).is_err());
    }

    #[test]
    fn class_weights_clip() {
        let a = [0u8, 0, 0, 0, 0, 0, 0, 1];
        let w = class_weights(&[&a], 3, 0.5, 20.0);
        assert_eq!(w[0], 0.5);
        assert!((w[1] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(w[2], 20.0);
    }
}
