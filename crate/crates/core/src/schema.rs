//! Concept catalog: segmentation concepts, property concepts, anatomies and
//! their standard-plane rules, loaded from a TOML document.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothed value for a true binary concept.
pub const SMOOTH_HIGH: f64 = 0.99;
/// Smoothed value for a false binary concept.
pub const SMOOTH_LOW: f64 = 0.01;

pub const GEOSCAN_DOCUMENT: &str = include_str!("../schemas/geoscan.schema");
pub const FETAL_DOCUMENT: &str = include_str!("../schemas/fetal.schema");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("schema document is not well-formed: {0}")]
    Parse(String),
    #[error("schema validation failed: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unknown anatomy `{0}`")]
    UnknownAnatomy(String),
    #[error("anatomy index {0} out of range")]
    AnatomyIndex(usize),
    #[error("concept vector has length {got}, schema expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("concept `{name}` has value {value} outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error("inapplicable concept `{name}` holds {value}; padded entries must be 0")]
    NonZeroPadding { name: String, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Binary,
    Scalar,
}

/// How a synthetic concept is derived from geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Visibility,
    Occupancy,
    Symmetry,
    Angle,
    Caliper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    True,
    False,
    Visible,
    NotVisible,
    AtLeast(f64),
    AtMost(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyConcept {
    pub name: String,
    pub kind: ConceptKind,
    pub anatomy: usize,
    /// Segmentation concept indices; the first is the organ a visibility score describes.
    pub depends_on: Vec<usize>,
    pub measure: Option<Measure>,
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rule {
    pub concept: usize,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Anatomy {
    pub name: String,
    pub rules: Vec<Rule>,
}

/// Class label: anatomy plus standard-plane verdict. Index is `2 * anatomy + (0 for SP, 1 for NSP)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub anatomy: usize,
    pub standard: bool,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        2 * self.anatomy + usize::from(!self.standard)
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            anatomy: index / 2,
            standard: index.is_multiple_of(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptSchema {
    pub name: String,
    pub segmentation: Vec<String>,
    pub concepts: Vec<PropertyConcept>,
    pub anatomies: Vec<Anatomy>,
    pub visible_threshold: f64,
    pub not_visible_threshold: f64,
    binary_index: Vec<usize>,
    scalar_index: Vec<usize>,
    #[serde(skip)]
    source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    segmentation: Vec<String>,
    thresholds: ThresholdDoc,
    #[serde(default)]
    anatomy: Vec<AnatomyDoc>,
    #[serde(default)]
    concept: Vec<ConceptDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdDoc {
    visible: f64,
    not_visible: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnatomyDoc {
    name: String,
    #[serde(default)]
    rules: Vec<RuleDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    concept: String,
    test: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptDoc {
    name: String,
    kind: String,
    anatomy: String,
    #[serde(default)]
    depends_on: Vec<String>,
    measure: Option<String>,
    range: Option<[f64; 2]>,
}

fn parse_predicate(test: &str) -> Option<Predicate> {
    let t = test.trim();
    match t {
        "true" => return Some(Predicate::True),
        "false" => return Some(Predicate::False),
        "visible" => return Some(Predicate::Visible),
        "not_visible" => return Some(Predicate::NotVisible),
        _ => {}
    }
    if let Some(rest) = t.strip_prefix(">=") {
        return rest.trim().parse().ok().map(Predicate::AtLeast);
    }
    if let Some(rest) = t.strip_prefix("<=") {
        return rest.trim().parse().ok().map(Predicate::AtMost);
    }
    None
}

fn parse_measure(s: &str) -> Option<Measure> {
    Some(match s {
        "visibility" => Measure::Visibility,
        "occupancy" => Measure::Occupancy,
        "symmetry" => Measure::Symmetry,
        "angle" => Measure::Angle,
        "caliper" => Measure::Caliper,
        _ => return None,
    })
}

fn duplicates<'a>(what: &str, names: impl Iterator<Item = &'a String>, errors: &mut Vec<String>) {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            errors.push(format!("duplicate {what} name `{n}`"));
        }
    }
}

/// Parses and validates a schema document. All violations are reported together.
pub fn load_schema(document: &str) -> Result<ConceptSchema, SchemaError> {
    let doc: Document = toml::from_str(document).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let mut errors = Vec::new();

    if doc.segmentation.is_empty() {
        errors.push("segmentation list is empty".to_string());
    } else if doc.segmentation[0] != "background" {
        errors.push(format!(
            "segmentation concept 0 must be `background`, found `{}`",
            doc.segmentation[0]
        ));
    }
    duplicates("segmentation concept", doc.segmentation.iter(), &mut errors);
    duplicates(
        "property concept",
        doc.concept.iter().map(|c| &c.name),
        &mut errors,
    );
    duplicates("anatomy", doc.anatomy.iter().map(|a| &a.name), &mut errors);

    let t = &doc.thresholds;
    if !(0.0..=1.0).contains(&t.visible) || !(0.0..=1.0).contains(&t.not_visible) {
        errors.push("thresholds must lie in [0, 1]".to_string());
    }
    if t.not_visible >= t.visible {
        errors.push("not_visible threshold must be below visible threshold".to_string());
    }
    if doc.anatomy.is_empty() {
        errors.push("schema declares no anatomy".to_string());
    }

    let seg_pos = |n: &str| doc.segmentation.iter().position(|s| s == n);
    let anat_pos = |n: &str| doc.anatomy.iter().position(|a| a.name == n);

    let mut concepts = Vec::with_capacity(doc.concept.len());
    for c in &doc.concept {
        let kind = match c.kind.as_str() {
            "binary" => Some(ConceptKind::Binary),
            "scalar" => Some(ConceptKind::Scalar),
            other => {
                errors.push(format!("concept `{}` has unknown kind `{other}`", c.name));
                None
            }
        };
        let anatomy = anat_pos(&c.anatomy);
        if anatomy.is_none() {
            errors.push(format!(
                "concept `{}` names unknown anatomy `{}`",
                c.name, c.anatomy
            ));
        }
        if c.depends_on.is_empty() {
            errors.push(format!("concept `{}` has an empty dependency list", c.name));
        }
        let mut deps = Vec::new();
        for d in &c.depends_on {
            match seg_pos(d) {
                Some(i) => deps.push(i),
                None => errors.push(format!(
                    "concept `{}` depends on unknown segmentation concept `{d}`",
                    c.name
                )),
            }
        }
        let measure = match &c.measure {
            None => None,
            Some(m) => {
                let parsed = parse_measure(m);
                if parsed.is_none() {
                    errors.push(format!("concept `{}` has unknown measure `{m}`", c.name));
                }
                parsed
            }
        };
        if let Some([lo, hi]) = c.range {
            if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
                errors.push(format!("concept `{}` has an empty range", c.name));
            }
        }
        if let (Some(kind), Some(anatomy)) = (kind, anatomy) {
            concepts.push(PropertyConcept {
                name: c.name.clone(),
                kind,
                anatomy,
                depends_on: deps,
                measure,
                range: c.range.map(|[a, b]| (a, b)),
            });
        }
    }

    let mut anatomies = Vec::with_capacity(doc.anatomy.len());
    for a in &doc.anatomy {
        if a.rules.is_empty() {
            errors.push(format!("anatomy `{}` has no rules", a.name));
        }
        let mut rules = Vec::new();
        for r in &a.rules {
            let concept = doc.concept.iter().position(|c| c.name == r.concept);
            match concept {
                None => errors.push(format!(
                    "rule of anatomy `{}` names unknown concept `{}`",
                    a.name, r.concept
                )),
                Some(ci) if doc.concept[ci].anatomy != a.name => errors.push(format!(
                    "rule of anatomy `{}` uses concept `{}` of another anatomy",
                    a.name, r.concept
                )),
                Some(_) => {}
            }
            let predicate = parse_predicate(&r.test);
            if predicate.is_none() {
                errors.push(format!(
                    "rule of anatomy `{}` has unknown test `{}`",
                    a.name, r.test
                ));
            }
            if let (Some(concept), Some(predicate)) = (concept, predicate) {
                rules.push(Rule { concept, predicate });
            }
        }
        anatomies.push(Anatomy {
            name: a.name.clone(),
            rules,
        });
    }

    if !errors.is_empty() {
        return Err(SchemaError::Invalid(errors));
    }

    let binary_index = (0..concepts.len())
        .filter(|&i| concepts[i].kind == ConceptKind::Binary)
        .collect();
    let scalar_index = (0..concepts.len())
        .filter(|&i| concepts[i].kind == ConceptKind::Scalar)
        .collect();
    Ok(ConceptSchema {
        name: doc.name,
        segmentation: doc.segmentation,
        concepts,
        anatomies,
        visible_threshold: t.visible,
        not_visible_threshold: t.not_visible,
        binary_index,
        scalar_index,
        source: document.to_string(),
    })
}

impl ConceptSchema {
    /// The synthetic benchmark schema shipped with the crate.
    pub fn geoscan() -> Self {
        load_schema(GEOSCAN_DOCUMENT).expect("bundled geoscan schema is valid")
    }

    /// Transcription of the clinical fetal-ultrasound schema.
    pub fn fetal() -> Self {
        load_schema(FETAL_DOCUMENT).expect("bundled fetal schema is valid")
    }

    /// Number of property concepts.
    pub fn d(&self) -> usize {
        self.concepts.len()
    }

    /// Number of segmentation concepts, background included.
    pub fn n(&self) -> usize {
        self.segmentation.len()
    }

    pub fn num_classes(&self) -> usize {
        2 * self.anatomies.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|i| self.class_name(ClassLabel::from_index(i)))
            .collect()
    }

    pub fn class_name(&self, label: ClassLabel) -> String {
        let suffix = if label.standard { "SP" } else { "NSP" };
        format!("{} {suffix}", self.anatomies[label.anatomy].name)
    }

    pub fn binary_indices(&self) -> &[usize] {
        &self.binary_index
    }

    pub fn scalar_indices(&self) -> &[usize] {
        &self.scalar_index
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn segmentation_index(&self, name: &str) -> Option<usize> {
        self.segmentation.iter().position(|s| s == name)
    }

    pub fn anatomy_index(&self, name: &str) -> Result<usize, SchemaError> {
        self.anatomies
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| SchemaError::UnknownAnatomy(name.to_string()))
    }

    /// Which concepts apply to an image of the given anatomy.
    pub fn applicability(&self, anatomy: usize) -> Vec<bool> {
        self.concepts.iter().map(|c| c.anatomy == anatomy).collect()
    }

    /// Organ (segmentation index) whose visibility a scalar concept scores.
    pub fn visibility_organ(&self, concept: usize) -> Option<usize> {
        let c = &self.concepts[concept];
        match c.measure {
            Some(Measure::Visibility) => c.depends_on.first().copied(),
            _ => None,
        }
    }

    /// Original document text, for embedding in checkpoints.
    pub fn source(&self) -> &str {
        &self.source
    }

    fn check_len(&self, len: usize) -> Result<(), SchemaError> {
        if len != self.d() {
            return Err(SchemaError::Length {
                expected: self.d(),
                got: len,
            });
        }
        Ok(())
    }

    fn predicate_holds(&self, p: Predicate, v: f64) -> bool {
        match p {
            Predicate::True => v > 0.5,
            Predicate::False => v <= 0.5,
            Predicate::Visible => v >= self.visible_threshold,
            Predicate::NotVisible => v <= self.not_visible_threshold,
            Predicate::AtLeast(x) => v >= x,
            Predicate::AtMost(x) => v <= x,
        }
    }
}

/// Length-d concept values with the applicability mask of the sample's anatomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub values: Vec<f64>,
    pub applicable: Vec<bool>,
}

impl ConceptVector {
    /// Validates length, range and zero padding.
    pub fn new(
        schema: &ConceptSchema,
        values: Vec<f64>,
        applicable: Vec<bool>,
    ) -> Result<Self, SchemaError> {
        schema.check_len(values.len())?;
        schema.check_len(applicable.len())?;
        for (i, (&v, &a)) in values.iter().zip(&applicable).enumerate() {
            let name = &schema.concepts[i].name;
            if !(0.0..=1.0).contains(&v) {
                return Err(SchemaError::OutOfRange {
                    name: name.clone(),
                    value: v,
                });
            }
            if !a && v != 0.0 {
                return Err(SchemaError::NonZeroPadding {
                    name: name.clone(),
                    value: v,
                });
            }
        }
        Ok(Self { values, applicable })
    }
}

/// Maps applicable binary entries to 0.01 / 0.99 (threshold 0.5), keeps scalars,
/// and forces inapplicable entries to 0. Idempotent.
pub fn smooth_labels(
    schema: &ConceptSchema,
    raw: &[f64],
    applicable: &[bool],
) -> Result<ConceptVector, SchemaError> {
    schema.check_len(raw.len())?;
    schema.check_len(applicable.len())?;
    let mut values = Vec::with_capacity(raw.len());
    for (i, (&v, &a)) in raw.iter().zip(applicable).enumerate() {
        if !a {
            values.push(0.0);
            continue;
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(SchemaError::OutOfRange {
                name: schema.concepts[i].name.clone(),
                value: v,
            });
        }
        values.push(match schema.concepts[i].kind {
            ConceptKind::Binary if v > 0.5 => SMOOTH_HIGH,
            ConceptKind::Binary => SMOOTH_LOW,
            ConceptKind::Scalar => v,
        });
    }
    Ok(ConceptVector {
        values,
        applicable: applicable.to_vec(),
    })
}

/// Partitions a concept vector into (binary, scalar) subvectors in schema order.
pub fn split_binary_scalar(
    schema: &ConceptSchema,
    values: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SchemaError> {
    schema.check_len(values.len())?;
    Ok((
        schema.binary_index.iter().map(|&i| values[i]).collect(),
        schema.scalar_index.iter().map(|&i| values[i]).collect(),
    ))
}

/// Inverse of [`split_binary_scalar`].
pub fn recombine(
    schema: &ConceptSchema,
    binary: &[f64],
    scalar: &[f64],
) -> Result<Vec<f64>, SchemaError> {
    schema.check_len(binary.len() + scalar.len())?;
    if binary.len() != schema.binary_index.len() {
        return Err(SchemaError::Length {
            expected: schema.binary_index.len(),
            got: binary.len(),
        });
    }
    let mut out = vec![0.0; schema.d()];
    for (&i, &v) in schema.binary_index.iter().zip(binary) {
        out[i] = v;
    }
    for (&i, &v) in schema.scalar_index.iter().zip(scalar) {
        out[i] = v;
    }
    Ok(out)
}

/// Label oracle: SP iff every rule of the anatomy holds on the ground-truth values.
pub fn apply_rules(
    schema: &ConceptSchema,
    values: &[f64],
    anatomy: usize,
) -> Result<ClassLabel, SchemaError> {
    schema.check_len(values.len())?;
    let a = schema
        .anatomies
        .get(anatomy)
        .ok_or(SchemaError::AnatomyIndex(anatomy))?;
    let standard = a
        .rules
        .iter()
        .all(|r| schema.predicate_holds(r.predicate, values[r.concept]));
    Ok(ClassLabel { anatomy, standard })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_schemas_have_expected_sizes() {
        let p = ConceptSchema::fetal();
        assert_eq!((p.d(), p.n()), (27, 14));
        assert_eq!(p.binary_indices().len(), 8);
        assert_eq!(p.scalar_indices().len(), 19);
        assert_eq!(p.num_classes(), 8);

        let g = ConceptSchema::geoscan();
        assert_eq!((g.d(), g.n()), (18, 10));
        assert_eq!(g.binary_indices(), &[2, 3, 4, 8, 9, 13, 14, 16]);
        assert_eq!(g.class_names()[0], "bar SP");
        assert_eq!(g.class_names()[7], "wedge NSP");
    }

    #[test]
    fn all_violations_reported() {
        let doc = r#"
            name = "bad"
            segmentation = ["background", "a", "a"]
            [thresholds]
            visible = 0.5
            not_visible = 0.2
            [[anatomy]]
            name = "x"
            rules = [{ concept = "c1", test = "sometimes" }]
            [[concept]]
            name = "c1"
            kind = "binary"
            anatomy = "x"
            depends_on = []
            [[concept]]
            name = "c1"
            kind = "fuzzy"
            anatomy = "x"
            depends_on = ["a"]
        "#;
        let SchemaError::Invalid(errs) = load_schema(doc).unwrap_err() else {
            panic!("expected validation error");
        };
        let joined = errs.join("\n");
        for needle in [
            "duplicate segmentation concept name `a`",
            "duplicate property concept name `c1`",
            "empty dependency list",
            "unknown kind `fuzzy`",
            "unknown test `sometimes`",
        ] {
            assert!(joined.contains(needle), "missing `{needle}` in {joined}");
        }
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(load_schema("name = "), Err(SchemaError::Parse(_))));
    }

    #[test]
    fn smoothing_examples() {
        let s = ConceptSchema::geoscan();
        let bar = s.anatomy_index("bar").unwrap();
        let app = s.applicability(bar);
        let mut raw = vec![0.0; s.d()];
        raw[0] = 0.7;
        raw[2] = 1.0;
        raw[3] = 0.0;
        let v = smooth_labels(&s, &raw, &app).unwrap();
        assert_eq!(v.values[0], 0.7);
        assert_eq!(v.values[2], 0.99);
        assert_eq!(v.values[3], 0.01);
        assert!(v.values[4..].iter().all(|&x| x == 0.0));

        let none = vec![false; s.d()];
        let z = smooth_labels(&s, &raw, &none).unwrap();
        assert!(z.values.iter().all(|&x| x == 0.0));

        raw[1] = 1.2;
        assert!(matches!(
            smooth_labels(&s, &raw, &app),
            Err(SchemaError::OutOfRange { .. })
        ));
    }

    #[test]
    fn split_round_trip() {
        let s = ConceptSchema::geoscan();
        let v: Vec<f64> = (0..s.d()).map(|i| i as f64 / 20.0).collect();
        let (b, c) = split_binary_scalar(&s, &v).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(recombine(&s, &b, &c).unwrap(), v);
    }

    #[test]
    fn rule_examples() {
        let s = ConceptSchema::geoscan();
        let bar = s.anatomy_index("bar").unwrap();
        let mut c = vec![0.0; s.d()];
        c[0] = 0.6;
        c[1] = 0.5;
        c[2] = 0.99;
        c[3] = 0.99;
        assert!(apply_rules(&s, &c, bar).unwrap().standard);
        c[2] = 0.01;
        assert!(!apply_rules(&s, &c, bar).unwrap().standard);

        let ring = s.anatomy_index("ring").unwrap();
        let mut h = vec![0.0; s.d()];
        for (name, v) in [
            ("ring_symmetry", 0.99),
            ("thalamus_visibility", 0.8),
            ("csp_visibility", 0.7),
            ("cerebellum_visibility", 0.1),
            ("ring_occupancy", 0.99),
        ] {
            h[s.concept_index(name).unwrap()] = v;
        }
        assert!(apply_rules(&s, &h, ring).unwrap().standard);
        h[s.concept_index("cerebellum_visibility").unwrap()] = 0.6;
        assert!(!apply_rules(&s, &h, ring).unwrap().standard);

        assert!(matches!(
            s.anatomy_index("liver"),
            Err(SchemaError::UnknownAnatomy(_))
        ));
        assert!(matches!(
            apply_rules(&s, &h, 9),
            Err(SchemaError::AnatomyIndex(9))
        ));
    }

    #[test]
    fn fetal_femur_rules() {
        let s = ConceptSchema::fetal();
        let femur = s.anatomy_index("femur").unwrap();
        let mut c = vec![0.0; s.d()];
        c[0] = 0.9;
        c[1] = 0.9;
        c[2] = 0.99;
        c[3] = 0.99;
        assert_eq!(
            s.class_name(apply_rules(&s, &c, femur).unwrap()),
            "femur SP"
        );
        c[2] = 0.01;
        assert_eq!(
            s.class_name(apply_rules(&s, &c, femur).unwrap()),
            "femur NSP"
        );
    }

    #[test]
    fn visibility_organ_is_first_dependency() {
        let s = ConceptSchema::geoscan();
        let i = s.concept_index("stomach_visibility").unwrap();
        assert_eq!(s.visibility_organ(i), s.segmentation_index("stomach"));
        assert_eq!(
            s.visibility_organ(s.concept_index("disk_symmetry").unwrap()),
            None
        );
    }
}
