//! Attribute thresholding and caption generation.
//!
//! Twelve binary pedestrian attributes in four groups are thresholded from
//! predictor confidences and rendered into a fixed English template. Captions
//! are a pure function of the [`AttributeVector`] and [`TEMPLATE_VERSION`].

use std::collections::BTreeMap;
use std::fmt;

use crate::datakit::ManifestRecord;
use crate::error::{Error, Result};

pub const NUM_ATTRIBUTES: usize = 12;
pub const TEMPLATE_VERSION: &str = "v1";
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const GENERIC_TEXT: &str = "A photo of a person";

pub const SEX: usize = 0;
pub const LOWER_BODY: [usize; 3] = [4, 5, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Overall,
    UpperBody,
    LowerBody,
    Decoration,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Overall, Group::UpperBody, Group::LowerBody, Group::Decoration];

    pub fn name(self) -> &'static str {
        match self {
            Group::Overall => "overall",
            Group::UpperBody => "upper body",
            Group::LowerBody => "lower body",
            Group::Decoration => "decoration",
        }
    }

    fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryDescriptor {
    pub name: String,
    pub group: Group,
    /// Labels for the `0` and `1` values.
    pub labels: [String; 2],
}

/// The ordered 12-category, 4-group attribute schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    groups: Vec<Group>,
    categories: Vec<CategoryDescriptor>,
}

const DEFAULT_CATEGORIES: [(&str, Group, &str, &str); NUM_ATTRIBUTES] = [
    ("Sex", Group::Overall, "man", "woman"),
    ("Short sleeved top", Group::UpperBody, "No", "Yes"),
    ("Long sleeved top", Group::UpperBody, "No", "Yes"),
    ("Long coat", Group::UpperBody, "No", "Yes"),
    ("Trousers", Group::LowerBody, "No", "Yes"),
    ("Shorts", Group::LowerBody, "No", "Yes"),
    ("Skirt", Group::LowerBody, "No", "Yes"),
    ("Hat", Group::Decoration, "No", "Yes"),
    ("Glasses", Group::Decoration, "No", "Yes"),
    ("Handbag", Group::Decoration, "No", "Yes"),
    ("Shoulder bag", Group::Decoration, "No", "Yes"),
    ("Backpack", Group::Decoration, "No", "Yes"),
];

/// Caption phrase for each non-sex category, in schema order.
const PHRASES: [&str; NUM_ATTRIBUTES] = [
    "",
    "a short sleeved top",
    "a long sleeved top",
    "a long coat",
    "trousers",
    "shorts",
    "a skirt",
    "a hat",
    "glasses",
    "a handbag",
    "a shoulder bag",
    "a backpack",
];

/// Decoration items that are worn rather than carried.
const WORN_DECORATION: [usize; 2] = [7, 8];

impl Default for AttributeSchema {
    fn default() -> Self {
        let categories = DEFAULT_CATEGORIES
            .iter()
            .map(|(n, g, l0, l1)| CategoryDescriptor {
                name: (*n).to_string(),
                group: *g,
                labels: [(*l0).to_string(), (*l1).to_string()],
            })
            .collect();
        Self { groups: Group::ALL.to_vec(), categories }
    }
}

impl AttributeSchema {
    pub fn new(groups: Vec<Group>, categories: Vec<CategoryDescriptor>) -> Result<Self> {
        let schema = Self { groups, categories };
        schema.validate()?;
        Ok(schema)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn categories(&self) -> &[CategoryDescriptor] {
        &self.categories
    }

    pub fn category_names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != 4 {
            return Err(Error::SchemaMismatch(format!("expected 4 groups, found {}", self.groups.len())));
        }
        if self.categories.len() != NUM_ATTRIBUTES {
            return Err(Error::SchemaMismatch(format!(
                "expected {NUM_ATTRIBUTES} categories, found {}",
                self.categories.len()
            )));
        }
        for c in &self.categories {
            if !self.groups.contains(&c.group) {
                return Err(Error::SchemaMismatch(format!("category {} has unknown group", c.name)));
            }
        }
        let overall: Vec<&str> =
            self.categories.iter().filter(|c| c.group == Group::Overall).map(|c| c.name.as_str()).collect();
        if overall != ["Sex"] {
            return Err(Error::SchemaMismatch(format!("overall group must hold only Sex, found {overall:?}")));
        }
        Ok(())
    }

    /// Versioned text form: one `group` line per group, one `category` line per category.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# attribute-schema v1\n");
        for g in &self.groups {
            out.push_str(&format!("group\t{}\n", g.name()));
        }
        for c in &self.categories {
            out.push_str(&format!("category\t{}\t{}\t{}\t{}\n", c.name, c.group.name(), c.labels[0], c.labels[1]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { path: "<schema>".into(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "# attribute-schema v1")) => {}
            _ => return Err(parse_err(1, "missing `# attribute-schema v1` header".into())),
        }
        let mut groups = Vec::new();
        let mut categories = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["group", name] => {
                    groups.push(Group::from_name(name).ok_or_else(|| parse_err(i + 1, format!("unknown group {name}")))?)
                }
                ["category", name, group, l0, l1] => categories.push(CategoryDescriptor {
                    name: (*name).to_string(),
                    group: Group::from_name(group).ok_or_else(|| parse_err(i + 1, format!("unknown group {group}")))?,
                    labels: [(*l0).to_string(), (*l1).to_string()],
                }),
                _ => return Err(parse_err(i + 1, format!("unrecognised line `{line}`"))),
            }
        }
        Self::new(groups, categories)
    }
}

/// Predictor confidences keyed by category name.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributePrediction {
    pub scores: BTreeMap<String, f64>,
}

impl AttributePrediction {
    /// Builds a prediction from confidences ordered like the default schema.
    pub fn from_ordered(scores: [f64; NUM_ATTRIBUTES]) -> Self {
        let schema = AttributeSchema::default();
        Self { scores: schema.category_names().map(str::to_string).zip(scores).collect() }
    }

    /// Confidences in schema order, after validating completeness and range.
    pub fn ordered(&self, schema: &AttributeSchema) -> Result<[f64; NUM_ATTRIBUTES]> {
        if self.scores.len() != NUM_ATTRIBUTES {
            let extra: Vec<&String> =
                self.scores.keys().filter(|k| !schema.category_names().any(|n| n == k.as_str())).collect();
            if !extra.is_empty() {
                return Err(Error::SchemaMismatch(format!("unknown categories {extra:?}")));
            }
        }
        let mut out = [0.0; NUM_ATTRIBUTES];
        for (i, name) in schema.category_names().enumerate() {
            let s = *self
                .scores
                .get(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("prediction is missing category `{name}`")))?;
            if s.is_nan() {
                return Err(Error::invalid(format!("confidence for `{name}` is NaN")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!("confidence {s} for `{name}` is outside [0, 1]")));
            }
            out[i] = s;
        }
        Ok(out)
    }
}

/// Resolved value of the overall (Sex) category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sex {
    Woman,
    Man,
    /// Neither label cleared the threshold.
    Unspecified,
}

/// Twelve thresholded attribute flags in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector {
    values: [bool; NUM_ATTRIBUTES],
    source_confidences: [f64; NUM_ATTRIBUTES],
    sex: Sex,
}

impl AttributeVector {
    /// Flags taken at face value; a false Sex flag leaves the sex unspecified.
    pub fn from_flags(values: [bool; NUM_ATTRIBUTES]) -> Self {
        let source_confidences = values.map(|v| if v { 1.0 } else { 0.0 });
        let sex = if values[SEX] { Sex::Woman } else { Sex::Unspecified };
        Self { values, source_confidences, sex }
    }

    pub fn all_false() -> Self {
        Self::from_flags([false; NUM_ATTRIBUTES])
    }

    pub fn with_sex(mut self, sex: Sex) -> Self {
        self.sex = sex;
        self.values[SEX] = sex == Sex::Woman;
        self
    }

    pub fn values(&self) -> &[bool; NUM_ATTRIBUTES] {
        &self.values
    }

    pub fn source_confidences(&self) -> &[f64; NUM_ATTRIBUTES] {
        &self.source_confidences
    }

    pub fn sex(&self) -> Sex {
        self.sex
    }

    pub fn is_set(&self, idx: usize) -> bool {
        self.values[idx]
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_ATTRIBUTES).filter(|&i| self.values[i])
    }

    /// The flags as `0.0` / `1.0`, for the attribute projection.
    pub fn as_reals(&self) -> [f64; NUM_ATTRIBUTES] {
        self.values.map(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn lower_body_count(&self) -> usize {
        LOWER_BODY.iter().filter(|&&i| self.values[i]).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdOptions {
    pub threshold: f64,
    /// Keep at most one of Trousers / Shorts / Skirt (highest confidence wins, ties go to schema order).
    pub lower_body_exclusive: bool,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, lower_body_exclusive: true }
    }
}

pub fn threshold_attributes(pred: &AttributePrediction, threshold: f64) -> Result<AttributeVector> {
    threshold_attributes_with(pred, &ThresholdOptions { threshold, ..Default::default() })
}

pub fn threshold_attributes_with(pred: &AttributePrediction, opts: &ThresholdOptions) -> Result<AttributeVector> {
    let t = opts.threshold;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} is outside [0, 1]")));
    }
    let scores = pred.ordered(&AttributeSchema::default())?;
    let mut values = scores.map(|s| s >= t);
    if opts.lower_body_exclusive {
        let mut best: Option<usize> = None;
        for &i in &LOWER_BODY {
            if values[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        for &i in &LOWER_BODY {
            values[i] = best == Some(i);
        }
    }
    let sex = if values[SEX] {
        Sex::Woman
    } else if 1.0 - scores[SEX] >= t {
        Sex::Man
    } else {
        Sex::Unspecified
    };
    Ok(AttributeVector { values, source_confidences: scores, sex })
}

/// A rendered caption.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextDescription(String);

impl TextDescription {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("text description must be non-empty"));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TextDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn join_phrases(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => (*one).to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Renders `A photo of {subject} wearing {clothes}{decoration}.`
pub fn render_text(av: &AttributeVector, schema: &AttributeSchema) -> TextDescription {
    let in_group = |g: Group| -> Vec<usize> {
        (0..NUM_ATTRIBUTES).filter(|&i| schema.categories()[i].group == g && av.values[i]).collect()
    };
    let subject = match av.sex {
        Sex::Woman => "a woman",
        Sex::Man => "a man",
        Sex::Unspecified => "a person",
    };
    let clothes_idx: Vec<usize> = in_group(Group::UpperBody).into_iter().chain(in_group(Group::LowerBody)).collect();
    let clothes: Vec<&str> = clothes_idx.iter().map(|&i| PHRASES[i]).collect();
    let clothes = if clothes.is_empty() { "clothes".to_string() } else { join_phrases(&clothes) };

    let deco = in_group(Group::Decoration);
    let worn: Vec<&str> = deco.iter().filter(|i| WORN_DECORATION.contains(i)).map(|&i| PHRASES[i]).collect();
    let carried: Vec<&str> = deco.iter().filter(|i| !WORN_DECORATION.contains(i)).map(|&i| PHRASES[i]).collect();
    let decoration = if deco.is_empty() {
        " with no accessories".to_string()
    } else {
        let mut parts = Vec::new();
        if !worn.is_empty() {
            parts.push(format!("with {}", join_phrases(&worn)));
        }
        if !carried.is_empty() {
            parts.push(format!("carrying {}", join_phrases(&carried)));
        }
        format!(", {}", parts.join(", "))
    };
    TextDescription(format!("A photo of {subject} wearing {clothes}{decoration}."))
}

/// The attribute-free caption used when caption generation is ablated.
pub fn generic_text() -> TextDescription {
    TextDescription(GENERIC_TEXT.to_string())
}

/// Source of attribute confidences for a sample.
pub trait AttributePredictor: Send + Sync {
    fn predict(&self, record: &ManifestRecord) -> Result<AttributePrediction>;
}

/// Reads the attribute flags stored in the manifest as hard 0/1 confidences.
#[derive(Clone, Copy, Debug, Default)]
pub struct ManifestAttributes;

impl AttributePredictor for ManifestAttributes {
    fn predict(&self, record: &ManifestRecord) -> Result<AttributePrediction> {
        Ok(AttributePrediction::from_ordered(record.attributes.map(|b| if b { 1.0 } else { 0.0 })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred_with(pairs: &[(usize, f64)], rest: f64) -> AttributePrediction {
        let mut s = [rest; NUM_ATTRIBUTES];
        for &(i, v) in pairs {
            s[i] = v;
        }
        AttributePrediction::from_ordered(s)
    }

    #[test]
    fn hat_alone_clears_default_threshold() {
        let av = threshold_attributes(&pred_with(&[(7, 0.85)], 0.1), 0.80).unwrap();
        assert_eq!(av.active().collect::<Vec<_>>(), vec![7]);
    }

    #[test]
    fn all_zero_scores_give_all_false() {
        for t in [0.01, 0.5, 0.8, 1.0] {
            let av = threshold_attributes(&pred_with(&[], 0.0), t).unwrap();
            assert!(av.values().iter().all(|v| !v));
        }
    }

    #[test]
    fn lower_body_conflict_keeps_highest() {
        let av = threshold_attributes(&pred_with(&[(4, 0.9), (6, 0.95)], 0.0), 0.8).unwrap();
        assert_eq!(av.active().collect::<Vec<_>>(), vec![6]);
        // tie goes to schema order
        let av = threshold_attributes(&pred_with(&[(5, 0.9), (6, 0.9)], 0.0), 0.8).unwrap();
        assert_eq!(av.active().collect::<Vec<_>>(), vec![5]);
        let opts = ThresholdOptions { threshold: 0.8, lower_body_exclusive: false };
        let av = threshold_attributes_with(&pred_with(&[(4, 0.9), (6, 0.95)], 0.0), &opts).unwrap();
        assert_eq!(av.active().collect::<Vec<_>>(), vec![4, 6]);
    }

    #[test]
    fn threshold_is_inclusive() {
        let av = threshold_attributes(&pred_with(&[(8, 0.8)], 0.0), 0.8).unwrap();
        assert!(av.is_set(8));
        let av = threshold_attributes(&pred_with(&[(8, 0.8 - 1e-12)], 0.0), 0.8).unwrap();
        assert!(!av.is_set(8));
    }

    #[test]
    fn missing_category_and_nan_are_rejected() {
        let mut p = pred_with(&[], 0.1);
        p.scores.remove("Backpack");
        assert!(matches!(threshold_attributes(&p, 0.8), Err(Error::SchemaMismatch(_))));
        let p = pred_with(&[(3, f64::NAN)], 0.1);
        assert!(matches!(threshold_attributes(&p, 0.8), Err(Error::InvalidInput(_))));
        assert!(threshold_attributes(&pred_with(&[], 0.1), 1.5).is_err());
    }

    #[test]
    fn sex_resolution() {
        let woman = threshold_attributes(&pred_with(&[(0, 0.9)], 0.0), 0.8).unwrap();
        assert_eq!(woman.sex(), Sex::Woman);
        let man = threshold_attributes(&pred_with(&[(0, 0.1)], 0.0), 0.8).unwrap();
        assert_eq!(man.sex(), Sex::Man);
        let unsure = threshold_attributes(&pred_with(&[(0, 0.5)], 0.0), 0.8).unwrap();
        assert_eq!(unsure.sex(), Sex::Unspecified);
    }

    #[test]
    fn rendered_captions() {
        let schema = AttributeSchema::default();
        assert_eq!(
            render_text(&AttributeVector::all_false(), &schema).as_str(),
            "A photo of a person wearing clothes with no accessories."
        );
        let mut f = [false; NUM_ATTRIBUTES];
        f[0] = true;
        f[6] = true;
        f[9] = true;
        assert_eq!(
            render_text(&AttributeVector::from_flags(f), &schema).as_str(),
            "A photo of a woman wearing a skirt, carrying a handbag."
        );
        let mut f = [false; NUM_ATTRIBUTES];
        f[2] = true;
        f[4] = true;
        f[11] = true;
        let av = AttributeVector::from_flags(f).with_sex(Sex::Man);
        assert_eq!(
            render_text(&av, &schema).as_str(),
            "A photo of a man wearing a long sleeved top and trousers, carrying a backpack."
        );
        let mut f = [false; NUM_ATTRIBUTES];
        f[7] = true;
        f[8] = true;
        f[10] = true;
        assert_eq!(
            render_text(&AttributeVector::from_flags(f), &schema).as_str(),
            "A photo of a person wearing clothes, with a hat and glasses, carrying a shoulder bag."
        );
    }

    #[test]
    fn generic_text_is_fixed() {
        assert_eq!(generic_text().as_str(), "A photo of a person");
        assert_eq!(generic_text(), generic_text());
    }

    #[test]
    fn schema_text_round_trip_and_validation() {
        let schema = AttributeSchema::default();
        assert_eq!(AttributeSchema::from_text(&schema.to_text()).unwrap(), schema);
        let broken = schema.to_text().replace("category\tHat\tdecoration", "category\tHat\toverall");
        assert!(matches!(AttributeSchema::from_text(&broken), Err(Error::SchemaMismatch(_))));
        assert!(AttributeSchema::from_text("group\toverall\n").is_err());
    }
}
