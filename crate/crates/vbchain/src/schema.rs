//! Label schema, prediction containers and target-scale helpers shared by
//! every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of emotion intensity labels.
pub const NUM_EMOTIONS: usize = 10;
/// Number of countries.
pub const NUM_COUNTRIES: usize = 4;
/// Number of vocal-burst type classes.
pub const NUM_VB_TYPES: usize = 8;
/// Culture label dimension: one emotion block per country, country-major.
pub const CULTURE_DIM: usize = NUM_COUNTRIES * NUM_EMOTIONS;

/// The five prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Two,
    High,
    Culture,
    Type,
    Country,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Two, Task::High, Task::Culture, Task::Type, Task::Country];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Two => "two",
            Task::High => "high",
            Task::Culture => "culture",
            Task::Type => "type",
            Task::Country => "country",
        }
    }

    /// Output dimensionality of the task head.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Two => 2,
            Task::High => NUM_EMOTIONS,
            Task::Culture => CULTURE_DIM,
            Task::Type => NUM_VB_TYPES,
            Task::Country => NUM_COUNTRIES,
        }
    }

    /// True for the regression tasks trained with the concordance loss.
    pub fn is_regression(&self) -> bool {
        matches!(self, Task::Two | Task::High | Task::Culture)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "two" => Ok(Task::Two),
            "high" => Ok(Task::High),
            "culture" => Ok(Task::Culture),
            "type" => Ok(Task::Type),
            "country" => Ok(Task::Country),
            other => Err(Error::InvalidArgument(format!(
                "unknown task `{other}`; expected one of {{two, high, culture, type, country}}"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLabelSchema {
    emotions: Vec<String>,
    countries: Vec<String>,
    vb_types: Vec<String>,
    two_range: (f64, f64),
    high_range: (f64, f64),
}

/// Names and value ranges of every label dimension.
///
/// The emotion list is configuration-driven: the default carries the seven
/// documented names plus three `placeholder_*` entries that deployments are
/// expected to replace with the real taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSchema", into = "RawLabelSchema")]
pub struct LabelSchema {
    emotions: Vec<String>,
    countries: Vec<String>,
    vb_types: Vec<String>,
    two_range: (f64, f64),
    high_range: (f64, f64),
}

impl Default for LabelSchema {
    fn default() -> Self {
        LabelSchema {
            emotions: [
                "amusement",
                "awkwardness",
                "excitement",
                "fear",
                "horror",
                "sadness",
                "surprise",
                "placeholder_1",
                "placeholder_2",
                "placeholder_3",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            countries: ["US", "China", "Venezuela", "South Africa"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vb_types: ["cry", "gasp", "groan", "grunt", "laugh", "pant", "scream", "other"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            two_range: (1.0, 9.0),
            high_range: (1.0, 100.0),
        }
    }
}

impl LabelSchema {
    pub fn new(
        emotions: Vec<String>,
        countries: Vec<String>,
        vb_types: Vec<String>,
        two_range: (f64, f64),
        high_range: (f64, f64),
    ) -> Result<Self> {
        let schema = LabelSchema { emotions, countries, vb_types, two_range, high_range };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        check_names("emotions", &self.emotions, NUM_EMOTIONS)?;
        check_names("countries", &self.countries, NUM_COUNTRIES)?;
        check_names("vb_types", &self.vb_types, NUM_VB_TYPES)?;
        check_range("two_range", self.two_range)?;
        check_range("high_range", self.high_range)?;
        Ok(())
    }

    pub fn emotions(&self) -> &[String] {
        &self.emotions
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn vb_types(&self) -> &[String] {
        &self.vb_types
    }

    pub fn two_range(&self) -> (f64, f64) {
        self.two_range
    }

    pub fn high_range(&self) -> (f64, f64) {
        self.high_range
    }

    pub fn country_index(&self, name: &str) -> Option<usize> {
        self.countries.iter().position(|c| c == name)
    }

    pub fn vb_type_index(&self, name: &str) -> Option<usize> {
        self.vb_types.iter().position(|t| t == name)
    }

    pub fn emotion_index(&self, name: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e == name)
    }

    /// Human-readable name for a culture label column.
    pub fn culture_label(&self, index: usize) -> String {
        let country = &self.countries[index / NUM_EMOTIONS];
        let emotion = &self.emotions[index % NUM_EMOTIONS];
        format!("{country}/{emotion}")
    }
}

impl TryFrom<RawLabelSchema> for LabelSchema {
    type Error = Error;

    fn try_from(raw: RawLabelSchema) -> Result<Self> {
        LabelSchema::new(raw.emotions, raw.countries, raw.vb_types, raw.two_range, raw.high_range)
    }
}

impl From<LabelSchema> for RawLabelSchema {
    fn from(s: LabelSchema) -> Self {
        RawLabelSchema {
            emotions: s.emotions,
            countries: s.countries,
            vb_types: s.vb_types,
            two_range: s.two_range,
            high_range: s.high_range,
        }
    }
}

fn check_names(what: &str, names: &[String], expected: usize) -> Result<()> {
    if names.len() != expected {
        return Err(Error::Schema(format!(
            "{what}: expected exactly {expected} names, got {}",
            names.len()
        )));
    }
    for (i, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::Schema(format!("{what}[{i}] is empty")));
        }
        if names[..i].contains(name) {
            return Err(Error::Schema(format!("{what}: duplicate name `{name}`")));
        }
    }
    Ok(())
}

fn check_range(what: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Schema(format!("{what}: need finite lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Maps a raw label value onto the sigmoid output space `[0, 1]`.
pub fn normalize_target(raw: f64, range: (f64, f64)) -> Result<f64> {
    check_range("range", range)?;
    if !raw.is_finite() {
        return Err(Error::NonFinite("normalize_target input".into()));
    }
    let (lo, hi) = range;
    Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Inverse of [`normalize_target`] over `[lo, hi]`.
pub fn denormalize_target(v: f64, range: (f64, f64)) -> Result<f64> {
    check_range("range", range)?;
    if !v.is_finite() || v < -1e-9 || v > 1.0 + 1e-9 {
        return Err(Error::OutOfRange { what: "normalized value".into(), value: v, lo: 0.0, hi: 1.0 });
    }
    let (lo, hi) = range;
    Ok(lo + v.clamp(0.0, 1.0) * (hi - lo))
}

/// Column index of `(country, emotion)` in the country-major culture layout.
pub fn culture_index(country_idx: usize, emotion_idx: usize) -> Result<usize> {
    if country_idx >= NUM_COUNTRIES {
        return Err(Error::InvalidArgument(format!(
            "country index {country_idx} out of range 0..{NUM_COUNTRIES}"
        )));
    }
    if emotion_idx >= NUM_EMOTIONS {
        return Err(Error::InvalidArgument(format!(
            "emotion index {emotion_idx} out of range 0..{NUM_EMOTIONS}"
        )));
    }
    Ok(country_idx * NUM_EMOTIONS + emotion_idx)
}

/// Per-sample outputs of all five task heads.
///
/// Construction checks every arity and probability-simplex invariant, so a
/// value of this type is well-formed by definition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskPredictions {
    two: [f64; 2],
    high: Vec<f64>,
    country_probs: Vec<f64>,
    culture: Vec<f64>,
    vb_type_probs: Vec<f64>,
}

impl TaskPredictions {
    pub fn new(
        two: Vec<f64>,
        high: Vec<f64>,
        country_probs: Vec<f64>,
        culture: Vec<f64>,
        vb_type_probs: Vec<f64>,
    ) -> Result<Self> {
        if two.len() != 2 {
            return Err(Error::ShapeMismatch(format!("two: expected 2 values, got {}", two.len())));
        }
        check_unit_interval("two", &two)?;
        check_len_unit_interval("high", &high, NUM_EMOTIONS)?;
        check_len_unit_interval("culture", &culture, CULTURE_DIM)?;
        check_probs("country_probs", &country_probs, NUM_COUNTRIES)?;
        check_probs("vb_type_probs", &vb_type_probs, NUM_VB_TYPES)?;
        Ok(TaskPredictions { two: [two[0], two[1]], high, country_probs, culture, vb_type_probs })
    }

    pub fn two(&self) -> &[f64; 2] {
        &self.two
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn country_probs(&self) -> &[f64] {
        &self.country_probs
    }

    pub fn culture(&self) -> &[f64] {
        &self.culture
    }

    pub fn vb_type_probs(&self) -> &[f64] {
        &self.vb_type_probs
    }

    /// Flat view of one task's outputs.
    pub fn task_values(&self, task: Task) -> &[f64] {
        match task {
            Task::Two => &self.two,
            Task::High => &self.high,
            Task::Culture => &self.culture,
            Task::Type => &self.vb_type_probs,
            Task::Country => &self.country_probs,
        }
    }
}

fn check_unit_interval(what: &str, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(Error::OutOfRange { what: format!("{what}[{i}]"), value: v, lo: 0.0, hi: 1.0 });
        }
    }
    Ok(())
}

fn check_len_unit_interval(what: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expected} values, got {}",
            values.len()
        )));
    }
    check_unit_interval(what, values)
}

fn check_probs(what: &str, probs: &[f64], expected: usize) -> Result<()> {
    if probs.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expected} values, got {}",
            probs.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < -1e-12 {
            return Err(Error::OutOfRange { what: format!("{what}[{i}]"), value: p, lo: 0.0, hi: 1.0 });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{what}: probabilities sum to {sum}, not 1")));
    }
    Ok(())
}
