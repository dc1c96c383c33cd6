//! Dataset manifests: one CSV row per utterance with optional labels.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{LabelSchema, Task, CULTURE_DIM, NUM_EMOTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}`; expected train, val or test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One utterance with whatever labels are present. Absent labels are legal
/// so partially annotated rows can share a manifest with fully labeled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub file_id: String,
    pub split: Split,
    pub country: Option<String>,
    pub vb_type: Option<String>,
    pub arousal: Option<f64>,
    pub valence: Option<f64>,
    pub high: Option<Vec<f64>>,
    pub culture: Option<Vec<f64>>,
}

impl Sample {
    pub fn has_labels_for(&self, task: Task) -> bool {
        match task {
            Task::Two => self.arousal.is_some() && self.valence.is_some(),
            Task::High => self.high.is_some(),
            Task::Culture => self.culture.is_some(),
            Task::Type => self.vb_type.is_some(),
            Task::Country => self.country.is_some(),
        }
    }
}

/// Validated collection of samples: unique ids, schema-conformant names and
/// label values inside the schema ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    samples: Vec<Sample>,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>, schema: &LabelSchema) -> Result<Self> {
        let mut ids = HashSet::new();
        for (i, sample) in samples.iter().enumerate() {
            validate_sample(sample, schema).map_err(|e| match e {
                Error::ManifestRow { .. } => e,
                other => Error::ManifestRow { row: i + 1, message: other.to_string() },
            })?;
            if !ids.insert(sample.file_id.clone()) {
                return Err(Error::DuplicateFileId(sample.file_id.clone()));
            }
        }
        Ok(Manifest { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn validate_sample(sample: &Sample, schema: &LabelSchema) -> Result<()> {
    if sample.file_id.is_empty() {
        return Err(Error::InvalidArgument("file_id is empty".into()));
    }
    if let Some(country) = &sample.country {
        if schema.country_index(country).is_none() {
            return Err(Error::InvalidArgument(format!("unknown country `{country}`")));
        }
    }
    if let Some(vb_type) = &sample.vb_type {
        if schema.vb_type_index(vb_type).is_none() {
            return Err(Error::InvalidArgument(format!("unknown vb_type `{vb_type}`")));
        }
    }
    let two = schema.two_range();
    for (name, value) in [("arousal", sample.arousal), ("valence", sample.valence)] {
        if let Some(v) = value {
            check_in_range(name, v, two)?;
        }
    }
    let high_range = schema.high_range();
    if let Some(high) = &sample.high {
        if high.len() != NUM_EMOTIONS {
            return Err(Error::ShapeMismatch(format!(
                "high: expected {NUM_EMOTIONS} values, got {}",
                high.len()
            )));
        }
        for (j, &v) in high.iter().enumerate() {
            check_in_range(&format!("high_{j}"), v, high_range)?;
        }
    }
    if let Some(culture) = &sample.culture {
        if culture.len() != CULTURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "culture: expected {CULTURE_DIM} values, got {}",
                culture.len()
            )));
        }
        for (j, &v) in culture.iter().enumerate() {
            check_in_range(&format!("culture_{j}"), v, high_range)?;
        }
    }
    Ok(())
}

fn check_in_range(name: &str, value: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !value.is_finite() || value < lo || value > hi {
        return Err(Error::OutOfRange { what: name.to_string(), value, lo, hi });
    }
    Ok(())
}

fn header_columns() -> Vec<String> {
    let mut cols = vec![
        "file_id".to_string(),
        "split".to_string(),
        "country".to_string(),
        "vb_type".to_string(),
        "arousal".to_string(),
        "valence".to_string(),
    ];
    cols.extend((0..NUM_EMOTIONS).map(|j| format!("high_{j}")));
    cols.extend((0..CULTURE_DIM).map(|j| format!("culture_{j}")));
    cols
}

pub fn write_manifest(manifest: &Manifest, schema: &LabelSchema, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "# high_j = {}; culture_k = country-major blocks over ({}) x ({})",
        schema.emotions().join(","),
        schema.countries().join(","),
        schema.emotions().join(",")
    )?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(header_columns())?;
    for sample in manifest.samples() {
        let mut record: Vec<String> = vec![
            sample.file_id.clone(),
            sample.split.to_string(),
            sample.country.clone().unwrap_or_default(),
            sample.vb_type.clone().unwrap_or_default(),
            opt_num(sample.arousal),
            opt_num(sample.valence),
        ];
        match &sample.high {
            Some(values) => record.extend(values.iter().map(|v| v.to_string())),
            None => record.extend(std::iter::repeat(String::new()).take(NUM_EMOTIONS)),
        }
        match &sample.culture {
            Some(values) => record.extend(values.iter().map(|v| v.to_string())),
            None => record.extend(std::iter::repeat(String::new()).take(CULTURE_DIM)),
        }
        writer.write_record(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path, schema: &LabelSchema) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let expected = header_columns();
    let headers = reader.headers()?.clone();
    if headers.iter().map(str::to_string).collect::<Vec<_>>() != expected {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected manifest header; expected `{}`",
            path.display(),
            expected.join(",")
        )));
    }

    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let sample = parse_row(&record, row)?;
        validate_sample(&sample, schema)
            .map_err(|e| Error::ManifestRow { row, message: e.to_string() })?;
        samples.push(sample);
    }
    Manifest::new(samples, schema)
}

fn parse_row(record: &csv::StringRecord, row: usize) -> Result<Sample> {
    let field = |idx: usize| record.get(idx).unwrap_or_default().trim();
    let err = |message: String| Error::ManifestRow { row, message };

    let split: Split = field(1).parse().map_err(|e: Error| err(e.to_string()))?;
    let opt_string = |idx: usize| {
        let v = field(idx);
        if v.is_empty() {
            None
        } else {
            Some(v.to_string())
        }
    };
    let opt_f64 = |idx: usize, name: &str| -> Result<Option<f64>> {
        let v = field(idx);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse::<f64>()
            .map(Some)
            .map_err(|_| err(format!("{name}: malformed numeric `{v}`")))
    };
    let block = |start: usize, len: usize, name: &str| -> Result<Option<Vec<f64>>> {
        let mut values = Vec::with_capacity(len);
        let mut present = 0usize;
        for j in 0..len {
            if let Some(v) = opt_f64(start + j, &format!("{name}_{j}"))? {
                values.push(v);
                present += 1;
            }
        }
        match present {
            0 => Ok(None),
            p if p == len => Ok(Some(values)),
            p => Err(err(format!("{name}: {p} of {len} cells filled; need all or none"))),
        }
    };

    Ok(Sample {
        file_id: field(0).to_string(),
        split,
        country: opt_string(2),
        vb_type: opt_string(3),
        arousal: opt_f64(4, "arousal")?,
        valence: opt_f64(5, "valence")?,
        high: block(6, NUM_EMOTIONS, "high")?,
        culture: block(6 + NUM_EMOTIONS, CULTURE_DIM, "culture")?,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
