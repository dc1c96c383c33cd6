//! Deterministic synthetic dataset with planted structure: emotions are
//! sigmoid readouts of a shared arousal/valence latent (so label pairs
//! correlate with both signs), burst types follow a quadrant rule, and
//! features are a fixed affine image of the latent broadcast over frames.
//!
//! Everything is a pure function of `(spec, schema, sample index)`, which
//! makes the generator usable both as a file writer and as an on-the-fly
//! feature provider, and lets tests reconstruct every label from the
//! exposed generating model.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{write_manifest, Manifest, Sample, Split};
use crate::dataio::store::{
    write_feature_stack, write_index, FeatureProvider, FeatureStack, IndexEntry,
};
use crate::error::{Error, Result};
use crate::schema::{
    culture_index, denormalize_target, LabelSchema, CULTURE_DIM, NUM_COUNTRIES, NUM_EMOTIONS,
    NUM_VB_TYPES,
};
use crate::seeding::derive_seed;

/// Generation parameters. The same spec always produces byte-identical
/// manifests and feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub seed: u64,
    /// Standard deviation of both the emotion label noise and the per-frame
    /// feature noise.
    pub noise_std: f64,
    /// Layers in each generated feature stack (index 0 plays the role of
    /// the convolutional map).
    pub num_layers: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Magnitude of the fixed per-country label offsets.
    pub country_offset: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 512,
            seed: 0,
            noise_std: 0.05,
            num_layers: 4,
            frames: 10,
            feature_dim: 32,
            country_offset: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.country_offset >= 0.0) {
            return Err(Error::InvalidArgument("noise_std and country_offset must be >= 0".into()));
        }
        if self.num_layers == 0 || self.frames == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("stack dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Latent input dimension of the feature map: arousal, valence, country
/// one-hot and type one-hot.
const LATENT_DIM: usize = 2 + NUM_COUNTRIES + NUM_VB_TYPES;

/// The fixed tables drawn once from the spec seed. Exposed so tests can
/// reconstruct labels in closed form.
#[derive(Debug, Clone)]
pub struct SynthModel {
    /// Rows of the emotion readout over `[a, v, 1]`: `e_j = sigmoid(row . [a, v, 1])`.
    pub emotion_map: Vec<[f64; 3]>,
    /// Fixed additive emotion offset per country.
    pub country_emotion_offset: Vec<Vec<f64>>,
    /// Fixed perturbation added to each culture block, indexed by
    /// `culture_index(country, emotion)`.
    pub culture_delta: Vec<f64>,
    /// Feature map over the latent vector, `feature_dim x LATENT_DIM`.
    pub feature_map: Vec<Vec<f64>>,
    pub feature_bias: Vec<f64>,
    /// Per-layer gain applied to the shared base signal.
    pub layer_gain: Vec<f64>,
    /// Per-layer additive offset, `num_layers x feature_dim`.
    pub layer_offset: Vec<Vec<f64>>,
}

impl SynthModel {
    pub fn from_spec(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x7ab1e5));
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        };

        // First three rows are pinned so the label matrix always carries one
        // strongly positive and one negative correlation.
        let mut emotion_map = vec![
            [3.0, 3.0, -3.0],
            [2.8, 2.2, -2.5],
            [-3.0, -3.0, 3.0],
        ];
        for _ in 3..NUM_EMOTIONS {
            let wa = rng.gen_range(-3.5..3.5);
            let wv = rng.gen_range(-3.5..3.5);
            let b = -(wa + wv) / 2.0 + rng.gen_range(-0.4..0.4);
            emotion_map.push([wa, wv, b]);
        }

        let country_emotion_offset = (0..NUM_COUNTRIES)
            .map(|_| (0..NUM_EMOTIONS).map(|_| normal(&mut rng, spec.country_offset)).collect())
            .collect();
        let culture_delta =
            (0..CULTURE_DIM).map(|_| normal(&mut rng, spec.country_offset)).collect();

        let feature_map = (0..spec.feature_dim)
            .map(|_| (0..LATENT_DIM).map(|_| normal(&mut rng, 0.5)).collect())
            .collect();
        let feature_bias = (0..spec.feature_dim).map(|_| normal(&mut rng, 0.2)).collect();
        let layer_gain = (0..spec.num_layers).map(|_| rng.gen_range(0.6..1.4)).collect();
        let layer_offset = (0..spec.num_layers)
            .map(|_| (0..spec.feature_dim).map(|_| normal(&mut rng, 0.3)).collect())
            .collect();

        SynthModel {
            emotion_map,
            country_emotion_offset,
            culture_delta,
            feature_map,
            feature_bias,
            layer_gain,
            layer_offset,
        }
    }

    /// Noise-free emotion vector for a latent point, before clipping.
    pub fn clean_emotions(&self, a: f64, v: f64, country: usize) -> Vec<f64> {
        (0..NUM_EMOTIONS)
            .map(|j| {
                let [wa, wv, b] = self.emotion_map[j];
                sigmoid(wa * a + wv * v + b) + self.country_emotion_offset[country][j]
            })
            .collect()
    }
}

/// Quadrant of `(a, v)` around the center plus an inner/outer radius split;
/// deterministic map onto the eight burst types.
pub fn vb_type_rule(a: f64, v: f64) -> usize {
    let quadrant = usize::from(a >= 0.5) + 2 * usize::from(v >= 0.5);
    let r2 = (a - 0.5).powi(2) + (v - 0.5).powi(2);
    2 * quadrant + usize::from(r2 > 0.08)
}

/// All latent quantities of one sample, in normalized `[0, 1]` label space.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLatent {
    pub arousal: f64,
    pub valence: f64,
    pub country: usize,
    pub vb_type: usize,
    pub emotions: Vec<f64>,
    pub culture: Vec<f64>,
}

pub struct SyntheticDataset {
    spec: SynthSpec,
    schema: LabelSchema,
    model: SynthModel,
}

impl SyntheticDataset {
    pub fn new(spec: SynthSpec, schema: LabelSchema) -> Result<Self> {
        spec.validate()?;
        let model = SynthModel::from_spec(&spec);
        Ok(SyntheticDataset { spec, schema, model })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn model(&self) -> &SynthModel {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.spec.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.spec.n_samples == 0
    }

    pub fn file_id(&self, index: usize) -> String {
        format!("synth_{index:06}")
    }

    fn sample_rng(&self, index: usize, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(
            self.spec.seed,
            0x10_0000 + (index as u64) * 8 + stream,
        ))
    }

    /// 60/20/20 split assignment, independent of all other draws.
    pub fn split(&self, index: usize) -> Split {
        let u: f64 = self.sample_rng(index, 0).gen();
        if u < 0.6 {
            Split::Train
        } else if u < 0.8 {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn latent(&self, index: usize) -> SynthLatent {
        let mut rng = self.sample_rng(index, 1);
        let a: f64 = rng.gen();
        let v: f64 = rng.gen();
        let country = rng.gen_range(0..NUM_COUNTRIES);
        let vb_type = vb_type_rule(a, v);

        let clean = self.model.clean_emotions(a, v, country);
        let emotions: Vec<f64> = clean
            .iter()
            .map(|&e| {
                let z: f64 = rng.sample(StandardNormal);
                (e + z * self.spec.noise_std).clamp(0.0, 1.0)
            })
            .collect();

        let mut culture = vec![0.0; CULTURE_DIM];
        for c in 0..NUM_COUNTRIES {
            for j in 0..NUM_EMOTIONS {
                let idx = culture_index(c, j).expect("indices in range");
                culture[idx] = (emotions[j] + self.model.culture_delta[idx]).clamp(0.0, 1.0);
            }
        }

        SynthLatent { arousal: a, valence: v, country, vb_type, emotions, culture }
    }

    pub fn sample(&self, index: usize) -> Sample {
        let latent = self.latent(index);
        let two = self.schema.two_range();
        let high = self.schema.high_range();
        let denorm = |v: f64, range| denormalize_target(v, range).expect("values clipped to [0,1]");
        Sample {
            file_id: self.file_id(index),
            split: self.split(index),
            country: Some(self.schema.countries()[latent.country].clone()),
            vb_type: Some(self.schema.vb_types()[latent.vb_type].clone()),
            arousal: Some(denorm(latent.arousal, two)),
            valence: Some(denorm(latent.valence, two)),
            high: Some(latent.emotions.iter().map(|&e| denorm(e, high)).collect()),
            culture: Some(latent.culture.iter().map(|&e| denorm(e, high)).collect()),
        }
    }

    pub fn stack(&self, index: usize) -> FeatureStack {
        let latent = self.latent(index);
        let spec = &self.spec;
        let model = &self.model;

        let mut u = vec![0.0f64; LATENT_DIM];
        u[0] = latent.arousal;
        u[1] = latent.valence;
        u[2 + latent.country] = 1.0;
        u[2 + NUM_COUNTRIES + latent.vb_type] = 1.0;

        let base: Vec<f64> = (0..spec.feature_dim)
            .map(|d| {
                model.feature_bias[d]
                    + model.feature_map[d].iter().zip(&u).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();

        let mut rng = self.sample_rng(index, 2);
        let mut data = Vec::with_capacity(spec.num_layers * spec.frames * spec.feature_dim);
        for layer in 0..spec.num_layers {
            for _frame in 0..spec.frames {
                for d in 0..spec.feature_dim {
                    let z: f64 = rng.sample(StandardNormal);
                    let value = model.layer_gain[layer] * base[d]
                        + model.layer_offset[layer][d]
                        + z * spec.noise_std;
                    data.push(value as f32);
                }
            }
        }
        FeatureStack::new(
            self.file_id(index),
            spec.num_layers,
            spec.frames,
            spec.feature_dim,
            data,
        )
        .expect("generated stack is well-formed")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let samples = (0..self.len()).map(|i| self.sample(i)).collect();
        Manifest::new(samples, &self.schema)
    }

    pub fn generate(&self) -> Result<(Manifest, Vec<FeatureStack>)> {
        let manifest = self.manifest()?;
        let stacks = (0..self.len()).map(|i| self.stack(i)).collect();
        Ok((manifest, stacks))
    }

    /// Writes `manifest.csv`, `features/*.vbfs`, `index.jsonl` and
    /// `synth_spec.json` into a dataset directory.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("features"))?;
        let manifest = self.manifest()?;
        write_manifest(&manifest, &self.schema, &dir.join("manifest.csv"))?;

        let mut entries = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let stack = self.stack(i);
            let rel = format!("features/{}.vbfs", stack.file_id());
            write_feature_stack(&stack, &dir.join(&rel))?;
            entries.push(IndexEntry {
                file_id: stack.file_id().to_string(),
                path: rel,
                frames: stack.frames(),
                dim: stack.dim(),
            });
        }
        write_index(&entries, &dir.join("index.jsonl"))?;

        let descriptor = serde_json::json!({ "spec": self.spec, "schema": self.schema });
        std::fs::write(dir.join("synth_spec.json"), serde_json::to_string_pretty(&descriptor)?)?;
        Ok(())
    }

    pub fn provider(self: &Arc<Self>) -> SyntheticProvider {
        let ids = (0..self.len()).map(|i| (self.file_id(i), i)).collect();
        SyntheticProvider { dataset: Arc::clone(self), ids }
    }
}

/// Regenerates stacks on demand from the dataset seed.
pub struct SyntheticProvider {
    dataset: Arc<SyntheticDataset>,
    ids: HashMap<String, usize>,
}

impl FeatureProvider for SyntheticProvider {
    fn stack(&self, file_id: &str) -> Result<FeatureStack> {
        let &index = self.ids.get(file_id).ok_or_else(|| Error::UnknownFileId(file_id.into()))?;
        Ok(self.dataset.stack(index))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
