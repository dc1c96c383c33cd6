//! The assembled model: parameter store, batch forward graph (encoder plus
//! hierarchical task heads) and the self-describing artifact file.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataio::store::FeatureStack;
use crate::encoder::{aggregate_layers_node, attentive_pool_node, stack_to_matrix, EncoderOutput};
use crate::error::{Error, Result};
use crate::heads::{
    forward_all_node, ChainOrder, ChainPredictorNodes, ForwardHooks, HeadNodes, TaskGraphNodes,
    TaskOutputs,
};
use crate::matrix::Matrix;
use crate::schema::{LabelSchema, Task, TaskPredictions, CULTURE_DIM, NUM_EMOTIONS};
use crate::seeding::derive_seed;
use crate::tape::{DropoutSource, NodeId, Tape};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ARTIFACT_MAGIC: &[u8; 4] = b"VBMA";
const ARTIFACT_VERSION: u32 = 1;

/// Learning-rate group of a parameter. `Encoder` is reserved for provider
/// fine-tuning; the reference feature providers are frozen, so the shipped
/// models only populate `Downstream`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Downstream,
    Encoder,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub group: ParamGroup,
}

/// Ordered, name-addressable parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Matrix) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param { name: name.to_string(), value, group: ParamGroup::Downstream });
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.entries[self.index[name]].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let idx = self.index[name];
        &mut self.entries[idx].value
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<Param> {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One batch element: a feature stack and an optional frame validity mask
/// (`true` keeps the frame).
pub struct BatchInput<'a> {
    pub stack: &'a FeatureStack,
    pub mask: Option<&'a [bool]>,
}

/// Handles into a forward graph: task outputs, parameter leaves for
/// gradient lookup, per-sample attention nodes and the batch statistics
/// the trainer folds into the running estimates.
pub struct GraphHandles {
    pub outputs: TaskOutputs,
    pub param_nodes: HashMap<String, NodeId>,
    pub attentions: Vec<NodeId>,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

/// Eval-mode output matrices, one row per batch element.
pub struct EvalOutputs {
    pub two: Matrix,
    pub high: Matrix,
    pub country_probs: Matrix,
    pub culture: Matrix,
    pub vb_type_probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    schema: LabelSchema,
    config: ModelConfig,
    params: ParamStore,
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
    chain_order_high: ChainOrder,
    chain_order_culture: ChainOrder,
}

impl Model {
    pub fn new(
        schema: LabelSchema,
        config: ModelConfig,
        chain_order_high: ChainOrder,
        chain_order_culture: ChainOrder,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if chain_order_high.len() != NUM_EMOTIONS {
            return Err(Error::ShapeMismatch(format!(
                "high chain order covers {} labels, need {NUM_EMOTIONS}",
                chain_order_high.len()
            )));
        }
        if chain_order_culture.len() != CULTURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "culture chain order covers {} labels, need {CULTURE_DIM}",
                chain_order_culture.len()
            )));
        }
        chain_order_high.validate()?;
        chain_order_culture.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
        let mut params = ParamStore::default();
        let mut xavier = |params: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
            params.insert(name, m);
        };

        let (l, d, a, p, s) = (
            config.num_layers,
            config.feature_dim,
            config.attention_dim,
            config.projection_dim,
            config.shared_dim,
        );
        params.insert("enc.layer_logits", Matrix::zeros(1, l));
        xavier(&mut params, "enc.attn_w", d, a);
        xavier(&mut params, "enc.attn_u", a, 1);
        xavier(&mut params, "enc.proj_w", d, p);
        params.insert("enc.proj_b", Matrix::zeros(1, p));
        params.insert("enc.bn_gamma", Matrix::filled(1, p, 1.0));
        params.insert("enc.bn_beta", Matrix::zeros(1, p));
        xavier(&mut params, "shared.w", p, s);
        params.insert("shared.b", Matrix::zeros(1, s));
        for task in Task::ALL {
            xavier(&mut params, &format!("spec.{task}.w"), s, s);
            params.insert(&format!("spec.{task}.b"), Matrix::zeros(1, s));
        }
        xavier(&mut params, "head.two.w", s, 2);
        params.insert("head.two.b", Matrix::zeros(1, 2));
        xavier(&mut params, "head.type.w", s + 2, 8);
        params.insert("head.type.b", Matrix::zeros(1, 8));
        xavier(&mut params, "head.country.w", s + 2, 4);
        params.insert("head.country.b", Matrix::zeros(1, 4));

        let high_inputs = s + 2;
        let culture_inputs = s + 2 + NUM_EMOTIONS + 4;
        if config.use_chains {
            let mut chain = |params: &mut ParamStore, task: &str, labels: usize, inputs: usize| {
                for dir in ["fwd", "bwd"] {
                    for i in 0..labels {
                        let fan_in = inputs + i;
                        match config.chain_hidden {
                            None => {
                                xavier(params, &format!("head.{task}.{dir}.{i}.w"), fan_in, 1);
                                params.insert(&format!("head.{task}.{dir}.{i}.b"), Matrix::zeros(1, 1));
                            }
                            Some(h) => {
                                xavier(params, &format!("head.{task}.{dir}.{i}.w1"), fan_in, h);
                                params.insert(&format!("head.{task}.{dir}.{i}.b1"), Matrix::zeros(1, h));
                                xavier(params, &format!("head.{task}.{dir}.{i}.w2"), h, 1);
                                params.insert(&format!("head.{task}.{dir}.{i}.b2"), Matrix::zeros(1, 1));
                            }
                        }
                    }
                }
            };
            chain(&mut params, "high", NUM_EMOTIONS, high_inputs);
            chain(&mut params, "culture", CULTURE_DIM, culture_inputs);
        } else {
            xavier(&mut params, "head.high.w", high_inputs, NUM_EMOTIONS);
            params.insert("head.high.b", Matrix::zeros(1, NUM_EMOTIONS));
            xavier(&mut params, "head.culture.w", culture_inputs, CULTURE_DIM);
            params.insert("head.culture.b", Matrix::zeros(1, CULTURE_DIM));
        }

        Ok(Model {
            schema,
            config,
            params,
            bn_mean: vec![0.0; p],
            bn_var: vec![1.0; p],
            chain_order_high,
            chain_order_culture,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn chain_order_high(&self) -> &ChainOrder {
        &self.chain_order_high
    }

    pub fn chain_order_culture(&self) -> &ChainOrder {
        &self.chain_order_culture
    }

    /// Effective softmax layer weights (diagnostics).
    pub fn layer_weights(&self) -> Vec<f64> {
        let logits = self.params.get("enc.layer_logits").data();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    pub fn bn_running(&self) -> (&[f64], &[f64]) {
        (&self.bn_mean, &self.bn_var)
    }

    /// Overwrites the running statistics exactly (artifact/state restore).
    pub fn set_bn_running(&mut self, mean: &[f64], var: &[f64]) {
        assert_eq!(mean.len(), self.bn_mean.len());
        assert_eq!(var.len(), self.bn_var.len());
        self.bn_mean.copy_from_slice(mean);
        self.bn_var.copy_from_slice(var);
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn update_bn_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, &b) in self.bn_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.bn_var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }

    fn validate_batch(&self, batch: &[BatchInput]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for input in batch {
            if input.stack.num_layers() != self.config.num_layers
                || input.stack.dim() != self.config.feature_dim
            {
                return Err(Error::ShapeMismatch(format!(
                    "stack `{}` is ({}, {}, {}) but the model expects ({}, *, {})",
                    input.stack.file_id(),
                    input.stack.num_layers(),
                    input.stack.frames(),
                    input.stack.dim(),
                    self.config.num_layers,
                    self.config.feature_dim
                )));
            }
            if let Some(mask) = input.mask {
                if mask.len() != input.stack.frames() {
                    return Err(Error::ShapeMismatch(format!(
                        "stack `{}`: mask covers {} frames of {}",
                        input.stack.file_id(),
                        mask.len(),
                        input.stack.frames()
                    )));
                }
                if !mask.iter().any(|&m| m) {
                    return Err(Error::AllFramesMasked);
                }
            }
        }
        Ok(())
    }

    /// Builds the full forward graph for a batch. Train mode uses batch
    /// normalization statistics and dropout (which requires an rng); eval
    /// mode uses the stored running statistics and no dropout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[BatchInput],
        mode: Mode,
        hooks: &ForwardHooks,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphHandles> {
        self.validate_batch(batch)?;
        if mode == Mode::Train && batch.len() < 2 {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        if mode == Mode::Train && self.config.dropout_rate > 0.0 && dropout_rng.is_none() {
            return Err(Error::InvalidArgument("train mode needs a dropout rng".into()));
        }

        let mut param_nodes = HashMap::with_capacity(self.params.len());
        for param in self.params.entries() {
            param_nodes.insert(param.name.clone(), tape.leaf(param.value.clone()));
        }
        let node = |name: &str| -> NodeId { param_nodes[name] };

        // encoder: per-sample aggregation, pooling, projection
        let mut rows = Vec::with_capacity(batch.len());
        let mut attentions = Vec::with_capacity(batch.len());
        for input in batch {
            let stack_node = tape.leaf(stack_to_matrix(input.stack));
            let frames = aggregate_layers_node(
                tape,
                stack_node,
                node("enc.layer_logits"),
                input.stack.frames(),
                input.stack.dim(),
            );
            let (pooled, attention) =
                attentive_pool_node(tape, frames, node("enc.attn_w"), node("enc.attn_u"), input.mask);
            let projected = tape.affine(pooled, node("enc.proj_w"), node("enc.proj_b"));
            rows.push(projected);
            attentions.push(attention);
        }
        let stacked = tape.concat_rows(&rows);

        // batch normalization
        let (normalized, batch_mean, batch_var) = match mode {
            Mode::Train => {
                let mu = tape.mean_rows(stacked);
                let centered = tape.sub_row(stacked, mu);
                let sq = tape.square(centered);
                let var = tape.mean_rows(sq);
                let std = tape.sqrt_eps(var, BN_EPS);
                let xhat = tape.div_row(centered, std);
                let mean_vals = tape.value(mu).data().to_vec();
                let var_vals = tape.value(var).data().to_vec();
                (xhat, Some(mean_vals), Some(var_vals))
            }
            Mode::Eval => {
                let rm = tape.leaf(Matrix::row_vector(self.bn_mean.clone()));
                let rstd = tape.leaf(Matrix::row_vector(
                    self.bn_var.iter().map(|&v| (v + BN_EPS).sqrt()).collect(),
                ));
                let centered = tape.sub_row(stacked, rm);
                (tape.div_row(centered, rstd), None, None)
            }
        };
        let scaled = tape.mul_row(normalized, node("enc.bn_gamma"));
        let z_pre = tape.add_row(scaled, node("enc.bn_beta"));

        let mut dropout = match (mode, &mut dropout_rng) {
            (Mode::Train, Some(rng)) if self.config.dropout_rate > 0.0 => {
                DropoutSource::Enabled { rate: self.config.dropout_rate, rng }
            }
            _ => DropoutSource::Disabled,
        };
        let z = dropout.apply(tape, z_pre);

        let graph_nodes = self.task_graph_nodes(&param_nodes);
        let outputs = forward_all_node(
            tape,
            z,
            &graph_nodes,
            &self.chain_order_high,
            &self.chain_order_culture,
            &mut dropout,
            hooks,
        )?;

        Ok(GraphHandles { outputs, param_nodes, attentions, batch_mean, batch_var })
    }

    fn task_graph_nodes(&self, nodes: &HashMap<String, NodeId>) -> TaskGraphNodes {
        let pair = |name: &str| (nodes[&format!("{name}.w")], nodes[&format!("{name}.b")]);
        let chain_nodes = |task: &str, labels: usize| -> HeadNodes {
            if self.config.use_chains {
                let direction = |dir: &str| -> Vec<ChainPredictorNodes> {
                    (0..labels)
                        .map(|i| {
                            let key = |suffix: &str| {
                                nodes.get(&format!("head.{task}.{dir}.{i}.{suffix}")).copied()
                            };
                            match self.config.chain_hidden {
                                None => ChainPredictorNodes {
                                    w1: key("w").expect("chain param"),
                                    b1: key("b").expect("chain param"),
                                    w2: None,
                                    b2: None,
                                },
                                Some(_) => ChainPredictorNodes {
                                    w1: key("w1").expect("chain param"),
                                    b1: key("b1").expect("chain param"),
                                    w2: key("w2"),
                                    b2: key("b2"),
                                },
                            }
                        })
                        .collect()
                };
                HeadNodes::Chain { forward: direction("fwd"), backward: direction("bwd") }
            } else {
                let (w, b) = pair(&format!("head.{task}"));
                HeadNodes::Plain { w, b }
            }
        };

        TaskGraphNodes {
            shared: pair("shared"),
            spec_two: pair("spec.two"),
            spec_high: pair("spec.high"),
            spec_culture: pair("spec.culture"),
            spec_type: pair("spec.type"),
            spec_country: pair("spec.country"),
            head_two: pair("head.two"),
            head_type: pair("head.type"),
            head_country: pair("head.country"),
            high_head: chain_nodes("high", NUM_EMOTIONS),
            culture_head: chain_nodes("culture", CULTURE_DIM),
        }
    }

    /// Eval-mode forward pass returning the raw output matrices.
    pub fn eval_outputs(&self, batch: &[BatchInput], hooks: &ForwardHooks) -> Result<EvalOutputs> {
        let mut tape = Tape::new();
        let handles = self.forward_on_tape(&mut tape, batch, Mode::Eval, hooks, None)?;
        Ok(EvalOutputs {
            two: tape.value(handles.outputs.two).clone(),
            high: tape.value(handles.outputs.high).clone(),
            country_probs: tape.value(handles.outputs.country_probs).clone(),
            culture: tape.value(handles.outputs.culture).clone(),
            vb_type_probs: tape.value(handles.outputs.vb_type_probs).clone(),
        })
    }

    /// Deterministic per-sample predictions (eval mode, chunked batches).
    pub fn predict(&self, stacks: &[&FeatureStack]) -> Result<Vec<TaskPredictions>> {
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(256) {
            let batch: Vec<BatchInput> =
                chunk.iter().map(|stack| BatchInput { stack, mask: None }).collect();
            let values = self.eval_outputs(&batch, &ForwardHooks::default())?;
            for i in 0..chunk.len() {
                out.push(TaskPredictions::new(
                    values.two.row(i).to_vec(),
                    values.high.row(i).to_vec(),
                    values.country_probs.row(i).to_vec(),
                    values.culture.row(i).to_vec(),
                    values.vb_type_probs.row(i).to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    /// Eval-mode encoder only: aggregation, pooling, projection and batch
    /// normalization with running statistics.
    pub fn encode_sample(&self, stack: &FeatureStack, mask: Option<&[bool]>) -> Result<EncoderOutput> {
        let batch = [BatchInput { stack, mask }];
        self.validate_batch(&batch)?;
        let mut tape = Tape::new();
        let logits = tape.leaf(self.params.get("enc.layer_logits").clone());
        let w = tape.leaf(self.params.get("enc.attn_w").clone());
        let u = tape.leaf(self.params.get("enc.attn_u").clone());
        let proj_w = tape.leaf(self.params.get("enc.proj_w").clone());
        let proj_b = tape.leaf(self.params.get("enc.proj_b").clone());
        let gamma = tape.leaf(self.params.get("enc.bn_gamma").clone());
        let beta = tape.leaf(self.params.get("enc.bn_beta").clone());

        let stack_node = tape.leaf(stack_to_matrix(stack));
        let frames = aggregate_layers_node(&mut tape, stack_node, logits, stack.frames(), stack.dim());
        let (pooled, attention) = attentive_pool_node(&mut tape, frames, w, u, mask);
        let projected = tape.affine(pooled, proj_w, proj_b);
        let rm = tape.leaf(Matrix::row_vector(self.bn_mean.clone()));
        let rstd = tape.leaf(Matrix::row_vector(
            self.bn_var.iter().map(|&v| (v + BN_EPS).sqrt()).collect(),
        ));
        let centered = tape.sub_row(projected, rm);
        let xhat = tape.div_row(centered, rstd);
        let scaled = tape.mul_row(xhat, gamma);
        let z = tape.add_row(scaled, beta);

        Ok(EncoderOutput {
            z: tape.value(z).data().to_vec(),
            attention: tape.value(attention).data().to_vec(),
        })
    }

    // --- artifact persistence ------------------------------------------------

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = ArtifactHeader {
            config_hash: config_hash.to_string(),
            schema: self.schema.clone(),
            model: self.config.clone(),
            chain_order_high: self.chain_order_high.clone(),
            chain_order_culture: self.chain_order_culture.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|p| ParamInfo {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    group: p.group,
                })
                .collect(),
            bn_dim: self.bn_mean.len(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut writer = BufWriter::new(std::fs::File::create(path)?);
        writer.write_all(ARTIFACT_MAGIC)?;
        writer.write_u32::<LittleEndian>(ARTIFACT_VERSION)?;
        writer.write_u32::<LittleEndian>(header_bytes.len() as u32)?;
        writer.write_all(&header_bytes)?;
        for param in self.params.entries() {
            for &v in param.value.data() {
                writer.write_f64::<LittleEndian>(v)?;
            }
        }
        for &v in self.bn_mean.iter().chain(self.bn_var.iter()) {
            writer.write_f64::<LittleEndian>(v)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Loads an artifact, returning the model and the config hash recorded
    /// at save time.
    pub fn load(path: &Path) -> Result<(Model, String)> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::Artifact(format!("{}: truncated", path.display())))?;
        if &magic != ARTIFACT_MAGIC {
            return Err(Error::Artifact(format!("{}: bad magic", path.display())));
        }
        let version = reader.read_u32::<LittleEndian>()?;
        if version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let header_len = reader.read_u32::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        reader
            .read_exact(&mut header_bytes)
            .map_err(|_| Error::Artifact(format!("{}: truncated header", path.display())))?;
        let header: ArtifactHeader = serde_json::from_slice(&header_bytes)?;

        // structural check against a freshly constructed model
        let mut model = Model::new(
            header.schema,
            header.model,
            header.chain_order_high,
            header.chain_order_culture,
            0,
        )?;
        if header.params.len() != model.params.len() {
            return Err(Error::Artifact(format!(
                "{}: {} parameters recorded, architecture has {}",
                path.display(),
                header.params.len(),
                model.params.len()
            )));
        }
        for (info, param) in header.params.iter().zip(model.params.entries_mut().iter_mut()) {
            if info.name != param.name
                || info.rows != param.value.rows()
                || info.cols != param.value.cols()
            {
                return Err(Error::Artifact(format!(
                    "{}: parameter `{}` ({}x{}) does not match architecture `{}` ({}x{})",
                    path.display(),
                    info.name,
                    info.rows,
                    info.cols,
                    param.name,
                    param.value.rows(),
                    param.value.cols()
                )));
            }
            param.group = info.group;
            for v in param.value.data_mut() {
                *v = reader
                    .read_f64::<LittleEndian>()
                    .map_err(|_| Error::Artifact(format!("{}: truncated payload", path.display())))?;
            }
        }
        if header.bn_dim != model.bn_mean.len() {
            return Err(Error::Artifact(format!(
                "{}: batch-norm width {} does not match projection {}",
                path.display(),
                header.bn_dim,
                model.bn_mean.len()
            )));
        }
        for slot in model.bn_mean.iter_mut().chain(model.bn_var.iter_mut()) {
            *slot = reader
                .read_f64::<LittleEndian>()
                .map_err(|_| Error::Artifact(format!("{}: truncated payload", path.display())))?;
        }
        Ok((model, header.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    rows: usize,
    cols: usize,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct ArtifactHeader {
    config_hash: String,
    schema: LabelSchema,
    model: ModelConfig,
    chain_order_high: ChainOrder,
    chain_order_culture: ChainOrder,
    params: Vec<ParamInfo>,
    bn_dim: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{SynthSpec, SyntheticDataset};

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            feature_dim: 32,
            attention_dim: 16,
            projection_dim: 24,
            shared_dim: 12,
            ..ModelConfig::default()
        }
    }

    fn test_model(config: ModelConfig) -> Model {
        Model::new(
            LabelSchema::default(),
            config,
            ChainOrder::identity(NUM_EMOTIONS),
            ChainOrder::identity(CULTURE_DIM),
            7,
        )
        .unwrap()
    }

    fn synth_stacks(n: usize) -> Vec<FeatureStack> {
        let spec = SynthSpec { n_samples: n, seed: 5, ..SynthSpec::default() };
        let dataset = SyntheticDataset::new(spec, LabelSchema::default()).unwrap();
        (0..n).map(|i| dataset.stack(i)).collect()
    }

    #[test]
    fn output_arities_match_the_five_tasks() {
        let model = test_model(small_config());
        let stacks = synth_stacks(2);
        let batch: Vec<BatchInput> =
            stacks.iter().map(|stack| BatchInput { stack, mask: None }).collect();
        let out = model.eval_outputs(&batch, &ForwardHooks::default()).unwrap();
        assert_eq!((out.two.rows(), out.two.cols()), (2, 2));
        assert_eq!((out.high.rows(), out.high.cols()), (2, 10));
        assert_eq!((out.country_probs.rows(), out.country_probs.cols()), (2, 4));
        assert_eq!((out.culture.rows(), out.culture.cols()), (2, 40));
        assert_eq!((out.vb_type_probs.rows(), out.vb_type_probs.cols()), (2, 8));
    }

    #[test]
    fn eval_forward_is_deterministic_and_predictions_valid() {
        let model = test_model(small_config());
        let stacks = synth_stacks(3);
        let refs: Vec<&FeatureStack> = stacks.iter().collect();
        let a = model.predict(&refs).unwrap();
        let b = model.predict(&refs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_injection_changes_downstream_tasks_only() {
        let model = test_model(small_config());
        let stacks = synth_stacks(2);
        let batch: Vec<BatchInput> =
            stacks.iter().map(|stack| BatchInput { stack, mask: None }).collect();
        let base = model.eval_outputs(&batch, &ForwardHooks::default()).unwrap();

        let mut injected = base.two.clone();
        for v in injected.data_mut() {
            *v = (*v + 0.31).min(0.99);
        }
        let hooks = ForwardHooks { two_downstream_override: Some(injected) };
        let hooked = model.eval_outputs(&batch, &hooks).unwrap();

        assert_eq!(base.two, hooked.two, "TWO must not change under its own injection");
        assert_ne!(base.high, hooked.high);
        assert_ne!(base.vb_type_probs, hooked.vb_type_probs);
        assert_ne!(base.country_probs, hooked.country_probs);
        assert_ne!(base.culture, hooked.culture);
    }

    #[test]
    fn batchnorm_rejects_single_sample_train_batches() {
        let model = test_model(small_config());
        let stacks = synth_stacks(1);
        let batch = [BatchInput { stack: &stacks[0], mask: None }];
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match model.forward_on_tape(&mut tape, &batch, Mode::Train, &ForwardHooks::default(), Some(&mut rng))
        {
            Err(Error::BatchTooSmall(1)) => {}
            other => panic!("expected BatchTooSmall, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn mask_padding_leaves_encode_unchanged() {
        let config = small_config();
        let model = test_model(config.clone());
        let stacks = synth_stacks(1);
        let stack = &stacks[0];
        let out_plain = model.encode_sample(stack, None).unwrap();

        // pad with three junk frames and mask them out
        let (l, t, d) = (stack.num_layers(), stack.frames(), stack.dim());
        let padded_t = t + 3;
        let mut data = Vec::with_capacity(l * padded_t * d);
        for layer in 0..l {
            for frame in 0..padded_t {
                for dim in 0..d {
                    if frame < t {
                        data.push(stack.get(layer, frame, dim));
                    } else {
                        data.push(123.456);
                    }
                }
            }
        }
        let padded = FeatureStack::new("padded", l, padded_t, d, data).unwrap();
        let mut mask = vec![true; padded_t];
        for slot in mask.iter_mut().skip(t) {
            *slot = false;
        }
        let out_masked = model.encode_sample(&padded, Some(&mask)).unwrap();

        for (a, b) in out_plain.z.iter().zip(&out_masked.z) {
            assert!((a - b).abs() < 1e-6, "encode changed under masked padding: {a} vs {b}");
        }
        for &w in &out_masked.attention[t..] {
            assert_eq!(w, 0.0);
        }
        let sum: f64 = out_masked.attention.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn artifact_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = test_model(small_config());
        model.update_bn_running(&vec![0.3; 24], &vec![0.8; 24]);
        let path = dir.path().join("artifact.bin");
        model.save(&path, "deadbeef").unwrap();
        let (loaded, hash) = Model::load(&path).unwrap();
        assert_eq!(hash, "deadbeef");
        assert_eq!(loaded.bn_mean, model.bn_mean);
        assert_eq!(loaded.bn_var, model.bn_var);
        for (a, b) in loaded.params.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "parameter {} changed", a.name);
        }

        // identical predictions after reload
        let stacks = synth_stacks(2);
        let refs: Vec<&FeatureStack> = stacks.iter().collect();
        assert_eq!(model.predict(&refs).unwrap(), loaded.predict(&refs).unwrap());
    }

    #[test]
    fn artifact_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not an artifact").unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn train_mode_forward_produces_finite_loss_pieces() {
        let model = test_model(small_config());
        let stacks = synth_stacks(4);
        let batch: Vec<BatchInput> =
            stacks.iter().map(|stack| BatchInput { stack, mask: None }).collect();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let handles = model
            .forward_on_tape(&mut tape, &batch, Mode::Train, &ForwardHooks::default(), Some(&mut rng))
            .unwrap();
        assert!(tape.value(handles.outputs.two).is_finite());
        assert!(handles.batch_mean.is_some());
        assert_eq!(handles.attentions.len(), 4);
    }
}
