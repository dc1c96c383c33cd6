//! Optimization loop: AdamW with decoupled weight decay and two parameter
//! groups, multi-task loss assembly, early stopping on the target task's
//! validation metric, checkpointing and bit-compatible resume.
//!
//! Every random stream (init, batch order, dropout) is derived from the
//! config seed and the epoch/step indices, so batch composition is a pure
//! function of `(seed, epoch)` and a resumed run reproduces an
//! uninterrupted one exactly.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataio::manifest::{Manifest, Sample, Split};
use crate::dataio::store::{FeatureProvider, FeatureStack};
use crate::error::{Error, Result};
use crate::heads::{derive_chain_order, ChainOrder, ForwardHooks};
use crate::matrix::Matrix;
use crate::model::{BatchInput, Mode, Model, ParamGroup, ParamStore};
use crate::objective::{
    ccc_loss, ccc_loss_node, combined_loss_node, cross_entropy, cross_entropy_node, evaluate,
    MetricsReport,
};
use crate::schema::{normalize_target, LabelSchema, Task, TaskPredictions, CULTURE_DIM, NUM_EMOTIONS};
use crate::seeding::derive_seed;
use crate::tape::Tape;

const IMPROVEMENT_THRESHOLD: f64 = 1e-5;

/// AdamW with decoupled weight decay: the decay is applied directly to the
/// parameters, independent of the gradient-based step.
pub struct AdamW {
    lr_downstream: f64,
    lr_encoder: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(lr_downstream: f64, lr_encoder: f64, weight_decay: f64) -> Self {
        AdamW {
            lr_downstream,
            lr_encoder,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for param in params.entries_mut() {
            let lr = match param.group {
                ParamGroup::Downstream => self.lr_downstream,
                ParamGroup::Encoder => self.lr_encoder,
            };
            let (m, v) = self.moments.entry(param.name.clone()).or_insert_with(|| {
                (
                    Matrix::zeros(param.value.rows(), param.value.cols()),
                    Matrix::zeros(param.value.rows(), param.value.cols()),
                )
            });
            let zero;
            let grad = match grads.get(&param.name) {
                Some(g) => g,
                None => {
                    zero = Matrix::zeros(param.value.rows(), param.value.cols());
                    &zero
                }
            };
            let data = param.value.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                // decoupled decay, then the adaptive step
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Bookkeeping of a (possibly resumed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub steps_done: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Target metric per task present in the validation split.
    pub val: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub model: Model,
    pub record: RunRecord,
    pub state: TrainState,
    pub best_val_metric: f64,
    /// Validation report of the returned (best) model.
    pub final_report: MetricsReport,
}

/// Runtime knobs that are not part of the hashed configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Interrupt cleanly after this epoch (checkpoint remains resumable).
    pub stop_after_epoch: Option<usize>,
}

pub fn train(
    manifest: &Manifest,
    provider: &dyn FeatureProvider,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_with_options(manifest, provider, config, out_dir, &TrainOptions::default())
}

/// Loads the persisted state of a run directory; refuses a config mismatch.
pub fn resume(out_dir: &Path, config: &ExperimentConfig) -> Result<TrainState> {
    let (_, _, state) = load_state(&out_dir.join("state.bin"), config)?;
    Ok(state)
}

pub fn train_with_options(
    manifest: &Manifest,
    provider: &dyn FeatureProvider,
    config: &ExperimentConfig,
    out_dir: &Path,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let schema = &config.schema;
    let target = config.model.target_task;
    let hash = config.hash();
    std::fs::create_dir_all(out_dir.join("diagnostics"))?;

    // training and validation pools: rows carrying the target labels
    let train_all = manifest.split(Split::Train);
    let val_all = manifest.split(Split::Val);
    if train_all.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_all.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let train_pool: Vec<&Sample> =
        train_all.iter().copied().filter(|s| s.has_labels_for(target)).collect();
    let val_pool: Vec<&Sample> =
        val_all.iter().copied().filter(|s| s.has_labels_for(target)).collect();
    if train_pool.len() < 2 {
        return Err(missing_target_labels(target, "train", train_pool.len()));
    }
    if val_pool.len() < 2 {
        return Err(missing_target_labels(target, "val", val_pool.len()));
    }

    let (mut model, mut optimizer, mut state, mut best_model) = if options.resume {
        let (model, optimizer, state) = load_state(&out_dir.join("state.bin"), config)?;
        let best_model = Model::load(&out_dir.join("artifact.bin"))?.0;
        (model, optimizer, state, Some(best_model))
    } else {
        let order_high = chain_order_for(&train_pool, |s| s.high.as_deref(), NUM_EMOTIONS)?;
        let order_culture = chain_order_for(&train_pool, |s| s.culture.as_deref(), CULTURE_DIM)?;
        let model = Model::new(
            schema.clone(),
            config.model.clone(),
            order_high,
            order_culture,
            config.train.seed,
        )?;
        let optimizer = AdamW::new(
            config.train.lr_downstream,
            config.train.lr_encoder,
            config.train.weight_decay,
        );
        std::fs::write(out_dir.join("config.json"), config.to_json_pretty())?;
        let state = TrainState {
            epoch: 0,
            steps_done: 0,
            best_metric: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
        };
        (model, optimizer, state, None)
    };

    let mut record = RunRecord::default();
    let seed = config.train.seed;
    let batch_size = config.train.batch_size;
    let mut step_capped = false;

    for epoch in (state.epoch + 1)..=config.train.max_epochs {
        let started = Instant::now();
        let mut indices: Vec<usize> = (0..train_pool.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE0_0000 + epoch as u64)));

        let mut losses = Vec::new();
        for (batch_idx, chunk) in indices.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("epoch {epoch}: dropping trailing batch of {}", chunk.len());
                continue;
            }
            if let Some(cap) = config.train.max_steps {
                if state.steps_done >= cap {
                    step_capped = true;
                    break;
                }
            }
            let batch_samples: Vec<&Sample> = chunk.iter().map(|&i| train_pool[i]).collect();
            let stacks = load_stacks(provider, &batch_samples)?;
            let batch: Vec<BatchInput> =
                stacks.iter().map(|stack| BatchInput { stack, mask: None }).collect();

            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                0xD0_0000 + (epoch as u64) * 100_003 + batch_idx as u64,
            ));
            let mut tape = Tape::new();
            let handles = model.forward_on_tape(
                &mut tape,
                &batch,
                Mode::Train,
                &ForwardHooks::default(),
                Some(&mut dropout_rng),
            )?;

            let target_loss = task_loss_node(&mut tape, target, &handles.outputs, &batch_samples, schema)?
                .ok_or_else(|| missing_target_labels(target, "batch", 0))?;
            let mut aux_losses = Vec::new();
            for task in Task::ALL {
                if task == target {
                    continue;
                }
                if let Some(node) =
                    task_loss_node(&mut tape, task, &handles.outputs, &batch_samples, schema)?
                {
                    aux_losses.push(node);
                }
            }
            let total =
                combined_loss_node(&mut tape, target_loss, &aux_losses, config.model.loss_lambda)?;
            let loss_value = tape.value(total).get(0, 0);
            if !loss_value.is_finite() {
                let dump = out_dir.join("nan_dump.json");
                let diagnostic = serde_json::json!({
                    "epoch": epoch,
                    "step": state.steps_done,
                    "loss": format!("{loss_value}"),
                    "batch_file_ids": batch_samples.iter().map(|s| &s.file_id).collect::<Vec<_>>(),
                    "recent_losses": losses.iter().rev().take(16).collect::<Vec<_>>(),
                });
                std::fs::write(&dump, serde_json::to_string_pretty(&diagnostic)?)?;
                return Err(Error::NanLoss { step: state.steps_done, dump });
            }

            tape.backward(total);
            let mut grads = BTreeMap::new();
            for (name, &node) in &handles.param_nodes {
                grads.insert(name.clone(), tape.grad(node));
            }
            optimizer.step(model.params_mut(), &grads);
            if let (Some(mean), Some(var)) = (&handles.batch_mean, &handles.batch_var) {
                model.update_bn_running(mean, var);
            }
            losses.push(loss_value);
            state.steps_done += 1;
        }

        if losses.is_empty() && step_capped {
            // the cap landed on an epoch boundary; nothing new to evaluate
            break;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;

        // validation on the target-labeled pool
        let val_report = evaluate_samples(&model, provider, &val_pool, schema)?;
        let metric = val_report
            .target_metric(target)
            .ok_or_else(|| missing_target_labels(target, "val", val_pool.len()))?;

        let improved = match state.best_metric {
            None => true,
            Some(best) => metric > best + IMPROVEMENT_THRESHOLD,
        };
        if improved {
            state.best_metric = Some(metric);
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best_model = Some(model.clone());
            model.save(&out_dir.join("artifact.bin"), &hash)?;
        } else {
            state.epochs_since_improvement += 1;
        }
        state.epoch = epoch;

        let mut val_map = BTreeMap::new();
        for task in Task::ALL {
            if let Some(v) = val_report.target_metric(task) {
                val_map.insert(task.name().to_string(), v);
            }
        }
        let epoch_record = EpochRecord {
            epoch,
            train_loss,
            val: val_map,
            wall_time_s: started.elapsed().as_secs_f64(),
            config_hash: hash.clone(),
        };
        append_record(&out_dir.join("record.jsonl"), &epoch_record)?;
        record.epochs.push(epoch_record);
        write_diagnostics(out_dir, epoch, &model, provider, val_pool[0])?;
        save_state(&out_dir.join("state.bin"), &model, &optimizer, &state, &hash)?;

        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val {} {:.4}{}",
            target.name(),
            metric,
            if improved { " *" } else { "" }
        );

        if state.epochs_since_improvement >= config.train.patience {
            break;
        }
        if step_capped {
            break;
        }
        if options.stop_after_epoch == Some(epoch) {
            break;
        }
    }

    let best_model = best_model.expect("at least one epoch evaluated");
    let final_report = evaluate_samples(&best_model, provider, &val_pool, schema)?;
    std::fs::write(out_dir.join("metrics.json"), final_report.to_json_pretty())?;
    final_report.write_csv(&out_dir.join("metrics.csv"))?;

    Ok(TrainOutcome {
        model: best_model,
        record,
        best_val_metric: state.best_metric.expect("metric recorded"),
        state,
        final_report,
    })
}

fn missing_target_labels(task: Task, split: &str, found: usize) -> Error {
    let columns = match task {
        Task::Two => "arousal,valence".to_string(),
        Task::High => "high_0..high_9".to_string(),
        Task::Culture => "culture_0..culture_39".to_string(),
        Task::Type => "vb_type".to_string(),
        Task::Country => "country".to_string(),
    };
    Error::MissingLabels {
        task: task.name().to_string(),
        message: format!("{split} split has {found} samples with columns `{columns}`; need >= 2"),
    }
}

/// Chain order from the labeled training rows; identity when there are too
/// few labeled rows to estimate correlations.
fn chain_order_for(
    pool: &[&Sample],
    values: impl Fn(&Sample) -> Option<&[f64]>,
    dim: usize,
) -> Result<ChainOrder> {
    let rows: Vec<&[f64]> = pool.iter().filter_map(|s| values(s)).collect();
    if rows.len() < 3 {
        log::warn!("fewer than 3 labeled rows for a {dim}-label chain; using identity order");
        return Ok(ChainOrder::identity(dim));
    }
    let data = Matrix::from_vec(
        rows.len(),
        dim,
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )?;
    derive_chain_order(&data)
}

/// Per-task loss over a batch when every row carries the task's labels;
/// `None` drops the task from the auxiliary sum.
fn task_loss_node(
    tape: &mut Tape,
    task: Task,
    outputs: &crate::heads::TaskOutputs,
    samples: &[&Sample],
    schema: &LabelSchema,
) -> Result<Option<crate::tape::NodeId>> {
    if !samples.iter().all(|s| s.has_labels_for(task)) {
        return Ok(None);
    }
    match task {
        Task::Two | Task::High | Task::Culture => {
            let targets = regression_targets(task, samples, schema)?;
            let node = match task {
                Task::Two => outputs.two,
                Task::High => outputs.high,
                _ => outputs.culture,
            };
            Ok(Some(ccc_loss_node(tape, node, &targets)?))
        }
        Task::Type => {
            let classes = class_targets(task, samples, schema)?;
            Ok(Some(cross_entropy_node(tape, outputs.vb_type_probs, &classes)?))
        }
        Task::Country => {
            let classes = class_targets(task, samples, schema)?;
            Ok(Some(cross_entropy_node(tape, outputs.country_probs, &classes)?))
        }
    }
}

fn regression_targets(task: Task, samples: &[&Sample], schema: &LabelSchema) -> Result<Matrix> {
    let range = match task {
        Task::Two => schema.two_range(),
        _ => schema.high_range(),
    };
    let mut data = Vec::new();
    for s in samples {
        match task {
            Task::Two => {
                data.push(normalize_target(s.arousal.expect("checked"), range)?);
                data.push(normalize_target(s.valence.expect("checked"), range)?);
            }
            Task::High => {
                for &v in s.high.as_ref().expect("checked") {
                    data.push(normalize_target(v, range)?);
                }
            }
            Task::Culture => {
                for &v in s.culture.as_ref().expect("checked") {
                    data.push(normalize_target(v, range)?);
                }
            }
            _ => unreachable!("regression_targets called for classification"),
        }
    }
    Matrix::from_vec(samples.len(), task.output_dim(), data)
}

fn class_targets(task: Task, samples: &[&Sample], schema: &LabelSchema) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match task {
            Task::Type => schema
                .vb_type_index(s.vb_type.as_deref().expect("checked"))
                .ok_or_else(|| Error::InvalidArgument("vb_type outside schema".into())),
            Task::Country => schema
                .country_index(s.country.as_deref().expect("checked"))
                .ok_or_else(|| Error::InvalidArgument("country outside schema".into())),
            _ => unreachable!("class_targets called for regression"),
        })
        .collect()
}

/// Reporting-side loss over already-computed predictions.
pub fn loss_for_task(
    task: Task,
    predictions: &[TaskPredictions],
    samples: &[&Sample],
    schema: &LabelSchema,
) -> Result<f64> {
    if predictions.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss_for_task: {} predictions vs {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    if !samples.iter().all(|s| s.has_labels_for(task)) {
        return Err(missing_target_labels(task, "batch", 0));
    }
    match task {
        Task::Two | Task::High | Task::Culture => {
            let targets = regression_targets(task, samples, schema)?;
            let values: Vec<f64> =
                predictions.iter().flat_map(|p| p.task_values(task).to_vec()).collect();
            let x = Matrix::from_vec(samples.len(), task.output_dim(), values)?;
            ccc_loss(&x, &targets)
        }
        Task::Type | Task::Country => {
            let classes = class_targets(task, samples, schema)?;
            let mut total = 0.0;
            for (p, &class) in predictions.iter().zip(&classes) {
                total += cross_entropy(p.task_values(task), class)?;
            }
            Ok(total / predictions.len() as f64)
        }
    }
}

/// Eval-mode predictions and metrics for a set of samples.
pub fn evaluate_samples(
    model: &Model,
    provider: &dyn FeatureProvider,
    samples: &[&Sample],
    schema: &LabelSchema,
) -> Result<MetricsReport> {
    let stacks = load_stacks(provider, samples)?;
    let refs: Vec<&FeatureStack> = stacks.iter().collect();
    let predictions = model.predict(&refs)?;
    evaluate(&predictions, samples, schema)
}

/// Convenience wrapper over a manifest split.
pub fn evaluate_split(
    model: &Model,
    provider: &dyn FeatureProvider,
    manifest: &Manifest,
    split: Split,
    schema: &LabelSchema,
) -> Result<MetricsReport> {
    let samples = manifest.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    evaluate_samples(model, provider, &samples, schema)
}

/// Reads feature stacks, optionally with a small worker pool capped by
/// `VBCHAIN_NUM_WORKERS`; results are ordered by sample regardless of
/// completion order.
fn load_stacks(provider: &dyn FeatureProvider, samples: &[&Sample]) -> Result<Vec<FeatureStack>> {
    let workers = std::env::var("VBCHAIN_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, 64);
    if workers == 1 || samples.len() < 4 {
        return samples.iter().map(|s| provider.stack(&s.file_id)).collect();
    }
    let chunk_size = samples.len().div_ceil(workers);
    let mut results: Vec<Option<Result<FeatureStack>>> = Vec::new();
    results.resize_with(samples.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, chunk) in samples.chunks(chunk_size).enumerate() {
            let handle = scope.spawn(move || {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (w * chunk_size + i, provider.stack(&s.file_id)))
                    .collect::<Vec<_>>()
            });
            handles.push(handle);
        }
        for handle in handles {
            for (idx, result) in handle.join().expect("loader thread panicked") {
                results[idx] = Some(result);
            }
        }
    });
    results.into_iter().map(|r| r.expect("all indices filled")).collect()
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut file, record)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn write_diagnostics(
    out_dir: &Path,
    epoch: usize,
    model: &Model,
    provider: &dyn FeatureProvider,
    probe: &Sample,
) -> Result<()> {
    let weights_path = out_dir.join("diagnostics/layer_weights.csv");
    if !weights_path.exists() {
        let header: Vec<String> =
            (0..model.config().num_layers).map(|l| format!("w{l}")).collect();
        std::fs::write(&weights_path, format!("epoch,{}\n", header.join(",")))?;
    }
    let mut file = std::fs::OpenOptions::new().append(true).open(&weights_path)?;
    let weights: Vec<String> = model.layer_weights().iter().map(|w| w.to_string()).collect();
    writeln!(file, "{epoch},{}", weights.join(","))?;

    let attention_path = out_dir.join("diagnostics/attention.csv");
    if !attention_path.exists() {
        std::fs::write(&attention_path, "epoch,file_id,frame,weight\n")?;
    }
    let stack = provider.stack(&probe.file_id)?;
    let encoded = model.encode_sample(&stack, None)?;
    let mut file = std::fs::OpenOptions::new().append(true).open(&attention_path)?;
    for (frame, weight) in encoded.attention.iter().enumerate() {
        writeln!(file, "{epoch},{},{frame},{weight}", probe.file_id)?;
    }
    Ok(())
}

// --- state persistence -------------------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"VBTS";
const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config_hash: String,
    state: TrainState,
    adam_step: u64,
    params: Vec<(String, usize, usize)>,
    bn_dim: usize,
}

fn save_state(
    path: &Path,
    model: &Model,
    optimizer: &AdamW,
    state: &TrainState,
    config_hash: &str,
) -> Result<()> {
    let header = StateHeader {
        config_hash: config_hash.to_string(),
        state: state.clone(),
        adam_step: optimizer.step,
        params: model
            .params()
            .entries()
            .iter()
            .map(|p| (p.name.clone(), p.value.rows(), p.value.cols()))
            .collect(),
        bn_dim: model.bn_running().0.len(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    writer.write_all(STATE_MAGIC)?;
    writer.write_u32::<LittleEndian>(STATE_VERSION)?;
    writer.write_u32::<LittleEndian>(header_bytes.len() as u32)?;
    writer.write_all(&header_bytes)?;
    for param in model.params().entries() {
        for &v in param.value.data() {
            writer.write_f64::<LittleEndian>(v)?;
        }
    }
    let (mean, var) = model.bn_running();
    for &v in mean.iter().chain(var.iter()) {
        writer.write_f64::<LittleEndian>(v)?;
    }
    for param in model.params().entries() {
        let (m, v) = optimizer.moments.get(&param.name).cloned().unwrap_or_else(|| {
            (
                Matrix::zeros(param.value.rows(), param.value.cols()),
                Matrix::zeros(param.value.rows(), param.value.cols()),
            )
        });
        for &x in m.data().iter().chain(v.data()) {
            writer.write_f64::<LittleEndian>(x)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn load_state(path: &Path, config: &ExperimentConfig) -> Result<(Model, AdamW, TrainState)> {
    if !path.exists() {
        return Err(Error::Artifact(format!("{}: no resumable state", path.display())));
    }
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(Error::Artifact(format!("{}: bad magic", path.display())));
    }
    let version = reader.read_u32::<LittleEndian>()?;
    if version != STATE_VERSION {
        return Err(Error::Artifact(format!("{}: unsupported version {version}", path.display())));
    }
    let header_len = reader.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: StateHeader = serde_json::from_slice(&header_bytes)?;
    if header.config_hash != config.hash() {
        return Err(Error::ConfigHashMismatch);
    }

    // rebuild the architecture, then overwrite every tensor from the file
    let mut model = {
        let order_high = ChainOrder::identity(NUM_EMOTIONS);
        let order_culture = ChainOrder::identity(CULTURE_DIM);
        // real orders live in artifact.bin; pull them from there when present
        let artifact = path.parent().map(|d| d.join("artifact.bin"));
        match artifact.filter(|p| p.exists()) {
            Some(p) => {
                let (m, artifact_hash) = Model::load(&p)?;
                if artifact_hash != header.config_hash {
                    return Err(Error::ConfigHashMismatch);
                }
                Model::new(
                    config.schema.clone(),
                    config.model.clone(),
                    m.chain_order_high().clone(),
                    m.chain_order_culture().clone(),
                    config.train.seed,
                )?
            }
            None => Model::new(
                config.schema.clone(),
                config.model.clone(),
                order_high,
                order_culture,
                config.train.seed,
            )?,
        }
    };
    let expected: Vec<(String, usize, usize)> = model
        .params()
        .entries()
        .iter()
        .map(|p| (p.name.clone(), p.value.rows(), p.value.cols()))
        .collect();
    if header.params != expected {
        return Err(Error::Artifact(format!(
            "{}: parameter layout does not match the configuration",
            path.display()
        )));
    }

    for param in model.params_mut().entries_mut() {
        for v in param.value.data_mut() {
            *v = reader.read_f64::<LittleEndian>()?;
        }
    }
    let bn_dim = header.bn_dim;
    let mut mean = vec![0.0; bn_dim];
    let mut var = vec![0.0; bn_dim];
    for v in mean.iter_mut().chain(var.iter_mut()) {
        *v = reader.read_f64::<LittleEndian>()?;
    }
    model.set_bn_running(&mean, &var);

    let mut optimizer =
        AdamW::new(config.train.lr_downstream, config.train.lr_encoder, config.train.weight_decay);
    optimizer.step = header.adam_step;
    for (name, rows, cols) in &header.params {
        let mut m = Matrix::zeros(*rows, *cols);
        for v in m.data_mut() {
            *v = reader.read_f64::<LittleEndian>()?;
        }
        let mut vm = Matrix::zeros(*rows, *cols);
        for v in vm.data_mut() {
            *v = reader.read_f64::<LittleEndian>()?;
        }
        optimizer.moments.insert(name.clone(), (m, vm));
    }

    Ok((model, optimizer, header.state))
}
