//! Metrics and losses: biased concordance correlation, cross entropy and
//! the weighted multi-task combination, plus the evaluation report.
//!
//! All moments are biased (1/M) estimators, and the concordance denominator
//! uses the squared *difference* of means, so `ccc(x, x) = 1` holds for any
//! non-constant x. CCC is invariant under a common positive affine map of
//! prediction and target, which is why training and evaluation both operate
//! in normalized [0, 1] label space.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dataio::manifest::Sample;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::schema::{normalize_target, LabelSchema, Task, TaskPredictions, NUM_EMOTIONS};
use crate::tape::{NodeId, Tape};

const DEGENERATE_EPS: f64 = 1e-12;

/// Biased concordance correlation coefficient of two series.
///
/// Degenerate case: when the denominator vanishes the result is 1 for an
/// exact match and 0 otherwise (no concordance information).
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    let moments = Moments::of(x, y)?;
    Ok(moments.ccc())
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
    max_diff: f64,
}

impl Moments {
    fn of(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "ccc: series lengths {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::InvalidArgument("ccc needs at least 2 samples".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ccc input".into()));
        }
        let m = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / m;
        let mean_y = y.iter().sum::<f64>() / m;
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        let mut cov = 0.0;
        let mut max_diff = 0.0f64;
        for (&a, &b) in x.iter().zip(y) {
            var_x += (a - mean_x).powi(2);
            var_y += (b - mean_y).powi(2);
            cov += (a - mean_x) * (b - mean_y);
            max_diff = max_diff.max((a - b).abs());
        }
        var_x /= m;
        var_y /= m;
        cov /= m;
        Ok(Moments { mean_x, mean_y, var_x, var_y, cov, max_diff })
    }

    fn denominator(&self) -> f64 {
        self.var_x + self.var_y + (self.mean_x - self.mean_y).powi(2)
    }

    fn ccc(&self) -> f64 {
        let denom = self.denominator();
        if denom < DEGENERATE_EPS {
            return if self.max_diff < 1e-12 { 1.0 } else { 0.0 };
        }
        2.0 * self.cov / denom
    }
}

/// Per-label CCC over the columns of `(M, N)` matrices plus their mean.
pub fn mean_ccc(predictions: &Matrix, targets: &Matrix) -> Result<(f64, Vec<f64>)> {
    if (predictions.rows(), predictions.cols()) != (targets.rows(), targets.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "mean_ccc: {}x{} vs {}x{}",
            predictions.rows(),
            predictions.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let n = predictions.cols();
    let mut per_label = Vec::with_capacity(n);
    for j in 0..n {
        per_label.push(ccc(&predictions.column(j), &targets.column(j))?);
    }
    Ok((per_label.iter().sum::<f64>() / n as f64, per_label))
}

/// `1 - mean_ccc`; the regression training loss.
pub fn ccc_loss(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    Ok(1.0 - mean_ccc(predictions, targets)?.0)
}

/// Differentiable `1 - mean_ccc` on the tape. Columns with a vanishing
/// denominator contribute their degenerate constant without gradient.
pub fn ccc_loss_node(tape: &mut Tape, predictions: NodeId, targets: &Matrix) -> Result<NodeId> {
    let shape = {
        let p = tape.value(predictions);
        (p.rows(), p.cols())
    };
    if shape != (targets.rows(), targets.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "ccc_loss: predictions {}x{} vs targets {}x{}",
            shape.0,
            shape.1,
            targets.rows(),
            targets.cols()
        )));
    }
    if shape.0 < 2 {
        return Err(Error::InvalidArgument("ccc needs at least 2 samples".into()));
    }

    let n = shape.1;
    let mut col_nodes = Vec::with_capacity(n);
    let mut constant_sum = 0.0;
    for j in 0..n {
        let x_col = tape.value(predictions).column(j);
        let y_col = targets.column(j);
        let moments = Moments::of(&x_col, &y_col)?;
        if moments.denominator() < DEGENERATE_EPS {
            constant_sum += moments.ccc();
            continue;
        }
        let x = tape.slice_cols(predictions, j, 1);
        let y = tape.leaf(Matrix::from_vec(targets.rows(), 1, y_col).expect("column shape"));
        col_nodes.push(ccc_column_node(tape, x, y));
    }

    // mean over all N columns, degenerate ones folded in as constants
    let mean = if col_nodes.is_empty() {
        tape.leaf(Matrix::filled(1, 1, constant_sum / n as f64))
    } else {
        let stacked = tape.concat_cols(&col_nodes);
        let live_sum = tape.sum_all(stacked);
        let scaled = tape.scale(live_sum, 1.0 / n as f64);
        tape.add_scalar(scaled, constant_sum / n as f64)
    };
    let negated = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(negated, 1.0))
}

/// CCC of one `(M, 1)` column pair as a tape subgraph.
fn ccc_column_node(tape: &mut Tape, x: NodeId, y: NodeId) -> NodeId {
    let mu_x = tape.mean_rows(x);
    let mu_y = tape.mean_rows(y);
    let dx = tape.sub_row(x, mu_x);
    let dy = tape.sub_row(y, mu_y);
    let prod = tape.mul(dx, dy);
    let cov = tape.mean_rows(prod);
    let dx2 = tape.square(dx);
    let var_x = tape.mean_rows(dx2);
    let dy2 = tape.square(dy);
    let var_y = tape.mean_rows(dy2);
    let gap = tape.sub(mu_x, mu_y);
    let gap2 = tape.square(gap);
    let vsum = tape.add(var_x, var_y);
    let denom = tape.add(vsum, gap2);
    let num = tape.scale(cov, 2.0);
    tape.div(num, denom)
}

/// Categorical cross entropy over an explicit probability vector;
/// probabilities are clipped to `[1e-7, 1]` before the log.
pub fn cross_entropy(probs: &[f64], target_class: usize) -> Result<f64> {
    if target_class >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} out of range 0..{}",
            probs.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < -1e-12 {
            return Err(Error::OutOfRange { what: format!("probs[{i}]"), value: p, lo: 0.0, hi: 1.0 });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(-(probs[target_class].clamp(1e-7, 1.0)).ln())
}

/// Mean cross entropy of a `(B, K)` probability node against class targets.
pub fn cross_entropy_node(tape: &mut Tape, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (rows, cols) = {
        let p = tape.value(probs);
        (p.rows(), p.cols())
    };
    if targets.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy: {} rows vs {} targets",
            rows,
            targets.len()
        )));
    }
    let mut one_hot = Matrix::zeros(rows, cols);
    for (i, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::InvalidArgument(format!("target class {t} out of range 0..{cols}")));
        }
        one_hot.set(i, t, 1.0);
    }
    let clipped = tape.clip(probs, 1e-7, 1.0);
    let log_p = tape.ln(clipped);
    let mask = tape.leaf(one_hot);
    let picked = tape.mul(log_p, mask);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Weighted multi-task total: `lambda * target + (1 - lambda) * sum(aux)`.
pub fn combined_loss(target_loss: f64, aux_losses: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(lambda * target_loss + (1.0 - lambda) * aux_losses.iter().sum::<f64>())
}

pub fn combined_loss_node(
    tape: &mut Tape,
    target_loss: NodeId,
    aux_losses: &[NodeId],
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut total = tape.scale(target_loss, lambda);
    for &aux in aux_losses {
        let weighted = tape.scale(aux, 1.0 - lambda);
        total = tape.add(total, weighted);
    }
    Ok(total)
}

// --- evaluation report ------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LabelMetric {
    pub label: String,
    pub ccc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionMetrics {
    pub mean_ccc: f64,
    pub per_label: Vec<LabelMetric>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CultureMetrics {
    pub mean_ccc: f64,
    pub per_label: Vec<LabelMetric>,
    /// Mean CCC over each country's ten-emotion block.
    pub per_country: Vec<(String, f64)>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Unweighted average recall over classes present in the targets.
    pub uar: f64,
    pub per_class_recall: Vec<(String, Option<f64>)>,
    pub samples: usize,
}

/// Per-task breakdown of one evaluation pass. Tasks without labels in the
/// evaluated split are absent.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub two: Option<RegressionMetrics>,
    pub high: Option<RegressionMetrics>,
    pub culture: Option<CultureMetrics>,
    pub vb_type: Option<ClassificationMetrics>,
    pub country: Option<ClassificationMetrics>,
}

impl MetricsReport {
    /// The early-stopping quantity: mean CCC for regression targets, UAR
    /// for classification targets.
    pub fn target_metric(&self, task: Task) -> Option<f64> {
        match task {
            Task::Two => self.two.as_ref().map(|m| m.mean_ccc),
            Task::High => self.high.as_ref().map(|m| m.mean_ccc),
            Task::Culture => self.culture.as_ref().map(|m| m.mean_ccc),
            Task::Type => self.vb_type.as_ref().map(|m| m.uar),
            Task::Country => self.country.as_ref().map(|m| m.uar),
        }
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        if let Some(m) = &self.two {
            lines.push(format!("two      mean CCC {:+.4}  (n={})", m.mean_ccc, m.samples));
        }
        if let Some(m) = &self.high {
            lines.push(format!("high     mean CCC {:+.4}  (n={})", m.mean_ccc, m.samples));
        }
        if let Some(m) = &self.culture {
            lines.push(format!("culture  mean CCC {:+.4}  (n={})", m.mean_ccc, m.samples));
        }
        if let Some(m) = &self.vb_type {
            lines.push(format!(
                "type     accuracy {:.4}  UAR {:.4}  (n={})",
                m.accuracy, m.uar, m.samples
            ));
        }
        if let Some(m) = &self.country {
            lines.push(format!(
                "country  accuracy {:.4}  UAR {:.4}  (n={})",
                m.accuracy, m.uar, m.samples
            ));
        }
        lines
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV, one row per label or class, for diffing across runs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "task,label,metric,value,samples")?;
        let write_reg =
            |file: &mut std::fs::File, task: &str, per_label: &[LabelMetric], mean: f64, n: usize| -> Result<()> {
                for lm in per_label {
                    writeln!(file, "{task},{},ccc,{},{n}", lm.label, lm.ccc)?;
                }
                writeln!(file, "{task},__mean__,mean_ccc,{mean},{n}")?;
                Ok(())
            };
        if let Some(m) = &self.two {
            write_reg(&mut file, "two", &m.per_label, m.mean_ccc, m.samples)?;
        }
        if let Some(m) = &self.high {
            write_reg(&mut file, "high", &m.per_label, m.mean_ccc, m.samples)?;
        }
        if let Some(m) = &self.culture {
            write_reg(&mut file, "culture", &m.per_label, m.mean_ccc, m.samples)?;
            for (country, value) in &m.per_country {
                writeln!(file, "culture,{country},country_mean_ccc,{value},{}", m.samples)?;
            }
        }
        let write_cls = |file: &mut std::fs::File, task: &str, m: &ClassificationMetrics| -> Result<()> {
            for (class, recall) in &m.per_class_recall {
                match recall {
                    Some(r) => writeln!(file, "{task},{class},recall,{r},{}", m.samples)?,
                    None => writeln!(file, "{task},{class},recall,,{}", m.samples)?,
                }
            }
            writeln!(file, "{task},__mean__,accuracy,{},{}", m.accuracy, m.samples)?;
            writeln!(file, "{task},__mean__,uar,{},{}", m.uar, m.samples)?;
            Ok(())
        };
        if let Some(m) = &self.vb_type {
            write_cls(&mut file, "type", m)?;
        }
        if let Some(m) = &self.country {
            write_cls(&mut file, "country", m)?;
        }
        Ok(())
    }
}

/// Computes the full per-task breakdown for aligned predictions and samples.
pub fn evaluate(
    predictions: &[TaskPredictions],
    samples: &[&Sample],
    schema: &LabelSchema,
) -> Result<MetricsReport> {
    if predictions.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "evaluate: {} predictions vs {} samples",
            predictions.len(),
            samples.len()
        )));
    }

    let two = regression_metrics(
        predictions,
        samples,
        &["arousal".to_string(), "valence".to_string()],
        |p| p.two().to_vec(),
        |s| match (s.arousal, s.valence) {
            (Some(a), Some(v)) => Some(vec![a, v]),
            _ => None,
        },
        schema.two_range(),
    )?;

    let high = regression_metrics(
        predictions,
        samples,
        schema.emotions(),
        |p| p.high().to_vec(),
        |s| s.high.clone(),
        schema.high_range(),
    )?;

    let culture_labels: Vec<String> =
        (0..crate::schema::CULTURE_DIM).map(|i| schema.culture_label(i)).collect();
    let culture_base = regression_metrics(
        predictions,
        samples,
        &culture_labels,
        |p| p.culture().to_vec(),
        |s| s.culture.clone(),
        schema.high_range(),
    )?;
    let culture = culture_base.map(|base| {
        let per_country = schema
            .countries()
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let block = &base.per_label[c * NUM_EMOTIONS..(c + 1) * NUM_EMOTIONS];
                let mean = block.iter().map(|lm| lm.ccc).sum::<f64>() / NUM_EMOTIONS as f64;
                (name.clone(), mean)
            })
            .collect();
        CultureMetrics {
            mean_ccc: base.mean_ccc,
            per_label: base.per_label,
            per_country,
            samples: base.samples,
        }
    });

    let vb_type = classification_metrics(
        predictions,
        samples,
        schema.vb_types(),
        |p| argmax(p.vb_type_probs()),
        |s, schema| s.vb_type.as_deref().and_then(|t| schema.vb_type_index(t)),
        schema,
    )?;
    let country = classification_metrics(
        predictions,
        samples,
        schema.countries(),
        |p| argmax(p.country_probs()),
        |s, schema| s.country.as_deref().and_then(|c| schema.country_index(c)),
        schema,
    )?;

    Ok(MetricsReport { two, high, culture, vb_type, country })
}

fn regression_metrics(
    predictions: &[TaskPredictions],
    samples: &[&Sample],
    labels: &[String],
    pred_values: impl Fn(&TaskPredictions) -> Vec<f64>,
    target_values: impl Fn(&Sample) -> Option<Vec<f64>>,
    range: (f64, f64),
) -> Result<Option<RegressionMetrics>> {
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    for (pred, sample) in predictions.iter().zip(samples) {
        if let Some(raw) = target_values(sample) {
            let normalized: Result<Vec<f64>> =
                raw.iter().map(|&v| normalize_target(v, range)).collect();
            ys.push(normalized?);
            xs.push(pred_values(pred));
        }
    }
    if xs.is_empty() {
        return Ok(None);
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 labeled samples to evaluate, got {}",
            xs.len()
        )));
    }
    let n = labels.len();
    let rows = xs.len();
    let x = Matrix::from_vec(rows, n, xs.concat())?;
    let y = Matrix::from_vec(rows, n, ys.concat())?;
    let (mean, per_label) = mean_ccc(&x, &y)?;
    Ok(Some(RegressionMetrics {
        mean_ccc: mean,
        per_label: labels
            .iter()
            .zip(per_label)
            .map(|(label, ccc)| LabelMetric { label: label.clone(), ccc })
            .collect(),
        samples: rows,
    }))
}

fn classification_metrics(
    predictions: &[TaskPredictions],
    samples: &[&Sample],
    classes: &[String],
    predicted_class: impl Fn(&TaskPredictions) -> usize,
    target_class: impl Fn(&Sample, &LabelSchema) -> Option<usize>,
    schema: &LabelSchema,
) -> Result<Option<ClassificationMetrics>> {
    let k = classes.len();
    let mut correct_per_class = vec![0usize; k];
    let mut count_per_class = vec![0usize; k];
    let mut total = 0usize;
    let mut correct = 0usize;
    for (pred, sample) in predictions.iter().zip(samples) {
        let Some(target) = target_class(sample, schema) else {
            continue;
        };
        let predicted = predicted_class(pred);
        total += 1;
        count_per_class[target] += 1;
        if predicted == target {
            correct += 1;
            correct_per_class[target] += 1;
        }
    }
    if total == 0 {
        return Ok(None);
    }
    if total < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 labeled samples to evaluate, got {total}"
        )));
    }
    let per_class_recall: Vec<(String, Option<f64>)> = classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let recall = if count_per_class[c] > 0 {
                Some(correct_per_class[c] as f64 / count_per_class[c] as f64)
            } else {
                None
            };
            (name.clone(), recall)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().filter_map(|(_, r)| *r).collect();
    Ok(Some(ClassificationMetrics {
        accuracy: correct as f64 / total as f64,
        uar: present.iter().sum::<f64>() / present.len() as f64,
        per_class_recall,
        samples: total,
    }))
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0)
}
