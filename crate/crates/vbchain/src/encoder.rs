//! Layer aggregation and attentive time pooling: the trainable half that
//! turns a feature stack into a fixed-length vector.
//!
//! The full encode step (aggregation, pooling, projection, batch
//! normalization, dropout) is assembled by [`crate::model::Model`], which
//! owns the parameters; this module holds the building blocks and their
//! plain-data entry points. Feature stacks come from a
//! [`crate::dataio::FeatureProvider`]: either precomputed `.vbfs` files or
//! the deterministic synthetic source.

use serde::{Deserialize, Serialize};

use crate::dataio::store::FeatureStack;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

/// Learnable per-layer logits; effective weights are their softmax, so the
/// mixture is always a convex combination of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub logits: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(num_layers: usize) -> Self {
        LayerWeights { logits: vec![0.0; num_layers] }
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }
}

/// Additive attention scorer: `score_t = u . tanh(W^T h_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentivePoolParams {
    /// `(D, A)` score projection.
    pub w: Matrix,
    /// `(A, 1)` context vector.
    pub u: Matrix,
}

impl AttentivePoolParams {
    pub fn validate(&self) -> Result<()> {
        if self.w.cols() == 0 || self.w.rows() == 0 {
            return Err(Error::ShapeMismatch("attention projection must be non-empty".into()));
        }
        if self.u.rows() != self.w.cols() || self.u.cols() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "context vector must be ({}, 1), got ({}, {})",
                self.w.cols(),
                self.u.rows(),
                self.u.cols()
            )));
        }
        if !self.w.is_finite() || !self.u.is_finite() {
            return Err(Error::NonFinite("attention parameters".into()));
        }
        Ok(())
    }
}

/// Fixed-length encoder output plus the attention map for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Flattens the stack into an `(L, T*D)` f64 matrix for the tape.
pub fn stack_to_matrix(stack: &FeatureStack) -> Matrix {
    Matrix::from_vec(
        stack.num_layers(),
        stack.frames() * stack.dim(),
        stack.data().iter().map(|&v| v as f64).collect(),
    )
    .expect("stack dimensions are consistent")
}

/// Softmax-weighted sum over layers: `out[t, d] = sum_l w_l stack[l, t, d]`.
pub fn aggregate_layers(stack: &FeatureStack, weights: &LayerWeights) -> Result<Matrix> {
    if weights.logits.len() != stack.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "stack has {} layers but weights cover {}",
            stack.num_layers(),
            weights.logits.len()
        )));
    }
    let mut tape = Tape::new();
    let stack_node = tape.leaf(stack_to_matrix(stack));
    let logits = tape.leaf(Matrix::row_vector(weights.logits.clone()));
    let out = aggregate_layers_node(&mut tape, stack_node, logits, stack.frames(), stack.dim());
    Ok(tape.value(out).clone())
}

/// Tape version of [`aggregate_layers`]; `stack_node` is `(L, T*D)`.
pub fn aggregate_layers_node(
    tape: &mut Tape,
    stack_node: NodeId,
    logits: NodeId,
    frames: usize,
    dim: usize,
) -> NodeId {
    let weights = tape.softmax_rows(logits);
    let mixed = tape.matmul(weights, stack_node);
    tape.reshape(mixed, frames, dim)
}

/// Attention-weighted frame average. `mask[t] = true` keeps frame `t`;
/// masked frames receive exactly zero attention. Returns the pooled vector
/// and the attention weights.
pub fn attentive_pool(
    frames: &Matrix,
    params: &AttentivePoolParams,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if params.w.rows() != frames.cols() {
        return Err(Error::ShapeMismatch(format!(
            "frames have dim {} but projection expects {}",
            frames.cols(),
            params.w.rows()
        )));
    }
    validate_mask(mask, frames.rows())?;
    let mut tape = Tape::new();
    let frames_node = tape.leaf(frames.clone());
    let w = tape.leaf(params.w.clone());
    let u = tape.leaf(params.u.clone());
    let (pooled, attention) = attentive_pool_node(&mut tape, frames_node, w, u, mask);
    Ok((tape.value(pooled).data().to_vec(), tape.value(attention).data().to_vec()))
}

fn validate_mask(mask: Option<&[bool]>, frames: usize) -> Result<()> {
    if let Some(mask) = mask {
        if mask.len() != frames {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} frames but stack has {frames}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllFramesMasked);
        }
    }
    Ok(())
}

/// Tape version of [`attentive_pool`]; `frames` is `(T, D)`.
pub fn attentive_pool_node(
    tape: &mut Tape,
    frames: NodeId,
    w: NodeId,
    u: NodeId,
    mask: Option<&[bool]>,
) -> (NodeId, NodeId) {
    let t = tape.value(frames).rows();
    let projected = tape.matmul(frames, w);
    let activated = tape.tanh(projected);
    let scores = tape.matmul(activated, u);
    let scores_row = tape.transpose(scores);
    let keep: Vec<bool> = match mask {
        Some(m) => m.to_vec(),
        None => vec![true; t],
    };
    let attention = tape.masked_softmax_row(scores_row, &keep);
    let pooled = tape.matmul(attention, frames);
    (pooled, attention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from(layers: &[Vec<f32>], frames: usize, dim: usize) -> FeatureStack {
        let data: Vec<f32> = layers.concat();
        FeatureStack::new("test", layers.len(), frames, dim, data).unwrap()
    }

    #[test]
    fn uniform_logits_average_layers() {
        // three layers holding constants 0, 1, 2 -> every entry 1.0
        let stack = stack_from(
            &[vec![0.0; 6], vec![1.0; 6], vec![2.0; 6]],
            2,
            3,
        );
        let out = aggregate_layers(&stack, &LayerWeights::uniform(3)).unwrap();
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_logits_select_a_layer() {
        let stack = stack_from(&[vec![5.0; 4], vec![-1.0; 4], vec![2.0; 4]], 2, 2);
        let weights = LayerWeights { logits: vec![50.0, -50.0, -50.0] };
        let out = aggregate_layers(&stack, &weights).unwrap();
        for &v in out.data() {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregation_matches_brute_force_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, t, d) = (4, 3, 5);
        let layers: Vec<Vec<f32>> =
            (0..l).map(|_| (0..t * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let stack = stack_from(&layers, t, d);
        let weights = LayerWeights { logits: (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let out = aggregate_layers(&stack, &weights).unwrap();

        let w = weights.effective_weights();
        for ti in 0..t {
            for di in 0..d {
                let expected: f64 = (0..l)
                    .map(|li| w[li] * stack.get(li, ti, di) as f64)
                    .sum();
                assert!((out.get(ti, di) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let stack = stack_from(&[vec![0.0; 4], vec![1.0; 4]], 2, 2);
        assert!(aggregate_layers(&stack, &LayerWeights::uniform(3)).is_err());
    }

    #[test]
    fn aggregation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, t, d) = (5, 4, 3);
        let stack_mat = Matrix::from_fn(l, t * d, |_, _| rng.gen_range(-1.0..1.0));
        let logits = Matrix::row_vector((0..l).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let eval = |logits: &Matrix| -> (f64, Option<Matrix>) {
            let mut tape = Tape::new();
            let s = tape.leaf(stack_mat.clone());
            let lg = tape.leaf(logits.clone());
            let agg = aggregate_layers_node(&mut tape, s, lg, t, d);
            let sq = tape.square(agg);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            (tape.value(loss).get(0, 0), Some(tape.grad(lg)))
        };
        let (_, grad) = eval(&logits);
        let grad = grad.unwrap();

        let h = 1e-3; // step in logit space
        for j in 0..l {
            let mut plus = logits.clone();
            plus.set(0, j, plus.get(0, j) + h);
            let mut minus = logits.clone();
            minus.set(0, j, minus.get(0, j) - h);
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let an = grad.get(0, j);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-4, "logit {j}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn single_frame_pooling_is_identity() {
        let frames = Matrix::row_vector(vec![0.3, -0.7, 1.2]);
        let params = AttentivePoolParams {
            w: Matrix::from_fn(3, 2, |i, j| 0.1 * (i + j) as f64),
            u: Matrix::from_vec(2, 1, vec![0.5, -0.5]).unwrap(),
        };
        let (pooled, attention) = attentive_pool(&frames, &params, None).unwrap();
        assert_eq!(pooled, vec![0.3, -0.7, 1.2]);
        assert_eq!(attention, vec![1.0]);
    }

    #[test]
    fn identical_frames_pool_to_themselves() {
        let frames = Matrix::from_fn(5, 3, |_, j| [0.4, -1.0, 2.5][j]);
        let params = AttentivePoolParams {
            w: Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin()),
            u: Matrix::from_fn(4, 1, |i, _| (i as f64 + 1.0) * 0.3),
        };
        let (pooled, attention) = attentive_pool(&frames, &params, None).unwrap();
        for (p, expected) in pooled.iter().zip([0.4, -1.0, 2.5]) {
            assert!((p - expected).abs() < 1e-12);
        }
        let sum: f64 = attention.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_set_scores_give_exact_softmax_weights() {
        // D = A = 1: score_t = u * tanh(w * h_t); choose u so that
        // score(h=1) = ln 3 and score(h=0) = 0.
        let w_val: f64 = 20.0;
        let u_val = 3f64.ln() / w_val.tanh();
        let frames = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let params = AttentivePoolParams {
            w: Matrix::from_vec(1, 1, vec![w_val]).unwrap(),
            u: Matrix::from_vec(1, 1, vec![u_val]).unwrap(),
        };
        let (pooled, attention) = attentive_pool(&frames, &params, None).unwrap();
        assert!((attention[0] - 0.75).abs() < 1e-12, "attention {attention:?}");
        assert!((attention[1] - 0.25).abs() < 1e-12);
        assert!((pooled[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_frames_get_zero_attention_and_pooling_stays_in_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let params = AttentivePoolParams {
            w: Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)),
            u: Matrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let mask = vec![true, false, true, true, false, true];
        let (pooled, attention) = attentive_pool(&frames, &params, Some(&mask)).unwrap();
        assert_eq!(attention[1], 0.0);
        assert_eq!(attention[4], 0.0);
        let sum: f64 = attention.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // convex combination: each output dim between min and max of kept frames
        for d in 0..4 {
            let kept: Vec<f64> =
                (0..6).filter(|&t| mask[t]).map(|t| frames.get(t, d)).collect();
            let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(pooled[d] >= lo - 1e-12 && pooled[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let frames = Matrix::from_fn(3, 2, |_, _| 0.5);
        let params = AttentivePoolParams {
            w: Matrix::from_fn(2, 2, |_, _| 0.1),
            u: Matrix::from_fn(2, 1, |_, _| 0.1),
        };
        match attentive_pool(&frames, &params, Some(&[false, false, false])) {
            Err(Error::AllFramesMasked) => {}
            other => panic!("expected AllFramesMasked, got {other:?}"),
        }
    }
}
