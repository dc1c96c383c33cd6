//! Structured output layer: correlation-derived chain ordering,
//! bi-directional regression chains, and the hierarchical task graph that
//! conditions every downstream task on the arousal/valence prediction.

use serde::{Deserialize, Serialize};

use crate::analysis::correlation_matrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{DropoutSource, NodeId, Tape};

/// Label permutation by descending accumulated absolute correlation, frozen
/// into the model artifact so inference uses the training-split order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOrder {
    order: Vec<usize>,
    accumulated: Vec<f64>,
}

impl ChainOrder {
    pub fn new(order: Vec<usize>, accumulated: Vec<f64>) -> Result<Self> {
        let chain = ChainOrder { order, accumulated };
        chain.validate()?;
        Ok(chain)
    }

    /// Trivial order `0..n`, used when no label data is available.
    pub fn identity(n: usize) -> Self {
        ChainOrder { order: (0..n).collect(), accumulated: vec![0.0; n] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.order.len();
        if self.accumulated.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "chain order: {} positions but {} accumulated values",
                n,
                self.accumulated.len()
            )));
        }
        let mut seen = vec![false; n];
        for &label in &self.order {
            if label >= n || seen[label] {
                return Err(Error::InvalidArgument("chain order is not a permutation".into()));
            }
            seen[label] = true;
        }
        for w in self.order.windows(2) {
            let (a, b) = (self.accumulated[w[0]], self.accumulated[w[1]]);
            if a < b || (a == b && w[0] > w[1]) {
                return Err(Error::InvalidArgument(
                    "chain order violates descending accumulated |r| with index tie-break".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Label indices in chain position order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Accumulated absolute correlation per label index.
    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    pub fn reversed(&self) -> ChainOrder {
        ChainOrder {
            order: self.order.iter().rev().copied().collect(),
            accumulated: self.accumulated.clone(),
        }
    }
}

/// Sorts labels by the accumulated absolute Pearson correlation with all
/// other labels (diagonal excluded), descending, ties broken by ascending
/// label index.
pub fn derive_chain_order(label_matrix: &Matrix) -> Result<ChainOrder> {
    let n = label_matrix.cols();
    let names: Vec<String> = (0..n).map(|j| format!("label_{j}")).collect();
    let r = correlation_matrix(label_matrix, &names)?;
    let accumulated: Vec<f64> = (0..n)
        .map(|j| (0..n).filter(|&k| k != j).map(|k| r.get(j, k).abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        accumulated[b]
            .partial_cmp(&accumulated[a])
            .expect("correlations are finite")
            .then(a.cmp(&b))
    });
    ChainOrder::new(order, accumulated)
}

/// Parameters of one chain predictor `f_i`: a single affine map, or one
/// hidden tanh layer when the model is configured with `chain_hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPredictor {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Option<Matrix>,
    pub b2: Option<Matrix>,
}

impl ChainPredictor {
    fn validate(&self, expected_inputs: usize) -> Result<()> {
        if self.w1.rows() != expected_inputs {
            return Err(Error::ShapeMismatch(format!(
                "chain predictor expects {expected_inputs} inputs, got {}",
                self.w1.rows()
            )));
        }
        if self.b1.rows() != 1 || self.b1.cols() != self.w1.cols() {
            return Err(Error::ShapeMismatch("chain predictor bias shape".into()));
        }
        match (&self.w2, &self.b2) {
            (None, None) => {
                if self.w1.cols() != 1 {
                    return Err(Error::ShapeMismatch(
                        "affine chain predictor must map to one output".into(),
                    ));
                }
            }
            (Some(w2), Some(b2)) => {
                if w2.rows() != self.w1.cols() || w2.cols() != 1 || b2.cols() != 1 {
                    return Err(Error::ShapeMismatch("chain predictor hidden layer shape".into()));
                }
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "chain predictor needs both or neither of w2/b2".into(),
                ))
            }
        }
        Ok(())
    }
}

/// One chain direction: predictor `i` consumes the feature vector plus the
/// `i` previously produced scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub feature_dim: usize,
    pub predictors: Vec<ChainPredictor>,
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.predictors.iter().enumerate() {
            p.validate(self.feature_dim + i)?;
        }
        Ok(())
    }
}

/// Test hook: fixes the score at one chain position, both for the reported
/// output and for everything later in the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainHook {
    pub position: usize,
    pub value: f64,
}

/// Node handles of one chain predictor on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ChainPredictorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: Option<NodeId>,
    pub b2: Option<NodeId>,
}

/// Runs one chain direction over a `(B, F)` feature node and reports the
/// `(B, N)` scores in label-index order.
pub fn chain_forward_node(
    tape: &mut Tape,
    features: NodeId,
    order: &ChainOrder,
    predictors: &[ChainPredictorNodes],
    hook: Option<&ChainHook>,
) -> Result<NodeId> {
    let n = order.len();
    if predictors.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "chain over {n} labels needs {n} predictors, got {}",
            predictors.len()
        )));
    }
    let batch = tape.value(features).rows();
    let feature_dim = tape.value(features).cols();

    let mut produced: Vec<NodeId> = Vec::with_capacity(n);
    for (position, nodes) in predictors.iter().enumerate() {
        let expected_inputs = feature_dim + position;
        if tape.value(nodes.w1).rows() != expected_inputs {
            return Err(Error::ShapeMismatch(format!(
                "chain position {position}: predictor expects {} inputs, needs {expected_inputs}",
                tape.value(nodes.w1).rows()
            )));
        }
        let input = if produced.is_empty() {
            features
        } else {
            let mut parts = vec![features];
            parts.extend(&produced);
            tape.concat_cols(&parts)
        };
        let pre = apply_predictor(tape, input, nodes);
        let mut score = tape.sigmoid(pre);
        if let Some(h) = hook {
            if h.position == position {
                score = tape.leaf(Matrix::filled(batch, 1, h.value));
            }
        }
        produced.push(score);
    }

    // report in label-index order
    let mut by_label = vec![produced[0]; n];
    for (position, &label) in order.order().iter().enumerate() {
        by_label[label] = produced[position];
    }
    Ok(tape.concat_cols(&by_label))
}

fn apply_predictor(tape: &mut Tape, input: NodeId, nodes: &ChainPredictorNodes) -> NodeId {
    match (nodes.w2, nodes.b2) {
        (Some(w2), Some(b2)) => {
            let hidden = tape.affine(input, nodes.w1, nodes.b1);
            let activated = tape.tanh(hidden);
            tape.affine(activated, w2, b2)
        }
        _ => tape.affine(input, nodes.w1, nodes.b1),
    }
}

/// Average of a forward chain and a second chain run in the reverse order.
pub fn bidirectional_chain_node(
    tape: &mut Tape,
    features: NodeId,
    order: &ChainOrder,
    forward: &[ChainPredictorNodes],
    backward: &[ChainPredictorNodes],
    forward_hook: Option<&ChainHook>,
    backward_hook: Option<&ChainHook>,
) -> Result<NodeId> {
    let fwd = chain_forward_node(tape, features, order, forward, forward_hook)?;
    let reversed = order.reversed();
    let bwd = chain_forward_node(tape, features, &reversed, backward, backward_hook)?;
    let sum = tape.add(fwd, bwd);
    Ok(tape.scale(sum, 0.5))
}

/// Single-sample chain regression over plain data.
pub fn chain_forward(features: &[f64], order: &ChainOrder, params: &ChainParams) -> Result<Vec<f64>> {
    params.validate()?;
    if params.feature_dim != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "chain expects {} features, got {}",
            params.feature_dim,
            features.len()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(Matrix::row_vector(features.to_vec()));
    let nodes = leaf_predictors(&mut tape, params);
    let out = chain_forward_node(&mut tape, z, order, &nodes, None)?;
    Ok(tape.value(out).data().to_vec())
}

/// Single-sample bi-directional chain over plain data.
pub fn bidirectional_chain(
    features: &[f64],
    order: &ChainOrder,
    params_fwd: &ChainParams,
    params_bwd: &ChainParams,
) -> Result<Vec<f64>> {
    params_fwd.validate()?;
    params_bwd.validate()?;
    let mut tape = Tape::new();
    let z = tape.leaf(Matrix::row_vector(features.to_vec()));
    let fwd = leaf_predictors(&mut tape, params_fwd);
    let bwd = leaf_predictors(&mut tape, params_bwd);
    let out = bidirectional_chain_node(&mut tape, z, order, &fwd, &bwd, None, None)?;
    Ok(tape.value(out).data().to_vec())
}

fn leaf_predictors(tape: &mut Tape, params: &ChainParams) -> Vec<ChainPredictorNodes> {
    params
        .predictors
        .iter()
        .map(|p| ChainPredictorNodes {
            w1: tape.leaf(p.w1.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: p.w2.as_ref().map(|m| tape.leaf(m.clone())),
            b2: p.b2.as_ref().map(|m| tape.leaf(m.clone())),
        })
        .collect()
}

// --- hierarchical task graph ------------------------------------------------

/// HIGH / CULTURE head form: bi-directional chain, or one plain
/// multi-sigmoid layer in the ablation configuration.
pub enum HeadNodes {
    Chain { forward: Vec<ChainPredictorNodes>, backward: Vec<ChainPredictorNodes> },
    Plain { w: NodeId, b: NodeId },
}

/// Node handles of every parameter consumed by [`forward_all_node`].
pub struct TaskGraphNodes {
    pub shared: (NodeId, NodeId),
    pub spec_two: (NodeId, NodeId),
    pub spec_high: (NodeId, NodeId),
    pub spec_culture: (NodeId, NodeId),
    pub spec_type: (NodeId, NodeId),
    pub spec_country: (NodeId, NodeId),
    pub head_two: (NodeId, NodeId),
    pub head_type: (NodeId, NodeId),
    pub head_country: (NodeId, NodeId),
    pub high_head: HeadNodes,
    pub culture_head: HeadNodes,
}

/// Test hooks for the conditioning graph.
#[derive(Debug, Clone, Default)]
pub struct ForwardHooks {
    /// Replaces the arousal/valence values consumed by the downstream tasks;
    /// the reported TWO output stays untouched.
    pub two_downstream_override: Option<Matrix>,
}

/// Output nodes of the five task heads, each `(B, dim)`.
pub struct TaskOutputs {
    pub two: NodeId,
    pub high: NodeId,
    pub country_probs: NodeId,
    pub culture: NodeId,
    pub vb_type_probs: NodeId,
}

/// Wires the hierarchical graph: a shared layer feeds five task-specific
/// layers; HIGH, TYPE, COUNTRY and CULTURE all consume the TWO prediction,
/// and CULTURE additionally consumes HIGH and the COUNTRY probabilities.
/// Gradients flow through every conditioning edge.
pub fn forward_all_node(
    tape: &mut Tape,
    z: NodeId,
    nodes: &TaskGraphNodes,
    order_high: &ChainOrder,
    order_culture: &ChainOrder,
    dropout: &mut DropoutSource,
    hooks: &ForwardHooks,
) -> Result<TaskOutputs> {
    let shared = block(tape, z, nodes.shared, dropout);
    let s_two = block(tape, shared, nodes.spec_two, dropout);
    let s_high = block(tape, shared, nodes.spec_high, dropout);
    let s_culture = block(tape, shared, nodes.spec_culture, dropout);
    let s_type = block(tape, shared, nodes.spec_type, dropout);
    let s_country = block(tape, shared, nodes.spec_country, dropout);

    let two_pre = tape.affine(s_two, nodes.head_two.0, nodes.head_two.1);
    let two = tape.sigmoid(two_pre);
    let two_downstream = match &hooks.two_downstream_override {
        Some(values) => tape.leaf(values.clone()),
        None => two,
    };

    let high_in = tape.concat_cols(&[s_high, two_downstream]);
    let high = head_output(tape, high_in, &nodes.high_head, order_high)?;

    let type_in = tape.concat_cols(&[s_type, two_downstream]);
    let type_pre = tape.affine(type_in, nodes.head_type.0, nodes.head_type.1);
    let vb_type_probs = tape.softmax_rows(type_pre);

    let country_in = tape.concat_cols(&[s_country, two_downstream]);
    let country_pre = tape.affine(country_in, nodes.head_country.0, nodes.head_country.1);
    let country_probs = tape.softmax_rows(country_pre);

    let culture_in = tape.concat_cols(&[s_culture, two_downstream, high, country_probs]);
    let culture = head_output(tape, culture_in, &nodes.culture_head, order_culture)?;

    Ok(TaskOutputs { two, high, country_probs, culture, vb_type_probs })
}

fn block(tape: &mut Tape, x: NodeId, (w, b): (NodeId, NodeId), dropout: &mut DropoutSource) -> NodeId {
    let pre = tape.affine(x, w, b);
    let act = tape.relu(pre);
    dropout.apply(tape, act)
}

fn head_output(
    tape: &mut Tape,
    input: NodeId,
    head: &HeadNodes,
    order: &ChainOrder,
) -> Result<NodeId> {
    match head {
        HeadNodes::Plain { w, b } => {
            let pre = tape.affine(input, *w, *b);
            Ok(tape.sigmoid(pre))
        }
        HeadNodes::Chain { forward, backward } => {
            bidirectional_chain_node(tape, input, order, forward, backward, None, None)
        }
    }
}
