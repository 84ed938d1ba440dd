//! Preference-conditioned causal self-attention recommender.
//!
//! The preference vector is projected into embedding space and added to every
//! position's input embedding; blocks are pre-layer-norm with GELU feed
//! forward; output logits are dot products of final hidden states with the
//! tied item embedding table. All arithmetic is 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{GFunction, LossError};
use crate::sampling::PreferenceVector;
use crate::tape::{Gradients, NodeId, ParamId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("prefix length {len} exceeds max_len {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("item index {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: u32, vocab: usize },
    #[error("parameters changed between forward and backward (tape version {tape}, params version {params})")]
    TapeMismatch { tape: u64, params: u64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_len == 0
            || self.vocab_size == 0
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Fixed tensor order inside `Parameters`; this is also the checkpoint layout.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    n_layers: usize,
}

const TENSORS_PER_LAYER: usize = 16;

/// Per-layer parameter handles in layout order.
pub struct LayerIds {
    pub ln1_scale: ParamId,
    pub ln1_offset: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_scale: ParamId,
    pub ln2_offset: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_layers: config.n_layers,
        }
    }

    pub fn item_embeddings(&self) -> ParamId {
        ParamId(0)
    }

    pub fn positional_embeddings(&self) -> ParamId {
        ParamId(1)
    }

    pub fn preference_projection(&self) -> ParamId {
        ParamId(2)
    }

    pub fn layer(&self, i: usize) -> LayerIds {
        assert!(i < self.n_layers);
        let base = 3 + i * TENSORS_PER_LAYER;
        LayerIds {
            ln1_scale: ParamId(base),
            ln1_offset: ParamId(base + 1),
            w_q: ParamId(base + 2),
            b_q: ParamId(base + 3),
            w_k: ParamId(base + 4),
            b_k: ParamId(base + 5),
            w_v: ParamId(base + 6),
            b_v: ParamId(base + 7),
            w_o: ParamId(base + 8),
            b_o: ParamId(base + 9),
            ln2_scale: ParamId(base + 10),
            ln2_offset: ParamId(base + 11),
            ffn_w1: ParamId(base + 12),
            ffn_b1: ParamId(base + 13),
            ffn_w2: ParamId(base + 14),
            ffn_b2: ParamId(base + 15),
        }
    }

    pub fn final_ln_scale(&self) -> ParamId {
        ParamId(3 + self.n_layers * TENSORS_PER_LAYER)
    }

    pub fn final_ln_offset(&self) -> ParamId {
        ParamId(4 + self.n_layers * TENSORS_PER_LAYER)
    }

    pub fn n_params(&self) -> usize {
        5 + self.n_layers * TENSORS_PER_LAYER
    }
}

/// Names and shapes of every tensor in layout order.
pub fn param_manifest(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, v) = (config.d_model, config.vocab_size);
    let hidden = 4 * d;
    let mut out = vec![
        ("item_embeddings".to_string(), (v, d)),
        ("positional_embeddings".to_string(), (config.max_len, d)),
        ("preference_projection".to_string(), (2, d)),
    ];
    for i in 0..config.n_layers {
        for (suffix, shape) in [
            ("ln1.scale", (1, d)),
            ("ln1.offset", (1, d)),
            ("attn.w_q", (d, d)),
            ("attn.b_q", (1, d)),
            ("attn.w_k", (d, d)),
            ("attn.b_k", (1, d)),
            ("attn.w_v", (d, d)),
            ("attn.b_v", (1, d)),
            ("attn.w_o", (d, d)),
            ("attn.b_o", (1, d)),
            ("ln2.scale", (1, d)),
            ("ln2.offset", (1, d)),
            ("ffn.w1", (d, hidden)),
            ("ffn.b1", (1, hidden)),
            ("ffn.w2", (hidden, d)),
            ("ffn.b2", (1, d)),
        ] {
            out.push((format!("layer{i}.{suffix}"), shape));
        }
    }
    out.push(("final_ln.scale".to_string(), (1, d)));
    out.push(("final_ln.offset".to_string(), (1, d)));
    out
}

/// All learnable tensors plus a version counter used to detect stale tapes.
#[derive(Debug, Clone)]
pub struct Parameters {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    version: u64,
}

impl Parameters {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let manifest = param_manifest(&config);
        if tensors.len() != manifest.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(tensors.iter()) {
            if t.shape() != *shape {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            config,
            tensors,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access bumps the version so stale tapes are rejected.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.tensors[id.0]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Deterministic initialization from `config.seed`: embeddings are
/// `N(0, 1/d_model)`, projection and feed-forward weights are Glorot
/// `N(0, 2/(fan_in+fan_out))`, norms start at scale 1 / offset 0, biases at 0.
pub fn init_params(config: &ModelConfig) -> Result<Parameters, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let emb_std = (1.0 / config.d_model as f64).sqrt();
    let mut tensors = Vec::new();
    for (name, (rows, cols)) in param_manifest(config) {
        let t = if name.ends_with(".scale") {
            Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
        } else if name.ends_with(".offset") || name.contains(".b_") || name.contains(".b1")
            || name.contains(".b2")
        {
            Tensor::zeros(rows, cols)
        } else if name.ends_with("embeddings") {
            sample_normal(&mut rng, rows, cols, emb_std)
        } else {
            // Weight matrix: fan_in = rows, fan_out = cols.
            let std = (2.0 / (rows + cols) as f64).sqrt();
            sample_normal(&mut rng, rows, cols, std)
        };
        tensors.push(t);
    }
    Parameters::from_tensors(*config, tensors)
}

fn sample_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Per-position logits over a candidate set.
#[derive(Debug, Clone)]
pub struct Scores {
    logits: Tensor,
}

impl Scores {
    pub fn positions(&self) -> usize {
        self.logits.rows()
    }

    pub fn candidates(&self) -> usize {
        self.logits.cols()
    }

    pub fn get(&self, position: usize, candidate: usize) -> f64 {
        self.logits.get(position, candidate)
    }

    pub fn row(&self, position: usize) -> &[f64] {
        self.logits.row(position)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.logits
    }
}

/// Candidate set for scoring: the whole vocabulary or an explicit subset.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    All,
    Subset(&'a [u32]),
}

/// Tape handles for every parameter, bound once per recorded computation.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Snapshot all parameters onto a tape.
pub fn bind_params(tape: &mut Tape, params: &Parameters) -> BoundParams {
    let nodes = (0..params.n_tensors())
        .map(|i| tape.param(ParamId(i), params.tensor(ParamId(i)).clone()))
        .collect();
    BoundParams { nodes }
}

fn validate_items(items: &[u32], vocab: usize) -> Result<(), ModelError> {
    for &i in items {
        if i as usize >= vocab {
            return Err(ModelError::IndexOutOfVocab {
                index: i,
                vocab,
            });
        }
    }
    Ok(())
}

/// Record the backbone on the tape: embedding lookup plus positional and
/// preference terms, `n_layers` pre-norm blocks, final layer norm. Returns
/// the final hidden states, one row per prefix position.
pub fn build_hidden(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    prefix: &[u32],
    pi: &PreferenceVector,
) -> NodeId {
    let layout = Layout::new(config);
    let t_len = prefix.len();
    let d = config.d_model;
    let dh = d / config.n_heads;

    let tok = tape.gather_rows(bound.node(layout.item_embeddings()), prefix);
    let positions: Vec<u32> = (0..t_len as u32).collect();
    let pos = tape.gather_rows(bound.node(layout.positional_embeddings()), &positions);
    let mut x = tape.add(tok, pos);

    let pi_row = tape.constant(Tensor::row_vector(vec![pi.pi_c(), pi.pi_o()]));
    let pi_emb = tape.matmul(pi_row, bound.node(layout.preference_projection()));
    x = tape.add_row_broadcast(x, pi_emb);

    for i in 0..config.n_layers {
        let ids = layout.layer(i);
        let normed = tape.layer_norm(x, bound.node(ids.ln1_scale), bound.node(ids.ln1_offset));
        let q = tape.matmul(normed, bound.node(ids.w_q));
        let q = tape.add_row_broadcast(q, bound.node(ids.b_q));
        let k = tape.matmul(normed, bound.node(ids.w_k));
        let k = tape.add_row_broadcast(k, bound.node(ids.b_k));
        let v = tape.matmul(normed, bound.node(ids.w_v));
        let v = tape.add_row_broadcast(v, bound.node(ids.b_v));

        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.causal_softmax(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let proj = tape.matmul(merged, bound.node(ids.w_o));
        let proj = tape.add_row_broadcast(proj, bound.node(ids.b_o));
        x = tape.add(x, proj);

        let normed2 = tape.layer_norm(x, bound.node(ids.ln2_scale), bound.node(ids.ln2_offset));
        let f = tape.matmul(normed2, bound.node(ids.ffn_w1));
        let f = tape.add_row_broadcast(f, bound.node(ids.ffn_b1));
        let f = tape.gelu(f);
        let f = tape.matmul(f, bound.node(ids.ffn_w2));
        let f = tape.add_row_broadcast(f, bound.node(ids.ffn_b2));
        x = tape.add(x, f);
    }

    tape.layer_norm(
        x,
        bound.node(layout.final_ln_scale()),
        bound.node(layout.final_ln_offset()),
    )
}

/// Score every prefix position against the candidate set, conditioned on `pi`.
pub fn forward_scores(
    params: &Parameters,
    prefix: &[u32],
    pi: &PreferenceVector,
    candidates: Candidates<'_>,
) -> Result<Scores, ModelError> {
    let config = params.config();
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if prefix.len() > config.max_len {
        return Err(ModelError::PrefixTooLong {
            len: prefix.len(),
            max_len: config.max_len,
        });
    }
    validate_items(prefix, config.vocab_size)?;
    if let Candidates::Subset(items) = candidates {
        validate_items(items, config.vocab_size)?;
    }

    let mut tape = Tape::new(params.version());
    let bound = bind_params(&mut tape, params);
    let hidden = build_hidden(&mut tape, &bound, config, prefix, pi);
    let layout = params.layout();
    let logits = match candidates {
        Candidates::All => tape.matmul_nt(hidden, bound.node(layout.item_embeddings())),
        Candidates::Subset(items) => {
            let table = tape.gather_rows(bound.node(layout.item_embeddings()), items);
            tape.matmul_nt(hidden, table)
        }
    };
    Ok(Scores {
        logits: tape.value(logits).clone(),
    })
}

/// One session's contribution to the training objective.
pub struct SessionLossNodes {
    pub total: NodeId,
    pub l_c: NodeId,
    pub l_o: NodeId,
    pub reg: Option<NodeId>,
}

/// Record the full per-session objective: position-mean click and order
/// losses, scalarized with this session's preference draw, plus the
/// non-uniformity penalty when `lambda > 0`. `neg_emb` must be the gathered
/// embedding rows for `neg_ids` (shared across the batch).
#[allow(clippy::too_many_arguments)]
pub fn build_session_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
    order_labels: &[f64],
    neg_emb: NodeId,
    neg_ids: &[u32],
    pi: &PreferenceVector,
    lambda: f64,
    g: GFunction,
) -> Result<SessionLossNodes, ModelError> {
    assert_eq!(inputs.len(), targets.len());
    assert_eq!(inputs.len(), order_labels.len());
    let layout = Layout::new(config);
    let hidden = build_hidden(tape, bound, config, inputs, pi);
    let neg_logits = tape.matmul_nt(hidden, neg_emb);
    let pos_logits = tape.gather_row_dot(hidden, bound.node(layout.item_embeddings()), targets);
    let click_vec = tape.sampled_softmax_loss(pos_logits, neg_logits, targets, neg_ids);
    let l_c = tape.mean_all(click_vec);
    let order_vec = tape.bce_with_logits(pos_logits, order_labels);
    let l_o = tape.mean_all(order_vec);

    let mut terms = vec![(pi.pi_c(), l_c), (pi.pi_o(), l_o)];
    let reg = if lambda > 0.0 {
        let reg = tape.non_uniformity(l_c, l_o, pi, g)?;
        terms.push((lambda, reg));
        Some(reg)
    } else {
        None
    };
    let total = tape.affine_combine(&terms);
    Ok(SessionLossNodes {
        total,
        l_c,
        l_o,
        reg,
    })
}

/// Gradients of every parameter from a recorded computation, seeded with
/// `loss_gradient` at `output`. Fails if the parameters were updated after
/// the tape was recorded.
pub fn backward(
    params: &Parameters,
    tape: &Tape,
    output: NodeId,
    loss_gradient: f64,
) -> Result<Gradients, ModelError> {
    if tape.params_version() != params.version() {
        return Err(ModelError::TapeMismatch {
            tape: tape.params_version(),
            params: params.version(),
        });
    }
    Ok(tape.backward_from(output, loss_gradient, params.n_tensors()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 10,
            vocab_size: 10,
            seed: 11,
        }
    }

    fn pi(pi_c: f64) -> PreferenceVector {
        PreferenceVector::new(pi_c, 1.0 - pi_c).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let config = tiny_config();
        let a = init_params(&config).unwrap();
        let b = init_params(&config).unwrap();
        for i in 0..a.n_tensors() {
            assert_eq!(a.tensor(ParamId(i)), b.tensor(ParamId(i)));
        }
    }

    #[test]
    fn init_shapes_follow_config() {
        let params = init_params(&tiny_config()).unwrap();
        let layout = params.layout();
        assert_eq!(params.tensor(layout.item_embeddings()).shape(), (10, 8));
        assert_eq!(params.tensor(layout.positional_embeddings()).shape(), (10, 8));
        assert_eq!(params.tensor(layout.preference_projection()).shape(), (2, 8));
        assert_eq!(params.tensor(layout.layer(0).ffn_w1).shape(), (8, 32));
    }

    #[test]
    fn init_embedding_variance_close_to_inverse_d() {
        let config = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 4,
            vocab_size: 1000,
            seed: 5,
        };
        let params = init_params(&config).unwrap();
        let emb = params.tensor(params.layout().item_embeddings());
        let n = emb.len() as f64;
        let mean = emb.data().iter().sum::<f64>() / n;
        let var = emb.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / config.d_model as f64;
        assert!(
            (var - expected).abs() / expected < 0.2,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut config = tiny_config();
        config.n_heads = 3;
        assert!(matches!(
            init_params(&config),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn scores_have_expected_shape_and_are_finite() {
        let params = init_params(&tiny_config()).unwrap();
        let scores =
            forward_scores(&params, &[1, 4, 2], &pi(0.5), Candidates::All).unwrap();
        assert_eq!(scores.positions(), 3);
        assert_eq!(scores.candidates(), 10);
        for p in 0..3 {
            assert!(scores.row(p).iter().all(|v| v.is_finite()));
        }
        let subset =
            forward_scores(&params, &[1, 4, 2], &pi(0.5), Candidates::Subset(&[0, 9])).unwrap();
        assert_eq!(subset.candidates(), 2);
    }

    #[test]
    fn causality_earlier_positions_ignore_later_items() {
        let params = init_params(&tiny_config()).unwrap();
        let a = forward_scores(&params, &[3, 7, 1], &pi(0.3), Candidates::All).unwrap();
        let b = forward_scores(&params, &[3, 7, 6], &pi(0.3), Candidates::All).unwrap();
        for p in 0..2 {
            assert_eq!(a.row(p), b.row(p), "position {p} must not see position 2");
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn zero_projection_makes_scores_preference_invariant() {
        let mut params = init_params(&tiny_config()).unwrap();
        let proj = params.layout().preference_projection();
        *params.tensor_mut(proj) = Tensor::zeros(2, 8);
        let a = forward_scores(&params, &[2, 5], &pi(0.9), Candidates::All).unwrap();
        let b = forward_scores(&params, &[2, 5], &pi(0.1), Candidates::All).unwrap();
        assert_eq!(a.tensor(), b.tensor());
    }

    #[test]
    fn nonzero_projection_shifts_scores() {
        let params = init_params(&tiny_config()).unwrap();
        let a = forward_scores(&params, &[2, 5], &pi(0.9), Candidates::All).unwrap();
        let b = forward_scores(&params, &[2, 5], &pi(0.1), Candidates::All).unwrap();
        assert_ne!(a.tensor(), b.tensor());
    }

    #[test]
    fn prefix_validation_errors() {
        let params = init_params(&tiny_config()).unwrap();
        assert!(matches!(
            forward_scores(&params, &[], &pi(0.5), Candidates::All),
            Err(ModelError::EmptyPrefix)
        ));
        let long: Vec<u32> = (0..11).map(|i| i % 10).collect();
        assert!(matches!(
            forward_scores(&params, &long, &pi(0.5), Candidates::All),
            Err(ModelError::PrefixTooLong { .. })
        ));
        assert!(matches!(
            forward_scores(&params, &[42], &pi(0.5), Candidates::All),
            Err(ModelError::IndexOutOfVocab { .. })
        ));
    }

    fn record_session_loss(
        params: &Parameters,
        lambda: f64,
    ) -> (Tape, SessionLossNodes) {
        let mut tape = Tape::new(params.version());
        let bound = bind_params(&mut tape, params);
        let layout = params.layout();
        let neg_ids = [0u32, 2, 9];
        let neg_emb = tape.gather_rows(bound.node(layout.item_embeddings()), &neg_ids);
        let nodes = build_session_loss(
            &mut tape,
            &bound,
            params.config(),
            &[1, 4, 2],
            &[4, 2, 7],
            &[0.0, 1.0, 0.0],
            neg_emb,
            &neg_ids,
            &pi(0.4),
            lambda,
            GFunction::Softmax,
        )
        .unwrap();
        (tape, nodes)
    }

    #[test]
    fn session_loss_gradients_match_finite_differences() {
        let params = init_params(&tiny_config()).unwrap();
        let (tape, nodes) = record_session_loss(&params, 0.5);
        let grads = backward(&params, &tape, nodes.total, 1.0).unwrap();

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut checked = 0;
        while checked < 40 {
            let id = ParamId(rand::Rng::random_range(&mut rng, 0..params.n_tensors()));
            let len = params.tensor(id).len();
            let coord = rand::Rng::random_range(&mut rng, 0..len);
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensor_mut(id).data_mut()[coord] += delta;
                let (t, n) = record_session_loss(&p, 0.5);
                t.value(n.total).scalar()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.get(id).map(|g| g.data()[coord]).unwrap_or(0.0);
            if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                continue;
            }
            let denom = fd.abs().max(an.abs());
            assert!(
                (an - fd).abs() / denom < 1e-5,
                "{id:?} coord {coord}: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
    }

    #[test]
    fn absent_item_embedding_gradient_is_exactly_zero() {
        let params = init_params(&tiny_config()).unwrap();
        let (tape, nodes) = record_session_loss(&params, 0.5);
        let grads = backward(&params, &tape, nodes.total, 1.0).unwrap();
        let emb_grad = grads.get(params.layout().item_embeddings()).unwrap();
        // Items used: inputs {1,4,2}, targets {4,2,7}, negatives {0,2,9}.
        for absent in [3usize, 5, 6, 8] {
            assert!(
                emb_grad.row(absent).iter().all(|&v| v == 0.0),
                "item {absent} was never touched"
            );
        }
        assert!(emb_grad.row(4).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn doubling_the_seed_doubles_gradients() {
        let params = init_params(&tiny_config()).unwrap();
        let (tape, nodes) = record_session_loss(&params, 0.5);
        let g1 = backward(&params, &tape, nodes.total, 1.0).unwrap();
        let g2 = backward(&params, &tape, nodes.total, 2.0).unwrap();
        for i in 0..params.n_tensors() {
            match (g1.get(ParamId(i)), g2.get(ParamId(i))) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data().iter()) {
                        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
                    }
                }
                (None, None) => {}
                _ => panic!("gradient presence mismatch for tensor {i}"),
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut params = init_params(&tiny_config()).unwrap();
        let (tape, nodes) = record_session_loss(&params, 0.0);
        params.tensor_mut(ParamId(0)).data_mut()[0] += 1.0;
        assert!(matches!(
            backward(&params, &tape, nodes.total, 1.0),
            Err(ModelError::TapeMismatch { .. })
        ));
    }
}
