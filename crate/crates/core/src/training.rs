//! Mini-batch training of the preference-conditioned objective, the
//! adaptive-moment optimizer and versioned checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Dataset;
use crate::losses::GFunction;
use crate::model::{
    backward, bind_params, build_session_loss, init_params, ModelConfig, ModelError, Parameters,
};
use crate::sampling::{sample_preference, DirichletParams, PreferenceVector};
use crate::tape::{Gradients, ParamId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no session with at least 2 clicks")]
    EmptyDataset,
    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("gradient/parameter shape mismatch on tensor {index}: {got:?} vs {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub beta: DirichletParams,
    pub negatives: usize,
    pub seed: u64,
    pub g: GFunction,
    /// Point-mass preference override; when set, every session trains on
    /// this exact vector instead of a Dirichlet draw.
    pub pi_fixed: Option<PreferenceVector>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-4,
            epochs: 10,
            lambda: 0.0,
            beta: DirichletParams::default(),
            negatives: 128,
            seed: 0,
            g: GFunction::Softmax,
            pi_fixed: None,
        }
    }
}

/// First/second moment accumulators mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn from_parts(m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Self {
        Self { m, v, step }
    }
}

/// One bias-corrected adaptive-moment update. Parameters without a gradient
/// in `grads` are treated as having an exact-zero gradient.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    let n = params.n_tensors();
    if grads.len() != n || opt.m.len() != n {
        return Err(TrainError::ShapeMismatch {
            index: usize::MAX,
            got: (grads.len(), opt.m.len()),
            expected: (n, n),
        });
    }
    for i in 0..n {
        if let Some(g) = grads.get(ParamId(i)) {
            if g.shape() != params.tensor(ParamId(i)).shape() {
                return Err(TrainError::ShapeMismatch {
                    index: i,
                    got: g.shape(),
                    expected: params.tensor(ParamId(i)).shape(),
                });
            }
        }
    }
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    for i in 0..n {
        let id = ParamId(i);
        let grad = grads.get(id);
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let p = params.tensor_mut(id).data_mut();
        for j in 0..p.len() {
            let g = grad.map_or(0.0, |t| t.data()[j]);
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One log line per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub pi_mean: [f64; 2],
    pub l_c: f64,
    pub l_o: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochSummary {
    pub mean_total: f64,
    pub mean_l_c: f64,
    pub mean_l_o: f64,
    pub steps: u64,
}

struct SessionBatchItem {
    inputs: Vec<u32>,
    targets: Vec<u32>,
    labels: Vec<f64>,
}

fn session_example(
    session: &crate::data::Session,
    max_len: usize,
) -> Option<SessionBatchItem> {
    if session.click_count() < 2 {
        return None;
    }
    // Keep the most recent max_len clicks.
    let steps = &session.steps;
    let window = &steps[steps.len().saturating_sub(max_len)..];
    let inputs = window[..window.len() - 1].iter().map(|s| s.item).collect();
    let targets: Vec<u32> = window[1..].iter().map(|s| s.item).collect();
    let labels = window[1..]
        .iter()
        .map(|s| f64::from(s.ordered))
        .collect();
    Some(SessionBatchItem {
        inputs,
        targets,
        labels,
    })
}

/// One pass over shuffled session batches. Each session draws its own
/// preference vector; negatives are drawn once per batch and shared. One
/// optimizer step per batch. Deterministic given `rng` state.
pub fn train_epoch(
    ds: &Dataset,
    params: &mut Parameters,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    next_step: &mut u64,
) -> Result<(EpochSummary, Vec<StepRecord>), TrainError> {
    let config = *params.config();
    let usable: Vec<usize> = (0..ds.sessions.len())
        .filter(|&i| ds.sessions[i].click_count() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order = usable;
    order.shuffle(rng);

    let mut records = Vec::new();
    let (mut sum_total, mut sum_lc, mut sum_lo) = (0.0, 0.0, 0.0);
    let mut steps_done = 0u64;

    for batch in order.chunks(cfg.batch_size) {
        *next_step += 1;
        let step = *next_step;

        let neg_ids: Vec<u32> = (0..cfg.negatives)
            .map(|_| rng.random_range(0..config.vocab_size as u32))
            .collect();
        let pis: Vec<PreferenceVector> = batch
            .iter()
            .map(|_| match cfg.pi_fixed {
                Some(pi) => pi,
                None => sample_preference(rng, &cfg.beta),
            })
            .collect();

        let mut tape = Tape::new(params.version());
        let bound = bind_params(&mut tape, params);
        let neg_emb = tape.gather_rows(
            bound.node(params.layout().item_embeddings()),
            &neg_ids,
        );

        let mut totals = Vec::with_capacity(batch.len());
        let (mut batch_lc, mut batch_lo, mut batch_reg) = (0.0, 0.0, 0.0);
        for (&session_idx, pi) in batch.iter().zip(pis.iter()) {
            let item = session_example(&ds.sessions[session_idx], config.max_len)
                .expect("filtered above");
            let nodes = build_session_loss(
                &mut tape,
                &bound,
                &config,
                &item.inputs,
                &item.targets,
                &item.labels,
                neg_emb,
                &neg_ids,
                pi,
                cfg.lambda,
                cfg.g,
            )?;
            batch_lc += tape.value(nodes.l_c).scalar();
            batch_lo += tape.value(nodes.l_o).scalar();
            if let Some(reg) = nodes.reg {
                batch_reg += tape.value(reg).scalar();
            }
            totals.push((1.0 / batch.len() as f64, nodes.total));
        }
        let objective = tape.affine_combine(&totals);
        let total_value = tape.value(objective).scalar();
        if !total_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }

        let grads = backward(params, &tape, objective, 1.0)?;
        adam_step(params, &grads, opt, cfg.learning_rate)?;

        let n = batch.len() as f64;
        let record = StepRecord {
            step,
            epoch,
            pi_mean: [
                pis.iter().map(|p| p.pi_c()).sum::<f64>() / n,
                pis.iter().map(|p| p.pi_o()).sum::<f64>() / n,
            ],
            l_c: batch_lc / n,
            l_o: batch_lo / n,
            reg: batch_reg / n,
            total: total_value,
        };
        sum_total += record.total;
        sum_lc += record.l_c;
        sum_lo += record.l_o;
        steps_done += 1;
        records.push(record);
    }

    let steps_f = steps_done as f64;
    Ok((
        EpochSummary {
            mean_total: sum_total / steps_f,
            mean_l_c: sum_lc / steps_f,
            mean_l_o: sum_lo / steps_f,
            steps: steps_done,
        },
        records,
    ))
}

/// Full training run: fresh parameters from `model_cfg.seed`, one RNG stream
/// from `cfg.seed`, `cfg.epochs` passes.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Parameters, OptimizerState, Vec<EpochSummary>, Vec<StepRecord>), TrainError> {
    let mut params = init_params(model_cfg)?;
    let mut opt = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summaries = Vec::with_capacity(cfg.epochs);
    let mut records = Vec::new();
    let mut next_step = 0u64;
    for epoch in 0..cfg.epochs {
        let (summary, mut epoch_records) =
            train_epoch(ds, &mut params, &mut opt, cfg, &mut rng, epoch, &mut next_step)?;
        summaries.push(summary);
        records.append(&mut epoch_records);
    }
    Ok((params, opt, summaries, records))
}

// Checkpoint container: magic, format version, JSON header (configs, tensor
// manifest, optimizer step), raw little-endian f64 tensor data for the
// parameters followed by both moment sets, and a trailing SHA-256 over all
// preceding bytes. Exact layout documented in the repository README.
const CHECKPOINT_MAGIC: &[u8; 8] = b"PARECKP\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: TrainConfig,
    opt_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(
    params: &Parameters,
    opt: &OptimizerState,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<(), TrainError> {
    let manifest = crate::model::param_manifest(params.config());
    let header = CheckpointHeader {
        model_config: *params.config(),
        train_config: *cfg,
        opt_step: opt.step,
        tensors: manifest
            .iter()
            .map(|(name, (rows, cols))| TensorEntry {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for t in params.tensors() {
        write_tensor(&mut buf, t);
    }
    for t in &opt.m {
        write_tensor(&mut buf, t);
    }
    for t in &opt.v {
        write_tensor(&mut buf, t);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn corrupt(reason: impl Into<String>) -> TrainError {
    TrainError::CorruptCheckpoint(reason.into())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(Parameters, OptimizerState, TrainConfig), TrainError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, checksum) = raw.split_at(raw.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if body.len() < header_end {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;

    let expected_manifest = crate::model::param_manifest(&header.model_config);
    if expected_manifest.len() != header.tensors.len() {
        return Err(corrupt("tensor manifest does not match model config"));
    }
    let total_values: usize = header
        .tensors
        .iter()
        .map(|t| t.rows * t.cols)
        .sum::<usize>()
        * 3;
    if body.len() != header_end + total_values * 8 {
        return Err(corrupt("tensor payload has wrong size"));
    }

    let mut offset = header_end;
    let mut read_set = |entries: &[TensorEntry]| -> Vec<Tensor> {
        entries
            .iter()
            .map(|e| {
                let n = e.rows * e.cols;
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        let at = offset + i * 8;
                        f64::from_le_bytes(body[at..at + 8].try_into().unwrap())
                    })
                    .collect();
                offset += n * 8;
                Tensor::from_vec(e.rows, e.cols, data)
            })
            .collect()
    };
    let param_tensors = read_set(&header.tensors);
    let m = read_set(&header.tensors);
    let v = read_set(&header.tensors);

    let params = Parameters::from_tensors(header.model_config, param_tensors)
        .map_err(|e| corrupt(e.to_string()))?;
    let opt = OptimizerState::from_parts(m, v, header.opt_step);
    Ok((params, opt, header.train_config))
}
