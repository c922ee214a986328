//! The joint objective and its optimizer loop.
//!
//! The loss combines three terms: the negative importance-weighted
//! variational bound over corrupted measurements, a low-rank penalty on the
//! Frobenius norm of the inverse differential at the origin, and a negative
//! log-likelihood anchor on the clean reference batch. Adam with fixed
//! settings drives both parameter sets; posterior noise is drawn fresh each
//! step and all randomness is seeded, so identical seeds reproduce loss
//! curves bit-exactly within one build.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::corruption::{CorruptionModel, LinearOperator};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowVars};
use crate::posterior::{PosteriorModel, PosteriorVars};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Log-weights below this are treated as numerically dead.
const LOG_WEIGHT_FLOOR: f64 = -745.0;

/// Gradient clipping threshold (global norm).
const CLIP_NORM: f64 = 100.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Importance samples per measurement in the variational bound.
    pub vlb_samples: usize,
    /// Low-rank penalty weight.
    pub lambda: f64,
    /// Reference negative-log-likelihood weight.
    pub mu: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Steps between checkpoint callbacks (`None`: only at the end).
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vlb_samples < 1 {
            return Err(Error::invalid("TrainConfig", "vlb_samples must be >= 1"));
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::invalid("TrainConfig", "lambda and mu must be nonnegative"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("TrainConfig", "learning_rate must be positive"));
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::invalid("TrainConfig", "batch_size must be >= 1"));
            }
        }
        Ok(())
    }
}

/// One step of the per-term loss history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// `-VLB` contribution.
    pub neg_vlb: f64,
    /// `lambda * ||D_0 phi^{-1}||_F` contribution.
    pub lowrank: f64,
    /// `mu * mean(-log p(x_ref))` contribution.
    pub refnll: f64,
    /// Exactly `neg_vlb + lowrank + refnll`.
    pub total: f64,
}

/// Adam moment buffers aligned with the model parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamState {
    pub fn new(prior: &FlowModel, posterior: &PosteriorModel) -> Self {
        let mut m = Vec::new();
        prior.visit_params(|t| m.push(Tensor::zeros(t.shape())));
        posterior.visit_params(|t| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m, v, t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn apply(&mut self, idx: usize, lr: f64, param: &mut Tensor, grad: &Tensor) {
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let m = self.m[idx].data_mut();
        let v = self.v[idx].data_mut();
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Mutable training state: both models, optimizer buffers, and the seeded
/// noise stream.
pub struct TrainState {
    pub prior: FlowModel,
    pub posterior: PosteriorModel,
    pub adam: AdamState,
    pub step: usize,
    pub history: Vec<LossRecord>,
    /// Count of importance weights floored for non-finiteness.
    pub floored_weights: u64,
    rng: ChaCha8Rng,
    seed: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, prior: FlowModel, posterior: PosteriorModel) -> Self {
        let adam = AdamState::new(&prior, &posterior);
        TrainState {
            prior,
            posterior,
            adam,
            step: 0,
            history: Vec::new(),
            floored_weights: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            seed: config.seed,
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Set when the run aborted on a non-finite loss.
    pub aborted: Option<String>,
}

// ── Loss terms ───────────────────────────────────────────────────────

/// Measurement-operator constant for the tape: `None` means identity.
fn operator_on_tape(tape: &mut Tape, op: &LinearOperator) -> Result<Option<VarId>> {
    match op {
        LinearOperator::Identity { .. } => Ok(None),
        other => Ok(Some(tape.input(other.to_dense()?))),
    }
}

struct VlbBuild {
    vlb: VarId,
    floored: usize,
}

/// The importance-weighted bound over a measurement batch, with `m_samples`
/// reparametrized posterior draws per row and max-stabilized log-mean-exp.
#[allow(clippy::too_many_arguments)]
fn vlb_on_tape(
    tape: &mut Tape,
    prior: &FlowModel,
    fvars: &FlowVars,
    posterior: &PosteriorModel,
    pvars: &PosteriorVars,
    corruption: &CorruptionModel,
    op_dense: Option<VarId>,
    y_batch: &Tensor,
    m_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VlbBuild> {
    let b = y_batch.rows();
    let mdim = y_batch.cols();
    let d = prior.dim();
    if b == 0 {
        return Err(Error::invalid("vlb_loss", "empty measurement batch"));
    }
    let sigma = corruption.noise_sigma();
    if sigma <= 0.0 {
        return Err(Error::numeric("vlb_loss", "noise sigma must be positive"));
    }

    // Each measurement row repeated m_samples times.
    let mut y_rep = Vec::with_capacity(b * m_samples * mdim);
    for i in 0..b {
        for _ in 0..m_samples {
            y_rep.extend_from_slice(y_batch.row(i));
        }
    }
    let y_rep = Tensor::from_shape(b * m_samples, mdim, y_rep)?;
    let y_id = tape.input(y_rep);

    let xi_data: Vec<f64> = (0..b * m_samples * d)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let xi = Tensor::from_shape(b * m_samples, d, xi_data)?;

    let (x, z, mean, logvar) = posterior.sample_on_tape(tape, pvars, y_id, &xi)?;
    let lp_prior = prior.log_density_on_tape(tape, fvars, x)?;
    let lp_post = posterior.log_density_on_tape(tape, pvars, z, mean, logvar)?;

    let ax = match op_dense {
        Some(a) => tape.matmul_tb(x, a)?,
        None => x,
    };
    let resid = tape.sub(ax, y_id)?;
    let nsq = tape.norm_sq_rows(resid)?;
    let scaled = tape.scale(nsq, -1.0 / (2.0 * sigma * sigma));
    let lp_noise = tape.add_scalar(scaled, -0.5 * mdim as f64 * (LN_2PI + 2.0 * sigma.ln()));

    let s1 = tape.add(lp_prior, lp_noise)?;
    let w = tape.sub(s1, lp_post)?;
    let floored = tape.value(w).data().iter().filter(|v| !v.is_finite()).count();
    let w = tape.replace_non_finite(w, LOG_WEIGHT_FLOOR);
    let wmat = tape.reshape(w, vec![b, m_samples])?;
    let lme = tape.log_mean_exp_rows(wmat)?;
    let vlb = tape.mean(lme);
    Ok(VlbBuild { vlb, floored })
}

/// Standalone VLB estimate.
#[derive(Debug, Clone)]
pub struct VlbEstimate {
    pub value: f64,
    /// Importance weights floored for non-finiteness.
    pub floored: usize,
}

/// Monte Carlo estimate of the variational bound (no gradients).
pub fn vlb_loss(
    prior: &FlowModel,
    posterior: &PosteriorModel,
    corruption: &CorruptionModel,
    y_batch: &Tensor,
    m_samples: usize,
    seed: u64,
) -> Result<VlbEstimate> {
    if m_samples < 1 {
        return Err(Error::invalid("vlb_loss", "m_samples must be >= 1"));
    }
    let mut tape = Tape::new();
    let fvars = prior.register_inputs(&mut tape);
    let pvars = posterior.register_inputs(&mut tape);
    let op_dense = operator_on_tape(&mut tape, corruption.operator())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let built = vlb_on_tape(
        &mut tape,
        prior,
        &fvars,
        posterior,
        &pvars,
        corruption,
        op_dense,
        y_batch,
        m_samples,
        &mut rng,
    )?;
    Ok(VlbEstimate { value: tape.value(built.vlb).item()?, floored: built.floored })
}

/// `||D_0 phi^{-1}||_F`.
pub fn lowrank_penalty(prior: &FlowModel) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = prior.register_inputs(&mut tape);
    let j = prior.d0_inverse_jacobian_on_tape(&mut tape, &vars)?;
    let sq = tape.mul(j, j)?;
    let s = tape.sum(sq);
    Ok(tape.value(s).item()?.sqrt())
}

fn lowrank_on_tape(tape: &mut Tape, prior: &FlowModel, fvars: &FlowVars) -> Result<VarId> {
    let j = prior.d0_inverse_jacobian_on_tape(tape, fvars)?;
    let sq = tape.mul(j, j)?;
    let s = tape.sum(sq);
    Ok(tape.sqrt(s))
}

/// Mean negative log-density over the clean batch; 0 when the batch is empty.
pub fn reference_nll(prior: &FlowModel, clean_batch: &Tensor) -> Result<f64> {
    if clean_batch.rows() == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..clean_batch.rows() {
        acc -= prior.log_density(clean_batch.row(i))?;
    }
    Ok(acc / clean_batch.rows() as f64)
}

fn reference_nll_on_tape(
    tape: &mut Tape,
    prior: &FlowModel,
    fvars: &FlowVars,
    clean_batch: &Tensor,
) -> Result<VarId> {
    let x = tape.input(clean_batch.clone());
    let ld = prior.log_density_on_tape(tape, fvars, x)?;
    let m = tape.mean(ld);
    Ok(tape.neg(m))
}

/// One full-loss evaluation with fixed posterior noise (seeded), used by
/// gradient checks and diagnostics.
#[derive(Debug, Clone)]
pub struct FullLossEval {
    pub total: f64,
    pub neg_vlb: f64,
    pub lowrank_term: f64,
    pub refnll_term: f64,
    pub floored: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn full_loss(
    prior: &FlowModel,
    posterior: &PosteriorModel,
    corruption: &CorruptionModel,
    y_batch: &Tensor,
    clean_batch: &Tensor,
    m_samples: usize,
    lambda: f64,
    mu: f64,
    seed: u64,
) -> Result<FullLossEval> {
    let mut tape = Tape::new();
    let fvars = prior.register_inputs(&mut tape);
    let pvars = posterior.register_inputs(&mut tape);
    let op_dense = operator_on_tape(&mut tape, corruption.operator())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (terms, floored) = loss_terms_on_tape(
        &mut tape, prior, &fvars, posterior, &pvars, corruption, op_dense, y_batch, clean_batch,
        m_samples, lambda, mu, &mut rng,
    )?;
    Ok(FullLossEval {
        total: tape.value(terms.total).item()?,
        neg_vlb: tape.value(terms.neg_vlb).item()?,
        lowrank_term: terms.lowrank.map_or(Ok(0.0), |v| tape.value(v).item())?,
        refnll_term: terms.refnll.map_or(Ok(0.0), |v| tape.value(v).item())?,
        floored,
    })
}

/// Build the full loss on a caller-provided tape with caller-registered
/// parameter variables; returns the scalar total. Used by gradient checks
/// that need reverse-mode gradients of the whole objective.
#[allow(clippy::too_many_arguments)]
pub fn full_loss_on_tape(
    tape: &mut Tape,
    prior: &FlowModel,
    fvars: &FlowVars,
    posterior: &PosteriorModel,
    pvars: &PosteriorVars,
    corruption: &CorruptionModel,
    y_batch: &Tensor,
    clean_batch: &Tensor,
    m_samples: usize,
    lambda: f64,
    mu: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VarId> {
    let op_dense = operator_on_tape(tape, corruption.operator())?;
    let (terms, _) = loss_terms_on_tape(
        tape, prior, fvars, posterior, pvars, corruption, op_dense, y_batch, clean_batch,
        m_samples, lambda, mu, rng,
    )?;
    Ok(terms.total)
}

struct LossTerms {
    total: VarId,
    neg_vlb: VarId,
    lowrank: Option<VarId>,
    refnll: Option<VarId>,
}

#[allow(clippy::too_many_arguments)]
fn loss_terms_on_tape(
    tape: &mut Tape,
    prior: &FlowModel,
    fvars: &FlowVars,
    posterior: &PosteriorModel,
    pvars: &PosteriorVars,
    corruption: &CorruptionModel,
    op_dense: Option<VarId>,
    y_batch: &Tensor,
    clean_batch: &Tensor,
    m_samples: usize,
    lambda: f64,
    mu: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossTerms, usize)> {
    let built = vlb_on_tape(
        tape, prior, fvars, posterior, pvars, corruption, op_dense, y_batch, m_samples, rng,
    )?;
    let neg_vlb = tape.neg(built.vlb);
    let mut total = neg_vlb;

    let lowrank = if lambda > 0.0 {
        let frob = lowrank_on_tape(tape, prior, fvars)?;
        let term = tape.scale(frob, lambda);
        total = tape.add(total, term)?;
        Some(term)
    } else {
        None
    };

    let refnll = if mu > 0.0 && clean_batch.rows() > 0 {
        let nll = reference_nll_on_tape(tape, prior, fvars, clean_batch)?;
        let term = tape.scale(nll, mu);
        total = tape.add(total, term)?;
        Some(term)
    } else {
        None
    };

    Ok((LossTerms { total, neg_vlb, lowrank, refnll }, built.floored))
}

// ── The optimizer loop ───────────────────────────────────────────────

/// Deterministic minibatch indices: a fresh Fisher-Yates order per epoch
/// keyed by the run seed, so runs are resumable and bit-reproducible.
fn batch_indices(seed: u64, n: usize, batch_size: Option<usize>, step: usize) -> Vec<usize> {
    match batch_size {
        None => (0..n).collect(),
        Some(bs) => {
            let bs = bs.min(n);
            let steps_per_epoch = n.div_ceil(bs);
            let epoch = (step - 1) / steps_per_epoch;
            let pos = ((step - 1) % steps_per_epoch) * bs;
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order[pos..(pos + bs).min(n)].to_vec()
        }
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let m = t.cols();
    let mut data = Vec::with_capacity(idx.len() * m);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_shape(idx.len(), m, data).expect("gather shape")
}

/// Run Adam on the combined objective. The callback fires at the configured
/// cadence and at the final step so callers can persist checkpoints; on a
/// non-finite loss the loop stops and the state of the last good step is
/// returned with `aborted` set.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    corruption: &CorruptionModel,
    mut state: TrainState,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = dataset.corrupted.rows();
    if n == 0 {
        return Err(Error::invalid("train", "corrupted batch is empty"));
    }
    let use_mu = config.mu > 0.0 && dataset.clean_reference.rows() > 0;
    if config.mu > 0.0 && dataset.clean_reference.rows() == 0 {
        eprintln!("warning: mu > 0 but the reference set is empty; the term contributes 0");
    }

    while state.step < config.iterations {
        let step = state.step + 1;
        let idx = batch_indices(state.seed, n, config.batch_size, step);
        let y_batch = gather_rows(&dataset.corrupted, &idx);

        let mut tape = Tape::new();
        let fvars = state.prior.register_params(&mut tape)?;
        let pvars = state.posterior.register_params(&mut tape)?;
        let op_dense = operator_on_tape(&mut tape, corruption.operator())?;
        let (terms, floored) = loss_terms_on_tape(
            &mut tape,
            &state.prior,
            &fvars,
            &state.posterior,
            &pvars,
            corruption,
            op_dense,
            &y_batch,
            &dataset.clean_reference,
            config.vlb_samples,
            config.lambda,
            if use_mu { config.mu } else { 0.0 },
            &mut state.rng,
        )?;
        state.floored_weights += floored as u64;

        let total_val = tape.value(terms.total).item()?;
        if !total_val.is_finite() {
            return Ok(TrainOutcome {
                state,
                aborted: Some(format!("non-finite total loss at step {step}")),
            });
        }

        let record = LossRecord {
            step,
            neg_vlb: tape.value(terms.neg_vlb).item()?,
            lowrank: terms.lowrank.map_or(Ok(0.0), |v| tape.value(v).item())?,
            refnll: terms.refnll.map_or(Ok(0.0), |v| tape.value(v).item())?,
            total: total_val,
        };

        let grads = tape.backward(terms.total)?;
        let mut ordered: Vec<Tensor> = Vec::new();
        for id in fvars.param_ids() {
            ordered.push(grads.get_or_zeros(id));
        }
        for id in pvars.param_ids() {
            ordered.push(grads.get_or_zeros(id));
        }

        // Global-norm clipping.
        let norm: f64 =
            ordered.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > CLIP_NORM {
            let scale = CLIP_NORM / norm;
            for g in &mut ordered {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }

        state.adam.begin_step();
        let lr = config.learning_rate;
        let mut cursor = 0;
        {
            let adam = &mut state.adam;
            state.prior.visit_params_mut(|t| {
                adam.apply(cursor, lr, t, &ordered[cursor]);
                cursor += 1;
            });
            state.posterior.visit_params_mut(|t| {
                adam.apply(cursor, lr, t, &ordered[cursor]);
                cursor += 1;
            });
        }

        state.step = step;
        state.history.push(record);

        let due = config.checkpoint_every.map_or(false, |k| k > 0 && step % k == 0);
        if due || step == config.iterations {
            on_checkpoint(&state)?;
        }
    }

    Ok(TrainOutcome { state, aborted: None })
}

// ── Persistence ──────────────────────────────────────────────────────

pub const TRAIN_CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCheckpoint {
    pub version: String,
    pub flow: crate::flow::FlowCheckpoint,
    pub posterior: crate::posterior::PosteriorCheckpoint,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub adam_t: usize,
    pub step: usize,
    pub floored_weights: u64,
    pub config: TrainConfig,
    pub rng_seed: u64,
    /// ChaCha word position, serialized as a string (u128).
    pub rng_word_pos: String,
}

impl TrainState {
    pub fn to_checkpoint(&self, config: &TrainConfig) -> TrainCheckpoint {
        TrainCheckpoint {
            version: TRAIN_CHECKPOINT_VERSION.to_string(),
            flow: self.prior.to_checkpoint(),
            posterior: self.posterior.to_checkpoint(),
            adam_m: self.adam.m.iter().map(|t| t.data().to_vec()).collect(),
            adam_v: self.adam.v.iter().map(|t| t.data().to_vec()).collect(),
            adam_t: self.adam.t,
            step: self.step,
            floored_weights: self.floored_weights,
            config: config.clone(),
            rng_seed: self.seed,
            rng_word_pos: format!("{}", self.rng.get_word_pos()),
        }
    }

    pub fn from_checkpoint(ckpt: &TrainCheckpoint) -> Result<TrainState> {
        if ckpt.version != TRAIN_CHECKPOINT_VERSION {
            return Err(Error::Schema {
                expected: TRAIN_CHECKPOINT_VERSION.to_string(),
                found: ckpt.version.clone(),
                msg: "training checkpoint version".to_string(),
            });
        }
        let prior = FlowModel::from_checkpoint(&ckpt.flow)?;
        let posterior = PosteriorModel::from_checkpoint(&ckpt.posterior)?;
        let mut adam = AdamState::new(&prior, &posterior);
        if ckpt.adam_m.len() != adam.m.len() {
            return Err(Error::Schema {
                expected: format!("{} moment buffers", adam.m.len()),
                found: format!("{}", ckpt.adam_m.len()),
                msg: "optimizer state".to_string(),
            });
        }
        for (i, (ms, vs)) in ckpt.adam_m.iter().zip(&ckpt.adam_v).enumerate() {
            adam.m[i] = Tensor::new(adam.m[i].shape().to_vec(), ms.clone())?;
            adam.v[i] = Tensor::new(adam.v[i].shape().to_vec(), vs.clone())?;
        }
        adam.t = ckpt.adam_t;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
        let pos: u128 = ckpt.rng_word_pos.parse().map_err(|_| Error::Schema {
            expected: "u128 word position".to_string(),
            found: ckpt.rng_word_pos.clone(),
            msg: "rng state".to_string(),
        })?;
        rng.set_word_pos(pos);
        Ok(TrainState {
            prior,
            posterior,
            adam,
            step: ckpt.step,
            history: Vec::new(),
            floored_weights: ckpt.floored_weights,
            rng,
            seed: ckpt.rng_seed,
        })
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint(config))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let ckpt: TrainCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        TrainState::from_checkpoint(&ckpt)
    }
}

/// Loss history as CSV. The `vlb` column holds the `-VLB` loss contribution
/// so that `total = vlb + lowrank + refnll` column-wise.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,vlb,lowrank,refnll,total")?;
    for r in history {
        writeln!(
            f,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.step, r.neg_vlb, r.lowrank, r.refnll, r.total
        )?;
    }
    Ok(())
}
