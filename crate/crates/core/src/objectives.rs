//! Forward-, reverse- and symmetric-KL objectives estimated with SNIS, and
//! the per-round fine-tuning loop.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cpe::ClassProbabilityEstimator;
use crate::denoiser::{weighted_ce_loss, Denoiser, SoftmaxDenoiser, TrainBatch};
use crate::dynamics::SamplerConfig;
use crate::error::{AfmError, Result};
use crate::flow_path::{sample_categorical, sample_conditional_path, Scheduler, Sequence, SourceDistribution, Token};
use crate::proposal::{
    draw_batch, effective_sample_size, snis_normalise, Component, MixtureSchedule, ProposalContext, ReplayBuffer,
    WeightedSample,
};
use crate::rng::Rng;

/// Uniform mass mixed into endpoint rows inside the reverse-KL log ratio.
pub const ENTROPY_FLOOR: f64 = 1e-6;
/// Consecutive degenerate batches tolerated before a round aborts.
pub const MAX_DEGENERATE_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Fwd,
    Rev,
    Sym,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Fwd => "fwd",
            Objective::Rev => "rev",
            Objective::Sym => "sym",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfmConfig {
    pub objective: Objective,
    pub k_snis: usize,
    pub steps_per_round: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub inner_samples: usize,
    pub mc_samples: usize,
}

impl Default for AfmConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Fwd,
            k_snis: 128,
            steps_per_round: 2000,
            learning_rate: 0.5,
            lr_decay: 0.95,
            inner_samples: 4,
            mc_samples: 16,
        }
    }
}

impl AfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_snis < 2 {
            return Err(AfmError::Config("k_snis must be >= 2".into()));
        }
        if self.objective != Objective::Fwd && self.inner_samples < 2 {
            return Err(AfmError::Config("reverse-KL objectives need inner_samples >= 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(AfmError::Config("learning rate must be >= 0 and decay > 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(AfmError::Config("mc_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// η · decay^r.
    pub fn learning_rate_at(&self, round: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(round as i32)
    }
}

/// Normalises the sample weights, draws one shared t ~ U[0, 1], and corrupts
/// every endpoint along the conditional path from a fresh source draw.
pub fn build_train_batch(
    samples: &[WeightedSample],
    source: &SourceDistribution,
    scheduler: Scheduler,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    let raw: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let weights = snis_normalise(&raw)?;
    let t: f64 = rng.random();
    let mut states = Vec::with_capacity(samples.len());
    for s in samples {
        let x0 = source.sample(s.x1.len(), rng)?;
        states.push(sample_conditional_path(&x0, &s.x1, t, scheduler, rng)?);
    }
    Ok(TrainBatch {
        targets: samples.iter().map(|s| s.x1.clone()).collect(),
        states,
        times: vec![t; samples.len()],
        weights,
    })
}

/// Value (and gradient, where the objective is trained) of one objective
/// evaluation on one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub fwd: Option<f64>,
    pub rev: Option<f64>,
    pub grad: Vec<f64>,
    pub batch: TrainBatch,
}

impl ObjectiveValue {
    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.batch.weights)
    }
}

/// −Σ_k w̃_k log q_φ(x₁ₖ | x_tₖ, t) on freshly corrupted states.
pub fn fwd_kl_loss(
    phi: &SoftmaxDenoiser,
    samples: &[WeightedSample],
    source: &SourceDistribution,
    scheduler: Scheduler,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    let batch = build_train_batch(samples, source, scheduler, rng)?;
    let (loss, grad) = phi.weighted_ce_loss_and_grad(&batch)?;
    Ok(ObjectiveValue { loss, fwd: Some(loss), rev: None, grad, batch })
}

/// Reverse-KL value and score-function gradient on an already corrupted batch.
///
/// For each state, M endpoints are drawn from q_φ and scored with
/// g = log q̃_φ − log q̃_θ − log c(x₁'), where q̃ mixes in [`ENTROPY_FLOOR`]
/// uniform mass. The gradient combines the likelihood-ratio term with a
/// leave-one-out baseline and the pathwise gradient of log q̃_φ.
pub fn rev_kl_on_batch(
    phi: &SoftmaxDenoiser,
    theta: &dyn Denoiser,
    cpe: &ClassProbabilityEstimator,
    batch: &TrainBatch,
    inner_samples: usize,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    if inner_samples < 2 {
        return Err(AfmError::Config("reverse-KL needs at least two inner samples".into()));
    }
    batch.validate()?;
    let v = phi.vocab().size();
    let len = phi.seq_len();
    let m = inner_samples as f64;
    let smooth = |q: f64| (1.0 - ENTROPY_FLOOR) * q + ENTROPY_FLOOR / v as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; phi.params().len()];
    let mut draws: Vec<Sequence> = Vec::with_capacity(inner_samples);
    let mut g = vec![0.0; inner_samples];
    let mut dlogits = vec![0.0; len * v];
    for k in 0..batch.len() {
        let w = batch.weights[k];
        if w == 0.0 {
            continue;
        }
        let (x_t, t) = (&batch.states[k], batch.times[k]);
        let q_phi = phi.predict(x_t, t)?;
        let q_theta = theta.predict(x_t, t)?;
        draws.clear();
        for gm in g.iter_mut() {
            let x1 = Sequence((0..len).map(|i| sample_categorical(q_phi.row(i), rng) as Token).collect());
            let mut log_ratio = 0.0;
            for (i, &tok) in x1.0.iter().enumerate() {
                log_ratio += smooth(q_phi.row(i)[tok as usize]).ln() - smooth(q_theta.row(i)[tok as usize]).ln();
            }
            *gm = log_ratio - cpe.predict(&x1)?.ln();
            if !gm.is_finite() {
                return Err(AfmError::Numerical(format!("non-finite reverse-KL integrand at sample {x1}")));
            }
            draws.push(x1);
        }
        let total: f64 = g.iter().sum();
        loss += w * total / m;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        for (x1, &gm) in draws.iter().zip(&g) {
            let baseline = (total - gm) / (m - 1.0);
            let score_coeff = (gm - baseline) / m;
            for i in 0..len {
                let row = q_phi.row(i);
                let tok = x1.0[i] as usize;
                let pathwise = (1.0 - ENTROPY_FLOOR) * row[tok] / smooth(row[tok]) / m;
                let c = score_coeff + pathwise;
                for (u, &q) in row.iter().enumerate() {
                    dlogits[i * v + u] += c * (if u == tok { 1.0 } else { 0.0 } - q);
                }
            }
        }
        phi.accumulate_logit_grad(x_t, t, &dlogits, w, &mut grad);
    }
    Ok((loss, grad))
}

/// Reverse-KL objective: builds the batch, then [`rev_kl_on_batch`].
#[allow(clippy::too_many_arguments)]
pub fn rev_kl_loss(
    phi: &SoftmaxDenoiser,
    theta: &dyn Denoiser,
    cpe: &ClassProbabilityEstimator,
    samples: &[WeightedSample],
    source: &SourceDistribution,
    scheduler: Scheduler,
    inner_samples: usize,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    let batch = build_train_batch(samples, source, scheduler, rng)?;
    let (loss, grad) = rev_kl_on_batch(phi, theta, cpe, &batch, inner_samples, rng)?;
    Ok(ObjectiveValue { loss, fwd: None, rev: Some(loss), grad, batch })
}

/// Forward plus reverse KL on one shared batch and time draw.
#[allow(clippy::too_many_arguments)]
pub fn sym_kl_loss(
    phi: &SoftmaxDenoiser,
    theta: &dyn Denoiser,
    cpe: &ClassProbabilityEstimator,
    samples: &[WeightedSample],
    source: &SourceDistribution,
    scheduler: Scheduler,
    inner_samples: usize,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    let batch = build_train_batch(samples, source, scheduler, rng)?;
    let (fwd, mut grad) = phi.weighted_ce_loss_and_grad(&batch)?;
    let (rev, rev_grad) = rev_kl_on_batch(phi, theta, cpe, &batch, inner_samples, rng)?;
    grad.iter_mut().zip(&rev_grad).for_each(|(a, b)| *a += b);
    Ok(ObjectiveValue { loss: fwd + rev, fwd: Some(fwd), rev: Some(rev), grad, batch })
}

/// Forward-KL on a prebuilt batch, through the generic denoiser interface.
pub fn fwd_kl_on_batch(phi: &dyn Denoiser, batch: &TrainBatch) -> Result<f64> {
    weighted_ce_loss(phi, batch)
}

/// Per-round state; the base flow θ is frozen for the whole round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub dataset: Vec<(Sequence, f64)>,
    pub tau: f64,
    pub phi: SoftmaxDenoiser,
    pub theta: SoftmaxDenoiser,
    pub buffer: ReplayBuffer,
    pub cpe: ClassProbabilityEstimator,
}

/// What the round loop needs besides the state: how to draw proposals.
#[derive(Debug, Clone)]
pub struct RoundEnv<'a> {
    pub source: &'a SourceDistribution,
    pub sampler: &'a SamplerConfig,
    pub mixture: &'a MixtureSchedule,
    /// Oracle batch size B; the mixture switches regime once the buffer exceeds it.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub objective: Objective,
    pub component: Component,
    pub loss: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub phi: SoftmaxDenoiser,
    pub log: Vec<StepLog>,
}

impl RoundOutcome {
    pub fn mean_ess(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|s| s.ess).sum::<f64>() / self.log.len() as f64
    }
}

/// Runs the configured number of gradient steps of one round.
pub fn afm_round(state: &RoundState, config: &AfmConfig, env: &RoundEnv<'_>, rng: &mut Rng) -> Result<RoundOutcome> {
    config.validate()?;
    let mut phi = state.phi.clone();
    let lr = config.learning_rate_at(state.round);
    let coeffs = env.mixture.coefficients(state.round, state.buffer.len(), env.batch_size)?;
    let scheduler = env.sampler.scheduler;
    let ctx = ProposalContext {
        buffer: &state.buffer,
        base: Some(&state.theta),
        cpe: &state.cpe,
        source: env.source,
        sampler: env.sampler,
        len: phi.seq_len(),
        mc_samples: config.mc_samples,
    };
    let mut log = Vec::with_capacity(config.steps_per_round);
    let mut degenerate = 0;
    let mut step = 0;
    while step < config.steps_per_round {
        let samples = draw_batch(&ctx, &coeffs, config.k_snis, rng)?;
        let component = samples[0].component;
        let value = match config.objective {
            Objective::Fwd => fwd_kl_loss(&phi, &samples, env.source, scheduler, rng),
            Objective::Rev => {
                rev_kl_loss(&phi, &state.theta, &state.cpe, &samples, env.source, scheduler, config.inner_samples, rng)
            }
            Objective::Sym => {
                sym_kl_loss(&phi, &state.theta, &state.cpe, &samples, env.source, scheduler, config.inner_samples, rng)
            }
        };
        let value = match value {
            Err(AfmError::DegenerateBatch) => {
                degenerate += 1;
                if degenerate > MAX_DEGENERATE_BATCHES {
                    return Err(AfmError::RoundAbort(format!(
                        "{degenerate} consecutive degenerate batches at step {step} of round {} (component {})",
                        state.round,
                        component.as_str()
                    )));
                }
                continue;
            }
            other => other?,
        };
        degenerate = 0;
        if value.grad.iter().any(|g| !g.is_finite()) {
            return Err(AfmError::Numerical(format!(
                "non-finite gradient at step {step} of round {} (loss {}, ess {})",
                state.round,
                value.loss,
                value.ess()
            )));
        }
        phi.apply_gradient(&value.grad, lr);
        log.push(StepLog { step, objective: config.objective, component, loss: value.loss, ess: value.ess() });
        step += 1;
    }
    Ok(RoundOutcome { phi, log })
}

/// Writes the per-step training log as CSV: step, objective, loss, ess.
pub fn write_step_log(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "objective", "loss", "ess"])?;
    for s in log {
        w.write_record([s.step.to_string(), s.objective.as_str().to_string(), format!("{}", s.loss), format!("{}", s.ess)])?;
    }
    w.flush()?;
    Ok(())
}
