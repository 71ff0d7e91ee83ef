//! The three-component importance-sampling proposal: uniform prior, base-flow
//! samples, and a fitness-weighted replay buffer.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpe::ClassProbabilityEstimator;
use crate::denoiser::Denoiser;
use crate::dynamics::{sample_flow, SamplerConfig};
use crate::error::{AfmError, Result};
use crate::flow_path::{sample_categorical, uniform_sequence, Sequence, SourceDistribution, SourceKind};
use crate::rng::Rng;

/// Flow densities below this are treated as zero.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Weight assigned to a flow sample whose density fell below [`DENSITY_FLOOR`].
pub const WEIGHT_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Prior,
    Flow,
    Replay,
}

impl Component {
    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Prior => "prior",
            Component::Flow => "flow",
            Component::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub x1: Sequence,
    pub component: Component,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Added,
    Replaced(Sequence),
    Rejected,
    Duplicate,
}

/// Bounded store of high-fitness observations; evicts the lowest y when full.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    entries: Vec<(Sequence, f64)>,
    members: HashSet<Sequence>,
    capacity: usize,
    gamma: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, gamma: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(AfmError::Config("replay buffer capacity must be >= 1".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(AfmError::Config(format!("buffer temperature must be > 0, got {gamma}")));
        }
        Ok(Self { entries: Vec::new(), members: HashSet::new(), capacity, gamma })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn entries(&self) -> &[(Sequence, f64)] {
        &self.entries
    }

    pub fn contains(&self, x: &Sequence) -> bool {
        self.members.contains(x)
    }

    pub fn insert(&mut self, x: Sequence, y: f64) -> Admission {
        if self.members.contains(&x) {
            return Admission::Duplicate;
        }
        if self.entries.len() < self.capacity {
            self.members.insert(x.clone());
            self.entries.push((x, y));
            return Admission::Added;
        }
        // First minimum wins ties, so older entries are evicted first.
        let (idx, min_y) = self
            .entries
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, (_, v))| if *v < acc.1 { (i, *v) } else { acc });
        if y <= min_y {
            return Admission::Rejected;
        }
        self.members.insert(x.clone());
        let (old, _) = std::mem::replace(&mut self.entries[idx], (x, y));
        self.members.remove(&old);
        Admission::Replaced(old)
    }

    /// π_j ∝ exp(γ y_j), computed with the max shift.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let ys: Vec<f64> = self.entries.iter().map(|(_, y)| *y).collect();
        buffer_weights(&ys, self.gamma)
    }

    pub fn sample_index(&self, rng: &mut Rng) -> Result<usize> {
        Ok(sample_categorical(&self.weights()?, rng))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sequence", "y"])?;
        for (x, y) in &self.entries {
            w.write_record([x.to_dashed(), format!("{y}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, capacity: usize, gamma: f64) -> Result<Self> {
        let mut buf = Self::new(capacity, gamma)?;
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let x = Sequence::parse_dashed(rec.get(0).unwrap_or(""))?;
            let y: f64 = rec
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|e| AfmError::Domain(format!("bad fitness value: {e}")))?;
            buf.insert(x, y);
        }
        Ok(buf)
    }
}

/// Max-shifted softmax of γ·y.
pub fn buffer_weights(ys: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if ys.is_empty() {
        return Err(AfmError::Domain("replay buffer is empty".into()));
    }
    let max = ys.iter().map(|y| gamma * y).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = ys.iter().map(|y| (gamma * y - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|p| *p /= total);
    Ok(w)
}

/// Mixing coefficients (α₀, α_flow, α_rbuff).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureCoefficients {
    pub prior: f64,
    pub flow: f64,
    pub replay: f64,
}

impl MixtureCoefficients {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.prior, self.flow, self.replay];
        if parts.iter().any(|a| !(*a >= 0.0)) {
            return Err(AfmError::Config(format!("negative mixing coefficient in {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(AfmError::Config(format!("mixing coefficients {self:?} do not sum to 1")));
        }
        Ok(())
    }
}

/// Round-dependent mixing coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MixtureSchedule {
    /// α_rbuff = min(replay_max, replay_rate·r); the flow takes `flow_early`
    /// of the remaining mass until the buffer outgrows the batch size, then
    /// `flow_late`.
    Ramp { replay_rate: f64, replay_max: f64, flow_early: f64, flow_late: f64 },
    Fixed { prior: f64, flow: f64, replay: f64 },
}

impl Default for MixtureSchedule {
    fn default() -> Self {
        MixtureSchedule::Ramp { replay_rate: 0.05, replay_max: 0.4, flow_early: 0.1, flow_late: 0.95 }
    }
}

impl MixtureSchedule {
    pub fn coefficients(&self, round: usize, buffer_len: usize, batch_size: usize) -> Result<MixtureCoefficients> {
        let c = match *self {
            MixtureSchedule::Ramp { replay_rate, replay_max, flow_early, flow_late } => {
                let replay = replay_max.min(replay_rate * round as f64);
                let share = if buffer_len > batch_size { flow_late } else { flow_early };
                let flow = (1.0 - replay) * share;
                MixtureCoefficients { prior: 1.0 - replay - flow, flow, replay }
            }
            MixtureSchedule::Fixed { prior, flow, replay } => MixtureCoefficients { prior, flow, replay },
        };
        c.validate()?;
        Ok(c)
    }
}

/// Picks the component for a whole batch. Mass of unavailable components
/// (empty buffer, missing flow snapshot) moves to the prior.
pub fn select_component(
    coeffs: &MixtureCoefficients,
    buffer_empty: bool,
    flow_available: bool,
    rng: &mut Rng,
) -> Result<Component> {
    coeffs.validate()?;
    let mut w = [coeffs.prior, coeffs.flow, coeffs.replay];
    if !flow_available && w[1] > 0.0 {
        log::debug!("no base flow snapshot; flow mass reassigned to prior");
        w[0] += w[1];
        w[1] = 0.0;
    }
    if buffer_empty && w[2] > 0.0 {
        log::debug!("replay buffer empty; replay mass reassigned to prior");
        w[0] += w[2];
        w[2] = 0.0;
    }
    Ok(match sample_categorical(&w, rng) {
        0 => Component::Prior,
        1 => Component::Flow,
        _ => Component::Replay,
    })
}

/// Monte Carlo estimate of the base flow's endpoint density at `x1`,
/// averaging ∏ᵢ q_θ(x₁ⁱ | x₀, t = 0) over source draws x₀. A mask source has
/// a single x₀, so the estimate is exact and deterministic.
pub fn flow_marginal_mc(
    base: &dyn Denoiser,
    x1: &Sequence,
    source: &SourceDistribution,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(AfmError::Config("Monte Carlo sample count must be >= 1".into()));
    }
    let len = base.seq_len();
    if x1.len() != len {
        return Err(AfmError::shape(len, x1.len()));
    }
    let draws = if source.kind() == SourceKind::Mask { 1 } else { n };
    let mut total = 0.0;
    for _ in 0..draws {
        let x0 = source.sample(len, rng)?;
        total += base.predict(&x0, 0.0)?.sequence_prob(x1);
    }
    Ok(total / draws as f64)
}

/// Unnormalised weight for a sample drawn from one mixture component.
pub fn importance_weight(
    component: Component,
    x1: &Sequence,
    cpe: &ClassProbabilityEstimator,
    base: Option<&dyn Denoiser>,
    source: &SourceDistribution,
    mc_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    match component {
        Component::Prior => cpe.predict(x1),
        Component::Replay => Ok(1.0),
        Component::Flow => {
            let base = base.ok_or_else(|| AfmError::Config("flow component without base flow".into()))?;
            let c = cpe.predict(x1)?;
            let density = flow_marginal_mc(base, x1, source, mc_samples, rng)?;
            Ok(flow_weight(c, density))
        }
    }
}

pub(crate) fn flow_weight(cpe: f64, density: f64) -> f64 {
    if density < DENSITY_FLOOR {
        log::debug!("flow density {density:e} below floor; weight capped");
        return WEIGHT_CAP;
    }
    cpe / density
}

/// w̃_k = w_k / Σ_j w_j.
pub fn snis_normalise(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(AfmError::Numerical("importance weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(AfmError::DegenerateBatch);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// 1 / Σ w̃², for normalised weights.
pub fn effective_sample_size(normalised: &[f64]) -> f64 {
    1.0 / normalised.iter().map(|w| w * w).sum::<f64>()
}

/// Everything a batch draw reads. Borrowed from a frozen round state.
pub struct ProposalContext<'a> {
    pub buffer: &'a ReplayBuffer,
    pub base: Option<&'a dyn Denoiser>,
    pub cpe: &'a ClassProbabilityEstimator,
    pub source: &'a SourceDistribution,
    pub sampler: &'a SamplerConfig,
    pub len: usize,
    pub mc_samples: usize,
}

/// Selects one component for the batch, draws `k` sequences from it and
/// attaches that component's importance weights.
pub fn draw_batch(
    ctx: &ProposalContext<'_>,
    coeffs: &MixtureCoefficients,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<WeightedSample>> {
    if k < 2 {
        return Err(AfmError::Config(format!("SNIS batch size must be >= 2, got {k}")));
    }
    let component = select_component(coeffs, ctx.buffer.is_empty(), ctx.base.is_some(), rng)?;
    let vocab = *ctx.source.vocab();
    let mut samples = Vec::with_capacity(k);
    match component {
        Component::Prior => {
            for _ in 0..k {
                let x1 = uniform_sequence(&vocab, ctx.len, rng);
                let weight = ctx.cpe.predict(&x1)?;
                samples.push(WeightedSample { x1, component, weight });
            }
        }
        Component::Replay => {
            let pi = ctx.buffer.weights()?;
            for _ in 0..k {
                let j = sample_categorical(&pi, rng);
                samples.push(WeightedSample { x1: ctx.buffer.entries()[j].0.clone(), component, weight: 1.0 });
            }
        }
        Component::Flow => {
            let base = ctx.base.expect("flow selected only when a base flow exists");
            for _ in 0..k {
                let x1 = sample_flow(base, ctx.source, ctx.sampler, rng)?;
                let weight = importance_weight(component, &x1, ctx.cpe, Some(base), ctx.source, ctx.mc_samples, rng)?;
                samples.push(WeightedSample { x1, component, weight });
            }
        }
    }
    Ok(samples)
}
