//! Probability velocities, Euler-discretised CTMC sampling, and the
//! mutation-budget constrained sampler.

use crate::denoiser::{Denoiser, Posterior};
use crate::error::{AfmError, Result};
use crate::flow_path::{sample_categorical, Scheduler, Sequence, SourceDistribution, Token, Vocab};
use crate::rng::Rng;

/// Deviation from the simplex tolerated (and repaired) in an Euler kernel.
pub const KERNEL_CLAMP_TOL: f64 = 1e-8;

/// Velocities u(x' | x_t) at one position, one entry per alphabet slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub current: Token,
    pub rates: Vec<f64>,
}

impl TransitionRow {
    pub fn sum(&self) -> f64 {
        self.rates.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub scheduler: Scheduler,
    pub force_terminal_unmask: bool,
    pub mutation_budget: Option<usize>,
    pub reference: Option<Sequence>,
}

impl SamplerConfig {
    pub fn new(steps: usize, scheduler: Scheduler) -> Self {
        Self { steps, scheduler, force_terminal_unmask: true, mutation_budget: None, reference: None }
    }

    pub fn with_budget(mut self, budget: usize, reference: Sequence) -> Self {
        self.mutation_budget = Some(budget);
        self.reference = Some(reference);
        self
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(AfmError::Config("sampler needs at least one step".into()));
        }
        if self.mutation_budget.is_some() && self.reference.is_none() {
            return Err(AfmError::Config("mutation budget requires a reference sequence".into()));
        }
        Ok(())
    }
}

/// u(x'|x_t) = κ̇/(1−κ) · [p(x'|x_t) − δ_{x_t}(x')] per position.
pub fn velocity(
    posterior: &Posterior,
    x_t: &Sequence,
    t: f64,
    scheduler: Scheduler,
    vocab: &Vocab,
) -> Result<Vec<TransitionRow>> {
    if posterior.len() != x_t.len() {
        return Err(AfmError::shape(x_t.len(), posterior.len()));
    }
    let (k, dk) = scheduler.kappa(t)?;
    if k >= 1.0 {
        return Err(AfmError::Numerical(format!(
            "velocity is singular at t = {t} (kappa = 1); use terminal unmasking"
        )));
    }
    let factor = dk / (1.0 - k);
    Ok(x_t
        .0
        .iter()
        .enumerate()
        .map(|(i, &cur)| {
            let mut rates = vec![0.0; vocab.slots()];
            for (v, &p) in posterior.row(i).iter().enumerate() {
                rates[v] = factor * p;
            }
            rates[cur as usize] -= factor;
            TransitionRow { current: cur, rates }
        })
        .collect())
}

/// Builds δ + h·u in place over `kernel`, clamping round-off negatives.
fn clamp_kernel(kernel: &mut [f64]) -> Result<()> {
    let mut total = 0.0;
    let mut repaired = false;
    for p in kernel.iter_mut() {
        if *p < 0.0 || *p > 1.0 {
            let excess = if *p < 0.0 { -*p } else { *p - 1.0 };
            if excess > KERNEL_CLAMP_TOL || !p.is_finite() {
                return Err(AfmError::Numerical(format!("transition kernel entry {p} outside [0, 1]")));
            }
            *p = p.clamp(0.0, 1.0);
            repaired = true;
        }
        total += *p;
    }
    if (total - 1.0).abs() > KERNEL_CLAMP_TOL {
        return Err(AfmError::Numerical(format!("transition kernel sums to {total}")));
    }
    if repaired || total != 1.0 {
        kernel.iter_mut().for_each(|p| *p /= total);
    }
    Ok(())
}

/// The per-position categorical kernels δ_{x_t} + h·u, after clamping.
pub fn euler_kernels(rows: &[TransitionRow], h: f64) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|row| {
            let mut kernel: Vec<f64> = row.rates.iter().map(|u| h * u).collect();
            kernel[row.current as usize] += 1.0;
            clamp_kernel(&mut kernel)?;
            Ok(kernel)
        })
        .collect()
}

/// Resamples each position independently from its Euler kernel.
pub fn euler_step(x_t: &Sequence, rows: &[TransitionRow], h: f64, rng: &mut Rng) -> Result<Sequence> {
    if rows.len() != x_t.len() {
        return Err(AfmError::shape(x_t.len(), rows.len()));
    }
    if h == 0.0 {
        return Ok(x_t.clone());
    }
    let kernels = euler_kernels(rows, h)?;
    Ok(Sequence(kernels.iter().map(|k| sample_categorical(k, rng) as Token).collect()))
}

/// Kernel for one position straight from a posterior row; `step_mass` = h·κ̇/(1−κ).
pub(crate) fn position_kernel(row: &[f64], current: Token, step_mass: f64, slots: usize, out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    out.resize(slots, 0.0);
    for (v, &p) in row.iter().enumerate() {
        out[v] = step_mass * p;
    }
    out[current as usize] += 1.0 - step_mass;
    clamp_kernel(out)
}

/// Euler-discretised CTMC sampling from the source to t = 1.
pub fn generate(
    denoiser: &dyn Denoiser,
    source: &SourceDistribution,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Sequence> {
    config.validate()?;
    let vocab = denoiser.vocab();
    let slots = vocab.slots();
    let h = config.step_size();
    let mut x = source.sample(denoiser.seq_len(), rng)?;
    let mut kernel = Vec::with_capacity(slots);
    for k in 0..config.steps {
        let t = k as f64 * h;
        let (kap, dk) = config.scheduler.kappa(t)?;
        let step_mass = h * dk / (1.0 - kap);
        if step_mass == 0.0 {
            continue;
        }
        let post = denoiser.predict(&x, t)?;
        for i in 0..x.len() {
            position_kernel(post.row(i), x.0[i], step_mass, slots, &mut kernel)?;
            x.0[i] = sample_categorical(&kernel, rng) as Token;
        }
    }
    if config.force_terminal_unmask && x.contains_mask(&vocab) {
        let t_last = 1.0 - h;
        let post = denoiser.predict(&x, t_last)?;
        for i in 0..x.len() {
            if vocab.is_mask(x.0[i]) {
                x.0[i] = sample_categorical(post.row(i), rng) as Token;
            }
        }
    }
    Ok(x)
}

/// Edits the reference sequence one (position, token) at a time, drawn
/// proportionally to the positive off-diagonal rates, until the mutation
/// budget is spent, the time grid ends, or no positive rate remains.
pub fn generate_constrained(denoiser: &dyn Denoiser, config: &SamplerConfig, rng: &mut Rng) -> Result<Sequence> {
    config.validate()?;
    let budget = config
        .mutation_budget
        .ok_or_else(|| AfmError::Config("constrained sampling needs a mutation budget".into()))?;
    let reference = config
        .reference
        .as_ref()
        .ok_or_else(|| AfmError::Config("constrained sampling needs a reference".into()))?;
    let vocab = denoiser.vocab();
    if reference.len() != denoiser.seq_len() {
        return Err(AfmError::shape(denoiser.seq_len(), reference.len()));
    }
    reference.validate(&vocab)?;
    let v = vocab.size();
    let h = config.step_size();
    let mut x = reference.clone();
    let mut rates = vec![0.0; x.len() * v];
    let mut edits = 0;
    for k in 0..config.steps {
        if edits >= budget {
            break;
        }
        let t = k as f64 * h;
        let post = denoiser.predict(&x, t)?;
        // κ̇/(1−κ) is shared by every entry, so the posterior mass alone sets
        // the proportions.
        for i in 0..x.len() {
            for tok in 0..v {
                rates[i * v + tok] = if tok as Token == x.0[i] { 0.0 } else { post.row(i)[tok] };
            }
        }
        if !rates.iter().any(|&r| r > 0.0) {
            break;
        }
        let choice = sample_categorical(&rates, rng);
        x.0[choice / v] = (choice % v) as Token;
        edits += 1;
    }
    Ok(x)
}

/// Draws from the flow with whichever sampler `config` selects.
pub fn sample_flow(
    denoiser: &dyn Denoiser,
    source: &SourceDistribution,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Sequence> {
    if config.mutation_budget.is_some() {
        generate_constrained(denoiser, config, rng)
    } else {
        generate(denoiser, source, config, rng)
    }
}
