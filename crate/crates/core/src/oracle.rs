//! Exact ground truth on enumerable instances: target laws p* ∝ w, terminal
//! laws of the discretised flow by distribution-space recursion, and SNIS
//! reference estimates.

use rand::Rng as _;

use crate::denoiser::Denoiser;
use crate::dynamics::position_kernel;
use crate::error::{AfmError, Result};
use crate::flow_path::{Scheduler, Sequence, SourceDistribution};
use crate::proposal::snis_normalise;
use crate::rng::Rng;

/// Largest joint state space the oracle will enumerate.
pub const MAX_STATES: usize = 10_000;
pub const MAX_ORACLE_STEPS: usize = 64;

/// A dense probability table over all sequences of length `len` with
/// `slots` symbols per position, indexed by [`Sequence::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    len: usize,
    slots: usize,
    probs: Vec<f64>,
}

fn state_count(slots: usize, len: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..len {
        n = n
            .checked_mul(slots)
            .filter(|&n| n <= MAX_STATES)
            .ok_or_else(|| AfmError::Config(format!("state space {slots}^{len} exceeds {MAX_STATES}")))?;
    }
    Ok(n)
}

impl DistributionTable {
    pub fn from_probs(len: usize, slots: usize, probs: Vec<f64>) -> Result<Self> {
        let n = state_count(slots, len)?;
        if probs.len() != n {
            return Err(AfmError::shape(n, probs.len()));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(AfmError::Numerical(format!("table is not a distribution (sum {total})")));
        }
        Ok(Self { len, slots, probs })
    }

    pub fn point_mass(x: &Sequence, slots: usize) -> Result<Self> {
        let n = state_count(slots, x.len())?;
        let mut probs = vec![0.0; n];
        probs[x.index(slots)] = 1.0;
        Ok(Self { len: x.len(), slots, probs })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &Sequence) -> f64 {
        if x.len() != self.len || x.0.iter().any(|&t| t as usize >= self.slots) {
            return 0.0;
        }
        self.probs[x.index(self.slots)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Sequence, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (Sequence::from_index(i, self.slots, self.len), p))
    }

    /// E[g] under the table.
    pub fn expectation(&self, g: impl Fn(&Sequence) -> f64) -> f64 {
        self.iter().filter(|(_, p)| *p > 0.0).map(|(x, p)| p * g(&x)).sum()
    }

    /// Empirical law of `samples`.
    pub fn empirical(samples: &[Sequence], len: usize, slots: usize) -> Result<Self> {
        let n = state_count(slots, len)?;
        if samples.is_empty() {
            return Err(AfmError::Domain("empirical table needs at least one sample".into()));
        }
        let mut counts = vec![0usize; n];
        for x in samples {
            if x.len() != len {
                return Err(AfmError::shape(len, x.len()));
            }
            if x.0.iter().any(|&t| t as usize >= slots) {
                return Err(AfmError::Domain(format!("sample {x} outside the table domain")));
            }
            counts[x.index(slots)] += 1;
        }
        let total = samples.len() as f64;
        Ok(Self { len, slots, probs: counts.into_iter().map(|c| c as f64 / total).collect() })
    }
}

/// ½ Σ |p − q|.
pub fn total_variation(p: &DistributionTable, q: &DistributionTable) -> Result<f64> {
    if p.len != q.len || p.slots != q.slots {
        return Err(AfmError::Domain(format!(
            "domain mismatch: {}^{} vs {}^{}",
            p.slots, p.len, q.slots, q.len
        )));
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// p*(x) = w(x) / Σ w under the uniform prior on `vocab_size^len`, with
/// Z = mean of w.
pub fn target_distribution(
    w: impl Fn(&Sequence) -> f64,
    vocab_size: usize,
    len: usize,
) -> Result<(DistributionTable, f64)> {
    let n = state_count(vocab_size, len)?;
    let ws: Vec<f64> = (0..n).map(|i| w(&Sequence::from_index(i, vocab_size, len))).collect();
    if ws.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(AfmError::Domain("weights must be finite and nonnegative".into()));
    }
    let total: f64 = ws.iter().sum();
    if total == 0.0 {
        return Err(AfmError::Domain("all weights are zero".into()));
    }
    let probs = ws.iter().map(|v| v / total).collect();
    Ok((DistributionTable { len, slots: vocab_size, probs }, total / n as f64))
}

/// Exact terminal law of [`crate::dynamics::generate`], propagating the
/// whole state distribution through every Euler kernel. With terminal
/// unmasking the result lives on data tokens only.
pub fn enumerate_terminal(
    denoiser: &dyn Denoiser,
    source: &SourceDistribution,
    scheduler: Scheduler,
    steps: usize,
    force_terminal_unmask: bool,
) -> Result<DistributionTable> {
    if steps == 0 || steps > MAX_ORACLE_STEPS {
        return Err(AfmError::Config(format!("steps must be in 1..={MAX_ORACLE_STEPS}, got {steps}")));
    }
    let vocab = denoiser.vocab();
    let len = denoiser.seq_len();
    let slots = vocab.slots();
    let n = state_count(slots, len)?;
    let h = 1.0 / steps as f64;

    let mut dist: Vec<f64> = (0..n).map(|i| source.prob(&Sequence::from_index(i, slots, len))).collect();
    let mut next = vec![0.0; n];
    let mut kernels = vec![Vec::with_capacity(slots); len];
    for k in 0..steps {
        let t = k as f64 * h;
        let (kap, dk) = scheduler.kappa(t)?;
        let step_mass = h * dk / (1.0 - kap);
        if step_mass == 0.0 {
            continue;
        }
        next.iter_mut().for_each(|p| *p = 0.0);
        for (i, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let x = Sequence::from_index(i, slots, len);
            let post = denoiser.predict(&x, t)?;
            for (pos, kernel) in kernels.iter_mut().enumerate() {
                position_kernel(post.row(pos), x.0[pos], step_mass, slots, kernel)?;
            }
            spread(&kernels, p, slots, &mut next);
        }
        std::mem::swap(&mut dist, &mut next);
    }

    if !(force_terminal_unmask && vocab.has_mask()) {
        return Ok(DistributionTable { len, slots, probs: dist });
    }
    let v = vocab.size();
    let mut out = vec![0.0; state_count(v, len)?];
    let t_last = 1.0 - h;
    for (i, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let x = Sequence::from_index(i, slots, len);
        if !x.contains_mask(&vocab) {
            out[x.index(v)] += p;
            continue;
        }
        let post = denoiser.predict(&x, t_last)?;
        for (pos, kernel) in kernels.iter_mut().enumerate() {
            kernel.clear();
            if vocab.is_mask(x.0[pos]) {
                kernel.extend_from_slice(post.row(pos));
            } else {
                kernel.resize(v, 0.0);
                kernel[x.0[pos] as usize] = 1.0;
            }
        }
        spread(&kernels, p, v, &mut out);
    }
    Ok(DistributionTable { len, slots: v, probs: out })
}

/// Adds `mass · ∏ᵢ kernels[i][yᵢ]` to `out[y]` for every y, skipping zeros.
fn spread(kernels: &[Vec<f64>], mass: f64, slots: usize, out: &mut [f64]) {
    fn go(kernels: &[Vec<f64>], pos: usize, index: usize, mass: f64, slots: usize, out: &mut [f64]) {
        if pos == kernels.len() {
            out[index] += mass;
            return;
        }
        for (tok, &q) in kernels[pos].iter().enumerate() {
            if q > 0.0 {
                go(kernels, pos + 1, index * slots + tok, mass * q, slots, out);
            }
        }
    }
    go(kernels, 0, 0, mass, slots, out);
}

/// Repeated SNIS estimates of E_{p*}[g] from the uniform proposal, next to
/// the exact value.
#[derive(Debug, Clone, PartialEq)]
pub struct SnisReport {
    pub estimates: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub exact: f64,
}

impl SnisReport {
    pub fn bias(&self) -> f64 {
        self.mean - self.exact
    }
}

/// Each repetition draws `k` uniform sequences and returns Σ w̃ g.
/// A repetition whose weights are all zero is a [`AfmError::DegenerateBatch`].
pub fn snis_reference(
    w: impl Fn(&Sequence) -> f64,
    g: impl Fn(&Sequence) -> f64,
    vocab_size: usize,
    len: usize,
    k: usize,
    repetitions: usize,
    rng: &mut Rng,
) -> Result<SnisReport> {
    if k == 0 || repetitions == 0 {
        return Err(AfmError::Domain("need k >= 1 and repetitions >= 1".into()));
    }
    let (target, _) = target_distribution(&w, vocab_size, len)?;
    let exact = target.expectation(&g);
    let n = target.probs.len();
    let mut estimates = Vec::with_capacity(repetitions);
    let mut xs: Vec<Sequence> = Vec::with_capacity(k);
    for _ in 0..repetitions {
        xs.clear();
        xs.extend((0..k).map(|_| Sequence::from_index(rng.random_range(0..n), vocab_size, len)));
        let ws: Vec<f64> = xs.iter().map(&w).collect();
        let normalised = snis_normalise(&ws)?;
        estimates.push(normalised.iter().zip(&xs).map(|(wt, x)| wt * g(x)).sum());
    }
    let reps = repetitions as f64;
    let mean = estimates.iter().sum::<f64>() / reps;
    let std_error = if repetitions > 1 {
        (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1.0)).sqrt() / reps.sqrt()
    } else {
        0.0
    };
    Ok(SnisReport { estimates, mean, std_error, exact })
}
