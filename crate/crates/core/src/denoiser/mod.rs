//! Conditional endpoint models q(x₁ | x_t, t) and their cross-entropy objectives.

mod softmax;
mod tabular;

pub use softmax::SoftmaxDenoiser;
pub use tabular::{fit_tabular_exact, TabularDenoiser, MAX_TABULAR_CONTEXTS};

use crate::error::{AfmError, Result};
use crate::flow_path::{Sequence, Vocab};

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Per-position distributions over the |V| data tokens, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    len: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

impl Posterior {
    pub fn new(len: usize, vocab_size: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != len * vocab_size {
            return Err(AfmError::shape(len * vocab_size, probs.len()));
        }
        Ok(Self { len, vocab_size, probs })
    }

    pub fn uniform(len: usize, vocab_size: usize) -> Self {
        Self { len, vocab_size, probs: vec![1.0 / vocab_size as f64; len * vocab_size] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.vocab_size)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// ∏ᵢ q(x₁ⁱ) for a data-token sequence.
    pub fn sequence_prob(&self, x1: &Sequence) -> f64 {
        x1.0.iter().enumerate().map(|(i, &v)| self.row(i)[v as usize]).product()
    }
}

/// A model of the endpoint posterior, conditioned on the whole current state.
pub trait Denoiser {
    fn vocab(&self) -> Vocab;
    fn seq_len(&self) -> usize;
    fn predict(&self, x_t: &Sequence, t: f64) -> Result<Posterior>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn predict(&self, x_t: &Sequence, t: f64) -> Result<Posterior> {
        (**self).predict(x_t, t)
    }
}

pub(crate) fn check_state(d: &dyn Denoiser, x_t: &Sequence) -> Result<()> {
    if x_t.len() != d.seq_len() {
        return Err(AfmError::shape(d.seq_len(), x_t.len()));
    }
    x_t.validate(&d.vocab())
}

/// Parallel arrays of training examples for the weighted cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub targets: Vec<Sequence>,
    pub states: Vec<Sequence>,
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        for len in [self.states.len(), self.times.len(), self.weights.len()] {
            if len != n {
                return Err(AfmError::shape(n, len));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(AfmError::Numerical("batch weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AfmError::Numerical(format!("batch weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// −Σᵢ log q(x₁ⁱ | x_t, t).
pub fn ce_loss(d: &dyn Denoiser, x1: &Sequence, x_t: &Sequence, t: f64) -> Result<f64> {
    let vocab = d.vocab();
    if x1.len() != d.seq_len() {
        return Err(AfmError::shape(d.seq_len(), x1.len()));
    }
    if x1.0.iter().any(|&v| !vocab.is_data(v)) {
        return Err(AfmError::Domain("target sequence must contain only data tokens".into()));
    }
    let post = d.predict(x_t, t)?;
    Ok(ce_from_posterior(&post, x1))
}

pub(crate) fn ce_from_posterior(post: &Posterior, x1: &Sequence) -> f64 {
    let mut loss = 0.0;
    for (i, &v) in x1.0.iter().enumerate() {
        let p = post.row(i)[v as usize];
        if p < LOG_CLAMP {
            log::debug!("clamping predicted probability {p:e} at position {i}");
        }
        loss -= p.max(LOG_CLAMP).ln();
    }
    loss
}

/// Σ_k w̃_k · ce_loss(x₁ₖ, x_tₖ, tₖ).
pub fn weighted_ce_loss(d: &dyn Denoiser, batch: &TrainBatch) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for k in 0..batch.len() {
        let w = batch.weights[k];
        if w == 0.0 {
            continue;
        }
        total += w * ce_loss(d, &batch.targets[k], &batch.states[k], batch.times[k])?;
    }
    Ok(total)
}

/// One gradient-descent step on the weighted cross-entropy; returns the pre-step loss.
pub fn train_step(model: &mut SoftmaxDenoiser, batch: &TrainBatch, learning_rate: f64) -> Result<f64> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(AfmError::Config(format!("learning rate must be >= 0, got {learning_rate}")));
    }
    let (loss, grad) = model.weighted_ce_loss_and_grad(batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let max_w = batch.weights.iter().cloned().fold(0.0, f64::max);
        return Err(AfmError::Numerical(format!(
            "non-finite gradient (loss {loss}, batch size {}, max weight {max_w})",
            batch.len()
        )));
    }
    model.apply_gradient(&grad, learning_rate);
    Ok(loss)
}
