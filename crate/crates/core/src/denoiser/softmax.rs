use rand_distr::{Distribution, Normal};

use super::{check_state, Denoiser, Posterior, TrainBatch, LOG_CLAMP};
use crate::error::{AfmError, Result};
use crate::flow_path::{Scheduler, Sequence, Vocab};
use crate::rng::Rng;

const TIME_FEATURES: usize = 3;

/// Linear-softmax denoiser over one-hot state features plus the time
/// embedding (t, 1−t, κ(t)).
///
/// Weights are an (L·|V|) × D matrix, D = L·slots + 3, stored row-major; row
/// `i·|V| + v` produces the logit of token `v` at position `i`.
///
/// With `carry_unmasked` set, positions already holding a data token predict
/// that token with probability one, matching the exact posterior structure of
/// mask-source paths. Only meaningful with a mask source.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxDenoiser {
    vocab: Vocab,
    len: usize,
    scheduler: Scheduler,
    carry_unmasked: bool,
    weights: Vec<f64>,
}

impl SoftmaxDenoiser {
    pub fn zeros(vocab: Vocab, len: usize, scheduler: Scheduler, carry_unmasked: bool) -> Self {
        let feat = len * vocab.slots() + TIME_FEATURES;
        Self {
            vocab,
            len,
            scheduler,
            carry_unmasked: carry_unmasked && vocab.has_mask(),
            weights: vec![0.0; len * vocab.size() * feat],
        }
    }

    pub fn from_weights(
        vocab: Vocab,
        len: usize,
        scheduler: Scheduler,
        carry_unmasked: bool,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let mut d = Self::zeros(vocab, len, scheduler, carry_unmasked);
        if weights.len() != d.weights.len() {
            return Err(AfmError::shape(d.weights.len(), weights.len()));
        }
        d.weights = weights;
        Ok(d)
    }

    /// Gaussian initialisation with standard deviation `scale`.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        self.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
    }

    pub fn feature_dim(&self) -> usize {
        self.len * self.vocab.slots() + TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.len * self.vocab.size()
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    pub fn carry_unmasked(&self) -> bool {
        self.carry_unmasked
    }

    pub fn params(&self) -> &[f64] {
        &self.weights
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn time_features(&self, t: f64) -> [f64; TIME_FEATURES] {
        let (k, _) = self.scheduler.kappa_unchecked(t.clamp(0.0, 1.0));
        [t, 1.0 - t, k]
    }

    fn is_carried(&self, token: u16) -> bool {
        self.carry_unmasked && self.vocab.is_data(token)
    }

    /// Column offsets of the active one-hot features for state `x_t`.
    fn active_columns(&self, x_t: &Sequence) -> Vec<usize> {
        let slots = self.vocab.slots();
        x_t.0.iter().enumerate().map(|(j, &tok)| j * slots + tok as usize).collect()
    }

    fn predict_unchecked(&self, x_t: &Sequence, t: f64) -> Vec<f64> {
        let v = self.vocab.size();
        let d = self.feature_dim();
        let cols = self.active_columns(x_t);
        let tf = self.time_features(t);
        let base = self.len * self.vocab.slots();
        let mut probs = vec![0.0; self.len * v];
        for i in 0..self.len {
            let row = &mut probs[i * v..(i + 1) * v];
            let tok = x_t.0[i];
            if self.is_carried(tok) {
                row[tok as usize] = 1.0;
                continue;
            }
            for (tv, out) in row.iter_mut().enumerate() {
                let w = &self.weights[(i * v + tv) * d..(i * v + tv + 1) * d];
                let mut z = w[base] * tf[0] + w[base + 1] * tf[1] + w[base + 2] * tf[2];
                for &c in &cols {
                    z += w[c];
                }
                *out = z;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for z in row.iter_mut() {
                *z = (*z - max).exp();
                total += *z;
            }
            row.iter_mut().for_each(|z| *z /= total);
        }
        probs
    }

    /// Adds `scale · ∂(Σ dlogits·logits)/∂W` into `grad`. Carried positions have
    /// no parameters and are skipped.
    pub(crate) fn accumulate_logit_grad(
        &self,
        x_t: &Sequence,
        t: f64,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let v = self.vocab.size();
        let d = self.feature_dim();
        let cols = self.active_columns(x_t);
        let tf = self.time_features(t);
        let base = self.len * self.vocab.slots();
        for i in 0..self.len {
            if self.is_carried(x_t.0[i]) {
                continue;
            }
            for tv in 0..v {
                let o = i * v + tv;
                let g = scale * dlogits[o];
                if g == 0.0 {
                    continue;
                }
                let row = &mut grad[o * d..(o + 1) * d];
                for &c in &cols {
                    row[c] += g;
                }
                for (k, f) in tf.iter().enumerate() {
                    row[base + k] += g * f;
                }
            }
        }
    }

    /// Weighted cross-entropy and its analytic gradient.
    pub fn weighted_ce_loss_and_grad(&self, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
        batch.validate()?;
        let v = self.vocab.size();
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; self.output_dim()];
        for k in 0..batch.len() {
            let w = batch.weights[k];
            if w == 0.0 {
                continue;
            }
            let (x1, x_t, t) = (&batch.targets[k], &batch.states[k], batch.times[k]);
            if x1.len() != self.len {
                return Err(AfmError::shape(self.len, x1.len()));
            }
            if x1.0.iter().any(|&tok| !self.vocab.is_data(tok)) {
                return Err(AfmError::Domain("target sequence must contain only data tokens".into()));
            }
            check_state(self, x_t)?;
            let probs = self.predict_unchecked(x_t, t);
            // Accumulated exactly as `weighted_ce_loss` does, so the two agree bit for bit.
            let mut ce = 0.0;
            for i in 0..self.len {
                let target = x1.0[i] as usize;
                let row = &probs[i * v..(i + 1) * v];
                ce -= row[target].max(LOG_CLAMP).ln();
                for tv in 0..v {
                    dlogits[i * v + tv] = row[tv] - if tv == target { 1.0 } else { 0.0 };
                }
            }
            loss += w * ce;
            self.accumulate_logit_grad(x_t, t, &dlogits, w, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn apply_gradient(&mut self, grad: &[f64], learning_rate: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= learning_rate * g;
        }
    }
}

impl Denoiser for SoftmaxDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn predict(&self, x_t: &Sequence, t: f64) -> Result<Posterior> {
        check_state(self, x_t)?;
        Posterior::new(self.len, self.vocab.size(), self.predict_unchecked(x_t, t))
    }
}
