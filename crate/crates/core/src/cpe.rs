//! Class-probability estimator for p(y ≥ τ | x) and threshold schedules.

use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::flow_path::Sequence;

/// Probability bounds used for constant (single-class) models.
pub const CONSTANT_CLIP: (f64, f64) = (0.01, 0.99);

/// Logistic regression over per-position one-hot features plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityEstimator {
    len: usize,
    vocab_size: usize,
    weights: Vec<f64>,
    bias: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ClassProbabilityEstimator {
    pub fn zeros(len: usize, vocab_size: usize) -> Self {
        Self { len, vocab_size, weights: vec![0.0; len * vocab_size], bias: 0.0 }
    }

    pub fn from_parts(len: usize, vocab_size: usize, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != len * vocab_size {
            return Err(AfmError::shape(len * vocab_size, weights.len()));
        }
        Ok(Self { len, vocab_size, weights, bias })
    }

    /// A model predicting `p` everywhere, with `p` clipped to [0.01, 0.99].
    pub fn constant(len: usize, vocab_size: usize, p: f64) -> Self {
        let p = p.clamp(CONSTANT_CLIP.0, CONSTANT_CLIP.1);
        Self { bias: (p / (1.0 - p)).ln(), ..Self::zeros(len, vocab_size) }
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

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + 1
    }

    fn check(&self, x: &Sequence) -> Result<()> {
        if x.len() != self.len {
            return Err(AfmError::shape(self.len, x.len()));
        }
        if let Some(t) = x.0.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(AfmError::Domain(format!("classifier input contains non-data token {t}")));
        }
        Ok(())
    }

    pub fn score(&self, x: &Sequence) -> Result<f64> {
        self.check(x)?;
        Ok(self.score_unchecked(x))
    }

    fn score_unchecked(&self, x: &Sequence) -> f64 {
        let v = self.vocab_size;
        self.bias + x.0.iter().enumerate().map(|(i, &t)| self.weights[i * v + t as usize]).sum::<f64>()
    }

    /// σ(score), kept strictly inside (0, 1).
    pub fn predict(&self, x: &Sequence) -> Result<f64> {
        Ok(sigmoid(self.score(x)?).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    /// Mean class-weighted log loss and its gradient (weights then bias).
    ///
    /// `positive_weight` scales the loss of positive examples; the mean is
    /// taken over the total example weight.
    pub fn loss_and_grad(&self, data: &[(Sequence, bool)], positive_weight: f64) -> Result<(f64, Vec<f64>)> {
        let v = self.vocab_size;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for (x, z) in data {
            self.check(x)?;
            let s = self.score_unchecked(x);
            let w = if *z { positive_weight } else { 1.0 };
            let (l, d) = if *z { (softplus(-s), sigmoid(s) - 1.0) } else { (softplus(s), sigmoid(s)) };
            loss += w * l;
            total_weight += w;
            for (i, &t) in x.0.iter().enumerate() {
                grad[i * v + t as usize] += w * d;
            }
            grad[self.weights.len()] += w * d;
        }
        if total_weight == 0.0 {
            return Err(AfmError::Domain("empty classifier dataset".into()));
        }
        grad.iter_mut().for_each(|g| *g /= total_weight);
        Ok((loss / total_weight, grad))
    }

    pub fn apply_gradient(&mut self, grad: &[f64], learning_rate: f64) {
        let n = self.weights.len();
        for (w, g) in self.weights.iter_mut().zip(&grad[..n]) {
            *w -= learning_rate * g;
        }
        self.bias -= learning_rate * grad[n];
    }
}

/// z = 1[y ≥ τ] labels.
pub fn label(dataset: &[(Sequence, f64)], tau: f64) -> Vec<(Sequence, bool)> {
    dataset.iter().map(|(x, y)| (x.clone(), *y >= tau)).collect()
}

/// Positive-class weight negatives/positives, or `None` when a class is absent.
pub fn class_weight(labels: &[(Sequence, bool)]) -> Option<f64> {
    let pos = labels.iter().filter(|(_, z)| *z).count();
    let neg = labels.len() - pos;
    (pos > 0 && neg > 0).then(|| neg as f64 / pos as f64)
}

/// Result of a classifier fit: the model and the per-epoch training losses.
#[derive(Debug, Clone)]
pub struct CpeFit {
    pub model: ClassProbabilityEstimator,
    pub losses: Vec<f64>,
}

/// Fits the classifier from scratch by full-batch gradient descent on the
/// class-reweighted log loss.
pub fn cpe_fit(
    dataset: &[(Sequence, f64)],
    len: usize,
    vocab_size: usize,
    tau: f64,
    epochs: usize,
    learning_rate: f64,
) -> Result<CpeFit> {
    if dataset.is_empty() {
        return Err(AfmError::Domain("cannot fit a classifier on an empty dataset".into()));
    }
    let labels = label(dataset, tau);
    let Some(pos_weight) = class_weight(&labels) else {
        let prior = labels.iter().filter(|(_, z)| *z).count() as f64 / labels.len() as f64;
        log::warn!("single-class dataset at tau {tau}; constant classifier at prior {prior}");
        return Ok(CpeFit { model: ClassProbabilityEstimator::constant(len, vocab_size, prior), losses: Vec::new() });
    };
    let mut model = ClassProbabilityEstimator::zeros(len, vocab_size);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grad) = model.loss_and_grad(&labels, pos_weight)?;
        if !loss.is_finite() {
            return Err(AfmError::Numerical("classifier loss is not finite".into()));
        }
        losses.push(loss);
        model.apply_gradient(&grad, learning_rate);
    }
    Ok(CpeFit { model, losses })
}

/// How τ_r is chosen each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThresholdSchedule {
    /// Nearest-rank percentile of the observed labels.
    Percentile { percentile: f64 },
    /// Step function over (first round, τ) pairs.
    Ladder { steps: Vec<(usize, f64)> },
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule::Percentile { percentile: 90.0 }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThresholdSchedule::Percentile { percentile } => {
                if !(*percentile > 0.0 && *percentile < 100.0) {
                    return Err(AfmError::Config(format!("percentile {percentile} outside (0, 100)")));
                }
            }
            ThresholdSchedule::Ladder { steps } => {
                if steps.is_empty() {
                    return Err(AfmError::Config("threshold ladder is empty".into()));
                }
                for w in steps.windows(2) {
                    if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                        return Err(AfmError::Config("ladder must be sorted by round with non-decreasing values".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn threshold(&self, round: usize, observed: &[f64]) -> Result<f64> {
        self.validate()?;
        match self {
            ThresholdSchedule::Percentile { percentile } => nearest_rank(observed, *percentile),
            ThresholdSchedule::Ladder { steps } => Ok(steps
                .iter()
                .take_while(|(r, _)| *r <= round)
                .last()
                .unwrap_or(&steps[0])
                .1),
        }
    }
}

/// Nearest-rank percentile: the ⌈p/100 · n⌉-th smallest value.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(AfmError::Domain("percentile of an empty dataset".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        let ys: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = ThresholdSchedule::Percentile { percentile: 90.0 };
        assert_eq!(s.threshold(0, &ys).unwrap(), 9.0);
        let median = ThresholdSchedule::Percentile { percentile: 50.0 };
        assert_eq!(median.threshold(4, &[5.0]).unwrap(), 5.0);
        assert!(matches!(s.threshold(0, &[]), Err(AfmError::Domain(_))));
    }

    #[test]
    fn ladder_examples() {
        let s = ThresholdSchedule::Ladder { steps: vec![(0, 13.5), (2, 14.0)] };
        assert_eq!(s.threshold(3, &[]).unwrap(), 14.0);
        assert_eq!(s.threshold(1, &[]).unwrap(), 13.5);
        let mut prev = f64::NEG_INFINITY;
        for r in 0..10 {
            let t = s.threshold(r, &[]).unwrap();
            assert!(t >= prev);
            prev = t;
        }
        let bad = ThresholdSchedule::Ladder { steps: vec![(0, 2.0), (1, 1.0)] };
        assert!(matches!(bad.validate(), Err(AfmError::Config(_))));
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = ClassProbabilityEstimator::zeros(3, 4);
        assert_eq!(m.predict(&Sequence::new(vec![0, 1, 3])).unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_arithmetic_and_linearity() {
        let mut m = ClassProbabilityEstimator::zeros(2, 3);
        m.weights_mut()[2] = 10.0; // position 0, token 2
        let x = Sequence::new(vec![2, 0]);
        let p = m.predict(&x).unwrap();
        assert!((p - 0.9999546).abs() < 1e-7);
        let y = Sequence::new(vec![2, 1]);
        assert_eq!(m.predict(&y).unwrap(), p);
    }

    #[test]
    fn rejects_mask_tokens() {
        let m = ClassProbabilityEstimator::zeros(2, 3);
        assert!(matches!(m.predict(&Sequence::new(vec![3, 0])), Err(AfmError::Domain(_))));
    }

    #[test]
    fn single_class_gives_clipped_constant() {
        let data = vec![(Sequence::new(vec![0, 1]), 5.0), (Sequence::new(vec![1, 1]), 6.0)];
        let fit = cpe_fit(&data, 2, 2, 1.0, 100, 0.5).unwrap();
        assert!((fit.model.predict(&Sequence::new(vec![0, 0])).unwrap() - 0.99).abs() < 1e-12);
        let fit = cpe_fit(&data, 2, 2, 10.0, 100, 0.5).unwrap();
        assert!((fit.model.predict(&Sequence::new(vec![0, 0])).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn separable_data_reaches_full_accuracy_with_monotone_loss() {
        // Positives have token 1 at position 0; labels otherwise arbitrary.
        let xs = [
            [1, 0, 2], [1, 2, 2], [1, 1, 0], [1, 0, 0], [0, 0, 2],
            [2, 1, 1], [0, 2, 0], [2, 2, 2], [0, 1, 1], [2, 0, 1],
        ];
        let data: Vec<_> = xs
            .iter()
            .map(|x| (Sequence::new(x.to_vec()), if x[0] == 1 { 1.0 } else { 0.0 }))
            .collect();
        let fit = cpe_fit(&data, 3, 3, 0.5, 500, 0.5).unwrap();
        for w in fit.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        for (x, y) in &data {
            let p = fit.model.predict(x).unwrap();
            assert_eq!(p >= 0.5, *y >= 0.5);
        }
    }

    #[test]
    fn balanced_reweighting_is_neutral() {
        let labels = vec![
            (Sequence::new(vec![0, 1]), true),
            (Sequence::new(vec![1, 1]), false),
            (Sequence::new(vec![1, 0]), true),
            (Sequence::new(vec![0, 0]), false),
        ];
        let w = class_weight(&labels).unwrap();
        assert_eq!(w, 1.0);
        let mut m = ClassProbabilityEstimator::zeros(2, 2);
        m.weights_mut().copy_from_slice(&[0.3, -0.2, 0.7, 0.1]);
        m.set_bias(-0.4);
        let (weighted, gw) = m.loss_and_grad(&labels, w).unwrap();
        let (plain, gp) = m.loss_and_grad(&labels, 1.0).unwrap();
        assert_eq!(weighted.to_bits(), plain.to_bits());
        assert_eq!(gw, gp);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let labels = vec![
            (Sequence::new(vec![0, 1, 2]), true),
            (Sequence::new(vec![1, 1, 0]), false),
            (Sequence::new(vec![2, 0, 2]), false),
            (Sequence::new(vec![2, 1, 1]), true),
            (Sequence::new(vec![0, 0, 0]), false),
        ];
        let mut m = ClassProbabilityEstimator::zeros(3, 3);
        for (i, w) in m.weights_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        m.set_bias(0.2);
        let (_, grad) = m.loss_and_grad(&labels, 1.5).unwrap();
        let h = 1e-5;
        for c in 0..m.param_count() {
            let bump = |delta: f64| {
                let mut p = m.clone();
                if c < p.weights.len() {
                    p.weights[c] += delta;
                } else {
                    p.bias += delta;
                }
                p.loss_and_grad(&labels, 1.5).unwrap().0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grad[c]).abs() <= 1e-4 * fd.abs().max(grad[c].abs()).max(1e-6));
        }
    }
}
