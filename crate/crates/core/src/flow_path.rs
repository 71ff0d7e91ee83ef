//! Vocabularies, sequences, schedulers, source distributions and the
//! factorised convex conditional probability path.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::rng::Rng;

pub type Token = u16;

/// A finite alphabet of `size` data tokens, optionally extended by a mask slot
/// stored at id `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    has_mask: bool,
}

impl Vocab {
    pub fn new(size: usize, has_mask: bool) -> Result<Self> {
        if size < 2 {
            return Err(AfmError::Config(format!("vocab size must be >= 2, got {size}")));
        }
        if size >= Token::MAX as usize {
            return Err(AfmError::Config(format!("vocab size {size} too large")));
        }
        Ok(Self { size, has_mask })
    }

    pub fn with_mask(size: usize) -> Result<Self> {
        Self::new(size, true)
    }

    /// Number of data tokens |V|.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn has_mask(&self) -> bool {
        self.has_mask
    }

    pub fn mask(&self) -> Option<Token> {
        self.has_mask.then_some(self.size as Token)
    }

    /// Number of alphabet slots including the mask slot when present.
    pub fn slots(&self) -> usize {
        self.size + usize::from(self.has_mask)
    }

    pub fn is_mask(&self, token: Token) -> bool {
        self.has_mask && token as usize == self.size
    }

    pub fn is_data(&self, token: Token) -> bool {
        (token as usize) < self.size
    }
}

/// A fixed-length token array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(pub Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn filled(token: Token, len: usize) -> Self {
        Self(vec![token; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    /// Checks every token against the vocabulary (mask slot allowed when present).
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab.slots()) {
            Some(t) => Err(AfmError::Domain(format!(
                "token {t} outside alphabet of {} slots",
                vocab.slots()
            ))),
            None => Ok(()),
        }
    }

    pub fn contains_mask(&self, vocab: &Vocab) -> bool {
        self.0.iter().any(|&t| vocab.is_mask(t))
    }

    pub fn hamming(&self, other: &Sequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Mixed-radix index of the sequence over `slots` symbols per position.
    pub fn index(&self, slots: usize) -> usize {
        self.0.iter().fold(0, |acc, &t| acc * slots + t as usize)
    }

    pub fn from_index(mut index: usize, slots: usize, len: usize) -> Self {
        let mut tokens = vec![0 as Token; len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % slots) as Token;
            index /= slots;
        }
        Self(tokens)
    }

    /// Dash-separated token ids, as used in the CSV outputs.
    pub fn to_dashed(&self) -> String {
        self.0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn parse_dashed(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split('-')
            .map(|p| {
                p.trim()
                    .parse::<Token>()
                    .map_err(|e| AfmError::Domain(format!("bad token {p:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_dashed())
    }
}

impl From<Vec<Token>> for Sequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

/// Monotone interpolation schedule with κ(0) = 0 and κ(1) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    Linear,
    Quadratic,
}

impl Scheduler {
    /// Returns (κ(t), κ̇(t)).
    pub fn kappa(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(AfmError::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.kappa_unchecked(t))
    }

    pub(crate) fn kappa_unchecked(&self, t: f64) -> (f64, f64) {
        match self {
            Scheduler::Linear => (t, 1.0),
            Scheduler::Quadratic => (t * t, 2.0 * t),
        }
    }

    /// κ̇/(1−κ), the rate factor of the probability velocity. Infinite at κ = 1.
    pub fn rate_factor(&self, t: f64) -> Result<f64> {
        let (k, dk) = self.kappa(t)?;
        Ok(dk / (1.0 - k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Mask,
    Uniform,
}

/// The source law p₀ over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceDistribution {
    kind: SourceKind,
    vocab: Vocab,
}

impl SourceDistribution {
    pub fn new(kind: SourceKind, vocab: Vocab) -> Result<Self> {
        if kind == SourceKind::Mask && !vocab.has_mask() {
            return Err(AfmError::Config("mask source requires a vocabulary with a mask token".into()));
        }
        Ok(Self { kind, vocab })
    }

    pub fn mask(vocab: Vocab) -> Result<Self> {
        Self::new(SourceKind::Mask, vocab)
    }

    pub fn uniform(vocab: Vocab) -> Self {
        Self { kind: SourceKind::Uniform, vocab }
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Result<Sequence> {
        if len == 0 {
            return Err(AfmError::Domain("sequence length must be >= 1".into()));
        }
        Ok(match self.kind {
            SourceKind::Mask => {
                let m = self
                    .vocab
                    .mask()
                    .ok_or_else(|| AfmError::Config("mask source without mask token".into()))?;
                Sequence::filled(m, len)
            }
            SourceKind::Uniform => uniform_sequence(&self.vocab, len, rng),
        })
    }

    /// Probability of `x` under the source.
    pub fn prob(&self, x: &Sequence) -> f64 {
        match self.kind {
            SourceKind::Mask => {
                if x.0.iter().all(|&t| self.vocab.is_mask(t)) {
                    1.0
                } else {
                    0.0
                }
            }
            SourceKind::Uniform => {
                if x.0.iter().all(|&t| self.vocab.is_data(t)) {
                    (self.vocab.size() as f64).powi(-(x.len() as i32))
                } else {
                    0.0
                }
            }
        }
    }
}

/// I.i.d. uniform data tokens (never the mask slot).
pub fn uniform_sequence(vocab: &Vocab, len: usize, rng: &mut Rng) -> Sequence {
    Sequence((0..len).map(|_| rng.random_range(0..vocab.size()) as Token).collect())
}

pub fn sample_source(source: &SourceDistribution, len: usize, rng: &mut Rng) -> Result<Sequence> {
    source.sample(len, rng)
}

fn check_pair(x0: &Sequence, x1: &Sequence) -> Result<()> {
    if x0.len() != x1.len() {
        return Err(AfmError::shape(x0.len(), x1.len()));
    }
    Ok(())
}

/// Draws x_t from the convex path: each position independently takes x1ⁱ with
/// probability κ(t), otherwise x0ⁱ.
pub fn sample_conditional_path(
    x0: &Sequence,
    x1: &Sequence,
    t: f64,
    scheduler: Scheduler,
    rng: &mut Rng,
) -> Result<Sequence> {
    check_pair(x0, x1)?;
    let (k, _) = scheduler.kappa(t)?;
    let tokens = x0
        .0
        .iter()
        .zip(&x1.0)
        .map(|(&a, &b)| if rng.random::<f64>() < k { b } else { a })
        .collect();
    Ok(Sequence(tokens))
}

/// ∏ᵢ [(1−κ)δ_{x0ⁱ}(xⁱ) + κ δ_{x1ⁱ}(xⁱ)].
pub fn conditional_path_prob(
    x: &Sequence,
    x0: &Sequence,
    x1: &Sequence,
    t: f64,
    scheduler: Scheduler,
) -> Result<f64> {
    check_pair(x0, x1)?;
    check_pair(x, x0)?;
    let (k, _) = scheduler.kappa(t)?;
    let mut p = 1.0;
    for ((&xi, &ai), &bi) in x.0.iter().zip(&x0.0).zip(&x1.0) {
        let mut term = 0.0;
        if xi == ai {
            term += 1.0 - k;
        }
        if xi == bi {
            term += k;
        }
        p *= term;
        if p == 0.0 {
            break;
        }
    }
    Ok(p)
}

/// Inverse-CDF draw from a (not necessarily normalised) nonnegative weight vector.
pub(crate) fn sample_categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Floating round-off: fall back to the last positive entry.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn vocab(n: usize) -> Vocab {
        Vocab::with_mask(n).unwrap()
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(Scheduler::Quadratic.kappa(0.5).unwrap(), (0.25, 1.0));
        assert_eq!(Scheduler::Linear.kappa(0.3).unwrap(), (0.3, 1.0));
        assert_eq!(Scheduler::Linear.kappa(1.0).unwrap(), (1.0, 1.0));
        assert!(matches!(Scheduler::Linear.kappa(1.5), Err(AfmError::Domain(_))));
        assert!(matches!(Scheduler::Quadratic.kappa(-0.1), Err(AfmError::Domain(_))));
    }

    #[test]
    fn kappa_derivative_matches_finite_differences() {
        let h = 1e-6;
        for s in [Scheduler::Linear, Scheduler::Quadratic] {
            for i in 1..=100 {
                let t = i as f64 / 101.0;
                let (_, dk) = s.kappa(t).unwrap();
                let fd = (s.kappa(t + h).unwrap().0 - s.kappa(t - h).unwrap().0) / (2.0 * h);
                assert!(((fd - dk) / dk).abs() < 1e-6, "{s:?} t={t}: {fd} vs {dk}");
            }
        }
    }

    #[test]
    fn scheduler_boundaries_and_monotone() {
        for s in [Scheduler::Linear, Scheduler::Quadratic] {
            assert_eq!(s.kappa(0.0).unwrap().0, 0.0);
            assert_eq!(s.kappa(1.0).unwrap().0, 1.0);
            let mut prev = -1.0;
            for i in 0..=1000 {
                let k = s.kappa(i as f64 / 1000.0).unwrap().0;
                assert!(k > prev);
                prev = k;
            }
        }
    }

    #[test]
    fn rate_factor_non_decreasing() {
        for s in [Scheduler::Linear, Scheduler::Quadratic] {
            let mut prev = 0.0;
            for i in 0..1000 {
                let r = s.rate_factor(i as f64 / 1000.0).unwrap();
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn mask_source_is_point_mass() {
        let v = vocab(4);
        let src = SourceDistribution::mask(v).unwrap();
        let mut rng = from_seed(1);
        assert_eq!(src.sample(4, &mut rng).unwrap(), Sequence::filled(4, 4));
    }

    #[test]
    fn mask_source_requires_mask_token() {
        let v = Vocab::new(4, false).unwrap();
        assert!(matches!(SourceDistribution::mask(v), Err(AfmError::Config(_))));
    }

    #[test]
    fn uniform_source_frequencies() {
        let v = vocab(2);
        let src = SourceDistribution::uniform(v);
        let mut rng = from_seed(2);
        let n = 100_000;
        let ones = (0..n).filter(|_| src.sample(1, &mut rng).unwrap().0[0] == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
        let v3 = vocab(5);
        let src3 = SourceDistribution::uniform(v3);
        for _ in 0..1000 {
            assert!(!src3.sample(3, &mut rng).unwrap().contains_mask(&v3));
        }
    }

    #[test]
    fn conditional_path_boundaries() {
        let mut rng = from_seed(3);
        let x0 = Sequence::new(vec![4, 4, 4]);
        let x1 = Sequence::new(vec![0, 1, 2]);
        for s in [Scheduler::Linear, Scheduler::Quadratic] {
            assert_eq!(sample_conditional_path(&x0, &x1, 0.0, s, &mut rng).unwrap(), x0);
            assert_eq!(sample_conditional_path(&x0, &x1, 1.0, s, &mut rng).unwrap(), x1);
        }
        let short = Sequence::new(vec![0]);
        assert!(matches!(
            sample_conditional_path(&x0, &short, 0.5, Scheduler::Linear, &mut rng),
            Err(AfmError::Shape { .. })
        ));
    }

    #[test]
    fn conditional_path_bernoulli_frequency() {
        let mut rng = from_seed(4);
        let x0 = Sequence::new(vec![2]);
        let x1 = Sequence::new(vec![0]);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                sample_conditional_path(&x0, &x1, 0.25, Scheduler::Linear, &mut rng).unwrap().0[0] == 0
            })
            .count();
        assert!((hits as f64 / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn conditional_path_prob_examples() {
        let x0 = Sequence::new(vec![2]);
        let x1 = Sequence::new(vec![0]);
        let p = conditional_path_prob(&x0, &x0, &x1, 0.5, Scheduler::Quadratic).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        let x = Sequence::new(vec![1, 0]);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(conditional_path_prob(&x, &x, &x, t, Scheduler::Linear).unwrap(), 1.0);
        }
        let off = Sequence::new(vec![1]);
        assert_eq!(conditional_path_prob(&off, &x0, &x1, 0.5, Scheduler::Linear).unwrap(), 0.0);
    }

    #[test]
    fn sequence_index_round_trip() {
        let s = Sequence::new(vec![2, 0, 1]);
        assert_eq!(Sequence::from_index(s.index(3), 3, 3), s);
        assert_eq!(Sequence::parse_dashed("2-0-1").unwrap(), s);
        assert_eq!(s.to_dashed(), "2-0-1");
    }
}
