//! Procedurally generated motif landscapes with a certified global optimum.
//!
//! Motifs sit in disjoint windows, so all of them can be satisfied at once.
//! A motif scores by the length of its matched prefix (elements must be met in
//! order), quantised to `quantization` levels; the landscape averages motif
//! scores. Sequences containing a banned adjacent pair, or a mask token, are
//! infeasible and score −1.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::flow_path::{uniform_sequence, Sequence, Token, Vocab};
use crate::rng::{from_seed, Rng};

pub const INVALID_SCORE: f64 = -1.0;

/// Construction parameters; deterministic in `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeParams {
    pub len: usize,
    pub vocab_size: usize,
    pub motif_count: usize,
    pub motif_length: usize,
    pub quantization: usize,
    pub banned_per_token: usize,
    pub seed: u64,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        Self { len: 12, vocab_size: 8, motif_count: 3, motif_length: 4, quantization: 4, banned_per_token: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Motif {
    /// Absolute positions, strictly increasing, inside one window.
    pub positions: Vec<usize>,
    pub tokens: Vec<Token>,
}

impl Motif {
    /// Number of leading elements matched in order.
    pub fn matched_prefix(&self, x: &Sequence) -> usize {
        self.positions.iter().zip(&self.tokens).take_while(|(&p, &t)| x.0[p] == t).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifLandscape {
    pub params: LandscapeParams,
    pub motifs: Vec<Motif>,
    /// banned[a] lists tokens that may not directly follow `a`.
    pub banned: Vec<Vec<Token>>,
    pub optimum: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Sequence,
    pub y: f64,
}

pub fn make_landscape(params: &LandscapeParams) -> Result<MotifLandscape> {
    let LandscapeParams { len, vocab_size, motif_count, motif_length, quantization, banned_per_token, seed } =
        *params;
    if len == 0 || vocab_size < 2 {
        return Err(AfmError::Landscape("need len >= 1 and vocab_size >= 2".into()));
    }
    if motif_count > 0 && (motif_length == 0 || quantization == 0) {
        return Err(AfmError::Landscape("motif length and quantization must be >= 1".into()));
    }
    if banned_per_token >= vocab_size {
        return Err(AfmError::Landscape("banned_per_token must be < vocab_size".into()));
    }
    let window = if motif_count == 0 { len } else { len / motif_count };
    if motif_count > 0 && motif_length > window {
        return Err(AfmError::Landscape(format!(
            "{motif_count} motifs of length {motif_length} do not fit into {len} positions"
        )));
    }
    let mut rng = from_seed(seed);
    let mut optimum = uniform_sequence(&Vocab::new(vocab_size, false)?, len, &mut rng);
    let mut motifs = Vec::with_capacity(motif_count);
    for c in 0..motif_count {
        let mut offsets: Vec<usize> = (1..window).collect();
        offsets.shuffle(&mut rng);
        let mut chosen: Vec<usize> = std::iter::once(0).chain(offsets.into_iter().take(motif_length - 1)).collect();
        chosen.sort_unstable();
        let positions: Vec<usize> = chosen.iter().map(|o| c * window + o).collect();
        let tokens: Vec<Token> = (0..motif_length).map(|_| rng.random_range(0..vocab_size) as Token).collect();
        for (&p, &t) in positions.iter().zip(&tokens) {
            optimum.0[p] = t;
        }
        motifs.push(Motif { positions, tokens });
    }
    let used: HashSet<(Token, Token)> = optimum.0.windows(2).map(|w| (w[0], w[1])).collect();
    let banned = (0..vocab_size as Token)
        .map(|a| {
            let mut candidates: Vec<Token> =
                (0..vocab_size as Token).filter(|&b| b != a && !used.contains(&(a, b))).collect();
            candidates.shuffle(&mut rng);
            candidates.truncate(banned_per_token);
            candidates.sort_unstable();
            candidates
        })
        .collect();
    let landscape = MotifLandscape { params: params.clone(), motifs, banned, optimum };
    let best = landscape.evaluate(&landscape.optimum)?;
    if best != 1.0 {
        return Err(AfmError::Landscape(format!("optimum certification failed: f(x*) = {best}")));
    }
    Ok(landscape)
}

impl MotifLandscape {
    pub fn len(&self) -> usize {
        self.params.len
    }

    pub fn is_empty(&self) -> bool {
        self.params.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    pub fn optimum_value(&self) -> f64 {
        1.0
    }

    pub fn is_feasible(&self, x: &Sequence) -> bool {
        let v = self.params.vocab_size;
        x.0.iter().all(|&t| (t as usize) < v) && x.0.windows(2).all(|w| !self.banned[w[0] as usize].contains(&w[1]))
    }

    /// Score in {−1} ∪ [0, 1].
    pub fn evaluate(&self, x: &Sequence) -> Result<f64> {
        if x.len() != self.params.len {
            return Err(AfmError::shape(self.params.len, x.len()));
        }
        if !self.is_feasible(x) {
            return Ok(INVALID_SCORE);
        }
        if self.motifs.is_empty() {
            return Ok(1.0);
        }
        let q = self.params.quantization;
        let total: f64 = self
            .motifs
            .iter()
            .map(|m| ((q * m.matched_prefix(x)) / m.tokens.len()) as f64 / q as f64)
            .sum();
        Ok(total / self.motifs.len() as f64)
    }

    /// y = f(x) + ε with ε ~ N(0, σ²).
    pub fn observe(&self, x: &Sequence, sigma: f64, rng: &mut Rng) -> Result<Observation> {
        if !(sigma >= 0.0) {
            return Err(AfmError::Config(format!("noise sd must be >= 0, got {sigma}")));
        }
        let f = self.evaluate(x)?;
        let y = if sigma == 0.0 { f } else { f + Normal::new(0.0, sigma).expect("finite sd").sample(rng) };
        Ok(Observation { x: x.clone(), y })
    }

    /// One uniform draw from the feasible sequences for which `excluded` is
    /// false, by rejection; `None` when `max_attempts` runs out.
    pub fn sample_valid(
        &self,
        excluded: impl Fn(&Sequence) -> bool,
        max_attempts: usize,
        rng: &mut Rng,
    ) -> Option<Sequence> {
        let vocab = Vocab::new(self.params.vocab_size, false).expect("validated at construction");
        (0..max_attempts)
            .map(|_| uniform_sequence(&vocab, self.params.len, rng))
            .find(|x| self.is_feasible(x) && !excluded(x))
    }

    /// `n` distinct feasible sequences; errors after 100·n rejection attempts.
    pub fn valid_pool(&self, n: usize, rng: &mut Rng) -> Result<Vec<Sequence>> {
        let vocab = Vocab::new(self.params.vocab_size, false)?;
        let mut seen = HashSet::with_capacity(n);
        let mut pool = Vec::with_capacity(n);
        let cap = 100 * n;
        let mut attempts = 0;
        while pool.len() < n {
            if attempts >= cap {
                return Err(AfmError::Exhausted(format!("found {} of {n} valid sequences in {cap} attempts", pool.len())));
            }
            attempts += 1;
            let x = uniform_sequence(&vocab, self.params.len, rng);
            if self.is_feasible(&x) && seen.insert(x.clone()) {
                pool.push(x);
            }
        }
        Ok(pool)
    }

    /// All feasible sequences, when |V|^L is at most `limit`.
    pub fn enumerate_valid(&self, limit: usize) -> Option<Vec<Sequence>> {
        let v = self.params.vocab_size;
        let total = (0..self.params.len).try_fold(1usize, |acc, _| acc.checked_mul(v))?;
        if total > limit {
            return None;
        }
        Some((0..total).map(|i| Sequence::from_index(i, v, self.params.len)).filter(|x| self.is_feasible(x)).collect())
    }
}
