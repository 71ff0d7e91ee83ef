use std::collections::HashMap;

use super::{check_state, Denoiser, Posterior};
use crate::error::{AfmError, Result};
use crate::flow_path::{Sequence, SourceDistribution, SourceKind, Vocab};

/// Upper bound on the number of contexts (|V|+1)^L a table may cover.
pub const MAX_TABULAR_CONTEXTS: usize = 10_000;

/// Exact lookup-table denoiser keyed by the full state x_t. Time is ignored:
/// under a mask source the exact posterior does not depend on t.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDenoiser {
    vocab: Vocab,
    len: usize,
    table: HashMap<Sequence, Vec<f64>>,
}

impl TabularDenoiser {
    pub fn new(vocab: Vocab, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(AfmError::Config("sequence length must be >= 1".into()));
        }
        let contexts = context_count(&vocab, len);
        if contexts > MAX_TABULAR_CONTEXTS {
            return Err(AfmError::Config(format!(
                "tabular context space {contexts} exceeds {MAX_TABULAR_CONTEXTS}"
            )));
        }
        Ok(Self { vocab, len, table: HashMap::new() })
    }

    /// Stores `rows` (L·|V| probabilities, row-major) for context `x_t`.
    pub fn set_rows(&mut self, x_t: &Sequence, rows: Vec<f64>) -> Result<()> {
        check_state(self, x_t)?;
        let v = self.vocab.size();
        if rows.len() != self.len * v {
            return Err(AfmError::shape(self.len * v, rows.len()));
        }
        for row in rows.chunks(v) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-10 {
                return Err(AfmError::Numerical(format!("row {row:?} is not a probability vector")));
            }
        }
        self.table.insert(x_t.clone(), rows);
        Ok(())
    }

    /// Stores one-hot rows at the tokens of `target`.
    pub fn set_one_hot(&mut self, x_t: &Sequence, target: &Sequence) -> Result<()> {
        let v = self.vocab.size();
        if target.len() != self.len {
            return Err(AfmError::shape(self.len, target.len()));
        }
        let mut rows = vec![0.0; self.len * v];
        for (i, &tok) in target.0.iter().enumerate() {
            if !self.vocab.is_data(tok) {
                return Err(AfmError::Domain("one-hot target must be a data token".into()));
            }
            rows[i * v + tok as usize] = 1.0;
        }
        self.set_rows(x_t, rows)
    }

    /// A table that predicts `target` one-hot from every context.
    pub fn constant(vocab: Vocab, target: &Sequence) -> Result<Self> {
        let mut d = Self::new(vocab, target.len())?;
        for idx in 0..context_count(&vocab, d.len) {
            let ctx = Sequence::from_index(idx, vocab.slots(), d.len);
            d.set_one_hot(&ctx, target)?;
        }
        Ok(d)
    }

    pub fn rows(&self, x_t: &Sequence) -> Option<&[f64]> {
        self.table.get(x_t).map(Vec::as_slice)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Sequence, &Vec<f64>)> {
        self.table.iter()
    }

    pub fn context_space(&self) -> usize {
        context_count(&self.vocab, self.len)
    }
}

fn context_count(vocab: &Vocab, len: usize) -> usize {
    let mut n: usize = 1;
    for _ in 0..len {
        n = n.saturating_mul(vocab.slots());
    }
    n
}

impl Denoiser for TabularDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn predict(&self, x_t: &Sequence, _t: f64) -> Result<Posterior> {
        check_state(self, x_t)?;
        match self.table.get(x_t) {
            Some(rows) => Posterior::new(self.len, self.vocab.size(), rows.clone()),
            None => {
                log::debug!("tabular denoiser: unseen context {x_t}, using uniform row");
                Ok(Posterior::uniform(self.len, self.vocab.size()))
            }
        }
    }
}

/// Fits the exact weighted-CE minimiser for mask-source convex paths: each row
/// is the conditional of the weighted empirical target law given agreement on
/// the unmasked positions of the context.
pub fn fit_tabular_exact(
    data: &[(Sequence, f64)],
    vocab: Vocab,
    len: usize,
    source: &SourceDistribution,
) -> Result<TabularDenoiser> {
    if source.kind() != SourceKind::Mask {
        return Err(AfmError::Config(
            "exact tabular fitting requires a mask source (posterior is time-dependent otherwise)".into(),
        ));
    }
    let mask = vocab
        .mask()
        .ok_or_else(|| AfmError::Config("exact tabular fitting requires a mask token".into()))?;
    if data.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(AfmError::Domain("weights must be finite and nonnegative".into()));
    }
    if !data.iter().any(|(_, w)| *w > 0.0) {
        return Err(AfmError::Domain("all weights are zero".into()));
    }
    let mut model = TabularDenoiser::new(vocab, len)?;
    let v = vocab.size();
    if len >= usize::BITS as usize {
        return Err(AfmError::Config("sequence too long for exact fitting".into()));
    }
    // Every context consistent with a target is that target with a subset of
    // positions masked, so accumulate unnormalised rows per (target, subset).
    let mut sums: HashMap<Sequence, Vec<f64>> = HashMap::new();
    for (x1, w) in data {
        if x1.len() != len {
            return Err(AfmError::shape(len, x1.len()));
        }
        if x1.0.iter().any(|&tok| !vocab.is_data(tok)) {
            return Err(AfmError::Domain("targets must contain only data tokens".into()));
        }
        if *w == 0.0 {
            continue;
        }
        for subset in 0u64..(1u64 << len) {
            let ctx: Vec<_> = x1
                .0
                .iter()
                .enumerate()
                .map(|(i, &tok)| if subset >> i & 1 == 1 { mask } else { tok })
                .collect();
            let acc = sums.entry(Sequence(ctx)).or_insert_with(|| vec![0.0; len * v]);
            for (i, &tok) in x1.0.iter().enumerate() {
                acc[i * v + tok as usize] += w;
            }
        }
    }
    for (ctx, mut rows) in sums {
        for row in rows.chunks_mut(v) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                log::warn!("context {ctx} has zero consistent mass; uniform row");
                row.iter_mut().for_each(|p| *p = 1.0 / v as f64);
            }
        }
        model.table.insert(ctx, rows);
    }
    Ok(model)
}
