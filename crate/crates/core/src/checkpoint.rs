//! Flat binary checkpoints.
//!
//! Layout (all little-endian): 4-byte magic `AFMK`, then u32 fields version,
//! kind, L, |V|, feature dim, followed by the parameters as f64 in row-major
//! order. The low byte of `kind` names the model; higher bits carry flags.
//!
//! | model    | feature dim          | payload                         |
//! |----------|----------------------|---------------------------------|
//! | softmax  | L·slots + 3          | (L·|V|) × feature dim weights   |
//! | tabular  | slots^L contexts     | contexts × L × |V| (NaN = unset) |
//! | cpe      | L·|V| + 1            | weights then bias               |

use std::fs;
use std::path::Path;

use crate::cpe::ClassProbabilityEstimator;
use crate::denoiser::{SoftmaxDenoiser, TabularDenoiser};
use crate::error::{AfmError, Result};
use crate::flow_path::{Scheduler, Sequence, Vocab};

pub const MAGIC: &[u8; 4] = b"AFMK";
pub const VERSION: u32 = 1;

const KIND_SOFTMAX: u32 = 1;
const KIND_TABULAR: u32 = 2;
const KIND_CPE: u32 = 3;
const FLAG_QUADRATIC: u32 = 1 << 8;
const FLAG_CARRY: u32 = 1 << 9;
const FLAG_MASK: u32 = 1 << 10;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Softmax(SoftmaxDenoiser),
    Tabular(TabularDenoiser),
    Cpe(ClassProbabilityEstimator),
}

fn header(kind: u32, len: usize, vocab: usize, feat: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for field in [VERSION, kind, len as u32, vocab as u32, feat as u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out
}

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        use crate::denoiser::Denoiser;
        match self {
            Checkpoint::Softmax(d) => {
                let vocab = d.vocab();
                let mut kind = KIND_SOFTMAX;
                if d.scheduler() == Scheduler::Quadratic {
                    kind |= FLAG_QUADRATIC;
                }
                if d.carry_unmasked() {
                    kind |= FLAG_CARRY;
                }
                if vocab.has_mask() {
                    kind |= FLAG_MASK;
                }
                let mut out = header(kind, d.seq_len(), vocab.size(), d.feature_dim());
                push_f64s(&mut out, d.params().iter().copied());
                out
            }
            Checkpoint::Tabular(d) => {
                let vocab = d.vocab();
                let kind = KIND_TABULAR | if vocab.has_mask() { FLAG_MASK } else { 0 };
                let contexts = d.context_space();
                let width = d.seq_len() * vocab.size();
                let mut out = header(kind, d.seq_len(), vocab.size(), contexts);
                for idx in 0..contexts {
                    let ctx = Sequence::from_index(idx, vocab.slots(), d.seq_len());
                    match d.rows(&ctx) {
                        Some(rows) => push_f64s(&mut out, rows.iter().copied()),
                        None => push_f64s(&mut out, std::iter::repeat_n(f64::NAN, width)),
                    }
                }
                out
            }
            Checkpoint::Cpe(m) => {
                let mut out = header(KIND_CPE, m.len(), m.vocab_size(), m.param_count());
                push_f64s(&mut out, m.weights().iter().copied().chain(std::iter::once(m.bias())));
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(AfmError::Checkpoint("missing magic header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, kind, len, vocab_size, feat) =
            (field(0), field(1), field(2) as usize, field(3) as usize, field(4) as usize);
        if version != VERSION {
            return Err(AfmError::Checkpoint(format!("unsupported version {version}")));
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() % 8 != 0 {
            return Err(AfmError::Checkpoint("payload is not a whole number of f64".into()));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let has_mask = kind & FLAG_MASK != 0;
        let expect = |n: usize| {
            if values.len() == n {
                Ok(())
            } else {
                Err(AfmError::Checkpoint(format!("expected {n} parameters, found {}", values.len())))
            }
        };
        match kind & 0xff {
            KIND_SOFTMAX => {
                let vocab = Vocab::new(vocab_size, has_mask)?;
                if feat != len * vocab.slots() + 3 {
                    return Err(AfmError::Checkpoint(format!("feature dim {feat} inconsistent with header")));
                }
                expect(len * vocab_size * feat)?;
                let scheduler = if kind & FLAG_QUADRATIC != 0 { Scheduler::Quadratic } else { Scheduler::Linear };
                Ok(Checkpoint::Softmax(SoftmaxDenoiser::from_weights(
                    vocab,
                    len,
                    scheduler,
                    kind & FLAG_CARRY != 0,
                    values,
                )?))
            }
            KIND_TABULAR => {
                let vocab = Vocab::new(vocab_size, has_mask)?;
                let mut d = TabularDenoiser::new(vocab, len)?;
                if feat != d.context_space() {
                    return Err(AfmError::Checkpoint(format!("context count {feat} inconsistent with header")));
                }
                let width = len * vocab_size;
                expect(feat * width)?;
                for (idx, rows) in values.chunks(width).enumerate() {
                    if rows.iter().any(|p| p.is_nan()) {
                        continue;
                    }
                    d.set_rows(&Sequence::from_index(idx, vocab.slots(), len), rows.to_vec())?;
                }
                Ok(Checkpoint::Tabular(d))
            }
            KIND_CPE => {
                if feat != len * vocab_size + 1 {
                    return Err(AfmError::Checkpoint(format!("feature dim {feat} inconsistent with header")));
                }
                expect(feat)?;
                let bias = values[feat - 1];
                let weights = values[..feat - 1].to_vec();
                Ok(Checkpoint::Cpe(ClassProbabilityEstimator::from_parts(len, vocab_size, weights, bias)?))
            }
            other => Err(AfmError::Checkpoint(format!("unknown model kind {other}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
