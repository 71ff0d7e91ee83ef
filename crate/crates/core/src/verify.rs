//! Self-checks on tiny, exactly enumerable instances, as run by `afm verify`.
//!
//! Every check compares library output with an exact reference (enumeration,
//! closed form or finite differences) and reports pass/fail with a detail line.

use std::time::Instant;

use rand::Rng as _;

use crate::cpe::ClassProbabilityEstimator;
use crate::denoiser::{fit_tabular_exact, weighted_ce_loss, Denoiser, Posterior, SoftmaxDenoiser, TrainBatch};
use crate::dynamics::{euler_kernels, generate, generate_constrained, velocity, SamplerConfig};
use crate::error::Result;
use crate::flow_path::{conditional_path_prob, sample_conditional_path, uniform_sequence, Scheduler, Sequence, SourceDistribution, Vocab};
use crate::objectives::fwd_kl_loss;
use crate::oracle::{enumerate_terminal, snis_reference, target_distribution, total_variation, DistributionTable};
use crate::proposal::{draw_batch, importance_weight, snis_normalise, Component, MixtureCoefficients, ProposalContext, ReplayBuffer, WeightedSample};
use crate::rng::{stream, Rng};

const SEED: u64 = 20_240_601;
pub const MC_DRAWS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name, pass, detail, seconds: start.elapsed().as_secs_f64() }
}

/// All checks in a fixed order.
pub fn run_all() -> Vec<Check> {
    vec![
        timed("path-velocity-kernels", path_velocity_kernels),
        timed("oracle-agreement", oracle_agreement),
        timed("target-recovery", target_recovery),
        timed("snis-consistency", snis_consistency),
        timed("weight-simplifications", weight_simplifications),
        timed("gradients", gradients),
        timed("fwd-kl-identity", fwd_kl_identity),
        timed("mutation-budget", mutation_budget),
    ]
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{:<width$}  {}  {:>7.2}s  {}\n",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        ));
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    out.push_str(&format!("{passed}/{} checks passed\n", checks.len()));
    out
}

/// The tiny-instance matrix: (L, |V|, steps, scheduler).
pub fn tiny_matrix() -> Vec<(usize, usize, usize, Scheduler)> {
    let mut m = Vec::new();
    for len in [1, 2] {
        for v in [2, 3] {
            for steps in [2, 4] {
                for s in [Scheduler::Linear, Scheduler::Quadratic] {
                    m.push((len, v, steps, s));
                }
            }
        }
    }
    m
}

fn random_posterior(len: usize, v: usize, rng: &mut Rng) -> Posterior {
    let mut p = Vec::with_capacity(len * v);
    for _ in 0..len {
        let row: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        p.extend(row.iter().map(|x| x / s));
    }
    Posterior::new(len, v, p).expect("valid rows")
}

fn path_velocity_kernels() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-kernels");
    let mut boundary_ok = true;
    let mut max_row = 0.0f64;
    let mut max_kernel = 0.0f64;
    for (len, v, steps, sched) in tiny_matrix() {
        let vocab = Vocab::with_mask(v)?;
        for _ in 0..50 {
            let x0 = uniform_sequence(&vocab, len, &mut rng);
            let x1 = uniform_sequence(&vocab, len, &mut rng);
            boundary_ok &= sample_conditional_path(&x0, &x1, 0.0, sched, &mut rng)? == x0;
            boundary_ok &= sample_conditional_path(&x0, &x1, 1.0, sched, &mut rng)? == x1;
            let x_t = Sequence((0..len).map(|_| rng.random_range(0..vocab.slots()) as u16).collect());
            let h = 1.0 / steps as f64;
            let t = rng.random_range(0..steps) as f64 * h;
            let rows = velocity(&random_posterior(len, v, &mut rng), &x_t, t, sched, &vocab)?;
            max_row = rows.iter().fold(max_row, |m, r| m.max(r.sum().abs()));
            for k in euler_kernels(&rows, h)? {
                max_kernel = max_kernel.max((k.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    // Path sampler against the path density.
    let mut max_tv = 0.0f64;
    let vocab = Vocab::with_mask(3)?;
    let x0 = Sequence::filled(3, 2);
    let x1 = Sequence::new(vec![0, 2]);
    for sched in [Scheduler::Linear, Scheduler::Quadratic] {
        for t in [0.25, 0.5, 0.8] {
            let draws: Vec<Sequence> =
                (0..MC_DRAWS).map(|_| sample_conditional_path(&x0, &x1, t, sched, &mut rng)).collect::<Result<_>>()?;
            let emp = DistributionTable::empirical(&draws, 2, vocab.slots())?;
            let probs = (0..16)
                .map(|i| conditional_path_prob(&Sequence::from_index(i, 4, 2), &x0, &x1, t, sched))
                .collect::<Result<Vec<_>>>()?;
            max_tv = max_tv.max(total_variation(&emp, &DistributionTable::from_probs(2, 4, probs)?)?);
        }
    }
    let pass = boundary_ok && max_row < 1e-10 && max_kernel < 1e-10 && max_tv < 0.01;
    Ok((pass, format!("boundaries {boundary_ok}, max |row sum| {max_row:.1e}, max kernel err {max_kernel:.1e}, path TV {max_tv:.4}")))
}

/// A randomly initialised softmax denoiser for the tiny matrix.
pub fn tiny_denoiser(len: usize, v: usize, sched: Scheduler, rng: &mut Rng) -> Result<SoftmaxDenoiser> {
    let mut d = SoftmaxDenoiser::zeros(Vocab::with_mask(v)?, len, sched, false);
    d.randomize(rng, 1.0);
    Ok(d)
}

fn oracle_agreement() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-oracle");
    let mut worst = 0.0f64;
    for (len, v, steps, sched) in tiny_matrix() {
        let d = tiny_denoiser(len, v, sched, &mut rng)?;
        let source = SourceDistribution::mask(d.vocab())?;
        let config = SamplerConfig::new(steps, sched);
        let exact = enumerate_terminal(&d, &source, sched, steps, true)?;
        let draws: Vec<Sequence> =
            (0..MC_DRAWS).map(|_| generate(&d, &source, &config, &mut rng)).collect::<Result<_>>()?;
        let tv = total_variation(&DistributionTable::empirical(&draws, len, v)?, &exact)?;
        worst = worst.max(tv);
    }
    Ok((worst < 0.02, format!("worst TV {worst:.4} over {} instances", tiny_matrix().len())))
}

/// Terminal TV between the exactly fitted flow and p* ∝ w.
pub fn target_recovery_tv(w: impl Fn(&Sequence) -> f64, v: usize, len: usize, steps: usize) -> Result<f64> {
    let (target, _) = target_distribution(&w, v, len)?;
    let vocab = Vocab::with_mask(v)?;
    let source = SourceDistribution::mask(vocab)?;
    let data: Vec<(Sequence, f64)> = target.iter().collect();
    let d = fit_tabular_exact(&data, vocab, len, &source)?;
    let q = enumerate_terminal(&d, &source, Scheduler::Linear, steps, true)?;
    total_variation(&q, &target)
}

fn target_recovery() -> Result<(bool, String)> {
    let tv1 = target_recovery_tv(|x| [0.9, 0.1][x.0[0] as usize], 2, 1, 32)?;
    let scores = [[0.8, 0.3], [0.25, 0.6]];
    let tv2 = target_recovery_tv(|x| scores[0][x.0[0] as usize] * scores[1][x.0[1] as usize], 2, 2, 32)?;
    Ok((tv1 < 0.01 && tv2 < 0.01, format!("TV {tv1:.2e} (L=1), {tv2:.2e} (L=2)")))
}

/// Skewed weight on 3^2 sequences used by the SNIS check.
pub fn snis_weight(x: &Sequence) -> f64 {
    (2.0 * x.0[0] as f64 - 0.5 * x.0[1] as f64).exp() / 100.0
}

fn snis_consistency() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-snis");
    let (target, _) = target_distribution(snis_weight, 3, 2)?;
    let optimum = target.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|(x, _)| x).expect("non-empty");
    let g = |x: &Sequence| if *x == optimum { 1.0 } else { 0.0 };
    let big = snis_reference(snis_weight, g, 3, 2, 10_000, 100, &mut rng)?;
    let within = (big.mean - big.exact).abs() <= 2.0 * big.std_error;
    let small = snis_reference(snis_weight, g, 3, 2, 2, 20_000, &mut rng)?;
    let large = snis_reference(snis_weight, g, 3, 2, 1000, 1000, &mut rng)?;
    let decreasing = large.bias().abs() < small.bias().abs();
    Ok((
        within && decreasing,
        format!(
            "K=1e4: |err| {:.2e} vs 2SE {:.2e}; |bias| K=2 {:.3e}, K=1e3 {:.3e}",
            (big.mean - big.exact).abs(),
            2.0 * big.std_error,
            small.bias().abs(),
            large.bias().abs()
        ),
    ))
}

fn weight_simplifications() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-weights");
    let (len, v) = (4, 3);
    let vocab = Vocab::with_mask(v)?;
    let source = SourceDistribution::mask(vocab)?;
    let mut cpe = ClassProbabilityEstimator::zeros(len, v);
    cpe.weights_mut().iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
    cpe.set_bias(0.3);
    let mut prior_exact = true;
    for _ in 0..1000 {
        let x = uniform_sequence(&vocab, len, &mut rng);
        let w = importance_weight(Component::Prior, &x, &cpe, None, &source, 1, &mut rng)?;
        prior_exact &= w.to_bits() == cpe.predict(&x)?.to_bits();
    }
    let mut buffer = ReplayBuffer::new(32, 0.3)?;
    for _ in 0..20 {
        let x = uniform_sequence(&vocab, len, &mut rng);
        let y = rng.random::<f64>();
        buffer.insert(x, y);
    }
    let sampler = SamplerConfig::new(4, Scheduler::Linear);
    let ctx = ProposalContext { buffer: &buffer, base: None, cpe: &cpe, source: &source, sampler: &sampler, len, mc_samples: 1 };
    let replay_only = MixtureCoefficients { prior: 0.0, flow: 0.0, replay: 1.0 };
    let mut replay_exact = true;
    for k in [2, 7, 100, 128] {
        let batch = draw_batch(&ctx, &replay_only, k, &mut rng)?;
        let raw: Vec<f64> = batch.iter().map(|s| s.weight).collect();
        replay_exact &= batch.iter().all(|s| s.component == Component::Replay);
        replay_exact &= snis_normalise(&raw)?.iter().all(|w| w.to_bits() == (1.0 / k as f64).to_bits());
    }
    Ok((prior_exact && replay_exact, format!("prior = cpe bit-exact {prior_exact}, replay = 1/K bit-exact {replay_exact}")))
}

/// Largest relative error of the analytic gradient over `coords` random
/// coordinates, against central differences with step 1e-5.
pub fn max_fd_error(
    params: &[f64],
    grad: &[f64],
    coords: usize,
    rng: &mut Rng,
    mut loss_at: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<f64> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let j = rng.random_range(0..params.len());
        let fd = (loss_at(j, params[j] + h)? - loss_at(j, params[j] - h)?) / (2.0 * h);
        let denom = fd.abs().max(grad[j].abs()).max(1e-6);
        worst = worst.max((fd - grad[j]).abs() / denom);
    }
    Ok(worst)
}

fn random_batch(d: &SoftmaxDenoiser, size: usize, rng: &mut Rng) -> Result<TrainBatch> {
    let vocab = d.vocab();
    let source = SourceDistribution::mask(vocab)?;
    let samples: Vec<WeightedSample> = (0..size)
        .map(|_| WeightedSample {
            x1: uniform_sequence(&vocab, d.seq_len(), rng),
            component: Component::Prior,
            weight: rng.random::<f64>() + 0.01,
        })
        .collect();
    let mut batch = crate::objectives::build_train_batch(&samples, &source, d.scheduler(), rng)?;
    // Spread times so the time features are exercised too.
    batch.times.iter_mut().for_each(|t| *t = rng.random::<f64>());
    Ok(batch)
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-gradients");
    let mut worst_softmax = 0.0f64;
    for _ in 0..5 {
        let d = tiny_denoiser(3, 4, Scheduler::Quadratic, &mut rng)?;
        let batch = random_batch(&d, 6, &mut rng)?;
        let (_, grad) = d.weighted_ce_loss_and_grad(&batch)?;
        let params = d.params().to_vec();
        let err = max_fd_error(&params, &grad, 20, &mut rng, |j, value| {
            let mut p = d.clone();
            p.params_mut()[j] = value;
            weighted_ce_loss(&p, &batch)
        })?;
        worst_softmax = worst_softmax.max(err);
    }
    let mut worst_cpe = 0.0f64;
    for _ in 0..5 {
        let (len, v) = (4, 3);
        let vocab = Vocab::new(v, false)?;
        let mut cpe = ClassProbabilityEstimator::zeros(len, v);
        cpe.weights_mut().iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let data: Vec<(Sequence, bool)> =
            (0..12).map(|_| (uniform_sequence(&vocab, len, &mut rng), rng.random::<bool>())).collect();
        let pos_weight = 1.7;
        let (_, grad) = cpe.loss_and_grad(&data, pos_weight)?;
        let mut params = cpe.weights().to_vec();
        params.push(cpe.bias());
        let n = cpe.weights().len();
        let err = max_fd_error(&params, &grad, 20, &mut rng, |j, value| {
            let mut c = cpe.clone();
            if j == n {
                c.set_bias(value);
            } else {
                c.weights_mut()[j] = value;
            }
            Ok(c.loss_and_grad(&data, pos_weight)?.0)
        })?;
        worst_cpe = worst_cpe.max(err);
    }
    Ok((worst_softmax < 1e-4 && worst_cpe < 1e-4, format!("max rel err softmax {worst_softmax:.1e}, cpe {worst_cpe:.1e}")))
}

fn fwd_kl_identity() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-fwd");
    let mut mismatches = 0;
    for _ in 0..100 {
        let d = tiny_denoiser(3, 4, Scheduler::Linear, &mut rng)?;
        let source = SourceDistribution::mask(d.vocab())?;
        let samples: Vec<WeightedSample> = (0..8)
            .map(|_| WeightedSample {
                x1: uniform_sequence(&d.vocab(), 3, &mut rng),
                component: Component::Prior,
                weight: rng.random::<f64>(),
            })
            .collect();
        let value = fwd_kl_loss(&d, &samples, &source, Scheduler::Linear, &mut rng)?;
        if value.loss.to_bits() != weighted_ce_loss(&d, &value.batch)?.to_bits() {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of 100 batches differ")))
}

fn mutation_budget() -> Result<(bool, String)> {
    let mut rng = stream(SEED, "verify-budget");
    let d = tiny_denoiser(6, 4, Scheduler::Linear, &mut rng)?;
    let reference = uniform_sequence(&d.vocab(), 6, &mut rng);
    let mut worst = 0;
    let mut violations = 0;
    for budget in 0..=3 {
        let config = SamplerConfig::new(8, Scheduler::Linear).with_budget(budget, reference.clone());
        for _ in 0..MC_DRAWS {
            let edits = generate_constrained(&d, &config, &mut rng)?.hamming(&reference);
            worst = worst.max(edits);
            if edits > budget {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations in {} trials, max edits {worst}", 4 * MC_DRAWS)))
}
