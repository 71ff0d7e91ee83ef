use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use super::config::RunConfig;
use super::metrics::{metrics, RoundRecord, RoundWriter, Summary};
use crate::checkpoint::Checkpoint;
use crate::cpe::{cpe_fit, ClassProbabilityEstimator};
use crate::denoiser::{train_step, Denoiser, SoftmaxDenoiser};
use crate::dynamics::{sample_flow, SamplerConfig};
use crate::error::{AfmError, Result};
use crate::flow_path::{Sequence, SourceDistribution, SourceKind, Vocab};
use crate::landscape::{make_landscape, MotifLandscape};
use crate::objectives::{afm_round, build_train_batch, RoundEnv, RoundState, StepLog};
use crate::proposal::{Component, ReplayBuffer, WeightedSample};
use crate::rng::{stream, Rng};

/// Largest space the fallback enumerates when rejection sampling stalls.
const ENUMERATION_LIMIT: usize = 1 << 20;

/// Unweighted cross-entropy training over uniformly drawn minibatches of
/// `pool`. Returns the per-step losses.
pub fn pretrain(
    model: &mut SoftmaxDenoiser,
    pool: &[Sequence],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    source: &SourceDistribution,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() || batch_size == 0 {
        return Err(AfmError::Domain("pretraining needs a non-empty pool and batch".into()));
    }
    let scheduler = model.scheduler();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let samples: Vec<WeightedSample> = (0..batch_size)
            .map(|_| WeightedSample {
                x1: pool[rng.random_range(0..pool.len())].clone(),
                component: Component::Prior,
                weight: 1.0,
            })
            .collect();
        let batch = build_train_batch(&samples, source, scheduler, rng)?;
        losses.push(train_step(model, &batch, learning_rate)?);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub batch: Vec<Sequence>,
    /// How many entries came from the uniform fallback.
    pub fallback: usize,
}

/// Draws `b` sequences from the flow, rejecting repeats within the batch and
/// against `seen`, for at most 20·b draws; the remainder is filled with
/// unseen uniform valid sequences.
pub fn propose_batch(
    phi: &dyn Denoiser,
    b: usize,
    seen: &HashSet<Sequence>,
    source: &SourceDistribution,
    sampler: &SamplerConfig,
    landscape: &MotifLandscape,
    rng: &mut Rng,
) -> Result<Proposal> {
    if b == 0 {
        return Err(AfmError::Config("batch size must be >= 1".into()));
    }
    let mut taken: HashSet<Sequence> = HashSet::with_capacity(b);
    let mut batch = Vec::with_capacity(b);
    for _ in 0..20 * b {
        if batch.len() == b {
            break;
        }
        let x = sample_flow(phi, source, sampler, rng)?;
        if !seen.contains(&x) && taken.insert(x.clone()) {
            batch.push(x);
        }
    }
    let fallback = b - batch.len();
    if fallback > 0 {
        log::info!("proposal: {fallback} of {b} slots filled uniformly after duplicate rejections");
        fill_uniform(&mut batch, &mut taken, b, seen, landscape, rng)?;
    }
    Ok(Proposal { batch, fallback })
}

/// Appends unseen feasible sequences until `batch` has `b` entries.
fn fill_uniform(
    batch: &mut Vec<Sequence>,
    taken: &mut HashSet<Sequence>,
    b: usize,
    seen: &HashSet<Sequence>,
    landscape: &MotifLandscape,
    rng: &mut Rng,
) -> Result<()> {
    let attempts = 100 * b;
    while batch.len() < b {
        let x = landscape
            .sample_valid(|x| seen.contains(x) || taken.contains(x), attempts, rng)
            .or_else(|| {
                let all = landscape.enumerate_valid(ENUMERATION_LIMIT)?;
                let fresh: Vec<Sequence> = all.into_iter().filter(|x| !seen.contains(x) && !taken.contains(x)).collect();
                (!fresh.is_empty()).then(|| fresh[rng.random_range(0..fresh.len())].clone())
            });
        match x {
            Some(x) => {
                taken.insert(x.clone());
                batch.push(x);
            }
            None => {
                return Err(AfmError::Exhausted(format!(
                    "no unseen valid sequence left after {} proposals",
                    batch.len()
                )))
            }
        }
    }
    Ok(())
}

/// Scores sequences against the landscape and counts oracle calls.
struct Oracle<'a> {
    landscape: &'a MotifLandscape,
    noise_sd: f64,
    rng: Rng,
    calls: usize,
}

impl Oracle<'_> {
    fn observe(&mut self, x: &Sequence) -> Result<(f64, f64)> {
        self.calls += 1;
        let f = self.landscape.evaluate(x)?;
        let y = self.landscape.observe(x, self.noise_sd, &mut self.rng)?.y;
        Ok((y, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Afm,
    Random,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: Option<Summary>,
    pub oracle_calls: usize,
    pub dataset: Vec<(Sequence, f64)>,
    pub landscape: MotifLandscape,
    pub phi: Option<SoftmaxDenoiser>,
    pub pretrain_losses: Vec<f64>,
}

/// Active generation with AFM fine-tuning.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    run_loop(config, Strategy::Afm)
}

/// The same loop with uniformly drawn valid batches.
pub fn baseline_random(config: &RunConfig) -> Result<RunOutput> {
    run_loop(config, Strategy::Random)
}

fn model_source(config: &RunConfig) -> Result<SourceDistribution> {
    let v = config.landscape.vocab_size;
    match config.model.source {
        SourceKind::Mask => SourceDistribution::mask(Vocab::with_mask(v)?),
        SourceKind::Uniform => Ok(SourceDistribution::uniform(Vocab::new(v, false)?)),
    }
}

pub fn run_loop(config: &RunConfig, strategy: Strategy) -> Result<RunOutput> {
    config.validate()?;
    let landscape = make_landscape(&config.landscape)?;
    let (len, v) = (landscape.len(), landscape.vocab_size());
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    }
    let mut writer = out_dir.map(RoundWriter::create).transpose()?;
    let mut step_writer = match (out_dir, config.step_log && strategy == Strategy::Afm) {
        (Some(dir), true) => Some(StepWriter::create(dir)?),
        _ => None,
    };

    let seed = config.seed;
    let mut oracle = Oracle { landscape: &landscape, noise_sd: config.noise_sd, rng: stream(seed, "oracle-noise"), calls: 0 };
    let initial = landscape.valid_pool(config.initial_size, &mut stream(seed, "initial-data"))?;
    let mut dataset = Vec::with_capacity(config.budget());
    let mut seen: HashSet<Sequence> = HashSet::with_capacity(config.budget());
    for x in initial {
        let (y, _) = oracle.observe(&x)?;
        seen.insert(x.clone());
        dataset.push((x, y));
    }

    let source = model_source(config)?;
    let mut phi = None;
    let mut pretrain_losses = Vec::new();
    if strategy == Strategy::Afm {
        let mut rng = stream(seed, "pretrain");
        let mut model =
            SoftmaxDenoiser::zeros(*source.vocab(), len, config.sampler.scheduler, config.model.carry_unmasked);
        if config.model.init_scale > 0.0 {
            model.randomize(&mut rng, config.model.init_scale);
        }
        let p = &config.pretrain;
        if p.steps > 0 {
            let pool = landscape.valid_pool(p.pool_size, &mut rng)?;
            pretrain_losses = pretrain(&mut model, &pool, p.steps, p.learning_rate, p.batch_size, &source, &mut rng)?;
        }
        phi = Some(model);
    }

    let mut buffer = ReplayBuffer::new(config.buffer.capacity, config.buffer.gamma)?;
    let mut pending: Vec<(Sequence, f64)> = dataset.clone();
    let mut cpe: Option<ClassProbabilityEstimator> = None;
    let mut records = Vec::with_capacity(config.rounds);
    let (mut best_y, mut best_f) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mixture = &config.mixture;

    for round in 1..=config.rounds {
        let started = Instant::now();
        let ys: Vec<f64> = dataset.iter().map(|(_, y)| *y).collect();
        let tau = config.threshold.threshold(round, &ys)?;
        let mut propose_rng = stream(seed, &format!("round-{round}-propose"));
        let (batch, fallback, ess_mean) = match strategy {
            Strategy::Random => {
                let mut batch = Vec::with_capacity(config.batch_size);
                let mut taken = HashSet::new();
                fill_uniform(&mut batch, &mut taken, config.batch_size, &seen, &landscape, &mut propose_rng)?;
                (batch, 0, f64::NAN)
            }
            Strategy::Afm => {
                for (x, y) in pending.drain(..) {
                    if y >= tau {
                        buffer.insert(x, y);
                    }
                }
                let model = cpe_fit(&dataset, len, v, tau, config.cpe.epochs, config.cpe.learning_rate)?.model;
                let current = phi.take().expect("afm strategy holds a model");
                let mut sampler = config.sampler.to_sampler();
                if let Some(budget) = config.sampler.mutation_budget {
                    sampler = sampler.with_budget(budget, incumbent(&dataset).clone());
                }
                let state = RoundState {
                    round,
                    dataset: dataset.clone(),
                    tau,
                    theta: current.clone(),
                    phi: current,
                    buffer: buffer.clone(),
                    cpe: model,
                };
                let env = RoundEnv { source: &source, sampler: &sampler, mixture, batch_size: config.batch_size };
                let mut train_rng = stream(seed, &format!("round-{round}-train"));
                let outcome = afm_round(&state, &config.afm, &env, &mut train_rng)?;
                if let Some(w) = step_writer.as_mut() {
                    w.write(round, &outcome.log)?;
                }
                let ess = outcome.mean_ess();
                let proposal =
                    propose_batch(&outcome.phi, config.batch_size, &seen, &source, &sampler, &landscape, &mut propose_rng)?;
                phi = Some(outcome.phi);
                cpe = Some(state.cpe);
                (proposal.batch, proposal.fallback, ess)
            }
        };
        let mut scored = Vec::with_capacity(batch.len());
        for x in batch {
            let (y, f) = oracle.observe(&x)?;
            best_y = best_y.max(y);
            best_f = best_f.max(f);
            seen.insert(x.clone());
            dataset.push((x.clone(), y));
            pending.push((x.clone(), y));
            scored.push((x, y));
        }
        let record = RoundRecord {
            round,
            tau,
            batch: scored,
            best_y,
            best_f,
            regret: landscape.optimum_value() - best_f,
            ess_mean,
            fallback,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: tau {:.4} best_y {:.4} regret {:.4} ess {:.1} ({:.1}s)",
            record.tau,
            record.best_y,
            record.regret,
            record.ess_mean,
            record.seconds
        );
        if let Some(w) = writer.as_mut() {
            w.write(&record)?;
        }
        records.push(record);
    }

    if let Some(dir) = out_dir {
        if let Some(model) = &phi {
            Checkpoint::Softmax(model.clone()).save(dir.join("phi.afmk"))?;
        }
        if let Some(model) = &cpe {
            Checkpoint::Cpe(model.clone()).save(dir.join("cpe.afmk"))?;
        }
        if strategy == Strategy::Afm && !buffer.is_empty() {
            buffer.write_csv(dir.join("buffer.csv"))?;
        }
    }
    let summary = if records.is_empty() { None } else { Some(metrics(&records)?) };
    if let (Some(dir), Some(s)) = (out_dir, &summary) {
        let mut f = fs::File::create(dir.join("summary.csv"))?;
        writeln!(f, "final_regret,final_best_y,rounds_to_optimum")?;
        let rto = s.rounds_to_optimum.map(|r| r.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{}", s.final_regret, s.final_best_y, rto)?;
    }
    Ok(RunOutput {
        records,
        summary,
        oracle_calls: oracle.calls,
        dataset,
        landscape: landscape.clone(),
        phi,
        pretrain_losses,
    })
}

/// Highest-y observation so far; first one wins ties.
fn incumbent(dataset: &[(Sequence, f64)]) -> &Sequence {
    let mut best = &dataset[0];
    for entry in dataset {
        if entry.1 > best.1 {
            best = entry;
        }
    }
    &best.0
}

struct StepWriter(csv::Writer<fs::File>);

impl StepWriter {
    fn create(dir: &Path) -> Result<Self> {
        let mut w = csv::Writer::from_path(dir.join("steps.csv"))?;
        w.write_record(["round", "step", "component", "loss", "ess"])?;
        Ok(Self(w))
    }

    fn write(&mut self, round: usize, log: &[StepLog]) -> Result<()> {
        for s in log {
            self.0.write_record([
                round.to_string(),
                s.step.to_string(),
                s.component.as_str().to_string(),
                s.loss.to_string(),
                s.ess.to_string(),
            ])?;
        }
        self.0.flush()?;
        Ok(())
    }
}
