use std::collections::HashSet;
use std::fs;

use afm_core::checkpoint::Checkpoint;
use afm_core::harness::{baseline_random, best_so_far, metrics, run, RunConfig};
use afm_core::objectives::Objective;
use afm_core::proposal::ReplayBuffer;

fn small(seed: u64) -> RunConfig {
    let mut c = RunConfig::from_toml_str(
        r#"
rounds = 4
batch_size = 12
initial_size = 24
noise_sd = 0.05

[pretrain]
pool_size = 128
steps = 60

[afm]
k_snis = 16
steps_per_round = 20

[buffer]
capacity = 32
"#,
    )
    .unwrap();
    c.seed = seed;
    c
}

#[test]
fn budget_dataset_and_regret_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(11);
    config.output_dir = Some(dir.path().to_path_buf());
    let out = run(&config).unwrap();
    let (n0, b) = (config.initial_size, config.batch_size);

    assert_eq!(out.oracle_calls, n0 + config.rounds * b);
    assert_eq!(out.dataset.len(), out.oracle_calls);
    let distinct: HashSet<_> = out.dataset.iter().map(|(x, _)| x.clone()).collect();
    assert_eq!(distinct.len(), out.dataset.len(), "every evaluated sequence is new");

    // D_r = D_{r-1} ∪ B_r, in order.
    for (r, rec) in out.records.iter().enumerate() {
        assert_eq!(rec.round, r + 1);
        assert_eq!(rec.batch.len(), b);
        let start = n0 + r * b;
        assert_eq!(&out.dataset[start..start + b], &rec.batch[..]);
    }

    // Regret from the noiseless objective of the best proposed sequence.
    let optimum = out.landscape.optimum_value();
    let batches: Vec<Vec<(f64, f64)>> = out
        .records
        .iter()
        .map(|r| r.batch.iter().map(|(x, y)| (*y, out.landscape.evaluate(x).unwrap())).collect())
        .collect();
    let reference = best_so_far(&batches, optimum);
    let mut best_f = f64::NEG_INFINITY;
    for (rec, (i_r, bf, reg)) in out.records.iter().zip(&reference) {
        for (x, _) in &rec.batch {
            best_f = best_f.max(out.landscape.evaluate(x).unwrap());
        }
        assert!((rec.regret - (optimum - best_f)).abs() < 1e-12);
        assert!((rec.regret - reg).abs() < 1e-12 && (rec.best_f - bf).abs() < 1e-12 && rec.best_y == *i_r);
    }
    for w in out.records.windows(2) {
        assert!(w[1].best_y >= w[0].best_y);
        assert!(w[1].regret <= w[0].regret);
    }
    let s = metrics(&out.records).unwrap();
    assert_eq!(s.final_regret, out.records.last().unwrap().regret);
    assert_eq!(Some(s), out.summary);

    // Buffer entries only ever enter above the threshold of their round.
    let min_tau = out.records.iter().map(|r| r.tau).fold(f64::INFINITY, f64::min);
    let buffer = ReplayBuffer::read_csv(dir.path().join("buffer.csv"), config.buffer.capacity, config.buffer.gamma).unwrap();
    assert!(!buffer.is_empty());
    assert!(buffer.entries().iter().all(|(_, y)| *y >= min_tau));

    // Artifacts.
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().next(), Some("round,tau,best_y,best_f,regret,ess_mean"));
    assert_eq!(rounds.lines().count(), config.rounds + 1);
    let batches_csv = fs::read_to_string(dir.path().join("batches.csv")).unwrap();
    assert_eq!(batches_csv.lines().count(), config.rounds * b + 1);
    let echoed = RunConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(echoed.seed, config.seed);
    assert_eq!(echoed.afm, config.afm);
    match Checkpoint::load(dir.path().join("phi.afmk")).unwrap() {
        Checkpoint::Softmax(phi) => assert_eq!(Some(phi), out.phi),
        other => panic!("unexpected checkpoint {other:?}"),
    }
    assert!(matches!(Checkpoint::load(dir.path().join("cpe.afmk")).unwrap(), Checkpoint::Cpe(_)));
}

#[test]
fn zero_rounds_scores_only_the_initial_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(2);
    config.rounds = 0;
    config.output_dir = Some(dir.path().to_path_buf());
    let out = run(&config).unwrap();
    assert!(out.records.is_empty());
    assert!(out.summary.is_none());
    assert_eq!(out.oracle_calls, config.initial_size);
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1);
}

#[test]
fn fixed_seed_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut config = small(5);
        config.output_dir = Some(dir.path().to_path_buf());
        run(&config).unwrap();
    }
    for file in ["rounds.csv", "batches.csv", "buffer.csv", "phi.afmk", "cpe.afmk"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let mut other = small(6);
    other.output_dir = None;
    let first = run(&small(5)).unwrap();
    let second = run(&other).unwrap();
    assert_ne!(first.dataset, second.dataset);
}

#[test]
fn reverse_and_symmetric_objectives_complete() {
    for objective in [Objective::Rev, Objective::Sym] {
        let mut config = small(3);
        config.afm.objective = objective;
        let out = run(&config).unwrap();
        assert_eq!(out.records.len(), config.rounds);
        assert!(out.records.windows(2).all(|w| w[1].regret <= w[0].regret));
        assert!(out.records.iter().all(|r| r.ess_mean >= 1.0 - 1e-9));
    }
}

#[test]
fn random_baseline_exhausts_a_tiny_space() {
    // 2 tokens, 3 positions, no banned pairs: 8 sequences, budget 8.
    let mut config = RunConfig::from_toml_str(
        r#"
rounds = 3
batch_size = 2
initial_size = 2

[landscape]
len = 3
vocab_size = 2
motif_count = 1
motif_length = 2
quantization = 2
banned_per_token = 0
seed = 4
"#,
    )
    .unwrap();
    config.seed = 9;
    let out = baseline_random(&config).unwrap();
    assert_eq!(out.oracle_calls, 8);
    assert_eq!(out.records.last().unwrap().regret, 0.0);
    assert!(out.records.iter().all(|r| r.ess_mean.is_nan()));
    let again = baseline_random(&config).unwrap();
    assert_eq!(out.dataset, again.dataset);
}
