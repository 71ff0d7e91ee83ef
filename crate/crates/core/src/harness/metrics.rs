use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{AfmError, Result};
use crate::flow_path::Sequence;

/// One completed round of the active generation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub tau: f64,
    pub batch: Vec<(Sequence, f64)>,
    /// I_r: best observed y over all proposed batches so far.
    pub best_y: f64,
    /// Best noiseless f over all proposed batches so far.
    pub best_f: f64,
    pub regret: f64,
    pub ess_mean: f64,
    /// Proposals filled in by the uniform fallback.
    pub fallback: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_regret: f64,
    pub final_best_y: f64,
    /// First round with zero regret.
    pub rounds_to_optimum: Option<usize>,
}

pub fn metrics(records: &[RoundRecord]) -> Result<Summary> {
    let last = records.last().ok_or_else(|| AfmError::Domain("no round records".into()))?;
    Ok(Summary {
        final_regret: last.regret,
        final_best_y: last.best_y,
        rounds_to_optimum: records.iter().find(|r| r.regret == 0.0).map(|r| r.round),
    })
}

/// Running best-so-far over rounds: (I_r, best f, regret) per round.
pub fn best_so_far(batches: &[Vec<(f64, f64)>], optimum: f64) -> Vec<(f64, f64, f64)> {
    let mut best_y = f64::NEG_INFINITY;
    let mut best_f = f64::NEG_INFINITY;
    batches
        .iter()
        .map(|b| {
            for &(y, f) in b {
                best_y = best_y.max(y);
                best_f = best_f.max(f);
            }
            (best_y, best_f, optimum - best_f)
        })
        .collect()
}

pub const ROUNDS_HEADER: [&str; 6] = ["round", "tau", "best_y", "best_f", "regret", "ess_mean"];

/// Incremental writers for rounds.csv, batches.csv and timing.csv; each row
/// is flushed so an aborted run keeps its completed rounds.
pub struct RoundWriter {
    rounds: csv::Writer<File>,
    batches: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl RoundWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut rounds = csv::Writer::from_path(dir.join("rounds.csv"))?;
        rounds.write_record(ROUNDS_HEADER)?;
        rounds.flush()?;
        let mut batches = csv::Writer::from_path(dir.join("batches.csv"))?;
        batches.write_record(["round", "sequence", "y"])?;
        batches.flush()?;
        let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
        timing.write_record(["round", "seconds", "fallback"])?;
        timing.flush()?;
        Ok(Self { rounds, batches, timing })
    }

    pub fn write(&mut self, r: &RoundRecord) -> Result<()> {
        self.rounds.write_record([
            r.round.to_string(),
            r.tau.to_string(),
            r.best_y.to_string(),
            r.best_f.to_string(),
            r.regret.to_string(),
            r.ess_mean.to_string(),
        ])?;
        self.rounds.flush()?;
        for (x, y) in &r.batch {
            self.batches.write_record([r.round.to_string(), x.to_dashed(), y.to_string()])?;
        }
        self.batches.flush()?;
        self.timing.write_record([r.round.to_string(), format!("{:.3}", r.seconds), r.fallback.to_string()])?;
        self.timing.flush()?;
        Ok(())
    }
}

/// A parsed rounds.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub round: usize,
    pub best_y: f64,
    pub regret: f64,
}

pub fn read_rounds(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ROUNDS_HEADER {
        return Err(AfmError::Domain(format!("{} is not a rounds.csv file", path.display())));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|e| AfmError::Domain(format!("bad number {s:?}: {e}")));
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(CurvePoint {
                round: rec[0].parse().map_err(|e| AfmError::Domain(format!("bad round {:?}: {e}", &rec[0])))?,
                best_y: parse(&rec[2])?,
                regret: parse(&rec[4])?,
            })
        })
        .collect()
}

/// Long-format regret curves (run, round, best_y, regret) for plotting.
pub fn write_plot_data(runs: &[(String, Vec<CurvePoint>)], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "round", "best_y", "regret"])?;
    for (name, points) in runs {
        for p in points {
            w.write_record([name.clone(), p.round.to_string(), p.best_y.to_string(), p.regret.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
