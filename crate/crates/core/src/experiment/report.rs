use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{write_file, RunRecord};
use super::{io_err, ExperimentConfig, ExperimentError, Result};

pub const METRICS_HEADER: &str =
    "experiment,seed,round,batch_size,defense,defense_param,lambda,iterations,stop_reason,psnr,ssim,mse,tv,fmse,alpha_final,variant";
pub const SWEEP_HEADER: &str = "defense,parameter,seed,model_accuracy,psnr,ssim,mse";
pub const SUMMARY_HEADER: &str =
    "experiment,round,batch_size,defense,defense_param,lambda,variant,runs,psnr_mean,psnr_std,ssim_mean,ssim_std,mse_mean,mse_std,tv_mean,fmse_mean";

/// One (cell, seed) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub seed: u64,
    pub round: usize,
    pub batch_size: usize,
    pub defense: String,
    pub defense_param: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub stop_reason: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub tv: f64,
    pub fmse: f64,
    pub alpha_final: f64,
    pub variant: String,
    /// Accuracy of the global model the client started from. Not part of
    /// `metrics.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_accuracy: Option<f64>,
}

/// 13 significant digits, enough to survive a decimal round trip of every
/// metric we report.
fn num(x: f64) -> String {
    format!("{x:.12e}")
}

impl MetricRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.seed,
            self.round,
            self.batch_size,
            self.defense,
            num(self.defense_param),
            num(self.lambda),
            self.iterations,
            self.stop_reason,
            num(self.psnr),
            num(self.ssim),
            num(self.mse),
            num(self.tv),
            num(self.fmse),
            num(self.alpha_final),
            self.variant
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| ExperimentError::Io(format!("metrics.csv line {lineno}: {what}"));
        if f.len() != 16 {
            return Err(bad(&format!("{} fields, expected 16", f.len())));
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(&format!("bad integer {:?}", f[i])));
        let real = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("bad number {:?}", f[i])));
        Ok(Self {
            experiment: f[0].into(),
            seed: f[1].parse().map_err(|_| bad("bad seed"))?,
            round: int(2)?,
            batch_size: int(3)?,
            defense: f[4].into(),
            defense_param: real(5)?,
            lambda: real(6)?,
            iterations: int(7)?,
            stop_reason: f[8].into(),
            psnr: real(9)?,
            ssim: real(10)?,
            mse: real(11)?,
            tv: real(12)?,
            fmse: real(13)?,
            alpha_final: real(14)?,
            variant: f[15].into(),
            model_accuracy: None,
        })
    }
}

pub fn write_metrics_csv(rows: &[MetricRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

pub(crate) fn write_sweep_csv(rows: &[MetricRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.defense,
            num(r.defense_param),
            r.seed,
            num(r.model_accuracy.unwrap_or(f64::NAN)),
            num(r.psnr),
            num(r.ssim),
            num(r.mse)
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(io_err(path, "unexpected header"));
    }
    lines.enumerate().map(|(i, l)| MetricRow::parse(l, i + 2)).collect()
}

/// Checks that a run directory describes itself: the stored config still
/// validates and hashes to the recorded value, every recorded artifact is
/// present, and `metrics.csv` agrees with the record.
pub fn verify_run_dir(dir: impl AsRef<Path>) -> Result<RunRecord> {
    let dir = dir.as_ref();
    let cfg = ExperimentConfig::load(dir.join("config.toml"))?;
    let record = RunRecord::load(dir)?;
    let fail = |m: String| Err(ExperimentError::Config(format!("{}: {m}", dir.display())));
    if cfg.hash() != record.config_hash {
        return fail("stored config does not match the recorded hash".into());
    }
    if cfg.name != record.experiment {
        return fail(format!("experiment {:?} recorded as {:?}", cfg.name, record.experiment));
    }
    if let Some(missing) = record.artifacts.iter().find(|a| !dir.join(a).exists()) {
        return fail(format!("artifact {} is missing", missing.display()));
    }
    let expected = cfg.cells().len() * cfg.seeds().len();
    if record.rows.len() + record.errors.len() != expected {
        return fail(format!("{} rows and {} errors for {expected} cell runs", record.rows.len(), record.errors.len()));
    }
    let csv = read_metrics_csv(dir.join("metrics.csv"))?;
    let stripped: Vec<MetricRow> = record.rows.iter().map(|r| MetricRow { model_accuracy: None, ..r.clone() }).collect();
    if !same_rows(&csv, &stripped) {
        return fail("metrics.csv disagrees with record.json".into());
    }
    Ok(record)
}

fn same_rows(a: &[MetricRow], b: &[MetricRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.csv_line() == y.csv_line())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates the `metrics.csv` of each run directory into `out` (one line
/// per cell, averaged over seeds, sample standard deviations). Returns the
/// number of aggregated rows.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<usize> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<MetricRow>> = HashMap::new();
    for dir in dirs {
        for row in read_metrics_csv(dir.join("metrics.csv"))? {
            let key = format!(
                "{},{},{},{},{},{},{}",
                row.experiment,
                row.round,
                row.batch_size,
                row.defense,
                num(row.defense_param),
                num(row.lambda),
                row.variant
            );
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(row);
        }
    }
    let mut text = format!("{SUMMARY_HEADER}\n");
    for key in &order {
        let rows = &groups[key];
        let col = |f: fn(&MetricRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let (pm, ps) = mean_std(&col(|r| r.psnr));
        let (sm, ss) = mean_std(&col(|r| r.ssim));
        let (mm, ms) = mean_std(&col(|r| r.mse));
        let (tm, _) = mean_std(&col(|r| r.tv));
        let (fm, _) = mean_std(&col(|r| r.fmse));
        text.push_str(&format!(
            "{key},{},{},{},{},{},{},{},{},{}\n",
            rows.len(),
            num(pm),
            num(ps),
            num(sm),
            num(ss),
            num(mm),
            num(ms),
            num(tm),
            num(fm)
        ));
    }
    write_file(out, text)?;
    Ok(order.len())
}
