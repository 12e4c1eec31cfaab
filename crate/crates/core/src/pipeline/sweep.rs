//! Ablation sweeps and report aggregation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiment::{Experiment, MetricsReport};
use super::phases::{run_all, RunDir, METRICS_CSV};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const REPORT_CSV: &str = "report.csv";

fn label(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every seed of `cfg` in parallel threads; results are in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, root: &Path, value: Option<&str>) -> Result<Vec<MetricsReport>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || -> Result<MetricsReport> {
                    let exp = Experiment::new(cfg.clone(), seed)?;
                    let dir = RunDir::for_seed(root, seed)?;
                    run_all(&exp, &dir, value)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|panic| std::panic::resume_unwind(panic)))
            .collect()
    })
}

/// Mean and sample standard deviation.
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Header plus one row per (value, seed). Sweeps over two or more values
/// also get `mean`/`stdev` rows per value, computed across seeds.
pub fn summarize(reports: &[MetricsReport]) -> String {
    let mut out = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    let mut values: Vec<Option<String>> = Vec::new();
    for r in reports {
        if !values.contains(&r.value) {
            values.push(r.value.clone());
        }
    }
    if values.len() < 2 {
        return out;
    }
    for value in values {
        let cell: Vec<&MetricsReport> = reports.iter().filter(|r| r.value == value).collect();
        let columns: [&dyn Fn(&MetricsReport) -> Option<f64>; 8] = [
            &|r| Some(r.base_threshold),
            &|r| Some(r.rho),
            &|r| Some(r.pretrained.loss),
            &|r| r.pretrained.accuracy,
            &|r| Some(r.assembled.loss),
            &|r| r.assembled.accuracy,
            &|r| Some(r.recovered.loss),
            &|r| r.recovered.accuracy,
        ];
        let stats: Vec<Option<(f64, f64)>> = columns
            .iter()
            .map(|f| {
                let xs: Option<Vec<f64>> = cell.iter().map(|r| f(r)).collect();
                xs.map(|xs| mean_stdev(&xs))
            })
            .collect();
        let v = value.unwrap_or_default();
        for (label, pick) in [("mean", 0), ("stdev", 1)] {
            let cells: Vec<String> = stats
                .iter()
                .map(|s| s.map(|(m, sd)| if pick == 0 { m } else { sd }.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&format!("{v},{label},{},\n", cells.join(",")));
        }
    }
    out
}

/// Full pipeline per sweep value per seed under
/// `<output_dir>/sweep-<axis>/<value>/seed-<seed>`; writes and returns the
/// combined table. Without a sweep section, the config runs as a single cell.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let (root, cells): (PathBuf, Vec<(ExperimentConfig, Option<String>)>) = match &cfg.sweep {
        None => (cfg.output_dir.clone(), vec![(cfg.clone(), None)]),
        Some(sweep) => {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep lists no values".into()));
            }
            let axis = serde_json::to_value(sweep.axis)?;
            let root = cfg.output_dir.join(format!("sweep-{}", label(&axis)));
            let cells = sweep
                .values
                .iter()
                .map(|v| Ok((cfg.with_axis(sweep.axis, v)?, Some(label(v)))))
                .collect::<Result<_>>()?;
            (root, cells)
        }
    };
    let mut reports = Vec::new();
    for (cell, value) in &cells {
        let dir = match value {
            Some(v) => root.join(v),
            None => root.clone(),
        };
        reports.extend(run_seeds(cell, &dir, value.as_deref())?);
    }
    let table = summarize(&reports);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let path = root.join(SWEEP_CSV);
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

/// Concatenates every `metrics.csv` below `root` (sorted by path) into
/// `<root>/report.csv` and returns it.
pub fn collect_report(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && entry.file_name() == METRICS_CSV {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        return Err(Error::MissingArtifact {
            path: root.join("**").join(METRICS_CSV),
            phase: "eval",
        });
    }
    let mut out = format!("{}\n", MetricsReport::CSV_HEADER);
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        for line in text.lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }
    }
    let path = root.join(REPORT_CSV);
    std::fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stdev() {
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_stdev(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn labels() {
        assert_eq!(label(&serde_json::json!("kmeans")), "kmeans");
        assert_eq!(label(&serde_json::json!(0.2)), "0.2");
    }
}
