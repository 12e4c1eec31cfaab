//! File-backed pipeline phases. Each phase reads its predecessors'
//! artifacts from a run directory and writes its own.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::annealing::LossTrace;
use crate::calibration::CalibrationReport;
use crate::construction::CompressionReport;
use crate::error::{Error, Result};
use crate::model::MoeModel;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::experiment::{Experiment, MetricsReport};
use super::search::ThresholdSearch;

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const CALIBRATION: &str = "calibration.json";
pub const THRESHOLD: &str = "threshold.json";
pub const SELECTION: &str = "selection.json";
pub const GROUPS: &str = "groups.json";
pub const COMPRESSION: &str = "compression.json";
pub const COMPRESSED_CKPT: &str = "compressed.ckpt";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt";
pub const RECOVERY_TRACE: &str = "recovery_trace.csv";
pub const RECOVERY_MARKERS: &str = "recovery_markers.json";
pub const TIMINGS: &str = "timings.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Artifact directory of one `(config, seed)` cell.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// `<output_dir>/seed-<seed>`
    pub fn for_seed(output_dir: &Path, seed: u64) -> Result<Self> {
        Self::new(output_dir.join(format!("seed-{seed}")))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn require(&self, name: &str, phase: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, phase })
        }
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    fn read_json<V: DeserializeOwned>(&self, name: &str, phase: &'static str) -> Result<V> {
        let path = self.require(name, phase)?;
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    fn load_model(&self, name: &str, phase: &'static str) -> Result<MoeModel<f32>> {
        load_checkpoint(&self.require(name, phase)?)
    }

    fn record_time(&self, exp: &Experiment, phase: &str, started: Instant) -> Result<()> {
        let mut timings: BTreeMap<String, u64> = if self.path(TIMINGS).is_file() {
            self.read_json(TIMINGS, "pretrain")?
        } else {
            BTreeMap::new()
        };
        let ms = if exp.config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        timings.insert(phase.to_string(), ms);
        self.write_json(TIMINGS, &timings)
    }
}

pub fn run_pretrain(exp: &Experiment, dir: &RunDir) -> Result<()> {
    let started = Instant::now();
    let out = exp.pretrain()?;
    save_checkpoint(&dir.path(PRETRAIN_CKPT), &out.model)?;
    let mut csv = Vec::new();
    writeln!(csv, "step,loss").expect("writing to memory");
    for (t, loss) in out.losses.iter().enumerate() {
        writeln!(csv, "{t},{loss}").expect("writing to memory");
    }
    dir.write_bytes(PRETRAIN_LOSS, &csv)?;
    dir.record_time(exp, "pretrain", started)
}

pub fn run_calibrate(exp: &Experiment, dir: &RunDir) -> Result<CalibrationReport> {
    let started = Instant::now();
    let model = dir.load_model(PRETRAIN_CKPT, "pretrain")?;
    let report = exp.calibrate(&model)?;
    dir.write_json(CALIBRATION, &report)?;
    dir.record_time(exp, "calibrate", started)?;
    Ok(report)
}

pub fn run_search_threshold(exp: &Experiment, dir: &RunDir) -> Result<ThresholdSearch> {
    let started = Instant::now();
    let calib: CalibrationReport = dir.read_json(CALIBRATION, "calibrate")?;
    let (scores, norms) = calib.split()?;
    let sel = &exp.config.selection;
    let search = exp.search_threshold(&scores, &norms, sel.target_rho, sel.tolerance)?;
    dir.write_json(THRESHOLD, &search)?;
    dir.record_time(exp, "search_threshold", started)?;
    Ok(search)
}

/// Uses the configured base threshold, else a `threshold.json` from an
/// earlier search, else searches now.
pub fn run_compress(exp: &Experiment, dir: &RunDir) -> Result<CompressionReport> {
    let started = Instant::now();
    let model = dir.load_model(PRETRAIN_CKPT, "pretrain")?;
    let calib: CalibrationReport = dir.read_json(CALIBRATION, "calibrate")?;
    let threshold = match exp.config.selection.base_threshold {
        Some(p) => p,
        None if dir.path(THRESHOLD).is_file() => {
            let search: ThresholdSearch = dir.read_json(THRESHOLD, "search-threshold")?;
            search.base_threshold
        }
        None => run_search_threshold(exp, dir)?.base_threshold,
    };
    let compressed = exp.compress(&model, &calib, threshold)?;
    save_checkpoint(&dir.path(COMPRESSED_CKPT), &compressed.model)?;
    dir.write_json(SELECTION, &compressed.plan)?;
    dir.write_json(GROUPS, &compressed.groups)?;
    dir.write_json(COMPRESSION, &compressed.report)?;
    dir.record_time(exp, "compress", started)?;
    Ok(compressed.report)
}

pub fn run_finetune(exp: &Experiment, dir: &RunDir) -> Result<LossTrace> {
    let started = Instant::now();
    let model = dir.load_model(COMPRESSED_CKPT, "compress")?;
    let (model, trace) = exp.finetune(model)?;
    save_checkpoint(&dir.path(FINETUNED_CKPT), &model)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).map_err(|e| Error::io(dir.path(RECOVERY_TRACE), e))?;
    dir.write_bytes(RECOVERY_TRACE, &csv)?;
    dir.write_json(
        RECOVERY_MARKERS,
        &serde_json::json!({
            "swap_step": trace.swap_step,
            "anneal_end": trace.anneal_end,
            "initial_eval_loss": trace.initial_eval_loss,
        }),
    )?;
    dir.record_time(exp, "finetune", started)?;
    Ok(trace)
}

pub fn run_eval(exp: &Experiment, dir: &RunDir, value: Option<&str>) -> Result<MetricsReport> {
    let pretrained = dir.load_model(PRETRAIN_CKPT, "pretrain")?;
    let assembled = dir.load_model(COMPRESSED_CKPT, "compress")?;
    let recovered = dir.load_model(FINETUNED_CKPT, "finetune")?;
    let compression: CompressionReport = dir.read_json(COMPRESSION, "compress")?;
    let wall_ms: BTreeMap<String, u64> = if dir.path(TIMINGS).is_file() {
        dir.read_json(TIMINGS, "pretrain")?
    } else {
        BTreeMap::new()
    };
    let base_threshold = match exp.config.selection.base_threshold {
        Some(p) => p,
        None => dir.read_json::<ThresholdSearch>(THRESHOLD, "search-threshold")?.base_threshold,
    };
    let report = MetricsReport {
        seed: exp.seed,
        value: value.map(str::to_string),
        base_threshold,
        rho: compression.rho,
        pretrained: exp.evaluate(&pretrained)?,
        assembled: exp.evaluate(&assembled)?,
        recovered: exp.evaluate(&recovered)?,
        wall_ms,
    };
    dir.write_json(METRICS_JSON, &report)?;
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    dir.write_bytes(METRICS_CSV, csv.as_bytes())?;
    Ok(report)
}

/// Every phase in order.
pub fn run_all(exp: &Experiment, dir: &RunDir, value: Option<&str>) -> Result<MetricsReport> {
    run_pretrain(exp, dir)?;
    run_calibrate(exp, dir)?;
    if exp.config.selection.base_threshold.is_none() {
        run_search_threshold(exp, dir)?;
    }
    run_compress(exp, dir)?;
    run_finetune(exp, dir)?;
    run_eval(exp, dir, value)
}
