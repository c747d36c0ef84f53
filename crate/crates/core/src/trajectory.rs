//! Append-only JSON Lines trajectory log, run-directory outputs, replay
//! verification and the per-step cost breakdown.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::KernelHyper;
use crate::image::{read_dump, write_dump, QuantizedImage};
use crate::optics::{AberrationState, Coefficient};
use crate::pareto::ParetoArchive;
use crate::rewards::{RewardEvaluator, RewardVector};

pub const SCHEMA_VERSION: &str = "1.0";
pub const LOG_FILE: &str = "run.jsonl";
pub const IMAGE_DIR: &str = "images";
/// Relative tolerance used by [`replay_verify`].
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Bo,
}

/// Full coefficient vector in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub c10: f64,
    pub c12a: f64,
    pub c12b: f64,
    pub c21a: f64,
    pub c21b: f64,
    pub c23a: f64,
    pub c23b: f64,
}

impl Action {
    pub fn values(&self) -> [f64; 7] {
        [self.c10, self.c12a, self.c12b, self.c21a, self.c21b, self.c23a, self.c23b]
    }

    pub fn to_state(&self) -> Result<AberrationState> {
        AberrationState::from_values(self.values())
    }
}

impl From<&AberrationState> for Action {
    fn from(s: &AberrationState) -> Self {
        let [c10, c12a, c12b, c21a, c21b, c23a, c23b] = s.values();
        Self { c10, c12a, c12b, c21a, c21b, c23a, c23b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub hw_s: f64,
    pub gp_fit_s: f64,
    pub acq_opt_s: f64,
    pub total_s: f64,
}

impl Timing {
    pub fn component_sum(&self) -> f64 {
        self.hw_s + self.gp_fit_s + self.acq_opt_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub initial_design: Option<u64>,
    pub gp_fit: Option<u64>,
    pub candidates: Option<u64>,
    pub ehvi: Option<u64>,
    pub acquire: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperPair {
    pub contrast: KernelHyper,
    pub fft: KernelHyper,
}

/// One line of `run.jsonl`. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: String,
    pub step: u64,
    pub phase: Phase,
    pub action: Option<Action>,
    pub image_ref: Option<String>,
    pub rewards: Option<RewardVector>,
    pub timing: Timing,
    pub seeds: Seeds,
    pub gp_hyper: Option<GpHyperPair>,
    pub reference_point: Option<[f64; 2]>,
    pub hypervolume: f64,
    pub acq_fallback: bool,
    pub error: Option<String>,
    pub wall_timestamp: f64,
}

impl TrajectoryRecord {
    pub fn new(step: u64, phase: Phase) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            step,
            phase,
            action: None,
            image_ref: None,
            rewards: None,
            timing: Timing::default(),
            seeds: Seeds::default(),
            gp_hyper: None,
            reference_point: None,
            hypervolume: 0.0,
            acq_fallback: false,
            error: None,
            wall_timestamp: wall_clock(),
        }
    }
}

/// Seconds since the Unix epoch.
pub fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn image_ref(step: u64) -> String {
    format!("{IMAGE_DIR}/step_{step:04}.pgm")
}

/// Receives what the optimization loop produces, one step at a time.
pub trait RunSink {
    /// Persists the observation image; returns its relative reference.
    fn store_image(&mut self, step: u64, image: &QuantizedImage) -> Result<Option<String>>;
    fn record(&mut self, record: &TrajectoryRecord) -> Result<()>;
}

/// Keeps records in memory and discards images.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<TrajectoryRecord>,
}

impl RunSink for MemorySink {
    fn store_image(&mut self, _step: u64, _image: &QuantizedImage) -> Result<Option<String>> {
        Ok(None)
    }

    fn record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid(format!("step {} after step {}", record.step, last.step)));
            }
        }
        self.records.push(record.clone());
        Ok(())
    }
}

/// Line-at-a-time writer; each append is flushed before returning.
#[derive(Debug)]
pub struct TrajectoryWriter {
    file: File,
    last_step: Option<u64>,
}

impl TrajectoryWriter {
    /// Creates a new log; an existing file is an error.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(Self { file, last_step: None })
    }

    pub fn append(&mut self, record: &TrajectoryRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if record.step <= last {
                return Err(Error::invalid(format!(
                    "trajectory step {} is not after step {last}",
                    record.step
                )));
            }
        }
        let mut line = serde_json::to_string(record).map_err(|e| Error::format(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub records: Vec<TrajectoryRecord>,
    /// A partial final line (interrupted write) was skipped.
    pub truncated_tail: bool,
}

fn check_version(v: &str) -> Result<()> {
    let major = v.split('.').next().unwrap_or_default();
    let ours = SCHEMA_VERSION.split('.').next().unwrap_or_default();
    if major != ours {
        return Err(Error::Schema(format!("trajectory schema {v} (expected {ours}.x)")));
    }
    Ok(())
}

/// Reads a log. A malformed final line without a newline is treated as an
/// interrupted write and skipped; any other malformed line is an error.
pub fn read_log(path: &Path) -> Result<LogContents> {
    let text = fs::read_to_string(path)?;
    let ends_cleanly = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    let mut records = Vec::new();
    let mut truncated_tail = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) if i + 1 == lines.len() && !ends_cleanly => {
                truncated_tail = true;
                continue;
            }
            Err(e) => return Err(Error::format(format!("{}:{}: {e}", path.display(), i + 1))),
        };
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::format(format!("{}:{}: missing schema_version", path.display(), i + 1)))?;
        check_version(version)?;
        let record: TrajectoryRecord =
            serde_json::from_value(value).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(last) = records.last().map(|r: &TrajectoryRecord| r.step) {
            if record.step <= last {
                return Err(Error::format(format!("{}:{}: step {} out of order", path.display(), i + 1, record.step)));
            }
        }
        records.push(record);
    }
    Ok(LogContents { records, truncated_tail })
}

/// A self-contained run directory: `run.jsonl`, `images/` and CSV outputs.
#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
    writer: TrajectoryWriter,
}

impl RunDirectory {
    /// Creates the layout. Refuses to reuse a directory that already has a log.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join(IMAGE_DIR))?;
        let log = root.join(LOG_FILE);
        if log.exists() {
            return Err(Error::invalid(format!("{} already holds a run", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            writer: TrajectoryWriter::create(&log)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl RunSink for RunDirectory {
    fn store_image(&mut self, step: u64, image: &QuantizedImage) -> Result<Option<String>> {
        let rel = image_ref(step);
        write_dump(&self.root.join(&rel), image)?;
        Ok(Some(rel))
    }

    fn record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        self.writer.append(record)
    }
}

/// `index, <coefficients...>, contrast, fft, on_front`
pub fn write_pareto_csv(path: &Path, archive: &ParetoArchive, coefficients: &[Coefficient]) -> Result<()> {
    let mut out = String::from("index");
    for c in coefficients {
        out.push(',');
        out.push_str(c.name());
    }
    out.push_str(",contrast,fft,on_front\n");
    for (i, (x, y)) in archive.xs().iter().zip(archive.values()).enumerate() {
        out.push_str(&i.to_string());
        for v in x {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?},{:?},{}\n", y[0], y[1], u8::from(archive.on_front(i))));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `iteration, hv`
pub fn write_hypervolume_csv(path: &Path, history: &[(u64, f64)]) -> Result<()> {
    let mut out = String::from("iteration,hv\n");
    for (it, hv) in history {
        out.push_str(&format!("{it},{hv:?}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayIssue {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub records: usize,
    pub images_checked: usize,
    pub max_contrast_deviation: f64,
    pub max_fft_deviation: f64,
    pub max_hypervolume_deviation: f64,
    pub issues: Vec<ReplayIssue>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn relative_deviation(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Recomputes rewards from every dumped image and the archive hypervolume
/// from the logged rewards. Reads only.
pub fn replay_verify(run_dir: &Path) -> Result<ReplayReport> {
    let log = read_log(&run_dir.join(LOG_FILE))?;
    let mut report = ReplayReport {
        records: log.records.len(),
        ..ReplayReport::default()
    };
    let issue = |report: &mut ReplayReport, step: u64, message: String| {
        report.issues.push(ReplayIssue { step, message });
    };
    if log.truncated_tail {
        let step = log.records.last().map_or(0, |r| r.step + 1);
        issue(&mut report, step, "log ends with a partial line".into());
    }
    let mut evaluator: Option<(usize, RewardEvaluator)> = None;
    let mut archive = ParetoArchive::new();
    let mut seen = BTreeSet::new();
    for rec in &log.records {
        if let Some(rel) = &rec.image_ref {
            if !seen.insert(rel.clone()) {
                issue(&mut report, rec.step, format!("{rel} referenced more than once"));
            }
            match read_dump(&run_dir.join(rel)) {
                Ok(q) => {
                    report.images_checked += 1;
                    let image = q.dequantize();
                    let got = if image.width == image.height {
                        if evaluator.as_ref().is_none_or(|(n, _)| *n != image.width) {
                            evaluator = Some((image.width, RewardEvaluator::new(image.width)));
                        }
                        evaluator.as_ref().map(|(_, e)| e.evaluate(&image)).expect("evaluator set")
                    } else {
                        crate::rewards::evaluate(&image)
                    };
                    match rec.rewards {
                        Some(logged) => {
                            let dc = relative_deviation(got.contrast, logged.contrast);
                            let df = relative_deviation(got.fft, logged.fft);
                            report.max_contrast_deviation = report.max_contrast_deviation.max(dc);
                            report.max_fft_deviation = report.max_fft_deviation.max(df);
                            if dc > REPLAY_TOLERANCE || df > REPLAY_TOLERANCE {
                                issue(
                                    &mut report,
                                    rec.step,
                                    format!("rewards differ from {rel}: contrast dev {dc:.3e}, fft dev {df:.3e}"),
                                );
                            }
                        }
                        None => issue(&mut report, rec.step, format!("{rel} has no logged rewards")),
                    }
                }
                Err(e) => issue(&mut report, rec.step, format!("cannot read {rel}: {e}")),
            }
        } else if rec.rewards.is_some() {
            issue(&mut report, rec.step, "rewards logged without an image".into());
        }
        if let Some(r) = rec.rewards {
            let x = rec.action.map(|a| a.values().to_vec()).unwrap_or_default();
            archive.insert(x, r.as_array());
        }
        let dh = relative_deviation(archive.hypervolume(), rec.hypervolume);
        report.max_hypervolume_deviation = report.max_hypervolume_deviation.max(dh);
        if dh > REPLAY_TOLERANCE {
            issue(
                &mut report,
                rec.step,
                format!("hypervolume {} but rewards give {}", rec.hypervolume, archive.hypervolume()),
            );
        }
        if rec.rewards.is_some() && rec.reference_point != archive.reference() {
            issue(&mut report, rec.step, "reference point differs from the recomputed one".into());
        }
    }
    if let Ok(entries) = fs::read_dir(run_dir.join(IMAGE_DIR)) {
        let mut dangling: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| format!("{IMAGE_DIR}/{}", e.file_name().to_string_lossy()))
            .filter(|name| name.ends_with(".pgm") && !seen.contains(name))
            .collect();
        dangling.sort();
        for name in dangling {
            issue(&mut report, 0, format!("{name} is not referenced by the log"));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub step: u64,
    pub phase: Phase,
    pub hw_s: f64,
    pub gp_fit_s: f64,
    pub acq_opt_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Coefficients that take a nonzero value somewhere in the run.
    pub dimension: usize,
    pub mean_hw_s: f64,
    /// Mean of gp_fit_s + acq_opt_s over BO steps.
    pub mean_compute_s: f64,
    /// Mean over BO steps of compute / total.
    pub mean_compute_share: f64,
    /// Least-squares slope of compute seconds against BO step.
    pub compute_slope: f64,
}

pub fn cost_report(log_path: &Path) -> Result<CostReport> {
    let log = read_log(log_path)?;
    let rows: Vec<CostRow> = log
        .records
        .iter()
        .map(|r| CostRow {
            step: r.step,
            phase: r.phase,
            hw_s: r.timing.hw_s,
            gp_fit_s: r.timing.gp_fit_s,
            acq_opt_s: r.timing.acq_opt_s,
            total_s: r.timing.total_s,
        })
        .collect();
    let dimension = (0..7)
        .filter(|&k| log.records.iter().any(|r| r.action.is_some_and(|a| a.values()[k] != 0.0)))
        .count();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let hw: Vec<f64> = rows.iter().map(|r| r.hw_s).collect();
    let bo: Vec<&CostRow> = rows.iter().filter(|r| r.phase == Phase::Bo).collect();
    let compute: Vec<f64> = bo.iter().map(|r| r.gp_fit_s + r.acq_opt_s).collect();
    let share: Vec<f64> = bo
        .iter()
        .map(|r| if r.total_s > 0.0 { (r.gp_fit_s + r.acq_opt_s) / r.total_s } else { 0.0 })
        .collect();
    let steps: Vec<f64> = bo.iter().map(|r| r.step as f64).collect();
    let compute_slope = if bo.len() >= 2 {
        let (ms, mc) = (mean(&steps), mean(&compute));
        let sxx: f64 = steps.iter().map(|s| (s - ms).powi(2)).sum();
        let sxy: f64 = steps.iter().zip(&compute).map(|(s, c)| (s - ms) * (c - mc)).sum();
        if sxx > 0.0 { sxy / sxx } else { 0.0 }
    } else {
        0.0
    };
    Ok(CostReport {
        dimension,
        mean_hw_s: mean(&hw),
        mean_compute_s: mean(&compute),
        mean_compute_share: mean(&share),
        compute_slope,
        rows,
    })
}

impl CostReport {
    /// `step, hw_s, gp_fit_s, acq_opt_s`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,hw_s,gp_fit_s,acq_opt_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.hw_s, r.gp_fit_s, r.acq_opt_s));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "dimension {}\nsteps {}\nmean hw_s {:.6}\nmean compute_s {:.6}\nmean compute share {:.6}\ncompute slope per step {:.6e}\n",
            self.dimension,
            self.rows.len(),
            self.mean_hw_s,
            self.mean_compute_s,
            self.mean_compute_share,
            self.compute_slope
        )
    }
}
