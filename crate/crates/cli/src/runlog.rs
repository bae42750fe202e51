//! JSON-lines run logs and the per-round metrics CSV.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use acl_core::backbone::PretrainReport;
use acl_core::engine::RoundReport;
use acl_core::ClassId;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliError;

/// Key excluded when run logs are compared for determinism.
pub const WALL_CLOCK: &str = "wall_clock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Start {
        command: String,
        seed: u64,
        config: Box<RunConfig>,
        wall_clock: f64,
    },
    Pretrain {
        seed: u64,
        report: PretrainReport,
        backbone_checksum: String,
        wall_clock: f64,
    },
    Round {
        run: String,
        seed: u64,
        report: Box<RoundReport>,
        wall_clock: f64,
    },
    End {
        seed: u64,
        wall_clock: f64,
    },
}

pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
    started: Instant,
}

impl RunLog {
    /// Starts a new log at `path`, replacing any previous file.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            started: Instant::now(),
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Writes one line and flushes it.
    pub fn append(&mut self, event: &LogEvent) -> Result<(), CliError> {
        let line = serde_json::to_string(event).map_err(|e| CliError::Runtime(format!("serialising log event: {e}")))?;
        writeln!(self.out, "{line}")
            .and_then(|()| self.out.flush())
            .map_err(CliError::io(&self.path))
    }
}

/// Reads every event of a log; each line must parse on its own.
pub fn read_log(path: &Path) -> Result<Vec<LogEvent>, CliError> {
    let file = File::open(path).map_err(CliError::io(path))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(CliError::io(path))?;
            serde_json::from_str(&line).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// The line with its top-level wall-clock field removed, re-serialised.
pub fn strip_wall_clock(line: &str) -> Result<String, serde_json::Error> {
    let mut value: Value = serde_json::from_str(line)?;
    if let Value::Object(map) = &mut value {
        map.remove(WALL_CLOCK);
    }
    serde_json::to_string(&value)
}

/// Columns: `run`, `round`, `mcr`, one `recall_c<k>` per class of the split (empty
/// until the class is learned) and `head_selection_acc` (empty for baselines).
pub struct MetricsCsv {
    path: PathBuf,
    writer: csv::Writer<File>,
    classes: Vec<ClassId>,
}

impl MetricsCsv {
    pub fn create(path: &Path, classes: &[ClassId]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["run".to_string(), "round".to_string(), "mcr".to_string()];
        header.extend(classes.iter().map(|c| format!("recall_{c}")));
        header.push("head_selection_acc".to_string());
        writer.write_record(&header).map_err(|e| csv_error(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            classes: classes.to_vec(),
        })
    }

    pub fn append(&mut self, run: &str, report: &RoundReport) -> Result<(), CliError> {
        let recalls: BTreeMap<ClassId, f64> = report.per_class_recall.iter().map(|r| (r.class, r.recall)).collect();
        let mut row = vec![run.to_string(), report.round.to_string(), report.mcr.to_string()];
        row.extend(self.classes.iter().map(|c| recalls.get(c).map(f64::to_string).unwrap_or_default()));
        row.push(report.head_selection_accuracy.map(|v| v.to_string()).unwrap_or_default());
        self.writer.write_record(&row).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(CliError::io(&self.path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Mean and sample standard deviation of MCR across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run: String,
    /// A round number, `avg` (mean over rounds) or `last`.
    pub statistic: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Aggregates the round events of several logs by run label.
pub fn summarize(events: &[LogEvent]) -> Vec<SummaryRow> {
    let mut by_run: BTreeMap<&str, BTreeMap<u64, BTreeMap<u32, f64>>> = BTreeMap::new();
    for e in events {
        if let LogEvent::Round { run, seed, report, .. } = e {
            by_run.entry(run).or_default().entry(*seed).or_default().insert(report.round, report.mcr);
        }
    }
    let mut rows = Vec::new();
    for (run, seeds) in by_run {
        let mut per_round: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let (mut avgs, mut lasts) = (Vec::new(), Vec::new());
        for rounds in seeds.values() {
            for (&r, &m) in rounds {
                per_round.entry(r).or_default().push(m);
            }
            avgs.push(rounds.values().sum::<f64>() / rounds.len() as f64);
            lasts.extend(rounds.values().next_back().copied());
        }
        let mut push = |statistic: String, values: &[f64]| {
            let (mean, std) = mean_std(values);
            rows.push(SummaryRow {
                run: run.to_string(),
                statistic,
                seeds: values.len(),
                mean,
                std,
            });
        };
        for (r, values) in &per_round {
            push(r.to_string(), values);
        }
        push("avg".into(), &avgs);
        push("last".into(), &lasts);
    }
    rows
}
