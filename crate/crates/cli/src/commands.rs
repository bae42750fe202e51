//! The verbs of the `acl` tool, callable without going through the binary.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use acl_core::backbone::{Backbone, PretrainReport};
use acl_core::baselines::{run_baseline, BaselineKind};
use acl_core::data::LabeledSet;
use acl_core::engine::{hex, Evaluation, RoundConfig, RoundReport};
use acl_core::harness::{pretrain_for_split, ContinualRun};
use acl_core::synthetic::generate_synthetic;

use crate::config::{DataConfig, RunConfig};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::CliError;
use crate::model_io::{load_backbone, load_model, save_backbone, save_model, write_file};
use crate::runlog::{read_log, summarize, LogEvent, MetricsCsv, RunLog, SummaryRow};

pub const RUN_LOG: &str = "run.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const MODEL_DIR: &str = "model";
pub const TRAIN_FILE: &str = "train.acld";
pub const TEST_FILE: &str = "test.acld";

/// Settings shared by the training verbs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Pretrained backbone weights; pretrained from scratch when absent.
    pub backbone: Option<PathBuf>,
}

pub fn load_data(config: &RunConfig) -> Result<(LabeledSet, LabeledSet), CliError> {
    let (train, test) = match &config.data {
        DataConfig::Synthetic { spec, seed } => {
            let d = generate_synthetic(spec, *seed).map_err(|e| CliError::Config(format!("data.synthetic: {e}")))?;
            (d.train, d.test)
        }
        DataConfig::Files { train, test } => (read_acld(train)?, read_acld(test)?),
    };
    let expected = config.backbone.input_shape();
    for (name, set) in [("train", &train), ("test", &test)] {
        if set.image_shape() != expected {
            return Err(CliError::Config(format!(
                "{name} images are {:?} but the backbone expects {expected:?}",
                set.image_shape()
            )));
        }
    }
    let test_classes = test.classes();
    for c in train.classes() {
        if !test_classes.contains(&c) {
            return Err(CliError::Config(format!("class {c} has no test samples")));
        }
    }
    Ok((train, test))
}

fn read_acld(path: &Path) -> Result<LabeledSet, CliError> {
    let file = File::open(path).map_err(CliError::io(path))?;
    read_dataset(BufReader::new(file)).map_err(CliError::format(path))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))
}

fn start(log: &mut RunLog, command: &str, opts: &RunOptions) -> Result<(), CliError> {
    log.append(&LogEvent::Start {
        command: command.to_string(),
        seed: opts.seed,
        config: Box::new(opts.config.clone()),
        wall_clock: log.elapsed(),
    })
}

fn backbone_for(opts: &RunOptions, train: &LabeledSet, test: &LabeledSet, log: &mut RunLog) -> Result<Backbone, CliError> {
    if let Some(path) = &opts.backbone {
        return load_backbone(path, &opts.config.backbone);
    }
    let c = &opts.config;
    let (backbone, report) = pretrain_for_split(train, test, &c.split, &c.backbone, &c.pretrain, opts.seed)?;
    log.append(&LogEvent::Pretrain {
        seed: opts.seed,
        report,
        backbone_checksum: hex(&backbone.checksum()),
        wall_clock: log.elapsed(),
    })?;
    Ok(backbone)
}

fn split_classes(config: &RunConfig) -> Vec<acl_core::ClassId> {
    let mut classes = config.split.classes_through(config.split.rounds.len());
    classes.sort_unstable();
    classes
}

/// Data generation: writes `train.acld` and `test.acld` into `out`.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let (train, test) = load_data(config)?;
    prepare_out(out)?;
    let paths = (out.join(TRAIN_FILE), out.join(TEST_FILE));
    write_file(&paths.0, |w| write_dataset(w, &train))?;
    write_file(&paths.1, |w| write_dataset(w, &test))?;
    Ok(paths)
}

/// Pretrains on the split's base classes and saves the backbone weights to `out`.
pub fn pretrain(config: &RunConfig, seed: u64, out: &Path) -> Result<PretrainReport, CliError> {
    let (train, test) = load_data(config)?;
    let (backbone, report) = pretrain_for_split(&train, &test, &config.split, &config.backbone, &config.pretrain, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_out(dir)?;
    }
    save_backbone(out, &backbone)?;
    Ok(report)
}

/// A continual run with `config.round`; writes the run log, the metrics CSV and the
/// final model under `opts.out`.
pub fn run(opts: &RunOptions) -> Result<Vec<RoundReport>, CliError> {
    prepare_out(&opts.out)?;
    let mut log = RunLog::create(&opts.out.join(RUN_LOG))?;
    let mut csv = MetricsCsv::create(&opts.out.join(METRICS), &split_classes(&opts.config))?;
    start(&mut log, "run", opts)?;
    let (train, test) = load_data(&opts.config)?;
    let backbone = backbone_for(opts, &train, &test, &mut log)?;
    let label = opts.config.round.toggles.label();
    let c = &opts.config;
    let mut driver = ContinualRun::new(&backbone, &train, &test, &c.split, c.round.clone(), c.memory_budget, opts.seed)?;
    let mut reports = Vec::new();
    while let Some(report) = driver.step() {
        let report = report?;
        log_round(&mut log, &mut csv, &label, opts.seed, &report)?;
        reports.push(report);
    }
    save_model(&opts.out.join(MODEL_DIR), driver.model(), &c.round.adapter)?;
    log.append(&LogEvent::End {
        seed: opts.seed,
        wall_clock: log.elapsed(),
    })?;
    Ok(reports)
}

fn log_round(log: &mut RunLog, csv: &mut MetricsCsv, run: &str, seed: u64, report: &RoundReport) -> Result<(), CliError> {
    log.append(&LogEvent::Round {
        run: run.to_string(),
        seed,
        report: Box::new(report.clone()),
        wall_clock: log.elapsed(),
    })?;
    csv.append(run, report)
}

pub fn baseline(opts: &RunOptions, kind: BaselineKind) -> Result<Vec<RoundReport>, CliError> {
    prepare_out(&opts.out)?;
    let mut log = RunLog::create(&opts.out.join(RUN_LOG))?;
    let mut csv = MetricsCsv::create(&opts.out.join(METRICS), &split_classes(&opts.config))?;
    start(&mut log, kind.label(), opts)?;
    let (train, test) = load_data(&opts.config)?;
    let backbone = backbone_for(opts, &train, &test, &mut log)?;
    let c = &opts.config;
    let reports = run_baseline(kind, &backbone, &train, &test, &c.split, c.baseline_training(), opts.seed)?;
    for r in &reports {
        log_round(&mut log, &mut csv, kind.label(), opts.seed, r)?;
    }
    log.append(&LogEvent::End {
        seed: opts.seed,
        wall_clock: log.elapsed(),
    })?;
    Ok(reports)
}

/// Every cell of `config.ablation` in turn, sharing one pretrained backbone.
pub fn ablate(opts: &RunOptions) -> Result<Vec<(String, Vec<RoundReport>)>, CliError> {
    prepare_out(&opts.out)?;
    let mut log = RunLog::create(&opts.out.join(RUN_LOG))?;
    let mut csv = MetricsCsv::create(&opts.out.join(METRICS), &split_classes(&opts.config))?;
    start(&mut log, "ablate", opts)?;
    let (train, test) = load_data(&opts.config)?;
    let backbone = backbone_for(opts, &train, &test, &mut log)?;
    let c = &opts.config;
    let mut out = Vec::with_capacity(c.ablation.len());
    for cell in &c.ablation {
        let round = RoundConfig {
            toggles: cell.toggles,
            ..c.round.clone()
        };
        let mut driver = ContinualRun::new(&backbone, &train, &test, &c.split, round, c.memory_budget, opts.seed)?;
        let mut reports = Vec::new();
        while let Some(report) = driver.step() {
            let report = report?;
            log_round(&mut log, &mut csv, &cell.label, opts.seed, &report)?;
            reports.push(report);
        }
        out.push((cell.label.clone(), reports));
    }
    log.append(&LogEvent::End {
        seed: opts.seed,
        wall_clock: log.elapsed(),
    })?;
    Ok(out)
}

/// Evaluates a saved model on the learned classes of an `ACLD` file.
pub fn eval(model_dir: &Path, data: &Path) -> Result<Evaluation, CliError> {
    let model = load_model(model_dir)?;
    let set = read_acld(data)?;
    let learned = model.learned_classes();
    let test = set.filter_classes(&learned);
    if test.is_empty() {
        return Err(CliError::Config(format!("{}: no samples of the learned classes", data.display())));
    }
    Ok(model.evaluate(&test)?)
}

pub fn summary(logs: &[PathBuf]) -> Result<Vec<SummaryRow>, CliError> {
    let mut events = Vec::new();
    for path in logs {
        events.extend(read_log(path)?);
    }
    Ok(summarize(&events))
}
