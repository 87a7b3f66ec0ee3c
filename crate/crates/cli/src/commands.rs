use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dada_core::checkpoint::{encode_train_state, write_bytes, Checkpoint};
use dada_core::config::{load_config, KvConfig};
use dada_core::dataset::{generate_dataset, DatasetManifest};
use dada_core::synthdata::Domain;
use dada_core::trainer::{evaluate_model, run_training, MetricsRecord, TrainData};
use dada_core::{
    AblationSetup, Dataset, DatasetRole, DomainStyle, EvalReport, ModelConfig, Scalar, SceneSpec, TrainConfig,
    TrainState,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::manifest::{read_json, write_json, ExperimentManifest, RunStatus};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";

/// `DADA_DETERMINISTIC=1` forces deterministic mode.
pub fn deterministic_from_env() -> bool {
    std::env::var("DADA_DETERMINISTIC").map(|v| v.trim() == "1").unwrap_or(false)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Usage(format!("unknown precision {other:?} (expected f32|f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

pub fn load_or_default<C: KvConfig>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => {
            let c = C::default();
            c.check()?;
            Ok(c)
        }
    }
}

pub fn status_of<T>(r: &Result<T>) -> RunStatus {
    match r {
        Ok(_) => RunStatus::Completed,
        Err(e) => RunStatus::Failed {
            exit_code: e.exit_code(),
            message: e.to_string(),
        },
    }
}

pub struct GenDataArgs {
    pub spec: Option<PathBuf>,
    pub domain: Domain,
    pub seed: u64,
    pub count: usize,
    pub out: PathBuf,
}

pub fn gen_data(a: &GenDataArgs) -> Result<DatasetManifest> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let spec: SceneSpec = load_or_default(a.spec.as_deref())?;
    let style = match a.domain {
        Domain::Source => DomainStyle::source(&spec),
        Domain::Target => DomainStyle::target(&spec),
    };
    Ok(generate_dataset(&spec, &style, a.seed, a.count, &a.out)?)
}

/// Where a training run writes, and what it evaluates on at the end.
pub struct RunOutputs<'p> {
    pub metrics: &'p Path,
    pub append_metrics: bool,
    pub checkpoint: &'p Path,
    pub baseline: Option<&'p [f64]>,
}

/// Trains (or resumes), streams the metrics log, writes the checkpoint and
/// evaluates the final model on the validation split when one is given.
pub fn run_and_save<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    setup: &AblationSetup,
    data: &TrainData<'_>,
    resume: Option<TrainState<T>>,
    stop_after: Option<u64>,
    out: &RunOutputs<'_>,
) -> Result<(TrainState<T>, Option<EvalReport>)> {
    let file = if out.append_metrics {
        OpenOptions::new().create(true).append(true).open(out.metrics)
    } else {
        File::create(out.metrics)
    }
    .map_err(|e| CliError::io(out.metrics, e))?;
    let mut w = BufWriter::new(file);
    let path = out.metrics.to_path_buf();
    let mut sink = |r: &MetricsRecord| -> dada_core::Result<()> {
        let io = |e: std::io::Error| dada_core::Error::io(&path, e);
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    };
    let outcome = run_training(model_cfg, cfg, setup, data, resume, stop_after, &mut sink)?;
    write_bytes(out.checkpoint, &encode_train_state(&outcome.state, cfg, setup))?;
    let report = match data.validation {
        Some(v) if outcome.state.iteration == cfg.iterations => {
            Some(evaluate_model(&outcome.state.model, setup.depth_mode(), v, None, out.baseline)?)
        }
        _ => None,
    };
    Ok((outcome.state, report))
}

pub struct TrainArgs {
    pub model_cfg: Option<PathBuf>,
    pub train_cfg: Option<PathBuf>,
    pub setup: AblationSetup,
    pub source: PathBuf,
    pub target: PathBuf,
    pub val: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<u64>,
    pub deterministic: bool,
    pub precision: Precision,
    pub argv: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iteration: u64,
    pub report: Option<EvalReport>,
}

pub fn train(a: &TrainArgs) -> Result<TrainSummary> {
    let model_cfg: ModelConfig = load_or_default(a.model_cfg.as_deref())?;
    let cfg: TrainConfig = load_or_default(a.train_cfg.as_deref())?;
    let mut manifest = ExperimentManifest::new("train", a.argv.clone(), a.deterministic)
        .with_config("model", &model_cfg)
        .with_config("train", &cfg)
        .with_dataset("source", &a.source)?
        .with_dataset("target", &a.target)?
        .with_param("setup", &a.setup)
        .with_param("precision", a.precision);
    if let Some(v) = &a.val {
        manifest = manifest.with_dataset("validation", v)?;
    }
    if let Some(r) = &a.resume {
        manifest = manifest.with_param("resume", r.display());
    }
    manifest.seeds = vec![cfg.seed];
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    manifest.write(&a.out)?;

    let result = (|| {
        let source = Dataset::open(&a.source, DatasetRole::LabeledSource)?;
        let target = Dataset::open(&a.target, DatasetRole::UnlabeledTarget)?;
        let val = a.val.as_deref().map(|p| Dataset::open(p, DatasetRole::Validation)).transpose()?;
        let data = TrainData {
            source: &source,
            target: &target,
            validation: val.as_ref(),
        };
        match a.precision {
            Precision::F32 => train_as::<f32>(a, &model_cfg, &cfg, &data),
            Precision::F64 => train_as::<f64>(a, &model_cfg, &cfg, &data),
        }
    })();
    manifest.finish(status_of(&result));
    manifest.write(&a.out)?;
    result
}

fn train_as<T: Scalar>(a: &TrainArgs, model_cfg: &ModelConfig, cfg: &TrainConfig, data: &TrainData<'_>) -> Result<TrainSummary> {
    let resume = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::read(path)?;
            if ck.manifest.setup.as_ref() != Some(&a.setup) {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint was trained with setup {:?}, not {}",
                    path.display(),
                    ck.manifest.setup.as_ref().map(|s| s.name.as_str()),
                    a.setup
                )));
            }
            let same = ck.manifest.train_config.as_ref().is_some_and(|c| {
                TrainConfig {
                    iterations: cfg.iterations,
                    ..c.clone()
                } == *cfg
            });
            if !same {
                return Err(CliError::Usage(format!(
                    "{}: training configuration differs from the checkpoint (only iterations may change)",
                    path.display()
                )));
            }
            Some(ck.into_train_state()?)
        }
        None => None,
    };
    let metrics = a.out.join(METRICS_FILE);
    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let outputs = RunOutputs {
        metrics: &metrics,
        append_metrics: resume.is_some(),
        checkpoint: &checkpoint,
        baseline: None,
    };
    let (state, report) = run_and_save(model_cfg, cfg, &a.setup, data, resume, a.stop_after, &outputs)?;
    let report = report.map(|mut r| {
        r.meta = json!({
            "setup": a.setup.name,
            "seed": cfg.seed,
            "iteration": state.iteration,
            "depth_mode": a.setup.depth_mode(),
        });
        r
    });
    if let Some(r) = &report {
        write_json(&a.out.join(REPORT_FILE), r)?;
    }
    Ok(TrainSummary {
        iteration: state.iteration,
        report,
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub baseline_report: Option<PathBuf>,
    pub subset: Option<Vec<usize>>,
    pub out: PathBuf,
}

/// Evaluates a checkpoint in the precision it was saved in.
pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let data = Dataset::open(&a.data, DatasetRole::Validation)?;
    let baseline = match &a.baseline_report {
        Some(p) => Some(read_json::<EvalReport>(p)?.per_image_miou),
        None => None,
    };
    let probe = Checkpoint::<f64>::read(&a.checkpoint)?;
    let meta = probe.manifest.clone();
    let mut report = if meta.dtype == "f32" {
        eval_checkpoint(&Checkpoint::<f32>::read(&a.checkpoint)?, a, &data, baseline.as_deref())?
    } else {
        eval_checkpoint(&probe, a, &data, baseline.as_deref())?
    };
    report.meta = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "data": a.data.display().to_string(),
        "setup": meta.setup.as_ref().map(|s| s.name.clone()),
        "iteration": meta.iteration,
        "depth_mode": meta.depth_mode,
        "dtype": meta.dtype,
    });
    write_json(&a.out, &report)?;
    Ok(report)
}

fn eval_checkpoint<T: Scalar>(ck: &Checkpoint<T>, a: &EvalArgs, data: &Dataset, baseline: Option<&[f64]>) -> Result<EvalReport> {
    if ck.model.config.num_classes != data.spec.num_classes {
        return Err(dada_core::Error::Dataset(format!(
            "model predicts {} classes but {} has {}",
            ck.model.config.num_classes,
            a.data.display(),
            data.spec.num_classes
        ))
        .into());
    }
    Ok(evaluate_model(&ck.model, ck.manifest.depth_mode, data, a.subset.as_deref(), baseline)?)
}
