//! Ablation suite: setups x seeds, an optional source-fraction sweep, one
//! directory per cell, and tables and plots aggregated from cell reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dada_core::model::DepthMode;
use dada_core::trainer::{MetricsRecord, TrainData};
use dada_core::{AblationSetup, Dataset, DatasetRole, EvalReport, ModelConfig, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{run_and_save, Precision, RunOutputs, CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE};
use crate::error::{CliError, Result};
use crate::manifest::{read_json, write_json, ExperimentManifest, RunStatus};
use crate::plot::{BarChart, Series};

pub const PLAN_FILE: &str = "plan.json";
pub const CELLS_DIR: &str = "cells";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FRACTION_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitePlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub setups: Vec<AblationSetup>,
    pub seeds: Vec<u64>,
    /// Source fractions of the sweep; empty for no sweep.
    pub fractions: Vec<f64>,
    pub fraction_setup: AblationSetup,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub setup: AblationSetup,
    pub seed: u64,
    pub fraction: f64,
}

impl CellSpec {
    pub fn new(setup: &AblationSetup, seed: u64, fraction: f64) -> Self {
        Self {
            name: format!("{}_seed{}_frac{}", setup.name, seed, fraction),
            setup: setup.clone(),
            seed,
            fraction,
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            source_fraction: self.fraction,
            ..base.clone()
        }
    }
}

/// A setup without adaptation or depth: the negative-transfer reference.
pub fn is_baseline(s: &AblationSetup) -> bool {
    !s.adapts() && s.depth_mode() == DepthMode::Bypass
}

impl SuitePlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("the suite needs at least one seed".into()));
        }
        if self.setups.is_empty() && self.fractions.is_empty() {
            return Err(CliError::Usage("nothing to run: no setups and no fractions".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::Usage(format!("source fraction {f} is outside (0, 1]")));
        }
        let mut by_name: BTreeMap<&str, &AblationSetup> = BTreeMap::new();
        for s in self.setups.iter().chain([&self.fraction_setup]) {
            s.validate()?;
            if let Some(prev) = by_name.insert(&s.name, s) {
                if prev != s {
                    return Err(CliError::Usage(format!("two different setups are named {}", s.name)));
                }
            }
        }
        self.train.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Main-table cells first, then sweep cells not already present.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for s in &self.setups {
            for &seed in &self.seeds {
                out.push(CellSpec::new(s, seed, self.train.source_fraction));
            }
        }
        for &f in &self.fractions {
            for &seed in &self.seeds {
                let c = CellSpec::new(&self.fraction_setup, seed, f);
                if !out.iter().any(|o| o.name == c.name) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// Baseline cell with the same seed and fraction, if the plan has one.
    pub fn baseline_for(&self, cell: &CellSpec) -> Option<CellSpec> {
        if is_baseline(&cell.setup) {
            return None;
        }
        self.cells()
            .into_iter()
            .find(|c| is_baseline(&c.setup) && c.seed == cell.seed && c.fraction == cell.fraction)
    }
}

/// What `plan.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan: SuitePlan,
    pub class_names: Vec<String>,
}

pub struct SuiteInputs {
    pub source: PathBuf,
    pub target: PathBuf,
    pub val: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub deterministic: bool,
    pub jobs: Option<usize>,
    pub argv: Vec<String>,
}

/// Runs every cell, then aggregates from the files the cells wrote.
pub fn run_suite(plan: &SuitePlan, inputs: &SuiteInputs, out: &Path, opts: &SuiteOptions) -> Result<SuiteSummary> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let names = |v: &[AblationSetup]| v.iter().map(|s| s.name.clone()).collect::<Vec<_>>().join(",");
    let mut manifest = ExperimentManifest::new("ablate", opts.argv.clone(), opts.deterministic)
        .with_config("model", &plan.model)
        .with_config("train", &plan.train)
        .with_dataset("source", &inputs.source)?
        .with_dataset("target", &inputs.target)?
        .with_dataset("validation", &inputs.val)?
        .with_param("setups", names(&plan.setups))
        .with_param("fractions", plan.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        .with_param("fraction_setup", &plan.fraction_setup)
        .with_param("precision", plan.precision);
    manifest.seeds = plan.seeds.clone();
    manifest.write(out)?;

    let result = execute(plan, inputs, out, opts).and_then(|_| aggregate(out));
    manifest.finish(match &result {
        Ok(s) => match s.failed_cells.first() {
            None => RunStatus::Completed,
            Some(first) => RunStatus::Failed {
                exit_code: first.exit_code,
                message: format!("{} of {} cells failed", s.failed_cells.len(), s.cells.len()),
            },
        },
        Err(e) => RunStatus::Failed {
            exit_code: e.exit_code(),
            message: e.to_string(),
        },
    });
    manifest.write(out)?;
    result
}

struct Opened {
    source: Dataset,
    target: Dataset,
    val: Dataset,
}

fn execute(plan: &SuitePlan, inputs: &SuiteInputs, out: &Path, opts: &SuiteOptions) -> Result<()> {
    let data = Opened {
        source: Dataset::open(&inputs.source, DatasetRole::LabeledSource)?,
        target: Dataset::open(&inputs.target, DatasetRole::UnlabeledTarget)?,
        val: Dataset::open(&inputs.val, DatasetRole::Validation)?,
    };
    TrainData {
        source: &data.source,
        target: &data.target,
        validation: Some(&data.val),
    }
    .validate(&plan.model)?;
    write_json(
        &out.join(PLAN_FILE),
        &PlanRecord {
            plan: plan.clone(),
            class_names: data.val.spec.class_names.clone(),
        },
    )?;
    let cells_dir = out.join(CELLS_DIR);
    let (first, second): (Vec<CellSpec>, Vec<CellSpec>) = plan.cells().into_iter().partition(|c| is_baseline(&c.setup));

    let run = |c: &CellSpec, baseline: Option<&[f64]>| run_cell(plan, c, &data, &cells_dir, baseline, opts.deterministic);
    let baselines: BTreeMap<String, Vec<f64>> = map_cells(&first, opts, |c| run(c, None).map(|r| (c.name.clone(), r.per_image_miou)))?
        .into_iter()
        .flatten()
        .collect();
    map_cells(&second, opts, |c| {
        let b = plan.baseline_for(c).and_then(|b| baselines.get(&b.name));
        run(c, b.map(Vec::as_slice)).map(|_| ())
    })?;
    Ok(())
}

/// One rayon task per cell. Deterministic mode runs cells one after another
/// unless a worker count is given; each cell computes on a single thread
/// either way, so its outputs do not depend on the schedule.
fn map_cells<R: Send>(cells: &[CellSpec], opts: &SuiteOptions, f: impl Fn(&CellSpec) -> R + Sync) -> Result<Vec<R>> {
    if opts.deterministic && opts.jobs.is_none() {
        return Ok(cells.iter().map(f).collect());
    }
    match opts.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("--jobs {n}: {e}")))?;
            Ok(pool.install(|| cells.par_iter().map(&f).collect()))
        }
        None => Ok(cells.par_iter().map(&f).collect()),
    }
}

/// Trains and evaluates one cell. Failures are recorded in the cell's
/// manifest and returned as `None`.
fn run_cell(
    plan: &SuitePlan,
    cell: &CellSpec,
    data: &Opened,
    cells_dir: &Path,
    baseline: Option<&[f64]>,
    deterministic: bool,
) -> Option<EvalReport> {
    let dir = cells_dir.join(&cell.name);
    let cfg = cell.train_config(&plan.train);
    let started = Instant::now();
    let mut manifest = ExperimentManifest::new("ablate-cell", Vec::new(), deterministic)
        .with_config("model", &plan.model)
        .with_config("train", &cfg)
        .with_param("cell", &cell.name)
        .with_param("setup", &cell.setup)
        .with_param("fraction", cell.fraction)
        .with_param("precision", plan.precision);
    manifest.seeds = vec![cell.seed];
    if let Some(b) = plan.baseline_for(cell) {
        manifest = manifest.with_param("baseline", b.name);
    }
    let result = fs::create_dir_all(&dir)
        .map_err(|e| CliError::io(&dir, e))
        .and_then(|_| manifest.write(&dir))
        .and_then(|_| train_cell(plan, cell, &cfg, data, &dir, baseline));
    manifest.finish(crate::commands::status_of(&result));
    if let Err(e) = manifest.write(&dir) {
        log::error!("{}: cannot record outcome: {e}", cell.name);
    }
    match result {
        Ok(r) => {
            log::info!("{}: mIoU {:.2} ({:.1}s)", cell.name, 100.0 * r.miou, started.elapsed().as_secs_f64());
            Some(r)
        }
        Err(e) => {
            log::error!("{}: {e}", cell.name);
            None
        }
    }
}

fn train_cell(
    plan: &SuitePlan,
    cell: &CellSpec,
    cfg: &TrainConfig,
    data: &Opened,
    dir: &Path,
    baseline: Option<&[f64]>,
) -> Result<EvalReport> {
    // private copies so the access audit covers this cell only
    let source = data.source.with_role(DatasetRole::LabeledSource)?;
    let target = data.target.with_role(DatasetRole::UnlabeledTarget)?;
    let td = TrainData {
        source: &source,
        target: &target,
        validation: Some(&data.val),
    };
    let metrics = dir.join(METRICS_FILE);
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let outputs = RunOutputs {
        metrics: &metrics,
        append_metrics: false,
        checkpoint: &checkpoint,
        baseline,
    };
    let report = match plan.precision {
        Precision::F32 => run_and_save::<f32>(&plan.model, cfg, &cell.setup, &td, None, None, &outputs)?.1,
        Precision::F64 => run_and_save::<f64>(&plan.model, cfg, &cell.setup, &td, None, None, &outputs)?.1,
    };
    let mut report = report.ok_or_else(|| CliError::Usage(format!("{}: training stopped early", cell.name)))?;
    let (src, tgt) = (source.access().summary(), target.access().summary());
    report.meta = json!({
        "cell": cell.name,
        "setup": cell.setup.name,
        "seed": cell.seed,
        "fraction": cell.fraction,
        "iteration": cfg.iterations,
        "depth_mode": cell.setup.depth_mode(),
        "baseline": plan.baseline_for(cell).map(|b| b.name),
        "source_distinct_images": src.distinct_images,
        "source_depth_reads": src.depth_reads,
        "target_image_reads": tgt.image_reads,
        "target_label_reads": tgt.label_reads,
        "target_depth_reads": tgt.depth_reads,
    });
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self {
            runs: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        })
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub setup: String,
    pub seed: u64,
    pub fraction: f64,
    pub status: RunStatus,
    pub miou: Option<f64>,
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub negative_transfer_rate: Option<f64>,
    pub source_distinct_images: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub name: String,
    pub exit_code: i32,
    pub message: String,
}

/// One table row; IoU values are in points (0-100).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupRow {
    pub setup: String,
    pub surp_adapt: bool,
    pub depth_adapt: bool,
    pub feat_fusion: bool,
    pub dada_fusion: bool,
    pub miou: Option<Stats>,
    pub per_class_iou: Vec<Option<f64>>,
    pub negative_transfer_rate: Option<Stats>,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub miou: Option<Stats>,
    pub source_distinct_images: Vec<u64>,
    pub failed: usize,
}

/// Median differences in points between named setups.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    pub s2_minus_s1: Option<f64>,
    pub s7_minus_s1: Option<f64>,
    pub s7_minus_s2: Option<f64>,
    /// Whether each of S2..S6 has median mIoU at least that of S1.
    pub at_least_s1: BTreeMap<String, bool>,
    pub fraction_monotone: Option<bool>,
    pub full_minus_tenth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub class_names: Vec<String>,
    pub main_fraction: f64,
    pub fraction_setup: String,
    pub rows: Vec<SetupRow>,
    pub fractions: Vec<FractionRow>,
    pub checks: Checks,
    pub cells: Vec<CellResult>,
    pub failed_cells: Vec<FailedCell>,
}

impl SuiteSummary {
    pub fn row(&self, setup: &str) -> Option<&SetupRow> {
        self.rows.iter().find(|r| r.setup == setup)
    }

    pub fn median(&self, setup: &str) -> Option<f64> {
        self.row(setup).and_then(|r| r.miou).map(|s| s.median)
    }

    pub fn fraction(&self, f: f64) -> Option<&FractionRow> {
        self.fractions.iter().find(|r| r.fraction == f)
    }
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    cell: String,
    fraction: f64,
    #[serde(flatten)]
    record: MetricsRecord,
}

fn read_cell(dir: &Path, spec: &CellSpec) -> Result<CellResult> {
    let status = match ExperimentManifest::read(dir) {
        Ok(m) => m.status,
        Err(e) => RunStatus::Failed {
            exit_code: e.exit_code(),
            message: format!("cell never started: {e}"),
        },
    };
    let report = match status {
        RunStatus::Completed => Some(read_json::<EvalReport>(&dir.join(REPORT_FILE))?),
        _ => None,
    };
    Ok(CellResult {
        name: spec.name.clone(),
        setup: spec.setup.name.clone(),
        seed: spec.seed,
        fraction: spec.fraction,
        status,
        miou: report.as_ref().map(|r| r.miou),
        per_class_iou: report.as_ref().map(|r| r.per_class_iou.clone()),
        negative_transfer_rate: report.as_ref().and_then(|r| r.negative_transfer_rate),
        source_distinct_images: report.as_ref().and_then(|r| r.meta["source_distinct_images"].as_u64()),
    })
}

/// Rebuilds every table, plot and the combined metrics log of a suite
/// directory from its cell files.
pub fn aggregate(out: &Path) -> Result<SuiteSummary> {
    let record: PlanRecord = read_json(&out.join(PLAN_FILE))?;
    let plan = &record.plan;
    let cells_dir = out.join(CELLS_DIR);
    let specs = plan.cells();
    let cells = specs
        .iter()
        .map(|s| read_cell(&cells_dir.join(&s.name), s))
        .collect::<Result<Vec<_>>>()?;
    write_combined_metrics(out, &cells_dir, &specs)?;

    let nc = record.class_names.len();
    let main = plan.train.source_fraction;
    let completed = |setup: &str, fraction: f64| -> Vec<&CellResult> {
        cells
            .iter()
            .filter(|c| c.setup == setup && c.fraction == fraction && c.status == RunStatus::Completed)
            .collect()
    };
    let failed_in = |setup: &str, fraction: f64| {
        cells
            .iter()
            .filter(|c| c.setup == setup && c.fraction == fraction && c.status != RunStatus::Completed)
            .count()
    };
    let rows: Vec<SetupRow> = plan
        .setups
        .iter()
        .map(|s| {
            let done = completed(&s.name, main);
            let mious: Vec<f64> = done.iter().filter_map(|c| c.miou).map(|m| 100.0 * m).collect();
            let per_class = (0..nc)
                .map(|k| {
                    let v: Vec<f64> = done
                        .iter()
                        .filter_map(|c| c.per_class_iou.as_ref().and_then(|p| p.get(k).copied().flatten()))
                        .collect();
                    (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            let nt: Vec<f64> = done.iter().filter_map(|c| c.negative_transfer_rate).collect();
            SetupRow {
                setup: s.name.clone(),
                surp_adapt: s.surp_adapt,
                depth_adapt: s.depth_adapt,
                feat_fusion: s.feat_fusion,
                dada_fusion: s.dada_fusion,
                miou: Stats::of(&mious),
                per_class_iou: per_class,
                negative_transfer_rate: Stats::of(&nt),
                failed: failed_in(&s.name, main),
            }
        })
        .collect();
    let mut fractions: Vec<FractionRow> = plan
        .fractions
        .iter()
        .map(|&f| {
            let done = completed(&plan.fraction_setup.name, f);
            let mious: Vec<f64> = done.iter().filter_map(|c| c.miou).map(|m| 100.0 * m).collect();
            FractionRow {
                fraction: f,
                miou: Stats::of(&mious),
                source_distinct_images: done.iter().filter_map(|c| c.source_distinct_images).collect(),
                failed: failed_in(&plan.fraction_setup.name, f),
            }
        })
        .collect();
    fractions.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    fractions.dedup_by(|a, b| a.fraction == b.fraction);

    let failed_cells = cells
        .iter()
        .filter_map(|c| match &c.status {
            RunStatus::Completed => None,
            RunStatus::Failed { exit_code, message } => Some(FailedCell {
                name: c.name.clone(),
                exit_code: *exit_code,
                message: message.clone(),
            }),
            RunStatus::Running => Some(FailedCell {
                name: c.name.clone(),
                exit_code: crate::error::EXIT_DATA,
                message: "cell did not finish".into(),
            }),
        })
        .collect();
    let mut summary = SuiteSummary {
        class_names: record.class_names.clone(),
        main_fraction: main,
        fraction_setup: plan.fraction_setup.name.clone(),
        rows,
        fractions,
        checks: Checks::default(),
        cells,
        failed_cells,
    };
    summary.checks = checks(&summary);

    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_tables(out, &summary)?;
    let text = render_summary(&summary);
    fs::write(out.join("summary.txt"), &text).map_err(|e| CliError::io(&out.join("summary.txt"), e))?;
    write_plots(out, &summary)?;
    Ok(summary)
}

fn checks(s: &SuiteSummary) -> Checks {
    let diff = |a: &str, b: &str| Some(s.median(a)? - s.median(b)?);
    let at_least_s1 = match s.median("S1") {
        Some(base) => ["S2", "S3", "S4", "S5", "S6"]
            .iter()
            .filter_map(|n| s.median(n).map(|m| (n.to_string(), m >= base)))
            .collect(),
        None => BTreeMap::new(),
    };
    let medians: Vec<f64> = s.fractions.iter().filter_map(|r| r.miou.map(|m| m.median)).collect();
    let full_minus_tenth = match (s.fraction(1.0).and_then(|r| r.miou), s.fraction(0.1).and_then(|r| r.miou)) {
        (Some(a), Some(b)) => Some(a.median - b.median),
        _ => None,
    };
    Checks {
        s2_minus_s1: diff("S2", "S1"),
        s7_minus_s1: diff("S7", "S1"),
        s7_minus_s2: diff("S7", "S2"),
        at_least_s1,
        fraction_monotone: (medians.len() >= 2).then(|| medians.windows(2).all(|w| w[1] >= w[0])),
        full_minus_tenth,
    }
}

fn write_combined_metrics(out: &Path, cells_dir: &Path, specs: &[CellSpec]) -> Result<()> {
    let path = out.join(METRICS_FILE);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for spec in specs {
        let src = cells_dir.join(&spec.name).join(METRICS_FILE);
        let Ok(f) = File::open(&src) else { continue };
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| CliError::io(&src, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: MetricsRecord = serde_json::from_str(&line).map_err(|e| CliError::json(&src, e))?;
            let rec = CellRecord {
                cell: spec.name.clone(),
                fraction: spec.fraction,
                record,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| CliError::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| CliError::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_tables(out: &Path, s: &SuiteSummary) -> Result<()> {
    let flag = |b: bool| if b { "x" } else { "" }.to_string();
    let mut header: Vec<String> = ["setup", "surp_adapt", "depth_adapt", "feat_fusion", "dada_fusion", "runs", "failed"]
        .map(String::from)
        .to_vec();
    header.extend(s.class_names.iter().cloned());
    header.extend(
        ["miou_mean", "miou_median", "miou_min", "miou_max", "miou_spread", "nt_rate_mean"].map(String::from),
    );
    let rows = s
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.setup.clone(),
                flag(r.surp_adapt),
                flag(r.depth_adapt),
                flag(r.feat_fusion),
                flag(r.dada_fusion),
                r.miou.map_or(0, |m| m.runs).to_string(),
                r.failed.to_string(),
            ];
            row.extend(r.per_class_iou.iter().map(|v| opt(*v)));
            row.extend([
                opt(r.miou.map(|m| m.mean)),
                opt(r.miou.map(|m| m.median)),
                opt(r.miou.map(|m| m.min)),
                opt(r.miou.map(|m| m.max)),
                opt(r.miou.map(|m| m.spread())),
                r.negative_transfer_rate.map(|n| format!("{:.4}", n.mean)).unwrap_or_default(),
            ]);
            row
        })
        .collect();
    csv_rows(&out.join("ablation.csv"), header, rows)?;

    let runs = s
        .cells
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.setup.clone(),
                c.seed.to_string(),
                c.fraction.to_string(),
                match &c.status {
                    RunStatus::Completed => "completed".into(),
                    RunStatus::Running => "incomplete".into(),
                    RunStatus::Failed { exit_code, .. } => format!("failed({exit_code})"),
                },
                c.miou.map(|m| m.to_string()).unwrap_or_default(),
                c.negative_transfer_rate.map(|m| m.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let header = ["cell", "setup", "seed", "fraction", "status", "miou", "negative_transfer_rate"]
        .map(String::from)
        .to_vec();
    csv_rows(&out.join("runs.csv"), header, runs)?;

    if !s.fractions.is_empty() {
        let header = ["fraction", "runs", "failed", "miou_mean", "miou_median", "miou_min", "miou_max", "source_images"]
            .map(String::from)
            .to_vec();
        let rows = s
            .fractions
            .iter()
            .map(|r| {
                vec![
                    r.fraction.to_string(),
                    r.miou.map_or(0, |m| m.runs).to_string(),
                    r.failed.to_string(),
                    opt(r.miou.map(|m| m.mean)),
                    opt(r.miou.map(|m| m.median)),
                    opt(r.miou.map(|m| m.min)),
                    opt(r.miou.map(|m| m.max)),
                    r.source_distinct_images
                        .iter()
                        .map(u64::to_string)
                        .collect::<Vec<_>>()
                        .join(" "),
                ]
            })
            .collect();
        csv_rows(&out.join("fractions.csv"), header, rows)?;
    }
    Ok(())
}

/// Plain-text rendering of the summary tables.
pub fn render_summary(s: &SuiteSummary) -> String {
    let mut t = String::new();
    let yn = |b: bool| if b { "x" } else { "-" };
    let _ = writeln!(t, "target mIoU by setup (points; source fraction {})", s.main_fraction);
    let _ = writeln!(
        t,
        "{:<8} {:>4} {:>5} {:>4} {:>4} {:>4} {:>7} {:>7} {:>15} {:>8}",
        "setup", "surp", "depth", "feat", "dada", "runs", "mean", "median", "min-max", "NT"
    );
    for r in &s.rows {
        let (mean, median, range) = match r.miou {
            Some(m) => (format!("{:.2}", m.mean), format!("{:.2}", m.median), format!("{:.2}-{:.2}", m.min, m.max)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let nt = r.negative_transfer_rate.map(|n| format!("{:.1}%", 100.0 * n.mean)).unwrap_or("-".into());
        let _ = writeln!(
            t,
            "{:<8} {:>4} {:>5} {:>4} {:>4} {:>4} {:>7} {:>7} {:>15} {:>8}",
            r.setup,
            yn(r.surp_adapt),
            yn(r.depth_adapt),
            yn(r.feat_fusion),
            yn(r.dada_fusion),
            r.miou.map_or(0, |m| m.runs),
            mean,
            median,
            range,
            nt
        );
    }
    if !s.rows.is_empty() {
        let _ = writeln!(t, "\nper-class IoU (mean over runs, points)");
        let _ = write!(t, "{:<8}", "setup");
        for n in &s.class_names {
            let _ = write!(t, " {:>12}", n);
        }
        let _ = writeln!(t);
        for r in &s.rows {
            let _ = write!(t, "{:<8}", r.setup);
            for v in &r.per_class_iou {
                let _ = write!(t, " {:>12}", v.map(|x| format!("{x:.2}")).unwrap_or("-".into()));
            }
            let _ = writeln!(t);
        }
    }
    let c = &s.checks;
    let signed = |v: Option<f64>| v.map(|x| format!("{x:+.2}")).unwrap_or("n/a".into());
    let _ = writeln!(t, "\nranking (median mIoU differences, points)");
    let _ = writeln!(t, "  S2 - S1 = {}", signed(c.s2_minus_s1));
    let _ = writeln!(t, "  S7 - S1 = {}", signed(c.s7_minus_s1));
    let _ = writeln!(t, "  S7 - S2 = {}", signed(c.s7_minus_s2));
    for (name, ok) in &c.at_least_s1 {
        let _ = writeln!(t, "  {name} >= S1: {}", if *ok { "yes" } else { "no" });
    }
    if !s.fractions.is_empty() {
        let _ = writeln!(t, "\nsource-fraction sweep ({})", s.fraction_setup);
        for r in &s.fractions {
            let m = r
                .miou
                .map(|m| format!("median {:.2}  mean {:.2}  min-max {:.2}-{:.2}", m.median, m.mean, m.min, m.max))
                .unwrap_or("no completed runs".into());
            let _ = writeln!(t, "  {:>4}: {m}", r.fraction);
        }
        let mono = match c.fraction_monotone {
            Some(true) => "non-decreasing",
            Some(false) => "not monotone",
            None => "n/a",
        };
        let _ = writeln!(t, "  medians across fractions: {mono}");
        let _ = writeln!(t, "  1.0 - 0.1 = {}", signed(c.full_minus_tenth));
    }
    if !s.failed_cells.is_empty() {
        let _ = writeln!(t, "\nfailed cells");
        for f in &s.failed_cells {
            let _ = writeln!(t, "  {} (exit {}): {}", f.name, f.exit_code, f.message);
        }
    }
    t
}

fn write_plots(out: &Path, s: &SuiteSummary) -> Result<()> {
    if !s.rows.is_empty() {
        let categories: Vec<String> = s.rows.iter().map(|r| r.setup.clone()).collect();
        BarChart {
            title: "TARGET MIOU BY SETUP".into(),
            y_label: "MIOU".into(),
            categories: categories.clone(),
            series: vec![Series {
                name: "mIoU".into(),
                values: s.rows.iter().map(|r| r.miou.map(|m| m.mean)).collect(),
                spread: s.rows.iter().map(|r| r.miou.map(|m| (m.min, m.max))).collect(),
            }],
        }
        .save(&out.join("miou_by_setup.png"))?;
        BarChart {
            title: "PER-CLASS IOU".into(),
            y_label: "IOU".into(),
            categories,
            series: s
                .class_names
                .iter()
                .enumerate()
                .map(|(k, n)| Series {
                    name: n.clone(),
                    values: s.rows.iter().map(|r| r.per_class_iou.get(k).copied().flatten()).collect(),
                    spread: Vec::new(),
                })
                .collect(),
        }
        .save(&out.join("per_class_iou.png"))?;
    }
    if !s.fractions.is_empty() {
        BarChart {
            title: format!("{} MIOU BY SOURCE FRACTION", s.fraction_setup),
            y_label: "MIOU".into(),
            categories: s.fractions.iter().map(|r| format!("{:.0}%", 100.0 * r.fraction)).collect(),
            series: vec![Series {
                name: "mIoU".into(),
                values: s.fractions.iter().map(|r| r.miou.map(|m| m.mean)).collect(),
                spread: s.fractions.iter().map(|r| r.miou.map(|m| (m.min, m.max))).collect(),
            }],
        }
        .save(&out.join("fraction_sweep.png"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(setups: &[&str], seeds: &[u64], fractions: &[f64]) -> SuitePlan {
        SuitePlan {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            setups: setups.iter().map(|s| AblationSetup::preset(s).unwrap()).collect(),
            seeds: seeds.to_vec(),
            fractions: fractions.to_vec(),
            fraction_setup: AblationSetup::preset("S7").unwrap(),
            precision: Precision::F32,
        }
    }

    #[test]
    fn stats_of_three() {
        let s = Stats::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.runs, s.mean, s.median, s.min, s.max), (3, 2.0, 2.0, 1.0, 3.0));
        assert_eq!(Stats::of(&[1.0, 4.0]).unwrap().median, 2.5);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn cells_cover_table_and_sweep_without_duplicates() {
        let p = plan(&["S1", "S7"], &[0, 1, 2], &[0.1, 1.0]);
        let cells = p.cells();
        assert_eq!(cells.len(), 2 * 3 + 3);
        assert!(cells.iter().any(|c| c.name == "S7_seed2_frac0.1"));
        let s7 = cells.iter().find(|c| c.name == "S7_seed1_frac1").unwrap();
        assert_eq!(p.baseline_for(s7).unwrap().name, "S1_seed1_frac1");
        let sweep = cells.iter().find(|c| c.name == "S7_seed1_frac0.1").unwrap();
        assert!(p.baseline_for(sweep).is_none());
    }

    #[test]
    fn plan_validation() {
        assert!(plan(&["S1"], &[], &[]).validate().is_err());
        assert!(plan(&["S1"], &[0], &[0.0]).validate().is_err());
        assert!(plan(&[], &[0], &[]).validate().is_err());
        assert!(plan(&["S1"], &[0], &[]).validate().is_ok());
    }
}
