//! Alternating adversarial training and the S1-S7 ablation presets.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, Var};
use crate::dataset::{prefix_len, Dataset, DatasetRole};
use crate::error::{Error, Result};
use crate::losses::{berhu_threshold, LossValues};
use crate::maps::{LabelMap, SoftSegMap};
use crate::metrics::EvalReport;
use crate::model::{init_discriminator, init_model, DepthMode, DiscriminatorConfig, DiscriminatorParams, GraphOutputs, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig, LrSchedule, Sgd, SgdConfig};
use crate::params::{Binding, BoundParams};
use crate::scalar::Scalar;
use crate::synthdata::sample_seed;
use crate::tensor::Tensor;
use crate::fusion::SURPRISAL_LOG_BASE;

/// Order of the two sub-updates inside a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    DiscriminatorFirst,
    GeneratorFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_dep: f64,
    pub lambda_adv: f64,
    pub gen_lr: f64,
    pub gen_momentum: f64,
    pub gen_weight_decay: f64,
    pub disc_lr: f64,
    pub disc_beta1: f64,
    pub disc_beta2: f64,
    pub disc_base_width: usize,
    pub iterations: u64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub eval_every: u64,
    pub berhu_fraction: f64,
    pub source_fraction: f64,
    pub update_order: UpdateOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_dep: 1e-3,
            lambda_adv: 1e-3,
            gen_lr: 2.5e-4,
            gen_momentum: 0.9,
            gen_weight_decay: 1e-4,
            disc_lr: 1e-4,
            disc_beta1: 0.9,
            disc_beta2: 0.999,
            disc_base_width: 64,
            iterations: 2000,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            eval_every: 0,
            berhu_fraction: crate::losses::BERHU_FRACTION,
            source_fraction: 1.0,
            update_order: UpdateOrder::DiscriminatorFirst,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_dep", self.lambda_dep),
            ("lambda_adv", self.lambda_adv),
            ("gen_weight_decay", self.gen_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("gen_momentum", self.gen_momentum),
            ("disc_beta1", self.disc_beta1),
            ("disc_beta2", self.disc_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.berhu_fraction > 0.0 && self.berhu_fraction <= 1.0) {
            return bad(format!("berhu_fraction must lie in (0, 1], got {}", self.berhu_fraction));
        }
        if !(self.source_fraction > 0.0 && self.source_fraction <= 1.0) {
            return bad(format!("source_fraction must lie in (0, 1], got {}", self.source_fraction));
        }
        if self.disc_base_width == 0 {
            return bad("disc_base_width must be >= 1".into());
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power > 0.0 && power.is_finite()) {
                return bad(format!("poly power must be > 0, got {power}"));
            }
        }
        Ok(())
    }

    fn derived_seed(&self, tag: u64) -> u64 {
        sample_seed(self.seed, tag)
    }

    pub fn model_seed(&self) -> u64 {
        self.derived_seed(0x6d6f_64656c)
    }

    pub fn disc_seed(&self, space: AlignedSpace) -> u64 {
        self.derived_seed(0x6469_7363 + space as u64)
    }
}

/// Which network output a discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignedSpace {
    /// Surprisal map, optionally weighted by predicted depth (C channels).
    Main = 0,
    /// Predicted inverse depth (1 channel).
    Depth = 1,
}

/// One row of the ablation switch matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub name: String,
    pub surp_adapt: bool,
    pub depth_adapt: bool,
    pub feat_fusion: bool,
    pub dada_fusion: bool,
}

pub const PRESET_NAMES: [&str; 7] = ["S1", "S2", "S3", "S4", "S5", "S6", "S7"];

impl AblationSetup {
    pub fn new(name: &str, surp_adapt: bool, depth_adapt: bool, feat_fusion: bool, dada_fusion: bool) -> Result<Self> {
        let s = Self {
            name: name.to_string(),
            surp_adapt,
            depth_adapt,
            feat_fusion,
            dada_fusion,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dada_fusion && !(self.surp_adapt && self.depth_adapt && self.feat_fusion) {
            return Err(Error::Config(format!(
                "setup {}: DADA fusion requires surprisal adaptation, depth adaptation and feature fusion",
                self.name
            )));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (s, d, f, x) = match name.to_ascii_uppercase().as_str() {
            "S1" => (false, false, false, false),
            "S2" => (true, false, false, false),
            "S3" => (true, false, true, false),
            "S4" => (false, true, false, false),
            "S5" => (false, true, true, false),
            "S6" => (true, true, true, false),
            "S7" => (true, true, true, true),
            other => return Err(Error::Config(format!("unknown ablation preset {other:?} (expected S1..S7)"))),
        };
        Self::new(&name.to_ascii_uppercase(), s, d, f, x)
    }

    pub fn all_presets() -> Vec<Self> {
        PRESET_NAMES.iter().map(|n| Self::preset(n).expect("built-in preset")).collect()
    }

    /// Architecture used for training and evaluation.
    pub fn depth_mode(&self) -> DepthMode {
        if self.feat_fusion {
            DepthMode::Active
        } else if self.depth_adapt {
            DepthMode::UnitFusion
        } else {
            DepthMode::Bypass
        }
    }

    pub fn adapts(&self) -> bool {
        self.surp_adapt || self.depth_adapt
    }

    /// Discriminator spaces trained under this setup.
    pub fn aligned_spaces(&self) -> Vec<AlignedSpace> {
        let mut out = Vec::new();
        if self.surp_adapt {
            out.push(AlignedSpace::Main);
        }
        if self.depth_adapt && !self.dada_fusion {
            out.push(AlignedSpace::Depth);
        }
        out
    }
}

impl FromStr for AblationSetup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s)
    }
}

impl fmt::Display for AblationSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Sums of per-step loss terms since the last snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLosses {
    pub steps: u64,
    pub seg_loss: f64,
    pub depth_loss: f64,
    pub source_objective: f64,
    pub d_loss: f64,
    pub adv_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanLosses {
    pub seg_loss: f64,
    pub depth_loss: f64,
    pub source_objective: f64,
    pub d_loss: Option<f64>,
    pub adv_loss: Option<f64>,
}

impl RunningLosses {
    pub fn add(&mut self, l: &LossValues) {
        self.steps += 1;
        self.seg_loss += l.seg_loss;
        self.depth_loss += l.depth_loss;
        self.source_objective += l.source_objective;
        self.d_loss += l.d_loss.unwrap_or(0.0);
        self.adv_loss += l.adv_loss.unwrap_or(0.0);
    }

    pub fn means(&self, adversarial: bool) -> Option<MeanLosses> {
        if self.steps == 0 {
            return None;
        }
        let n = self.steps as f64;
        Some(MeanLosses {
            seg_loss: self.seg_loss / n,
            depth_loss: self.depth_loss / n,
            source_objective: self.source_objective / n,
            d_loss: adversarial.then(|| self.d_loss / n),
            adv_loss: adversarial.then(|| self.adv_loss / n),
        })
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub iteration: u64,
    pub model: ModelParams<T>,
    pub disc_main: DiscriminatorParams<T>,
    pub disc_depth: DiscriminatorParams<T>,
    pub gen_opt: Sgd<T>,
    pub disc_main_opt: Adam<T>,
    pub disc_depth_opt: Adam<T>,
    pub running: RunningLosses,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = init_model(model_cfg, cfg.model_seed())?;
        let main_cfg = DiscriminatorConfig::with_base_width(model_cfg.num_classes, cfg.disc_base_width);
        let depth_cfg = DiscriminatorConfig::with_base_width(1, cfg.disc_base_width);
        let adam = AdamConfig {
            beta1: cfg.disc_beta1,
            beta2: cfg.disc_beta2,
            ..AdamConfig::default()
        };
        Ok(Self {
            iteration: 0,
            model,
            disc_main: init_discriminator(&main_cfg, cfg.disc_seed(AlignedSpace::Main))?,
            disc_depth: init_discriminator(&depth_cfg, cfg.disc_seed(AlignedSpace::Depth))?,
            gen_opt: Sgd::new(SgdConfig {
                momentum: cfg.gen_momentum,
                weight_decay: cfg.gen_weight_decay,
            }),
            disc_main_opt: Adam::new(adam),
            disc_depth_opt: Adam::new(adam),
            running: RunningLosses::default(),
        })
    }

    pub fn disc(&self, space: AlignedSpace) -> &DiscriminatorParams<T> {
        match space {
            AlignedSpace::Main => &self.disc_main,
            AlignedSpace::Depth => &self.disc_depth,
        }
    }

    pub fn discriminator_fingerprint(&self) -> u64 {
        self.disc_main.store.fingerprint() ^ self.disc_depth.store.fingerprint().rotate_left(1)
    }
}

/// One source sample and one target image.
pub struct Batch<'b, T> {
    pub source_image: &'b Tensor<T>,
    pub source_labels: &'b LabelMap,
    pub source_depth: Option<&'b Tensor<T>>,
    pub target_image: &'b Tensor<T>,
}

/// Parameter hashes taken around each sub-update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationAudit {
    pub model_before_disc_update: u64,
    pub model_after_disc_update: u64,
    pub disc_before_gen_update: u64,
    pub disc_after_gen_update: u64,
}

impl IsolationAudit {
    pub fn isolated(&self) -> bool {
        self.model_before_disc_update == self.model_after_disc_update
            && self.disc_before_gen_update == self.disc_after_gen_update
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossValues,
    pub audit: Option<IsolationAudit>,
    /// Names of generator parameters that received a nonzero gradient.
    pub generator_grad_names: Vec<String>,
}

fn check(iteration: u64, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { iteration, term })
    }
}

/// Discriminator inputs for one forward pass, per aligned space.
fn aligned_reps<T: Scalar>(g: &mut Graph<'_, T>, setup: &AblationSetup, out: &GraphOutputs) -> Result<Vec<(AlignedSpace, Var)>> {
    let mut reps = Vec::new();
    if setup.surp_adapt {
        let i = g.self_information(out.seg, T::lit(SURPRISAL_LOG_BASE));
        let rep = if setup.dada_fusion {
            let z = out.depth.ok_or_else(|| Error::Config("DADA fusion needs the depth branch".into()))?;
            g.mul_planes(i, z)?
        } else {
            i
        };
        reps.push((AlignedSpace::Main, rep));
    }
    if setup.depth_adapt && !setup.dada_fusion {
        let z = out.depth.ok_or_else(|| Error::Config("depth adaptation needs the depth branch".into()))?;
        reps.push((AlignedSpace::Depth, z));
    }
    Ok(reps)
}

/// Minimizes the domain classification loss on detached representations.
/// Returns the loss before the update.
pub fn discriminator_update<T: Scalar>(
    disc: &mut DiscriminatorParams<T>,
    opt: &mut Adam<T>,
    source_rep: &Tensor<T>,
    target_rep: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let mut vars = BoundParams::new(&disc.store, Binding::Trainable);
        let xs = g.constant_ref(source_rep);
        let xt = g.constant_ref(target_rep);
        let ss = disc.forward_graph(&mut g, &mut vars, xs)?;
        let st = disc.forward_graph(&mut g, &mut vars, xt)?;
        let ls = g.domain_bce(ss, T::one());
        let lt = g.domain_bce(st, T::zero());
        let l = g.add(ls, lt)?;
        let value = g.value(l).data()[0].as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(l)?;
        (value, g.param_grads(&grads))
    };
    opt.step(&mut disc.store, &grads, lr);
    Ok(loss)
}

/// Domain classification loss of `disc` on a (source, target) pair.
pub fn discriminator_loss<T: Scalar>(disc: &DiscriminatorParams<T>, source_rep: &Tensor<T>, target_rep: &Tensor<T>) -> Result<f64> {
    let ss = crate::model::discriminator_forward(disc, source_rep)?;
    let st = crate::model::discriminator_forward(disc, target_rep)?;
    Ok(crate::losses::domain_bce_slice(ss.data(), T::one()).as_f64()
        + crate::losses::domain_bce_slice(st.data(), T::zero()).as_f64())
}

/// One iteration: a discriminator update and a generator update in the
/// configured order. With `audit`, parameter hashes are taken around both.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    setup: &AblationSetup,
    batch: &Batch<'_, T>,
    audit: bool,
) -> Result<StepReport> {
    setup.validate()?;
    let it = state.iteration;
    let gen_lr = cfg.lr_schedule.rate(cfg.gen_lr, it, cfg.iterations);
    let disc_lr = cfg.lr_schedule.rate(cfg.disc_lr, it, cfg.iterations);
    let mode = setup.depth_mode();
    let lambda_dep = if mode == DepthMode::Bypass { 0.0 } else { cfg.lambda_dep };
    let spaces = setup.aligned_spaces();
    let disc_first = cfg.update_order == UpdateOrder::DiscriminatorFirst;
    let mut fp = IsolationAudit {
        model_before_disc_update: 0,
        model_after_disc_update: 0,
        disc_before_gen_update: 0,
        disc_after_gen_update: 0,
    };

    let TrainState {
        model,
        disc_main,
        disc_depth,
        gen_opt,
        disc_main_opt,
        disc_depth_opt,
        ..
    } = state;

    let mut losses = LossValues::default();
    let (gen_grads, reps) = {
        let mut g = Graph::new();
        let mut mv = BoundParams::new(&model.store, Binding::Trainable);

        let xs = g.constant_ref(batch.source_image);
        let os = model.forward_graph(&mut g, &mut mv, xs, mode)?;
        let seg = g.seg_nll(os.seg, &batch.source_labels.data)?;
        losses.seg_loss = check(it, "seg_loss", g.value(seg).data()[0].as_f64())?;
        let mut total = seg;
        if let Some(z) = os.depth {
            let target = batch
                .source_depth
                .ok_or_else(|| Error::Dataset("depth supervision needs source inverse depth".into()))?;
            let c = berhu_threshold(g.value(z).data(), target.data(), T::lit(cfg.berhu_fraction));
            let dep = g.berhu_mean(z, target, c)?;
            losses.depth_loss = check(it, "depth_loss", g.value(dep).data()[0].as_f64())?;
            if lambda_dep > 0.0 {
                let weighted = g.scale(dep, T::lit(lambda_dep));
                total = g.add(total, weighted)?;
            }
        }
        losses.source_objective = losses.seg_loss + lambda_dep * losses.depth_loss;

        let mut reps = Vec::new();
        if !spaces.is_empty() {
            let xt = g.constant_ref(batch.target_image);
            let ot = model.forward_graph(&mut g, &mut mv, xt, mode)?;
            let src_reps = aligned_reps(&mut g, setup, &os)?;
            let tgt_reps = aligned_reps(&mut g, setup, &ot)?;
            for ((space, rs), (_, rt)) in src_reps.into_iter().zip(tgt_reps) {
                reps.push((space, g.value(rs).clone(), g.value(rt).clone(), rt));
            }
        }

        // Discriminator-first: update on the detached pair before the fooling term.
        if audit {
            fp.model_before_disc_update = model.store.fingerprint();
        }
        let mut d_loss = 0.0;
        if disc_first {
            for (space, rs, rt, _) in &reps {
                let (d, opt) = match space {
                    AlignedSpace::Main => (&mut *disc_main, &mut *disc_main_opt),
                    AlignedSpace::Depth => (&mut *disc_depth, &mut *disc_depth_opt),
                };
                d_loss += discriminator_update(d, opt, rs, rt, disc_lr)?;
            }
        }
        if audit {
            fp.model_after_disc_update = model.store.fingerprint();
            fp.disc_before_gen_update = disc_main.store.fingerprint() ^ disc_depth.store.fingerprint().rotate_left(1);
        }

        let mut adv_total = 0.0;
        if !reps.is_empty() {
            let disc_main = &*disc_main;
            let disc_depth = &*disc_depth;
            for (space, _, _, rt) in &reps {
                let d = match space {
                    AlignedSpace::Main => disc_main,
                    AlignedSpace::Depth => disc_depth,
                };
                let mut dv = BoundParams::new(&d.store, Binding::Frozen);
                let score = d.forward_graph(&mut g, &mut dv, *rt)?;
                let fool = g.domain_bce(score, T::one());
                adv_total += g.value(fool).data()[0].as_f64();
                if cfg.lambda_adv > 0.0 {
                    let weighted = g.scale(fool, T::lit(cfg.lambda_adv));
                    total = g.add(total, weighted)?;
                }
            }
            losses.adv_loss = Some(check(it, "adv_loss", adv_total)?);
        }
        if disc_first && !reps.is_empty() {
            losses.d_loss = Some(check(it, "d_loss", d_loss)?);
        }
        check(it, "generator objective", g.value(total).data()[0].as_f64())?;
        let grads = g.backward(total)?;
        let pg: ParamGrads<T> = g.param_grads(&grads);
        let reps: Vec<(AlignedSpace, Tensor<T>, Tensor<T>)> = reps.into_iter().map(|(s, a, b, _)| (s, a, b)).collect();
        (pg, reps)
    };

    gen_opt.step(&mut model.store, &gen_grads, gen_lr);
    if !model.store.all_finite() {
        return Err(Error::NonFinite { iteration: it, term: "generator parameters" });
    }
    if audit {
        fp.disc_after_gen_update = disc_main.store.fingerprint() ^ disc_depth.store.fingerprint().rotate_left(1);
    }

    if !disc_first {
        if audit {
            fp.model_before_disc_update = model.store.fingerprint();
        }
        let mut d_loss = 0.0;
        for (space, rs, rt) in &reps {
            let (d, opt) = match space {
                AlignedSpace::Main => (&mut *disc_main, &mut *disc_main_opt),
                AlignedSpace::Depth => (&mut *disc_depth, &mut *disc_depth_opt),
            };
            d_loss += discriminator_update(d, opt, rs, rt, disc_lr)?;
        }
        if !reps.is_empty() {
            losses.d_loss = Some(check(it, "d_loss", d_loss)?);
        }
        if audit {
            fp.model_after_disc_update = model.store.fingerprint();
        }
    }
    if !(disc_main.store.all_finite() && disc_depth.store.all_finite()) {
        return Err(Error::NonFinite { iteration: it, term: "discriminator parameters" });
    }

    state.iteration += 1;
    state.running.add(&losses);
    Ok(StepReport {
        losses,
        audit: audit.then_some(fp),
        generator_grad_names: gen_grads.nonzero_names().into_iter().map(str::to_string).collect(),
    })
}

/// Position of iteration `it` in a seeded per-epoch permutation of `0..n`.
pub fn sample_index(seed: u64, stream: u64, it: u64, n: usize) -> usize {
    let epoch = it / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(sample_seed(seed, stream), epoch));
    perm.shuffle(&mut rng);
    perm[(it % n as u64) as usize]
}

const SOURCE_STREAM: u64 = 0x5352_43;
const TARGET_STREAM: u64 = 0x5447_54;

/// Source and target training data plus optional labeled validation data.
pub struct TrainData<'d> {
    pub source: &'d Dataset,
    pub target: &'d Dataset,
    pub validation: Option<&'d Dataset>,
}

impl TrainData<'_> {
    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<()> {
        if self.source.role != DatasetRole::LabeledSource {
            return Err(Error::Dataset(format!("source data opened as {:?}", self.source.role)));
        }
        if self.target.role != DatasetRole::UnlabeledTarget {
            return Err(Error::Dataset(format!(
                "target training data must be opened unlabeled, got {:?}",
                self.target.role
            )));
        }
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Dataset("empty training dataset".into()));
        }
        let mut sets = vec![("source", self.source), ("target", self.target)];
        if let Some(v) = self.validation {
            sets.push(("validation", v));
        }
        for (what, d) in sets {
            if (d.spec.height, d.spec.width) != model_cfg.input_size || d.spec.num_classes != model_cfg.num_classes {
                return Err(Error::Dataset(format!(
                    "{what} data is {}x{} with {} classes; model expects {:?} with {} classes",
                    d.spec.height, d.spec.width, d.spec.num_classes, model_cfg.input_size, model_cfg.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub setup: String,
    pub seed: u64,
    pub losses: Option<MeanLosses>,
    pub target_miou: Option<f64>,
    pub per_class_iou: Option<Vec<Option<f64>>>,
}

/// Target-domain evaluation: argmax of the soft segmentation per pixel.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    mode: DepthMode,
    data: &Dataset,
    subset: Option<&[usize]>,
    baseline_per_image: Option<&[f64]>,
) -> Result<EvalReport> {
    let preds = predict_labels(params, mode, data)?;
    let gts = (0..data.len()).map(|i| data.labels(i)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(params.config.num_classes, preds.iter().zip(gts), subset, baseline_per_image)
}

pub fn predict_labels<T: Scalar>(params: &ModelParams<T>, mode: DepthMode, data: &Dataset) -> Result<Vec<LabelMap>> {
    (0..data.len())
        .map(|i| {
            let out = params.forward_with(&data.image(i).cast(), mode)?;
            Ok(SoftSegMap::argmax(&out.seg))
        })
        .collect()
}

pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<MetricsRecord>,
}

/// Runs (or continues) training up to `stop_after` or `cfg.iterations`.
/// Each metrics record is handed to `sink` as soon as it is produced.
pub fn run_training<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    setup: &AblationSetup,
    data: &TrainData<'_>,
    resume: Option<TrainState<T>>,
    stop_after: Option<u64>,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    setup.validate()?;
    model_cfg.validate()?;
    data.validate(model_cfg)?;
    let mut state = match resume {
        Some(s) => {
            if s.model.config != *model_cfg {
                return Err(Error::Checkpoint("resumed model config differs from the requested one".into()));
            }
            s
        }
        None => TrainState::new(model_cfg, cfg)?,
    };
    let n_src = prefix_len(data.source.len(), cfg.source_fraction)?;
    let n_tgt = data.target.len();
    let end = stop_after.unwrap_or(cfg.iterations).min(cfg.iterations);
    let needs_depth = setup.depth_mode() != DepthMode::Bypass;
    let adversarial = !setup.aligned_spaces().is_empty();
    let mut log = Vec::new();

    let mut snapshot = |state: &mut TrainState<T>, log: &mut Vec<MetricsRecord>| -> Result<()> {
        let (target_miou, per_class_iou) = match data.validation {
            Some(v) => {
                let r = evaluate_model(&state.model, setup.depth_mode(), v, None, None)?;
                (Some(r.miou), Some(r.per_class_iou))
            }
            None => (None, None),
        };
        let rec = MetricsRecord {
            iteration: state.iteration,
            setup: setup.name.clone(),
            seed: cfg.seed,
            losses: state.running.means(adversarial),
            target_miou,
            per_class_iou,
        };
        state.running = RunningLosses::default();
        sink(&rec)?;
        log.push(rec);
        Ok(())
    };

    while state.iteration < end {
        let it = state.iteration;
        let si = sample_index(cfg.seed, SOURCE_STREAM, it, n_src);
        let source_image = data.source.image(si).cast::<T>();
        let source_depth = if needs_depth {
            Some(data.source.inv_depth(si)?.cast::<T>())
        } else {
            None
        };
        let target_image = if adversarial {
            data.target.image(sample_index(cfg.seed, TARGET_STREAM, it, n_tgt)).cast::<T>()
        } else {
            Tensor::zeros(&[0])
        };
        let batch = Batch {
            source_image: &source_image,
            source_labels: data.source.labels(si)?,
            source_depth: source_depth.as_ref(),
            target_image: &target_image,
        };
        train_step(&mut state, cfg, setup, &batch, false)?;
        if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 && state.iteration < cfg.iterations {
            snapshot(&mut state, &mut log)?;
        }
    }
    if state.iteration == cfg.iterations {
        snapshot(&mut state, &mut log)?;
    }
    Ok(TrainOutcome { state, log })
}
