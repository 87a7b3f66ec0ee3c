//! Binary checkpoints: a JSON manifest followed by little-endian tensor blobs.
//!
//! ```text
//! b"DADACKPT"  u32 version  u64 manifest_len  manifest (JSON)  blobs...
//! ```
//!
//! Blobs appear in manifest order. Loading checks every shape against a
//! freshly initialized network of the recorded configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_discriminator, init_model, DepthMode, DiscriminatorConfig, DiscriminatorParams, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{AblationSetup, RunningLosses, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"DADACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub model_config: ModelConfig,
    pub depth_mode: DepthMode,
    pub setup: Option<AblationSetup>,
    pub train_config: Option<TrainConfig>,
    pub iteration: u64,
    pub disc_main_config: Option<DiscriminatorConfig>,
    pub disc_depth_config: Option<DiscriminatorConfig>,
    pub sgd: Option<SgdConfig>,
    pub adam: Option<AdamConfig>,
    pub adam_steps_main: BTreeMap<String, u64>,
    pub adam_steps_depth: BTreeMap<String, u64>,
    pub running: RunningLosses,
    pub tensors: Vec<TensorEntry>,
}

const MODEL: &str = "model";
const DISC_MAIN: &str = "disc_main";
const DISC_DEPTH: &str = "disc_depth";
const SGD_MOMENTUM: &str = "sgd_momentum";
const ADAM_MAIN_M: &str = "adam_main_m";
const ADAM_MAIN_V: &str = "adam_main_v";
const ADAM_DEPTH_M: &str = "adam_depth_m";
const ADAM_DEPTH_V: &str = "adam_depth_v";

fn encode<T: Scalar>(mut manifest: CheckpointManifest, groups: &[(&str, &ParamStore<T>)]) -> Vec<u8> {
    let mut blobs = Vec::new();
    manifest.tensors.clear();
    for (group, store) in groups {
        for (name, t) in store.iter() {
            manifest.tensors.push(TensorEntry {
                group: group.to_string(),
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            blobs.extend_from_slice(&t.to_le_bytes());
        }
    }
    manifest.dtype = T::DTYPE.to_string();
    manifest.format_version = VERSION;
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

fn read_value<T: Scalar>(dtype: &str, bytes: &[u8]) -> T {
    match dtype {
        "f64" => T::lit(f64::from_le_bytes(bytes.try_into().expect("8 bytes"))),
        _ => T::lit(f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64),
    }
}

/// Parses the container into its manifest and per-group stores.
fn decode<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointManifest, BTreeMap<String, ParamStore<T>>)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other:?}"))),
    };
    let mut offset = 20 + len;
    let mut groups: BTreeMap<String, ParamStore<T>> = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let blob = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| bad(format!("truncated blob for {}/{}", e.group, e.name)))?;
        offset += n * width;
        let data = blob.chunks_exact(width).map(|c| read_value::<T>(&manifest.dtype, c)).collect();
        groups
            .entry(e.group.clone())
            .or_default()
            .insert(e.name.clone(), Tensor::new(&e.shape, data)?);
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((manifest, groups))
}

/// Requires `got` to hold exactly the tensors of `reference`, shape for shape.
fn check_shapes<T: Scalar>(group: &str, got: &ParamStore<T>, reference: &ParamStore<f64>) -> Result<()> {
    for (name, r) in reference.iter() {
        match got.get(name) {
            None => return Err(Error::Checkpoint(format!("{group}: missing tensor {name}"))),
            Some(t) if t.shape() != r.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{group}: {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = got.names().find(|n| reference.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("{group}: unexpected tensor {extra}")));
    }
    Ok(())
}

/// Optimizer moments must name parameters of the right shape.
fn check_moments<T: Scalar>(group: &str, got: &ParamStore<T>, params: &ParamStore<T>) -> Result<()> {
    for (name, t) in got.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("{group}: moment {name} matches no parameter"))),
        }
    }
    Ok(())
}

fn base_manifest(model_config: &ModelConfig, depth_mode: DepthMode) -> CheckpointManifest {
    CheckpointManifest {
        format_version: VERSION,
        dtype: String::new(),
        model_config: model_config.clone(),
        depth_mode,
        setup: None,
        train_config: None,
        iteration: 0,
        disc_main_config: None,
        disc_depth_config: None,
        sgd: None,
        adam: None,
        adam_steps_main: BTreeMap::new(),
        adam_steps_depth: BTreeMap::new(),
        running: RunningLosses::default(),
        tensors: Vec::new(),
    }
}

/// Model weights only.
pub fn encode_model<T: Scalar>(params: &ModelParams<T>, depth_mode: DepthMode) -> Vec<u8> {
    encode(base_manifest(&params.config, depth_mode), &[(MODEL, &params.store)])
}

/// Complete training state.
pub fn encode_train_state<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, setup: &AblationSetup) -> Vec<u8> {
    let mut m = base_manifest(&state.model.config, setup.depth_mode());
    m.setup = Some(setup.clone());
    m.train_config = Some(cfg.clone());
    m.iteration = state.iteration;
    m.disc_main_config = Some(state.disc_main.config.clone());
    m.disc_depth_config = Some(state.disc_depth.config.clone());
    m.sgd = Some(state.gen_opt.config);
    m.adam = Some(state.disc_main_opt.config);
    m.adam_steps_main = state.disc_main_opt.steps.clone();
    m.adam_steps_depth = state.disc_depth_opt.steps.clone();
    m.running = state.running.clone();
    encode(
        m,
        &[
            (MODEL, &state.model.store),
            (DISC_MAIN, &state.disc_main.store),
            (DISC_DEPTH, &state.disc_depth.store),
            (SGD_MOMENTUM, &state.gen_opt.momentum),
            (ADAM_MAIN_M, &state.disc_main_opt.m),
            (ADAM_MAIN_V, &state.disc_main_opt.v),
            (ADAM_DEPTH_M, &state.disc_depth_opt.m),
            (ADAM_DEPTH_V, &state.disc_depth_opt.v),
        ],
    )
}

/// A decoded checkpoint.
pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub model: ModelParams<T>,
    groups: BTreeMap<String, ParamStore<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (manifest, mut groups) = decode::<T>(bytes)?;
        manifest.model_config.validate()?;
        let reference = init_model::<f64>(&manifest.model_config, 0)?;
        let store = groups.remove(MODEL).unwrap_or_default();
        check_shapes(MODEL, &store, &reference.store)?;
        Ok(Self {
            model: ModelParams {
                config: manifest.model_config.clone(),
                store,
            },
            manifest,
            groups,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    fn take_disc(&mut self, group: &str, config: Option<&DiscriminatorConfig>) -> Result<DiscriminatorParams<T>> {
        let config = config.ok_or_else(|| Error::Checkpoint(format!("{group}: no configuration recorded")))?;
        let reference = init_discriminator::<f64>(config, 0)?;
        let store = self.groups.remove(group).unwrap_or_default();
        check_shapes(group, &store, &reference.store)?;
        Ok(DiscriminatorParams {
            config: config.clone(),
            store,
        })
    }

    /// Rebuilds the full training state; fails for weights-only files.
    pub fn into_train_state(mut self) -> Result<TrainState<T>> {
        let m = self.manifest.clone();
        let (Some(sgd), Some(adam)) = (m.sgd, m.adam) else {
            return Err(Error::Checkpoint("checkpoint holds model weights only".into()));
        };
        let disc_main = self.take_disc(DISC_MAIN, m.disc_main_config.as_ref())?;
        let disc_depth = self.take_disc(DISC_DEPTH, m.disc_depth_config.as_ref())?;
        let mut take = |g: &str| self.groups.remove(g).unwrap_or_default();
        let momentum = take(SGD_MOMENTUM);
        let (main_m, main_v) = (take(ADAM_MAIN_M), take(ADAM_MAIN_V));
        let (depth_m, depth_v) = (take(ADAM_DEPTH_M), take(ADAM_DEPTH_V));
        check_moments(SGD_MOMENTUM, &momentum, &self.model.store)?;
        check_moments(ADAM_MAIN_M, &main_m, &disc_main.store)?;
        check_moments(ADAM_MAIN_V, &main_v, &disc_main.store)?;
        check_moments(ADAM_DEPTH_M, &depth_m, &disc_depth.store)?;
        check_moments(ADAM_DEPTH_V, &depth_v, &disc_depth.store)?;
        if let Some(extra) = self.groups.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor group {extra}")));
        }
        Ok(TrainState {
            iteration: m.iteration,
            model: self.model,
            disc_main,
            disc_depth,
            gen_opt: Sgd { config: sgd, momentum },
            disc_main_opt: Adam {
                config: adam,
                m: main_m,
                v: main_v,
                steps: m.adam_steps_main,
            },
            disc_depth_opt: Adam {
                config: adam,
                m: depth_m,
                v: depth_v,
                steps: m.adam_steps_depth,
            },
            running: m.running,
        })
    }
}

/// Writes via a sibling temporary file and a rename, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
