//! On-disk dataset layout and guarded in-memory access.
//!
//! ```text
//! DIR/images/{idx:06}.png   8-bit RGB
//! DIR/labels/{idx:06}.png   8-bit gray, class indices
//! DIR/depth/{idx:06}.bin    "IDEP", u32 H, u32 W, u32 reserved, then H*W f32 LE
//! DIR/manifest.json
//! ```
//!
//! A dataset opened as [`DatasetRole::UnlabeledTarget`] never loads labels
//! or depth; asking for them fails with [`Error::GuardViolation`] and is
//! counted in the [`AccessLog`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::synthdata::{generate_scene, sample_seed, DomainStyle, Scene, SceneSpec};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 4] = b"IDEP";
pub const DEPTH_HEADER_BYTES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub label: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub style: DomainStyle,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Number of leading entries kept by a fraction in (0, 1].
    pub fn prefix_len(&self, fraction: f64) -> Result<usize> {
        prefix_len(self.files.len(), fraction)
    }

    /// First `round(n * fraction)` entries by index.
    pub fn prefix(&self, fraction: f64) -> Result<&[ManifestEntry]> {
        Ok(&self.files[..self.prefix_len(fraction)?])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }
}

pub fn prefix_len(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    Ok(((n as f64 * fraction).round() as usize).clamp(1, n.max(1)).min(n))
}

fn entry_for(index: usize) -> ManifestEntry {
    ManifestEntry {
        index,
        image: format!("images/{index:06}.png"),
        label: format!("labels/{index:06}.png"),
        depth: format!("depth/{index:06}.bin"),
    }
}

/// Scene `index` of a dataset generated with `seed`.
pub fn dataset_scene(spec: &SceneSpec, style: &DomainStyle, seed: u64, index: usize) -> Result<Scene> {
    generate_scene(spec, style, sample_seed(seed, index as u64))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one scene's three files under `dir`.
pub fn write_scene(dir: &Path, entry: &ManifestEntry, scene: &Scene) -> Result<()> {
    let (h, w) = (scene.labels.height, scene.labels.width);
    let img = scene.image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for px in 0..h * w {
        for ch in 0..3 {
            rgb.push((img[ch * h * w + px] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let path = dir.join(&entry.image);
    image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("rgb buffer size")
        .save(&path)
        .map_err(|source| Error::Image { path: path.clone(), source })?;

    let path = dir.join(&entry.label);
    image::GrayImage::from_raw(w as u32, h as u32, scene.labels.data.clone())
        .expect("label buffer size")
        .save(&path)
        .map_err(|source| Error::Image { path: path.clone(), source })?;

    let path = dir.join(&entry.depth);
    fs::write(&path, encode_depth(&scene.inv_depth)).map_err(|e| Error::io(&path, e))
}

pub fn encode_depth(z: &Tensor<f32>) -> Vec<u8> {
    let (_, h, w) = z.chw();
    let mut out = Vec::with_capacity(DEPTH_HEADER_BYTES + 4 * h * w);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&z.to_le_bytes());
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < DEPTH_HEADER_BYTES || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::Dataset("depth file lacks the IDEP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let body = &bytes[DEPTH_HEADER_BYTES..];
    if body.len() != 4 * h * w {
        return Err(Error::Dataset(format!(
            "depth payload has {} bytes, header says {h}x{w}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Generates `n` scenes into `out_dir` and writes the manifest last.
pub fn generate_dataset(spec: &SceneSpec, style: &DomainStyle, seed: u64, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    spec.validate()?;
    style.validate(spec)?;
    for sub in ["images", "labels", "depth"] {
        mkdir(&out_dir.join(sub))?;
    }
    let mut files = Vec::with_capacity(n);
    for index in 0..n {
        let entry = entry_for(index);
        let scene = dataset_scene(spec, style, seed, index)?;
        write_scene(out_dir, &entry, &scene)?;
        files.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        style: style.clone(),
        seed,
        files,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json { path: path.clone(), source })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetRole {
    /// Source training data: images, labels and depth.
    LabeledSource,
    /// Target training data: images only.
    UnlabeledTarget,
    /// Held-out target data with labels, for evaluation.
    Validation,
}

/// Read counters, for auditing what a training run touched.
#[derive(Debug, Default)]
pub struct AccessLog {
    per_index_images: Vec<AtomicU64>,
    label_reads: AtomicU64,
    depth_reads: AtomicU64,
    refused_label_reads: AtomicU64,
    refused_depth_reads: AtomicU64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessSummary {
    pub image_reads: u64,
    pub distinct_images: usize,
    pub label_reads: u64,
    pub depth_reads: u64,
    pub refused_label_reads: u64,
    pub refused_depth_reads: u64,
}

impl AccessLog {
    fn new(n: usize) -> Self {
        Self {
            per_index_images: (0..n).map(|_| AtomicU64::new(0)).collect(),
            ..Self::default()
        }
    }

    pub fn summary(&self) -> AccessSummary {
        let counts: Vec<u64> = self.per_index_images.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        AccessSummary {
            image_reads: counts.iter().sum(),
            distinct_images: counts.iter().filter(|&&c| c > 0).count(),
            label_reads: self.label_reads.load(Ordering::Relaxed),
            depth_reads: self.depth_reads.load(Ordering::Relaxed),
            refused_label_reads: self.refused_label_reads.load(Ordering::Relaxed),
            refused_depth_reads: self.refused_depth_reads.load(Ordering::Relaxed),
        }
    }

    /// Indices whose image was read at least once.
    pub fn touched_indices(&self) -> Vec<usize> {
        self.per_index_images
            .iter()
            .enumerate()
            .filter(|(_, c)| c.load(Ordering::Relaxed) > 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A dataset held in memory with role-dependent access rules.
#[derive(Debug)]
pub struct Dataset {
    pub role: DatasetRole,
    pub spec: SceneSpec,
    pub path: Option<PathBuf>,
    images: Vec<Tensor<f32>>,
    labels: Vec<LabelMap>,
    depths: Vec<Tensor<f32>>,
    log: AccessLog,
}

fn load_rgb(path: &Path, spec: &SceneSpec) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (spec.height, spec.width) {
        return Err(Error::Dataset(format!(
            "{}: image is {h}x{w}, manifest spec says {}x{}",
            path.display(),
            spec.height,
            spec.width
        )));
    }
    let raw = img.into_raw();
    let mut data = vec![0f32; 3 * h * w];
    for px in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + px] = raw[px * 3 + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn load_labels(path: &Path, spec: &SceneSpec) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let map = LabelMap::new(h, w, img.into_raw())?;
    if (h, w) != (spec.height, spec.width) {
        return Err(Error::Dataset(format!("{}: label map is {h}x{w}", path.display())));
    }
    map.check_classes(spec.num_classes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(map)
}

impl Dataset {
    /// Loads the files listed in `DIR/manifest.json`. Unlabeled targets
    /// load images only.
    pub fn open(dir: &Path, role: DatasetRole) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let spec = manifest.spec.clone();
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::new();
        let mut depths = Vec::new();
        for entry in &manifest.files {
            images.push(load_rgb(&dir.join(&entry.image), &spec)?);
            if role == DatasetRole::UnlabeledTarget {
                continue;
            }
            labels.push(load_labels(&dir.join(&entry.label), &spec)?);
            if role == DatasetRole::LabeledSource {
                let path = dir.join(&entry.depth);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let z = decode_depth(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                if z.shape() != [1, spec.height, spec.width] {
                    return Err(Error::Dataset(format!("{}: depth shape {:?}", path.display(), z.shape())));
                }
                depths.push(z);
            }
        }
        let n = images.len();
        Ok(Self {
            role,
            spec,
            path: Some(dir.to_path_buf()),
            images,
            labels,
            depths,
            log: AccessLog::new(n),
        })
    }

    /// Wraps generated scenes, dropping whatever the role may not see.
    pub fn from_scenes(spec: SceneSpec, scenes: Vec<Scene>, role: DatasetRole) -> Self {
        let n = scenes.len();
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::new();
        let mut depths = Vec::new();
        for s in scenes {
            images.push(s.image);
            match role {
                DatasetRole::LabeledSource => {
                    labels.push(s.labels);
                    depths.push(s.inv_depth);
                }
                DatasetRole::Validation => labels.push(s.labels),
                DatasetRole::UnlabeledTarget => {}
            }
        }
        Self {
            role,
            spec,
            path: None,
            images,
            labels,
            depths,
            log: AccessLog::new(n),
        }
    }

    /// Generates `n` scenes in memory.
    pub fn generate(spec: &SceneSpec, style: &DomainStyle, seed: u64, n: usize, role: DatasetRole) -> Result<Self> {
        let scenes = (0..n)
            .map(|i| dataset_scene(spec, style, seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scenes(spec.clone(), scenes, role))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &Tensor<f32> {
        self.log.per_index_images[index].fetch_add(1, Ordering::Relaxed);
        &self.images[index]
    }

    pub fn labels(&self, index: usize) -> Result<&LabelMap> {
        if self.role == DatasetRole::UnlabeledTarget {
            self.log.refused_label_reads.fetch_add(1, Ordering::Relaxed);
            return Err(Error::GuardViolation { what: "label", index });
        }
        self.log.label_reads.fetch_add(1, Ordering::Relaxed);
        Ok(&self.labels[index])
    }

    pub fn inv_depth(&self, index: usize) -> Result<&Tensor<f32>> {
        if self.role != DatasetRole::LabeledSource {
            self.log.refused_depth_reads.fetch_add(1, Ordering::Relaxed);
            return Err(Error::GuardViolation { what: "depth", index });
        }
        self.log.depth_reads.fetch_add(1, Ordering::Relaxed);
        Ok(&self.depths[index])
    }

    pub fn access(&self) -> &AccessLog {
        &self.log
    }

    /// Fresh counters, same data.
    pub fn reset_access(&mut self) {
        self.log = AccessLog::new(self.images.len());
    }

    /// Same data under another role (e.g. a labeled split used unlabeled).
    pub fn with_role(&self, role: DatasetRole) -> Result<Self> {
        let need_labels = role != DatasetRole::UnlabeledTarget;
        let need_depth = role == DatasetRole::LabeledSource;
        if (need_labels && self.labels.len() != self.len()) || (need_depth && self.depths.len() != self.len()) {
            return Err(Error::Dataset(format!("{:?} data cannot be reopened as {role:?}", self.role)));
        }
        Ok(Self {
            role,
            spec: self.spec.clone(),
            path: self.path.clone(),
            images: self.images.clone(),
            labels: if need_labels { self.labels.clone() } else { Vec::new() },
            depths: if need_depth { self.depths.clone() } else { Vec::new() },
            log: AccessLog::new(self.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_rule() {
        assert_eq!(prefix_len(100, 0.5).unwrap(), 50);
        assert_eq!(prefix_len(100, 0.7).unwrap(), 70);
        assert_eq!(prefix_len(100, 0.1).unwrap(), 10);
        assert_eq!(prefix_len(100, 1.0).unwrap(), 100);
        assert_eq!(prefix_len(3, 0.01).unwrap(), 1);
        assert!(prefix_len(10, 0.0).is_err());
        assert!(prefix_len(10, 1.5).is_err());
    }

    #[test]
    fn depth_codec_roundtrip_and_header() {
        let z = Tensor::new(&[1, 2, 3], vec![1.0f32, 0.5, 0.25, 0.125, 0.1, 0.9]).unwrap();
        let bytes = encode_depth(&z);
        assert_eq!(&bytes[..4], b"IDEP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(decode_depth(&bytes).unwrap(), z);
        assert!(decode_depth(&bytes[..20]).is_err());
        assert!(decode_depth(b"NOPE............").is_err());
    }

    #[test]
    fn unlabeled_target_refuses_annotations() {
        let spec = SceneSpec::default();
        let style = DomainStyle::target(&spec);
        let ds = Dataset::generate(&spec, &style, 3, 2, DatasetRole::UnlabeledTarget).unwrap();
        assert!(matches!(ds.labels(0), Err(Error::GuardViolation { what: "label", .. })));
        assert!(matches!(ds.inv_depth(1), Err(Error::GuardViolation { what: "depth", .. })));
        let _ = ds.image(1);
        let s = ds.access().summary();
        assert_eq!((s.refused_label_reads, s.refused_depth_reads, s.label_reads, s.depth_reads), (1, 1, 0, 0));
        assert_eq!(ds.access().touched_indices(), vec![1]);
    }
}
