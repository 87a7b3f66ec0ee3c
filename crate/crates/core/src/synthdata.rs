//! Procedural street-like scenes with pixel-exact labels and inverse depth.
//!
//! A scene is a ground plane below a horizon, sky above it, and 2 to 8
//! upright objects standing on the ground. Object size follows perspective
//! (proportional to inverse depth at the base row). Rendering is a z-buffer
//! over the surfaces: the largest inverse depth wins each pixel, later
//! objects win ties. The domain style only changes appearance, never
//! geometry, so a source and a target scene drawn with the same seed share
//! labels and depth.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::tensor::Tensor;

pub const DEFAULT_CLASS_NAMES: [&str; 7] = ["flat", "construction", "object", "nature", "sky", "human", "vehicle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub near_plane: f64,
    pub far_plane: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 7,
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            near_plane: 1.0,
            far_plane: 20.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("scene {}x{} smaller than 16x16", self.height, self.width)));
        }
        if !(self.near_plane > 0.0 && self.near_plane < self.far_plane && self.far_plane.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < near_plane < far_plane, got {} and {}",
                self.near_plane, self.far_plane
            )));
        }
        Ok(())
    }

    /// Index of the sky class: the class named "sky", else 1.
    pub fn sky_class(&self) -> usize {
        self.class_names.iter().position(|n| n == "sky").unwrap_or(1)
    }

    /// Ground is always class 0.
    pub fn ground_class(&self) -> usize {
        0
    }

    pub fn object_classes(&self) -> Vec<usize> {
        let sky = self.sky_class();
        (1..self.num_classes).filter(|&c| c != sky).collect()
    }

    /// Inverse depth of the far plane.
    pub fn sky_inv_depth(&self) -> f64 {
        self.near_plane / self.far_plane
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain {other:?} (expected source|target)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: Domain,
    /// Base RGB color per class.
    pub palette: Vec<[f64; 3]>,
    pub texture_noise_sigma: f64,
    pub gamma: f64,
    pub global_tint: [f64; 3],
}

/// Hue rotation applied to the source palette to obtain the target palette.
pub const TARGET_HUE_SHIFT_DEG: f64 = 40.0;
pub const TARGET_GAMMA: f64 = 1.6;
pub const TARGET_NOISE_SIGMA: f64 = 0.08;

fn base_palette(num_classes: usize, sky: usize) -> Vec<[f64; 3]> {
    const KNOWN: [[f64; 3]; 7] = [
        [0.50, 0.40, 0.50], // flat
        [0.60, 0.45, 0.30], // construction
        [0.85, 0.80, 0.20], // object
        [0.25, 0.60, 0.20], // nature
        [0.45, 0.65, 0.90], // sky
        [0.85, 0.25, 0.25], // human
        [0.20, 0.25, 0.70], // vehicle
    ];
    (0..num_classes)
        .map(|c| {
            if c == sky {
                KNOWN[4]
            } else if c < KNOWN.len() {
                KNOWN[c]
            } else {
                let hue = (c as f64 * 137.5) % 360.0;
                hsv_to_rgb(hue, 0.6, 0.7)
            }
        })
        .collect()
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(rgb);
    hsv_to_rgb(h + degrees, s, v)
}

impl DomainStyle {
    pub fn source(spec: &SceneSpec) -> Self {
        Self {
            domain: Domain::Source,
            palette: base_palette(spec.num_classes, spec.sky_class()),
            texture_noise_sigma: 0.0,
            gamma: 1.0,
            global_tint: [1.0, 1.0, 1.0],
        }
    }

    pub fn target(spec: &SceneSpec) -> Self {
        Self {
            domain: Domain::Target,
            palette: base_palette(spec.num_classes, spec.sky_class())
                .into_iter()
                .map(|c| rotate_hue(c, TARGET_HUE_SHIFT_DEG))
                .collect(),
            texture_noise_sigma: TARGET_NOISE_SIGMA,
            gamma: TARGET_GAMMA,
            global_tint: [1.0, 0.95, 0.9],
        }
    }

    pub fn preset(domain: Domain, spec: &SceneSpec) -> Self {
        match domain {
            Domain::Source => Self::source(spec),
            Domain::Target => Self::target(spec),
        }
    }

    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        if self.palette.len() != spec.num_classes {
            return Err(Error::Config(format!(
                "palette has {} colors for {} classes",
                self.palette.len(),
                spec.num_classes
            )));
        }
        if !(self.gamma > 0.0) || !(self.texture_noise_sigma >= 0.0) {
            return Err(Error::Config("style needs gamma > 0 and noise sigma >= 0".into()));
        }
        Ok(())
    }
}

/// One sample: image `(3, H, W)` in [0, 1] (quantized to 8 bits), labels and
/// inverse depth `(1, H, W)` in (0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub inv_depth: Tensor<f32>,
}

impl Scene {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.image.to_le_bytes();
        out.extend_from_slice(&self.labels.data);
        out.extend_from_slice(&self.inv_depth.to_le_bytes());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Building,
    Pole,
    Tree,
    Person,
    Car,
}

impl ShapeKind {
    fn for_class(name: &str, class: usize) -> Self {
        match name {
            "construction" => ShapeKind::Building,
            "object" => ShapeKind::Pole,
            "nature" => ShapeKind::Tree,
            "human" => ShapeKind::Person,
            "vehicle" => ShapeKind::Car,
            _ => [ShapeKind::Building, ShapeKind::Pole, ShapeKind::Tree, ShapeKind::Person, ShapeKind::Car][class % 5],
        }
    }

    /// (height, width) as fractions of the image size at inverse depth 1.
    fn extent(self) -> (f64, f64) {
        match self {
            ShapeKind::Building => (1.1, 0.45),
            ShapeKind::Pole => (0.7, 0.06),
            ShapeKind::Tree => (0.8, 0.35),
            ShapeKind::Person => (0.45, 0.12),
            ShapeKind::Car => (0.3, 0.5),
        }
    }
}

/// An upright object standing on the ground at `base_row`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub kind: ShapeKind,
    pub base_row: usize,
    pub center_col: f64,
    pub height_px: f64,
    pub width_px: f64,
    pub inv_depth: f64,
    /// Per-object brightness factor.
    pub shade: f64,
}

impl SceneObject {
    /// Whether the object's silhouette covers pixel `(row, col)`.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        if row > self.base_row {
            return false;
        }
        let up = (self.base_row - row) as f64 + 0.5; // distance above the base
        if up > self.height_px {
            return false;
        }
        let dx = col as f64 + 0.5 - self.center_col;
        let half = self.width_px / 2.0;
        let v = up / self.height_px; // 0 at base, 1 at top
        let u = dx / half.max(0.5); // -1..1 across
        match self.kind {
            ShapeKind::Building => u.abs() <= 1.0,
            ShapeKind::Pole => {
                let sign = v > 0.75 && u.abs() <= 3.0;
                u.abs() <= 1.0 || sign
            }
            ShapeKind::Tree => {
                let trunk = v < 0.4 && u.abs() <= 0.25;
                let cy = 0.68;
                let canopy = (u * u) + ((v - cy) / 0.32).powi(2) <= 1.0;
                trunk || canopy
            }
            ShapeKind::Person => {
                let head = (u * u) + ((v - 0.88) / 0.12).powi(2) <= 0.6;
                let body = v < 0.76 && u.abs() <= 0.8 - 0.3 * (0.76 - v);
                head || body
            }
            ShapeKind::Car => {
                let body = v < 0.6 && u.abs() <= 1.0;
                let cabin = v >= 0.6 && u.abs() <= 0.6 - 0.4 * (v - 0.6);
                body || cabin
            }
        }
    }
}

/// Geometry of a scene before appearance is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub horizon: usize,
    pub ground_class: usize,
    pub sky_class: usize,
    pub sky_inv_depth: f64,
    pub objects: Vec<SceneObject>,
}

impl SceneLayout {
    /// Inverse depth of the ground plane or sky at `row`, and its class.
    pub fn background(&self, row: usize) -> (f64, usize) {
        if row < self.horizon {
            return (self.sky_inv_depth, self.sky_class);
        }
        let z = (row - self.horizon) as f64 + 0.5;
        let z = z / ((self.height - self.horizon) as f64 - 0.5);
        (z.clamp(self.sky_inv_depth, 1.0), self.ground_class)
    }

    /// Z-buffer render: returns `(class, inv_depth, winner)` per pixel, where
    /// `winner` is the covering object index if any.
    pub fn rasterize(&self) -> Vec<(usize, f64, Option<usize>)> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            let (bg_z, bg_class) = self.background(r);
            for c in 0..self.width {
                let mut best = (bg_class, bg_z, None);
                for (k, o) in self.objects.iter().enumerate() {
                    if o.inv_depth >= best.1 && o.covers(r, c) {
                        best = (o.class, o.inv_depth, Some(k));
                    }
                }
                out.push(best);
            }
        }
        out
    }
}

/// Per-index seed derived from a dataset seed (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MAX_LAYOUT_ATTEMPTS: u64 = 64;

/// Samples the geometry of a scene. Redraws (deterministically) until at
/// least three classes are visible.
pub fn plan_scene(spec: &SceneSpec, seed: u64) -> Result<SceneLayout> {
    spec.validate()?;
    if spec.num_classes < 4 {
        return Err(Error::Config(format!(
            "scene generation needs at least 4 classes (ground, sky, two object classes), got {}",
            spec.num_classes
        )));
    }
    for attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let layout = sample_layout(spec, sample_seed(seed, attempt));
        let mut seen = vec![false; spec.num_classes];
        for (cls, _, _) in layout.rasterize() {
            seen[cls] = true;
        }
        if seen.iter().filter(|&&s| s).count() >= 3 {
            return Ok(layout);
        }
    }
    Err(Error::Config("could not sample a scene with three visible classes".into()))
}

fn sample_layout(spec: &SceneSpec, seed: u64) -> SceneLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let horizon = rng.gen_range((h * 3 / 10)..=(h / 2));
    let mut layout = SceneLayout {
        height: h,
        width: w,
        horizon,
        ground_class: spec.ground_class(),
        sky_class: spec.sky_class(),
        sky_inv_depth: spec.sky_inv_depth(),
        objects: Vec::new(),
    };

    let pool = spec.object_classes();
    let count = rng.gen_range(2..=8usize);
    // at least two distinct object classes
    let mut classes: Vec<usize> = pool.choose_multiple(&mut rng, 2.min(pool.len())).copied().collect();
    while classes.len() < count {
        classes.push(*pool.choose(&mut rng).expect("object classes"));
    }
    classes.shuffle(&mut rng);

    for class in classes {
        let kind = ShapeKind::for_class(&spec.class_names[class], class);
        let base_row = rng.gen_range((horizon + 2).min(h - 1)..h);
        let (z, _) = layout.background(base_row);
        let (fh, fw) = kind.extent();
        let jitter = rng.gen_range(0.8..1.2);
        let height_px = (fh * h as f64 * z * jitter).max(1.5);
        let width_px = (fw * w as f64 * z * jitter).max(1.0);
        let center_col = rng.gen_range(0.0..w as f64);
        let shade = rng.gen_range(0.8..1.2);
        layout.objects.push(SceneObject {
            class,
            kind,
            base_row,
            center_col,
            height_px,
            width_px,
            inv_depth: z,
            shade,
        });
    }
    layout
}

/// Deterministic per-class surface pattern in [-1, 1].
fn pattern(obj: Option<&SceneObject>, class_is_sky: bool, row: usize, col: usize) -> f64 {
    let (r, c) = (row as f64, col as f64);
    if class_is_sky {
        return -0.5 + r * 0.02;
    }
    let Some(o) = obj else {
        // ground: lane-like streaks
        return ((c * 0.5 + r * 0.25).sin() > 0.85) as i32 as f64 * 0.8 - 0.2;
    };
    match o.kind {
        ShapeKind::Building => {
            // window grid
            let up = o.base_row as f64 - r;
            let dx = c - o.center_col;
            let period = (4.0 * o.inv_depth).max(2.0);
            let wy = (up / period).fract() < 0.5;
            let wx = (dx / period).rem_euclid(1.0) < 0.5;
            if wy && wx {
                -0.8
            } else {
                0.3
            }
        }
        ShapeKind::Tree => ((r * 1.7).sin() * (c * 2.3).cos()) * 0.8,
        ShapeKind::Car => {
            let v = (o.base_row as f64 - r) / o.height_px;
            if v < 0.15 {
                -0.9
            } else if v > 0.6 {
                0.6
            } else {
                0.0
            }
        }
        ShapeKind::Person => ((r * 0.9).sin()) * 0.4,
        ShapeKind::Pole => 0.2,
    }
}

pub fn generate_scene(spec: &SceneSpec, style: &DomainStyle, seed: u64) -> Result<Scene> {
    let layout = plan_scene(spec, seed)?;
    style.validate(spec)?;
    Ok(render(spec, style, &layout, seed))
}

/// Applies a domain style to a layout.
pub fn render(spec: &SceneSpec, style: &DomainStyle, layout: &SceneLayout, seed: u64) -> Scene {
    let (h, w) = (layout.height, layout.width);
    let raster = layout.rasterize();
    // appearance noise is independent of the layout stream
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 0xa11ce));
    let noise = Normal::new(0.0, style.texture_noise_sigma.max(1e-300)).expect("noise sigma");
    let unit = Uniform::new(0.0f64, 1.0);
    let fog = [0.75, 0.78, 0.82];

    let mut image = vec![0f32; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    let mut inv_depth = vec![0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let px = r * w + c;
            let (cls, z, winner) = raster[px];
            labels[px] = cls as u8;
            inv_depth[px] = z as f32;
            let obj = winner.map(|k| &layout.objects[k]);
            let is_sky = cls == layout.sky_class && winner.is_none();
            let pat = pattern(obj, is_sky, r, c);
            let shade = obj.map_or(1.0, |o| o.shade);
            let fog_amount = if is_sky { 0.0 } else { 0.5 * (1.0 - z) };
            let grain = unit.sample(&mut rng) - 0.5;
            for ch in 0..3 {
                let base = style.palette[cls][ch] * shade * (1.0 + 0.25 * pat) + 0.04 * grain;
                let mut v = base * (1.0 - fog_amount) + fog[ch] * fog_amount;
                if style.texture_noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                v *= style.global_tint[ch];
                v = v.clamp(0.0, 1.0).powf(style.gamma);
                image[ch * h * w + px] = ((v * 255.0).round() / 255.0) as f32;
            }
        }
    }
    let _ = spec;
    Scene {
        image: Tensor::new(&[3, h, w], image).expect("image shape"),
        labels: LabelMap::new(h, w, labels).expect("label shape"),
        inv_depth: Tensor::new(&[1, h, w], inv_depth).expect("depth shape"),
    }
}
