//! Segmentation network with a residual depth-auxiliary branch, and the
//! domain discriminator.
//!
//! Backbone features `F` (B channels, output stride up to 8) feed a depth
//! encoder of three convolutions (1x1, 3x3, 1x1), each with a quarter of the
//! channels of its input. The encoded features are projected to one channel,
//! mapped through softplus and smoothed by a 3x3 mean filter to give the
//! inverse-depth prediction `Z`. A 1x1 decoder maps the same encoded features
//! back to B channels; its output multiplies `F` element-wise before the
//! dilated classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::maps::{DepthPrediction, SoftSegMap};
use crate::params::{uniform_tensor, Binding, BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel reduction applied by each depth-encoder layer.
pub const DEPTH_REDUCTION: usize = 4;

/// Inverse depth the untrained depth head is biased toward.
pub const INITIAL_DEPTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone_depth: usize,
    pub classifier_dilation: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 64],
            backbone_depth: 4,
            classifier_dilation: 2,
            num_classes: 7,
            input_size: (64, 64),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_depth == 0 || self.backbone_channels.len() != self.backbone_depth {
            return Err(Error::Config(format!(
                "backbone_depth {} does not match {} channel entries",
                self.backbone_depth,
                self.backbone_channels.len()
            )));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let b = self.feature_channels();
        let divisor = DEPTH_REDUCTION.pow(3);
        if b % divisor != 0 {
            return Err(Error::Config(format!(
                "final backbone channel count {b} must be divisible by {divisor}"
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.classifier_dilation == 0 {
            return Err(Error::Config("classifier_dilation must be >= 1".into()));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        Ok(())
    }

    /// B, the channel count of the backbone output.
    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    /// First three stages downsample by two, later stages keep resolution.
    pub fn stage_stride(stage: usize) -> usize {
        if stage < 3 {
            2
        } else {
            1
        }
    }

    /// Channel widths through the depth encoder: `[B, B/4, B/16, B/64]`.
    pub fn depth_widths(&self) -> [usize; 4] {
        let b = self.feature_channels();
        [b, b / 4, b / 16, b / 64]
    }
}

/// How the depth branch takes part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthMode {
    /// Depth head and feature fusion active.
    Active,
    /// Branch skipped; fused features are the backbone features.
    Bypass,
    /// Depth head computed but the fusion multiplier forced to one.
    UnitFusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

pub struct ForwardOutputs<T> {
    pub seg: SoftSegMap<T>,
    pub depth: Option<DepthPrediction<T>>,
    pub backbone_features: Tensor<T>,
    pub fused_features: Tensor<T>,
}

/// Graph handles produced by [`ModelParams::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct GraphOutputs {
    pub seg: Var,
    pub depth: Option<Var>,
    pub backbone: Var,
    pub fused: Var,
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize, bound: f64, bias: f64| {
        store.insert(format!("{name}.weight"), uniform_tensor(rng, &[cout, cin, k, k], bound));
        store.insert(format!("{name}.bias"), Tensor::full(&[cout], T::lit(bias)));
    };

    let mut cin = 3;
    for (i, &c) in config.backbone_channels.iter().enumerate() {
        conv(&mut store, &mut rng, &format!("backbone.{i}"), c, cin, 3, he_bound(cin * 9), 0.0);
        cin = c;
    }
    let [b, e1, e2, e3] = config.depth_widths();
    conv(&mut store, &mut rng, "depth.enc1", e1, b, 1, he_bound(b), 0.0);
    conv(&mut store, &mut rng, "depth.enc2", e2, e1, 3, he_bound(e1 * 9), 0.0);
    conv(&mut store, &mut rng, "depth.enc3", e3, e2, 1, he_bound(e2), 0.0);
    // softplus(bias) = INITIAL_DEPTH
    let proj_bias = INITIAL_DEPTH.exp_m1().ln();
    conv(&mut store, &mut rng, "depth.proj", 1, e3, 1, 0.1 / (e3 as f64).sqrt(), proj_bias);
    // starts close to the multiplicative identity
    conv(&mut store, &mut rng, "depth.dec", b, e3, 1, 0.1 / (e3 as f64).sqrt(), 1.0);
    let c = config.num_classes;
    conv(&mut store, &mut rng, "classifier", c, b, 3, (3.0 / (b * 9) as f64).sqrt(), 0.0);

    Ok(ModelParams {
        config: config.clone(),
        store,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Builds the forward pass for one `(3, H, W)` image inside `g`.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        vars: &mut BoundParams<'a, T>,
        image: Var,
        mode: DepthMode,
    ) -> Result<GraphOutputs> {
        let (h, w) = self.config.input_size;
        let shape = g.value(image).shape();
        if shape != [3, h, w] {
            return Err(Error::shape("model input", &[3, h, w], shape));
        }
        let mut conv = |g: &mut Graph<'a, T>, x: Var, name: &str, geom: ConvGeom| -> Result<Var> {
            let wv = vars.var(g, &format!("{name}.weight"));
            let bv = vars.var(g, &format!("{name}.bias"));
            g.conv2d(x, wv, Some(bv), geom)
        };

        let mut x = image;
        for i in 0..self.config.backbone_depth {
            let geom = ConvGeom::new(ModelConfig::stage_stride(i), 1, 1);
            x = conv(g, x, &format!("backbone.{i}"), geom)?;
            x = g.relu(x);
        }
        let backbone = x;

        let (fused, depth) = match mode {
            DepthMode::Bypass => (backbone, None),
            DepthMode::Active | DepthMode::UnitFusion => {
                let one = ConvGeom::new(1, 0, 1);
                let e = conv(g, backbone, "depth.enc1", one)?;
                let e = g.relu(e);
                let e = conv(g, e, "depth.enc2", ConvGeom::new(1, 1, 1))?;
                let e = g.relu(e);
                let encoded = conv(g, e, "depth.enc3", one)?;

                let z = conv(g, encoded, "depth.proj", one)?;
                let z = g.softplus(z);
                let z = g.avg_pool3(z);
                let z = g.resize_bilinear(z, h, w);

                let multiplier = if mode == DepthMode::Active {
                    conv(g, encoded, "depth.dec", one)?
                } else {
                    let ones = Tensor::full(g.value(backbone).shape(), T::one());
                    g.constant(ones)
                };
                (g.mul(backbone, multiplier)?, Some(z))
            }
        };

        let d = self.config.classifier_dilation;
        let scores = conv(g, fused, "classifier", ConvGeom::new(1, d, d))?;
        let p = g.softmax_channels(scores);
        let seg = g.resize_bilinear(p, h, w);
        Ok(GraphOutputs {
            seg,
            depth,
            backbone,
            fused,
        })
    }

    pub fn forward_with(&self, image: &Tensor<T>, mode: DepthMode) -> Result<ForwardOutputs<T>> {
        let mut g = Graph::new();
        let mut vars = BoundParams::new(&self.store, Binding::Frozen);
        let x = g.constant(image.clone());
        let out = self.forward_graph(&mut g, &mut vars, x, mode)?;
        Ok(ForwardOutputs {
            seg: SoftSegMap(g.value(out.seg).clone()),
            depth: out.depth.map(|z| DepthPrediction(g.value(z).clone())),
            backbone_features: g.value(out.backbone).clone(),
            fused_features: g.value(out.fused).clone(),
        })
    }

    /// Inference with the depth branch active.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        self.forward_with(image, DepthMode::Active)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

/// Parameter groups of the segmentation network, by name prefix.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else if name.starts_with("depth.dec") {
        "depth_decoder"
    } else if name.starts_with("depth.") {
        "depth_head"
    } else if name.starts_with("classifier") {
        "classifier"
    } else {
        "other"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![64, 128, 256],
            leaky_slope: 0.2,
        }
    }

    /// Widths `base, 2 base, 4 base`.
    pub fn with_base_width(in_channels: usize, base: usize) -> Self {
        Self {
            widths: vec![base, 2 * base, 4 * base],
            ..Self::new(in_channels)
        }
    }

    /// Every layer, head included, is a 4x4 convolution with stride 2 and padding 1.
    pub const GEOM: ConvGeom = ConvGeom::new(2, 1, 1);
    pub const KERNEL: usize = 4;

    /// Spatial size of the score map for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in 0..=self.widths.len() {
            h = Self::GEOM.out_dim(h, Self::KERNEL)?;
            w = Self::GEOM.out_dim(w, Self::KERNEL)?;
        }
        Some((h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: DiscriminatorConfig,
    pub store: ParamStore<T>,
}

pub fn init_discriminator<T: Scalar>(config: &DiscriminatorConfig, seed: u64) -> Result<DiscriminatorParams<T>> {
    if config.in_channels == 0 || config.widths.is_empty() || config.widths.contains(&0) {
        return Err(Error::Config(format!("invalid discriminator config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = DiscriminatorConfig::KERNEL;
    let mut cin = config.in_channels;
    let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
    for (i, &c) in config.widths.iter().enumerate() {
        let fan_in = cin * k * k;
        store.insert(format!("disc.{i}.weight"), uniform_tensor(&mut rng, &[c, cin, k, k], (3.0 * gain / fan_in as f64).sqrt()));
        store.insert(format!("disc.{i}.bias"), Tensor::zeros(&[c]));
        cin = c;
    }
    let fan_in = cin * k * k;
    store.insert("disc.head.weight", uniform_tensor(&mut rng, &[1, cin, k, k], (3.0 / fan_in as f64).sqrt()));
    store.insert("disc.head.bias", Tensor::zeros(&[1]));
    Ok(DiscriminatorParams {
        config: config.clone(),
        store,
    })
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, vars: &mut BoundParams<'a, T>, input: Var) -> Result<Var> {
        let c = g.value(input).shape().first().copied().unwrap_or(0);
        if c != self.config.in_channels {
            return Err(Error::shape("discriminator input channels", &[self.config.in_channels], &[c]));
        }
        let slope = T::lit(self.config.leaky_slope);
        let geom = DiscriminatorConfig::GEOM;
        let mut x = input;
        for i in 0..self.config.widths.len() {
            let w = vars.var(g, &format!("disc.{i}.weight"));
            let b = vars.var(g, &format!("disc.{i}.bias"));
            x = g.conv2d(x, w, Some(b), geom)?;
            x = g.leaky_relu(x, slope);
        }
        let w = vars.var(g, "disc.head.weight");
        let b = vars.var(g, "disc.head.bias");
        g.conv2d(x, w, Some(b), geom)
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }
}

/// Raw (pre-sigmoid) domain scores for a `(C, H, W)` input.
pub fn discriminator_forward<T: Scalar>(dparams: &DiscriminatorParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut vars = BoundParams::new(&dparams.store, Binding::Frozen);
    let x = g.constant(input.clone());
    let y = dparams.forward_graph(&mut g, &mut vars, x)?;
    Ok(g.value(y).clone())
}
