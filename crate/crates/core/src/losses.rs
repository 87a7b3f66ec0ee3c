//! Supervised source objectives and the domain-classification objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::graph::sigmoid;
use crate::error::{Error, Result};
use crate::maps::{DepthPrediction, LabelMap, SoftSegMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to every probability before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default berHu threshold as a fraction of the largest absolute residual.
pub const BERHU_FRACTION: f64 = 0.2;

/// Source is labelled 1, target 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabel {
    Target = 0,
    Source = 1,
}

impl DomainLabel {
    pub fn value<T: Scalar>(self) -> T {
        match self {
            DomainLabel::Source => T::one(),
            DomainLabel::Target => T::zero(),
        }
    }
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub seg_loss: f64,
    pub depth_loss: f64,
    pub source_objective: f64,
    pub d_loss: Option<f64>,
    pub adv_loss: Option<f64>,
}

/// Reverse Huber: `|e|` up to `c`, `(e^2 + c^2) / 2c` beyond.
pub fn berhu<T: Scalar>(e: T, c: T) -> T {
    let a = e.abs();
    if a <= c {
        a
    } else {
        (e * e + c * c) / (c + c)
    }
}

pub fn berhu_derivative<T: Scalar>(e: T, c: T) -> T {
    if e.abs() <= c {
        if e > T::zero() {
            T::one()
        } else if e < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    } else {
        e / c
    }
}

/// `fraction * max |pred - target|`.
pub fn berhu_threshold<T: Scalar>(pred: &[T], target: &[T], fraction: T) -> T {
    let max = pred
        .iter()
        .zip(target)
        .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    fraction * max
}

pub(crate) fn nll_derivative<T: Scalar>(p: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    if p > floor {
        -T::one() / p
    } else {
        T::zero()
    }
}

pub(crate) fn seg_nll_slice<T: Scalar>(p: &[T], labels: &[u8], c: usize) -> Result<T> {
    let hw = labels.len();
    let floor = T::lit(PROB_FLOOR);
    let mut acc = T::zero();
    for (px, &y) in labels.iter().enumerate() {
        if y as usize >= c {
            return Err(Error::ClassIndex {
                index: y as usize,
                num_classes: c,
            });
        }
        acc -= p[y as usize * hw + px].max(floor).ln();
    }
    Ok(acc / T::lit(hw as f64))
}

fn bce_one<T: Scalar>(s: T, label: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    let p1 = sigmoid(s).max(floor);
    let p0 = sigmoid(-s).max(floor);
    -(label * p1.ln() + (T::one() - label) * p0.ln())
}

pub(crate) fn bce_derivative<T: Scalar>(s: T, label: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    let p1 = sigmoid(s);
    let p0 = sigmoid(-s);
    let mut d = T::zero();
    if p1 > floor {
        d -= label * p0;
    }
    if p0 > floor {
        d += (T::one() - label) * p1;
    }
    d
}

pub(crate) fn domain_bce_slice<T: Scalar>(scores: &[T], label: T) -> T {
    let n = T::lit(scores.len() as f64);
    scores.iter().map(|&s| bce_one(s, label)).sum::<T>() / n
}

/// Pixel-mean cross-entropy of the true class.
pub fn seg_loss<T: Scalar>(p: &SoftSegMap<T>, y: &LabelMap) -> Result<T> {
    let (c, h, w) = p.0.chw();
    if (y.height, y.width) != (h, w) {
        return Err(Error::shape("seg_loss", &[h, w], &[y.height, y.width]));
    }
    seg_nll_slice(p.0.data(), &y.data, c)
}

/// Pixel-mean berHu with the threshold at `BERHU_FRACTION` of this image's
/// largest residual. Zero when prediction and target agree everywhere.
pub fn depth_loss<T: Scalar>(z_pred: &DepthPrediction<T>, z_true: &Tensor<T>) -> Result<T> {
    depth_loss_with_fraction(z_pred, z_true, T::lit(BERHU_FRACTION))
}

pub fn depth_loss_with_fraction<T: Scalar>(
    z_pred: &DepthPrediction<T>,
    z_true: &Tensor<T>,
    fraction: T,
) -> Result<T> {
    let pred = z_pred.0.data();
    if z_pred.0.len() != z_true.len() {
        return Err(Error::shape("depth_loss", z_pred.0.shape(), z_true.shape()));
    }
    let c = berhu_threshold(pred, z_true.data(), fraction);
    if c <= T::zero() {
        return Ok(T::zero());
    }
    let n = T::lit(pred.len() as f64);
    Ok(pred
        .iter()
        .zip(z_true.data())
        .map(|(&a, &b)| berhu(a - b, c))
        .sum::<T>()
        / n)
}

/// `seg_loss + lambda_dep * depth_loss` for one sample.
pub fn source_objective<T: Scalar>(
    p: &SoftSegMap<T>,
    y: &LabelMap,
    z_pred: &DepthPrediction<T>,
    z_true: &Tensor<T>,
    lambda_dep: T,
) -> Result<T> {
    if lambda_dep < T::zero() {
        return Err(Error::Config(format!("lambda_dep must be >= 0, got {lambda_dep}")));
    }
    Ok(seg_loss(p, y)? + lambda_dep * depth_loss(z_pred, z_true)?)
}

/// Mean binary cross-entropy between `sigmoid(score)` and the domain label.
pub fn domain_bce<T: Scalar>(scores: &Tensor<T>, label: DomainLabel) -> T {
    domain_bce_slice(scores.data(), label.value())
}
