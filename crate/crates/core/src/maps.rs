//! Typed views over the per-pixel tensors exchanged between modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel class indices, row-major `h x w`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= num_classes) {
            Some(&c) => Err(Error::ClassIndex {
                index: c as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Class probabilities `P`, shape `(C, H, W)`, summing to one over `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSegMap<T>(pub Tensor<T>);

/// Predicted inverse depth `Z`, shape `(1, H, W)`, nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrediction<T>(pub Tensor<T>);

/// Weighted self-information `I = -P log P`, shape `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurprisalMap<T>(pub Tensor<T>);

/// Depth-weighted surprisal `I * Z`, shape `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAwareMap<T>(pub Tensor<T>);

impl<T: Scalar> SoftSegMap<T> {
    pub fn num_classes(&self) -> usize {
        self.0.chw().0
    }

    /// Largest deviation of a per-pixel channel sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        let (c, h, w) = self.0.chw();
        let hw = h * w;
        let d = self.0.data();
        (0..hw)
            .map(|px| {
                let s: f64 = (0..c).map(|ch| d[ch * hw + px].as_f64()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let (c, h, w) = self.0.chw();
        let hw = h * w;
        let d = self.0.data();
        let data = (0..hw)
            .map(|px| {
                let mut best = 0usize;
                for ch in 1..c {
                    if d[ch * hw + px] > d[best * hw + px] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }
}
