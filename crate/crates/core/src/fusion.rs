//! Output-space transforms used as adversarial alignment inputs.

use crate::error::{Error, Result};
use crate::maps::{DepthAwareMap, DepthPrediction, SoftSegMap, SurprisalMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Log base of the self-information map.
pub const SURPRISAL_LOG_BASE: f64 = 2.0;

/// `-p log p / ln(base)`, zero at `p = 0` and `p = 1`.
#[inline]
pub fn surprisal<T: Scalar>(p: T, inv_ln_base: T) -> T {
    if p <= T::zero() || p >= T::one() {
        T::zero()
    } else {
        -p * p.ln() * inv_ln_base
    }
}

/// Derivative of [`surprisal`]; the log is floored so `p = 0` stays finite.
#[inline]
pub fn surprisal_derivative<T: Scalar>(p: T, inv_ln_base: T) -> T {
    let floor = T::lit(crate::losses::PROB_FLOOR);
    -(p.max(floor).ln() + T::one()) * inv_ln_base
}

pub fn self_information<T: Scalar>(p: &SoftSegMap<T>) -> SurprisalMap<T> {
    self_information_with_base(p, T::lit(SURPRISAL_LOG_BASE))
}

pub fn self_information_with_base<T: Scalar>(p: &SoftSegMap<T>, base: T) -> SurprisalMap<T> {
    let inv = T::one() / base.ln();
    SurprisalMap(p.0.map(|v| surprisal(v, inv)))
}

/// `I[c, h, w] * Z[h, w]`.
pub fn dada_fusion<T: Scalar>(i: &SurprisalMap<T>, z: &DepthPrediction<T>) -> Result<DepthAwareMap<T>> {
    let (c, h, w) = i.0.chw();
    if z.0.shape() != [1, h, w] {
        return Err(Error::shape("dada_fusion", &[1, h, w], z.0.shape()));
    }
    let hw = h * w;
    let zd = z.0.data();
    let data = i
        .0
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| v * zd[k % hw])
        .collect();
    Ok(DepthAwareMap(Tensor::new(&[c, h, w], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn inv2() -> f64 {
        1.0 / 2f64.ln()
    }

    #[test]
    fn surprisal_examples() {
        assert_eq!(surprisal(1.0, inv2()), 0.0);
        assert_eq!(surprisal(0.0, inv2()), 0.0);
        assert_abs_diff_eq!(surprisal(0.5, inv2()), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn surprisal_peak_is_below_one() {
        let peak = 1.0 / (std::f64::consts::E * 2f64.ln());
        assert_abs_diff_eq!(peak, 0.5307, epsilon = 1e-4);
        assert_abs_diff_eq!(surprisal(1.0 / std::f64::consts::E, inv2()), peak, epsilon = 1e-15);
        for k in 0..=1000 {
            assert!(surprisal(k as f64 / 1000.0, inv2()) <= peak + 1e-15);
        }
    }

    #[test]
    fn natural_log_variant() {
        let p = SoftSegMap(Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap());
        let i = self_information_with_base(&p, std::f64::consts::E);
        assert_abs_diff_eq!(i.0.data()[0], 0.5 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn fusion_examples() {
        let i = SurprisalMap(Tensor::new(&[2, 1, 1], vec![0.5, 0.2]).unwrap());
        let z = DepthPrediction(Tensor::new(&[1, 1, 1], vec![0.4]).unwrap());
        let f = dada_fusion(&i, &z).unwrap();
        assert_abs_diff_eq!(f.0.data()[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(f.0.data()[1], 0.08, epsilon = 1e-15);

        let ones = DepthPrediction(Tensor::full(&[1, 1, 1], 1.0));
        assert_eq!(dada_fusion(&i, &ones).unwrap().0, i.0);
        let zeros = DepthPrediction(Tensor::zeros(&[1, 1, 1]));
        assert!(dada_fusion(&i, &zeros).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_rejects_spatial_mismatch() {
        let i = SurprisalMap(Tensor::<f64>::zeros(&[2, 2, 2]));
        let z = DepthPrediction(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(dada_fusion(&i, &z), Err(Error::Shape { .. })));
    }
}
