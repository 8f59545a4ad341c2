//! Decoupled operators `f(w, x) = h(‖w‖, ‖x‖)·g(θ)` and the layer built on them.

mod angular;
mod decompose;
mod layer;
mod magnitude;
mod operator;

pub use angular::AngularKind;
pub use decompose::{decompose, AngleDecomposition, NORM_FLOOR};
pub use layer::{DecoupledCache, DecoupledConvLayer, DecoupledGrads, DEFAULT_MA_MOMENTUM, RHO_MIN};
pub use magnitude::{Magnitude, MagnitudeKind};
pub use operator::{OperatorSpec, WeightingMode};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `(max(0, ⟨w, x⟩), ‖w‖·‖x‖·max(0, cos θ))`: ReLU on an inner product is a
/// decoupled operator with linear-weighted linear magnitude.
pub fn relu_decoupled_equivalence(w: &Tensor<f64>, x: &Tensor<f64>) -> Result<(f64, f64)> {
    if w.len() != x.len() {
        return Err(dim_err!("vectors have {} and {} entries", w.len(), x.len()));
    }
    let inner: f64 = w.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    let (wn, xn) = (w.norm(), x.norm());
    let cos = if wn < NORM_FLOOR || xn < NORM_FLOOR {
        0.0
    } else {
        (inner / (wn * xn)).clamp(-1.0, 1.0)
    };
    Ok((inner.max(0.0), wn * xn * cos.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_identity_examples() {
        let ones = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let (l, r) = relu_decoupled_equivalence(&ones, &ones).unwrap();
        assert_eq!(l, 2.0);
        assert!((r - 2.0).abs() < 1e-15);
        let w = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let x = Tensor::from_f64(&[2], &[-1.0, 0.0]).unwrap();
        assert_eq!(relu_decoupled_equivalence(&w, &x).unwrap(), (0.0, 0.0));
    }
}
