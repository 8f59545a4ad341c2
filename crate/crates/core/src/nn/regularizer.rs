use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Penalty on the kernel matrix of every convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "kebab-case")]
pub enum RegularizerSpec {
    #[default]
    None,
    /// `λ‖WᵀW - I‖²_F`
    Orthonormal(f64),
    /// `λ‖WᵀW - diag(WᵀW)‖²_F`
    Orthogonal(f64),
    /// `λ‖W‖²_F`
    L2(f64),
}

impl RegularizerSpec {
    pub fn lambda(&self) -> f64 {
        match *self {
            RegularizerSpec::None => 0.0,
            RegularizerSpec::Orthonormal(l)
            | RegularizerSpec::Orthogonal(l)
            | RegularizerSpec::L2(l) => l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!(
                "regularizer weight must be >= 0, got {l}"
            )));
        }
        Ok(())
    }
}

/// Penalty value and gradient for a kernel matrix whose columns are kernels.
pub fn orthogonality_penalty<T: Real>(
    spec: RegularizerSpec,
    w: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    spec.validate()?;
    let (_, n) = w.dims2()?;
    let lambda = spec.lambda();
    match spec {
        RegularizerSpec::None => Ok((0.0, Tensor::zeros(w.shape())?)),
        RegularizerSpec::L2(_) => {
            let value = lambda * w.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            Ok((value, w.scale(T::of(2.0 * lambda))))
        }
        RegularizerSpec::Orthonormal(_) | RegularizerSpec::Orthogonal(_) => {
            let mut gram = w.matmul_tn(w)?;
            let keep_diag = matches!(spec, RegularizerSpec::Orthonormal(_));
            for i in 0..n {
                let d = &mut gram.data_mut()[i * n + i];
                *d = if keep_diag { *d - T::one() } else { T::zero() };
            }
            let value = lambda * gram.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            let grad = w.matmul(&gram)?.scale(T::of(4.0 * lambda));
            Ok((value, grad))
        }
    }
}
