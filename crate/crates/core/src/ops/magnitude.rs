use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Shape of the norm-dependent factor `h(‖w‖, ‖x‖)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnitudeKind {
    /// `α`
    Sphere,
    /// `α·min(‖x‖, ρ)/ρ`
    Ball,
    /// `α·tanh(‖x‖/ρ)`
    Tanh,
    /// `α·‖x‖`
    Linear,
    /// `α·‖x‖` up to `ρ`, slope `β` past it.
    Segmented,
    /// `α·log(1 + ‖x‖)`
    Log,
    /// `α·‖x‖ + β·log(1 + ‖x‖)`
    Mix,
}

impl MagnitudeKind {
    pub const ALL: [MagnitudeKind; 7] = [
        MagnitudeKind::Sphere,
        MagnitudeKind::Ball,
        MagnitudeKind::Tanh,
        MagnitudeKind::Linear,
        MagnitudeKind::Segmented,
        MagnitudeKind::Log,
        MagnitudeKind::Mix,
    ];

    /// Kinds with a nonzero operator radius.
    pub fn has_radius(self) -> bool {
        matches!(
            self,
            MagnitudeKind::Ball | MagnitudeKind::Tanh | MagnitudeKind::Segmented
        )
    }

    /// Kinds whose unweighted output never exceeds `α` in magnitude.
    pub fn is_bounded(self) -> bool {
        matches!(
            self,
            MagnitudeKind::Sphere | MagnitudeKind::Ball | MagnitudeKind::Tanh
        )
    }

    /// Kinds with a kink in `‖x‖` at the operator radius.
    pub fn has_knee(self) -> bool {
        matches!(self, MagnitudeKind::Ball | MagnitudeKind::Segmented)
    }

    pub fn name(self) -> &'static str {
        match self {
            MagnitudeKind::Sphere => "sphere",
            MagnitudeKind::Ball => "ball",
            MagnitudeKind::Tanh => "tanh",
            MagnitudeKind::Linear => "linear",
            MagnitudeKind::Segmented => "segmented",
            MagnitudeKind::Log => "log",
            MagnitudeKind::Mix => "mix",
        }
    }
}

impl fmt::Display for MagnitudeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MagnitudeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MagnitudeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown magnitude function `{s}`")))
    }
}

/// A magnitude function with its scalar hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Magnitude {
    pub kind: MagnitudeKind,
    /// Output scale, or first slope for `Segmented`.
    pub alpha: f64,
    /// Second slope for `Segmented`, log weight for `Mix`; unused otherwise.
    pub beta: f64,
}

impl Magnitude {
    pub fn new(kind: MagnitudeKind, alpha: f64, beta: f64) -> Result<Self> {
        let m = Self { kind, alpha, beta };
        m.validate()?;
        Ok(m)
    }

    /// `α = 1`; `β = 0.5` for `Segmented` and `β = 1` for `Mix`.
    pub fn with_defaults(kind: MagnitudeKind) -> Self {
        let beta = match kind {
            MagnitudeKind::Segmented => 0.5,
            MagnitudeKind::Mix => 1.0,
            _ => 0.0,
        };
        Self {
            kind,
            alpha: 1.0,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!(
                "{} magnitude needs alpha > 0, got {}",
                self.kind, self.alpha
            )));
        }
        if matches!(self.kind, MagnitudeKind::Segmented | MagnitudeKind::Mix)
            && !(self.beta >= 0.0 && self.beta.is_finite())
        {
            return Err(Error::Domain(format!(
                "{} magnitude needs beta >= 0, got {}",
                self.kind, self.beta
            )));
        }
        Ok(())
    }

    /// `h(‖x‖)` with the radius already scaled by the patch-norm average.
    pub fn value(&self, x_norm: f64, rho_eff: f64) -> Result<f64> {
        if !(rho_eff > 0.0) {
            return Err(Error::Domain(format!(
                "operator radius must be positive, got {rho_eff}"
            )));
        }
        if !(x_norm >= 0.0) {
            return Err(Error::Domain(format!(
                "input norm must be non-negative, got {x_norm}"
            )));
        }
        Ok(self.eval(x_norm, rho_eff).0)
    }

    /// Returns `(h, ∂h/∂‖x‖, ∂h/∂ρ_eff)`.
    ///
    /// At the knee of `Ball` and `Segmented` the left-branch derivative is used.
    #[inline]
    pub(crate) fn eval<T: Real>(&self, xn: T, r: T) -> (T, T, T) {
        let alpha = T::of(self.alpha);
        let beta = T::of(self.beta);
        match self.kind {
            MagnitudeKind::Sphere => (alpha, T::zero(), T::zero()),
            MagnitudeKind::Ball => {
                if xn <= r {
                    (alpha * xn / r, alpha / r, -alpha * xn / (r * r))
                } else {
                    (alpha, T::zero(), T::zero())
                }
            }
            MagnitudeKind::Tanh => {
                let t = (xn / r).tanh();
                let sech2 = T::one() - t * t;
                (alpha * t, alpha * sech2 / r, -alpha * sech2 * xn / (r * r))
            }
            MagnitudeKind::Linear => (alpha * xn, alpha, T::zero()),
            MagnitudeKind::Segmented => {
                if xn <= r {
                    (alpha * xn, alpha, T::zero())
                } else {
                    (beta * xn + (alpha - beta) * r, beta, alpha - beta)
                }
            }
            MagnitudeKind::Log => (alpha * xn.ln_1p(), alpha / (T::one() + xn), T::zero()),
            MagnitudeKind::Mix => (
                alpha * xn + beta * xn.ln_1p(),
                alpha + beta / (T::one() + xn),
                T::zero(),
            ),
        }
    }
}
