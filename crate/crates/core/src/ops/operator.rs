use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::angular::AngularKind;
use super::magnitude::{Magnitude, MagnitudeKind};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the kernel norm enters the magnitude function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingMode {
    /// `h` ignores `‖w‖`.
    Unweighted,
    /// `‖w‖·h(‖x‖)`.
    LinearWeighted,
    /// `α·tanh(‖x‖·‖w‖/ρ)`; tanh magnitude only.
    NonlinearCoupled,
    /// `α·tanh(‖w‖/ρ)·tanh(‖x‖/ρ)`; tanh magnitude only.
    NonlinearSeparate,
}

impl WeightingMode {
    pub const ALL: [WeightingMode; 4] = [
        WeightingMode::Unweighted,
        WeightingMode::LinearWeighted,
        WeightingMode::NonlinearCoupled,
        WeightingMode::NonlinearSeparate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingMode::Unweighted => "unweighted",
            WeightingMode::LinearWeighted => "linear-weighted",
            WeightingMode::NonlinearCoupled => "nonlinear-coupled",
            WeightingMode::NonlinearSeparate => "nonlinear-separate",
        }
    }
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightingMode::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weighting mode `{s}`")))
    }
}

/// A complete decoupled operator: `f(w, x) = h(‖w‖, ‖x‖)·g(θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub magnitude: Magnitude,
    pub angular: AngularKind,
    pub weighting: WeightingMode,
    /// Train the per-kernel operator radius. Only for kinds that have one.
    pub rho_learnable: bool,
}

/// `h` together with its partial derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MagnitudeResponse<T> {
    pub h: T,
    pub d_xn: T,
    pub d_wn: T,
    pub d_rho: T,
}

impl OperatorSpec {
    pub fn new(
        magnitude: Magnitude,
        angular: AngularKind,
        weighting: WeightingMode,
        rho_learnable: bool,
    ) -> Result<Self> {
        let spec = Self {
            magnitude,
            angular,
            weighting,
            rho_learnable,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default hyperparameters; the radius is learnable whenever it exists.
    pub fn preset(kind: MagnitudeKind, angular: AngularKind) -> Self {
        Self {
            magnitude: Magnitude::with_defaults(kind),
            angular,
            weighting: WeightingMode::Unweighted,
            rho_learnable: kind.has_radius(),
        }
    }

    pub fn with_weighting(mut self, weighting: WeightingMode) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_rho_learnable(mut self, learnable: bool) -> Self {
        self.rho_learnable = learnable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.magnitude.validate()?;
        self.angular.validate()?;
        let nonlinear = matches!(
            self.weighting,
            WeightingMode::NonlinearCoupled | WeightingMode::NonlinearSeparate
        );
        if nonlinear && self.magnitude.kind != MagnitudeKind::Tanh {
            return Err(Error::Config(format!(
                "{} weighting is only defined for the tanh magnitude, not {}",
                self.weighting, self.magnitude.kind
            )));
        }
        if self.rho_learnable && !self.has_radius() {
            return Err(Error::Config(format!(
                "{} magnitude has no operator radius to learn",
                self.magnitude.kind
            )));
        }
        Ok(())
    }

    /// Whether the operator carries a per-kernel radius `ρ`.
    pub fn has_radius(&self) -> bool {
        self.magnitude.kind.has_radius()
    }

    pub fn is_weighted(&self) -> bool {
        self.weighting != WeightingMode::Unweighted
    }

    /// Output magnitude never exceeds `α`.
    pub fn is_bounded(&self) -> bool {
        match self.weighting {
            WeightingMode::Unweighted => self.magnitude.kind.is_bounded(),
            WeightingMode::LinearWeighted => false,
            WeightingMode::NonlinearCoupled | WeightingMode::NonlinearSeparate => true,
        }
    }

    /// `h(‖w‖, ‖x‖)` with `rho_eff` the radius scaled by the patch-norm average.
    /// `w_norm` is ignored by unweighted operators.
    pub fn magnitude(&self, x_norm: f64, w_norm: f64, rho_eff: f64) -> Result<f64> {
        self.magnitude.value(x_norm, rho_eff)?;
        if !(w_norm >= 0.0) {
            return Err(Error::Domain(format!(
                "kernel norm must be non-negative, got {w_norm}"
            )));
        }
        Ok(self.response(x_norm, w_norm, rho_eff).h)
    }

    #[inline]
    pub(crate) fn response<T: Real>(&self, xn: T, wn: T, r: T) -> MagnitudeResponse<T> {
        match self.weighting {
            WeightingMode::Unweighted => {
                let (h, d_xn, d_rho) = self.magnitude.eval(xn, r);
                MagnitudeResponse {
                    h,
                    d_xn,
                    d_wn: T::zero(),
                    d_rho,
                }
            }
            WeightingMode::LinearWeighted => {
                let (h, d_xn, d_rho) = self.magnitude.eval(xn, r);
                MagnitudeResponse {
                    h: wn * h,
                    d_xn: wn * d_xn,
                    d_wn: h,
                    d_rho: wn * d_rho,
                }
            }
            WeightingMode::NonlinearCoupled => {
                let alpha = T::of(self.magnitude.alpha);
                let u = xn * wn / r;
                let t = u.tanh();
                let s = alpha * (T::one() - t * t);
                MagnitudeResponse {
                    h: alpha * t,
                    d_xn: s * wn / r,
                    d_wn: s * xn / r,
                    d_rho: -s * u / r,
                }
            }
            WeightingMode::NonlinearSeparate => {
                let alpha = T::of(self.magnitude.alpha);
                let tw = (wn / r).tanh();
                let tx = (xn / r).tanh();
                let sw = T::one() - tw * tw;
                let sx = T::one() - tx * tx;
                MagnitudeResponse {
                    h: alpha * tw * tx,
                    d_xn: alpha * tw * sx / r,
                    d_wn: alpha * sw * tx / r,
                    d_rho: -alpha * (sw * tx * wn + tw * sx * xn) / (r * r),
                }
            }
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}+{} ({}{})",
            self.magnitude.kind,
            self.angular,
            self.weighting,
            if self.rho_learnable {
                ", learnable ρ"
            } else {
                ""
            }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonlinear_weighting_needs_tanh() {
        let base = OperatorSpec::preset(MagnitudeKind::Ball, AngularKind::Cosine);
        assert!(base
            .with_weighting(WeightingMode::NonlinearCoupled)
            .validate()
            .is_err());
        let tanh = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine);
        assert!(tanh
            .with_weighting(WeightingMode::NonlinearSeparate)
            .validate()
            .is_ok());
    }

    #[test]
    fn learnable_radius_needs_a_radius() {
        let sphere = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
        assert!(!sphere.rho_learnable);
        assert!(sphere.with_rho_learnable(true).validate().is_err());
        for kind in [
            MagnitudeKind::Ball,
            MagnitudeKind::Tanh,
            MagnitudeKind::Segmented,
        ] {
            assert!(OperatorSpec::preset(kind, AngularKind::Cosine).rho_learnable);
        }
    }

    #[test]
    fn weighted_partials_match_finite_differences() {
        let h = 1e-6;
        let tanh = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine);
        let mut specs: Vec<OperatorSpec> = WeightingMode::ALL
            .into_iter()
            .map(|w| tanh.with_weighting(w))
            .collect();
        specs.push(
            OperatorSpec::preset(MagnitudeKind::Mix, AngularKind::Cosine)
                .with_weighting(WeightingMode::LinearWeighted),
        );
        for spec in specs {
            let (xn, wn, r) = (0.8, 1.7, 1.1);
            let resp = spec.response(xn, wn, r);
            let f = |a: f64, b: f64, c: f64| spec.response(a, b, c).h;
            let fx = (f(xn + h, wn, r) - f(xn - h, wn, r)) / (2.0 * h);
            let fw = (f(xn, wn + h, r) - f(xn, wn - h, r)) / (2.0 * h);
            let fr = (f(xn, wn, r + h) - f(xn, wn, r - h)) / (2.0 * h);
            assert!((resp.d_xn - fx).abs() < 1e-8, "{spec}");
            assert!((resp.d_wn - fw).abs() < 1e-8, "{spec}");
            assert!((resp.d_rho - fr).abs() < 1e-8, "{spec}");
        }
    }

    #[test]
    fn linear_weighting_scales_by_kernel_norm() {
        let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine)
            .with_weighting(WeightingMode::LinearWeighted);
        assert_eq!(spec.magnitude(5.0, 3.0, 1.0).unwrap(), 3.0);
    }
}
