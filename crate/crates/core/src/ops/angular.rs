use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Tolerance for angles that fall just outside `[0, π]`.
const THETA_SLACK: f64 = 1e-9;

/// Keeps `1/sin θ` bounded when differentiating through `arccos`.
const COS_CLAMP: f64 = 1e-7;

/// The angular activation `g(θ)`, mapping `[0, π]` onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AngularKind {
    /// `1 - 2θ/π`
    LinearAngle,
    /// `cos θ`
    Cosine,
    /// Rescaled sigmoid in θ; `k` sets the curvature.
    Sigmoid { k: f64 },
    /// `sign(cos θ)·cos²θ`
    SquareCosine,
}

impl AngularKind {
    pub const DEFAULT_SIGMOID_K: f64 = 0.3;

    pub fn all() -> [AngularKind; 4] {
        [
            AngularKind::LinearAngle,
            AngularKind::Cosine,
            AngularKind::Sigmoid {
                k: Self::DEFAULT_SIGMOID_K,
            },
            AngularKind::SquareCosine,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AngularKind::LinearAngle => "linear",
            AngularKind::Cosine => "cosine",
            AngularKind::Sigmoid { .. } => "sigmoid",
            AngularKind::SquareCosine => "square-cosine",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AngularKind::Sigmoid { k } = *self {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Domain(format!(
                    "sigmoid curvature must be positive, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// `g(θ)` for an angle in `[0, π]`.
    pub fn value(&self, theta: f64) -> Result<f64> {
        if !(-THETA_SLACK..=PI + THETA_SLACK).contains(&theta) {
            return Err(Error::Domain(format!("angle {theta} is outside [0, π]")));
        }
        self.validate()?;
        let theta = theta.clamp(0.0, PI);
        Ok(match *self {
            AngularKind::LinearAngle => 1.0 - 2.0 * theta / PI,
            AngularKind::Cosine => theta.cos(),
            AngularKind::Sigmoid { k } => sigmoid(theta, k).0,
            AngularKind::SquareCosine => {
                let c = theta.cos();
                c * c.abs()
            }
        })
    }

    /// `g` evaluated from `cos θ ∈ [-1, 1]`.
    #[inline]
    pub(crate) fn of_cos<T: Real>(&self, c: T) -> T {
        match *self {
            AngularKind::Cosine => c,
            AngularKind::SquareCosine => c * c.abs(),
            AngularKind::LinearAngle => {
                let theta = c.max(-T::one()).min(T::one()).acos();
                T::one() - T::of(2.0 / PI) * theta
            }
            AngularKind::Sigmoid { k } => {
                let theta = c.max(-T::one()).min(T::one()).acos();
                sigmoid(theta, T::of(k)).0
            }
        }
    }

    /// `(g, dg/d cos θ)`. Inverse-cosine kinds clamp `cos θ` to
    /// `[-1 + 1e-7, 1 - 1e-7]` before differentiating.
    #[inline]
    pub(crate) fn of_cos_with_grad<T: Real>(&self, c: T) -> (T, T) {
        match *self {
            AngularKind::Cosine => (c, T::one()),
            AngularKind::SquareCosine => (c * c.abs(), T::of(2.0) * c.abs()),
            AngularKind::LinearAngle | AngularKind::Sigmoid { .. } => {
                let g = self.of_cos(c);
                let lim = T::one() - T::of(COS_CLAMP);
                let cc = c.max(-lim).min(lim);
                let dtheta_dc = -T::one() / (T::one() - cc * cc).sqrt();
                let dg_dtheta = match *self {
                    AngularKind::Sigmoid { k } => sigmoid(cc.acos(), T::of(k)).1,
                    _ => T::of(-2.0 / PI),
                };
                (g, dg_dtheta * dtheta_dc)
            }
        }
    }

    /// `dg/dθ` for the checked public API.
    pub fn derivative(&self, theta: f64) -> Result<f64> {
        self.value(theta)?;
        let theta = theta.clamp(0.0, PI);
        Ok(match *self {
            AngularKind::LinearAngle => -2.0 / PI,
            AngularKind::Cosine => -theta.sin(),
            AngularKind::Sigmoid { k } => sigmoid(theta, k).1,
            AngularKind::SquareCosine => -2.0 * theta.cos().abs() * theta.sin(),
        })
    }
}

/// `g(θ) = C·(1 - e^u)/(1 + e^u)` with `u = θ/k - π/(2k)` and
/// `C = (1 + e^{-π/2k})/(1 - e^{-π/2k})`, written as `-C·tanh(u/2)`.
/// Returns `(g, dg/dθ)`.
#[inline]
fn sigmoid<T: Real>(theta: T, k: T) -> (T, T) {
    let half_pi = T::of(PI / 2.0);
    let e = (-half_pi / k).exp();
    let scale = (T::one() + e) / (T::one() - e);
    let u = theta / k - half_pi / k;
    let t = (u / T::of(2.0)).tanh();
    let g = -scale * t;
    let dg = -scale * (T::one() - t * t) / (T::of(2.0) * k);
    (g, dg)
}

impl fmt::Display for AngularKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AngularKind::Sigmoid { k } => write!(f, "sigmoid(k={k})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for AngularKind {
    type Err = Error;

    /// Accepts `linear`, `cosine`, `square-cosine`, `sigmoid` and `sigmoid:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "linear" => AngularKind::LinearAngle,
            "cosine" => AngularKind::Cosine,
            "square-cosine" => AngularKind::SquareCosine,
            "sigmoid" => AngularKind::Sigmoid {
                k: Self::DEFAULT_SIGMOID_K,
            },
            other => match other.strip_prefix("sigmoid:") {
                Some(k) => AngularKind::Sigmoid {
                    k: k.parse()
                        .map_err(|_| Error::Config(format!("bad sigmoid curvature `{k}`")))?,
                },
                None => return Err(Error::Config(format!("unknown angular function `{s}`"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_for_every_kind() {
        let mut kinds = AngularKind::all().to_vec();
        kinds.extend([0.05, 1.0, 10.0].map(|k| AngularKind::Sigmoid { k }));
        for g in kinds {
            assert!((g.value(0.0).unwrap() - 1.0).abs() < 1e-12, "{g}");
            assert!((g.value(PI).unwrap() + 1.0).abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn documented_midpoints() {
        assert!(AngularKind::LinearAngle.value(PI / 2.0).unwrap().abs() < 1e-15);
        let sq = AngularKind::SquareCosine;
        assert!((sq.value(PI / 3.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((sq.value(2.0 * PI / 3.0).unwrap() + 0.25).abs() < 1e-15);
        let sig = AngularKind::Sigmoid { k: 0.3 };
        assert!(sig.value(PI / 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn out_of_range_angles() {
        let g = AngularKind::Cosine;
        assert!(g.value(-1e-10).is_ok());
        assert!(g.value(PI + 1e-10).is_ok());
        assert!(matches!(g.value(-1e-6), Err(Error::Domain(_))));
        assert!(matches!(g.value(4.0), Err(Error::Domain(_))));
        assert!(AngularKind::Sigmoid { k: 0.0 }.value(1.0).is_err());
    }

    #[test]
    fn cos_route_agrees_with_theta_route() {
        for g in AngularKind::all() {
            for i in 0..=50 {
                let theta = PI * i as f64 / 50.0;
                let a = g.value(theta).unwrap();
                let b: f64 = g.of_cos(theta.cos());
                assert!((a - b).abs() < 1e-12, "{g} at {theta}");
            }
        }
    }

    #[test]
    fn cos_gradient_matches_finite_difference() {
        let h = 1e-6;
        for g in AngularKind::all() {
            for &c in &[-0.9, -0.3, 0.0, 0.4, 0.95] {
                let (_, d): (f64, f64) = g.of_cos_with_grad(c);
                let fd = (g.of_cos(c + h) - g.of_cos(c - h)) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{g} at {c}");
            }
        }
    }

    #[test]
    fn theta_derivative_matches_finite_difference() {
        let h = 1e-6;
        for g in AngularKind::all() {
            for &t in &[0.3, 1.2, 2.0, 2.9] {
                let fd = (g.value(t + h).unwrap() - g.value(t - h).unwrap()) / (2.0 * h);
                assert!((g.derivative(t).unwrap() - fd).abs() < 1e-6, "{g} at {t}");
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            "cosine".parse::<AngularKind>().unwrap(),
            AngularKind::Cosine
        );
        assert_eq!(
            "sigmoid:0.7".parse::<AngularKind>().unwrap(),
            AngularKind::Sigmoid { k: 0.7 }
        );
        assert!("sigmoid:-1".parse::<AngularKind>().is_err());
        assert!("relu".parse::<AngularKind>().is_err());
    }
}
