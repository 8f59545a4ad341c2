//! ADAM and SGD with momentum, weighted gradients, and weight projection.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Network, ParamRole};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    SgdMomentum {
        momentum: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

/// How decoupled kernel gradients are transformed before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Standard,
    /// Every kernel-row gradient is multiplied by that kernel's norm.
    Weighted,
}

/// Rescale every unweighted decoupled kernel to norm `target_norm` after each
/// update whose index is a multiple of `interval`, and once before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub interval: usize,
    pub target_norm: f64,
}

impl Default for Projection {
    fn default() -> Self {
        Self {
            interval: 1,
            target_norm: 1.0,
        }
    }
}

/// Piecewise-constant learning rate: `(first step, lr)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub points: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            points: vec![(0, lr)],
        }
    }

    /// `lr`, divided by 10 at half of `total_steps` and again at three quarters.
    pub fn step_decay(lr: f64, total_steps: usize) -> Self {
        let mut points = vec![(0, lr)];
        for (frac, div) in [(2, 10.0), (4, 100.0)] {
            let at = if frac == 2 {
                total_steps / 2
            } else {
                total_steps * 3 / 4
            };
            if at > points.last().map_or(0, |p| p.0) {
                points.push((at, lr / div));
            }
        }
        Self { points }
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.first() {
            Some(&(0, _)) => {}
            _ => {
                return Err(Error::Config(
                    "learning-rate schedule must start at step 0".into(),
                ))
            }
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(
                    "learning-rate schedule steps must increase".into(),
                ));
            }
        }
        if let Some(&(_, lr)) = self.points.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.0 <= step)
            .last()
            .map_or(self.points[0].1, |p| p.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub gradient_mode: GradientMode,
    pub projection: Option<Projection>,
}

impl UpdateRule {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            schedule: LrSchedule::constant(lr),
            gradient_mode: GradientMode::Standard,
            projection: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        match self.kind {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0)
                {
                    return Err(Error::Config(
                        "ADAM needs betas in [0, 1) and epsilon > 0".into(),
                    ));
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!(
                        "momentum must be in [0, 1), got {momentum}"
                    )));
                }
            }
        }
        if let Some(p) = self.projection {
            if p.interval == 0 || !(p.target_norm > 0.0 && p.target_norm.is_finite()) {
                return Err(Error::Config(
                    "projection needs interval >= 1 and a positive norm".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `‖w_k‖·∂L/∂w_k` for every kernel row.
pub fn apply_weighted_gradients<T: Real>(
    grad: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<Tensor<T>> {
    grad.same_shape(weight)?;
    let (n, d) = weight.dims2()?;
    let mut out = grad.clone();
    for k in 0..n {
        let norm = row_norm(weight.row(k));
        if norm.as_f64() < crate::ops::NORM_FLOOR {
            return Err(Error::Numeric(format!("kernel {k} has zero norm")));
        }
        out.data_mut()[k * d..(k + 1) * d]
            .iter_mut()
            .for_each(|g| *g *= norm);
    }
    Ok(out)
}

/// `w_k ← s·w_k/‖w_k‖` for every row.
pub fn project_weights<T: Real>(weight: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let (n, d) = weight.dims2()?;
    let mut out = weight.clone();
    for k in 0..n {
        let norm = row_norm(weight.row(k));
        if norm.as_f64() < crate::ops::NORM_FLOOR {
            return Err(Error::Numeric(format!("kernel {k} has zero norm")));
        }
        let scale = T::of(s) / norm;
        out.data_mut()[k * d..(k + 1) * d]
            .iter_mut()
            .for_each(|w| *w *= scale);
    }
    Ok(out)
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn projectable(role: ParamRole) -> bool {
    role == ParamRole::DecoupledKernel { weighted: false }
}

/// Optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub rule: UpdateRule,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    updates: usize,
}

impl<T: Real> Optimizer<T> {
    pub fn new(rule: UpdateRule, net: &Network<T>) -> Result<Self> {
        rule.validate()?;
        let zeros = || -> Result<Vec<Tensor<T>>> {
            net.params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Ok(Self {
            first: zeros()?,
            second: zeros()?,
            updates: 0,
            rule,
        })
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Projects kernels before the first update, so training starts on the
    /// sphere of radius `s`.
    pub fn prepare(&self, net: &mut Network<T>) -> Result<()> {
        if let Some(p) = self.rule.projection {
            project_network(net, p.target_norm)?;
        }
        Ok(())
    }

    /// One update with the learning rate of `step_index`.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        mut grads: Vec<Tensor<T>>,
        step_index: usize,
    ) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(dim_err!(
                "{} gradients for {} parameters",
                grads.len(),
                self.first.len()
            ));
        }
        for (g, p) in grads.iter().zip(net.params()) {
            if g.shape() != p.value.shape() {
                return Err(dim_err!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`; update skipped",
                    p.name
                )));
            }
        }
        if self.rule.gradient_mode == GradientMode::Weighted {
            for (g, p) in grads.iter_mut().zip(net.params()) {
                if projectable(p.role) {
                    *g = apply_weighted_gradients(g, p.value)?;
                }
            }
        }
        self.updates += 1;
        let lr = self.rule.schedule.lr_at(step_index);
        match self.rule.kind {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(self.updates as i32);
                let c2 = 1.0 - beta2.powi(self.updates as i32);
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(epsilon));
                let (lr_t, c1, c2) = (T::of(lr), T::of(c1), T::of(c2));
                for (((p, g), m), v) in net
                    .params_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let pd = p.value.data_mut();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let gi = g.data()[i];
                        md[i] = b1 * md[i] + (T::one() - b1) * gi;
                        vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        pd[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                let (mu, lr_t) = (T::of(momentum), T::of(lr));
                for ((p, g), m) in net
                    .params_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.first)
                {
                    let pd = p.value.data_mut();
                    let md = m.data_mut();
                    for i in 0..pd.len() {
                        md[i] = mu * md[i] + g.data()[i];
                        pd[i] -= lr_t * md[i];
                    }
                }
            }
        }
        net.clamp_radii();
        if let Some(p) = self.rule.projection {
            if step_index.is_multiple_of(p.interval) {
                project_network(net, p.target_norm)?;
            }
        }
        Ok(())
    }
}

fn project_network<T: Real>(net: &mut Network<T>, s: f64) -> Result<()> {
    for p in net.params_mut() {
        if projectable(p.role) {
            *p.value = project_weights(p.value, s)?;
        }
    }
    Ok(())
}
