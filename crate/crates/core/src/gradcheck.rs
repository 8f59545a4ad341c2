//! Central finite-difference checks of the analytic backward passes (f64 only).

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;

use crate::error::Result;
use crate::im2col::ConvGeometry;
use crate::nn::{softmax_xent, LayerNode, Network};
use crate::ops::{DecoupledConvLayer, OperatorSpec};
use crate::tensor::Tensor;
use crate::Mode;

/// Step used by every check unless the caller picks another.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `‖a - n‖ / max(‖a‖, ‖n‖, 1e-8)` over a whole gradient group.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let sq = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = sq(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = sq(&mut analytic.iter().copied())
        .max(sq(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Relative errors of one single-patch, single-kernel evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointErrors {
    pub input: f64,
    pub weight: f64,
    /// `None` when the radius is fixed.
    pub rho: Option<f64>,
    /// Over the concatenated `(∂f/∂x, ∂f/∂w, ∂f/∂ρ)`.
    pub combined: f64,
}

impl PointErrors {
    /// Worst single group.
    pub fn max(&self) -> f64 {
        self.input.max(self.weight).max(self.rho.unwrap_or(0.0))
    }
}

/// A random `(w, x, ρ)` away from the documented non-smooth regions:
/// `|cos θ| < 0.999` and `|‖x‖ - ρ| > 0.01ρ`.
pub fn sample_point(dim: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>, f64) {
    loop {
        let scale_w = 10f64.powf(rng.random_range(-1.0..1.0));
        let scale_x = 10f64.powf(rng.random_range(-1.0..1.0));
        let w: Vec<f64> = (0..dim)
            .map(|_| scale_w * rng.random_range(-1.0..1.0))
            .collect();
        let x: Vec<f64> = (0..dim)
            .map(|_| scale_x * rng.random_range(-1.0..1.0))
            .collect();
        let rho = rng.random_range(0.3..3.0);
        let (wn, xn) = (norm(&w), norm(&x));
        let cos = dot(&w, &x) / (wn * xn);
        if cos.abs() < 0.999 && (xn - rho).abs() > 0.01 * rho {
            return (w, x, rho);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `∂f/∂x`, `∂f/∂w` and `∂f/∂ρ` of one decoupled response
/// `f(w, x) = h·g` against central differences.
pub fn check_point(
    spec: OperatorSpec,
    w: &[f64],
    x: &[f64],
    rho: f64,
    step: f64,
) -> Result<PointErrors> {
    let d = w.len();
    let geom = ConvGeometry::square(1, 0)?;
    let build = |w: &[f64], rho: f64| -> Result<DecoupledConvLayer<f64>> {
        let mut layer =
            DecoupledConvLayer::from_weight(Tensor::from_f64(&[1, d], w)?, d, geom, spec)?;
        if let Some(r) = layer.rho.as_mut() {
            r.data_mut()[0] = rho;
        }
        Ok(layer)
    };
    let eval = |w: &[f64], x: &[f64], rho: f64| -> Result<f64> {
        let (y, _) = build(w, rho)?.forward(&Tensor::from_f64(&[1, d, 1, 1], x)?, Mode::Eval)?;
        Ok(y.data()[0])
    };
    let mut layer = build(w, rho)?;
    let (_, cache) = layer.forward(&Tensor::from_f64(&[1, d, 1, 1], x)?, Mode::Eval)?;
    let grads = layer.backward(&cache, &Tensor::from_f64(&[1, 1, 1, 1], &[1.0])?, true)?;

    let central = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        Ok((f(step)? - f(-step)?) / (2.0 * step))
    };
    let mut num_x = Vec::with_capacity(d);
    let mut num_w = Vec::with_capacity(d);
    for i in 0..d {
        num_x.push(central(&|h| {
            let mut xp = x.to_vec();
            xp[i] += h;
            eval(w, &xp, rho)
        })?);
        num_w.push(central(&|h| {
            let mut wp = w.to_vec();
            wp[i] += h;
            eval(&wp, x, rho)
        })?);
    }
    let input = grads.input.expect("input gradient requested").to_f64_vec();
    let mut all_a: Vec<f64> = input.iter().chain(grads.weight.data()).copied().collect();
    let mut all_n: Vec<f64> = num_x.iter().chain(&num_w).copied().collect();
    let rho_err = match grads.rho {
        Some(g) => {
            let num = central(&|h| eval(w, x, rho + h))?;
            all_a.push(g.data()[0]);
            all_n.push(num);
            Some(relative_error(&[g.data()[0]], &[num]))
        }
        None => None,
    };
    Ok(PointErrors {
        input: relative_error(&input, &num_x),
        weight: relative_error(grads.weight.data(), &num_w),
        rho: rho_err,
        combined: relative_error(&all_a, &all_n),
    })
}

/// Outcome for one parameter group of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved some `‖x‖` across a knee.
    pub excluded: usize,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.rel_error < tolerance
    }
}

/// Which side of its knee every decoupled response sits on.
pub fn network_kink_signature(net: &mut Network<f64>, input: &Tensor<f64>) -> Result<u64> {
    let (_, cache) = net.forward(input, Mode::Eval)?;
    let mut hasher = DefaultHasher::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if let (LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l), Some(c)) =
            (layer, cache.decoupled(i))
        {
            l.kink_signature(c).hash(&mut hasher);
        }
    }
    Ok(hasher.finish())
}

/// Checks the loss gradient of every parameter group and of the input.
///
/// The network runs in evaluation mode so the patch-norm averages stay fixed;
/// run one training pass first if they should be initialized.
pub fn check_network(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    step: f64,
) -> Result<Vec<GroupReport>> {
    let (_, _, grads) = net.loss_and_grads(input, labels, Mode::Eval, true)?;
    let base_sig = network_kink_signature(net, input)?;
    let loss_of = |net: &mut Network<f64>, x: &Tensor<f64>| -> Result<(f64, u64)> {
        let (logits, _) = net.forward(x, Mode::Eval)?;
        let (loss, _) = softmax_xent(&logits, labels)?;
        let mut scratch: Vec<Tensor<f64>> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Result<_>>()?;
        let penalty = net.regularize(&mut scratch)?;
        Ok((loss + penalty, network_kink_signature(net, x)?))
    };

    let names: Vec<String> = net.params().into_iter().map(|p| p.name).collect();
    let mut reports = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let analytic = grads.params[gi].to_f64_vec();
        let mut kept_a = Vec::new();
        let mut kept_n = Vec::new();
        let mut excluded = 0;
        for (j, &a) in analytic.iter().enumerate() {
            let mut probe = |h: f64| -> Result<(f64, u64)> {
                let original = net.params()[gi].value.data()[j];
                net.params_mut()[gi].value.data_mut()[j] = original + h;
                let out = loss_of(net, input);
                net.params_mut()[gi].value.data_mut()[j] = original;
                out
            };
            let (lp, sp) = probe(step)?;
            let (lm, sm) = probe(-step)?;
            if sp != base_sig || sm != base_sig {
                excluded += 1;
                continue;
            }
            kept_a.push(a);
            kept_n.push((lp - lm) / (2.0 * step));
        }
        reports.push(GroupReport {
            name: name.clone(),
            rel_error: relative_error(&kept_a, &kept_n),
            checked: kept_a.len(),
            excluded,
        });
    }

    let analytic = grads.input.expect("input gradient requested").to_f64_vec();
    let mut kept_a = Vec::new();
    let mut kept_n = Vec::new();
    let mut excluded = 0;
    for (j, &a) in analytic.iter().enumerate() {
        let mut xp = input.clone();
        xp.data_mut()[j] += step;
        let mut xm = input.clone();
        xm.data_mut()[j] -= step;
        let (lp, sp) = loss_of(net, &xp)?;
        let (lm, sm) = loss_of(net, &xm)?;
        if sp != base_sig || sm != base_sig {
            excluded += 1;
            continue;
        }
        kept_a.push(a);
        kept_n.push((lp - lm) / (2.0 * step));
    }
    reports.push(GroupReport {
        name: "input".into(),
        rel_error: relative_error(&kept_a, &kept_n),
        checked: kept_a.len(),
        excluded,
    });
    Ok(reports)
}
