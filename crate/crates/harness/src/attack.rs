//! FGSM and BIM on images in `[0, 1]`, with budgets given on the 0–255 scale.

use dcnet::nn::{argmax_rows, Network};
use dcnet::{Mode, Tensor};
use serde::Serialize;

use crate::config::AttackConfig;
use crate::data::Dataset;
use crate::error::Result;

/// `∂L/∂x` of the mean cross-entropy, in evaluation mode.
pub fn input_gradient(
    net: &mut Network<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<Tensor<f32>> {
    let (logits, cache) = net.forward(x, Mode::Eval)?;
    let (_, grad_logits) = dcnet::nn::softmax_xent(&logits, labels)?;
    let grads = net.backward(&cache, &grad_logits, true)?;
    Ok(grads.input.expect("input gradient requested"))
}

/// Largest value `≤ x + e` whose distance from `x` does not exceed `e`.
fn upper(x: f32, e: f64) -> f32 {
    let mut hi = ((x as f64 + e) as f32).min(1.0);
    while hi as f64 - x as f64 > e {
        hi = hi.next_down();
    }
    hi
}

fn lower(x: f32, e: f64) -> f32 {
    let mut lo = ((x as f64 - e) as f32).max(0.0);
    while x as f64 - lo as f64 > e {
        lo = lo.next_up();
    }
    lo
}

/// Clips `adv` into the `ℓ∞` ball of radius `e` around `clean` and into `[0, 1]`.
pub fn project(adv: &mut [f32], clean: &[f32], e: f64) {
    for (a, &c) in adv.iter_mut().zip(clean) {
        *a = a.clamp(lower(c, e), upper(c, e));
    }
}

fn signed_step(x: &mut [f32], grad: &[f32], step: f64) {
    let s = step as f32;
    for (v, &g) in x.iter_mut().zip(grad) {
        if g > 0.0 {
            *v += s;
        } else if g < 0.0 {
            *v -= s;
        }
    }
}

/// `clip(x + ε·sign(∇ₓL))`.
pub fn fgsm(
    net: &mut Network<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<f32>> {
    let e = epsilon / 255.0;
    let mut adv = x.clone();
    if e > 0.0 {
        let grad = input_gradient(net, x, labels)?;
        signed_step(adv.data_mut(), grad.data(), e);
        project(adv.data_mut(), x.data(), e);
    }
    Ok(adv)
}

/// `N` signed steps of size `τ`, each followed by clipping to the `ε`-ball
/// and the valid pixel range.
pub fn bim(
    net: &mut Network<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    epsilon: f64,
    tau: f64,
    iterations: usize,
) -> Result<Tensor<f32>> {
    let e = epsilon / 255.0;
    let mut adv = x.clone();
    if e == 0.0 {
        return Ok(adv);
    }
    for _ in 0..iterations {
        let grad = input_gradient(net, &adv, labels)?;
        signed_step(adv.data_mut(), grad.data(), tau / 255.0);
        project(adv.data_mut(), x.data(), e);
    }
    Ok(adv)
}

/// `max |adv - clean|`, computed in double precision.
pub fn linf_distance(adv: &[f32], clean: &[f32]) -> f64 {
    adv.iter()
        .zip(clean)
        .map(|(&a, &c)| (a as f64 - c as f64).abs())
        .fold(0.0, f64::max)
}

fn correct(net: &mut Network<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<usize> {
    let logits = net.predict(x)?;
    Ok(argmax_rows(&logits)?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

/// Accuracy under no attack, FGSM and BIM on the same examples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub examples: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub iterations: usize,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub bim_acc: f64,
    /// Largest `ℓ∞` perturbation of any emitted example, on the `[0, 1]` scale.
    pub fgsm_linf: f64,
    pub bim_linf: f64,
    /// Every adversarial pixel stayed in `[0, 1]` and within `ε/255`.
    pub within_budget: bool,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        format!(
            "attack,epsilon,tau,iterations,examples,accuracy,max_linf\n\
             none,0,0,0,{n},{:.6},0\n\
             fgsm,{e},0,1,{n},{:.6},{}\n\
             bim,{e},{t},{i},{n},{:.6},{}\n",
            self.clean_acc,
            self.fgsm_acc,
            self.fgsm_linf,
            self.bim_acc,
            self.bim_linf,
            n = self.examples,
            e = self.epsilon,
            t = self.tau,
            i = self.iterations,
        )
    }
}

/// Runs both attacks on the first `attack.examples` test images.
pub fn attack_eval(
    net: &mut Network<f32>,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
) -> Result<AttackReport> {
    attack.validate()?;
    let n = attack.examples.unwrap_or(data.len()).min(data.len());
    let e = attack.epsilon / 255.0;
    let (mut clean, mut fg, mut bi) = (0, 0, 0);
    let (mut fg_linf, mut bi_linf) = (0.0f64, 0.0f64);
    let mut within = true;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        clean += correct(net, &x, &labels)?;
        let xf = fgsm(net, &x, &labels, attack.epsilon)?;
        let xb = bim(
            net,
            &x,
            &labels,
            attack.epsilon,
            attack.tau,
            attack.iterations,
        )?;
        for adv in [&xf, &xb] {
            within &= adv.data().iter().all(|v| (0.0..=1.0).contains(v));
        }
        fg_linf = fg_linf.max(linf_distance(xf.data(), x.data()));
        bi_linf = bi_linf.max(linf_distance(xb.data(), x.data()));
        fg += correct(net, &xf, &labels)?;
        bi += correct(net, &xb, &labels)?;
    }
    within &= fg_linf <= e && bi_linf <= e;
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(AttackReport {
        examples: n,
        epsilon: attack.epsilon,
        tau: attack.tau,
        iterations: attack.iterations,
        clean_acc: frac(clean),
        fgsm_acc: frac(fg),
        bim_acc: frac(bi),
        fgsm_linf: fg_linf,
        bim_linf: bi_linf,
        within_budget: within,
    })
}
