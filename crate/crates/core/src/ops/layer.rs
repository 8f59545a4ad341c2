use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::decompose::{normalize_in_place, AngleDecomposition, NORM_FLOOR};
use super::operator::{MagnitudeResponse, OperatorSpec};
use crate::error::{dim_err, Error, Result};
use crate::im2col::{col2im_grad, im2col, ConvGeometry, PatchMatrix};
use crate::tensor::{gemm_into, row_norms, Real, Tensor};
use crate::Mode;

/// Default momentum of the patch-norm moving average.
pub const DEFAULT_MA_MOMENTUM: f64 = 0.01;

/// Lower bound kept on every operator radius after an update.
pub const RHO_MIN: f64 = 1e-3;

/// A convolution whose response is `h(‖w‖, ‖x‖)·g(θ)` instead of `wᵀx`.
#[derive(Clone, Debug)]
pub struct DecoupledConvLayer<T> {
    /// Kernel matrix, one flattened kernel per row: `[num_kernels, patch_dim]`.
    pub weight: Tensor<T>,
    /// Operator radius per kernel, present iff the magnitude has one.
    pub rho: Option<Tensor<T>>,
    /// Moving average of `‖x‖`; `None` until the first training batch.
    pub norm_ma: Option<T>,
    pub ma_momentum: f64,
    pub spec: OperatorSpec,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
}

/// State kept from `forward` for `backward`.
#[derive(Clone, Debug)]
pub struct DecoupledCache<T> {
    input_shape: Vec<usize>,
    patches: PatchMatrix<T>,
    decomposition: AngleDecomposition<T>,
    /// `ρ_k · E{‖x‖}` per kernel (ones when the operator has no radius).
    rho_eff: Vec<T>,
    norm_scale: T,
    /// Per-pair `h`, `g` and their derivatives, kept by training passes.
    pairs: Option<Vec<PairResponse<T>>>,
}

#[derive(Clone, Copy, Debug)]
struct PairResponse<T> {
    mag: MagnitudeResponse<T>,
    g: T,
    dg: T,
}

impl<T: Real> DecoupledCache<T> {
    pub fn decomposition(&self) -> &AngleDecomposition<T> {
        &self.decomposition
    }

    pub fn rho_eff(&self) -> &[T] {
        &self.rho_eff
    }

    pub fn patches(&self) -> &PatchMatrix<T> {
        &self.patches
    }
}

/// Gradients produced by [`DecoupledConvLayer::backward`].
#[derive(Clone, Debug)]
pub struct DecoupledGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    /// Present iff the radius is learnable.
    pub rho: Option<Tensor<T>>,
}

impl<T: Real> DecoupledConvLayer<T> {
    /// He-initialized kernels, `ρ = 1`.
    pub fn new(
        in_channels: usize,
        num_kernels: usize,
        geometry: ConvGeometry,
        spec: OperatorSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = geometry.patch_dim(in_channels);
        let normal =
            Normal::new(0.0, (2.0 / d as f64).sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
        let data = (0..num_kernels * d)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self::from_weight(
            Tensor::new(&[num_kernels, d], data)?,
            in_channels,
            geometry,
            spec,
        )
    }

    pub fn from_weight(
        weight: Tensor<T>,
        in_channels: usize,
        geometry: ConvGeometry,
        spec: OperatorSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let (k, d) = weight.dims2()?;
        if d != geometry.patch_dim(in_channels) {
            return Err(dim_err!(
                "kernel rows have {d} entries, geometry {geometry:?} over {in_channels} channels needs {}",
                geometry.patch_dim(in_channels)
            ));
        }
        let rho = if spec.has_radius() {
            Some(Tensor::full(&[k], T::one())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            rho,
            norm_ma: None,
            ma_momentum: DEFAULT_MA_MOMENTUM,
            spec,
            geometry,
            in_channels,
        })
    }

    pub fn num_kernels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn patch_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// The patch-norm scale applied to `ρ`; 1 before any training batch.
    pub fn norm_scale(&self) -> T {
        self.norm_ma.unwrap_or(T::one())
    }

    /// `ρ_k · E{‖x‖}` for every kernel.
    pub fn rho_eff(&self) -> Vec<T> {
        let scale = self.norm_scale();
        match &self.rho {
            Some(rho) => rho.data().iter().map(|&r| r * scale).collect(),
            None => vec![T::one(); self.num_kernels()],
        }
    }

    /// Keeps every radius above [`RHO_MIN`].
    pub fn clamp_rho(&mut self) {
        if let Some(rho) = &mut self.rho {
            let lo = T::of(RHO_MIN);
            rho.data_mut().iter_mut().for_each(|r| *r = r.max(lo));
        }
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let [b, c, h, w] = match *input_shape {
            [b, c, h, w] => [b, c, h, w],
            _ => return Err(dim_err!("expected a 4-D input, got {input_shape:?}")),
        };
        if c != self.in_channels {
            return Err(dim_err!(
                "input has {c} channels, layer expects {}",
                self.in_channels
            ));
        }
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        Ok(vec![b, self.num_kernels(), oh, ow])
    }

    /// Computes `h·g` for every output position.
    ///
    /// In [`Mode::Train`] the patch-norm moving average is updated from this
    /// batch first and the updated value is used for the pass.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, DecoupledCache<T>)> {
        let out_shape = self.output_shape(input.shape())?;
        let patches = im2col(input, self.geometry)?;
        let x_norm = row_norms(&patches.patches)?;
        if mode == Mode::Train {
            let batch_mean = x_norm.mean();
            if batch_mean > T::zero() {
                let m = T::of(self.ma_momentum);
                self.norm_ma = Some(match self.norm_ma {
                    Some(prev) => (T::one() - m) * prev + m * batch_mean,
                    None => batch_mean,
                });
            }
        }
        let w_norm = row_norms(&self.weight)?;
        let (p, d) = patches.patches.dims2()?;
        let k = self.num_kernels();
        let mut cos = vec![T::zero(); p * k];
        gemm_into(
            p,
            d,
            k,
            patches.patches.data(),
            d as isize,
            1,
            self.weight.data(),
            1,
            d as isize,
            &mut cos,
        );
        let mut cos_theta = Tensor::new(&[p, k], cos)?;
        normalize_in_place(&mut cos_theta, &x_norm, &w_norm);

        let rho_eff = self.rho_eff();
        let per_image = out_shape[2] * out_shape[3];
        let mut out = vec![T::zero(); p * k];
        let (xn, wn, cs) = (x_norm.data(), w_norm.data(), cos_theta.data());
        let mut pairs = if mode == Mode::Train {
            Some(Vec::with_capacity(p * k))
        } else {
            None
        };
        for pi in 0..p {
            let (b, local) = (pi / per_image, pi % per_image);
            let base = b * k * per_image + local;
            let row = &cs[pi * k..(pi + 1) * k];
            match pairs.as_mut() {
                Some(pairs) => {
                    for ki in 0..k {
                        let mag = self.spec.response(xn[pi], wn[ki], rho_eff[ki]);
                        let (g, dg) = self.spec.angular.of_cos_with_grad(row[ki]);
                        out[base + ki * per_image] = mag.h * g;
                        pairs.push(PairResponse { mag, g, dg });
                    }
                }
                None => {
                    for ki in 0..k {
                        let h = self.spec.response(xn[pi], wn[ki], rho_eff[ki]).h;
                        out[base + ki * per_image] = h * self.spec.angular.of_cos(row[ki]);
                    }
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        out.ensure_finite("decoupled convolution output")?;
        Ok((
            out,
            DecoupledCache {
                input_shape: input.shape().to_vec(),
                patches,
                decomposition: AngleDecomposition {
                    x_norm,
                    w_norm,
                    cos_theta,
                },
                rho_eff,
                norm_scale: self.norm_scale(),
                pairs,
            },
        ))
    }

    /// Exact gradients of the forward map, with the patch-norm average held
    /// constant.
    pub fn backward(
        &self,
        cache: &DecoupledCache<T>,
        grad_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<DecoupledGrads<T>> {
        let k = self.num_kernels();
        let d = self.patch_dim();
        let p = cache.patches.num_patches();
        if cache.decomposition.num_kernels() != k || cache.patches.patch_dim() != d {
            return Err(Error::Usage(
                "backward called with a cache from a different layer".into(),
            ));
        }
        let out_shape = self.output_shape(&cache.input_shape)?;
        if grad_output.shape() != &out_shape[..] {
            return Err(dim_err!(
                "output gradient has shape {:?}, forward produced {out_shape:?}",
                grad_output.shape()
            ));
        }
        let per_image = out_shape[2] * out_shape[3];
        let floor = T::of(NORM_FLOOR);
        let dec = &cache.decomposition;
        let (xn, wn, cs) = (dec.x_norm.data(), dec.w_norm.data(), dec.cos_theta.data());
        let g_out = grad_output.data();

        // coef[p,k] multiplies the raw inner product; sx/sw collect the
        // coefficients on x_p and w_k that come from the norm paths.
        let mut coef = vec![T::zero(); p * k];
        let mut sx = vec![T::zero(); p];
        let mut sw = vec![T::zero(); k];
        let mut grho = vec![T::zero(); k];
        for pi in 0..p {
            let (b, local) = (pi / per_image, pi % per_image);
            let base = b * k * per_image + local;
            let x_ok = xn[pi] >= floor;
            let mut acc_x = T::zero();
            for ki in 0..k {
                let g = g_out[base + ki * per_image];
                if g == T::zero() {
                    continue;
                }
                let c = cs[pi * k + ki];
                let (resp, ga, dga) = match &cache.pairs {
                    Some(pairs) => {
                        let r = pairs[pi * k + ki];
                        (r.mag, r.g, r.dg)
                    }
                    None => {
                        let (g, dg) = self.spec.angular.of_cos_with_grad(c);
                        (self.spec.response(xn[pi], wn[ki], cache.rho_eff[ki]), g, dg)
                    }
                };
                let gh = g * ga;
                let gc = g * resp.h * dga;
                acc_x += gh * resp.d_xn;
                sw[ki] += gh * resp.d_wn;
                grho[ki] += gh * resp.d_rho;
                if x_ok && wn[ki] >= floor {
                    coef[pi * k + ki] = gc / (xn[pi] * wn[ki]);
                    acc_x -= gc * c / xn[pi];
                    sw[ki] -= gc * c / wn[ki];
                }
            }
            sx[pi] = if x_ok { acc_x / xn[pi] } else { T::zero() };
        }
        for ki in 0..k {
            sw[ki] = if wn[ki] >= floor {
                sw[ki] / wn[ki]
            } else {
                T::zero()
            };
        }

        // grad_W = coefᵀ·X + diag(sw)·W
        let x = cache.patches.patches.data();
        let mut gw = vec![T::zero(); k * d];
        gemm_into(k, p, d, &coef, 1, k as isize, x, d as isize, 1, &mut gw);
        for (ki, row) in gw.chunks_exact_mut(d).enumerate() {
            let w_row = self.weight.row(ki);
            for (g, &w) in row.iter_mut().zip(w_row) {
                *g += sw[ki] * w;
            }
        }

        let input = if need_input_grad {
            // grad_X = coef·W + diag(sx)·X
            let mut gx = vec![T::zero(); p * d];
            gemm_into(
                p,
                k,
                d,
                &coef,
                k as isize,
                1,
                self.weight.data(),
                d as isize,
                1,
                &mut gx,
            );
            for (pi, row) in gx.chunks_exact_mut(d).enumerate() {
                let s = sx[pi];
                if s != T::zero() {
                    for (g, &xv) in row.iter_mut().zip(&x[pi * d..(pi + 1) * d]) {
                        *g += s * xv;
                    }
                }
            }
            let patch_grads = PatchMatrix {
                patches: Tensor::new(&[p, d], gx)?,
                map: cache.patches.map,
            };
            Some(col2im_grad(
                &patch_grads,
                &cache.input_shape,
                self.geometry,
            )?)
        } else {
            None
        };

        let rho = if self.spec.rho_learnable && self.rho.is_some() {
            let scale = cache.norm_scale;
            Some(Tensor::new(
                &[k],
                grho.into_iter().map(|g| g * scale).collect(),
            )?)
        } else {
            None
        };

        Ok(DecoupledGrads {
            input,
            weight: Tensor::new(&[k, d], gw)?,
            rho,
        })
    }

    /// Hash of which side of the radius every (patch, kernel) pair fell on.
    /// Constant for smooth magnitudes.
    pub fn kink_signature(&self, cache: &DecoupledCache<T>) -> u64 {
        let mut hasher = DefaultHasher::new();
        if self.spec.magnitude.kind.has_knee() {
            let xn = cache.decomposition.x_norm.data();
            for &x in xn {
                for &r in &cache.rho_eff {
                    (x <= r).hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    /// Smallest relative distance `|‖x‖ - ρ_eff| / ρ_eff` over the batch, for
    /// operators with a knee.
    pub fn knee_margin(&self, cache: &DecoupledCache<T>) -> Option<f64> {
        if !self.spec.magnitude.kind.has_knee() {
            return None;
        }
        let xn = cache.decomposition.x_norm.data();
        let mut best = f64::INFINITY;
        for &x in xn {
            for &r in &cache.rho_eff {
                best = best.min(((x - r) / r).abs().as_f64());
            }
        }
        Some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{AngularKind, MagnitudeKind, WeightingMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(spec: OperatorSpec, weight: &[f64], d: usize) -> DecoupledConvLayer<f64> {
        let k = weight.len() / d;
        let w = Tensor::from_f64(&[k, d], weight).unwrap();
        DecoupledConvLayer::from_weight(w, d, ConvGeometry::square(1, 0).unwrap(), spec).unwrap()
    }

    fn column(x: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, x.len(), 1, 1], x).unwrap()
    }

    #[test]
    fn cached_and_recomputed_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let geom = ConvGeometry::square(3, 1).unwrap();
        let x = Tensor::new(
            &[2, 2, 5, 5],
            (0..100).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for angular in AngularKind::all() {
            let spec = OperatorSpec::preset(MagnitudeKind::Tanh, angular)
                .with_weighting(WeightingMode::NonlinearSeparate);
            let mut l = DecoupledConvLayer::<f64>::new(2, 3, geom, spec, &mut rng).unwrap();
            let (y, cache) = l.forward(&x, Mode::Train).unwrap();
            assert!(cache.pairs.is_some());
            let mut bare = cache.clone();
            bare.pairs = None;
            let a = l.backward(&cache, &y, true).unwrap();
            let b = l.backward(&bare, &y, true).unwrap();
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.input, b.input);
            assert_eq!(a.rho, b.rho);
        }
    }

    #[test]
    fn sphere_cosine_weight_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
        for _ in 0..20 {
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut l = layer(spec, &w, 5);
            let (_, cache) = l.forward(&column(&x), Mode::Eval).unwrap();
            let grads = l
                .backward(
                    &cache,
                    &Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                    false,
                )
                .unwrap();
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / (wn * xn);
            for i in 0..5 {
                let want = (x[i] / xn - cos * w[i] / wn) / wn;
                assert!((grads.weight.data()[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn aligned_kernel_has_zero_gradient() {
        let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
        let w = [1.0, 2.0, -0.5];
        let mut l = layer(spec, &w, 3);
        let (out, cache) = l.forward(&column(&[2.0, 4.0, -1.0]), Mode::Eval).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        let grads = l
            .backward(
                &cache,
                &Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                true,
            )
            .unwrap();
        assert!(grads.weight.max_abs() < 1e-12);
    }

    #[test]
    fn zero_patch_gives_zero_sphere_output() {
        let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
        let mut l = layer(spec, &[1.0, 0.0], 2);
        let (out, cache) = l.forward(&column(&[0.0, 0.0]), Mode::Eval).unwrap();
        assert_eq!(out.data()[0], 0.0);
        let grads = l
            .backward(
                &cache,
                &Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                true,
            )
            .unwrap();
        assert!(grads.input.unwrap().is_finite());
        assert!(grads.weight.is_finite());
    }

    #[test]
    fn moving_average_updates_only_in_training() {
        let spec = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine);
        let mut l = layer(spec, &[1.0, 0.0], 2);
        l.forward(&column(&[3.0, 4.0]), Mode::Eval).unwrap();
        assert_eq!(l.norm_ma, None);
        l.forward(&column(&[3.0, 4.0]), Mode::Train).unwrap();
        assert_eq!(l.norm_ma, Some(5.0));
        l.forward(&column(&[0.0, 15.0]), Mode::Train).unwrap();
        assert!((l.norm_ma.unwrap() - (0.99 * 5.0 + 0.01 * 15.0)).abs() < 1e-12);
        let before = l.norm_ma;
        l.forward(&column(&[0.0, 100.0]), Mode::Eval).unwrap();
        assert_eq!(l.norm_ma, before);
    }

    #[test]
    fn training_pass_uses_updated_average() {
        let spec = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine);
        let mut l = layer(spec, &[1.0, 0.0], 2);
        let (out, _) = l.forward(&column(&[2.0, 0.0]), Mode::Train).unwrap();
        // norm_ma becomes 2, so rho_eff = 2 and h = tanh(1)
        assert!((out.data()[0] - 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn radius_gradient_only_when_learnable() {
        let fixed = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine)
            .with_rho_learnable(false);
        let mut l = layer(fixed, &[1.0, 0.5], 2);
        let (_, cache) = l.forward(&column(&[0.3, 0.2]), Mode::Eval).unwrap();
        let g = l
            .backward(
                &cache,
                &Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                false,
            )
            .unwrap();
        assert!(g.rho.is_none());
        let mut l = layer(fixed.with_rho_learnable(true), &[1.0, 0.5], 2);
        let (_, cache) = l.forward(&column(&[0.3, 0.2]), Mode::Eval).unwrap();
        let g = l
            .backward(
                &cache,
                &Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
                false,
            )
            .unwrap();
        assert!(g.rho.unwrap().data()[0] < 0.0);
    }

    #[test]
    fn rho_clamp_keeps_positive() {
        let spec = OperatorSpec::preset(MagnitudeKind::Ball, AngularKind::Cosine);
        let mut l = layer(spec, &[1.0, 0.5], 2);
        l.rho.as_mut().unwrap().data_mut()[0] = -4.0;
        l.clamp_rho();
        assert_eq!(l.rho.as_ref().unwrap().data()[0], RHO_MIN);
    }

    #[test]
    fn foreign_cache_is_a_usage_error() {
        let spec = OperatorSpec::preset(MagnitudeKind::Linear, AngularKind::Cosine);
        let mut a = layer(spec, &[1.0, 0.5], 2);
        let b = layer(spec, &[1.0, 0.5, 0.2, 0.1], 2);
        let (_, cache) = a.forward(&column(&[0.3, 0.2]), Mode::Eval).unwrap();
        let err = b
            .backward(
                &cache,
                &Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 1.0]).unwrap(),
                false,
            )
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let spec = OperatorSpec::preset(MagnitudeKind::Linear, AngularKind::Cosine);
        let mut l = layer(spec, &[1.0, 0.5], 2);
        assert!(matches!(
            l.forward(&column(&[1.0, 2.0, 3.0]), Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn nonlinear_weighting_is_bounded() {
        let spec = OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine)
            .with_weighting(WeightingMode::NonlinearCoupled);
        let mut l = layer(spec, &[1e3, -2e3], 2);
        let (out, _) = l.forward(&column(&[1e6, 5e5]), Mode::Eval).unwrap();
        assert!(out.data()[0].abs() <= 1.0);
    }
}
