use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::im2col::{col2im_grad, im2col, ConvGeometry, PatchMatrix};
use crate::tensor::{gemm_into, Real, Tensor};
use crate::Mode;

/// Batch-norm variance offset.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) fn he_normal<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let normal =
        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(normal.sample(rng))).collect())
}

/// `[P, K]` patch-major responses into `[B, K, OH, OW]`.
pub(crate) fn patch_major_to_nchw<T: Real>(pk: &[T], shape: &[usize]) -> Result<Tensor<T>> {
    let (b, k, per_image) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); pk.len()];
    for bi in 0..b {
        for local in 0..per_image {
            let row = &pk[(bi * per_image + local) * k..(bi * per_image + local + 1) * k];
            for (ki, &v) in row.iter().enumerate() {
                out[(bi * k + ki) * per_image + local] = v;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Inverse of [`patch_major_to_nchw`].
pub(crate) fn nchw_to_patch_major<T: Real>(t: &Tensor<T>) -> Result<Vec<T>> {
    let (b, k, h, w) = t.dims4()?;
    let per_image = h * w;
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ki in 0..k {
            let plane = &src[(bi * k + ki) * per_image..(bi * k + ki + 1) * per_image];
            for (local, &v) in plane.iter().enumerate() {
                out[(bi * per_image + local) * k + ki] = v;
            }
        }
    }
    Ok(out)
}

/// Input gradient (when requested), weight gradient and bias gradient.
pub type LinearGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Ordinary inner-product convolution with bias.
#[derive(Clone, Debug)]
pub struct StandardConv<T> {
    /// `[out_channels, in_channels·kh·kw]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input_shape: Vec<usize>,
    patches: PatchMatrix<T>,
}

impl<T: Real> StandardConv<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = geometry.patch_dim(in_channels);
        Ok(Self {
            weight: he_normal(&[out_channels, d], d, rng)?,
            bias: Tensor::zeros(&[out_channels])?,
            geometry,
            in_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (b, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(dim_err!(
                "input has {c} channels, convolution expects {}",
                self.in_channels
            ));
        }
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        let patches = im2col(input, self.geometry)?;
        let (p, d) = patches.patches.dims2()?;
        let k = self.out_channels();
        let mut y = vec![T::zero(); p * k];
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
            &mut y,
        );
        for row in y.chunks_exact_mut(k) {
            for (v, &bias) in row.iter_mut().zip(self.bias.data()) {
                *v += bias;
            }
        }
        let out = patch_major_to_nchw(&y, &[b, k, oh, ow])?;
        Ok((
            out,
            ConvCache {
                input_shape: input.shape().to_vec(),
                patches,
            },
        ))
    }

    /// Returns `(input grad, weight grad, bias grad)`.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<LinearGrads<T>> {
        let k = self.out_channels();
        let (p, d) = cache.patches.patches.dims2()?;
        let g = nchw_to_patch_major(grad_output)?;
        if g.len() != p * k {
            return Err(dim_err!(
                "output gradient {:?} does not match the cached forward",
                grad_output.shape()
            ));
        }
        let mut gw = vec![T::zero(); k * d];
        gemm_into(
            k,
            p,
            d,
            &g,
            1,
            k as isize,
            cache.patches.patches.data(),
            d as isize,
            1,
            &mut gw,
        );
        let mut gb = vec![T::zero(); k];
        for row in g.chunks_exact(k) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let input = if need_input_grad {
            let mut gx = vec![T::zero(); p * d];
            gemm_into(
                p,
                k,
                d,
                &g,
                k as isize,
                1,
                self.weight.data(),
                d as isize,
                1,
                &mut gx,
            );
            let pm = PatchMatrix {
                patches: Tensor::new(&[p, d], gx)?,
                map: cache.patches.map,
            };
            Some(col2im_grad(&pm, &cache.input_shape, self.geometry)?)
        } else {
            None
        };
        Ok((input, Tensor::new(&[k, d], gw)?, Tensor::new(&[k], gb)?))
    }
}

/// Affine map `[B, in] → [B, out]`.
#[derive(Clone, Debug)]
pub struct FullyConnected<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> FullyConnected<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: he_normal(&[outputs, inputs], inputs, rng)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, i) = input.dims2()?;
        let (o, wi) = self.weight.dims2()?;
        if i != wi {
            return Err(dim_err!("input has {i} features, layer expects {wi}"));
        }
        let mut y = vec![T::zero(); b * o];
        gemm_into(
            b,
            i,
            o,
            input.data(),
            i as isize,
            1,
            self.weight.data(),
            1,
            i as isize,
            &mut y,
        );
        for row in y.chunks_exact_mut(o) {
            for (v, &bias) in row.iter_mut().zip(self.bias.data()) {
                *v += bias;
            }
        }
        Tensor::new(&[b, o], y)
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<LinearGrads<T>> {
        let (b, _) = input.dims2()?;
        let (gb_rows, o) = grad_output.dims2()?;
        if gb_rows != b || o != self.weight.shape()[0] {
            return Err(dim_err!(
                "output gradient {:?} does not match the cached forward",
                grad_output.shape()
            ));
        }
        let gw = grad_output.matmul_tn(input)?;
        let mut gb = vec![T::zero(); o];
        for row in grad_output.data().chunks_exact(o) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let gx = if need_input_grad {
            Some(grad_output.matmul(&self.weight)?)
        } else {
            None
        };
        Ok((gx, gw, Tensor::new(&[o], gb)?))
    }
}

/// Per-channel batch normalization over `[B, C, H, W]` or `[B, C]`.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    batch_stats: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(dim_err!(
            "batch norm expects a 2-D or 4-D input, got {shape:?}"
        )),
    }
}

impl<T: Real> BatchNorm<T> {
    /// `γ = 1`, `β = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (b, c, s) = channel_layout(input.shape())?;
        if c != self.channels() {
            return Err(dim_err!(
                "input has {c} channels, batch norm expects {}",
                self.channels()
            ));
        }
        let x = input.data();
        let eps = T::of(self.epsilon);
        let n = T::of((b * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if mode == Mode::Train {
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                    mean[ci] += plane.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                    var[ci] += plane
                        .iter()
                        .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            let m = T::of(self.momentum);
            let unbias = if b * s > 1 {
                n / (n - T::one())
            } else {
                T::one()
            };
            for ci in 0..c {
                let rm = &mut self.running_mean.data_mut()[ci];
                *rm = (T::one() - m) * *rm + m * mean[ci];
                let rv = &mut self.running_var.data_mut()[ci];
                *rv = (T::one() - m) * *rv + m * var[ci] * unbias;
            }
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (g, be) = (self.gamma.data()[ci], self.beta.data()[ci]);
                for j in off..off + s {
                    let xh = (x[j] - mean[ci]) * inv_std[ci];
                    x_hat[j] = xh;
                    out[j] = g * xh + be;
                }
            }
        }
        Ok((
            Tensor::new(input.shape(), out)?,
            BatchNormCache {
                x_hat,
                inv_std,
                shape: input.shape().to_vec(),
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// Returns `(input grad, γ grad, β grad)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if grad_output.shape() != &cache.shape[..] {
            return Err(dim_err!(
                "output gradient {:?} does not match the cached forward",
                grad_output.shape()
            ));
        }
        let (b, c, s) = channel_layout(&cache.shape)?;
        let g = grad_output.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for (&gj, &xj) in g[off..off + s].iter().zip(&cache.x_hat[off..off + s]) {
                    dbeta[ci] += gj;
                    dgamma[ci] += gj * xj;
                }
            }
        }
        let n = T::of((b * s) as f64);
        let mut dx = vec![T::zero(); g.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let scale = self.gamma.data()[ci] * cache.inv_std[ci];
                for j in off..off + s {
                    dx[j] = if cache.batch_stats {
                        scale * (g[j] - dbeta[ci] / n - cache.x_hat[j] * dgamma[ci] / n)
                    } else {
                        scale * g[j]
                    };
                }
            }
        }
        Ok((
            Tensor::new(&cache.shape, dx)?,
            Tensor::new(&[c], dgamma)?,
            Tensor::new(&[c], dbeta)?,
        ))
    }
}

/// Max pooling with floor semantics on the output size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl MaxPool {
    pub fn forward<T: Real>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
        let (b, c, h, w) = input.dims4()?;
        if h < self.size || w < self.size {
            return Err(dim_err!(
                "{0}x{0} pooling does not fit a {h}x{w} map",
                self.size
            ));
        }
        let oh = (h - self.size) / self.stride + 1;
        let ow = (w - self.size) / self.stride + 1;
        let x = input.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * self.stride * w + j * self.stride;
                    for di in 0..self.size {
                        for dj in 0..self.size {
                            let idx = base + (i * self.stride + di) * w + j * self.stride + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::new(&[b, c, oh, ow], out)?,
            MaxPoolCache {
                argmax,
                input_shape: input.shape().to_vec(),
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        cache: &MaxPoolCache,
        grad_output: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if grad_output.len() != cache.argmax.len() {
            return Err(dim_err!(
                "output gradient {:?} does not match the cached forward",
                grad_output.shape()
            ));
        }
        let mut dx = Tensor::zeros(&cache.input_shape)?;
        let d = dx.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(grad_output.data()) {
            d[idx] += g;
        }
        Ok(dx)
    }
}

/// Mean over each feature map: `[B, C, H, W] → [B, C]`.
pub fn avg_pool_global<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let n = T::of((h * w) as f64);
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(&[b, c], data)
}

pub fn avg_pool_global_backward<T: Real>(
    input_shape: &[usize],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s: usize = input_shape[2..].iter().product();
    if grad_output.len() * s != input_shape.iter().product::<usize>() {
        return Err(dim_err!(
            "output gradient {:?} does not match input {input_shape:?}",
            grad_output.shape()
        ));
    }
    let n = T::of(s as f64);
    let data = grad_output
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, s))
        .collect();
    Tensor::new(input_shape, data)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(
        grad_output,
        |y, g| if y > T::zero() { g } else { T::zero() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn standard_conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = StandardConv::<f64>::new(2, 3, ConvGeometry::new(3, 3, 2, 1).unwrap(), &mut rng)
            .unwrap();
        let x = random(&mut rng, &[2, 2, 5, 5]);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        for b in 0..2 {
            for k in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let (yy, xx) =
                                        ((i * 2 + di) as isize - 1, (j * 2 + dj) as isize - 1);
                                    if (0..5).contains(&yy) && (0..5).contains(&xx) {
                                        acc += conv.weight.data()[k * 18 + c * 9 + di * 3 + dj]
                                            * x.data()
                                                [((b * 2 + c) * 5 + yy as usize) * 5 + xx as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + k) * 3 + i) * 3 + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut bn = BatchNorm::<f64>::new(2).unwrap();
        let x = Tensor::full(&[3, 2, 2, 2], 4.5).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut bn = BatchNorm::<f64>::new(1).unwrap();
        let x = Tensor::<f64>::from_f64(&[4, 1], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn eval_before_training_uses_initial_stats() {
        let mut bn = BatchNorm::<f64>::new(2).unwrap();
        let x = Tensor::<f64>::from_f64(&[1, 2], &[0.5, -3.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert!(
            y.max_abs_diff(&x.scale(1.0 / (1.0 + BN_EPSILON).sqrt()))
                .unwrap()
                < 1e-15
        );
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = BatchNorm::<f64>::new(3).unwrap();
        bn.gamma = random(&mut rng, &[3]);
        bn.beta = random(&mut rng, &[3]);
        let x = random(&mut rng, &[4, 3, 2, 2]);
        let r = random(&mut rng, &[4, 3, 2, 2]);
        let loss = |bn: &BatchNorm<f64>, x: &Tensor<f64>| {
            let mut bn = bn.clone();
            bn.forward(x, Mode::Train).unwrap().0.dot(&r).unwrap()
        };
        let (_, cache) = bn.clone().forward(&x, Mode::Train).unwrap();
        let (dx, dg, db) = bn.backward(&cache, &r).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-5, "x[{i}]");
        }
        for i in 0..3 {
            let (mut bp, mut bm) = (bn.clone(), bn.clone());
            bp.gamma.data_mut()[i] += h;
            bm.gamma.data_mut()[i] -= h;
            assert!(((loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h) - dg.data()[i]).abs() < 1e-5);
            let (mut bp, mut bm) = (bn.clone(), bn.clone());
            bp.beta.data_mut()[i] += h;
            bm.beta.data_mut()[i] -= h;
            assert!(((loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h) - db.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn max_pool_floors_odd_maps() {
        let pool = MaxPool { size: 2, stride: 2 };
        let x = Tensor::<f64>::from_f64(
            &[1, 1, 3, 3],
            &[1.0, 5.0, 0.0, 2.0, 3.0, 0.0, 9.0, 9.0, 9.0],
        )
        .unwrap();
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = pool
            .backward(
                &cache,
                &Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap(),
            )
            .unwrap();
        assert_eq!(g.data()[1], 2.0);
        assert_eq!(g.sum(), 2.0);
    }

    #[test]
    fn global_average_pool_round_trip() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, 3.0, -2.0, 2.0]).unwrap();
        assert_eq!(avg_pool_global(&x).unwrap().data(), &[2.0, 0.0]);
        let g = avg_pool_global_backward(
            x.shape(),
            &Tensor::<f64>::from_f64(&[1, 2], &[1.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
