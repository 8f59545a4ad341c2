//! Patch extraction (im2col) and its adjoint.
//!
//! A patch row is laid out channel-major, `(c, ki, kj)`, which matches the
//! flattening of a `[out, in, kh, kw]` kernel into one row of the kernel matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Kernel size, stride and zero padding of a sliding-window layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Domain("kernel extents must be at least 1".into()));
        }
        if stride == 0 {
            return Err(Error::Domain("stride must be at least 1".into()));
        }
        Ok(Self {
            kernel_h,
            kernel_w,
            stride,
            padding,
        })
    }

    /// Square kernel with unit stride.
    pub fn square(size: usize, padding: usize) -> Result<Self> {
        Self::new(size, size, 1, padding)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(dim_err!(
                "{}x{} kernel does not fit a {h}x{w} input with padding {}",
                self.kernel_h,
                self.kernel_w,
                self.padding
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        channels * self.kernel_h * self.kernel_w
    }
}

/// Where the rows of a patch matrix came from: row `p` is
/// `(b, i, j)` with `p = (b * out_h + i) * out_w + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialMap {
    pub batch: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl SpatialMap {
    pub fn num_patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn locate(&self, p: usize) -> (usize, usize, usize) {
        let per_image = self.out_h * self.out_w;
        (p / per_image, (p % per_image) / self.out_w, p % self.out_w)
    }
}

/// Vectorized receptive fields, `[num_patches, patch_dim]`.
#[derive(Clone, Debug)]
pub struct PatchMatrix<T> {
    pub patches: Tensor<T>,
    pub map: SpatialMap,
}

impl<T: Real> PatchMatrix<T> {
    pub fn num_patches(&self) -> usize {
        self.map.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.len() / self.num_patches()
    }
}

/// Lowers `[batch, C, H, W]` into one row per output position.
pub fn im2col<T: Real>(input: &Tensor<T>, geom: ConvGeometry) -> Result<PatchMatrix<T>> {
    let (batch, channels, h, w) = input.dims4()?;
    let (out_h, out_w) = geom.output_hw(h, w)?;
    let d = geom.patch_dim(channels);
    let per_image = out_h * out_w;
    let mut patches = vec![T::zero(); batch * per_image * d];
    let src = input.data();
    let pad = geom.padding as isize;

    patches
        .par_chunks_mut(per_image * d)
        .enumerate()
        .for_each(|(b, chunk)| {
            let img = &src[b * channels * h * w..(b + 1) * channels * h * w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let row = &mut chunk[(oy * out_w + ox) * d..(oy * out_w + ox + 1) * d];
                    let y0 = (oy * geom.stride) as isize - pad;
                    let x0 = (ox * geom.stride) as isize - pad;
                    let mut idx = 0;
                    for c in 0..channels {
                        let plane = &img[c * h * w..(c + 1) * h * w];
                        for ki in 0..geom.kernel_h {
                            let y = y0 + ki as isize;
                            if y < 0 || y >= h as isize {
                                idx += geom.kernel_w;
                                continue;
                            }
                            let line = &plane[y as usize * w..(y as usize + 1) * w];
                            for kj in 0..geom.kernel_w {
                                let x = x0 + kj as isize;
                                if x >= 0 && x < w as isize {
                                    row[idx] = line[x as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        });

    Ok(PatchMatrix {
        patches: Tensor::new(&[batch * per_image, d], patches)?,
        map: SpatialMap {
            batch,
            out_h,
            out_w,
        },
    })
}

/// Scatter-add adjoint of [`im2col`]: accumulates patch-space gradients back
/// onto the input grid. Contributions that landed in the zero padding vanish.
pub fn col2im_grad<T: Real>(
    patch_grads: &PatchMatrix<T>,
    input_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let [batch, channels, h, w] = match *input_shape {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(dim_err!("input shape {input_shape:?} is not 4-D")),
    };
    let (out_h, out_w) = geom.output_hw(h, w)?;
    let map = patch_grads.map;
    if map.batch != batch || map.out_h != out_h || map.out_w != out_w {
        return Err(dim_err!(
            "patch grid {:?} does not match geometry {geom:?} on input {input_shape:?}",
            map
        ));
    }
    let d = geom.patch_dim(channels);
    let (rows, cols) = patch_grads.patches.dims2()?;
    if rows != map.num_patches() || cols != d {
        return Err(dim_err!(
            "patch gradients are {rows}x{cols}, expected {}x{d}",
            map.num_patches()
        ));
    }
    let per_image = out_h * out_w;
    let grads = patch_grads.patches.data();
    let pad = geom.padding as isize;
    let mut out = vec![T::zero(); batch * channels * h * w];

    out.par_chunks_mut(channels * h * w)
        .enumerate()
        .for_each(|(b, img)| {
            let chunk = &grads[b * per_image * d..(b + 1) * per_image * d];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let row = &chunk[(oy * out_w + ox) * d..(oy * out_w + ox + 1) * d];
                    let y0 = (oy * geom.stride) as isize - pad;
                    let x0 = (ox * geom.stride) as isize - pad;
                    let mut idx = 0;
                    for c in 0..channels {
                        for ki in 0..geom.kernel_h {
                            let y = y0 + ki as isize;
                            if y < 0 || y >= h as isize {
                                idx += geom.kernel_w;
                                continue;
                            }
                            let base = c * h * w + y as usize * w;
                            for kj in 0..geom.kernel_w {
                                let x = x0 + kj as isize;
                                if x >= 0 && x < w as isize {
                                    img[base + x as usize] += row[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        });

    Tensor::new(input_shape, out)
}
