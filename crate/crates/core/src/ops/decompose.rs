use crate::error::{dim_err, Result};
use crate::im2col::PatchMatrix;
use crate::tensor::{row_norms, Real, Tensor};

/// Norms below this are treated as zero; such rows get `cos θ = 0`.
pub const NORM_FLOOR: f64 = 1e-12;

/// Norm/angle view of every (patch, kernel) inner product.
#[derive(Clone, Debug)]
pub struct AngleDecomposition<T> {
    /// `‖x_p‖`, one per patch.
    pub x_norm: Tensor<T>,
    /// `‖w_k‖`, one per kernel.
    pub w_norm: Tensor<T>,
    /// `[num_patches, num_kernels]`, clamped to `[-1, 1]`.
    pub cos_theta: Tensor<T>,
}

impl<T: Real> AngleDecomposition<T> {
    /// `θ = arccos(cos θ)` in radians, `[num_patches, num_kernels]`.
    pub fn theta(&self) -> Tensor<T> {
        self.cos_theta.map(|c| c.acos())
    }

    /// `‖x‖·‖w‖·cos θ`, the raw inner products (zero for degenerate rows).
    pub fn inner_products(&self) -> Tensor<T> {
        let k = self.w_norm.len();
        let mut out = self.cos_theta.clone();
        for (p, row) in out.data_mut().chunks_exact_mut(k).enumerate() {
            let xn = self.x_norm.data()[p];
            for (v, &wn) in row.iter_mut().zip(self.w_norm.data()) {
                *v *= xn * wn;
            }
        }
        out
    }

    pub fn num_patches(&self) -> usize {
        self.x_norm.len()
    }

    pub fn num_kernels(&self) -> usize {
        self.w_norm.len()
    }
}

/// Splits `⟨x_p, w_k⟩` into `‖x_p‖`, `‖w_k‖` and `cos θ` for every patch
/// row of `patches` against every kernel row of `weight`.
pub fn decompose<T: Real>(
    patches: &PatchMatrix<T>,
    weight: &Tensor<T>,
) -> Result<AngleDecomposition<T>> {
    let (_, d) = patches.patches.dims2()?;
    let (_, wd) = weight.dims2()?;
    if d != wd {
        return Err(dim_err!(
            "patch dimension {d} does not match kernel dimension {wd}"
        ));
    }
    let x_norm = row_norms(&patches.patches)?;
    let w_norm = row_norms(weight)?;
    let mut cos_theta = patches.patches.matmul_nt(weight)?;
    normalize_in_place(&mut cos_theta, &x_norm, &w_norm);
    Ok(AngleDecomposition {
        x_norm,
        w_norm,
        cos_theta,
    })
}

/// Turns raw inner products into clamped cosines.
pub(crate) fn normalize_in_place<T: Real>(
    raw: &mut Tensor<T>,
    x_norm: &Tensor<T>,
    w_norm: &Tensor<T>,
) {
    let floor = T::of(NORM_FLOOR);
    let k = w_norm.len();
    let wn = w_norm.data();
    for (row, &xn) in raw.data_mut().chunks_exact_mut(k).zip(x_norm.data()) {
        if xn < floor {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        for (v, &w) in row.iter_mut().zip(wn) {
            *v = if w < floor {
                T::zero()
            } else {
                (*v / (xn * w)).max(-T::one()).min(T::one())
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::im2col::SpatialMap;
    use std::f64::consts::PI;

    fn patches(rows: &[&[f64]]) -> PatchMatrix<f64> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PatchMatrix {
            patches: Tensor::new(&[rows.len(), d], flat).unwrap(),
            map: SpatialMap {
                batch: rows.len(),
                out_h: 1,
                out_w: 1,
            },
        }
    }

    #[test]
    fn aligned_orthogonal_and_zero() {
        let x = patches(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let w = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let dec = decompose(&x, &w).unwrap();
        let theta = dec.theta();
        assert_eq!(dec.cos_theta.data()[0], 1.0);
        assert_eq!(theta.data()[0], 0.0);
        assert!((theta.data()[1] - PI / 2.0).abs() < 1e-15);
        assert_eq!(dec.cos_theta.data()[2], 0.0);
        assert_eq!(dec.cos_theta.data()[3], 0.0);
        assert!((theta.data()[2] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_inner_products() {
        let x = patches(&[&[0.3, -1.2, 2.0], &[4.0, 0.5, -0.25]]);
        let w = Tensor::from_f64(&[2, 3], &[1.0, 2.0, -0.5, -3.0, 0.1, 0.7]).unwrap();
        let dec = decompose(&x, &w).unwrap();
        let raw = x.patches.matmul_nt(&w).unwrap();
        for (a, b) in dec.inner_products().data().iter().zip(raw.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
        assert!(dec
            .cos_theta
            .data()
            .iter()
            .all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn dimension_mismatch() {
        let x = patches(&[&[1.0, 0.0]]);
        let w = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        assert!(decompose(&x, &w).is_err());
    }
}
