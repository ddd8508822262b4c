//! Differentiation, smoothing, downsampling and resampling of volumes.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, OobPolicy, VectorField3D, Volume3D};

/// Physical-space image gradient by central differences (one-sided at the
/// lattice boundary). When `mask` is given the gradient is written only at
/// set voxels and is zero elsewhere; neighbor reads still use the full
/// volume so the mask does not shrink the stencil.
pub fn gradient_central(vol: &Volume3D, mask: Option<&BinaryMask>) -> Result<VectorField3D> {
    let g = &vol.geometry;
    if let Some(m) = mask {
        if !m.geometry.approx_eq(g, 1e-9) {
            return Err(Error::invalid("mask geometry does not match volume"));
        }
    }
    let [nx, ny, nz] = g.dims;
    let mut vectors = vec![[0.0; 3]; g.voxel_count()];
    let d = &g.direction;
    let s = &g.spacing;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.linear_index(x, y, z);
                if let Some(m) = mask {
                    if m.voxels[i] == 0 {
                        continue;
                    }
                }
                // Index-space derivative per axis, already divided by spacing.
                let gi = [
                    axis_diff(vol, [x, y, z], 0) / s[0],
                    axis_diff(vol, [x, y, z], 1) / s[1],
                    axis_diff(vol, [x, y, z], 2) / s[2],
                ];
                // Rotate to world: grad = D * gi.
                vectors[i] = [
                    d[0][0] * gi[0] + d[0][1] * gi[1] + d[0][2] * gi[2],
                    d[1][0] * gi[0] + d[1][1] * gi[1] + d[1][2] * gi[2],
                    d[2][0] * gi[0] + d[2][1] * gi[1] + d[2][2] * gi[2],
                ];
            }
        }
    }
    VectorField3D::new(g.clone(), vectors)
}

/// Central difference along `axis` in index units; one-sided at the ends.
#[inline]
fn axis_diff(vol: &Volume3D, at: [usize; 3], axis: usize) -> f64 {
    let n = vol.geometry.dims[axis];
    let i = at[axis];
    let mut lo = at;
    let mut hi = at;
    if i == 0 {
        hi[axis] = 1;
        vol.at(hi[0], hi[1], hi[2]) - vol.at(at[0], at[1], at[2])
    } else if i == n - 1 {
        lo[axis] = n - 2;
        vol.at(at[0], at[1], at[2]) - vol.at(lo[0], lo[1], lo[2])
    } else {
        lo[axis] = i - 1;
        hi[axis] = i + 1;
        0.5 * (vol.at(hi[0], hi[1], hi[2]) - vol.at(lo[0], lo[1], lo[2]))
    }
}

/// Separable discrete Gaussian smoothing with kernel truncated at 3 sigma
/// per axis, weights renormalized to sum 1, replicate-edge padding.
/// `sigma` is in mm; 0 returns the input unchanged.
pub fn gaussian_smooth(vol: &Volume3D, sigma: f64) -> Result<Volume3D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let mut out = vol.voxels.clone();
    let g = &vol.geometry;
    for axis in 0..3 {
        let kernel = gaussian_kernel_1d(sigma, g.spacing[axis]);
        if kernel.len() > 1 {
            out = convolve_axis(&out, &g.dims, axis, &kernel);
        }
    }
    Ok(Volume3D { geometry: g.clone(), voxels: out })
}

/// Normalized 1D Gaussian taps at voxel pitch `spacing`, radius ceil(3s/h).
pub(crate) fn gaussian_kernel_1d(sigma: f64, spacing: f64) -> Vec<f64> {
    let radius = (3.0 * sigma / spacing).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let d = i as f64 * spacing;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

fn convolve_axis(data: &[f64], dims: &[usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = *dims;
    let radius = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let mut out = vec![0.0; data.len()];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let at = [x as i64, y as i64, z as i64];
                let base = x + nx * (y + ny * z);
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    // Replicate padding: clamp the tap position.
                    let j = (at[axis] + t as i64 - radius).clamp(0, n - 1);
                    let off = (base as i64 + (j - at[axis]) * stride as i64) as usize;
                    acc += w * data[off];
                }
                out[base] = acc;
            }
        }
    }
    out
}

/// 2x mean-pooling downsample per axis. Spacing doubles and the origin
/// moves to the new voxel-center lattice so world extent is preserved.
pub fn downsample2(vol: &Volume3D) -> Result<Volume3D> {
    let g = &vol.geometry;
    if g.dims.iter().any(|&d| d < 4) {
        return Err(Error::invalid(format!("downsample2 needs dims >= 4 per axis, got {:?}", g.dims)));
    }
    let dims = [g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2];
    let spacing = [g.spacing[0] * 2.0, g.spacing[1] * 2.0, g.spacing[2] * 2.0];
    // New voxel (0,0,0) center = mean of its 8 fine centers = fine index (0.5,0.5,0.5).
    let origin = g.index_to_world([0.5, 0.5, 0.5]);
    let geometry = Geometry::new(dims, spacing, origin, g.direction)?;
    let mut voxels = Vec::with_capacity(geometry.voxel_count());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += vol.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
                        }
                    }
                }
                voxels.push(acc / 8.0);
            }
        }
    }
    Volume3D::new(geometry, voxels)
}

/// Trilinear resampling of `vol` onto the voxel-center lattice of `target`.
pub fn resample_to(vol: &Volume3D, target: &Geometry, policy: OobPolicy) -> Result<Volume3D> {
    target.validate()?;
    let [nx, ny, nz] = target.dims;
    let mut voxels = Vec::with_capacity(target.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = target.voxel_center(x, y, z);
                voxels.push(vol.sample_trilinear_unchecked(p, policy));
            }
        }
    }
    Volume3D::new(target.clone(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(n: usize) -> Geometry {
        Geometry::axis_aligned([n, n, n], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let vol = Volume3D::filled(geom(5), 3.25);
        let g = gradient_central(&vol, None).unwrap();
        assert!(g.vectors.iter().all(|v| *v == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn gradient_exact_for_linear_field() {
        let vol = Volume3D::from_world_fn(geom(5), |p| 2.0 * p[0]);
        let g = gradient_central(&vol, None).unwrap();
        // Exact everywhere for linear data, including one-sided boundaries.
        for v in &g.vectors {
            assert!((v[0] - 2.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_analytic_product_field() {
        let vol = Volume3D::from_world_fn(geom(8), |p| p[0] * p[1]);
        let g = gradient_central(&vol, None).unwrap();
        for z in 1..7 {
            for y in 1..7 {
                for x in 1..7 {
                    let p = vol.geometry.voxel_center(x, y, z);
                    let got = g.at(x, y, z);
                    assert!((got[0] - p[1]).abs() < 1e-12);
                    assert!((got[1] - p[0]).abs() < 1e-12);
                    assert!(got[2].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_linearity() {
        let f = Volume3D::from_world_fn(geom(6), |p| (p[0] * 0.9).sin() + p[2]);
        let h = Volume3D::from_world_fn(geom(6), |p| p[1] * p[1] - p[0]);
        let sum = Volume3D::new(
            f.geometry.clone(),
            f.voxels.iter().zip(&h.voxels).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let gf = gradient_central(&f, None).unwrap();
        let gh = gradient_central(&h, None).unwrap();
        let gs = gradient_central(&sum, None).unwrap();
        for i in 0..gs.vectors.len() {
            for c in 0..3 {
                assert!((gs.vectors[i][c] - gf.vectors[i][c] - gh.vectors[i][c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradient_applies_direction_matrix() {
        // Image x axis points along world y; intensity ramps along world y.
        let dir = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3], dir).unwrap();
        let vol = Volume3D::from_world_fn(g, |p| 3.0 * p[1]);
        let grad = gradient_central(&vol, None).unwrap();
        for v in &grad.vectors {
            assert!((v[1] - 3.0).abs() < 1e-12, "{v:?}");
            assert!(v[0].abs() < 1e-12 && v[2].abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_preserves_constants_and_rejects_negative_sigma() {
        let vol = Volume3D::filled(geom(6), -1.5);
        let sm = gaussian_smooth(&vol, 2.0).unwrap();
        assert!(sm.voxels.iter().all(|&v| (v - -1.5).abs() < 1e-12));
        assert!(gaussian_smooth(&vol, -1.0).is_err());
    }

    #[test]
    fn smooth_sigma_zero_is_identity() {
        let vol = Volume3D::from_world_fn(geom(5), |p| p[0].sin());
        let sm = gaussian_smooth(&vol, 0.0).unwrap();
        assert_eq!(sm.voxels, vol.voxels);
    }

    #[test]
    fn smooth_impulse_center_weight() {
        let mut vol = Volume3D::filled(geom(9), 0.0);
        let c = vol.geometry.linear_index(4, 4, 4);
        vol.voxels[c] = 1.0;
        let sm = gaussian_smooth(&vol, 1.0).unwrap();
        let k = gaussian_kernel_1d(1.0, 1.0);
        let w0 = k[k.len() / 2];
        assert!((sm.voxels[c] - w0 * w0 * w0).abs() < 1e-12);
    }

    #[test]
    fn downsample_constant_and_alternating() {
        let vol = Volume3D::filled(geom(4), 2.0);
        let down = downsample2(&vol).unwrap();
        assert_eq!(down.geometry.dims, [2, 2, 2]);
        assert_eq!(down.geometry.spacing, [2.0, 2.0, 2.0]);
        assert!(down.voxels.iter().all(|&v| v == 2.0));

        let alt = Volume3D::new(
            geom(4),
            (0..64).map(|i| ((i % 2) ^ ((i / 4) % 2) ^ ((i / 16) % 2)) as f64).collect(),
        )
        .unwrap();
        let d = downsample2(&alt).unwrap();
        assert!(d.voxels.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        assert!(downsample2(&Volume3D::filled(geom(3), 0.0)).is_err());
    }

    #[test]
    fn downsample_origin_is_mean_of_fine_centers() {
        let g = Geometry::axis_aligned([6, 6, 6], [0.7, 1.1, 2.0], [5.0, -3.0, 0.5]).unwrap();
        let vol = Volume3D::filled(g.clone(), 1.0);
        let down = downsample2(&vol).unwrap();
        let mut mean = [0.0; 3];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = g.voxel_center(dx, dy, dz);
                    for a in 0..3 {
                        mean[a] += p[a] / 8.0;
                    }
                }
            }
        }
        let c = down.geometry.voxel_center(0, 0, 0);
        for a in 0..3 {
            assert!((c[a] - mean[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_identity_geometry() {
        let vol = Volume3D::from_world_fn(geom(5), |p| p[0] * 0.5 + p[1] * p[2]);
        let r = resample_to(&vol, &vol.geometry, OobPolicy::Zero).unwrap();
        for (a, b) in r.voxels.iter().zip(&vol.voxels) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn resample_one_spacing_shift_aligns_lattice() {
        let vol = Volume3D::from_world_fn(geom(6), |p| p[0] + 7.0 * p[1] + 3.0 * p[2]);
        let shifted = Geometry::axis_aligned([6, 6, 6], [1.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let r = resample_to(&vol, &shifted, OobPolicy::Zero).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..5 {
                    assert_eq!(r.at(x, y, z), vol.at(x + 1, y, z));
                }
            }
        }
    }

    #[test]
    fn resample_linear_ramp_to_half_spacing_is_exact() {
        let f = |p: [f64; 3]| 1.0 + 0.25 * p[0] - 0.5 * p[1] + 2.0 * p[2];
        let vol = Volume3D::from_world_fn(geom(5), f);
        // Half spacing, interior so no boundary extrapolation is involved.
        let fine = Geometry::axis_aligned([7, 7, 7], [0.5; 3], [0.5, 0.5, 0.5]).unwrap();
        let r = resample_to(&vol, &fine, OobPolicy::Zero).unwrap();
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    let p = fine.voxel_center(x, y, z);
                    assert!((r.at(x, y, z) - f(p)).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        // Maximum principle: smoothing never exceeds the input range, and
        // replicate padding keeps constants exact.
        #[test]
        fn prop_smooth_max_principle(
            values in proptest::collection::vec(-50.0f64..50.0, 125),
            sigma in 0.1f64..3.0,
        ) {
            let vol = Volume3D::new(geom(5), values).unwrap();
            let lo = vol.voxels.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vol.voxels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sm = gaussian_smooth(&vol, sigma).unwrap();
            for &v in &sm.voxels {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }
}
