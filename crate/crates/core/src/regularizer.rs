//! Second-order curvature regularization of grid displacements.
//!
//! The energy is the squared 7-point discrete Laplacian of each displacement
//! component over the control lattice,
//!
//! ```text
//! E(u) = 1/2 * sum_p sum_j (L u_j)_p^2 * cellvolume
//! ```
//!
//! with Neumann (replicate) boundary handling: taps outside the lattice are
//! clamped onto it, so constant shifts at the domain edge are free. The
//! gradient is `cellvolume * L^T (L u)`, assembled with the exact transpose
//! of the clamped stencil so it is analytically consistent with the energy.

use crate::error::{Error, Result};
use crate::transform::DisplacementGrid;

/// Energy and its gradient with respect to the control vectors.
#[derive(Debug, Clone)]
pub struct CurvatureEvaluation {
    pub energy: f64,
    pub gradient: Vec<[f64; 3]>,
}

pub fn curvature_evaluate(grid: &DisplacementGrid) -> Result<CurvatureEvaluation> {
    let g = grid.geometry();
    let cellvol: f64 = g.spacing.iter().product();
    let lap = apply_laplacian(grid);
    let energy: f64 = 0.5
        * cellvol
        * lap.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum::<f64>();
    let mut gradient = apply_laplacian_transpose(grid, &lap);
    for v in &mut gradient {
        v[0] *= cellvol;
        v[1] *= cellvol;
        v[2] *= cellvol;
    }
    Ok(CurvatureEvaluation { energy, gradient })
}

/// Compare the analytic gradient against central finite differences of the
/// energy. The check probes a deterministic subsample of at most 600
/// control-point components (the energy is an exact quadratic, so sampled
/// components are representative). Returns the maximum deviation normalized
/// by the largest finite-difference magnitude.
pub fn curvature_gradient_check(grid: &DisplacementGrid, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h must be > 0"));
    }
    let analytic = curvature_evaluate(grid)?;
    let n = grid.field.vectors.len();
    let total = 3 * n;
    let stride = total.div_ceil(600).max(1);
    let mut max_diff = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut probe = grid.clone();
    for k in (0..total).step_by(stride) {
        let (i, c) = (k / 3, k % 3);
        let orig = probe.field.vectors[i][c];
        probe.field.vectors[i][c] = orig + h;
        let ep = curvature_evaluate(&probe)?.energy;
        probe.field.vectors[i][c] = orig - h;
        let em = curvature_evaluate(&probe)?.energy;
        probe.field.vectors[i][c] = orig;
        let fd = (ep - em) / (2.0 * h);
        max_fd = max_fd.max(fd.abs());
        max_diff = max_diff.max((analytic.gradient[i][c] - fd).abs());
    }
    if max_fd == 0.0 {
        // Zero grid: both gradients must vanish identically.
        return Ok(if max_diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(max_diff / max_fd)
}

/// 7-point Laplacian with replicate boundary, componentwise.
pub(crate) fn apply_laplacian(grid: &DisplacementGrid) -> Vec<[f64; 3]> {
    let g = grid.geometry();
    let [nx, ny, nz] = g.dims;
    let u = &grid.field.vectors;
    let inv_h2 = [
        1.0 / (g.spacing[0] * g.spacing[0]),
        1.0 / (g.spacing[1] * g.spacing[1]),
        1.0 / (g.spacing[2] * g.spacing[2]),
    ];
    let mut out = vec![[0.0; 3]; u.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.linear_index(x, y, z);
                let at = [x, y, z];
                let mut acc = [0.0; 3];
                for (axis, n) in g.dims.iter().enumerate() {
                    // Replicate: out-of-range neighbors clamp to the point itself.
                    let mut lo = at;
                    let mut hi = at;
                    if at[axis] > 0 {
                        lo[axis] -= 1;
                    }
                    if at[axis] + 1 < *n {
                        hi[axis] += 1;
                    }
                    let ulo = u[g.linear_index(lo[0], lo[1], lo[2])];
                    let uhi = u[g.linear_index(hi[0], hi[1], hi[2])];
                    for c in 0..3 {
                        acc[c] += (ulo[c] - 2.0 * u[i][c] + uhi[c]) * inv_h2[axis];
                    }
                }
                out[i] = acc;
            }
        }
    }
    out
}

/// Exact transpose of [`apply_laplacian`]: scatters each row's taps back.
fn apply_laplacian_transpose(grid: &DisplacementGrid, v: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let g = grid.geometry();
    let [nx, ny, nz] = g.dims;
    let inv_h2 = [
        1.0 / (g.spacing[0] * g.spacing[0]),
        1.0 / (g.spacing[1] * g.spacing[1]),
        1.0 / (g.spacing[2] * g.spacing[2]),
    ];
    let mut out = vec![[0.0; 3]; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.linear_index(x, y, z);
                let at = [x, y, z];
                for (axis, n) in g.dims.iter().enumerate() {
                    let mut lo = at;
                    let mut hi = at;
                    if at[axis] > 0 {
                        lo[axis] -= 1;
                    }
                    if at[axis] + 1 < *n {
                        hi[axis] += 1;
                    }
                    let ilo = g.linear_index(lo[0], lo[1], lo[2]);
                    let ihi = g.linear_index(hi[0], hi[1], hi[2]);
                    for c in 0..3 {
                        let w = v[i][c] * inv_h2[axis];
                        out[ilo][c] += w;
                        out[i][c] -= 2.0 * w;
                        out[ihi][c] += w;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, VectorField3D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_geom(n: usize, h: f64) -> Geometry {
        Geometry::axis_aligned([n, n, n], [h, h, h], [0.0; 3]).unwrap()
    }

    fn random_grid(n: usize, amp: f64, seed: u64) -> DisplacementGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid_geom(n, 1.5);
        let vectors = (0..g.voxel_count())
            .map(|_| [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)])
            .collect();
        DisplacementGrid::new(VectorField3D::new(g, vectors).unwrap()).unwrap()
    }

    #[test]
    fn zero_grid_has_zero_energy_and_gradient() {
        let grid = DisplacementGrid::zeros(grid_geom(5, 1.0));
        let eval = curvature_evaluate(&grid).unwrap();
        assert_eq!(eval.energy, 0.0);
        assert!(eval.gradient.iter().all(|v| *v == [0.0; 3]));
        assert_eq!(curvature_gradient_check(&grid, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn affine_displacement_has_zero_interior_laplacian() {
        let g = grid_geom(6, 2.0);
        let field = VectorField3D::new(
            g.clone(),
            (0..g.voxel_count())
                .map(|i| {
                    let x = (i % 6) as f64;
                    let y = ((i / 6) % 6) as f64;
                    let z = (i / 36) as f64;
                    [0.3 * x - 0.1 * y + 0.5, 0.2 * y + 0.05 * z, -0.4 * z + 1.0]
                })
                .collect(),
        )
        .unwrap();
        let grid = DisplacementGrid::new(field).unwrap();
        let lap = apply_laplacian(&grid);
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    let v = lap[grid.geometry().linear_index(x, y, z)];
                    for c in 0..3 {
                        assert!(v[c].abs() < 1e-12, "interior laplacian {v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_displacement_matches_hand_stencil() {
        // u_x = x^2 on a 5^3 grid with unit spacing: interior Laplacian is 2,
        // so the interior energy contribution is 1/2 * sum 4 * cellvolume.
        let g = grid_geom(5, 1.0);
        let field = VectorField3D::new(
            g.clone(),
            (0..g.voxel_count())
                .map(|i| {
                    let x = (i % 5) as f64;
                    [x * x, 0.0, 0.0]
                })
                .collect(),
        )
        .unwrap();
        let grid = DisplacementGrid::new(field).unwrap();
        let lap = apply_laplacian(&grid);
        let mut interior_energy = 0.0;
        for z in 0..5 {
            for y in 0..5 {
                for x in 1..4 {
                    let v = lap[grid.geometry().linear_index(x, y, z)];
                    assert!((v[0] - 2.0).abs() < 1e-12, "lap {v:?}");
                    interior_energy += 0.5 * v[0] * v[0];
                }
            }
        }
        assert!((interior_energy - 0.5 * 4.0 * (3 * 5 * 5) as f64).abs() < 1e-9);
    }

    #[test]
    fn gradient_check_on_random_grid() {
        let grid = random_grid(7, 0.01, 3);
        let err = curvature_gradient_check(&grid, 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradient_is_odd_and_linear() {
        let a = random_grid(5, 0.5, 10);
        let b = random_grid(5, 0.5, 11);
        let ga = curvature_evaluate(&a).unwrap().gradient;
        let mut neg = a.clone();
        for v in &mut neg.field.vectors {
            *v = [-v[0], -v[1], -v[2]];
        }
        let gneg = curvature_evaluate(&neg).unwrap().gradient;
        for (x, y) in ga.iter().zip(&gneg) {
            for c in 0..3 {
                assert!((x[c] + y[c]).abs() < 1e-12);
            }
        }
        let mut sum = a.clone();
        for (v, w) in sum.field.vectors.iter_mut().zip(&b.field.vectors) {
            for c in 0..3 {
                v[c] += w[c];
            }
        }
        let gb = curvature_evaluate(&b).unwrap().gradient;
        let gs = curvature_evaluate(&sum).unwrap().gradient;
        for i in 0..gs.len() {
            for c in 0..3 {
                assert!((gs[i][c] - ga[i][c] - gb[i][c]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_homogeneity_and_self_adjointness() {
        let grid = random_grid(6, 1.0, 21);
        let eval = curvature_evaluate(&grid).unwrap();
        assert!(eval.energy >= 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let c: f64 = rng.gen_range(-3.0..3.0);
            let mut scaled = grid.clone();
            for v in &mut scaled.field.vectors {
                for k in 0..3 {
                    v[k] *= c;
                }
            }
            let es = curvature_evaluate(&scaled).unwrap().energy;
            assert!((es - c * c * eval.energy).abs() <= 1e-9 * eval.energy.max(1.0));
        }

        // E = 1/2 <u, grad E> for this quadratic form.
        let inner: f64 = grid
            .field
            .vectors
            .iter()
            .zip(&eval.gradient)
            .map(|(u, g)| u[0] * g[0] + u[1] * g[1] + u[2] * g[2])
            .sum();
        assert!((eval.energy - 0.5 * inner).abs() <= 1e-10 * eval.energy.max(1.0));
    }
}
