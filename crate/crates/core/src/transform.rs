//! Rigid and grid-based deformation models, warping, and deformation-quality
//! measures.
//!
//! A total deformation is `y(x) = R(x) + u(x)` where `R` is a 6-DOF rigid
//! map and `u` is trilinearly interpolated from a coarse lattice of control
//! vectors evaluated at the fixed-space point `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, OobPolicy, VectorField3D, Volume3D};

/// 6-DOF rigid transform: Euler angles (radians, Z-Y-X intrinsic, i.e.
/// `Q = Rz * Ry * Rx`), translation (mm) and a rotation center (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        RigidParams { rotation: [0.0; 3], translation: [0.0; 3], center: [0.0; 3] }
    }

    pub fn identity_about(center: [f64; 3]) -> Self {
        RigidParams { rotation: [0.0; 3], translation: [0.0; 3], center }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().any(|a| !a.is_finite() || a.abs() > std::f64::consts::PI) {
            return Err(Error::invalid(format!("rotation angles must be finite with |a| <= pi, got {:?}", self.rotation)));
        }
        if self.translation.iter().chain(self.center.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation/center must be finite"));
        }
        Ok(())
    }

    /// Rotation matrix `Rz(rz) * Ry(ry) * Rx(rx)`.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    /// Derivatives of the rotation matrix with respect to each angle.
    pub(crate) fn rotation_matrix_derivatives(&self) -> [[[f64; 3]; 3]; 3] {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        // d/drx
        let dx = [
            [0.0, cz * sy * cx + sz * sx, -cz * sy * sx + sz * cx],
            [0.0, sz * sy * cx - cz * sx, -sz * sy * sx - cz * cx],
            [0.0, cy * cx, -cy * sx],
        ];
        // d/dry
        let dy = [
            [-cz * sy, cz * cy * sx, cz * cy * cx],
            [-sz * sy, sz * cy * sx, sz * cy * cx],
            [-cy, -sy * sx, -sy * cx],
        ];
        // d/drz
        let dz = [
            [-sz * cy, -sz * sy * sx - cz * cx, -sz * sy * cx + cz * sx],
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [0.0, 0.0, 0.0],
        ];
        [dx, dy, dz]
    }

    /// `R(x) = Q (x - c) + c + t`.
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix();
        self.apply_with_matrix(&q, p)
    }

    #[inline]
    pub(crate) fn apply_with_matrix(&self, q: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        let r = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [
            q[0][0] * r[0] + q[0][1] * r[1] + q[0][2] * r[2] + self.center[0] + self.translation[0],
            q[1][0] * r[0] + q[1][1] * r[1] + q[1][2] * r[2] + self.center[1] + self.translation[1],
            q[2][0] * r[0] + q[2][1] * r[1] + q[2][2] * r[2] + self.center[2] + self.translation[2],
        ]
    }
}

/// Coarse lattice of control displacement vectors (mm). The lattice is a
/// [`Geometry`] of its own; interpolation replicates edge control points so
/// the displacement extends constantly outside the grid box.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementGrid {
    pub field: VectorField3D,
}

impl DisplacementGrid {
    pub fn new(field: VectorField3D) -> Result<Self> {
        if field.geometry.dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid("displacement grid needs >= 2 control points per axis"));
        }
        Ok(DisplacementGrid { field })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        DisplacementGrid { field: VectorField3D::zeros(geometry) }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.field.geometry
    }

    /// Interpolated displacement at a world point.
    #[inline]
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        self.field.sample_trilinear(p, OobPolicy::Clamp)
    }

    /// The 8 (control index, weight) pairs used to interpolate at `p`.
    /// Weights sum to 1; edge cells replicate.
    pub fn interpolation_weights(&self, p: [f64; 3]) -> [(usize, f64); 8] {
        let g = self.geometry();
        let mut idx = g.world_to_index(p);
        for a in 0..3 {
            idx[a] = idx[a].clamp(0.0, (g.dims[a] - 1) as f64);
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let f = idx[a].floor();
            base[a] = f as usize;
            frac[a] = idx[a] - f;
        }
        let mut out = [(0usize, 0.0f64); 8];
        let mut k = 0;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let cx = (base[0] + dx).min(g.dims[0] - 1);
                    let cy = (base[1] + dy).min(g.dims[1] - 1);
                    let cz = (base[2] + dz).min(g.dims[2] - 1);
                    let w = (if dx == 0 { 1.0 - frac[0] } else { frac[0] })
                        * (if dy == 0 { 1.0 - frac[1] } else { frac[1] })
                        * (if dz == 0 { 1.0 - frac[2] } else { frac[2] });
                    out[k] = (g.linear_index(cx, cy, cz), w);
                    k += 1;
                }
            }
        }
        out
    }
}

/// Total deformation `y(x) = R(x) + u_grid(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub rigid: RigidParams,
    pub grid: Option<DisplacementGrid>,
}

impl Deformation {
    pub fn identity() -> Self {
        Deformation { rigid: RigidParams::identity(), grid: None }
    }

    pub fn rigid_only(rigid: RigidParams) -> Self {
        Deformation { rigid, grid: None }
    }

    /// `y(x)` at a single world point.
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rigid.rotation_matrix();
        self.apply_with_matrix(&q, p)
    }

    #[inline]
    fn apply_with_matrix(&self, q: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        let mut y = self.rigid.apply_with_matrix(q, p);
        if let Some(grid) = &self.grid {
            let u = grid.displacement_at(p);
            y[0] += u[0];
            y[1] += u[1];
            y[2] += u[2];
        }
        y
    }
}

/// Evaluate the deformation at a batch of world points.
pub fn evaluate_deformation(d: &Deformation, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("deformation input points must be finite"));
    }
    d.rigid.validate()?;
    let q = d.rigid.rotation_matrix();
    Ok(points.iter().map(|&p| d.apply_with_matrix(&q, p)).collect())
}

/// Dense displacement `u(x) = y(x) - x` sampled at every voxel center of `target`.
pub fn densify(d: &Deformation, target: &Geometry) -> Result<VectorField3D> {
    target.validate()?;
    let [nx, ny, nz] = target.dims;
    let q = d.rigid.rotation_matrix();
    let mut vectors = Vec::with_capacity(target.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = target.voxel_center(x, y, z);
                let yp = d.apply_with_matrix(&q, p);
                vectors.push([yp[0] - p[0], yp[1] - p[1], yp[2] - p[2]]);
            }
        }
    }
    VectorField3D::new(target.clone(), vectors)
}

/// Pull-back warp: `out(x) = moving(y(x))` on the lattice of `target`.
pub fn warp(
    moving: &Volume3D,
    d: &Deformation,
    target: &Geometry,
    policy: OobPolicy,
) -> Result<Volume3D> {
    target.validate()?;
    let [nx, ny, nz] = target.dims;
    let q = d.rigid.rotation_matrix();
    let mut voxels = Vec::with_capacity(target.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = target.voxel_center(x, y, z);
                let yp = d.apply_with_matrix(&q, p);
                voxels.push(moving.sample_trilinear_unchecked(yp, policy));
            }
        }
    }
    Volume3D::new(target.clone(), voxels)
}

/// Warp a {0,1} mask by trilinear interpolation and threshold at 0.5.
pub fn warp_mask(mask: &BinaryMask, d: &Deformation, target: &Geometry) -> Result<BinaryMask> {
    let vol = mask.to_volume();
    let warped = warp(&vol, d, target, OobPolicy::Zero)?;
    BinaryMask::new(
        target.clone(),
        warped.voxels.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    )
}

/// `det(I + grad u)` per voxel, with the displacement gradient taken by
/// physical-space central differences (one-sided at the lattice boundary).
pub fn jacobian_determinant(field: &VectorField3D) -> Result<Volume3D> {
    let g = &field.geometry;
    if g.dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid("jacobian needs dims >= 2 per axis"));
    }
    let [nx, ny, nz] = g.dims;
    let d = &g.direction;
    let s = &g.spacing;
    let mut out = Vec::with_capacity(g.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                // didx[c][j] = d u_c / d index_j (per spacing unit).
                let mut didx = [[0.0; 3]; 3];
                for (j, axis_len) in g.dims.iter().enumerate() {
                    let at = [x, y, z];
                    let i = at[j];
                    let (lo, hi, scale) = if i == 0 {
                        (i, i + 1, 1.0)
                    } else if i == axis_len - 1 {
                        (i - 1, i, 1.0)
                    } else {
                        (i - 1, i + 1, 0.5)
                    };
                    let mut a = at;
                    let mut b = at;
                    a[j] = lo;
                    b[j] = hi;
                    let va = field.at(a[0], a[1], a[2]);
                    let vb = field.at(b[0], b[1], b[2]);
                    for c in 0..3 {
                        didx[c][j] = scale * (vb[c] - va[c]) / s[j];
                    }
                }
                // World-space gradient: G[c][k] = sum_j didx[c][j] * D[k][j].
                let mut grad = [[0.0; 3]; 3];
                for c in 0..3 {
                    for k in 0..3 {
                        grad[c][k] = (0..3).map(|j| didx[c][j] * d[k][j]).sum();
                    }
                }
                let m = [
                    [1.0 + grad[0][0], grad[0][1], grad[0][2]],
                    [grad[1][0], 1.0 + grad[1][1], grad[1][2]],
                    [grad[2][0], grad[2][1], 1.0 + grad[2][2]],
                ];
                out.push(det3(&m));
            }
        }
    }
    Volume3D::new(g.clone(), out)
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Percentage of mask voxels where `det(I + grad u) <= 0`.
pub fn folding_fraction(field: &VectorField3D, mask: &BinaryMask) -> Result<f64> {
    if !field.geometry.approx_eq(&mask.geometry, 1e-9) {
        return Err(Error::invalid("field and mask geometries do not match"));
    }
    let total = mask.count();
    if total == 0 {
        return Err(Error::invalid("folding_fraction: mask is empty"));
    }
    let det = jacobian_determinant(field)?;
    let folded = det
        .voxels
        .iter()
        .zip(&mask.voxels)
        .filter(|&(&d, &m)| m != 0 && d <= 0.0)
        .count();
    Ok(100.0 * folded as f64 / total as f64)
}
