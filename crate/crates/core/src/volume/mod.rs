//! 3D scalar volumes with physical-space geometry.
//!
//! A volume is a flat `Vec<f64>` in x-fastest order together with a
//! [`Geometry`] describing voxel spacing (mm), origin (mm) and direction
//! cosines. Voxels are node-centered: the world position of integer index
//! `i` is `origin + direction * (spacing .* i)`.

mod ops;

pub use ops::{downsample2, gaussian_smooth, gradient_central, resample_to};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How sampling treats points outside the voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OobPolicy {
    /// Out-of-range corner values count as 0.
    Zero,
    /// The continuous index is clamped to the lattice (replicate edge).
    Clamp,
}

/// Voxel lattice geometry: dims, spacing (mm/voxel), origin (mm) and a
/// row-major orthonormal direction matrix whose column `j` is the world
/// direction of image axis `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Orthonormality tolerance for direction matrices.
const DIRECTION_TOL: f64 = 1e-6;

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: [[f64; 3]; 3],
    ) -> Result<Self> {
        let g = Geometry { dims, spacing, origin, direction };
        g.validate()?;
        Ok(g)
    }

    /// Geometry with an identity direction matrix.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Geometry::new(dims, spacing, origin, IDENTITY_DIRECTION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid(format!("dims must be >= 2 per axis, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        // Columns must be unit-norm and mutually orthogonal.
        for a in 0..3 {
            for b in a..3 {
                let dot: f64 = (0..3).map(|r| self.direction[r][a] * self.direction[r][b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if !dot.is_finite() || (dot - expect).abs() > DIRECTION_TOL {
                    return Err(Error::invalid(format!(
                        "direction matrix not orthonormal: col {a} . col {b} = {dot}"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of voxel `(x, y, z)`; x is fastest.
    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// World coordinates (mm) of a continuous index.
    #[inline]
    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let s = [idx[0] * self.spacing[0], idx[1] * self.spacing[1], idx[2] * self.spacing[2]];
        let d = &self.direction;
        [
            self.origin[0] + d[0][0] * s[0] + d[0][1] * s[1] + d[0][2] * s[2],
            self.origin[1] + d[1][0] * s[0] + d[1][1] * s[1] + d[1][2] * s[2],
            self.origin[2] + d[2][0] * s[0] + d[2][1] * s[1] + d[2][2] * s[2],
        ]
    }

    /// Continuous index of a world point (the direction matrix is
    /// orthonormal, so its transpose is its inverse).
    #[inline]
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let r = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let d = &self.direction;
        [
            (d[0][0] * r[0] + d[1][0] * r[1] + d[2][0] * r[2]) / self.spacing[0],
            (d[0][1] * r[0] + d[1][1] * r[1] + d[2][1] * r[2]) / self.spacing[1],
            (d[0][2] * r[0] + d[1][2] * r[1] + d[2][2] * r[2]) / self.spacing[2],
        ]
    }

    /// World coordinates of the center of voxel `(x, y, z)`.
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.index_to_world([x as f64, y as f64, z as f64])
    }

    /// Componentwise comparison with absolute tolerance `tol` on the floats.
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|i| (self.spacing[i] - other.spacing[i]).abs() <= tol)
            && (0..3).all(|i| (self.origin[i] - other.origin[i]).abs() <= tol)
            && (0..3).all(|r| (0..3).all(|c| (self.direction[r][c] - other.direction[r][c]).abs() <= tol))
    }
}

/// Scalar 3D image. Intensity units are arbitrary.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub geometry: Geometry,
    pub voxels: Vec<f64>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, voxels: Vec<f64>) -> Result<Self> {
        if voxels.len() != geometry.voxel_count() {
            return Err(Error::invalid(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(Volume3D { geometry, voxels })
    }

    /// Constant-valued volume.
    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.voxel_count();
        Volume3D { geometry, voxels: vec![value; n] }
    }

    /// Build a volume by evaluating `f` at every voxel-center world point.
    pub fn from_world_fn(geometry: Geometry, f: impl Fn([f64; 3]) -> f64) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut voxels = Vec::with_capacity(geometry.voxel_count());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(f(geometry.voxel_center(x, y, z)));
                }
            }
        }
        Volume3D { geometry, voxels }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.geometry.linear_index(x, y, z)]
    }

    /// Trilinear interpolation at a world point (mm).
    ///
    /// The blend weights are computed in index space from the 8 surrounding
    /// voxels; out-of-range corners are handled per `policy`.
    pub fn sample_trilinear(&self, p: [f64; 3], policy: OobPolicy) -> Result<f64> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sample point must be finite, got {p:?}")));
        }
        Ok(self.sample_trilinear_unchecked(p, policy))
    }

    #[inline]
    pub(crate) fn sample_trilinear_unchecked(&self, p: [f64; 3], policy: OobPolicy) -> f64 {
        let idx = self.geometry.world_to_index(p);
        trilinear(&self.voxels, &self.geometry.dims, idx, policy, |v, i| v[i])
    }
}

/// Binary {0,1} mask sharing the volume layout contract.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub geometry: Geometry,
    pub voxels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, voxels: Vec<u8>) -> Result<Self> {
        if voxels.len() != geometry.voxel_count() {
            return Err(Error::invalid(format!(
                "mask voxel count {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(BinaryMask { geometry, voxels })
    }

    pub fn from_world_fn(geometry: Geometry, f: impl Fn([f64; 3]) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut voxels = Vec::with_capacity(geometry.voxel_count());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(u8::from(f(geometry.voxel_center(x, y, z))));
                }
            }
        }
        BinaryMask { geometry, voxels }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.geometry.linear_index(x, y, z)] != 0
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    /// Linear indices of set voxels, in storage order.
    pub fn set_indices(&self) -> Vec<usize> {
        self.voxels
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect()
    }

    /// View the {0,1} values as a scalar volume (for interpolation).
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            geometry: self.geometry.clone(),
            voxels: self.voxels.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// World centroid of the set voxels.
    pub fn centroid(&self) -> Result<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        let [nx, ny, nz] = self.geometry.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.at(x, y, z) {
                        let p = self.geometry.voxel_center(x, y, z);
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            return Err(Error::invalid("mask is empty"));
        }
        Ok([acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
    }
}

/// Per-voxel 3-vectors (mm), e.g. image gradients or displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField3D {
    pub geometry: Geometry,
    pub vectors: Vec<[f64; 3]>,
}

impl VectorField3D {
    pub fn new(geometry: Geometry, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != geometry.voxel_count() {
            return Err(Error::invalid(format!(
                "vector count {} does not match dims {:?}",
                vectors.len(),
                geometry.dims
            )));
        }
        if vectors.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("vector field contains non-finite values"));
        }
        Ok(VectorField3D { geometry, vectors })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        VectorField3D { geometry, vectors: vec![[0.0; 3]; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.vectors[self.geometry.linear_index(x, y, z)]
    }

    /// Trilinear sample of each component at a world point.
    pub fn sample_trilinear(&self, p: [f64; 3], policy: OobPolicy) -> [f64; 3] {
        let idx = self.geometry.world_to_index(p);
        let dims = &self.geometry.dims;
        [
            trilinear(&self.vectors, dims, idx, policy, |v, i| v[i][0]),
            trilinear(&self.vectors, dims, idx, policy, |v, i| v[i][1]),
            trilinear(&self.vectors, dims, idx, policy, |v, i| v[i][2]),
        ]
    }

    /// Trilinear sample plus the spatial Jacobian `J[c][k] = d v_c / d x_k`
    /// of the interpolant at `p` (exact inside each lattice cell).
    pub fn sample_with_jacobian(&self, p: [f64; 3], policy: OobPolicy) -> ([f64; 3], [[f64; 3]; 3]) {
        let idx = self.geometry.world_to_index(p);
        let mut value = [0.0; 3];
        let mut didx = [[0.0; 3]; 3]; // d v_c / d index_j
        for c in 0..3 {
            let (v, g) = trilinear_with_grad(&self.vectors, &self.geometry.dims, idx, policy, |v, i| v[i][c]);
            value[c] = v;
            didx[c] = g;
        }
        // Chain index -> world: dv/dx_k = sum_j (dv/di_j / spacing_j) * D[k][j].
        let d = &self.geometry.direction;
        let s = &self.geometry.spacing;
        let mut jac = [[0.0; 3]; 3];
        for c in 0..3 {
            for k in 0..3 {
                jac[c][k] = (0..3).map(|j| didx[c][j] / s[j] * d[k][j]).sum();
            }
        }
        (value, jac)
    }
}

/// Shared trilinear kernel over any storage with a value accessor.
#[inline]
fn trilinear<T>(
    data: &[T],
    dims: &[usize; 3],
    idx: [f64; 3],
    policy: OobPolicy,
    get: impl Fn(&[T], usize) -> f64,
) -> f64 {
    let (base, frac) = cell_of(dims, idx, policy);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = weight(frac[0], dx) * weight(frac[1], dy) * weight(frac[2], dz);
                if w == 0.0 {
                    continue;
                }
                if let Some(i) = corner_index(dims, base, [dx, dy, dz], policy) {
                    acc += w * get(data, i);
                }
            }
        }
    }
    acc
}

/// Trilinear value and its derivative with respect to the continuous index.
#[inline]
fn trilinear_with_grad<T>(
    data: &[T],
    dims: &[usize; 3],
    idx: [f64; 3],
    policy: OobPolicy,
    get: impl Fn(&[T], usize) -> f64,
) -> (f64, [f64; 3]) {
    let (base, frac) = cell_of(dims, idx, policy);
    let mut value = 0.0;
    let mut grad = [0.0; 3];
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let v = match corner_index(dims, base, [dx, dy, dz], policy) {
                    Some(i) => get(data, i),
                    None => continue,
                };
                let wx = weight(frac[0], dx);
                let wy = weight(frac[1], dy);
                let wz = weight(frac[2], dz);
                value += wx * wy * wz * v;
                grad[0] += dweight(dx) * wy * wz * v;
                grad[1] += wx * dweight(dy) * wz * v;
                grad[2] += wx * wy * dweight(dz) * v;
            }
        }
    }
    (value, grad)
}

#[inline]
fn weight(f: f64, d: usize) -> f64 {
    if d == 0 { 1.0 - f } else { f }
}

#[inline]
fn dweight(d: usize) -> f64 {
    if d == 0 { -1.0 } else { 1.0 }
}

/// Base cell and fractional offsets for a continuous index; Clamp pins the
/// index into `[0, n-1]` first.
#[inline]
fn cell_of(dims: &[usize; 3], mut idx: [f64; 3], policy: OobPolicy) -> ([i64; 3], [f64; 3]) {
    if policy == OobPolicy::Clamp {
        for a in 0..3 {
            idx[a] = idx[a].clamp(0.0, (dims[a] - 1) as f64);
        }
    }
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = idx[a].floor();
        base[a] = f as i64;
        frac[a] = idx[a] - f;
    }
    (base, frac)
}

#[inline]
fn corner_index(
    dims: &[usize; 3],
    base: [i64; 3],
    off: [usize; 3],
    policy: OobPolicy,
) -> Option<usize> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let mut i = base[a] + off[a] as i64;
        match policy {
            OobPolicy::Zero => {
                if i < 0 || i >= dims[a] as i64 {
                    return None;
                }
            }
            OobPolicy::Clamp => i = i.clamp(0, dims[a] as i64 - 1),
        }
        c[a] = i as usize;
    }
    Some(c[0] + dims[0] * (c[1] + dims[1] * c[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(n: usize) -> Geometry {
        Geometry::axis_aligned([n, n, n], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn geometry_rejects_bad_inputs() {
        assert!(Geometry::axis_aligned([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::axis_aligned([4, 4, 4], [0.0, 1.0, 1.0], [0.0; 3]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Geometry::new([4, 4, 4], [1.0; 3], [0.0; 3], skew).is_err());
    }

    #[test]
    fn world_index_round_trip() {
        // 90 degree rotation about z: image x axis points along world y.
        let dir = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let g = Geometry::new([4, 5, 6], [0.5, 2.0, 3.0], [10.0, -4.0, 2.5], dir).unwrap();
        let idx = [1.25, 3.5, 0.75];
        let back = g.world_to_index(g.index_to_world(idx));
        for a in 0..3 {
            assert!((back[a] - idx[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_at_voxel_center_returns_that_voxel() {
        let g = geom(4);
        let vol = Volume3D::from_world_fn(g, |p| p[0] + 10.0 * p[1] + 100.0 * p[2]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let p = vol.geometry.voxel_center(x, y, z);
                    let s = vol.sample_trilinear(p, OobPolicy::Zero).unwrap();
                    assert_eq!(s, vol.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn sample_midway_blends_linearly() {
        let g = geom(3);
        let mut vol = Volume3D::filled(g, 0.0);
        let i = vol.geometry.linear_index(1, 1, 1);
        vol.voxels[i] = 1.0;
        // Midway between voxel (0,1,1)=0 and (1,1,1)=1 along x.
        let p = vol.geometry.index_to_world([0.5, 1.0, 1.0]);
        let s = vol.sample_trilinear(p, OobPolicy::Zero).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_outside_zero_policy() {
        let g = geom(3);
        let vol = Volume3D::filled(g, 7.0);
        let s = vol.sample_trilinear([-50.0, 0.0, 0.0], OobPolicy::Zero).unwrap();
        assert_eq!(s, 0.0);
        let c = vol.sample_trilinear([-50.0, 0.0, 0.0], OobPolicy::Clamp).unwrap();
        assert_eq!(c, 7.0);
    }

    #[test]
    fn sample_rejects_non_finite_points() {
        let vol = Volume3D::filled(geom(3), 1.0);
        assert!(vol.sample_trilinear([f64::NAN, 0.0, 0.0], OobPolicy::Zero).is_err());
    }

    #[test]
    fn trilinear_exact_for_affine_functions() {
        let g = geom(5);
        let f = |p: [f64; 3]| 0.7 + 1.3 * p[0] - 2.1 * p[1] + 0.4 * p[2];
        let vol = Volume3D::from_world_fn(g, f);
        for &p in &[[1.3, 2.7, 0.4], [3.01, 1.99, 3.5], [0.5, 0.5, 0.5]] {
            let s = vol.sample_trilinear(p, OobPolicy::Zero).unwrap();
            let rel = (s - f(p)).abs() / f(p).abs().max(1.0);
            assert!(rel < 1e-10, "p={p:?} s={s} f={}", f(p));
        }
    }

    #[test]
    fn vector_field_jacobian_matches_finite_differences() {
        let g = geom(6);
        let field = VectorField3D::new(
            g.clone(),
            (0..g.voxel_count())
                .map(|i| {
                    let x = (i % 6) as f64;
                    let y = ((i / 6) % 6) as f64;
                    let z = (i / 36) as f64;
                    [(x * 1.1 + y * 0.3).sin(), (y - z) * 0.25, (z * 0.7 + x).cos()]
                })
                .collect(),
        )
        .unwrap();
        let p = [2.3, 3.6, 1.2];
        let (_, jac) = field.sample_with_jacobian(p, OobPolicy::Zero);
        let h = 1e-6;
        for k in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[k] += h;
            pm[k] -= h;
            let vp = field.sample_trilinear(pp, OobPolicy::Zero);
            let vm = field.sample_trilinear(pm, OobPolicy::Zero);
            for c in 0..3 {
                let fd = (vp[c] - vm[c]) / (2.0 * h);
                assert!((jac[c][k] - fd).abs() < 1e-6, "c={c} k={k} jac={} fd={fd}", jac[c][k]);
            }
        }
    }

    proptest! {
        // Centers reproduce voxel values exactly, for arbitrary volumes.
        #[test]
        fn prop_centers_exact(values in proptest::collection::vec(-1.0e3f64..1.0e3, 27)) {
            let vol = Volume3D::new(geom(3), values).unwrap();
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let p = vol.geometry.voxel_center(x, y, z);
                        let s = vol.sample_trilinear(p, OobPolicy::Zero).unwrap();
                        prop_assert_eq!(s, vol.at(x, y, z));
                    }
                }
            }
        }
    }
}
