//! Synthetic two-"modality" 3D phantoms with ground-truth masks and
//! deformations.
//!
//! Anatomy is analytic: an ellipsoidal gland plus spherical lesions,
//! rendered with sigmoid edges under two different contrast profiles so an
//! edge-based distance has signal where an intensity difference would not.
//! When a ground-truth deformation is attached, the second modality and its
//! lesion masks are produced by evaluating the analytic anatomy at the
//! displaced positions, so no resampling blur enters the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::transform::{folding_fraction, jacobian_determinant};
use crate::volume::{BinaryMask, Geometry, VectorField3D, Volume3D};

/// Parameters of one synthetic case.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    /// Gland ellipsoid semi-axes in mm.
    pub gland_semi_axes: [f64; 3],
    /// One sphere per lesion, radius in mm. Centers are drawn inside the
    /// gland with enough margin that each lesion stays inside it.
    pub lesion_radii: Vec<f64>,
    /// Additive Gaussian noise level per modality.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: 1.0,
            gland_semi_axes: [22.0, 18.0, 16.0],
            lesion_radii: vec![4.5],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid("phantom dims must be >= 8 per axis"));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::invalid("spacing must be > 0"));
        }
        if self.gland_semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("gland semi-axes must be > 0"));
        }
        for &r in &self.lesion_radii {
            if r < 2.0 * self.spacing {
                return Err(Error::invalid(format!("lesion radius {r} below 2 x spacing")));
            }
            let min_axis = self.gland_semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
            if r >= min_axis {
                return Err(Error::invalid(format!("lesion radius {r} does not fit inside the gland")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::axis_aligned(self.dims, [self.spacing; 3], [0.0; 3])
            .expect("validated dims/spacing")
    }
}

/// Contrast levels for the two synthetic modalities. T2-like: bright gland,
/// dark lesion on a dark background. ADC-like: mid-bright gland, dark
/// lesion, distinct background level. The two level triples are not related
/// by any affine intensity map, which is what defeats intensity-difference
/// measures, while shared edge polarity and comparable edge contrast keep
/// the gradient-based distance well conditioned under one edge parameter.
const T2_LEVELS: (f64, f64, f64) = (0.10, 0.85, 0.30); // background, gland, lesion
const ADC_LEVELS: (f64, f64, f64) = (0.30, 0.80, 0.20);
const EDGE_WIDTH_MM: f64 = 0.8;

/// One generated case: paired modalities, gland mask, per-modality lesion
/// masks, and (optionally) the ground-truth displacement that was applied
/// to the ADC-like side.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub t2_like: Volume3D,
    pub adc_like: Volume3D,
    pub gland_mask: BinaryMask,
    pub lesion_masks_t2: Vec<BinaryMask>,
    pub lesion_masks_adc: Vec<BinaryMask>,
    pub ground_truth_deformation: Option<VectorField3D>,
}

struct Anatomy {
    center: [f64; 3],
    semi_axes: [f64; 3],
    lesions: Vec<([f64; 3], f64)>,
}

impl Anatomy {
    /// Scaled ellipsoid radius: <= 1 inside the gland.
    fn gland_rho(&self, p: [f64; 3]) -> f64 {
        let dx = (p[0] - self.center[0]) / self.semi_axes[0];
        let dy = (p[1] - self.center[1]) / self.semi_axes[1];
        let dz = (p[2] - self.center[2]) / self.semi_axes[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn lesion_rho(&self, k: usize, p: [f64; 3]) -> f64 {
        let (c, r) = &self.lesions[k];
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        let dz = p[2] - c[2];
        (dx * dx + dy * dy + dz * dz).sqrt() / r
    }

    /// Render intensity at a world point under a contrast profile.
    fn render(&self, p: [f64; 3], levels: (f64, f64, f64)) -> f64 {
        let (bg, gland, lesion) = levels;
        let min_axis = self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        let sg = sigmoid((1.0 - self.gland_rho(p)) * min_axis / EDGE_WIDTH_MM);
        let mut sl: f64 = 0.0;
        for (k, (_, r)) in self.lesions.iter().enumerate() {
            let s = sigmoid((1.0 - self.lesion_rho(k, p)) * r / EDGE_WIDTH_MM);
            sl = sl.max(s);
        }
        bg + (gland - bg) * sg + (lesion - gland) * sg * sl
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate an aligned case (no ground-truth deformation attached).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    generate_phantom_inner(spec, None)
}

/// Generate a case whose ADC-like volume and lesion masks are deformed by a
/// smooth random field with maximum displacement `max_amp` (mm), produced by
/// [`generate_smooth_deformation`] with `field_seed`. The T2-like side and
/// the gland mask stay on the undeformed anatomy.
pub fn generate_deformed_phantom(
    spec: &PhantomSpec,
    max_amp: f64,
    field_seed: u64,
) -> Result<PhantomCase> {
    let field = generate_smooth_deformation(&spec.geometry(), max_amp, field_seed)?;
    generate_phantom_inner(spec, Some(field))
}

fn generate_phantom_inner(spec: &PhantomSpec, field: Option<VectorField3D>) -> Result<PhantomCase> {
    spec.validate()?;
    let geometry = spec.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let center = geometry.index_to_world([
        (spec.dims[0] - 1) as f64 / 2.0,
        (spec.dims[1] - 1) as f64 / 2.0,
        (spec.dims[2] - 1) as f64 / 2.0,
    ]);
    let mut lesions = Vec::with_capacity(spec.lesion_radii.len());
    for &radius in &spec.lesion_radii {
        let c = draw_lesion_center(&mut rng, center, spec.gland_semi_axes, radius)?;
        lesions.push((c, radius));
    }
    let anatomy = Anatomy { center, semi_axes: spec.gland_semi_axes, lesions };

    // Noise is drawn per voxel index before any displacement so the same
    // seed yields the same noise pattern for aligned and deformed variants.
    let n = geometry.voxel_count();
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let noise_t2: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let noise_adc: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let [nx, ny, nz] = geometry.dims;
    let mut t2 = Vec::with_capacity(n);
    let mut adc = Vec::with_capacity(n);
    let mut gland = Vec::with_capacity(n);
    let mut lesions_t2: Vec<Vec<u8>> = vec![Vec::with_capacity(n); anatomy.lesions.len()];
    let mut lesions_adc: Vec<Vec<u8>> = vec![Vec::with_capacity(n); anatomy.lesions.len()];

    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = geometry.voxel_center(x, y, z);
                // ADC side sees the anatomy at the displaced position.
                let q = match &field {
                    Some(f) => {
                        let u = f.vectors[i];
                        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
                    }
                    None => p,
                };
                t2.push(anatomy.render(p, T2_LEVELS) + noise_t2[i]);
                adc.push(anatomy.render(q, ADC_LEVELS) + noise_adc[i]);
                gland.push(u8::from(anatomy.gland_rho(p) <= 1.0));
                for k in 0..anatomy.lesions.len() {
                    lesions_t2[k].push(u8::from(anatomy.lesion_rho(k, p) <= 1.0));
                    lesions_adc[k].push(u8::from(anatomy.lesion_rho(k, q) <= 1.0));
                }
                i += 1;
            }
        }
    }

    Ok(PhantomCase {
        t2_like: Volume3D::new(geometry.clone(), t2)?,
        adc_like: Volume3D::new(geometry.clone(), adc)?,
        gland_mask: BinaryMask::new(geometry.clone(), gland)?,
        lesion_masks_t2: lesions_t2
            .into_iter()
            .map(|v| BinaryMask::new(geometry.clone(), v))
            .collect::<Result<_>>()?,
        lesion_masks_adc: lesions_adc
            .into_iter()
            .map(|v| BinaryMask::new(geometry.clone(), v))
            .collect::<Result<_>>()?,
        ground_truth_deformation: field,
    })
}

/// Draw a lesion center such that the whole sphere stays inside the gland:
/// the center must lie within the ellipsoid shrunk by the lesion radius.
fn draw_lesion_center(
    rng: &mut ChaCha8Rng,
    gland_center: [f64; 3],
    semi_axes: [f64; 3],
    radius: f64,
) -> Result<[f64; 3]> {
    let shrunk = [
        semi_axes[0] - radius,
        semi_axes[1] - radius,
        semi_axes[2] - radius,
    ];
    if shrunk.iter().any(|&a| a <= 0.0) {
        return Err(Error::invalid("lesion outside gland: radius exceeds a gland semi-axis"));
    }
    for _ in 0..1000 {
        let u = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            // Keep lesions away from the very edge so contrast is usable.
            return Ok([
                gland_center[0] + 0.8 * u[0] * shrunk[0],
                gland_center[1] + 0.8 * u[1] * shrunk[1],
                gland_center[2] + 0.8 * u[2] * shrunk[2],
            ]);
        }
    }
    Err(Error::invalid("lesion placement rejection sampling failed"))
}

/// Smooth random displacement field: 3-6 low-frequency separable sinusoid
/// modes, rescaled so the maximum voxel displacement magnitude equals
/// `max_amp` exactly, regenerated until `det(I + grad u) > 0` everywhere
/// (at most 100 tries).
pub fn generate_smooth_deformation(
    geometry: &Geometry,
    max_amp: f64,
    seed: u64,
) -> Result<VectorField3D> {
    geometry.validate()?;
    if !(max_amp >= 0.0) || !max_amp.is_finite() {
        return Err(Error::invalid("max_amp must be >= 0"));
    }
    if max_amp == 0.0 {
        return Ok(VectorField3D::zeros(geometry.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let field = random_sinusoid_field(geometry, max_amp, &mut rng)?;
        let det = jacobian_determinant(&field)?;
        if det.voxels.iter().all(|&d| d > 0.0) {
            return Ok(field);
        }
    }
    Err(Error::Numerical(format!(
        "generate_smooth_deformation: no fold-free field of amplitude {max_amp} found in 100 tries"
    )))
}

fn random_sinusoid_field(
    geometry: &Geometry,
    max_amp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VectorField3D> {
    let [nx, ny, nz] = geometry.dims;
    let extent = [
        (nx - 1) as f64 * geometry.spacing[0],
        (ny - 1) as f64 * geometry.spacing[1],
        (nz - 1) as f64 * geometry.spacing[2],
    ];
    let n_modes = rng.gen_range(3..=6);
    struct Mode {
        amp: [f64; 3],
        freq: [f64; 3],
        phase: [f64; 3],
    }
    let modes: Vec<Mode> = (0..n_modes)
        .map(|_| Mode {
            amp: [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            // Up to 1.5 cycles across the domain keeps the field low-frequency.
            freq: [
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
            ],
            phase: [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ],
        })
        .collect();

    let origin = geometry.voxel_center(0, 0, 0);
    let mut vectors = Vec::with_capacity(geometry.voxel_count());
    let mut max_mag: f64 = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = geometry.voxel_center(x, y, z);
                let t = [
                    (p[0] - origin[0]) / extent[0],
                    (p[1] - origin[1]) / extent[1],
                    (p[2] - origin[2]) / extent[2],
                ];
                let mut u = [0.0f64; 3];
                for m in &modes {
                    let w = (std::f64::consts::TAU * m.freq[0] * t[0] + m.phase[0]).sin()
                        * (std::f64::consts::TAU * m.freq[1] * t[1] + m.phase[1]).sin()
                        * (std::f64::consts::TAU * m.freq[2] * t[2] + m.phase[2]).sin();
                    u[0] += m.amp[0] * w;
                    u[1] += m.amp[1] * w;
                    u[2] += m.amp[2] * w;
                }
                max_mag = max_mag.max((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt());
                vectors.push(u);
            }
        }
    }
    if max_mag == 0.0 {
        return Err(Error::Numerical("degenerate zero sinusoid field".into()));
    }
    let scale = max_amp / max_mag;
    for v in &mut vectors {
        v[0] *= scale;
        v[1] *= scale;
        v[2] *= scale;
    }
    VectorField3D::new(geometry.clone(), vectors)
}

/// Folding check used by tests: fraction over the full volume.
pub fn field_folding_percent(field: &VectorField3D) -> Result<f64> {
    let full = BinaryMask::new(field.geometry.clone(), vec![1; field.geometry.voxel_count()])?;
    folding_fraction(field, &full)
}
