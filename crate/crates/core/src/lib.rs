//! Two-stage 3D multimodal image registration and its evaluation stack.
//!
//! The registration aligns a moving volume to a fixed volume in two steps:
//! a 6-DOF rigid stage driven by Gauss-Newton, then a deformable stage that
//! optimizes a coarse displacement grid with L-BFGS. Both stages minimize a
//! normalized-gradient-field distance restricted to a mask; the deformable
//! stage adds a second-order curvature penalty. Evaluation tooling covers
//! Dice overlap, folding checks, synthetic misalignment, AUROC, a fast
//! paired DeLong test, and a gated Holm-Bonferroni hypothesis hierarchy.

pub mod error;
pub mod optimizer;
pub mod phantom;
pub mod pipeline;
pub mod regularizer;
pub mod similarity;
pub mod transform;
mod util;
pub mod volio;
pub mod volume;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod evalstat_probe {
    use crate::volume::BinaryMask;

    pub fn dice_probe(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let inter = a
            .voxels
            .iter()
            .zip(&b.voxels)
            .filter(|&(&x, &y)| x != 0 && y != 0)
            .count();
        let na = a.count();
        let nb = b.count();
        if na + nb == 0 {
            return 1.0;
        }
        2.0 * inter as f64 / (na + nb) as f64
    }
}
