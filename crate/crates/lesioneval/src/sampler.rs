//! Patch extraction for training: uniform sampling and Tumor Sampling,
//! where the patch center lands on a ground-truth voxel with a configured
//! probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::WeightGrid;
use crate::volgrid::{GridGeom, Mask, VoxelGrid};

/// Patch geometry and sampling behavior.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: [usize; 3],
    /// Probability that the center voxel is drawn from the target mask.
    pub tumor_prob: f64,
    pub rng_seed: u64,
}

impl PatchSpec {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for k in 0..3 {
            if self.size[k] == 0 || self.size[k] > dims[k] {
                return Err(Error::Argument(format!(
                    "patch size {:?} must be >= 1 and fit in volume dims {:?}",
                    self.size, dims
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.tumor_prob) {
            return Err(Error::Argument(format!(
                "tumor_prob must be in [0, 1], got {}",
                self.tumor_prob
            )));
        }
        Ok(())
    }
}

/// A training patch: congruent crops of image, ground truth, and weights,
/// plus where it came from.
#[derive(Debug, Clone)]
pub struct Patch {
    pub origin: [usize; 3],
    /// Center voxel drawn before boundary shifting.
    pub center: [usize; 3],
    /// Whether the center draw used the tumor branch.
    pub tumor_draw: bool,
    /// Whether the drawn (pre-shift) center voxel is positive.
    pub center_positive: bool,
    pub image: VoxelGrid,
    pub gt: Mask,
    pub weights: VoxelGrid,
}

impl Patch {
    /// Whether the voxel at the patch's geometric center is positive after
    /// the boundary shift.
    pub fn post_shift_center_positive(&self) -> bool {
        let g = self.gt.geom();
        let c = [g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2];
        self.gt.values()[g.index(c[0], c[1], c[2])] == 1
    }
}

/// Window origin for a patch centered at `center`, shifted minimally so the
/// window fits inside the volume.
pub fn patch_origin(dims: [usize; 3], center: [usize; 3], size: [usize; 3]) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for k in 0..3 {
        let half = size[k] / 2;
        let unclamped = center[k].saturating_sub(half);
        origin[k] = unclamped.min(dims[k] - size[k]);
    }
    origin
}

/// Draw a patch center: with probability `tumor_prob` uniformly from the
/// positive voxels (falling back to uniform when the mask is empty),
/// otherwise uniformly from the whole volume. Returns the linear index and
/// whether the tumor branch was taken.
pub fn draw_center<R: Rng>(
    geom: &GridGeom,
    positives: &[usize],
    tumor_prob: f64,
    rng: &mut R,
) -> (usize, bool) {
    let tumor_draw = rng.random::<f64>() < tumor_prob;
    if tumor_draw && !positives.is_empty() {
        (positives[rng.random_range(0..positives.len())], tumor_draw)
    } else {
        (rng.random_range(0..geom.voxel_count()), tumor_draw)
    }
}

/// One in-memory case ready for sampling.
#[derive(Debug, Clone)]
pub struct SampleCase {
    pub id: String,
    pub image: VoxelGrid,
    pub gt: Mask,
    pub weights: WeightGrid,
    positives: Vec<usize>,
}

impl SampleCase {
    pub fn new(id: String, image: VoxelGrid, gt: Mask, weights: WeightGrid) -> Result<Self> {
        if !image.geom().same_grid(gt.geom()) || !image.geom().same_grid(weights.geom()) {
            return Err(Error::Argument(format!(
                "case {id}: image, gt and weights must share geometry"
            )));
        }
        let positives = gt.positive_indices();
        Ok(SampleCase {
            id,
            image,
            gt,
            weights,
            positives,
        })
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }
}

/// Sample one patch from a case.
pub fn sample_patch<R: Rng>(case: &SampleCase, spec: &PatchSpec, rng: &mut R) -> Result<Patch> {
    let geom = *case.image.geom();
    spec.validate(geom.dims)?;
    let (center_idx, tumor_draw) = draw_center(&geom, &case.positives, spec.tumor_prob, rng);
    let center = geom.coords(center_idx);
    let origin = patch_origin(geom.dims, center, spec.size);
    Ok(Patch {
        origin,
        center,
        tumor_draw,
        center_positive: case.gt.values()[center_idx] == 1,
        image: case.image.crop(origin, spec.size)?,
        gt: case.gt.crop(origin, spec.size)?,
        weights: case.weights.grid().crop(origin, spec.size)?,
    })
}

/// Sample a batch: each patch comes from a case drawn uniformly with
/// replacement.
pub fn sample_batch<R: Rng>(
    cases: &[SampleCase],
    spec: &PatchSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    if cases.is_empty() {
        return Err(Error::Argument("sample_batch needs at least one case".into()));
    }
    (0..batch_size)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            sample_patch(case, spec, rng)
        })
        .collect()
}
