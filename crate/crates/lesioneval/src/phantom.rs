//! Synthetic volumetric cases: multi-lesion ground truths with calibrated
//! size statistics, noisy intensity images, simulated raters, and simulated
//! predictors.
//!
//! Lesions are axis-aligned random ellipsoids placed without overlap and
//! with a one-voxel margin, so the catalog corresponds one-to-one with the
//! 26-connectivity components of the mask.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{GridGeom, Mask, ProbabilityMap, VoxelGrid};

/// Ground-truth generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Mean of the Poisson lesion count; at least one lesion is always placed.
    pub lesion_count_mean: f64,
    /// Log-uniform diameter range in millimeters.
    pub diameter_range_mm: [f64; 2],
    /// Intensity added inside lesions over the zero background.
    pub contrast: f64,
    /// Standard deviation of the additive Gaussian image noise.
    pub noise_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [96, 96, 96],
            spacing: [0.94, 0.94, 1.0],
            lesion_count_mean: 4.5,
            diameter_range_mm: [1.3, 42.0],
            contrast: 1.0,
            noise_sigma: 0.2,
        }
    }
}

impl PhantomParams {
    pub fn geom(&self) -> Result<GridGeom> {
        GridGeom::new(self.dims, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geom()?;
        if !(self.lesion_count_mean > 0.0) {
            return Err(Error::Validation("lesion count mean must be > 0".into()));
        }
        let [lo, hi] = self.diameter_range_mm;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Validation(format!(
                "bad diameter range {:?}",
                self.diameter_range_mm
            )));
        }
        let min_extent = (0..3)
            .map(|k| geom.dims[k] as f64 * geom.spacing[k])
            .fold(f64::INFINITY, f64::min);
        // 1.3 is the largest axis ratio a lesion can get
        if hi * 1.3 >= min_extent {
            return Err(Error::Validation(format!(
                "max diameter {hi} mm does not fit in grid extent {min_extent} mm"
            )));
        }
        Ok(())
    }
}

/// One generated lesion, with enough geometry to re-rasterize it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionInfo {
    /// Physical center in millimeters.
    pub center_mm: [f64; 3],
    /// Nominal sphere-equivalent diameter in millimeters.
    pub diameter_mm: f64,
    /// Ellipsoid semi-axes in millimeters.
    pub semi_axes_mm: [f64; 3],
}

/// Voxel center in physical coordinates.
#[inline]
fn voxel_center_mm(geom: &GridGeom, x: usize, y: usize, z: usize) -> [f64; 3] {
    [
        (x as f64 + 0.5) * geom.spacing[0],
        (y as f64 + 0.5) * geom.spacing[1],
        (z as f64 + 0.5) * geom.spacing[2],
    ]
}

fn voxel_of_point(geom: &GridGeom, p: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for k in 0..3 {
        let i = (p[k] / geom.spacing[k]).floor();
        out[k] = (i.max(0.0) as usize).min(geom.dims[k] - 1);
    }
    out
}

/// Radial extent of an ellipsoid along the unit direction `u`.
#[inline]
fn radial_extent(axes: [f64; 3], u: [f64; 3]) -> f64 {
    let s = (u[0] / axes[0]).powi(2) + (u[1] / axes[1]).powi(2) + (u[2] / axes[2]).powi(2);
    1.0 / s.sqrt()
}

/// Visit every voxel whose center lies within the ellipsoid surface offset
/// by `radial_offset(u)` millimeters along each direction. The voxel
/// containing the center is always visited.
fn rasterize_lesion<F, G>(
    geom: &GridGeom,
    center: [f64; 3],
    axes: [f64; 3],
    reach_mm: f64,
    mut radial_offset: F,
    mut visit: G,
) where
    F: FnMut([f64; 3]) -> f64,
    G: FnMut(usize, f64),
{
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for k in 0..3 {
        let r = axes[k] + reach_mm + geom.spacing[k];
        lo[k] = (((center[k] - r) / geom.spacing[k]).floor().max(0.0)) as usize;
        hi[k] = ((((center[k] + r) / geom.spacing[k]).ceil()) as usize).min(geom.dims[k] - 1);
    }
    let center_voxel = voxel_of_point(geom, center);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = voxel_center_mm(geom, x, y, z);
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let t = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let idx = geom.index(x, y, z);
                if [x, y, z] == center_voxel {
                    visit(idx, -t);
                    continue;
                }
                let u = [d[0] / t, d[1] / t, d[2] / t];
                let surface = radial_extent(axes, u) + radial_offset(u);
                // negative excess means inside
                visit(idx, t - surface);
            }
        }
    }
}

/// Generate one case: mask, noisy image, and lesion catalog.
pub fn gen_case<R: Rng>(
    params: &PhantomParams,
    rng: &mut R,
) -> Result<(VoxelGrid, Mask, Vec<LesionInfo>)> {
    params.validate()?;
    let geom = params.geom()?;
    let count = {
        let poisson = Poisson::new(params.lesion_count_mean)
            .map_err(|e| Error::Argument(format!("bad lesion count mean: {e}")))?;
        (poisson.sample(rng) as usize).max(1)
    };
    let [d_lo, d_hi] = params.diameter_range_mm;
    let extent = [
        geom.dims[0] as f64 * geom.spacing[0],
        geom.dims[1] as f64 * geom.spacing[1],
        geom.dims[2] as f64 * geom.spacing[2],
    ];
    let margin = geom.spacing.iter().cloned().fold(0.0f64, f64::max);

    let mut gt = vec![0u8; geom.voxel_count()];
    let mut catalog = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..1000 {
            let diameter = (rng.random_range(d_lo.ln()..=d_hi.ln())).exp();
            let axes = [
                0.5 * diameter * rng.random_range(0.7..=1.3),
                0.5 * diameter * rng.random_range(0.7..=1.3),
                0.5 * diameter * rng.random_range(0.7..=1.3),
            ];
            let mut center = [0.0f64; 3];
            let mut fits = true;
            for k in 0..3 {
                let lo = axes[k] + 2.0 * margin;
                let hi = extent[k] - axes[k] - 2.0 * margin;
                if lo >= hi {
                    fits = false;
                    break;
                }
                center[k] = rng.random_range(lo..hi);
            }
            if !fits {
                continue;
            }
            // collect the candidate voxels, enforcing a 1-voxel margin
            // around existing lesions
            let mut voxels = Vec::new();
            let mut conflict = false;
            rasterize_lesion(&geom, center, axes, margin, |_| margin, |idx, excess| {
                if excess <= 0.0 {
                    // inside the margin-expanded surface: must be free
                    if gt[idx] == 1 {
                        conflict = true;
                    }
                }
            });
            if conflict {
                continue;
            }
            rasterize_lesion(&geom, center, axes, 0.0, |_| 0.0, |idx, excess| {
                if excess <= 0.0 {
                    voxels.push(idx);
                }
            });
            for &idx in &voxels {
                gt[idx] = 1;
            }
            catalog.push(LesionInfo {
                center_mm: center,
                diameter_mm: diameter,
                semi_axes_mm: axes,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {} of {count} after 1000 attempts",
                catalog.len() + 1
            )));
        }
    }

    let mask = Mask::new(geom, gt).expect("generated values are 0/1");
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Argument(format!("bad noise sigma: {e}")))?;
    let image_values: Vec<f32> = mask
        .values()
        .iter()
        .map(|&v| {
            let n = if params.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            (params.contrast * f64::from(v) + n) as f32
        })
        .collect();
    let image = VoxelGrid::new(geom, image_values).expect("sized to geom");
    Ok((image, mask, catalog))
}

/// A simulated human rater: smooth boundary jitter, a signed
/// dilation/erosion bias, and a chance to miss small lesions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterModel {
    pub jitter_sigma_mm: f64,
    pub bias_mm: f64,
    pub miss_prob: f64,
    /// Lesions below this diameter may be missed.
    pub miss_below_mm: f64,
}

impl Default for RaterModel {
    fn default() -> Self {
        RaterModel {
            jitter_sigma_mm: 0.5,
            bias_mm: 0.0,
            miss_prob: 0.0,
            miss_below_mm: 5.0,
        }
    }
}

impl RaterModel {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma_mm < 0.0 {
            return Err(Error::Validation("jitter sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(Error::Validation("miss probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Redraw a ground truth the way an imperfect rater would: per lesion,
/// either drop it (small lesions only) or move its boundary by a smooth
/// random radial field plus the signed bias.
pub fn simulate_rater<R: Rng>(
    gt: &Mask,
    catalog: &[LesionInfo],
    model: &RaterModel,
    rng: &mut R,
) -> Result<Mask> {
    model.validate()?;
    let geom = *gt.geom();
    let normal = Normal::new(0.0, model.jitter_sigma_mm.max(f64::MIN_POSITIVE)).unwrap();
    let mut values = vec![0u8; geom.voxel_count()];
    for lesion in catalog {
        if lesion.diameter_mm < model.miss_below_mm && rng.random::<f64>() < model.miss_prob {
            continue;
        }
        // low-order smooth field over directions: constant + linear terms
        let field: [f64; 4] = if model.jitter_sigma_mm > 0.0 {
            [
                normal.sample(rng),
                normal.sample(rng),
                normal.sample(rng),
                normal.sample(rng),
            ]
        } else {
            [0.0; 4]
        };
        let reach = model.bias_mm.abs() + 2.0 * (field[0].abs() + field[1].abs() + field[2].abs() + field[3].abs());
        rasterize_lesion(
            &geom,
            lesion.center_mm,
            lesion.semi_axes_mm,
            reach,
            |u| model.bias_mm + field[0] + field[1] * u[0] + field[2] * u[1] + field[3] * u[2],
            |idx, excess| {
                if excess <= 0.0 {
                    values[idx] = 1;
                }
            },
        );
    }
    Ok(Mask::new(geom, values).expect("values are 0/1"))
}

/// A simulated segmentation model: diameter-dependent detection, blurred
/// probability blobs, and random false positives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorModel {
    /// Logistic midpoint of the detection probability, mm.
    pub detect_midpoint_mm: f64,
    /// Logistic slope per mm; detection probability is non-decreasing in
    /// diameter for non-negative slopes.
    pub detect_slope: f64,
    /// Gaussian falloff of probability beyond the lesion surface, mm.
    pub blur_sigma_mm: f64,
    /// Mean number of false-positive blobs per volume.
    pub fp_rate: f64,
    /// False-positive diameter range, mm.
    pub fp_diameter_mm: [f64; 2],
    /// Spread of the per-lesion peak certainty.
    pub certainty_noise: f64,
}

impl Default for PredictorModel {
    fn default() -> Self {
        PredictorModel {
            detect_midpoint_mm: 5.0,
            detect_slope: 1.0,
            blur_sigma_mm: 0.5,
            fp_rate: 0.5,
            fp_diameter_mm: [1.5, 4.0],
            certainty_noise: 0.05,
        }
    }
}

impl PredictorModel {
    pub fn validate(&self) -> Result<()> {
        if self.detect_slope < 0.0 {
            return Err(Error::Validation(
                "detection slope must be >= 0 so detection is non-decreasing in diameter".into(),
            ));
        }
        if self.fp_rate < 0.0 || self.blur_sigma_mm < 0.0 || self.certainty_noise < 0.0 {
            return Err(Error::Validation(
                "rates, blur and noise must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Probability of detecting a lesion of the given diameter.
    pub fn detection_prob(&self, diameter_mm: f64) -> f64 {
        1.0 / (1.0 + (-(self.detect_slope * (diameter_mm - self.detect_midpoint_mm))).exp())
    }
}

fn render_blob(
    geom: &GridGeom,
    values: &mut [f32],
    center: [f64; 3],
    axes: [f64; 3],
    peak: f64,
    blur_sigma_mm: f64,
) {
    let reach = 3.0 * blur_sigma_mm;
    rasterize_lesion(geom, center, axes, reach, |_| 0.0, |idx, excess| {
        let p = if excess <= 0.0 {
            peak
        } else if blur_sigma_mm > 0.0 && excess <= reach {
            peak * (-excess * excess / (2.0 * blur_sigma_mm * blur_sigma_mm)).exp()
        } else {
            return;
        };
        if p as f32 > values[idx] {
            values[idx] = p as f32;
        }
    });
}

/// Render a probability map the way an imperfect model would: detected
/// lesions become blurred blobs with peak certainty in (0.5, 1], missed
/// lesions contribute nothing, and false positives appear at the
/// configured rate.
pub fn simulate_predictor<R: Rng>(
    gt: &Mask,
    catalog: &[LesionInfo],
    model: &PredictorModel,
    rng: &mut R,
) -> Result<ProbabilityMap> {
    model.validate()?;
    let geom = *gt.geom();
    let mut values = vec![0.0f32; geom.voxel_count()];
    let noise = Normal::new(0.0, model.certainty_noise.max(f64::MIN_POSITIVE)).unwrap();
    for lesion in catalog {
        if rng.random::<f64>() >= model.detection_prob(lesion.diameter_mm) {
            continue;
        }
        let mut peak = 0.85;
        if model.certainty_noise > 0.0 {
            peak += noise.sample(rng);
        }
        let peak = peak.clamp(0.55, 1.0);
        render_blob(
            &geom,
            &mut values,
            lesion.center_mm,
            lesion.semi_axes_mm,
            peak,
            model.blur_sigma_mm,
        );
    }
    if model.fp_rate > 0.0 {
        let poisson = Poisson::new(model.fp_rate).unwrap();
        let fp_count = poisson.sample(rng) as usize;
        let extent = [
            geom.dims[0] as f64 * geom.spacing[0],
            geom.dims[1] as f64 * geom.spacing[1],
            geom.dims[2] as f64 * geom.spacing[2],
        ];
        for _ in 0..fp_count {
            let [lo, hi] = model.fp_diameter_mm;
            let d = rng.random_range(lo.ln()..=hi.ln()).exp();
            let center = [
                rng.random_range(0.0..extent[0]),
                rng.random_range(0.0..extent[1]),
                rng.random_range(0.0..extent[2]),
            ];
            let peak = rng.random_range(0.55..0.9);
            render_blob(
                &geom,
                &mut values,
                center,
                [d / 2.0; 3],
                peak,
                model.blur_sigma_mm,
            );
        }
    }
    ProbabilityMap::new(VoxelGrid::new(geom, values).expect("sized to geom"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{binarize, label_components, Connectivity};
    use crate::lesion_metrics::volumetric_dice;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> PhantomParams {
        PhantomParams {
            dims: [48, 48, 48],
            spacing: [0.94, 0.94, 1.0],
            lesion_count_mean: 3.0,
            diameter_range_mm: [1.5, 12.0],
            contrast: 1.0,
            noise_sigma: 0.1,
        }
    }

    #[test]
    fn sphere_volume_close_to_analytic() {
        let params = PhantomParams {
            dims: [48, 48, 48],
            spacing: [0.94, 0.94, 1.0],
            lesion_count_mean: 1e-9, // forced to 1 by the minimum
            diameter_range_mm: [10.0, 10.0],
            contrast: 1.0,
            noise_sigma: 0.0,
        };
        // average over several seeds since axis ratios vary per draw
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
            assert_eq!(catalog.len(), 1);
            let a = catalog[0].semi_axes_mm;
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * a[0] * a[1] * a[2];
            let voxels = analytic / params.spacing.iter().product::<f64>();
            let count = gt.positive_count() as f64;
            assert!(
                (count - voxels).abs() / voxels < 0.15,
                "seed {seed}: rasterized {count} vs analytic {voxels}"
            );
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let params = small_params();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gen_case(&params, &mut rng).unwrap()
        };
        let (i1, g1, c1) = run(7);
        let (i2, g2, c2) = run(7);
        assert_eq!(i1, i2);
        assert_eq!(g1, g2);
        assert_eq!(c1.len(), c2.len());
    }

    #[test]
    fn min_diameter_rasterizes_at_least_one_voxel() {
        let params = PhantomParams {
            diameter_range_mm: [1.3, 1.3],
            dims: [32, 32, 32],
            lesion_count_mean: 1e-9,
            noise_sigma: 0.0,
            ..Default::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, gt, _) = gen_case(&params, &mut rng).unwrap();
            assert!(gt.positive_count() >= 1);
        }
    }

    #[test]
    fn catalog_matches_components() {
        let params = small_params();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
            let labels = label_components(&gt, Connectivity::TwentySix);
            assert_eq!(labels.component_count(), catalog.len(), "seed {seed}");
        }
    }

    #[test]
    fn rater_identity_configuration() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
        let model = RaterModel {
            jitter_sigma_mm: 0.0,
            bias_mm: 0.0,
            miss_prob: 0.0,
            miss_below_mm: 0.0,
        };
        let out = simulate_rater(&gt, &catalog, &model, &mut rng).unwrap();
        assert_eq!(out, gt);
    }

    #[test]
    fn rater_positive_bias_grows_lesions() {
        let params = PhantomParams {
            diameter_range_mm: [6.0, 10.0],
            lesion_count_mean: 2.0,
            noise_sigma: 0.0,
            ..small_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
        let model = RaterModel {
            jitter_sigma_mm: 0.0,
            bias_mm: 1.5,
            miss_prob: 0.0,
            miss_below_mm: 0.0,
        };
        let out = simulate_rater(&gt, &catalog, &model, &mut rng).unwrap();
        assert!(out.positive_count() > gt.positive_count());
        // dilation: every gt voxel stays positive
        for (a, b) in gt.values().iter().zip(out.values()) {
            assert!(*a == 0 || *b == 1);
        }
    }

    #[test]
    fn rater_dice_degrades_with_jitter() {
        let params = PhantomParams {
            diameter_range_mm: [5.0, 12.0],
            noise_sigma: 0.0,
            ..small_params()
        };
        let mut mean_dice = Vec::new();
        for &sigma in &[0.5, 1.0, 2.0] {
            let mut total = 0.0;
            let mut n = 0;
            for seed in 0..30 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
                let model = RaterModel {
                    jitter_sigma_mm: sigma,
                    bias_mm: 0.0,
                    miss_prob: 0.0,
                    miss_below_mm: 0.0,
                };
                let out = simulate_rater(&gt, &catalog, &model, &mut rng).unwrap();
                total += volumetric_dice(&gt, &out).unwrap();
                n += 1;
            }
            mean_dice.push(total / n as f64);
        }
        assert!(
            mean_dice[0] > mean_dice[1] && mean_dice[1] > mean_dice[2],
            "{mean_dice:?}"
        );
    }

    #[test]
    fn predictor_identity_configuration() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
        let model = PredictorModel {
            detect_midpoint_mm: -1e9, // detection probability ~ 1 everywhere
            detect_slope: 1.0,
            blur_sigma_mm: 0.0,
            fp_rate: 0.0,
            certainty_noise: 0.0,
            ..Default::default()
        };
        let prob = simulate_predictor(&gt, &catalog, &model, &mut rng).unwrap();
        let pred = binarize(&prob, 0.5).unwrap();
        assert_eq!(pred, gt);
    }

    #[test]
    fn predictor_zero_detection_is_empty() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, gt, catalog) = gen_case(&params, &mut rng).unwrap();
        let model = PredictorModel {
            detect_midpoint_mm: 1e9, // detection probability ~ 0
            fp_rate: 0.0,
            ..Default::default()
        };
        let prob = simulate_predictor(&gt, &catalog, &model, &mut rng).unwrap();
        assert!(prob.values().iter().all(|&p| p < 0.5));
    }

    #[test]
    fn predictor_detects_large_more_than_small() {
        let model = PredictorModel {
            detect_midpoint_mm: 5.0,
            detect_slope: 1.0,
            ..Default::default()
        };
        // monotone logistic, checked empirically over 100 cases
        let geom = GridGeom::new([8, 8, 8], [1.0, 1.0, 1.0]).unwrap();
        let gt = Mask::zeros(geom);
        let lesion = |d: f64| LesionInfo {
            center_mm: [4.0, 4.0, 4.0],
            diameter_mm: d,
            semi_axes_mm: [d / 2.0; 3],
        };
        let mut hits2 = 0;
        let mut hits20 = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p2 = simulate_predictor(&gt, &[lesion(2.0)], &model, &mut rng).unwrap();
            hits2 += usize::from(p2.values().iter().any(|&p| p > 0.5));
            let p20 = simulate_predictor(&gt, &[lesion(6.9)], &model, &mut rng).unwrap();
            hits20 += usize::from(p20.values().iter().any(|&p| p > 0.5));
        }
        assert!(hits2 < hits20, "2mm {hits2} vs larger {hits20}");
    }

    #[test]
    fn oversized_diameter_rejected() {
        let params = PhantomParams {
            dims: [16, 16, 16],
            diameter_range_mm: [1.3, 42.0],
            ..Default::default()
        };
        assert!(params.validate().is_err());
    }
}
