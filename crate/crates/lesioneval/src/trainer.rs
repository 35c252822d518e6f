//! A minimal trainable per-voxel classifier that makes the losses usable
//! end-to-end: hand-crafted local-statistics features, a logistic model,
//! hand-differentiated gradients, and a plain SGD loop with the two-step
//! learning-rate schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::{
    bce_with_grad, build_weight_grid, dice_loss_with_grad, iwbce_with_grad, LossKind,
};
use crate::labeling::{label_components, Connectivity};
use crate::lesion_metrics::{
    case_match_table, lesion_prc, stratified_detection, LesionPrc, MatchTable,
    StratifiedDetection,
};
use crate::sampler::{draw_center, patch_origin, SampleCase};
use crate::volgrid::{GridGeom, Mask, ProbabilityMap, VoxelGrid};

/// Neighborhood radii of the local mean / local standard deviation features.
pub const FEATURE_RADII: [usize; 3] = [1, 2, 4];

/// Feature count: raw intensity + mean and std per radius.
pub const FEATURE_COUNT: usize = 1 + 2 * FEATURE_RADII.len();

/// Per-voxel feature grids extracted from one image.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    geom: GridGeom,
    /// `channels[k]` has one value per voxel, scan order.
    channels: Vec<Vec<f32>>,
}

impl FeatureStack {
    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<FeatureStack> {
        let grids: Result<Vec<Vec<f32>>> = self
            .channels
            .iter()
            .map(|ch| {
                VoxelGrid::new(self.geom, ch.clone())
                    .and_then(|g| g.crop(origin, size))
                    .map(|g| g.into_values())
            })
            .collect();
        Ok(FeatureStack {
            geom: GridGeom::new(size, self.geom.spacing)?,
            channels: grids?,
        })
    }
}

/// 3D prefix-sum table for O(1) box sums with edge-clamped windows.
struct IntegralImage {
    dims: [usize; 3],
    table: Vec<f64>,
}

impl IntegralImage {
    fn build(geom: &GridGeom, values: impl Iterator<Item = f64>) -> IntegralImage {
        let [nx, ny, nz] = geom.dims;
        let (sx, sy) = (nx + 1, (nx + 1) * (ny + 1));
        let mut table = vec![0.0f64; (nx + 1) * (ny + 1) * (nz + 1)];
        let mut src = values;
        for z in 1..=nz {
            for y in 1..=ny {
                for x in 1..=nx {
                    let v = src.next().expect("value per voxel");
                    let i = x + y * sx + z * sy;
                    table[i] = v + table[i - 1] + table[i - sx] + table[i - sy]
                        - table[i - 1 - sx]
                        - table[i - 1 - sy]
                        - table[i - sx - sy]
                        + table[i - 1 - sx - sy];
                }
            }
        }
        IntegralImage {
            dims: geom.dims,
            table,
        }
    }

    /// Sum over the half-open box [x0, x1) x [y0, y1) x [z0, z1).
    #[inline]
    fn box_sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let sx = self.dims[0] + 1;
        let sy = (self.dims[0] + 1) * (self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.table[x + y * sx + z * sy];
        at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2])
            - at(hi[0], hi[1], lo[2])
            + at(lo[0], lo[1], hi[2])
            + at(lo[0], hi[1], lo[2])
            + at(hi[0], lo[1], lo[2])
            - at(lo[0], lo[1], lo[2])
    }
}

/// Extract the 7 per-voxel features: raw intensity plus local mean and
/// local standard deviation in cubic windows of radii 1, 2, 4. Windows are
/// clipped to the volume at the edges.
pub fn extract_features(image: &VoxelGrid) -> FeatureStack {
    let geom = *image.geom();
    let [nx, ny, nz] = geom.dims;
    let sums = IntegralImage::build(&geom, image.values().iter().map(|&v| f64::from(v)));
    let squares = IntegralImage::build(
        &geom,
        image.values().iter().map(|&v| f64::from(v) * f64::from(v)),
    );
    let mut channels: Vec<Vec<f32>> = (0..FEATURE_COUNT)
        .map(|_| Vec::with_capacity(geom.voxel_count()))
        .collect();
    channels[0].extend(image.values().iter().copied());
    for (r_idx, &radius) in FEATURE_RADII.iter().enumerate() {
        let mean_ch = 1 + r_idx;
        let std_ch = 1 + FEATURE_RADII.len() + r_idx;
        for z in 0..nz {
            let z0 = z.saturating_sub(radius);
            let z1 = (z + radius + 1).min(nz);
            for y in 0..ny {
                let y0 = y.saturating_sub(radius);
                let y1 = (y + radius + 1).min(ny);
                for x in 0..nx {
                    let x0 = x.saturating_sub(radius);
                    let x1 = (x + radius + 1).min(nx);
                    let count = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                    let s = sums.box_sum([x0, y0, z0], [x1, y1, z1]);
                    let s2 = squares.box_sum([x0, y0, z0], [x1, y1, z1]);
                    let mean = s / count;
                    let var = (s2 / count - mean * mean).max(0.0);
                    channels[mean_ch].push(mean as f32);
                    channels[std_ch].push(var.sqrt() as f32);
                }
            }
        }
    }
    FeatureStack { geom, channels }
}

/// Logistic per-voxel classifier over the feature stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl VoxelModel {
    pub fn zeros() -> Self {
        VoxelModel {
            weights: vec![0.0; FEATURE_COUNT],
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != FEATURE_COUNT {
            return Err(Error::Validation(format!(
                "model has {} weights, expected {FEATURE_COUNT}",
                self.weights.len()
            )));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-voxel probabilities `sigmoid(w . f + b)` as f64.
pub fn forward_probs(model: &VoxelModel, features: &FeatureStack) -> Result<Vec<f64>> {
    model.validate()?;
    if features.channels.len() != model.weights.len() {
        return Err(Error::Argument(format!(
            "feature count {} does not match model weight count {}",
            features.channels.len(),
            model.weights.len()
        )));
    }
    let n = features.geom.voxel_count();
    let mut logits = vec![model.bias; n];
    for (w, channel) in model.weights.iter().zip(&features.channels) {
        for (l, &f) in logits.iter_mut().zip(channel) {
            *l += w * f64::from(f);
        }
    }
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// Forward pass packaged as a probability map.
pub fn forward(model: &VoxelModel, features: &FeatureStack) -> Result<ProbabilityMap> {
    let probs = forward_probs(model, features)?;
    ProbabilityMap::new(
        VoxelGrid::new(features.geom, probs.into_iter().map(|p| p as f32).collect())
            .expect("sized to geom"),
    )
}

/// Run the full predict pipeline on an image.
pub fn predict(model: &VoxelModel, image: &VoxelGrid) -> Result<ProbabilityMap> {
    forward(model, &extract_features(image))
}

/// Loss and parameter gradient for one patch. The gradient layout is
/// `[d/dw_0 .. d/dw_6, d/db]`, composed through the sigmoid:
/// `dL/dtheta = sum_j (dL/dp_j) * p_j (1 - p_j) * f_j`.
pub fn loss_and_grad(
    model: &VoxelModel,
    features: &FeatureStack,
    gt: &Mask,
    patch_weights: Option<&VoxelGrid>,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if features.geom.dims != gt.geom().dims {
        return Err(Error::Argument(
            "loss_and_grad: feature and ground-truth dims differ".into(),
        ));
    }
    let probs = forward_probs(model, features)?;
    let (value, dl_dp) = match kind {
        LossKind::Bce => bce_with_grad(&probs, gt.values()),
        LossKind::Dice => dice_loss_with_grad(&probs, gt.values()),
        LossKind::Iwbce => {
            let w = patch_weights.ok_or_else(|| {
                Error::Argument("iwbce requires a cropped weight grid for the patch".into())
            })?;
            if w.geom().dims != gt.geom().dims {
                return Err(Error::Argument(
                    "loss_and_grad: weight grid dims differ from patch".into(),
                ));
            }
            let wv: Vec<f64> = w.values().iter().map(|&v| f64::from(v)).collect();
            iwbce_with_grad(&probs, gt.values(), &wv)
        }
    };
    let mut grad = vec![0.0f64; FEATURE_COUNT + 1];
    for (j, (&g, &p)) in dl_dp.iter().zip(&probs).enumerate() {
        if g == 0.0 {
            continue;
        }
        let dl_dlogit = g * p * (1.0 - p);
        for k in 0..FEATURE_COUNT {
            grad[k] += dl_dlogit * f64::from(features.channels[k][j]);
        }
        grad[FEATURE_COUNT] += dl_dlogit;
    }
    Ok((value, grad))
}

/// Training hyperparameters. Defaults are desk scale; the two-step schedule
/// drops the learning rate tenfold at 90% of the epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// First epoch (0-based) that uses the reduced rate.
    pub lr_drop_epoch: usize,
    pub tumor_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Bce,
            epochs: 20,
            iterations_per_epoch: 50,
            batch_size: 12,
            patch_size: [32, 32, 32],
            lr_initial: 0.1,
            lr_reduced: 0.01,
            lr_drop_epoch: 18,
            tumor_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Validation("all training counts must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(Error::Validation(format!(
                "lr drop epoch {} must be < epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Validation("patch size components must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_reduced
        } else {
            self.lr_initial
        }
    }
}

/// One case prepared for training: sampling state plus cached features.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub sample: SampleCase,
    pub features: FeatureStack,
}

/// Build a training case: label the ground truth, broadcast weights from
/// the training-set beta, extract features once.
pub fn prepare_training_case(
    id: String,
    image: VoxelGrid,
    gt: Mask,
    beta: f64,
    connectivity: Connectivity,
) -> Result<TrainingCase> {
    let labels = label_components(&gt, connectivity);
    let weights = build_weight_grid(&labels, beta)?;
    let features = extract_features(&image);
    Ok(TrainingCase {
        sample: SampleCase::new(id, image, gt, weights)?,
        features,
    })
}

/// Per-epoch record of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

/// Train the voxel model by SGD over sampled patches. Fully determined by
/// (seed, config, data).
pub fn train(cases: &[TrainingCase], config: &TrainConfig) -> Result<(VoxelModel, TrainingLog)> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::Argument("train needs at least one case".into()));
    }
    for case in cases {
        if config
            .patch_size
            .iter()
            .zip(&case.sample.image.geom().dims)
            .any(|(&p, &d)| p > d)
        {
            return Err(Error::Argument(format!(
                "patch size {:?} does not fit case {}",
                config.patch_size, case.sample.id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VoxelModel::zeros();
    let mut log = TrainingLog { epochs: Vec::new() };
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut epoch_loss = 0.0;
        for _ in 0..config.iterations_per_epoch {
            let mut grad = vec![0.0f64; FEATURE_COUNT + 1];
            let mut batch_loss = 0.0;
            for _ in 0..config.batch_size {
                let case = &cases[rng.random_range(0..cases.len())];
                let geom = case.sample.image.geom();
                let (center_idx, _) = draw_center(
                    geom,
                    case.sample.positives(),
                    config.tumor_prob,
                    &mut rng,
                );
                let origin = patch_origin(geom.dims, geom.coords(center_idx), config.patch_size);
                let features = case.features.crop(origin, config.patch_size)?;
                let gt = case.sample.gt.crop(origin, config.patch_size)?;
                let weights = match config.loss {
                    LossKind::Iwbce => {
                        Some(case.sample.weights.grid().crop(origin, config.patch_size)?)
                    }
                    _ => None,
                };
                let (loss, g) =
                    loss_and_grad(&model, &features, &gt, weights.as_ref(), config.loss)?;
                batch_loss += loss;
                for (acc, gk) in grad.iter_mut().zip(&g) {
                    *acc += gk;
                }
            }
            let scale = lr / config.batch_size as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
            model.bias -= scale * grad[FEATURE_COUNT];
            epoch_loss += batch_loss / config.batch_size as f64;
        }
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss: epoch_loss / config.iterations_per_epoch as f64,
        });
    }
    Ok((model, log))
}

/// One held-out case for evaluation.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub image: VoxelGrid,
    pub gt: Mask,
}

/// Evaluation output: per-case match tables, the swept curve, and
/// detection counts split at the small-lesion cut for the base threshold.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tables: Vec<MatchTable>,
    pub curve: LesionPrc,
    pub base_stratified: StratifiedDetection,
    pub small_cut_mm: f64,
}

/// Forward every case and compute the lesion-wise metrics.
pub fn evaluate(
    model: &VoxelModel,
    cases: &[EvalCase],
    connectivity: Connectivity,
    small_cut_mm: f64,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    let tables: Result<Vec<MatchTable>> = cases
        .par_iter()
        .map(|case| {
            let prob = predict(model, &case.image)?;
            case_match_table(&prob, &case.gt, connectivity)
        })
        .collect();
    let tables = tables?;
    let curve = lesion_prc(&tables)?;
    let base_stratified = stratified_detection(&tables, 0.5, small_cut_mm);
    Ok(EvalReport {
        tables,
        curve,
        base_stratified,
        small_cut_mm,
    })
}
