//! Inverse-volume weight grids and the three loss functions (BCE, iwBCE,
//! Dice loss) with analytic gradients with respect to per-voxel
//! probabilities.
//!
//! Lesion weights make every ground-truth component contribute the same
//! total mass to the loss: component i gets `w_i = beta * total / |C_i|`
//! where the total voxel count includes the background component, and the
//! background itself keeps weight 1.
//!
//! All reductions are sequential in scan order, so values are deterministic
//! regardless of how callers parallelize around them. Loss math runs in
//! f64; grids store f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelMap;
use crate::volgrid::{GridGeom, Mask, ProbabilityMap, VoxelGrid};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before logs so perfect
/// predictions stay finite.
pub const CLAMP_EPS: f64 = 1e-7;

/// Additive smoothing of the Dice loss denominator and numerator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-voxel weights broadcast from component weights, together with the
/// beta and per-component values they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    grid: VoxelGrid,
    beta: f64,
    component_weights: Vec<f64>,
}

impl WeightGrid {
    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn geom(&self) -> &GridGeom {
        self.grid.geom()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `w_0..w_K`; `w_0` is always exactly 1.
    pub fn component_weights(&self) -> &[f64] {
        &self.component_weights
    }

    /// Per-voxel weights as f64, in scan order.
    pub fn voxel_weights(&self) -> Vec<f64> {
        self.grid.values().iter().map(|&w| f64::from(w)).collect()
    }

    /// Uniform unit weights, for reducing iwBCE to BCE.
    pub fn ones(geom: GridGeom) -> Self {
        let n = geom.voxel_count();
        WeightGrid {
            grid: VoxelGrid::new(geom, vec![1.0; n]).expect("sized to geom"),
            beta: 1.0,
            component_weights: vec![1.0],
        }
    }

    /// Crop a congruent window, keeping the global component weights. A
    /// component truncated by the window keeps the weight computed from its
    /// full volume.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<WeightGrid> {
        Ok(WeightGrid {
            grid: self.grid.crop(origin, size)?,
            beta: self.beta,
            component_weights: self.component_weights.clone(),
        })
    }
}

/// Build the weight grid for a labeled ground truth: `w_0 = 1` and
/// `w_i = beta * (sum of all component sizes, background included) / |C_i|`.
pub fn build_weight_grid(labels: &LabelMap, beta: f64) -> Result<WeightGrid> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Argument(format!(
            "beta must be in (0, 1], got {beta}"
        )));
    }
    let total = labels.geom().voxel_count() as f64;
    let mut component_weights = Vec::with_capacity(labels.sizes().len());
    component_weights.push(1.0);
    for &size in &labels.sizes()[1..] {
        component_weights.push(beta * total / size as f64);
    }
    let values: Vec<f32> = labels
        .labels()
        .iter()
        .map(|&l| component_weights[l as usize] as f32)
        .collect();
    Ok(WeightGrid {
        grid: VoxelGrid::new(*labels.geom(), values).expect("sized to geom"),
        beta,
        component_weights,
    })
}

/// Which loss a report came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Iwbce,
    Dice,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Bce => write!(f, "bce"),
            LossKind::Iwbce => write!(f, "iwbce"),
            LossKind::Dice => write!(f, "dice"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "iwbce" => Ok(LossKind::Iwbce),
            "dice" => Ok(LossKind::Dice),
            other => Err(Error::Argument(format!(
                "loss kind must be bce, iwbce or dice, got {other:?}"
            ))),
        }
    }
}

/// A loss value plus, optionally, the per-voxel gradient dL/dp.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub kind: LossKind,
    pub value: f64,
    pub gradient: Option<VoxelGrid>,
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// BCE on raw slices: returns the mean loss and dL/dp per voxel.
/// The gradient is zero wherever the probability sits inside a clamped
/// region, since the clamped loss is locally constant there.
pub fn bce_with_grad(p: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for j in 0..p.len() {
        let pc = clamp_p(p[j]);
        let yj = f64::from(y[j]);
        value -= yj * pc.ln() + (1.0 - yj) * (1.0 - pc).ln();
        if p[j] > CLAMP_EPS && p[j] < 1.0 - CLAMP_EPS {
            grad[j] = -(yj / pc - (1.0 - yj) / (1.0 - pc)) / n;
        }
    }
    (value / n, grad)
}

/// Weighted BCE on raw slices: per-voxel weights scale both the value and
/// the gradient.
pub fn iwbce_with_grad(p: &[f64], y: &[u8], w: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    assert_eq!(p.len(), w.len());
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for j in 0..p.len() {
        let pc = clamp_p(p[j]);
        let yj = f64::from(y[j]);
        value -= w[j] * (yj * pc.ln() + (1.0 - yj) * (1.0 - pc).ln());
        if p[j] > CLAMP_EPS && p[j] < 1.0 - CLAMP_EPS {
            grad[j] = w[j] * (-(yj / pc - (1.0 - yj) / (1.0 - pc)) / n);
        }
    }
    (value / n, grad)
}

/// Dice loss on raw slices, squared-denominator form with additive
/// smoothing: `1 - (2 Σ p y + ε) / (Σ p² + Σ y² + ε)`.
pub fn dice_loss_with_grad(p: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    let mut s_py = 0.0;
    let mut s_pp = 0.0;
    let mut s_yy = 0.0;
    for j in 0..p.len() {
        let yj = f64::from(y[j]);
        s_py += p[j] * yj;
        s_pp += p[j] * p[j];
        s_yy += yj;
    }
    let num = 2.0 * s_py + DICE_SMOOTH;
    let den = s_pp + s_yy + DICE_SMOOTH;
    let value = 1.0 - num / den;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pj, &yj)| (2.0 * pj * num - 2.0 * f64::from(yj) * den) / (den * den))
        .collect();
    (value, grad)
}

fn check_dims(a: &GridGeom, b: &GridGeom, what: &str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Argument(format!(
            "{what}: dims {:?} vs {:?} do not match",
            a.dims, b.dims
        )));
    }
    Ok(())
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

fn grad_grid(geom: GridGeom, grad: Vec<f64>) -> VoxelGrid {
    VoxelGrid::new(geom, grad.into_iter().map(|g| g as f32).collect()).expect("sized to geom")
}

/// Binary cross-entropy of a probability map against a mask.
pub fn bce(p: &ProbabilityMap, y: &Mask) -> Result<LossReport> {
    check_dims(p.geom(), y.geom(), "bce")?;
    let (value, grad) = bce_with_grad(&to_f64(p.values()), y.values());
    Ok(LossReport {
        kind: LossKind::Bce,
        value,
        gradient: Some(grad_grid(*p.geom(), grad)),
    })
}

/// Inversely weighted BCE: BCE with the per-voxel weights of a
/// [`WeightGrid`] built from the ground truth's labeling.
pub fn iwbce(p: &ProbabilityMap, y: &Mask, w: &WeightGrid) -> Result<LossReport> {
    check_dims(p.geom(), y.geom(), "iwbce")?;
    check_dims(p.geom(), w.geom(), "iwbce weights")?;
    let (value, grad) = iwbce_with_grad(&to_f64(p.values()), y.values(), &w.voxel_weights());
    Ok(LossReport {
        kind: LossKind::Iwbce,
        value,
        gradient: Some(grad_grid(*p.geom(), grad)),
    })
}

/// Weighted BCE against a raw per-voxel weight grid (e.g. one loaded from
/// a file, where the per-component metadata is no longer available).
pub fn iwbce_raw(p: &ProbabilityMap, y: &Mask, w: &VoxelGrid) -> Result<LossReport> {
    check_dims(p.geom(), y.geom(), "iwbce")?;
    check_dims(p.geom(), w.geom(), "iwbce weights")?;
    if let Some(pos) = w.values().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "weight at voxel {pos} is {}, expected positive and finite",
            w.values()[pos]
        )));
    }
    let (value, grad) = iwbce_with_grad(&to_f64(p.values()), y.values(), &to_f64(w.values()));
    Ok(LossReport {
        kind: LossKind::Iwbce,
        value,
        gradient: Some(grad_grid(*p.geom(), grad)),
    })
}

/// Dice loss of a probability map against a mask.
pub fn dice_loss(p: &ProbabilityMap, y: &Mask) -> Result<LossReport> {
    check_dims(p.geom(), y.geom(), "dice_loss")?;
    let (value, grad) = dice_loss_with_grad(&to_f64(p.values()), y.values());
    Ok(LossReport {
        kind: LossKind::Dice,
        value,
        gradient: Some(grad_grid(*p.geom(), grad)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{label_components, Connectivity};
    use crate::volgrid::GridGeom;

    fn geom(d: usize) -> GridGeom {
        GridGeom::new([d, d, d], [1.0, 1.0, 1.0]).unwrap()
    }

    /// 10x10x10 mask with one 10-voxel and one 2-voxel component,
    /// separated so they never merge.
    fn two_component_labels() -> LabelMap {
        let g = geom(10);
        let mut v = vec![0u8; 1000];
        for x in 0..10 {
            v[g.index(x, 0, 0)] = 1;
        }
        v[g.index(0, 5, 5)] = 1;
        v[g.index(1, 5, 5)] = 1;
        let mask = Mask::new(g, v).unwrap();
        label_components(&mask, Connectivity::TwentySix)
    }

    #[test]
    fn weight_grid_hand_example() {
        let labels = two_component_labels();
        let w = build_weight_grid(&labels, 0.012).unwrap();
        assert_eq!(w.component_weights(), &[1.0, 1.2, 6.0]);
        // background voxels carry weight exactly 1
        let bg = labels.labels().iter().position(|&l| l == 0).unwrap();
        assert_eq!(w.grid().values()[bg], 1.0);
    }

    #[test]
    fn weight_grid_mass_identity() {
        let labels = two_component_labels();
        let beta = 0.012;
        let w = build_weight_grid(&labels, beta).unwrap();
        let total: usize = labels.sizes().iter().sum();
        for i in 1..w.component_weights().len() {
            let mass = w.component_weights()[i] * labels.sizes()[i] as f64;
            let expect = beta * total as f64;
            assert!((mass - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn weight_grid_no_components() {
        let labels = label_components(&Mask::zeros(geom(4)), Connectivity::TwentySix);
        let w = build_weight_grid(&labels, 0.5).unwrap();
        assert!(w.grid().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equal_components_equal_weights() {
        let g = geom(10);
        let mut v = vec![0u8; 1000];
        v[g.index(0, 0, 0)] = 1;
        v[g.index(9, 9, 9)] = 1;
        let labels = label_components(&Mask::new(g, v).unwrap(), Connectivity::TwentySix);
        let w = build_weight_grid(&labels, 0.3).unwrap();
        assert_eq!(w.component_weights()[1], w.component_weights()[2]);
    }

    #[test]
    fn bad_beta_rejected() {
        let labels = two_component_labels();
        assert!(build_weight_grid(&labels, 0.0).is_err());
        assert!(build_weight_grid(&labels, -1.0).is_err());
    }

    #[test]
    fn bce_symmetric_point() {
        let p = vec![0.5; 27];
        let y = vec![0u8; 27];
        let (value, _) = bce_with_grad(&p, &y);
        assert!((value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_near_zero() {
        let p = vec![1.0, 0.0, 1.0];
        let y = vec![1u8, 0, 1];
        let (value, grad) = bce_with_grad(&p, &y);
        assert!(value <= -(1.0 - CLAMP_EPS).ln() + 1e-15);
        // clamped region: zero gradient
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_single_voxel_gradient() {
        let (_, grad) = bce_with_grad(&[0.5], &[1]);
        assert_eq!(grad[0], -2.0);
    }

    #[test]
    fn iwbce_hand_example() {
        let labels = two_component_labels();
        let w = build_weight_grid(&labels, 0.012).unwrap();
        let g = geom(10);
        let p = ProbabilityMap::new(VoxelGrid::new(g, vec![0.5; 1000]).unwrap()).unwrap();
        let y = Mask::new(
            g,
            labels.labels().iter().map(|&l| u8::from(l > 0)).collect(),
        )
        .unwrap();
        let report = iwbce(&p, &y, &w).unwrap();
        let mean_w = (988.0 + 10.0 * 1.2 + 2.0 * 6.0) / 1000.0;
        let expect = std::f64::consts::LN_2 * mean_w;
        assert!((report.value - expect).abs() < 1e-6, "{}", report.value);
    }

    #[test]
    fn iwbce_unit_weights_is_bce() {
        let p: Vec<f64> = (0..64).map(|i| 0.01 + 0.015 * i as f64).collect();
        let y: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let w = vec![1.0; 64];
        let (bv, bg) = bce_with_grad(&p, &y);
        let (iv, ig) = iwbce_with_grad(&p, &y, &w);
        assert_eq!(bv, iv);
        assert_eq!(bg, ig);
    }

    #[test]
    fn dice_loss_extremes() {
        let y: Vec<u8> = vec![1, 1, 0, 0];
        let p_perfect: Vec<f64> = vec![1.0, 1.0, 0.0, 0.0];
        let (v, _) = dice_loss_with_grad(&p_perfect, &y);
        // ε_D keeps perfect overlap slightly above 0
        let bound = DICE_SMOOTH / (2.0 * 2.0 + DICE_SMOOTH);
        assert!(v >= 0.0 && v <= bound + 1e-15);

        let p_zero = vec![0.0; 4];
        let (v0, _) = dice_loss_with_grad(&p_zero, &y);
        let expect = 1.0 - DICE_SMOOTH / (2.0 + DICE_SMOOTH);
        assert!((v0 - expect).abs() < 1e-15);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut state = 0x12345u64;
        let mut next = || {
            // xorshift, plenty for test fixtures
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let n = 64;
        let p: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * next()).collect();
        let y: Vec<u8> = (0..n).map(|_| (next() > 0.7) as u8).collect();
        let (_, grad) = dice_loss_with_grad(&p, &y);
        let h = 1e-5;
        for j in 0..n {
            let mut pp = p.clone();
            pp[j] += h;
            let (vp, _) = dice_loss_with_grad(&pp, &y);
            pp[j] = p[j] - h;
            let (vm, _) = dice_loss_with_grad(&pp, &y);
            let fd = (vp - vm) / (2.0 * h);
            let scale = fd.abs().max(1e-8);
            assert!(
                ((grad[j] - fd) / scale).abs() < 1e-6,
                "voxel {j}: analytic {} fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn dims_mismatch_rejected() {
        let p =
            ProbabilityMap::new(VoxelGrid::new(geom(2), vec![0.5; 8]).unwrap()).unwrap();
        let y = Mask::zeros(geom(3));
        assert!(bce(&p, &y).is_err());
        assert!(dice_loss(&p, &y).is_err());
    }
}
