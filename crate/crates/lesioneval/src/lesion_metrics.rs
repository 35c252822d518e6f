//! Lesion-wise detection metrics: precision-recall curves swept over
//! component certainty, with a share-a-voxel hit condition, plus lesion-wise
//! and volumetric Dice and bootstrap confidence bands.
//!
//! A predicted lesion is a connected component of the probability map above
//! 0.5 (strict); its certainty is the maximum probability over its voxels.
//! A prediction hits a ground-truth lesion iff the two components share at
//! least one voxel, i.e. their pairwise Dice is greater than zero. The hit
//! condition is pairwise: one prediction overlapping two ground-truth
//! lesions detects both, and two predictions overlapping one lesion count
//! as two true positives but one detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{binarize, label_components, Connectivity, LabelMap};
use crate::volgrid::{Mask, ProbabilityMap};

/// Certainty cut defining predicted lesions.
pub const BASE_THRESHOLD: f64 = 0.5;

/// One predicted lesion: its label in the prediction's label map and the
/// model's certainty for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLesion {
    pub label: u32,
    /// Maximum probability over the component's voxels; always > 0.5.
    pub certainty: f64,
}

/// Binarize a probability map at 0.5, label it, and attach per-component
/// certainties.
pub fn extract_predicted_lesions(
    prob: &ProbabilityMap,
    connectivity: Connectivity,
) -> (LabelMap, Vec<PredictedLesion>) {
    let mask = binarize(prob, BASE_THRESHOLD).expect("0.5 is a valid threshold");
    let labels = label_components(&mask, connectivity);
    let mut certainty = vec![0.0f64; labels.component_count() + 1];
    for (idx, &label) in labels.labels().iter().enumerate() {
        if label > 0 {
            let p = f64::from(prob.values()[idx]);
            if p > certainty[label as usize] {
                certainty[label as usize] = p;
            }
        }
    }
    let lesions = (1..=labels.component_count() as u32)
        .map(|label| PredictedLesion {
            label,
            certainty: certainty[label as usize],
        })
        .collect();
    (labels, lesions)
}

/// Per-case matching state: which predictions exist, which ground-truth
/// lesions exist, and which pairs share voxels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchTable {
    /// Number of ground-truth lesions in the case.
    pub gt_count: usize,
    /// Sphere-equivalent diameter of each ground-truth lesion, mm,
    /// indexed by gt label - 1.
    pub gt_diameters_mm: Vec<f64>,
    /// Predicted lesions with certainties.
    pub predictions: Vec<PredictedLesion>,
    /// Pairs (gt label, pred label) with non-empty voxel intersection.
    pub overlaps: Vec<(u32, u32)>,
}

/// Enumerate overlap pairs between predicted and ground-truth components.
pub fn match_lesions(
    pred_labels: &LabelMap,
    predictions: &[PredictedLesion],
    gt: &LabelMap,
) -> Result<MatchTable> {
    if !pred_labels.geom().same_grid(gt.geom()) {
        return Err(Error::Argument(
            "match_lesions: prediction and ground truth grids differ".into(),
        ));
    }
    let mut seen =
        vec![false; (gt.component_count() + 1) * (pred_labels.component_count() + 1)];
    let mut overlaps = Vec::new();
    let stride = pred_labels.component_count() + 1;
    for (gl, pl) in gt.labels().iter().zip(pred_labels.labels()) {
        if *gl > 0 && *pl > 0 {
            let key = *gl as usize * stride + *pl as usize;
            if !seen[key] {
                seen[key] = true;
                overlaps.push((*gl, *pl));
            }
        }
    }
    overlaps.sort_unstable();
    let gt_diameters_mm = (1..=gt.component_count() as u32)
        .map(|l| gt.equivalent_diameter_mm(l))
        .collect();
    Ok(MatchTable {
        gt_count: gt.component_count(),
        gt_diameters_mm,
        predictions: predictions.to_vec(),
        overlaps,
    })
}

/// Convenience: full per-case pipeline from probability map + ground truth
/// mask to a match table.
pub fn case_match_table(
    prob: &ProbabilityMap,
    gt_mask: &Mask,
    connectivity: Connectivity,
) -> Result<MatchTable> {
    let gt = label_components(gt_mask, connectivity);
    let (pred_labels, predictions) = extract_predicted_lesions(prob, connectivity);
    match_lesions(&pred_labels, &predictions, &gt)
}

/// One point of a lesion-wise precision-recall curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrcPoint {
    pub threshold: f64,
    /// Ground-truth lesions detected by at least one surviving prediction.
    pub tp: usize,
    /// Surviving predictions that overlap at least one ground-truth lesion.
    pub tp_pred: usize,
    /// Surviving predictions overlapping nothing.
    pub fp: usize,
    /// Ground-truth lesions left undetected.
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Per-threshold confidence band from bootstrapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub threshold: f64,
    pub recall_lo: f64,
    pub recall_hi: f64,
    pub precision_lo: f64,
    pub precision_hi: f64,
}

/// Threshold-swept lesion-wise precision-recall curve, points sorted by
/// threshold ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionPrc {
    pub points: Vec<PrcPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<BandPoint>>,
}

fn point_at_threshold(cases: &[&MatchTable], tau: f64) -> PrcPoint {
    let mut tp = 0usize;
    let mut tp_pred = 0usize;
    let mut fp = 0usize;
    let mut total_gt = 0usize;
    for case in cases {
        total_gt += case.gt_count;
        let mut detected = vec![false; case.gt_count + 1];
        for pred in &case.predictions {
            if pred.certainty <= tau {
                continue;
            }
            let mut hits = false;
            for &(gl, pl) in &case.overlaps {
                if pl == pred.label {
                    hits = true;
                    detected[gl as usize] = true;
                }
            }
            if hits {
                tp_pred += 1;
            } else {
                fp += 1;
            }
        }
        tp += detected[1..].iter().filter(|&&d| d).count();
    }
    let precision = if tp_pred + fp == 0 {
        1.0
    } else {
        tp_pred as f64 / (tp_pred + fp) as f64
    };
    let recall = if total_gt == 0 {
        1.0
    } else {
        tp as f64 / total_gt as f64
    };
    PrcPoint {
        threshold: tau,
        tp,
        tp_pred,
        fp,
        fn_: total_gt - tp,
        precision,
        recall,
    }
}

/// Threshold grid for a case set: every distinct certainty plus the base
/// cut at 0.5, sorted ascending.
pub fn threshold_grid(cases: &[MatchTable]) -> Vec<f64> {
    let mut thresholds: Vec<f64> = cases
        .iter()
        .flat_map(|c| c.predictions.iter().map(|p| p.certainty))
        .chain(std::iter::once(BASE_THRESHOLD))
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds
}

fn curve_on_grid(cases: &[&MatchTable], thresholds: &[f64]) -> Vec<PrcPoint> {
    thresholds
        .iter()
        .map(|&tau| point_at_threshold(cases, tau))
        .collect()
}

/// Sweep the lesion-wise precision-recall curve over all certainty
/// thresholds. Predictions survive a threshold strictly above it, so the
/// point at 0.5 corresponds to keeping every predicted lesion.
pub fn lesion_prc(cases: &[MatchTable]) -> Result<LesionPrc> {
    let total_gt: usize = cases.iter().map(|c| c.gt_count).sum();
    if cases.is_empty() || total_gt == 0 {
        return Err(Error::Argument(
            "lesion_prc needs at least one case with at least one ground-truth lesion".into(),
        ));
    }
    let refs: Vec<&MatchTable> = cases.iter().collect();
    let points = curve_on_grid(&refs, &threshold_grid(cases));
    Ok(LesionPrc { points, band: None })
}

/// Linear-interpolation percentile of a sample, q in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Bootstrap the curve: each iteration resamples a fraction of the cases
/// without replacement and recomputes precision/recall on the full-sample
/// threshold grid; the band holds the 2.5 and 97.5 percentiles.
pub fn bootstrap_prc<R: Rng>(
    cases: &[MatchTable],
    iterations: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<LesionPrc> {
    if cases.len() < 2 {
        return Err(Error::Argument("bootstrap_prc needs at least 2 cases".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "bootstrap fraction must be in (0, 1], got {fraction}"
        )));
    }
    if iterations == 0 {
        return Err(Error::Argument("bootstrap needs at least 1 iteration".into()));
    }
    let mut curve = lesion_prc(cases)?;
    let thresholds: Vec<f64> = curve.points.iter().map(|p| p.threshold).collect();
    let subset_size = ((fraction * cases.len() as f64).ceil() as usize).max(1);

    let mut recalls = vec![Vec::with_capacity(iterations); thresholds.len()];
    let mut precisions = vec![Vec::with_capacity(iterations); thresholds.len()];
    for _ in 0..iterations {
        let picked = rand::seq::index::sample(rng, cases.len(), subset_size);
        let subset: Vec<&MatchTable> = picked.iter().map(|i| &cases[i]).collect();
        for (t, point) in curve_on_grid(&subset, &thresholds).into_iter().enumerate() {
            recalls[t].push(point.recall);
            precisions[t].push(point.precision);
        }
    }

    let band = thresholds
        .iter()
        .enumerate()
        .map(|(t, &threshold)| {
            recalls[t].sort_by(|a, b| a.partial_cmp(b).unwrap());
            precisions[t].sort_by(|a, b| a.partial_cmp(b).unwrap());
            BandPoint {
                threshold,
                recall_lo: percentile(&recalls[t], 2.5),
                recall_hi: percentile(&recalls[t], 97.5),
                precision_lo: percentile(&precisions[t], 2.5),
                precision_hi: percentile(&precisions[t], 97.5),
            }
        })
        .collect();
    curve.band = Some(band);
    Ok(curve)
}

/// Per-lesion Dice: each ground-truth lesion against the union of predicted
/// components overlapping it. Missed lesions score 0.
pub fn lesion_dice(
    pred_mask: &Mask,
    gt: &LabelMap,
    connectivity: Connectivity,
) -> Result<Vec<(u32, f64)>> {
    if !pred_mask.geom().same_grid(gt.geom()) {
        return Err(Error::Argument(
            "lesion_dice: prediction and ground truth grids differ".into(),
        ));
    }
    let pred = label_components(pred_mask, connectivity);
    let k_gt = gt.component_count();
    let k_pred = pred.component_count();
    // intersection voxel counts per (gt, pred) pair
    let stride = k_pred + 1;
    let mut inter = vec![0usize; (k_gt + 1) * stride];
    for (gl, pl) in gt.labels().iter().zip(pred.labels()) {
        if *gl > 0 && *pl > 0 {
            inter[*gl as usize * stride + *pl as usize] += 1;
        }
    }
    let mut out = Vec::with_capacity(k_gt);
    for gi in 1..=k_gt {
        let mut inter_total = 0usize;
        let mut union_pred = 0usize;
        for pi in 1..=k_pred {
            let cnt = inter[gi * stride + pi];
            if cnt > 0 {
                inter_total += cnt;
                union_pred += pred.sizes()[pi];
            }
        }
        let dice = if inter_total == 0 {
            0.0
        } else {
            2.0 * inter_total as f64 / (gt.sizes()[gi] + union_pred) as f64
        };
        out.push((gi as u32, dice));
    }
    Ok(out)
}

/// Whole-volume Dice between two masks; two empty masks agree perfectly.
pub fn volumetric_dice(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.geom().same_grid(b.geom()) {
        return Err(Error::Argument(
            "volumetric_dice: mask grids differ".into(),
        ));
    }
    let mut inter = 0usize;
    let mut sum = 0usize;
    for (&va, &vb) in a.values().iter().zip(b.values()) {
        inter += usize::from(va == 1 && vb == 1);
        sum += usize::from(va == 1) + usize::from(vb == 1);
    }
    if sum == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / sum as f64)
    }
}

/// Detection counts split by the small-lesion diameter cut, at one
/// operating threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedDetection {
    pub small_total: usize,
    pub small_detected: usize,
    pub large_total: usize,
    pub large_detected: usize,
}

impl StratifiedDetection {
    pub fn small_missed(&self) -> usize {
        self.small_total - self.small_detected
    }
}

/// Count detected lesions per size stratum at certainty threshold `tau`.
/// Lesions with sphere-equivalent diameter below `cut_mm` form the small
/// stratum.
pub fn stratified_detection(cases: &[MatchTable], tau: f64, cut_mm: f64) -> StratifiedDetection {
    let mut out = StratifiedDetection {
        small_total: 0,
        small_detected: 0,
        large_total: 0,
        large_detected: 0,
    };
    for case in cases {
        let mut detected = vec![false; case.gt_count + 1];
        for pred in &case.predictions {
            if pred.certainty <= tau {
                continue;
            }
            for &(gl, pl) in &case.overlaps {
                if pl == pred.label {
                    detected[gl as usize] = true;
                }
            }
        }
        for gi in 1..=case.gt_count {
            let small = case.gt_diameters_mm[gi - 1] < cut_mm;
            if small {
                out.small_total += 1;
                out.small_detected += usize::from(detected[gi]);
            } else {
                out.large_total += 1;
                out.large_detected += usize::from(detected[gi]);
            }
        }
    }
    out
}

/// Two detection summaries brought to the same precision level: the
/// baseline at the base threshold and the candidate at the lowest threshold
/// whose precision reaches the baseline's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedPrecisionReport {
    pub target_precision: f64,
    pub baseline_threshold: f64,
    pub candidate_threshold: f64,
    pub baseline: StratifiedDetection,
    pub candidate: StratifiedDetection,
}

/// Compare two prediction sets at a matched precision level. The target
/// precision is the baseline's precision at the base threshold; the
/// candidate operates at the lowest swept threshold reaching that precision
/// (maximizing its recall), or at its highest-precision point if none does.
pub fn matched_precision_report(
    baseline: &[MatchTable],
    candidate: &[MatchTable],
    cut_mm: f64,
) -> Result<MatchedPrecisionReport> {
    let base_curve = lesion_prc(baseline)?;
    let target = base_curve
        .points
        .iter()
        .find(|p| p.threshold == BASE_THRESHOLD)
        .map(|p| p.precision)
        .unwrap_or(1.0);
    let cand_curve = lesion_prc(candidate)?;
    let op = cand_curve
        .points
        .iter()
        .find(|p| p.precision >= target)
        .or_else(|| {
            cand_curve
                .points
                .iter()
                .max_by(|a, b| a.precision.total_cmp(&b.precision))
        })
        .expect("curve has points");
    Ok(MatchedPrecisionReport {
        target_precision: target,
        baseline_threshold: BASE_THRESHOLD,
        candidate_threshold: op.threshold,
        baseline: stratified_detection(baseline, BASE_THRESHOLD, cut_mm),
        candidate: stratified_detection(candidate, op.threshold, cut_mm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{GridGeom, VoxelGrid};

    fn geom(d: usize) -> GridGeom {
        GridGeom::new([d, d, d], [1.0, 1.0, 1.0]).unwrap()
    }

    fn prob_map(g: GridGeom, entries: &[(usize, f32)]) -> ProbabilityMap {
        let mut v = vec![0.0f32; g.voxel_count()];
        for &(i, p) in entries {
            v[i] = p;
        }
        ProbabilityMap::new(VoxelGrid::new(g, v).unwrap()).unwrap()
    }

    fn mask(g: GridGeom, indices: &[usize]) -> Mask {
        let mut v = vec![0u8; g.voxel_count()];
        for &i in indices {
            v[i] = 1;
        }
        Mask::new(g, v).unwrap()
    }

    #[test]
    fn extract_nothing_below_cut() {
        let g = geom(4);
        let p = ProbabilityMap::new(VoxelGrid::new(g, vec![0.4; 64]).unwrap()).unwrap();
        let (_, lesions) = extract_predicted_lesions(&p, Connectivity::TwentySix);
        assert!(lesions.is_empty());
    }

    #[test]
    fn extract_max_certainty() {
        let g = geom(4);
        let p = prob_map(g, &[(g.index(1, 1, 1), 0.6), (g.index(2, 1, 1), 0.9)]);
        let (_, lesions) = extract_predicted_lesions(&p, Connectivity::TwentySix);
        assert_eq!(lesions.len(), 1);
        // certainties come from f32 storage, so compare at f32 precision
        assert!((lesions[0].certainty - 0.9).abs() < 1e-6);
    }

    #[test]
    fn extract_two_blobs() {
        let g = geom(6);
        let p = prob_map(g, &[(g.index(0, 0, 0), 0.7), (g.index(5, 5, 5), 0.8)]);
        let (_, lesions) = extract_predicted_lesions(&p, Connectivity::TwentySix);
        assert_eq!(lesions.len(), 2);
    }

    #[test]
    fn match_pairwise_hit_condition() {
        let g = geom(8);
        // one pred blob spanning two gt lesions
        let gt = label_components(
            &mask(g, &[g.index(1, 1, 1), g.index(4, 1, 1)]),
            Connectivity::TwentySix,
        );
        let p = prob_map(
            g,
            &[
                (g.index(1, 1, 1), 0.8),
                (g.index(2, 1, 1), 0.8),
                (g.index(3, 1, 1), 0.8),
                (g.index(4, 1, 1), 0.8),
            ],
        );
        let (pl, preds) = extract_predicted_lesions(&p, Connectivity::TwentySix);
        let table = match_lesions(&pl, &preds, &gt).unwrap();
        assert_eq!(table.overlaps, vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn prc_worked_example() {
        // gt lesions G1, G2; P1 overlaps G1 (certainty 0.9), P2 overlaps
        // nothing (certainty 0.6)
        let table = MatchTable {
            gt_count: 2,
            gt_diameters_mm: vec![2.0, 2.0],
            predictions: vec![
                PredictedLesion {
                    label: 1,
                    certainty: 0.9,
                },
                PredictedLesion {
                    label: 2,
                    certainty: 0.6,
                },
            ],
            overlaps: vec![(1, 1)],
        };
        let curve = lesion_prc(&[table]).unwrap();
        let at = |tau: f64| {
            curve
                .points
                .iter()
                .find(|p| (p.threshold - tau).abs() < 1e-12)
                .unwrap()
        };
        let p05 = at(0.5);
        assert_eq!((p05.tp_pred, p05.fp, p05.tp, p05.fn_), (1, 1, 1, 1));
        assert!((p05.precision - 0.5).abs() < 1e-12);
        assert!((p05.recall - 0.5).abs() < 1e-12);
        let p06 = at(0.6);
        assert_eq!((p06.tp_pred, p06.fp), (1, 0));
        assert!((p06.precision - 1.0).abs() < 1e-12);
        assert!((p06.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prc_perfect_prediction() {
        let table = MatchTable {
            gt_count: 2,
            gt_diameters_mm: vec![5.0, 5.0],
            predictions: vec![
                PredictedLesion {
                    label: 1,
                    certainty: 0.95,
                },
                PredictedLesion {
                    label: 2,
                    certainty: 0.85,
                },
            ],
            overlaps: vec![(1, 1), (2, 2)],
        };
        let curve = lesion_prc(&[table]).unwrap();
        for point in &curve.points {
            if point.threshold < 0.85 {
                assert_eq!(point.precision, 1.0);
                assert_eq!(point.recall, 1.0);
            }
        }
    }

    #[test]
    fn prc_invariants() {
        let table = MatchTable {
            gt_count: 3,
            gt_diameters_mm: vec![1.0, 2.0, 3.0],
            predictions: vec![
                PredictedLesion {
                    label: 1,
                    certainty: 0.7,
                },
                PredictedLesion {
                    label: 2,
                    certainty: 0.6,
                },
            ],
            overlaps: vec![(1, 1), (2, 1), (3, 2)],
        };
        let curve = lesion_prc(&[table]).unwrap();
        let mut last_recall = f64::INFINITY;
        for point in &curve.points {
            assert_eq!(point.tp + point.fn_, 3);
            assert!(point.recall <= last_recall + 1e-15);
            last_recall = point.recall;
        }
    }

    #[test]
    fn prc_zero_gt_rejected() {
        let table = MatchTable {
            gt_count: 0,
            gt_diameters_mm: vec![],
            predictions: vec![],
            overlaps: vec![],
        };
        assert!(lesion_prc(&[table]).is_err());
    }

    #[test]
    fn bootstrap_identical_cases_zero_width() {
        let table = MatchTable {
            gt_count: 2,
            gt_diameters_mm: vec![2.0, 2.0],
            predictions: vec![PredictedLesion {
                label: 1,
                certainty: 0.9,
            }],
            overlaps: vec![(1, 1)],
        };
        let cases = vec![table.clone(), table.clone(), table];
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let curve = bootstrap_prc(&cases, 50, 0.8, &mut rng).unwrap();
        for band in curve.band.as_ref().unwrap() {
            assert_eq!(band.recall_lo, band.recall_hi);
            assert_eq!(band.precision_lo, band.precision_hi);
        }
    }

    #[test]
    fn bootstrap_deterministic() {
        let mk = |cert: f64, overlap: bool| MatchTable {
            gt_count: 1,
            gt_diameters_mm: vec![4.0],
            predictions: vec![PredictedLesion {
                label: 1,
                certainty: cert,
            }],
            overlaps: if overlap { vec![(1, 1)] } else { vec![] },
        };
        let cases = vec![mk(0.9, true), mk(0.7, false), mk(0.8, true), mk(0.6, true)];
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            bootstrap_prc(&cases, 30, 0.8, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bootstrap_bad_fraction_rejected() {
        let cases = vec![
            MatchTable {
                gt_count: 1,
                gt_diameters_mm: vec![1.0],
                predictions: vec![],
                overlaps: vec![],
            };
            2
        ];
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(bootstrap_prc(&cases, 10, 0.0, &mut rng).is_err());
        assert!(bootstrap_prc(&cases, 10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn lesion_dice_examples() {
        let g = geom(8);
        // gt lesion: 8-voxel bar; prediction covers 4 of them plus 4 outside
        let gt_indices: Vec<usize> = (0..8).map(|x| g.index(x, 2, 2)).collect();
        let gt = label_components(&mask(g, &gt_indices), Connectivity::TwentySix);
        // prediction: 4 voxels on the bar plus 4 in the adjacent row
        let mut pv: Vec<usize> = (4..8).map(|x| g.index(x, 2, 2)).collect();
        pv.extend((4..8).map(|x| g.index(x, 3, 2)));
        let pred = mask(g, &pv);
        let dice = lesion_dice(&pred, &gt, Connectivity::TwentySix).unwrap();
        assert_eq!(dice.len(), 1);
        assert!((dice[0].1 - 0.5).abs() < 1e-12);

        // perfect prediction
        let perfect = mask(g, &gt_indices);
        let d2 = lesion_dice(&perfect, &gt, Connectivity::TwentySix).unwrap();
        assert_eq!(d2[0].1, 1.0);

        // missed lesion
        let empty = Mask::zeros(g);
        let d3 = lesion_dice(&empty, &gt, Connectivity::TwentySix).unwrap();
        assert_eq!(d3[0].1, 0.0);
    }

    #[test]
    fn volumetric_dice_examples() {
        let g = geom(10);
        let a = mask(g, &(0..100).collect::<Vec<_>>());
        assert_eq!(volumetric_dice(&a, &a).unwrap(), 1.0);

        let b = mask(g, &(100..200).collect::<Vec<_>>());
        assert_eq!(volumetric_dice(&a, &b).unwrap(), 0.0);

        let c = mask(g, &(20..120).collect::<Vec<_>>());
        assert!((volumetric_dice(&a, &c).unwrap() - 0.8).abs() < 1e-12);

        let empty = Mask::zeros(g);
        assert_eq!(volumetric_dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn stratified_counts() {
        let table = MatchTable {
            gt_count: 2,
            gt_diameters_mm: vec![3.0, 15.0],
            predictions: vec![PredictedLesion {
                label: 1,
                certainty: 0.9,
            }],
            overlaps: vec![(2, 1)],
        };
        let strat = stratified_detection(&[table], 0.5, 10.0);
        assert_eq!(strat.small_total, 1);
        assert_eq!(strat.small_detected, 0);
        assert_eq!(strat.large_total, 1);
        assert_eq!(strat.large_detected, 1);
        assert_eq!(strat.small_missed(), 1);
    }
}
