//! Multi-rater comparison machinery: consensus contours, the three
//! comparison settings (1 vs 3, 1⁺ vs 3, 1⁺ vs 3⁺), the exact sign test,
//! and timing summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion_metrics::volumetric_dice;
use crate::volgrid::Mask;

/// One rater's record for a case: both contouring modes plus the time each
/// took, in seconds.
#[derive(Debug, Clone)]
pub struct RaterRecord {
    pub manual_mask: Mask,
    pub cnn_init_mask: Mask,
    pub manual_time_s: f64,
    pub adjust_time_s: f64,
}

/// Per-case records for all raters.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub case_id: String,
    pub raters: Vec<RaterRecord>,
}

impl CaseStudy {
    pub fn validate(&self) -> Result<()> {
        if self.raters.len() < 2 {
            return Err(Error::Data(format!(
                "case {}: need at least 2 raters",
                self.case_id
            )));
        }
        let geom = *self.raters[0].manual_mask.geom();
        for (u, rater) in self.raters.iter().enumerate() {
            if !rater.manual_mask.geom().same_grid(&geom)
                || !rater.cnn_init_mask.geom().same_grid(&geom)
            {
                return Err(Error::Data(format!(
                    "case {}, rater {}: masks do not share geometry",
                    self.case_id,
                    u + 1
                )));
            }
            if !(rater.manual_time_s > 0.0) || !(rater.adjust_time_s > 0.0) {
                return Err(Error::Data(format!(
                    "case {}, rater {}: times must be positive",
                    self.case_id,
                    u + 1
                )));
            }
        }
        Ok(())
    }
}

/// The three comparison settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// Manual contour of one rater vs consensus of the others' manual contours.
    #[serde(rename = "1v3")]
    OneVsThree,
    /// CNN-initialized contour of one rater vs the same manual consensus.
    #[serde(rename = "1p_v3")]
    OnePlusVsThree,
    /// CNN-initialized contour vs consensus of the others' CNN-initialized contours.
    #[serde(rename = "1p_v3p")]
    OnePlusVsThreePlus,
}

impl Setting {
    pub const ALL: [Setting; 3] = [
        Setting::OneVsThree,
        Setting::OnePlusVsThree,
        Setting::OnePlusVsThreePlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::OneVsThree => "1v3",
            Setting::OnePlusVsThree => "1p_v3",
            Setting::OnePlusVsThreePlus => "1p_v3p",
        }
    }
}

/// Per-voxel mean of binary masks thresholded at 0.5. With three raters
/// this is majority vote; exact ties (even rater counts) resolve positive.
pub fn consensus(masks: &[&Mask]) -> Result<Mask> {
    if masks.len() < 2 {
        return Err(Error::Argument("consensus needs at least 2 masks".into()));
    }
    let geom = *masks[0].geom();
    for m in &masks[1..] {
        if !m.geom().same_grid(&geom) {
            return Err(Error::Argument("consensus: mask grids differ".into()));
        }
    }
    let n = masks.len();
    let mut votes = vec![0u32; geom.voxel_count()];
    for m in masks {
        for (slot, &v) in votes.iter_mut().zip(m.values()) {
            *slot += u32::from(v);
        }
    }
    // mean >= 0.5  <=>  2 * votes >= n
    let values = votes
        .into_iter()
        .map(|v| u8::from(2 * v as usize >= n))
        .collect();
    Ok(Mask::new(geom, values).expect("votes are 0/1"))
}

/// One Dice value of a (case, rater) pair under one setting.
#[derive(Debug, Clone, Serialize)]
pub struct SettingDice {
    pub case_id: String,
    pub rater: usize,
    pub dice: f64,
}

/// Evaluate one comparison setting for every (case, rater) pair.
pub fn evaluate_setting(study: &[CaseStudy], setting: Setting) -> Result<Vec<SettingDice>> {
    let mut out = Vec::new();
    for case in study {
        case.validate()?;
        for (u, rater) in case.raters.iter().enumerate() {
            let others: Vec<&Mask> = case
                .raters
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != u)
                .map(|(_, r)| match setting {
                    Setting::OnePlusVsThreePlus => &r.cnn_init_mask,
                    _ => &r.manual_mask,
                })
                .collect();
            let reference = consensus(&others)?;
            let own = match setting {
                Setting::OneVsThree => &rater.manual_mask,
                _ => &rater.cnn_init_mask,
            };
            out.push(SettingDice {
                case_id: case.case_id.clone(),
                rater: u + 1,
                dice: volumetric_dice(own, &reference)?,
            });
        }
    }
    Ok(out)
}

/// Median: middle order statistic for odd counts, mean of the two middle
/// order statistics for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Exact two-sided sign test on paired differences. Zero differences are
/// dropped; with n nonzero differences and s positive ones, the p-value is
/// `2 * min(P[X <= s], P[X >= s])` for X ~ Binomial(n, 1/2), capped at 1.
pub fn sign_test(diffs: &[f64]) -> Result<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Argument(
            "sign test: no nonzero differences".into(),
        ));
    }
    let n = nonzero.len();
    let s = nonzero.iter().filter(|&&d| d > 0.0).count();

    // pmf of Binomial(n, 1/2) by upward recurrence
    let mut pmf = vec![0.0f64; n + 1];
    pmf[0] = 0.5f64.powi(n as i32);
    for k in 0..n {
        pmf[k + 1] = pmf[k] * (n - k) as f64 / (k + 1) as f64;
    }
    let lower: f64 = pmf[..=s].iter().sum();
    let upper: f64 = pmf[s..].iter().sum();
    Ok((2.0 * lower.min(upper)).min(1.0))
}

/// Minutes and a min-max range, all in seconds internally.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimeStats {
    pub median_manual_s: f64,
    pub manual_range_s: (f64, f64),
    pub median_reduction_s: f64,
    pub reduction_range_s: (f64, f64),
    /// median(manual) / (median(manual) - median(reduction))
    pub speedup: f64,
    /// Median of per-(case, rater) manual/adjust ratios, for comparison
    /// with the ratio-of-medians figure.
    pub median_case_speedup: f64,
}

fn time_stats(manual: &[f64], adjust: &[f64]) -> TimeStats {
    let reductions: Vec<f64> = manual.iter().zip(adjust).map(|(m, a)| m - a).collect();
    let ratios: Vec<f64> = manual.iter().zip(adjust).map(|(m, a)| m / a).collect();
    let med_manual = median(manual);
    let med_reduction = median(&reductions);
    let min_max = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    TimeStats {
        median_manual_s: med_manual,
        manual_range_s: min_max(manual),
        median_reduction_s: med_reduction,
        reduction_range_s: min_max(&reductions),
        speedup: med_manual / (med_manual - med_reduction),
        median_case_speedup: median(&ratios),
    }
}

/// Per-rater and pooled timing summary.
#[derive(Debug, Clone, Serialize)]
pub struct TimingSummary {
    pub per_rater: Vec<TimeStats>,
    pub pooled: TimeStats,
}

/// Summarize delineation times: per-rater and pooled medians, ranges, and
/// the ratio-of-medians speedup. Negative reductions (adjusting took
/// longer) are legal.
pub fn timing_summary(study: &[CaseStudy]) -> Result<TimingSummary> {
    if study.is_empty() {
        return Err(Error::Argument("timing_summary needs at least one case".into()));
    }
    let rater_count = study[0].raters.len();
    for case in study {
        case.validate()?;
        if case.raters.len() != rater_count {
            return Err(Error::Data(format!(
                "case {}: expected {} raters, found {}",
                case.case_id,
                rater_count,
                case.raters.len()
            )));
        }
    }
    let mut per_rater = Vec::with_capacity(rater_count);
    let mut all_manual = Vec::new();
    let mut all_adjust = Vec::new();
    for u in 0..rater_count {
        let manual: Vec<f64> = study.iter().map(|c| c.raters[u].manual_time_s).collect();
        let adjust: Vec<f64> = study.iter().map(|c| c.raters[u].adjust_time_s).collect();
        all_manual.extend_from_slice(&manual);
        all_adjust.extend_from_slice(&adjust);
        per_rater.push(time_stats(&manual, &adjust));
    }
    Ok(TimingSummary {
        per_rater,
        pooled: time_stats(&all_manual, &all_adjust),
    })
}

/// Median Dice per setting plus sign-test p-values for the two paired
/// comparisons, pooled over all (case, rater) pairs and split per rater.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub per_rater_median: Vec<SettingMedians>,
    pub pooled_median: SettingMedians,
    /// (1v3 vs 1p_v3)
    pub p_value_manual_vs_init: f64,
    /// (1v3 vs 1p_v3p)
    pub p_value_manual_vs_init_consensus: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SettingMedians {
    pub dice_1v3: f64,
    pub dice_1p_v3: f64,
    pub dice_1p_v3p: f64,
}

/// Full agreement report: evaluates all three settings, pairs the Dice
/// values per (case, rater), and runs the sign tests.
pub fn comparison_report(study: &[CaseStudy]) -> Result<ComparisonReport> {
    let base = evaluate_setting(study, Setting::OneVsThree)?;
    let init = evaluate_setting(study, Setting::OnePlusVsThree)?;
    let init_cons = evaluate_setting(study, Setting::OnePlusVsThreePlus)?;

    let rater_count = study
        .first()
        .map(|c| c.raters.len())
        .ok_or_else(|| Error::Argument("comparison_report needs at least one case".into()))?;

    let medians = |values: &[SettingDice], rater: Option<usize>| {
        let picked: Vec<f64> = values
            .iter()
            .filter(|d| rater.is_none_or(|u| d.rater == u))
            .map(|d| d.dice)
            .collect();
        median(&picked)
    };

    let per_rater_median = (1..=rater_count)
        .map(|u| SettingMedians {
            dice_1v3: medians(&base, Some(u)),
            dice_1p_v3: medians(&init, Some(u)),
            dice_1p_v3p: medians(&init_cons, Some(u)),
        })
        .collect();
    let pooled_median = SettingMedians {
        dice_1v3: medians(&base, None),
        dice_1p_v3: medians(&init, None),
        dice_1p_v3p: medians(&init_cons, None),
    };

    let diffs = |a: &[SettingDice], b: &[SettingDice]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| y.dice - x.dice).collect()
    };
    Ok(ComparisonReport {
        per_rater_median,
        pooled_median,
        p_value_manual_vs_init: sign_test(&diffs(&base, &init))?,
        p_value_manual_vs_init_consensus: sign_test(&diffs(&base, &init_cons))?,
    })
}
