//! Accuracy metrics: row-level and tray-level yield distribution
//! accuracy, tray-count accuracy with MAE/RMSE, Pearson correlation, and
//! Bland-Altman agreement statistics.

use thiserror::Error;

use crate::kv::{fmt_f64, KvDoc};
use crate::yield_map::YieldPoint;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("ground-truth mass must be positive (tray {0})")]
    ZeroGroundTruthMass(usize),
    #[error("no cart-days with positive ground-truth count")]
    ZeroGroundTruthCount,
    #[error("no trays to evaluate")]
    NoData,
}

/// Row-level accuracy: per-row relative errors summed per tray, averaged
/// over trays. 100 * (1 - (1/T) * sum_i sum_j |gt - est| / gt).
///
/// Input: one inner list per tray of (gt, est) row masses.
pub fn row_level_accuracy(trays: &[Vec<(f64, f64)>]) -> Result<f64, MetricError> {
    if trays.is_empty() {
        return Err(MetricError::NoData);
    }
    let mut err_sum = 0.0;
    for (i, rows) in trays.iter().enumerate() {
        for &(gt, est) in rows {
            if gt <= 0.0 {
                return Err(MetricError::ZeroGroundTruthMass(i));
            }
            err_sum += (gt - est).abs() / gt;
        }
    }
    Ok(100.0 * (1.0 - err_sum / trays.len() as f64))
}

/// Tray-level accuracy: row masses summed per tray before the error is
/// taken, so opposite-signed row errors cancel.
pub fn tray_level_accuracy(trays: &[Vec<(f64, f64)>]) -> Result<f64, MetricError> {
    if trays.is_empty() {
        return Err(MetricError::NoData);
    }
    let mut err_sum = 0.0;
    for (i, rows) in trays.iter().enumerate() {
        let gt: f64 = rows.iter().map(|r| r.0).sum();
        let est: f64 = rows.iter().map(|r| r.1).sum();
        if gt <= 0.0 {
            return Err(MetricError::ZeroGroundTruthMass(i));
        }
        err_sum += (gt - est).abs() / gt;
    }
    Ok(100.0 * (1.0 - err_sum / trays.len() as f64))
}

/// Fractional tray-count estimate: total mass over the average full-tray
/// net mass.
pub fn tray_count_estimate(total_kg: f64, avg_tray_mass: f64) -> f64 {
    total_kg / avg_tray_mass
}

/// Tray-count accuracy over aligned cart-day (gt, est) pairs, plus MAE
/// and RMSE in trays. Cart-days with zero ground truth are excluded from
/// the accuracy term and counted separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMetrics {
    pub accuracy: f64,
    pub mae: f64,
    pub rmse: f64,
    pub excluded_zero_gt: usize,
}

pub fn tray_count_accuracy(pairs: &[(f64, f64)]) -> Result<CountMetrics, MetricError> {
    let included: Vec<&(f64, f64)> = pairs.iter().filter(|(gt, _)| *gt > 0.0).collect();
    if included.is_empty() {
        return Err(MetricError::ZeroGroundTruthCount);
    }
    let n = included.len() as f64;
    let rel: f64 = included.iter().map(|(gt, est)| (gt - est).abs() / gt).sum();
    let abs: f64 = included.iter().map(|(gt, est)| (gt - est).abs()).sum();
    let sq: f64 = included.iter().map(|(gt, est)| (gt - est) * (gt - est)).sum();
    Ok(CountMetrics {
        accuracy: 100.0 * (1.0 - rel / n),
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        excluded_zero_gt: pairs.len() - included.len(),
    })
}

/// Pearson correlation coefficient. `None` when either series has zero
/// variance (degenerate case surfaced rather than guessed).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Bland-Altman agreement statistics over paired measurements.
/// Differences are gt - est; limits are mean +- 1.96 sample SDs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
}

pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoData);
    }
    let n = pairs.len();
    let diffs: Vec<f64> = pairs.iter().map(|(gt, est)| gt - est).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BlandAltman {
        mean_diff: mean,
        sd_diff: sd,
        lower_limit: mean - 1.96 * sd,
        upper_limit: mean + 1.96 * sd,
    })
}

// ---- ground-truth matching ------------------------------------------

/// One ground-truth tray segment: the span of a row harvested into one
/// tray, with its true net mass.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub cart_id: String,
    pub tray: usize,
    /// Row center (m).
    pub row: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub mass_kg: f64,
}

fn row_key(row: f64) -> i64 {
    (row * 1e6).round() as i64
}

/// Estimated mass per ground-truth segment: every yield point in the
/// segment's row is assigned to the nearest segment interval of the same
/// cart (equivalent to cutting at midpoints between adjacent segments),
/// and its increments are summed.
///
/// Returns one (gt, est) mass pair per segment, in input order.
pub fn match_segments(segments: &[GtSegment], points: &[YieldPoint]) -> Vec<(f64, f64)> {
    let mut est = vec![0.0f64; segments.len()];
    for p in points {
        let key = row_key(p.x_row);
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in segments.iter().enumerate() {
            if row_key(s.row) != key {
                continue;
            }
            // distance from the point to the segment's y-interval
            let d = if p.y < s.y_min {
                s.y_min - p.y
            } else if p.y > s.y_max {
                p.y - s.y_max
            } else {
                0.0
            };
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            est[i] += p.mass_kg();
        }
    }
    segments
        .iter()
        .zip(est)
        .map(|(s, e)| (s.mass_kg, e))
        .collect()
}

/// Group matched segment pairs per tray for the row- and tray-level
/// accuracies.
pub fn group_by_tray(segments: &[GtSegment], pairs: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut grouped: std::collections::BTreeMap<(String, usize), Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for (s, &pair) in segments.iter().zip(pairs) {
        let k = (s.cart_id.clone(), s.tray);
        if !grouped.contains_key(&k) {
            order.push(k.clone());
        }
        grouped.entry(k).or_default().push(pair);
    }
    order.into_iter().map(|k| grouped.remove(&k).unwrap()).collect()
}

// ---- report ----------------------------------------------------------

/// Full metric report for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub row_level_acc: f64,
    pub tray_level_acc: f64,
    pub counts: CountMetrics,
    pub pearson_r: Option<f64>,
    pub bland_altman: BlandAltman,
    pub zero_yield_fraction: Option<f64>,
    pub n_trays: usize,
}

impl MetricReport {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("row_level_accuracy_pct", fmt_f64(self.row_level_acc));
        doc.set("tray_level_accuracy_pct", fmt_f64(self.tray_level_acc));
        doc.set("tray_count_accuracy_pct", fmt_f64(self.counts.accuracy));
        doc.set("tray_count_mae", fmt_f64(self.counts.mae));
        doc.set("tray_count_rmse", fmt_f64(self.counts.rmse));
        doc.set("excluded_zero_gt_cart_days", self.counts.excluded_zero_gt);
        match self.pearson_r {
            Some(r) => doc.set("pearson_r", fmt_f64(r)),
            None => doc.set("pearson_r", "degenerate"),
        }
        doc.set("bland_altman_mean_diff", fmt_f64(self.bland_altman.mean_diff));
        doc.set("bland_altman_lower", fmt_f64(self.bland_altman.lower_limit));
        doc.set("bland_altman_upper", fmt_f64(self.bland_altman.upper_limit));
        if let Some(z) = self.zero_yield_fraction {
            doc.set("zero_yield_fraction", fmt_f64(z));
        }
        doc.set("n_trays", self.n_trays);
        doc
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("trays evaluated:        {}\n", self.n_trays));
        s.push_str(&format!("row-level accuracy:     {:.2} %\n", self.row_level_acc));
        s.push_str(&format!("tray-level accuracy:    {:.2} %\n", self.tray_level_acc));
        s.push_str(&format!("tray-count accuracy:    {:.2} %\n", self.counts.accuracy));
        s.push_str(&format!(
            "tray-count MAE / RMSE:  {:.3} / {:.3} trays\n",
            self.counts.mae, self.counts.rmse
        ));
        match self.pearson_r {
            Some(r) => s.push_str(&format!("pearson r:              {r:.4}\n")),
            None => s.push_str("pearson r:              degenerate (zero variance)\n"),
        }
        s.push_str(&format!(
            "bland-altman:           {:.3} [{:.3}, {:.3}]\n",
            self.bland_altman.mean_diff, self.bland_altman.lower_limit, self.bland_altman.upper_limit
        ));
        if let Some(z) = self.zero_yield_fraction {
            s.push_str(&format!("zero-yield fraction:    {:.3}\n", z));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn row_level_exact_match_is_100() {
        let trays = vec![vec![(4.0, 4.0), (2.0, 2.0)], vec![(3.0, 3.0)]];
        assert_abs_diff_eq!(row_level_accuracy(&trays).unwrap(), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn row_level_single_tray_single_row() {
        let trays = vec![vec![(4.0, 3.6)]];
        assert_abs_diff_eq!(row_level_accuracy(&trays).unwrap(), 90.0, epsilon = 1e-9);
    }

    #[test]
    fn row_level_two_trays_inner_sums() {
        // inner relative-error sums 0.1 and 0.3 -> 100 * (1 - 0.2) = 80
        let trays = vec![vec![(1.0, 0.9)], vec![(2.0, 2.6)]];
        assert_abs_diff_eq!(row_level_accuracy(&trays).unwrap(), 80.0, epsilon = 1e-9);
    }

    #[test]
    fn row_level_zero_gt_rejected() {
        match row_level_accuracy(&[vec![(0.0, 1.0)]]) {
            Err(MetricError::ZeroGroundTruthMass(0)) => {}
            other => panic!("expected ZeroGroundTruthMass, got {other:?}"),
        }
    }

    #[test]
    fn tray_level_cancellation() {
        // +0.2 and -0.2 kg row errors cancel at tray level
        let trays = vec![vec![(2.0, 2.2), (2.0, 1.8)]];
        assert_abs_diff_eq!(tray_level_accuracy(&trays).unwrap(), 100.0, epsilon = 1e-12);
        // ...but not at row level
        assert!(row_level_accuracy(&trays).unwrap() < 100.0);
    }

    #[test]
    fn tray_level_average_tray() {
        let trays = vec![vec![(4.25, 4.0)]];
        assert_abs_diff_eq!(
            tray_level_accuracy(&trays).unwrap(),
            100.0 * (1.0 - 0.25 / 4.25),
            epsilon = 1e-9
        );
    }

    #[test]
    fn single_row_trays_make_row_and_tray_accuracy_equal() {
        let trays = vec![
            vec![(2.0, 2.1), (3.0, 3.2)],
            vec![(4.0, 3.7), (1.0, 0.9)],
        ];
        // all errors share a sign within each tray
        let a5 = row_level_accuracy(&trays).unwrap();
        let a6 = tray_level_accuracy(&trays).unwrap();
        // not equal in general because the row-level form sums per-row
        // relative errors while the tray-level form divides by the tray
        // sum; equality holds when each tray has one row
        let single = vec![vec![(2.0, 2.3)], vec![(4.0, 3.5)]];
        assert_abs_diff_eq!(
            row_level_accuracy(&single).unwrap(),
            tray_level_accuracy(&single).unwrap(),
            epsilon = 1e-12
        );
        assert!(a5 <= 100.0 && a6 <= 100.0);
    }

    #[test]
    fn count_estimate_examples() {
        assert_eq!(tray_count_estimate(42.5, 4.25), 10.0);
        assert_eq!(tray_count_estimate(0.0, 4.25), 0.0);
    }

    #[test]
    fn count_accuracy_single_pair() {
        let m = tray_count_accuracy(&[(10.0, 9.0)]).unwrap();
        assert_abs_diff_eq!(m.accuracy, 90.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.mae, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn count_accuracy_excludes_zero_gt() {
        let m = tray_count_accuracy(&[(10.0, 10.0), (0.0, 3.0)]).unwrap();
        assert_abs_diff_eq!(m.accuracy, 100.0, epsilon = 1e-12);
        assert_eq!(m.excluded_zero_gt, 1);
        match tray_count_accuracy(&[(0.0, 1.0)]) {
            Err(MetricError::ZeroGroundTruthCount) => {}
            other => panic!("expected ZeroGroundTruthCount, got {other:?}"),
        }
    }

    #[test]
    fn pearson_affine_shift_is_one() {
        let xs = [3.0, 5.0, 9.0, 12.0];
        let ys: Vec<f64> = xs.iter().map(|x| x + 1.0).collect();
        assert_abs_diff_eq!(pearson(&xs, &ys).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_degenerate_is_none() {
        assert_eq!(pearson(&[2.0, 2.0, 2.0], &[1.0, 5.0, 9.0]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    #[test]
    fn bland_altman_constant_offset() {
        let pairs: Vec<(f64, f64)> = [3.0, 5.0, 9.0].iter().map(|&g| (g, g + 1.0)).collect();
        let ba = bland_altman(&pairs).unwrap();
        assert_abs_diff_eq!(ba.mean_diff, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ba.sd_diff, 0.0, epsilon = 1e-12);
        // limits symmetric about the mean difference
        assert_abs_diff_eq!(
            ba.upper_limit - ba.mean_diff,
            ba.mean_diff - ba.lower_limit,
            epsilon = 1e-12
        );
    }

    #[test]
    fn matching_assigns_points_to_nearest_segment() {
        let segments = vec![
            GtSegment {
                cart_id: "a".into(),
                tray: 0,
                row: 1.0,
                y_min: 0.0,
                y_max: 10.0,
                mass_kg: 2.0,
            },
            GtSegment {
                cart_id: "a".into(),
                tray: 1,
                row: 1.0,
                y_min: 12.0,
                y_max: 20.0,
                mass_kg: 3.0,
            },
        ];
        let mk = |y: f64, kg: f64| YieldPoint {
            x_row: 1.0,
            y,
            mass_ug: crate::yield_map::kg_to_micrograms(kg),
            tray: 0,
            low_confidence: false,
        };
        // 5.0 inside seg 0; 10.9 in the gap but nearer seg 0; 11.1 nearer
        // seg 1; 15.0 inside seg 1
        let points = vec![mk(5.0, 1.0), mk(10.9, 0.5), mk(11.1, 0.25), mk(15.0, 2.0)];
        let pairs = match_segments(&segments, &points);
        assert_abs_diff_eq!(pairs[0].1, 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(pairs[1].1, 2.25, epsilon = 1e-9);
        assert_eq!(pairs[0].0, 2.0);
    }

    #[test]
    fn grouping_preserves_tray_structure() {
        let seg = |tray: usize, row: f64| GtSegment {
            cart_id: "a".into(),
            tray,
            row,
            y_min: 0.0,
            y_max: 1.0,
            mass_kg: 1.0,
        };
        let segments = vec![seg(0, 1.0), seg(0, 2.0), seg(1, 2.0)];
        let pairs = vec![(1.0, 0.9), (1.0, 1.1), (1.0, 1.0)];
        let grouped = group_by_tray(&segments, &pairs);
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0].len(), 2);
        assert_eq!(grouped[1].len(), 1);
    }

    #[test]
    fn report_round_trips_through_kv() {
        let report = MetricReport {
            row_level_acc: 91.5,
            tray_level_acc: 95.25,
            counts: CountMetrics {
                accuracy: 94.0,
                mae: 1.5,
                rmse: 2.0,
                excluded_zero_gt: 0,
            },
            pearson_r: Some(0.991),
            bland_altman: BlandAltman {
                mean_diff: -0.5,
                sd_diff: 1.0,
                lower_limit: -2.46,
                upper_limit: 1.46,
            },
            zero_yield_fraction: Some(0.131),
            n_trays: 57,
        };
        let doc = report.to_kv();
        assert_eq!(doc.require_f64("row_level_accuracy_pct").unwrap(), 91.5);
        assert_eq!(doc.require_f64("pearson_r").unwrap(), 0.991);
        assert!(report.render_text().contains("94.00 %"));
    }
}
