//! Steps 2-4: row assignment by density clustering, travel-direction
//! computation, and resolution of row-completion and row-occupancy
//! violations.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::PipelineConfig;
use crate::dbscan::dbscan;
use crate::field::FieldModel;
use crate::filters::{find_peaks, find_valleys, hampel_filter};
use crate::ingest::{CartTrack, TrackPoint};
use crate::kv::fmt_f64;

#[derive(Debug, Error)]
pub enum RowError {
    #[error("direction series needs at least 2 samples, got {0}")]
    SeriesTooShort(usize),
    #[error("day table line {0}: {1}")]
    DayTableFormat(usize, String),
}

/// `SIGN(a, b)`: +1 when `a - b >= 0`, else -1. Zero difference counts as
/// forward motion.
fn sign_of(a: f64, b: f64) -> i8 {
    if a - b >= 0.0 {
        1
    } else {
        -1
    }
}

/// Step 2: cluster the track over (x, y, scaled t) and snap every cluster
/// to the row nearest its median x. Noise points are dropped; surviving
/// points carry `x_row` and a trajectory cluster id.
pub fn assign_rows(track: &mut CartTrack, field: &FieldModel, cfg: &PipelineConfig) {
    if track.points.is_empty() {
        return;
    }
    let pts: Vec<[f64; 3]> = track
        .points
        .iter()
        .map(|p| [p.x, p.y, p.t * cfg.time_scale])
        .collect();
    let labels = dbscan(&pts, cfg.row_eps, cfg.row_min_pts);

    // median x per cluster
    let mut xs_by_cluster: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (p, label) in track.points.iter().zip(&labels) {
        if let Some(c) = label {
            xs_by_cluster.entry(*c).or_default().push(p.x);
        }
    }
    let mut row_by_cluster: BTreeMap<usize, f64> = BTreeMap::new();
    for (c, xs) in xs_by_cluster.iter_mut() {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let median = if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        };
        let j = field.nearest_row(median);
        row_by_cluster.insert(*c, field.rows()[j]);
    }

    let mut kept = Vec::with_capacity(track.points.len());
    for (mut p, label) in track.points.drain(..).zip(labels) {
        if let Some(c) = label {
            p.cluster = Some(c);
            p.x_row = Some(row_by_cluster[&c]);
            p.x_row_new = p.x_row;
            kept.push(p);
        }
    }
    track.points = kept;
}

/// Step 3 helper: per-sample travel direction along the row axis.
///
/// The series is Hampel-filtered, then split at prominent peaks and
/// valleys; each segment gets the sign of its net displacement. With no
/// breakpoints the whole series gets `SIGN(y_N - y_1)`.
pub fn travel_direction(y: &[f64], cfg: &PipelineConfig) -> Result<Vec<i8>, RowError> {
    let n = y.len();
    if n < 2 {
        return Err(RowError::SeriesTooShort(n));
    }
    let smooth = hampel_filter(y, cfg.hampel_half_window, cfg.hampel_n_sigma);
    let peaks = find_peaks(&smooth, cfg.peak_prominence);
    let valleys = find_valleys(&smooth, cfg.peak_prominence);

    // merge breakpoints, bracket with the series endpoints
    let mut bp: Vec<usize> = peaks.iter().chain(valleys.iter()).copied().collect();
    bp.sort_unstable();
    bp.dedup();
    bp.retain(|&i| i != 0 && i != n - 1);
    let mut bounds = Vec::with_capacity(bp.len() + 2);
    bounds.push(0);
    bounds.extend(bp);
    bounds.push(n - 1);

    let mut out = Vec::with_capacity(n);
    for (k, w) in bounds.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        let s = sign_of(smooth[hi], smooth[lo]);
        // the last segment also covers its right endpoint so the output
        // length equals the input length
        let len = if k == bounds.len() - 2 { hi - lo + 1 } else { hi - lo };
        out.extend(std::iter::repeat(s).take(len));
    }
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

/// Dominant direction of a point sequence: majority vote over the
/// per-sample direction series. Sequences shorter than 2 count as +1.
pub fn dominant_direction(y: &[f64], cfg: &PipelineConfig) -> i8 {
    match travel_direction(y, cfg) {
        Ok(dirs) => {
            let pos = dirs.iter().filter(|&&d| d > 0).count();
            if pos * 2 >= dirs.len() {
                1
            } else {
                -1
            }
        }
        Err(_) => 1,
    }
}

/// Harvest time of a time-ordered sample sequence: sum of inter-sample
/// intervals, each capped so GNSS dropouts do not inflate the tally.
pub fn in_row_time(ts: &[f64], gap_cap: f64) -> f64 {
    ts.windows(2).map(|w| (w[1] - w[0]).min(gap_cap).max(0.0)).sum()
}

fn row_index(field: &FieldModel, row_value: f64) -> usize {
    field.nearest_row(row_value)
}

/// Per-row view of one cart's points (indices into `track.points`),
/// keyed by current row index and sorted by time within each row.
fn points_by_row(track: &CartTrack, field: &FieldModel) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in track.points.iter().enumerate() {
        if let Some(r) = p.current_row() {
            map.entry(row_index(field, r)).or_default().push(i);
        }
    }
    map
}

/// Step 3: resolve row-completion violations by merging runs of
/// consecutive rows that share one travel direction into the row with the
/// most harvest time.
///
/// Only `x_row_new` and `flag` change; coordinates, timestamps, and
/// masses are untouched.
pub fn resolve_row_completion(track: &mut CartTrack, field: &FieldModel, cfg: &PipelineConfig) {
    for p in track.points.iter_mut() {
        if p.x_row_new.is_none() {
            p.x_row_new = p.x_row;
        }
    }
    let by_row = points_by_row(track, field);
    let rows: Vec<usize> = by_row.keys().copied().collect();
    if rows.len() < 2 {
        return;
    }

    // maximal runs of consecutive row indices
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut current = vec![rows[0]];
    for &r in &rows[1..] {
        if r == *current.last().unwrap() + 1 {
            current.push(r);
        } else {
            runs.push(std::mem::take(&mut current));
            current = vec![r];
        }
    }
    runs.push(current);

    for run in runs.iter().filter(|r| r.len() >= 2) {
        let dir_of = |r: usize| {
            let ys: Vec<f64> = by_row[&r].iter().map(|&i| track.points[i].y).collect();
            dominant_direction(&ys, cfg)
        };
        let first_dir = dir_of(run[0]);
        if !run.iter().all(|&r| dir_of(r) == first_dir) {
            continue; // legitimate bidirectional harvest
        }
        // major row: most harvest time
        let time_of = |r: usize| {
            let ts: Vec<f64> = by_row[&r].iter().map(|&i| track.points[i].t).collect();
            in_row_time(&ts, cfg.time_gap_cap)
        };
        let major = *run
            .iter()
            .max_by(|a, b| time_of(**a).partial_cmp(&time_of(**b)).unwrap())
            .unwrap();
        let major_value = field.rows()[major];
        for &r in run {
            if r == major {
                continue;
            }
            for &i in &by_row[&r] {
                track.points[i].x_row_new = Some(major_value);
                track.points[i].flag = true;
            }
        }
    }
}

/// A pair of carts spatially overlapping in the same row beyond the
/// configured threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyConflict {
    pub cart_k: String,
    pub cart_l: String,
    /// Row center (m).
    pub row: f64,
    /// Overlap length O_kl (m).
    pub overlap: f64,
}

fn y_range(track: &CartTrack, field: &FieldModel, row: usize) -> Option<(f64, f64)> {
    let mut range: Option<(f64, f64)> = None;
    for p in &track.points {
        if let Some(r) = p.current_row() {
            if row_index(field, r) == row {
                range = Some(match range {
                    None => (p.y, p.y),
                    Some((lo, hi)) => (lo.min(p.y), hi.max(p.y)),
                });
            }
        }
    }
    range
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Step 4 detection: one conflict per unordered cart pair per row where
/// the y-extent overlap exceeds `threshold`. Output is sorted by
/// (row, cart ids) so resolution order is deterministic.
pub fn detect_occupancy_conflicts(
    tracks: &[CartTrack],
    field: &FieldModel,
    threshold: f64,
) -> Vec<OccupancyConflict> {
    let mut out = Vec::new();
    for row in 0..field.rows().len() {
        let ranges: Vec<(usize, (f64, f64))> = tracks
            .iter()
            .enumerate()
            .filter_map(|(i, tr)| y_range(tr, field, row).map(|r| (i, r)))
            .collect();
        for i in 0..ranges.len() {
            for j in (i + 1)..ranges.len() {
                let o = interval_overlap(ranges[i].1, ranges[j].1);
                if o > threshold {
                    let (a, b) = (ranges[i].0, ranges[j].0);
                    let (a, b) = if tracks[a].cart_id <= tracks[b].cart_id {
                        (a, b)
                    } else {
                        (b, a)
                    };
                    out.push(OccupancyConflict {
                        cart_k: tracks[a].cart_id.clone(),
                        cart_l: tracks[b].cart_id.clone(),
                        row: field.rows()[row],
                        overlap: o,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.row
            .partial_cmp(&b.row)
            .unwrap()
            .then_with(|| a.cart_k.cmp(&b.cart_k))
            .then_with(|| a.cart_l.cmp(&b.cart_l))
    });
    out
}

/// Time window (s) around a conflict interval inside which a cart's data
/// in other rows votes for its true row.
const NEXT_MAJOR_WINDOW_S: f64 = 3600.0;

/// The next-major-data row for a cart inside a conflict row. Two signals,
/// in order of preference:
///
/// 1. If the conflict-row points were originally assigned elsewhere (an
///    earlier correction moved them in), the majority original row: the
///    cart most plausibly belongs back where its raw data put it.
/// 2. Otherwise the cart's data landed in the conflict row natively (a
///    biased stretch snapped there wholesale), so vote by harvest time
///    among the cart's *other* rows near the conflict's time interval: a
///    biased stretch is surrounded by correctly-placed data from the row
///    the cart was really working.
fn find_next_major_data_row(
    track: &CartTrack,
    field: &FieldModel,
    conflict_row: usize,
    gap_cap: f64,
) -> Option<usize> {
    let mut origin_votes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for p in &track.points {
        let Some(cur) = p.current_row() else { continue };
        if row_index(field, cur) != conflict_row {
            continue;
        }
        t_min = t_min.min(p.t);
        t_max = t_max.max(p.t);
        if let Some(init) = p.x_row {
            let init_row = row_index(field, init);
            if init_row != conflict_row {
                *origin_votes.entry(init_row).or_default() += 1;
            }
        }
    }
    if let Some(row) = origin_votes
        .into_iter()
        .max_by_key(|&(row, count)| (count, usize::MAX - row))
        .map(|(row, _)| row)
    {
        return Some(row);
    }
    if !t_min.is_finite() {
        return None;
    }
    let (lo, hi) = (t_min - NEXT_MAJOR_WINDOW_S, t_max + NEXT_MAJOR_WINDOW_S);
    let mut times: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in &track.points {
        let Some(r) = p.current_row() else { continue };
        let row = row_index(field, r);
        if row != conflict_row && p.t >= lo && p.t <= hi {
            times.entry(row).or_default().push(p.t);
        }
    }
    times
        .into_iter()
        .map(|(row, ts)| (row, in_row_time(&ts, gap_cap)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
        .map(|(row, _)| row)
}

fn cart_flagged_in_row(track: &CartTrack, field: &FieldModel, row: usize) -> bool {
    track.points.iter().any(|p| {
        p.flag
            && p.current_row()
                .is_some_and(|r| row_index(field, r) == row)
    })
}

fn cart_time_in_row(track: &CartTrack, field: &FieldModel, row: usize, gap_cap: f64) -> f64 {
    let ts: Vec<f64> = track
        .points
        .iter()
        .filter(|p| p.current_row().is_some_and(|r| row_index(field, r) == row))
        .map(|p| p.t)
        .collect();
    in_row_time(&ts, gap_cap)
}

/// A candidate row is available when no other cart's y-extent there
/// overlaps the moving interval by more than the threshold.
fn is_row_available(
    tracks: &[CartTrack],
    field: &FieldModel,
    row: usize,
    moving_cart: usize,
    interval: (f64, f64),
    threshold: f64,
) -> bool {
    for (i, tr) in tracks.iter().enumerate() {
        if i == moving_cart {
            continue;
        }
        if let Some(r) = y_range(tr, field, row) {
            if interval_overlap(r, interval) > threshold {
                return false;
            }
        }
    }
    true
}

/// Step 4 resolution. Conflicts are re-detected and resolved in
/// deterministic order until none resolve further.
///
/// The moving cart is the one with less harvest time in the row (on a
/// tie, the previously corrected one). The target prefers a row no other
/// cart occupies over the moving interval; when the only evidence-backed
/// target is itself occupied, the move happens anyway and the knock-on
/// conflict is resolved on a later pass — a biased cart returning to its
/// true row often collides with the stretch that displaced it. Conflicts
/// with no evidence-backed or free target, or that persist after
/// repeated attempts, are returned unresolved and left in place.
pub fn resolve_occupancy(
    tracks: &mut [CartTrack],
    field: &FieldModel,
    cfg: &PipelineConfig,
) -> Vec<OccupancyConflict> {
    let threshold = cfg.overlap_threshold;
    let mut unresolved: Vec<OccupancyConflict> = Vec::new();
    let mut attempts: BTreeMap<(String, String, usize), usize> = BTreeMap::new();
    loop {
        let conflicts = detect_occupancy_conflicts(tracks, field, threshold);
        let next = conflicts.into_iter().find(|c| {
            !unresolved
                .iter()
                .any(|u| u.cart_k == c.cart_k && u.cart_l == c.cart_l && u.row == c.row)
        });
        let Some(conflict) = next else {
            break;
        };
        let row = row_index(field, conflict.row);
        let seen = attempts
            .entry((conflict.cart_k.clone(), conflict.cart_l.clone(), row))
            .or_insert(0);
        if *seen >= 3 {
            // ping-pong guard: repeated moves are not converging
            unresolved.push(conflict);
            continue;
        }
        *seen += 1;
        let idx_k = tracks.iter().position(|t| t.cart_id == conflict.cart_k).unwrap();
        let idx_l = tracks.iter().position(|t| t.cart_id == conflict.cart_l).unwrap();

        let t_k = cart_time_in_row(&tracks[idx_k], field, row, cfg.time_gap_cap);
        let t_l = cart_time_in_row(&tracks[idx_l], field, row, cfg.time_gap_cap);
        let moving = if t_k < t_l {
            idx_k
        } else if t_l < t_k {
            idx_l
        } else {
            // equal time: move the cart an earlier correction placed here
            let k_flagged = cart_flagged_in_row(&tracks[idx_k], field, row);
            let l_flagged = cart_flagged_in_row(&tracks[idx_l], field, row);
            match (k_flagged, l_flagged) {
                (false, true) => idx_l,
                _ => idx_k,
            }
        };

        let interval = y_range(&tracks[moving], field, row).unwrap();
        let r_target = find_next_major_data_row(&tracks[moving], field, row, cfg.time_gap_cap);

        // an evidence-backed target (the cart's own major data row) wins
        // even when occupied; with no such evidence, fall back to a free
        // neighbor of the conflict row
        let chosen = match r_target {
            Some(rt) => Some(rt),
            None => [row.checked_sub(1), Some(row + 1)]
                .into_iter()
                .flatten()
                .filter(|&r| r < field.rows().len() && r != row)
                .find(|&r| is_row_available(tracks, field, r, moving, interval, threshold)),
        };
        match chosen {
            Some(target) => {
                let value = field.rows()[target];
                for p in tracks[moving].points.iter_mut() {
                    if p.current_row().is_some_and(|r| row_index(field, r) == row) {
                        p.x_row_new = Some(value);
                        p.flag = true;
                    }
                }
            }
            None => unresolved.push(conflict),
        }
    }
    unresolved
}

/// Row-completion indicator over one cart: within every trajectory
/// cluster whose samples share a single travel direction, all points must
/// sit in one corrected row.
pub fn row_completion_holds(track: &CartTrack, cfg: &PipelineConfig) -> bool {
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in track.points.iter().enumerate() {
        if let Some(c) = p.cluster {
            clusters.entry(c).or_default().push(i);
        }
    }
    for members in clusters.values() {
        let ys: Vec<f64> = members.iter().map(|&i| track.points[i].y).collect();
        let Ok(dirs) = travel_direction(&ys, cfg) else {
            continue;
        };
        let uniform = dirs.windows(2).all(|w| w[0] == w[1]);
        if !uniform {
            continue;
        }
        let mut rows = members.iter().filter_map(|&i| track.points[i].current_row());
        if let Some(first) = rows.next() {
            if rows.any(|r| r != first) {
                return false;
            }
        }
    }
    true
}

/// Row-occupancy indicator over a day: no cart pair overlaps in any row
/// beyond the threshold.
pub fn row_occupancy_holds(tracks: &[CartTrack], field: &FieldModel, threshold: f64) -> bool {
    detect_occupancy_conflicts(tracks, field, threshold).is_empty()
}

// ---- merged day table -----------------------------------------------

pub const DAY_TABLE_HEADER: &str = "cart_id,x,y,t,mass,x_row,x_row_new,flag";

/// Serialize all carts' corrected tracks into one merged day table.
pub fn serialize_day_table(tracks: &[CartTrack]) -> String {
    let mut out = String::new();
    out.push_str(DAY_TABLE_HEADER);
    out.push('\n');
    for tr in tracks {
        for p in &tr.points {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                tr.cart_id,
                fmt_f64(p.x),
                fmt_f64(p.y),
                fmt_f64(p.t),
                fmt_f64(p.mass),
                opt(p.x_row),
                opt(p.x_row_new),
                u8::from(p.flag),
            ));
        }
    }
    out
}

/// Parse a merged day table back into per-cart tracks (grouped by cart
/// id, original order preserved within each cart).
pub fn parse_day_table(text: &str) -> Result<Vec<CartTrack>, RowError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DAY_TABLE_HEADER => {}
        other => {
            return Err(RowError::DayTableFormat(
                1,
                format!("bad header {:?}", other.map(|(_, h)| h).unwrap_or_default()),
            ))
        }
    }
    let mut by_cart: BTreeMap<String, CartTrack> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(RowError::DayTableFormat(
                i + 1,
                format!("expected 8 columns, got {}", cols.len()),
            ));
        }
        let f = |s: &str| -> Result<f64, RowError> {
            s.trim()
                .parse()
                .map_err(|_| RowError::DayTableFormat(i + 1, format!("bad float {s:?}")))
        };
        let opt = |s: &str| -> Result<Option<f64>, RowError> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                f(s).map(Some)
            }
        };
        let mut p = TrackPoint::new(f(cols[1])?, f(cols[2])?, f(cols[3])?, f(cols[4])?, [0.0; 3]);
        p.x_row = opt(cols[5])?;
        p.x_row_new = opt(cols[6])?;
        p.flag = cols[7].trim() == "1";
        by_cart
            .entry(cols[0].to_string())
            .or_insert_with(|| CartTrack::new(cols[0]))
            .points
            .push(p);
    }
    Ok(by_cart.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GeoPoint, Polygon};
    use proptest::prelude::*;

    fn field(n_rows: usize, spacing: f64) -> FieldModel {
        let rows: Vec<f64> = (0..n_rows).map(|i| 1.0 + i as f64 * spacing).collect();
        let x_max = 2.0 + n_rows as f64 * spacing;
        FieldModel::new(
            rows,
            spacing,
            Polygon::new(vec![(0.0, 0.0), (x_max, 0.0), (x_max, 120.0), (0.0, 120.0)]).unwrap(),
            (0.0, 120.0),
            GeoPoint { lat: 0.0, lon: 0.0 },
            Vec::new(),
        )
        .unwrap()
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    /// Burst of 10 Hz points walking along a row.
    fn burst(track: &mut CartTrack, x: f64, t0: f64, y0: f64, y1: f64, n: usize) {
        for i in 0..n {
            let f = i as f64 / (n - 1).max(1) as f64;
            track
                .points
                .push(TrackPoint::new(x, y0 + f * (y1 - y0), t0 + i as f64 * 0.1, 0.0, [0.0; 3]));
        }
    }

    #[test]
    fn single_burst_single_row() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        burst(&mut tr, fm.rows()[2], 0.0, 0.0, 30.0, 600);
        assign_rows(&mut tr, &fm, &cfg());
        assert_eq!(tr.points.len(), 600);
        assert!(tr.points.iter().all(|p| p.x_row == Some(fm.rows()[2])));
        assert!(tr.points.iter().all(|p| p.cluster == Some(0)));
    }

    #[test]
    fn two_bursts_ten_minutes_apart_two_rows() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        burst(&mut tr, fm.rows()[0], 0.0, 0.0, 30.0, 600);
        burst(&mut tr, fm.rows()[1], 660.0, 30.0, 0.0, 600);
        assign_rows(&mut tr, &fm, &cfg());
        let rows: Vec<f64> = tr.points.iter().map(|p| p.x_row.unwrap()).collect();
        assert!(rows[..600].iter().all(|&r| r == fm.rows()[0]));
        assert!(rows[600..].iter().all(|&r| r == fm.rows()[1]));
        let clusters: std::collections::BTreeSet<_> =
            tr.points.iter().map(|p| p.cluster.unwrap()).collect();
        assert_eq!(clusters.len(), 2);
    }

    #[test]
    fn jittered_points_snap_to_true_row() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        let true_row = fm.rows()[3];
        let mut state = 99u64;
        for i in 0..800 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let jx = ((state >> 33) % 1000) as f64 / 1000.0 - 0.5; // +-0.5 m
            tr.points.push(TrackPoint::new(
                true_row + jx,
                i as f64 * 0.04,
                i as f64 * 0.1,
                0.0,
                [0.0; 3],
            ));
        }
        assign_rows(&mut tr, &fm, &cfg());
        assert!(!tr.points.is_empty());
        assert!(tr.points.iter().all(|p| p.x_row == Some(true_row)));
    }

    #[test]
    fn direction_monotone_series() {
        assert_eq!(travel_direction(&[0.0, 1.0, 2.0, 3.0], &cfg()).unwrap(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn direction_single_peak_split() {
        let y = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0, 1.5, 1.0];
        let d = travel_direction(&y, &cfg()).unwrap();
        assert_eq!(d.len(), 11);
        assert_eq!(&d[..5], &[1, 1, 1, 1, 1]);
        assert_eq!(&d[5..], &[-1, -1, -1, -1, -1, -1]);
    }

    #[test]
    fn direction_constant_series_is_positive() {
        assert_eq!(travel_direction(&[2.0; 6], &cfg()).unwrap(), vec![1; 6]);
    }

    #[test]
    fn direction_valley_then_rise() {
        let mut y: Vec<f64> = (0..8).rev().map(|i| i as f64).collect();
        y.extend((1..9).map(|i| i as f64));
        let d = travel_direction(&y, &cfg()).unwrap();
        assert_eq!(d.len(), y.len());
        assert!(d[..7].iter().all(|&s| s == -1));
        assert!(d[8..].iter().all(|&s| s == 1));
    }

    #[test]
    fn direction_series_too_short() {
        match travel_direction(&[1.0], &cfg()) {
            Err(RowError::SeriesTooShort(1)) => {}
            other => panic!("expected SeriesTooShort, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn direction_output_length_matches_input(y in proptest::collection::vec(-50.0f64..50.0, 2..400)) {
            let d = travel_direction(&y, &cfg()).unwrap();
            prop_assert_eq!(d.len(), y.len());
            prop_assert!(d.iter().all(|&s| s == 1 || s == -1));
        }
    }

    fn with_row(mut p: TrackPoint, row: f64) -> TrackPoint {
        p.x_row = Some(row);
        p.x_row_new = Some(row);
        p.cluster = Some(0);
        p
    }

    #[test]
    fn completion_single_row_untouched() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        for i in 0..100 {
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[1], i as f64 * 0.3, i as f64, 0.0, [0.0; 3]),
                fm.rows()[1],
            ));
        }
        let before = tr.clone();
        resolve_row_completion(&mut tr, &fm, &cfg());
        assert_eq!(tr, before);
    }

    #[test]
    fn completion_merges_same_direction_minor_row() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        // 70 s in row 1, then 30 s erroneously in row 2, both moving +y
        for i in 0..700 {
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[1], i as f64 * 0.05, i as f64 * 0.1, 0.0, [0.0; 3]),
                fm.rows()[1],
            ));
        }
        for i in 0..300 {
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[2], 35.0 + i as f64 * 0.05, 70.0 + i as f64 * 0.1, 0.0, [0.0; 3]),
                fm.rows()[2],
            ));
        }
        let before = tr.clone();
        resolve_row_completion(&mut tr, &fm, &cfg());
        assert!(tr.points.iter().all(|p| p.x_row_new == Some(fm.rows()[1])));
        let flagged = tr.points.iter().filter(|p| p.flag).count();
        assert_eq!(flagged, 300);
        // coordinates, timestamps, masses untouched
        for (a, b) in tr.points.iter().zip(&before.points) {
            assert_eq!((a.x, a.y, a.t, a.mass), (b.x, b.y, b.t, b.mass));
        }
        // oracle: row 1 had more harvest time, so it must be the survivor
        assert!(tr.points.iter().all(|p| !p.flag || p.x_row == Some(fm.rows()[2])));
    }

    #[test]
    fn completion_keeps_opposite_directions() {
        let fm = field(5, 1.63);
        let mut tr = CartTrack::new("c");
        // row 1 moving +y, then row 2 moving -y: a legitimate serpentine
        for i in 0..600 {
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[1], i as f64 * 0.05, i as f64 * 0.1, 0.0, [0.0; 3]),
                fm.rows()[1],
            ));
        }
        for i in 0..600 {
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[2], 30.0 - i as f64 * 0.05, 60.0 + i as f64 * 0.1, 0.0, [0.0; 3]),
                fm.rows()[2],
            ));
        }
        let before = tr.clone();
        resolve_row_completion(&mut tr, &fm, &cfg());
        assert_eq!(tr, before);
    }

    fn span_track(id: &str, fm: &FieldModel, row: usize, y0: f64, y1: f64, t0: f64) -> CartTrack {
        let mut tr = CartTrack::new(id);
        let n = 200;
        for i in 0..n {
            let f = i as f64 / (n - 1) as f64;
            tr.points.push(with_row(
                TrackPoint::new(fm.rows()[row], y0 + f * (y1 - y0), t0 + i as f64 * 0.5, 0.0, [0.0; 3]),
                fm.rows()[row],
            ));
        }
        tr
    }

    #[test]
    fn disjoint_ranges_no_conflict() {
        let fm = field(5, 1.63);
        let tracks = vec![
            span_track("a", &fm, 1, 0.0, 20.0, 0.0),
            span_track("b", &fm, 1, 25.0, 40.0, 0.0),
        ];
        assert!(detect_occupancy_conflicts(&tracks, &fm, 3.0).is_empty());
    }

    #[test]
    fn overlap_formula_direct() {
        let fm = field(5, 1.63);
        let tracks = vec![
            span_track("a", &fm, 1, 10.0, 20.0, 0.0),
            span_track("b", &fm, 1, 15.0, 30.0, 0.0),
        ];
        let c = detect_occupancy_conflicts(&tracks, &fm, 3.0);
        assert_eq!(c.len(), 1);
        assert!((c[0].overlap - 5.0).abs() < 1e-9);
        assert!(detect_occupancy_conflicts(&tracks, &fm, 5.0).is_empty());
    }

    #[test]
    fn three_carts_pairwise_conflicts() {
        let fm = field(5, 1.63);
        let tracks = vec![
            span_track("a", &fm, 2, 0.0, 50.0, 0.0),
            span_track("b", &fm, 2, 10.0, 60.0, 0.0),
            span_track("c", &fm, 2, 20.0, 70.0, 0.0),
        ];
        let conflicts = detect_occupancy_conflicts(&tracks, &fm, 3.0);
        assert_eq!(conflicts.len(), 3); // brute-force all-pairs count
    }

    #[test]
    fn occupancy_moves_flagged_cart_back_to_its_origin_row() {
        let fm = field(6, 1.63);
        let a = span_track("a", &fm, 2, 0.0, 30.0, 0.0);
        // b's points started in row 4 but a correction moved them to row 2
        let mut b = span_track("b", &fm, 2, 5.0, 35.0, 0.0);
        for p in b.points.iter_mut() {
            p.x_row = Some(fm.rows()[4]);
            p.flag = true;
        }
        let mut tracks = vec![a, b];
        let unresolved = resolve_occupancy(&mut tracks, &fm, &cfg());
        assert!(unresolved.is_empty());
        assert!(tracks[1].points.iter().all(|p| p.x_row_new == Some(fm.rows()[4])));
        assert!(tracks[0].points.iter().all(|p| p.x_row_new == Some(fm.rows()[2])));
        assert!(row_occupancy_holds(&tracks, &fm, 3.0));
    }

    #[test]
    fn occupancy_moves_cart_with_less_time() {
        let fm = field(6, 1.63);
        let mut a = span_track("a", &fm, 2, 0.0, 30.0, 0.0); // 100 s span
        a.points.truncate(200);
        let mut b = span_track("b", &fm, 2, 5.0, 35.0, 0.0);
        b.points.truncate(80); // 40 s span
        let mut tracks = vec![a, b];
        let unresolved = resolve_occupancy(&mut tracks, &fm, &cfg());
        assert!(unresolved.is_empty());
        // cart b (less harvest time) was moved; no majority origin row, so
        // the first free neighbor r-1 wins
        assert!(tracks[1].points.iter().all(|p| p.x_row_new == Some(fm.rows()[1]) && p.flag));
        assert!(tracks[0].points.iter().all(|p| p.x_row_new == Some(fm.rows()[2]) && !p.flag));
    }

    #[test]
    fn occupancy_no_available_row_reports_and_leaves_in_place() {
        let fm = field(3, 1.63);
        // conflict in the middle row; both neighbors fully occupied
        let tracks_init = vec![
            span_track("a", &fm, 1, 0.0, 50.0, 0.0),
            span_track("b", &fm, 1, 5.0, 55.0, 0.0),
            span_track("c", &fm, 0, 0.0, 60.0, 0.0),
            span_track("d", &fm, 2, 0.0, 60.0, 0.0),
        ];
        let mut tracks = tracks_init.clone();
        let unresolved = resolve_occupancy(&mut tracks, &fm, &cfg());
        assert_eq!(unresolved.len(), 1);
        assert_eq!(unresolved[0].cart_k, "a");
        assert_eq!(unresolved[0].cart_l, "b");
        // the conflicting pair is untouched
        assert_eq!(tracks[0], tracks_init[0]);
        assert_eq!(tracks[1], tracks_init[1]);
    }

    #[test]
    fn in_row_time_caps_gaps() {
        let ts = [0.0, 0.1, 0.2, 100.0, 100.1];
        assert!((in_row_time(&ts, 1.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn day_table_round_trip() {
        let fm = field(4, 1.63);
        let mut tracks = vec![
            span_track("a", &fm, 1, 0.0, 30.0, 0.0),
            span_track("b", &fm, 2, 0.0, 30.0, 10.0),
        ];
        tracks[0].points[3].flag = true;
        let text = serialize_day_table(&tracks);
        let parsed = parse_day_table(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].cart_id, "a");
        assert_eq!(parsed[0].points.len(), tracks[0].points.len());
        assert!(parsed[0].points[3].flag);
        for (p, q) in parsed[1].points.iter().zip(&tracks[1].points) {
            assert_eq!((p.x, p.y, p.t, p.x_row, p.x_row_new), (q.x, q.y, q.t, q.x_row, q.x_row_new));
        }
    }
}
