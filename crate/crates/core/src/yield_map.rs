//! Steps 5-6: mass-signal cleaning, tray separation, adaptive polynomial
//! yield interpolation, and grid aggregation.
//!
//! Yield increments are quantized to integer micrograms as soon as they
//! are produced. All later aggregation (gridding, season accumulation) is
//! integer arithmetic, so totals are conserved bit-exactly regardless of
//! summation order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::PipelineConfig;
use crate::dbscan::dbscan;
use crate::field::GridSpec;
use crate::filters::median_filter;
use crate::ingest::TrackPoint;
use crate::kv::{fmt_f64, KvDoc, KvError};

/// Micrograms per kilogram: the fixed-point scale for yield masses.
pub const MICROGRAMS_PER_KG: f64 = 1e9;

pub fn kg_to_micrograms(kg: f64) -> i64 {
    (kg * MICROGRAMS_PER_KG).round() as i64
}

pub fn micrograms_to_kg(ug: i64) -> f64 {
    ug as f64 / MICROGRAMS_PER_KG
}

#[derive(Debug, Error)]
pub enum YieldError {
    #[error("mass filter removed every sample (dead load cell?)")]
    AllFiltered,
    #[error("cannot accumulate grids with different specs")]
    GridMismatch,
    #[error("grid file {path}: {source}")]
    FileFormat {
        path: String,
        #[source]
        source: KvError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---- Step 5: mass processing ----------------------------------------

/// Clean a time-ordered mass series per the three-stage filter:
/// (1) range gate `w_min < w < w_max` (strict), (2) rate gate keeping
/// sample `j` when the forward rate `(w_{j+1} - w_j)/(t_{j+1} - t_j)`
/// lies in `(0, dw_max]`, (3) median filter over the survivors' masses.
///
/// Output points keep their original coordinates and timestamps; only
/// masses change (median stage). The range and rate stages drop points,
/// so plateau samples (zero rate) are intentionally removed — the rising
/// edges carry the yield signal. Judging each sample by its own forward
/// difference (rather than against the last survivor) means a tray swap's
/// mass reset drops only the samples at the discontinuity, not the whole
/// next tray. The final range survivor has no forward difference and is
/// dropped.
pub fn process_mass(
    points: &[TrackPoint],
    cfg: &PipelineConfig,
) -> Result<Vec<TrackPoint>, YieldError> {
    // stage 1: range
    let ranged: Vec<&TrackPoint> = points
        .iter()
        .filter(|p| p.mass > cfg.w_min && p.mass < cfg.w_max)
        .collect();

    // stage 2: forward-difference rate gate
    let mut kept: Vec<TrackPoint> = Vec::with_capacity(ranged.len());
    for pair in ranged.windows(2) {
        let (p, next) = (pair[0], pair[1]);
        let dt = next.t - p.t;
        if dt <= 0.0 {
            continue;
        }
        let rate = (next.mass - p.mass) / dt;
        if rate > 0.0 && rate <= cfg.dw_max {
            kept.push(p.clone());
        }
    }
    if kept.is_empty() {
        return Err(YieldError::AllFiltered);
    }

    // stage 3: median filter over masses; count unchanged
    let masses: Vec<f64> = kept.iter().map(|p| p.mass).collect();
    let smoothed = median_filter(&masses, cfg.median_window);
    for (p, m) in kept.iter_mut().zip(smoothed) {
        p.mass = m;
    }
    Ok(kept)
}

// ---- Step 6.0: tray separation --------------------------------------

/// Assign tray ids by clustering each row's points over (y, scaled t,
/// scaled w), then re-linking clusters that continue the same physical
/// tray (mass continuity within `tray_relink_mass` and a time gap under
/// `tray_relink_gap`) — the partial-tray-carried-to-next-row case.
///
/// Returns the points that belong to some tray, time-ordered, with
/// `tray` set and `cluster` rewritten to the tray *fragment* id (one id
/// per pre-relink cluster). Downstream interpolation fits per fragment:
/// a relinked tray's fragments are y-contiguous individually but can be
/// far apart along the row, and one polynomial across the gap would
/// smear mass over ground the tray never covered. Cluster noise is
/// dropped.
pub fn separate_trays(points: &[TrackPoint], cfg: &PipelineConfig) -> Vec<TrackPoint> {
    // group by corrected row
    let mut by_row: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if let Some(r) = p.current_row() {
            // key rows by micrometer-quantized center so f64 equality is safe
            by_row.entry((r * 1e6).round() as i64).or_default().push(i);
        }
    }

    // per-row clustering
    struct Cluster {
        member_indices: Vec<usize>,
        t_start: f64,
        t_end: f64,
        w_start: f64,
        w_end: f64,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for members in by_row.values() {
        let feats: Vec<[f64; 3]> = members
            .iter()
            .map(|&i| {
                let p = &points[i];
                [p.y, p.t * cfg.tray_time_scale, p.mass * cfg.tray_mass_scale]
            })
            .collect();
        let labels = dbscan(&feats, cfg.tray_eps, cfg.tray_min_pts);
        let mut local: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&i, label) in members.iter().zip(&labels) {
            if let Some(c) = label {
                local.entry(*c).or_default().push(i);
            }
        }
        for mut idxs in local.into_values() {
            idxs.sort_by(|&a, &b| points[a].t.partial_cmp(&points[b].t).unwrap());
            let first = &points[idxs[0]];
            let last = &points[*idxs.last().unwrap()];
            clusters.push(Cluster {
                t_start: first.t,
                t_end: last.t,
                w_start: first.mass,
                w_end: last.mass,
                member_indices: idxs,
            });
        }
    }

    // chain clusters into trays by temporal order + mass continuity
    clusters.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).unwrap());
    let mut tray_of_cluster: Vec<usize> = Vec::with_capacity(clusters.len());
    // open chains: (tray id, end time, end mass)
    let mut open: Vec<(usize, f64, f64)> = Vec::new();
    let mut next_tray = 0usize;
    for c in &clusters {
        let candidate = open
            .iter_mut()
            .filter(|(_, t_end, w_end)| {
                c.t_start >= *t_end
                    && c.t_start - *t_end < cfg.tray_relink_gap
                    && (c.w_start - *w_end).abs() <= cfg.tray_relink_mass
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        match candidate {
            Some(chain) => {
                tray_of_cluster.push(chain.0);
                chain.1 = c.t_end;
                chain.2 = c.w_end;
            }
            None => {
                tray_of_cluster.push(next_tray);
                open.push((next_tray, c.t_end, c.w_end));
                next_tray += 1;
            }
        }
    }

    let mut out: Vec<TrackPoint> = Vec::new();
    for (fragment, (c, &tray)) in clusters.iter().zip(&tray_of_cluster).enumerate() {
        for &i in &c.member_indices {
            let mut p = points[i].clone();
            p.tray = Some(tray);
            p.cluster = Some(fragment);
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    out
}

// ---- Step 6.1: yield interpolation ----------------------------------

/// One interpolated yield increment: `mass_ug` over the sampling interval
/// centered at (`x_row`, `y`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YieldPoint {
    /// Corrected row center (m).
    pub x_row: f64,
    /// Along-row position of the interval midpoint (m).
    pub y: f64,
    /// Yield increment in integer micrograms.
    pub mass_ug: i64,
    pub tray: usize,
    /// True when the segment's best polynomial fit stayed below the
    /// acceptance score or was non-monotone over its span.
    pub low_confidence: bool,
}

impl YieldPoint {
    pub fn mass_kg(&self) -> f64 {
        micrograms_to_kg(self.mass_ug)
    }
}

/// Diagnostics for one (tray, row) segment fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFit {
    pub tray: usize,
    pub x_row: f64,
    pub degree: usize,
    pub score: f64,
    pub low_confidence: bool,
    pub monotone: bool,
    pub n_points: usize,
}

/// Least-squares polynomial fit of `w` on centered/scaled `y`.
/// Coefficients are in the scaled variable; use `eval` to evaluate.
struct Poly {
    coeffs: Vec<f64>,
    y_mid: f64,
    y_half: f64,
}

impl Poly {
    fn eval(&self, y: f64) -> f64 {
        let u = (y - self.y_mid) / self.y_half;
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * u + c;
        }
        acc
    }
}

/// Solve a dense symmetric system by Gaussian elimination with partial
/// pivoting; sizes here are at most 4x4.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut sum = b[row];
        for k in (row + 1)..n {
            sum -= a[row][k] * x[k];
        }
        x[row] = sum / a[row][row];
    }
    Some(x)
}

fn polyfit(ys: &[f64], ws: &[f64], degree: usize) -> Option<(Poly, f64)> {
    let n = ys.len();
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_mid = 0.5 * (y_min + y_max);
    let y_half = (0.5 * (y_max - y_min)).max(1e-9);
    let us: Vec<f64> = ys.iter().map(|&y| (y - y_mid) / y_half).collect();

    let m = degree + 1;
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for (&u, &w) in us.iter().zip(ws) {
        let mut pow = vec![1.0; m];
        for k in 1..m {
            pow[k] = pow[k - 1] * u;
        }
        for i in 0..m {
            for j in 0..m {
                ata[i][j] += pow[i] * pow[j];
            }
            atb[i] += pow[i] * w;
        }
    }
    let coeffs = solve_dense(ata, atb)?;
    let poly = Poly { coeffs, y_mid, y_half };

    let mean_w = ws.iter().sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&y, &w) in ys.iter().zip(ws) {
        let e = w - poly.eval(y);
        ss_res += e * e;
        ss_tot += (w - mean_w) * (w - mean_w);
    }
    // a perfectly explained constant target counts as a perfect fit
    let score = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some((poly, score))
}

/// Evaluation grid along a segment: y_min, y_min+step, ..., plus the exact
/// y_max endpoint (last interval may be partial).
fn segment_grid(y_min: f64, y_max: f64, step: f64) -> Vec<f64> {
    let mut out = vec![y_min];
    let mut y = y_min + step;
    let tiny = 1e-9 * step;
    while y < y_max - tiny {
        out.push(y);
        y += step;
    }
    out.push(y_max);
    out
}

/// Interpolate yield per tray fragment (contiguous stretch of one tray
/// within one row): adaptive polynomial fit on (y, w), first differences
/// of the fitted curve over the sampling grid, each increment emitted at
/// its interval midpoint.
pub fn interpolate_yield(
    points: &[TrackPoint],
    cfg: &PipelineConfig,
) -> (Vec<YieldPoint>, Vec<SegmentFit>) {
    // group by (tray, fragment, quantized row)
    let mut groups: BTreeMap<(usize, usize, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if let (Some(tray), Some(r)) = (p.tray, p.current_row()) {
            groups
                .entry((tray, p.cluster.unwrap_or(usize::MAX), (r * 1e6).round() as i64))
                .or_default()
                .push(i);
        }
    }

    let mut out = Vec::new();
    let mut fits = Vec::new();
    for ((tray, _, _), idxs) in groups {
        let mut idxs = idxs;
        idxs.sort_by(|&a, &b| points[a].t.partial_cmp(&points[b].t).unwrap());
        let row = points[idxs[0]].current_row().unwrap();
        let ys: Vec<f64> = idxs.iter().map(|&i| points[i].y).collect();
        let ws: Vec<f64> = idxs.iter().map(|&i| points[i].mass).collect();
        let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let mut distinct: Vec<f64> = ys.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        if distinct.len() < 2 {
            // degenerate segment: deposit the net mass at the single location
            let net = (ws.last().unwrap() - ws[0]).abs();
            out.push(YieldPoint {
                x_row: row,
                y: y_min,
                mass_ug: kg_to_micrograms(net),
                tray,
                low_confidence: true,
            });
            fits.push(SegmentFit {
                tray,
                x_row: row,
                degree: 0,
                score: 0.0,
                low_confidence: true,
                monotone: true,
                n_points: idxs.len(),
            });
            continue;
        }

        // lowest degree reaching the score, else the best of 1..3
        let max_degree = 3.min(distinct.len() - 1);
        let mut best: Option<(usize, Poly, f64)> = None;
        let mut chosen: Option<(usize, Poly, f64)> = None;
        for degree in 1..=max_degree {
            let Some((poly, score)) = polyfit(&ys, &ws, degree) else {
                continue;
            };
            if best.as_ref().map_or(true, |b| score > b.2) {
                best = Some((degree, Poly { coeffs: poly.coeffs.clone(), ..poly }, score));
            }
            if score >= cfg.score_max {
                chosen = Some((degree, poly, score));
                break;
            }
        }
        let low_confidence = chosen.is_none();
        let Some((degree, poly, score)) = chosen.or(best) else {
            continue;
        };

        let grid = segment_grid(y_min, y_max, cfg.interval);
        // clamp predictions to the observed mass range: position noise
        // widens [y_min, y_max] beyond the ground the tray truly covered,
        // and an unclamped fit extrapolates mass the tray never held
        let w_lo = ws.iter().cloned().fold(f64::INFINITY, f64::min);
        let w_hi = ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pred: Vec<f64> = grid.iter().map(|&y| poly.eval(y).clamp(w_lo, w_hi)).collect();
        let rising = pred.windows(2).all(|w| w[1] >= w[0]);
        let falling = pred.windows(2).all(|w| w[1] <= w[0]);
        let monotone = rising || falling;
        let flag = low_confidence || !monotone;
        for (k, w) in pred.windows(2).enumerate() {
            out.push(YieldPoint {
                x_row: row,
                y: 0.5 * (grid[k] + grid[k + 1]),
                mass_ug: kg_to_micrograms((w[1] - w[0]).abs()),
                tray,
                low_confidence: flag,
            });
        }
        fits.push(SegmentFit {
            tray,
            x_row: row,
            degree,
            score,
            low_confidence,
            monotone,
            n_points: idxs.len(),
        });
    }
    (out, fits)
}

// ---- Step 6.2: gridding ---------------------------------------------

/// Per-cell accumulated yield over a grid, in integer micrograms.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldGrid {
    pub spec: GridSpec,
    /// Row-major: cell (ix, iy) at `ix * spec.y_mid.len() + iy`.
    pub cells_ug: Vec<i64>,
    /// Harvest day labels contributing to this grid.
    pub days: Vec<String>,
}

impl YieldGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.n_cells();
        Self {
            spec,
            cells_ug: vec![0; n],
            days: Vec::new(),
        }
    }

    pub fn cell_ug(&self, ix: usize, iy: usize) -> i64 {
        self.cells_ug[ix * self.spec.y_mid.len() + iy]
    }

    pub fn total_ug(&self) -> i64 {
        self.cells_ug.iter().sum()
    }

    pub fn total_kg(&self) -> f64 {
        micrograms_to_kg(self.total_ug())
    }
}

/// Index of the midpoint nearest to `v`; equidistant ties go to the lower
/// index.
fn nearest_mid(mids: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = (v - mids[0]).abs();
    for (i, &m) in mids.iter().enumerate().skip(1) {
        let d = (v - m).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Assign every yield point to the cell whose midpoints are nearest in x
/// and y, summing increments per cell.
pub fn grid_yield(points: &[YieldPoint], spec: &GridSpec, day: impl Into<String>) -> YieldGrid {
    let mut grid = YieldGrid::empty(spec.clone());
    grid.days.push(day.into());
    let ny = spec.y_mid.len();
    for p in points {
        let ix = nearest_mid(&spec.x_mid, p.x_row);
        let iy = nearest_mid(&spec.y_mid, p.y);
        grid.cells_ug[ix * ny + iy] += p.mass_ug;
    }
    grid
}

/// Cellwise sum of daily grids sharing one spec.
pub fn accumulate_season(daily: &[YieldGrid]) -> Result<YieldGrid, YieldError> {
    let Some(first) = daily.first() else {
        return Err(YieldError::GridMismatch);
    };
    let mut out = YieldGrid::empty(first.spec.clone());
    for g in daily {
        if g.spec != first.spec {
            return Err(YieldError::GridMismatch);
        }
        for (acc, &v) in out.cells_ug.iter_mut().zip(&g.cells_ug) {
            *acc += v;
        }
        out.days.extend(g.days.iter().cloned());
    }
    out.days.sort();
    Ok(out)
}

// ---- classification -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellCategory {
    VeryLow,
    BelowAverage,
    AboveAverage,
    VeryHigh,
}

impl CellCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellCategory::VeryLow => "very-low",
            CellCategory::BelowAverage => "below-avg",
            CellCategory::AboveAverage => "above-avg",
            CellCategory::VeryHigh => "very-high",
        }
    }
}

/// Per-cell classification plus the summary statistics behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellClassification {
    /// One entry per cell; `None` for zero-yield cells.
    pub categories: Vec<Option<CellCategory>>,
    /// Mean over nonzero cells (kg).
    pub mean_kg: f64,
    /// Population standard deviation over nonzero cells (kg).
    pub sigma_kg: f64,
    /// Zero-yield cells / total cells.
    pub zero_yield_fraction: f64,
}

/// Four-band classification over nonzero cells by mean +- one standard
/// deviation: very-low (-inf, mu-sigma], below-avg (mu-sigma, mu],
/// above-avg (mu, mu+sigma], very-high (mu+sigma, inf). In the sigma = 0
/// degenerate case every nonzero cell sits exactly at the mean and lands
/// in the above-average band by convention.
pub fn classify_cells(grid: &YieldGrid) -> CellClassification {
    let n = grid.cells_ug.len();
    let nonzero: Vec<f64> = grid
        .cells_ug
        .iter()
        .filter(|&&v| v != 0)
        .map(|&v| micrograms_to_kg(v))
        .collect();
    let zero_yield_fraction = if n == 0 {
        0.0
    } else {
        (n - nonzero.len()) as f64 / n as f64
    };
    let (mean, sigma) = if nonzero.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
        let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / nonzero.len() as f64;
        (mean, var.sqrt())
    };
    let categories = grid
        .cells_ug
        .iter()
        .map(|&ug| {
            if ug == 0 {
                return None;
            }
            let v = micrograms_to_kg(ug);
            Some(if sigma == 0.0 {
                CellCategory::AboveAverage
            } else if v <= mean - sigma {
                CellCategory::VeryLow
            } else if v <= mean {
                CellCategory::BelowAverage
            } else if v <= mean + sigma {
                CellCategory::AboveAverage
            } else {
                CellCategory::VeryHigh
            })
        })
        .collect();
    CellClassification {
        categories,
        mean_kg: mean,
        sigma_kg: sigma,
        zero_yield_fraction,
    }
}

// ---- exports ---------------------------------------------------------

/// Yield-map table: one line per cell with midpoint coordinates, mass,
/// and category (`zero` for empty cells).
pub fn serialize_yield_map(grid: &YieldGrid) -> String {
    let cls = classify_cells(grid);
    let mut out = String::from("x_mid,y_mid,mass_kg,category\n");
    let ny = grid.spec.y_mid.len();
    for (ix, &xm) in grid.spec.x_mid.iter().enumerate() {
        for (iy, &ym) in grid.spec.y_mid.iter().enumerate() {
            let idx = ix * ny + iy;
            let cat = cls.categories[idx].map_or("zero", |c| c.as_str());
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(xm),
                fmt_f64(ym),
                fmt_f64(micrograms_to_kg(grid.cells_ug[idx])),
                cat
            ));
        }
    }
    out
}

/// Audit export of interpolated yield points.
pub fn serialize_yield_points(points: &[YieldPoint]) -> String {
    let mut out = String::from("x_row,y,mass_kg,mass_ug,tray,low_confidence\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(p.x_row),
            fmt_f64(p.y),
            fmt_f64(p.mass_kg()),
            p.mass_ug,
            p.tray,
            u8::from(p.low_confidence)
        ));
    }
    out
}

/// Parse the audit export back into yield points (used by the season
/// subcommand's additivity checks).
pub fn parse_yield_points(text: &str) -> Result<Vec<YieldPoint>, KvError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |v: &str| KvError::BadValue {
            key: format!("yield point line {}", i + 1),
            value: v.to_string(),
            ty: "number",
        };
        if cols.len() != 6 {
            return Err(bad(line));
        }
        out.push(YieldPoint {
            x_row: cols[0].parse().map_err(|_| bad(cols[0]))?,
            y: cols[1].parse().map_err(|_| bad(cols[1]))?,
            mass_ug: cols[3].parse().map_err(|_| bad(cols[3]))?,
            tray: cols[4].parse().map_err(|_| bad(cols[4]))?,
            low_confidence: cols[5].trim() == "1",
        });
    }
    Ok(out)
}

impl YieldGrid {
    /// Exact (integer-cell) grid file, used to carry daily grids into the
    /// season accumulation without any precision loss.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("resolution", fmt_f64(self.spec.resolution));
        let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        doc.set("x_edges", join(&self.spec.x_edges));
        doc.set("y_edges", join(&self.spec.y_edges));
        doc.set("days", self.days.join(";"));
        let cells: Vec<String> = self
            .cells_ug
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, &v)| format!("{i} {v}"))
            .collect();
        doc.set("cells_ug", cells.join(";"));
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        let x_edges = doc.require_f64_list("x_edges")?;
        let y_edges = doc.require_f64_list("y_edges")?;
        let spec = GridSpec {
            resolution: doc.require_f64("resolution")?,
            x_mid: x_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
            y_mid: y_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
            x_edges,
            y_edges,
        };
        let mut grid = YieldGrid::empty(spec);
        let days = doc.require("days")?;
        grid.days = days
            .split(';')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let cells = doc.require("cells_ug")?;
        for part in cells.split(';').filter(|s| !s.trim().is_empty()) {
            let mut it = part.split_whitespace();
            let bad = || KvError::BadValue {
                key: "cells_ug".into(),
                value: part.to_string(),
                ty: "index/mass pair",
            };
            let idx: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let v: i64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if idx >= grid.cells_ug.len() {
                return Err(bad());
            }
            grid.cells_ug[idx] = v;
        }
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_kv().render())
    }

    pub fn load(path: &Path) -> Result<Self, YieldError> {
        let text = fs::read_to_string(path).map_err(|source| YieldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc = KvDoc::parse(&text).map_err(|source| YieldError::FileFormat {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv(&doc).map_err(|source| YieldError::FileFormat {
            path: path.display().to_string(),
            source,
        })
    }
}
