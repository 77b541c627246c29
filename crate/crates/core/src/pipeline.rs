//! End-to-end day orchestration: activity filtering, row assignment and
//! correction, mass processing, tray separation, yield interpolation,
//! and gridding, with every intermediate stage retained for audit.
//!
//! Steps 1-3 and 5-6 are per-cart; Step 4 (row occupancy) is the merge
//! barrier where all carts' corrected tracks meet.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::activity::{filter_activity, filter_boundary, ActivityClassifier, BaselineClassifier};
use crate::config::PipelineConfig;
use crate::field::FieldModel;
use crate::ingest::{CartTrack, TrackPoint};
use crate::rows::{
    assign_rows, resolve_occupancy, resolve_row_completion, serialize_day_table, OccupancyConflict,
};
use crate::yield_map::{
    grid_yield, interpolate_yield, process_mass, separate_trays, serialize_yield_map,
    serialize_yield_points, SegmentFit, YieldError, YieldGrid, YieldPoint,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// A module error, tagged with the pipeline stage that raised it.
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn stage(stage: &'static str, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: err.to_string(),
    }
}

/// A cart dropped mid-pipeline, with the stage and reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCart {
    pub cart_id: String,
    pub stage: &'static str,
    pub reason: String,
}

/// Everything one day run produces, intermediate stages included.
#[derive(Debug, Clone)]
pub struct DayOutput {
    pub label: String,
    /// Post-Step-1: activity- and boundary-filtered tracks.
    pub activity_tracks: Vec<CartTrack>,
    /// Post-Steps-2-4: the merged day table with corrected rows.
    pub day_table: Vec<CartTrack>,
    /// Occupancy conflicts left standing (no available row).
    pub unresolved: Vec<OccupancyConflict>,
    /// Post-Step-5 cleaned mass series per cart.
    pub mass_points: BTreeMap<String, Vec<TrackPoint>>,
    /// Interpolated yield points per cart.
    pub yield_points: BTreeMap<String, Vec<YieldPoint>>,
    pub fits: BTreeMap<String, Vec<SegmentFit>>,
    pub skipped: Vec<SkippedCart>,
    pub grid: YieldGrid,
}

impl DayOutput {
    /// All yield points of the day, cart order (deterministic).
    pub fn all_yield_points(&self) -> Vec<YieldPoint> {
        self.yield_points.values().flatten().copied().collect()
    }

    pub fn total_yield_kg(&self, cart_id: &str) -> f64 {
        self.yield_points
            .get(cart_id)
            .map(|pts| pts.iter().map(|p| p.mass_ug).sum::<i64>())
            .unwrap_or(0) as f64
            / 1e9
    }
}

/// Run Steps 1-6 on one day of ingested tracks.
pub fn run_day(
    label: impl Into<String>,
    tracks: &[CartTrack],
    field: &FieldModel,
    cfg: &PipelineConfig,
) -> Result<DayOutput, PipelineError> {
    let classifier = BaselineClassifier::from_config(cfg);
    run_day_with(label, tracks, field, cfg, &classifier)
}

/// As [`run_day`], with a caller-supplied activity classifier.
pub fn run_day_with(
    label: impl Into<String>,
    tracks: &[CartTrack],
    field: &FieldModel,
    cfg: &PipelineConfig,
    classifier: &dyn ActivityClassifier,
) -> Result<DayOutput, PipelineError> {
    let label = label.into();

    // Step 1: activity + boundary filter, per cart
    let activity_tracks: Vec<CartTrack> = tracks
        .iter()
        .map(|tr| filter_boundary(&filter_activity(tr, classifier, cfg.window_len), field))
        .collect();

    // Steps 2-3 per cart, then the Step-4 barrier across carts
    let mut day_table: Vec<CartTrack> = activity_tracks.clone();
    for tr in day_table.iter_mut() {
        assign_rows(tr, field, cfg);
        resolve_row_completion(tr, field, cfg);
    }
    let unresolved = resolve_occupancy(&mut day_table, field, cfg);

    // Steps 5-6 per cart
    let mut skipped = Vec::new();
    let mut mass_points = BTreeMap::new();
    let mut yield_points = BTreeMap::new();
    let mut fits = BTreeMap::new();
    for tr in &day_table {
        if tr.points.is_empty() {
            continue;
        }
        let cleaned = match process_mass(&tr.points, cfg) {
            Ok(c) => c,
            Err(YieldError::AllFiltered) => {
                skipped.push(SkippedCart {
                    cart_id: tr.cart_id.clone(),
                    stage: "mass",
                    reason: "no samples survived the mass filters".into(),
                });
                continue;
            }
            Err(e) => return Err(stage("mass", e)),
        };
        let with_trays = separate_trays(&cleaned, cfg);
        let (points, cart_fits) = interpolate_yield(&with_trays, cfg);
        mass_points.insert(tr.cart_id.clone(), cleaned);
        yield_points.insert(tr.cart_id.clone(), points);
        fits.insert(tr.cart_id.clone(), cart_fits);
    }

    // gridding
    let spec = field
        .make_grid(cfg.grid_resolution)
        .map_err(|e| stage("grid", e))?;
    let all: Vec<YieldPoint> = yield_points.values().flatten().copied().collect();
    let grid = grid_yield(&all, &spec, label.clone());

    Ok(DayOutput {
        label,
        activity_tracks,
        day_table,
        unresolved,
        mass_points,
        yield_points,
        fits,
        skipped,
        grid,
    })
}

/// Write every stage of a day run under `dir` (created if needed):
/// post-Step-1 tracks, the post-Step-3/4 day table, post-Step-5 mass
/// series, per-cart yield points, the day grid, and skip/conflict
/// reports.
pub fn write_day_artifacts(dir: &Path, out: &DayOutput) -> Result<(), PipelineError> {
    let io = |path: &Path, source: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let write = |name: String, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io(&path, e))
    };

    write(
        "step1_activity_tracks.csv".into(),
        serialize_day_table(&out.activity_tracks),
    )?;
    write("step3_day_table.csv".into(), serialize_day_table(&out.day_table))?;
    let mass_tracks: Vec<CartTrack> = out
        .mass_points
        .iter()
        .map(|(id, pts)| {
            let mut tr = CartTrack::new(id.clone());
            tr.points = pts.clone();
            tr
        })
        .collect();
    write("step5_mass_points.csv".into(), serialize_day_table(&mass_tracks))?;
    for (id, pts) in &out.yield_points {
        write(format!("yield_points_{id}.csv"), serialize_yield_points(pts))?;
    }
    out.grid
        .save(&dir.join("day_grid.txt"))
        .map_err(|e| stage("grid", e))?;
    write("day_yield_map.csv".into(), serialize_yield_map(&out.grid))?;

    let mut report = String::from("kind,cart_id,detail\n");
    for s in &out.skipped {
        report.push_str(&format!("skipped,{},{}: {}\n", s.cart_id, s.stage, s.reason));
    }
    for c in &out.unresolved {
        report.push_str(&format!(
            "unresolved_conflict,{}+{},row {} overlap {:.2}\n",
            c.cart_k, c.cart_l, c.row, c.overlap
        ));
    }
    write("report.csv".into(), report)?;
    Ok(())
}
