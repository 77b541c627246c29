//! Harvest-day simulator: picker state machines filling trays along
//! rows, sampled at 10 Hz into the raw log format, with configurable
//! GPS/mass noise, SBAS dropouts, and deliberate protocol violations.
//! Emits complete ground truth, making it the verification oracle for
//! the rest of the pipeline.
//!
//! Protocol per picker and row: walk to the row center, harvest toward
//! the headland, deliver full trays at the headland station and resume
//! at the same spot, then cover the far half of the row (again moving
//! toward the headland), carrying partially filled trays across row
//! switches. Pickers are assigned every second row, interleaved across
//! the crew, so each picker's rows are non-adjacent and the rows between
//! them stay empty.
//!
//! Legal state graph (tested):
//! `CrossRow -> Settle -> Picking -> {FullPause, CrossRow}`,
//! `FullPause -> TranspFullTray -> Service -> {ReturnToRow, end}`,
//! `ReturnToRow -> Settle`. Days start in `CrossRow` (walk in from the
//! station).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::field::{FieldModel, GeoPoint, Polygon, TangentPlane};
use crate::ingest::{serialize_raw_log, Calibration, RawRecord};
use crate::kv::{fmt_f64, KvDoc, KvError};
use crate::metrics::GtSegment;

/// One foot, the yield sampling interval (m).
pub const FOOT_M: f64 = 0.3048;

/// CEP of a circular Gaussian = 1.1774 sigma (radius containing half
/// the probability mass), so sigma = CEP / 1.1774.
pub const CEP_TO_SIGMA: f64 = 1.0 / 1.1774;

const UG_PER_KG: f64 = 1e9;
const WEEK_S: f64 = 604_800.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible simulation config: {0}")]
    InfeasibleConfig(String),
    #[error("truth file: {0}")]
    TruthFormat(String),
    #[error("config file: {0}")]
    ConfigFormat(#[from] KvError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Simulation parameters. Everything round-trips through a key-value
/// text document; see [`SimConfig::to_kv`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    // field geometry
    pub n_rows: usize,
    pub row_spacing: f64,
    pub row_length: f64,
    /// x of row 0's center (m).
    pub row_x0: f64,
    /// y of the headland collection station (m, below the beds).
    pub station_y: f64,

    // crew and row assignment
    pub crew: usize,
    /// Rows harvested per picker (every second row, crew-interleaved).
    pub rows_per_picker: usize,

    // yield density rho(x, y) in kg per meter of row
    pub base_density: f64,
    /// Relative amplitude of the smooth along-row density wave, [0, 1).
    pub density_variation: f64,
    /// Depth of the low-yield dead zone, [0, 1]; 0 disables it.
    pub dead_zone_depth: f64,
    /// Dead zone center, in row-index units.
    pub dead_zone_row: f64,
    /// Dead zone center along the row, as a fraction of row length.
    pub dead_zone_y_frac: f64,

    // picker kinematics
    pub pick_speed_min: f64,
    pub pick_speed_max: f64,
    pub walk_speed: f64,

    // trays and deposits
    /// Gross mass of a full tray (kg): empty tray + target net fruit.
    pub tray_capacity: f64,
    pub tray_empty: f64,
    pub deposit_min: f64,
    pub deposit_max: f64,
    /// Fraction of the clamshell refill interval spent pouring it onto
    /// the tray while walking (< 1 keeps short load-cell plateaus).
    pub deposit_pour_frac: f64,

    // fixed phase durations
    pub settle_s: f64,
    pub full_pause_s: f64,
    pub service_s: f64,
    /// Extra pause when switching rows (keeps row clusters separable).
    pub cross_row_pause_s: f64,

    // sensor noise
    /// GPS circular error probable (m); 0 = noiseless.
    pub gps_cep: f64,
    /// Per-sqrt-second sigma of the slowly varying GPS bias walk (m).
    pub gps_bias_sigma: f64,
    /// Load-cell white noise sigma (kg).
    pub mass_noise: f64,
    pub dropout_per_hour: f64,
    pub dropout_min_s: f64,
    pub dropout_max_s: f64,

    // deliberate protocol violations
    /// Row-completion violations injected per picker per day.
    pub deviation_episodes: usize,
    pub deviation_len_min: f64,
    pub deviation_len_max: f64,
    /// Persistent-bias episodes (row-occupancy violations) per picker.
    pub bias_episodes: usize,
    pub bias_len_min: f64,
    pub bias_len_max: f64,
    /// Record blackout flanking each injected episode (s).
    pub guard_gap_s: f64,

    // day structure
    /// Full trays delivered before a picker stops; 0 = harvest all rows.
    pub stop_after_trays: usize,
    /// Spread of per-picker tray quotas: picker p stops after
    /// `stop_after_trays + p % (tray_spread + 1)` trays.
    pub tray_spread: usize,
    pub start_epoch: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_rows: 20,
            row_spacing: 1.63,
            row_length: 80.0,
            row_x0: 1.0,
            station_y: -6.0,
            crew: 2,
            rows_per_picker: 2,
            base_density: 0.55,
            density_variation: 0.25,
            dead_zone_depth: 0.0,
            dead_zone_row: 10.0,
            dead_zone_y_frac: 0.5,
            // slow enough that one tray takes a few minutes: the tray
            // separation step distinguishes trays by scaled time, so the
            // tops of consecutive mass staircases in one row must sit
            // well apart in time
            pick_speed_min: 0.04,
            pick_speed_max: 0.07,
            walk_speed: 1.2,
            tray_capacity: 4.8,
            tray_empty: 0.55,
            deposit_min: 0.22,
            deposit_max: 0.38,
            deposit_pour_frac: 0.9,
            settle_s: 12.0,
            full_pause_s: 22.0,
            service_s: 30.0,
            cross_row_pause_s: 120.0,
            gps_cep: 0.75,
            gps_bias_sigma: 0.0,
            mass_noise: 0.004,
            dropout_per_hour: 2.0,
            dropout_min_s: 5.0,
            dropout_max_s: 25.0,
            deviation_episodes: 0,
            deviation_len_min: 120.0,
            deviation_len_max: 240.0,
            bias_episodes: 0,
            bias_len_min: 150.0,
            bias_len_max: 300.0,
            guard_gap_s: 130.0,
            stop_after_trays: 4,
            tray_spread: 0,
            start_epoch: 1.7e9,
            origin_lat: 36.62,
            origin_lon: -121.54,
        }
    }
}

enum SimFieldKind {
    F64(fn(&SimConfig) -> f64, fn(&mut SimConfig, f64)),
    Usize(fn(&SimConfig) -> usize, fn(&mut SimConfig, usize)),
}

fn sim_field_table() -> Vec<(&'static str, SimFieldKind)> {
    use SimFieldKind::*;
    vec![
        ("n_rows", Usize(|c| c.n_rows, |c, v| c.n_rows = v)),
        ("row_spacing", F64(|c| c.row_spacing, |c, v| c.row_spacing = v)),
        ("row_length", F64(|c| c.row_length, |c, v| c.row_length = v)),
        ("row_x0", F64(|c| c.row_x0, |c, v| c.row_x0 = v)),
        ("station_y", F64(|c| c.station_y, |c, v| c.station_y = v)),
        ("crew", Usize(|c| c.crew, |c, v| c.crew = v)),
        ("rows_per_picker", Usize(|c| c.rows_per_picker, |c, v| c.rows_per_picker = v)),
        ("base_density", F64(|c| c.base_density, |c, v| c.base_density = v)),
        ("density_variation", F64(|c| c.density_variation, |c, v| c.density_variation = v)),
        ("dead_zone_depth", F64(|c| c.dead_zone_depth, |c, v| c.dead_zone_depth = v)),
        ("dead_zone_row", F64(|c| c.dead_zone_row, |c, v| c.dead_zone_row = v)),
        ("dead_zone_y_frac", F64(|c| c.dead_zone_y_frac, |c, v| c.dead_zone_y_frac = v)),
        ("pick_speed_min", F64(|c| c.pick_speed_min, |c, v| c.pick_speed_min = v)),
        ("pick_speed_max", F64(|c| c.pick_speed_max, |c, v| c.pick_speed_max = v)),
        ("walk_speed", F64(|c| c.walk_speed, |c, v| c.walk_speed = v)),
        ("tray_capacity", F64(|c| c.tray_capacity, |c, v| c.tray_capacity = v)),
        ("tray_empty", F64(|c| c.tray_empty, |c, v| c.tray_empty = v)),
        ("deposit_min", F64(|c| c.deposit_min, |c, v| c.deposit_min = v)),
        ("deposit_max", F64(|c| c.deposit_max, |c, v| c.deposit_max = v)),
        ("deposit_pour_frac", F64(|c| c.deposit_pour_frac, |c, v| c.deposit_pour_frac = v)),
        ("settle_s", F64(|c| c.settle_s, |c, v| c.settle_s = v)),
        ("full_pause_s", F64(|c| c.full_pause_s, |c, v| c.full_pause_s = v)),
        ("service_s", F64(|c| c.service_s, |c, v| c.service_s = v)),
        ("cross_row_pause_s", F64(|c| c.cross_row_pause_s, |c, v| c.cross_row_pause_s = v)),
        ("gps_cep", F64(|c| c.gps_cep, |c, v| c.gps_cep = v)),
        ("gps_bias_sigma", F64(|c| c.gps_bias_sigma, |c, v| c.gps_bias_sigma = v)),
        ("mass_noise", F64(|c| c.mass_noise, |c, v| c.mass_noise = v)),
        ("dropout_per_hour", F64(|c| c.dropout_per_hour, |c, v| c.dropout_per_hour = v)),
        ("dropout_min_s", F64(|c| c.dropout_min_s, |c, v| c.dropout_min_s = v)),
        ("dropout_max_s", F64(|c| c.dropout_max_s, |c, v| c.dropout_max_s = v)),
        ("deviation_episodes", Usize(|c| c.deviation_episodes, |c, v| c.deviation_episodes = v)),
        ("deviation_len_min", F64(|c| c.deviation_len_min, |c, v| c.deviation_len_min = v)),
        ("deviation_len_max", F64(|c| c.deviation_len_max, |c, v| c.deviation_len_max = v)),
        ("bias_episodes", Usize(|c| c.bias_episodes, |c, v| c.bias_episodes = v)),
        ("bias_len_min", F64(|c| c.bias_len_min, |c, v| c.bias_len_min = v)),
        ("bias_len_max", F64(|c| c.bias_len_max, |c, v| c.bias_len_max = v)),
        ("guard_gap_s", F64(|c| c.guard_gap_s, |c, v| c.guard_gap_s = v)),
        ("stop_after_trays", Usize(|c| c.stop_after_trays, |c, v| c.stop_after_trays = v)),
        ("tray_spread", Usize(|c| c.tray_spread, |c, v| c.tray_spread = v)),
        ("start_epoch", F64(|c| c.start_epoch, |c, v| c.start_epoch = v)),
        ("origin_lat", F64(|c| c.origin_lat, |c, v| c.origin_lat = v)),
        ("origin_lon", F64(|c| c.origin_lon, |c, v| c.origin_lon = v)),
    ]
}

impl SimConfig {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        for (key, kind) in sim_field_table() {
            match kind {
                SimFieldKind::F64(get, _) => doc.set(key, fmt_f64(get(self))),
                SimFieldKind::Usize(get, _) => doc.set(key, get(self)),
            }
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, SimError> {
        let mut cfg = Self::default();
        cfg.apply_kv(doc)?;
        Ok(cfg)
    }

    /// Overlay the document's keys onto this config; unknown keys are
    /// rejected.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<(), SimError> {
        let table = sim_field_table();
        for (key, _) in doc.iter() {
            if !table.iter().any(|(k, _)| *k == key) {
                return Err(SimError::InfeasibleConfig(format!("unknown key {key:?}")));
            }
        }
        for (key, kind) in &table {
            match kind {
                SimFieldKind::F64(_, set) => {
                    if let Some(v) = doc.get_f64(key)? {
                        set(self, v);
                    }
                }
                SimFieldKind::Usize(_, set) => {
                    if let Some(v) = doc.get_usize(key)? {
                        set(self, v);
                    }
                }
            }
        }
        self.validate()
    }

    /// Apply one `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<(), SimError> {
        self.apply_kv(&KvDoc::parse(assignment)?)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_kv().render())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv(&KvDoc::parse(&text)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: &str| Err(SimError::InfeasibleConfig(msg.to_string()));
        if self.n_rows == 0 || self.crew == 0 || self.rows_per_picker == 0 {
            return fail("n_rows, crew, rows_per_picker must be positive");
        }
        if self.highest_assigned_row() >= self.n_rows {
            return fail("field too small for crew * rows_per_picker at stride 2");
        }
        if self.row_spacing <= 0.0 || self.row_length <= 0.0 {
            return fail("row geometry must be positive");
        }
        if self.tray_capacity <= self.tray_empty {
            return fail("tray capacity must exceed empty tray mass");
        }
        if self.deposit_min <= 0.0 || self.deposit_min > self.deposit_max {
            return fail("deposit range must be positive and ordered");
        }
        if self.deposit_max >= self.tray_capacity - self.tray_empty {
            return fail("single deposit must not fill a whole tray");
        }
        if !(0.0..1.0).contains(&self.deposit_pour_frac) || self.deposit_pour_frac == 0.0 {
            return fail("deposit_pour_frac must lie in (0, 1)");
        }
        if self.pick_speed_min <= 0.0
            || self.pick_speed_min > self.pick_speed_max
            || self.walk_speed <= 0.0
        {
            return fail("speeds must be positive and ordered");
        }
        if self.base_density <= 0.0 {
            return fail("base density must be positive");
        }
        if !(0.0..1.0).contains(&self.density_variation) {
            return fail("density_variation must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.dead_zone_depth) {
            return fail("dead_zone_depth must lie in [0, 1]");
        }
        if self.gps_cep < 0.0 || self.mass_noise < 0.0 || self.gps_bias_sigma < 0.0 {
            return fail("noise magnitudes must be non-negative");
        }
        if self.station_y >= 0.0 {
            return fail("station must sit on the headland below the beds");
        }
        if self.dropout_min_s > self.dropout_max_s || self.dropout_per_hour < 0.0 {
            return fail("dropout model must be non-negative and ordered");
        }
        Ok(())
    }

    /// Target net fruit mass per full tray (kg).
    pub fn tray_net(&self) -> f64 {
        self.tray_capacity - self.tray_empty
    }

    /// x-coordinate of row `j`'s center.
    pub fn row_x(&self, j: usize) -> f64 {
        self.row_x0 + j as f64 * self.row_spacing
    }

    /// Rows harvested by picker `p`: indices `2 * (p + crew * k)`.
    /// Stride 2 keeps every picker's rows non-adjacent and leaves the
    /// odd rows empty.
    pub fn rows_of_picker(&self, p: usize) -> Vec<usize> {
        (0..self.rows_per_picker).map(|k| 2 * (p + self.crew * k)).collect()
    }

    fn highest_assigned_row(&self) -> usize {
        2 * ((self.crew - 1) + self.crew * (self.rows_per_picker - 1))
    }

    /// Full trays picker `p` delivers before stopping.
    fn tray_quota(&self, p: usize) -> usize {
        if self.stop_after_trays == 0 {
            usize::MAX
        } else {
            self.stop_after_trays + p % (self.tray_spread + 1)
        }
    }

    /// Yield density (kg per meter of row) at position `y` of row `j`.
    /// Deterministic in (j, y): a smooth along-row wave, a per-row scale,
    /// and an optional Gaussian dead zone, floored at 2% of base.
    pub fn density(&self, row: usize, y: f64) -> f64 {
        let frac = (y / self.row_length).clamp(0.0, 1.0);
        // deterministic per-row scale in [0.75, 1.25)
        let h = ((row as f64 + 1.0) * 12.9898).sin() * 43758.5453;
        let row_scale = 0.75 + 0.5 * (h - h.floor());
        let wave = 1.0
            + self.density_variation
                * (std::f64::consts::TAU * 1.5 * frac + row as f64 * 0.8).sin();
        let mut rho = self.base_density * row_scale * wave;
        if self.dead_zone_depth > 0.0 {
            let dr = (row as f64 - self.dead_zone_row) / 3.0;
            let dy = (y - self.dead_zone_y_frac * self.row_length) / (0.15 * self.row_length);
            rho *= 1.0 - self.dead_zone_depth * (-(dr * dr + dy * dy)).exp();
        }
        rho.max(0.02 * self.base_density)
    }
}

/// Build the surveyed field model matching a sim config: all row centers
/// (harvested or not), a rectangular boundary with 1 m margins, and five
/// control points for the GPS-to-local fit.
pub fn make_field(cfg: &SimConfig) -> FieldModel {
    let plane = sim_plane(cfg);
    let rows: Vec<f64> = (0..cfg.n_rows).map(|j| cfg.row_x(j)).collect();
    let x_lo = cfg.row_x0 - cfg.row_spacing.max(1.0);
    let x_hi = cfg.row_x(cfg.n_rows - 1) + cfg.row_spacing.max(1.0);
    let (y_lo, y_hi) = (-1.0, cfg.row_length + 1.0);
    let boundary = Polygon::new(vec![
        (x_lo, y_lo),
        (x_hi, y_lo),
        (x_hi, y_hi),
        (x_lo, y_hi),
    ])
    .expect("rectangular boundary is simple");
    let locals = [
        (x_lo, y_lo),
        (x_hi, y_lo),
        (x_hi, y_hi),
        (x_lo, y_hi),
        (0.5 * (x_lo + x_hi), 0.25 * y_lo + 0.75 * y_hi),
    ];
    let control: Vec<(GeoPoint, (f64, f64))> = locals
        .iter()
        .map(|&(x, y)| (plane.unproject(x, y), (x, y)))
        .collect();
    FieldModel::new(
        rows,
        cfg.row_spacing,
        boundary,
        (0.0, cfg.row_length),
        GeoPoint {
            lat: cfg.origin_lat,
            lon: cfg.origin_lon,
        },
        control,
    )
    .expect("sim field geometry is regular by construction")
}

/// Tangent plane the simulator writes coordinates through.
pub fn sim_plane(cfg: &SimConfig) -> TangentPlane {
    TangentPlane::new(GeoPoint {
        lat: cfg.origin_lat,
        lon: cfg.origin_lon,
    })
}

/// Load-cell calibration the simulated logs are written against.
pub fn sim_calibration() -> Calibration {
    Calibration {
        slope: 2.0,
        intercept: 0.25,
        r_squared: 1.0,
    }
}

/// Serialize raw records to the log byte format (inverse of parsing).
pub fn serialize_logs(records: &[RawRecord]) -> String {
    serialize_raw_log(records)
}

// ---- truth types -----------------------------------------------------

/// Picker state, mirrored per emitted sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimState {
    /// Quiet pause in the row before picking resumes.
    Settle,
    Picking,
    /// Quiet pause after the tray topped off, before transport.
    FullPause,
    TranspFullTray,
    /// Tray exchange at the headland station.
    Service,
    ReturnToRow,
    /// Walking between rows / row halves (or in from the station).
    CrossRow,
}

impl SimState {
    pub fn as_str(self) -> &'static str {
        match self {
            SimState::Settle => "settle",
            SimState::Picking => "picking",
            SimState::FullPause => "full_pause",
            SimState::TranspFullTray => "transp_full_tray",
            SimState::Service => "service",
            SimState::ReturnToRow => "return_to_row",
            SimState::CrossRow => "cross_row",
        }
    }

    pub fn is_picking(self) -> bool {
        self == SimState::Picking
    }

    /// Legal successor states (documented state graph).
    pub fn can_precede(self, next: SimState) -> bool {
        use SimState::*;
        matches!(
            (self, next),
            (Settle, Picking)
                | (Picking, FullPause)
                | (Picking, CrossRow)
                | (FullPause, TranspFullTray)
                | (TranspFullTray, Service)
                | (Service, ReturnToRow)
                | (ReturnToRow, Settle)
                | (CrossRow, Settle)
        )
    }
}

/// Truth annotation for one emitted record (same index as the record).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    /// Millisecond-quantized timestamp, matching the record's time.
    pub t_ms: i64,
    pub state: SimState,
    /// True row index while at a row; None during walks and service.
    pub row: Option<usize>,
}

/// Tray event marker kinds: empty tray placed on the cart, full tray
/// lifted off, partially filled tray lifted off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrayEventKind {
    PlaceEmpty,
    LiftFull,
    LiftPartial,
}

impl TrayEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrayEventKind::PlaceEmpty => "place_empty",
            TrayEventKind::LiftFull => "lift_full",
            TrayEventKind::LiftPartial => "lift_partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrayEvent {
    pub cart_id: String,
    pub tray: usize,
    pub kind: TrayEventKind,
    pub t: f64,
    /// Net fruit mass on the tray at the event (micrograms).
    pub net_ug: i64,
}

/// Ground-truth yield of one tray within one row.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSegment {
    pub cart_id: String,
    pub tray: usize,
    pub row: usize,
    /// Row center x (m).
    pub row_x: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub mass_ug: i64,
}

impl TruthSegment {
    pub fn to_gt(&self) -> GtSegment {
        GtSegment {
            cart_id: self.cart_id.clone(),
            tray: self.tray,
            row: self.row_x,
            y_min: self.y_min,
            y_max: self.y_max,
            mass_kg: self.mass_ug as f64 / UG_PER_KG,
        }
    }
}

/// Interval during which a picker occupied a row (direction is always
/// toward the headland, d = -1, unless an injector interfered).
#[derive(Debug, Clone, PartialEq)]
pub struct RowVisit {
    pub cart_id: String,
    pub row: usize,
    pub t0: f64,
    pub t1: f64,
    pub direction: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeKind {
    /// Row-completion violation: mid-pass shift into an adjacent row.
    Deviation,
    /// Row-occupancy violation: persistent bias into another cart's row.
    PersistentBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedEpisode {
    pub cart_id: String,
    pub kind: EpisodeKind,
    pub true_row: usize,
    pub wrong_row: usize,
    pub t0: f64,
    pub t1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CartCount {
    pub full_trays: usize,
    pub partial_trays: usize,
}

impl CartCount {
    pub fn total(&self) -> usize {
        self.full_trays + self.partial_trays
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTruth {
    pub segments: Vec<TruthSegment>,
    pub counts: BTreeMap<String, CartCount>,
    /// Deposited yield per (row index, foot index), micrograms.
    pub per_foot: BTreeMap<(usize, i64), i64>,
    pub events: Vec<TrayEvent>,
    pub visits: Vec<RowVisit>,
    pub episodes: Vec<InjectedEpisode>,
}

impl SimTruth {
    pub fn gt_segments(&self) -> Vec<GtSegment> {
        self.segments.iter().map(TruthSegment::to_gt).collect()
    }

    pub fn total_mass_ug(&self) -> i64 {
        self.segments.iter().map(|s| s.mass_ug).sum()
    }
}

/// One simulated cart-day: raw records plus per-record truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCart {
    pub cart_id: String,
    pub records: Vec<RawRecord>,
    /// Aligned 1:1 with `records`.
    pub states: Vec<TruthSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDay {
    pub label: String,
    pub carts: Vec<SimCart>,
    pub truth: SimTruth,
}

// ---- the simulation --------------------------------------------------

/// Nominal (noise-free) sample emitted by the picker state machine.
#[derive(Debug, Clone, Copy)]
struct Sample {
    tick: u64,
    state: SimState,
    row: Option<usize>,
    x: f64,
    y: f64,
    /// Load-cell reading (kg): tray + fruit, 0 while the tray is off.
    mass: f64,
}

struct PickerSim<'a> {
    cfg: &'a SimConfig,
    cart_id: String,
    t0: f64,
    tick: u64,
    samples: Vec<Sample>,
    x: f64,
    y: f64,
    row: Option<usize>,
    // tray state (all integer micrograms for exact closure)
    tray: usize,
    content_ug: i64,
    clamshell_ug: i64,
    deposit_target_ug: i64,
    // active pour, split into exact integer chunks
    pour_total_ug: i64,
    pour_n: i64,
    pour_done: i64,
    deposits: Vec<(usize, f64, i64)>,
    delivered: usize,
    quota: usize,
    done: bool,
    truth: SimTruth,
    // open row visit: (row, first picking t, last picking t)
    open_visit: Option<(usize, f64, f64)>,
}

impl<'a> PickerSim<'a> {
    fn t(&self, tick: u64) -> f64 {
        self.t0 + tick as f64 * 0.1
    }

    fn now(&self) -> f64 {
        self.t(self.tick)
    }

    fn mass_on_cart(&self) -> f64 {
        self.cfg.tray_empty + self.content_ug as f64 / UG_PER_KG
    }

    fn emit(&mut self, state: SimState, mass: f64) {
        self.samples.push(Sample {
            tick: self.tick,
            state,
            row: if matches!(state, SimState::Picking | SimState::Settle | SimState::FullPause) {
                self.row
            } else {
                None
            },
            x: self.x,
            y: self.y,
            mass,
        });
        self.tick += 1;
    }

    fn pause(&mut self, dur_s: f64, state: SimState, mass: f64) {
        let n = (dur_s * 10.0).round().max(1.0) as u64;
        for _ in 0..n {
            self.emit(state, mass);
        }
    }

    fn walk_to(&mut self, x1: f64, y1: f64, state: SimState, mass: f64) {
        let dist = ((x1 - self.x).powi(2) + (y1 - self.y).powi(2)).sqrt();
        let n = ((dist / (self.cfg.walk_speed * 0.1)).ceil().max(1.0)) as u64;
        let (x0, y0) = (self.x, self.y);
        for k in 1..=n {
            let f = k as f64 / n as f64;
            self.x = x0 + f * (x1 - x0);
            self.y = y0 + f * (y1 - y0);
            self.emit(state, mass);
        }
    }

    fn note_picking_time(&mut self) {
        let row = self.row.expect("picking requires a row");
        let t = self.now();
        match &mut self.open_visit {
            Some((r, _, t1)) if *r == row => *t1 = t,
            _ => {
                self.close_visit();
                self.open_visit = Some((row, t, t));
            }
        }
    }

    fn close_visit(&mut self) {
        if let Some((row, t0, t1)) = self.open_visit.take() {
            self.truth.visits.push(RowVisit {
                cart_id: self.cart_id.clone(),
                row,
                t0,
                t1,
                direction: -1,
            });
        }
    }

    fn push_event(&mut self, kind: TrayEventKind) {
        self.truth.events.push(TrayEvent {
            cart_id: self.cart_id.clone(),
            tray: self.tray,
            kind,
            t: self.now(),
            net_ug: self.content_ug,
        });
    }

    fn new_deposit_target(&mut self, rng: &mut ChaCha8Rng) {
        let kg = rng.gen_range(self.cfg.deposit_min..=self.cfg.deposit_max);
        self.deposit_target_ug = (kg * UG_PER_KG).round() as i64;
    }

    /// Book `amount` of poured fruit onto the tray truth at position `y`.
    fn attribute(&mut self, row: usize, y: f64, amount: i64) {
        if amount <= 0 {
            return;
        }
        let foot = (y / FOOT_M).floor() as i64;
        *self.truth.per_foot.entry((row, foot)).or_default() += amount;
        self.deposits.push((row, y, amount));
    }

    /// Advance an active pour by one tick's chunk, trimming exactly at
    /// the tray capacity; anything the tray cannot take returns to the
    /// clamshell.
    fn pour_tick(&mut self, row: usize, y: f64, cap_ug: i64) {
        if self.pour_done >= self.pour_n {
            return;
        }
        let chunk = self.pour_total_ug * (self.pour_done + 1) / self.pour_n
            - self.pour_total_ug * self.pour_done / self.pour_n;
        self.pour_done += 1;
        let add = chunk.min(cap_ug - self.content_ug);
        self.content_ug += add;
        self.attribute(row, y, add);
        if add < chunk {
            let unpoured = self.pour_total_ug - self.pour_total_ug * self.pour_done / self.pour_n;
            self.clamshell_ug += (chunk - add) + unpoured;
            self.pour_done = self.pour_n;
        }
    }

    /// Finish an active pour immediately (end of a leg), same trimming.
    fn flush_pour(&mut self, row: usize, cap_ug: i64) {
        if self.pour_done >= self.pour_n {
            return;
        }
        let rest = self.pour_total_ug - self.pour_total_ug * self.pour_done / self.pour_n;
        self.pour_done = self.pour_n;
        let add = rest.min(cap_ug - self.content_ug);
        self.content_ug += add;
        self.attribute(row, self.y, add);
        self.clamshell_ug += rest - add;
    }

    /// Close the current tray into truth segments and counts.
    fn close_tray(&mut self, full: bool) {
        let mut by_row: BTreeMap<usize, (f64, f64, i64)> = BTreeMap::new();
        for &(row, y, ug) in &self.deposits {
            let e = by_row.entry(row).or_insert((f64::INFINITY, f64::NEG_INFINITY, 0));
            e.0 = e.0.min(y);
            e.1 = e.1.max(y);
            e.2 += ug;
        }
        for (row, (y_min, y_max, mass_ug)) in by_row {
            self.truth.segments.push(TruthSegment {
                cart_id: self.cart_id.clone(),
                tray: self.tray,
                row,
                row_x: self.cfg.row_x(row),
                y_min,
                y_max,
                mass_ug,
            });
        }
        let c = self.truth.counts.entry(self.cart_id.clone()).or_default();
        if full {
            c.full_trays += 1;
        } else {
            c.partial_trays += 1;
        }
        self.deposits.clear();
    }

    /// Transport the tray to the station, exchange it, and (unless the
    /// day ends here) return to `(x, resume_y)` in the current row.
    fn deliver(&mut self, full: bool, resume: Option<(usize, f64)>) {
        self.pause(self.cfg.full_pause_s, SimState::FullPause, self.mass_on_cart());
        let row = self.row;
        self.row = None;
        let resume_x = self.x;
        self.walk_to(resume_x, self.cfg.station_y, SimState::TranspFullTray, self.mass_on_cart());
        self.push_event(if full {
            TrayEventKind::LiftFull
        } else {
            TrayEventKind::LiftPartial
        });
        self.close_tray(full);
        self.delivered += usize::from(full);
        self.pause(self.cfg.service_s, SimState::Service, 0.0);
        self.content_ug = 0;
        if (full && self.delivered >= self.quota) || resume.is_none() {
            self.done = true;
            return;
        }
        self.tray += 1;
        self.push_event(TrayEventKind::PlaceEmpty);
        let (_, resume_y) = resume.unwrap();
        self.walk_to(resume_x, resume_y, SimState::ReturnToRow, self.cfg.tray_empty);
        self.row = row;
        self.pause(self.cfg.settle_s, SimState::Settle, self.mass_on_cart());
    }

    /// Harvest one leg of a row, moving from `y_from` down to `y_to`
    /// (both legs run toward the headland). The picker pours each full
    /// clamshell onto the tray while walking, spread over most of the
    /// next clamshell's refill time, leaving short load-cell plateaus.
    fn pick_leg(&mut self, rng: &mut ChaCha8Rng, row: usize, speed: f64, y_from: f64, y_to: f64) {
        self.row = Some(row);
        self.x = self.cfg.row_x(row);
        self.y = y_from;
        let cap_ug = (self.cfg.tray_net() * UG_PER_KG).round() as i64;
        while self.y > y_to + 1e-9 && !self.done {
            let dy = (speed * 0.1).min(self.y - y_to);
            let y_mid = self.y - dy / 2.0;
            self.y -= dy;
            self.clamshell_ug += (self.cfg.density(row, y_mid) * dy * UG_PER_KG).round() as i64;
            if self.pour_done < self.pour_n {
                self.pour_tick(row, y_mid, cap_ug);
            } else if self.clamshell_ug >= self.deposit_target_ug {
                // start pouring everything picked so far, timed to end
                // just before the next clamshell fills
                let rate = (self.cfg.density(row, y_mid) * speed).max(1e-9);
                self.pour_total_ug = self.clamshell_ug;
                self.clamshell_ug = 0;
                self.new_deposit_target(rng);
                let refill_s = self.deposit_target_ug as f64 / UG_PER_KG / rate;
                self.pour_n = ((self.cfg.deposit_pour_frac * refill_s * 10.0).round() as i64).max(1);
                self.pour_done = 0;
                self.pour_tick(row, y_mid, cap_ug);
            }
            self.note_picking_time();
            self.emit(SimState::Picking, self.mass_on_cart());
            if self.content_ug == cap_ug {
                let resume_y = self.y;
                self.deliver(true, Some((row, resume_y)));
            }
        }
        if !self.done {
            self.flush_pour(row, cap_ug);
            if self.content_ug == cap_ug {
                let resume_y = self.y;
                self.deliver(true, Some((row, resume_y)));
            }
        }
    }

    fn run(&mut self, rng: &mut ChaCha8Rng, p: usize) {
        let speed = rng.gen_range(self.cfg.pick_speed_min..=self.cfg.pick_speed_max);
        self.new_deposit_target(rng);
        let rows = self.cfg.rows_of_picker(p);
        // day starts at the station by the first row
        self.x = self.cfg.row_x(rows[0]);
        self.y = self.cfg.station_y;
        self.push_event(TrayEventKind::PlaceEmpty);
        let half = self.cfg.row_length / 2.0;
        let full = self.cfg.row_length;
        for (i, &row) in rows.iter().enumerate() {
            // leg 1: center -> headland
            self.walk_to(self.cfg.row_x(row), half, SimState::CrossRow, self.mass_on_cart());
            if i > 0 {
                self.pause(self.cfg.cross_row_pause_s, SimState::CrossRow, self.mass_on_cart());
            }
            self.row = Some(row);
            self.pause(self.cfg.settle_s, SimState::Settle, self.mass_on_cart());
            self.pick_leg(rng, row, speed, half, 0.0);
            if self.done {
                break;
            }
            // leg 2: far end -> center
            self.row = None;
            self.walk_to(self.cfg.row_x(row), full, SimState::CrossRow, self.mass_on_cart());
            self.row = Some(row);
            self.pause(self.cfg.settle_s, SimState::Settle, self.mass_on_cart());
            self.pick_leg(rng, row, speed, full, half);
            if self.done {
                break;
            }
            self.row = None;
        }
        if !self.done {
            if self.deposits.is_empty() {
                self.done = true;
            } else {
                // day over with a partially filled tray: turn it in
                self.row = self.deposits.last().map(|d| d.0);
                self.deliver(false, None);
            }
        }
        self.close_visit();
    }
}

/// Time windows (sorted, disjoint) with a membership test.
struct Windows(Vec<(f64, f64)>);

impl Windows {
    fn contains(&self, t: f64) -> bool {
        self.0.iter().any(|&(a, b)| t >= a && t <= b)
    }
}

struct Episode {
    t0: f64,
    t1: f64,
    dx: f64,
}

/// Run one simulated harvest day. Deterministic in (cfg, seed,
/// day_index): each picker draws from an independent substream.
pub fn simulate_day(cfg: &SimConfig, seed: u64, day_index: usize) -> Result<SimDay, SimError> {
    cfg.validate()?;
    let plane = sim_plane(cfg);
    let cal = sim_calibration();
    let t0 = cfg.start_epoch + day_index as f64 * 86_400.0;
    let sigma = cfg.gps_cep * CEP_TO_SIGMA;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let mut carts = Vec::with_capacity(cfg.crew);
    let mut truth = SimTruth::default();

    for p in 0..cfg.crew {
        let substream = seed
            ^ (day_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (p as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut rng = ChaCha8Rng::seed_from_u64(substream);
        let cart_id = format!("cart{:02}", p + 1);

        let mut sim = PickerSim {
            cfg,
            cart_id: cart_id.clone(),
            t0,
            tick: 0,
            samples: Vec::new(),
            x: 0.0,
            y: 0.0,
            row: None,
            tray: 0,
            content_ug: 0,
            clamshell_ug: 0,
            deposit_target_ug: 0,
            pour_total_ug: 0,
            pour_n: 0,
            pour_done: 0,
            deposits: Vec::new(),
            delivered: 0,
            quota: cfg.tray_quota(p),
            done: false,
            truth: SimTruth::default(),
            open_visit: None,
        };
        sim.run(&mut rng, p);
        let samples = std::mem::take(&mut sim.samples);
        let day_end = sim.t(sim.tick);

        // schedule injected episodes over picking stretches
        let mut episodes: Vec<Episode> = Vec::new();
        let mut used: Vec<(f64, f64)> = Vec::new();
        let picking: Vec<&Sample> = samples.iter().filter(|s| s.state.is_picking()).collect();
        let mut schedule = |rng: &mut ChaCha8Rng,
                            sim_truth: &mut SimTruth,
                            kind: EpisodeKind,
                            count: usize,
                            len_min: f64,
                            len_max: f64,
                            row_offset: usize| {
            'episodes: for _ in 0..count {
                for _attempt in 0..64 {
                    if picking.is_empty() {
                        continue 'episodes;
                    }
                    let s = picking[rng.gen_range(0..picking.len())];
                    let e_t0 = t0 + s.tick as f64 * 0.1;
                    let len = rng.gen_range(len_min..=len_max);
                    let e_t1 = e_t0 + len;
                    let Some(row) = s.row else { continue };
                    if e_t0 - cfg.guard_gap_s <= t0 || e_t1 + cfg.guard_gap_s >= day_end {
                        continue;
                    }
                    let wrong = if row + row_offset < cfg.n_rows {
                        row + row_offset
                    } else if row >= row_offset {
                        row - row_offset
                    } else {
                        continue;
                    };
                    // every picking sample in the window must belong to the
                    // same row (deliveries inside the window are fine: their
                    // walk samples carry no row), with enough picking
                    // coverage for the episode to register downstream
                    let mut picking_in_window = 0usize;
                    let mut clean = true;
                    for q in &samples {
                        let tq = t0 + q.tick as f64 * 0.1;
                        if tq < e_t0 || tq > e_t1 {
                            continue;
                        }
                        if q.state.is_picking() {
                            picking_in_window += 1;
                            if q.row != Some(row) {
                                clean = false;
                                break;
                            }
                        }
                    }
                    if !clean || picking_in_window < 300 {
                        continue;
                    }
                    let guarded = (e_t0 - cfg.guard_gap_s, e_t1 + cfg.guard_gap_s);
                    if used.iter().any(|&(a, b)| guarded.0 <= b && a <= guarded.1) {
                        continue;
                    }
                    used.push(guarded);
                    episodes.push(Episode {
                        t0: e_t0,
                        t1: e_t1,
                        dx: cfg.row_x(wrong) - cfg.row_x(row),
                    });
                    sim_truth.episodes.push(InjectedEpisode {
                        cart_id: cart_id.clone(),
                        kind,
                        true_row: row,
                        wrong_row: wrong,
                        t0: e_t0,
                        t1: e_t1,
                    });
                    continue 'episodes;
                }
            }
        };
        schedule(
            &mut rng,
            &mut sim.truth,
            EpisodeKind::Deviation,
            cfg.deviation_episodes,
            cfg.deviation_len_min,
            cfg.deviation_len_max,
            1,
        );
        schedule(
            &mut rng,
            &mut sim.truth,
            EpisodeKind::PersistentBias,
            cfg.bias_episodes,
            cfg.bias_len_min,
            cfg.bias_len_max,
            2,
        );
        // blackout flanks on both sides of each episode; the episode
        // interval itself stays recorded (shifted)
        let guards = Windows(
            episodes
                .iter()
                .flat_map(|e| {
                    [
                        (e.t0 - cfg.guard_gap_s, e.t0 - 0.05),
                        (e.t1 + 0.05, e.t1 + cfg.guard_gap_s),
                    ]
                })
                .collect(),
        );
        let in_episode = |t: f64| {
            episodes
                .iter()
                .find(|e| t >= e.t0 && t <= e.t1)
                .map(|e| e.dx)
        };

        // SBAS dropouts
        let day_hours = (day_end - t0) / 3600.0;
        let n_dropouts = (day_hours * cfg.dropout_per_hour).floor() as usize;
        let dropouts = Windows(
            (0..n_dropouts)
                .map(|_| {
                    let start = t0 + rng.gen_range(0.0..(day_end - t0).max(1.0));
                    let len = rng.gen_range(cfg.dropout_min_s..=cfg.dropout_max_s);
                    (start, start + len)
                })
                .collect(),
        );

        // noise + serialization pass
        let mut records = Vec::with_capacity(samples.len());
        let mut states = Vec::with_capacity(samples.len());
        let (mut bias_x, mut bias_y) = (0.0f64, 0.0f64);
        for s in &samples {
            let t = t0 + s.tick as f64 * 0.1;
            if cfg.gps_bias_sigma > 0.0 {
                let step = cfg.gps_bias_sigma * 0.1f64.sqrt();
                bias_x = 0.9995 * bias_x + step * gauss.sample(&mut rng);
                bias_y = 0.9995 * bias_y + step * gauss.sample(&mut rng);
            }
            let (nx, ny, nmass, accel) = {
                let white = |rng: &mut ChaCha8Rng| {
                    if sigma > 0.0 {
                        sigma * gauss.sample(rng)
                    } else {
                        0.0
                    }
                };
                let ex = in_episode(t).unwrap_or(0.0);
                let nx = s.x + ex + bias_x + white(&mut rng);
                let ny = s.y + bias_y + white(&mut rng);
                let nmass = if cfg.mass_noise > 0.0 {
                    (s.mass + cfg.mass_noise * gauss.sample(&mut rng)).max(0.0)
                } else {
                    s.mass
                };
                let quiet = matches!(
                    s.state,
                    SimState::Picking | SimState::Settle | SimState::FullPause | SimState::Service
                );
                let accel = if quiet {
                    [
                        0.3 * gauss.sample(&mut rng),
                        0.3 * gauss.sample(&mut rng),
                        9.81 + 0.3 * gauss.sample(&mut rng),
                    ]
                } else {
                    // cart handling: loud wideband bursts while moving
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        9.81 + rng.gen_range(-5.0..5.0),
                    ]
                };
                (nx, ny, nmass, accel)
            };
            if guards.contains(t) || dropouts.contains(t) {
                continue;
            }
            let geo = plane.unproject(nx, ny);
            records.push(RawRecord {
                pi_unix_ts: t,
                gnss_unix_ts: Some(t),
                gnss_tow_ms: Some(((t % WEEK_S) * 1000.0).round()),
                lat: geo.lat,
                lon: geo.lon,
                height: 32.0,
                a_x: accel[0],
                a_y: accel[1],
                a_z: accel[2],
                raw_mass: (nmass - cal.intercept) / cal.slope,
            });
            states.push(TruthSample {
                t_ms: (t * 1000.0).round() as i64,
                state: s.state,
                row: s.row,
            });
        }

        truth.segments.extend(sim.truth.segments);
        for (id, c) in sim.truth.counts {
            truth.counts.insert(id, c);
        }
        for (k, v) in sim.truth.per_foot {
            *truth.per_foot.entry(k).or_default() += v;
        }
        truth.events.extend(sim.truth.events);
        truth.visits.extend(sim.truth.visits);
        truth.episodes.extend(sim.truth.episodes);
        carts.push(SimCart {
            cart_id,
            records,
            states,
        });
    }

    Ok(SimDay {
        label: format!("d{day_index:03}"),
        carts,
        truth,
    })
}

// ---- truth file round-trip -------------------------------------------

pub const TRUTH_SEGMENTS_HEADER: &str = "cart_id,tray,row,row_x,y_min,y_max,mass_ug";
pub const TRUTH_COUNTS_HEADER: &str = "cart_id,full_trays,partial_trays";
pub const TRUTH_PER_FOOT_HEADER: &str = "row,foot,mass_ug";
pub const TRUTH_EVENTS_HEADER: &str = "cart_id,tray,kind,t,net_ug";

pub fn serialize_truth_segments(segments: &[TruthSegment]) -> String {
    let mut out = String::from(TRUTH_SEGMENTS_HEADER);
    out.push('\n');
    for s in segments {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.cart_id,
            s.tray,
            s.row,
            fmt_f64(s.row_x),
            fmt_f64(s.y_min),
            fmt_f64(s.y_max),
            s.mass_ug
        ));
    }
    out
}

pub fn parse_truth_segments(text: &str) -> Result<Vec<TruthSegment>, SimError> {
    let bad = |line: usize, what: &str| SimError::TruthFormat(format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRUTH_SEGMENTS_HEADER => {}
        _ => return Err(SimError::TruthFormat("missing segments header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        out.push(TruthSegment {
            cart_id: f[0].to_string(),
            tray: f[1].parse().map_err(|_| bad(i + 1, "tray"))?,
            row: f[2].parse().map_err(|_| bad(i + 1, "row"))?,
            row_x: f[3].parse().map_err(|_| bad(i + 1, "row_x"))?,
            y_min: f[4].parse().map_err(|_| bad(i + 1, "y_min"))?,
            y_max: f[5].parse().map_err(|_| bad(i + 1, "y_max"))?,
            mass_ug: f[6].parse().map_err(|_| bad(i + 1, "mass_ug"))?,
        });
    }
    Ok(out)
}

pub fn serialize_truth_counts(counts: &BTreeMap<String, CartCount>) -> String {
    let mut out = String::from(TRUTH_COUNTS_HEADER);
    out.push('\n');
    for (id, c) in counts {
        out.push_str(&format!("{},{},{}\n", id, c.full_trays, c.partial_trays));
    }
    out
}

pub fn parse_truth_counts(text: &str) -> Result<BTreeMap<String, CartCount>, SimError> {
    let bad = |line: usize, what: &str| SimError::TruthFormat(format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRUTH_COUNTS_HEADER => {}
        _ => return Err(SimError::TruthFormat("missing counts header".into())),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        out.insert(
            f[0].to_string(),
            CartCount {
                full_trays: f[1].parse().map_err(|_| bad(i + 1, "full_trays"))?,
                partial_trays: f[2].parse().map_err(|_| bad(i + 1, "partial_trays"))?,
            },
        );
    }
    Ok(out)
}

pub fn serialize_truth_per_foot(per_foot: &BTreeMap<(usize, i64), i64>) -> String {
    let mut out = String::from(TRUTH_PER_FOOT_HEADER);
    out.push('\n');
    for (&(row, foot), &ug) in per_foot {
        out.push_str(&format!("{row},{foot},{ug}\n"));
    }
    out
}

pub fn parse_truth_per_foot(text: &str) -> Result<BTreeMap<(usize, i64), i64>, SimError> {
    let bad = |line: usize, what: &str| SimError::TruthFormat(format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRUTH_PER_FOOT_HEADER => {}
        _ => return Err(SimError::TruthFormat("missing per-foot header".into())),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        out.insert(
            (
                f[0].parse().map_err(|_| bad(i + 1, "row"))?,
                f[1].parse().map_err(|_| bad(i + 1, "foot"))?,
            ),
            f[2].parse().map_err(|_| bad(i + 1, "mass_ug"))?,
        );
    }
    Ok(out)
}

pub fn serialize_truth_events(events: &[TrayEvent]) -> String {
    let mut out = String::from(TRUTH_EVENTS_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.cart_id,
            e.tray,
            e.kind.as_str(),
            fmt_f64(e.t),
            e.net_ug
        ));
    }
    out
}

impl SimTruth {
    /// Write the truth files (segments, counts, per-foot yield, tray
    /// events, state-free; per-record state traces live in `SimCart`).
    pub fn save(&self, dir: &Path) -> Result<(), SimError> {
        let write = |name: &str, text: String| {
            fs::write(dir.join(name), text).map_err(|source| SimError::Io {
                path: dir.join(name).display().to_string(),
                source,
            })
        };
        write("truth_segments.csv", serialize_truth_segments(&self.segments))?;
        write("truth_counts.csv", serialize_truth_counts(&self.counts))?;
        write("truth_per_foot.csv", serialize_truth_per_foot(&self.per_foot))?;
        write("truth_events.csv", serialize_truth_events(&self.events))?;
        Ok(())
    }

    /// Load the evaluation-relevant truth (segments, counts, per-foot).
    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|source| SimError::Io {
                path: dir.join(name).display().to_string(),
                source,
            })
        };
        Ok(Self {
            segments: parse_truth_segments(&read("truth_segments.csv")?)?,
            counts: parse_truth_counts(&read("truth_counts.csv")?)?,
            per_foot: parse_truth_per_foot(&read("truth_per_foot.csv")?)?,
            events: Vec::new(),
            visits: Vec::new(),
            episodes: Vec::new(),
        })
    }
}
