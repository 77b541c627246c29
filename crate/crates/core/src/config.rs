//! Pipeline configuration: every tunable threshold in one struct with
//! documented defaults, plus key-value file round-tripping and
//! `--set key=value` style overrides.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::kv::{fmt_f64, KvDoc, KvError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file: {0}")]
    Format(#[from] KvError),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config value out of range: {0}")]
    OutOfRange(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// All pipeline thresholds. Defaults are calibrated against the
/// simulator; none are presented as measured constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // Step 1: activity filter
    /// Points per activity window (10 s at 10 Hz).
    pub window_len: usize,
    /// Minimum net mass increase over a window to call it picking (kg).
    pub m_step: f64,
    /// Maximum mean per-axis acceleration variance for picking ((m/s^2)^2).
    pub a_max_var: f64,

    // Step 2: row assignment
    /// DBSCAN radius in the scaled (x, y, tau*t) metric (m).
    pub row_eps: f64,
    /// Time scale tau converting seconds to meter-equivalents (m/s).
    pub time_scale: f64,
    /// DBSCAN core-point threshold.
    pub row_min_pts: usize,

    // Step 3: row completion
    /// Hampel half-window (samples) for direction smoothing.
    pub hampel_half_window: usize,
    /// Hampel outlier threshold in scaled MADs.
    pub hampel_n_sigma: f64,
    /// Minimum peak/valley prominence along y (m).
    pub peak_prominence: f64,
    /// Cap on inter-sample intervals when tallying in-row time (s).
    pub time_gap_cap: f64,

    // Step 4: row occupancy
    /// Minimum y-overlap between two carts in one row to flag a conflict (m).
    pub overlap_threshold: f64,

    // Step 5: mass processing
    /// Lower exclusive bound on plausible tray mass (kg).
    pub w_min: f64,
    /// Upper exclusive bound on plausible tray mass (kg).
    pub w_max: f64,
    /// Maximum plausible mass rate (kg/s), exclusive lower bound 0.
    pub dw_max: f64,
    /// Median filter window (samples, odd).
    pub median_window: usize,

    // Step 6: tray separation and yield interpolation
    /// DBSCAN radius for tray separation in the scaled (y, t, w) metric.
    pub tray_eps: f64,
    /// DBSCAN core-point threshold for tray separation.
    pub tray_min_pts: usize,
    /// Time scale for the tray-separation metric (m/s equivalent).
    pub tray_time_scale: f64,
    /// Mass scale for the tray-separation metric (m/kg equivalent).
    pub tray_mass_scale: f64,
    /// Relink split tray fragments when the mass jump is below this (kg).
    pub tray_relink_mass: f64,
    /// ...and the time gap is below this (s).
    pub tray_relink_gap: f64,
    /// Minimum R^2 for accepting the lowest-degree polynomial fit.
    pub score_max: f64,
    /// Yield sampling interval along the row (m); 0.3048 m = 1 ft.
    pub interval: f64,

    // Gridding / reporting
    /// Grid cell size (m).
    pub grid_resolution: f64,
    /// Average full-tray net mass used for tray-count estimates (kg).
    pub avg_tray_mass: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_len: 100,
            m_step: 0.1,
            a_max_var: 4.0,
            row_eps: 2.0,
            time_scale: 0.02,
            row_min_pts: 10,
            hampel_half_window: 5,
            hampel_n_sigma: 3.0,
            peak_prominence: 2.0,
            time_gap_cap: 1.0,
            overlap_threshold: 3.0,
            w_min: 0.55,
            w_max: 5.0,
            dw_max: 0.5,
            median_window: 5,
            tray_eps: 3.0,
            tray_min_pts: 8,
            tray_time_scale: 0.02,
            tray_mass_scale: 5.0,
            tray_relink_mass: 0.3,
            tray_relink_gap: 600.0,
            score_max: 0.94,
            interval: 0.3048,
            grid_resolution: 3.0,
            avg_tray_mass: 4.25,
        }
    }
}

enum FieldKind {
    F64(fn(&PipelineConfig) -> f64, fn(&mut PipelineConfig, f64)),
    Usize(fn(&PipelineConfig) -> usize, fn(&mut PipelineConfig, usize)),
}

/// Central key table: one entry per config field, used for both
/// serialization and parsing so the two cannot drift apart.
fn field_table() -> Vec<(&'static str, FieldKind)> {
    use FieldKind::*;
    vec![
        ("window_len", Usize(|c| c.window_len, |c, v| c.window_len = v)),
        ("m_step", F64(|c| c.m_step, |c, v| c.m_step = v)),
        ("a_max_var", F64(|c| c.a_max_var, |c, v| c.a_max_var = v)),
        ("row_eps", F64(|c| c.row_eps, |c, v| c.row_eps = v)),
        ("time_scale", F64(|c| c.time_scale, |c, v| c.time_scale = v)),
        ("row_min_pts", Usize(|c| c.row_min_pts, |c, v| c.row_min_pts = v)),
        (
            "hampel_half_window",
            Usize(|c| c.hampel_half_window, |c, v| c.hampel_half_window = v),
        ),
        ("hampel_n_sigma", F64(|c| c.hampel_n_sigma, |c, v| c.hampel_n_sigma = v)),
        ("peak_prominence", F64(|c| c.peak_prominence, |c, v| c.peak_prominence = v)),
        ("time_gap_cap", F64(|c| c.time_gap_cap, |c, v| c.time_gap_cap = v)),
        (
            "overlap_threshold",
            F64(|c| c.overlap_threshold, |c, v| c.overlap_threshold = v),
        ),
        ("w_min", F64(|c| c.w_min, |c, v| c.w_min = v)),
        ("w_max", F64(|c| c.w_max, |c, v| c.w_max = v)),
        ("dw_max", F64(|c| c.dw_max, |c, v| c.dw_max = v)),
        ("median_window", Usize(|c| c.median_window, |c, v| c.median_window = v)),
        ("tray_eps", F64(|c| c.tray_eps, |c, v| c.tray_eps = v)),
        ("tray_min_pts", Usize(|c| c.tray_min_pts, |c, v| c.tray_min_pts = v)),
        (
            "tray_time_scale",
            F64(|c| c.tray_time_scale, |c, v| c.tray_time_scale = v),
        ),
        (
            "tray_mass_scale",
            F64(|c| c.tray_mass_scale, |c, v| c.tray_mass_scale = v),
        ),
        (
            "tray_relink_mass",
            F64(|c| c.tray_relink_mass, |c, v| c.tray_relink_mass = v),
        ),
        ("tray_relink_gap", F64(|c| c.tray_relink_gap, |c, v| c.tray_relink_gap = v)),
        ("score_max", F64(|c| c.score_max, |c, v| c.score_max = v)),
        ("interval", F64(|c| c.interval, |c, v| c.interval = v)),
        ("grid_resolution", F64(|c| c.grid_resolution, |c, v| c.grid_resolution = v)),
        ("avg_tray_mass", F64(|c| c.avg_tray_mass, |c, v| c.avg_tray_mass = v)),
    ]
}

impl PipelineConfig {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        for (key, kind) in field_table() {
            match kind {
                FieldKind::F64(get, _) => doc.set(key, fmt_f64(get(self))),
                FieldKind::Usize(get, _) => doc.set(key, get(self)),
            }
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_kv(doc)?;
        Ok(cfg)
    }

    /// Overlay the document's keys onto this config. Unknown keys are
    /// rejected so typos do not silently fall back to defaults.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<(), ConfigError> {
        let table = field_table();
        for (key, _) in doc.iter() {
            if !table.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
        for (key, kind) in &table {
            match kind {
                FieldKind::F64(_, set) => {
                    if let Some(v) = doc.get_f64(key)? {
                        set(self, v);
                    }
                }
                FieldKind::Usize(_, set) => {
                    if let Some(v) = doc.get_usize(key)? {
                        set(self, v);
                    }
                }
            }
        }
        self.validate()
    }

    /// Apply one `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let doc = KvDoc::parse(assignment).map_err(ConfigError::Format)?;
        self.apply_kv(&doc)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::OutOfRange(msg.to_string()));
        if self.window_len == 0 {
            return fail("window_len must be positive");
        }
        if self.row_eps <= 0.0 || self.tray_eps <= 0.0 {
            return fail("DBSCAN radii must be positive");
        }
        if self.median_window % 2 == 0 {
            return fail("median_window must be odd");
        }
        if self.w_min >= self.w_max {
            return fail("w_min must be below w_max");
        }
        if self.dw_max <= 0.0 {
            return fail("dw_max must be positive");
        }
        if self.interval <= 0.0 || self.grid_resolution <= 0.0 {
            return fail("interval and grid_resolution must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_max) {
            return fail("score_max must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_kv().render())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv(&KvDoc::parse(&text)?)
    }
}
