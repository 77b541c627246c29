//! Raw cart-log ingestion: log parsing and serialization, load-cell
//! calibration, and construction of local-frame tracks.
//!
//! Logs are UTF-8 comma-delimited text with a fixed header. Malformed
//! lines are skipped and reported, never fatal: field hardware produces
//! truncated lines on power loss and similar faults.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::field::{FieldTransform, GeoPoint};
use crate::kv::{fmt_f64, KvDoc, KvError};

/// Column header every raw log must begin with.
pub const RAW_LOG_HEADER: &str =
    "pi_unix_ts,gnss_unix_ts,gnss_tow_ms,lat,lon,height_m,a_x,a_y,a_z,raw_mass";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("log contains no data lines")]
    EmptyLog,
    #[error("log header mismatch: expected {RAW_LOG_HEADER:?}, got {0:?}")]
    HeaderMismatch(String),
    #[error("calibration needs at least 2 samples with distinct raw readings")]
    DegenerateSamples,
    #[error("calibration file: {0}")]
    CalibrationFormat(#[from] KvError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One 10 Hz sample as written by the cart logger. The GNSS fields are
/// absent during SBAS dropouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub pi_unix_ts: f64,
    pub gnss_unix_ts: Option<f64>,
    pub gnss_tow_ms: Option<f64>,
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    /// Uncalibrated load-cell reading (opaque linear unit).
    pub raw_mass: f64,
}

impl RawRecord {
    /// Authoritative sample time: GNSS clock when present, Pi clock as
    /// fallback.
    pub fn timestamp(&self) -> f64 {
        self.gnss_unix_ts.unwrap_or(self.pi_unix_ts)
    }
}

/// A line skipped during parsing, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    /// 1-based line number in the file (header is line 1).
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for SkippedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

/// Result of parsing one raw log.
#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub records: Vec<RawRecord>,
    pub skipped: Vec<SkippedLine>,
}

fn opt_f64(tok: &str) -> Result<Option<f64>, String> {
    let tok = tok.trim();
    if tok.is_empty() {
        return Ok(None);
    }
    tok.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("bad float {tok:?}"))
}

fn req_f64(tok: &str, col: &str) -> Result<f64, String> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| format!("column {col}: bad float {:?}", tok.trim()))
}

fn parse_line(line: &str) -> Result<RawRecord, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 10 {
        return Err(format!("expected 10 columns, got {}", cols.len()));
    }
    let rec = RawRecord {
        pi_unix_ts: req_f64(cols[0], "pi_unix_ts")?,
        gnss_unix_ts: opt_f64(cols[1]).map_err(|e| format!("column gnss_unix_ts: {e}"))?,
        gnss_tow_ms: opt_f64(cols[2]).map_err(|e| format!("column gnss_tow_ms: {e}"))?,
        lat: req_f64(cols[3], "lat")?,
        lon: req_f64(cols[4], "lon")?,
        height: req_f64(cols[5], "height_m")?,
        a_x: req_f64(cols[6], "a_x")?,
        a_y: req_f64(cols[7], "a_y")?,
        a_z: req_f64(cols[8], "a_z")?,
        raw_mass: req_f64(cols[9], "raw_mass")?,
    };
    if !rec.timestamp().is_finite() {
        return Err("non-finite timestamp".into());
    }
    Ok(rec)
}

/// Parse one raw log. Well-formed lines become records; malformed lines
/// (wrong column count, unparseable fields, timestamps running backwards)
/// are skipped and reported.
pub fn parse_raw_log(text: &str) -> Result<ParsedLog, IngestError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(IngestError::EmptyLog);
    };
    if header.trim() != RAW_LOG_HEADER {
        return Err(IngestError::HeaderMismatch(header.trim().to_string()));
    }
    let mut out = ParsedLog::default();
    let mut last_ts = f64::NEG_INFINITY;
    let mut n_data_lines = 0usize;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        n_data_lines += 1;
        match parse_line(line) {
            Ok(rec) => {
                let ts = rec.timestamp();
                if ts < last_ts {
                    out.skipped.push(SkippedLine {
                        line: i + 1,
                        reason: format!("timestamp regression ({ts} < {last_ts})"),
                    });
                } else {
                    last_ts = ts;
                    out.records.push(rec);
                }
            }
            Err(reason) => out.skipped.push(SkippedLine { line: i + 1, reason }),
        }
    }
    if n_data_lines == 0 {
        return Err(IngestError::EmptyLog);
    }
    Ok(out)
}

/// Serialize records into the raw log format (header included). The
/// simulator uses this; `parse_raw_log` inverts it exactly.
pub fn serialize_raw_log(records: &[RawRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RAW_LOG_HEADER);
    out.push('\n');
    for r in records {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(r.pi_unix_ts),
            opt(r.gnss_unix_ts),
            opt(r.gnss_tow_ms),
            fmt_f64(r.lat),
            fmt_f64(r.lon),
            fmt_f64(r.height),
            fmt_f64(r.a_x),
            fmt_f64(r.a_y),
            fmt_f64(r.a_z),
            fmt_f64(r.raw_mass),
        ));
    }
    out
}

pub fn read_raw_log(path: &Path) -> Result<ParsedLog, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_raw_log(&text)
}

pub fn write_raw_log(path: &Path, records: &[RawRecord]) -> Result<(), IngestError> {
    fs::write(path, serialize_raw_log(records)).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Linear load-cell calibration: mass = slope * raw + intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl Calibration {
    pub fn apply(&self, raw: f64) -> f64 {
        self.slope * raw + self.intercept
    }

    /// Identity calibration, for logs already written in kilograms.
    pub fn identity() -> Self {
        Self {
            slope: 1.0,
            intercept: 0.0,
            r_squared: 1.0,
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("slope", fmt_f64(self.slope));
        doc.set("intercept", fmt_f64(self.intercept));
        doc.set("r_squared", fmt_f64(self.r_squared));
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        Ok(Self {
            slope: doc.require_f64("slope")?,
            intercept: doc.require_f64("intercept")?,
            r_squared: doc.require_f64("r_squared")?,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_kv().render())
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_kv(&KvDoc::parse(&text)?)?)
    }
}

/// Fit the calibration line by ordinary least squares over
/// (raw reading, known mass) pairs.
pub fn calibrate_load_cell(samples: &[(f64, f64)]) -> Result<Calibration, IngestError> {
    let n = samples.len();
    if n < 2 {
        return Err(IngestError::DegenerateSamples);
    }
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in samples {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(IngestError::DegenerateSamples);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    // R^2 with the convention that a perfectly explained constant target
    // (zero total variance) counts as a perfect fit
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(Calibration {
        slope,
        intercept,
        r_squared,
    })
}

/// One sample of a local-frame cart track, with the per-point
/// annotations the pipeline steps fill in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub mass: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    /// Initial row center assignment (Step 2).
    pub x_row: Option<f64>,
    /// Post-correction row center (Steps 3-4).
    pub x_row_new: Option<f64>,
    /// True when a correction step moved this point to another row.
    pub flag: bool,
    /// Trajectory cluster id from Step 2.
    pub cluster: Option<usize>,
    /// Tray id from Step 6.
    pub tray: Option<usize>,
}

impl TrackPoint {
    pub fn new(x: f64, y: f64, t: f64, mass: f64, a: [f64; 3]) -> Self {
        Self {
            x,
            y,
            t,
            mass,
            a_x: a[0],
            a_y: a[1],
            a_z: a[2],
            x_row: None,
            x_row_new: None,
            flag: false,
            cluster: None,
            tray: None,
        }
    }

    /// The row the point currently belongs to: corrected if set, else the
    /// initial assignment.
    pub fn current_row(&self) -> Option<f64> {
        self.x_row_new.or(self.x_row)
    }
}

/// Time-ordered local-frame track for one cart over one day.
#[derive(Debug, Clone, PartialEq)]
pub struct CartTrack {
    pub cart_id: String,
    pub points: Vec<TrackPoint>,
}

impl CartTrack {
    pub fn new(cart_id: impl Into<String>) -> Self {
        Self {
            cart_id: cart_id.into(),
            points: Vec::new(),
        }
    }
}

/// Convert parsed records to a local-frame track: calibrate mass, project
/// coordinates, pick the authoritative timestamp. Record order is kept.
pub fn build_track(
    records: &[RawRecord],
    cal: &Calibration,
    transform: &FieldTransform,
    cart_id: impl Into<String>,
) -> CartTrack {
    let mut track = CartTrack::new(cart_id);
    track.points.reserve(records.len());
    for r in records {
        let (x, y) = transform.to_local(GeoPoint { lat: r.lat, lon: r.lon });
        track.points.push(TrackPoint::new(
            x,
            y,
            r.timestamp(),
            cal.apply(r.raw_mass),
            [r.a_x, r.a_y, r.a_z],
        ));
    }
    track
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::fit_field_transform;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sample_record(i: usize) -> RawRecord {
        RawRecord {
            pi_unix_ts: 1.6e9 + i as f64 * 0.1,
            gnss_unix_ts: Some(1.6e9 + i as f64 * 0.1 + 0.003),
            gnss_tow_ms: Some(400_000_000.0 + i as f64 * 100.0),
            lat: 34.9 + i as f64 * 1e-6,
            lon: -120.47,
            height: 82.0,
            a_x: 0.01 * i as f64,
            a_y: -0.02,
            a_z: 9.81,
            raw_mass: 1.23 + i as f64,
        }
    }

    #[test]
    fn empty_log_is_an_error() {
        match parse_raw_log(&format!("{RAW_LOG_HEADER}\n")) {
            Err(IngestError::EmptyLog) => {}
            other => panic!("expected EmptyLog, got {other:?}"),
        }
        match parse_raw_log("") {
            Err(IngestError::EmptyLog) => {}
            other => panic!("expected EmptyLog, got {other:?}"),
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        match parse_raw_log("ts,lat,lon\n1,2,3\n") {
            Err(IngestError::HeaderMismatch(_)) => {}
            other => panic!("expected HeaderMismatch, got {other:?}"),
        }
    }

    #[test]
    fn three_lines_round_trip() {
        let records: Vec<RawRecord> = (0..3).map(sample_record).collect();
        let text = serialize_raw_log(&records);
        let parsed = parse_raw_log(&text).unwrap();
        assert!(parsed.skipped.is_empty());
        assert_eq!(parsed.records, records);
    }

    #[test]
    fn truncated_line_skipped_with_line_number() {
        let mut text = serialize_raw_log(&(0..3).map(sample_record).collect::<Vec<_>>());
        text.push_str("1.6e9,,,34.9\n"); // truncated: 4 columns
        let parsed = parse_raw_log(&text).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed.skipped.len(), 1);
        assert_eq!(parsed.skipped[0].line, 5); // header is line 1
    }

    #[test]
    fn timestamp_regression_skipped() {
        let mut records: Vec<RawRecord> = (0..4).map(sample_record).collect();
        records[2].gnss_unix_ts = Some(1.0); // clock glitch
        records[2].pi_unix_ts = 1.0;
        let parsed = parse_raw_log(&serialize_raw_log(&records)).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed.skipped.len(), 1);
        assert_eq!(parsed.skipped[0].line, 4);
        // surviving timestamps are non-decreasing
        for w in parsed.records.windows(2) {
            assert!(w[1].timestamp() >= w[0].timestamp());
        }
    }

    #[test]
    fn missing_gnss_falls_back_to_pi_clock() {
        let mut r = sample_record(0);
        r.gnss_unix_ts = None;
        r.gnss_tow_ms = None;
        assert_eq!(r.timestamp(), r.pi_unix_ts);
        let parsed = parse_raw_log(&serialize_raw_log(&[r])).unwrap();
        assert_eq!(parsed.records[0], r);
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trips(
            n in 1usize..40,
            base in 1.0e9f64..2.0e9,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64) / (u32::MAX as f64)
            };
            let records: Vec<RawRecord> = (0..n)
                .map(|i| {
                    let has_gnss = next() > 0.2;
                    RawRecord {
                        pi_unix_ts: base + i as f64 * 0.1,
                        gnss_unix_ts: has_gnss.then(|| base + i as f64 * 0.1 + next() * 0.01),
                        gnss_tow_ms: has_gnss.then(|| (next() * 6.048e8).floor()),
                        lat: 34.0 + next(),
                        lon: -121.0 + next(),
                        height: next() * 100.0,
                        a_x: next() * 4.0 - 2.0,
                        a_y: next() * 4.0 - 2.0,
                        a_z: 9.81 + next() * 0.2 - 0.1,
                        raw_mass: next() * 30.0,
                    }
                })
                .collect();
            // ensure monotone authoritative timestamps so nothing is skipped
            let mut records = records;
            let mut last = f64::NEG_INFINITY;
            records.retain(|r| {
                let keep = r.timestamp() >= last;
                if keep { last = r.timestamp(); }
                keep
            });
            prop_assume!(!records.is_empty());
            let parsed = parse_raw_log(&serialize_raw_log(&records)).unwrap();
            prop_assert!(parsed.skipped.is_empty());
            prop_assert_eq!(parsed.records, records);
        }

        #[test]
        fn calibration_scale_equivariance(k in 0.01f64..100.0) {
            let samples = [(1.0, 2.6), (2.0, 4.4), (3.0, 6.8), (4.0, 8.5)];
            let cal = calibrate_load_cell(&samples).unwrap();
            let scaled: Vec<(f64, f64)> = samples.iter().map(|&(x, y)| (x * k, y)).collect();
            let cal_k = calibrate_load_cell(&scaled).unwrap();
            prop_assert!((cal_k.slope - cal.slope / k).abs() < 1e-9 * cal.slope.abs() / k);
            for &(x, _) in &samples {
                prop_assert!((cal_k.apply(x * k) - cal.apply(x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibration_exact_line() {
        let samples: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 0.5)).collect();
        let cal = calibrate_load_cell(&samples).unwrap();
        assert_abs_diff_eq!(cal.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.intercept, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_symmetric_perturbation_cancels() {
        // perturb an even number of points by +e and -e at raw values placed
        // symmetrically about the mean: both normal-equation sums cancel
        let line = |x: f64| 3.0 * x - 1.0;
        let e = 0.25;
        let samples = [
            (1.0, line(1.0) + e),
            (2.0, line(2.0) - e),
            (4.0, line(4.0) - e),
            (5.0, line(5.0) + e),
        ];
        let cal = calibrate_load_cell(&samples).unwrap();
        assert_abs_diff_eq!(cal.slope, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cal.intercept, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn calibration_degenerate_samples() {
        match calibrate_load_cell(&[(2.0, 1.0), (2.0, 3.0), (2.0, 5.0)]) {
            Err(IngestError::DegenerateSamples) => {}
            other => panic!("expected DegenerateSamples, got {other:?}"),
        }
        match calibrate_load_cell(&[(2.0, 1.0)]) {
            Err(IngestError::DegenerateSamples) => {}
            other => panic!("expected DegenerateSamples, got {other:?}"),
        }
    }

    #[test]
    fn calibration_file_round_trip() {
        let cal = Calibration {
            slope: 2.125,
            intercept: -0.375,
            r_squared: 0.999,
        };
        let doc = cal.to_kv();
        assert_eq!(Calibration::from_kv(&doc).unwrap(), cal);
    }

    fn test_transform() -> (FieldTransform, crate::field::TangentPlane) {
        let origin = GeoPoint { lat: 34.9, lon: -120.47 };
        let plane = crate::field::TangentPlane::new(origin);
        let corners = [(0.0, 0.0), (20.0, 0.0), (0.0, 80.0), (20.0, 80.0)];
        let geo: Vec<GeoPoint> = corners.iter().map(|&(x, y)| plane.unproject(x, y)).collect();
        (fit_field_transform(&geo, &corners.to_vec()).unwrap(), plane)
    }

    #[test]
    fn build_track_empty() {
        let (t, _) = test_transform();
        let track = build_track(&[], &Calibration::identity(), &t, "cart-1");
        assert!(track.points.is_empty());
        assert_eq!(track.cart_id, "cart-1");
    }

    #[test]
    fn build_track_origin_intercept() {
        let (t, plane) = test_transform();
        let origin_geo = plane.unproject(0.0, 0.0);
        let rec = RawRecord {
            pi_unix_ts: 100.0,
            gnss_unix_ts: None,
            gnss_tow_ms: None,
            lat: origin_geo.lat,
            lon: origin_geo.lon,
            height: 0.0,
            a_x: 0.0,
            a_y: 0.0,
            a_z: 9.81,
            raw_mass: 0.0,
        };
        let cal = Calibration {
            slope: 2.0,
            intercept: 0.7,
            r_squared: 1.0,
        };
        let track = build_track(&[rec], &cal, &t, "c");
        assert_abs_diff_eq!(track.points[0].x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(track.points[0].y, 0.0, epsilon = 1e-6);
        assert_eq!(track.points[0].mass, 0.7);
    }

    #[test]
    fn build_track_preserves_order_and_timestamps() {
        let (t, _) = test_transform();
        let records: Vec<RawRecord> = (0..25).map(sample_record).collect();
        let track = build_track(&records, &Calibration::identity(), &t, "c");
        assert_eq!(track.points.len(), records.len());
        for (p, r) in track.points.iter().zip(&records) {
            assert_eq!(p.t.to_bits(), r.timestamp().to_bits());
        }
    }
}
