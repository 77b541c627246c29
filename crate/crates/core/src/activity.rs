//! Step 1: window-level picking/non-picking classification and boundary
//! filtering.
//!
//! The classifier is pluggable: this crate ships the interface plus a
//! mass/acceleration heuristic baseline; a trained model drops in by
//! implementing [`ActivityClassifier`].

use std::ops::Range;

use crate::config::PipelineConfig;
use crate::field::FieldModel;
use crate::ingest::{CartTrack, TrackPoint};

/// Window label: picking activity or anything else (transport, lunch
/// breaks, tray swaps away from the bed, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Pick,
    NoPick,
}

/// One classification window over consecutive track points. Windows hold
/// `window_len` points (10 s at 10 Hz) except possibly the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityWindow {
    pub range: Range<usize>,
    pub label: Label,
}

/// A pluggable window classifier. Must be deterministic for fixed inputs.
pub trait ActivityClassifier {
    fn classify(&self, window: &[TrackPoint]) -> Label;
}

/// Heuristic stand-in for the learned classifier: a window counts as
/// picking when its mass trends up by at least `m_step` while the cart is
/// not being shaken or carried (mean per-axis acceleration variance below
/// `a_max_var`).
#[derive(Debug, Clone, Copy)]
pub struct BaselineClassifier {
    pub m_step: f64,
    pub a_max_var: f64,
}

impl BaselineClassifier {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            m_step: cfg.m_step,
            a_max_var: cfg.a_max_var,
        }
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

impl ActivityClassifier for BaselineClassifier {
    fn classify(&self, window: &[TrackPoint]) -> Label {
        if window.is_empty() {
            return Label::NoPick;
        }
        let rise = window.last().unwrap().mass - window[0].mass;
        let var_x = variance(window.iter().map(|p| p.a_x));
        let var_y = variance(window.iter().map(|p| p.a_y));
        let var_z = variance(window.iter().map(|p| p.a_z));
        let mean_var = (var_x + var_y + var_z) / 3.0;
        if rise >= self.m_step && mean_var < self.a_max_var {
            Label::Pick
        } else {
            Label::NoPick
        }
    }
}

/// Partition the track into consecutive windows of `window_len` points
/// (final window possibly shorter) and label each one.
pub fn classify_track(
    track: &CartTrack,
    classifier: &dyn ActivityClassifier,
    window_len: usize,
) -> Vec<ActivityWindow> {
    assert!(window_len > 0, "window_len must be positive");
    let n = track.points.len();
    let mut out = Vec::with_capacity(n.div_ceil(window_len));
    let mut start = 0;
    while start < n {
        let end = (start + window_len).min(n);
        out.push(ActivityWindow {
            range: start..end,
            label: classifier.classify(&track.points[start..end]),
        });
        start = end;
    }
    out
}

/// Keep only points inside Pick-labeled windows. Order is preserved; the
/// points themselves are never modified.
pub fn drop_non_picking(track: &CartTrack, windows: &[ActivityWindow]) -> CartTrack {
    let mut out = CartTrack::new(track.cart_id.clone());
    for w in windows {
        if w.label == Label::Pick {
            out.points.extend_from_slice(&track.points[w.range.clone()]);
        }
    }
    out
}

/// Classify and drop non-picking windows in one call.
pub fn filter_activity(
    track: &CartTrack,
    classifier: &dyn ActivityClassifier,
    window_len: usize,
) -> CartTrack {
    let windows = classify_track(track, classifier, window_len);
    drop_non_picking(track, &windows)
}

/// Drop points outside the field boundary polygon (boundary-inclusive).
pub fn filter_boundary(track: &CartTrack, field: &FieldModel) -> CartTrack {
    let mut out = CartTrack::new(track.cart_id.clone());
    out.points.extend(
        track
            .points
            .iter()
            .filter(|p| field.boundary().contains(p.x, p.y))
            .cloned(),
    );
    out
}
