//! Batch pipeline that turns noisy geo-tagged load-cell logs from
//! instrumented picking carts into corrected harvest trajectories,
//! per-foot yield distributions, and grid-resolution yield maps.
//!
//! The crate also ships a harvest-day simulator that emits raw logs in the
//! ingestion format together with complete ground truth, which the test
//! suites use as the verification oracle for the whole pipeline.

pub mod activity;
pub mod config;
pub mod dbscan;
pub mod field;
pub mod filters;
pub mod ingest;
pub mod kv;
pub mod metrics;
pub mod pipeline;
pub mod rows;
pub mod sim;
pub mod yield_map;

pub use config::PipelineConfig;
pub use field::{FieldModel, FieldTransform, GeoPoint, GridSpec};
pub use ingest::{Calibration, CartTrack, RawRecord, TrackPoint};
pub use yield_map::{YieldGrid, YieldPoint};
