//! `yieldmap` — harvest-cart yield mapping pipeline front end.
//!
//! Subcommands cover the whole workflow: `simulate` emits raw cart logs
//! plus ground truth, `ingest` turns logs into local-frame tracks, `run`
//! executes the six processing steps and writes every intermediate
//! artifact, `evaluate` scores a run against simulator truth, and
//! `season` accumulates daily grids. All outputs are a function of
//! (inputs, config, seed) only; reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use yieldmap_core::config::PipelineConfig;
use yieldmap_core::field::{fit_field_transform, FieldModel, FieldTransform};
use yieldmap_core::ingest::{build_track, parse_raw_log, Calibration, CartTrack};
use yieldmap_core::metrics::{
    bland_altman, group_by_tray, match_segments, pearson, row_level_accuracy,
    tray_count_accuracy, tray_level_accuracy, GtSegment, MetricReport,
};
use yieldmap_core::pipeline::{run_day, write_day_artifacts};
use yieldmap_core::sim::{self, SimConfig, SimTruth};
use yieldmap_core::yield_map::{
    accumulate_season, parse_yield_points, serialize_yield_map, YieldGrid, YieldPoint,
};

#[derive(Parser)]
#[command(name = "yieldmap", about = "Picking-cart yield mapping pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate harvest days: raw logs, field model, calibration, truth.
    Simulate {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Simulator config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one simulator config key, e.g. --set crew=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        days: usize,
    },
    /// Parse raw logs into local-frame tracks (no pipeline steps).
    Ingest {
        /// Directory with per-cart .log files.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run processing steps 1-6 on one day of logs.
    Run {
        /// Directory with per-cart .log files.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Pipeline config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one pipeline config key, e.g. --set row_eps=2.5.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Grid resolution override (m).
        #[arg(long)]
        resolution: Option<f64>,
        /// Day label; defaults to the log directory name.
        #[arg(long)]
        label: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a day run against simulator ground truth.
    Evaluate {
        /// Directory with truth_*.csv files (a simulated day directory).
        #[arg(long)]
        truth: PathBuf,
        /// Day output directory produced by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Average full-tray net mass (kg) for tray-count estimation.
        #[arg(long, default_value_t = 4.25)]
        avg_tray_mass: f64,
        /// Report output directory; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accumulate day grids into a season map.
    Season {
        /// Day output directories (each containing day_grid.txt).
        #[arg(long, required = true, num_args = 1..)]
        days: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            out,
            config,
            sets,
            seed,
            days,
        } => simulate(&out, config.as_deref(), &sets, seed, days),
        Command::Ingest {
            logs,
            field,
            calibration,
            out,
        } => ingest(&logs, &field, &calibration, &out),
        Command::Run {
            logs,
            field,
            calibration,
            config,
            sets,
            resolution,
            label,
            out,
        } => run(
            &logs,
            &field,
            &calibration,
            config.as_deref(),
            &sets,
            resolution,
            label,
            &out,
        ),
        Command::Evaluate {
            truth,
            run,
            avg_tray_mass,
            out,
        } => evaluate(&truth, &run, avg_tray_mass, out.as_deref()),
        Command::Season { days, out } => season(&days, &out),
    }
}

// ---- simulate --------------------------------------------------------

fn simulate(out: &Path, config: Option<&Path>, sets: &[String], seed: u64, days: usize) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading simulator config {}", p.display()))?,
        None => SimConfig::default(),
    };
    for s in sets {
        cfg.set_override(s).with_context(|| format!("applying override {s:?}"))?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    cfg.save(&out.join("sim_config.txt"))
        .with_context(|| format!("writing {}", out.join("sim_config.txt").display()))?;
    sim::make_field(&cfg)
        .save(&out.join("field.txt"))
        .with_context(|| format!("writing {}", out.join("field.txt").display()))?;
    sim::sim_calibration()
        .save(&out.join("calibration.txt"))
        .with_context(|| format!("writing {}", out.join("calibration.txt").display()))?;

    for day in 0..days {
        let sim_day = sim::simulate_day(&cfg, seed, day).context("simulating day")?;
        let day_dir = out.join(&sim_day.label);
        fs::create_dir_all(&day_dir).with_context(|| format!("creating {}", day_dir.display()))?;
        for cart in &sim_day.carts {
            let path = day_dir.join(format!("{}.log", cart.cart_id));
            fs::write(&path, sim::serialize_logs(&cart.records))
                .with_context(|| format!("writing {}", path.display()))?;
        }
        sim_day
            .truth
            .save(&day_dir)
            .context("writing truth files")?;
        println!(
            "{}: {} carts, {} truth segments",
            sim_day.label,
            sim_day.carts.len(),
            sim_day.truth.segments.len()
        );
    }
    Ok(())
}

// ---- shared loading --------------------------------------------------

fn load_pipeline_config(
    config: Option<&Path>,
    sets: &[String],
    resolution: Option<f64>,
) -> Result<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p)
            .with_context(|| format!("loading pipeline config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for s in sets {
        cfg.set_override(s).with_context(|| format!("applying override {s:?}"))?;
    }
    if let Some(r) = resolution {
        cfg.set_override(&format!("grid_resolution = {r}"))
            .context("applying --resolution")?;
    }
    Ok(cfg)
}

fn load_field_and_transform(field: &Path) -> Result<(FieldModel, FieldTransform)> {
    let model = FieldModel::load(field).context("[field] loading field model")?;
    let geo: Vec<_> = model.control_points().iter().map(|c| c.0).collect();
    let local: Vec<_> = model.control_points().iter().map(|c| c.1).collect();
    let transform = fit_field_transform(&geo, &local)
        .context("fitting geo-to-field transform from field control points")?;
    Ok((model, transform))
}

/// Parse every `.log` file in `dir` into a track, reporting skipped
/// lines. Cart ids come from file stems; files sort by name.
fn load_tracks(
    dir: &Path,
    cal: &Calibration,
    transform: &FieldTransform,
) -> Result<(Vec<CartTrack>, usize)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading log directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "log"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .log files in {}", dir.display());
    }
    let mut tracks = Vec::new();
    let mut skipped = 0usize;
    for path in &paths {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed =
            parse_raw_log(&text).with_context(|| format!("[ingest] parsing {}", path.display()))?;
        skipped += parsed.skipped.len();
        let cart_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cart".into());
        tracks.push(build_track(&parsed.records, cal, transform, cart_id));
    }
    Ok((tracks, skipped))
}

// ---- ingest ----------------------------------------------------------

fn ingest(logs: &Path, field: &Path, calibration: &Path, out: &Path) -> Result<()> {
    let cal = Calibration::load(calibration)
        .with_context(|| format!("loading calibration {}", calibration.display()))?;
    let (_, transform) = load_field_and_transform(field)?;
    let (tracks, skipped) = load_tracks(logs, &cal, &transform)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("tracks.csv");
    fs::write(&path, yieldmap_core::rows::serialize_day_table(&tracks))
        .with_context(|| format!("writing {}", path.display()))?;
    let total: usize = tracks.iter().map(|t| t.points.len()).sum();
    println!("{} carts, {total} points, {skipped} skipped lines", tracks.len());
    Ok(())
}

// ---- run -------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn run(
    logs: &Path,
    field: &Path,
    calibration: &Path,
    config: Option<&Path>,
    sets: &[String],
    resolution: Option<f64>,
    label: Option<String>,
    out: &Path,
) -> Result<()> {
    let cfg = load_pipeline_config(config, sets, resolution)?;
    let cal = Calibration::load(calibration)
        .with_context(|| format!("loading calibration {}", calibration.display()))?;
    let (model, transform) = load_field_and_transform(field)?;
    let (tracks, skipped) = load_tracks(logs, &cal, &transform)?;
    let label = label.unwrap_or_else(|| {
        logs.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "day".into())
    });
    let output = run_day(&label, &tracks, &model, &cfg)?;
    write_day_artifacts(out, &output)?;
    cfg.save(&out.join("pipeline_config.txt"))
        .with_context(|| format!("writing {}", out.join("pipeline_config.txt").display()))?;
    let n_points: usize = output.yield_points.values().map(Vec::len).sum();
    println!(
        "{label}: {} carts in, {} skipped log lines, {} yield points, total {:.3} kg",
        tracks.len(),
        skipped,
        n_points,
        output.grid.total_ug() as f64 / 1e9
    );
    for s in &output.skipped {
        println!("skipped cart {} at {}: {}", s.cart_id, s.stage, s.reason);
    }
    for c in &output.unresolved {
        println!(
            "unresolved occupancy conflict: {} vs {} in row {} (overlap {:.2} m)",
            c.cart_k, c.cart_l, c.row, c.overlap
        );
    }
    Ok(())
}

// ---- evaluate --------------------------------------------------------

/// Assemble the full metric report from truth and per-cart yield points.
fn build_report(
    truth: &SimTruth,
    points_by_cart: &BTreeMap<String, Vec<YieldPoint>>,
    avg_tray_mass: f64,
) -> Result<MetricReport> {
    let all_segments = truth.gt_segments();
    let mut ordered: Vec<GtSegment> = Vec::new();
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut count_pairs: Vec<(f64, f64)> = Vec::new();
    let empty: Vec<YieldPoint> = Vec::new();
    for cart_id in truth.counts.keys() {
        let segs: Vec<GtSegment> = all_segments
            .iter()
            .filter(|s| &s.cart_id == cart_id)
            .cloned()
            .collect();
        let points = points_by_cart.get(cart_id).unwrap_or(&empty);
        pairs.extend(match_segments(&segs, points));
        ordered.extend(segs);
        let est_kg: f64 = points.iter().map(|p| p.mass_ug).sum::<i64>() as f64 / 1e9;
        let gt_trays = truth.counts[cart_id].total() as f64;
        count_pairs.push((gt_trays, est_kg / avg_tray_mass));
    }
    let grouped = group_by_tray(&ordered, &pairs);
    let (gt_counts, est_counts): (Vec<f64>, Vec<f64>) = count_pairs.iter().copied().unzip();
    Ok(MetricReport {
        row_level_acc: row_level_accuracy(&grouped).context("row-level accuracy")?,
        tray_level_acc: tray_level_accuracy(&grouped).context("tray-level accuracy")?,
        counts: tray_count_accuracy(&count_pairs).context("tray-count accuracy")?,
        pearson_r: pearson(&gt_counts, &est_counts),
        bland_altman: bland_altman(&count_pairs).context("bland-altman")?,
        zero_yield_fraction: None,
        n_trays: grouped.len(),
    })
}

fn load_run_yield_points(run: &Path) -> Result<BTreeMap<String, Vec<YieldPoint>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(run).with_context(|| format!("reading run directory {}", run.display()))? {
        let path = entry?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned());
        let Some(name) = name else { continue };
        let Some(stem) = name.strip_prefix("yield_points_").and_then(|n| n.strip_suffix(".csv"))
        else {
            continue;
        };
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let points = parse_yield_points(&text)
            .with_context(|| format!("[evaluate] parsing {}", path.display()))?;
        out.insert(stem.to_string(), points);
    }
    if out.is_empty() {
        bail!("no yield_points_*.csv files in {}", run.display());
    }
    Ok(out)
}

fn evaluate(truth_dir: &Path, run: &Path, avg_tray_mass: f64, out: Option<&Path>) -> Result<()> {
    let truth = SimTruth::load(truth_dir)
        .with_context(|| format!("loading truth from {}", truth_dir.display()))?;
    let points = load_run_yield_points(run)?;
    let report = build_report(&truth, &points, avg_tray_mass)?;
    print!("{}", report.render_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.txt"), report.render_text())
            .with_context(|| format!("writing {}", dir.join("report.txt").display()))?;
        fs::write(dir.join("report.kv"), report.to_kv().render())
            .with_context(|| format!("writing {}", dir.join("report.kv").display()))?;
    }
    Ok(())
}

// ---- season ----------------------------------------------------------

fn season(days: &[PathBuf], out: &Path) -> Result<()> {
    let mut grids = Vec::new();
    for day in days {
        let path = day.join("day_grid.txt");
        let grid = YieldGrid::load(&path)
            .with_context(|| format!("loading day grid {}", path.display()))?;
        grids.push(grid);
    }
    let season = accumulate_season(&grids).context("[season] accumulating day grids")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    season
        .save(&out.join("season_grid.txt"))
        .with_context(|| format!("writing {}", out.join("season_grid.txt").display()))?;
    fs::write(out.join("season_yield_map.csv"), serialize_yield_map(&season))
        .with_context(|| format!("writing {}", out.join("season_yield_map.csv").display()))?;
    println!(
        "season over {} days: {:.3} kg total",
        season.days.len(),
        season.total_ug() as f64 / 1e9
    );
    Ok(())
}
