//! The batch pipeline: ingest, dedup, stitch, interpolate and evaluate,
//! each stage materialized to a file under the output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dedup::{dedup_snapshot, DedupConfig};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_vs_margin, default_margins, spatial_resolution, stratify_by_interp_distance,
    AccuracyCurve, CurveRow, DetectionSet, Metric, SpatialResolution, DEFAULT_GRANULARITY_S,
};
use crate::ingest::{
    build_snapshots, open_source, parse_records, write_jsonl, Format, IngestOptions, IngestReport,
    RouteSet,
};
use crate::interpolate::{fill_trajectory, windowed_velocity, FillOptions, VelocityModel};
use crate::model::{
    EtaObservation, GroundTruthCrossing, LabeledObservation, Seconds, ServiceDay, Trajectory,
    DEFAULT_K,
};
use crate::stitch::{group_labeled, stitch_day, BusTrace, StitchConfig};

pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const STITCHED_FILE: &str = "stitched.jsonl";
pub const SKIPPED_FILE: &str = "skipped_snapshots.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const INTERPOLATED_FILE: &str = "interpolated.jsonl";
pub const VELOCITY_FILE: &str = "velocity.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Dedup,
    Stitch,
    Interpolate,
    Evaluate,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ingest" => Ok(Stage::Ingest),
            "dedup" => Ok(Stage::Dedup),
            "stitch" => Ok(Stage::Stitch),
            "interpolate" => Ok(Stage::Interpolate),
            "evaluate" | "eval" => Ok(Stage::Evaluate),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub routes: Option<PathBuf>,
    /// Feed file (CSV or JSONL, optionally gzipped).
    pub feed: Option<PathBuf>,
    /// Ground-truth crossings (JSONL); evaluation is skipped without it.
    pub ground_truth: Option<PathBuf>,
    pub sampling_period_s: Seconds,
    pub k_max: u8,
    /// Historical speed for records without a GPS fix, m/s.
    pub v_hist: f64,
    pub dedup: DedupConfig,
    pub stitch: StitchConfig,
    pub velocity_window_days: u32,
    pub backfill: bool,
    pub margins: Vec<Seconds>,
    pub granularity_s: Seconds,
    /// Recall the spatial resolution is reported for.
    pub resolution_target: f64,
    pub city_profile: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            routes: None,
            feed: None,
            ground_truth: None,
            sampling_period_s: 60,
            k_max: DEFAULT_K,
            v_hist: 0.0,
            dedup: DedupConfig::default(),
            stitch: StitchConfig::default(),
            velocity_window_days: 7,
            backfill: false,
            margins: default_margins(),
            granularity_s: DEFAULT_GRANULARITY_S,
            resolution_target: 0.8,
            city_profile: String::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_period_s <= 0 {
            return Err(Error::InvalidConfig(
                "sampling_period_s must be positive".into(),
            ));
        }
        if self.margins.windows(2).any(|w| w[0] >= w[1]) || self.margins.iter().any(|&m| m < 0) {
            return Err(Error::InvalidConfig(format!(
                "margins must be non-negative and sorted: {:?}",
                self.margins
            )));
        }
        if !(self.stitch.v_max_kmh > 0.0) {
            return Err(Error::InvalidConfig(
                "stitch.v_max_kmh must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            k_max: self.k_max,
            v_hist: self.v_hist,
        }
    }

    pub fn fill_options(&self) -> FillOptions {
        FillOptions {
            backfill: self.backfill,
        }
    }
}

/// A bounded pool for the per-day stages; 0 workers means one per core.
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = path
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("no {what} file configured")))?;
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

/// Reads and validates a feed file; the format follows the extension.
pub fn ingest_feed(
    path: &Path,
    routes: &RouteSet,
    options: &IngestOptions,
) -> Result<(Vec<EtaObservation>, IngestReport)> {
    let format = Format::from_path(path).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}: expected a .csv or .jsonl feed",
            path.display()
        ))
    })?;
    parse_records(open_source(path)?, format, routes, options)
}

fn install<R: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Buckets observations into snapshots and deduplicates each one. Output
/// is ordered by service day, then time, then progress descending.
pub fn dedup_observations(
    observations: Vec<EtaObservation>,
    routes: &RouteSet,
    sampling_period: Seconds,
    config: &DedupConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<LabeledObservation>> {
    let index = build_snapshots(observations, sampling_period)?;
    if index.superseded > 0 {
        log::info!(
            "{} observations superseded within a snapshot",
            index.superseded
        );
    }
    let days: Vec<(ServiceDay, Vec<crate::model::Snapshot>)> = index.days.into_iter().collect();
    let per_day = install(pool, || {
        days.par_iter()
            .map(|(key, snapshots)| {
                let route = routes.route_for(key)?;
                let mut out = Vec::new();
                for snap in snapshots {
                    out.extend(dedup_snapshot(snap, route, config)?);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_day.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    pub t: Seconds,
    pub reason: String,
}

/// A stitched progress trace with the service day it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayTrace {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    #[serde(flatten)]
    pub trace: BusTrace,
}

impl DayTrace {
    pub fn service_day(&self) -> ServiceDay {
        ServiceDay {
            service_id: self.service_id.clone(),
            direction: self.direction,
            date: self.date,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stitched {
    pub trajectories: Vec<Trajectory>,
    pub traces: Vec<DayTrace>,
    pub skipped: Vec<SkippedRecord>,
}

/// Stitches labeled observations per service day.
pub fn stitch_observations(
    labeled: Vec<LabeledObservation>,
    routes: &RouteSet,
    config: &StitchConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Stitched> {
    let mut by_day: BTreeMap<ServiceDay, Vec<LabeledObservation>> = BTreeMap::new();
    for o in labeled {
        by_day
            .entry(o.observation.service_day())
            .or_default()
            .push(o);
    }
    let days: Vec<(ServiceDay, Vec<LabeledObservation>)> = by_day.into_iter().collect();
    let work = || {
        days.into_par_iter()
            .map(|(key, obs)| {
                let route = routes.route_for(&key)?;
                let out = stitch_day(&key, &group_labeled(obs), route, config)?;
                let skipped = out
                    .skipped
                    .into_iter()
                    .map(|s| SkippedRecord {
                        service_id: key.service_id.clone(),
                        direction: key.direction,
                        date: key.date,
                        t: s.t,
                        reason: s.reason,
                    })
                    .collect::<Vec<_>>();
                let traces = out
                    .traces
                    .into_iter()
                    .map(|trace| DayTrace {
                        service_id: key.service_id.clone(),
                        direction: key.direction,
                        date: key.date,
                        trace,
                    })
                    .collect::<Vec<_>>();
                Ok((out.trajectories, traces, skipped))
            })
            .collect::<Result<Vec<_>>>()
    };
    let per_day = install(pool, work)?;
    let mut stitched = Stitched::default();
    for (t, traces, s) in per_day {
        stitched.trajectories.extend(t);
        stitched.traces.extend(traces);
        stitched.skipped.extend(s);
    }
    Ok(stitched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityEntry {
    pub date: NaiveDate,
    #[serde(flatten)]
    pub model: VelocityModel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interpolated {
    pub trajectories: Vec<Trajectory>,
    pub velocity: Vec<VelocityEntry>,
}

/// Fills every trajectory with a speed trained on the preceding
/// `window_days` of stitched trajectories for its service. Days without
/// usable training data pass through unfilled.
pub fn interpolate_trajectories(
    stitched: &[Trajectory],
    routes: &RouteSet,
    window_days: u32,
    options: FillOptions,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Interpolated> {
    let mut by_date: BTreeMap<NaiveDate, Vec<Trajectory>> = BTreeMap::new();
    let mut by_day: BTreeMap<ServiceDay, Vec<&Trajectory>> = BTreeMap::new();
    for t in stitched {
        by_date.entry(t.date()).or_default().push(t.clone());
        by_day.entry(t.service_day()).or_default().push(t);
    }
    let days: Vec<(ServiceDay, Vec<&Trajectory>)> = by_day.into_iter().collect();
    let work = || {
        days.par_iter()
            .map(|(key, trajectories)| {
                let route = routes.route_for(key)?;
                let model = match windowed_velocity(&by_date, key.date, window_days, route) {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("{key}: left unfilled: {e}");
                        return Ok((None, trajectories.iter().map(|&t| t.clone()).collect()));
                    }
                };
                let filled = trajectories
                    .iter()
                    .map(|t| fill_trajectory(t, route, &model, options))
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    Some(VelocityEntry {
                        date: key.date,
                        model,
                    }),
                    filled,
                ))
            })
            .collect::<Result<Vec<_>>>()
    };
    let per_day = install(pool, work)?;
    let mut out = Interpolated::default();
    for (model, filled) in per_day {
        out.velocity.extend(model);
        out.trajectories.extend(filled);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub service_id: String,
    pub direction: u8,
    pub detections: usize,
    pub truth: usize,
    pub curve: AccuracyCurve,
    pub interp_threshold_m: f64,
    pub v_avg: Option<f64>,
    pub resolution: Option<SpatialResolution>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<CurveRow>,
    pub services: Vec<ServiceMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings<'a> {
    pub margins: &'a [Seconds],
    pub granularity: Seconds,
    pub resolution_target: f64,
    pub city_profile: &'a str,
}

fn restrict(set: &DetectionSet, service: &str, direction: u8) -> DetectionSet {
    let keep = |k: &crate::eval::StopKey| k.service_id == service && k.direction == direction;
    DetectionSet {
        det: set
            .det
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        obs: set
            .obs
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

/// Accuracy curves per service, overall and split by interpolation span.
/// The spatial resolution uses the mean of the day's velocity models.
pub fn evaluate(
    trajectories: &[Trajectory],
    truth: &[GroundTruthCrossing],
    routes: &RouteSet,
    velocity: &[VelocityEntry],
    settings: EvalSettings<'_>,
) -> Result<Evaluation> {
    let set = DetectionSet::new(trajectories, truth, routes)?;
    let mut services: Vec<(String, u8)> = set
        .det
        .keys()
        .chain(set.obs.keys())
        .map(|k| (k.service_id.clone(), k.direction))
        .collect();
    services.sort();
    services.dedup();
    let mut out = Evaluation::default();
    for (service, direction) in services {
        let sub = restrict(&set, &service, direction);
        let curve = accuracy_vs_margin(&sub, settings.margins, settings.granularity)?;
        let strata =
            stratify_by_interp_distance(&sub, settings.margins, settings.granularity, None)?;
        let label = format!("{service}/{direction}");
        out.rows.extend(CurveRow::from_curve(
            &curve,
            "all",
            &label,
            settings.city_profile,
        ));
        for (name, c) in [("low", &strata.low), ("high", &strata.high)] {
            if let Some(c) = c {
                out.rows
                    .extend(CurveRow::from_curve(c, name, &label, settings.city_profile));
            }
        }
        let speeds: Vec<f64> = velocity
            .iter()
            .filter(|e| e.model.service_id == service && e.model.direction == direction)
            .map(|e| e.model.v)
            .collect();
        let v_avg = (!speeds.is_empty()).then(|| speeds.iter().sum::<f64>() / speeds.len() as f64);
        let resolution = match v_avg {
            Some(v) if !curve.points.is_empty() => Some(spatial_resolution(
                &curve,
                Metric::Recall,
                settings.resolution_target,
                v,
            )?),
            _ => None,
        };
        out.services.push(ServiceMetrics {
            service_id: service,
            direction,
            detections: sub.detection_count(),
            truth: sub.truth_count(),
            curve,
            interp_threshold_m: strata.threshold_m,
            v_avg,
            resolution,
        });
    }
    Ok(out)
}

/// Everything the in-memory pipeline produces.
#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    pub report: IngestReport,
    pub labeled: Vec<LabeledObservation>,
    pub stitched: Stitched,
    pub interpolated: Interpolated,
}

/// Runs dedup, stitch and interpolate on already-ingested observations.
pub fn reconstruct(
    observations: Vec<EtaObservation>,
    routes: &RouteSet,
    config: &PipelineConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    let pool = worker_pool(config.workers)?;
    let labeled = dedup_observations(
        observations,
        routes,
        config.sampling_period_s,
        &config.dedup,
        Some(&pool),
    )?;
    let stitched = stitch_observations(labeled.clone(), routes, &config.stitch, Some(&pool))?;
    let interpolated = interpolate_trajectories(
        &stitched.trajectories,
        routes,
        config.velocity_window_days,
        config.fill_options(),
        Some(&pool),
    )?;
    Ok(Reconstruction {
        report: IngestReport::default(),
        labeled,
        stitched,
        interpolated,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

pub fn read_jsonl_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    crate::ingest::read_jsonl(open_source(path)?)
}

pub fn write_curves_file(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    crate::eval::emit_curves(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

/// What a run wrote and a few headline counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub stage: Option<Stage>,
    pub files: Vec<PathBuf>,
    pub observations: usize,
    pub rejected: usize,
    pub labeled: usize,
    pub trajectories: usize,
    pub skipped_snapshots: usize,
}

/// Runs stages in order up to and including `until`, writing each stage's
/// output under `config.out_dir`.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<RunSummary> {
    config.validate()?;
    let routes_path = require(&config.routes, "routes")?;
    let feed_path = require(&config.feed, "feed")?;
    let truth_path = if until >= Stage::Evaluate {
        Some(require(&config.ground_truth, "ground truth")?)
    } else {
        None
    };
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let pool = worker_pool(config.workers)?;
    let routes = RouteSet::load(routes_path)?;
    let mut summary = RunSummary {
        stage: Some(until),
        ..Default::default()
    };
    let wrote = |summary: &mut RunSummary, name: &str| summary.files.push(out.join(name));

    let (observations, report) = ingest_feed(feed_path, &routes, &config.ingest_options())?;
    log::info!(
        "ingested {} of {} records ({} rejected)",
        report.accepted,
        report.total,
        report.rejected_total()
    );
    summary.observations = observations.len();
    summary.rejected = report.rejected_total();
    write_json(&out.join(INGEST_REPORT_FILE), &report)?;
    wrote(&mut summary, INGEST_REPORT_FILE);
    if until == Stage::Ingest {
        write_jsonl_file(&out.join(OBSERVATIONS_FILE), &observations)?;
        wrote(&mut summary, OBSERVATIONS_FILE);
        return Ok(summary);
    }

    let labeled = dedup_observations(
        observations,
        &routes,
        config.sampling_period_s,
        &config.dedup,
        Some(&pool),
    )?;
    summary.labeled = labeled.len();
    write_jsonl_file(&out.join(LABELED_FILE), &labeled)?;
    wrote(&mut summary, LABELED_FILE);
    if until == Stage::Dedup {
        return Ok(summary);
    }

    let stitched = stitch_observations(labeled, &routes, &config.stitch, Some(&pool))?;
    summary.trajectories = stitched.trajectories.len();
    summary.skipped_snapshots = stitched.skipped.len();
    write_jsonl_file(&out.join(STITCHED_FILE), &stitched.trajectories)?;
    write_jsonl_file(&out.join(TRACES_FILE), &stitched.traces)?;
    write_jsonl_file(&out.join(SKIPPED_FILE), &stitched.skipped)?;
    wrote(&mut summary, STITCHED_FILE);
    wrote(&mut summary, TRACES_FILE);
    wrote(&mut summary, SKIPPED_FILE);
    if until == Stage::Stitch {
        return Ok(summary);
    }

    let interpolated = interpolate_trajectories(
        &stitched.trajectories,
        &routes,
        config.velocity_window_days,
        config.fill_options(),
        Some(&pool),
    )?;
    write_jsonl_file(&out.join(INTERPOLATED_FILE), &interpolated.trajectories)?;
    write_json(&out.join(VELOCITY_FILE), &interpolated.velocity)?;
    wrote(&mut summary, INTERPOLATED_FILE);
    wrote(&mut summary, VELOCITY_FILE);
    let Some(truth_path) = truth_path else {
        return Ok(summary);
    };

    let truth: Vec<GroundTruthCrossing> = read_jsonl_file(truth_path)?;
    let evaluation = evaluate(
        &interpolated.trajectories,
        &truth,
        &routes,
        &interpolated.velocity,
        EvalSettings {
            margins: &config.margins,
            granularity: config.granularity_s,
            resolution_target: config.resolution_target,
            city_profile: &config.city_profile,
        },
    )?;
    write_curves_file(&out.join(CURVES_FILE), &evaluation.rows)?;
    write_json(&out.join(METRICS_FILE), &evaluation.services)?;
    wrote(&mut summary, CURVES_FILE);
    wrote(&mut summary, METRICS_FILE);
    Ok(summary)
}
