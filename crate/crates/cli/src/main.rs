use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bustrace::dedup::{calibrate_pdist, default_epsilon_grid, DedupMode};
use bustrace::eval::{predict_next_arrival, SegmentSpeeds, SpeedSource};
use bustrace::ingest::{build_snapshots, write_feed_records, Format, RouteSet};
use bustrace::interpolate::{historical_velocity, VelocityModel};
use bustrace::pipeline::{
    self, dedup_observations, evaluate, ingest_feed, interpolate_trajectories, read_jsonl_file,
    run_pipeline, stitch_observations, write_curves_file, write_json, write_jsonl_file, DayTrace,
    EvalSettings, PipelineConfig, Stage, VelocityEntry,
};
use bustrace::sim::{emit_eta_feed, generate_world, WorldConfig};
use bustrace::{
    EtaObservation, GroundTruthCrossing, LabeledObservation, Seconds, ServiceDay, Trajectory,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "bustrace",
    version,
    about = "Reconstruct bus trajectories from ETA feeds"
)]
struct Cli {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true, env = "BUSTRACE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "BUSTRACE_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "BUSTRACE_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(
        long,
        global = true,
        env = "BUSTRACE_LOG_LEVEL",
        default_value = "info"
    )]
    log_level: String,
    /// Worker threads for per-day stages (0 = one per core).
    #[arg(long, global = true, env = "BUSTRACE_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated day: feed, ground truth and route file.
    Simulate {
        /// World description (TOML); defaults to the chosen preset.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::NonCbd)]
        preset: Preset,
        /// Switch off every noise source.
        #[arg(long)]
        noise_free: bool,
        #[arg(long, value_enum, default_value_t = FeedFormat::Csv)]
        format: FeedFormat,
    },
    /// Validate a feed into observations and a rejection report.
    Ingest {
        #[command(flatten)]
        inputs: FeedInputs,
    },
    /// Label each snapshot's sightings with local bus IDs.
    Dedup {
        #[command(flatten)]
        inputs: FeedInputs,
        /// Observations from `ingest`, instead of a raw feed.
        #[arg(long, conflicts_with = "feed")]
        input: Option<PathBuf>,
        #[command(flatten)]
        dedup: DedupArgs,
    },
    /// Link labeled snapshots into trajectories.
    Stitch {
        #[arg(long)]
        routes: Option<PathBuf>,
        /// Labeled observations from `dedup`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        v_max_kmh: Option<f64>,
    },
    /// Fill unobserved stops from a historical average speed.
    Interpolate {
        #[arg(long)]
        routes: Option<PathBuf>,
        /// Stitched trajectories.
        #[arg(long)]
        input: PathBuf,
        /// Days of history the speed is trained on.
        #[arg(long)]
        velocity_window: Option<u32>,
        /// Also extrapolate stops before the first observation.
        #[arg(long)]
        backfill: bool,
    },
    /// Run the stages in order, stopping after `--stage`.
    Run {
        #[command(flatten)]
        inputs: FeedInputs,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        #[command(flatten)]
        dedup: DedupArgs,
    },
    /// Precision/recall curves of trajectories against ground truth.
    Evaluate {
        #[arg(long)]
        routes: Option<PathBuf>,
        /// Trajectories to score.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Comma-separated error margins in seconds.
        #[arg(long, value_delimiter = ',')]
        margins: Option<Vec<Seconds>>,
    },
    /// Pick the pdist threshold with the fewest failing snapshots.
    CalibratePdist {
        #[command(flatten)]
        inputs: FeedInputs,
        /// ETA threshold in minutes for the failure rule.
        #[arg(long, default_value_t = 10.0)]
        max_gap_min: f64,
    },
    /// Next-stop arrival predictions from realtime and historic speeds.
    Predict {
        #[arg(long)]
        routes: Option<PathBuf>,
        /// Trajectories whose observed arrivals are predicted from.
        #[arg(long)]
        input: PathBuf,
        /// Same-day stitched traces for realtime speeds.
        #[arg(long)]
        traces: PathBuf,
        /// Training traces for historic speeds; defaults to `--traces`.
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long, default_value_t = 3600)]
        window_s: Seconds,
    },
}

#[derive(clap::Args, Debug)]
struct FeedInputs {
    #[arg(long)]
    routes: Option<PathBuf>,
    /// Feed file (.csv or .jsonl, optionally gzipped).
    #[arg(long)]
    feed: Option<PathBuf>,
    #[arg(long)]
    sampling_period: Option<Seconds>,
}

#[derive(clap::Args, Debug)]
struct DedupArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// pdist grouping threshold in metres.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reference speed for eta mode, m/s.
    #[arg(long)]
    v_ref: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    NonCbd,
    Cbd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeedFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dist,
    Eta,
    Pdist,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Ingest,
    Dedup,
    Stitch,
    Interpolate,
    Evaluate,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Ingest => Stage::Ingest,
            StageArg::Dedup => Stage::Dedup,
            StageArg::Stitch => Stage::Stitch,
            StageArg::Interpolate => Stage::Interpolate,
            StageArg::Evaluate => Stage::Evaluate,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            PipelineConfig::from_toml(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    Ok(config)
}

impl FeedInputs {
    fn apply(&self, config: &mut PipelineConfig) {
        if let Some(r) = &self.routes {
            config.routes = Some(r.clone());
        }
        if let Some(f) = &self.feed {
            config.feed = Some(f.clone());
        }
        if let Some(p) = self.sampling_period {
            config.sampling_period_s = p;
        }
    }
}

impl DedupArgs {
    fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        let current = config.dedup.mode;
        config.dedup.mode = match (self.mode, current) {
            (Some(ModeArg::Dist), _) => DedupMode::Dist,
            (Some(ModeArg::Eta), DedupMode::Eta { v_ref }) => DedupMode::Eta {
                v_ref: self.v_ref.unwrap_or(v_ref),
            },
            (Some(ModeArg::Eta), _) => DedupMode::Eta {
                v_ref: self.v_ref.context("--mode eta needs --v-ref")?,
            },
            (Some(ModeArg::Pdist), DedupMode::Pdist { epsilon }) => DedupMode::Pdist {
                epsilon: self.epsilon.unwrap_or(epsilon),
            },
            (Some(ModeArg::Pdist), _) => DedupMode::Pdist {
                epsilon: self.epsilon.context("--mode pdist needs --epsilon")?,
            },
            (None, DedupMode::Pdist { epsilon }) => DedupMode::Pdist {
                epsilon: self.epsilon.unwrap_or(epsilon),
            },
            (None, DedupMode::Eta { v_ref }) => DedupMode::Eta {
                v_ref: self.v_ref.unwrap_or(v_ref),
            },
            (None, m) => m,
        };
        Ok(())
    }
}

fn routes_from(flag: &Option<PathBuf>, config: &PipelineConfig) -> Result<RouteSet> {
    let path = flag
        .as_ref()
        .or(config.routes.as_ref())
        .context("no route file: pass --routes or set `routes` in the config")?;
    RouteSet::load(path).with_context(|| format!("loading routes from {}", path.display()))
}

fn feed_from(config: &PipelineConfig) -> Result<&Path> {
    let path = config
        .feed
        .as_deref()
        .context("no feed: pass --feed or set `feed` in the config")?;
    if !path.exists() {
        bail!("feed {} does not exist", path.display());
    }
    Ok(path)
}

fn read_feed(config: &PipelineConfig, routes: &RouteSet) -> Result<Vec<EtaObservation>> {
    let feed = feed_from(config)?;
    let (observations, report) = ingest_feed(feed, routes, &config.ingest_options())
        .with_context(|| format!("reading feed {}", feed.display()))?;
    if report.rejected_total() > 0 {
        log::warn!(
            "{} of {} records rejected",
            report.rejected_total(),
            report.total
        );
    }
    Ok(observations)
}

fn out_file(config: &PipelineConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    Ok(config.out_dir.join(name))
}

fn simulate(
    config: &PipelineConfig,
    world: &Option<PathBuf>,
    preset: Preset,
    noise_free: bool,
    format: FeedFormat,
    seed: Option<u64>,
) -> Result<()> {
    let mut world_config = match world {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading world {}", path.display()))?;
            WorldConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match preset {
            Preset::NonCbd => WorldConfig::non_cbd(),
            Preset::Cbd => WorldConfig::cbd(),
        },
    };
    if noise_free {
        world_config = world_config.noise_free();
    }
    if let Some(seed) = seed {
        world_config.seed = seed;
    }
    world_config.validate()?;
    let world = generate_world(&world_config)?;
    let feed = emit_eta_feed(&world, &world_config);
    let (name, fmt) = match format {
        FeedFormat::Csv => ("feed.csv", Format::Csv),
        FeedFormat::Jsonl => ("feed.jsonl", Format::Jsonl),
    };
    let records: Vec<_> = feed.observations.iter().map(Into::into).collect();
    let file = fs::File::create(out_file(config, name)?)?;
    let mut writer = std::io::BufWriter::new(file);
    write_feed_records(&records, &mut writer, fmt)?;
    std::io::Write::flush(&mut writer)?;
    write_jsonl_file(&out_file(config, "truth.jsonl")?, &world.crossings)?;
    RouteSet::new([world.route.clone()]).save(&out_file(config, "routes.json")?)?;
    fs::write(
        out_file(config, "world.toml")?,
        toml::to_string(&world_config)?,
    )?;
    #[derive(Serialize)]
    struct Summary {
        buses: usize,
        regular: usize,
        crossings: usize,
        observations: usize,
        reports: usize,
        dropped_reports: usize,
    }
    write_json(
        &out_file(config, "simulation.json")?,
        &Summary {
            buses: world.buses.len(),
            regular: world.regular_count(),
            crossings: world.crossings.len(),
            observations: feed.observations.len(),
            reports: feed.reports,
            dropped_reports: feed.dropped_reports,
        },
    )?;
    log::info!(
        "simulated {} buses, {} observations into {}",
        world.buses.len(),
        feed.observations.len(),
        config.out_dir.display()
    );
    Ok(())
}

fn velocity_per_day(trajectories: &[Trajectory], routes: &RouteSet) -> Vec<VelocityEntry> {
    let mut by_day: BTreeMap<ServiceDay, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        by_day.entry(t.service_day()).or_default().push(t.clone());
    }
    by_day
        .into_iter()
        .filter_map(|(key, ts)| {
            let route = routes.route_for(&key).ok()?;
            let model = historical_velocity(&ts, route).ok()?;
            Some(VelocityEntry {
                date: key.date,
                model,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PredictionRow {
    service_id: String,
    direction: u8,
    date: chrono::NaiveDate,
    bus_id: u32,
    stop_index: usize,
    t_prev: Seconds,
    realtime_t: f64,
    realtime_fallback: bool,
    historic_t: f64,
    historic_fallback: bool,
}

fn predict(
    config: &PipelineConfig,
    routes: &RouteSet,
    input: &Path,
    traces: &Path,
    training: Option<&Path>,
    window_s: Seconds,
) -> Result<()> {
    let trajectories: Vec<Trajectory> = read_jsonl_file(input)?;
    let today: Vec<DayTrace> = read_jsonl_file(traces)?;
    let training: Vec<DayTrace> = match training {
        Some(p) => read_jsonl_file(p)?,
        None => today.clone(),
    };
    let mut rows = Vec::new();
    let mut by_day: BTreeMap<ServiceDay, Vec<&Trajectory>> = BTreeMap::new();
    for t in &trajectories {
        by_day.entry(t.service_day()).or_default().push(t);
    }
    for (key, ts) in by_day {
        let route = routes.route_for(&key)?;
        let same_route =
            |d: &&DayTrace| d.service_id == key.service_id && d.direction == key.direction;
        let realtime = SegmentSpeeds::from_traces(
            today
                .iter()
                .filter(same_route)
                .filter(|d| d.date == key.date)
                .map(|d| &d.trace),
            route,
        );
        let historic =
            SegmentSpeeds::from_traces(training.iter().filter(same_route).map(|d| &d.trace), route);
        let owned: Vec<Trajectory> = ts.iter().map(|&t| t.clone()).collect();
        let fallback = match historical_velocity(&owned, route) {
            Ok(m) => m,
            Err(_) => VelocityModel::constant(route, 5.0, "default 5 m/s")?,
        };
        for t in ts {
            for p in t.observed().filter(|p| p.stop_index + 1 < route.len()) {
                let s = p.stop_index;
                let rt = predict_next_arrival(
                    p.t_arrival,
                    s,
                    route,
                    SpeedSource::Realtime { window_s },
                    &realtime,
                    &fallback,
                )?;
                let hist = predict_next_arrival(
                    p.t_arrival,
                    s,
                    route,
                    SpeedSource::Historic,
                    &historic,
                    &fallback,
                )?;
                rows.push(PredictionRow {
                    service_id: key.service_id.clone(),
                    direction: key.direction,
                    date: key.date,
                    bus_id: t.bus_id(),
                    stop_index: s,
                    t_prev: p.t_arrival,
                    realtime_t: rt.t_pred,
                    realtime_fallback: rt.fallback,
                    historic_t: hist.t_pred,
                    historic_fallback: hist.fallback,
                });
            }
        }
    }
    write_jsonl_file(&out_file(config, "predictions.jsonl")?, &rows)?;
    log::info!("wrote {} predictions", rows.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let mut config = load_config(&cli)?;
    let workers = pipeline::worker_pool(config.workers)?;
    let pool = Some(&workers);
    match &cli.command {
        Command::Simulate {
            world,
            preset,
            noise_free,
            format,
        } => {
            simulate(&config, world, *preset, *noise_free, *format, cli.seed)?;
        }
        Command::Ingest { inputs } => {
            inputs.apply(&mut config);
            let routes = routes_from(&None, &config)?;
            let feed = feed_from(&config)?;
            let (observations, report) = ingest_feed(feed, &routes, &config.ingest_options())?;
            write_jsonl_file(
                &out_file(&config, pipeline::OBSERVATIONS_FILE)?,
                &observations,
            )?;
            write_json(&out_file(&config, pipeline::INGEST_REPORT_FILE)?, &report)?;
            log::info!("accepted {} of {} records", report.accepted, report.total);
        }
        Command::Dedup {
            inputs,
            input,
            dedup,
        } => {
            inputs.apply(&mut config);
            dedup.apply(&mut config)?;
            let routes = routes_from(&None, &config)?;
            let observations = match input {
                Some(p) => {
                    read_jsonl_file(p).with_context(|| format!("reading {}", p.display()))?
                }
                None => read_feed(&config, &routes)?,
            };
            let labeled = dedup_observations(
                observations,
                &routes,
                config.sampling_period_s,
                &config.dedup,
                pool,
            )?;
            write_jsonl_file(&out_file(&config, pipeline::LABELED_FILE)?, &labeled)?;
            log::info!("kept {} labeled observations", labeled.len());
        }
        Command::Stitch {
            routes,
            input,
            v_max_kmh,
        } => {
            if let Some(v) = v_max_kmh {
                config.stitch.v_max_kmh = *v;
            }
            let routes = routes_from(routes, &config)?;
            let labeled: Vec<LabeledObservation> = read_jsonl_file(input)?;
            let stitched = stitch_observations(labeled, &routes, &config.stitch, pool)?;
            write_jsonl_file(
                &out_file(&config, pipeline::STITCHED_FILE)?,
                &stitched.trajectories,
            )?;
            write_jsonl_file(&out_file(&config, pipeline::TRACES_FILE)?, &stitched.traces)?;
            write_jsonl_file(
                &out_file(&config, pipeline::SKIPPED_FILE)?,
                &stitched.skipped,
            )?;
            log::info!(
                "{} trajectories, {} snapshots skipped",
                stitched.trajectories.len(),
                stitched.skipped.len()
            );
        }
        Command::Interpolate {
            routes,
            input,
            velocity_window,
            backfill,
        } => {
            if let Some(w) = velocity_window {
                config.velocity_window_days = *w;
            }
            config.backfill |= *backfill;
            let routes = routes_from(routes, &config)?;
            let stitched: Vec<Trajectory> = read_jsonl_file(input)?;
            let out = interpolate_trajectories(
                &stitched,
                &routes,
                config.velocity_window_days,
                config.fill_options(),
                pool,
            )?;
            write_jsonl_file(
                &out_file(&config, pipeline::INTERPOLATED_FILE)?,
                &out.trajectories,
            )?;
            write_json(&out_file(&config, pipeline::VELOCITY_FILE)?, &out.velocity)?;
        }
        Command::Run {
            inputs,
            ground_truth,
            stage,
            dedup,
        } => {
            inputs.apply(&mut config);
            dedup.apply(&mut config)?;
            if let Some(g) = ground_truth {
                config.ground_truth = Some(g.clone());
            }
            let until = match stage {
                Some(s) => Stage::from(*s),
                None if config.ground_truth.is_some() => Stage::Evaluate,
                None => Stage::Interpolate,
            };
            let summary = run_pipeline(&config, until)?;
            log::info!(
                "{} observations, {} trajectories, {} files in {}",
                summary.observations,
                summary.trajectories,
                summary.files.len(),
                config.out_dir.display()
            );
        }
        Command::Evaluate {
            routes,
            input,
            ground_truth,
            margins,
        } => {
            if let Some(m) = margins {
                config.margins = m.clone();
            }
            config.validate()?;
            let routes = routes_from(routes, &config)?;
            let truth_path = ground_truth
                .as_ref()
                .or(config.ground_truth.as_ref())
                .context("no ground truth: pass --ground-truth")?;
            let trajectories: Vec<Trajectory> = read_jsonl_file(input)?;
            let truth: Vec<GroundTruthCrossing> = read_jsonl_file(truth_path)?;
            let velocity = velocity_per_day(&trajectories, &routes);
            let evaluation = evaluate(
                &trajectories,
                &truth,
                &routes,
                &velocity,
                EvalSettings {
                    margins: &config.margins,
                    granularity: config.granularity_s,
                    resolution_target: config.resolution_target,
                    city_profile: &config.city_profile,
                },
            )?;
            write_curves_file(&out_file(&config, pipeline::CURVES_FILE)?, &evaluation.rows)?;
            write_json(
                &out_file(&config, pipeline::METRICS_FILE)?,
                &evaluation.services,
            )?;
        }
        Command::CalibratePdist {
            inputs,
            max_gap_min,
        } => {
            inputs.apply(&mut config);
            let routes = routes_from(&None, &config)?;
            let observations = read_feed(&config, &routes)?;
            let index = build_snapshots(observations, config.sampling_period_s)?;
            let snapshots: Vec<_> = index.days.into_values().flatten().collect();
            let calibration = calibrate_pdist(&snapshots, &default_epsilon_grid(), *max_gap_min)?;
            log::info!("epsilon* = {} m", calibration.epsilon);
            write_json(&out_file(&config, "calibration.json")?, &calibration)?;
        }
        Command::Predict {
            routes,
            input,
            traces,
            training,
            window_s,
        } => {
            let routes = routes_from(routes, &config)?;
            predict(
                &config,
                &routes,
                input,
                traces,
                training.as_deref(),
                *window_s,
            )?;
        }
    }
    Ok(())
}
