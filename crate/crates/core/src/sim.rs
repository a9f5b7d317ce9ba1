//! A seeded single-route transit world: buses dispatched on a headway,
//! moving with a time-of-day speed profile and dwelling at stops, observed
//! through a K-nearest ETA feed with dropped reports and noisy fixes.
//!
//! The CBD and non-CBD presets are invented profiles (speed, stop spacing,
//! headway) meant to exercise the dense/slow versus sparse/fast contrast.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    progress_from_parts, EtaObservation, GroundTruthCrossing, LatLon, LocalFrame, Route, Seconds,
    DEFAULT_K,
};

const WORLD_STREAM: u64 = 1;
const FEED_STREAM: u64 = 2;

/// A value that applies from `from_s` until the next band starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub from_s: Seconds,
    pub value: f64,
}

fn band_value(bands: &[Band], t: f64) -> f64 {
    bands
        .iter()
        .take_while(|b| b.from_s as f64 <= t)
        .last()
        .or(bands.first())
        .map_or(0.0, |b| b.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteConfig {
    pub service_id: String,
    pub direction: u8,
    pub stops: usize,
    pub spacing_m: f64,
    /// Cycled stop spacings; overrides `spacing_m` when non-empty.
    pub spacing_pattern: Vec<f64>,
    pub origin: LatLon,
    /// Heading change per stop in radians, alternating in sign every few
    /// stops so the route meanders.
    pub bend_rad: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            service_id: "SIM".into(),
            direction: 1,
            stops: 30,
            spacing_m: 700.0,
            spacing_pattern: Vec::new(),
            origin: LatLon::new(1.3521, 103.8198),
            bend_rad: 0.08,
        }
    }
}

impl RouteConfig {
    pub fn spacing(&self, segment: usize) -> f64 {
        if self.spacing_pattern.is_empty() {
            self.spacing_m
        } else {
            self.spacing_pattern[segment % self.spacing_pattern.len()]
        }
    }

    pub fn build(&self) -> Result<Route> {
        if self.stops < 2 {
            return Err(Error::InvalidConfig(
                "a route needs at least two stops".into(),
            ));
        }
        if (0..self.stops - 1).any(|s| !(self.spacing(s) > 0.0)) {
            return Err(Error::InvalidConfig("stop spacing must be positive".into()));
        }
        let frame = LocalFrame::new(self.origin);
        let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
        let mut positions = vec![("ST000".to_string(), frame.to_latlon(x, y))];
        for s in 0..self.stops - 1 {
            let sign = if (s / 4) % 2 == 0 { 1.0 } else { -1.0 };
            heading += sign * self.bend_rad;
            x += self.spacing(s) * heading.cos();
            y += self.spacing(s) * heading.sin();
            positions.push((format!("ST{:03}", s + 1), frame.to_latlon(x, y)));
        }
        Route::from_positions(&self.service_id, self.direction, positions, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipModel {
    /// Stops drop their whole report for a snapshot.
    #[default]
    Report,
    /// Buses pass stops without dwelling; reports are complete.
    NoDwell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_skip_report: f64,
    pub skip_model: SkipModel,
    /// Chance, per scheduled dispatch, of an extra bus joining mid-route.
    pub surplus_rate: f64,
    /// Chance that the next dispatch leaves right behind this one.
    pub pairing_prob: f64,
    pub pairing_gap_s: f64,
    pub eta_sigma_min: f64,
    pub gps_sigma_m: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_skip_report: 0.2478,
            skip_model: SkipModel::Report,
            surplus_rate: 0.0529,
            pairing_prob: 0.05,
            pairing_gap_s: 60.0,
            eta_sigma_min: 0.3,
            gps_sigma_m: 15.0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            p_skip_report: 0.0,
            skip_model: SkipModel::Report,
            surplus_rate: 0.0,
            pairing_prob: 0.0,
            pairing_gap_s: 60.0,
            eta_sigma_min: 0.0,
            gps_sigma_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedConfig {
    pub k: u8,
    pub period_s: Seconds,
}

impl Default for FeedConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            period_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub date: NaiveDate,
    pub route: RouteConfig,
    pub service_start_s: Seconds,
    pub service_end_s: Seconds,
    pub headways: Vec<Band>,
    /// Cruise speed in m/s by time of day.
    pub speed_profile: Vec<Band>,
    /// Per-bus speed offset, standard deviation in m/s.
    pub speed_jitter_mps: f64,
    /// Per-segment relative speed noise.
    pub segment_speed_sigma: f64,
    pub dwell_s: f64,
    pub dwell_sigma_s: f64,
    pub noise: NoiseConfig,
    pub feed: FeedConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::non_cbd()
    }
}

impl WorldConfig {
    /// Outskirts profile: 30 km/h, 700 m stop spacing.
    pub fn non_cbd() -> Self {
        Self {
            seed: 1,
            date: NaiveDate::from_ymd_opt(2018, 6, 1).expect("valid date"),
            route: RouteConfig::default(),
            service_start_s: 6 * 3600,
            service_end_s: 22 * 3600,
            headways: vec![Band {
                from_s: 0,
                value: 600.0,
            }],
            speed_profile: vec![Band {
                from_s: 0,
                value: 30.0 / 3.6,
            }],
            speed_jitter_mps: 0.4,
            segment_speed_sigma: 0.1,
            dwell_s: 20.0,
            dwell_sigma_s: 5.0,
            noise: NoiseConfig::default(),
            feed: FeedConfig::default(),
        }
    }

    /// Central profile: 15 km/h, 300 m stop spacing.
    pub fn cbd() -> Self {
        let mut c = Self::non_cbd();
        c.route.spacing_m = 300.0;
        c.route.service_id = "SIM-CBD".into();
        c.speed_profile = vec![Band {
            from_s: 0,
            value: 15.0 / 3.6,
        }];
        c
    }

    /// Switches every noise source off, including speed and dwell jitter.
    pub fn noise_free(mut self) -> Self {
        self.noise = NoiseConfig::none();
        self.speed_jitter_mps = 0.0;
        self.segment_speed_sigma = 0.0;
        self.dwell_sigma_s = 0.0;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let n = &self.noise;
        for (name, p) in [
            ("p_skip_report", n.p_skip_report),
            ("surplus_rate", n.surplus_rate),
            ("pairing_prob", n.pairing_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, s) in [
            ("eta_sigma_min", n.eta_sigma_min),
            ("gps_sigma_m", n.gps_sigma_m),
            ("speed_jitter_mps", self.speed_jitter_mps),
            ("segment_speed_sigma", self.segment_speed_sigma),
            ("dwell_sigma_s", self.dwell_sigma_s),
            ("dwell_s", self.dwell_s),
            ("pairing_gap_s", n.pairing_gap_s),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be non-negative, got {s}"));
            }
        }
        if self.feed.k != DEFAULT_K {
            return bad(format!("feed.k must be {DEFAULT_K}, got {}", self.feed.k));
        }
        if self.feed.period_s <= 0 {
            return bad("feed.period_s must be positive".into());
        }
        if self.service_end_s <= self.service_start_s {
            return bad("service window is empty".into());
        }
        if self.headways.is_empty() || self.speed_profile.is_empty() {
            return bad("headways and speed_profile need at least one band".into());
        }
        if let Some(h) = self.headways.iter().find(|h| !(h.value > 0.0)) {
            return bad(format!("headway must be positive, got {}", h.value));
        }
        if let Some(h) = self.headways.iter().find(|h| h.value < self.dwell_s) {
            return bad(format!(
                "headway {} s is shorter than the {} s dwell",
                h.value, self.dwell_s
            ));
        }
        if let Some(v) = self.speed_profile.iter().find(|v| !(v.value > 0.0)) {
            return bad(format!("speed must be positive, got {}", v.value));
        }
        if self.headways.windows(2).any(|w| w[0].from_s >= w[1].from_s)
            || self
                .speed_profile
                .windows(2)
                .any(|w| w[0].from_s >= w[1].from_s)
        {
            return bad("bands must be in increasing start order".into());
        }
        Ok(())
    }

    pub fn headway_at(&self, t: f64) -> f64 {
        band_value(&self.headways, t)
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        band_value(&self.speed_profile, t)
    }

    /// Scheduled dispatch instants, ignoring pairing.
    pub fn scheduled_dispatches(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut t = self.service_start_s as f64;
        while t < self.service_end_s as f64 {
            out.push(t);
            t += self.headway_at(t);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Regular,
    Surplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBus {
    pub bus_id: u32,
    pub kind: BusKind,
    pub entry_stop: usize,
    /// Arrival time at each stop, `None` upstream of the entry stop.
    pub arrivals: Vec<Option<f64>>,
    /// Departure time from each stop (equal to arrival where it does not dwell).
    pub departures: Vec<Option<f64>>,
}

impl SimBus {
    pub fn entry_time(&self) -> f64 {
        self.arrivals[self.entry_stop].expect("entry stop has an arrival")
    }

    pub fn finish_time(&self) -> f64 {
        self.arrivals
            .last()
            .copied()
            .flatten()
            .expect("every bus reaches the end")
    }

    /// Chainage at time `t`, or `None` outside the bus's service.
    pub fn progress_at(&self, t: f64, route: &Route) -> Option<f64> {
        if t < self.entry_time() || t > self.finish_time() {
            return None;
        }
        for s in self.entry_stop..route.len() {
            let d = self.departures[s]?;
            if t <= d {
                return Some(route.chainage(s));
            }
            let a_next = self.arrivals.get(s + 1).copied().flatten();
            if let Some(a_next) = a_next {
                if t < a_next {
                    let frac = (t - d) / (a_next - d);
                    return Some(
                        route.chainage(s) + frac * (route.chainage(s + 1) - route.chainage(s)),
                    );
                }
            }
        }
        Some(route.length())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTrace {
    pub route: Route,
    pub date: NaiveDate,
    pub buses: Vec<SimBus>,
    pub crossings: Vec<GroundTruthCrossing>,
}

impl WorldTrace {
    pub fn regular_count(&self) -> usize {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Regular)
            .count()
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative")
}

fn run_bus(
    config: &WorldConfig,
    route: &Route,
    entry_stop: usize,
    entry_t: f64,
    speed_offset: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let n = route.len();
    let mut arrivals = vec![None; n];
    let mut departures = vec![None; n];
    let seg_noise = normal(config.segment_speed_sigma);
    let dwell_noise = normal(config.dwell_sigma_s);
    let mut t = entry_t;
    for s in entry_stop..n {
        arrivals[s] = Some(t);
        let last = s + 1 == n;
        let dwell = if last || s == entry_stop {
            0.0
        } else {
            let skip = config.noise.skip_model == SkipModel::NoDwell
                && rng.random_bool(config.noise.p_skip_report);
            if skip {
                0.0
            } else {
                (config.dwell_s + dwell_noise.sample(rng)).max(0.0)
            }
        };
        t += dwell;
        departures[s] = Some(t);
        if !last {
            let v = (config.speed_at(t) + speed_offset) * (1.0 + seg_noise.sample(rng));
            let v = v.max(0.5);
            t += (route.chainage(s + 1) - route.chainage(s)) / v;
        }
    }
    (arrivals, departures)
}

/// Simulates one service day. The same config always yields the same world.
pub fn generate_world(config: &WorldConfig) -> Result<WorldTrace> {
    config.validate()?;
    let route = config.route.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(WORLD_STREAM);
    let jitter = normal(config.speed_jitter_mps);

    let schedule = config.scheduled_dispatches();
    let mut pending: Vec<(f64, BusKind, usize, f64)> = Vec::new();
    let mut paired_next = false;
    let mut prev_dispatch = f64::NEG_INFINITY;
    for (i, &nominal) in schedule.iter().enumerate() {
        let t = if paired_next {
            (prev_dispatch + config.noise.pairing_gap_s).min(nominal)
        } else {
            nominal
        };
        paired_next = rng.random_bool(config.noise.pairing_prob);
        prev_dispatch = t;
        pending.push((t, BusKind::Regular, 0, jitter.sample(&mut rng)));
        if rng.random_bool(config.noise.surplus_rate) && route.len() > 2 {
            let stop = rng.random_range(1..route.len() - 1);
            let gap = schedule
                .get(i + 1)
                .map_or(config.headway_at(nominal), |n| n - nominal);
            // Joins between this bus and the next one, at a mid-route stop.
            let reach = route.chainage(stop) / config.speed_at(t);
            let entry = t + gap / 2.0 + reach + config.dwell_s * stop as f64;
            pending.push((entry, BusKind::Surplus, stop, jitter.sample(&mut rng)));
        }
    }
    pending.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut buses = Vec::with_capacity(pending.len());
    for (i, (entry_t, kind, entry_stop, offset)) in pending.into_iter().enumerate() {
        let (arrivals, departures) = run_bus(config, &route, entry_stop, entry_t, offset, &mut rng);
        buses.push(SimBus {
            bus_id: i as u32 + 1,
            kind,
            entry_stop,
            arrivals,
            departures,
        });
    }
    let crossings = buses
        .iter()
        .flat_map(|b| {
            b.arrivals.iter().enumerate().filter_map(|(s, a)| {
                a.map(|a| GroundTruthCrossing {
                    service_id: route.service_id().to_string(),
                    direction: route.direction(),
                    date: config.date,
                    true_bus_id: b.bus_id,
                    stop_index: s,
                    t_actual: a.round() as Seconds,
                })
            })
        })
        .collect();
    Ok(WorldTrace {
        route,
        date: config.date,
        buses,
        crossings,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimFeed {
    pub observations: Vec<EtaObservation>,
    /// True bus behind each observation, parallel to `observations`.
    pub truth: Vec<u32>,
    /// (stop, snapshot) reports that had at least one bus to list.
    pub reports: usize,
    pub dropped_reports: usize,
}

/// Feed instants covering the world's service, aligned to the period.
pub fn feed_instants(world: &WorldTrace, period: Seconds) -> Vec<Seconds> {
    let Some(start) = world.buses.iter().map(|b| b.entry_time()).reduce(f64::min) else {
        return Vec::new();
    };
    let end = world
        .buses
        .iter()
        .map(|b| b.finish_time())
        .fold(start, f64::max);
    let first = (start as Seconds).div_euclid(period) * period;
    (0..)
        .map(|i| first + i * period)
        .take_while(|&t| t as f64 <= end)
        .collect()
}

/// Publishes, every feed period, each stop's K soonest approaching buses.
pub fn emit_eta_feed(world: &WorldTrace, config: &WorldConfig) -> SimFeed {
    let route = &world.route;
    let noise = &config.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(FEED_STREAM);
    let eta_noise = normal(noise.eta_sigma_min);
    let gps_noise = normal(noise.gps_sigma_m);
    let drop_reports = noise.skip_model == SkipModel::Report;
    let k = usize::from(config.feed.k);
    let mut feed = SimFeed::default();

    for t in feed_instants(world, config.feed.period_s) {
        let tf = t as f64;
        let active: Vec<&SimBus> = world
            .buses
            .iter()
            .filter(|b| b.entry_time() <= tf && b.finish_time() >= tf)
            .collect();
        if active.is_empty() {
            continue;
        }
        for (s, stop) in route.stops().iter().enumerate() {
            let mut approaching: Vec<(f64, &SimBus)> = active
                .iter()
                .filter_map(|b| b.arrivals[s].filter(|&a| a >= tf).map(|a| (a, *b)))
                .collect();
            if approaching.is_empty() {
                continue;
            }
            feed.reports += 1;
            if drop_reports && rng.random_bool(noise.p_skip_report) {
                feed.dropped_reports += 1;
                continue;
            }
            approaching.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.bus_id.cmp(&b.1.bus_id)));
            for (rank, (a, bus)) in approaching.into_iter().take(k).enumerate() {
                let eta_min = ((a - tf) / 60.0 + eta_noise.sample(&mut rng)).max(0.0);
                let true_p = bus.progress_at(tf, route).expect("bus is active");
                let exact = route.position_at(true_p);
                let position = if noise.gps_sigma_m > 0.0 {
                    let (x, y) = route.frame().to_xy(exact);
                    route.frame().to_latlon(
                        x + gps_noise.sample(&mut rng),
                        y + gps_noise.sample(&mut rng),
                    )
                } else {
                    exact
                };
                let progress =
                    progress_from_parts(route, s, &stop.stop_id, eta_min, Some(position), 0.0)
                        .expect("finite simulated position");
                feed.observations.push(EtaObservation {
                    date: world.date,
                    t,
                    stop_id: stop.stop_id.clone(),
                    stop_index: s,
                    service_id: route.service_id().to_string(),
                    direction: route.direction(),
                    k: rank as u8 + 1,
                    eta_min,
                    position: Some(position),
                    loading: Some(rng.random_range(1..=3)),
                    progress,
                });
                feed.truth.push(bus.bus_id);
            }
        }
    }
    feed
}
