//! Scoring reconstructed arrivals against ground truth, plus the derived
//! analyses: accuracy by time margin, by interpolation distance, by feed
//! rate and by schedule period, the spatial resolution bound, and next-stop
//! arrival prediction.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RouteSet;
use crate::interpolate::VelocityModel;
use crate::model::{
    EtaObservation, GroundTruthCrossing, Provenance, Route, Seconds, Snapshot, Trajectory,
};
use crate::stitch::{arrival_events, BusTrace};

/// Default quantization of arrival times before matching: whole minutes.
pub const DEFAULT_GRANULARITY_S: Seconds = 60;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StopKey {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    pub stop_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: Seconds,
    /// Distance in metres between the nearest observed stops around this
    /// one in its trajectory.
    pub interp_span: f64,
    pub provenance: Provenance,
}

/// Detected and true crossings, grouped per stop and sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub det: BTreeMap<StopKey, Vec<Detection>>,
    pub obs: BTreeMap<StopKey, Vec<Seconds>>,
}

/// Span between the observed stops bracketing each point of a trajectory;
/// a missing side falls back to the route end.
pub fn interp_spans(trajectory: &Trajectory, route: &Route) -> Vec<f64> {
    let observed: Vec<usize> = trajectory.observed().map(|p| p.stop_index).collect();
    let last = route.len().saturating_sub(1);
    trajectory
        .points()
        .iter()
        .map(|p| {
            let s = p.stop_index;
            let up = observed
                .iter()
                .rev()
                .find(|&&o| o < s)
                .copied()
                .unwrap_or(0);
            let down = observed.iter().find(|&&o| o > s).copied().unwrap_or(last);
            route.chainage(down) - route.chainage(up)
        })
        .collect()
}

impl DetectionSet {
    pub fn new(
        trajectories: &[Trajectory],
        truth: &[GroundTruthCrossing],
        routes: &RouteSet,
    ) -> Result<Self> {
        let mut set = DetectionSet::default();
        for t in trajectories {
            let route = routes.route_for(&t.service_day())?;
            for (p, span) in t.points().iter().zip(interp_spans(t, route)) {
                set.det
                    .entry(StopKey {
                        service_id: t.service_id().to_string(),
                        direction: t.direction(),
                        date: t.date(),
                        stop_index: p.stop_index,
                    })
                    .or_default()
                    .push(Detection {
                        t: p.t_arrival,
                        interp_span: span,
                        provenance: p.provenance,
                    });
            }
        }
        for c in truth {
            set.obs
                .entry(StopKey {
                    service_id: c.service_id.clone(),
                    direction: c.direction,
                    date: c.date,
                    stop_index: c.stop_index,
                })
                .or_default()
                .push(c.t_actual);
        }
        set.sort();
        Ok(set)
    }

    /// From bare `(key, t)` lists; every detection gets a zero span.
    pub fn from_times(
        det: impl IntoIterator<Item = (StopKey, Seconds)>,
        obs: impl IntoIterator<Item = (StopKey, Seconds)>,
    ) -> Self {
        let mut set = DetectionSet::default();
        for (k, t) in det {
            set.det.entry(k).or_default().push(Detection {
                t,
                interp_span: 0.0,
                provenance: Provenance::Observed,
            });
        }
        for (k, t) in obs {
            set.obs.entry(k).or_default().push(t);
        }
        set.sort();
        set
    }

    fn sort(&mut self) {
        for v in self.det.values_mut() {
            v.sort_by_key(|d| d.t);
        }
        for v in self.obs.values_mut() {
            v.sort();
        }
    }

    /// Keeps only events with `from <= t < to`.
    pub fn window(&self, from: Seconds, to: Seconds) -> Self {
        let inside = |t: Seconds| from <= t && t < to;
        DetectionSet {
            det: self
                .det
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.iter().copied().filter(|d| inside(d.t)).collect(),
                    )
                })
                .collect(),
            obs: self
                .obs
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.iter().copied().filter(|&t| inside(t)).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn detection_count(&self) -> usize {
        self.det.values().map(Vec::len).sum()
    }

    pub fn truth_count(&self) -> usize {
        self.obs.values().map(Vec::len).sum()
    }
}

fn quantize(t: Seconds, granularity: Seconds) -> Seconds {
    if granularity > 1 {
        t.div_euclid(granularity) * granularity
    } else {
        t
    }
}

/// Maximum one-to-one matching of two sorted time lists under a symmetric
/// tolerance. Scanning both in order and pairing the earliest compatible
/// events is optimal for interval constraints on a line.
pub fn match_sorted(det: &[Seconds], obs: &[Seconds], margin: Seconds) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < det.len() && j < obs.len() {
        if (det[i] - obs[j]).abs() <= margin {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if det[i] < obs[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub detections: usize,
    pub truths: usize,
}

impl PrecisionRecall {
    fn from_counts(matched: usize, detections: usize, truths: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        Self {
            precision: ratio(matched, detections),
            recall: ratio(matched, truths),
            matched,
            detections,
            truths,
        }
    }
}

struct StopMatch<'a> {
    det: &'a [Detection],
    obs: &'a [Seconds],
    pairs: Vec<(usize, usize)>,
}

fn match_all(set: &DetectionSet, margin: Seconds, granularity: Seconds) -> Vec<StopMatch<'_>> {
    let empty_det: &[Detection] = &[];
    let empty_obs: &[Seconds] = &[];
    let mut keys: Vec<&StopKey> = set.det.keys().chain(set.obs.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let det = set.det.get(k).map_or(empty_det, Vec::as_slice);
            let obs = set.obs.get(k).map_or(empty_obs, Vec::as_slice);
            let dq: Vec<Seconds> = det.iter().map(|d| quantize(d.t, granularity)).collect();
            let oq: Vec<Seconds> = obs.iter().map(|&t| quantize(t, granularity)).collect();
            StopMatch {
                det,
                obs,
                pairs: match_sorted(&dq, &oq, margin),
            }
        })
        .collect()
}

/// Precision and recall with arrivals matched one-to-one per stop when
/// they lie within `margin` seconds after both are floored to
/// `granularity`. Empty sides count as perfect.
pub fn precision_recall(
    set: &DetectionSet,
    margin: Seconds,
    granularity: Seconds,
) -> PrecisionRecall {
    let matched = match_all(set, margin, granularity)
        .iter()
        .map(|m| m.pairs.len())
        .sum();
    PrecisionRecall::from_counts(matched, set.detection_count(), set.truth_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub margin_s: Seconds,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub points: Vec<CurvePoint>,
}

impl AccuracyCurve {
    pub fn at(&self, margin_s: Seconds) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.margin_s == margin_s)
    }
}

pub fn default_margins() -> Vec<Seconds> {
    vec![0, 60, 120]
}

/// Margins 0 to 10 minutes in whole minutes, for resolution estimates.
pub fn resolution_margins() -> Vec<Seconds> {
    (0..=10).map(|m| m * 60).collect()
}

fn check_margins(margins: &[Seconds]) -> Result<()> {
    if margins.windows(2).any(|w| w[0] >= w[1]) || margins.iter().any(|&m| m < 0) {
        return Err(Error::InvalidArgument(format!(
            "margins must be non-negative and strictly increasing: {margins:?}"
        )));
    }
    Ok(())
}

pub fn accuracy_vs_margin(
    set: &DetectionSet,
    margins: &[Seconds],
    granularity: Seconds,
) -> Result<AccuracyCurve> {
    check_margins(margins)?;
    Ok(AccuracyCurve {
        points: margins
            .iter()
            .map(|&m| {
                let pr = precision_recall(set, m, granularity);
                CurvePoint {
                    margin_s: m,
                    precision: pr.precision,
                    recall: pr.recall,
                }
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedCurves {
    pub threshold_m: f64,
    pub low: Option<AccuracyCurve>,
    pub high: Option<AccuracyCurve>,
}

/// Mean interpolation span over all detections.
pub fn mean_interp_span(set: &DetectionSet) -> Option<f64> {
    let spans: Vec<f64> = set.det.values().flatten().map(|d| d.interp_span).collect();
    (!spans.is_empty()).then(|| spans.iter().sum::<f64>() / spans.len() as f64)
}

/// Accuracy curves for detections whose interpolation span is at most
/// `threshold` (low) and above it (high). A true crossing belongs to the
/// stratum of the nearest detection at its stop, or to high when its stop
/// has none. The threshold defaults to the mean span.
pub fn stratify_by_interp_distance(
    set: &DetectionSet,
    margins: &[Seconds],
    granularity: Seconds,
    threshold: Option<f64>,
) -> Result<StratifiedCurves> {
    check_margins(margins)?;
    let threshold = threshold.or_else(|| mean_interp_span(set)).unwrap_or(0.0);
    let is_low = |d: &Detection| d.interp_span <= threshold;
    let mut low_points = Vec::new();
    let mut high_points = Vec::new();
    let mut any = [false, false];
    for &m in margins {
        // [low, high] x (matched det, det, matched obs, obs)
        let mut c = [[0usize; 4]; 2];
        for sm in match_all(set, m, granularity) {
            let mut det_matched = vec![false; sm.det.len()];
            let mut obs_matched = vec![false; sm.obs.len()];
            for &(i, j) in &sm.pairs {
                det_matched[i] = true;
                obs_matched[j] = true;
            }
            for (d, &hit) in sm.det.iter().zip(&det_matched) {
                let s = usize::from(!is_low(d));
                c[s][1] += 1;
                c[s][0] += usize::from(hit);
            }
            for (&t, &hit) in sm.obs.iter().zip(&obs_matched) {
                let nearest = sm.det.iter().min_by_key(|d| (d.t - t).abs());
                let s = nearest.map_or(1, |d| usize::from(!is_low(d)));
                c[s][3] += 1;
                c[s][2] += usize::from(hit);
            }
        }
        for (s, points) in [&mut low_points, &mut high_points].into_iter().enumerate() {
            any[s] |= c[s][1] + c[s][3] > 0;
            let matched_det = c[s][0];
            let pr_p = PrecisionRecall::from_counts(matched_det, c[s][1], 1);
            let pr_r = PrecisionRecall::from_counts(c[s][2], 1, c[s][3]);
            points.push(CurvePoint {
                margin_s: m,
                precision: pr_p.precision,
                recall: pr_r.recall,
            });
        }
    }
    Ok(StratifiedCurves {
        threshold_m: threshold,
        low: any[0].then_some(AccuracyCurve { points: low_points }),
        high: any[1].then_some(AccuracyCurve {
            points: high_points,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Precision,
    Recall,
}

impl Metric {
    fn of(self, p: &CurvePoint) -> f64 {
        match self {
            Metric::Precision => p.precision,
            Metric::Recall => p.recall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SpatialResolution {
    Achieved {
        margin_s: Seconds,
        meters: f64,
    },
    /// The curve never reaches the target; best accuracy seen and the
    /// resolution at the largest margin.
    Unachievable {
        max_accuracy: f64,
        meters: f64,
    },
}

impl SpatialResolution {
    pub fn meters(&self) -> f64 {
        match *self {
            SpatialResolution::Achieved { meters, .. }
            | SpatialResolution::Unachievable { meters, .. } => meters,
        }
    }
}

/// Smallest margin whose accuracy reaches `target`, converted to metres at
/// `v_avg` m/s.
pub fn spatial_resolution(
    curve: &AccuracyCurve,
    metric: Metric,
    target: f64,
    v_avg: f64,
) -> Result<SpatialResolution> {
    if !(v_avg > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "average speed must be positive, got {v_avg}"
        )));
    }
    let Some(last) = curve.points.last() else {
        return Err(Error::InvalidArgument("empty accuracy curve".into()));
    };
    if let Some(p) = curve.points.iter().find(|p| metric.of(p) >= target) {
        return Ok(SpatialResolution::Achieved {
            margin_s: p.margin_s,
            meters: p.margin_s as f64 * v_avg,
        });
    }
    Ok(SpatialResolution::Unachievable {
        max_accuracy: curve
            .points
            .iter()
            .map(|p| metric.of(p))
            .fold(0.0, f64::max),
        meters: last.margin_s as f64 * v_avg,
    })
}

fn check_resample(source: Seconds, new: Seconds) -> Result<()> {
    if source <= 0 || new < source || new % source != 0 {
        return Err(Error::InvalidArgument(format!(
            "can only downsample by a whole factor: {source} s to {new} s"
        )));
    }
    Ok(())
}

/// Downsamples snapshots on the absolute time grid of `new_period`, so
/// every service keeps the same instants.
pub fn resample_feed(
    snapshots: &[Snapshot],
    source_period: Seconds,
    new_period: Seconds,
) -> Result<Vec<Snapshot>> {
    check_resample(source_period, new_period)?;
    Ok(snapshots
        .iter()
        .filter(|s| s.t.rem_euclid(new_period) == 0)
        .cloned()
        .collect())
}

/// [`resample_feed`] for a flat observation stream.
pub fn resample_observations(
    observations: &[EtaObservation],
    source_period: Seconds,
    new_period: Seconds,
) -> Result<Vec<EtaObservation>> {
    check_resample(source_period, new_period)?;
    Ok(observations
        .iter()
        .filter(|o| o.t.rem_euclid(new_period) == 0)
        .cloned()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Period {
    AM,
    AMOP,
    PM,
    PMOP,
}

impl Period {
    pub const ALL: [Period; 4] = [Period::AM, Period::AMOP, Period::PM, Period::PMOP];

    /// AM 06:00-10:29, AMOP 10:30-15:59, PM 16:00-19:59, PMOP otherwise.
    pub fn of(t: Seconds) -> Period {
        let minute = t.rem_euclid(86_400) / 60;
        match minute {
            360..630 => Period::AM,
            630..960 => Period::AMOP,
            960..1200 => Period::PM,
            _ => Period::PMOP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBand {
    pub period: Period,
    pub low: f64,
    pub high: f64,
}

impl ScheduleBand {
    /// One band per period holding exactly the scheduled dispatch count.
    pub fn from_dispatches(dispatches: &[f64]) -> Vec<ScheduleBand> {
        Period::ALL
            .iter()
            .map(|&period| {
                let n = dispatches
                    .iter()
                    .filter(|&&t| Period::of(t.floor() as Seconds) == period)
                    .count() as f64;
                ScheduleBand {
                    period,
                    low: n,
                    high: n,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCell {
    pub date: NaiveDate,
    pub period: Period,
    pub detected: usize,
    pub within: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub cells: Vec<BandCell>,
    pub accuracy: BTreeMap<Period, f64>,
    /// Trajectories starting in a period without a band.
    pub uncovered: usize,
}

/// Counts trajectories by the period of their first point and checks each
/// (date, period) count against its band widened by `margin` (a fraction).
pub fn frequency_band_accuracy(
    trajectories: &[Trajectory],
    bands: &[ScheduleBand],
    margin: f64,
) -> FrequencyReport {
    let mut counts: BTreeMap<(NaiveDate, Period), usize> = BTreeMap::new();
    let dates: std::collections::BTreeSet<NaiveDate> =
        trajectories.iter().map(|t| t.date()).collect();
    for d in &dates {
        for b in bands {
            counts.insert((*d, b.period), 0);
        }
    }
    let mut report = FrequencyReport::default();
    for t in trajectories {
        let Some(first) = t.points().first() else {
            continue;
        };
        let period = Period::of(first.t_arrival);
        match counts.get_mut(&(t.date(), period)) {
            Some(n) => *n += 1,
            None => report.uncovered += 1,
        }
    }
    let mut per_period: BTreeMap<Period, (usize, usize)> = BTreeMap::new();
    for ((date, period), detected) in counts {
        let band = bands
            .iter()
            .find(|b| b.period == period)
            .expect("cells come from bands");
        let n = detected as f64;
        let within = n >= band.low * (1.0 - margin) && n <= band.high * (1.0 + margin);
        let e = per_period.entry(period).or_default();
        e.0 += usize::from(within);
        e.1 += 1;
        report.cells.push(BandCell {
            date,
            period,
            detected,
            within,
        });
    }
    report.accuracy = per_period
        .into_iter()
        .map(|(p, (ok, n))| (p, ok as f64 / n as f64))
        .collect();
    report
}

/// Segment travel speeds seen in trajectories: one sample per pair of
/// observed arrivals at adjacent stops.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentSpeeds {
    /// Per segment, (arrival time at the downstream stop, m/s), sorted.
    samples: Vec<Vec<(Seconds, f64)>>,
}

impl SegmentSpeeds {
    pub fn from_trajectories<'a>(
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        route: &Route,
    ) -> Self {
        let mut samples = vec![Vec::new(); route.len().saturating_sub(1)];
        for t in trajectories {
            if t.service_id() != route.service_id() || t.direction() != route.direction() {
                continue;
            }
            let observed: Vec<_> = t.observed().collect();
            for w in observed.windows(2) {
                let (a, b) = (w[0], w[1]);
                let dt = b.t_arrival - a.t_arrival;
                if b.stop_index == a.stop_index + 1 && dt > 0 {
                    let d = route.chainage(b.stop_index) - route.chainage(a.stop_index);
                    samples[a.stop_index].push((b.t_arrival, d / dt as f64));
                }
            }
        }
        Self::sorted(samples)
    }

    /// Samples from stitched progress traces, which time each stop crossing
    /// to the second. Traces must all belong to `route`.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a BusTrace>, route: &Route) -> Self {
        let mut samples = vec![Vec::new(); route.len().saturating_sub(1)];
        for trace in traces {
            let tp: Vec<(Seconds, f64)> = trace.samples.iter().map(|s| (s.t, s.progress)).collect();
            let events = arrival_events(&tp, route, 1);
            for w in events.windows(2) {
                let ((a, ta), (b, tb)) = (w[0], w[1]);
                if b == a + 1 && tb > ta {
                    let d = route.chainage(b) - route.chainage(a);
                    samples[a].push((tb, d / (tb - ta) as f64));
                }
            }
        }
        Self::sorted(samples)
    }

    fn sorted(mut samples: Vec<Vec<(Seconds, f64)>>) -> Self {
        for s in &mut samples {
            s.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        Self { samples }
    }

    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Mean speed on `segment` over samples ending in `[t - window, t)`.
    pub fn trailing(&self, segment: usize, t: Seconds, window: Seconds) -> Option<f64> {
        let s = self.samples.get(segment)?;
        Self::mean(
            s.iter()
                .filter(|&&(te, _)| te >= t - window && te < t)
                .map(|x| x.1),
        )
    }

    /// Mean speed on `segment` over every sample.
    pub fn overall(&self, segment: usize) -> Option<f64> {
        Self::mean(self.samples.get(segment)?.iter().map(|x| x.1))
    }

    pub fn sample_count(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SpeedSource {
    /// Same-day segment speeds from the trailing window.
    Realtime { window_s: Seconds },
    /// Segment speeds over a training corpus.
    Historic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub t_pred: f64,
    pub speed: f64,
    /// The segment had no samples and the route-level model was used.
    pub fallback: bool,
}

/// Arrival time after covering `segment_length` metres at `speed` m/s.
pub fn predicted_arrival(t_prev: f64, segment_length: f64, speed: f64) -> f64 {
    t_prev + segment_length / speed
}

/// Predicts arrival at stop `segment + 1` for a bus that reached stop
/// `segment` at `t_prev`. `speeds` holds same-day samples for a realtime
/// source and the training corpus for a historic one.
pub fn predict_next_arrival(
    t_prev: Seconds,
    segment: usize,
    route: &Route,
    source: SpeedSource,
    speeds: &SegmentSpeeds,
    fallback: &VelocityModel,
) -> Result<Prediction> {
    if segment + 1 >= route.len() {
        return Err(Error::InvalidArgument(format!(
            "stop {segment} has no downstream segment"
        )));
    }
    let sample = match source {
        SpeedSource::Realtime { window_s } => speeds.trailing(segment, t_prev, window_s),
        SpeedSource::Historic => speeds.overall(segment),
    }
    .filter(|v| *v > 0.0);
    let (speed, fallback) = match sample {
        Some(v) => (v, false),
        None => (fallback.v, true),
    };
    let length = route.chainage(segment + 1) - route.chainage(segment);
    Ok(Prediction {
        t_pred: predicted_arrival(t_prev as f64, length, speed),
        speed,
        fallback,
    })
}

/// Value of the empirical distribution of `errors` at quantile `q`
/// (nearest rank).
pub fn quantile(errors: &[f64], q: f64) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Maps each trajectory to the true bus most of its observed points agree
/// with (a true crossing at the same stop within `tolerance` seconds).
pub fn assign_true_buses(
    trajectories: &[Trajectory],
    truth: &[GroundTruthCrossing],
    tolerance: Seconds,
) -> BTreeMap<u32, u32> {
    type StopTimes = BTreeMap<(String, u8, NaiveDate, usize), Vec<(Seconds, u32)>>;
    let mut by_stop: StopTimes = BTreeMap::new();
    for c in truth {
        by_stop
            .entry((c.service_id.clone(), c.direction, c.date, c.stop_index))
            .or_default()
            .push((c.t_actual, c.true_bus_id));
    }
    let mut out = BTreeMap::new();
    for t in trajectories {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for p in t.observed() {
            let key = (
                t.service_id().to_string(),
                t.direction(),
                t.date(),
                p.stop_index,
            );
            let nearest = by_stop.get(&key).and_then(|v| {
                v.iter()
                    .filter(|(ta, _)| (ta - p.t_arrival).abs() <= tolerance)
                    .min_by_key(|(ta, id)| ((ta - p.t_arrival).abs(), *id))
            });
            if let Some(&(_, id)) = nearest {
                *votes.entry(id).or_default() += 1;
            }
        }
        if let Some((&id, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            out.insert(t.bus_id(), id);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationBenefit {
    /// Stops evaluated: inside a trajectory's observed span, not observed,
    /// and crossed by the matched true bus.
    pub stops: usize,
    /// Mean |error| holding the previous observed arrival.
    pub stitched_mae: f64,
    /// Mean |error| of the interpolated arrival.
    pub interpolated_mae: f64,
}

impl InterpolationBenefit {
    pub fn relative_reduction(&self) -> f64 {
        1.0 - self.interpolated_mae / self.stitched_mae
    }
}

/// Arrival error at the stops stitching missed, before and after filling.
/// `filled` must hold the filled version of each stitched trajectory under
/// the same bus ID.
pub fn interpolation_benefit(
    stitched: &[Trajectory],
    filled: &[Trajectory],
    truth: &[GroundTruthCrossing],
    tolerance: Seconds,
) -> InterpolationBenefit {
    let owners = assign_true_buses(stitched, truth, tolerance);
    let truth_at: BTreeMap<(u32, usize), Seconds> = truth
        .iter()
        .map(|c| ((c.true_bus_id, c.stop_index), c.t_actual))
        .collect();
    let filled_by_id: BTreeMap<u32, &Trajectory> = filled.iter().map(|t| (t.bus_id(), t)).collect();
    let (mut n, mut e_hold, mut e_fill) = (0usize, 0.0, 0.0);
    for t in stitched {
        let (Some(&owner), Some(f)) = (owners.get(&t.bus_id()), filled_by_id.get(&t.bus_id()))
        else {
            continue;
        };
        let observed: Vec<_> = t.observed().collect();
        for w in observed.windows(2) {
            for s in w[0].stop_index + 1..w[1].stop_index {
                let (Some(&actual), Some(p)) = (truth_at.get(&(owner, s)), f.point_at(s)) else {
                    continue;
                };
                n += 1;
                e_hold += (w[0].t_arrival - actual).abs() as f64;
                e_fill += (p.t_arrival - actual).abs() as f64;
            }
        }
    }
    let mean = |e: f64| if n == 0 { 0.0 } else { e / n as f64 };
    InterpolationBenefit {
        stops: n,
        stitched_mae: mean(e_hold),
        interpolated_mae: mean(e_fill),
    }
}

/// One row of a plot-ready accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub margin_s: Seconds,
    pub precision: f64,
    pub recall: f64,
    pub stratum: String,
    pub service: String,
    pub city_profile: String,
}

impl CurveRow {
    pub fn from_curve(
        curve: &AccuracyCurve,
        stratum: &str,
        service: &str,
        city_profile: &str,
    ) -> Vec<CurveRow> {
        curve
            .points
            .iter()
            .map(|p| CurveRow {
                margin_s: p.margin_s,
                precision: p.precision,
                recall: p.recall,
                stratum: stratum.into(),
                service: service.into(),
                city_profile: city_profile.into(),
            })
            .collect()
    }
}

const CURVE_HEADER: [&str; 6] = [
    "margin_s",
    "precision",
    "recall",
    "stratum",
    "service",
    "city_profile",
];

pub fn emit_curves(rows: &[CurveRow], writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(reader: impl Read) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
