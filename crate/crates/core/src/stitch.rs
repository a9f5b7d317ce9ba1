//! Carrying bus identities across consecutive deduplicated snapshots and
//! turning each identity's progress samples into stop arrival times.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LabeledObservation, Provenance, Route, Seconds, ServiceDay, Trajectory, TrajectoryPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub v_max_kmh: f64,
    /// Backward moves up to this many metres are treated as noise and
    /// clamped; larger ones fail the speed check.
    pub backward_tolerance_m: f64,
    /// Committed snapshots a bus may go unseen before its trace closes.
    pub max_coast: usize,
    /// Trajectories with fewer points are dropped.
    pub min_points: usize,
    /// Arrival times are rounded to this many seconds; unset means the feed
    /// period, taken as the smallest gap between snapshots.
    pub granularity_s: Option<Seconds>,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            v_max_kmh: 40.0,
            backward_tolerance_m: 50.0,
            max_coast: 3,
            min_points: 2,
            granularity_s: None,
        }
    }
}

impl StitchConfig {
    pub fn v_max(&self) -> f64 {
        self.v_max_kmh / 3.6
    }
}

/// Deduplicated sightings at one feed instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSnapshot {
    pub t: Seconds,
    pub observations: Vec<LabeledObservation>,
}

/// Groups labeled observations back into snapshots by their timestamp.
pub fn group_labeled(observations: Vec<LabeledObservation>) -> Vec<LabeledSnapshot> {
    let mut by_t: BTreeMap<Seconds, Vec<LabeledObservation>> = BTreeMap::new();
    for o in observations {
        by_t.entry(o.observation.t).or_default().push(o);
    }
    by_t.into_iter()
        .map(|(t, observations)| LabeledSnapshot { t, observations })
        .collect()
}

/// A reference bus for matching: its progress and, when it may only be
/// matched within a distance budget, that budget in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRef {
    pub progress: f64,
    pub max_advance: Option<f64>,
}

impl MatchRef {
    pub fn at(progress: f64) -> Self {
        Self {
            progress,
            max_advance: None,
        }
    }
}

fn feasible(r: &MatchRef, next: f64, tolerance: f64) -> bool {
    let d = next - r.progress;
    d >= -tolerance && r.max_advance.is_none_or(|m| d <= m)
}

/// Matches reference buses (sorted by progress, descending) to next
/// observations (also descending). A match never moves a bus backwards by
/// more than `tolerance` and never swaps the order of two buses. Among such
/// matchings the one with the most pairs wins, then the one with the least
/// total displacement. Returns, per next observation, the index of its
/// reference bus; `None` means a new bus.
pub fn match_snapshots(prev: &[MatchRef], next: &[f64], tolerance: f64) -> Vec<Option<usize>> {
    let (n, m) = (prev.len(), next.len());
    // best[i][a]: (pairs, displacement) for prev[i..] against next[a..].
    let mut best = vec![vec![(0usize, 0.0f64); m + 1]; n + 1];
    let better = |x: (usize, f64), y: (usize, f64)| x.0 > y.0 || (x.0 == y.0 && x.1 < y.1);
    for i in (0..n).rev() {
        for a in (0..m).rev() {
            let mut cell = best[i + 1][a];
            if better(best[i][a + 1], cell) {
                cell = best[i][a + 1];
            }
            if feasible(&prev[i], next[a], tolerance) {
                let (c, d) = best[i + 1][a + 1];
                let take = (c + 1, d + (next[a] - prev[i].progress).abs());
                if better(take, cell) {
                    cell = take;
                }
            }
            best[i][a] = cell;
        }
    }
    let mut out = vec![None; m];
    let (mut i, mut a) = (0, 0);
    while i < n && a < m {
        let here = best[i][a];
        if feasible(&prev[i], next[a], tolerance) {
            let (c, d) = best[i + 1][a + 1];
            let take = (c + 1, d + (next[a] - prev[i].progress).abs());
            if take == here {
                out[a] = Some(i);
                i += 1;
                a += 1;
                continue;
            }
        }
        if best[i + 1][a] == here {
            i += 1;
        } else {
            a += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedVerdict {
    pub passed: bool,
    /// (bus, m/s) for every matched bus.
    pub speeds: Vec<(u32, f64)>,
    pub diagnostic: Option<String>,
}

/// A matched bus: its ID, previous and new progress, and elapsed seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedMove {
    pub bus_id: u32,
    pub from: f64,
    pub to: f64,
    pub dt: Seconds,
}

/// Fails when any matched bus moves faster than `v_max` (m/s) or backwards
/// by more than `backward_tolerance` metres.
pub fn speed_check(moves: &[MatchedMove], v_max: f64, backward_tolerance: f64) -> SpeedVerdict {
    let mut verdict = SpeedVerdict {
        passed: true,
        speeds: Vec::with_capacity(moves.len()),
        diagnostic: None,
    };
    for mv in moves {
        let dx = mv.to - mv.from;
        let speed = if mv.dt > 0 {
            dx / mv.dt as f64
        } else {
            f64::INFINITY
        };
        verdict.speeds.push((mv.bus_id, speed));
        if !verdict.passed {
            continue;
        }
        if dx < -backward_tolerance {
            verdict.passed = false;
            verdict.diagnostic = Some(format!(
                "backward motion: bus {} moved {:.0} m",
                mv.bus_id, dx
            ));
        } else if dx > 0.0 && speed > v_max {
            verdict.passed = false;
            verdict.diagnostic = Some(format!(
                "bus {} at {:.1} m/s exceeds {:.1} m/s",
                mv.bus_id, speed, v_max
            ));
        }
    }
    verdict
}

/// One committed position of a stitched bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: Seconds,
    pub progress: f64,
    /// Stop whose report the sample came from.
    pub stop_index: usize,
    pub eta_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusTrace {
    pub bus_id: u32,
    pub samples: Vec<TraceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSnapshot {
    pub t: Seconds,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StitchOutput {
    pub trajectories: Vec<Trajectory>,
    pub traces: Vec<BusTrace>,
    pub skipped: Vec<SkippedSnapshot>,
}

struct Track {
    trace: BusTrace,
    last_commit: usize,
}

/// Stitches one service day. Snapshots must be time-ordered. A snapshot
/// whose matching fails the speed check is dropped and the next one is
/// tried against the same reference.
pub fn stitch_day(
    key: &ServiceDay,
    snapshots: &[LabeledSnapshot],
    route: &Route,
    config: &StitchConfig,
) -> Result<StitchOutput> {
    if snapshots.windows(2).any(|w| w[0].t >= w[1].t) {
        return Err(Error::InvalidArgument(
            "snapshots must be strictly time-ordered".into(),
        ));
    }
    let v_max = config.v_max();
    let tol = config.backward_tolerance_m;
    let mut tracks: Vec<Track> = Vec::new();
    let mut skipped = Vec::new();
    let mut commits = 0usize;
    for snap in snapshots {
        if snap.observations.is_empty() {
            continue;
        }
        let mut refs: Vec<usize> = (0..tracks.len())
            .filter(|&i| commits - tracks[i].last_commit <= config.max_coast)
            .collect();
        let last = |i: usize| {
            *tracks[i]
                .trace
                .samples
                .last()
                .expect("tracks start non-empty")
        };
        refs.sort_by(|&a, &b| {
            last(b)
                .progress
                .total_cmp(&last(a).progress)
                .then(a.cmp(&b))
        });
        let match_refs: Vec<MatchRef> = refs
            .iter()
            .map(|&i| {
                let s = last(i);
                MatchRef {
                    progress: s.progress,
                    // Buses missing from the last commit may only resume
                    // within reach; anything else is a different bus.
                    max_advance: (tracks[i].last_commit < commits)
                        .then(|| v_max * (snap.t - s.t) as f64),
                }
            })
            .collect();
        let mut next: Vec<&LabeledObservation> = snap.observations.iter().collect();
        next.sort_by(|a, b| {
            b.observation
                .progress
                .total_cmp(&a.observation.progress)
                .then(a.bus_id.cmp(&b.bus_id))
        });
        let next_p: Vec<f64> = next.iter().map(|o| o.observation.progress).collect();
        let assignment = match_snapshots(&match_refs, &next_p, tol);

        let moves: Vec<MatchedMove> = assignment
            .iter()
            .enumerate()
            .filter_map(|(a, r)| {
                r.map(|r| {
                    let s = last(refs[r]);
                    MatchedMove {
                        bus_id: tracks[refs[r]].trace.bus_id,
                        from: s.progress,
                        to: next_p[a],
                        dt: snap.t - s.t,
                    }
                })
            })
            .collect();
        let verdict = speed_check(&moves, v_max, tol);
        if !verdict.passed {
            let reason = verdict.diagnostic.unwrap_or_default();
            log::debug!("{key}: skipping snapshot t={}: {reason}", snap.t);
            skipped.push(SkippedSnapshot { t: snap.t, reason });
            continue;
        }

        commits += 1;
        for (a, obs) in next.iter().enumerate() {
            let o = &obs.observation;
            let mut sample = TraceSample {
                t: snap.t,
                progress: o.progress,
                stop_index: o.stop_index,
                eta_min: o.eta_min,
            };
            match assignment[a] {
                Some(r) => {
                    let track = &mut tracks[refs[r]];
                    let prev = track.trace.samples.last().expect("non-empty").progress;
                    sample.progress = sample.progress.max(prev);
                    track.trace.samples.push(sample);
                    track.last_commit = commits;
                }
                None => tracks.push(Track {
                    trace: BusTrace {
                        bus_id: tracks.len() as u32 + 1,
                        samples: vec![sample],
                    },
                    last_commit: commits,
                }),
            }
        }
    }

    let granularity = config.granularity_s.unwrap_or_else(|| {
        snapshots
            .windows(2)
            .map(|w| w[1].t - w[0].t)
            .min()
            .unwrap_or(1)
    });
    let traces: Vec<BusTrace> = tracks.into_iter().map(|t| t.trace).collect();
    let mut trajectories = Vec::new();
    for trace in &traces {
        let points = observed_arrivals(&trace.samples, route, granularity);
        if points.len() >= config.min_points.max(1) {
            trajectories.push(Trajectory::new(trace.bus_id, key, points)?);
        }
    }
    Ok(StitchOutput {
        trajectories,
        traces,
        skipped,
    })
}

/// Stop crossings implied by time-ordered `(t, progress)` samples, by
/// linear interpolation between the samples that bracket each stop, rounded
/// to the nearest multiple of `granularity` seconds.
pub fn arrival_events(
    samples: &[(Seconds, f64)],
    route: &Route,
    granularity: Seconds,
) -> Vec<(usize, Seconds)> {
    crossings(samples, route, granularity)
        .into_iter()
        .map(|(stop, t, _)| (stop, t))
        .collect()
}

/// Crossings with the index of the sample preceding each one.
fn round_to(t: f64, granularity: Seconds) -> Seconds {
    if granularity > 1 {
        let g = granularity as f64;
        ((t / g).round() * g) as Seconds
    } else {
        t.round() as Seconds
    }
}

fn crossings(
    samples: &[(Seconds, f64)],
    route: &Route,
    granularity: Seconds,
) -> Vec<(usize, Seconds, usize)> {
    let mut out = Vec::new();
    let Some(&(t0, p0)) = samples.first() else {
        return out;
    };
    let chainages: Vec<f64> = route.stops().iter().map(|s| s.chainage).collect();
    if let Some(stop) = chainages.iter().position(|&c| c == p0) {
        out.push((stop, t0, 0));
    }
    for (i, w) in samples.windows(2).enumerate() {
        let ((ta, pa), (tb, pb)) = (w[0], w[1]);
        for (stop, &c) in chainages.iter().enumerate() {
            if pa < c && c <= pb {
                let t = ta as f64 + (c - pa) / (pb - pa) * (tb - ta) as f64;
                out.push((stop, round_to(t, granularity), i));
            }
        }
    }
    out
}

/// Arrival points a trace supports directly: crossings of stops that were
/// reporting the bus just before it got there, plus the ETA-projected
/// arrival at the stop reporting its final sample.
fn observed_arrivals(
    samples: &[TraceSample],
    route: &Route,
    granularity: Seconds,
) -> Vec<TrajectoryPoint> {
    let tp: Vec<(Seconds, f64)> = samples.iter().map(|s| (s.t, s.progress)).collect();
    let mut points: Vec<TrajectoryPoint> = crossings(&tp, route, granularity)
        .into_iter()
        .filter(|&(stop, _, i)| samples[i].stop_index <= stop)
        .map(|(stop_index, t_arrival, _)| TrajectoryPoint {
            stop_index,
            t_arrival,
            provenance: Provenance::Observed,
        })
        .collect();
    if let Some(last) = samples.last() {
        let reached = points.last().map(|p| p.stop_index);
        if reached.is_none_or(|s| s < last.stop_index)
            && route.chainage(last.stop_index) > last.progress
        {
            let t = round_to(last.t as f64 + last.eta_min * 60.0, granularity);
            let floor = points.last().map_or(t, |p| p.t_arrival);
            points.push(TrajectoryPoint {
                stop_index: last.stop_index,
                t_arrival: t.max(floor),
                provenance: Provenance::Observed,
            });
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EtaObservation, LatLon, LocalFrame};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn refs(ps: &[f64]) -> Vec<MatchRef> {
        ps.iter().map(|&p| MatchRef::at(p)).collect()
    }

    #[test]
    fn spec_matching_examples() {
        assert_eq!(
            match_snapshots(&refs(&[5000.0, 3000.0]), &[5600.0, 3500.0], 0.0),
            vec![Some(0), Some(1)]
        );
        assert_eq!(
            match_snapshots(&refs(&[5000.0]), &[5000.0], 0.0),
            vec![Some(0)]
        );
        assert_eq!(
            match_snapshots(&refs(&[5000.0, 3000.0]), &[5600.0, 4200.0, 3500.0], 0.0),
            vec![Some(0), None, Some(1)]
        );
        assert!(match_snapshots(&refs(&[1.0]), &[], 0.0).is_empty());
        assert_eq!(match_snapshots(&[], &[1.0, 0.0], 0.0), vec![None, None]);
    }

    #[test]
    fn matching_prefers_more_pairs_then_less_motion() {
        // The trailing bus could take 5050, but that would strand the leader.
        assert_eq!(
            match_snapshots(&refs(&[5000.0, 4900.0]), &[5100.0, 5050.0], 0.0),
            vec![Some(0), Some(1)]
        );
        assert_eq!(
            match_snapshots(&refs(&[5000.0, 3000.0]), &[5600.0], 0.0),
            vec![Some(0)]
        );
        let gated = [MatchRef {
            progress: 1000.0,
            max_advance: Some(500.0),
        }];
        assert_eq!(match_snapshots(&gated, &[4000.0], 0.0), vec![None]);
    }

    /// Every injective, forward, order-preserving matching; the best by
    /// (most pairs, least displacement).
    pub(crate) fn brute_force(prev: &[f64], next: &[f64], tol: f64) -> Vec<Option<usize>> {
        fn rec(
            prev: &[f64],
            next: &[f64],
            tol: f64,
            a: usize,
            min_i: usize,
            cur: &mut Vec<Option<usize>>,
            best: &mut (usize, f64, Vec<Option<usize>>),
        ) {
            if a == next.len() {
                let pairs: Vec<(usize, usize)> = cur
                    .iter()
                    .enumerate()
                    .filter_map(|(a, r)| r.map(|r| (a, r)))
                    .collect();
                let cost: f64 = pairs.iter().map(|&(a, r)| (next[a] - prev[r]).abs()).sum();
                if pairs.len() > best.0 || (pairs.len() == best.0 && cost < best.1) {
                    *best = (pairs.len(), cost, cur.clone());
                }
                return;
            }
            cur.push(None);
            rec(prev, next, tol, a + 1, min_i, cur, best);
            cur.pop();
            for i in min_i..prev.len() {
                if next[a] - prev[i] >= -tol {
                    cur.push(Some(i));
                    rec(prev, next, tol, a + 1, i + 1, cur, best);
                    cur.pop();
                }
            }
        }
        let mut best = (0, f64::INFINITY, vec![None; next.len()]);
        rec(prev, next, tol, 0, 0, &mut Vec::new(), &mut best);
        best.2
    }

    #[test]
    fn agrees_with_brute_force_on_small_instances() {
        use rand::{Rng, SeedableRng};
        for seed in 0..300 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut prev: Vec<f64> = (0..rng.random_range(0..=4))
                .map(|_| rng.random_range(0.0..8000.0))
                .collect();
            prev.sort_by(|a, b| b.total_cmp(a));
            let mut next: Vec<f64> = (0..rng.random_range(0..=4))
                .map(|_| rng.random_range(0.0..8000.0))
                .collect();
            next.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(
                match_snapshots(&refs(&prev), &next, 50.0),
                brute_force(&prev, &next, 50.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn speed_check_examples() {
        let mv = |to: f64| {
            [MatchedMove {
                bus_id: 1,
                from: 0.0,
                to,
                dt: 60,
            }]
        };
        assert!(speed_check(&mv(600.0), 40.0 / 3.6, 50.0).passed);
        assert!(!speed_check(&mv(800.0), 40.0 / 3.6, 50.0).passed);
        assert!(speed_check(&mv(0.0), 40.0 / 3.6, 50.0).passed);
        let back = speed_check(&mv(-200.0), 40.0 / 3.6, 50.0);
        assert!(!back.passed);
        assert!(back.diagnostic.unwrap().contains("backward motion"));
    }

    fn straight_route(n: usize, spacing: f64) -> Route {
        let frame = LocalFrame::new(LatLon::new(1.3, 103.8));
        let positions = (0..n)
            .map(|i| (format!("S{i}"), frame.to_latlon(i as f64 * spacing, 0.0)))
            .collect();
        Route::from_positions("65", 1, positions, false).unwrap()
    }

    #[test]
    fn arrival_event_examples() {
        let route = straight_route(3, 1000.0);
        assert_eq!(
            arrival_events(&[(60, 900.0), (120, 1100.0)], &route, 1),
            vec![(1, 90)]
        );
        let c = route.chainage(1);
        assert_eq!(
            arrival_events(&[(60, c - 150.0), (120, c + 50.0)], &route, 60),
            vec![(1, 120)]
        );
        assert_eq!(
            arrival_events(&[(60, c - 100.0), (180, c + 400.0)], &route, 60),
            vec![(1, 60)]
        );
        assert_eq!(
            arrival_events(&[(60, c), (120, c + 100.0)], &route, 60),
            vec![(1, 60)]
        );
        assert_eq!(
            arrival_events(&[(0, c - 100.0), (60, c), (120, c)], &route, 60),
            vec![(1, 60)]
        );
        assert!(arrival_events(&[], &route, 60).is_empty());
    }

    fn key() -> ServiceDay {
        ServiceDay {
            service_id: "65".into(),
            direction: 1,
            date: NaiveDate::from_ymd_opt(2018, 6, 1).unwrap(),
        }
    }

    fn labeled(t: Seconds, bus_id: u32, progress: f64, route: &Route) -> LabeledObservation {
        let stop_index = route
            .stops()
            .iter()
            .position(|s| s.chainage >= progress)
            .unwrap_or(route.len() - 1);
        LabeledObservation {
            observation: EtaObservation {
                date: key().date,
                t,
                stop_id: format!("S{stop_index}"),
                stop_index,
                service_id: "65".into(),
                direction: 1,
                k: 1,
                eta_min: (route.chainage(stop_index) - progress) / 8.0 / 60.0,
                position: None,
                loading: None,
                progress,
            },
            bus_id,
        }
    }

    /// Buses moving at 8 m/s from their given start offsets.
    fn day(route: &Route, starts: &[f64], steps: usize) -> Vec<LabeledSnapshot> {
        (0..steps)
            .map(|i| {
                let t = i as Seconds * 60;
                LabeledSnapshot {
                    t,
                    observations: starts
                        .iter()
                        .enumerate()
                        .map(|(b, &s)| (b, s + 8.0 * t as f64))
                        .filter(|&(_, p)| p < route.length())
                        .map(|(b, p)| labeled(t, b as u32 + 1, p, route))
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn single_bus_trace_equals_truth() {
        let route = straight_route(10, 500.0);
        let snaps = day(&route, &[0.0], 9);
        let out = stitch_day(&key(), &snaps, &route, &StitchConfig::default()).unwrap();
        assert_eq!(out.traces.len(), 1);
        let progress: Vec<f64> = out.traces[0].samples.iter().map(|s| s.progress).collect();
        let truth: Vec<f64> = (0..9).map(|i| 8.0 * 60.0 * i as f64).collect();
        assert_eq!(progress, truth);
        assert_eq!(out.trajectories.len(), 1);
        for p in out.trajectories[0].points() {
            let true_t = route.chainage(p.stop_index) / 8.0;
            assert!((p.t_arrival as f64 - true_t).abs() <= 60.0, "{p:?}");
        }
    }

    #[test]
    fn corrupted_snapshot_is_skipped() {
        let route = straight_route(30, 500.0);
        let mut snaps = day(&route, &[3000.0, 0.0], 12);
        let clean = stitch_day(&key(), &snaps, &route, &StitchConfig::default()).unwrap();
        for o in &mut snaps[5].observations {
            o.observation.progress += 5000.0;
        }
        let out = stitch_day(&key(), &snaps, &route, &StitchConfig::default()).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].t, 300);
        assert_eq!(out.trajectories.len(), clean.trajectories.len());
        assert_eq!(out.traces.len(), 2);
    }

    #[test]
    fn empty_day() {
        let route = straight_route(3, 500.0);
        let out = stitch_day(&key(), &[], &route, &StitchConfig::default()).unwrap();
        assert!(out.trajectories.is_empty());
    }

    #[test]
    fn missing_report_leaves_a_gap_for_interpolation() {
        let route = straight_route(10, 500.0);
        let mut snaps = day(&route, &[0.0], 9);
        // The sample just before the bus reaches stop 3 (1500 m) came from
        // stop 4, as if stop 3's report had been dropped.
        let o = &mut snaps[3].observations[0].observation;
        assert!(o.progress < 1500.0 && o.progress > 1000.0);
        o.stop_index = 4;
        let out = stitch_day(&key(), &snaps, &route, &StitchConfig::default()).unwrap();
        let stops: Vec<usize> = out.trajectories[0]
            .points()
            .iter()
            .map(|p| p.stop_index)
            .collect();
        assert!(!stops.contains(&3));
        assert!(stops.contains(&2) && stops.contains(&4));
    }

    proptest! {
        #[test]
        fn stitched_traces_are_monotone_and_ids_unique(
            starts in proptest::collection::vec(0.0..6000.0f64, 1..5),
            noise in proptest::collection::vec(-30.0..30.0f64, 200),
        ) {
            let route = straight_route(25, 400.0);
            let mut snaps = day(&route, &starts, 15);
            let mut n = 0;
            for s in &mut snaps {
                for o in &mut s.observations {
                    o.observation.progress = (o.observation.progress + noise[n % noise.len()]).max(0.0);
                    n += 1;
                }
            }
            let cfg = StitchConfig::default();
            let out = stitch_day(&key(), &snaps, &route, &cfg).unwrap();
            let mut ids: Vec<u32> = out.traces.iter().map(|t| t.bus_id).collect();
            ids.sort();
            let len = ids.len();
            ids.dedup();
            prop_assert_eq!(ids.len(), len);
            for trace in &out.traces {
                for w in trace.samples.windows(2) {
                    prop_assert!(w[0].t < w[1].t);
                    prop_assert!(w[0].progress <= w[1].progress);
                    let speed = (w[1].progress - w[0].progress) / (w[1].t - w[0].t) as f64;
                    prop_assert!(speed <= cfg.v_max() + 1e-9);
                }
            }
        }
    }
}
