//! Filling stops a stitched trajectory never observed, using a historical
//! average speed for the service.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Provenance, Route, Seconds, Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    pub service_id: String,
    pub direction: u8,
    /// Pooled average speed in m/s, dwell included.
    pub v: f64,
    /// Optional per-segment speeds; segment `i` runs from stop `i` to `i+1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Option<f64>>>,
    /// Human-readable description of the training data.
    pub window: String,
}

impl VelocityModel {
    pub fn constant(route: &Route, v: f64, window: impl Into<String>) -> Result<Self> {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "speed must be positive, got {v}"
            )));
        }
        Ok(Self {
            service_id: route.service_id().to_string(),
            direction: route.direction(),
            v,
            segments: None,
            window: window.into(),
        })
    }

    /// Travel time in seconds from stop `from` to stop `to` (`from < to`).
    pub fn travel_time(&self, route: &Route, from: usize, to: usize) -> f64 {
        (from..to)
            .map(|s| {
                let d = route.chainage(s + 1) - route.chainage(s);
                let v = self
                    .segments
                    .as_ref()
                    .and_then(|seg| seg.get(s).copied().flatten())
                    .unwrap_or(self.v);
                d / v
            })
            .sum()
    }
}

fn for_route<'a>(
    trajectories: &'a [Trajectory],
    route: &'a Route,
) -> impl Iterator<Item = &'a Trajectory> {
    trajectories
        .iter()
        .filter(|t| t.service_id() == route.service_id() && t.direction() == route.direction())
}

/// Pooled speed: total distance between each trajectory's first and last
/// observed stops over the total time taken.
pub fn historical_velocity(trajectories: &[Trajectory], route: &Route) -> Result<VelocityModel> {
    let mut distance = 0.0;
    let mut elapsed = 0.0;
    let mut used = 0;
    for t in for_route(trajectories, route) {
        let mut observed = t.observed();
        let Some(first) = observed.next() else {
            continue;
        };
        let Some(last) = observed.last() else {
            continue;
        };
        distance += route.chainage(last.stop_index) - route.chainage(first.stop_index);
        elapsed += (last.t_arrival - first.t_arrival) as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!(
            "no trajectory of {}/{} has two observed points",
            route.service_id(),
            route.direction()
        )));
    }
    if elapsed <= 0.0 {
        return Err(Error::InvalidArgument(
            "training trajectories span zero time".into(),
        ));
    }
    VelocityModel::constant(route, distance / elapsed, format!("{used} trajectories"))
}

/// Like [`historical_velocity`], plus a speed for every segment that has
/// at least one pair of consecutive observed stops spanning it.
pub fn segment_velocity(trajectories: &[Trajectory], route: &Route) -> Result<VelocityModel> {
    let mut model = historical_velocity(trajectories, route)?;
    let n = route.len().saturating_sub(1);
    let mut dist = vec![0.0; n];
    let mut time = vec![0.0; n];
    for t in for_route(trajectories, route) {
        let observed: Vec<&TrajectoryPoint> = t.observed().collect();
        for w in observed.windows(2) {
            if w[1].stop_index == w[0].stop_index + 1 {
                let s = w[0].stop_index;
                dist[s] += route.chainage(s + 1) - route.chainage(s);
                time[s] += (w[1].t_arrival - w[0].t_arrival) as f64;
            }
        }
    }
    model.segments = Some(
        dist.iter()
            .zip(&time)
            .map(|(&d, &t)| (t > 0.0 && d > 0.0).then(|| d / t))
            .collect(),
    );
    Ok(model)
}

/// Speed model for `date` trained on the `days` dates before it; when
/// those hold nothing usable, the same day's trajectories are used.
pub fn windowed_velocity(
    by_date: &BTreeMap<NaiveDate, Vec<Trajectory>>,
    date: NaiveDate,
    days: u32,
    route: &Route,
) -> Result<VelocityModel> {
    let start = date - chrono::Days::new(u64::from(days));
    let window: Vec<Trajectory> = by_date
        .range(start..date)
        .flat_map(|(_, ts)| ts.iter().cloned())
        .collect();
    match historical_velocity(&window, route) {
        Ok(mut m) => {
            m.window = format!("{} days before {date}: {}", days, m.window);
            Ok(m)
        }
        Err(_) => {
            let same_day = by_date.get(&date).map(Vec::as_slice).unwrap_or_default();
            let mut m = historical_velocity(same_day, route)?;
            m.window = format!("{date} (same day): {}", m.window);
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillOptions {
    /// Also extrapolate stops upstream of the first observation.
    pub backfill: bool,
}

/// Completes a trajectory from its first observed stop to the end of the
/// route (or the whole route with `backfill`). Only observed points are
/// used as anchors, so filling twice gives the same result.
pub fn fill_trajectory(
    trajectory: &Trajectory,
    route: &Route,
    model: &VelocityModel,
    options: FillOptions,
) -> Result<Trajectory> {
    if !(model.v > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "speed must be positive, got {}",
            model.v
        )));
    }
    let observed: BTreeMap<usize, Seconds> = trajectory
        .observed()
        .map(|p| (p.stop_index, p.t_arrival))
        .collect();
    let Some((&first, &t_first)) = observed.iter().next() else {
        return Err(Error::InvalidTrajectory {
            bus_id: trajectory.bus_id(),
            reason: "no observed points".into(),
        });
    };
    let point = |stop_index, t_arrival, provenance| TrajectoryPoint {
        stop_index,
        t_arrival,
        provenance,
    };
    let mut points = Vec::with_capacity(route.len());
    if options.backfill {
        let mut t = t_first as f64;
        for s in (0..first).rev() {
            t -= model.travel_time(route, s, s + 1);
            points.push(point(s, t.round() as Seconds, Provenance::Interpolated));
        }
        points.reverse();
    }
    points.push(point(first, t_first, Provenance::Observed));
    let mut t = t_first as f64;
    for s in first + 1..route.len() {
        if let Some(&t_obs) = observed.get(&s) {
            t = t_obs as f64;
            points.push(point(s, t_obs, Provenance::Observed));
            continue;
        }
        t += model.travel_time(route, s - 1, s);
        if let Some((_, &t_next)) = observed.range(s..).next() {
            t = t.min(t_next as f64);
        }
        points.push(point(s, t.round() as Seconds, Provenance::Interpolated));
    }
    let key = trajectory.service_day();
    Trajectory::new(trajectory.bus_id(), &key, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LatLon, LocalFrame, ServiceDay};
    use proptest::prelude::*;

    fn route(spacings: &[f64]) -> Route {
        let frame = LocalFrame::new(LatLon::new(1.3, 103.8));
        let mut x = 0.0;
        let mut positions = vec![("S0".to_string(), frame.to_latlon(0.0, 0.0))];
        for (i, d) in spacings.iter().enumerate() {
            x += d;
            positions.push((format!("S{}", i + 1), frame.to_latlon(x, 0.0)));
        }
        Route::from_positions("65", 1, positions, false).unwrap()
    }

    fn key(day: u32) -> ServiceDay {
        ServiceDay {
            service_id: "65".into(),
            direction: 1,
            date: NaiveDate::from_ymd_opt(2018, 6, day).unwrap(),
        }
    }

    fn traj(bus: u32, pts: &[(usize, Seconds)]) -> Trajectory {
        let points = pts
            .iter()
            .map(|&(stop_index, t_arrival)| TrajectoryPoint {
                stop_index,
                t_arrival,
                provenance: Provenance::Observed,
            })
            .collect();
        Trajectory::new(bus, &key(1), points).unwrap()
    }

    /// Route whose stop k sits at exactly k * 1000 m of chainage.
    fn km_route(n: usize) -> Route {
        route(&vec![1000.0; n - 1])
    }

    /// Chainages come out of a projection; the time for d metres at v is
    /// checked against the route's own numbers rather than round figures.
    fn span(r: &Route, a: usize, b: usize) -> f64 {
        r.chainage(b) - r.chainage(a)
    }

    #[test]
    fn velocity_examples() {
        let r = km_route(7);
        let d = span(&r, 0, 6);
        let one = historical_velocity(&[traj(1, &[(0, 0), (6, 600)])], &r).unwrap();
        assert!((one.v - d / 600.0).abs() < 1e-9);
        assert!((one.v - 10.0).abs() < 0.01);
        let two = historical_velocity(
            &[traj(1, &[(0, 0), (6, 600)]), traj(2, &[(0, 0), (6, 1200)])],
            &r,
        )
        .unwrap();
        assert!((two.v - 2.0 * d / 1800.0).abs() < 1e-9);
        assert!(historical_velocity(&[traj(1, &[(0, 5), (1, 5)])], &r).is_err());
        assert!(historical_velocity(&[], &r).is_err());
    }

    #[test]
    fn fill_examples() {
        let r = route(&[300.0, 300.0, 500.0, 500.0]);
        let m = VelocityModel::constant(&r, 10.0, "test").unwrap();
        let t = traj(1, &[(2, 600)]);
        let filled = fill_trajectory(&t, &r, &m, FillOptions::default()).unwrap();
        let s3 = filled.point_at(3).unwrap();
        assert_eq!(s3.provenance, Provenance::Interpolated);
        assert_eq!(
            s3.t_arrival,
            (600.0 + span(&r, 2, 3) / 10.0).round() as Seconds
        );
        assert_eq!(s3.t_arrival, 650);
        assert_eq!(filled.points().len(), 3);
        assert!(filled.point_at(0).is_none());

        let full = traj(
            2,
            &(0..5).map(|s| (s, s as Seconds * 100)).collect::<Vec<_>>(),
        );
        assert_eq!(
            fill_trajectory(&full, &r, &m, FillOptions::default()).unwrap(),
            full
        );
    }

    #[test]
    fn backfill_covers_whole_route() {
        let r = km_route(5);
        let m = VelocityModel::constant(&r, 10.0, "test").unwrap();
        let t = traj(1, &[(2, 1000)]);
        let filled = fill_trajectory(&t, &r, &m, FillOptions { backfill: true }).unwrap();
        assert_eq!(filled.points().len(), r.len());
        assert_eq!(
            filled.point_at(0).unwrap().t_arrival,
            (1000.0 - span(&r, 0, 2) / 10.0).round() as Seconds
        );
    }

    #[test]
    fn fill_needs_an_observation() {
        let r = km_route(3);
        let m = VelocityModel::constant(&r, 10.0, "test").unwrap();
        let p = TrajectoryPoint {
            stop_index: 0,
            t_arrival: 0,
            provenance: Provenance::Interpolated,
        };
        let t = Trajectory::new(1, &key(1), vec![p]).unwrap();
        assert!(fill_trajectory(&t, &r, &m, FillOptions::default()).is_err());
    }

    #[test]
    fn exact_speed_reproduces_true_crossings() {
        let r = route(&[400.0, 650.0, 300.0, 900.0, 500.0, 700.0]);
        let v = 8.0;
        let truth: Vec<f64> = (0..r.len()).map(|s| 100.0 + r.chainage(s) / v).collect();
        let t = traj(
            1,
            &[
                (1, truth[1].round() as Seconds),
                (4, truth[4].round() as Seconds),
            ],
        );
        let m = VelocityModel::constant(&r, v, "exact").unwrap();
        let filled = fill_trajectory(&t, &r, &m, FillOptions { backfill: true }).unwrap();
        for p in filled.points() {
            assert!(
                (p.t_arrival as f64 - truth[p.stop_index]).abs() <= 1.0,
                "{p:?}"
            );
        }
    }

    #[test]
    fn window_falls_back_to_same_day() {
        let r = km_route(4);
        let mut by_date = BTreeMap::new();
        by_date.insert(key(3).date, vec![traj(1, &[(0, 0), (3, 300)])]);
        let m = windowed_velocity(&by_date, key(3).date, 2, &r).unwrap();
        assert!(m.window.contains("same day"));
        by_date.insert(key(2).date, vec![traj(1, &[(0, 0), (3, 600)])]);
        let m = windowed_velocity(&by_date, key(3).date, 2, &r).unwrap();
        assert!((m.v - span(&r, 0, 3) / 600.0).abs() < 1e-9);
    }

    #[test]
    fn segment_speeds() {
        let r = km_route(4);
        let m = segment_velocity(&[traj(1, &[(0, 0), (1, 100), (3, 400)])], &r).unwrap();
        let seg = m.segments.clone().unwrap();
        assert!((seg[0].unwrap() - span(&r, 0, 1) / 100.0).abs() < 1e-9);
        assert_eq!(seg[1], None);
        assert!((m.travel_time(&r, 1, 2) - span(&r, 1, 2) / m.v).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn fill_properties(
            spacing in proptest::collection::vec(100.0..1500.0f64, 3..15),
            observed_mask in proptest::collection::vec(any::<bool>(), 16),
            v in 3.0..15.0f64,
            backfill in any::<bool>(),
        ) {
            let r = route(&spacing);
            let m = VelocityModel::constant(&r, v, "p").unwrap();
            let mut pts: Vec<(usize, Seconds)> = (0..r.len())
                .filter(|&s| observed_mask[s])
                .map(|s| (s, (r.chainage(s) / (v * 0.9)).round() as Seconds))
                .collect();
            if pts.is_empty() {
                pts.push((0, 0));
            }
            let t = traj(1, &pts);
            let opts = FillOptions { backfill };
            let filled = fill_trajectory(&t, &r, &m, opts).unwrap();
            for &(s, ts) in &pts {
                prop_assert_eq!(filled.point_at(s).unwrap().t_arrival, ts);
                prop_assert_eq!(filled.point_at(s).unwrap().provenance, Provenance::Observed);
            }
            prop_assert_eq!(filled.points().last().unwrap().stop_index, r.len() - 1);
            if backfill {
                prop_assert_eq!(filled.points().len(), r.len());
            }
            prop_assert_eq!(fill_trajectory(&filled, &r, &m, opts).unwrap(), filled.clone());
            for w in filled.points().windows(2) {
                prop_assert!(w[0].t_arrival <= w[1].t_arrival);
            }
        }
    }
}
