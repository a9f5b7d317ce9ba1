//! Domain types shared by every pipeline stage, and linear referencing of
//! WGS84 positions onto a route's stop polyline.
//!
//! Times are integer seconds since local midnight of the observation's
//! `date`. Distances along a route ("chainage" or "progress") are meters
//! from the origin stop. Stop indices are 0-based positions in
//! [`Route::stops`].

use std::collections::HashMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since local midnight.
pub type Seconds = i64;

/// Number of upcoming buses each stop reports per snapshot.
pub const DEFAULT_K: u8 = 3;

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_finite(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite()
    }
}

/// Equirectangular tangent-plane approximation anchored at one point.
///
/// Accurate to well under a meter over the tens of kilometers a bus route
/// spans, and cheap enough to apply per observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    origin: LatLon,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: LatLon) -> Self {
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            origin,
            meters_per_deg_lat,
            meters_per_deg_lon: meters_per_deg_lat * origin.lat.to_radians().cos(),
        }
    }

    pub fn to_xy(&self, p: LatLon) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        )
    }

    pub fn to_latlon(&self, x: f64, y: f64) -> LatLon {
        LatLon {
            lat: self.origin.lat + y / self.meters_per_deg_lat,
            lon: self.origin.lon + x / self.meters_per_deg_lon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub position: LatLon,
    /// Meters from the route origin.
    pub chainage: f64,
}

/// On-disk shape of a route. `chainage` may be omitted, in which case it is
/// the cumulative planar length of the stop polyline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSpec {
    pub service_id: String,
    #[serde(default)]
    pub direction: u8,
    #[serde(default)]
    pub looped: bool,
    pub stops: Vec<StopSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopSpec {
    pub stop_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chainage: Option<f64>,
}

/// An ordered stop sequence for one service direction.
///
/// Geometry is the polyline through the stop coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RouteSpec", into = "RouteSpec")]
pub struct Route {
    service_id: String,
    direction: u8,
    stops: Vec<Stop>,
    looped: bool,
    frame: LocalFrame,
    xy: Vec<(f64, f64)>,
    index: HashMap<String, usize>,
}

impl PartialEq for Route {
    fn eq(&self, other: &Self) -> bool {
        self.service_id == other.service_id
            && self.direction == other.direction
            && self.looped == other.looped
            && self.stops == other.stops
    }
}

impl Route {
    pub fn new(
        service_id: impl Into<String>,
        direction: u8,
        stops: Vec<Stop>,
        looped: bool,
    ) -> Result<Self> {
        let service_id = service_id.into();
        let invalid = |reason: String| Error::InvalidRoute {
            service_id: service_id.clone(),
            direction,
            reason,
        };
        if stops.len() < 2 {
            return Err(invalid(format!(
                "needs at least 2 stops, got {}",
                stops.len()
            )));
        }
        let mut index = HashMap::with_capacity(stops.len());
        for (i, stop) in stops.iter().enumerate() {
            if !stop.position.is_finite() {
                return Err(Error::NonFiniteCoordinate {
                    lat: stop.position.lat,
                    lon: stop.position.lon,
                });
            }
            if !(stop.chainage.is_finite() && stop.chainage >= 0.0) {
                return Err(invalid(format!(
                    "stop {} has chainage {}",
                    stop.stop_id, stop.chainage
                )));
            }
            if i > 0 && stop.chainage <= stops[i - 1].chainage {
                return Err(invalid(format!(
                    "chainage must strictly increase (stop {} at {} after {})",
                    stop.stop_id,
                    stop.chainage,
                    stops[i - 1].chainage
                )));
            }
            if index.insert(stop.stop_id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate stop_id {}", stop.stop_id)));
            }
        }
        let frame = LocalFrame::new(stops[0].position);
        let xy = stops.iter().map(|s| frame.to_xy(s.position)).collect();
        Ok(Self {
            service_id,
            direction,
            stops,
            looped,
            frame,
            xy,
            index,
        })
    }

    /// Builds a route whose chainage is the cumulative planar length of the
    /// polyline through `positions`.
    pub fn from_positions(
        service_id: impl Into<String>,
        direction: u8,
        positions: Vec<(String, LatLon)>,
        looped: bool,
    ) -> Result<Self> {
        let Some(&(_, origin)) = positions.first() else {
            return Route::new(service_id, direction, Vec::new(), looped);
        };
        let frame = LocalFrame::new(origin);
        let mut chainage = 0.0;
        let mut prev = frame.to_xy(origin);
        let stops = positions
            .into_iter()
            .map(|(stop_id, position)| {
                let xy = frame.to_xy(position);
                chainage += (xy.0 - prev.0).hypot(xy.1 - prev.1);
                prev = xy;
                Stop {
                    stop_id,
                    position,
                    chainage,
                }
            })
            .collect();
        Route::new(service_id, direction, stops, looped)
    }

    pub fn service_id(&self) -> &str {
        &self.service_id
    }

    pub fn direction(&self) -> u8 {
        self.direction
    }

    pub fn looped(&self) -> bool {
        self.looped
    }

    pub fn stops(&self) -> &[Stop] {
        &self.stops
    }

    pub fn len(&self) -> usize {
        self.stops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn stop_index(&self, stop_id: &str) -> Option<usize> {
        self.index.get(stop_id).copied()
    }

    pub fn chainage(&self, stop_index: usize) -> f64 {
        self.stops[stop_index].chainage
    }

    /// Chainage of the last stop.
    pub fn length(&self) -> f64 {
        self.stops[self.stops.len() - 1].chainage
    }

    /// Mean chainage gap between consecutive stops.
    pub fn mean_stop_spacing(&self) -> f64 {
        self.length() / (self.stops.len() - 1) as f64
    }

    /// Chainage of the closest point on the stop polyline to `point`.
    ///
    /// Each segment is projected perpendicularly and clamped to its ends;
    /// zero-length segments are skipped. Within a segment, chainage is
    /// interpolated linearly between the two stops' chainages.
    pub fn project_to_chainage(&self, point: LatLon) -> Result<f64> {
        if !point.is_finite() {
            return Err(Error::NonFiniteCoordinate {
                lat: point.lat,
                lon: point.lon,
            });
        }
        let (px, py) = self.frame.to_xy(point);
        let mut best: Option<(f64, f64)> = None;
        for (i, seg) in self.xy.windows(2).enumerate() {
            let (ax, ay) = seg[0];
            let (dx, dy) = (seg[1].0 - ax, seg[1].1 - ay);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let frac = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (ax + frac * dx, ay + frac * dy);
            let d2 = (qx - px).powi(2) + (qy - py).powi(2);
            if best.is_none_or(|(bd2, _)| d2 < bd2) {
                let c0 = self.stops[i].chainage;
                let c1 = self.stops[i + 1].chainage;
                best = Some((d2, c0 + frac * (c1 - c0)));
            }
        }
        best.map(|(_, c)| c).ok_or_else(|| Error::InvalidRoute {
            service_id: self.service_id.clone(),
            direction: self.direction,
            reason: "every segment has zero length".into(),
        })
    }

    /// The polyline point at `chainage` (clamped to the route).
    pub fn position_at(&self, chainage: f64) -> LatLon {
        let c = chainage.clamp(0.0, self.length());
        let seg = self
            .stops
            .partition_point(|s| s.chainage <= c)
            .clamp(1, self.stops.len() - 1);
        let (c0, c1) = (self.stops[seg - 1].chainage, self.stops[seg].chainage);
        let frac = (c - c0) / (c1 - c0);
        let (a, b) = (self.xy[seg - 1], self.xy[seg]);
        self.frame
            .to_latlon(a.0 + frac * (b.0 - a.0), a.1 + frac * (b.1 - a.1))
    }

    /// Distance traveled since the origin for the bus an observation refers to.
    ///
    /// Uses the GPS fix when present. Without one, falls back to a
    /// pseudo-progress: the reporting stop's chainage minus the distance the
    /// bus would cover in `eta` at the historical speed `v_hist` (m/s).
    pub fn progress_of(&self, observation: &EtaObservation, v_hist: f64) -> Result<f64> {
        progress_from_parts(
            self,
            observation.stop_index,
            &observation.stop_id,
            observation.eta_min,
            observation.position,
            v_hist,
        )
    }

    pub fn spec(&self) -> RouteSpec {
        RouteSpec::from(self.clone())
    }
}

pub(crate) fn progress_from_parts(
    route: &Route,
    stop_index: usize,
    stop_id: &str,
    eta_min: f64,
    position: Option<LatLon>,
    v_hist: f64,
) -> Result<f64> {
    match position {
        Some(p) => route.project_to_chainage(p),
        None if v_hist > 0.0 && v_hist.is_finite() => {
            Ok((route.chainage(stop_index) - eta_min * 60.0 * v_hist).max(0.0))
        }
        None => Err(Error::UnusableObservation {
            stop_id: stop_id.to_string(),
        }),
    }
}

impl TryFrom<RouteSpec> for Route {
    type Error = Error;

    fn try_from(spec: RouteSpec) -> Result<Self> {
        let has_chainage = spec.stops.iter().filter(|s| s.chainage.is_some()).count();
        if has_chainage == 0 {
            let positions = spec
                .stops
                .into_iter()
                .map(|s| (s.stop_id, LatLon::new(s.lat, s.lon)))
                .collect();
            return Route::from_positions(spec.service_id, spec.direction, positions, spec.looped);
        }
        if has_chainage != spec.stops.len() {
            return Err(Error::InvalidRoute {
                service_id: spec.service_id,
                direction: spec.direction,
                reason: "chainage must be given for all stops or none".into(),
            });
        }
        let stops = spec
            .stops
            .into_iter()
            .map(|s| Stop {
                stop_id: s.stop_id,
                position: LatLon::new(s.lat, s.lon),
                chainage: s.chainage.unwrap_or_default(),
            })
            .collect();
        Route::new(spec.service_id, spec.direction, stops, spec.looped)
    }
}

impl From<Route> for RouteSpec {
    fn from(route: Route) -> Self {
        RouteSpec {
            service_id: route.service_id,
            direction: route.direction,
            looped: route.looped,
            stops: route
                .stops
                .into_iter()
                .map(|s| StopSpec {
                    stop_id: s.stop_id,
                    lat: s.position.lat,
                    lon: s.position.lon,
                    chainage: Some(s.chainage),
                })
                .collect(),
        }
    }
}

/// Identifies one independent pipeline run: a service direction on one day.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceDay {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
}

impl fmt::Display for ServiceDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.service_id, self.direction, self.date)
    }
}

/// One validated feed tuple: the `k`-th next bus as seen from one stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaObservation {
    pub date: NaiveDate,
    pub t: Seconds,
    pub stop_id: String,
    pub stop_index: usize,
    pub service_id: String,
    pub direction: u8,
    pub k: u8,
    pub eta_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<LatLon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loading: Option<u8>,
    /// Meters traveled since the route origin.
    pub progress: f64,
}

impl EtaObservation {
    pub fn service_day(&self) -> ServiceDay {
        ServiceDay {
            service_id: self.service_id.clone(),
            direction: self.direction,
            date: self.date,
        }
    }
}

/// All observations of one service direction at one poll instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    pub t: Seconds,
    /// Sorted by `(stop_index, k)`; at most one entry per pair.
    pub observations: Vec<EtaObservation>,
}

impl Snapshot {
    /// Observations grouped per stop, in route order.
    pub fn by_stop(&self) -> impl Iterator<Item = (usize, &[EtaObservation])> {
        self.observations
            .chunk_by(|a, b| a.stop_index == b.stop_index)
            .map(|chunk| (chunk[0].stop_index, chunk))
    }

    pub fn service_day(&self) -> ServiceDay {
        ServiceDay {
            service_id: self.service_id.clone(),
            direction: self.direction,
            date: self.date,
        }
    }
}

/// An observation tagged with a bus identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObservation {
    #[serde(flatten)]
    pub observation: EtaObservation,
    pub bus_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub stop_index: usize,
    pub t_arrival: Seconds,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    bus_id: u32,
    service_id: String,
    direction: u8,
    date: NaiveDate,
    points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub bus_id: u32,
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// Fails unless stop indices strictly increase and arrival times never
    /// decrease.
    pub fn new(
        bus_id: u32,
        service_day: &ServiceDay,
        points: Vec<TrajectoryPoint>,
    ) -> Result<Self> {
        for pair in points.windows(2) {
            let reason = if pair[1].stop_index <= pair[0].stop_index {
                format!(
                    "stop index {} does not follow {}",
                    pair[1].stop_index, pair[0].stop_index
                )
            } else if pair[1].t_arrival < pair[0].t_arrival {
                format!(
                    "arrival {} at stop {} precedes {} at stop {}",
                    pair[1].t_arrival, pair[1].stop_index, pair[0].t_arrival, pair[0].stop_index
                )
            } else {
                continue;
            };
            return Err(Error::InvalidTrajectory { bus_id, reason });
        }
        Ok(Self {
            bus_id,
            service_id: service_day.service_id.clone(),
            direction: service_day.direction,
            date: service_day.date,
            points,
        })
    }

    pub fn bus_id(&self) -> u32 {
        self.bus_id
    }

    pub fn service_id(&self) -> &str {
        &self.service_id
    }

    pub fn direction(&self) -> u8 {
        self.direction
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn service_day(&self) -> ServiceDay {
        ServiceDay {
            service_id: self.service_id.clone(),
            direction: self.direction,
            date: self.date,
        }
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn point_at(&self, stop_index: usize) -> Option<&TrajectoryPoint> {
        self.points
            .binary_search_by_key(&stop_index, |p| p.stop_index)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn observed(&self) -> impl Iterator<Item = &TrajectoryPoint> {
        self.points
            .iter()
            .filter(|p| p.provenance == Provenance::Observed)
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        let key = ServiceDay {
            service_id: r.service_id,
            direction: r.direction,
            date: r.date,
        };
        Trajectory::new(r.bus_id, &key, r.points)
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord {
            bus_id: t.bus_id,
            service_id: t.service_id,
            direction: t.direction,
            date: t.date,
            points: t.points,
        }
    }
}

/// A simulator-emitted true stop arrival.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthCrossing {
    pub service_id: String,
    pub direction: u8,
    pub date: NaiveDate,
    pub true_bus_id: u32,
    pub stop_index: usize,
    pub t_actual: Seconds,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn five_stop_route() -> Route {
        let frame = LocalFrame::new(LatLon::new(1.3, 103.8));
        let xy = [
            (0.0, 0.0),
            (400.0, 50.0),
            (700.0, 420.0),
            (1300.0, 400.0),
            (1500.0, -200.0),
        ];
        let positions = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (format!("S{}", i + 1), frame.to_latlon(x, y)))
            .collect();
        Route::from_positions("65", 1, positions, false).unwrap()
    }

    fn obs(
        route: &Route,
        stop_index: usize,
        eta_min: f64,
        position: Option<LatLon>,
    ) -> EtaObservation {
        EtaObservation {
            date: NaiveDate::from_ymd_opt(2018, 6, 1).unwrap(),
            t: 0,
            stop_id: route.stops()[stop_index].stop_id.clone(),
            stop_index,
            service_id: route.service_id().into(),
            direction: route.direction(),
            k: 1,
            eta_min,
            position,
            loading: None,
            progress: 0.0,
        }
    }

    #[test]
    fn vertex_projects_to_its_chainage() {
        let route = five_stop_route();
        for (i, stop) in route.stops().iter().enumerate() {
            let c = route.project_to_chainage(stop.position).unwrap();
            assert!((c - route.chainage(i)).abs() < 1e-6, "stop {i}: {c}");
        }
    }

    #[test]
    fn segment_midpoint_projects_to_mean_chainage() {
        let route = five_stop_route();
        let (a, b) = (route.stops()[0].position, route.stops()[1].position);
        let mid = LatLon::new((a.lat + b.lat) / 2.0, (a.lon + b.lon) / 2.0);
        let c = route.project_to_chainage(mid).unwrap();
        let expected = (route.chainage(0) + route.chainage(1)) / 2.0;
        assert!((c - expected).abs() < 1e-3, "{c} vs {expected}");
    }

    /// Dense-sampling oracle: nearest of 10,000 evenly spaced polyline samples.
    fn brute_force_chainage(route: &Route, p: LatLon) -> f64 {
        let (px, py) = route.frame().to_xy(p);
        let n = 10_000;
        (0..=n)
            .map(|i| route.length() * i as f64 / n as f64)
            .map(|c| {
                let (x, y) = route.frame().to_xy(route.position_at(c));
                ((x - px).hypot(y - py), c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1
    }

    #[test]
    fn projection_matches_dense_sampling_oracle() {
        use rand::{Rng, SeedableRng};
        let route = five_stop_route();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (x, y) = (
                rng.random_range(-200.0..1700.0),
                rng.random_range(-400.0..600.0),
            );
            let p = route.frame().to_latlon(x, y);
            let got = route.project_to_chainage(p).unwrap();
            let oracle = brute_force_chainage(&route, p);
            // Points equidistant from two segments can legitimately snap to
            // either; only compare when the oracle's choice is unambiguous.
            let (ox, oy) = route.frame().to_xy(route.position_at(oracle));
            let (gx, gy) = route.frame().to_xy(route.position_at(got));
            let d_oracle = (ox - x).hypot(oy - y);
            let d_got = (gx - x).hypot(gy - y);
            assert!(
                d_got <= d_oracle + 1e-6,
                "projection is not the closest point"
            );
            if (got - oracle).abs() >= 1.0 {
                assert!((d_got - d_oracle).abs() < 1.0, "got {got}, oracle {oracle}");
            }
        }
    }

    #[test]
    fn rejects_non_finite_points() {
        let route = five_stop_route();
        assert!(matches!(
            route.project_to_chainage(LatLon::new(f64::NAN, 103.8)),
            Err(Error::NonFiniteCoordinate { .. })
        ));
    }

    #[test]
    fn zero_length_segment_is_skipped() {
        let p = LatLon::new(1.3, 103.8);
        let q = LatLon::new(1.3, 103.81);
        let stops = vec![
            Stop {
                stop_id: "a".into(),
                position: p,
                chainage: 0.0,
            },
            Stop {
                stop_id: "b".into(),
                position: p,
                chainage: 10.0,
            },
            Stop {
                stop_id: "c".into(),
                position: q,
                chainage: 1000.0,
            },
        ];
        let route = Route::new("x", 0, stops, false).unwrap();
        let c = route.project_to_chainage(q).unwrap();
        assert!((c - 1000.0).abs() < 1e-6);
        let c = route.project_to_chainage(p).unwrap();
        assert!((c - 10.0).abs() < 1e-6);
    }

    #[test]
    fn route_validation() {
        let p = LatLon::new(1.3, 103.8);
        let stop = |id: &str, c: f64| Stop {
            stop_id: id.into(),
            position: p,
            chainage: c,
        };
        assert!(Route::new("x", 0, vec![stop("a", 0.0)], false).is_err());
        assert!(Route::new("x", 0, vec![stop("a", 0.0), stop("b", 0.0)], false).is_err());
        assert!(Route::new("x", 0, vec![stop("a", 0.0), stop("a", 5.0)], false).is_err());
        assert!(Route::new("x", 0, vec![stop("a", -1.0), stop("b", 5.0)], false).is_err());
    }

    #[test]
    fn progress_of_examples() {
        let route = five_stop_route();
        let at_stop2 = obs(&route, 1, 3.0, Some(route.stops()[1].position));
        assert!((route.progress_of(&at_stop2, 0.0).unwrap() - route.chainage(1)).abs() < 1e-6);

        let stops = (0..3)
            .map(|i| Stop {
                stop_id: format!("s{i}"),
                position: LatLon::new(1.3, 103.8 + 0.02 * i as f64),
                chainage: 2000.0 * i as f64,
            })
            .collect();
        let straight = Route::new("x", 0, stops, false).unwrap();
        let zero_eta = obs(&straight, 2, 0.0, None);
        assert_eq!(straight.progress_of(&zero_eta, 10.0).unwrap(), 4000.0);
        let five_min = obs(&straight, 2, 5.0, None);
        assert_eq!(straight.progress_of(&five_min, 10.0).unwrap(), 1000.0);
        let far = obs(&straight, 1, 30.0, None);
        assert_eq!(straight.progress_of(&far, 10.0).unwrap(), 0.0);
        assert!(matches!(
            straight.progress_of(&five_min, 0.0),
            Err(Error::UnusableObservation { .. })
        ));
    }

    #[test]
    fn trajectory_rejects_non_monotone_points() {
        let key = ServiceDay {
            service_id: "65".into(),
            direction: 1,
            date: NaiveDate::from_ymd_opt(2018, 6, 1).unwrap(),
        };
        let p = |stop_index, t_arrival| TrajectoryPoint {
            stop_index,
            t_arrival,
            provenance: Provenance::Observed,
        };
        assert!(Trajectory::new(1, &key, vec![p(0, 10), p(1, 20), p(2, 20)]).is_ok());
        assert!(Trajectory::new(1, &key, vec![p(0, 10), p(0, 20)]).is_err());
        assert!(Trajectory::new(1, &key, vec![p(0, 10), p(1, 5)]).is_err());
    }

    #[test]
    fn route_spec_round_trip() {
        let route = five_stop_route();
        let json = serde_json::to_string(&route).unwrap();
        let back: Route = serde_json::from_str(&json).unwrap();
        assert_eq!(back, route);
    }

    proptest! {
        #[test]
        fn projection_stays_on_route(x in -3000.0..5000.0f64, y in -3000.0..3000.0f64) {
            let route = five_stop_route();
            let c = route.project_to_chainage(route.frame().to_latlon(x, y)).unwrap();
            prop_assert!((0.0..=route.length()).contains(&c));
        }

        #[test]
        fn reprojection_is_idempotent(x in -3000.0..5000.0f64, y in -3000.0..3000.0f64) {
            let route = five_stop_route();
            let c = route.project_to_chainage(route.frame().to_latlon(x, y)).unwrap();
            let again = route.project_to_chainage(route.position_at(c)).unwrap();
            prop_assert!((again - c).abs() < 1e-3, "{} vs {}", again, c);
        }

        #[test]
        fn pseudo_progress_non_increasing_in_eta(
            stop in 0usize..5, eta in 0.0..60.0f64, extra in 0.0..30.0f64, v in 0.1..20.0f64
        ) {
            let route = five_stop_route();
            let a = route.progress_of(&obs(&route, stop, eta, None), v).unwrap();
            let b = route.progress_of(&obs(&route, stop, eta + extra, None), v).unwrap();
            prop_assert!(b <= a);
        }
    }
}
