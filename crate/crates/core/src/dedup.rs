//! Per-snapshot deduplication: one physical bus is usually listed by up to
//! K consecutive stops, and only one sighting of it should survive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EtaObservation, LabeledObservation, Route, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentCase {
    AllThreeSame,
    FirstCrossed,
    FirstTwoCrossed,
}

impl AlignmentCase {
    fn shift(self) -> usize {
        match self {
            AlignmentCase::AllThreeSame => 0,
            AlignmentCase::FirstCrossed => 1,
            AlignmentCase::FirstTwoCrossed => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentCosts {
    pub all: f64,
    pub shift1: f64,
    pub shift2: f64,
}

impl AlignmentCosts {
    /// Cheapest case; ties go to the hypothesis with fewer new buses.
    pub fn best(&self) -> AlignmentCase {
        let mut case = AlignmentCase::AllThreeSame;
        let mut cost = self.all;
        if self.shift1 < cost {
            case = AlignmentCase::FirstCrossed;
            cost = self.shift1;
        }
        if self.shift2 < cost {
            case = AlignmentCase::FirstTwoCrossed;
        }
        case
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DedupMode {
    /// Compare GPS-derived progress.
    Dist,
    /// Compare progress implied by the ETA at a reference speed (m/s).
    Eta { v_ref: f64 },
    /// Single-linkage grouping of progress within `epsilon` metres.
    Pdist { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub mode: DedupMode,
    /// An inherited ID is refused when the paired sightings are further
    /// apart than this (metres); the sighting gets a fresh ID instead.
    pub max_pair_gap: Option<f64>,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            mode: DedupMode::Dist,
            max_pair_gap: Some(250.0),
        }
    }
}

fn shifted_cost(x_n: &[f64], x_n1: &[f64], shift: usize) -> f64 {
    let diffs: Vec<f64> = x_n
        .iter()
        .zip(x_n1.iter().skip(shift))
        .map(|(a, b)| (a - b).abs())
        .collect();
    if diffs.is_empty() {
        f64::INFINITY
    } else {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }
}

/// Mean absolute difference for each alignment of two adjacent stops'
/// sorted vectors. Missing entries are skipped; a case with no comparable
/// pair costs infinity.
pub fn alignment_costs(x_n: &[f64], x_n1: &[f64]) -> AlignmentCosts {
    AlignmentCosts {
        all: shifted_cost(x_n, x_n1, 0),
        shift1: shifted_cost(x_n, x_n1, 1),
        shift2: shifted_cost(x_n, x_n1, 2),
    }
}

/// IDs for the sightings at stop `n+1` given those at stop `n`.
/// `next_id` is the next never-used ID of the sweep.
pub fn assign_local_ids(
    x_n: &[f64],
    x_n1: &[f64],
    i_n: &[u32],
    next_id: &mut u32,
    max_pair_gap: Option<f64>,
) -> (AlignmentCase, Vec<u32>) {
    debug_assert_eq!(x_n.len(), i_n.len());
    let case = alignment_costs(x_n, x_n1).best();
    let shift = case.shift();
    let ids = x_n1
        .iter()
        .enumerate()
        .map(|(pos, &x)| {
            let inherited = pos
                .checked_sub(shift)
                .filter(|&src| src < i_n.len())
                .filter(|&src| max_pair_gap.is_none_or(|gap| (x_n[src] - x).abs() <= gap));
            match inherited {
                Some(src) => i_n[src],
                None => {
                    let id = *next_id;
                    *next_id += 1;
                    id
                }
            }
        })
        .collect();
    (case, ids)
}

fn comparison_key(o: &EtaObservation, route: &Route, mode: &DedupMode) -> f64 {
    match *mode {
        DedupMode::Eta { v_ref } => route.chainage(o.stop_index) - o.eta_min * 60.0 * v_ref,
        _ => o.progress,
    }
}

/// Deduplicates one snapshot. Local bus IDs start at 1.
pub fn dedup_snapshot(
    snapshot: &Snapshot,
    route: &Route,
    config: &DedupConfig,
) -> Result<Vec<LabeledObservation>> {
    match config.mode {
        DedupMode::Pdist { epsilon } => return pdist_dedup(snapshot, epsilon),
        DedupMode::Eta { v_ref } if !(v_ref > 0.0 && v_ref.is_finite()) => {
            return Err(Error::InvalidArgument(format!(
                "eta dedup needs a positive reference speed, got {v_ref}"
            )));
        }
        _ => {}
    }
    let mut next_id = 1;
    let mut prev: Option<(Vec<f64>, Vec<u32>)> = None;
    let mut kept: Vec<LabeledObservation> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (_, group) in snapshot.by_stop() {
        let mut sightings: Vec<(f64, &EtaObservation)> = group
            .iter()
            .map(|o| (comparison_key(o, route, &config.mode), o))
            .collect();
        sightings.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.k.cmp(&b.1.k)));
        let keys: Vec<f64> = sightings.iter().map(|s| s.0).collect();
        let ids = match &prev {
            None => {
                let ids: Vec<u32> = (next_id..next_id + keys.len() as u32).collect();
                next_id += keys.len() as u32;
                ids
            }
            Some((x_n, i_n)) => {
                assign_local_ids(x_n, &keys, i_n, &mut next_id, config.max_pair_gap).1
            }
        };
        for ((_, o), &id) in sightings.iter().zip(&ids) {
            // Stops are swept upstream first, so the first sighting is the
            // most upstream one.
            if seen.insert(id) {
                kept.push(LabeledObservation {
                    observation: (*o).clone(),
                    bus_id: id,
                });
            }
        }
        prev = Some((keys, ids));
    }
    sort_by_progress_desc(&mut kept);
    Ok(kept)
}

fn sort_by_progress_desc(obs: &mut [LabeledObservation]) {
    obs.sort_by(|a, b| {
        b.observation
            .progress
            .total_cmp(&a.observation.progress)
            .then(a.observation.stop_index.cmp(&b.observation.stop_index))
            .then(a.bus_id.cmp(&b.bus_id))
    });
}

/// Single-linkage groups (as index lists) of observations whose progress
/// chains together in steps of at most `epsilon`.
pub fn pdist_groups(observations: &[EtaObservation], epsilon: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by(|&a, &b| {
        observations[b]
            .progress
            .total_cmp(&observations[a].progress)
            .then(observations[a].stop_index.cmp(&observations[b].stop_index))
            .then(observations[a].k.cmp(&observations[b].k))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NAN;
    for i in order {
        let p = observations[i].progress;
        match groups.last_mut() {
            Some(g) if last - p <= epsilon => g.push(i),
            _ => groups.push(vec![i]),
        }
        last = p;
    }
    groups
}

fn representative<'a>(observations: &'a [EtaObservation], group: &[usize]) -> &'a EtaObservation {
    group
        .iter()
        .map(|&i| &observations[i])
        .min_by(|a, b| a.stop_index.cmp(&b.stop_index).then(a.k.cmp(&b.k)))
        .expect("groups are non-empty")
}

/// Distance-threshold deduplication: one survivor per single-linkage group,
/// taken from the most upstream reporting stop.
pub fn pdist_dedup(snapshot: &Snapshot, epsilon: f64) -> Result<Vec<LabeledObservation>> {
    check_epsilon(epsilon)?;
    let obs = &snapshot.observations;
    let mut reps: Vec<EtaObservation> = pdist_groups(obs, epsilon)
        .iter()
        .map(|g| representative(obs, g).clone())
        .collect();
    reps.sort_by(|a, b| {
        b.progress
            .total_cmp(&a.progress)
            .then(a.stop_index.cmp(&b.stop_index))
    });
    Ok(reps
        .into_iter()
        .zip(1..)
        .map(|(observation, bus_id)| LabeledObservation {
            observation,
            bus_id,
        })
        .collect())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..=4000.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 4000] m, got {epsilon}"
        )))
    }
}

/// True when a pdist grouping of the snapshot looks implausible: a group
/// holds two sightings from one stop, its survivor is more than
/// `max_gap_min` away, or ETAs jump by more than that between consecutive
/// reporting stops.
pub fn pdist_snapshot_fails(snapshot: &Snapshot, epsilon: f64, max_gap_min: f64) -> bool {
    let obs = &snapshot.observations;
    pdist_groups(obs, epsilon).iter().any(|group| {
        let mut members: Vec<&EtaObservation> = group.iter().map(|&i| &obs[i]).collect();
        members.sort_by_key(|o| (o.stop_index, o.k));
        if members
            .windows(2)
            .any(|w| w[0].stop_index == w[1].stop_index)
        {
            return true;
        }
        if members[0].eta_min > max_gap_min {
            return true;
        }
        members
            .windows(2)
            .any(|w| w[1].eta_min - w[0].eta_min > max_gap_min)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdistCalibration {
    pub epsilon: f64,
    /// Failure count for every grid point, in grid order.
    pub failures: Vec<(f64, usize)>,
}

/// Default search grid: 0 to 4000 m in 50 m steps.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..=80).map(|i| i as f64 * 50.0).collect()
}

/// Picks the threshold with the fewest failing snapshots; ties go to the
/// smallest threshold.
pub fn calibrate_pdist(
    snapshots: &[Snapshot],
    grid: &[f64],
    max_gap_min: f64,
) -> Result<PdistCalibration> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty epsilon grid".into()));
    }
    let mut failures = Vec::with_capacity(grid.len());
    for &eps in grid {
        check_epsilon(eps)?;
        let count = snapshots
            .iter()
            .filter(|s| pdist_snapshot_fails(s, eps, max_gap_min))
            .count();
        failures.push((eps, count));
    }
    let (epsilon, _) = failures
        .iter()
        .copied()
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("grid is non-empty");
    Ok(PdistCalibration { epsilon, failures })
}
