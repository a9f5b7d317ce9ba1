//! Feed records on disk and on the wire: parsing, validation, snapshot
//! assembly, and the polling contract for live or replayed feeds.
//!
//! The canonical record has the fields
//! `date,t,stop_id,service,direction,k,eta_min,lat,lon,loading`, either as
//! one JSON object per line or as CSV with that header. Gzip-compressed
//! files are detected by their magic bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use flate2::read::MultiGzDecoder;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    progress_from_parts, EtaObservation, LatLon, Route, Seconds, ServiceDay, Snapshot, DEFAULT_K,
};

const DATE_FORMAT: &str = "%Y-%m-%d";

/// One raw feed tuple before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedRecord {
    pub date: Option<String>,
    pub t: Option<i64>,
    pub stop_id: Option<String>,
    pub service: Option<String>,
    pub direction: Option<u8>,
    pub k: Option<i64>,
    pub eta_min: Option<f64>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub loading: Option<i64>,
}

impl From<&EtaObservation> for FeedRecord {
    fn from(o: &EtaObservation) -> Self {
        FeedRecord {
            date: Some(o.date.format(DATE_FORMAT).to_string()),
            t: Some(o.t),
            stop_id: Some(o.stop_id.clone()),
            service: Some(o.service_id.clone()),
            direction: Some(o.direction),
            k: Some(i64::from(o.k)),
            eta_min: Some(o.eta_min),
            lat: o.position.map(|p| p.lat),
            lon: o.position.map(|p| p.lon),
            loading: o.loading.map(i64::from),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses the format from a file name, ignoring a trailing `.gz`.
    pub fn from_path(path: &Path) -> Option<Format> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        let name = name.strip_suffix(".gz").unwrap_or(&name);
        if name.ends_with(".csv") {
            Some(Format::Csv)
        } else if name.ends_with(".jsonl") || name.ends_with(".json") || name.ends_with(".ndjson") {
            Some(Format::Jsonl)
        } else {
            None
        }
    }
}

/// Why a record was not accepted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(into = "String")]
pub enum RejectReason {
    Malformed,
    MissingField(&'static str),
    InvalidDate,
    NegativeTime,
    KOutOfRange,
    NegativeEta,
    NonFinite,
    InvalidLoading,
    UnknownService,
    UnknownStop,
    Unusable,
    Duplicate,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Malformed => f.write_str("malformed"),
            RejectReason::MissingField(name) => write!(f, "missing_field:{name}"),
            RejectReason::InvalidDate => f.write_str("invalid_date"),
            RejectReason::NegativeTime => f.write_str("negative_time"),
            RejectReason::KOutOfRange => f.write_str("k_out_of_range"),
            RejectReason::NegativeEta => f.write_str("negative_eta"),
            RejectReason::NonFinite => f.write_str("non_finite"),
            RejectReason::InvalidLoading => f.write_str("invalid_loading"),
            RejectReason::UnknownService => f.write_str("unknown_service"),
            RejectReason::UnknownStop => f.write_str("unknown_stop"),
            RejectReason::Unusable => f.write_str("unusable"),
            RejectReason::Duplicate => f.write_str("duplicate"),
        }
    }
}

impl From<RejectReason> for String {
    fn from(r: RejectReason) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based record number in the source.
    pub record: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub total: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub rejections: Vec<Rejection>,
    pub snapshots: usize,
    pub t_min: Option<Seconds>,
    pub t_max: Option<Seconds>,
}

impl IngestReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }

    fn reject(&mut self, record: usize, reason: RejectReason) {
        *self.rejected.entry(reason.to_string()).or_default() += 1;
        self.rejections.push(Rejection { record, reason });
    }
}

/// Routes keyed by `(service_id, direction)`.
#[derive(Debug, Clone, Default)]
pub struct RouteSet {
    routes: BTreeMap<(String, u8), Route>,
}

impl RouteSet {
    pub fn new(routes: impl IntoIterator<Item = Route>) -> Self {
        Self {
            routes: routes
                .into_iter()
                .map(|r| ((r.service_id().to_string(), r.direction()), r))
                .collect(),
        }
    }

    pub fn get(&self, service_id: &str, direction: u8) -> Option<&Route> {
        self.routes.get(&(service_id.to_string(), direction))
    }

    pub fn route_for(&self, key: &ServiceDay) -> Result<&Route> {
        self.get(&key.service_id, key.direction)
            .ok_or_else(|| Error::UnknownRoute {
                service_id: key.service_id.clone(),
                direction: key.direction,
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Route> {
        self.routes.values()
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Reads a JSON array of routes.
    pub fn load(path: &Path) -> Result<Self> {
        let routes: Vec<Route> = serde_json::from_reader(open_source(path)?)?;
        Ok(Self::new(routes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let routes: Vec<&Route> = self.iter().collect();
        serde_json::to_writer_pretty(&mut w, &routes)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    /// Largest accepted rank `k`.
    pub k_max: u8,
    /// Historical speed (m/s) for pseudo-progress when a record has no GPS
    /// fix; non-positive disables the fallback.
    pub v_hist: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K,
            v_hist: 0.0,
        }
    }
}

/// Opens a file for reading, transparently decompressing gzip.
pub fn open_source(path: &Path) -> Result<Box<dyn Read>> {
    let mut reader = BufReader::new(File::open(path)?);
    let magic = reader.fill_buf()?;
    if magic.len() >= 2 && magic[0] == 0x1f && magic[1] == 0x8b {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(reader))))
    } else {
        Ok(Box::new(reader))
    }
}

/// Parses raw records without validating them. Records that cannot be
/// decoded at all come back as `Err(Malformed)` in their slot.
pub fn read_feed_records(
    mut source: impl Read,
    format: Format,
) -> Result<Vec<std::result::Result<FeedRecord, RejectReason>>> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    match format {
        Format::Jsonl => Ok(text
            .lines()
            .filter(|line| !line.trim().is_empty())
            .map(|line| serde_json::from_str(line).map_err(|_| RejectReason::Malformed))
            .collect()),
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            Ok(reader
                .deserialize()
                .map(|row| row.map_err(|_| RejectReason::Malformed))
                .collect())
        }
    }
}

/// Parses and validates a feed. Per-record problems are reported, never
/// fatal; only an unreadable source is an error.
pub fn parse_records(
    source: impl Read,
    format: Format,
    routes: &RouteSet,
    options: &IngestOptions,
) -> Result<(Vec<EtaObservation>, IngestReport)> {
    let raw = read_feed_records(source, format)?;
    Ok(validate_records(raw, routes, options))
}

pub fn validate_records(
    raw: Vec<std::result::Result<FeedRecord, RejectReason>>,
    routes: &RouteSet,
    options: &IngestOptions,
) -> (Vec<EtaObservation>, IngestReport) {
    let mut report = IngestReport {
        total: raw.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut accepted = Vec::new();
    for (i, record) in raw.into_iter().enumerate() {
        let record_no = i + 1;
        let observation = record.and_then(|r| validate(r, routes, options));
        let observation = match observation {
            Ok(o) => o,
            Err(reason) => {
                report.reject(record_no, reason);
                continue;
            }
        };
        let key = (
            observation.date,
            observation.service_id.clone(),
            observation.direction,
            observation.stop_index,
            observation.k,
            observation.t,
        );
        if !seen.insert(key) {
            report.reject(record_no, RejectReason::Duplicate);
            continue;
        }
        report.t_min = Some(report.t_min.map_or(observation.t, |m| m.min(observation.t)));
        report.t_max = Some(report.t_max.map_or(observation.t, |m| m.max(observation.t)));
        accepted.push(observation);
    }
    report.accepted = accepted.len();
    (accepted, report)
}

fn validate(
    r: FeedRecord,
    routes: &RouteSet,
    options: &IngestOptions,
) -> std::result::Result<EtaObservation, RejectReason> {
    use RejectReason::*;
    let date = r.date.ok_or(MissingField("date"))?;
    let t = r.t.ok_or(MissingField("t"))?;
    let stop_id = r.stop_id.ok_or(MissingField("stop_id"))?;
    let service_id = r.service.ok_or(MissingField("service"))?;
    let k = r.k.ok_or(MissingField("k"))?;
    let eta_min = r.eta_min.ok_or(MissingField("eta_min"))?;
    let direction = r.direction.unwrap_or(0);

    let date = NaiveDate::parse_from_str(&date, DATE_FORMAT).map_err(|_| InvalidDate)?;
    if t < 0 {
        return Err(NegativeTime);
    }
    if k < 1 || k > i64::from(options.k_max) {
        return Err(KOutOfRange);
    }
    if !eta_min.is_finite() {
        return Err(NonFinite);
    }
    if eta_min < 0.0 {
        return Err(NegativeEta);
    }
    let loading = match r.loading {
        None => None,
        Some(l @ 1..=3) => Some(l as u8),
        Some(_) => return Err(InvalidLoading),
    };
    let position = match (r.lat, r.lon) {
        (None, None) => None,
        (Some(lat), Some(lon)) => {
            let p = LatLon::new(lat, lon);
            if !p.is_finite() {
                return Err(NonFinite);
            }
            Some(p)
        }
        (Some(_), None) => return Err(MissingField("lon")),
        (None, Some(_)) => return Err(MissingField("lat")),
    };
    let route = routes.get(&service_id, direction).ok_or(UnknownService)?;
    let stop_index = route.stop_index(&stop_id).ok_or(UnknownStop)?;
    let progress = progress_from_parts(
        route,
        stop_index,
        &stop_id,
        eta_min,
        position,
        options.v_hist,
    )
    .map_err(|e| match e {
        Error::UnusableObservation { .. } => Unusable,
        _ => NonFinite,
    })?;
    Ok(EtaObservation {
        date,
        t,
        stop_id,
        stop_index,
        service_id,
        direction,
        k: k as u8,
        eta_min,
        position,
        loading,
        progress,
    })
}

/// Writes observations back out in the canonical record format.
pub fn write_records(
    observations: &[EtaObservation],
    writer: impl Write,
    format: Format,
) -> Result<()> {
    let records: Vec<FeedRecord> = observations.iter().map(FeedRecord::from).collect();
    write_feed_records(&records, writer, format)
}

pub fn write_feed_records(
    records: &[FeedRecord],
    writer: impl Write,
    format: Format,
) -> Result<()> {
    match format {
        Format::Jsonl => write_jsonl(writer, records),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            if records.is_empty() {
                w.write_record([
                    "date",
                    "t",
                    "stop_id",
                    "service",
                    "direction",
                    "k",
                    "eta_min",
                    "lat",
                    "lon",
                    "loading",
                ])?;
            }
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

pub fn write_jsonl<T: Serialize>(writer: impl Write, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(reader: impl Read) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

/// Snapshots per service day, plus how many observations lost a bucket
/// collision to a later record for the same `(stop, k)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotIndex {
    pub days: BTreeMap<ServiceDay, Vec<Snapshot>>,
    pub superseded: usize,
}

impl SnapshotIndex {
    pub fn snapshot_count(&self) -> usize {
        self.days.values().map(Vec::len).sum()
    }
}

/// Buckets observations by `t` floored to `sampling_period` and splits them
/// per service day. Within a bucket the latest record for a `(stop, k)`
/// wins; every kept observation is re-stamped with the bucket instant.
pub fn build_snapshots(
    observations: impl IntoIterator<Item = EtaObservation>,
    sampling_period: Seconds,
) -> Result<SnapshotIndex> {
    if sampling_period <= 0 {
        return Err(Error::InvalidArgument(format!(
            "sampling period must be positive, got {sampling_period}"
        )));
    }
    type Bucket = BTreeMap<(usize, u8), EtaObservation>;
    let mut buckets: BTreeMap<ServiceDay, BTreeMap<Seconds, Bucket>> = BTreeMap::new();
    let mut superseded = 0;
    for obs in observations {
        let bucket_t = obs.t.div_euclid(sampling_period) * sampling_period;
        let bucket = buckets
            .entry(obs.service_day())
            .or_default()
            .entry(bucket_t)
            .or_default();
        match bucket.entry((obs.stop_index, obs.k)) {
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(obs);
            }
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                superseded += 1;
                if obs.t > slot.get().t {
                    slot.insert(obs);
                }
            }
        }
    }
    let days = buckets
        .into_iter()
        .map(|(key, by_t)| {
            let snapshots = by_t
                .into_iter()
                .map(|(t, bucket)| Snapshot {
                    service_id: key.service_id.clone(),
                    direction: key.direction,
                    date: key.date,
                    t,
                    observations: bucket
                        .into_values()
                        .map(|mut o| {
                            o.t = t;
                            o
                        })
                        .collect(),
                })
                .collect();
            (key, snapshots)
        })
        .collect();
    Ok(SnapshotIndex { days, superseded })
}

/// Source of the latest K-bus table for the configured services.
pub trait FeedAdapter {
    fn fetch_current(&mut self) -> Result<Vec<FeedRecord>>;

    /// True once the adapter will never produce data again.
    fn exhausted(&self) -> bool {
        false
    }
}

/// Replays one recorded day, one poll period per fetch.
#[derive(Debug, Clone)]
pub struct ReplayAdapter {
    start: Seconds,
    batches: std::collections::VecDeque<Vec<FeedRecord>>,
}

impl ReplayAdapter {
    pub fn from_records(records: Vec<FeedRecord>, period: Seconds) -> Result<Self> {
        if period <= 0 {
            return Err(Error::InvalidArgument(format!(
                "poll period must be positive, got {period}"
            )));
        }
        let dates: HashSet<&Option<String>> = records.iter().map(|r| &r.date).collect();
        if dates.len() > 1 {
            return Err(Error::InvalidArgument(
                "a replay file must hold a single recorded day".into(),
            ));
        }
        let mut by_bucket: BTreeMap<Seconds, Vec<FeedRecord>> = BTreeMap::new();
        let mut current = None;
        for record in records {
            if let Some(t) = record.t {
                current = Some(t.div_euclid(period) * period);
            }
            // Records without a timestamp ride along with their predecessor.
            by_bucket
                .entry(current.unwrap_or(0))
                .or_default()
                .push(record);
        }
        let (Some(&first), Some(&last)) = (by_bucket.keys().next(), by_bucket.keys().next_back())
        else {
            return Ok(Self {
                start: 0,
                batches: Default::default(),
            });
        };
        let batches = (0..=(last - first) / period)
            .map(|i| by_bucket.remove(&(first + i * period)).unwrap_or_default())
            .collect();
        Ok(Self {
            start: first,
            batches,
        })
    }

    pub fn from_path(path: &Path, period: Seconds) -> Result<Self> {
        let format = Format::from_path(path).unwrap_or(Format::Jsonl);
        let records = read_feed_records(open_source(path)?, format)?
            .into_iter()
            .filter_map(|r| r.ok())
            .collect();
        Self::from_records(records, period)
    }

    /// Poll instant of the first recorded batch.
    pub fn start_time(&self) -> Seconds {
        self.start
    }
}

impl FeedAdapter for ReplayAdapter {
    fn fetch_current(&mut self) -> Result<Vec<FeedRecord>> {
        self.batches
            .pop_front()
            .ok_or_else(|| Error::Feed("replay exhausted".into()))
    }

    fn exhausted(&self) -> bool {
        self.batches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollEvent {
    Batch {
        poll_t: Seconds,
        records: Vec<FeedRecord>,
    },
    /// Nothing usable arrived at this poll instant.
    Gap { poll_t: Seconds, reason: String },
}

/// Drives an adapter at a fixed period, stamping each batch with its poll
/// instant. Fetch failures and empty fetches become [`PollEvent::Gap`].
pub struct FeedPoller<A> {
    adapter: A,
    period: Seconds,
    next_t: Seconds,
    remaining: Option<usize>,
}

impl<A: FeedAdapter> FeedPoller<A> {
    pub fn new(adapter: A, period: Seconds, start: Seconds) -> Self {
        Self {
            adapter,
            period,
            next_t: start,
            remaining: None,
        }
    }

    /// Stops after `polls` fetches even if the adapter keeps producing.
    pub fn limit(mut self, polls: usize) -> Self {
        self.remaining = Some(polls);
        self
    }
}

impl<A: FeedAdapter> Iterator for FeedPoller<A> {
    type Item = PollEvent;

    fn next(&mut self) -> Option<PollEvent> {
        if self.adapter.exhausted() || self.remaining == Some(0) {
            return None;
        }
        if let Some(n) = self.remaining.as_mut() {
            *n -= 1;
        }
        let poll_t = self.next_t;
        self.next_t += self.period;
        Some(match self.adapter.fetch_current() {
            Ok(records) if records.is_empty() => PollEvent::Gap {
                poll_t,
                reason: "empty fetch".into(),
            },
            Ok(mut records) => {
                for r in &mut records {
                    r.t = Some(poll_t);
                }
                PollEvent::Batch { poll_t, records }
            }
            Err(e) => {
                log::warn!("feed gap at t={poll_t}: {e}");
                PollEvent::Gap {
                    poll_t,
                    reason: e.to_string(),
                }
            }
        })
    }
}

/// Groups observations by service day without bucketing.
pub fn partition_by_day(
    observations: impl IntoIterator<Item = EtaObservation>,
) -> BTreeMap<ServiceDay, Vec<EtaObservation>> {
    let mut out: BTreeMap<ServiceDay, Vec<EtaObservation>> = BTreeMap::new();
    for o in observations {
        out.entry(o.service_day()).or_default().push(o);
    }
    out
}

/// Stop id to index lookups for every route, for callers that only hold ids.
pub fn stop_lookup(routes: &RouteSet) -> HashMap<(String, u8, String), usize> {
    routes
        .iter()
        .flat_map(|r| {
            r.stops().iter().enumerate().map(move |(i, s)| {
                (
                    (r.service_id().to_string(), r.direction(), s.stop_id.clone()),
                    i,
                )
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn routes() -> RouteSet {
        let positions = (0..4)
            .map(|i| (format!("S{i}"), LatLon::new(1.30, 103.80 + 0.01 * i as f64)))
            .collect();
        RouteSet::new([Route::from_positions("65", 1, positions, false).unwrap()])
    }

    fn line(t: i64, stop: &str, k: i64, eta: f64) -> String {
        format!(
            r#"{{"date":"2018-06-01","t":{t},"stop_id":"{stop}","service":"65","direction":1,"k":{k},"eta_min":{eta},"lat":1.3,"lon":103.805,"loading":2}}"#
        )
    }

    fn parse(text: &str, format: Format) -> (Vec<EtaObservation>, IngestReport) {
        parse_records(
            text.as_bytes(),
            format,
            &routes(),
            &IngestOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn happy_path_computes_progress() {
        let (obs, report) = parse(&line(60, "S1", 1, 4.0), Format::Jsonl);
        assert_eq!(report.accepted, 1);
        assert_eq!(obs[0].k, 1);
        assert_eq!(obs[0].stop_index, 1);
        let r = routes();
        let expected = r.get("65", 1).unwrap().chainage(1) / 2.0;
        assert!(
            (obs[0].progress - expected).abs() < 1.0,
            "{}",
            obs[0].progress
        );
    }

    #[test]
    fn negative_eta_rejected() {
        let (obs, report) = parse(&line(60, "S1", 1, -1.0), Format::Jsonl);
        assert!(obs.is_empty());
        assert_eq!(report.rejections[0].reason, RejectReason::NegativeEta);
        assert_eq!(report.rejected["negative_eta"], 1);
    }

    #[test]
    fn per_record_rejections() {
        let text = [
            line(60, "S1", 4, 1.0),
            line(60, "S9", 1, 1.0),
            r#"{"date":"2018-06-01","t":60}"#.to_string(),
            "not json".into(),
            line(60, "S1", 1, 1.0).replace("\"loading\":2", "\"loading\":7"),
            line(60, "S1", 1, 1.0).replace("\"service\":\"65\"", "\"service\":\"66\""),
        ]
        .join("\n");
        let (obs, report) = parse(&text, Format::Jsonl);
        assert!(obs.is_empty());
        let reasons: Vec<_> = report
            .rejections
            .iter()
            .map(|r| r.reason.to_string())
            .collect();
        assert_eq!(
            reasons,
            [
                "k_out_of_range",
                "unknown_stop",
                "missing_field:stop_id",
                "malformed",
                "invalid_loading",
                "unknown_service"
            ]
        );
        assert_eq!(report.accepted + report.rejected_total(), report.total);
    }

    #[test]
    fn missing_position_without_speed_is_unusable() {
        let text = r#"{"date":"2018-06-01","t":0,"stop_id":"S1","service":"65","direction":1,"k":1,"eta_min":2}"#;
        let (_, report) = parse(text, Format::Jsonl);
        assert_eq!(report.rejections[0].reason, RejectReason::Unusable);
        let opts = IngestOptions {
            v_hist: 5.0,
            ..Default::default()
        };
        let (obs, _) = parse_records(text.as_bytes(), Format::Jsonl, &routes(), &opts).unwrap();
        let c1 = routes().get("65", 1).unwrap().chainage(1);
        assert!((obs[0].progress - (c1 - 600.0)).abs() < 1e-9);
    }

    /// Reference check: a multimap of (stop, k, t) to record numbers; the
    /// first record of each key is accepted, the rest are duplicates.
    #[test]
    fn duplicate_rows_keep_first() {
        let rows = [
            line(60, "S1", 1, 4.0),
            line(60, "S1", 1, 5.0),
            line(60, "S1", 1, 6.0),
        ];
        let mut multimap: HashMap<(&str, i64, i64), Vec<usize>> = HashMap::new();
        for (i, key) in [("S1", 1, 60), ("S1", 1, 60), ("S1", 1, 60)]
            .into_iter()
            .enumerate()
        {
            multimap.entry(key).or_default().push(i + 1);
        }
        let expected_dups: Vec<usize> = multimap
            .values()
            .flat_map(|v| v[1..].iter().copied())
            .collect();

        let (obs, report) = parse(&rows.join("\n"), Format::Jsonl);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].eta_min, 4.0);
        let dups: Vec<usize> = report
            .rejections
            .iter()
            .filter(|r| r.reason == RejectReason::Duplicate)
            .map(|r| r.record)
            .collect();
        assert_eq!(dups, expected_dups);
    }

    #[test]
    fn csv_and_gzip() {
        let csv = "date,t,stop_id,service,direction,k,eta_min,lat,lon,loading\n\
                   2018-06-01,60,S2,65,1,2,3.5,,,\n\
                   2018-06-01,60,S2,65,1,1,1.5,1.3,103.815,1\n";
        let opts = IngestOptions {
            v_hist: 8.0,
            ..Default::default()
        };
        let (obs, report) = parse_records(csv.as_bytes(), Format::Csv, &routes(), &opts).unwrap();
        assert_eq!(report.accepted, 2);
        assert_eq!(obs[0].position, None);
        assert_eq!(obs[1].loading, Some(1));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feed.csv.gz");
        let mut gz =
            flate2::write::GzEncoder::new(File::create(&path).unwrap(), Default::default());
        gz.write_all(csv.as_bytes()).unwrap();
        gz.finish().unwrap();
        assert_eq!(Format::from_path(&path), Some(Format::Csv));
        let (again, _) =
            parse_records(open_source(&path).unwrap(), Format::Csv, &routes(), &opts).unwrap();
        assert_eq!(again, obs);
    }

    #[test]
    fn invalid_utf8_is_fatal() {
        let bytes: &[u8] = &[0xff, 0xfe, b'\n'];
        assert!(parse_records(bytes, Format::Jsonl, &routes(), &IngestOptions::default()).is_err());
    }

    fn obs_at(t: i64, stop_index: usize, k: u8, service: &str) -> EtaObservation {
        EtaObservation {
            date: NaiveDate::from_ymd_opt(2018, 6, 1).unwrap(),
            t,
            stop_id: format!("S{stop_index}"),
            stop_index,
            service_id: service.into(),
            direction: 1,
            k,
            eta_min: 1.0,
            position: None,
            loading: None,
            progress: 0.0,
        }
    }

    #[test]
    fn floor_bucketing() {
        // Buckets are [60, 120): 60, 61 and 119 all land in the t=60 snapshot.
        let input = vec![
            obs_at(60, 0, 1, "65"),
            obs_at(60, 0, 2, "65"),
            obs_at(61, 1, 1, "65"),
            obs_at(61, 1, 2, "65"),
            obs_at(119, 2, 1, "65"),
            obs_at(119, 2, 2, "65"),
        ];
        let oracle: std::collections::BTreeSet<i64> =
            input.iter().map(|o| o.t - o.t.rem_euclid(60)).collect();
        let index = build_snapshots(input, 60).unwrap();
        let snaps = index.days.values().next().unwrap();
        assert_eq!(
            snaps.iter().map(|s| s.t).collect::<Vec<_>>(),
            oracle.into_iter().collect::<Vec<_>>()
        );
        assert_eq!(snaps[0].observations.len(), 6);
        assert!(snaps[0].observations.iter().all(|o| o.t == 60));
    }

    #[test]
    fn empty_and_interleaved_services() {
        assert!(build_snapshots(Vec::new(), 60).unwrap().days.is_empty());
        let input = vec![
            obs_at(0, 0, 1, "65"),
            obs_at(0, 0, 1, "139"),
            obs_at(60, 0, 1, "65"),
            obs_at(60, 0, 1, "139"),
        ];
        let index = build_snapshots(input, 60).unwrap();
        assert_eq!(index.days.len(), 2);
        for snaps in index.days.values() {
            assert_eq!(snaps.len(), 2);
            assert!(snaps
                .iter()
                .all(|s| s.observations.iter().all(|o| o.service_id == s.service_id)));
        }
    }

    #[test]
    fn later_record_in_bucket_wins() {
        let mut late = obs_at(90, 0, 1, "65");
        late.eta_min = 0.5;
        let index = build_snapshots(vec![late.clone(), obs_at(60, 0, 1, "65")], 60).unwrap();
        assert_eq!(index.superseded, 1);
        assert_eq!(
            index.days.values().next().unwrap()[0].observations[0].eta_min,
            0.5
        );
    }

    fn replay_records() -> Vec<FeedRecord> {
        [0, 0, 60, 180, 180]
            .iter()
            .enumerate()
            .map(|(i, &t)| FeedRecord {
                date: Some("2018-06-01".into()),
                t: Some(t + 5),
                stop_id: Some(format!("S{}", i % 4)),
                service: Some("65".into()),
                direction: Some(1),
                k: Some(1),
                eta_min: Some(1.0),
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn replay_emits_batches_and_gaps_in_order() {
        let adapter = ReplayAdapter::from_records(replay_records(), 60).unwrap();
        let start = adapter.start_time();
        let events: Vec<_> = FeedPoller::new(adapter, 60, start).collect();
        assert_eq!(events.len(), 4);
        match &events[0] {
            PollEvent::Batch { poll_t, records } => {
                assert_eq!(*poll_t, 0);
                assert_eq!(records.len(), 2);
                assert!(records.iter().all(|r| r.t == Some(0)));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(events[1], PollEvent::Batch { poll_t: 60, .. }));
        assert!(matches!(events[2], PollEvent::Gap { poll_t: 120, .. }));
        assert!(matches!(events[3], PollEvent::Batch { poll_t: 180, .. }));
    }

    #[test]
    fn replay_is_deterministic() {
        use sha2::{Digest, Sha256};
        let digest = || {
            let adapter = ReplayAdapter::from_records(replay_records(), 60).unwrap();
            let start = adapter.start_time();
            let mut hasher = Sha256::new();
            for event in FeedPoller::new(adapter, 60, start) {
                if let PollEvent::Batch { records, .. } = event {
                    let mut buf = Vec::new();
                    write_feed_records(&records, &mut buf, Format::Jsonl).unwrap();
                    hasher.update(&buf);
                }
            }
            hex::encode(hasher.finalize())
        };
        assert_eq!(digest(), digest());
    }

    struct Flaky(usize);

    impl FeedAdapter for Flaky {
        fn fetch_current(&mut self) -> Result<Vec<FeedRecord>> {
            self.0 += 1;
            if self.0 == 2 {
                Err(Error::Feed("timeout".into()))
            } else {
                Ok(vec![FeedRecord::default()])
            }
        }
    }

    #[test]
    fn fetch_failure_is_a_gap() {
        let events: Vec<_> = FeedPoller::new(Flaky(0), 30, 0).limit(3).collect();
        assert!(matches!(events[1], PollEvent::Gap { poll_t: 30, .. }));
        assert!(matches!(events[2], PollEvent::Batch { poll_t: 60, .. }));
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_round_trips(
            rows in proptest::collection::vec((0i64..5000, 0usize..4, 1i64..=3, 0.0..30.0f64, proptest::option::of(0.0..0.03f64), proptest::option::of(1i64..=3)), 0..20),
            csv in any::<bool>(),
        ) {
            let records: Vec<_> = rows.iter().map(|&(t, stop, k, eta, lon, loading)| Ok(FeedRecord {
                date: Some("2018-06-01".into()),
                t: Some(t),
                stop_id: Some(format!("S{stop}")),
                service: Some("65".into()),
                direction: Some(1),
                k: Some(k),
                eta_min: Some(eta),
                lat: lon.map(|_| 1.3),
                lon: lon.map(|d| 103.8 + d),
                loading,
            })).collect();
            let opts = IngestOptions { v_hist: 6.0, ..Default::default() };
            let (first, _) = validate_records(records, &routes(), &opts);
            let format = if csv { Format::Csv } else { Format::Jsonl };
            let mut buf = Vec::new();
            write_records(&first, &mut buf, format).unwrap();
            let (second, report) = parse_records(buf.as_slice(), format, &routes(), &opts).unwrap();
            prop_assert_eq!(report.rejected_total(), 0);
            prop_assert_eq!(second, first);
        }

        #[test]
        fn snapshots_partition_observations(
            keys in proptest::collection::btree_set((0i64..20, 0usize..4, 1u8..=3), 0..60),
            offsets in proptest::collection::vec(0i64..60, 60),
        ) {
            let input: Vec<_> = keys.iter().enumerate().map(|(i, &(bucket, stop, k))| {
                obs_at(bucket * 60 + offsets[i], stop, k, "65")
            }).collect();
            let n = input.len();
            let index = build_snapshots(input, 60).unwrap();
            prop_assert_eq!(index.superseded, 0);
            let total: usize = index.days.values().flatten().map(|s| s.observations.len()).sum();
            prop_assert_eq!(total, n);
            for snaps in index.days.values() {
                prop_assert!(snaps.windows(2).all(|w| w[0].t < w[1].t));
                for s in snaps {
                    prop_assert!(s.observations.windows(2).all(|w| (w[0].stop_index, w[0].k) < (w[1].stop_index, w[1].k)));
                }
            }
        }
    }
}
