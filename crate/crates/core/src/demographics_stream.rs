//! Interval-batched scoring of face-feature records and the age-group histogram.
//!
//! Records arrive ordered by timestamp and are grouped into half-open
//! intervals `[i·T, (i+1)·T)`. Each closed interval is scored independently
//! with the deployed model, and the predicted ages are folded into a
//! histogram of fixed-width age groups which can be persisted as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::agemodel::{forward, ModelSpec, ParameterVector};
use crate::error::{Error, Result};
use crate::label_dist::{softmax, AgeClassSet};
use crate::metrics::{predict_age, AgePrediction};
use crate::output::write_atomic;

/// Largest forward jump, in intervals, a single record may cause. Every
/// skipped interval is emitted as an empty batch, so this bounds the work one
/// bad timestamp can trigger.
pub const MAX_INTERVAL_JUMP: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub record_id: String,
    pub timestamp: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBatch {
    pub interval_index: u64,
    pub records: Vec<FaceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRecord {
    pub record_id: String,
    pub timestamp: f64,
    pub reason: String,
}

/// Incremental interval batcher.
///
/// A record is rejected when its timestamp is negative or non-finite, or when
/// it trails the largest timestamp seen so far by more than `lateness`.
/// Interval `i` is emitted once the watermark (largest timestamp minus
/// `lateness`) has moved past it; intervals without records are emitted as
/// empty batches so the timeline has no holes.
#[derive(Debug, Clone)]
pub struct IntervalBatcher {
    length: f64,
    lateness: f64,
    next: Option<u64>,
    pending: BTreeMap<u64, Vec<FaceRecord>>,
    max_seen: f64,
}

impl IntervalBatcher {
    pub fn new(length: f64, lateness: f64) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Domain(format!(
                "interval length must be positive, got {length}"
            )));
        }
        if !(lateness >= 0.0) || !lateness.is_finite() {
            return Err(Error::Domain(format!(
                "lateness bound must be >= 0, got {lateness}"
            )));
        }
        Ok(Self {
            length,
            lateness,
            next: None,
            pending: BTreeMap::new(),
            max_seen: f64::NEG_INFINITY,
        })
    }

    /// Pins the first emitted interval instead of taking it from the first record.
    pub fn starting_at(mut self, index: u64) -> Self {
        self.next = Some(index);
        self
    }

    /// Interval index of `t`, honoring `[i·T, (i+1)·T)` exactly in floating point.
    pub fn interval_of(&self, t: f64) -> Option<u64> {
        if !t.is_finite() || t < 0.0 {
            return None;
        }
        let mut i = (t / self.length).floor();
        if i >= u64::MAX as f64 {
            return None;
        }
        if t < i * self.length {
            i -= 1.0;
        } else if t >= (i + 1.0) * self.length {
            i += 1.0;
        }
        Some(i as u64)
    }

    pub fn push(
        &mut self,
        record: FaceRecord,
    ) -> std::result::Result<Vec<IntervalBatch>, RejectedRecord> {
        let reject = |record: FaceRecord, reason: String| RejectedRecord {
            record_id: record.record_id,
            timestamp: record.timestamp,
            reason,
        };
        let Some(index) = self.interval_of(record.timestamp) else {
            let reason = format!("invalid timestamp {}", record.timestamp);
            return Err(reject(record, reason));
        };
        if record.timestamp < self.max_seen - self.lateness {
            let reason = format!(
                "timestamp {} is more than {} s behind {}",
                record.timestamp, self.lateness, self.max_seen
            );
            return Err(reject(record, reason));
        }
        match self.next {
            Some(n) if index < n => {
                return Err(reject(record, format!("interval {index} already closed")));
            }
            Some(n) if index - n > MAX_INTERVAL_JUMP => {
                return Err(reject(
                    record,
                    format!("interval {index} is more than {MAX_INTERVAL_JUMP} ahead of {n}"),
                ));
            }
            // The first interval still open to late records starts the timeline.
            None => self.next = self.interval_of((record.timestamp - self.lateness).max(0.0)),
            _ => {}
        }
        self.max_seen = self.max_seen.max(record.timestamp);
        self.pending.entry(index).or_default().push(record);
        Ok(self.drain_closed())
    }

    /// Moves the watermark to `time` without a record, closing finished intervals.
    pub fn advance_to(&mut self, time: f64) -> Vec<IntervalBatch> {
        if time.is_finite() {
            self.max_seen = self.max_seen.max(time);
        }
        self.drain_closed()
    }

    /// Emits every remaining interval up to the last one holding records.
    pub fn finish(mut self) -> Vec<IntervalBatch> {
        let mut out = self.drain_closed();
        if let (Some(next), Some(&last)) = (self.next, self.pending.keys().next_back()) {
            for i in next..=last {
                out.push(self.take(i));
            }
        }
        out
    }

    fn take(&mut self, index: u64) -> IntervalBatch {
        IntervalBatch {
            interval_index: index,
            records: self.pending.remove(&index).unwrap_or_default(),
        }
    }

    fn drain_closed(&mut self) -> Vec<IntervalBatch> {
        let mut out = Vec::new();
        let (Some(mut next), Some(open)) =
            (self.next, self.interval_of(self.max_seen - self.lateness))
        else {
            return out;
        };
        while next < open {
            out.push(self.take(next));
            next += 1;
        }
        self.next = Some(next);
        out
    }
}

/// Batches a whole time-ordered stream; rejected records are logged and returned.
pub fn batch_by_interval(
    records: impl IntoIterator<Item = FaceRecord>,
    length: f64,
    lateness: f64,
) -> Result<(Vec<IntervalBatch>, Vec<RejectedRecord>)> {
    let mut batcher = IntervalBatcher::new(length, lateness)?;
    let mut batches = Vec::new();
    let mut rejected = Vec::new();
    for record in records {
        match batcher.push(record) {
            Ok(closed) => batches.extend(closed),
            Err(r) => {
                warn!("dropping record {}: {}", r.record_id, r.reason);
                rejected.push(r);
            }
        }
    }
    batches.extend(batcher.finish());
    Ok((batches, rejected))
}

/// A record id with its prediction.
pub type ScoredRecord = (String, AgePrediction);

/// Scores one interval. Records whose feature length does not match the model
/// are skipped with a warning and reported in the second return value.
pub fn score_interval(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &IntervalBatch,
    classes: &AgeClassSet,
) -> Result<(Vec<ScoredRecord>, Vec<RejectedRecord>)> {
    let mut scored = Vec::with_capacity(batch.records.len());
    let mut skipped = Vec::new();
    for record in &batch.records {
        if record.features.len() != spec.input_dim {
            let reason = format!(
                "record has {} features, model expects {}",
                record.features.len(),
                spec.input_dim
            );
            warn!("skipping record {}: {reason}", record.record_id);
            skipped.push(RejectedRecord {
                record_id: record.record_id.clone(),
                timestamp: record.timestamp,
                reason,
            });
            continue;
        }
        let logits = forward(params, spec, &record.features)?;
        let prediction = predict_age(softmax(&logits), classes)?;
        scored.push((record.record_id.clone(), prediction));
    }
    Ok((scored, skipped))
}

/// Counts of predicted ages per group `floor((age - min_age) / group_width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGroupHistogram {
    min_age: u32,
    group_width: f64,
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl AgeGroupHistogram {
    pub fn new(min_age: u32, group_width: f64) -> Result<Self> {
        if !(group_width > 0.0) || !group_width.is_finite() {
            return Err(Error::Domain(format!(
                "group width must be positive, got {group_width}"
            )));
        }
        Ok(Self {
            min_age,
            group_width,
            counts: BTreeMap::new(),
            total: 0,
        })
    }

    pub fn min_age(&self) -> u32 {
        self.min_age
    }

    pub fn group_width(&self) -> f64 {
        self.group_width
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn group_of(&self, age: f64) -> u64 {
        let g = ((age - f64::from(self.min_age)) / self.group_width).floor();
        if g.is_nan() || g <= 0.0 {
            0
        } else {
            g as u64
        }
    }

    pub fn group_bounds(&self, group: u64) -> (f64, f64) {
        let lo = f64::from(self.min_age) + group as f64 * self.group_width;
        (
            lo,
            f64::from(self.min_age) + (group + 1) as f64 * self.group_width,
        )
    }

    pub fn record(&mut self, age: f64) {
        *self.counts.entry(self.group_of(age)).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn update<'a>(&mut self, predictions: impl IntoIterator<Item = &'a AgePrediction>) {
        for p in predictions {
            self.record(p.expected_age);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# min_age={}", self.min_age);
        let _ = writeln!(s, "# group_width={}", self.group_width);
        let _ = writeln!(s, "group_low,group_high,count");
        for (&g, &count) in &self.counts {
            let (lo, hi) = self.group_bounds(g);
            let _ = writeln!(s, "{lo},{hi},{count}");
        }
        let _ = writeln!(s, "total,,{}", self.total);
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut min_age = None;
        let mut width = None;
        let mut hist: Option<Self> = None;
        let mut saw_header = false;
        let mut total = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = Some(n + 1);
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "min_age" => {
                            min_age = Some(
                                v.trim()
                                    .parse::<u32>()
                                    .map_err(|_| Error::parse(line_no, "bad min_age"))?,
                            )
                        }
                        "group_width" => {
                            width = Some(
                                v.trim()
                                    .parse::<f64>()
                                    .map_err(|_| Error::parse(line_no, "bad group_width"))?,
                            )
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if total.is_some() {
                return Err(Error::parse(line_no, "content after the total row"));
            }
            if !saw_header {
                if line != "group_low,group_high,count" {
                    return Err(Error::parse(line_no, format!("unexpected header {line:?}")));
                }
                let (Some(m), Some(w)) = (min_age, width) else {
                    return Err(Error::parse(
                        line_no,
                        "missing min_age/group_width metadata",
                    ));
                };
                hist = Some(Self::new(m, w).map_err(|e| Error::parse(line_no, e.to_string()))?);
                saw_header = true;
                continue;
            }
            let h = hist.as_mut().expect("set with header");
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [lo, hi, count] = fields.as_slice() else {
                return Err(Error::parse(line_no, "expected 3 fields"));
            };
            let count: u64 = count
                .parse()
                .map_err(|_| Error::parse(line_no, "bad count"))?;
            if *lo == "total" {
                if !hi.is_empty() {
                    return Err(Error::parse(
                        line_no,
                        "total row must leave group_high empty",
                    ));
                }
                total = Some(count);
                continue;
            }
            let lo: f64 = lo
                .parse()
                .map_err(|_| Error::parse(line_no, "bad group_low"))?;
            let hi: f64 = hi
                .parse()
                .map_err(|_| Error::parse(line_no, "bad group_high"))?;
            let g = ((lo - f64::from(h.min_age)) / h.group_width).round();
            if !(g >= 0.0) || g >= u64::MAX as f64 || h.group_bounds(g as u64) != (lo, hi) {
                return Err(Error::parse(
                    line_no,
                    format!("[{lo}, {hi}) is not a group boundary"),
                ));
            }
            let g = g as u64;
            if h.counts.contains_key(&g) || h.counts.range(g..).next().is_some() {
                return Err(Error::parse(
                    line_no,
                    "groups must be listed once in increasing order",
                ));
            }
            if count > 0 {
                h.counts.insert(g, count);
                h.total = h
                    .total
                    .checked_add(count)
                    .ok_or_else(|| Error::parse(line_no, "count overflow"))?;
            }
        }
        let hist = hist.ok_or_else(|| Error::parse(None, "missing header"))?;
        match total {
            Some(t) if t == hist.total => Ok(hist),
            Some(t) => Err(Error::parse(
                None,
                format!("total row says {t}, groups sum to {}", hist.total),
            )),
            None => Err(Error::parse(None, "missing total row")),
        }
    }
}

pub fn update_histogram(hist: &mut AgeGroupHistogram, predictions: &[ScoredRecord]) {
    hist.update(predictions.iter().map(|(_, p)| p));
}

/// Writes the histogram CSV to a temporary file beside `path` and renames it into place.
pub fn persist_histogram(hist: &AgeGroupHistogram, path: &Path) -> Result<()> {
    write_atomic(path, hist.to_csv().as_bytes())
}

pub fn load_histogram(path: &Path) -> Result<AgeGroupHistogram> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AgeGroupHistogram::parse_csv(&text)
}

/// Parses `record_id,timestamp,f_0,...` lines; an optional `record_id,...`
/// header and `#` comment lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<FaceRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| Error::parse(e.position().map(|p| p.line() as usize), e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize);
        let id = record.get(0).unwrap_or("").trim();
        if n == 0 && id == "record_id" {
            continue;
        }
        if id.is_empty() {
            return Err(Error::parse(line, "empty record_id"));
        }
        let timestamp: f64 = record
            .get(1)
            .ok_or_else(|| Error::parse(line, "missing timestamp"))?
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, "bad timestamp"))?;
        if !timestamp.is_finite() {
            return Err(Error::parse(line, "timestamp must be finite"));
        }
        let features = record
            .iter()
            .skip(2)
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(line, format!("bad feature {f:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FaceRecord {
            record_id: id.to_string(),
            timestamp,
            features,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub interval_seconds: f64,
    pub group_width: f64,
    pub lateness: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            interval_seconds: 1.0,
            group_width: 10.0,
            lateness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub interval: u64,
    pub record_id: String,
    pub expected_age: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamReport {
    pub scores: Vec<ScoreRow>,
    pub histogram: AgeGroupHistogram,
    pub intervals: u64,
    pub rejected: Vec<RejectedRecord>,
}

impl StreamReport {
    pub fn accepted(&self) -> u64 {
        self.scores.len() as u64
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("interval,record_id,expected_age\n");
        for r in &self.scores {
            let _ = writeln!(s, "{},{},{}", r.interval, r.record_id, r.expected_age);
        }
        s
    }
}

/// Batches, scores and aggregates a whole record stream.
pub fn process_stream(
    params: &ParameterVector,
    spec: &ModelSpec,
    classes: &AgeClassSet,
    records: impl IntoIterator<Item = FaceRecord>,
    config: &StreamConfig,
) -> Result<StreamReport> {
    let (batches, mut rejected) =
        batch_by_interval(records, config.interval_seconds, config.lateness)?;
    let mut histogram = AgeGroupHistogram::new(classes.min_age(), config.group_width)?;
    let mut scores = Vec::new();
    for batch in &batches {
        let (scored, skipped) = score_interval(params, spec, batch, classes)?;
        update_histogram(&mut histogram, &scored);
        scores.extend(scored.into_iter().map(|(record_id, p)| ScoreRow {
            interval: batch.interval_index,
            record_id,
            expected_age: p.expected_age,
        }));
        rejected.extend(skipped);
    }
    Ok(StreamReport {
        scores,
        histogram,
        intervals: batches.len() as u64,
        rejected,
    })
}
