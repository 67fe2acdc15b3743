//! Raw data ingestion and the aligned `N x T` feature maps the model consumes:
//! observed speed, average history, diff, construction (RBF) and binary
//! work-zone maps, plus min-max normalization and sample windowing.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::graph::RoadNetwork;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MINUTES_PER_DAY: u32 = 1440;
const MINUTES_PER_WEEK: u32 = 7 * MINUTES_PER_DAY;

const TIME_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 local timestamp (no zone).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Uniform sampling grid of a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub start: NaiveDateTime,
    pub step_minutes: u32,
    pub len: usize,
}

impl Calendar {
    pub fn new(start: NaiveDateTime, step_minutes: u32, len: usize) -> Result<Self> {
        if step_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(step_minutes) {
            return Err(Error::Parameter(format!(
                "sampling step {step_minutes} min does not divide a day"
            )));
        }
        Ok(Self {
            start,
            step_minutes,
            len,
        })
    }

    pub fn slots_per_week(&self) -> usize {
        (MINUTES_PER_WEEK / self.step_minutes) as usize
    }

    pub fn time_at(&self, index: usize) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(i64::from(self.step_minutes) * index as i64)
    }

    /// Weekly bin of a time: Monday 00:00 is slot 0.
    pub fn slot_of_time(&self, t: NaiveDateTime) -> usize {
        let minute = t.weekday().num_days_from_monday() * MINUTES_PER_DAY + t.hour() * 60 + t.minute();
        (minute / self.step_minutes) as usize % self.slots_per_week()
    }

    pub fn slot(&self, index: usize) -> usize {
        self.slot_of_time(self.time_at(index))
    }

    pub fn slots(&self) -> Vec<usize> {
        (0..self.len).map(|i| self.slot(i)).collect()
    }

    /// Index of a time exactly on the grid (may equal `len`, one step past the end).
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let minutes = (t - self.start).num_minutes();
        let exact = (t - self.start).num_seconds() % 60 == 0;
        let step = i64::from(self.step_minutes);
        (exact && minutes >= 0 && minutes % step == 0).then_some((minutes / step) as usize)
    }

    /// Grid indices `t` with `start <= time(t) < end`, clamped to the series.
    pub fn active_range(&self, start: NaiveDateTime, end: NaiveDateTime) -> Range<usize> {
        let step = i64::from(self.step_minutes) * 60;
        let first = |x: NaiveDateTime| -> usize {
            let secs = (x - self.start).num_seconds();
            if secs <= 0 {
                0
            } else {
                (((secs + step - 1) / step) as usize).min(self.len)
            }
        };
        let (a, b) = (first(start), first(end));
        a..b.max(a)
    }
}

/// Dense `N x T` map, row-major by segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Structural(format!(
                "feature map {rows}x{cols} given {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn segments(&self) -> usize {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.cols + t]
    }

    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.values[i * self.cols + t] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Columns `[start, start + len)` as an `N x len` tensor.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let mut out = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::from_parts(vec![self.rows, len], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Observed speeds (MPH) with an observation mask (1 = observed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub segment_ids: Vec<String>,
    pub values: FeatureMap,
    pub mask: FeatureMap,
}

impl SpeedSeries {
    /// Cells that are empty, zero or flagged in `mask` become unobserved.
    pub fn new(segment_ids: Vec<String>, values: FeatureMap) -> Result<Self> {
        if values.segments() != segment_ids.len() {
            return Err(Error::Structural("one row per segment required".into()));
        }
        if let Some(v) = values.values().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Structural(format!("speed {v} is not a non-negative number")));
        }
        let mask = values.map(|v| if v == 0.0 { 0.0 } else { 1.0 });
        Ok(Self {
            segment_ids,
            values,
            mask,
        })
    }

    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.mask.at(i, t) == 1.0
    }
}

/// Reads `timestamp,<seg1>,<seg2>,...`. When `network` is given the columns
/// are reordered to the network's segment order and must match it exactly.
pub fn load_speed_csv(path: &Path, network: Option<&RoadNetwork>) -> Result<(SpeedSeries, Calendar)> {
    let display = path.display().to_string();
    let fmt_err = |line: usize, message: String| Error::Format {
        path: display.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(fmt_err(1, "need a timestamp column and at least one segment".into()));
    }
    let columns = header[1..].to_vec();
    let order: Vec<usize> = match network {
        Some(net) => {
            if let Some(unknown) = columns.iter().find(|c| net.index_of(c).is_none()) {
                return Err(Error::Schema(format!("speed column `{unknown}` is not a network segment")));
            }
            if let Some(missing) = net.segment_ids().iter().find(|id| !columns.contains(id)) {
                return Err(Error::Schema(format!("no speed column for segment `{missing}`")));
            }
            if columns.len() != net.len() {
                return Err(Error::Schema("duplicate speed columns".into()));
            }
            net.segment_ids()
                .iter()
                .map(|id| columns.iter().position(|c| c == id).unwrap_or_default())
                .collect()
        }
        None => (0..columns.len()).collect(),
    };
    let ids: Vec<String> = order.iter().map(|&c| columns[c].clone()).collect();

    let mut times: Vec<NaiveDateTime> = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        if rec.len() != header.len() {
            return Err(fmt_err(line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let t = parse_timestamp(&rec[0]).ok_or_else(|| fmt_err(line, format!("bad timestamp `{}`", &rec[0])))?;
        if let (Some(&prev), Some(&first)) = (times.last(), times.first()) {
            let step = if times.len() >= 2 { times[1] - first } else { t - prev };
            if t <= prev || t - prev != step {
                return Err(fmt_err(
                    line,
                    format!("irregular timestamp {} after {}", format_timestamp(t), format_timestamp(prev)),
                ));
            }
        }
        times.push(t);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                0.0
            } else {
                cell.parse::<f64>()
                    .map_err(|_| fmt_err(line, format!("bad speed `{cell}`")))?
            };
            if !v.is_finite() || v < 0.0 {
                return Err(fmt_err(line, format!("speed `{cell}` must be a non-negative number")));
            }
            cols[c].push(v);
        }
    }
    if times.is_empty() {
        return Err(fmt_err(2, "no rows".into()));
    }
    let step_minutes = if times.len() >= 2 {
        let d = times[1] - times[0];
        if d.num_seconds() % 60 != 0 {
            return Err(fmt_err(3, "step is not a whole number of minutes".into()));
        }
        d.num_minutes() as u32
    } else {
        MINUTES_PER_DAY
    };
    let cal = Calendar::new(times[0], step_minutes, times.len())?;
    let values: Vec<f64> = order.iter().flat_map(|&c| cols[c].iter().copied()).collect();
    let series = SpeedSeries::new(ids, FeatureMap::new(order.len(), times.len(), values)?)?;
    Ok((series, cal))
}

/// A scheduled work zone on one segment over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkZoneEvent {
    pub segment_id: String,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

impl WorkZoneEvent {
    pub fn validate(&self, network: &RoadNetwork) -> Result<usize> {
        if self.start >= self.end {
            return Err(Error::Schema(format!(
                "work zone on `{}` must start before it ends",
                self.segment_id
            )));
        }
        network
            .index_of(&self.segment_id)
            .ok_or_else(|| Error::Schema(format!("work zone on unknown segment `{}`", self.segment_id)))
    }

    pub fn active_at(&self, t: NaiveDateTime) -> bool {
        self.start <= t && t < self.end
    }
}

/// Reads `segment_id,start,end` rows.
pub fn load_workzones_csv(path: &Path) -> Result<Vec<WorkZoneEvent>> {
    let display = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut events = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Format {
            path: display.clone(),
            line: r + 2,
            message,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let start = parse_timestamp(&rec[1]).ok_or_else(|| bad(format!("bad start `{}`", &rec[1])))?;
        let end = parse_timestamp(&rec[2]).ok_or_else(|| bad(format!("bad end `{}`", &rec[2])))?;
        if start >= end {
            return Err(bad("start must precede end".into()));
        }
        events.push(WorkZoneEvent {
            segment_id: rec[0].trim().to_string(),
            start,
            end,
        });
    }
    Ok(events)
}

/// Per-cell mean of observed speeds sharing the cell's weekly slot, using only
/// observations inside `fit`. A (segment, slot) with no observation falls back
/// to the segment's mean over `fit`.
pub fn average_history_map(series: &SpeedSeries, cal: &Calendar, fit: Range<usize>) -> Result<FeatureMap> {
    let n = series.values.segments();
    let t_len = series.values.steps();
    let slots = cal.slots();
    let per_week = cal.slots_per_week();
    let mut out = FeatureMap::zeros(n, t_len);
    let mut fallbacks = 0usize;
    for i in 0..n {
        let mut sum = vec![0.0; per_week];
        let mut count = vec![0usize; per_week];
        let (mut total, mut total_n) = (0.0, 0usize);
        for t in fit.clone() {
            if series.observed(i, t) {
                let v = series.values.at(i, t);
                sum[slots[t]] += v;
                count[slots[t]] += 1;
                total += v;
                total_n += 1;
            }
        }
        if total_n == 0 {
            return Err(Error::Degenerate(format!(
                "segment `{}` has no observed speed in the fitting range",
                series.segment_ids[i]
            )));
        }
        let global = total / total_n as f64;
        for t in 0..t_len {
            let s = slots[t];
            let v = if count[s] > 0 {
                sum[s] / count[s] as f64
            } else {
                fallbacks += 1;
                global
            };
            out.set(i, t, v);
        }
    }
    if fallbacks > 0 {
        log::warn!("average history: {fallbacks} cells fell back to segment means (unobserved weekly slots)");
    }
    Ok(out)
}

/// `speed - history` on observed cells, 0 elsewhere. Negative means slower
/// than usual.
pub fn diff_map(speed: &FeatureMap, history: &FeatureMap, mask: &FeatureMap) -> FeatureMap {
    let values = speed
        .values()
        .iter()
        .zip(history.values())
        .zip(mask.values())
        .map(|((s, h), m)| if *m == 1.0 { s - h } else { 0.0 })
        .collect();
    FeatureMap {
        rows: speed.rows,
        cols: speed.cols,
        values,
    }
}

pub fn rbf(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

/// Ungated RBF influence: max over active events of `exp(-d^2 / 2 sigma^2)`.
pub fn raw_construction_map(
    events: &[WorkZoneEvent],
    network: &RoadNetwork,
    cal: &Calendar,
    sigma: f64,
) -> Result<FeatureMap> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("RBF bandwidth must be positive, got {sigma}")));
    }
    let n = network.len();
    let mut out = FeatureMap::zeros(n, cal.len);
    for e in events {
        let seg = e.validate(network)?;
        let range = cal.active_range(e.start, e.end);
        for i in 0..n {
            let k = rbf(network.distance(i, seg), sigma);
            for t in range.clone() {
                if k > out.at(i, t) {
                    out.set(i, t, k);
                }
            }
        }
    }
    Ok(out)
}

/// RBF construction map gated by the diff map: a cell only counts when
/// traffic there is at least `-delta` MPH below history (`diff <= delta`).
pub fn construction_map(
    events: &[WorkZoneEvent],
    network: &RoadNetwork,
    cal: &Calendar,
    sigma: f64,
    diff: &FeatureMap,
    delta: f64,
) -> Result<FeatureMap> {
    let raw = raw_construction_map(events, network, cal, sigma)?;
    let values = raw
        .values()
        .iter()
        .zip(diff.values())
        .map(|(&r, &d)| if d <= delta { r } else { 0.0 })
        .collect();
    FeatureMap::new(raw.rows, raw.cols, values)
}

/// 1 where an event sits on the segment itself, else 0.
pub fn binary_construction_map(events: &[WorkZoneEvent], network: &RoadNetwork, cal: &Calendar) -> Result<FeatureMap> {
    let mut out = FeatureMap::zeros(network.len(), cal.len);
    for e in events {
        let seg = e.validate(network)?;
        for t in cal.active_range(e.start, e.end) {
            out.set(seg, t, 1.0);
        }
    }
    Ok(out)
}

/// Min-max scaling bounds in MPH.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub vmin: f64,
    pub vmax: f64,
}

impl Normalizer {
    pub fn new(vmin: f64, vmax: f64) -> Result<Self> {
        if !(vmax > vmin) {
            return Err(Error::Degenerate(format!("normalization bounds [{vmin}, {vmax}] are empty")));
        }
        Ok(Self { vmin, vmax })
    }

    /// Bounds over observed cells of `fit`.
    pub fn fit(series: &SpeedSeries, fit: Range<usize>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..series.values.segments() {
            for t in fit.clone() {
                if series.observed(i, t) {
                    let v = series.values.at(i, t);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        Self::new(lo, hi)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.vmin) / (self.vmax - self.vmin)
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * (self.vmax - self.vmin) + self.vmin
    }

    pub fn range(&self) -> f64 {
        self.vmax - self.vmin
    }
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r >= 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.train <= 0.0 {
            return Err(Error::Parameter(format!("split ratios {all:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// Anchor counts of a chronological split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub history: usize,
    pub horizon: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitPlan {
    pub fn new(steps: usize, history: usize, horizon: usize, split: SplitRatios) -> Result<Self> {
        if history == 0 || horizon == 0 {
            return Err(Error::Parameter("history and horizon must be at least 1".into()));
        }
        if history + horizon > steps {
            return Err(Error::Parameter(format!(
                "history {history} + horizon {horizon} exceeds series length {steps}"
            )));
        }
        split.validate()?;
        let anchors = steps - history - horizon + 1;
        let train = ((split.train * anchors as f64) + 1e-9).floor() as usize;
        let val = (((split.val * anchors as f64) + 1e-9).floor() as usize).min(anchors - train);
        Ok(Self {
            history,
            horizon,
            train,
            val,
            test: anchors - train - val,
        })
    }

    pub fn anchors(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Anchor `t` reads inputs `[t - H, t)` and targets `[t, t + P)`.
    pub fn anchor_range(&self, part: Part) -> Range<usize> {
        let first = self.history;
        let (a, b) = match part {
            Part::Train => (0, self.train),
            Part::Val => (self.train, self.train + self.val),
            Part::Test => (self.train + self.val, self.anchors()),
        };
        first + a..first + b
    }

    /// End (exclusive) of the time range any training target touches; all
    /// fitted statistics use `[0, train_end)`.
    pub fn train_end(&self) -> usize {
        self.history + self.train.saturating_sub(1) + self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Knobs for building a [`FeatureBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub delta: f64,
    pub sigma: f64,
    pub history: usize,
    pub horizon: usize,
    pub split: SplitRatios,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            delta: -5.0,
            sigma: 1.0,
            history: 12,
            horizon: 12,
            split: SplitRatios::default(),
        }
    }
}

/// All aligned feature maps of a corridor plus what is needed to window them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub segment_ids: Vec<String>,
    pub calendar: Calendar,
    /// Observed speed in MPH; unobserved cells hold 0.
    pub speed: FeatureMap,
    pub mask: FeatureMap,
    pub history: FeatureMap,
    pub diff: FeatureMap,
    pub construction: FeatureMap,
    pub binary_construction: FeatureMap,
    pub time_slots: Vec<usize>,
    pub normalizer: Normalizer,
    pub plan_train_end: usize,
    pub options: FeatureOptions,
    pub events: Vec<WorkZoneEvent>,
}

impl FeatureBundle {
    pub fn build(
        series: &SpeedSeries,
        cal: &Calendar,
        network: &RoadNetwork,
        events: &[WorkZoneEvent],
        options: FeatureOptions,
    ) -> Result<Self> {
        if series.segment_ids != network.segment_ids() {
            return Err(Error::Schema("speed series and network list different segments".into()));
        }
        if series.values.steps() != cal.len {
            return Err(Error::Structural("calendar length differs from series".into()));
        }
        let plan = SplitPlan::new(cal.len, options.history, options.horizon, options.split)?;
        let fit = 0..plan.train_end();
        let history = average_history_map(series, cal, fit.clone())?;
        let normalizer = Normalizer::fit(series, fit)?;
        let diff = diff_map(&series.values, &history, &series.mask);
        let construction = construction_map(events, network, cal, options.sigma, &diff, options.delta)?;
        let binary_construction = binary_construction_map(events, network, cal)?;
        Ok(Self {
            segment_ids: series.segment_ids.clone(),
            calendar: *cal,
            speed: series.values.clone(),
            mask: series.mask.clone(),
            history,
            diff,
            construction,
            binary_construction,
            time_slots: cal.slots(),
            normalizer,
            plan_train_end: plan.train_end(),
            options,
            events: events.to_vec(),
        })
    }

    pub fn segments(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn steps(&self) -> usize {
        self.calendar.len
    }

    pub fn plan(&self) -> Result<SplitPlan> {
        SplitPlan::new(self.steps(), self.options.history, self.options.horizon, self.options.split)
    }

    /// Normalized model-input speed: observed value, or history where unobserved.
    pub fn input_speed(&self, start: usize, len: usize) -> Tensor {
        let n = self.segments();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            for t in start..start + len {
                let v = if self.mask.at(i, t) == 1.0 {
                    self.speed.at(i, t)
                } else {
                    self.history.at(i, t)
                };
                out.push(self.normalizer.normalize(v));
            }
        }
        Tensor::from_parts(vec![n, len], out)
    }

    /// Sample at anchor `t` (inputs `[t - H, t)`, targets `[t, t + P)`);
    /// targets past the end of the data are masked.
    pub fn sample(&self, anchor: usize, construction: Option<&FeatureMap>) -> Result<ForecastSample> {
        let (h, p) = (self.options.history, self.options.horizon);
        if anchor < h || anchor > self.steps() {
            return Err(Error::OutOfRange(format!(
                "anchor {anchor} needs {h} steps of history within {} steps",
                self.steps()
            )));
        }
        let n = self.segments();
        let map = construction.unwrap_or(&self.construction);
        let mut target = Vec::with_capacity(n * p);
        let mut mask = Vec::with_capacity(n * p);
        for i in 0..n {
            for t in anchor..anchor + p {
                if t < self.steps() && self.mask.at(i, t) == 1.0 {
                    target.push(self.normalizer.normalize(self.speed.at(i, t)));
                    mask.push(1.0);
                } else {
                    target.push(0.0);
                    mask.push(0.0);
                }
            }
        }
        Ok(ForecastSample {
            anchor,
            speed: self.input_speed(anchor - h, h),
            construction: map.window(anchor - h, h),
            slots: self.time_slots[anchor - h..anchor].to_vec(),
            target: Tensor::from_parts(vec![n, p], target),
            mask: Tensor::from_parts(vec![n, p], mask),
        })
    }
}

/// One training/evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSample {
    pub anchor: usize,
    /// `N x H`, normalized, unobserved cells imputed from history.
    pub speed: Tensor,
    /// `N x H` construction map.
    pub construction: Tensor,
    /// Weekly slot of each input step.
    pub slots: Vec<usize>,
    /// `N x P`, normalized.
    pub target: Tensor,
    /// `N x P`, 1 where the target was observed.
    pub mask: Tensor,
}

impl ForecastSample {
    pub fn observed_targets(&self) -> usize {
        self.mask.data().iter().filter(|m| **m == 1.0).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<ForecastSample>,
    pub val: Vec<ForecastSample>,
    pub test: Vec<ForecastSample>,
}

impl Splits {
    pub fn get(&self, part: Part) -> &[ForecastSample] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// Chronological windowing; samples with a fully masked target are dropped.
pub fn windowize(bundle: &FeatureBundle) -> Result<Splits> {
    let plan = bundle.plan()?;
    let collect = |part: Part| -> Result<Vec<ForecastSample>> {
        plan.anchor_range(part)
            .map(|a| bundle.sample(a, None))
            .filter(|s| s.as_ref().map_or(true, |s| s.observed_targets() > 0))
            .collect()
    };
    Ok(Splits {
        train: collect(Part::Train)?,
        val: collect(Part::Val)?,
        test: collect(Part::Test)?,
    })
}

/// Index of event segments for quick lookups.
pub fn events_by_segment(events: &[WorkZoneEvent], network: &RoadNetwork) -> Result<HashMap<usize, Vec<WorkZoneEvent>>> {
    let mut out: HashMap<usize, Vec<WorkZoneEvent>> = HashMap::new();
    for e in events {
        out.entry(e.validate(network)?).or_default().push(e.clone());
    }
    Ok(out)
}
