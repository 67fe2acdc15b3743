//! What-if forecasts: re-run a trained model with hypothetical work zones
//! added to the construction channel and report the difference.
//!
//! Injected events enter the construction map at their raw RBF value; the
//! diff gate is skipped because a hypothetical slowdown has no observed diff.
//! Only the part of an event inside the input window `[anchor - H, anchor)`
//! reaches the model, since that is the window the construction channel
//! covers.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corridor::Corridor;
use crate::features::{format_timestamp, parse_timestamp, raw_construction_map, Calendar, FeatureMap, WorkZoneEvent};
use crate::graph::{build_hypergraph, hypergraph_operator};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Label attached to every scenario response.
pub const EXTRAPOLATION_NOTE: &str =
    "model-based extrapolation: hypothetical work zones were never observed, so the scenario forecast is the model's estimate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRequest {
    #[serde(default)]
    pub injected_events: Vec<WorkZoneEvent>,
    /// First forecast step.
    pub anchor: NaiveDateTime,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentImpact {
    pub segment_id: String,
    pub mean_delta: f64,
    /// Largest drop below baseline, MPH (0 when nothing slows).
    pub max_slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: String,
    pub end: String,
}

/// Speeds in MPH, one row per segment and one column per forecast step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub anchor: String,
    pub horizon: usize,
    pub segment_ids: Vec<String>,
    pub times: Vec<String>,
    pub input_window: TimeWindow,
    pub baseline: Vec<Vec<f64>>,
    pub scenario: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub summary: Vec<SegmentImpact>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: String,
    pub index: usize,
    /// Most recent observed speed at or before the snapshot time.
    pub recent_speed: Option<f64>,
    pub recent_time: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub at: String,
    pub segments: Vec<SegmentInfo>,
    /// Miles, row-major in segment order.
    pub distances: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<u8>>,
    pub active_events: Vec<WorkZoneEvent>,
    pub span: TimeWindow,
    pub step_minutes: u32,
    pub history: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentHistory {
    pub segment_id: String,
    pub times: Vec<String>,
    /// Observed MPH; `None` where the sensor reported nothing.
    pub speeds: Vec<Option<f64>>,
    /// Average-history speed for the same cells.
    pub average: Vec<f64>,
}

/// A loaded checkpoint bound to the corridor data it forecasts.
#[derive(Debug, Clone)]
pub struct ScenarioEngine {
    pub checkpoint: Checkpoint,
    pub corridor: Corridor,
    g_op: Tensor,
    id: String,
}

impl ScenarioEngine {
    pub fn new(checkpoint: Checkpoint, mut corridor: Corridor) -> Result<Self> {
        if checkpoint.segment_ids != corridor.bundle.segment_ids {
            return Err(Error::Schema("checkpoint segments differ from the corridor data".into()));
        }
        let cfg = &checkpoint.model.config;
        let opts = corridor.bundle.options;
        if cfg.history != opts.history || cfg.horizon != opts.horizon {
            return Err(Error::Schema(format!(
                "checkpoint window {}/{} differs from feature window {}/{}",
                cfg.history, cfg.horizon, opts.history, opts.horizon
            )));
        }
        if checkpoint.model.slots_per_week != corridor.bundle.calendar.slots_per_week() {
            return Err(Error::Schema("checkpoint and data use different sampling steps".into()));
        }
        if corridor.bundle.normalizer != checkpoint.normalizer {
            log::warn!("using the checkpoint's normalization bounds instead of the data's");
            corridor.bundle.normalizer = checkpoint.normalizer;
        }
        let g_op = hypergraph_operator(&build_hypergraph(&corridor.network, cfg.k_neighbors)?)?;
        let id = checkpoint.id();
        Ok(Self {
            checkpoint,
            corridor,
            g_op,
            id,
        })
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    pub fn operator(&self) -> &Tensor {
        &self.g_op
    }

    fn calendar(&self) -> &Calendar {
        &self.corridor.bundle.calendar
    }

    fn anchor_index(&self, anchor: NaiveDateTime) -> Result<usize> {
        let cal = self.calendar();
        let h = self.checkpoint.model.config.history;
        let idx = cal
            .index_of(anchor)
            .ok_or_else(|| Error::OutOfRange(format!("anchor {} is not on the data grid", format_timestamp(anchor))))?;
        if idx < h || idx > cal.len {
            return Err(Error::OutOfRange(format!(
                "anchor {} needs {h} steps of history inside {} .. {}",
                format_timestamp(anchor),
                format_timestamp(cal.start),
                format_timestamp(cal.time_at(cal.len))
            )));
        }
        Ok(idx)
    }

    /// Denormalized `N x horizon` forecast with the given construction map.
    fn run(&self, anchor: usize, horizon: usize, construction: Option<&FeatureMap>) -> Result<Tensor> {
        let bundle = &self.corridor.bundle;
        let sample = bundle.sample(anchor, construction)?;
        let out = self
            .checkpoint
            .model
            .forward(&self.checkpoint.params, &sample, &self.g_op)?;
        let (n, p) = (out.shape()[0], out.shape()[1]);
        let mut data = Vec::with_capacity(n * horizon);
        for i in 0..n {
            data.extend(out.data()[i * p..i * p + horizon].iter().map(|&v| bundle.normalizer.denormalize(v)));
        }
        Ok(Tensor::new(&[n, horizon], data)?)
    }

    /// Real construction map with the injected events' raw RBF influence
    /// maxed in over the input window.
    pub fn scenario_construction(&self, anchor: usize, injected: &[WorkZoneEvent]) -> Result<FeatureMap> {
        let bundle = &self.corridor.bundle;
        let h = self.checkpoint.model.config.history;
        let window = Calendar::new(self.calendar().time_at(anchor - h), self.calendar().step_minutes, h)?;
        let extra = raw_construction_map(injected, &self.corridor.network, &window, bundle.options.sigma)?;
        let mut map = bundle.construction.clone();
        for i in 0..bundle.segments() {
            for k in 0..h {
                let t = anchor - h + k;
                map.set(i, t, map.at(i, t).max(extra.at(i, k)));
            }
        }
        Ok(map)
    }

    pub fn predict_scenario(&self, req: &ScenarioRequest) -> Result<ScenarioResponse> {
        let p = self.checkpoint.model.config.horizon;
        if req.horizon == 0 || req.horizon > p {
            return Err(Error::Parameter(format!("horizon {} must lie in 1..={p}", req.horizon)));
        }
        for e in &req.injected_events {
            e.validate(&self.corridor.network)?;
        }
        let anchor = self.anchor_index(req.anchor)?;
        let h = self.checkpoint.model.config.history;
        let baseline = self.run(anchor, req.horizon, None)?;
        let scenario = if req.injected_events.is_empty() {
            self.run(anchor, req.horizon, None)?
        } else {
            let map = self.scenario_construction(anchor, &req.injected_events)?;
            self.run(anchor, req.horizon, Some(&map))?
        };

        let clamp = |t: &Tensor| t.map(|v| v.max(0.0));
        let (baseline, scenario) = (clamp(&baseline), clamp(&scenario));
        let delta = scenario.zip_map(&baseline, |s, b| s - b)?;
        if !(baseline.is_finite() && scenario.is_finite()) {
            return Err(Error::Numeric("scenario forecast is not finite".into()));
        }
        if req.injected_events.is_empty() && delta.data().iter().any(|&d| d != 0.0) {
            return Err(Error::Numeric("empty scenario produced a nonzero delta".into()));
        }

        let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(req.horizon).map(<[f64]>::to_vec).collect() };
        let ids = &self.corridor.bundle.segment_ids;
        let delta_rows = rows(&delta);
        let summary = ids
            .iter()
            .zip(&delta_rows)
            .map(|(id, d)| SegmentImpact {
                segment_id: id.clone(),
                mean_delta: d.iter().sum::<f64>() / d.len() as f64,
                max_slowdown: d.iter().fold(0.0f64, |m, &v| m.max(-v)),
            })
            .collect();
        let cal = self.calendar();
        Ok(ScenarioResponse {
            anchor: format_timestamp(req.anchor),
            horizon: req.horizon,
            segment_ids: ids.clone(),
            times: (anchor..anchor + req.horizon).map(|t| format_timestamp(cal.time_at(t))).collect(),
            input_window: TimeWindow {
                start: format_timestamp(cal.time_at(anchor - h)),
                end: format_timestamp(cal.time_at(anchor)),
            },
            baseline: rows(&baseline),
            scenario: rows(&scenario),
            delta: delta_rows,
            summary,
            note: EXTRAPOLATION_NOTE.into(),
        })
    }

    /// Snapshot at `at` (default: the last step of the record).
    pub fn network_snapshot(&self, at: Option<NaiveDateTime>) -> Result<NetworkSnapshot> {
        let cal = *self.calendar();
        let bundle = &self.corridor.bundle;
        let t = match at {
            None => cal.len - 1,
            Some(time) => {
                if time < cal.start || time >= cal.time_at(cal.len) {
                    return Err(Error::OutOfRange(format!(
                        "time {} is outside the record",
                        format_timestamp(time)
                    )));
                }
                // Last grid step at or before `time`.
                ((time - cal.start).num_seconds() / (i64::from(cal.step_minutes) * 60)) as usize
            }
        };
        let now = cal.time_at(t);
        let segments = bundle
            .segment_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let last = (0..=t).rev().find(|&s| bundle.mask.at(i, s) == 1.0);
                SegmentInfo {
                    id: id.clone(),
                    index: i,
                    recent_speed: last.map(|s| bundle.speed.at(i, s)),
                    recent_time: last.map(|s| format_timestamp(cal.time_at(s))),
                }
            })
            .collect();
        let net = &self.corridor.network;
        Ok(NetworkSnapshot {
            at: format_timestamp(now),
            segments,
            distances: net.distance_rows(),
            adjacency: net.adjacency_rows(),
            active_events: bundle.events.iter().filter(|e| e.active_at(now)).cloned().collect(),
            span: TimeWindow {
                start: format_timestamp(cal.start),
                end: format_timestamp(cal.time_at(cal.len)),
            },
            step_minutes: cal.step_minutes,
            history: self.checkpoint.model.config.history,
            horizon: self.checkpoint.model.config.horizon,
        })
    }

    /// Observed speeds of one segment over `[from, to)`, clamped to the record.
    pub fn history(&self, segment: &str, from: NaiveDateTime, to: NaiveDateTime) -> Result<SegmentHistory> {
        let i = self
            .corridor
            .network
            .index_of(segment)
            .ok_or_else(|| Error::OutOfRange(format!("unknown segment `{segment}`")))?;
        if from >= to {
            return Err(Error::Parameter("`from` must precede `to`".into()));
        }
        let cal = self.calendar();
        let bundle = &self.corridor.bundle;
        let range = cal.active_range(from, to);
        Ok(SegmentHistory {
            segment_id: segment.to_string(),
            times: range.clone().map(|t| format_timestamp(cal.time_at(t))).collect(),
            speeds: range
                .clone()
                .map(|t| (bundle.mask.at(i, t) == 1.0).then(|| bundle.speed.at(i, t)))
                .collect(),
            average: range.map(|t| bundle.history.at(i, t)).collect(),
        })
    }
}

/// Parses a request timestamp, mapping failures to a parameter error.
pub fn parse_time(s: &str) -> Result<NaiveDateTime> {
    parse_timestamp(s).ok_or_else(|| Error::Parameter(format!("`{s}` is not an ISO-8601 timestamp")))
}
