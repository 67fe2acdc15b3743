//! Error metrics in MPH, the normal / work-zone partition of evaluation cells,
//! disruption accuracy and the neighbour / speed-wave ablation harness.
//!
//! Metrics are averaged per cell (segment x horizon step), not per sample,
//! and a horizon of `h` covers the first `h` forecast steps.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{windowize, FeatureBundle, FeatureMap, ForecastSample};
use crate::graph::{build_hypergraph, hypergraph_operator, Neighbors, RoadNetwork};
use crate::model::{Model, ModelConfig, ModelParams, SpeedWave};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig};
use crate::{Error, Result};

/// Truth below this (MPH) is left out of MAPE.
pub const MAPE_FLOOR_MPH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Workzone,
    #[default]
    All,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Normal => "normal",
            Condition::Workzone => "workzone",
            Condition::All => "all",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Condition::Normal),
            "workzone" => Ok(Condition::Workzone),
            "all" => Ok(Condition::All),
            other => Err(Error::Parameter(format!("unknown condition `{other}`"))),
        }
    }
}

/// MAE and RMSE in MPH, MAPE in percent. An empty selection has `count == 0`
/// and no metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub count: usize,
    /// Cells that entered MAPE (truth at or above the floor).
    pub mape_count: usize,
    pub horizon: usize,
    pub condition: Condition,
}

impl MetricReport {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn with(mut self, horizon: usize, condition: Condition) -> Self {
        self.horizon = horizon;
        self.condition = condition;
        self
    }
}

/// Metrics over cells with `mask == 1`; flat slices of equal length.
pub fn compute_metrics(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Structural(format!(
            "metric inputs differ in length: {} / {} / {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut count, mut pct_count) = (0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if m != 1.0 {
            continue;
        }
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        count += 1;
        if t >= MAPE_FLOOR_MPH {
            pct += e.abs() / t;
            pct_count += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(MetricReport {
        mae: mean(abs, count),
        rmse: mean(sq, count).map(f64::sqrt),
        mape: mean(pct, pct_count).map(|v| v * 100.0),
        count,
        mape_count: pct_count,
        horizon: 0,
        condition: Condition::All,
    })
}

/// `1` where a work zone on a segment within `radius` miles is active.
/// Radius 0 means the segment itself.
pub fn workzone_map(bundle: &FeatureBundle, network: &RoadNetwork, radius: f64) -> Result<FeatureMap> {
    let n = bundle.segments();
    let mut out = FeatureMap::zeros(n, bundle.steps());
    for e in &bundle.events {
        let seg = e.validate(network)?;
        let active = bundle.calendar.active_range(e.start, e.end);
        for i in (0..n).filter(|&i| network.distance(i, seg) <= radius) {
            for t in active.clone() {
                out.set(i, t, 1.0);
            }
        }
    }
    Ok(out)
}

/// Per-sample `N x P` indicator of work-zone target cells; every other cell
/// is normal. Cells past the end of the record count as normal.
pub fn segment_conditions(anchors: &[usize], horizon: usize, zones: &FeatureMap) -> Vec<Tensor> {
    let n = zones.segments();
    anchors
        .iter()
        .map(|&a| {
            let mut out = Vec::with_capacity(n * horizon);
            for i in 0..n {
                for t in a..a + horizon {
                    out.push(if t < zones.steps() { zones.at(i, t) } else { 0.0 });
                }
            }
            Tensor::from_parts(vec![n, horizon], out)
        })
        .collect()
}

/// Model outputs and references for a set of samples, in MPH, each `N x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub anchors: Vec<usize>,
    pub pred: Vec<Tensor>,
    pub truth: Vec<Tensor>,
    pub mask: Vec<Tensor>,
    /// Average-history speed at each target cell.
    pub history: Vec<Tensor>,
    pub workzone: Vec<Tensor>,
}

/// Normalized predictions for each sample, computed in parallel.
pub fn predict(model: &Model, params: &ModelParams, samples: &[ForecastSample], g_op: &Tensor) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| model.forward(params, s, g_op)).collect()
}

impl EvalSet {
    pub fn build(
        model: &Model,
        params: &ModelParams,
        samples: &[ForecastSample],
        g_op: &Tensor,
        bundle: &FeatureBundle,
        zones: &FeatureMap,
    ) -> Result<Self> {
        let norm = bundle.normalizer;
        let p = model.config.horizon;
        let anchors: Vec<usize> = samples.iter().map(|s| s.anchor).collect();
        let pred = predict(model, params, samples, g_op)?
            .into_iter()
            .map(|t| t.map(|v| norm.denormalize(v)))
            .collect();
        let truth = samples.iter().map(|s| s.target.map(|v| norm.denormalize(v))).collect();
        let mask = samples.iter().map(|s| s.mask.clone()).collect();
        let n = bundle.segments();
        let history = anchors
            .iter()
            .map(|&a| {
                let mut out = Vec::with_capacity(n * p);
                for i in 0..n {
                    for t in a..a + p {
                        out.push(if t < bundle.steps() { bundle.history.at(i, t) } else { 0.0 });
                    }
                }
                Tensor::from_parts(vec![n, p], out)
            })
            .collect();
        let workzone = segment_conditions(&anchors, p, zones);
        Ok(Self {
            anchors,
            pred,
            truth,
            mask,
            history,
            workzone,
        })
    }

    fn steps(&self) -> usize {
        self.pred.first().map_or(0, |t| t.shape()[1])
    }

    /// Flattened cells over the first `horizon` steps in `condition`.
    fn select(&self, horizon: usize, condition: Condition) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = self.steps();
        if horizon == 0 || (p > 0 && horizon > p) {
            return Err(Error::Parameter(format!("horizon {horizon} outside 1..={p}")));
        }
        let (mut pr, mut tr, mut mk) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..self.pred.len() {
            let (pd, td, md, wd) = (
                self.pred[s].data(),
                self.truth[s].data(),
                self.mask[s].data(),
                self.workzone[s].data(),
            );
            for idx in (0..pd.len()).filter(|idx| idx % p < horizon) {
                let keep = match condition {
                    Condition::All => true,
                    Condition::Workzone => wd[idx] == 1.0,
                    Condition::Normal => wd[idx] != 1.0,
                };
                pr.push(pd[idx]);
                tr.push(td[idx]);
                mk.push(if keep { md[idx] } else { 0.0 });
            }
        }
        Ok((pr, tr, mk))
    }

    pub fn metrics(&self, horizon: usize, condition: Condition) -> Result<MetricReport> {
        let (p, t, m) = self.select(horizon, condition)?;
        Ok(compute_metrics(&p, &t, &m)?.with(horizon, condition))
    }

    /// Disruption accuracy per horizon step over work-zone cells.
    pub fn disruption_accuracy(&self, threshold: f64) -> Vec<Option<f64>> {
        let mut hits = vec![0usize; self.steps()];
        let mut total = vec![0usize; self.steps()];
        for s in 0..self.pred.len() {
            let cells = DisruptionCells {
                pred: self.pred[s].data(),
                truth: self.truth[s].data(),
                mask: self.mask[s].data(),
                history: self.history[s].data(),
                workzone: self.workzone[s].data(),
            };
            for (step, (h, n)) in cells.count(self.steps(), threshold).into_iter().enumerate() {
                hits[step] += h;
                total[step] += n;
            }
        }
        hits.iter()
            .zip(&total)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect()
    }
}

/// Row-major `N x P` views of one sample.
#[derive(Debug, Clone, Copy)]
pub struct DisruptionCells<'a> {
    pub pred: &'a [f64],
    pub truth: &'a [f64],
    pub mask: &'a [f64],
    pub history: &'a [f64],
    pub workzone: &'a [f64],
}

impl DisruptionCells<'_> {
    /// `(hits, selected)` per horizon step. A cell is selected when it is an
    /// observed work-zone cell with `|truth - history| > threshold`, and a hit
    /// when also `|pred - truth| <= threshold`.
    pub fn count(&self, steps: usize, threshold: f64) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); steps];
        for idx in 0..self.pred.len() {
            let selected = self.mask[idx] == 1.0
                && self.workzone[idx] == 1.0
                && (self.truth[idx] - self.history[idx]).abs() > threshold;
            if selected {
                let slot = &mut out[idx % steps];
                slot.1 += 1;
                if (self.pred[idx] - self.truth[idx]).abs() <= threshold {
                    slot.0 += 1;
                }
            }
        }
        out
    }
}

/// Disruption accuracy for one `N x P` sample; `None` per step with nothing selected.
pub fn disruption_accuracy(cells: &DisruptionCells<'_>, steps: usize, threshold: f64) -> Vec<Option<f64>> {
    cells
        .count(steps, threshold)
        .into_iter()
        .map(|(h, n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// Which published ablation table a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    Neighbors,
    SpeedWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub table: AblationTable,
    pub k_neighbors: Neighbors,
    pub speed_wave: SpeedWave,
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self.table {
            AblationTable::Neighbors => format!("k={}", self.k_neighbors),
            AblationTable::SpeedWave => self.speed_wave.formula().to_string(),
        }
    }
}

/// Neighbour counts 1, 5, 10 and all, fused speed wave.
pub fn neighbor_grid() -> Vec<AblationCell> {
    [Neighbors::Count(1), Neighbors::Count(5), Neighbors::Count(10), Neighbors::All]
        .into_iter()
        .map(|k| AblationCell {
            table: AblationTable::Neighbors,
            k_neighbors: k,
            speed_wave: SpeedWave::Fused,
        })
        .collect()
}

/// The four speed-wave formulas at five neighbours.
pub fn speed_wave_grid() -> Vec<AblationCell> {
    SpeedWave::ALL
        .into_iter()
        .map(|w| AblationCell {
            table: AblationTable::SpeedWave,
            k_neighbors: Neighbors::Count(5),
            speed_wave: w,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: AblationTable,
    pub label: String,
    pub k_neighbors: Neighbors,
    pub speed_wave: SpeedWave,
    pub report: Option<MetricReport>,
    /// Why the cell failed, if it did.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub horizon: usize,
    pub condition: Condition,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self, table: AblationTable) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.table == table)
    }

    /// Plain-text table, one line per row.
    pub fn render(&self, table: AblationTable) -> String {
        let title = match table {
            AblationTable::Neighbors => "Neighbors",
            AblationTable::SpeedWave => "Speed wave",
        };
        let mut out = format!("{title:<34} {:>8} {:>8} {:>8}\n", "MAE", "RMSE", "MAPE%");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for r in self.table(table) {
            match (&r.report, &r.error) {
                (Some(m), _) => out.push_str(&format!(
                    "{:<34} {:>8} {:>8} {:>8}\n",
                    r.label,
                    fmt(m.mae),
                    fmt(m.rmse),
                    fmt(m.mape)
                )),
                (None, err) => out.push_str(&format!(
                    "{:<34} failed: {}\n",
                    r.label,
                    err.as_deref().unwrap_or("unknown")
                )),
            }
        }
        out
    }
}

/// Shared inputs of every ablation cell.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub bundle: &'a FeatureBundle,
    pub network: &'a RoadNetwork,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizon: usize,
    pub condition: Condition,
    /// Work-zone radius for the condition partition, miles.
    pub eval_radius: f64,
}

/// Trains and tests one model per cell, all from the same seed. Cells run in
/// parallel; a failing cell is reported and the rest continue.
pub fn run_ablation(setup: &AblationSetup<'_>, grid: &[AblationCell]) -> Result<AblationReport> {
    let splits = windowize(setup.bundle)?;
    let zones = workzone_map(setup.bundle, setup.network, setup.eval_radius)?;
    let slots = setup.bundle.calendar.slots_per_week();
    let rows = grid
        .par_iter()
        .map(|cell| {
            let run = || -> Result<MetricReport> {
                let config = ModelConfig {
                    k_neighbors: cell.k_neighbors,
                    speed_wave: cell.speed_wave,
                    ..setup.model.clone()
                };
                let g_op = hypergraph_operator(&build_hypergraph(setup.network, cell.k_neighbors)?)?;
                let model = Model::new(config, setup.bundle.segments(), slots)?;
                let init = model.init_params(setup.train.seed);
                let out = train(
                    &model,
                    init,
                    &splits.train,
                    &splits.val,
                    &g_op,
                    setup.bundle.normalizer,
                    &setup.train,
                )?;
                EvalSet::build(&model, &out.params, &splits.test, &g_op, setup.bundle, &zones)?
                    .metrics(setup.horizon, setup.condition)
            };
            let result = run();
            if let Err(e) = &result {
                log::warn!("ablation cell {} failed: {e}", cell.label());
            }
            AblationRow {
                table: cell.table,
                label: cell.label(),
                k_neighbors: cell.k_neighbors,
                speed_wave: cell.speed_wave,
                error: result.as_ref().err().map(ToString::to_string),
                report: result.ok(),
            }
        })
        .collect();
    Ok(AblationReport {
        horizon: setup.horizon,
        condition: setup.condition,
        rows,
    })
}
