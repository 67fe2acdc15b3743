//! The forecasting network: speed-wave fusion, two attention-gated
//! spatio-temporal hypergraph blocks with residuals, a 1x1 channel reduction,
//! a bidirectional gated recurrent head and a linear map to the horizon.

mod layers;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::ForecastSample;
use crate::graph::Neighbors;
use crate::tensor::{Bindings, ExprGraph, Tensor, Var};
use crate::{Error, Result};

pub use layers::{
    attention, bidirectional_gru, gru_pass, hypergraph_conv, speed_wave, st_block, temporal_conv, AttentionAxis,
    AttentionOutput, GruWeights,
};

/// Feature-fusion formula applied to the speed and construction windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeedWave {
    /// `(Ws * Xs + Wc * Xc) * T`
    #[default]
    Fused,
    /// `Ws * Xs + Wc * Xc`
    Weighted,
    /// `Xs + Wc * Xc`
    FixedSpeed,
    /// `Xs * Xs + Wc`
    SquaredSpeed,
}

impl SpeedWave {
    pub const ALL: [SpeedWave; 4] = [
        SpeedWave::Fused,
        SpeedWave::Weighted,
        SpeedWave::FixedSpeed,
        SpeedWave::SquaredSpeed,
    ];

    pub fn formula(self) -> &'static str {
        match self {
            SpeedWave::Fused => "(W_s ⊙ X^s + W_c ⊙ X^c) ⊙ T^E",
            SpeedWave::Weighted => "W_s ⊙ X^s + W_c ⊙ X^c",
            SpeedWave::FixedSpeed => "X^s + W_c ⊙ X^c",
            SpeedWave::SquaredSpeed => "X^s ⊙ X^s + W_c",
        }
    }
}

impl fmt::Display for SpeedWave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.formula())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatio-temporal blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Per-head query/key/value width.
    pub head_dim: usize,
    /// Hidden channels of the blocks.
    pub channels: usize,
    /// Temporal convolution width.
    pub kernel_width: usize,
    pub rnn_hidden: usize,
    /// Width of the weekly time embedding.
    pub time_dim: usize,
    /// Input steps (H).
    pub history: usize,
    /// Forecast steps (P).
    pub horizon: usize,
    pub k_neighbors: Neighbors,
    pub speed_wave: SpeedWave,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            head_dim: 8,
            channels: 32,
            kernel_width: 3,
            rnn_hidden: 32,
            time_dim: 8,
            history: 12,
            horizon: 12,
            k_neighbors: Neighbors::Count(5),
            speed_wave: SpeedWave::Fused,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("channels", self.channels),
            ("kernel_width", self.kernel_width),
            ("rnn_hidden", self.rnn_hidden),
            ("time_dim", self.time_dim),
            ("history", self.history),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("model.{name} must be positive")));
        }
        if self.kernel_width > self.history {
            return Err(Error::Parameter(format!(
                "temporal kernel width {} exceeds history {}",
                self.kernel_width, self.history
            )));
        }
        Ok(())
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Named learnable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelParams(BTreeMap<String, Tensor>);

impl ModelParams {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self(tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl Bindings for ModelParams {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// A configured network for a corridor of `segments` vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub segments: usize,
    pub slots_per_week: usize,
}

impl Model {
    pub fn new(config: ModelConfig, segments: usize, slots_per_week: usize) -> Result<Self> {
        config.validate()?;
        if segments == 0 || slots_per_week == 0 {
            return Err(Error::Parameter("model needs at least one segment and one weekly slot".into()));
        }
        Ok(Self {
            config,
            segments,
            slots_per_week,
        })
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.config;
        let (n, h, ch, a) = (self.segments, c.history, c.channels, c.attention_width());
        let d = c.rnn_hidden;
        let mut out = vec![
            ("wave.speed".to_string(), vec![n, h], Init::Ones),
            ("wave.construction".to_string(), vec![n, h], Init::Zeros),
            ("time.embedding".to_string(), vec![self.slots_per_week, c.time_dim], Init::Xavier),
            ("time.proj".to_string(), vec![c.time_dim, 1], Init::Xavier),
            ("time.bias".to_string(), vec![1, 1], Init::Zeros),
            ("lift.weight".to_string(), vec![ch, 1], Init::Xavier),
            ("lift.bias".to_string(), vec![ch, 1], Init::Zeros),
        ];
        for b in 0..c.blocks {
            for axis in ["spatial", "temporal"] {
                for proj in ["query", "key", "value"] {
                    out.push((format!("block{b}.{axis}.{proj}"), vec![ch, a], Init::Xavier));
                }
                out.push((format!("block{b}.{axis}.output"), vec![a, ch], Init::Xavier));
            }
            out.push((format!("block{b}.theta"), vec![ch, ch], Init::Xavier));
            out.push((format!("block{b}.phi"), vec![ch, ch * c.kernel_width], Init::Xavier));
            out.push((format!("block{b}.phi_bias"), vec![ch, 1], Init::Zeros));
            out.push((format!("block{b}.residual"), vec![ch, ch], Init::Xavier));
        }
        out.push(("reduce.weight".to_string(), vec![1, ch], Init::Xavier));
        out.push(("reduce.bias".to_string(), vec![1, 1], Init::Zeros));
        for dir in ["forward", "backward"] {
            out.push((format!("rnn.{dir}.input"), vec![1, 3 * d], Init::Xavier));
            out.push((format!("rnn.{dir}.hidden"), vec![d, 3 * d], Init::Xavier));
            out.push((format!("rnn.{dir}.input_bias"), vec![1, 3 * d], Init::Zeros));
            out.push((format!("rnn.{dir}.hidden_bias"), vec![1, 3 * d], Init::Zeros));
        }
        out.push(("output.weight".to_string(), vec![2 * d, c.horizon], Init::Xavier));
        out.push(("output.bias".to_string(), vec![1, c.horizon], Init::Zeros));
        out
    }

    /// Expected shape of every parameter.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Xavier-uniform `±sqrt(6 / (rows + cols))` for matrices, zero biases,
    /// speed weights at 1 and construction weights at 0.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = BTreeMap::new();
        for (name, shape, init) in self.layout() {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::from_parts(shape.clone(), data)
                }
            };
            out.insert(name, t);
        }
        ModelParams(out)
    }

    /// Checks names, shapes and finiteness of `params`.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Structural(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter `{name}` is not finite")));
            }
        }
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::Structural(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Declares a parameter leaf with its expected shape.
    pub(crate) fn param(&self, g: &mut ExprGraph, name: &str) -> Result<Var> {
        let shape = self
            .layout()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, _)| s)
            .ok_or_else(|| Error::Structural(format!("unknown parameter `{name}`")))?;
        Ok(g.leaf(name, &shape)?)
    }

    fn check_sample(&self, sample: &ForecastSample, g_op: &Tensor) -> Result<()> {
        let (n, h) = (self.segments, self.config.history);
        let expect = [n, h];
        for (what, t) in [("speed", &sample.speed), ("construction", &sample.construction)] {
            if t.shape() != expect {
                return Err(Error::Tensor(crate::TensorError::Shape {
                    op: what_op(what),
                    left: expect.to_vec(),
                    right: t.shape().to_vec(),
                }));
            }
        }
        if sample.slots.len() != h || sample.slots.iter().any(|&s| s >= self.slots_per_week) {
            return Err(Error::Structural(format!(
                "sample needs {h} time slots below {}",
                self.slots_per_week
            )));
        }
        if g_op.shape() != [n, n] {
            return Err(Error::Tensor(crate::TensorError::Shape {
                op: "hypergraph operator",
                left: vec![n, n],
                right: g_op.shape().to_vec(),
            }));
        }
        Ok(())
    }

    /// Records the full forward pass for one sample; returns the `N x P`
    /// prediction node (normalized units).
    pub fn build(&self, g: &mut ExprGraph, sample: &ForecastSample, g_op: &Tensor) -> Result<Var> {
        self.check_sample(sample, g_op)?;
        let c = &self.config;
        let (n, h) = (self.segments, c.history);

        g.set_scope("speed_wave");
        let xs = g.constant(sample.speed.clone());
        let xc = g.constant(sample.construction.clone());
        let fused = speed_wave(self, g, xs, xc, &sample.slots, c.speed_wave)?;

        g.set_scope("lift");
        let flat = g.reshape(fused, &[1, n * h])?;
        let w = self.param(g, "lift.weight")?;
        let b = self.param(g, "lift.bias")?;
        let lifted = g.matmul(w, flat)?;
        let bias = g.broadcast(b, &[c.channels, n * h])?;
        let lifted = g.add(lifted, bias)?;
        let mut x = g.reshape(lifted, &[c.channels, n, h])?;

        let gop = g.constant(g_op.clone());
        for block in 0..c.blocks {
            x = st_block(self, g, x, gop, block)?;
        }

        g.set_scope("reduce");
        let flat = g.reshape(x, &[c.channels, n * h])?;
        let w = self.param(g, "reduce.weight")?;
        let b = self.param(g, "reduce.bias")?;
        let reduced = g.matmul(w, flat)?;
        let bias = g.broadcast(b, &[1, n * h])?;
        let reduced = g.add(reduced, bias)?;
        let seq = g.reshape(reduced, &[n, h])?;

        g.set_scope("recurrent");
        let fwd = GruWeights::declare(self, g, "forward")?;
        let bwd = GruWeights::declare(self, g, "backward")?;
        let state = bidirectional_gru(g, seq, &fwd, &bwd)?;

        g.set_scope("output");
        let w = self.param(g, "output.weight")?;
        let b = self.param(g, "output.bias")?;
        let out = g.matmul(state, w)?;
        let bias = g.broadcast(b, &[n, c.horizon])?;
        Ok(g.add(out, bias)?)
    }

    /// `N x P` prediction in normalized units.
    pub fn forward(&self, params: &ModelParams, sample: &ForecastSample, g_op: &Tensor) -> Result<Tensor> {
        let mut g = ExprGraph::new();
        let out = self.build(&mut g, sample, g_op)?;
        g.evaluate(params)?;
        Ok(g.value(out)?.clone())
    }
}

fn what_op(what: &str) -> &'static str {
    match what {
        "speed" => "speed window",
        _ => "construction window",
    }
}
