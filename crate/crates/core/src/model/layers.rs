//! Graph-building pieces of the network. Activations inside the blocks are
//! laid out `[channels, segments, steps]`.

use crate::tensor::{ExprGraph, Tensor, Var};
use crate::Result;

use super::{Model, SpeedWave};

/// Fuses the `N x H` speed and construction windows into one input channel.
pub fn speed_wave(model: &Model, g: &mut ExprGraph, xs: Var, xc: Var, slots: &[usize], wave: SpeedWave) -> Result<Var> {
    let shape = g.shape(xs).to_vec();
    let wc = model.param(g, "wave.construction")?;
    let construction = g.mul(wc, xc)?;
    match wave {
        SpeedWave::Fused => {
            let ws = model.param(g, "wave.speed")?;
            let speed = g.mul(ws, xs)?;
            let mixed = g.add(speed, construction)?;
            let tf = time_factor(model, g, slots, &shape)?;
            Ok(g.mul(mixed, tf)?)
        }
        SpeedWave::Weighted => {
            let ws = model.param(g, "wave.speed")?;
            let speed = g.mul(ws, xs)?;
            Ok(g.add(speed, construction)?)
        }
        SpeedWave::FixedSpeed => Ok(g.add(xs, construction)?),
        SpeedWave::SquaredSpeed => {
            let sq = g.mul(xs, xs)?;
            Ok(g.add(sq, wc)?)
        }
    }
}

/// `2 * sigmoid(E[slot] . p + b)` per input step, broadcast over segments;
/// equals 1 when the projection is zero.
fn time_factor(model: &Model, g: &mut ExprGraph, slots: &[usize], shape: &[usize]) -> Result<Var> {
    let h = slots.len();
    let table = model.param(g, "time.embedding")?;
    let proj = model.param(g, "time.proj")?;
    let bias = model.param(g, "time.bias")?;
    let rows = g.gather_rows(table, slots)?;
    let logits = g.matmul(rows, proj)?;
    let bias = g.broadcast(bias, &[h, 1])?;
    let logits = g.add(logits, bias)?;
    let gate = g.sigmoid(logits);
    let gate = g.scale(gate, 2.0);
    let row = g.reshape(gate, &[1, h])?;
    Ok(g.broadcast(row, shape)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Segments attend to each other within one time step.
    Spatial,
    /// Time steps attend to each other within one segment.
    Temporal,
}

impl AttentionAxis {
    fn name(self) -> &'static str {
        match self {
            AttentionAxis::Spatial => "spatial",
            AttentionAxis::Temporal => "temporal",
        }
    }

    /// `[C, N, H]` to `[batch, tokens, C]`, and back.
    fn layout(self) -> ([usize; 3], [usize; 3]) {
        match self {
            AttentionAxis::Spatial => ([2, 1, 0], [2, 1, 0]),
            AttentionAxis::Temporal => ([1, 2, 0], [2, 0, 1]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[C, N, H]`, input plus attended values.
    pub output: Var,
    /// `[batch * heads, tokens, tokens]`, rows sum to 1.
    pub weights: Var,
}

/// Multi-head scaled dot-product self-attention along one axis with a residual.
pub fn attention(model: &Model, g: &mut ExprGraph, x: Var, block: usize, axis: AttentionAxis) -> Result<AttentionOutput> {
    let cfg = &model.config;
    let (heads, dk) = (cfg.heads, cfg.head_dim);
    let c = g.shape(x)[0];
    let prefix = format!("block{block}.{}", axis.name());
    g.set_scope(prefix.clone());
    let (to_tokens, from_tokens) = axis.layout();
    let tokens = g.permute(x, &to_tokens)?;
    let (batch, len) = (g.shape(tokens)[0], g.shape(tokens)[1]);
    let flat = g.reshape(tokens, &[batch * len, c])?;

    let project = |g: &mut ExprGraph, name: &str| -> Result<Var> {
        let w = model.param(g, &format!("{prefix}.{name}"))?;
        let p = g.matmul(flat, w)?;
        let p = g.reshape(p, &[batch, len, heads, dk])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        Ok(g.reshape(p, &[batch * heads, len, dk])?)
    };
    let q = project(g, "query")?;
    let k = project(g, "key")?;
    let v = project(g, "value")?;

    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let attended = g.batch_matmul(weights, v)?;
    let attended = g.reshape(attended, &[batch, heads, len, dk])?;
    let attended = g.permute(attended, &[0, 2, 1, 3])?;
    let attended = g.reshape(attended, &[batch * len, heads * dk])?;
    let wo = model.param(g, &format!("{prefix}.output"))?;
    let mixed = g.matmul(attended, wo)?;
    let mixed = g.reshape(mixed, &[batch, len, c])?;
    let back = g.permute(mixed, &from_tokens)?;
    Ok(AttentionOutput {
        output: g.add(x, back)?,
        weights,
    })
}

/// `ReLU(theta . (G x))`, where `G` mixes segments and `theta` mixes channels.
pub fn hypergraph_conv(g: &mut ExprGraph, x: Var, gop: Var, theta: Var) -> Result<Var> {
    let (c, n, h) = dims3(g, x);
    let by_vertex = g.permute(x, &[1, 0, 2])?;
    let by_vertex = g.reshape(by_vertex, &[n, c * h])?;
    let mixed = g.matmul(gop, by_vertex)?;
    let mixed = g.reshape(mixed, &[n, c, h])?;
    let mixed = g.permute(mixed, &[1, 0, 2])?;
    let mixed = g.reshape(mixed, &[c, n * h])?;
    let out = g.matmul(theta, mixed)?;
    let cout = g.shape(out)[0];
    let out = g.relu(out);
    Ok(g.reshape(out, &[cout, n, h])?)
}

/// Same-length 1-D convolution along time with zero padding, then ReLU.
/// `phi` is `[C_out, width * C]`, column `j * C + c` weighting channel `c`
/// at offset `j - (width - 1) / 2`.
pub fn temporal_conv(g: &mut ExprGraph, x: Var, phi: Var, bias: Var, width: usize) -> Result<Var> {
    let (c, n, h) = dims3(g, x);
    let left = (width - 1) / 2;
    let right = width - 1 - left;
    let mut parts = Vec::with_capacity(3);
    if left > 0 {
        parts.push(g.constant(Tensor::zeros(&[c, n, left])));
    }
    parts.push(x);
    if right > 0 {
        parts.push(g.constant(Tensor::zeros(&[c, n, right])));
    }
    let padded = if parts.len() == 1 { x } else { g.concat(&parts, 2)? };
    let taps: Vec<Var> = (0..width)
        .map(|j| g.slice(padded, 2, j, h))
        .collect::<std::result::Result<_, _>>()?;
    let stacked = if width == 1 { taps[0] } else { g.concat(&taps, 0)? };
    let stacked = g.reshape(stacked, &[width * c, n * h])?;
    let out = g.matmul(phi, stacked)?;
    let cout = g.shape(out)[0];
    let bias = g.broadcast(bias, &[cout, n * h])?;
    let out = g.add(out, bias)?;
    let out = g.relu(out);
    Ok(g.reshape(out, &[cout, n, h])?)
}

/// Spatial attention, temporal attention, hypergraph convolution and temporal
/// convolution, plus a linear residual from the block input.
pub fn st_block(model: &Model, g: &mut ExprGraph, x: Var, gop: Var, block: usize) -> Result<Var> {
    let spatial = attention(model, g, x, block, AttentionAxis::Spatial)?.output;
    let temporal = attention(model, g, spatial, block, AttentionAxis::Temporal)?.output;
    g.set_scope(format!("block{block}.convolution"));
    let theta = model.param(g, &format!("block{block}.theta"))?;
    let conv = hypergraph_conv(g, temporal, gop, theta)?;
    let phi = model.param(g, &format!("block{block}.phi"))?;
    let phi_bias = model.param(g, &format!("block{block}.phi_bias"))?;
    let conv = temporal_conv(g, conv, phi, phi_bias, model.config.kernel_width)?;
    g.set_scope(format!("block{block}.residual"));
    let (c, n, h) = dims3(g, x);
    let r = model.param(g, &format!("block{block}.residual"))?;
    let flat = g.reshape(x, &[c, n * h])?;
    let skip = g.matmul(r, flat)?;
    let skip = g.reshape(skip, &[c, n, h])?;
    Ok(g.add(conv, skip)?)
}

/// One direction of a gated recurrent unit; gate blocks are ordered
/// reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    /// `[1, 3d]`
    pub input: Var,
    /// `[d, 3d]`
    pub hidden: Var,
    /// `[1, 3d]`
    pub input_bias: Var,
    /// `[1, 3d]`
    pub hidden_bias: Var,
}

impl GruWeights {
    pub(crate) fn declare(model: &Model, g: &mut ExprGraph, direction: &str) -> Result<Self> {
        let p = |g: &mut ExprGraph, n: &str| model.param(g, &format!("rnn.{direction}.{n}"));
        Ok(Self {
            input: p(g, "input")?,
            hidden: p(g, "hidden")?,
            input_bias: p(g, "input_bias")?,
            hidden_bias: p(g, "hidden_bias")?,
        })
    }
}

/// Runs a GRU over the columns of `seq` (`[N, T]`, one scalar per step and
/// row) from a zero state; returns the final `[N, d]` state.
pub fn gru_pass(g: &mut ExprGraph, seq: Var, w: &GruWeights, reverse: bool) -> Result<Var> {
    let (n, steps) = (g.shape(seq)[0], g.shape(seq)[1]);
    let d = g.shape(w.hidden)[0];
    let bi = g.broadcast(w.input_bias, &[n, 3 * d])?;
    let bh = g.broadcast(w.hidden_bias, &[n, 3 * d])?;
    let mut h = g.constant(Tensor::zeros(&[n, d]));
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = g.slice(seq, 1, t, 1)?;
        let gi = g.matmul(xt, w.input)?;
        let gi = g.add(gi, bi)?;
        let gh = g.matmul(h, w.hidden)?;
        let gh = g.add(gh, bh)?;
        let part = |g: &mut ExprGraph, v: Var, k: usize| g.slice(v, 1, k * d, d);
        let (ir, iz, inn) = (part(g, gi, 0)?, part(g, gi, 1)?, part(g, gi, 2)?);
        let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let gated = g.mul(r, hn)?;
        let cand = g.add(inn, gated)?;
        let cand = g.tanh(cand);
        // (1 - z) * cand + z * h == cand + z * (h - cand)
        let gap = g.sub(h, cand)?;
        let keep = g.mul(z, gap)?;
        h = g.add(cand, keep)?;
    }
    Ok(h)
}

/// Final forward state concatenated with the final backward state, `[N, 2d]`.
pub fn bidirectional_gru(g: &mut ExprGraph, seq: Var, forward: &GruWeights, backward: &GruWeights) -> Result<Var> {
    let f = gru_pass(g, seq, forward, false)?;
    let b = gru_pass(g, seq, backward, true)?;
    Ok(g.concat(&[f, b], 1)?)
}

fn dims3(g: &ExprGraph, x: Var) -> (usize, usize, usize) {
    let s = g.shape(x);
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn temporal_conv_matches_direct_sum() {
        let (c, n, h, w) = (2, 2, 5, 3);
        let xs: Vec<f64> = (0..c * n * h).map(|i| (i as f64 * 0.37).sin()).collect();
        let phi: Vec<f64> = (0..c * w * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut g = ExprGraph::new();
        let x = g.constant(Tensor::new(&[c, n, h], xs.clone()).unwrap());
        let p = g.constant(Tensor::new(&[c, w * c], phi.clone()).unwrap());
        let b = g.constant(Tensor::zeros(&[c, 1]));
        let y = temporal_conv(&mut g, x, p, b, w).unwrap();
        g.evaluate(&BTreeMap::new()).unwrap();
        let y = g.value(y).unwrap();
        for o in 0..c {
            for i in 0..n {
                for t in 0..h {
                    let mut acc = 0.0;
                    for j in 0..w {
                        let src = t as isize + j as isize - 1;
                        if src < 0 || src >= h as isize {
                            continue;
                        }
                        for ci in 0..c {
                            acc += phi[o * w * c + j * c + ci] * xs[ci * n * h + i * h + src as usize];
                        }
                    }
                    assert!((y.at(&[o, i, t]) - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let d = 2;
        let seq = vec![0.3, -0.7, 1.1];
        let wi: Vec<f64> = (0..3 * d).map(|i| 0.1 * i as f64 - 0.2).collect();
        let wh: Vec<f64> = (0..d * 3 * d).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
        let bi: Vec<f64> = (0..3 * d).map(|i| 0.05 * i as f64).collect();
        let bh: Vec<f64> = (0..3 * d).map(|i| -0.03 * i as f64).collect();

        let mut g = ExprGraph::new();
        let s = g.constant(Tensor::new(&[1, 3], seq.clone()).unwrap());
        let w = GruWeights {
            input: g.constant(Tensor::new(&[1, 3 * d], wi.clone()).unwrap()),
            hidden: g.constant(Tensor::new(&[d, 3 * d], wh.clone()).unwrap()),
            input_bias: g.constant(Tensor::new(&[1, 3 * d], bi.clone()).unwrap()),
            hidden_bias: g.constant(Tensor::new(&[1, 3 * d], bh.clone()).unwrap()),
        };
        let out = gru_pass(&mut g, s, &w, false).unwrap();
        g.evaluate(&BTreeMap::new()).unwrap();
        let got = g.value(out).unwrap().to_vec();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![0.0; d];
        for &x in &seq {
            let gi: Vec<f64> = (0..3 * d).map(|k| x * wi[k] + bi[k]).collect();
            let gh: Vec<f64> = (0..3 * d)
                .map(|k| (0..d).map(|j| h[j] * wh[j * 3 * d + k]).sum::<f64>() + bh[k])
                .collect();
            h = (0..d)
                .map(|j| {
                    let r = sig(gi[j] + gh[j]);
                    let z = sig(gi[d + j] + gh[d + j]);
                    let nn = (gi[2 * d + j] + r * gh[2 * d + j]).tanh();
                    (1.0 - z) * nn + z * h[j]
                })
                .collect();
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
