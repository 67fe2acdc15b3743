//! Road network, k-nearest-neighbour hypergraph and the normalized
//! hypergraph convolution operator `Dv^-1/2 H W De^-1 H^T Dv^-1/2`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const EARTH_RADIUS_MILES: f64 = 3958.8;

/// Segments of a corridor with pairwise distances (miles) and a binary
/// adjacency matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    segment_ids: Vec<String>,
    distance: Vec<f64>,
    adjacency: Vec<u8>,
}

impl RoadNetwork {
    /// Adjacency is derived from distance: `i != j` and within `adjacency_radius` miles.
    pub fn new(segment_ids: Vec<String>, distance: Vec<Vec<f64>>, adjacency_radius: f64) -> Result<Self> {
        let n = segment_ids.len();
        if n == 0 {
            return Err(Error::Structural("road network has no segments".into()));
        }
        if distance.len() != n || distance.iter().any(|r| r.len() != n) {
            return Err(Error::Structural(format!("distance matrix must be {n}x{n}")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = segment_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Schema(format!("duplicate segment id `{dup}`")));
        }
        let flat: Vec<f64> = distance.into_iter().flatten().collect();
        for i in 0..n {
            if flat[i * n + i] != 0.0 {
                return Err(Error::Structural(format!(
                    "distance diagonal must be 0 (segment {})",
                    segment_ids[i]
                )));
            }
        }
        if let Some(bad) = flat.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::Structural(format!("invalid distance {bad}")));
        }
        let adjacency = (0..n * n)
            .map(|ix| u8::from(ix / n != ix % n && flat[ix] <= adjacency_radius))
            .collect();
        Ok(Self {
            segment_ids,
            distance: flat,
            adjacency,
        })
    }

    /// Great-circle distances from `(id, lat, lon)` triples.
    pub fn from_coordinates(coords: &[(String, f64, f64)], adjacency_radius: f64) -> Result<Self> {
        let ids = coords.iter().map(|c| c.0.clone()).collect();
        let distance = coords
            .iter()
            .map(|a| coords.iter().map(|b| haversine_miles(a.1, a.2, b.1, b.2)).collect())
            .collect();
        Self::new(ids, distance, adjacency_radius)
    }

    /// Reads a square distance matrix whose header row lists segment ids. Rows
    /// may carry a leading id column, in which case it must repeat the header
    /// order.
    pub fn from_distance_csv(path: &Path, adjacency_radius: f64) -> Result<Self> {
        let display = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut rows: Vec<Vec<String>> = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(|s| s.trim().to_string()).collect());
        }
        let n = rows.len();
        let (ids, labelled) = if header.len() == n + 1 {
            (header[1..].to_vec(), true)
        } else if header.len() == n {
            (header, false)
        } else {
            return Err(Error::Format {
                path: display,
                line: 1,
                message: format!("header has {} columns for {} rows", header.len(), n),
            });
        };
        let mut matrix = Vec::with_capacity(n);
        for (r, row) in rows.iter().enumerate() {
            let cells = if labelled {
                if row.first().map(String::as_str) != Some(ids[r].as_str()) {
                    return Err(Error::Format {
                        path: display,
                        line: r + 2,
                        message: format!("row label must be `{}`", ids[r]),
                    });
                }
                &row[1..]
            } else {
                &row[..]
            };
            let parsed = cells
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format {
                    path: display.clone(),
                    line: r + 2,
                    message: e.to_string(),
                })?;
            matrix.push(parsed);
        }
        Self::new(ids, matrix, adjacency_radius)
    }

    /// Reads `segment_id,lat,lon` rows.
    pub fn from_coordinates_csv(path: &Path, adjacency_radius: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            segment_id: String,
            lat: f64,
            lon: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut coords = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            coords.push((row.segment_id, row.lat, row.lon));
        }
        Self::from_coordinates(&coords, adjacency_radius)
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn segment_ids(&self) -> &[String] {
        &self.segment_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.segment_ids.iter().position(|s| s == id)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distance[i * self.len() + j]
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len() + j] == 1
    }

    pub fn distance_rows(&self) -> Vec<Vec<f64>> {
        self.distance.chunks(self.len()).map(<[f64]>::to_vec).collect()
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        self.adjacency.chunks(self.len()).map(<[u8]>::to_vec).collect()
    }

    /// Relabels segments: new segment `p` is old segment `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n {
            return Err(Error::Parameter("permutation length mismatch".into()));
        }
        let ids = perm.iter().map(|&p| self.segment_ids[p].clone()).collect();
        let mut out = self.clone();
        out.segment_ids = ids;
        for a in 0..n {
            for b in 0..n {
                out.distance[a * n + b] = self.distance[perm[a] * n + perm[b]];
                out.adjacency[a * n + b] = self.adjacency[perm[a] * n + perm[b]];
            }
        }
        Ok(out)
    }
}

pub fn haversine_miles(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * a.sqrt().asin()
}

/// Neighbour count per hyperedge: a fixed `k` or every other vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbors {
    Count(usize),
    All,
}

impl fmt::Display for Neighbors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Neighbors::Count(k) => write!(f, "{k}"),
            Neighbors::All => f.write_str("all"),
        }
    }
}

impl Serialize for Neighbors {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Neighbors::Count(k) => s.serialize_u64(*k as u64),
            Neighbors::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Neighbors {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(Neighbors::Count(k as usize)),
            Raw::Text(t) if t.eq_ignore_ascii_case("all") => Ok(Neighbors::All),
            Raw::Text(t) => t
                .parse()
                .map(Neighbors::Count)
                .map_err(|_| serde::de::Error::custom(format!("expected a count or \"all\", got `{t}`"))),
        }
    }
}

/// Hypergraph given by hyperedge membership lists and positive edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n: usize,
    edges: Vec<Vec<usize>>,
    edge_weights: Vec<f64>,
    vertex_degrees: Vec<f64>,
    edge_degrees: Vec<f64>,
}

impl Hypergraph {
    /// Member lists must be non-empty, in range and free of repeats.
    pub fn from_edges(n: usize, edges: Vec<Vec<usize>>, edge_weights: Vec<f64>) -> Result<Self> {
        if edges.len() != edge_weights.len() {
            return Err(Error::Structural("one weight per hyperedge required".into()));
        }
        for (e, members) in edges.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Structural(format!("hyperedge {e} is empty")));
            }
            let mut sorted = members.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != members.len() || sorted.last().is_some_and(|&v| v >= n) {
                return Err(Error::Structural(format!("hyperedge {e} has invalid members")));
            }
        }
        if let Some(w) = edge_weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Structural(format!("edge weight {w} is not positive")));
        }
        let mut vertex_degrees = vec![0.0; n];
        for (members, w) in edges.iter().zip(&edge_weights) {
            for &v in members {
                vertex_degrees[v] += w;
            }
        }
        let edge_degrees = edges.iter().map(|m| m.len() as f64).collect();
        Ok(Self {
            n,
            edges,
            edge_weights,
            vertex_degrees,
            edge_degrees,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    pub fn vertex_degrees(&self) -> &[f64] {
        &self.vertex_degrees
    }

    pub fn edge_degrees(&self) -> &[f64] {
        &self.edge_degrees
    }

    /// Dense `N x E` 0/1 incidence matrix.
    pub fn incidence(&self) -> Tensor {
        let e = self.edges.len();
        let mut h = vec![0.0; self.n * e];
        for (j, members) in self.edges.iter().enumerate() {
            for &v in members {
                h[v * e + j] = 1.0;
            }
        }
        Tensor::from_parts(vec![self.n, e], h)
    }
}

/// One hyperedge per vertex: the vertex itself plus its `k` nearest vertices
/// by distance, ties broken by ascending segment index. All weights are 1.
pub fn build_hypergraph(network: &RoadNetwork, k: Neighbors) -> Result<Hypergraph> {
    let n = network.len();
    let k = match k {
        Neighbors::All => n - 1,
        Neighbors::Count(k) if k >= 1 && k < n => k,
        Neighbors::Count(k) => {
            return Err(Error::Parameter(format!(
                "neighbor count {k} outside [1, {}] for {n} segments",
                n.saturating_sub(1)
            )))
        }
    };
    let edges = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                network
                    .distance(i, a)
                    .total_cmp(&network.distance(i, b))
                    .then(a.cmp(&b))
            });
            std::iter::once(i).chain(others.into_iter().take(k)).collect()
        })
        .collect();
    Hypergraph::from_edges(n, edges, vec![1.0; n])
}

/// `Dv^-1/2 H W De^-1 H^T Dv^-1/2` as a dense `N x N` matrix, accumulated
/// hyperedge by hyperedge.
pub fn hypergraph_operator(hg: &Hypergraph) -> Result<Tensor> {
    let n = hg.n;
    if let Some(v) = hg.vertex_degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::Structural(format!("vertex {v} belongs to no hyperedge (isolated segment)")));
    }
    let inv_sqrt: Vec<f64> = hg.vertex_degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut g = vec![0.0; n * n];
    for ((members, w), delta) in hg.edges.iter().zip(&hg.edge_weights).zip(&hg.edge_degrees) {
        let c = w / delta;
        for &a in members {
            for &b in members {
                g[a * n + b] += c * inv_sqrt[a] * inv_sqrt[b];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], g))
}

/// Chebyshev polynomial of the first kind, by the three-term recurrence.
pub fn chebyshev_term(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match k {
        0 => prev,
        _ => {
            for _ in 1..k {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}
