//! Parameter-sharing protocols over the platoon communication graph.
//!
//! Every protocol runs in synchronous rounds: all agents read the same
//! pre-round snapshot, so the result does not depend on processing order.
//!
//! * **BDC** (binary differential consensus): each agent moves by `ε` times the
//!   summed differences of *ternary-quantized* weights, `q(w_j) − q(w_i)`.
//! * **WAC** (weight-averaging consensus): each agent takes the mean of its
//!   closed neighbourhood.
//! * **DCEA** (differential consensus-enhanced adjustment): `ε` times the raw
//!   weight differences; preserves the global mean.
//!
//! [`qsgd_step`] is the error-feedback ternary gradient optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    None,
    Bdc,
    Wac,
    Dcea,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::None, Protocol::Bdc, Protocol::Wac, Protocol::Dcea];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::None => "none",
            Protocol::Bdc => "bdc",
            Protocol::Wac => "wac",
            Protocol::Dcea => "dcea",
        }
    }

    /// Bits put on one directed edge per transmitted parameter.
    pub fn bits_per_param(self) -> u64 {
        match self {
            Protocol::None => 0,
            // Ternary symbol, byte-aligned 2-bit code.
            Protocol::Bdc => 2,
            Protocol::Wac | Protocol::Dcea => 32,
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config("protocol", format!("unknown protocol {s:?} (none|bdc|wac|dcea)")))
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub protocol: Protocol,
    pub epsilon: f64,
    /// Training episodes between consensus rounds.
    pub period: usize,
    pub quantizer_threshold: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Bdc,
            epsilon: 0.01,
            period: 1,
            quantizer_threshold: 0.0,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self, graph: &NeighborGraph) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("consensus.epsilon", "must be > 0"));
        }
        if self.period == 0 {
            return Err(Error::config("consensus.period", "must be >= 1"));
        }
        if !(self.quantizer_threshold >= 0.0) {
            return Err(Error::config("consensus.quantizer_threshold", "must be >= 0"));
        }
        if self.protocol == Protocol::Dcea {
            let bound = 0.5 / graph.max_degree().max(1) as f64;
            if self.epsilon > bound {
                return Err(Error::config(
                    "consensus.epsilon",
                    format!("{} exceeds the DCEA stability bound {bound}", self.epsilon),
                ));
            }
        }
        Ok(())
    }

    /// Runs one round of the configured protocol in place.
    pub fn apply(&self, weights: &mut [Vec<f64>], graph: &NeighborGraph) -> Result<()> {
        let updated = match self.protocol {
            Protocol::None => return check_shapes(weights, graph).map(|_| ()),
            Protocol::Bdc => bdc_update(weights, graph, self.epsilon, self.quantizer_threshold)?,
            Protocol::Wac => wac_update(weights, graph)?,
            Protocol::Dcea => dcea_update(weights, graph, self.epsilon)?,
        };
        for (w, u) in weights.iter_mut().zip(updated) {
            *w = u;
        }
        Ok(())
    }
}

/// Undirected communication graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Platoon topology: each agent talks to the agents directly ahead and behind.
    pub fn line(n: usize) -> Self {
        let adjacency = (0..n)
            .map(|i| {
                let mut adj = Vec::with_capacity(2);
                if i > 0 {
                    adj.push(i - 1);
                }
                if i + 1 < n {
                    adj.push(i + 1);
                }
                adj
            })
            .collect();
        Self { adjacency }
    }

    /// Builds a graph from an edge list, rejecting self-loops and
    /// out-of-range endpoints. Edges are symmetrized.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Usage(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            if a == b {
                return Err(Error::Usage(format!("self-loop at {a}")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        Ok(Self { adjacency })
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn directed_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }
}

/// Componentwise map to `{−1, 0, +1}` with a dead zone of half-width `tau`.
pub fn ternary_quantize(x: &[f64], tau: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v > tau {
                1.0
            } else if v < -tau {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn check_shapes(weights: &[Vec<f64>], graph: &NeighborGraph) -> Result<usize> {
    if weights.len() != graph.n() {
        return Err(Error::Usage(format!(
            "{} weight vectors for a {}-agent graph",
            weights.len(),
            graph.n()
        )));
    }
    let len = weights.first().map_or(0, Vec::len);
    if let Some(bad) = weights.iter().position(|w| w.len() != len) {
        return Err(Error::Usage(format!(
            "agent {bad} has {} parameters, agent 0 has {len}",
            weights[bad].len()
        )));
    }
    Ok(len)
}

/// `w_i' = w_i + ε Σ_{j∈N(i)} (q(w_j) − q(w_i))`.
pub fn bdc_update(weights: &[Vec<f64>], graph: &NeighborGraph, epsilon: f64, tau: f64) -> Result<Vec<Vec<f64>>> {
    check_shapes(weights, graph)?;
    let quantized: Vec<Vec<f64>> = weights.iter().map(|w| ternary_quantize(w, tau)).collect();
    Ok(differential_round(weights, &quantized, graph, epsilon))
}

/// `w_i' = w_i + ε Σ_{j∈N(i)} (w_j − w_i)`.
pub fn dcea_update(weights: &[Vec<f64>], graph: &NeighborGraph, epsilon: f64) -> Result<Vec<Vec<f64>>> {
    check_shapes(weights, graph)?;
    Ok(differential_round(weights, weights, graph, epsilon))
}

fn differential_round(
    weights: &[Vec<f64>],
    signal: &[Vec<f64>],
    graph: &NeighborGraph,
    epsilon: f64,
) -> Vec<Vec<f64>> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut out = w.clone();
            for &j in graph.neighbors(i) {
                for ((o, sj), si) in out.iter_mut().zip(&signal[j]).zip(&signal[i]) {
                    *o += epsilon * (sj - si);
                }
            }
            out
        })
        .collect()
}

/// Mean over each agent's closed neighbourhood.
pub fn wac_update(weights: &[Vec<f64>], graph: &NeighborGraph) -> Result<Vec<Vec<f64>>> {
    check_shapes(weights, graph)?;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            // Offsets from w_i keep equal neighbourhoods bit-exact.
            let mut offset = vec![0.0; w.len()];
            for &j in graph.neighbors(i) {
                offset.iter_mut().zip(w.iter().zip(&weights[j])).for_each(|(o, (a, b))| *o += b - a);
            }
            let count = (graph.degree(i) + 1) as f64;
            w.iter().zip(offset).map(|(a, o)| a + o / count).collect()
        })
        .collect())
}

/// Error-feedback residual carried between [`qsgd_step`] calls.
#[derive(Debug, Clone, PartialEq)]
pub struct EfState {
    pub residual: Vec<f64>,
}

impl EfState {
    pub fn zeros(len: usize) -> Self {
        Self {
            residual: vec![0.0; len],
        }
    }
}

/// One step of ternary-quantized gradient descent with error feedback:
/// `p = g + e`, `q = Q(p)`, `w ← w − lr·q`, `e ← p − q`.
pub fn qsgd_step(w: &mut [f64], grad: &[f64], ef: &mut EfState, lr: f64, tau: f64) -> Result<()> {
    if w.len() != grad.len() || w.len() != ef.residual.len() {
        return Err(Error::Usage(format!(
            "shape mismatch: w {}, grad {}, residual {}",
            w.len(),
            grad.len(),
            ef.residual.len()
        )));
    }
    for ((wk, gk), ek) in w.iter_mut().zip(grad).zip(ef.residual.iter_mut()) {
        let p = gk + *ek;
        let q = if p > tau {
            1.0
        } else if p < -tau {
            -1.0
        } else {
            0.0
        };
        *wk -= lr * q;
        *ek = p - q;
    }
    Ok(())
}

/// Bits exchanged in one consensus round: every agent sends its whole
/// parameter vector along each directed edge.
pub fn comm_bits(protocol: Protocol, n_params: usize, graph: &NeighborGraph) -> u64 {
    protocol.bits_per_param() * n_params as u64 * graph.directed_edges() as u64
}

/// Largest across-agent range over all components.
pub fn spread(weights: &[Vec<f64>]) -> f64 {
    let len = weights.first().map_or(0, Vec::len);
    (0..len)
        .map(|k| {
            let (lo, hi) = weights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| {
                (lo.min(w[k]), hi.max(w[k]))
            });
            hi - lo
        })
        .fold(0.0, f64::max)
}
