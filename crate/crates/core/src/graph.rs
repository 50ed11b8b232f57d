//! Road-graph representation, random-walk transition matrices and the two
//! graph convolutions the model is assembled from.
//!
//! The adjacency is built from directed road distances with a thresholded
//! Gaussian kernel. Transition matrices are row-normalised copies of the
//! adjacency (`m_forward`) and of its transpose (`m_backward`); a row whose
//! weights sum to zero stays zero.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default kernel threshold below which a weight is dropped.
pub const DEFAULT_KAPPA: f64 = 0.1;

/// Directed road segment between two sensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    n_nodes: usize,
    adjacency: Tensor,
    m_forward: Tensor,
    m_backward: Tensor,
}

impl TrafficGraph {
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let n = match adjacency.shape() {
            [a, b] if a == b => *a,
            s => return Err(Error::dim("graph", format!("adjacency must be square, got {s:?}"))),
        };
        let (m_forward, m_backward) = transition_matrices(&adjacency)?;
        Ok(TrafficGraph { n_nodes: n, adjacency, m_forward, m_backward })
    }

    /// Graph whose transition matrices are both the identity; used by the
    /// ablation that removes all spatial mixing.
    pub fn isolated(n_nodes: usize) -> Self {
        let eye = Tensor::identity(n_nodes);
        TrafficGraph { n_nodes, adjacency: eye.clone(), m_forward: eye.clone(), m_backward: eye }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn m_forward(&self) -> &Tensor {
        &self.m_forward
    }

    pub fn m_backward(&self) -> &Tensor {
        &self.m_backward
    }

    /// Same adjacency with both transition matrices replaced by `I`.
    pub fn with_identity_transitions(&self) -> Self {
        let eye = Tensor::identity(self.n_nodes);
        TrafficGraph {
            n_nodes: self.n_nodes,
            adjacency: self.adjacency.clone(),
            m_forward: eye.clone(),
            m_backward: eye,
        }
    }

    /// Places the transition matrices on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            m_forward: tape.constant(self.m_forward.clone()),
            m_backward: tape.constant(self.m_backward.clone()),
        }
    }
}

/// Transition matrices of a [`TrafficGraph`] as tape constants.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub m_forward: Var,
    pub m_backward: Var,
}

/// `A_ij = exp(-d^2 / sigma^2)` when that is at least `kappa`, with unit
/// self-loops. `sigma = None` uses the standard deviation of the distances.
pub fn build_graph_from_distances(
    edges: &[Edge],
    n_nodes: usize,
    sigma: Option<f64>,
    kappa: f64,
) -> Result<TrafficGraph> {
    if n_nodes == 0 {
        return Err(Error::Input("graph needs at least one node".into()));
    }
    for e in edges {
        if e.from >= n_nodes || e.to >= n_nodes {
            return Err(Error::Input(format!(
                "edge {}->{} references a node outside [0, {n_nodes})",
                e.from, e.to
            )));
        }
        if !(e.distance >= 0.0) || !e.distance.is_finite() {
            return Err(Error::Input(format!("edge {}->{} has distance {}", e.from, e.to, e.distance)));
        }
    }
    let sigma = sigma.unwrap_or_else(|| default_sigma(edges));
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel width sigma must be positive, got {sigma}")));
    }
    let mut a = Tensor::identity(n_nodes);
    let data = a.data_mut();
    for e in edges {
        if e.from == e.to {
            continue;
        }
        let w = (-(e.distance * e.distance) / (sigma * sigma)).exp();
        data[e.from * n_nodes + e.to] = if w >= kappa { w } else { 0.0 };
    }
    TrafficGraph::from_adjacency(a)
}

/// Population standard deviation of edge distances; falls back to the mean
/// distance when all distances coincide, and to 1 without edges.
pub fn default_sigma(edges: &[Edge]) -> f64 {
    if edges.is_empty() {
        return 1.0;
    }
    let n = edges.len() as f64;
    let mean = edges.iter().map(|e| e.distance).sum::<f64>() / n;
    let var = edges.iter().map(|e| (e.distance - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        std
    } else if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// Row-normalised `A` and `A^T`; zero rows stay zero.
pub fn transition_matrices(adjacency: &Tensor) -> Result<(Tensor, Tensor)> {
    if adjacency.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Input("adjacency has negative or non-finite entries".into()));
    }
    let forward = row_normalize(adjacency);
    let backward = row_normalize(&adjacency.transpose()?);
    Ok((forward, backward))
}

fn row_normalize(a: &Tensor) -> Tensor {
    let n = a.shape()[1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

/// First-order graph convolution `A_norm · X · W`.
pub fn graph_conv(tape: &mut Tape, a_norm: Var, x: Var, w: Var) -> Result<Var> {
    let mixed = tape.slot_matmul(a_norm, x)?;
    tape.matmul(mixed, w)
}

/// Bidirectional K-step diffusion convolution
/// `sum_k M_f^k X W_f[k] + sum_k M_b^k X W_b[k]`.
///
/// `x` is `[N, D_in]` or `[P, N, D_in]` (applied per time slot).
pub fn diffusion_conv(
    tape: &mut Tape,
    graph: GraphVars,
    x: Var,
    max_step: usize,
    w_forward: &[Var],
    w_backward: &[Var],
) -> Result<Var> {
    if w_forward.len() != max_step + 1 || w_backward.len() != max_step + 1 {
        return Err(Error::Config(format!(
            "diffusion step K={max_step} needs {} weights per direction, got {} forward and {} backward",
            max_step + 1,
            w_forward.len(),
            w_backward.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * (max_step + 1));
    for (transition, weights) in [(graph.m_forward, w_forward), (graph.m_backward, w_backward)] {
        let mut power_x = x;
        for (k, &w) in weights.iter().enumerate() {
            if k > 0 {
                power_x = tape.slot_matmul(transition, power_x)?;
            }
            terms.push(tape.matmul(power_x, w)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Untracked evaluation of [`diffusion_conv`] on plain tensors.
pub fn diffusion_conv_values(
    graph: &TrafficGraph,
    x: &Tensor,
    max_step: usize,
    w_forward: &[Tensor],
    w_backward: &[Tensor],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = graph.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let wf: Vec<Var> = w_forward.iter().map(|w| tape.constant(w.clone())).collect();
    let wb: Vec<Var> = w_backward.iter().map(|w| tape.constant(w.clone())).collect();
    let out = diffusion_conv(&mut tape, g, xv, max_step, &wf, &wb)?;
    Ok(tape.value(out).clone())
}

/// Reads `from,to,distance` rows.
pub fn read_edges_csv(path: &Path) -> Result<Vec<Edge>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let shown = path.display().to_string();
    if headers.len() != 3 || &headers[0] != "from" || &headers[1] != "to" || &headers[2] != "distance" {
        return Err(Error::Parse { path: shown, line: 1, msg: "expected header from,to,distance".into() });
    }
    let mut edges = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let bad = |msg: String| Error::Parse { path: shown.clone(), line, msg };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", record.len())));
        }
        let from = record[0].parse().map_err(|_| bad(format!("bad node id {:?}", &record[0])))?;
        let to = record[1].parse().map_err(|_| bad(format!("bad node id {:?}", &record[1])))?;
        let distance = record[2].parse().map_err(|_| bad(format!("bad distance {:?}", &record[2])))?;
        edges.push(Edge { from, to, distance });
    }
    Ok(edges)
}

pub fn write_edges_csv(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "from,to,distance")?;
    for e in edges {
        writeln!(f, "{},{},{}", e.from, e.to, e.distance)?;
    }
    Ok(())
}

/// Writes a matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let cols = *m.shape().last().unwrap();
    let mut f = File::create(path)?;
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}
