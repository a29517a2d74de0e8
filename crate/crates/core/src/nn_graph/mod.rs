//! Directed 1-nearest-neighbor graphs and their counting statistics.
//!
//! Vertex `i` has exactly one out-edge `i -> nn_index[i]`, pointing at a point
//! of minimal Euclidean distance. Distances are compared as exact squared
//! distances; equal values form a tie set that the [`TieBreakPolicy`] resolves.

mod kdtree;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Matrix, TieBreak, TieBreakPolicy};

pub use kdtree::{sq_dist, KdTree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("points must have at least one coordinate")]
    ZeroDimension,
    #[error("graphs have different vertex counts ({0} vs {1})")]
    SizeMismatch(usize, usize),
}

/// Search strategy for [`build_nn_graph_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NnSearch {
    #[default]
    KdTree,
    /// O(n²) scan, kept as a reference implementation.
    Naive,
}

/// Directed 1-NN graph. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnGraph {
    nn_index: Vec<usize>,
    in_degree: Vec<usize>,
    tie_events: usize,
}

impl NnGraph {
    /// Graph from an explicit out-neighbor list.
    ///
    /// Panics if some `nn_index[i]` is `i` or out of range.
    pub fn from_nn_index(nn_index: Vec<usize>) -> Self {
        let n = nn_index.len();
        let mut in_degree = vec![0; n];
        for (i, &j) in nn_index.iter().enumerate() {
            assert!(j < n && j != i, "invalid out-neighbor {j} for vertex {i}");
            in_degree[j] += 1;
        }
        Self {
            nn_index,
            in_degree,
            tie_events: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.nn_index.len()
    }

    pub fn nn_index(&self) -> &[usize] {
        &self.nn_index
    }

    pub fn in_degree(&self) -> &[usize] {
        &self.in_degree
    }

    /// Number of vertices whose nearest neighbor was chosen from a tie set.
    pub fn tie_events(&self) -> usize {
        self.tie_events
    }

    /// Edge list as CSV lines `i,j` (0-based).
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j")?;
        for (i, j) in self.nn_index.iter().enumerate() {
            writeln!(w, "{i},{j}")?;
        }
        Ok(())
    }
}

/// Build the 1-NN graph of the rows of `points` using the k-d tree.
pub fn build_nn_graph(points: &Matrix, tie: TieBreak) -> Result<NnGraph, GraphError> {
    build_nn_graph_with(points, tie, NnSearch::KdTree)
}

pub fn build_nn_graph_with(points: &Matrix, tie: TieBreak, search: NnSearch) -> Result<NnGraph, GraphError> {
    let n = points.rows();
    if n < 2 {
        return Err(GraphError::TooFewPoints(n));
    }
    if points.cols() == 0 {
        return Err(GraphError::ZeroDimension);
    }

    let mut nn_index = Vec::with_capacity(n);
    let mut tie_events = 0;
    let mut cands = Vec::new();
    let tree = match search {
        NnSearch::KdTree => Some(KdTree::build(points)),
        NnSearch::Naive => None,
    };
    for i in 0..n {
        let q = points.row(i);
        match &tree {
            Some(t) => {
                t.nearest_excluding(q, i, &mut cands);
            }
            None => naive_nearest(points, i, &mut cands),
        }
        let chosen = if cands.len() == 1 {
            cands[0]
        } else {
            tie_events += 1;
            resolve_tie(&cands, i, tie)
        };
        nn_index.push(chosen);
    }
    let mut g = NnGraph::from_nn_index(nn_index);
    g.tie_events = tie_events;
    Ok(g)
}

fn naive_nearest(points: &Matrix, i: usize, cands: &mut Vec<usize>) {
    cands.clear();
    let q = points.row(i);
    let mut best = f64::INFINITY;
    for j in 0..points.rows() {
        if j == i {
            continue;
        }
        let d2 = sq_dist(q, points.row(j));
        if d2 < best {
            best = d2;
            cands.clear();
            cands.push(j);
        } else if d2 == best {
            cands.push(j);
        }
    }
}

/// `cands` is sorted. The random choice depends only on the stream, the
/// vertex and the candidate set, never on traversal order.
fn resolve_tie(cands: &[usize], vertex: usize, tie: TieBreak) -> usize {
    match tie.policy {
        TieBreakPolicy::LowestIndex => cands[0],
        TieBreakPolicy::RandomUniform => {
            let mut rng = tie.stream.derive(vertex as u64).rng();
            cands[rng.random_range(0..cands.len())]
        }
    }
}

/// Counting statistics of a single graph; fractions are per vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    /// `n⁻¹ #{(i, j) distinct: i→j, j→i}` (ordered pairs).
    pub mutual_pair_fraction: f64,
    /// `n⁻¹ #{(i, j, k) distinct: i→k, j→k}`.
    pub shared_target_fraction: f64,
    /// `degree_histogram[k]` = number of vertices with in-degree `k`.
    pub degree_histogram: Vec<usize>,
    pub max_in_degree: usize,
}

pub fn graph_stats(g: &NnGraph) -> GraphStats {
    let n = g.n();
    let nn = g.nn_index();
    let mutual = (0..n).filter(|&i| nn[nn[i]] == i).count();
    let shared: usize = g.in_degree().iter().map(|&d| d * d.saturating_sub(1)).sum();
    let max_in_degree = g.in_degree().iter().copied().max().unwrap_or(0);
    let mut degree_histogram = vec![0; max_in_degree + 1];
    for &d in g.in_degree() {
        degree_histogram[d] += 1;
    }
    GraphStats {
        mutual_pair_fraction: mutual as f64 / n as f64,
        shared_target_fraction: shared as f64 / n as f64,
        degree_histogram,
        max_in_degree,
    }
}

/// Joint patterns of two graphs on the same vertex set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossGraphStats {
    /// `n⁻¹ #{(i, j): i→j in both graphs}`.
    pub shared_edge_fraction: f64,
    /// `n⁻¹ #{(i, j): i→j in g, j→i in g_x}`.
    pub reversed_edge_fraction: f64,
    /// `n⁻¹ #{(i, j, k) distinct: i→k in g, j→k in g_x}`.
    pub shared_target_cross_fraction: f64,
}

pub fn cross_graph_stats(g: &NnGraph, g_x: &NnGraph) -> Result<CrossGraphStats, GraphError> {
    if g.n() != g_x.n() {
        return Err(GraphError::SizeMismatch(g.n(), g_x.n()));
    }
    let n = g.n();
    let (a, b) = (g.nn_index(), g_x.nn_index());
    let shared = (0..n).filter(|&i| a[i] == b[i]).count();
    let reversed = (0..n).filter(|&i| b[a[i]] == i).count();
    // Triples with i = j are exactly the shared edges; i = k or j = k cannot
    // occur without self-loops.
    let pairs: usize = g
        .in_degree()
        .iter()
        .zip(g_x.in_degree())
        .map(|(da, db)| da * db)
        .sum();
    let nf = n as f64;
    Ok(CrossGraphStats {
        shared_edge_fraction: shared as f64 / nf,
        reversed_edge_fraction: reversed as f64 / nf,
        shared_target_cross_fraction: (pairs - shared) as f64 / nf,
    })
}
