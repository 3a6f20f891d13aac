//! KNN graph construction over cells and genes, and the symmetric
//! GCN-normalized adjacency consumed by the graph encoders.
//!
//! All builders union-symmetrize: an edge is kept when either endpoint selects
//! the other, which preserves connectivity for neighborhood-based losses.
//! Rank ties are broken by lower index so construction is deterministic.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Undirected graph with no stored self-loops; isolated nodes are materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

/// Graph over cells (nodes index rows of the expression matrix).
pub type CellGraph = Graph;
/// Graph over genes (nodes index columns of the expression matrix).
pub type GeneGraph = Graph;

impl Graph {
    /// Build directly from an undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        for &(i, j) in edges {
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) outside 0..{n}"
                )));
            }
        }
        let mut selections = vec![Vec::new(); n];
        for &(i, j) in edges {
            selections[i].push(j);
        }
        Ok(Graph::from_selections(n, selections))
    }

    /// Build from per-node directed selections, symmetrizing by union.
    fn from_selections(n: usize, selections: Vec<Vec<usize>>) -> Graph {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, sel) in selections.iter().enumerate() {
            for &j in sel {
                debug_assert_ne!(i, j);
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Graph { n, neighbors }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted neighbor list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edge list as TSV (`i<TAB>j`, 0-based, i < j).
    pub fn write_edge_list(&self, w: &mut dyn Write) -> io::Result<()> {
        for (i, j) in self.edges() {
            writeln!(w, "{i}\t{j}")?;
        }
        Ok(())
    }

    /// Dense 0/1 adjacency (no self-loops).
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                a.set(i, j, 1.0);
            }
        }
        a
    }
}

fn check_k(k: usize, n: usize, what: &str) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter(format!("{what}: k must be >= 1")));
    }
    if k >= n {
        return Err(Error::InvalidParameter(format!(
            "{what}: k = {k} must be < number of nodes ({n})"
        )));
    }
    Ok(())
}

/// Per-node top-k selection. `score(i, j)` is compared with `descending`
/// ordering; ties resolved toward the lower index `j`.
fn select_top_k(
    n: usize,
    k: usize,
    descending: bool,
    score: impl Fn(usize, usize) -> f64,
) -> Vec<Vec<usize>> {
    let mut selections = Vec::with_capacity(n);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        ranked.clear();
        ranked.extend((0..n).filter(|&j| j != i).map(|j| (score(i, j), j)));
        ranked.sort_unstable_by(|a, b| {
            let ord = a.0.total_cmp(&b.0);
            let ord = if descending { ord.reverse() } else { ord };
            ord.then(a.1.cmp(&b.1))
        });
        selections.push(ranked[..k].iter().map(|&(_, j)| j).collect());
    }
    selections
}

/// KNN cell graph from spatial coordinates (Euclidean, ascending).
pub fn build_cell_graph_spatial(coords: &Matrix, k: usize) -> Result<CellGraph> {
    let n = coords.rows();
    check_k(k, n, "build_cell_graph_spatial")?;
    let score = |i: usize, j: usize| -> f64 {
        coords
            .row(i)
            .iter()
            .zip(coords.row(j).iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    };
    Ok(Graph::from_selections(n, select_top_k(n, k, false, score)))
}

/// Similarity metric for expression-based cell graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric {other:?} (expected cosine or euclidean)"
            ))),
        }
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    // zero vectors have no direction: similarity 0 to everything
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

fn euclidean_sq(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// KNN cell graph from the expression matrix itself.
pub fn build_cell_graph_expression(x: &Matrix, k: usize, metric: Metric) -> Result<CellGraph> {
    let n = x.rows();
    check_k(k, n, "build_cell_graph_expression")?;
    let selections = match metric {
        Metric::Cosine => select_top_k(n, k, true, |i, j| cosine(x.row(i), x.row(j))),
        Metric::Euclidean => select_top_k(n, k, false, |i, j| euclidean_sq(x.row(i), x.row(j))),
    };
    Ok(Graph::from_selections(n, selections))
}

fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu: f64 = u.iter().sum::<f64>() / n;
    let mv: f64 = v.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    for (&a, &b) in u.iter().zip(v.iter()) {
        cov += (a - mu) * (b - mv);
        su += (a - mu) * (a - mu);
        sv += (b - mv) * (b - mv);
    }
    // constant profiles carry no co-expression signal
    if su == 0.0 || sv == 0.0 {
        return 0.0;
    }
    cov / (su.sqrt() * sv.sqrt())
}

/// KNN gene graph over columns of `x` using Pearson correlation (descending).
pub fn build_gene_graph(x: &Matrix, k: usize) -> Result<GeneGraph> {
    let m = x.cols();
    check_k(k, m, "build_gene_graph")?;
    // gene profiles = rows of X^T, materialized once
    let xt = x.transpose();
    let score = |i: usize, j: usize| pearson(xt.row(i), xt.row(j));
    Ok(Graph::from_selections(m, select_top_k(m, k, true, score)))
}

/// Symmetric GCN propagation matrix `D^{-1/2} (A + I) D^{-1/2}`
/// where `D` is the degree of `A + I`.
pub fn normalize_adjacency(g: &Graph) -> Matrix {
    let n = g.node_count();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt())
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, inv_sqrt_deg[i] * inv_sqrt_deg[i]);
        for &j in g.neighbors(i) {
            out.set(i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        }
    }
    out
}
