//! Sensing-user graph construction and combination weights.
//!
//! The diffusion estimator fuses neighbor estimates through a
//! column-stochastic combination matrix built from the node degrees by the
//! Metropolis rule.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Undirected sensing-user network. Every user is its own neighbor, so the
/// adjacency diagonal is always true.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    n_users: usize,
    adjacency: Vec<bool>,
}

impl NetworkGraph {
    /// Builds a graph from undirected edge pairs (self loops implied).
    pub fn from_edges(n_users: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_users == 0 {
            return Err(Error::Parameter("graph needs at least one user".into()));
        }
        let mut adjacency = vec![false; n_users * n_users];
        for k in 0..n_users {
            adjacency[k * n_users + k] = true;
        }
        for &(l, k) in edges {
            if l >= n_users || k >= n_users {
                return Err(Error::Parameter(format!(
                    "edge ({l},{k}) out of range for {n_users} users"
                )));
            }
            adjacency[l * n_users + k] = true;
            adjacency[k * n_users + l] = true;
        }
        Ok(Self { n_users, adjacency })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn connected(&self, l: usize, k: usize) -> bool {
        self.adjacency[l * self.n_users + k]
    }

    /// Link count of user `k`, excluding the self loop.
    pub fn degree(&self, k: usize) -> usize {
        (0..self.n_users)
            .filter(|&l| l != k && self.connected(l, k))
            .count()
    }

    pub fn mean_degree(&self) -> f64 {
        (0..self.n_users).map(|k| self.degree(k)).sum::<usize>() as f64 / self.n_users as f64
    }

    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users).filter(move |&l| self.connected(l, k))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_users];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(k) = stack.pop() {
            for l in 0..self.n_users {
                if l != k && self.connected(l, k) && !seen[l] {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn to_json(&self) -> GraphJson {
        let mut edges = Vec::new();
        for l in 0..self.n_users {
            for k in (l + 1)..self.n_users {
                if self.connected(l, k) {
                    edges.push([l, k]);
                }
            }
        }
        GraphJson {
            n_users: self.n_users,
            edges,
        }
    }

    pub fn from_json(json: &GraphJson) -> Result<Self> {
        let edges: Vec<(usize, usize)> = json.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::from_edges(json.n_users, &edges)
    }
}

/// JSON adjacency-list form: `{"n_users": N, "edges": [[l,k],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphJson {
    pub n_users: usize,
    pub edges: Vec<[usize; 2]>,
}

/// Column-stochastic cooperation weights over the user graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    c: DMatrix<f64>,
}

impl CombinationMatrix {
    pub fn from_matrix(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::Dimension("combination matrix must be square".into()));
        }
        Ok(Self { c })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            c: DMatrix::identity(n, n),
        }
    }

    pub fn n_users(&self) -> usize {
        self.c.nrows()
    }

    /// Weight `c_{lk}` applied by user `k` to user `l`'s intermediate estimate.
    pub fn weight(&self, l: usize, k: usize) -> f64 {
        self.c[(l, k)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }
}

/// Connected Erdős–Rényi graph with edge probability `avg_degree/(N-1)`,
/// resampled until connected and the mean degree is within one link of the
/// request. Deterministic in `(n_users, avg_degree, seed)`.
pub fn build_random_network(n_users: usize, avg_degree: f64, seed: u64) -> Result<NetworkGraph> {
    if n_users < 2 {
        return Err(Error::Parameter("need at least two users".into()));
    }
    if avg_degree < 1.0 || avg_degree >= n_users as f64 {
        return Err(Error::Parameter(format!(
            "average degree {avg_degree} infeasible for {n_users} users"
        )));
    }
    let p = avg_degree / (n_users as f64 - 1.0);
    let mut rng = substream(seed, "topology/er-graph", &[n_users as u64]);
    for _attempt in 0..10_000 {
        let mut edges = Vec::new();
        for l in 0..n_users {
            for k in (l + 1)..n_users {
                if rng.random::<f64>() < p {
                    edges.push((l, k));
                }
            }
        }
        let graph = NetworkGraph::from_edges(n_users, &edges)?;
        if graph.is_connected() && (graph.mean_degree() - avg_degree).abs() <= 1.0 {
            return Ok(graph);
        }
    }
    Err(Error::Parameter(format!(
        "could not draw a connected graph with mean degree {avg_degree} on {n_users} users"
    )))
}

/// Metropolis combination weights: `c_{lk} = 1/max(n_k, n_l)` for neighbors,
/// with the diagonal absorbing the column remainder.
pub fn metropolis_weights(graph: &NetworkGraph) -> CombinationMatrix {
    let n = graph.n_users();
    let mut c = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut offdiag = 0.0;
        for l in 0..n {
            if l != k && graph.connected(l, k) {
                let w = 1.0 / graph.degree(k).max(graph.degree(l)) as f64;
                c[(l, k)] = w;
                offdiag += w;
            }
        }
        c[(k, k)] = 1.0 - offdiag;
    }
    CombinationMatrix { c }
}

/// Per-check outcome of [`validate_combination`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// Largest |column sum − 1| over all columns.
    pub max_column_sum_deviation: f64,
    /// Entries below zero, as `(l, k, value)`.
    pub negative_entries: Vec<(usize, usize, f64)>,
    /// Nonzero weights outside the adjacency support, as `(l, k, value)`.
    pub support_violations: Vec<(usize, usize, f64)>,
    /// Row-sum deviation, reported informationally (Metropolis weights are
    /// doubly stochastic; only column stochasticity is the hard contract).
    pub max_row_sum_deviation: f64,
    pub tolerance: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.max_column_sum_deviation <= self.tolerance
            && self.negative_entries.is_empty()
            && self.support_violations.is_empty()
    }
}

pub fn validate_combination(c: &CombinationMatrix, graph: &NetworkGraph) -> Result<ValidationReport> {
    let n = graph.n_users();
    if c.n_users() != n {
        return Err(Error::Dimension(format!(
            "combination matrix is {}x{} but graph has {} users",
            c.n_users(),
            c.n_users(),
            n
        )));
    }
    let tol = 1e-12;
    let mut max_col = 0.0f64;
    let mut max_row = 0.0f64;
    let mut negative = Vec::new();
    let mut support = Vec::new();
    for k in 0..n {
        let col_sum: f64 = (0..n).map(|l| c.weight(l, k)).sum();
        max_col = max_col.max((col_sum - 1.0).abs());
        let row_sum: f64 = (0..n).map(|l| c.weight(k, l)).sum();
        max_row = max_row.max((row_sum - 1.0).abs());
        for l in 0..n {
            let w = c.weight(l, k);
            if w < -tol {
                negative.push((l, k, w));
            }
            if w.abs() > tol && !graph.connected(l, k) {
                support.push((l, k, w));
            }
        }
    }
    Ok(ValidationReport {
        max_column_sum_deviation: max_col,
        negative_entries: negative,
        support_violations: support,
        max_row_sum_deviation: max_row,
        tolerance: tol,
    })
}
