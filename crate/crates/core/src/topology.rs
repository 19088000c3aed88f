//! Communication topology of the fleet.
//!
//! The graph is undirected and unweighted. Adjacency is kept as exact 0/1
//! integers so that the connectivity predicates never depend on floating
//! point; the degree, Laplacian and normalized Laplacian are derived on
//! demand. Every node carries a stable label that survives removals.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency entry ({0}, {1}) is not 0 or 1")]
    NotBinary(usize, usize),
    #[error("adjacency is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("self loop on node index {0}")]
    SelfLoop(usize),
    #[error("graph needs at least one node")]
    Empty,
    #[error("expected {expected} node labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("duplicate node label {0}")]
    DuplicateLabel(usize),
    #[error("unknown node {0} (stale reference after removal?)")]
    UnknownNode(usize),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("removing node {0} would disconnect the communication graph")]
    UnsafeRemoval(usize),
}

/// Undirected communication graph with stable node labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormationGraph {
    n: usize,
    adjacency: Vec<u8>,
    node_ids: Vec<usize>,
}

impl FormationGraph {
    /// Builds a graph from an explicit 0/1 adjacency matrix, labelled `0..n`.
    pub fn from_adjacency(rows: &[Vec<u8>]) -> Result<Self, TopologyError> {
        let ids = (0..rows.len()).collect();
        Self::from_adjacency_with_ids(rows, ids)
    }

    pub fn from_adjacency_with_ids(rows: &[Vec<u8>], node_ids: Vec<usize>) -> Result<Self, TopologyError> {
        let n = rows.len();
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut adjacency = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(TopologyError::NotSquare { rows: n, cols: row.len() });
            }
            adjacency.extend_from_slice(row);
        }
        let g = FormationGraph { n, adjacency, node_ids };
        g.validate()?;
        Ok(g)
    }

    /// Builds a graph on `n` nodes from an undirected edge list of indices.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut adjacency = vec![0u8; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(TopologyError::EdgeOutOfRange(i, j, n));
            }
            if i == j {
                return Err(TopologyError::SelfLoop(i));
            }
            adjacency[i * n + j] = 1;
            adjacency[j * n + i] = 1;
        }
        Ok(FormationGraph { n, adjacency, node_ids: (0..n).collect() })
    }

    /// Cycle graph C_n labelled `0..n`.
    pub fn cycle(n: usize) -> Result<Self, TopologyError> {
        let edges: Vec<_> = if n < 3 {
            (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect()
        } else {
            (0..n).map(|i| (i, (i + 1) % n)).collect()
        };
        Self::from_edges(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self, TopologyError> {
        let edges: Vec<_> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        Self::from_edges(n, &edges)
    }

    /// Replaces the labels, keeping the structure.
    pub fn with_ids(mut self, node_ids: Vec<usize>) -> Result<Self, TopologyError> {
        self.node_ids = node_ids;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let n = self.n;
        if self.node_ids.len() != n {
            return Err(TopologyError::LabelCount { expected: n, got: self.node_ids.len() });
        }
        let mut seen = BTreeSet::new();
        for &id in &self.node_ids {
            if !seen.insert(id) {
                return Err(TopologyError::DuplicateLabel(id));
            }
        }
        for i in 0..n {
            if self.adjacency[i * n + i] != 0 {
                return Err(TopologyError::SelfLoop(i));
            }
            for j in 0..n {
                let a = self.adjacency[i * n + j];
                if a > 1 {
                    return Err(TopologyError::NotBinary(i, j));
                }
                if a != self.adjacency[j * n + i] {
                    return Err(TopologyError::NotSymmetric(i, j));
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    /// Position of the node labelled `id` in the matrix ordering.
    pub fn index_of(&self, id: usize) -> Result<usize, TopologyError> {
        self.node_ids
            .iter()
            .position(|&x| x == id)
            .ok_or(TopologyError::UnknownNode(id))
    }

    pub fn contains(&self, id: usize) -> bool {
        self.node_ids.contains(&id)
    }

    pub fn is_adjacent_idx(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j] == 1
    }

    /// Neighbor indices of the node at matrix position `i`.
    pub fn neighbor_indices(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_adjacent_idx(i, j)).collect()
    }

    /// Labels of the neighbors of node `id`.
    pub fn neighbors(&self, id: usize) -> Result<BTreeSet<usize>, TopologyError> {
        let i = self.index_of(id)?;
        Ok(self.neighbor_indices(i).into_iter().map(|j| self.node_ids[j]).collect())
    }

    pub fn degree_idx(&self, i: usize) -> usize {
        self.adjacency[i * self.n..(i + 1) * self.n].iter().map(|&a| a as usize).sum()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.degree_idx(i)).collect()
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.adjacency[i * self.n + j] as f64)
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if i == j { self.degree_idx(i) as f64 } else { 0.0 })
    }

    /// Graph Laplacian `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.degree_matrix() - self.adjacency_matrix()
    }

    /// Degree-normalized Laplacian `D^-1 (D - A)`; rows of isolated nodes are zero.
    ///
    /// This is the coupling matrix that the neighbor-averaged consensus law
    /// actually applies.
    pub fn normalized_laplacian(&self) -> DMatrix<f64> {
        let mut l = self.laplacian();
        for i in 0..self.n {
            let d = self.degree_idx(i);
            if d > 0 {
                l.row_mut(i).scale_mut(1.0 / d as f64);
            }
        }
        l
    }

    /// Eigenvalues of `D - A`, ascending.
    pub fn laplacian_spectrum(&self) -> Vec<f64> {
        sorted_symmetric_eigenvalues(self.laplacian())
    }

    /// Eigenvalues of `D^-1 (D - A)`, ascending.
    ///
    /// Computed through the symmetric similar matrix `D^-1/2 L D^-1/2`; nodes
    /// without neighbors contribute a zero eigenvalue.
    pub fn normalized_spectrum(&self) -> Vec<f64> {
        let l = self.laplacian();
        let scale: Vec<f64> = (0..self.n)
            .map(|i| {
                let d = self.degree_idx(i);
                if d > 0 { 1.0 / (d as f64).sqrt() } else { 0.0 }
            })
            .collect();
        let sym = DMatrix::from_fn(self.n, self.n, |i, j| scale[i] * l[(i, j)] * scale[j]);
        sorted_symmetric_eigenvalues(sym)
    }

    /// Connected components as sorted lists of matrix indices, optionally
    /// ignoring one vertex.
    fn components_without(&self, skip: Option<usize>) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        if let Some(s) = skip {
            seen[s] = true;
        }
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for v in 0..self.n {
                    if !seen[v] && self.is_adjacent_idx(u, v) {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn component_count(&self) -> usize {
        self.components_without(None).len()
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// True when the graph has more than two vertices and stays connected
    /// after deleting any single vertex.
    pub fn is_two_connected(&self) -> bool {
        if self.n <= 2 || !self.is_connected() {
            return false;
        }
        (0..self.n).all(|v| self.components_without(Some(v)).len() == 1)
    }

    /// Deletes node `id`: its row and column are cleared and dropped, and the
    /// degrees of the surviving nodes follow from the updated adjacency.
    ///
    /// Refuses removals that leave the remaining graph disconnected.
    pub fn remove_node(&self, id: usize) -> Result<FormationGraph, TopologyError> {
        let k = self.index_of(id)?;
        if self.n == 1 || self.components_without(Some(k)).len() != 1 {
            return Err(TopologyError::UnsafeRemoval(id));
        }
        let keep: Vec<usize> = (0..self.n).filter(|&i| i != k).collect();
        let m = keep.len();
        let mut adjacency = Vec::with_capacity(m * m);
        for &i in &keep {
            for &j in &keep {
                adjacency.push(self.adjacency[i * self.n + j]);
            }
        }
        let node_ids = keep.iter().map(|&i| self.node_ids[i]).collect();
        Ok(FormationGraph { n: m, adjacency, node_ids })
    }

    /// Degrees of the survivors after deleting the node at index `k`, updated
    /// incrementally as `d_ii - a_ik`; the deleted node's own degree becomes 0.
    pub fn degrees_after_removal(&self, k: usize) -> Vec<usize> {
        (0..self.n)
            .map(|i| if i == k { 0 } else { self.degree_idx(i) - self.adjacency[i * self.n + k] as usize })
            .collect()
    }

    /// Adjacency as nested rows (for serialization and diagnostics).
    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        self.adjacency.chunks(self.n).map(|r| r.to_vec()).collect()
    }
}

/// Eigenvalues within rounding of zero are returned as exactly `0.0`.
fn sorted_symmetric_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows().max(1) as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    let scale = ev.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let tol = 64.0 * n * f64::EPSILON * scale;
    for v in &mut ev {
        if v.abs() <= tol {
            *v = 0.0;
        }
    }
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}
