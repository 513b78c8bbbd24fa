use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Graph-level target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// A graph with node features and directed edges. Undirected graphs store
/// both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_features: Tensor,
    edges: Vec<(usize, usize)>,
    pub target: Target,
}

impl Graph {
    pub fn new(node_features: Tensor, edges: Vec<(usize, usize)>, target: Target) -> Result<Self> {
        if node_features.shape().len() != 2 {
            return Err(Error::Structural(format!(
                "node features must be [nodes × features], got {:?}",
                node_features.shape()
            )));
        }
        let n = node_features.rows();
        if let Some(&(s, t)) = edges.iter().find(|&&(s, t)| s >= n || t >= n) {
            return Err(Error::Structural(format!(
                "edge ({s}, {t}) out of range for {n} nodes"
            )));
        }
        Ok(Graph {
            node_features,
            edges,
            target,
        })
    }

    /// Builds an undirected graph, inserting both directions of every edge.
    pub fn undirected(
        node_features: Tensor,
        edges: &[(usize, usize)],
        target: Target,
    ) -> Result<Self> {
        let both = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        Graph::new(node_features, both, target)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Data(format!("{perm:?} is not a permutation of {n} nodes")));
        }
        let f = self.num_features();
        let mut data = vec![0.0; n * f];
        for (old, &new) in perm.iter().enumerate() {
            data[new * f..(new + 1) * f].copy_from_slice(self.node_features.row(old));
        }
        let edges = self.edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect();
        Graph::new(Tensor::new(vec![n, f], data)?, edges, self.target)
    }
}

/// Several graphs merged into one disconnected graph for batched evaluation.
#[derive(Debug)]
pub struct GraphBatch {
    pub features: Tensor,
    pub edges: Vec<(usize, usize)>,
    /// Node row ranges per graph: graph `g` spans `offsets[g]..offsets[g+1]`.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Data("empty graph batch".into()))?;
        let f = first.num_features();
        let mut data = Vec::new();
        let mut edges = Vec::new();
        let mut offsets = vec![0];
        for g in graphs {
            if g.num_features() != f {
                return Err(Error::Structural(format!(
                    "graphs in a batch disagree on feature width ({} vs {f})",
                    g.num_features()
                )));
            }
            let base = *offsets.last().unwrap();
            data.extend_from_slice(g.node_features.data());
            edges.extend(g.edges.iter().map(|&(s, t)| (s + base, t + base)));
            offsets.push(base + g.num_nodes());
        }
        let total = *offsets.last().unwrap();
        Ok(GraphBatch {
            features: Tensor::new(vec![total, f], data)?,
            edges,
            offsets,
        })
    }
}
