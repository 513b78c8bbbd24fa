use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Graph, Target};
use crate::tensor::Tensor;

use super::blobs::uniform_inclusive;
use super::{Dataset, TaskKind};

/// Graph-level labelling rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphRule {
    /// Regression target: number of nodes.
    CountNodes,
    /// Regression target: maximum of node feature 0.
    MaxFeature,
    /// Binary label: 1 iff the graph contains a triangle.
    TrianglePresence,
}

impl GraphRule {
    pub fn task(self) -> TaskKind {
        match self {
            GraphRule::TrianglePresence => TaskKind::Classification { classes: 2 },
            _ => TaskKind::Regression,
        }
    }

    /// Target of `rule` for a graph with the given features and undirected
    /// edge list.
    pub fn target(self, features: &Tensor, edges: &[(usize, usize)]) -> Target {
        match self {
            GraphRule::CountNodes => Target::Value(features.rows() as f64),
            GraphRule::MaxFeature => Target::Value(
                (0..features.rows())
                    .map(|r| features.at(r, 0))
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            GraphRule::TrianglePresence => {
                Target::Class(usize::from(has_triangle(features.rows(), edges)))
            }
        }
    }
}

impl fmt::Display for GraphRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphRule::CountNodes => "count_nodes",
            GraphRule::MaxFeature => "max_feature",
            GraphRule::TrianglePresence => "triangle_presence",
        })
    }
}

impl FromStr for GraphRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "count_nodes" => Ok(GraphRule::CountNodes),
            "max_feature" => Ok(GraphRule::MaxFeature),
            "triangle_presence" => Ok(GraphRule::TrianglePresence),
            other => Err(format!(
                "unknown graph rule `{other}` (count_nodes|max_feature|triangle_presence)"
            )),
        }
    }
}

fn has_triangle(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![vec![false; n]; n];
    for &(a, b) in edges {
        if a != b {
            adj[a][b] = true;
            adj[b][a] = true;
        }
    }
    (0..n).any(|a| {
        (a + 1..n).any(|b| adj[a][b] && (b + 1..n).any(|c| adj[a][c] && adj[b][c]))
    })
}

/// Random graphs: a uniform random tree on `min_nodes..=max_nodes` nodes with
/// node features uniform in `[0, 1)`. For triangle labelling, half the graphs
/// get one extra edge closing a path of length two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphTaskSpec {
    pub rule: GraphRule,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub features: usize,
}

impl GraphTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let min_needed = if self.rule == GraphRule::TrianglePresence { 3 } else { 1 };
        if self.min_nodes < min_needed || self.max_nodes < self.min_nodes {
            return Err(Error::config(
                "dataset.nodes",
                format!(
                    "need {min_needed} <= min_nodes <= max_nodes, got {}..{}",
                    self.min_nodes, self.max_nodes
                ),
            ));
        }
        if self.features == 0 {
            return Err(Error::config("dataset.features", "must be >= 1"));
        }
        Ok(())
    }
}

fn random_graph<R: Rng + ?Sized>(spec: &GraphTaskSpec, rng: &mut R) -> Result<Graph> {
    let n = uniform_inclusive(rng, spec.min_nodes, spec.max_nodes);
    let data = (0..n * spec.features)
        .map(|_| rng.random::<f64>())
        .collect();
    let features = Tensor::new(vec![n, spec.features], data)?;
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    if spec.rule == GraphRule::TrianglePresence && rng.random_bool(0.5) {
        // Close a wedge u - v - w around some node v of degree >= 2.
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        let centres: Vec<usize> = (0..n).filter(|&v| neighbours[v].len() >= 2).collect();
        let v = centres[rng.random_range(0..centres.len())];
        let i = rng.random_range(0..neighbours[v].len());
        let mut j = rng.random_range(0..neighbours[v].len() - 1);
        if j >= i {
            j += 1;
        }
        edges.push((neighbours[v][i], neighbours[v][j]));
    }
    let target = spec.rule.target(&features, &edges);
    Graph::undirected(features, &edges, target)
}

pub fn make_graph_tasks(spec: &GraphTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Parameter("need at least one graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..n)
        .map(|_| random_graph(spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_graphs(graphs, spec.rule.task())
}
