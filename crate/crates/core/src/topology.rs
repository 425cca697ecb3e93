//! Undirected communication graph over the vehicles of one crossing.
//!
//! Vehicle indices are 1-based at the API boundary (matching scenario files)
//! and 0-based internally.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::junction::PlatoonOrder;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("self-edge ({0}, {0}) is not allowed")]
    SelfEdge(usize),
    #[error("vehicle index {index} out of range 1..={n}")]
    OutOfRange { index: usize, n: usize },
    #[error("graph must contain at least one vehicle")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    n: usize,
    adjacency: Vec<Vec<bool>>,
}

impl CommGraph {
    /// Builds a graph from 1-based unordered pairs. Duplicates are idempotent.
    pub fn build(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut adjacency = vec![vec![false; n]; n];
        for &(a, b) in edges {
            for idx in [a, b] {
                if idx == 0 || idx > n {
                    return Err(TopologyError::OutOfRange { index: idx, n });
                }
            }
            if a == b {
                return Err(TopologyError::SelfEdge(a));
            }
            adjacency[a - 1][b - 1] = true;
            adjacency[b - 1][a - 1] = true;
        }
        Ok(Self { n, adjacency })
    }

    pub fn complete(n: usize) -> Self {
        let mut adjacency = vec![vec![true; n]; n];
        for (i, row) in adjacency.iter_mut().enumerate() {
            row[i] = false;
        }
        Self { n, adjacency }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a >= 1 && b >= 1 && a <= self.n && b <= self.n && self.adjacency[a - 1][b - 1]
    }

    /// Undirected edges as 1-based `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.adjacency[i][j] {
                    out.push((i + 1, j + 1));
                }
            }
        }
        out
    }

    /// Neighbour set of vehicle `i` (1-based), ascending.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, TopologyError> {
        if i == 0 || i > self.n {
            return Err(TopologyError::OutOfRange { index: i, n: self.n });
        }
        Ok(self.adjacency[i - 1]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j + 1)
            .collect())
    }

    /// Breadth-first reachability from vehicle 1.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..self.n {
                if self.adjacency[i][j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Topology as written in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(NamedTopology),
    Edges { edges: Vec<[usize; 2]> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedTopology {
    /// Predecessor-follower chain in crossing order.
    Chain,
    Complete,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Named(NamedTopology::Chain)
    }
}

impl TopologySpec {
    /// Resolves to a graph over scenario indices (1-based, scenario order).
    /// `order` lists the scenario index of each vehicle sorted by rank.
    pub fn resolve(&self, n: usize, order: &PlatoonOrder) -> Result<CommGraph, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        match self {
            TopologySpec::Named(NamedTopology::Complete) => Ok(CommGraph::complete(n)),
            TopologySpec::Named(NamedTopology::Chain) => {
                let by_rank = order.indices_by_rank();
                let edges: Vec<_> = by_rank.windows(2).map(|w| (w[0] + 1, w[1] + 1)).collect();
                CommGraph::build(n, &edges)
            }
            TopologySpec::Edges { edges } => {
                let pairs: Vec<_> = edges.iter().map(|e| (e[0], e[1])).collect();
                CommGraph::build(n, &pairs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_examples() {
        let g = CommGraph::build(3, &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(CommGraph::build(2, &[]).unwrap().edge_count(), 0);
        assert_eq!(CommGraph::build(3, &[(1, 2), (2, 1)]).unwrap().edge_count(), 1);
    }

    #[test]
    fn build_rejects_invalid_pairs() {
        assert_eq!(CommGraph::build(3, &[(2, 2)]), Err(TopologyError::SelfEdge(2)));
        assert!(matches!(CommGraph::build(3, &[(1, 4)]), Err(TopologyError::OutOfRange { .. })));
        assert!(matches!(CommGraph::build(3, &[(0, 1)]), Err(TopologyError::OutOfRange { .. })));
    }

    #[test]
    fn neighbour_examples() {
        let path = CommGraph::build(3, &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(path.neighbors(2).unwrap(), vec![1, 3]);
        assert!(CommGraph::build(2, &[]).unwrap().neighbors(1).unwrap().is_empty());
        assert_eq!(CommGraph::complete(3).neighbors(1).unwrap(), vec![2, 3]);
        assert!(path.neighbors(4).is_err());
    }

    #[test]
    fn connectivity_examples() {
        assert!(CommGraph::build(3, &[(1, 2), (2, 3)]).unwrap().is_connected());
        assert!(!CommGraph::build(2, &[]).unwrap().is_connected());
        assert!(CommGraph::build(1, &[]).unwrap().is_connected());
    }

    #[test]
    fn topology_spec_parses_all_forms() {
        #[derive(Deserialize)]
        struct Doc {
            topology: TopologySpec,
        }
        let chain: Doc = toml::from_str("topology = \"chain\"").unwrap();
        assert_eq!(chain.topology, TopologySpec::Named(NamedTopology::Chain));
        let complete: Doc = toml::from_str("topology = \"complete\"").unwrap();
        assert_eq!(complete.topology, TopologySpec::Named(NamedTopology::Complete));
        let edges: Doc = toml::from_str("topology = { edges = [[1, 2], [2, 3]] }").unwrap();
        assert_eq!(edges.topology, TopologySpec::Edges { edges: vec![[1, 2], [2, 3]] });
    }
}
