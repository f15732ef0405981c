//! Static undirected graphs, the line-oriented map format and all-pairs
//! shortest-path hop counts.
//!
//! Map files look like
//!
//! ```text
//! # optional comments
//! nodes 4
//! edge 0 1
//! edge 1 2
//! edge 2 3
//! ```
//!
//! The first non-comment line declares the node count; every following line
//! declares one edge `u v` with `u < v`. Writers emit edges sorted
//! lexicographically, so `load_map(write_map(g)) == g`.

use std::fmt::Write as _;
use std::io::BufRead;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sentinel hop count for node pairs in different components.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed map at line {line}: {reason}")]
    MalformedMap { line: usize, reason: String },
    #[error("node {node} out of range for a graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("io error while reading map: {0}")]
    Io(String),
}

/// An undirected, unweighted graph on nodes `0..n`.
///
/// Adjacency lists are kept sorted so every traversal is deterministic and
/// independent of the order in which edges were supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a validated graph. Edges may be given in any order and with
    /// either endpoint first; self-loops, duplicates and out-of-range
    /// endpoints are rejected.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::MalformedMap {
                line: 0,
                reason: "graph must have at least one node".into(),
            });
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GraphError::MalformedMap {
                    line: 0,
                    reason: format!("edge {u}-{v} has an endpoint >= {node_count}"),
                });
            }
            if u == v {
                return Err(GraphError::MalformedMap {
                    line: 0,
                    reason: format!("self-loop on node {u}"),
                });
            }
            canonical.push((u.min(v), u.max(v)));
        }
        canonical.sort_unstable();
        if let Some(w) = canonical.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::MalformedMap {
                line: 0,
                reason: format!("duplicate edge {}-{}", w[0].0, w[0].1),
            });
        }
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &canonical {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            adjacency,
            edges: canonical,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Edges as `(u, v)` pairs with `u < v`, sorted lexicographically.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbors of `v` in ascending node-id order.
    pub fn neighbors(&self, v: usize) -> Result<&[usize], GraphError> {
        self.adjacency
            .get(v)
            .map(Vec::as_slice)
            .ok_or(GraphError::NodeOutOfRange {
                node: v,
                n: self.node_count(),
            })
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.node_count() && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Dense adjacency mask, row-major `n * n`, optionally with the diagonal
    /// forced true.
    pub fn adjacency_mask(&self, self_loops: bool) -> Vec<bool> {
        let n = self.node_count();
        let mut mask = vec![false; n * n];
        for (u, list) in self.adjacency.iter().enumerate() {
            for &v in list {
                mask[u * n + v] = true;
            }
            if self_loops {
                mask[u * n + u] = true;
            }
        }
        mask
    }

    /// Returns the graph with node `i` relabelled as `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(self.node_count(), &edges)
    }

    /// Number of connected components (by breadth-first search).
    pub fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut queue = std::collections::VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// Short stable digest of the canonical map text.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(write_map(self).as_bytes());
        hex::encode(&hash[..8])
    }
}

/// Serializes a graph in the canonical map format.
pub fn write_map(g: &Graph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "nodes {}", g.node_count());
    for &(u, v) in g.edges() {
        let _ = writeln!(out, "edge {u} {v}");
    }
    out
}

/// Parses the map format. Comments start with `#`; blank lines are ignored.
pub fn load_map<R: BufRead>(source: R) -> Result<Graph, GraphError> {
    let mut node_count: Option<usize> = None;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| GraphError::Io(e.to_string()))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |reason: String| GraphError::MalformedMap {
            line: lineno,
            reason,
        };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match (node_count, tokens.as_slice()) {
            (None, ["nodes", n]) => {
                let n: usize = n.parse().map_err(|_| bad(format!("bad node count {n:?}")))?;
                if n == 0 {
                    return Err(bad("node count must be positive".into()));
                }
                node_count = Some(n);
            }
            (None, _) => return Err(bad("expected `nodes <n>` header".into())),
            (Some(n), ["edge", u, v]) => {
                let u: usize = u.parse().map_err(|_| bad(format!("bad endpoint {u:?}")))?;
                let v: usize = v.parse().map_err(|_| bad(format!("bad endpoint {v:?}")))?;
                if u >= n || v >= n {
                    return Err(bad(format!("edge {u}-{v} has an endpoint >= {n}")));
                }
                if u == v {
                    return Err(bad(format!("self-loop on node {u}")));
                }
                if u > v {
                    return Err(bad(format!("edge endpoints must be ascending, got {u} {v}")));
                }
                if !seen.insert((u, v)) {
                    return Err(bad(format!("duplicate edge {u}-{v}")));
                }
                edges.push((u, v));
            }
            (Some(_), _) => return Err(bad(format!("unrecognised line {content:?}"))),
        }
    }
    let n = node_count.ok_or(GraphError::MalformedMap {
        line: 0,
        reason: "missing `nodes <n>` header".into(),
    })?;
    Graph::new(n, &edges)
}

/// Reads a map from disk.
pub fn load_map_file(path: &std::path::Path) -> Result<Graph, GraphError> {
    let file = std::fs::File::open(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
    load_map(std::io::BufReader::new(file))
}

/// All-pairs hop counts with [`UNREACHABLE`] for disconnected pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    dist: Vec<u32>,
    diameter: u32,
}

impl DistanceMatrix {
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Raw entry, possibly [`UNREACHABLE`].
    pub fn raw(&self, u: usize, v: usize) -> u32 {
        self.dist[u * self.n + v]
    }

    /// Hop count, `None` when `v` is unreachable from `u`.
    pub fn hops(&self, u: usize, v: usize) -> Option<u32> {
        match self.raw(u, v) {
            UNREACHABLE => None,
            d => Some(d),
        }
    }

    /// Largest finite entry.
    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    /// `dist(u, v) / diameter`, with unreachable pairs mapped to 1.0.
    pub fn normalized(&self, u: usize, v: usize) -> f64 {
        match self.hops(u, v) {
            None => 1.0,
            Some(_) if self.diameter == 0 => 0.0,
            Some(d) => (f64::from(d) / f64::from(self.diameter)).min(1.0),
        }
    }
}

/// Floyd-Warshall over unit edge weights.
pub fn all_pairs_shortest_paths(g: &Graph) -> DistanceMatrix {
    let n = g.node_count();
    let mut dist = vec![UNREACHABLE; n * n];
    for u in 0..n {
        dist[u * n + u] = 0;
    }
    for &(u, v) in g.edges() {
        dist[u * n + v] = 1;
        dist[v * n + u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            let ik = dist[i * n + k];
            if ik == UNREACHABLE {
                continue;
            }
            for j in 0..n {
                let kj = dist[k * n + j];
                if kj == UNREACHABLE {
                    continue;
                }
                let through = ik + kj;
                if through < dist[i * n + j] {
                    dist[i * n + j] = through;
                }
            }
        }
    }
    let diameter = dist.iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0);
    DistanceMatrix { n, dist, diameter }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(n, &edges).unwrap()
    }

    fn bfs_oracle(g: &Graph) -> Vec<u32> {
        let n = g.node_count();
        let mut out = vec![UNREACHABLE; n * n];
        for s in 0..n {
            out[s * n + s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in g.neighbors(u).unwrap() {
                    if out[s * n + v] == UNREACHABLE {
                        out[s * n + v] = out[s * n + u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn parses_minimal_path() {
        let g = load_map("nodes 3\nedge 0 1\nedge 1 2\n".as_bytes()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn edge_order_does_not_matter() {
        let a = load_map("nodes 3\nedge 1 2\nedge 0 1\n".as_bytes()).unwrap();
        let b = load_map("# header\nnodes 3 # three\n\nedge 0 1\nedge 1 2".as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_maps() {
        for text in [
            "nodes 3\nedge 0 1\nedge 0 1\n",
            "nodes 3\nedge 1 1\n",
            "nodes 3\nedge 0 3\n",
            "nodes 3\nedge 2 1\n",
            "nodes x\n",
            "edge 0 1\n",
            "nodes 3\nvertex 0\n",
            "",
        ] {
            assert!(
                matches!(load_map(text.as_bytes()), Err(GraphError::MalformedMap { .. })),
                "{text:?} should be rejected"
            );
        }
    }

    #[test]
    fn hundred_node_map_loads() {
        let mut text = String::from("nodes 100\n");
        for i in 0..99 {
            text.push_str(&format!("edge {i} {}\n", i + 1));
        }
        assert_eq!(load_map(text.as_bytes()).unwrap().node_count(), 100);
    }

    #[test]
    fn path_distances() {
        let d = all_pairs_shortest_paths(&path(3));
        assert_eq!(d.hops(0, 2), Some(2));
        assert_eq!(d.diameter(), 2);
    }

    #[test]
    fn isolated_nodes_are_unreachable() {
        let g = Graph::new(2, &[]).unwrap();
        let d = all_pairs_shortest_paths(&g);
        assert_eq!(d.raw(0, 1), UNREACHABLE);
        assert_eq!(d.hops(0, 1), None);
        assert_eq!(d.normalized(0, 1), 1.0);
        assert_eq!(d.diameter(), 0);
    }

    #[test]
    fn neighbor_lists() {
        let g = path(3);
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
        let iso = Graph::new(2, &[]).unwrap();
        assert!(iso.neighbors(0).unwrap().is_empty());
        let star = Graph::new(5, &[(0, 4), (0, 2), (3, 0), (1, 0)]).unwrap();
        assert_eq!(star.neighbors(0).unwrap(), &[1, 2, 3, 4]);
        assert_eq!(
            star.neighbors(5),
            Err(GraphError::NodeOutOfRange { node: 5, n: 5 })
        );
    }

    fn arb_graph(max_n: usize) -> impl Strategy<Value = Graph> {
        (1..=max_n).prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            let len = pairs.len();
            proptest::collection::vec(any::<bool>(), len).prop_map(move |keep| {
                let edges: Vec<_> = pairs
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(&e, _)| e)
                    .collect();
                Graph::new(n, &edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn floyd_warshall_matches_bfs(g in arb_graph(32)) {
            let d = all_pairs_shortest_paths(&g);
            let oracle = bfs_oracle(&g);
            let n = g.node_count();
            for u in 0..n {
                for v in 0..n {
                    prop_assert_eq!(d.raw(u, v), oracle[u * n + v]);
                }
            }
        }

        #[test]
        fn distance_matrix_is_a_metric(g in arb_graph(12)) {
            let d = all_pairs_shortest_paths(&g);
            let n = g.node_count();
            for u in 0..n {
                prop_assert_eq!(d.raw(u, u), 0);
                for v in 0..n {
                    prop_assert_eq!(d.raw(u, v), d.raw(v, u));
                    prop_assert_eq!(d.raw(u, v) == 1, g.has_edge(u, v));
                    for w in 0..n {
                        if let (Some(a), Some(b), Some(c)) = (d.hops(u, w), d.hops(w, v), d.hops(u, v)) {
                            prop_assert!(c <= a + b);
                        }
                    }
                }
            }
        }

        #[test]
        fn map_text_round_trips(g in arb_graph(16)) {
            let text = write_map(&g);
            prop_assert_eq!(load_map(text.as_bytes()).unwrap(), g);
        }
    }
}
