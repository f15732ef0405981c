//! Connected map generators: grids, rings, random trees and random sparse
//! graphs. Output is deterministic in the seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// `size x size` lattice.
    Grid,
    Ring,
    Tree,
    /// Random spanning tree plus `size / 2` extra edges.
    Random,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::Grid => "grid",
            MapKind::Ring => "ring",
            MapKind::Tree => "tree",
            MapKind::Random => "random",
        })
    }
}

impl FromStr for MapKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s {
            "grid" => Ok(MapKind::Grid),
            "ring" => Ok(MapKind::Ring),
            "tree" => Ok(MapKind::Tree),
            "random" => Ok(MapKind::Random),
            other => Err(GraphError::MalformedMap {
                line: 0,
                reason: format!("unknown map kind {other}"),
            }),
        }
    }
}

pub fn generate_map(kind: MapKind, size: usize, seed: u64) -> Result<Graph, GraphError> {
    if size < 2 {
        return Err(GraphError::MalformedMap {
            line: 0,
            reason: format!("map size must be at least 2, got {size}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        MapKind::Grid => {
            let mut edges = Vec::new();
            for r in 0..size {
                for c in 0..size {
                    let v = r * size + c;
                    if c + 1 < size {
                        edges.push((v, v + 1));
                    }
                    if r + 1 < size {
                        edges.push((v, v + size));
                    }
                }
            }
            Graph::new(size * size, &edges)
        }
        MapKind::Ring => {
            if size == 2 {
                return Graph::new(2, &[(0, 1)]);
            }
            let edges: Vec<_> = (0..size).map(|i| (i, (i + 1) % size)).collect();
            Graph::new(size, &edges)
        }
        MapKind::Tree => Graph::new(size, &random_tree(size, &mut rng)),
        MapKind::Random => {
            let mut edges = random_tree(size, &mut rng);
            let mut have: std::collections::HashSet<(usize, usize)> =
                edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
            let max_edges = size * (size - 1) / 2;
            let extra = (size / 2).min(max_edges - edges.len());
            while edges.len() < size - 1 + extra {
                let u = rng.random_range(0..size);
                let v = rng.random_range(0..size);
                if u != v && have.insert((u.min(v), u.max(v))) {
                    edges.push((u, v));
                }
            }
            Graph::new(size, &edges)
        }
    }
}

/// Uniformly attached random tree over a shuffled labelling.
fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (1..n).map(|i| (order[rng.random_range(0..i)], order[i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::all_pairs_shortest_paths;

    #[test]
    fn lattice_and_ring_counts() {
        let g = generate_map(MapKind::Grid, 4, 0).unwrap();
        assert_eq!((g.node_count(), g.edges().len()), (16, 24));
        let r = generate_map(MapKind::Ring, 5, 0).unwrap();
        assert_eq!((r.node_count(), r.edges().len()), (5, 5));
        assert_eq!(all_pairs_shortest_paths(&r).diameter(), 2);
    }

    #[test]
    fn random_maps_are_connected_and_seeded() {
        for seed in 0..20 {
            let g = generate_map(MapKind::Random, 30, seed).unwrap();
            assert_eq!(g.component_count(), 1);
            assert_eq!(g.edges().len(), 29 + 15);
            let t = generate_map(MapKind::Tree, 30, seed).unwrap();
            assert_eq!((t.component_count(), t.edges().len()), (1, 29));
        }
        assert_eq!(
            generate_map(MapKind::Random, 30, 4).unwrap(),
            generate_map(MapKind::Random, 30, 4).unwrap()
        );
        assert_ne!(
            generate_map(MapKind::Random, 30, 4).unwrap(),
            generate_map(MapKind::Random, 30, 5).unwrap()
        );
        assert!(generate_map(MapKind::Ring, 1, 0).is_err());
    }
}
