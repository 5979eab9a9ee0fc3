//! Channel, spatial and correlation graphs, and training-time edge drop.

use rand::Rng;

use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Node/neighbor-list graph. Neighbor lists are sorted ascending and hold
/// no duplicates. Self-loops appear only when built with them explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    self_loops: bool,
}

impl Graph {
    /// Builds a graph from raw neighbor lists (sorted and deduplicated here).
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return param_err("graph needs at least one node");
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&bad) = list.iter().find(|&&j| j >= n) {
                return param_err(format!("node {i} lists neighbor {bad} outside 0..{n}"));
            }
            if list.contains(&i) {
                return param_err(format!("node {i} lists itself; use with_self_loops"));
            }
        }
        Ok(Self {
            neighbors,
            self_loops: false,
        })
    }

    /// Copy of the graph where every node also attends to itself.
    pub fn with_self_loops(&self) -> Self {
        let neighbors = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut l = l.clone();
                if let Err(pos) = l.binary_search(&i) {
                    l.insert(pos, i);
                }
                l
            })
            .collect();
        Self {
            neighbors,
            self_loops: true,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Number of (i, j) neighbor entries; twice the edge count of a
    /// symmetric graph without self-loops.
    pub fn directed_edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Undirected edge count, counting a self-loop once.
    pub fn undirected_edge_count(&self) -> usize {
        let loops = if self.self_loops { self.num_nodes() } else { 0 };
        (self.directed_edge_count() - loops) / 2 + loops
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, l)| {
            l.iter()
                .all(|&j| self.neighbors[j].binary_search(&i).is_ok())
        })
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Cycle over `c` channels where each node links to its `hops` preceding and
/// succeeding channels, wrapping around (the first channel meets the last).
pub fn build_cyclic_channel_graph(c: usize, hops: usize) -> Result<Graph> {
    let min = match hops {
        1 => 3,
        2 => 5,
        _ => return param_err(format!("channel graph hops must be 1 or 2, got {hops}")),
    };
    if c < min {
        return param_err(format!(
            "channel graph with {hops}-hop neighborhoods needs at least {min} channels, got {c}"
        ));
    }
    let neighbors = (0..c)
        .map(|i| {
            (1..=hops)
                .flat_map(|h| [(i + c - h) % c, (i + h) % c])
                .collect()
        })
        .collect();
    Graph::from_neighbors(neighbors)
}

/// 4-adjacency grid over `m x m` cells in row-major order; `2m(m-1)` edges.
pub fn build_grid_spatial_graph(m: usize) -> Result<Graph> {
    if m < 2 {
        return param_err(format!("spatial grid side must be at least 2, got {m}"));
    }
    let neighbors = (0..m * m)
        .map(|v| {
            let (r, c) = (v / m, v % m);
            let mut l = Vec::with_capacity(4);
            if r > 0 {
                l.push(v - m);
            }
            if c > 0 {
                l.push(v - 1);
            }
            if c + 1 < m {
                l.push(v + 1);
            }
            if r + 1 < m {
                l.push(v + m);
            }
            l
        })
        .collect();
    Graph::from_neighbors(neighbors)
}

/// Per-node dropped neighbor for one training forward pass.
///
/// Only the listed node stops attending to the dropped neighbor; the
/// reverse direction is untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeDropMask {
    dropped: Vec<Option<usize>>,
    active: bool,
}

impl EdgeDropMask {
    /// Mask that drops nothing (evaluation mode).
    pub fn inactive(num_nodes: usize) -> Self {
        Self {
            dropped: vec![None; num_nodes],
            active: false,
        }
    }

    pub fn from_entries(g: &Graph, dropped: Vec<Option<usize>>) -> Result<Self> {
        if dropped.len() != g.num_nodes() {
            return Err(Error::Dimension(format!(
                "mask for {} nodes applied to a graph of {}",
                dropped.len(),
                g.num_nodes()
            )));
        }
        for (i, d) in dropped.iter().enumerate() {
            if let Some(j) = *d {
                if g.neighbors(i).binary_search(&j).is_err() {
                    return param_err(format!("node {i} cannot drop non-neighbor {j}"));
                }
            }
        }
        Ok(Self {
            dropped,
            active: true,
        })
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn num_nodes(&self) -> usize {
        self.dropped.len()
    }

    /// The neighbor node `i` ignores this pass, if any.
    pub fn dropped(&self, node: usize) -> Option<usize> {
        if self.active {
            self.dropped[node]
        } else {
            None
        }
    }

    /// Number of nodes with a dropped neighbor.
    pub fn count(&self) -> usize {
        if self.active {
            self.dropped.iter().flatten().count()
        } else {
            0
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dropped
            .iter()
            .enumerate()
            .filter(move |_| self.active)
            .filter_map(|(i, d)| d.map(|j| (i, j)))
    }
}

/// Draws, for every interior node of an `m x m` grid graph, one of its four
/// neighbors uniformly at random. Grids with `m < 3` have no interior and get
/// an empty (but active) mask.
pub fn sample_edge_drop<R: Rng + ?Sized>(g: &Graph, m: usize, rng: &mut R) -> Result<EdgeDropMask> {
    if g.num_nodes() != m * m {
        return Err(Error::Dimension(format!(
            "graph has {} nodes, not a {m}x{m} grid",
            g.num_nodes()
        )));
    }
    let mut dropped = vec![None; m * m];
    if m >= 3 {
        for r in 1..m - 1 {
            for c in 1..m - 1 {
                let v = r * m + c;
                let nb = g.neighbors(v);
                let base: Vec<usize> = nb.iter().copied().filter(|&u| u != v).collect();
                let pick = base[rng.random_range(0..base.len())];
                dropped[v] = Some(pick);
            }
        }
    }
    EdgeDropMask::from_entries(g, dropped)
}

/// Directed k-nearest-neighbor graph over channel rows of `x` (`[C, L]`),
/// ranked by the correlation `x x^T`. Ties go to the lower index.
pub fn build_knn_correlation_graph<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Graph> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!(
            "k-NN graph needs [C, L] features, got {:?}",
            x.shape()
        )));
    }
    let (c, l) = (x.shape()[0], x.shape()[1]);
    if k == 0 || k >= c {
        return param_err(format!("k must lie in 1..{c}, got {k}"));
    }
    let d = x.data();
    let mut corr = vec![T::zero(); c * c];
    T::gemm(c, l, c, T::one(), d, false, d, true, T::zero(), &mut corr);
    let neighbors = (0..c)
        .map(|i| {
            let row = &corr[i * c..(i + 1) * c];
            let mut order: Vec<usize> = (0..c).filter(|&j| j != i).collect();
            // stable sort keeps ascending index order among equal scores
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            order.truncate(k);
            order
        })
        .collect();
    Graph::from_neighbors(neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;

    #[test]
    fn four_cycle() {
        let g = build_cyclic_channel_graph(4, 1).unwrap();
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1, 3]);
        assert_eq!(g.neighbors(3), &[0, 2]);
    }

    #[test]
    fn three_cycle_is_complete() {
        let g = build_cyclic_channel_graph(3, 1).unwrap();
        for i in 0..3 {
            let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            assert_eq!(g.neighbors(i), others.as_slice());
        }
    }

    #[test]
    fn two_hop_cycle() {
        let g = build_cyclic_channel_graph(6, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2, 4, 5]);
        assert!((0..6).all(|i| g.degree(i) == 4));
    }

    #[test]
    fn channel_graph_minimums() {
        assert!(build_cyclic_channel_graph(2, 1).is_err());
        assert!(build_cyclic_channel_graph(4, 2).is_err());
        assert!(build_cyclic_channel_graph(5, 2).is_ok());
        assert!(build_cyclic_channel_graph(8, 3).is_err());
    }

    #[test]
    fn grid_seven() {
        let g = build_grid_spatial_graph(7).unwrap();
        assert_eq!(g.num_nodes(), 49);
        assert_eq!(g.undirected_edge_count(), 84);
        let mut hist = [0usize; 5];
        for v in 0..49 {
            hist[g.degree(v)] += 1;
        }
        assert_eq!(&hist[2..], &[4, 20, 25]);
    }

    #[test]
    fn grid_two_and_three() {
        let g = build_grid_spatial_graph(2).unwrap();
        assert_eq!(g.undirected_edge_count(), 4);
        assert!((0..4).all(|v| g.degree(v) == 2));
        let g3 = build_grid_spatial_graph(3).unwrap();
        assert_eq!(g3.directed_edge_count(), 24);
        assert!(build_grid_spatial_graph(1).is_err());
    }

    #[test]
    fn self_loops_are_opt_in() {
        let g = build_grid_spatial_graph(3).unwrap();
        assert!((0..9).all(|v| !g.neighbors(v).contains(&v)));
        let s = g.with_self_loops();
        assert!((0..9).all(|v| s.neighbors(v).contains(&v)));
        assert_eq!(s.undirected_edge_count(), 12 + 9);
        assert!(Graph::from_neighbors(vec![vec![0]]).is_err());
    }

    #[test]
    fn edge_drop_cardinality_and_validity() {
        let g = build_grid_spatial_graph(7).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(3);
        let mask = sample_edge_drop(&g, 7, &mut rng).unwrap();
        assert_eq!(mask.count(), 25);
        for (i, j) in mask.entries() {
            let (r, c) = (i / 7, i % 7);
            assert!((1..6).contains(&r) && (1..6).contains(&c));
            assert!(g.neighbors(i).contains(&j));
        }
    }

    #[test]
    fn edge_drop_small_grid_and_determinism() {
        let g2 = build_grid_spatial_graph(2).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(0);
        assert_eq!(sample_edge_drop(&g2, 2, &mut rng).unwrap().count(), 0);
        let g = build_grid_spatial_graph(5).unwrap();
        let a = sample_edge_drop(&g, 5, &mut Xoshiro256::seed_from_u64(9)).unwrap();
        let b = sample_edge_drop(&g, 5, &mut Xoshiro256::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inactive_mask_drops_nothing() {
        let m = EdgeDropMask::inactive(9);
        assert_eq!(m.count(), 0);
        assert!((0..9).all(|v| m.dropped(v).is_none()));
    }

    #[test]
    fn mask_rejects_non_neighbor() {
        let g = build_grid_spatial_graph(3).unwrap();
        let mut d = vec![None; 9];
        d[4] = Some(0);
        assert!(EdgeDropMask::from_entries(&g, d).is_err());
    }

    #[test]
    fn knn_tie_breaks_low() {
        let x = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = build_knn_correlation_graph(&x, 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(2), &[0]);
        assert!(build_knn_correlation_graph(&x, 3).is_err());
        let full = build_knn_correlation_graph(&x, 2).unwrap();
        assert_eq!(full.neighbors(2), &[0, 1]);
    }

    #[test]
    fn knn_duplicate_rows_pick_each_other() {
        let x = Tensor::<f64>::from_f64(
            &[4, 3],
            &[0.2, 0.9, -0.1, 3.0, 1.0, 2.0, 0.5, -0.7, 0.3, 3.0, 1.0, 2.0],
        )
        .unwrap();
        let g = build_knn_correlation_graph(&x, 1).unwrap();
        assert_eq!(g.neighbors(1), &[3]);
        assert_eq!(g.neighbors(3), &[1]);
    }
}
