//! Neighbor graph over the point cloud, computed inside contiguous index chunks.
//!
//! The cloud is cut into index ranges of `chunk_size` points (the last range
//! holds the remainder) and an exact Euclidean KNN runs inside each range. The
//! point itself is its own nearest neighbor at distance zero. Rows are ordered
//! by ascending distance with ties broken by the lower global index. When a
//! chunk holds fewer than `k` points the trailing slots are padded and flagged
//! invalid.

use std::cmp::Ordering;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PointSet;

/// How slots beyond the chunk size are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Global index 0, as in the original padding with zeros.
    LiteralZero,
    /// The point's own index.
    #[default]
    SelfIndex,
}

impl PadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PadMode::LiteralZero => "literal_zero",
            PadMode::SelfIndex => "self_index",
        }
    }
}

impl std::str::FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal_zero" => Ok(PadMode::LiteralZero),
            "self_index" => Ok(PadMode::SelfIndex),
            other => Err(Error::InvalidInput(format!("unknown pad mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphConfig {
    pub k: usize,
    pub chunk_size: usize,
    pub pad_mode: PadMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 16,
            chunk_size: 1000,
            pad_mode: PadMode::SelfIndex,
        }
    }
}

impl GraphConfig {
    pub fn new(k: usize, chunk_size: usize, pad_mode: PadMode) -> Result<Self> {
        let config = Self {
            k,
            chunk_size,
            pad_mode,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.chunk_size == 0 {
            return Err(Error::Graph(format!(
                "k and chunk_size must be positive (k={}, chunk_size={})",
                self.k, self.chunk_size
            )));
        }
        Ok(())
    }
}

/// N x K neighbor indices with a validity mask, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    indices: Vec<u32>,
    valid: Vec<bool>,
}

impl NeighborGraph {
    pub fn new(k: usize, indices: Vec<u32>, valid: Vec<bool>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Graph("k must be positive".into()));
        }
        if indices.len() != valid.len() || indices.len() % k != 0 {
            return Err(Error::Graph(format!(
                "index table of {} entries and mask of {} entries do not form rows of {k}",
                indices.len(),
                valid.len()
            )));
        }
        let n = indices.len() / k;
        if let Some(bad) = indices
            .iter()
            .zip(&valid)
            .find(|(&i, &ok)| ok && i as usize >= n)
        {
            return Err(Error::Graph(format!("neighbor index {} out of range for {n} points", bad.0)));
        }
        Ok(Self { k, indices, valid })
    }

    pub fn n(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_row(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Valid neighbor indices of row `i`, in slot order.
    pub fn valid_neighbors(&self, i: usize) -> impl Iterator<Item = u32> + '_ {
        self.row(i)
            .iter()
            .zip(self.valid_row(i))
            .filter(|(_, &ok)| ok)
            .map(|(&j, _)| j)
    }
}

/// Contiguous ranges `[0, c), [c, 2c), ...` covering `0..n_points`.
pub fn partition(n_points: usize, chunk_size: usize) -> Vec<Range<usize>> {
    let chunk_size = chunk_size.max(1);
    (0..n_points)
        .step_by(chunk_size)
        .map(|start| start..(start + chunk_size).min(n_points))
        .collect()
}

#[inline]
fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn by_distance_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Fills one row of neighbors for the point at chunk-local position `local`.
#[allow(clippy::too_many_arguments)]
fn fill_row(
    chunk: &[[f64; 3]],
    offset: usize,
    local: usize,
    k: usize,
    pad_mode: PadMode,
    scratch: &mut Vec<(f64, u32)>,
    out_idx: &mut [u32],
    out_valid: &mut [bool],
) {
    let query = &chunk[local];
    scratch.clear();
    scratch.extend(
        chunk
            .iter()
            .enumerate()
            .map(|(j, p)| (squared_distance(query, p), (offset + j) as u32)),
    );
    let take = k.min(scratch.len());
    if scratch.len() > take {
        scratch.select_nth_unstable_by(take - 1, by_distance_then_index);
        scratch.truncate(take);
    }
    scratch.sort_unstable_by(by_distance_then_index);

    for (slot, &(_, j)) in scratch.iter().enumerate() {
        out_idx[slot] = j;
        out_valid[slot] = true;
    }
    let pad = match pad_mode {
        PadMode::LiteralZero => 0,
        PadMode::SelfIndex => (offset + local) as u32,
    };
    for slot in take..k {
        out_idx[slot] = pad;
        out_valid[slot] = false;
    }
}

/// KNN restricted to one chunk whose first point has global index `offset`.
///
/// Returns the row-major `M x k` index table (global indices) and mask.
pub fn knn_chunk(coords: &[[f64; 3]], offset: usize, k: usize, pad_mode: PadMode) -> (Vec<u32>, Vec<bool>) {
    let m = coords.len();
    let mut indices = vec![0u32; m * k];
    let mut valid = vec![false; m * k];
    if k == 0 {
        return (indices, valid);
    }
    let mut scratch = Vec::with_capacity(m);
    for (local, (idx, ok)) in indices.chunks_mut(k).zip(valid.chunks_mut(k)).enumerate() {
        fill_row(coords, offset, local, k, pad_mode, &mut scratch, idx, ok);
    }
    (indices, valid)
}

/// Builds the chunked neighbor graph. Rows are independent and processed in
/// parallel on the current rayon pool; the result does not depend on the pool
/// size.
pub fn build_graph(points: &PointSet, config: &GraphConfig) -> Result<NeighborGraph> {
    config.validate()?;
    let n = points.len();
    if n > u32::MAX as usize {
        return Err(Error::Graph(format!("{n} points exceed the u32 index range")));
    }
    let k = config.k;
    let coords = points.coords();
    let mut indices = vec![0u32; n * k];
    let mut valid = vec![false; n * k];
    indices
        .par_chunks_mut(k)
        .zip(valid.par_chunks_mut(k))
        .enumerate()
        .for_each_init(Vec::new, |scratch, (i, (idx, ok))| {
            let start = i / config.chunk_size * config.chunk_size;
            let end = (start + config.chunk_size).min(n);
            fill_row(&coords[start..end], start, i - start, k, config.pad_mode, scratch, idx, ok);
        });
    NeighborGraph::new(k, indices, valid)
}

/// Exact full-space KNN by sorting every distance. Single-threaded.
pub fn knn_bruteforce(points: &PointSet, k: usize) -> Result<NeighborGraph> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "brute-force KNN needs 1 <= k <= N (k={k}, N={n})"
        )));
    }
    let coords = points.coords();
    let mut indices = Vec::with_capacity(n * k);
    let mut dists = Vec::with_capacity(n);
    for q in coords {
        dists.clear();
        dists.extend(coords.iter().enumerate().map(|(j, p)| (squared_distance(q, p), j as u32)));
        dists.sort_by(by_distance_then_index);
        indices.extend(dists[..k].iter().map(|&(_, j)| j));
    }
    NeighborGraph::new(k, indices, vec![true; n * k])
}

/// Mean over rows of `|valid(a_i) ∩ valid(b_i)| / k`.
pub fn neighbor_overlap(a: &NeighborGraph, b: &NeighborGraph) -> Result<f64> {
    if a.n() != b.n() || a.k() != b.k() {
        return Err(Error::InvalidInput(format!(
            "graphs differ in shape: {}x{} vs {}x{}",
            a.n(),
            a.k(),
            b.n(),
            b.k()
        )));
    }
    if a.n() == 0 {
        return Ok(1.0);
    }
    let total: usize = (0..a.n())
        .map(|i| {
            let mut left: Vec<u32> = a.valid_neighbors(i).collect();
            left.sort_unstable();
            b.valid_neighbors(i)
                .filter(|j| left.binary_search(j).is_ok())
                .count()
        })
        .sum();
    Ok(total as f64 / (a.n() * a.k()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::from_coords(
            (0..n)
                .map(|_| [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)])
                .collect(),
        )
        .unwrap()
    }

    /// Full sort of every in-chunk squared distance.
    fn sorted_oracle(coords: &[[f64; 3]], offset: usize, k: usize) -> Vec<Vec<u32>> {
        coords
            .iter()
            .map(|q| {
                let mut d: Vec<(f64, u32)> = coords
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let e = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
                        (e, (offset + j) as u32)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(partition(5000, 5000), vec![0..5000]);
        let ranges = partition(12007, 1000);
        assert_eq!(ranges.len(), 13);
        assert_eq!(ranges.last().unwrap().len(), 7);
        let mut seen = vec![0u8; 12007];
        for r in &ranges {
            for i in r.clone() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn collinear_points() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let (idx, ok) = knn_chunk(&coords, 0, 2, PadMode::SelfIndex);
        assert_eq!(&idx[2..4], &[1, 0]);
        assert!(ok.iter().all(|&v| v));
    }

    #[test]
    fn literal_zero_padding() {
        let coords: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let (idx, ok) = knn_chunk(&coords, 100, 8, PadMode::LiteralZero);
        for row in 0..5 {
            assert_eq!(ok[row * 8..row * 8 + 8].iter().filter(|&&v| v).count(), 5);
            assert_eq!(&idx[row * 8 + 5..row * 8 + 8], &[0, 0, 0]);
            assert!(ok[row * 8 + 5..row * 8 + 8].iter().all(|&v| !v));
        }
    }

    #[test]
    fn self_index_padding() {
        let coords: Vec<[f64; 3]> = (0..3).map(|i| [i as f64, 0.0, 0.0]).collect();
        let (idx, ok) = knn_chunk(&coords, 10, 5, PadMode::SelfIndex);
        assert_eq!(&idx[5..10], &[11, 10, 12, 11, 11]);
        assert_eq!(&ok[5..10], &[true, true, true, false, false]);
    }

    #[test]
    fn chunk_matches_sort_oracle() {
        let pts = random_points(400, 1);
        let (idx, _) = knn_chunk(pts.coords(), 0, 16, PadMode::SelfIndex);
        let oracle = sorted_oracle(pts.coords(), 0, 16);
        for (i, expect) in oracle.iter().enumerate() {
            let mut got = idx[i * 16..(i + 1) * 16].to_vec();
            let mut expect = expect.clone();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect, "row {i}");
        }
    }

    #[test]
    fn singleton_graph() {
        let pts = PointSet::from_coords(vec![[1.0, 2.0, 3.0]]).unwrap();
        let g = build_graph(&pts, &GraphConfig::new(1, 1000, PadMode::SelfIndex).unwrap()).unwrap();
        assert_eq!(g.indices(), &[0]);
        assert_eq!(g.valid(), &[true]);
    }

    #[test]
    fn large_graph_equals_per_chunk_oracle() {
        let pts = random_points(10_000, 2);
        let config = GraphConfig::new(16, 1000, PadMode::SelfIndex).unwrap();
        let g = build_graph(&pts, &config).unwrap();
        for range in partition(pts.len(), 1000) {
            let oracle = sorted_oracle(&pts.coords()[range.clone()], range.start, 16);
            for (local, expect) in oracle.iter().enumerate() {
                assert_eq!(g.row(range.start + local), expect.as_slice());
            }
        }
    }

    #[test]
    fn remainder_chunk_validity_counts() {
        let pts = random_points(2500, 3);
        let g = build_graph(&pts, &GraphConfig::new(36, 1000, PadMode::SelfIndex).unwrap()).unwrap();
        for i in 0..2500 {
            assert_eq!(g.valid_row(i).iter().filter(|&&v| v).count(), 36);
        }
        let g = build_graph(&pts, &GraphConfig::new(600, 1000, PadMode::SelfIndex).unwrap()).unwrap();
        for i in 0..2000 {
            assert!(g.valid_row(i).iter().all(|&v| v));
        }
        for i in 2000..2500 {
            assert_eq!(g.valid_row(i).iter().filter(|&&v| v).count(), 500);
        }
    }

    #[test]
    fn bruteforce_examples() {
        let pts = PointSet::from_coords(vec![[0.0; 3], [1.0, 1.0, 1.0]]).unwrap();
        let g = knn_bruteforce(&pts, 2).unwrap();
        assert_eq!(g.indices(), &[0, 1, 1, 0]);
        assert!(knn_bruteforce(&pts, 3).is_err());

        let pts = random_points(300, 4);
        let full = knn_bruteforce(&pts, 9).unwrap();
        let single = build_graph(&pts, &GraphConfig::new(9, 300, PadMode::SelfIndex).unwrap()).unwrap();
        assert_eq!(full, single);
    }

    #[test]
    fn overlap_is_a_fraction() {
        let pts = random_points(1000, 5);
        let full = knn_bruteforce(&pts, 16).unwrap();
        let chunked = build_graph(&pts, &GraphConfig::new(16, 250, PadMode::SelfIndex).unwrap()).unwrap();
        let overlap = neighbor_overlap(&full, &chunked).unwrap();
        assert!((0.0..=1.0).contains(&overlap));
        // self is always shared
        assert!(overlap >= 1.0 / 16.0);
        assert!(overlap < 1.0);
        assert_eq!(neighbor_overlap(&full, &full).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(GraphConfig::new(0, 10, PadMode::SelfIndex).is_err());
        assert!(GraphConfig::new(3, 0, PadMode::SelfIndex).is_err());
    }
}
