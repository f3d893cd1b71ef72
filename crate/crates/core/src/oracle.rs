//! Slow, direct reference implementations.
//!
//! Each function here recomputes a pipeline stage the obvious way (explicit
//! loops, full sorts, dense matrices) without sharing code with the fast path.
//! The test suites and the `oracle-check` command compare the two.

use nalgebra::Vector4;
use ndarray::{Array2, Array3, Array4};

use crate::fusion::{FusedBlock, ImageFeatureMap};
use crate::geometry::{CalibrationRig, PointSet};
use crate::graph::PadMode;
use crate::safa::{AttentionMode, AttentionParams};

/// `(u, v, z_c)` for every point through the composed 3x4 matrix, no filtering.
pub fn projection_reference(points: &PointSet, rig: &CalibrationRig) -> Vec<[f64; 3]> {
    let p = rig.projection_matrix();
    points
        .coords()
        .iter()
        .map(|c| {
            let h = p * Vector4::new(c[0], c[1], c[2], 1.0);
            [h[0] / h[2], h[1] / h[2], h[2]]
        })
        .collect()
}

/// Neighbors of every point restricted to its index chunk, by full sort.
/// Returns per-row `(indices, valid)` with the same padding rules as the
/// graph module.
pub fn chunked_knn_reference(coords: &[[f64; 3]], k: usize, chunk_size: usize, pad_mode: PadMode) -> Vec<(Vec<u32>, Vec<bool>)> {
    let n = coords.len();
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = usize::min(start + chunk_size, n);
        for i in start..end {
            let mut cand: Vec<(f64, usize)> = (start..end)
                .map(|j| {
                    let mut d = 0.0;
                    for a in 0..3 {
                        d += (coords[i][a] - coords[j][a]) * (coords[i][a] - coords[j][a]);
                    }
                    (d, j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut idx: Vec<u32> = cand.iter().take(k).map(|&(_, j)| j as u32).collect();
            let mut valid = vec![true; idx.len()];
            let pad = match pad_mode {
                PadMode::LiteralZero => 0,
                PadMode::SelfIndex => i as u32,
            };
            while idx.len() < k {
                idx.push(pad);
                valid.push(false);
            }
            rows.push((idx, valid));
        }
        start = end;
    }
    rows
}

/// Image feature at `(floor(y), floor(x))`, clamped, for each pixel.
pub fn gather_reference(fmap: &ImageFeatureMap, pixels: &[[f64; 2]]) -> Array2<f64> {
    let c = fmap.channels();
    let mut out = Array2::zeros((pixels.len(), c));
    for (m, px) in pixels.iter().enumerate() {
        let mut col = px[0].floor() as i64;
        let mut row = px[1].floor() as i64;
        col = col.clamp(0, fmap.width() as i64 - 1);
        row = row.clamp(0, fmap.height() as i64 - 1);
        for ch in 0..c {
            out[[m, ch]] = fmap.data()[[row as usize, col as usize, ch]];
        }
    }
    out
}

pub struct AttentionReference {
    pub features: Array3<f64>,
    pub weights: Array4<f64>,
}

/// Per-point, per-head attention written as nested loops.
pub fn attention_reference(block: &FusedBlock, params: &AttentionParams, mode: AttentionMode) -> AttentionReference {
    let (n, k, c) = block.data.dim();
    let h = params.heads();
    let d = c / h;
    let mut features = Array3::zeros((n, k, c));
    let mut weights = Array4::zeros((n, h, k, k));
    for i in 0..n {
        let f = &block.data;
        let any_valid = (0..k).any(|l| block.valid[[i, l]]);
        if !any_valid {
            for j in 0..k {
                for ch in 0..c {
                    features[[i, j, ch]] = f[[i, j, ch]];
                }
                for head in 0..h {
                    weights[[i, head, j, j]] = 1.0;
                }
            }
            continue;
        }
        let mut q = vec![vec![0.0; c]; k];
        let mut kk = vec![vec![0.0; c]; k];
        let mut v = vec![vec![0.0; c]; k];
        for j in 0..k {
            for col in 0..c {
                for a in 0..c {
                    q[j][col] += f[[i, j, a]] * params.w_q()[[a, col]];
                    kk[j][col] += f[[i, j, a]] * params.w_k()[[a, col]];
                    v[j][col] += f[[i, j, a]] * params.w_v()[[a, col]];
                }
            }
        }
        for head in 0..h {
            for j in 0..k {
                let mut logits = vec![f64::NEG_INFINITY; k];
                for l in 0..k {
                    if !block.valid[[i, l]] {
                        continue;
                    }
                    let mut s = 0.0;
                    for t in 0..d {
                        s += q[j][head * d + t] * kk[l][head * d + t];
                    }
                    if mode == AttentionMode::Standard {
                        s /= (d as f64).sqrt();
                    }
                    logits[l] = s;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits
                    .iter()
                    .map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() })
                    .collect();
                let total: f64 = exps.iter().sum();
                for l in 0..k {
                    weights[[i, head, j, l]] = exps[l] / total;
                }
                for t in 0..d {
                    let col = head * d + t;
                    let mut acc = 0.0;
                    for l in 0..k {
                        let x = match mode {
                            AttentionMode::Literal => f[[i, l, col]],
                            AttentionMode::Standard => v[l][col],
                        };
                        acc += weights[[i, head, j, l]] * x;
                    }
                    features[[i, j, col]] = acc;
                }
            }
        }
    }
    AttentionReference { features, weights }
}

/// Channelwise max over valid slots; slot 0 when none is valid.
pub fn masked_max_reference(features: &Array3<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let (n, k, c) = features.dim();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut best: Option<f64> = None;
            for j in 0..k {
                if mask[[i, j]] {
                    let v = features[[i, j, ch]];
                    best = Some(match best {
                        Some(b) if b >= v => b,
                        _ => v,
                    });
                }
            }
            out[[i, ch]] = best.unwrap_or(features[[i, 0, ch]]);
        }
    }
    out
}
