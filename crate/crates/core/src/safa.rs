//! Self-attention over the K fused neighbor slots of each point, followed by a
//! channelwise max over the slots.
//!
//! For one point the `K x C` slice `F` is projected to `Q = F Wq` and
//! `Kt = F Wk`, split into `H` heads of width `C / H`, and each head computes
//! the `K x K` map `softmax(Q Kt^T)`. In [`AttentionMode::Literal`] the map
//! is applied to `F` itself with no logit scaling; [`AttentionMode::Standard`]
//! scales logits by `1 / sqrt(C / H)` and applies the map to `V = F Wv`.
//! Invalid slots get `-inf` logits and therefore zero weight.

use ndarray::{Array2, Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::FusedBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Unscaled logits, attention applied to the fused slice.
    #[default]
    Literal,
    /// Scaled logits, attention applied to the value projection.
    Standard,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Literal => "literal",
            AttentionMode::Standard => "standard",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AttentionMode::Literal),
            "standard" => Ok(AttentionMode::Standard),
            other => Err(Error::InvalidInput(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Query, key and value projections (`C x C` each) and the head count.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    heads: usize,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
}

impl AttentionParams {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>, heads: usize) -> Result<Self> {
        let c = w_q.nrows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.dim() != (c, c) {
                return Err(Error::Attention(format!("{name} is {:?}, expected {c}x{c}", w.dim())));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Attention(format!("{name} has non-finite entries")));
            }
        }
        check_heads(c, heads)?;
        let standard = |w: Array2<f64>| w.as_standard_layout().into_owned();
        Ok(Self {
            heads,
            w_q: standard(w_q),
            w_k: standard(w_k),
            w_v: standard(w_v),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn w_q(&self) -> &Array2<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<f64> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Array2<f64> {
        &self.w_v
    }

    /// `w_q`, `w_k`, `w_v` concatenated row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w_q
            .iter()
            .chain(self.w_k.iter())
            .chain(self.w_v.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(channels: usize, heads: usize, flat: &[f64]) -> Result<Self> {
        let cc = channels * channels;
        if flat.len() != 3 * cc {
            return Err(Error::Attention(format!(
                "expected {} parameters for C={channels}, got {}",
                3 * cc,
                flat.len()
            )));
        }
        let mat = |part: &[f64]| Array2::from_shape_vec((channels, channels), part.to_vec()).expect("square");
        Self::new(
            mat(&flat[..cc]),
            mat(&flat[cc..2 * cc]),
            mat(&flat[2 * cc..]),
            heads,
        )
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if channels == 0 || heads == 0 || channels % heads != 0 {
        return Err(Error::InvalidInput(format!(
            "head count {heads} must divide channel count {channels}"
        )));
    }
    Ok(())
}

/// Seeded uniform init in `[-1/sqrt(C), 1/sqrt(C)]`.
pub fn init_params(channels: usize, heads: usize, seed: u64) -> Result<AttentionParams> {
    check_heads(channels, heads)?;
    let bound = 1.0 / (channels as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Array2::from_shape_simple_fn((channels, channels), || rng.random_range(-bound..=bound));
    let w_q = draw();
    let w_k = draw();
    let w_v = draw();
    AttentionParams::new(w_q, w_k, w_v, heads)
}

/// Multiply-accumulate tallies recorded by the attention kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Slice-by-weight projections (`K C^2` per projected matrix).
    pub projection: u64,
    /// Query-key products, `K^2 C` per point.
    pub scores: u64,
    /// Attention map applied to the slot values, `K^2 C` per point.
    pub aggregation: u64,
}

impl MacCount {
    /// The attention-map cost, `N K^2 C`.
    pub fn attention(&self) -> u64 {
        self.scores
    }

    pub fn total(&self) -> u64 {
        self.projection + self.scores + self.aggregation
    }
}

impl std::ops::Add for MacCount {
    type Output = MacCount;

    fn add(self, rhs: Self) -> Self {
        MacCount {
            projection: self.projection + rhs.projection,
            scores: self.scores + rhs.scores,
            aggregation: self.aggregation + rhs.aggregation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `N x K x C` attended features.
    pub features: Array3<f64>,
    /// `N x H x K x K` attention maps, when retained.
    pub weights: Option<Array4<f64>>,
    /// Rows with no valid slot, passed through unchanged.
    pub bypassed_rows: usize,
    pub macs: MacCount,
}

struct Scratch {
    q: Vec<f64>,
    kt: Vec<f64>,
    v: Vec<f64>,
    weights: Vec<f64>,
}

impl Scratch {
    fn new(k: usize, c: usize, heads: usize) -> Self {
        Self {
            q: vec![0.0; k * c],
            kt: vec![0.0; k * c],
            v: vec![0.0; k * c],
            weights: vec![0.0; heads * k * k],
        }
    }
}

/// `out = x * w` for a row-major `rows x c` slice and `c x c` weight.
fn project_slice(x: &[f64], w: &[f64], c: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        or.fill(0.0);
        for (a, &xa) in xr.iter().enumerate() {
            let wr = &w[a * c..(a + 1) * c];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xa * wv;
            }
        }
    }
}

/// Attention for one point. `weights` receives `H x K x K`.
#[allow(clippy::too_many_arguments)]
fn attend_point(
    slice: &[f64],
    valid: &[bool],
    params: &AttentionParams,
    mode: AttentionMode,
    k: usize,
    c: usize,
    scratch: &mut Scratch,
    out: &mut [f64],
    weights: &mut [f64],
) -> MacCount {
    let h = params.heads;
    let d = c / h;
    if !valid.iter().any(|&v| v) {
        out.copy_from_slice(slice);
        weights.fill(0.0);
        for head in 0..h {
            for j in 0..k {
                weights[head * k * k + j * k + j] = 1.0;
            }
        }
        return MacCount::default();
    }

    let w_q = params.w_q.as_slice().expect("standard layout");
    let w_k = params.w_k.as_slice().expect("standard layout");
    project_slice(slice, w_q, c, &mut scratch.q);
    project_slice(slice, w_k, c, &mut scratch.kt);
    let mut projected = 2;
    let values: &[f64] = match mode {
        AttentionMode::Literal => slice,
        AttentionMode::Standard => {
            project_slice(slice, params.w_v.as_slice().expect("standard layout"), c, &mut scratch.v);
            projected += 1;
            &scratch.v
        }
    };
    let scale = match mode {
        AttentionMode::Literal => 1.0,
        AttentionMode::Standard => 1.0 / (d as f64).sqrt(),
    };

    out.fill(0.0);
    for head in 0..h {
        let cols = head * d..(head + 1) * d;
        for j in 0..k {
            let row = &mut weights[head * k * k + j * k..head * k * k + (j + 1) * k];
            let qj = &scratch.q[j * c + cols.start..j * c + cols.end];
            let mut max = f64::NEG_INFINITY;
            for (l, w) in row.iter_mut().enumerate() {
                if !valid[l] {
                    *w = f64::NEG_INFINITY;
                    continue;
                }
                let kl = &scratch.kt[l * c + cols.start..l * c + cols.end];
                let dot: f64 = qj.iter().zip(kl).map(|(a, b)| a * b).sum();
                *w = dot * scale;
                max = max.max(*w);
            }
            let mut sum = 0.0;
            for w in row.iter_mut() {
                *w = if *w == f64::NEG_INFINITY { 0.0 } else { (*w - max).exp() };
                sum += *w;
            }
            for w in row.iter_mut() {
                *w /= sum;
            }
            let oj = &mut out[j * c + cols.start..j * c + cols.end];
            for (l, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let xl = &values[l * c + cols.start..l * c + cols.end];
                for (o, &x) in oj.iter_mut().zip(xl) {
                    *o += w * x;
                }
            }
        }
    }
    let (k, c) = (k as u64, c as u64);
    MacCount {
        projection: projected * k * c * c,
        scores: k * k * c,
        aggregation: k * k * c,
    }
}

fn run_attention(block: &FusedBlock, params: &AttentionParams, mode: AttentionMode, keep_weights: bool) -> Result<AttentionOutput> {
    let (n, k, c) = block.data.dim();
    if c != params.channels() {
        return Err(Error::Attention(format!(
            "block has {c} channels, parameters expect {}",
            params.channels()
        )));
    }
    if k == 0 {
        return Err(Error::Attention("block has no neighbor slots".into()));
    }
    let h = params.heads;
    let data = block.data.as_standard_layout();
    let data = data.as_slice().expect("standard layout");
    let valid = block.valid.as_standard_layout();
    let valid = valid.as_slice().expect("standard layout");

    let mut features = vec![0.0; n * k * c];
    let mut weights = if keep_weights { vec![0.0; n * h * k * k] } else { Vec::new() };
    let make_scratch = || Scratch::new(k, c, h);
    let macs = if keep_weights {
        features
            .par_chunks_mut(k * c)
            .zip(weights.par_chunks_mut(h * k * k))
            .enumerate()
            .map_init(make_scratch, |scratch, (i, (out, w))| {
                attend_point(&data[i * k * c..(i + 1) * k * c], &valid[i * k..(i + 1) * k], params, mode, k, c, scratch, out, w)
            })
            .reduce(MacCount::default, |a, b| a + b)
    } else {
        features
            .par_chunks_mut(k * c)
            .enumerate()
            .map_init(make_scratch, |scratch, (i, out)| {
                let mut w = std::mem::take(&mut scratch.weights);
                let m = attend_point(&data[i * k * c..(i + 1) * k * c], &valid[i * k..(i + 1) * k], params, mode, k, c, scratch, out, &mut w);
                scratch.weights = w;
                m
            })
            .reduce(MacCount::default, |a, b| a + b)
    };
    let bypassed_rows = block
        .valid
        .outer_iter()
        .filter(|row| !row.iter().any(|&v| v))
        .count();
    Ok(AttentionOutput {
        features: Array3::from_shape_vec((n, k, c), features).expect("shape"),
        weights: keep_weights.then(|| Array4::from_shape_vec((n, h, k, k), weights).expect("shape")),
        bypassed_rows,
        macs,
    })
}

/// Runs attention over every point and keeps the attention maps.
pub fn self_attention(block: &FusedBlock, params: &AttentionParams, mode: AttentionMode) -> Result<AttentionOutput> {
    run_attention(block, params, mode, true)
}

/// As [`self_attention`] without retaining the `N x H x K x K` maps.
pub fn self_attention_features(block: &FusedBlock, params: &AttentionParams, mode: AttentionMode) -> Result<AttentionOutput> {
    run_attention(block, params, mode, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxSelection {
    /// `N x C` channelwise max over valid slots.
    pub features: Array2<f64>,
    /// Rows without any valid slot; these take slot 0.
    pub empty_rows: usize,
}

/// Channelwise max over the valid slots of each row.
pub fn max_select(features: ArrayView3<'_, f64>, mask: &Array2<bool>) -> Result<MaxSelection> {
    let (n, k, c) = features.dim();
    if mask.dim() != (n, k) {
        return Err(Error::Attention(format!(
            "mask {:?} does not match features {:?}",
            mask.dim(),
            features.dim()
        )));
    }
    let mut out = Array2::from_elem((n, c), f64::NEG_INFINITY);
    let mut empty_rows = 0;
    for ((mut o, slots), ok) in out.outer_iter_mut().zip(features.outer_iter()).zip(mask.outer_iter()) {
        if !ok.iter().any(|&v| v) {
            o.assign(&slots.row(0));
            empty_rows += 1;
            continue;
        }
        for (slot, _) in slots.outer_iter().zip(ok.iter()).filter(|(_, &v)| v) {
            o.zip_mut_with(&slot, |a, &b| {
                if b > *a {
                    *a = b
                }
            });
        }
    }
    Ok(MaxSelection {
        features: out,
        empty_rows,
    })
}

/// One training instance: fused slots, the point features they were built
/// from, and the image feature each point should end up with.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTask {
    pub block: FusedBlock,
    pub point_features: Array2<f64>,
    pub targets: Array2<f64>,
}

impl SelectionTask {
    pub fn new(block: FusedBlock, point_features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        let dims = (block.n(), block.channels());
        if point_features.dim() != dims || targets.dim() != dims {
            return Err(Error::InvalidInput(format!(
                "task shapes disagree: block {:?}, points {:?}, targets {:?}",
                block.data.dim(),
                point_features.dim(),
                targets.dim()
            )));
        }
        Ok(Self {
            block,
            point_features: point_features.as_standard_layout().into_owned(),
            targets: targets.as_standard_layout().into_owned(),
        })
    }

    /// A seeded toy selection problem. Each point carries a noisy cue of its
    /// class in its own feature; exactly one of its K slots holds the matching
    /// image embedding and the others hold zeros or other classes.
    pub fn toy(n: usize, k: usize, channels: usize, seed: u64) -> Result<Self> {
        let classes = (channels / 2).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Array2::zeros((n, channels));
        let mut targets = Array2::zeros((n, channels));
        let mut image = Array3::zeros((n, k, channels));
        for i in 0..n {
            let class = rng.random_range(0..classes);
            for ch in 0..channels {
                points[[i, ch]] = rng.random_range(-0.1..0.1);
            }
            points[[i, class]] += 1.0;
            targets[[i, class]] = 1.0;
            let correct = rng.random_range(0..k);
            for j in 0..k {
                if j == correct {
                    image[[i, j, class]] = 1.0;
                } else if rng.random_bool(0.6) && classes > 1 {
                    let other = (class + rng.random_range(1..classes)) % classes;
                    image[[i, j, other]] = 1.0;
                }
            }
        }
        let mask = Array2::from_elem((n, k), true);
        let block = crate::fusion::fuse(points.view(), &image, &mask)?;
        Self::new(block, points, targets)
    }

    fn sum_squared_error(&self, params: &AttentionParams, mode: AttentionMode) -> Result<f64> {
        let att = self_attention_features(&self.block, params, mode)?;
        let selected = max_select(att.features.view(), &self.block.valid)?;
        let contribution = selected.features - &self.point_features;
        Ok((contribution - &self.targets).iter().map(|e| e * e).sum())
    }
}

/// Mean squared error between the selected image contribution (max-selected
/// output minus the point feature) and the target, over all rows of all tasks.
pub fn selection_loss(tasks: &[SelectionTask], params: &AttentionParams, mode: AttentionMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for task in tasks {
        total += task.sum_squared_error(params, mode)?;
        count += task.targets.len();
    }
    if count == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    Ok(total / count as f64)
}

/// Squared error of one row and its gradient, accumulated into `grad`
/// (flat layout of [`AttentionParams::to_flat`], unnormalized).
#[allow(clippy::too_many_arguments)]
fn row_backward(
    x: &[f64],
    valid: &[bool],
    point: &[f64],
    target: &[f64],
    params: &AttentionParams,
    mode: AttentionMode,
    k: usize,
    grad: &mut [f64],
) -> f64 {
    let c = params.channels();
    let h = params.heads;
    let d = c / h;
    if !valid.iter().any(|&v| v) {
        // bypassed rows do not depend on the parameters
        return (0..c).map(|ch| (x[ch] - point[ch] - target[ch]).powi(2)).sum();
    }
    let w_q = params.w_q.as_slice().expect("standard layout");
    let w_k = params.w_k.as_slice().expect("standard layout");
    let w_v = params.w_v.as_slice().expect("standard layout");
    let mut q = vec![0.0; k * c];
    let mut kt = vec![0.0; k * c];
    project_slice(x, w_q, c, &mut q);
    project_slice(x, w_k, c, &mut kt);
    let v: Vec<f64> = match mode {
        AttentionMode::Literal => x.to_vec(),
        AttentionMode::Standard => {
            let mut v = vec![0.0; k * c];
            project_slice(x, w_v, c, &mut v);
            v
        }
    };
    let scale = match mode {
        AttentionMode::Literal => 1.0,
        AttentionMode::Standard => 1.0 / (d as f64).sqrt(),
    };

    let mut att = vec![0.0; h * k * k];
    let mut out = vec![0.0; k * c];
    for head in 0..h {
        let cols = head * d..(head + 1) * d;
        for j in 0..k {
            let row = &mut att[head * k * k + j * k..head * k * k + (j + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for l in 0..k {
                if valid[l] {
                    let dot: f64 = cols.clone().map(|col| q[j * c + col] * kt[l * c + col]).sum();
                    row[l] = dot * scale;
                    max = max.max(row[l]);
                }
            }
            let mut sum = 0.0;
            for l in 0..k {
                row[l] = if valid[l] { (row[l] - max).exp() } else { 0.0 };
                sum += row[l];
            }
            for l in 0..k {
                row[l] /= sum;
                if row[l] != 0.0 {
                    for col in cols.clone() {
                        out[j * c + col] += row[l] * v[l * c + col];
                    }
                }
            }
        }
    }

    // channelwise max over valid slots, first maximum wins
    let mut d_out = vec![0.0; k * c];
    let mut sse = 0.0;
    for ch in 0..c {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for j in (0..k).filter(|&j| valid[j]) {
            if out[j * c + ch] > best {
                best = out[j * c + ch];
                arg = j;
            }
        }
        let e = best - point[ch] - target[ch];
        sse += e * e;
        d_out[arg * c + ch] = 2.0 * e;
    }

    let mut dq = vec![0.0; k * c];
    let mut dk = vec![0.0; k * c];
    let mut dv = vec![0.0; k * c];
    let mut d_att = vec![0.0; k];
    for head in 0..h {
        let cols = head * d..(head + 1) * d;
        for j in 0..k {
            let a = &att[head * k * k + j * k..head * k * k + (j + 1) * k];
            let g = &d_out[j * c + cols.start..j * c + cols.end];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let mut weighted = 0.0;
            for l in 0..k {
                d_att[l] = g.iter().zip(&v[l * c + cols.start..l * c + cols.end]).map(|(a, b)| a * b).sum();
                weighted += a[l] * d_att[l];
                if mode == AttentionMode::Standard {
                    for (t, col) in cols.clone().enumerate() {
                        dv[l * c + col] += a[l] * g[t];
                    }
                }
            }
            for l in 0..k {
                let ds = a[l] * (d_att[l] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for col in cols.clone() {
                    dq[j * c + col] += ds * kt[l * c + col];
                    dk[l * c + col] += ds * q[j * c + col];
                }
            }
        }
    }

    let cc = c * c;
    let mut accumulate = |offset: usize, dy: &[f64]| {
        for j in 0..k {
            for a in 0..c {
                let xa = x[j * c + a];
                if xa == 0.0 {
                    continue;
                }
                let g = &mut grad[offset + a * c..offset + (a + 1) * c];
                for (gv, &dyv) in g.iter_mut().zip(&dy[j * c..(j + 1) * c]) {
                    *gv += xa * dyv;
                }
            }
        }
    };
    accumulate(0, &dq);
    accumulate(cc, &dk);
    if mode == AttentionMode::Standard {
        accumulate(2 * cc, &dv);
    }
    sse
}

/// [`selection_loss`] and its exact gradient by backpropagation through the
/// max selection, softmax and projections. At ties in the max the gradient
/// follows the first maximal slot.
pub fn selection_loss_gradient(tasks: &[SelectionTask], params: &AttentionParams, mode: AttentionMode) -> Result<(f64, Vec<f64>)> {
    let c = params.channels();
    let mut count = 0usize;
    let mut total = 0.0;
    let mut grad = vec![0.0; 3 * c * c];
    for task in tasks {
        let (n, k, tc) = task.block.data.dim();
        if tc != c {
            return Err(Error::Attention(format!("block has {tc} channels, parameters expect {c}")));
        }
        let data = task.block.data.as_standard_layout();
        let data = data.as_slice().expect("standard layout");
        let valid = task.block.valid.as_standard_layout();
        let valid = valid.as_slice().expect("standard layout");
        // fixed row blocks summed in order keep the result independent of the worker count
        const BLOCK: usize = 32;
        let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut g = vec![0.0; 3 * c * c];
                let mut sse = 0.0;
                for i in b * BLOCK..usize::min((b + 1) * BLOCK, n) {
                    sse += row_backward(
                        &data[i * k * c..(i + 1) * k * c],
                        &valid[i * k..(i + 1) * k],
                        task.point_features.row(i).as_slice().expect("contiguous row"),
                        task.targets.row(i).as_slice().expect("contiguous row"),
                        params,
                        mode,
                        k,
                        &mut g,
                    );
                }
                (sse, g)
            })
            .collect();
        let mut sse = 0.0;
        let mut g = vec![0.0; 3 * c * c];
        for (e, pg) in partials {
            sse += e;
            g.iter_mut().zip(&pg).for_each(|(x, y)| *x += y);
        }
        total += sse;
        grad.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
        count += n * c;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    let norm = count as f64;
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((total / norm, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMethod {
    #[default]
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub mode: AttentionMode,
    pub gradient: GradientMethod,
    /// Central-difference half step.
    pub fd_step: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            mode: AttentionMode::Literal,
            gradient: GradientMethod::FiniteDifference,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: AttentionParams,
    /// Loss before each step, followed by the loss after the last one.
    pub losses: Vec<f64>,
}

/// Central finite-difference gradient of [`selection_loss`] over every
/// parameter entry. Literal mode never reads `w_v`, so those entries get an
/// exact zero without probing.
pub fn finite_difference_gradient(
    tasks: &[SelectionTask],
    params: &AttentionParams,
    mode: AttentionMode,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let c = params.channels();
    let h = params.heads();
    let flat = params.to_flat();
    let probed = match mode {
        AttentionMode::Literal => 2 * c * c,
        AttentionMode::Standard => 3 * c * c,
    };
    let mut grad: Vec<f64> = (0..probed)
        .into_par_iter()
        .map(|p| {
            let mut probe = flat.clone();
            probe[p] = flat[p] + fd_step;
            let plus = selection_loss(tasks, &AttentionParams::from_flat(c, h, &probe)?, mode)?;
            probe[p] = flat[p] - fd_step;
            let minus = selection_loss(tasks, &AttentionParams::from_flat(c, h, &probe)?, mode)?;
            Ok((plus - minus) / (2.0 * fd_step))
        })
        .collect::<Result<_>>()?;
    grad.resize(flat.len(), 0.0);
    Ok(grad)
}

/// Plain gradient descent on [`selection_loss`].
pub fn train_selector(tasks: &[SelectionTask], params: &AttentionParams, config: &TrainerConfig) -> Result<TrainingOutcome> {
    if !(config.fd_step > 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::InvalidInput("trainer needs a positive fd_step and finite learning rate".into()));
    }
    let c = params.channels();
    let h = params.heads();
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(config.steps + 1);
    let check = |loss: f64, step: usize| {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Training(format!("loss became {loss} at step {step}")))
        }
    };
    for step in 0..config.steps {
        losses.push(check(selection_loss(tasks, &current, config.mode)?, step)?);
        if config.learning_rate == 0.0 {
            continue;
        }
        let grad = match config.gradient {
            GradientMethod::FiniteDifference => finite_difference_gradient(tasks, &current, config.mode, config.fd_step)?,
            GradientMethod::Analytic => selection_loss_gradient(tasks, &current, config.mode)?.1,
        };
        let mut flat = current.to_flat();
        for (w, g) in flat.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
        current = AttentionParams::from_flat(c, h, &flat).map_err(|e| Error::Training(format!("step {step}: {e}")))?;
    }
    losses.push(check(selection_loss(tasks, &current, config.mode)?, config.steps)?);
    Ok(TrainingOutcome {
        params: current,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::{s, Axis};

    fn random_block(n: usize, k: usize, c: usize, seed: u64, mask_rate: f64) -> FusedBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((n, k, c), || rng.random_range(-1.0..1.0));
        let valid = Array2::from_shape_simple_fn((n, k), || !rng.random_bool(mask_rate));
        FusedBlock::new(data, valid).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_mean() {
        let block = random_block(3, 4, 4, 1, 0.0);
        let params = AttentionParams::new(Array2::zeros((4, 4)), Array2::zeros((4, 4)), Array2::eye(4), 1).unwrap();
        let out = self_attention(&block, &params, AttentionMode::Literal).unwrap();
        let w = out.weights.as_ref().unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for i in 0..3 {
            let mean = block.data.slice(s![i, .., ..]).mean_axis(Axis(0)).unwrap();
            for j in 0..4 {
                for ch in 0..4 {
                    assert!((out.features[[i, j, ch]] - mean[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn singleton_slot_is_identity() {
        let block = random_block(5, 1, 4, 2, 0.0);
        let params = init_params(4, 2, 3).unwrap();
        let out = self_attention(&block, &params, AttentionMode::Literal).unwrap();
        assert!(out.weights.unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(out.features, block.data);
    }

    #[test]
    fn matches_loop_reference() {
        for mode in [AttentionMode::Literal, AttentionMode::Standard] {
            for seed in 0..10 {
                let block = random_block(4, 3, 4, seed, 0.3);
                let params = init_params(4, 2, seed + 100).unwrap();
                let out = self_attention(&block, &params, mode).unwrap();
                let reference = oracle::attention_reference(&block, &params, mode);
                for (a, b) in out.features.iter().zip(reference.features.iter()) {
                    assert!((a - b).abs() < 1e-9, "{mode:?} seed {seed}");
                }
                for (a, b) in out.weights.unwrap().iter().zip(reference.weights.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn masked_columns_have_zero_weight() {
        let block = random_block(30, 6, 4, 5, 0.4);
        let out = self_attention(&block, &init_params(4, 2, 1).unwrap(), AttentionMode::Literal).unwrap();
        let w = out.weights.unwrap();
        for i in 0..30 {
            let valid = block.valid.row(i);
            if !valid.iter().any(|&v| v) {
                continue;
            }
            for head in 0..2 {
                for j in 0..6 {
                    let row = w.slice(s![i, head, j, ..]);
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    for l in 0..6 {
                        assert!(row[l] >= 0.0);
                        if !valid[l] {
                            assert_eq!(row[l], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_invalid_row_bypasses() {
        let mut block = random_block(2, 3, 2, 8, 0.0);
        block.valid.row_mut(1).fill(false);
        let out = self_attention(&block, &init_params(2, 1, 0).unwrap(), AttentionMode::Standard).unwrap();
        assert_eq!(out.bypassed_rows, 1);
        assert_eq!(out.features.slice(s![1, .., ..]), block.data.slice(s![1, .., ..]));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let block = random_block(2, 3, 4, 8, 0.0);
        assert!(self_attention(&block, &init_params(2, 1, 0).unwrap(), AttentionMode::Literal).is_err());
    }

    #[test]
    fn mac_counter_matches_formula() {
        let block = random_block(7, 5, 6, 1, 0.0);
        let params = init_params(6, 3, 1).unwrap();
        let lit = self_attention_features(&block, &params, AttentionMode::Literal).unwrap();
        assert_eq!(lit.macs.attention(), 7 * 25 * 6);
        assert_eq!(lit.macs.aggregation, 7 * 25 * 6);
        assert_eq!(lit.macs.projection, 2 * 7 * 5 * 36);
        let std = self_attention_features(&block, &params, AttentionMode::Standard).unwrap();
        assert_eq!(std.macs.projection, 3 * 7 * 5 * 36);
        assert_eq!(std.features, self_attention(&block, &params, AttentionMode::Standard).unwrap().features);
    }

    #[test]
    fn max_select_examples() {
        let block = random_block(3, 1, 4, 2, 0.0);
        let sel = max_select(block.data.view(), &block.valid).unwrap();
        assert_eq!(sel.features, block.data.index_axis(Axis(1), 0));

        let k = 5;
        let data = Array3::from_shape_fn((2, k, 3), |(_, j, _)| j as f64);
        let sel = max_select(data.view(), &Array2::from_elem((2, k), true)).unwrap();
        assert!(sel.features.iter().all(|&v| v == (k - 1) as f64));

        let mut mask = Array2::from_elem((2, k), true);
        mask.row_mut(0).fill(false);
        mask[[1, 4]] = false;
        let sel = max_select(data.view(), &mask).unwrap();
        assert_eq!(sel.empty_rows, 1);
        assert!(sel.features.row(0).iter().all(|&v| v == 0.0));
        assert!(sel.features.row(1).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn max_select_matches_oracle() {
        let block = random_block(50, 8, 16, 4, 0.3);
        let sel = max_select(block.data.view(), &block.valid).unwrap();
        assert_eq!(sel.features, oracle::masked_max_reference(&block.data, &block.valid));
    }

    #[test]
    fn init_params_contract() {
        assert_eq!(init_params(16, 1, 42).unwrap(), init_params(16, 1, 42).unwrap());
        assert_ne!(init_params(16, 1, 42).unwrap(), init_params(16, 1, 43).unwrap());
        assert!(init_params(16, 1, 42).unwrap().to_flat().iter().all(|v| v.abs() <= 0.25));
        assert!(init_params(12, 5, 0).is_err());

        let samples: Vec<f64> = (0..14).flat_map(|s| init_params(16, 4, s).unwrap().to_flat()).take(10_000).collect();
        assert_eq!(samples.len(), 10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        // uniform on [-b, b] has sd b / sqrt(3)
        let se = 0.25 / 3f64.sqrt() / (samples.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(6, 2, 9).unwrap();
        assert_eq!(AttentionParams::from_flat(6, 2, &p.to_flat()).unwrap(), p);
        assert!(AttentionParams::from_flat(6, 2, &[0.0; 5]).is_err());
    }

    #[test]
    fn null_updates() {
        let task = SelectionTask::toy(16, 4, 4, 1).unwrap();
        let params = init_params(4, 1, 2).unwrap();
        let cfg = TrainerConfig {
            steps: 5,
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = train_selector(std::slice::from_ref(&task), &params, &cfg).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.losses.len(), 6);
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]));

        let cfg = TrainerConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train_selector(std::slice::from_ref(&task), &params, &cfg).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn toy_training_reduces_loss() {
        let task = SelectionTask::toy(64, 8, 8, 11).unwrap();
        let params = init_params(8, 1, 12).unwrap();
        let cfg = TrainerConfig {
            steps: 200,
            ..Default::default()
        };
        let out = train_selector(std::slice::from_ref(&task), &params, &cfg).unwrap();
        let first = out.losses[0];
        let last = *out.losses.last().unwrap();
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn divergence_is_reported() {
        let task = SelectionTask::toy(8, 4, 4, 1).unwrap();
        let params = init_params(4, 1, 2).unwrap();
        let cfg = TrainerConfig {
            steps: 50,
            learning_rate: 1e200,
            ..Default::default()
        };
        assert!(matches!(train_selector(&[task], &params, &cfg), Err(Error::Training(_))));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..6 {
            for mode in [AttentionMode::Literal, AttentionMode::Standard] {
                let block = random_block(6, 4, 4, seed, 0.3);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let points = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
                let targets = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
                let task = SelectionTask::new(block, points, targets).unwrap();
                let params = init_params(4, 2, seed).unwrap();
                let tasks = std::slice::from_ref(&task);
                let (loss, analytic) = selection_loss_gradient(tasks, &params, mode).unwrap();
                assert!((loss - selection_loss(tasks, &params, mode).unwrap()).abs() < 1e-12);
                let numeric = finite_difference_gradient(tasks, &params, mode, 1e-6).unwrap();
                let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
                assert!(diff <= 1e-4 * norm.max(1e-12), "seed {seed} {mode:?}: {diff} vs {norm}");
            }
        }
    }
}
