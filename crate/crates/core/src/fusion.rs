//! One-to-many fusion of point features with neighbor image features.
//!
//! Each projected point reads its pixel from the image feature map (floor and
//! clamp, no interpolation) and an optional channel adapter maps the image
//! channels onto the point channels. The neighbor graph, reused as-is for the
//! image side, then gathers K image features per point, and the point feature
//! is added to every slot.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::geometry::ProjectedCoords;
use crate::graph::NeighborGraph;

/// Dense image features laid out as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    data: Array3<f64>,
}

impl ImageFeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, channels)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.slice(s![row, col, ..])
    }

    /// Writes `value` at `(row, col)`; callers must keep it finite.
    pub fn set_pixel(&mut self, row: usize, col: usize, value: &[f64]) {
        self.data
            .slice_mut(s![row, col, ..])
            .assign(&ndarray::ArrayView1::from(value));
    }

    /// Row and column addressed by a continuous pixel coordinate.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = (x.floor().max(0.0) as usize).min(self.width() - 1);
        let row = (y.floor().max(0.0) as usize).min(self.height() - 1);
        (row, col)
    }
}

/// Affine map from image channels `C'` to point channels `C`: `f * W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdapter {
    weight: Array2<f64>,
    bias: Array1<f64>,
    identity: bool,
}

impl ChannelAdapter {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::InvalidInput(format!(
                "adapter weight has {} output channels but bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("adapter has non-finite entries".into()));
        }
        let identity = weight.is_square()
            && bias.iter().all(|&b| b == 0.0)
            && weight
                .indexed_iter()
                .all(|((r, c), &v)| v == if r == c { 1.0 } else { 0.0 });
        Ok(Self {
            weight,
            bias,
            identity,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            weight: Array2::eye(channels),
            bias: Array1::zeros(channels),
            identity: true,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }
}

/// Reads the image feature under every projected point and adapts it.
pub fn gather_image_features(
    fmap: &ImageFeatureMap,
    proj: &ProjectedCoords,
    adapter: &ChannelAdapter,
) -> Result<Array2<f64>> {
    if adapter.input_channels() != fmap.channels() {
        return Err(Error::Fusion(format!(
            "adapter expects {} image channels, feature map has {}",
            adapter.input_channels(),
            fmap.channels()
        )));
    }
    let m = proj.len();
    let mut raw = Array2::zeros((m, fmap.channels()));
    for (mut row, &[x, y]) in raw.outer_iter_mut().zip(&proj.pixels) {
        let (r, c) = fmap.cell_of(x, y);
        row.assign(&fmap.pixel(r, c));
    }
    if adapter.is_identity() {
        return Ok(raw);
    }
    let mut out = raw.dot(&adapter.weight);
    out += &adapter.bias;
    Ok(out)
}

/// N x K x C fused features with the slot mask carried from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBlock {
    pub data: Array3<f64>,
    pub valid: Array2<bool>,
}

impl FusedBlock {
    pub fn new(data: Array3<f64>, valid: Array2<bool>) -> Result<Self> {
        let (n, k, _) = data.dim();
        if valid.dim() != (n, k) {
            return Err(Error::Fusion(format!(
                "mask shape {:?} does not match block {:?}",
                valid.dim(),
                data.dim()
            )));
        }
        Ok(Self { data, valid })
    }

    pub fn n(&self) -> usize {
        self.data.dim().0
    }

    pub fn k(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), rows),
            valid: self.valid.select(Axis(0), rows),
        }
    }
}

/// Gathers, for every graph row, the image features of its K neighbors.
///
/// A neighbor that did not survive projection contributes zeros and an invalid
/// slot; a row whose own point did not survive is masked entirely. Returns the
/// `N x K x C` block and mask, with `N` the graph's row count.
pub fn assemble_neighbor_block(
    gathered: &Array2<f64>,
    graph: &NeighborGraph,
    proj: &ProjectedCoords,
) -> Result<(Array3<f64>, Array2<bool>)> {
    if gathered.nrows() != proj.len() {
        return Err(Error::Fusion(format!(
            "{} gathered rows for {} projected points",
            gathered.nrows(),
            proj.len()
        )));
    }
    let n = graph.n();
    let k = graph.k();
    let c = gathered.ncols();
    if let Some(&bad) = proj.source_index.iter().find(|&&s| s >= n) {
        return Err(Error::Fusion(format!(
            "projection row refers to point {bad}, graph has {n} rows"
        )));
    }
    let lookup = proj.row_lookup(n);
    let mut block = Array3::zeros((n, k, c));
    let mut mask = Array2::from_elem((n, k), false);
    Zip::indexed(block.outer_iter_mut())
        .and(mask.outer_iter_mut())
        .par_for_each(|i, mut slots, mut ok| {
            if lookup[i].is_none() {
                return;
            }
            for (j, (&nb, &nb_valid)) in graph.row(i).iter().zip(graph.valid_row(i)).enumerate() {
                if !nb_valid {
                    continue;
                }
                if let Some(row) = lookup[nb as usize] {
                    slots.row_mut(j).assign(&gathered.row(row));
                    ok[j] = true;
                }
            }
        });
    Ok((block, mask))
}

/// Adds each point feature to all K of its slots; invalid slots carry the
/// point feature alone.
pub fn fuse(point_features: ArrayView2<'_, f64>, neighbor_block: &Array3<f64>, mask: &Array2<bool>) -> Result<FusedBlock> {
    let (n, k, c) = neighbor_block.dim();
    if point_features.dim() != (n, c) || mask.dim() != (n, k) {
        return Err(Error::Fusion(format!(
            "shape mismatch: point features {:?}, block {:?}, mask {:?}",
            point_features.dim(),
            neighbor_block.dim(),
            mask.dim()
        )));
    }
    let mut data = Array3::zeros((n, k, c));
    Zip::from(data.outer_iter_mut())
        .and(neighbor_block.outer_iter())
        .and(mask.outer_iter())
        .and(point_features.outer_iter())
        .par_for_each(|mut out, nb, ok, p| {
            for j in 0..k {
                let mut slot = out.row_mut(j);
                if ok[j] {
                    Zip::from(&mut slot).and(&p).and(&nb.row(j)).for_each(|o, &a, &b| *o = a + b);
                } else {
                    slot.assign(&p);
                }
            }
        });
    FusedBlock::new(data, mask.clone())
}
