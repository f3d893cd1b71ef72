//! Calibration rig, inverse augmentation and LiDAR-to-image projection.
//!
//! A point `p` in the LiDAR frame maps to the camera frame as `R p + T`, then
//! through the intrinsics `K`. The rig's down-sampling factor `h` scales the
//! resulting pixel coordinates so that they address the (smaller) feature map
//! rather than the raw image; depth stays in meters.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Orthonormality tolerance for rigs built in memory.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Orthonormality tolerance for rigs read from calibration files, which are
/// commonly written with a handful of decimals.
pub const FILE_ROTATION_TOLERANCE: f64 = 1e-6;

/// Intrinsics, LiDAR-to-camera extrinsics and feature-map scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRig {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
    image_width: u32,
    image_height: u32,
}

impl CalibrationRig {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        scale: f64,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        Self::with_tolerance(
            intrinsics,
            rotation,
            translation,
            scale,
            image_width,
            image_height,
            ROTATION_TOLERANCE,
        )
    }

    /// Like [`CalibrationRig::new`] with a caller-chosen orthonormality tolerance.
    pub fn with_tolerance(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        scale: f64,
        image_width: u32,
        image_height: u32,
        tolerance: f64,
    ) -> Result<Self> {
        let finite = intrinsics.iter().all(|v| v.is_finite())
            && rotation.iter().all(|v| v.is_finite())
            && translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Calibration("non-finite entry".into()));
        }
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(Error::Calibration(
                "focal lengths must be positive".into(),
            ));
        }
        if intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 || intrinsics[(2, 2)] != 1.0 {
            return Err(Error::Calibration(
                "intrinsics bottom row must be [0, 0, 1]".into(),
            ));
        }
        check_rotation(&rotation, tolerance)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Calibration(format!("scale must be positive, got {scale}")));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::Calibration("image dimensions must be positive".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            scale,
            image_width,
            image_height,
        })
    }

    /// A pinhole rig with focal length `f`, principal point `(cx, cy)`.
    pub fn pinhole(
        focal: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation, 1.0, image_width, image_height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    /// Same rig with different extrinsics; the rotation must satisfy the
    /// in-memory tolerance.
    pub fn with_extrinsics(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::new(
            self.intrinsics,
            rotation,
            translation,
            self.scale,
            self.image_width,
            self.image_height,
        )
    }

    /// The composed 3x4 matrix `diag(h, h, 1) K [R | T]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut extrinsic = Matrix3x4::zeros();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        let scale = Matrix3::from_diagonal(&Vector3::new(self.scale, self.scale, 1.0));
        scale * self.intrinsics * extrinsic
    }

    /// Projects one point, returning `(u, v, z_c)` without any bounds check.
    pub fn project_point(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let cam = self.rotation * Vector3::from(p) + self.translation;
        let img = self.intrinsics * cam;
        let depth = img.z;
        (
            self.scale * img.x / depth,
            self.scale * img.y / depth,
            depth,
        )
    }

    /// Whether `(x, y)` passes the closed-interval correction rule.
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        (0.0..=self.image_width as f64).contains(&x) && (0.0..=self.image_height as f64).contains(&y)
    }
}

fn check_rotation(rotation: &Matrix3<f64>, tolerance: f64) -> Result<()> {
    let gram = rotation.transpose() * rotation;
    let off = (gram - Matrix3::identity()).abs().max();
    if off > tolerance {
        return Err(Error::Calibration(format!(
            "rotation is not orthonormal (max |R^T R - I| = {off:e})"
        )));
    }
    let det = rotation.determinant();
    if (det - 1.0).abs() > tolerance {
        return Err(Error::Calibration(format!(
            "rotation determinant is {det}, expected +1"
        )));
    }
    Ok(())
}

/// LiDAR point coordinates with per-point features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    coords: Vec<[f64; 3]>,
    features: Array2<f64>,
    labels: Vec<i32>,
}

impl PointSet {
    pub fn new(coords: Vec<[f64; 3]>, features: Array2<f64>, labels: Vec<i32>) -> Result<Self> {
        if coords.len() != features.nrows() || coords.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "point set rows disagree: {} coords, {} feature rows, {} labels",
                coords.len(),
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite coordinate at point {i}")));
        }
        Ok(Self {
            coords,
            features,
            labels,
        })
    }

    /// Points with zero-width features and no labels.
    pub fn from_coords(coords: Vec<[f64; 3]>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, Array2::zeros((n, 0)), vec![-1; n])
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    /// Same points with coordinates replaced. Features and labels are kept.
    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(coords, self.features.clone(), self.labels.clone())
    }

    /// Reorders points: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let features = self.features.select(ndarray::Axis(0), order);
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Self {
            coords,
            features,
            labels,
        }
    }
}

/// Global point-cloud augmentations applied during training, in the order
/// flip (y -> -y), yaw rotation about z, uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationRecord {
    pub flipped_y: bool,
    pub yaw: f64,
    pub scale_factor: f64,
}

impl Default for AugmentationRecord {
    fn default() -> Self {
        Self {
            flipped_y: false,
            yaw: 0.0,
            scale_factor: 1.0,
        }
    }
}

impl AugmentationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "augmentation scale must be positive, got {}",
                self.scale_factor
            )));
        }
        let pi = std::f64::consts::PI;
        if !(self.yaw > -pi && self.yaw <= pi) {
            return Err(Error::InvalidInput(format!(
                "augmentation yaw {} outside (-pi, pi]",
                self.yaw
            )));
        }
        Ok(())
    }
}

/// Applies `record` to every point (flip, then yaw, then scale).
pub fn apply_augmentation(points: &PointSet, record: &AugmentationRecord) -> Result<PointSet> {
    record.validate()?;
    let (sin, cos) = record.yaw.sin_cos();
    let coords = points
        .coords()
        .iter()
        .map(|&[x, y, z]| {
            let y = if record.flipped_y { -y } else { y };
            let (x, y) = (cos * x - sin * y, sin * x + cos * y);
            [x * record.scale_factor, y * record.scale_factor, z * record.scale_factor]
        })
        .collect();
    points.with_coords(coords)
}

/// Undoes [`apply_augmentation`]: un-scale, un-rotate, un-flip.
pub fn invert_augmentation(points: &PointSet, record: &AugmentationRecord) -> Result<PointSet> {
    record.validate()?;
    let (sin, cos) = record.yaw.sin_cos();
    let inv = 1.0 / record.scale_factor;
    let coords = points
        .coords()
        .iter()
        .map(|&[x, y, z]| {
            let (x, y, z) = (x * inv, y * inv, z * inv);
            let (x, y) = (cos * x + sin * y, -sin * x + cos * y);
            let y = if record.flipped_y { -y } else { y };
            [x, y, z]
        })
        .collect();
    points.with_coords(coords)
}

/// Pixel coordinates of the points that survived projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedCoords {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub source_index: Vec<usize>,
}

impl ProjectedCoords {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }

    /// Maps each of `n_points` source rows to its projection row, if any.
    pub fn row_lookup(&self, n_points: usize) -> Vec<Option<usize>> {
        let mut lookup = vec![None; n_points];
        for (row, &src) in self.source_index.iter().enumerate() {
            if src < n_points {
                lookup[src] = Some(row);
            }
        }
        lookup
    }
}

/// Projects every point and keeps the ones in front of the camera whose pixel
/// lies in `[0, width] x [0, height]`.
pub fn project(points: &PointSet, rig: &CalibrationRig) -> ProjectedCoords {
    let mut out = ProjectedCoords {
        pixels: Vec::new(),
        depth: Vec::new(),
        source_index: Vec::new(),
    };
    for (i, &p) in points.coords().iter().enumerate() {
        let (u, v, z) = rig.project_point(p);
        // behind-camera points are dropped before the bounds check
        if !(z > 0.0) || !rig.in_bounds(u, v) {
            continue;
        }
        out.pixels.push([u, v]);
        out.depth.push(z);
        out.source_index.push(i);
    }
    out
}

/// Nearest orthonormal matrix with positive determinant (polar factor).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Rotation of `angle` radians about `axis` (normalized internally).
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Angle of the rotation `a * b^T`, i.e. how far `a` is from `b`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}
