//! Deterministic synthetic driving scenes.
//!
//! A forward-looking camera shares a mount with a LiDAR (x forward, y left,
//! z up). Box-shaped objects of a few classes are placed on a flat ground
//! plane; the LiDAR samples their sensor-facing faces with a density that
//! falls off as `1 / range^2`, and the ground with rings spaced uniformly in
//! elevation angle. The image feature map is rendered through the clean rig:
//! every pixel touched by an object's silhouette holds that class's one-hot
//! embedding, all other pixels are zero. Point features carry a noisy cue of
//! the point's class, standing in for LiDAR backbone features.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fusion::ImageFeatureMap;
use crate::geometry::{axis_angle, nearest_rotation, CalibrationRig, PointSet};

/// Label of ground / background points.
pub const BACKGROUND: i32 = 0;

/// Azimuth bin width of the simulated scan, radians (0.2 degrees).
const AZIMUTH_BIN: f64 = 0.2 * std::f64::consts::PI / 180.0;

/// Range at which an object receives `points_per_object` returns.
const REFERENCE_RANGE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// Object classes, labelled `1..=n_classes`; 0 is background.
    pub n_classes: usize,
    pub range_max: f64,
    /// Closest object placement range, meters.
    pub min_range: f64,
    /// Returns per object at 10 m.
    pub points_per_object: usize,
    pub ground_points: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub channels: usize,
    pub scan_order: bool,
    pub focal_length: f64,
    pub lidar_height: f64,
    pub feature_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: 24,
            n_classes: 3,
            range_max: 70.0,
            min_range: 8.0,
            points_per_object: 800,
            ground_points: 12_000,
            image_width: 640,
            image_height: 192,
            channels: 12,
            scan_order: true,
            focal_length: 360.0,
            lidar_height: 1.73,
            feature_noise: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(m));
        if !(self.range_max > 0.0) {
            return fail(format!("range_max must be positive, got {}", self.range_max));
        }
        if !(self.min_range > 0.0 && self.min_range < self.range_max) {
            return fail(format!("min_range must lie in (0, range_max), got {}", self.min_range));
        }
        if self.channels < self.n_classes || self.channels == 0 {
            return fail(format!(
                "channels ({}) must be at least the class count ({})",
                self.channels, self.n_classes
            ));
        }
        if self.n_objects > 0 && self.n_classes == 0 {
            return fail("objects need at least one class".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return fail("image dimensions must be positive".into());
        }
        if !(self.focal_length > 0.0) || !(self.lidar_height > 0.0) || !(self.feature_noise >= 0.0) {
            return fail("focal_length and lidar_height must be positive, feature_noise non-negative".into());
        }
        Ok(())
    }

    /// The rig used to render the scene.
    pub fn clean_rig(&self) -> Result<CalibrationRig> {
        // LiDAR (x fwd, y left, z up) to camera (x right, y down, z fwd)
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let translation = Vector3::new(-0.004, -0.076, -0.27);
        CalibrationRig::pinhole(
            self.focal_length,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            rotation,
            translation,
            self.image_width,
            self.image_height,
        )
    }
}

/// One-hot embedding of an object class over `channels`; zero for background.
pub fn class_embedding(class: i32, channels: usize) -> Vec<f64> {
    let mut e = vec![0.0; channels];
    if class > 0 && (class as usize) <= channels {
        e[class as usize - 1] = 1.0;
    }
    e
}

/// Channel carrying a point's class cue: `class - 1` for objects, the first
/// channel past the classes for background when there is room.
fn cue_channel(class: i32, n_classes: usize, channels: usize) -> Option<usize> {
    if class > 0 {
        Some(class as usize - 1)
    } else if n_classes < channels {
        Some(n_classes)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: i32,
    pub center: [f64; 3],
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl SceneObject {
    pub fn range(&self) -> f64 {
        (self.center[0].powi(2) + self.center[1].powi(2) + self.center[2].powi(2)).sqrt()
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        let (s, c) = self.yaw.sin_cos();
        let [l, w, h] = self.dims;
        let mut out = Vec::with_capacity(8);
        for dx in [-0.5, 0.5] {
            for dy in [-0.5, 0.5] {
                for dz in [-0.5, 0.5] {
                    let (lx, ly) = (dx * l, dy * w);
                    out.push([
                        self.center[0] + c * lx - s * ly,
                        self.center[1] + s * lx + c * ly,
                        self.center[2] + dz * h,
                    ]);
                }
            }
        }
        out
    }

    /// Faces visible from the origin as `(origin corner, edge a, edge b)`.
    fn visible_faces(&self) -> Vec<([f64; 3], [f64; 3], [f64; 3])> {
        let (s, c) = self.yaw.sin_cos();
        let [l, w, h] = self.dims;
        let ax = [c, s, 0.0];
        let ay = [-s, c, 0.0];
        let az = [0.0, 0.0, 1.0];
        let scale = |v: [f64; 3], k: f64| [v[0] * k, v[1] * k, v[2] * k];
        let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        // (normal axis, half extent along it, the two spanning axes with extents)
        let faces = [
            (ax, l / 2.0, (ay, w), (az, h)),
            (scale(ax, -1.0), l / 2.0, (ay, w), (az, h)),
            (ay, w / 2.0, (ax, l), (az, h)),
            (scale(ay, -1.0), w / 2.0, (ax, l), (az, h)),
            (az, h / 2.0, (ax, l), (ay, w)),
        ];
        faces
            .into_iter()
            .filter_map(|(normal, half, (ua, la), (ub, lb))| {
                let face_center = add(self.center, scale(normal, half));
                if dot(normal, face_center) >= 0.0 {
                    return None;
                }
                let origin = add(add(face_center, scale(ua, -la / 2.0)), scale(ub, -lb / 2.0));
                Some((origin, scale(ua, la), scale(ub, lb)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRow {
    pub index: usize,
    pub class: i32,
    /// Error-free pixel of the point.
    pub px: f64,
    pub py: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub rows: Vec<GroundTruthRow>,
}

impl GroundTruth {
    pub fn class_of(&self, index: usize) -> Option<i32> {
        self.rows.get(index).filter(|r| r.index == index).map(|r| r.class).or_else(|| {
            self.rows.iter().find(|r| r.index == index).map(|r| r.class)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub points: PointSet,
    pub feature_map: ImageFeatureMap,
    pub rig: CalibrationRig,
    pub ground_truth: GroundTruth,
    pub objects: Vec<SceneObject>,
}

fn class_dims(class: i32) -> [f64; 3] {
    const TABLE: [[f64; 3]; 3] = [[3.9, 1.6, 1.56], [0.8, 0.6, 1.73], [1.76, 0.6, 1.73]];
    let i = (class - 1) as usize;
    let grow = 1.0 + 0.15 * (i / TABLE.len()) as f64;
    let d = TABLE[i % TABLE.len()];
    [d[0] * grow, d[1] * grow, d[2]]
}

/// Axis-aligned pixel bounds `(x0, y0, x1, y1)`.
type PixelBox = [f64; 4];

fn boxes_overlap(a: &PixelBox, b: &PixelBox, margin: f64) -> bool {
    a[0] - margin <= b[2] && b[0] - margin <= a[2] && a[1] - margin <= b[3] && b[1] - margin <= a[3]
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Whether the unit pixel square at `(col, row)` touches the convex polygon.
fn square_touches_polygon(col: usize, row: usize, hull: &[[f64; 2]]) -> bool {
    let sq = [
        [col as f64, row as f64],
        [col as f64 + 1.0, row as f64],
        [col as f64 + 1.0, row as f64 + 1.0],
        [col as f64, row as f64 + 1.0],
    ];
    let project = |pts: &[[f64; 2]], axis: [f64; 2]| {
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p[0] * axis[0] + p[1] * axis[1];
            (lo.min(d), hi.max(d))
        })
    };
    let mut axes = vec![[1.0, 0.0], [0.0, 1.0]];
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        axes.push([-(b[1] - a[1]), b[0] - a[0]]);
    }
    axes.into_iter().all(|axis| {
        let (a0, a1) = project(&sq, axis);
        let (b0, b1) = project(hull, axis);
        a0 <= b1 && b0 <= a1
    })
}

fn render_object(fmap: &mut ImageFeatureMap, hull: &[[f64; 2]], embedding: &[f64]) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in hull {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let w = fmap.width();
    let h = fmap.height();
    let c0 = (x0.floor().max(1.0) as usize - 1).min(w - 1);
    let r0 = (y0.floor().max(1.0) as usize - 1).min(h - 1);
    let c1 = (x1.floor().max(0.0) as usize).min(w - 1);
    let r1 = (y1.floor().max(0.0) as usize).min(h - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            if square_touches_polygon(col, row, hull) {
                fmap.set_pixel(row, col, embedding);
            }
        }
    }
}

/// Generates a scene. Identical specs give bit-identical scenes.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let rig = spec.clean_rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.image_width as f64;
    let height = spec.image_height as f64;
    let half_fov = (width / 2.0 / spec.focal_length).atan();
    let ground_z = -spec.lidar_height;

    // place objects with disjoint image footprints
    let mut objects = Vec::new();
    let mut footprints: Vec<(PixelBox, Vec<[f64; 2]>)> = Vec::new();
    for _ in 0..spec.n_objects {
        for _attempt in 0..200 {
            let class = rng.random_range(1..=spec.n_classes as i32);
            let base = class_dims(class);
            let jitter = rng.random_range(0.9..1.1);
            let dims = [base[0] * jitter, base[1] * jitter, base[2] * rng.random_range(0.95..1.05)];
            let range = rng.random_range(spec.min_range..spec.range_max);
            let azimuth = rng.random_range(-half_fov..half_fov) * 0.9;
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let object = SceneObject {
                class,
                center: [range * azimuth.cos(), range * azimuth.sin(), ground_z + dims[2] / 2.0],
                dims,
                yaw,
            };
            let mut pix = Vec::with_capacity(8);
            let mut ok = true;
            for corner in object.corners() {
                let (u, v, z) = rig.project_point(corner);
                if !(z > 0.5 && u >= 1.0 && v >= 1.0 && u <= width - 1.0 && v <= height - 1.0) {
                    ok = false;
                    break;
                }
                pix.push([u, v]);
            }
            if !ok {
                continue;
            }
            let bbox = pix.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
                [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
            });
            if footprints.iter().any(|(other, _)| boxes_overlap(&bbox, other, 3.0)) {
                continue;
            }
            footprints.push((bbox, convex_hull(pix)));
            objects.push(object);
            break;
        }
    }

    // painter's order: far objects first
    let mut fmap = ImageFeatureMap::zeros(spec.image_height as usize, spec.image_width as usize, spec.channels)?;
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].range().total_cmp(&objects[a].range()));
    for &i in &order {
        render_object(&mut fmap, &footprints[i].1, &class_embedding(objects[i].class, spec.channels));
    }

    let mut coords: Vec<[f64; 3]> = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    for object in &objects {
        let count = ((spec.points_per_object as f64) * (REFERENCE_RANGE / object.range()).powi(2)).round().max(3.0) as usize;
        let faces = object.visible_faces();
        let areas: Vec<f64> = faces
            .iter()
            .map(|(_, a, b)| {
                let n = Vector3::from(*a).cross(&Vector3::from(*b));
                n.norm()
            })
            .collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces.len() - 1;
            for (f, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let (o, a, b) = faces[face];
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            coords.push([o[0] + s * a[0] + t * b[0], o[1] + s * a[1] + t * b[1], o[2] + s * a[2] + t * b[2]]);
            labels.push(object.class);
        }
    }

    // ground rings, uniform in elevation angle
    let near_angle = (spec.lidar_height / 3.0).atan();
    let far_angle = (spec.lidar_height / spec.range_max).atan();
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < spec.ground_points && attempts < spec.ground_points.saturating_mul(50) {
        attempts += 1;
        let angle = rng.random_range(far_angle..near_angle);
        let range = spec.lidar_height / angle.tan();
        let azimuth = rng.random_range(-half_fov..half_fov);
        let p = [range * azimuth.cos(), range * azimuth.sin(), ground_z];
        let (u, v, z) = rig.project_point(p);
        if !(z > 0.0 && rig.in_bounds(u, v)) {
            continue;
        }
        let (row, col) = fmap.cell_of(u, v);
        // occluded by an object in the image
        if fmap.pixel(row, col).iter().any(|&x| x != 0.0) {
            continue;
        }
        coords.push(p);
        labels.push(BACKGROUND);
        accepted += 1;
    }

    let n = coords.len();
    let noise = Normal::new(0.0, spec.feature_noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut features = Array2::zeros((n, spec.channels));
    for (i, &label) in labels.iter().enumerate() {
        for ch in 0..spec.channels {
            features[[i, ch]] = noise.sample(&mut rng);
        }
        if let Some(ch) = cue_channel(label, spec.n_classes, spec.channels) {
            features[[i, ch]] += 1.0;
        }
    }

    let order: Vec<usize> = if spec.scan_order {
        let key = |p: &[f64; 3]| {
            let az = p[1].atan2(p[0]);
            let elevation = p[2].atan2((p[0] * p[0] + p[1] * p[1]).sqrt());
            ((az / AZIMUTH_BIN).floor() as i64, elevation)
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            let (ba, ea) = key(&coords[a]);
            let (bb, eb) = key(&coords[b]);
            ba.cmp(&bb).then(ea.total_cmp(&eb)).then(a.cmp(&b))
        });
        idx
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let points = PointSet::new(coords, features, labels)?.permuted(&order);

    let rows = points
        .coords()
        .iter()
        .zip(points.labels())
        .enumerate()
        .map(|(index, (&p, &class))| {
            let (px, py, _) = rig.project_point(p);
            GroundTruthRow { index, class, px, py }
        })
        .collect();

    Ok(Scene {
        spec: spec.clone(),
        points,
        feature_map: fmap,
        rig,
        ground_truth: GroundTruth { rows },
        objects,
    })
}

/// Calibration error model: per-axis translation noise, a small random
/// rotation, and a lateral shift standing in for time-synchronization skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub translation_sigma: f64,
    pub rotation_sigma: f64,
    pub timing_skew: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            translation_sigma: 0.0,
            rotation_sigma: 0.0,
            timing_skew: 0.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation_sigma >= 0.0 && self.rotation_sigma >= 0.0 && self.timing_skew.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "perturbation sigmas must be non-negative (translation {}, rotation {})",
                self.translation_sigma, self.rotation_sigma
            )));
        }
        Ok(())
    }
}

/// Returns a miscalibrated copy of `rig`.
pub fn perturb(rig: &CalibrationRig, spec: &PerturbationSpec) -> Result<CalibrationRig> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut translation = *rig.translation();
    if spec.translation_sigma > 0.0 {
        for t in translation.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *t += spec.translation_sigma * z;
        }
    }
    let mut rotation = *rig.rotation();
    if spec.rotation_sigma > 0.0 {
        let axis = loop {
            let a = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            if a.norm() > 1e-9 {
                break a;
            }
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        let angle = (spec.rotation_sigma * z).abs();
        rotation = nearest_rotation(&(axis_angle(axis, angle) * rotation));
    }
    // camera x is the lateral axis
    translation.x += spec.timing_skew;
    rig.with_extrinsics(rotation, translation)
}

/// Mean over index chunks of the largest pairwise distance inside the chunk.
pub fn mean_chunk_diameter(points: &PointSet, chunk_size: usize) -> f64 {
    let ranges = crate::graph::partition(points.len(), chunk_size);
    if ranges.is_empty() {
        return 0.0;
    }
    let coords = points.coords();
    let total: f64 = ranges
        .iter()
        .map(|r| {
            let chunk = &coords[r.clone()];
            let mut best = 0.0f64;
            for (i, a) in chunk.iter().enumerate() {
                for b in &chunk[i + 1..] {
                    let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                    best = best.max(d);
                }
            }
            best.sqrt()
        })
        .sum();
    total / ranges.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            n_objects: 8,
            ground_points: 3000,
            points_per_object: 300,
            ..Default::default()
        }
    }

    #[test]
    fn empty_world_is_all_ground() {
        let scene = generate(&SceneSpec {
            n_objects: 0,
            ground_points: 500,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(scene.points.len(), 500);
        assert!(scene.points.labels().iter().all(|&l| l == BACKGROUND));
        assert!(scene.feature_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small_spec(5)).unwrap(), generate(&small_spec(5)).unwrap());
        assert_ne!(generate(&small_spec(5)).unwrap().points, generate(&small_spec(6)).unwrap().points);
    }

    #[test]
    fn rendered_pixels_are_single_embeddings() {
        let scene = generate(&small_spec(1)).unwrap();
        let c = scene.spec.channels;
        let embeddings: Vec<Vec<f64>> = (1..=scene.spec.n_classes as i32).map(|k| class_embedding(k, c)).collect();
        let fmap = &scene.feature_map;
        let mut painted = 0;
        for r in 0..fmap.height() {
            for col in 0..fmap.width() {
                let px = fmap.pixel(r, col).to_vec();
                if px.iter().any(|&v| v != 0.0) {
                    painted += 1;
                    assert!(embeddings.contains(&px));
                }
            }
        }
        assert!(painted > 0);
    }

    #[test]
    fn clean_projection_hits_own_class() {
        let scene = generate(&small_spec(2)).unwrap();
        for row in &scene.ground_truth.rows {
            assert!(scene.rig.in_bounds(row.px, row.py));
            let (r, c) = scene.feature_map.cell_of(row.px, row.py);
            assert_eq!(scene.feature_map.pixel(r, c).to_vec(), class_embedding(row.class, scene.spec.channels));
        }
    }

    #[test]
    fn object_density_falls_with_range() {
        let scene = generate(&SceneSpec {
            n_objects: 30,
            ..Default::default()
        })
        .unwrap();
        assert!(scene.objects.len() >= 10);
        let mut counts = vec![0usize; scene.objects.len()];
        let inside = |o: &SceneObject, p: &[f64; 3]| {
            let (s, c) = o.yaw.sin_cos();
            let (dx, dy) = (p[0] - o.center[0], p[1] - o.center[1]);
            let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
            let tol = 1e-9;
            lx.abs() <= o.dims[0] / 2.0 + tol && ly.abs() <= o.dims[1] / 2.0 + tol && (p[2] - o.center[2]).abs() <= o.dims[2] / 2.0 + tol
        };
        for (p, &l) in scene.points.coords().iter().zip(scene.points.labels()) {
            if l == BACKGROUND {
                continue;
            }
            let owners: Vec<usize> = (0..scene.objects.len()).filter(|&i| inside(&scene.objects[i], p)).collect();
            assert_eq!(owners.len(), 1);
            let best = owners[0];
            assert_eq!(scene.objects[best].class, l);
            counts[best] += 1;
        }
        for (o, &n) in scene.objects.iter().zip(&counts) {
            let expect = (800.0 * (10.0 / o.range()).powi(2)).round().max(3.0);
            assert_eq!(n as f64, expect);
        }
    }

    #[test]
    fn scan_order_shrinks_chunks() {
        let spec = SceneSpec {
            n_objects: 10,
            ground_points: 6000,
            ..Default::default()
        };
        let ordered = generate(&spec).unwrap();
        let shuffled = generate(&SceneSpec {
            scan_order: false,
            ..spec
        })
        .unwrap();
        let a = mean_chunk_diameter(&ordered.points, 1000);
        let b = mean_chunk_diameter(&shuffled.points, 1000);
        assert!(a < b, "scan-ordered {a} vs shuffled {b}");
    }

    #[test]
    fn perturbation_identity_and_isolation() {
        let rig = SceneSpec::default().clean_rig().unwrap();
        assert_eq!(perturb(&rig, &PerturbationSpec::default()).unwrap(), rig);
        let t_only = perturb(
            &rig,
            &PerturbationSpec {
                translation_sigma: 0.3,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t_only.rotation(), rig.rotation());
        assert_ne!(t_only.translation(), rig.translation());
        let skew = perturb(
            &rig,
            &PerturbationSpec {
                timing_skew: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(skew.translation().x, rig.translation().x + 0.1);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let rig = SceneSpec::default().clean_rig().unwrap();
        let spec = PerturbationSpec {
            translation_sigma: 0.2,
            rotation_sigma: 0.01,
            timing_skew: 0.1,
            seed: 77,
        };
        assert_eq!(perturb(&rig, &spec).unwrap(), perturb(&rig, &spec).unwrap());
    }

    #[test]
    fn rotation_angle_statistics() {
        let rig = SceneSpec::default().clean_rig().unwrap();
        let sigma = 0.01;
        let angles: Vec<f64> = (0..1000)
            .map(|seed| {
                let p = perturb(
                    &rig,
                    &PerturbationSpec {
                        rotation_sigma: sigma,
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap();
                rotation_angle_between(p.rotation(), rig.rotation())
            })
            .collect();
        let n = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / n;
        let var = angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let se = (var / n).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SceneSpec {
            channels: 2,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SceneSpec {
            range_max: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(perturb(
            &SceneSpec::default().clean_rig().unwrap(),
            &PerturbationSpec {
                rotation_sigma: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
