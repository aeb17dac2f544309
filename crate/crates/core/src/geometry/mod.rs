//! Geometric primitives: colorized point clouds, rigid poses, voxel overlap,
//! farthest point sampling, brute-force neighbor search and Kabsch alignment.

mod kabsch;
mod pcb;
mod sampling;
mod voxel;

pub use kabsch::{kabsch_align, rms_residual};
pub use pcb::{decode_pcb, encode_pcb, read_pcb, write_pcb, PCB_MAGIC};
pub use sampling::{canonical_order, farthest_point_sample, fps_indices, knn, lex_cmp};
pub use voxel::{asymmetric_overlap, symmetric_frame_overlap, voxel_downsample, voxelize, VoxelGrid};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORMAL_TOLERANCE: f64 = 1e-4;
const ROTATION_TOLERANCE: f64 = 1e-6;

/// One colorized point: color in `[0,1]`, position in meters, unit normal
/// (or the all-zero "no normal" sentinel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub color: [f64; 3],
    pub position: [f64; 3],
    pub normal: [f64; 3],
}

impl Point {
    pub fn new(color: [f64; 3], position: [f64; 3], normal: [f64; 3]) -> Self {
        Point {
            color,
            position,
            normal,
        }
    }

    /// The nine raw features in file order `(r,g,b,x,y,z,nx,ny,nz)`.
    pub fn row(&self) -> [f64; 9] {
        let [r, g, b] = self.color;
        let [x, y, z] = self.position;
        let [nx, ny, nz] = self.normal;
        [r, g, b, x, y, z, nx, ny, nz]
    }

    pub fn from_row(row: [f64; 9]) -> Self {
        Point {
            color: [row[0], row[1], row[2]],
            position: [row[3], row[4], row[5]],
            normal: [row[6], row[7], row[8]],
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.row().iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0,1]", self.color));
        }
        let n2: f64 = self.normal.iter().map(|v| v * v).sum();
        if n2 != 0.0 && (n2.sqrt() - 1.0).abs() > NORMAL_TOLERANCE {
            return Err(format!("normal {:?} is neither unit nor zero", self.normal));
        }
        Ok(())
    }
}

/// An N x 9 colorized point cloud with N >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            p.validate()
                .map_err(|m| Error::invalid(format!("point {i}: {m}")))?;
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[[f64; 9]]) -> Result<Self> {
        Self::new(rows.iter().copied().map(Point::from_row).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn rows(&self) -> Vec<[f64; 9]> {
        self.points.iter().map(Point::row).collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.positions())
    }

    /// Returns a cloud made of the selected rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pts)
    }

    /// Twice the largest distance from the centroid; rotation and translation invariant.
    pub fn diameter(&self) -> f64 {
        let c = self.centroid();
        2.0 * self
            .points
            .iter()
            .map(|p| dist(&p.position, &c))
            .fold(0.0, f64::max)
    }
}

/// A rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        Pose::from_rows(r.rotation, r.translation)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and `det(R) = +1` to 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RtR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!("rotation determinant {det} != +1")));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_rows(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| rotation[i][j]);
        Self::new(m, Vector3::from(translation))
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians, then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let rot = Rotation3::from_axis_angle(&axis, angle);
        Pose {
            rotation: *rot.matrix(),
            translation: Vector3::from(translation),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn rotate(&self, v: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(*v);
        [v.x, v.y, v.z]
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Rotates and translates positions, rotates normals, keeps colors.
pub fn transform(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            color: p.color,
            position: pose.apply(&p.position),
            normal: pose.rotate(&p.normal),
        })
        .collect();
    PointCloud { points }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

/// Centroid accumulated in canonical (lexicographic) order so the result
/// does not depend on the input row order.
pub fn centroid(positions: &[[f64; 3]]) -> [f64; 3] {
    let mut sorted: Vec<&[f64; 3]> = positions.iter().collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    let mut acc = [0.0; 3];
    for p in sorted {
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    let n = positions.len().max(1) as f64;
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cloud() -> PointCloud {
        PointCloud::from_rows(&[
            [0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [0.5, 0.5, 0.5, 0.0, 2.0, 1.0, 1.0, 0.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn rejects_bad_points() {
        assert!(PointCloud::new(vec![]).is_err());
        let bad_color = [1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(PointCloud::from_rows(&[bad_color]).is_err());
        let bad_normal = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0];
        assert!(PointCloud::from_rows(&[bad_normal]).is_err());
        let nan = [0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(PointCloud::from_rows(&[nan]).is_err());
        // zero normal is the "no normal" sentinel
        assert!(PointCloud::from_rows(&[[0.0; 9]]).is_ok());
    }

    #[test]
    fn pose_validation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0; // reflection
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        m[(0, 0)] = 1.1;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn identity_transform_is_noop() {
        let c = cloud();
        assert_eq!(transform(&c, &Pose::identity()), c);
    }

    #[test]
    fn translation_shifts_positions_only() {
        let c = cloud();
        let t = transform(&c, &Pose::translation_only([1.0, 0.0, 0.0]));
        for (a, b) in c.points().iter().zip(t.points()) {
            assert_eq!(b.position[0], a.position[0] + 1.0);
            assert_eq!(b.position[1], a.position[1]);
            assert_eq!(b.normal, a.normal);
            assert_eq!(b.color, a.color);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = Pose::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2, [0.0; 3]);
        let p = pose.apply(&[1.0, 0.0, 0.0]);
        assert!((p[0] - 0.0).abs() < 1e-9);
        assert!((p[1] - 1.0).abs() < 1e-9);
        assert!(p[2].abs() < 1e-9);
        let c = cloud();
        let t = transform(&c, &pose);
        // normal (1,0,0) rotates to (0,1,0)
        assert!((t.points()[1].normal[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_inverse_and_serde() {
        let pose = Pose::from_axis_angle([1.0, 2.0, 3.0], 0.7, [0.3, -1.0, 2.0]);
        let back = pose.compose(&pose.inverse());
        assert!((back.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(back.translation().norm() < 1e-12);
        let json = serde_json::to_string(&pose).unwrap();
        let de: Pose = serde_json::from_str(&json).unwrap();
        assert_eq!(de, pose);
        let bad = r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<Pose>(bad).is_err());
    }

    #[test]
    fn centroid_is_order_independent() {
        let pts = vec![[0.1, 0.2, 0.3], [1e8, -3.0, 0.7], [0.3, 0.1, -1e-8], [-1e8, 5.0, 2.0]];
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(centroid(&pts), centroid(&rev));
    }
}
