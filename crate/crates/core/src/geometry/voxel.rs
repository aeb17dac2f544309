use std::collections::{BTreeMap, BTreeSet};

use super::{transform, Point, PointCloud, Pose};
use crate::error::{Error, Result};

pub type VoxelIndex = [i64; 3];

/// Set of occupied integer cells `floor(p / voxel_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    occupied: BTreeSet<VoxelIndex>,
}

fn check_size(voxel_size: f64) -> Result<()> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "voxel size must be positive and finite, got {voxel_size}"
        )));
    }
    Ok(())
}

fn cell(p: &[f64; 3], voxel_size: f64) -> VoxelIndex {
    [
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    ]
}

impl VoxelGrid {
    pub fn from_positions(positions: &[[f64; 3]], voxel_size: f64) -> Result<Self> {
        check_size(voxel_size)?;
        let occupied = positions.iter().map(|p| cell(p, voxel_size)).collect();
        Ok(VoxelGrid {
            voxel_size,
            occupied,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn occupied(&self) -> &BTreeSet<VoxelIndex> {
        &self.occupied
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn intersection_count(&self, other: &VoxelGrid) -> usize {
        // iterate the smaller set
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .occupied
            .iter()
            .filter(|c| large.occupied.contains(*c))
            .count()
    }

    /// `|A ∩ B| / |A ∪ B|`.
    pub fn iou(&self, other: &VoxelGrid) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }

    /// `|A ∩ B| / |A|`: the fraction of this grid covered by `other`.
    pub fn coverage_by(&self, other: &VoxelGrid) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.intersection_count(other) as f64 / self.len() as f64
    }
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    VoxelGrid::from_positions(&cloud.positions(), voxel_size)
}

/// Voxel IoU of the two clouds after mapping each into the world frame.
pub fn symmetric_frame_overlap(
    a: &PointCloud,
    b: &PointCloud,
    pose_a: &Pose,
    pose_b: &Pose,
    voxel_size: f64,
) -> Result<f64> {
    let va = voxelize(&transform(a, pose_a), voxel_size)?;
    let vb = voxelize(&transform(b, pose_b), voxel_size)?;
    Ok(va.iou(&vb))
}

/// Fraction of the query's world-frame voxels that the database cloud also occupies.
pub fn asymmetric_overlap(
    query: &PointCloud,
    db: &PointCloud,
    pose_q: &Pose,
    pose_d: &Pose,
    voxel_size: f64,
) -> Result<f64> {
    let vq = voxelize(&transform(query, pose_q), voxel_size)?;
    let vd = voxelize(&transform(db, pose_d), voxel_size)?;
    Ok(vq.coverage_by(&vd))
}

/// Replaces every occupied voxel by the mean of its points (normals are
/// re-normalized, falling back to the zero sentinel when they cancel). If the
/// result still exceeds `max_points` the voxel grows by 10% until it fits.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64, max_points: usize) -> Result<PointCloud> {
    check_size(voxel_size)?;
    if max_points == 0 {
        return Err(Error::invalid("max_points must be at least 1"));
    }
    let mut size = voxel_size;
    loop {
        let mut buckets: BTreeMap<VoxelIndex, ([f64; 9], usize)> = BTreeMap::new();
        // accumulate in canonical point order so the output is order independent
        let mut order: Vec<&Point> = cloud.points().iter().collect();
        order.sort_by(|a, b| {
            super::lex_cmp(&a.position, &b.position).then_with(|| {
                a.row()
                    .iter()
                    .zip(b.row().iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        for p in order {
            let e = buckets.entry(cell(&p.position, size)).or_insert(([0.0; 9], 0));
            for (acc, v) in e.0.iter_mut().zip(p.row()) {
                *acc += v;
            }
            e.1 += 1;
        }
        if buckets.len() <= max_points {
            let points = buckets
                .values()
                .map(|(sum, n)| {
                    let n = *n as f64;
                    let mut row = sum.map(|v| v / n);
                    for c in &mut row[0..3] {
                        *c = c.clamp(0.0, 1.0);
                    }
                    let norm = (row[6] * row[6] + row[7] * row[7] + row[8] * row[8]).sqrt();
                    if norm > 1e-9 {
                        for c in &mut row[6..9] {
                            *c /= norm;
                        }
                    } else {
                        row[6..9].fill(0.0);
                    }
                    Point::from_row(row)
                })
                .collect();
            return PointCloud::new(points);
        }
        size *= 1.1;
    }
}
