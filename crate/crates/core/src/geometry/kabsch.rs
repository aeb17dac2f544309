use nalgebra::{Matrix3, Vector3};

use super::Pose;
use crate::error::{Error, Result};

const DEGENERATE_RATIO: f64 = 1e-9;

fn mean(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for p in points {
        acc += Vector3::from(*p);
    }
    acc / points.len() as f64
}

/// Least-squares rigid transform taking `src` onto `dst` (Kabsch with
/// reflection correction). Needs at least three non-collinear correspondences.
pub fn kabsch_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!(
            "correspondence count mismatch ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let cs = mean(src);
    let cd = mean(dst);

    let mut h = Matrix3::zeros();
    let mut cov_src = Matrix3::zeros();
    let mut cov_dst = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = Vector3::from(*s) - cs;
        let b = Vector3::from(*d) - cd;
        h += a * b.transpose();
        cov_src += a * a.transpose();
        cov_dst += b * b.transpose();
    }
    for (cov, name) in [(cov_src, "source"), (cov_dst, "target")] {
        let sv = cov.symmetric_eigenvalues();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if !(sv[0] > 0.0) || sv[1] <= DEGENERATE_RATIO * sv[0] {
            return Err(Error::DegenerateGeometry(format!(
                "{name} points are coincident or collinear"
            )));
        }
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD failed to produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD failed to produce V".into()))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let t = cd - r * cs;
    Pose::new(r, t)
}

/// Root-mean-square of `|pose(src_i) - dst_i|`.
pub fn rms_residual(pose: &Pose, src: &[[f64; 3]], dst: &[[f64; 3]]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| super::dist2(&pose.apply(s), d))
        .sum();
    (sum / src.len() as f64).sqrt()
}
