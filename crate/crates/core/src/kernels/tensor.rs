//! Dense row-major matrices and the small set of layers the models use.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row count above which matrix products fan out over rayon.
const PAR_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) would panic
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · otherᵀ` where both operands are row-major.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "inner dimension mismatch: {}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.rows;
        let mut out = Mat::zeros(self.rows, n);
        if n == 0 {
            return Ok(out);
        }
        let fill = |(i, dst): (usize, &mut [f64])| {
            let a = self.row(i);
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(a, other.row(j));
            }
        };
        if self.rows >= PAR_ROWS {
            out.data.par_chunks_mut(n).enumerate().for_each(fill);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(fill);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row features with one 3-D position per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Mat,
    positions: Vec<[f64; 3]>,
}

impl FeatureMatrix {
    pub fn new(values: Mat, positions: Vec<[f64; 3]>) -> Result<Self> {
        if values.rows() != positions.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} positions",
                values.rows(),
                positions.len()
            )));
        }
        if !values.is_finite() || positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureMatrix { values, positions })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Rows reordered by `perm` (output row `k` is input row `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(perm),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// Center features produced by a self context cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterFeatures {
    features: FeatureMatrix,
    source_count: usize,
}

impl CenterFeatures {
    pub fn new(features: FeatureMatrix, source_count: usize) -> Result<Self> {
        if features.rows() > source_count {
            return Err(Error::invalid(format!(
                "{} centers from only {source_count} points",
                features.rows()
            )));
        }
        Ok(CenterFeatures {
            features,
            source_count,
        })
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn values(&self) -> &Mat {
        self.features.values()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        self.features.positions()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }
}

/// `y = x Wᵀ + b` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("linear layer has non-finite entries".into()));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Uniform in `±sqrt(1/fan_in)` for both weight and bias.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let weight = Mat {
            rows: fan_out,
            cols: fan_in,
            data: (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        };
        let bias = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        LinearLayer { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.in_dim() {
            return Err(Error::invalid(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = x.matmul_t(&self.weight)?;
        let cols = y.cols().max(1);
        for row in y.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, (w, b)) in out.iter_mut().zip(self.weight.row_iter().zip(&self.bias)) {
            *o = dot(w, x) + b;
        }
    }
}

pub fn linear(layer: &LinearLayer, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let y = layer.forward(x.values())?;
    FeatureMatrix::new(y, x.positions().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNormParams {
    pub num_groups: usize,
    pub gamma: Vec<f64>,
    pub beta_shift: Vec<f64>,
    pub epsilon: f64,
}

impl GroupNormParams {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Identity affine (`gamma = 1`, `beta_shift = 0`).
    pub fn new(dim: usize, num_groups: usize) -> Result<Self> {
        let p = GroupNormParams {
            num_groups,
            gamma: vec![1.0; dim],
            beta_shift: vec![0.0; dim],
            epsilon: Self::DEFAULT_EPSILON,
        };
        p.validate(dim)?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_groups == 0 || !dim.is_multiple_of(self.num_groups) {
            return Err(Error::invalid(format!(
                "feature dim {dim} is not divisible by {} groups",
                self.num_groups
            )));
        }
        if self.gamma.len() != dim || self.beta_shift.len() != dim {
            return Err(Error::invalid(format!(
                "group norm affine has {} / {} channels, expected {dim}",
                self.gamma.len(),
                self.beta_shift.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("group norm epsilon must be positive"));
        }
        Ok(())
    }

    /// Normalizes each row independently; also returns the per-row,
    /// per-group `1/sqrt(var + eps)` and the normalized (pre-affine) values.
    pub(crate) fn forward_with_stats(&self, x: &Mat) -> Result<(Mat, Mat, Vec<f64>)> {
        self.validate(x.cols())?;
        let dim = x.cols();
        let g = dim / self.num_groups;
        let mut y = Mat::zeros(x.rows(), dim);
        let mut xhat = Mat::zeros(x.rows(), dim);
        let mut inv_std = Vec::with_capacity(x.rows() * self.num_groups);
        for i in 0..x.rows() {
            let row = x.row(i);
            for grp in 0..self.num_groups {
                let s = &row[grp * g..(grp + 1) * g];
                let mean = s.iter().sum::<f64>() / g as f64;
                let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
                let inv = 1.0 / (var + self.epsilon).sqrt();
                inv_std.push(inv);
                for (k, v) in s.iter().enumerate() {
                    let c = grp * g + k;
                    let h = (v - mean) * inv;
                    xhat[(i, c)] = h;
                    y[(i, c)] = self.gamma[c] * h + self.beta_shift[c];
                }
            }
        }
        Ok((y, xhat, inv_std))
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_with_stats(x)?.0)
    }
}

pub fn group_norm(p: &GroupNormParams, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    FeatureMatrix::new(p.forward(x.values())?, x.positions().to_vec())
}

/// Pairwise cosine similarity; a zero-norm row yields 0 against everything.
pub fn cosine_similarity_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::invalid(format!(
            "cosine similarity dims differ ({} vs {})",
            a.cols(),
            b.cols()
        )));
    }
    let unit = |m: &Mat| {
        let mut u = m.clone();
        let cols = m.cols().max(1);
        for row in u.data_mut().chunks_mut(cols) {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(0.0);
            }
        }
        u
    };
    let mut c = unit(a).matmul_t(&unit(b))?;
    c.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        let m = Mat::from_rows(rows).unwrap();
        let n = m.rows();
        FeatureMatrix::new(m, vec![[0.0; 3]; n]).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = fm(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let id = LinearLayer::new(Mat::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(linear(&id, &x).unwrap(), x);
        let zero = LinearLayer::new(Mat::zeros(3, 2), vec![1.0, -2.0, 0.5]).unwrap();
        let y = linear(&zero, &x).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &[1.0, -2.0, 0.5]);
        }
        let plus_one = LinearLayer::new(Mat::identity(2), vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&plus_one, &fm(&[&[1.0, 2.0]])).unwrap().row(0), &[2.0, 3.0]);
    }

    #[test]
    fn linear_dim_mismatch() {
        let l = LinearLayer::new(Mat::identity(3), vec![0.0; 3]).unwrap();
        assert!(matches!(linear(&l, &fm(&[&[1.0, 2.0]])), Err(Error::InvalidArgument(_))));
        assert!(LinearLayer::new(Mat::identity(3), vec![0.0; 2]).is_err());
    }

    #[test]
    fn group_norm_cases() {
        let p = GroupNormParams::new(4, 2).unwrap();
        let y = group_norm(&p, &fm(&[&[3.0, 3.0, 3.0, 3.0]])).unwrap();
        assert!(y.row(0).iter().all(|v| *v == 0.0));

        let p1 = GroupNormParams::new(2, 1).unwrap();
        let y = group_norm(&p1, &fm(&[&[1.0, -1.0]])).unwrap();
        assert!((y.row(0)[0] - 1.0).abs() < 1e-3);
        assert!((y.row(0)[1] + 1.0).abs() < 1e-3);

        let mut p0 = GroupNormParams::new(4, 2).unwrap();
        p0.gamma = vec![0.0; 4];
        p0.beta_shift = vec![0.5, 1.0, 1.5, 2.0];
        let y = group_norm(&p0, &fm(&[&[9.0, -1.0, 4.0, 2.0]])).unwrap();
        assert_eq!(y.row(0), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn group_norm_divisibility() {
        assert!(GroupNormParams::new(6, 4).is_err());
        let p = GroupNormParams::new(4, 4).unwrap();
        assert!(matches!(group_norm(&p, &fm(&[&[1.0, 2.0, 3.0]])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cosine_cases() {
        let a = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let c = cosine_similarity_matrix(&a, &b).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(0, 1)], 0.0);
        assert!((c[(0, 2)] - FRAC_1_SQRT_2).abs() < 1e-15);
        // zero-norm row
        assert!(c.row(1).iter().all(|v| *v == 0.0));
        let bad = Mat::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(cosine_similarity_matrix(&a, &bad).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_matrix_shape_checks() {
        assert!(FeatureMatrix::new(Mat::zeros(2, 3), vec![[0.0; 3]]).is_err());
        let m = Mat::from_rows(&[[f64::NAN]]).unwrap();
        assert!(FeatureMatrix::new(m, vec![[0.0; 3]]).is_err());
    }
}
