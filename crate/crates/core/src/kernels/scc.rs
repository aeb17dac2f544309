//! Self context cluster: compresses per-point features into center features
//! and enriches every center with the globally most similar points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{visit_linear, visit_linear_mut, visit_norm, visit_norm_mut, Parameters};
use super::tensor::{cosine_similarity_matrix, sigmoid, CenterFeatures, FeatureMatrix, GroupNormParams, LinearLayer, Mat};
use super::canonical_rows;
use crate::error::{Error, Result};
use crate::geometry::{fps_indices, knn};

/// Shape hyperparameters for a self context cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SccConfig {
    pub in_dim: usize,
    /// Width of the reference/source branches.
    pub branch_dim: usize,
    /// Output center feature width.
    pub center_dim: usize,
    pub num_groups: usize,
    pub num_centers: usize,
    /// Points averaged into each initial center feature.
    pub knn_k: usize,
}

impl SccConfig {
    /// Neighborhood size for the center mean: three times the average
    /// cluster population, capped at the point count.
    pub fn default_knn_k(rows: usize, num_centers: usize) -> usize {
        (3 * (rows / num_centers.max(1))).clamp(1, rows.max(1))
    }
}

impl Default for SccConfig {
    fn default() -> Self {
        SccConfig {
            in_dim: 128,
            branch_dim: 128,
            center_dim: 256,
            num_groups: 4,
            num_centers: 100,
            knn_k: Self::default_knn_k(300, 100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SccParams {
    pub l_r: LinearLayer,
    pub l_s: LinearLayer,
    pub l_c: LinearLayer,
    pub gn_r: GroupNormParams,
    pub gn_s: GroupNormParams,
    pub alpha: f64,
    pub beta: f64,
    pub num_centers: usize,
    pub knn_k: usize,
}

impl SccParams {
    /// Seeded uniform init for the linear layers, identity group-norm affine, `alpha = 1`, `beta = 0`.
    pub fn init<R: Rng>(rng: &mut R, cfg: &SccConfig) -> Result<Self> {
        let p = SccParams {
            l_r: LinearLayer::init(rng, cfg.in_dim, cfg.branch_dim),
            l_s: LinearLayer::init(rng, cfg.in_dim, cfg.branch_dim),
            l_c: LinearLayer::init(rng, cfg.branch_dim, cfg.center_dim),
            gn_r: GroupNormParams::new(cfg.branch_dim, cfg.num_groups)?,
            gn_s: GroupNormParams::new(cfg.branch_dim, cfg.num_groups)?,
            alpha: 1.0,
            beta: 0.0,
            num_centers: cfg.num_centers,
            knn_k: cfg.knn_k,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_r.in_dim() != self.l_s.in_dim() {
            return Err(Error::invalid("l_r and l_s must share the input width"));
        }
        if self.l_r.out_dim() != self.l_s.out_dim() {
            return Err(Error::invalid("l_r and l_s must share the branch width"));
        }
        if self.l_c.in_dim() != self.l_s.out_dim() {
            return Err(Error::invalid("l_c input must match the branch width"));
        }
        self.gn_r.validate(self.l_r.out_dim())?;
        self.gn_s.validate(self.l_s.out_dim())?;
        if self.num_centers == 0 || self.knn_k == 0 {
            return Err(Error::invalid("num_centers and knn_k must be positive"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Numeric("non-finite alpha/beta".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.l_r.in_dim()
    }

    pub fn branch_dim(&self) -> usize {
        self.l_r.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.l_c.out_dim()
    }

    pub fn config(&self) -> SccConfig {
        SccConfig {
            in_dim: self.in_dim(),
            branch_dim: self.branch_dim(),
            center_dim: self.out_dim(),
            num_groups: self.gn_r.num_groups,
            num_centers: self.num_centers,
            knn_k: self.knn_k,
        }
    }
}

impl Parameters for SccParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_linear("scc.l_r", &self.l_r, f);
        visit_linear("scc.l_s", &self.l_s, f);
        visit_linear("scc.l_c", &self.l_c, f);
        visit_norm("scc.gn_r", &self.gn_r, f);
        visit_norm("scc.gn_s", &self.gn_s, f);
        f("scc.alpha", &[], std::slice::from_ref(&self.alpha));
        f("scc.beta", &[], std::slice::from_ref(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_linear_mut("scc.l_r", &mut self.l_r, f);
        visit_linear_mut("scc.l_s", &mut self.l_s, f);
        visit_linear_mut("scc.l_c", &mut self.l_c, f);
        visit_norm_mut("scc.gn_r", &mut self.gn_r, f);
        visit_norm_mut("scc.gn_s", &mut self.gn_s, f);
        f("scc.alpha", &[], std::slice::from_mut(&mut self.alpha));
        f("scc.beta", &[], std::slice::from_mut(&mut self.beta));
    }
}

/// Every intermediate of one SCC forward pass, in canonical point order.
#[derive(Debug, Clone)]
pub struct SccTrace {
    /// `order[k]` is the input row placed at canonical position `k`.
    pub order: Vec<usize>,
    pub input: Mat,
    pub ref_normalized: Mat,
    pub ref_inv_std: Vec<f64>,
    pub src_normalized: Mat,
    pub src_inv_std: Vec<f64>,
    /// `f_p^r` (N x D_s).
    pub point_ref: Mat,
    /// `f_p^s` (N x D_s).
    pub point_src: Mat,
    /// Canonical indices of the FPS centers.
    pub centers: Vec<usize>,
    /// Canonical indices of each center's `knn_k` nearest points.
    pub neighbors: Vec<Vec<usize>>,
    /// `f_c^r` (M x D_s).
    pub center_ref: Mat,
    /// `f_c^s` (M x D_s).
    pub center_src: Mat,
    /// Cosine similarities between centers and points (M x N).
    pub cosine: Mat,
    /// `S = sigmoid(alpha * cos + beta)` (M x N).
    pub similarity: Mat,
    /// For every point, the center with the largest similarity (lowest index on ties).
    pub assignment: Vec<usize>,
    /// `1 + sum_j Ŝ_ij` per center.
    pub denominators: Vec<f64>,
    /// Aggregated multi-scale centers `f̃_c` (M x D_s).
    pub aggregated: Mat,
}

impl SccTrace {
    /// `Ŝ`: the similarity matrix with everything but each column's argmax zeroed.
    pub fn thresholded(&self) -> Mat {
        let mut s = Mat::zeros(self.similarity.rows(), self.similarity.cols());
        for (j, &i) in self.assignment.iter().enumerate() {
            s[(i, j)] = self.similarity[(i, j)];
        }
        s
    }
}

fn mean_rows(m: &Mat, idx: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for &j in idx {
        for (a, v) in acc.iter_mut().zip(m.row(j)) {
            *a += v;
        }
    }
    let n = idx.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Column-wise argmax, first index winning ties.
pub(crate) fn column_argmax(s: &Mat) -> Vec<usize> {
    (0..s.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..s.rows() {
                if s[(i, j)] > s[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn scc_forward(points: &FeatureMatrix, params: &SccParams) -> Result<CenterFeatures> {
    Ok(scc_forward_traced(points, params)?.0)
}

pub fn scc_forward_traced(points: &FeatureMatrix, params: &SccParams) -> Result<(CenterFeatures, SccTrace)> {
    params.validate()?;
    let n = points.rows();
    let m = params.num_centers;
    if m > n {
        return Err(Error::invalid(format!("{m} centers requested from {n} points")));
    }
    if params.knn_k > n {
        return Err(Error::invalid(format!("knn_k = {} exceeds {n} points", params.knn_k)));
    }
    if points.dim() != params.in_dim() {
        return Err(Error::invalid(format!(
            "SCC expects {}-dim point features, got {}",
            params.in_dim(),
            points.dim()
        )));
    }

    let order = canonical_rows(points);
    let canon = points.permuted(&order);
    let positions = canon.positions().to_vec();
    let input = canon.values().clone();

    let (point_ref, ref_normalized, ref_inv_std) =
        params.gn_r.forward_with_stats(&params.l_r.forward(&input)?)?;
    let (point_src, src_normalized, src_inv_std) =
        params.gn_s.forward_with_stats(&params.l_s.forward(&input)?)?;

    let centers = fps_indices(&positions, m)?;
    let center_pos: Vec<[f64; 3]> = centers.iter().map(|&i| positions[i]).collect();
    let neighbors = knn(&center_pos, &positions, params.knn_k)?;

    let center_ref = Mat::from_rows(&neighbors.iter().map(|nb| mean_rows(&point_ref, nb)).collect::<Vec<_>>())?;
    let center_src = Mat::from_rows(&neighbors.iter().map(|nb| mean_rows(&point_src, nb)).collect::<Vec<_>>())?;

    let cosine = cosine_similarity_matrix(&center_ref, &point_ref)?;
    let mut similarity = cosine.clone();
    similarity
        .data_mut()
        .iter_mut()
        .for_each(|c| *c = sigmoid(params.alpha * *c + params.beta));
    let assignment = column_argmax(&similarity);

    let ds = params.branch_dim();
    let mut aggregated = center_src.clone();
    let mut denominators = vec![1.0; m];
    for (j, &i) in assignment.iter().enumerate() {
        let s = similarity[(i, j)];
        denominators[i] += s;
        let src = point_src.row(j);
        for (a, v) in aggregated.row_mut(i).iter_mut().zip(src) {
            *a += s * v;
        }
    }
    for i in 0..m {
        let d = denominators[i];
        aggregated.row_mut(i).iter_mut().for_each(|a| *a /= d);
    }
    debug_assert_eq!(aggregated.cols(), ds);

    let out = params.l_c.forward(&aggregated)?;
    let features = FeatureMatrix::new(out, center_pos)?;
    let centers_out = CenterFeatures::new(features, n)?;

    let trace = SccTrace {
        order,
        input,
        ref_normalized,
        ref_inv_std,
        src_normalized,
        src_inv_std,
        point_ref,
        point_src,
        centers,
        neighbors,
        center_ref,
        center_src,
        cosine,
        similarity,
        assignment,
        denominators,
        aggregated,
    };
    Ok((centers_out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureMatrix {
        let vals: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pos = (0..n)
            .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)])
            .collect();
        FeatureMatrix::new(Mat::from_vec(n, dim, vals).unwrap(), pos).unwrap()
    }

    fn small_cfg() -> SccConfig {
        SccConfig {
            in_dim: 6,
            branch_dim: 8,
            center_dim: 5,
            num_groups: 4,
            num_centers: 4,
            knn_k: 3,
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SccParams::init(&mut rng, &small_cfg()).unwrap();
        let x = random_points(&mut rng, 20, 6);
        let (c, t) = scc_forward_traced(&x, &p).unwrap();
        assert_eq!(c.count(), 4);
        assert_eq!(c.dim(), 5);
        assert!(t.similarity.data().iter().all(|&s| s > 0.0 && s < 1.0));
        let sh = t.thresholded();
        for j in 0..20 {
            let nz: Vec<_> = (0..4).filter(|&i| sh[(i, j)] != 0.0).collect();
            assert_eq!(nz.len(), 1);
            let colmax = (0..4).map(|i| t.similarity[(i, j)]).fold(f64::MIN, f64::max);
            assert_eq!(sh[(nz[0], j)], colmax);
        }
    }

    #[test]
    fn default_shapes_match_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SccConfig::default();
        assert_eq!(cfg.knn_k, 9);
        let p = SccParams::init(&mut rng, &cfg).unwrap();
        let x = random_points(&mut rng, 300, 128);
        let c = scc_forward(&x, &p).unwrap();
        assert_eq!((c.count(), c.dim()), (100, 256));
    }

    #[test]
    fn unassigned_center_keeps_its_source_mean() {
        // one point, one center: hand computation of the aggregation
        let cfg = SccConfig {
            in_dim: 2,
            branch_dim: 2,
            center_dim: 2,
            num_groups: 1,
            num_centers: 1,
            knn_k: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = SccParams::init(&mut rng, &cfg).unwrap();
        p.l_r = LinearLayer::new(Mat::identity(2), vec![0.0; 2]).unwrap();
        p.l_s = LinearLayer::new(Mat::identity(2), vec![0.0; 2]).unwrap();
        p.l_c = LinearLayer::new(Mat::identity(2), vec![0.0; 2]).unwrap();
        let x = FeatureMatrix::new(Mat::from_rows(&[[3.0, 1.0]]).unwrap(), vec![[0.0; 3]]).unwrap();
        let (c, t) = scc_forward_traced(&x, &p).unwrap();
        // group norm of [3,1] with one group: mean 2, var 1 -> [1,-1]/sqrt(1+eps)
        let h = 1.0 / (1.0f64 + 1e-5).sqrt();
        // the center is the point itself: cos = 1, S = sigmoid(1)
        let s = sigmoid(1.0);
        let expect = [(h + s * h) / (1.0 + s), (-h - s * h) / (1.0 + s)];
        assert!((t.aggregated[(0, 0)] - expect[0]).abs() < 1e-15);
        assert!((c.values()[(0, 1)] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SccParams::init(&mut rng, &small_cfg()).unwrap();
        let x = random_points(&mut rng, 3, 6);
        assert!(matches!(scc_forward(&x, &p), Err(Error::InvalidArgument(_))));
        let x = random_points(&mut rng, 10, 5);
        assert!(scc_forward(&x, &p).is_err());
    }
}
