//! Cross-source context cluster: correlates query and candidate centers and
//! pools the top correlated pairs into a single reranking score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{visit_linear, visit_linear_mut, Parameters};
use super::tensor::{cosine_similarity_matrix, sigmoid, CenterFeatures, LinearLayer, Mat};
use crate::error::{Error, Result};

/// Shrink factor applied to the default initialisation of the logit layer.
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsccConfig {
    pub center_dim: usize,
    pub hidden_dim: usize,
    pub top_k: usize,
}

impl Default for CsccConfig {
    fn default() -> Self {
        CsccConfig {
            center_dim: 256,
            hidden_dim: 256,
            top_k: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsccParams {
    pub alpha: f64,
    pub beta: f64,
    /// Maps a weighted `[query; candidate]` pair (2 * D_c) to the hidden width.
    pub l_c: LinearLayer,
    /// Maps the pooled hidden vector to one logit.
    pub l_f: LinearLayer,
    pub top_k: usize,
}

impl CsccParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &CsccConfig) -> Result<Self> {
        let l_c = LinearLayer::init(rng, 2 * cfg.center_dim, cfg.hidden_dim);
        let mut l_f = LinearLayer::init(rng, cfg.hidden_dim, 1);
        // start the score near 0.5 so early updates are not spent undoing a
        // large random logit
        l_f.weight.data_mut().iter_mut().for_each(|w| *w *= HEAD_INIT_SCALE);
        l_f.bias.iter_mut().for_each(|b| *b *= HEAD_INIT_SCALE);
        let p = CsccParams {
            alpha: 1.0,
            beta: 0.0,
            l_c,
            l_f,
            top_k: cfg.top_k,
        };
        if p.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.l_c.in_dim().is_multiple_of(2) {
            return Err(Error::invalid("l_c input width must be 2 * D_c"));
        }
        if self.l_f.in_dim() != self.l_c.out_dim() || self.l_f.out_dim() != 1 {
            return Err(Error::invalid("l_f must map the l_c width to a single logit"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Numeric("non-finite alpha/beta".into()));
        }
        Ok(())
    }

    pub fn center_dim(&self) -> usize {
        self.l_c.in_dim() / 2
    }

    pub fn hidden_dim(&self) -> usize {
        self.l_c.out_dim()
    }

    pub fn config(&self) -> CsccConfig {
        CsccConfig {
            center_dim: self.center_dim(),
            hidden_dim: self.hidden_dim(),
            top_k: self.top_k,
        }
    }
}

impl Parameters for CsccParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("cscc.alpha", &[], std::slice::from_ref(&self.alpha));
        f("cscc.beta", &[], std::slice::from_ref(&self.beta));
        visit_linear("cscc.l_c", &self.l_c, f);
        visit_linear("cscc.l_f", &self.l_f, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        f("cscc.alpha", &[], std::slice::from_mut(&mut self.alpha));
        f("cscc.beta", &[], std::slice::from_mut(&mut self.beta));
        visit_linear_mut("cscc.l_c", &mut self.l_c, f);
        visit_linear_mut("cscc.l_f", &mut self.l_f, f);
    }
}

#[derive(Debug, Clone)]
pub struct CsccTrace {
    /// Cosine similarity between query and candidate centers (M_q x M_d).
    pub cosine: Mat,
    /// `C = sigmoid(alpha * cos + beta)`.
    pub correlation: Mat,
    /// Kept `(i, j)` pairs, in descending correlation order.
    pub kept: Vec<(usize, usize)>,
    /// `C` with everything outside `kept` zeroed.
    pub masked: Mat,
    /// Query half of `l_c` applied to the query centers (M_q x H).
    pub query_proj: Mat,
    /// Candidate half of `l_c` applied to the candidate centers (M_d x H).
    pub cand_proj: Mat,
    /// `c_m(j) = sum_i masked[i][j]`.
    pub col_sums: Vec<f64>,
    /// `c_n = mean_i sum_j masked[i][j]`.
    pub c_n: f64,
    /// `sum_i f̂_ij / (1 + c_m(j))` per candidate center (M_d x H).
    pub inner: Mat,
    /// Pooled pair feature `f̂_c` (H).
    pub pooled: Vec<f64>,
    pub logit: f64,
    pub score: f64,
}

/// Indices of the `k` largest entries, ties broken by `(i, j)` ascending.
pub(crate) fn top_k_pairs(c: &Mat, k: usize) -> Vec<(usize, usize)> {
    let cols = c.cols();
    let mut all: Vec<usize> = (0..c.rows() * cols).collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    let data = c.data();
    let cmp = |a: &usize, b: &usize| data[*b].total_cmp(&data[*a]).then(a.cmp(b));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|f| (f / cols, f % cols)).collect()
}

pub fn cscc_forward(q: &CenterFeatures, d: &CenterFeatures, params: &CsccParams) -> Result<f64> {
    Ok(cscc_forward_traced(q, d, params)?.score)
}

pub fn cscc_forward_traced(q: &CenterFeatures, d: &CenterFeatures, params: &CsccParams) -> Result<CsccTrace> {
    params.validate()?;
    let dc = params.center_dim();
    if q.dim() != dc || d.dim() != dc {
        return Err(Error::invalid(format!(
            "CSCC expects {dc}-dim centers, got query {} and candidate {}",
            q.dim(),
            d.dim()
        )));
    }
    let (mq, md) = (q.count(), d.count());
    let h = params.hidden_dim();

    let cosine = cosine_similarity_matrix(q.values(), d.values())?;
    let mut correlation = cosine.clone();
    correlation
        .data_mut()
        .iter_mut()
        .for_each(|c| *c = sigmoid(params.alpha * *c + params.beta));

    let kept = top_k_pairs(&correlation, params.top_k);
    let mut masked = Mat::zeros(mq, md);
    for &(i, j) in &kept {
        masked[(i, j)] = correlation[(i, j)];
    }

    // l_c([C q_i, C d_j]) = C (Wq q_i + Wd d_j) + b
    let w = &params.l_c.weight;
    let mut wq = Mat::zeros(h, dc);
    let mut wd = Mat::zeros(h, dc);
    for r in 0..h {
        wq.row_mut(r).copy_from_slice(&w.row(r)[..dc]);
        wd.row_mut(r).copy_from_slice(&w.row(r)[dc..]);
    }
    let query_proj = q.values().matmul_t(&wq)?;
    let cand_proj = d.values().matmul_t(&wd)?;

    let mut col_sums = vec![0.0; md];
    let mut col_feat = Mat::zeros(md, h);
    // accumulate in row-major (i, j) order
    let mut kept_sorted = kept.clone();
    kept_sorted.sort_unstable();
    for &(i, j) in &kept_sorted {
        let c = masked[(i, j)];
        col_sums[j] += c;
        let (pi, qj) = (query_proj.row(i), cand_proj.row(j));
        for (k, acc) in col_feat.row_mut(j).iter_mut().enumerate() {
            *acc += c * (pi[k] + qj[k]) + params.l_c.bias[k];
        }
    }
    let row_total: f64 = (0..mq).map(|i| masked.row(i).iter().sum::<f64>()).sum();
    let c_n = if mq > 0 { row_total / mq as f64 } else { 0.0 };

    let mut inner = col_feat;
    let mut pooled = vec![0.0; h];
    for j in 0..md {
        let den = 1.0 + col_sums[j];
        for (k, v) in inner.row_mut(j).iter_mut().enumerate() {
            *v /= den;
            pooled[k] += *v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= 1.0 + c_n);

    let mut logit = [0.0];
    params.l_f.forward_row(&pooled, &mut logit);
    let logit = logit[0];
    if !logit.is_finite() {
        return Err(Error::Numeric("CSCC produced a non-finite logit".into()));
    }
    Ok(CsccTrace {
        cosine,
        correlation,
        kept,
        masked,
        query_proj,
        cand_proj,
        col_sums,
        c_n,
        inner,
        pooled,
        logit,
        score: sigmoid(logit),
    })
}
