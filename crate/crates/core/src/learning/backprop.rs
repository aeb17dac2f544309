//! Reverse-mode derivatives of the SCC and CSCC kernels. The argmax
//! assignment and the top-k mask are piecewise constant and are held fixed.

use crate::kernels::params::Parameters;
use crate::kernels::tensor::{dot, norm, GroupNormParams, LinearLayer, Mat};
use crate::kernels::{CenterFeatures, CsccParams, CsccTrace, SccParams, SccTrace};

/// Parameter-shaped zero gradient buffer.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.fill(0.0);
    g
}

/// Adds `∂cos(a,b)/∂a * w` to `ga` and `∂cos(a,b)/∂b * w` to `gb`.
fn cosine_backward(a: &[f64], b: &[f64], cos: f64, w: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || w == 0.0 {
        return;
    }
    for k in 0..a.len() {
        let (ua, ub) = (a[k] / na, b[k] / nb);
        ga[k] += w * (ub - cos * ua) / na;
        gb[k] += w * (ua - cos * ub) / nb;
    }
}

/// `y = x Wᵀ + b`: accumulates weight and bias gradients from `dy`.
fn linear_backward_params(layer_grad: &mut LinearLayer, x: &Mat, dy: &Mat) {
    let (out, inp) = (layer_grad.weight.rows(), layer_grad.weight.cols());
    let w = layer_grad.weight.data_mut();
    for r in 0..x.rows() {
        let (xr, dr) = (x.row(r), dy.row(r));
        for o in 0..out {
            let d = dr[o];
            if d == 0.0 {
                continue;
            }
            let wrow = &mut w[o * inp..(o + 1) * inp];
            for (wv, xv) in wrow.iter_mut().zip(xr) {
                *wv += d * xv;
            }
        }
        for (b, d) in layer_grad.bias.iter_mut().zip(dr) {
            *b += d;
        }
    }
}

/// `dx = dy W`.
fn linear_backward_input(layer: &LinearLayer, dy: &Mat) -> Mat {
    let (out, inp) = (layer.weight.rows(), layer.weight.cols());
    let mut dx = Mat::zeros(dy.rows(), inp);
    for r in 0..dy.rows() {
        let dr = dy.row(r);
        let xr = dx.row_mut(r);
        for (o, &d) in dr.iter().enumerate().take(out) {
            if d == 0.0 {
                continue;
            }
            for (xv, wv) in xr.iter_mut().zip(layer.weight.row(o)) {
                *xv += d * wv;
            }
        }
    }
    dx
}

/// GroupNorm backward: returns `dx` and accumulates `dgamma`, `dbeta`.
fn group_norm_backward(
    p: &GroupNormParams,
    grad: &mut GroupNormParams,
    xhat: &Mat,
    inv_std: &[f64],
    dy: &Mat,
) -> Mat {
    let dim = xhat.cols();
    let g = dim / p.num_groups;
    let mut dx = Mat::zeros(xhat.rows(), dim);
    let mut dxhat = vec![0.0; g];
    for i in 0..xhat.rows() {
        for grp in 0..p.num_groups {
            let inv = inv_std[i * p.num_groups + grp];
            let base = grp * g;
            let (mut m1, mut m2) = (0.0, 0.0);
            for k in 0..g {
                let c = base + k;
                let d = dy[(i, c)];
                grad.gamma[c] += d * xhat[(i, c)];
                grad.beta_shift[c] += d;
                dxhat[k] = d * p.gamma[c];
                m1 += dxhat[k];
                m2 += dxhat[k] * xhat[(i, c)];
            }
            m1 /= g as f64;
            m2 /= g as f64;
            for k in 0..g {
                let c = base + k;
                dx[(i, c)] = inv * (dxhat[k] - m1 - xhat[(i, c)] * m2);
            }
        }
    }
    dx
}

/// Gradients of one CSCC score with respect to its parameters and both
/// center sets, given `dlogit = ∂L/∂logit`.
#[derive(Debug, Clone)]
pub struct CsccGrads {
    pub params: CsccParams,
    pub query: Mat,
    pub candidate: Mat,
}

pub fn cscc_backward(
    q: &CenterFeatures,
    d: &CenterFeatures,
    params: &CsccParams,
    trace: &CsccTrace,
    dlogit: f64,
) -> CsccGrads {
    let (mq, md) = (q.count(), d.count());
    let dc = params.center_dim();
    let h = params.hidden_dim();
    let mut gp = zeros_like(params);

    // logit = w_f · pooled + b_f
    for (gw, p) in gp.l_f.weight.data_mut().iter_mut().zip(&trace.pooled) {
        *gw = dlogit * p;
    }
    gp.l_f.bias[0] = dlogit;
    let big_g: Vec<f64> = params.l_f.weight.row(0).iter().map(|w| dlogit * w).collect();

    // pooled = (Σ_j inner_j) / (1 + c_n)
    let scale = 1.0 + trace.c_n;
    let d_a: Vec<f64> = big_g.iter().map(|g| g / scale).collect();
    let d_cn = -dot(&big_g, &trace.pooled) / scale;

    // inner_j = F_j / (1 + c_m(j))
    let mut u = Mat::zeros(md, h);
    let mut d_cm = vec![0.0; md];
    for j in 0..md {
        let den = 1.0 + trace.col_sums[j];
        for k in 0..h {
            u[(j, k)] = d_a[k] / den;
        }
        d_cm[j] = -dot(&d_a, trace.inner.row(j)) / den;
    }

    let mut d_p = Mat::zeros(mq, h);
    let mut d_q = Mat::zeros(md, h);
    let mut d_corr = Mat::zeros(mq, md);
    let mut kept = trace.kept.clone();
    kept.sort_unstable();
    for &(i, j) in &kept {
        let c = trace.masked[(i, j)];
        let (pi, qj, uj) = (trace.query_proj.row(i), trace.cand_proj.row(j), u.row(j));
        let mut dcij = d_cm[j] + d_cn / mq as f64;
        for k in 0..h {
            dcij += uj[k] * (pi[k] + qj[k]);
        }
        d_corr[(i, j)] = dcij;
        for k in 0..h {
            d_p[(i, k)] += c * uj[k];
            d_q[(j, k)] += c * uj[k];
            gp.l_c.bias[k] += uj[k];
        }
    }

    // P = q Wqᵀ, Q = d Wdᵀ, with W = [Wq | Wd]
    let mut dq = Mat::zeros(mq, dc);
    let mut dd = Mat::zeros(md, dc);
    let w = &params.l_c.weight;
    {
        let gw = gp.l_c.weight.data_mut();
        for o in 0..h {
            let grow = &mut gw[o * 2 * dc..(o + 1) * 2 * dc];
            for i in 0..mq {
                let g = d_p[(i, o)];
                if g != 0.0 {
                    for (gv, x) in grow[..dc].iter_mut().zip(q.values().row(i)) {
                        *gv += g * x;
                    }
                    for (x, wv) in dq.row_mut(i).iter_mut().zip(&w.row(o)[..dc]) {
                        *x += g * wv;
                    }
                }
            }
            for j in 0..md {
                let g = d_q[(j, o)];
                if g != 0.0 {
                    for (gv, x) in grow[dc..].iter_mut().zip(d.values().row(j)) {
                        *gv += g * x;
                    }
                    for (x, wv) in dd.row_mut(j).iter_mut().zip(&w.row(o)[dc..]) {
                        *x += g * wv;
                    }
                }
            }
        }
    }

    // C = sigmoid(alpha * cos + beta)
    for &(i, j) in &kept {
        let c = trace.correlation[(i, j)];
        let pre = d_corr[(i, j)] * c * (1.0 - c);
        let cos = trace.cosine[(i, j)];
        gp.alpha += pre * cos;
        gp.beta += pre;
        let (mut gi, mut gj) = (vec![0.0; dc], vec![0.0; dc]);
        cosine_backward(
            q.values().row(i),
            d.values().row(j),
            cos,
            params.alpha * pre,
            &mut gi,
            &mut gj,
        );
        for (x, g) in dq.row_mut(i).iter_mut().zip(&gi) {
            *x += g;
        }
        for (x, g) in dd.row_mut(j).iter_mut().zip(&gj) {
            *x += g;
        }
    }

    CsccGrads {
        params: gp,
        query: dq,
        candidate: dd,
    }
}

/// Parameter gradient of SCC given `d_out = ∂L/∂(output centers)`.
/// The input point features are treated as constants.
pub fn scc_backward(params: &SccParams, trace: &SccTrace, d_out: &Mat) -> SccParams {
    let mut gp = zeros_like(params);
    let (m, n) = (trace.centers.len(), trace.input.rows());
    let ds = params.branch_dim();

    // out = l_c(aggregated)
    linear_backward_params(&mut gp.l_c, &trace.aggregated, d_out);
    let d_agg = linear_backward_input(&params.l_c, d_out);

    // aggregated_i = (center_src_i + Σ_j s_ij src_j) / den_i
    let mut d_num = Mat::zeros(m, ds);
    let mut d_den = vec![0.0; m];
    for i in 0..m {
        let den = trace.denominators[i];
        for k in 0..ds {
            d_num[(i, k)] = d_agg[(i, k)] / den;
        }
        d_den[i] = -dot(d_agg.row(i), trace.aggregated.row(i)) / den;
    }
    let mut d_src = Mat::zeros(n, ds);
    let mut d_center_ref = Mat::zeros(m, ds);
    let mut d_ref = Mat::zeros(n, ds);
    for (j, &i) in trace.assignment.iter().enumerate() {
        let s = trace.similarity[(i, j)];
        let ds_ij = dot(d_num.row(i), trace.point_src.row(j)) + d_den[i];
        for (x, g) in d_src.row_mut(j).iter_mut().zip(d_num.row(i)) {
            *x += s * g;
        }
        let pre = ds_ij * s * (1.0 - s);
        let cos = trace.cosine[(i, j)];
        gp.alpha += pre * cos;
        gp.beta += pre;
        let mut gc = vec![0.0; ds];
        let mut gpnt = vec![0.0; ds];
        cosine_backward(
            trace.center_ref.row(i),
            trace.point_ref.row(j),
            cos,
            params.alpha * pre,
            &mut gc,
            &mut gpnt,
        );
        for (x, g) in d_center_ref.row_mut(i).iter_mut().zip(&gc) {
            *x += g;
        }
        for (x, g) in d_ref.row_mut(j).iter_mut().zip(&gpnt) {
            *x += g;
        }
    }

    // center_ref / center_src are neighbourhood means; d_num is ∂L/∂center_src
    // center_* = mean over each center's neighbourhood
    for (i, nb) in trace.neighbors.iter().enumerate() {
        let inv = 1.0 / nb.len() as f64;
        for &j in nb {
            for k in 0..ds {
                d_ref[(j, k)] += d_center_ref[(i, k)] * inv;
                d_src[(j, k)] += d_num[(i, k)] * inv;
            }
        }
    }

    let d_ref_pre = group_norm_backward(&params.gn_r, &mut gp.gn_r, &trace.ref_normalized, &trace.ref_inv_std, &d_ref);
    let d_src_pre = group_norm_backward(&params.gn_s, &mut gp.gn_s, &trace.src_normalized, &trace.src_inv_std, &d_src);
    linear_backward_params(&mut gp.l_r, &trace.input, &d_ref_pre);
    linear_backward_params(&mut gp.l_s, &trace.input, &d_src_pre);
    gp
}
