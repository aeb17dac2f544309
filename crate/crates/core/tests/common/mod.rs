//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops and full sorts, sharing no code with the
//! library beyond its public data types.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;

use cscpr::geometry::{PointCloud, Pose};
use cscpr::kernels::{CenterFeatures, CsccParams, FeatureMatrix, LinearLayer, Mat, SccParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lex3(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    for c in 0..3 {
        match a[c].total_cmp(&b[c]) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[c] - b[c];
        s += d * d;
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Greedy farthest point sampling recomputing every min-distance from
/// scratch. Seed: the point farthest from the mean position. Ties go to the
/// lexicographically smallest position, then the smallest index.
pub fn brute_fps(pos: &[[f64; 3]], m: usize) -> Vec<usize> {
    let n = pos.len();
    let mut sorted: Vec<&[f64; 3]> = pos.iter().collect();
    sorted.sort_by(|a, b| lex3(a, b));
    let mut mean = [0.0; 3];
    for p in &sorted {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let better = |da: f64, a: usize, db: f64, b: usize| -> bool {
        da.total_cmp(&db)
            .then_with(|| lex3(&pos[b], &pos[a]))
            .then(b.cmp(&a))
            .is_gt()
    };
    let mut first = 0;
    for i in 1..n {
        if better(sq(&pos[i], &mean), i, sq(&pos[first], &mean), first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq(&pos[i], &pos[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, b)| better(d, i, bd, b)) {
                best = Some((d, i));
            }
        }
        chosen.push(best.expect("an unselected point remains").1);
    }
    chosen
}

/// Full sort by squared distance, then position, then index.
pub fn brute_knn(q: &[f64; 3], base: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..base.len()).collect();
    all.sort_by(|&a, &b| {
        sq(q, &base[a])
            .total_cmp(&sq(q, &base[b]))
            .then_with(|| lex3(&base[a], &base[b]))
            .then(a.cmp(&b))
    });
    all.truncate(k);
    all
}

fn world_cells(cloud: &PointCloud, pose: &Pose, voxel: f64) -> HashSet<(i64, i64, i64)> {
    let r = pose.rotation();
    let t = pose.translation();
    cloud
        .points()
        .iter()
        .map(|p| {
            let x = p.position;
            let mut w = [0.0; 3];
            for i in 0..3 {
                w[i] = r[(i, 0)] * x[0] + r[(i, 1)] * x[1] + r[(i, 2)] * x[2] + t[i];
            }
            let f = |v: f64| (v / voxel).floor() as i64;
            (f(w[0]), f(w[1]), f(w[2]))
        })
        .collect()
}

/// `(|A ∩ B| / |A ∪ B|, |A ∩ B| / |A|)` over world-frame voxel sets.
pub fn brute_overlaps(a: &PointCloud, b: &PointCloud, pa: &Pose, pb: &Pose, voxel: f64) -> (f64, f64) {
    let va = world_cells(a, pa, voxel);
    let vb = world_cells(b, pb, voxel);
    let inter = va.intersection(&vb).count();
    let union = va.union(&vb).count();
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let cov = if va.is_empty() { 0.0 } else { inter as f64 / va.len() as f64 };
    (iou, cov)
}

/// Whether `set` dominates the graph, from the edge list alone.
pub fn brute_dominates(n: usize, edges: &[(usize, usize)], set: &[usize]) -> bool {
    (0..n).all(|v| set.contains(&v) || edges.iter().any(|&(a, b)| (a == v && set.contains(&b)) || (b == v && set.contains(&a))))
}

/// Size of a minimum dominating set by subset enumeration.
pub fn min_dominating_size(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut nb = vec![0u32; n];
    for v in 0..n {
        nb[v] |= 1 << v;
    }
    for &(a, b) in edges {
        nb[a] |= 1 << b;
        nb[b] |= 1 << a;
    }
    let full = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
    let mut best = n;
    for mask in 0u32..=full {
        let size = mask.count_ones() as usize;
        if size >= best {
            continue;
        }
        let mut cov = 0u32;
        for (v, nv) in nb.iter().enumerate() {
            if mask & (1 << v) != 0 {
                cov |= nv;
            }
        }
        if cov == full {
            best = size;
        }
    }
    best
}

fn linear(layer: &LinearLayer, x: &[f64]) -> Vec<f64> {
    let w = &layer.weight;
    let mut y = vec![0.0; w.rows()];
    for o in 0..w.rows() {
        let mut s = layer.bias[o];
        for i in 0..w.cols() {
            s += w[(o, i)] * x[i];
        }
        y[o] = s;
    }
    y
}

fn group_norm(x: &[f64], groups: usize, gamma: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let g = x.len() / groups;
    let mut y = vec![0.0; x.len()];
    for grp in 0..groups {
        let lo = grp * g;
        let mut mean = 0.0;
        for c in lo..lo + g {
            mean += x[c];
        }
        mean /= g as f64;
        let mut var = 0.0;
        for c in lo..lo + g {
            var += (x[c] - mean) * (x[c] - mean);
        }
        var /= g as f64;
        for c in lo..lo + g {
            y[c] = gamma[c] * (x[c] - mean) / (var + eps).sqrt() + shift[c];
        }
    }
    y
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (ua, ub) = (unit(a), unit(b));
    let mut s = 0.0;
    for k in 0..ua.len() {
        s += ua[k] * ub[k];
    }
    s
}

fn row_order(x: &FeatureMatrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        lex3(&x.positions()[a], &x.positions()[b])
            .then_with(|| {
                for (u, v) in x.row(a).iter().zip(x.row(b)) {
                    match u.total_cmp(v) {
                        Ordering::Equal => continue,
                        o => return o,
                    }
                }
                Ordering::Equal
            })
            .then(a.cmp(&b))
    });
    idx
}

pub struct SccReference {
    pub centers: Vec<Vec<f64>>,
    pub positions: Vec<[f64; 3]>,
    /// Smallest gap between a point's best and second-best center similarity.
    pub argmax_margin: f64,
}

/// Self context cluster, step by step: branch projections with group norm,
/// FPS centers with KNN means, sigmoid similarity, per-point argmax, the
/// normalized aggregation and the output projection.
pub fn reference_scc(x: &FeatureMatrix, p: &SccParams) -> SccReference {
    let order = row_order(x);
    let pos: Vec<[f64; 3]> = order.iter().map(|&i| x.positions()[i]).collect();
    let rows: Vec<&[f64]> = order.iter().map(|&i| x.row(i)).collect();
    let n = rows.len();

    let mut fr = Vec::with_capacity(n);
    let mut fs = Vec::with_capacity(n);
    for r in &rows {
        let a = linear(&p.l_r, r);
        fr.push(group_norm(&a, p.gn_r.num_groups, &p.gn_r.gamma, &p.gn_r.beta_shift, p.gn_r.epsilon));
        let b = linear(&p.l_s, r);
        fs.push(group_norm(&b, p.gn_s.num_groups, &p.gn_s.gamma, &p.gn_s.beta_shift, p.gn_s.epsilon));
    }
    let ds = fr[0].len();

    let centers = brute_fps(&pos, p.num_centers);
    let m = centers.len();
    let mut cr = vec![vec![0.0; ds]; m];
    let mut cs = vec![vec![0.0; ds]; m];
    for (i, &c) in centers.iter().enumerate() {
        let nb = brute_knn(&pos[c], &pos, p.knn_k);
        for &j in &nb {
            for k in 0..ds {
                cr[i][k] += fr[j][k];
                cs[i][k] += fs[j][k];
            }
        }
        for k in 0..ds {
            cr[i][k] /= nb.len() as f64;
            cs[i][k] /= nb.len() as f64;
        }
    }

    let mut s = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            s[i][j] = sigmoid(p.alpha * cosine(&cr[i], &fr[j]) + p.beta);
        }
    }
    let mut s_hat = vec![vec![0.0; n]; m];
    let mut argmax_margin = f64::INFINITY;
    for j in 0..n {
        let mut best = 0;
        for i in 1..m {
            if s[i][j] > s[best][j] {
                best = i;
            }
        }
        s_hat[best][j] = s[best][j];
        for i in 0..m {
            if i != best {
                argmax_margin = argmax_margin.min(s[best][j] - s[i][j]);
            }
        }
    }

    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut num = cs[i].clone();
        let mut den = 1.0;
        for j in 0..n {
            den += s_hat[i][j];
            for k in 0..ds {
                num[k] += s_hat[i][j] * fs[j][k];
            }
        }
        let agg: Vec<f64> = num.iter().map(|v| v / den).collect();
        out.push(linear(&p.l_c, &agg));
    }
    SccReference {
        centers: out,
        positions: centers.iter().map(|&c| pos[c]).collect(),
        argmax_margin,
    }
}

/// Cross-source context cluster: sigmoid correlation, top-k mask, per-pair
/// projection of the weighted concatenation, column then global pooling.
/// Also returns the gap between the last kept and first dropped correlation.
pub fn reference_cscc(q: &CenterFeatures, d: &CenterFeatures, p: &CsccParams) -> (f64, f64) {
    let (mq, md) = (q.count(), d.count());
    let qv = q.values();
    let dv = d.values();
    let mut c = vec![vec![0.0; md]; mq];
    let mut all = Vec::new();
    for i in 0..mq {
        for j in 0..md {
            c[i][j] = sigmoid(p.alpha * cosine(qv.row(i), dv.row(j)) + p.beta);
            all.push((c[i][j], i, j));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let gap = if p.top_k > 0 && p.top_k < all.len() {
        all[p.top_k - 1].0 - all[p.top_k].0
    } else {
        f64::INFINITY
    };
    let mut kept = vec![vec![false; md]; mq];
    for &(_, i, j) in all.iter().take(p.top_k) {
        kept[i][j] = true;
    }

    let h = p.l_c.out_dim();
    let mut pooled = vec![0.0; h];
    let mut c_n = 0.0;
    for i in 0..mq {
        for j in 0..md {
            if kept[i][j] {
                c_n += c[i][j];
            }
        }
    }
    c_n /= mq as f64;
    for j in 0..md {
        let mut c_m = 0.0;
        let mut sum = vec![0.0; h];
        for i in 0..mq {
            if !kept[i][j] {
                continue;
            }
            c_m += c[i][j];
            let mut cat: Vec<f64> = qv.row(i).iter().map(|v| c[i][j] * v).collect();
            cat.extend(dv.row(j).iter().map(|v| c[i][j] * v));
            let f = linear(&p.l_c, &cat);
            for k in 0..h {
                sum[k] += f[k];
            }
        }
        for k in 0..h {
            pooled[k] += sum[k] / (1.0 + c_m);
        }
    }
    for v in &mut pooled {
        *v /= 1.0 + c_n;
    }
    (sigmoid(linear(&p.l_f, &pooled)[0]), gap)
}

/// `max |a - b| / max |b|` over matching entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureMatrix {
    let vals: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pos = (0..n)
        .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)])
        .collect();
    FeatureMatrix::new(Mat::from_vec(n, dim, vals).unwrap(), pos).unwrap()
}

pub fn random_centers(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> CenterFeatures {
    CenterFeatures::new(random_features(rng, m, dim), m).unwrap()
}

/// Positions on a coarse lattice so exact distance ties are common.
pub fn lattice_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(0..4) as f64 * 0.5,
                rng.random_range(0..4) as f64 * 0.5,
                rng.random_range(0..3) as f64 * 0.5,
            ]
        })
        .collect()
}

pub fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

pub fn random_pose(rng: &mut ChaCha8Rng, shift: f64) -> Pose {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let t = [
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
    ];
    Pose::from_axis_angle(axis, rng.random_range(-3.1..3.1), t)
}
