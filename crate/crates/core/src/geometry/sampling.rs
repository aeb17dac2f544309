use std::cmp::Ordering;

use rayon::prelude::*;

use super::{centroid, dist2, PointCloud};
use crate::error::{Error, Result};

/// Lexicographic `(x, y, z)` order using IEEE total ordering.
pub fn lex_cmp(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then_with(|| a[1].total_cmp(&b[1]))
        .then_with(|| a[2].total_cmp(&b[2]))
}

/// Indices sorted by position (lexicographic), then by the original index.
pub fn canonical_order(positions: &[[f64; 3]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&positions[a], &positions[b]).then(a.cmp(&b)));
    order
}

/// Deterministic farthest point sampling over the cloud's positions.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    fps_indices(&cloud.positions(), m)
}

/// Farthest point sampling on raw positions.
///
/// The seed is the point farthest from the centroid. Every later pick
/// maximizes the squared distance to the already selected set. Ties go to
/// the lexicographically smallest position, then the smallest index, so the
/// selected positions depend only on the point set.
pub fn fps_indices(positions: &[[f64; 3]], m: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "farthest point sampling needs 1 <= m <= N (m = {m}, N = {n})"
        )));
    }
    let order = canonical_order(positions);
    let c = centroid(positions);

    let mut best = order[0];
    let mut best_d = f64::NEG_INFINITY;
    for &i in &order {
        let d = dist2(&positions[i], &c);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut last = best;
    selected.push(best);
    taken[best] = true;

    while selected.len() < m {
        let lp = positions[last];
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for &i in &order {
            if taken[i] {
                continue;
            }
            let d = dist2(&positions[i], &lp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > next_d {
                next_d = min_d[i];
                next = i;
            }
        }
        taken[next] = true;
        selected.push(next);
        last = next;
    }
    Ok(selected)
}

fn neighbor_cmp(base: &[[f64; 3]], a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| lex_cmp(&base[a.1], &base[b.1]))
        .then(a.1.cmp(&b.1))
}

/// For every query row, the `k` base indices closest in Euclidean distance,
/// sorted ascending. Ties break on lexicographic base coordinates, then index.
pub fn knn(query: &[[f64; 3]], base: &[[f64; 3]], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > base.len() {
        return Err(Error::invalid(format!(
            "knn asked for k = {k} neighbors among {} points",
            base.len()
        )));
    }
    let one = |q: &[f64; 3]| -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut cand: Vec<(f64, usize)> = base
            .iter()
            .enumerate()
            .map(|(j, b)| (dist2(q, b), j))
            .collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, |&a, &b| neighbor_cmp(base, a, b));
            cand.truncate(k);
        }
        cand.sort_by(|&a, &b| neighbor_cmp(base, a, b));
        cand.into_iter().map(|(_, j)| j).collect()
    };
    if query.len() * base.len() > 50_000 {
        Ok(query.par_iter().map(one).collect())
    } else {
        Ok(query.iter().map(one).collect())
    }
}
