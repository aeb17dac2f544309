//! Geometric-verification reranker: RANSAC over mutual nearest-neighbour
//! feature matches, Kabsch alignment, scored by aligned cloud distance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reorder_head, RankedList};
use crate::error::{Error, Result};
use crate::geometry::{dist2, kabsch_align, voxel_downsample, PointCloud, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Metres.
    pub inlier_threshold: f64,
    /// Clouds are voxel-downsampled to at most this many points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 256,
            inlier_threshold: 0.05,
            max_points: 1024,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::invalid(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if self.max_points < 3 {
            return Err(Error::invalid("the baseline needs at least 3 points per cloud"));
        }
        Ok(())
    }
}

/// A downsampled cloud plus its matching rows: colour, position centred and
/// divided by the cloud diameter, normal.
#[derive(Debug, Clone)]
pub struct BaselineFeatures {
    pub positions: Vec<[f64; 3]>,
    pub rows: Vec<[f64; 9]>,
}

const START_VOXEL: f64 = 0.02;

pub fn baseline_features(cloud: &PointCloud, max_points: usize) -> Result<BaselineFeatures> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot verify against an empty cloud"));
    }
    let small = if cloud.len() > max_points {
        voxel_downsample(cloud, START_VOXEL, max_points)?
    } else {
        cloud.clone()
    };
    let c = small.centroid();
    let diameter = small.diameter();
    let scale = if diameter > 0.0 { 1.0 / diameter } else { 1.0 };
    let rows = small
        .rows()
        .into_iter()
        .map(|mut r| {
            for k in 0..3 {
                r[3 + k] = (r[3 + k] - c[k]) * scale;
            }
            r
        })
        .collect();
    Ok(BaselineFeatures {
        positions: small.positions(),
        rows,
    })
}

fn nearest<const D: usize>(p: &[f64; D], set: &[[f64; D]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, s) in set.iter().enumerate() {
        let d: f64 = p.iter().zip(s).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index pairs `(i, j)` where `q[i]` and `d[j]` are each other's nearest rows.
pub(crate) fn mutual_matches(q: &[[f64; 9]], d: &[[f64; 9]]) -> Vec<(usize, usize)> {
    let fwd: Vec<usize> = q.par_iter().map(|r| nearest(r, d).0).collect();
    let bwd: Vec<usize> = d.par_iter().map(|r| nearest(r, q).0).collect();
    fwd.iter()
        .enumerate()
        .filter(|&(i, &j)| bwd[j] == i)
        .map(|(i, &j)| (i, j))
        .collect()
}

/// Mean distance from each moved query point to its nearest candidate point.
fn mean_nn_distance(pose: &Pose, q: &[[f64; 3]], d: &[[f64; 3]]) -> f64 {
    let sum: f64 = q.par_iter().map(|p| nearest(&pose.apply(p), d).1.sqrt()).sum();
    sum / q.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineScore {
    /// Negative mean nearest-neighbour distance; `-inf` when flagged.
    pub score: f64,
    pub pose: Pose,
    pub matches: usize,
    pub inliers: usize,
    /// No usable alignment (too few matches or only degenerate samples).
    pub flagged: bool,
}

/// Aligns the query onto the candidate and scores the fit.
pub fn verify_pair(q: &BaselineFeatures, d: &BaselineFeatures, cfg: &RansacConfig, seed: u64) -> BaselineScore {
    if q.rows.is_empty() || d.rows.is_empty() {
        return flagged(0);
    }
    let matches = if cfg.iterations == 0 {
        Vec::new()
    } else {
        mutual_matches(&q.rows, &d.rows)
    };
    let scored = |pose: Pose, inliers: usize| BaselineScore {
        score: -mean_nn_distance(&pose, &q.positions, &d.positions),
        pose,
        matches: matches.len(),
        inliers,
        flagged: false,
    };
    if cfg.iterations == 0 {
        return scored(Pose::identity(), 0);
    }
    if matches.len() < 3 {
        return flagged(matches.len());
    }
    let src: Vec<[f64; 3]> = matches.iter().map(|&(i, _)| q.positions[i]).collect();
    let dst: Vec<[f64; 3]> = matches.iter().map(|&(_, j)| d.positions[j]).collect();
    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let inlier_set = |pose: &Pose| -> Vec<usize> {
        (0..src.len())
            .filter(|&k| dist2(&pose.apply(&src[k]), &dst[k]) <= thr2)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let sample = rand::seq::index::sample(&mut rng, src.len(), 3);
        let s: Vec<[f64; 3]> = sample.iter().map(|k| src[k]).collect();
        let t: Vec<[f64; 3]> = sample.iter().map(|k| dst[k]).collect();
        let Ok(pose) = kabsch_align(&s, &t) else { continue };
        let inl = inlier_set(&pose);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((pose, inl));
        }
    }
    let Some((pose, inl)) = best else {
        return flagged(matches.len());
    };
    // refit on the consensus set when it is well conditioned
    let pose = if inl.len() >= 3 {
        let s: Vec<[f64; 3]> = inl.iter().map(|&k| src[k]).collect();
        let t: Vec<[f64; 3]> = inl.iter().map(|&k| dst[k]).collect();
        kabsch_align(&s, &t).unwrap_or(pose)
    } else {
        pose
    };
    let inliers = inlier_set(&pose).len();
    scored(pose, inliers)
}

fn flagged(matches: usize) -> BaselineScore {
    BaselineScore {
        score: f64::NEG_INFINITY,
        pose: Pose::identity(),
        matches,
        inliers: 0,
        flagged: true,
    }
}

/// FNV-1a, so per-pair RANSAC streams depend only on the ids.
fn id_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) fn pair_seed(seed: u64, query_id: &str, candidate_id: &str) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id_hash(query_id).rotate_left(17) ^ id_hash(candidate_id));
    rng.random()
}

/// Rescores the first `top_r` candidates geometrically and reorders them.
/// Candidates without a usable alignment are flagged and sink to the bottom
/// of the window.
pub fn rerank_kabsch_baseline(
    query: &BaselineFeatures,
    ranked: &RankedList,
    top_r: usize,
    candidates: &BTreeMap<String, BaselineFeatures>,
    cfg: &RansacConfig,
) -> Result<RankedList> {
    cfg.validate()?;
    if top_r > ranked.candidates.len() {
        return Err(Error::invalid(format!(
            "rerank window {top_r} exceeds {} candidates",
            ranked.candidates.len()
        )));
    }
    let mut out = ranked.clone();
    for c in &mut out.candidates[..top_r] {
        let d = candidates
            .get(&c.frame_id)
            .ok_or_else(|| Error::invalid(format!("no cloud for candidate {}", c.frame_id)))?;
        let s = verify_pair(query, d, cfg, pair_seed(cfg.seed, &ranked.query_id, &c.frame_id));
        if s.flagged {
            log::debug!("{}: no usable alignment onto {}", ranked.query_id, c.frame_id);
        }
        c.rerank_score = Some(s.score);
        c.flagged = s.flagged;
    }
    reorder_head(&mut out, top_r);
    Ok(out)
}
