//! Small seeded instances and a per-tensor report for checking the analytic
//! gradients of the reranking head against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{verify_gradient_detailed, RerankLabel};
use super::train::{batch_loss, batch_loss_and_grad, RerankModel, ToyPair};
use crate::error::Result;
use crate::kernels::{cscc_forward_traced, scc_forward_traced, CsccConfig, CsccParams, FeatureMatrix, GlobalDescriptor, Mat, Parameters, SccConfig, SccParams};

/// A model small enough for full central differences plus one positive and
/// one negative pair.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub model: RerankModel,
    pub pairs: Vec<ToyPair>,
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<FeatureMatrix> {
    let vals: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pos = (0..n)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    FeatureMatrix::new(Mat::from_vec(n, dim, vals)?, pos)
}

/// Smallest gap at any argmax or top-k decision taken by the forward passes
/// over `pairs`. Finite differences are only a valid oracle when no step can
/// flip one of those decisions.
pub fn decision_margin(model: &RerankModel, pairs: &[ToyPair]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for p in pairs {
        let (q, tq) = scc_forward_traced(&p.query, &model.scc)?;
        let (d, td) = scc_forward_traced(&p.candidate, &model.scc)?;
        for t in [&tq, &td] {
            let s = &t.similarity;
            for j in 0..s.cols() {
                let mut col: Vec<f64> = (0..s.rows()).map(|i| s[(i, j)]).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                if col.len() > 1 {
                    margin = margin.min(col[0] - col[1]);
                }
            }
        }
        let tc = cscc_forward_traced(&q, &d, &model.cscc)?;
        let mut all = tc.correlation.data().to_vec();
        all.sort_by(|a, b| b.total_cmp(a));
        let k = tc.kept.len();
        if k > 0 && k < all.len() {
            margin = margin.min(all[k - 1] - all[k]);
        }
    }
    Ok(margin)
}

/// Decision gap below which a drawn instance is rejected and redrawn.
pub const MIN_DECISION_MARGIN: f64 = 1e-4;

/// A seeded instance whose argmax and top-k decisions are all at least
/// [`MIN_DECISION_MARGIN`] away from a tie.
pub fn toy_instance(seed: u64) -> Result<GradCheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inst = draw_instance(&mut rng)?;
        if decision_margin(&inst.model, &inst.pairs)? >= MIN_DECISION_MARGIN {
            return Ok(inst);
        }
    }
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Result<GradCheckInstance> {
    let scc = SccConfig {
        in_dim: 6,
        // groups of three channels: a two-channel group normalizes to +-1
        // and leaves l_r with no gradient to check
        branch_dim: 6,
        center_dim: 6,
        num_groups: 2,
        num_centers: 4,
        knn_k: 3,
    };
    let cscc = CsccConfig {
        center_dim: 6,
        hidden_dim: 5,
        top_k: 8,
    };
    let mut model = RerankModel {
        scc: SccParams::init(rng, &scc)?,
        cscc: CsccParams::init(rng, &cscc)?,
    };
    // move the scalar and norm parameters off their neutral init
    model.visit_mut(&mut |name, _, v| {
        if name.ends_with("alpha") || name.ends_with("beta") || name.ends_with("gamma") {
            v.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
    });
    // a visible head, so the check does not run on a flat score
    model
        .cscc
        .l_f
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-1.0..1.0));
    let mut pairs = Vec::new();
    for label in [RerankLabel::POSITIVE, RerankLabel::NEGATIVE] {
        pairs.push(ToyPair {
            query: random_features(rng, 12, 6)?,
            candidate: random_features(rng, 10, 6)?,
            query_descriptor: GlobalDescriptor(vec![1.0, rng.random()]),
            candidate_descriptor: GlobalDescriptor(vec![rng.random(), 1.0]),
            label,
        });
    }
    Ok(GradCheckInstance { model, pairs })
}

/// Largest relative error within one named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub max_error: f64,
}

/// Compares the mean-cross-entropy gradient used by training with central
/// differences, reporting the worst coordinate of every tensor.
pub fn check_gradients(model: &RerankModel, pairs: &[ToyPair]) -> Result<Vec<BlockError>> {
    let (_, grad) = batch_loss_and_grad(model, pairs)?;
    let theta = model.flatten();
    let f = |t: &[f64]| {
        let mut m = model.clone();
        m.assign(t);
        batch_loss(&m, pairs)
    };
    let errs = verify_gradient_detailed(f, &theta, &grad)?;
    Ok(model
        .layout()
        .into_iter()
        .map(|(name, start, len)| BlockError {
            name,
            max_error: errs[start..start + len].iter().fold(0.0, |a: f64, &b| a.max(b)),
        })
        .collect())
}
