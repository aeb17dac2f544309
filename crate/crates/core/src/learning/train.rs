//! Joint SCC + CSCC training on a small labelled pair set, with the
//! point-feature extractor frozen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{cscc_backward, scc_backward};
use super::losses::{
    cross_entropy_from_logit, mine_hard_negatives, total_loss, triplet_loss, LossWeights, RerankLabel,
    TripletBatch, DEFAULT_HARD_NEGATIVES, DEFAULT_MARGIN,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::kernels::params::Parameters;
use crate::kernels::{
    cscc_forward_traced, extract_features, scc_forward_traced, CsccParams, ExtractorConfig, ExtractorParams,
    FeatureMatrix, GlobalDescriptor, ModelWeights, SccParams,
};
use crate::synthetic::{toy_pair_clouds, PackConfig};

/// The trainable reranking head.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankModel {
    pub scc: SccParams,
    pub cscc: CsccParams,
}

impl Parameters for RerankModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.scc.visit(f);
        self.cscc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.scc.visit_mut(f);
        self.cscc.visit_mut(f);
    }
}

/// One labelled pair: frozen reranking point features and global descriptors
/// of a query and a candidate.
#[derive(Debug, Clone)]
pub struct ToyPair {
    pub query: FeatureMatrix,
    pub candidate: FeatureMatrix,
    pub query_descriptor: GlobalDescriptor,
    pub candidate_descriptor: GlobalDescriptor,
    pub label: RerankLabel,
}

impl ToyPair {
    /// Runs the frozen extractor over both clouds.
    pub fn from_clouds(
        query: &PointCloud,
        candidate: &PointCloud,
        label: RerankLabel,
        config: &ExtractorConfig,
        params: &ExtractorParams,
    ) -> Result<Self> {
        let q = extract_features(query, config, params)?;
        let d = extract_features(candidate, config, params)?;
        Ok(ToyPair {
            query: q.point_features,
            candidate: d.point_features,
            query_descriptor: q.descriptor,
            candidate_descriptor: d.descriptor,
            label,
        })
    }
}

/// The bundled ten-pair set (see [`toy_pair_clouds`]) run through the frozen
/// extractor of `weights`.
pub fn bundled_toy_pairs(pack: &PackConfig, weights: &ModelWeights) -> Result<Vec<ToyPair>> {
    toy_pair_clouds(pack)?
        .par_iter()
        .map(|(q, d, positive)| {
            let label = if *positive { RerankLabel::POSITIVE } else { RerankLabel::NEGATIVE };
            ToyPair::from_clouds(q, d, label, &weights.config.extractor, &weights.extractor)
        })
        .collect()
}

/// Cross-entropy of the reranking score for one pair.
pub fn pair_loss(model: &RerankModel, pair: &ToyPair) -> Result<f64> {
    let (q, _) = scc_forward_traced(&pair.query, &model.scc)?;
    let (d, _) = scc_forward_traced(&pair.candidate, &model.scc)?;
    let t = cscc_forward_traced(&q, &d, &model.cscc)?;
    Ok(cross_entropy_from_logit(t.logit, pair.label))
}

/// Cross-entropy of one pair and its gradient with respect to every
/// parameter of `model`.
pub fn pair_loss_and_grad(model: &RerankModel, pair: &ToyPair) -> Result<(f64, RerankModel)> {
    let (q, qt) = scc_forward_traced(&pair.query, &model.scc)?;
    let (d, dt) = scc_forward_traced(&pair.candidate, &model.scc)?;
    let t = cscc_forward_traced(&q, &d, &model.cscc)?;
    let loss = cross_entropy_from_logit(t.logit, pair.label);
    let dlogit = t.score - pair.label.value();

    let cg = cscc_backward(&q, &d, &model.cscc, &t, dlogit);
    let gq = scc_backward(&model.scc, &qt, &cg.query);
    let gd = scc_backward(&model.scc, &dt, &cg.candidate);
    let mut scc = gq;
    let add = gd.flatten();
    let mut at = 0;
    scc.visit_mut(&mut |_, _, v| {
        for x in v.iter_mut() {
            *x += add[at];
            at += 1;
        }
    });
    Ok((loss, RerankModel { scc, cscc: cg.params }))
}

/// Mean cross-entropy over `pairs` and its flat gradient. Pairs are
/// evaluated in parallel and reduced in input order.
pub fn batch_loss_and_grad(model: &RerankModel, pairs: &[ToyPair]) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair set"));
    }
    let parts: Vec<(f64, Vec<f64>)> = pairs
        .par_iter()
        .map(|p| pair_loss_and_grad(model, p).map(|(l, g)| (l, g.flatten())))
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; parts[0].1.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

pub fn batch_loss(model: &RerankModel, pairs: &[ToyPair]) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| pair_loss(model, p))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// Update rule applied to the mean gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `θ -= lr * g`.
    Sgd,
    /// Bias-corrected first/second moment scaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weights: LossWeights,
    pub margin: f64,
    pub hard_negatives: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            steps: 200,
            optimizer: Optimizer::adam(),
            lr_max: 1e-4,
            lr_min: 1e-7,
            weights: LossWeights::default(),
            margin: DEFAULT_MARGIN,
            hard_negatives: DEFAULT_HARD_NEGATIVES,
        }
    }
}

/// Cosine annealing from `max` at step 0 to `min` at the final step.
pub fn cosine_lr(step: usize, steps: usize, max: f64, min: f64) -> f64 {
    if steps <= 1 {
        return max;
    }
    let t = step as f64 / (steps - 1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub lr: f64,
    /// Triplet loss on the frozen global descriptors.
    pub lt: f64,
    /// Mean reranking cross-entropy before this step's update.
    pub lc: f64,
    pub total: f64,
}

/// Triplet loss over every positive pair, with hard negatives mined from the
/// candidates of the negative pairs.
pub fn descriptor_triplet_loss(pairs: &[ToyPair], margin: f64, h: usize) -> Result<f64> {
    let pool: Vec<(GlobalDescriptor, bool)> = pairs
        .iter()
        .filter(|p| !p.label.is_positive())
        .map(|p| (p.candidate_descriptor.clone(), false))
        .collect();
    let mut triples = Vec::new();
    for p in pairs.iter().filter(|p| p.label.is_positive()) {
        for n in mine_hard_negatives(&p.query_descriptor, &pool, h)? {
            triples.push((
                p.query_descriptor.clone(),
                p.candidate_descriptor.clone(),
                pool[n].0.clone(),
            ));
        }
    }
    triplet_loss(&TripletBatch::new(triples, margin)?)
}

/// Full-batch gradient descent on the mean cross-entropy. Returns the trained
/// model and one record per step.
pub fn toy_train(pairs: &[ToyPair], init: &RerankModel, cfg: &ToyTrainConfig) -> Result<(RerankModel, Vec<TrainStep>)> {
    if !pairs.iter().any(|p| p.label.is_positive()) || pairs.iter().all(|p| p.label.is_positive()) {
        return Err(Error::invalid("training needs at least one positive and one negative pair"));
    }
    if !(cfg.lr_max >= 0.0 && cfg.lr_min >= 0.0 && cfg.lr_max.is_finite()) {
        return Err(Error::invalid("learning rates must be finite and non-negative"));
    }
    let lt = descriptor_triplet_loss(pairs, cfg.margin, cfg.hard_negatives)?;
    let mut model = init.clone();
    let mut theta = model.flatten();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        let (lc, grad) = batch_loss_and_grad(&model, pairs)?;
        let total = total_loss(lt, lc, cfg.weights);
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        history.push(TrainStep { step, lr, lt, lc, total });
        // lt does not depend on the trained parameters
        let scale = cfg.weights.beta_c;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= lr * scale * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = step as i32 + 1;
                let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                for i in 0..theta.len() {
                    let g = scale * grad[i];
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                    theta[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                }
            }
        }
        model.assign(&theta);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::gradcheck::{check_gradients, toy_instance, GradCheckInstance};

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let inst = toy_instance(seed).unwrap();
            for b in check_gradients(&inst.model, &inst.pairs).unwrap() {
                assert!(b.max_error <= 1e-4, "seed {seed} {}: {:e}", b.name, b.max_error);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let GradCheckInstance { model, pairs } = toy_instance(9).unwrap();
        let cfg = ToyTrainConfig {
            steps: 5,
            lr_max: 0.0,
            lr_min: 0.0,
            ..Default::default()
        };
        let (_, hist) = toy_train(&pairs, &model, &cfg).unwrap();
        assert!(hist.windows(2).all(|w| w[0].total == w[1].total));
        assert!(toy_train(&pairs[..1], &model, &cfg).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 200, 1e-4, 1e-7), 1e-4);
        assert!((cosine_lr(199, 200, 1e-4, 1e-7) - 1e-7).abs() < 1e-20);
        assert!((0..199).all(|s| cosine_lr(s, 200, 1e-4, 1e-7) >= cosine_lr(s + 1, 200, 1e-4, 1e-7)));
    }
}
