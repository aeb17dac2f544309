use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{global_similarity, GlobalDescriptor};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_HARD_NEGATIVES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_t: f64,
    pub beta_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_t: 1.0,
            beta_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(beta_t: f64, beta_c: f64) -> Result<Self> {
        if !(beta_t >= 0.0 && beta_c >= 0.0 && beta_t.is_finite() && beta_c.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(LossWeights { beta_t, beta_c })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub triples: Vec<(GlobalDescriptor, GlobalDescriptor, GlobalDescriptor)>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn new(
        triples: Vec<(GlobalDescriptor, GlobalDescriptor, GlobalDescriptor)>,
        margin: f64,
    ) -> Result<Self> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be >= 0, got {margin}")));
        }
        if let Some((a, _, _)) = triples.first() {
            let dim = a.0.len();
            if triples
                .iter()
                .any(|(a, p, n)| a.0.len() != dim || p.0.len() != dim || n.0.len() != dim)
            {
                return Err(Error::invalid("triplet descriptors must share one dimension"));
            }
        }
        Ok(TripletBatch { triples, margin })
    }
}

/// Binary match label for a reranked pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RerankLabel(bool);

impl RerankLabel {
    pub const POSITIVE: RerankLabel = RerankLabel(true);
    pub const NEGATIVE: RerankLabel = RerankLabel(false);

    pub fn new(y: u8) -> Result<Self> {
        match y {
            0 => Ok(Self::NEGATIVE),
            1 => Ok(Self::POSITIVE),
            _ => Err(Error::invalid(format!("label must be 0 or 1, got {y}"))),
        }
    }

    pub fn is_positive(self) -> bool {
        self.0
    }

    pub fn value(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl TryFrom<u8> for RerankLabel {
    type Error = Error;
    fn try_from(y: u8) -> Result<Self> {
        RerankLabel::new(y)
    }
}

impl From<RerankLabel> for u8 {
    fn from(l: RerankLabel) -> u8 {
        l.0 as u8
    }
}

/// Cosine distance `1 - cos`.
fn distance(a: &GlobalDescriptor, b: &GlobalDescriptor) -> Result<f64> {
    Ok(1.0 - global_similarity(a, b)?)
}

/// Mean hinge `max(0, d(a,p) - d(a,n) + margin)` with cosine distance.
/// An empty batch has zero loss.
pub fn triplet_loss(batch: &TripletBatch) -> Result<f64> {
    if batch.triples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, p, n) in &batch.triples {
        total += (distance(a, p)? - distance(a, n)? + batch.margin).max(0.0);
    }
    Ok(total / batch.triples.len() as f64)
}

/// Binary cross-entropy of a reranking score.
pub fn rerank_cross_entropy(r_s: f64, y: RerankLabel) -> Result<f64> {
    if !(r_s > 0.0 && r_s < 1.0) {
        return Err(Error::invalid(format!("reranking score must lie in (0, 1), got {r_s}")));
    }
    Ok(if y.is_positive() { -r_s.ln() } else { -(1.0 - r_s).ln() })
}

/// Cross-entropy from the pre-sigmoid logit; stable where the score rounds to 0 or 1.
pub(crate) fn cross_entropy_from_logit(logit: f64, y: RerankLabel) -> f64 {
    // -log sigmoid(z) = softplus(-z)
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    if y.is_positive() {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

pub fn total_loss(lt: f64, lc: f64, w: LossWeights) -> f64 {
    w.beta_t * lt + w.beta_c * lc
}

/// The `h` negatives most similar to the query, most similar first. Returns
/// candidate indices; ties keep the lower index first.
pub fn mine_hard_negatives(
    query: &GlobalDescriptor,
    candidates: &[(GlobalDescriptor, bool)],
    h: usize,
) -> Result<Vec<usize>> {
    let mut scored = Vec::new();
    for (i, (desc, positive)) in candidates.iter().enumerate() {
        if !positive {
            scored.push((global_similarity(query, desc)?, i));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(h).map(|(_, i)| i).collect())
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `f` at `theta`.
pub fn verify_gradient<F>(f: F, theta: &[f64], analytic: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    Ok(verify_gradient_detailed(f, theta, analytic)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Per-coordinate relative errors, in `theta` order.
pub fn verify_gradient_detailed<F>(f: F, theta: &[f64], analytic: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    verify_gradient_at(f, theta, analytic, &(0..theta.len()).collect::<Vec<_>>())
}

/// As [`verify_gradient_detailed`], restricted to the listed coordinates.
pub fn verify_gradient_at<F>(f: F, theta: &[f64], analytic: &[f64], coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "parameter vector has {} entries, gradient has {}",
            theta.len(),
            analytic.len()
        )));
    }
    let eval = |t: &[f64]| -> Result<f64> {
        let v = f(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("objective is not finite".into()))
        }
    };
    eval(theta)?;
    let mut work = theta.to_vec();
    let mut errs = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= theta.len() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let eps = 1e-6 * theta[i].abs().max(1.0);
        work[i] = theta[i] + eps;
        let up = eval(&work)?;
        work[i] = theta[i] - eps;
        let down = eval(&work)?;
        work[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        errs.push((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: &[f64]) -> GlobalDescriptor {
        GlobalDescriptor(v.to_vec())
    }

    #[test]
    fn triplet_examples() {
        let a = g(&[1.0, 0.0]);
        let n = g(&[0.0, 1.0]);
        let b = TripletBatch::new(vec![(a.clone(), a.clone(), n)], 0.3).unwrap();
        assert_eq!(triplet_loss(&b).unwrap(), 0.0);
        let b = TripletBatch::new(vec![(a.clone(), a.clone(), a.clone())], 0.3).unwrap();
        assert!((triplet_loss(&b).unwrap() - 0.3).abs() < 1e-15);
        let b = TripletBatch::new(vec![(a.clone(), a.clone(), g(&[0.0, 0.0]))], 0.3).unwrap();
        assert!(triplet_loss(&b).is_err());
        assert!(TripletBatch::new(vec![(a.clone(), g(&[1.0]), a)], 0.3).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((rerank_cross_entropy(0.5, RerankLabel::POSITIVE).unwrap() - ln2).abs() < 1e-15);
        assert!((rerank_cross_entropy(0.5, RerankLabel::NEGATIVE).unwrap() - ln2).abs() < 1e-15);
        let e_inv = (-1.0f64).exp();
        assert!((rerank_cross_entropy(e_inv, RerankLabel::POSITIVE).unwrap() - 1.0).abs() < 1e-15);
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(rerank_cross_entropy(bad, RerankLabel::POSITIVE).is_err());
        }
        assert!(RerankLabel::new(2).is_err());
    }

    #[test]
    fn logit_form_agrees() {
        // the direct form loses digits in 1 - r_s as |z| grows
        for z in [-8.0, -2.0, 0.0, 0.7, 8.0] {
            for y in [RerankLabel::POSITIVE, RerankLabel::NEGATIVE] {
                let direct = rerank_cross_entropy(crate::kernels::sigmoid(z), y).unwrap();
                assert!((cross_entropy_from_logit(z, y) - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, w), 3.0);
        assert_eq!(total_loss(1.5, 2.0, LossWeights::new(1.0, 0.0).unwrap()), 1.5);
        assert_eq!(total_loss(0.0, 0.0, w), 0.0);
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn mining_examples() {
        let q = g(&[1.0, 0.0]);
        let cands = vec![
            (g(&[0.1, 1.0]), false),
            (g(&[1.0, 0.1]), true),
            (g(&[1.0, 0.2]), false),
        ];
        assert_eq!(mine_hard_negatives(&q, &cands, 1).unwrap(), vec![2]);
        assert_eq!(mine_hard_negatives(&q, &cands, 5).unwrap(), vec![2, 0]);
        assert!(mine_hard_negatives(&q, &cands[1..2], 5).unwrap().is_empty());
    }

    #[test]
    fn gradient_check_examples() {
        let sq = |t: &[f64]| Ok(t[0] * t[0]);
        assert!(verify_gradient(sq, &[3.0], &[6.0]).unwrap() <= 1e-7);
        assert!(verify_gradient(sq, &[3.0], &[5.0]).unwrap() > 1e-2);
        let constant = |_: &[f64]| Ok(4.0);
        assert_eq!(verify_gradient(constant, &[1.0, -2.0], &[0.0, 0.0]).unwrap(), 0.0);
        let blow = |t: &[f64]| Ok(if t[0] > 1.0 { f64::NAN } else { t[0] });
        assert!(matches!(verify_gradient(blow, &[1.0], &[0.0]), Err(Error::Numeric(_))));
    }
}
