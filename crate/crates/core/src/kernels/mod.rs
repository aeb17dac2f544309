//! Numerical core: dense layers, the context-cluster extractor and the
//! SCC / CSCC reranking kernels. Everything runs in `f64`.

pub mod cscc;
pub mod extractor;
pub mod params;
pub mod scc;
pub mod tensor;
pub mod weights;

use std::cmp::Ordering;

pub use cscc::{cscc_forward, cscc_forward_traced, CsccConfig, CsccParams, CsccTrace};
pub use extractor::{
    extract_features, global_similarity, ClusterBlockParams, ExtractorConfig, ExtractorParams, Extracted,
    GlobalDescriptor, LayerConfig, LayerParams,
};
pub use params::Parameters;
pub use scc::{scc_forward, scc_forward_traced, SccConfig, SccParams, SccTrace};
pub use tensor::{
    cosine_similarity_matrix, group_norm, linear, sigmoid, CenterFeatures, FeatureMatrix, GroupNormParams,
    LinearLayer, Mat,
};
pub use weights::{read_weights, write_weights, ModelConfig, ModelWeights};

use crate::geometry::lex_cmp;

fn lex_slice(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

pub(crate) fn lex_rows(pa: &[f64; 3], fa: &[f64], pb: &[f64; 3], fb: &[f64]) -> Ordering {
    lex_cmp(pa, pb).then_with(|| lex_slice(fa, fb))
}

/// Row order by position, then feature values, then index. Kernels run on
/// rows in this order so their output does not depend on input row order.
pub fn canonical_rows(x: &FeatureMatrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let pos = x.positions();
    order.sort_by(|&a, &b| lex_rows(&pos[a], x.row(a), &pos[b], x.row(b)).then(a.cmp(&b)));
    order
}
