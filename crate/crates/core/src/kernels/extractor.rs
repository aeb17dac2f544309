//! Context-cluster feature extractor producing per-point features for
//! reranking and a global descriptor for retrieval.
//!
//! Each layer downsamples with FPS, runs a simplified point convolution
//! (neighbor feature + relative offset through a shared linear map, max-pooled
//! over the KNN neighborhood) and a context-cluster block that groups points
//! around FPS centers by similarity and dispatches the aggregated center
//! features back to their members.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{visit_linear, visit_linear_mut, Parameters};
use super::scc::column_argmax;
use super::tensor::{cosine_similarity_matrix, dot, sigmoid, FeatureMatrix, LinearLayer, Mat};
use crate::error::{Error, Result};
use crate::geometry::{fps_indices, knn, PointCloud};

/// Raw per-point input width: color, position, normal.
pub const RAW_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub feature_dim: usize,
    pub points_out: usize,
    pub centers: usize,
    /// Neighborhood of the point convolution.
    pub knn_k: usize,
    /// Points averaged into each initial center feature.
    pub cluster_k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub layers: Vec<LayerConfig>,
    pub descriptor_dim: usize,
    /// Layer whose output point features feed the reranker.
    pub rerank_layer: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let dims = [64, 128, 320, 512];
        let points = [800, 300, 100, 40];
        let centers = [300, 100, 40, 20];
        let knn_k = [98, 50, 20, 10];
        let cluster_k = [50, 20, 10, 10];
        ExtractorConfig {
            layers: (0..4)
                .map(|i| LayerConfig {
                    feature_dim: dims[i],
                    points_out: points[i],
                    centers: centers[i],
                    knn_k: knn_k[i],
                    cluster_k: cluster_k[i],
                })
                .collect(),
            descriptor_dim: 512,
            rerank_layer: 1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("extractor needs at least one layer"));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::invalid("descriptor_dim must be positive"));
        }
        if self.rerank_layer >= self.layers.len() {
            return Err(Error::invalid(format!(
                "rerank_layer {} out of range for {} layers",
                self.rerank_layer,
                self.layers.len()
            )));
        }
        let mut prev = self.layers[0].points_out;
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |m: String| Err(Error::invalid(format!("layer {i}: {m}")));
            if l.feature_dim == 0 || l.points_out == 0 || l.centers == 0 || l.knn_k == 0 || l.cluster_k == 0 {
                return bad("all sizes must be positive".into());
            }
            if l.points_out > prev {
                return bad(format!("points_out {} exceeds previous count {prev}", l.points_out));
            }
            if l.knn_k > prev {
                return bad(format!("knn_k {} exceeds input count {prev}", l.knn_k));
            }
            if l.centers > l.points_out || l.cluster_k > l.points_out {
                return bad("centers and cluster_k must not exceed points_out".into());
            }
            prev = l.points_out;
        }
        Ok(())
    }

    /// Smallest cloud the extractor accepts.
    pub fn min_points(&self) -> usize {
        self.layers[0].points_out
    }

    pub fn rerank_dim(&self) -> usize {
        self.layers[self.rerank_layer].feature_dim
    }

    pub fn rerank_points(&self) -> usize {
        self.layers[self.rerank_layer].points_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBlockParams {
    pub alpha: f64,
    pub beta: f64,
    pub value: LinearLayer,
    pub proj: LinearLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Shared map over `[neighbor feature; neighbor offset]`.
    pub conv: LinearLayer,
    pub cluster: ClusterBlockParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub layers: Vec<LayerParams>,
    pub head: LinearLayer,
}

impl ExtractorParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut in_dim = RAW_DIM;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let d = l.feature_dim;
            layers.push(LayerParams {
                conv: LinearLayer::init(rng, in_dim + 3, d),
                cluster: ClusterBlockParams {
                    alpha: 1.0,
                    beta: 0.0,
                    value: LinearLayer::init(rng, d, d),
                    proj: LinearLayer::init(rng, d, d),
                },
            });
            in_dim = d;
        }
        Ok(ExtractorParams {
            layers,
            head: LinearLayer::init(rng, in_dim, cfg.descriptor_dim),
        })
    }

    pub fn check_against(&self, cfg: &ExtractorConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.layers.len() {
            return Err(Error::invalid("extractor weights and config disagree on layer count"));
        }
        let mut in_dim = RAW_DIM;
        for (i, (p, l)) in self.layers.iter().zip(&cfg.layers).enumerate() {
            let d = l.feature_dim;
            let ok = p.conv.in_dim() == in_dim + 3
                && p.conv.out_dim() == d
                && p.cluster.value.in_dim() == d
                && p.cluster.value.out_dim() == d
                && p.cluster.proj.in_dim() == d
                && p.cluster.proj.out_dim() == d;
            if !ok {
                return Err(Error::invalid(format!("layer {i} weight shapes do not match the config")));
            }
            in_dim = d;
        }
        if self.head.in_dim() != in_dim || self.head.out_dim() != cfg.descriptor_dim {
            return Err(Error::invalid("descriptor head shape does not match the config"));
        }
        Ok(())
    }
}

impl Parameters for ExtractorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            visit_linear(&format!("extractor.layer{i}.conv"), &l.conv, f);
            f(&format!("extractor.layer{i}.cluster.alpha"), &[], std::slice::from_ref(&l.cluster.alpha));
            f(&format!("extractor.layer{i}.cluster.beta"), &[], std::slice::from_ref(&l.cluster.beta));
            visit_linear(&format!("extractor.layer{i}.cluster.value"), &l.cluster.value, f);
            visit_linear(&format!("extractor.layer{i}.cluster.proj"), &l.cluster.proj, f);
        }
        visit_linear("extractor.head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_linear_mut(&format!("extractor.layer{i}.conv"), &mut l.conv, f);
            f(&format!("extractor.layer{i}.cluster.alpha"), &[], std::slice::from_mut(&mut l.cluster.alpha));
            f(&format!("extractor.layer{i}.cluster.beta"), &[], std::slice::from_mut(&mut l.cluster.beta));
            visit_linear_mut(&format!("extractor.layer{i}.cluster.value"), &mut l.cluster.value, f);
            visit_linear_mut(&format!("extractor.layer{i}.cluster.proj"), &mut l.cluster.proj, f);
        }
        visit_linear_mut("extractor.head", &mut self.head, f);
    }
}

/// A fixed-length whole-frame descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("descriptor must be non-empty and finite"));
        }
        Ok(GlobalDescriptor(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity of two descriptors.
pub fn global_similarity(a: &GlobalDescriptor, b: &GlobalDescriptor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "descriptor dims differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (super::tensor::norm(&a.0), super::tensor::norm(&b.0));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm descriptor"));
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct Extracted {
    /// Point features at the reranking resolution.
    pub point_features: FeatureMatrix,
    pub descriptor: GlobalDescriptor,
}

/// Max-pooled point convolution: for every output point `i`,
/// `max_j W [f_j; p_j - p_i] + b` over its KNN neighborhood.
fn point_conv(
    conv: &LinearLayer,
    feats: &Mat,
    positions: &[[f64; 3]],
    out_pos: &[[f64; 3]],
    neighbors: &[Vec<usize>],
) -> Result<Mat> {
    let d_in = feats.cols();
    let d_out = conv.out_dim();
    // the map is linear, so the feature half is shared by every neighborhood
    let mut w_feat = Mat::zeros(d_out, d_in);
    let mut w_off = vec![[0.0; 3]; d_out];
    for c in 0..d_out {
        let row = conv.weight.row(c);
        w_feat.row_mut(c).copy_from_slice(&row[..d_in]);
        w_off[c] = [row[d_in], row[d_in + 1], row[d_in + 2]];
    }
    let projected = feats.matmul_t(&w_feat)?;
    let mut out = Mat::zeros(out_pos.len(), d_out);
    out.data_mut()
        .par_chunks_mut(d_out)
        .enumerate()
        .for_each(|(i, dst)| {
            let pi = out_pos[i];
            dst.fill(f64::NEG_INFINITY);
            for &j in &neighbors[i] {
                let pj = positions[j];
                let off = [pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]];
                let pr = projected.row(j);
                for c in 0..d_out {
                    let w = &w_off[c];
                    let v = pr[c] + (w[0] * off[0] + w[1] * off[1] + w[2] * off[2]);
                    if v > dst[c] {
                        dst[c] = v;
                    }
                }
            }
            for (v, b) in dst.iter_mut().zip(&conv.bias) {
                *v += b;
            }
        });
    Ok(out)
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

/// Clusters points around FPS centers and adds each point's weighted,
/// projected center feature back onto it.
fn cluster_block(p: &ClusterBlockParams, feats: &Mat, positions: &[[f64; 3]], cfg: &LayerConfig) -> Result<Mat> {
    let centers = fps_indices(positions, cfg.centers)?;
    let center_pos: Vec<[f64; 3]> = centers.iter().map(|&i| positions[i]).collect();
    let members = knn(&center_pos, positions, cfg.cluster_k)?;
    let center_feat = Mat::from_rows(&members.iter().map(|nb| mean_rows(feats, nb)).collect::<Vec<_>>())?;

    let mut sim = cosine_similarity_matrix(&center_feat, feats)?;
    sim.data_mut()
        .iter_mut()
        .for_each(|c| *c = sigmoid(p.alpha * *c + p.beta));
    let assignment = column_argmax(&sim);

    let values = p.value.forward(feats)?;
    let mut agg = Mat::from_rows(&members.iter().map(|nb| mean_rows(&values, nb)).collect::<Vec<_>>())?;
    let mut den = vec![1.0; centers.len()];
    for (j, &i) in assignment.iter().enumerate() {
        let s = sim[(i, j)];
        den[i] += s;
        for (a, v) in agg.row_mut(i).iter_mut().zip(values.row(j)) {
            *a += s * v;
        }
    }
    for (i, d) in den.iter().enumerate() {
        agg.row_mut(i).iter_mut().for_each(|a| *a /= d);
    }

    let mut out = feats.clone();
    let mut scaled = vec![0.0; feats.cols()];
    let mut dispatched = vec![0.0; feats.cols()];
    for (j, &i) in assignment.iter().enumerate() {
        let s = sim[(i, j)];
        for (d, a) in scaled.iter_mut().zip(agg.row(i)) {
            *d = s * a;
        }
        p.proj.forward_row(&scaled, &mut dispatched);
        for (o, v) in out.row_mut(j).iter_mut().zip(&dispatched) {
            *o += v;
        }
    }
    Ok(out)
}

/// Runs the layer stack on a raw cloud.
pub fn extract_features(cloud: &PointCloud, config: &ExtractorConfig, params: &ExtractorParams) -> Result<Extracted> {
    params.check_against(config)?;
    if cloud.len() < config.min_points() {
        return Err(Error::invalid(format!(
            "cloud has {} points, the extractor needs at least {}",
            cloud.len(),
            config.min_points()
        )));
    }
    // canonical row order: positions, then the remaining raw features
    let rows = cloud.rows();
    let positions_raw = cloud.positions();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        super::lex_rows(&positions_raw[a], &rows[a], &positions_raw[b], &rows[b]).then(a.cmp(&b))
    });
    let mut positions: Vec<[f64; 3]> = order.iter().map(|&i| positions_raw[i]).collect();
    let mut feats = Mat::from_rows(&order.iter().map(|&i| rows[i]).collect::<Vec<_>>())?;

    let mut rerank = None;
    for (li, (lc, lp)) in config.layers.iter().zip(&params.layers).enumerate() {
        let sel = fps_indices(&positions, lc.points_out)?;
        let out_pos: Vec<[f64; 3]> = sel.iter().map(|&i| positions[i]).collect();
        let neighbors = knn(&out_pos, &positions, lc.knn_k)?;
        let conv = point_conv(&lp.conv, &feats, &positions, &out_pos, &neighbors)?;
        feats = cluster_block(&lp.cluster, &conv, &out_pos, lc)?;
        positions = out_pos;
        if !feats.is_finite() {
            return Err(Error::Numeric(format!("non-finite features after layer {li}")));
        }
        if li == config.rerank_layer {
            rerank = Some(FeatureMatrix::new(feats.clone(), positions.clone())?);
        }
    }

    let head = params.head.forward(&feats)?;
    let mut desc = vec![f64::NEG_INFINITY; config.descriptor_dim];
    for row in head.row_iter() {
        for (d, v) in desc.iter_mut().zip(row) {
            *d = d.max(*v);
        }
    }
    let descriptor = GlobalDescriptor::new(desc)?;
    if descriptor.0.iter().all(|v| *v == 0.0) {
        return Err(Error::Numeric("descriptor collapsed to zero".into()));
    }
    Ok(Extracted {
        point_features: rerank.expect("rerank_layer validated against layer count"),
        descriptor,
    })
}
