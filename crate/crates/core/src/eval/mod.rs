//! Retrieval, reranking and Recall@k evaluation.

mod baseline;
mod evaluate;

pub use baseline::{
    baseline_features, rerank_kabsch_baseline, verify_pair, BaselineFeatures, BaselineScore, RansacConfig,
};
pub use evaluate::{
    evaluate, DatabaseScope, DescriptorMode, EvalConfig, EvalReport, QueryResult, RerankerKind, EVAL_SCHEMA,
};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameRecord;
use crate::error::{Error, Result};
use crate::geometry::{read_pcb, PointCloud};
use crate::kernels::{
    cscc_forward, extract_features, global_similarity, CenterFeatures, CsccParams, ExtractorConfig, ExtractorParams,
    GlobalDescriptor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub frame_id: String,
    pub descriptor: GlobalDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub extractor: Option<ExtractorConfig>,
    /// Seconds since the Unix epoch at build time.
    pub built_at: u64,
}

impl RetrievalIndex {
    /// Checks unique ids and a common descriptor width.
    pub fn new(entries: Vec<IndexEntry>, extractor: Option<ExtractorConfig>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.frame_id.as_str()) {
                return Err(Error::invalid(format!("duplicate index entry {}", e.frame_id)));
            }
            if e.descriptor.0.len() != entries[0].descriptor.0.len() {
                return Err(Error::invalid("index descriptors differ in width"));
            }
        }
        if entries.is_empty() {
            log::warn!("building an empty retrieval index");
        }
        let built_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RetrievalIndex {
            entries,
            extractor,
            built_at,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Extracts one descriptor per frame; index ids are `scene_id/frame_id`.
pub fn build_index(
    frames: &[FrameRecord],
    base: &Path,
    config: &ExtractorConfig,
    params: &ExtractorParams,
) -> Result<RetrievalIndex> {
    let entries = frames
        .par_iter()
        .map(|f| {
            let label = frame_key(f);
            let cloud = read_pcb(f.resolve(base)).map_err(|e| e.context(&label))?;
            let ex = extract_features(&cloud, config, params).map_err(|e| e.context(&label))?;
            Ok(IndexEntry {
                frame_id: label,
                descriptor: ex.descriptor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(entries, Some(config.clone()))
}

/// The `scene_id/frame_id` key used in indexes and ranked lists.
pub fn frame_key(f: &FrameRecord) -> String {
    format!("{}/{}", f.scene_id, f.frame_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub frame_id: String,
    pub global_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
    /// Set when the reranker could not score this candidate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl Candidate {
    fn key(&self) -> f64 {
        self.rerank_score.unwrap_or(self.global_score)
    }
}

/// Descending by rerank score (else global score), then global score, then id.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.key()
        .total_cmp(&a.key())
        .then(b.global_score.total_cmp(&a.global_score))
        .then_with(|| a.frame_id.cmp(&b.frame_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.frame_id.as_str()).collect()
    }
}

/// Top `top_n` index entries by cosine similarity to `query`.
pub fn retrieve_descriptor(
    query_id: &str,
    query: &GlobalDescriptor,
    index: &RetrievalIndex,
    top_n: usize,
) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::invalid("cannot retrieve from an empty index"));
    }
    let mut candidates = index
        .entries
        .iter()
        .map(|e| {
            Ok(Candidate {
                frame_id: e.frame_id.clone(),
                global_score: global_similarity(query, &e.descriptor)?,
                rerank_score: None,
                flagged: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    candidates.sort_by(candidate_order);
    candidates.truncate(top_n);
    Ok(RankedList {
        query_id: query_id.to_string(),
        candidates,
    })
}

/// Describes `query` with the extractor and retrieves from `index`.
pub fn retrieve(
    query_id: &str,
    query: &PointCloud,
    index: &RetrievalIndex,
    top_n: usize,
    config: &ExtractorConfig,
    params: &ExtractorParams,
) -> Result<RankedList> {
    let ex = extract_features(query, config, params)?;
    retrieve_descriptor(query_id, &ex.descriptor, index, top_n)
}

/// Sorts the first `top_r` candidates by their rerank scores; the rest keep
/// their order behind them.
pub(crate) fn reorder_head(ranked: &mut RankedList, top_r: usize) {
    let r = top_r.min(ranked.candidates.len());
    ranked.candidates[..r].sort_by(candidate_order);
}

/// Rescores the first `top_r` candidates with CSCC on precomputed SCC centers
/// (keyed by candidate id) and reorders them.
pub fn rerank_cscc(
    query: &CenterFeatures,
    ranked: &RankedList,
    top_r: usize,
    centers: &BTreeMap<String, CenterFeatures>,
    cscc: &CsccParams,
) -> Result<RankedList> {
    if top_r > ranked.candidates.len() {
        return Err(Error::invalid(format!(
            "rerank window {top_r} exceeds {} candidates",
            ranked.candidates.len()
        )));
    }
    let mut out = ranked.clone();
    for c in &mut out.candidates[..top_r] {
        let d = centers
            .get(&c.frame_id)
            .ok_or_else(|| Error::invalid(format!("no reranking features for {}", c.frame_id)))?;
        c.rerank_score = Some(cscc_forward(query, d, cscc).map_err(|e| e.context(&c.frame_id))?);
    }
    reorder_head(&mut out, top_r);
    Ok(out)
}

/// Fraction of answerable queries with a positive among their first `k`
/// candidates, for each `k`. `positives[i]` belongs to `lists[i]`.
pub fn recall_at_k(lists: &[RankedList], positives: &[BTreeSet<String>], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if lists.len() != positives.len() {
        return Err(Error::invalid("one positive set is needed per ranked list"));
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return Err(Error::invalid("recall needs k >= 1"));
        }
        let hits = lists
            .iter()
            .zip(positives)
            .filter(|(l, p)| l.candidates.iter().take(k).any(|c| p.contains(&c.frame_id)))
            .count();
        let v = if lists.is_empty() {
            0.0
        } else {
            hits as f64 / lists.len() as f64
        };
        out.insert(k, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(descs: &[(&str, Vec<f64>)]) -> RetrievalIndex {
        RetrievalIndex::new(
            descs
                .iter()
                .map(|(id, d)| IndexEntry {
                    frame_id: id.to_string(),
                    descriptor: GlobalDescriptor(d.clone()),
                })
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn hand_ranked_retrieval() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let idx = index(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![s, s])]);
        let r = retrieve_descriptor("q", &GlobalDescriptor(vec![1.0, 0.0]), &idx, 10).unwrap();
        assert_eq!(r.ids(), vec!["a", "c", "b"]);
        assert!((r.candidates[1].global_score - s).abs() < 1e-15);
        let r = retrieve_descriptor("q", &GlobalDescriptor(vec![1.0, 0.0]), &idx, 2).unwrap();
        assert_eq!(r.ids(), vec!["a", "c"]);
        assert!(RetrievalIndex::new(vec![], None).unwrap().is_empty());
    }

    #[test]
    fn equal_rerank_scores_keep_global_order() {
        let mut r = RankedList {
            query_id: "q".into(),
            candidates: ["x", "y", "z"]
                .iter()
                .enumerate()
                .map(|(i, id)| Candidate {
                    frame_id: id.to_string(),
                    global_score: 1.0 - i as f64 * 0.1,
                    rerank_score: Some(0.5),
                    flagged: false,
                })
                .collect(),
        };
        r.candidates.reverse();
        reorder_head(&mut r, 3);
        assert_eq!(r.ids(), vec!["x", "y", "z"]);
    }

    #[test]
    fn recall_counts_hits() {
        let list = |ids: &[&str]| RankedList {
            query_id: "q".into(),
            candidates: ids
                .iter()
                .map(|id| Candidate {
                    frame_id: id.to_string(),
                    global_score: 0.0,
                    rerank_score: None,
                    flagged: false,
                })
                .collect(),
        };
        let pos = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let lists = vec![list(&["a", "b", "c"]), list(&["d", "e", "f"])];
        let positives = vec![pos(&["b"]), pos(&["x"])];
        let r = recall_at_k(&lists, &positives, &[1, 2, 3]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&2], 0.5);
        assert_eq!(r[&3], 0.5);
        assert!(recall_at_k(&lists, &positives, &[0]).is_err());
    }
}
