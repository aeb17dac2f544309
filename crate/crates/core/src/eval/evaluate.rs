use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{baseline_features, rerank_kabsch_baseline, BaselineFeatures, RansacConfig};
use super::{frame_key, recall_at_k, rerank_cscc, retrieve_descriptor, IndexEntry, RankedList, RetrievalIndex};
use crate::dataset::{DatasetManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::geometry::{read_pcb, PointCloud};
use crate::kernels::{extract_features, scc_forward, CenterFeatures, GlobalDescriptor, ModelWeights};

pub const EVAL_SCHEMA: &str = "cscpr-eval/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    None,
    Cscc,
    Kabsch,
}

impl std::str::FromStr for RerankerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RerankerKind::None),
            "cscc" => Ok(RerankerKind::Cscc),
            "kabsch" => Ok(RerankerKind::Kabsch),
            _ => Err(Error::invalid(format!("unknown reranker {s:?} (expected none, cscc or kabsch)"))),
        }
    }
}

/// Where global descriptors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorMode {
    /// The learned extractor.
    Extractor,
    /// Ground truth: a one-hot per database frame; a query sums the one-hots
    /// of its positives.
    Oracle,
}

impl std::str::FromStr for DescriptorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extractor" => Ok(DescriptorMode::Extractor),
            "oracle" => Ok(DescriptorMode::Oracle),
            _ => Err(Error::invalid(format!("unknown descriptor mode {s:?} (expected extractor or oracle)"))),
        }
    }
}

/// Which database frames a query is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatabaseScope {
    /// Keyframes of the query's own scene.
    Scene,
    /// Keyframes of every scene.
    Global,
}

impl std::str::FromStr for DatabaseScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(DatabaseScope::Scene),
            "global" => Ok(DatabaseScope::Global),
            _ => Err(Error::invalid(format!("unknown database scope {s:?} (expected scene or global)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub reranker: RerankerKind,
    pub descriptors: DescriptorMode,
    pub top_n: usize,
    pub top_r: usize,
    pub ks: Vec<usize>,
    pub database_scope: DatabaseScope,
    pub ransac: RansacConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            reranker: RerankerKind::None,
            descriptors: DescriptorMode::Extractor,
            top_n: 25,
            top_r: 20,
            ks: vec![1, 2, 3],
            database_scope: DatabaseScope::Scene,
            ransac: RansacConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::invalid("top_n must be at least 1"));
        }
        if self.top_r > self.top_n {
            return Err(Error::invalid(format!(
                "rerank window {} exceeds the retrieval depth {}",
                self.top_r, self.top_n
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("recall cut-offs must be a non-empty list of k >= 1"));
        }
        self.ransac.validate()
    }

    fn needs_weights(&self) -> bool {
        self.descriptors == DescriptorMode::Extractor || self.reranker == RerankerKind::Cscc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub positives: Vec<String>,
    /// Retrieval order before reranking.
    pub retrieved: Vec<String>,
    pub ranked: RankedList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config: EvalConfig,
    /// Seed of the model weights, when any were used.
    pub weights_seed: Option<u64>,
    pub manifest_seed: u64,
    pub database_size: usize,
    pub recall_at: BTreeMap<usize, f64>,
    /// Recall of the retrieval order alone, for comparison.
    pub retrieval_recall_at: BTreeMap<usize, f64>,
    /// Queries with no positive in the database; excluded from recall.
    pub unanswerable: Vec<String>,
    pub queries: Vec<QueryResult>,
    /// Wall-clock milliseconds per stage; the only non-reproducible field.
    pub timing_ms: BTreeMap<String, f64>,
}

impl EvalReport {
    /// The report with timings cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            timing_ms: BTreeMap::new(),
            ..self.clone()
        }
    }
}

struct Stopwatch {
    timings: BTreeMap<String, f64>,
    last: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            timings: BTreeMap::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        *self.timings.entry(stage.to_string()).or_default() += (now - self.last).as_secs_f64() * 1e3;
        self.last = now;
    }
}

struct Query<'a> {
    scene: usize,
    frame: &'a FrameRecord,
    positives: BTreeSet<String>,
}

/// Per-frame inputs for whichever stages are enabled.
#[derive(Default)]
struct FrameData {
    descriptor: Option<GlobalDescriptor>,
    centers: Option<CenterFeatures>,
    baseline: Option<BaselineFeatures>,
}

/// Runs retrieval and optional reranking for every non-keyframe query against
/// the keyframe database and scores Recall@k.
pub fn evaluate(
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &EvalConfig,
    weights: Option<&ModelWeights>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let weights = match (cfg.needs_weights(), weights) {
        (true, None) => return Err(Error::invalid("this configuration needs model weights")),
        (true, Some(w)) => {
            w.config.validate()?;
            Some(w)
        }
        (false, _) => None,
    };
    let mut clock = Stopwatch::new();

    // database and queries
    let mut database: Vec<Vec<&FrameRecord>> = Vec::new();
    let mut queries = Vec::new();
    let mut unanswerable = Vec::new();
    for (si, s) in manifest.scenes.iter().enumerate() {
        let keys: BTreeSet<&str> = s.keyframes.iter().map(String::as_str).collect();
        let db: Vec<&FrameRecord> = s
            .keyframes
            .iter()
            .map(|k| s.frame(k).ok_or_else(|| Error::invalid(format!("keyframe {k} is not a frame of {}", s.scene_id))))
            .collect::<Result<_>>()?;
        database.push(db);
        for f in s.queries() {
            let positives: BTreeSet<String> = s
                .labels
                .get(&f.frame_id)
                .map(|l| {
                    l.positives
                        .iter()
                        .filter(|p| keys.contains(p.as_str()))
                        .map(|p| format!("{}/{}", s.scene_id, p))
                        .collect()
                })
                .unwrap_or_default();
            if positives.is_empty() {
                unanswerable.push(frame_key(f));
            } else {
                queries.push(Query {
                    scene: si,
                    frame: f,
                    positives,
                });
            }
        }
    }
    let database_size: usize = database.iter().map(Vec::len).sum();
    if database_size == 0 {
        return Err(Error::invalid("the manifest has no keyframes"));
    }
    if !unanswerable.is_empty() {
        log::warn!("{} queries have no positive keyframe and are excluded", unanswerable.len());
    }

    // per-frame features, each frame computed once
    let mut needed: BTreeMap<String, &FrameRecord> = BTreeMap::new();
    for f in database.iter().flatten() {
        needed.insert(frame_key(f), f);
    }
    for q in &queries {
        needed.insert(frame_key(q.frame), q.frame);
    }
    let load_clouds = cfg.needs_weights() || cfg.reranker == RerankerKind::Kabsch;
    let frames: Vec<(&String, &&FrameRecord)> = needed.iter().collect();
    let clouds: BTreeMap<String, PointCloud> = if load_clouds {
        frames
            .par_iter()
            .map(|(k, f)| Ok(((*k).clone(), read_pcb(f.resolve(base)).map_err(|e| e.context(k))?)))
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    clock.lap("load");

    let data: BTreeMap<String, FrameData> = frames
        .par_iter()
        .map(|(k, _)| {
            let mut d = FrameData::default();
            if let Some(w) = weights {
                let ex = extract_features(&clouds[*k], &w.config.extractor, &w.extractor).map_err(|e| e.context(k))?;
                if cfg.reranker == RerankerKind::Cscc {
                    d.centers = Some(scc_forward(&ex.point_features, &w.scc).map_err(|e| e.context(k))?);
                }
                d.descriptor = Some(ex.descriptor);
            }
            if cfg.reranker == RerankerKind::Kabsch {
                d.baseline = Some(baseline_features(&clouds[*k], cfg.ransac.max_points).map_err(|e| e.context(k))?);
            }
            Ok(((*k).clone(), d))
        })
        .collect::<Result<_>>()?;
    drop(clouds);
    clock.lap("describe");

    // descriptors and indexes
    let descriptor_of: BTreeMap<String, GlobalDescriptor> = match cfg.descriptors {
        DescriptorMode::Extractor => data
            .iter()
            .map(|(k, d)| (k.clone(), d.descriptor.clone().expect("extractor descriptors computed")))
            .collect(),
        DescriptorMode::Oracle => oracle_descriptors(&database, &queries),
    };
    let entries = |frames: &[&FrameRecord]| -> Vec<IndexEntry> {
        frames
            .iter()
            .map(|f| {
                let key = frame_key(f);
                IndexEntry {
                    descriptor: descriptor_of[&key].clone(),
                    frame_id: key,
                }
            })
            .collect()
    };
    let indexes: Vec<RetrievalIndex> = match cfg.database_scope {
        DatabaseScope::Scene => database
            .iter()
            .map(|db| RetrievalIndex::new(entries(db), weights.map(|w| w.config.extractor.clone())))
            .collect::<Result<_>>()?,
        DatabaseScope::Global => {
            let all: Vec<&FrameRecord> = database.iter().flatten().copied().collect();
            vec![RetrievalIndex::new(entries(&all), weights.map(|w| w.config.extractor.clone()))?]
        }
    };
    clock.lap("index");

    // retrieval then reranking, one query per task, collected in query order
    let centers: BTreeMap<String, CenterFeatures> = if cfg.reranker == RerankerKind::Cscc {
        data.iter()
            .map(|(k, d)| (k.clone(), d.centers.clone().expect("centers computed")))
            .collect()
    } else {
        BTreeMap::new()
    };
    let baseline: BTreeMap<String, BaselineFeatures> = if cfg.reranker == RerankerKind::Kabsch {
        data.iter()
            .map(|(k, d)| (k.clone(), d.baseline.clone().expect("baseline features computed")))
            .collect()
    } else {
        BTreeMap::new()
    };
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|q| {
            let key = frame_key(q.frame);
            let index = match cfg.database_scope {
                DatabaseScope::Scene => &indexes[q.scene],
                DatabaseScope::Global => &indexes[0],
            };
            if index.is_empty() {
                return Err(Error::invalid(format!("{key}: its scene has no keyframes")));
            }
            let retrieved = retrieve_descriptor(&key, &descriptor_of[&key], index, cfg.top_n)?;
            let top_r = cfg.top_r.min(retrieved.candidates.len());
            let ranked = match cfg.reranker {
                RerankerKind::None => retrieved.clone(),
                RerankerKind::Cscc => {
                    let w = weights.expect("weights checked above");
                    rerank_cscc(&centers[&key], &retrieved, top_r, &centers, &w.cscc).map_err(|e| e.context(&key))?
                }
                RerankerKind::Kabsch => rerank_kabsch_baseline(&baseline[&key], &retrieved, top_r, &baseline, &cfg.ransac)
                    .map_err(|e| e.context(&key))?,
            };
            Ok(QueryResult {
                query_id: key,
                positives: q.positives.iter().cloned().collect(),
                retrieved: retrieved.ids().into_iter().map(String::from).collect(),
                ranked,
            })
        })
        .collect::<Result<_>>()?;
    clock.lap("query");

    let positives: Vec<BTreeSet<String>> = queries.iter().map(|q| q.positives.clone()).collect();
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let lists: Vec<RankedList> = results.iter().map(|r| r.ranked.clone()).collect();
    let recall_at = recall_at_k(&lists, &positives, &ks)?;
    let before: Vec<RankedList> = results
        .iter()
        .map(|r| RankedList {
            query_id: r.query_id.clone(),
            candidates: r
                .retrieved
                .iter()
                .map(|id| r.ranked.candidates.iter().find(|c| &c.frame_id == id).cloned().expect("same set"))
                .collect(),
        })
        .collect();
    let retrieval_recall_at = recall_at_k(&before, &positives, &ks)?;
    clock.lap("score");
    let total = clock.timings.values().sum();
    clock.timings.insert("total".into(), total);

    Ok(EvalReport {
        schema: EVAL_SCHEMA.into(),
        config: cfg.clone(),
        weights_seed: weights.map(|w| w.seed),
        manifest_seed: manifest.config.seed,
        database_size,
        recall_at,
        retrieval_recall_at,
        unanswerable,
        queries: results,
        timing_ms: clock.timings,
    })
}

/// One-hot descriptors over all database frames; each query gets the sum of
/// its positives' one-hots, so its best match is always a positive.
fn oracle_descriptors(database: &[Vec<&FrameRecord>], queries: &[Query]) -> BTreeMap<String, GlobalDescriptor> {
    let keys: Vec<String> = database.iter().flatten().map(|f| frame_key(f)).collect();
    let slot: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut out = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let mut v = vec![0.0; keys.len()];
        v[i] = 1.0;
        out.insert(k.clone(), GlobalDescriptor(v));
    }
    for q in queries {
        let mut v = vec![0.0; keys.len()];
        for p in &q.positives {
            v[slot[p.as_str()]] = 1.0;
        }
        out.insert(frame_key(q.frame), GlobalDescriptor(v));
    }
    out
}
