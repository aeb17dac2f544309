use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameRecord, PairLabels, Thresholds};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "ipr-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

/// Everything that determined the labels, echoed into the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub thresholds: Thresholds,
    pub voxel_size: f64,
    pub negative_cap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    /// Database frames, in capture order.
    pub frames: Vec<FrameRecord>,
    pub labels: PairLabels,
    pub keyframes: Vec<String>,
    /// Non-keyframes with no keyframe among their (directed) positives.
    pub unreachable: Vec<String>,
}

impl SceneManifest {
    pub fn frame(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Non-keyframe frames, in capture order.
    pub fn queries(&self) -> Vec<&FrameRecord> {
        let keys: BTreeSet<&str> = self.keyframes.iter().map(String::as_str).collect();
        self.frames.iter().filter(|f| !keys.contains(f.frame_id.as_str())).collect()
    }
}

/// Non-keyframes whose positive list holds no keyframe.
pub(crate) fn unreachable_frames(frames: &[FrameRecord], labels: &PairLabels, keyframes: &[String]) -> Vec<String> {
    let keys: BTreeSet<&str> = keyframes.iter().map(String::as_str).collect();
    frames
        .iter()
        .filter(|f| !keys.contains(f.frame_id.as_str()))
        .filter(|f| {
            labels
                .get(&f.frame_id)
                .is_none_or(|l| !l.positives.iter().any(|p| keys.contains(p.as_str())))
        })
        .map(|f| f.frame_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub split: Split,
    pub config: GenerationConfig,
    pub scenes: Vec<SceneManifest>,
}

/// Every violated invariant, as human-readable messages (empty when valid).
pub fn validate_manifest(m: &DatasetManifest) -> Vec<String> {
    let mut errs = Vec::new();
    if m.schema != MANIFEST_SCHEMA {
        errs.push(format!("schema is {:?}, expected {MANIFEST_SCHEMA:?}", m.schema));
    }
    if let Err(e) = m.config.thresholds.validate() {
        errs.push(e.to_string());
    }
    if !(m.config.voxel_size > 0.0 && m.config.voxel_size.is_finite()) {
        errs.push(format!("voxel size must be positive, got {}", m.config.voxel_size));
    }
    if m.scenes.is_empty() {
        errs.push("manifest has no scenes".into());
    }
    let mut all: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in &m.scenes {
        let ids = all.entry(s.scene_id.as_str()).or_default();
        if !ids.is_empty() {
            errs.push(format!("scene {} appears twice", s.scene_id));
        }
        if s.frames.is_empty() {
            errs.push(format!("scene {} has no frames", s.scene_id));
        }
        for f in &s.frames {
            if !ids.insert(f.frame_id.as_str()) {
                errs.push(format!("scene {}: duplicate frame id {}", s.scene_id, f.frame_id));
            }
            if f.scene_id != s.scene_id {
                errs.push(format!("frame {} claims scene {} inside scene {}", f.frame_id, f.scene_id, s.scene_id));
            }
        }
    }
    for s in &m.scenes {
        let sid = s.scene_id.as_str();
        let ids = &all[sid];
        for f in &s.frames {
            if !s.labels.contains_key(&f.frame_id) {
                errs.push(format!("scene {sid}: frame {} has no labels", f.frame_id));
            }
        }
        for (q, l) in &s.labels {
            if !ids.contains(q.as_str()) {
                errs.push(format!("scene {sid}: labels for unknown frame {q}"));
            }
            for p in &l.positives {
                if p == q {
                    errs.push(format!("scene {sid}: frame {q} is its own positive"));
                }
                if !ids.contains(p.as_str()) {
                    errs.push(format!("scene {sid}: frame {q} has unknown positive {p}"));
                }
            }
            for n in &l.negatives {
                if !all.get(n.scene_id.as_str()).is_some_and(|f| f.contains(n.frame_id.as_str())) {
                    errs.push(format!("scene {sid}: frame {q} has unknown negative {}/{}", n.scene_id, n.frame_id));
                }
                if n.scene_id == sid && (n.frame_id == *q || l.positives.contains(&n.frame_id)) {
                    errs.push(format!("scene {sid}: frame {q} lists {} as both positive and negative", n.frame_id));
                }
            }
        }
        for k in &s.keyframes {
            if !ids.contains(k.as_str()) {
                errs.push(format!("scene {sid}: unknown keyframe {k}"));
            }
        }
        let expect = unreachable_frames(&s.frames, &s.labels, &s.keyframes);
        if expect != s.unreachable {
            errs.push(format!(
                "scene {sid}: unreachable list {:?} does not match the labels ({:?})",
                s.unreachable, expect
            ));
        }
    }
    errs
}

/// Validates and writes pretty-printed JSON.
pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let errs = validate_manifest(m);
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(m).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let errs = validate_manifest(&m);
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    Ok(m)
}
