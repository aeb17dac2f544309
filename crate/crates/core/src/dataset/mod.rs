//! Dataset generation from posed frame sequences: database-frame selection,
//! overlap-based pair labelling, keyframe extraction and manifests.

mod keyframes;
mod manifest;
mod scenes;

pub use keyframes::{extract_keyframes, greedy_dominating_set, is_dominating, positive_graph};
pub use manifest::{
    read_manifest, validate_manifest, write_manifest, DatasetManifest, GenerationConfig, SceneManifest, Split,
    MANIFEST_SCHEMA,
};
pub use scenes::{build_manifest, label_database, load_scene_dir, load_scenes_root, SceneSequence, SEQUENCE_FILE};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{read_pcb, transform, Pose, VoxelGrid};

pub const DEFAULT_VOXEL: f64 = 0.1;
pub const DEFAULT_NEGATIVE_CAP: usize = 100;

/// One posed frame of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub scene_id: String,
    pub cloud_path: PathBuf,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_path: Option<PathBuf>,
}

impl FrameRecord {
    /// The cloud path, joined onto `base` when relative.
    pub fn resolve(&self, base: &Path) -> PathBuf {
        if self.cloud_path.is_absolute() {
            self.cloud_path.clone()
        } else {
            base.join(&self.cloud_path)
        }
    }

    /// Voxel grid of the frame's cloud in world coordinates.
    pub fn world_grid(&self, base: &Path, voxel_size: f64) -> Result<VoxelGrid> {
        let cloud = read_pcb(self.resolve(base)).map_err(|e| e.context(&self.label()))?;
        VoxelGrid::from_positions(&transform(&cloud, &self.pose).positions(), voxel_size)
    }

    fn label(&self) -> String {
        format!("frame {}/{}", self.scene_id, self.frame_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Database selection: keep a frame once its IoU with the last kept one drops below this.
    pub t_c: f64,
    /// Positive: asymmetric overlap strictly above this.
    pub t_p: f64,
    /// Negative: asymmetric overlap at or below this.
    pub t_n: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t_c: 0.5,
            t_p: 0.3,
            t_n: 0.0,
        }
    }
}

impl Thresholds {
    pub fn new(t_c: f64, t_p: f64, t_n: f64) -> Result<Self> {
        let t = Thresholds { t_c, t_p, t_n };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0 && self.t_c <= 1.0) {
            return Err(Error::invalid(format!("t_c must lie in (0, 1], got {}", self.t_c)));
        }
        if !(self.t_n >= 0.0 && self.t_n < self.t_p && self.t_p <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= t_n < t_p <= 1, got t_n = {}, t_p = {}",
                self.t_n, self.t_p
            )));
        }
        Ok(())
    }
}

/// A frame in some scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub scene_id: String,
    pub frame_id: String,
}

/// Directed labels of one query frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    /// Same-scene frames covering more than `t_p` of this frame.
    pub positives: Vec<String>,
    /// Frames (any scene) covering at most `t_n` of this frame; possibly subsampled.
    pub negatives: Vec<FrameRef>,
}

/// Labels of every frame in one scene, keyed by frame id.
pub type PairLabels = BTreeMap<String, FrameLabels>;

/// Indices kept by sequential database selection over world-frame grids.
pub fn select_database_indices(grids: &[VoxelGrid], t_c: f64) -> Vec<usize> {
    if grids.is_empty() {
        return Vec::new();
    }
    let mut kept = vec![0];
    let mut last = 0;
    for (n, g) in grids.iter().enumerate().skip(1) {
        if grids[last].iou(g) < t_c {
            kept.push(n);
            last = n;
        }
    }
    kept
}

/// Keeps the first frame, then every frame whose symmetric overlap with the
/// most recently kept frame is below `t_c`.
pub fn select_database_frames(
    sequence: &[FrameRecord],
    base: &Path,
    t_c: f64,
    voxel_size: f64,
) -> Result<Vec<FrameRecord>> {
    if sequence.is_empty() {
        return Err(Error::invalid("empty frame sequence"));
    }
    if !(t_c > 0.0 && t_c <= 1.0) {
        return Err(Error::invalid(format!("t_c must lie in (0, 1], got {t_c}")));
    }
    let grids = sequence
        .par_iter()
        .map(|f| f.world_grid(base, voxel_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_database_indices(&grids, t_c)
        .into_iter()
        .map(|i| sequence[i].clone())
        .collect())
}

/// Database frames of one scene together with their world-frame grids.
#[derive(Debug, Clone)]
pub struct SceneGrids {
    pub scene_id: String,
    pub frame_ids: Vec<String>,
    pub grids: Vec<VoxelGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelOptions {
    pub negative_cap: usize,
    pub seed: u64,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            negative_cap: DEFAULT_NEGATIVE_CAP,
            seed: 0,
        }
    }
}

fn mix_seed(seed: u64, scene: usize, frame: usize) -> u64 {
    // splitmix-style scramble so neighbouring frames get unrelated streams
    let mut z = seed ^ ((scene as u64) << 32 | frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Directed positive/negative labels for every frame of every scene.
/// Cross-scene frames are negatives by construction; pairs whose overlap
/// falls in `(t_n, t_p]` are left unlabelled. Negative lists longer than
/// `negative_cap` are subsampled with a per-frame seeded stream.
pub fn label_pairs(scenes: &[SceneGrids], thresholds: &Thresholds, opts: &LabelOptions) -> Result<Vec<PairLabels>> {
    thresholds.validate()?;
    for s in scenes {
        if s.frame_ids.len() != s.grids.len() {
            return Err(Error::invalid(format!("scene {} has mismatched frames and grids", s.scene_id)));
        }
    }
    let jobs: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.frame_ids.len()).map(move |fi| (si, fi)))
        .collect();
    let labelled: Vec<FrameLabels> = jobs
        .par_iter()
        .map(|&(si, fi)| {
            let scene = &scenes[si];
            let q = &scene.grids[fi];
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (sj, other) in scenes.iter().enumerate() {
                for (fj, d) in other.grids.iter().enumerate() {
                    if sj == si && fj == fi {
                        continue;
                    }
                    let r = FrameRef {
                        scene_id: other.scene_id.clone(),
                        frame_id: other.frame_ids[fj].clone(),
                    };
                    if sj != si {
                        negatives.push(r);
                        continue;
                    }
                    let ov = q.coverage_by(d);
                    if ov > thresholds.t_p {
                        positives.push(r.frame_id);
                    } else if ov <= thresholds.t_n {
                        negatives.push(r);
                    }
                }
            }
            if negatives.len() > opts.negative_cap {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, si, fi));
                let mut pick = sample(&mut rng, negatives.len(), opts.negative_cap).into_vec();
                pick.sort_unstable();
                negatives = pick.into_iter().map(|i| negatives[i].clone()).collect();
            }
            FrameLabels { positives, negatives }
        })
        .collect();

    let mut out: Vec<PairLabels> = scenes.iter().map(|_| BTreeMap::new()).collect();
    for (&(si, fi), l) in jobs.iter().zip(labelled) {
        out[si].insert(scenes[si].frame_ids[fi].clone(), l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab(x0: i64, x1: i64) -> VoxelGrid {
        // voxel centers along x at 0.05 + i*0.1, one voxel thick in y and z
        let pos: Vec<[f64; 3]> = (x0..x1).map(|i| [i as f64 * 0.1 + 0.05, 0.05, 0.05]).collect();
        VoxelGrid::from_positions(&pos, 0.1).unwrap()
    }

    #[test]
    fn identical_frames_keep_only_the_first() {
        let grids = vec![slab(0, 10); 5];
        assert_eq!(select_database_indices(&grids, 0.5), vec![0]);
    }

    #[test]
    fn iou_below_threshold_keeps_every_frame() {
        // slabs of 7 voxels shifted by 3: |A∩B| = 4, |A∪B| = 10, IoU = 0.4
        let grids: Vec<_> = (0..6).map(|k| slab(3 * k, 3 * k + 7)).collect();
        assert!((grids[0].iou(&grids[1]) - 0.4).abs() < 1e-15);
        assert_eq!(select_database_indices(&grids, 0.5), (0..6).collect::<Vec<_>>());
        // shift by 1: IoU 6/8 = 0.75, so frames are kept once the drift accumulates
        let grids: Vec<_> = (0..6).map(|k| slab(k, k + 7)).collect();
        let kept = select_database_indices(&grids, 0.5);
        assert_eq!(kept, vec![0, 3]);
        for w in kept.windows(2) {
            assert!(grids[w[0]].iou(&grids[w[1]]) < 0.5);
        }
    }

    #[test]
    fn three_way_labelling() {
        // query of 10 voxels; candidates cover 8, 3 and 0 of them
        let scene = SceneGrids {
            scene_id: "s".into(),
            frame_ids: vec!["q".into(), "a".into(), "b".into(), "c".into()],
            grids: vec![slab(0, 10), slab(2, 12), slab(7, 17), slab(20, 25)],
        };
        let other = SceneGrids {
            scene_id: "t".into(),
            frame_ids: vec!["x".into()],
            grids: vec![slab(0, 10)],
        };
        let th = Thresholds::new(0.5, 0.5, 0.0).unwrap();
        let labels = label_pairs(&[scene, other], &th, &LabelOptions::default()).unwrap();
        let q = &labels[0]["q"];
        assert_eq!(q.positives, vec!["a".to_string()]);
        let negs: Vec<_> = q.negatives.iter().map(|r| (r.scene_id.as_str(), r.frame_id.as_str())).collect();
        // b (overlap 0.3) is unlabelled; x overlaps fully but lives in another scene
        assert_eq!(negs, vec![("s", "c"), ("t", "x")]);
        assert!(!labels[1]["x"].positives.iter().any(|p| p == "x"));
    }

    #[test]
    fn negatives_are_capped_deterministically() {
        let scenes: Vec<SceneGrids> = (0..3)
            .map(|s| SceneGrids {
                scene_id: format!("s{s}"),
                frame_ids: (0..10).map(|f| format!("f{f}")).collect(),
                grids: (0..10).map(|f| slab(f * 20, f * 20 + 5)).collect(),
            })
            .collect();
        let opts = LabelOptions {
            negative_cap: 7,
            seed: 11,
        };
        let a = label_pairs(&scenes, &Thresholds::default(), &opts).unwrap();
        let b = label_pairs(&scenes, &Thresholds::default(), &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|s| s.values()).all(|l| l.negatives.len() == 7));
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::new(0.5, 0.3, 0.3).is_err());
        assert!(Thresholds::new(0.0, 0.3, 0.0).is_err());
        assert!(Thresholds::new(1.0, 1.0, 0.0).is_ok());
    }
}
