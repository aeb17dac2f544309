use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use super::keyframes::extract_keyframes;
use super::manifest::{unreachable_frames, DatasetManifest, GenerationConfig, SceneManifest, Split, MANIFEST_SCHEMA};
use super::{label_pairs, select_database_indices, FrameRecord, LabelOptions, SceneGrids};
use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const SEQUENCE_FILE: &str = "sequence.json";

/// One scene's frames in capture order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub scene_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceEntry {
    frame_id: String,
    cloud_path: PathBuf,
    pose: Pose,
    #[serde(default)]
    semantic_path: Option<PathBuf>,
}

/// Reads `<dir>/sequence.json`; the scene id is the directory name and
/// relative paths are taken relative to `dir`.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<SceneSequence> {
    let dir = dir.as_ref();
    let scene_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("cannot take a scene id from {}", dir.display())))?
        .to_string();
    let path = dir.join(SEQUENCE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<SequenceEntry> = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if entries.is_empty() {
        return Err(Error::format(&path, "sequence has no frames"));
    }
    let rel = |p: PathBuf| if p.is_absolute() { p } else { dir.join(p) };
    let frames = entries
        .into_iter()
        .map(|e| FrameRecord {
            frame_id: e.frame_id,
            scene_id: scene_id.clone(),
            cloud_path: rel(e.cloud_path),
            pose: e.pose,
            semantic_path: e.semantic_path.map(rel),
        })
        .collect();
    Ok(SceneSequence { scene_id, frames })
}

/// Every immediate subdirectory holding a sequence file, in name order.
pub fn load_scenes_root(root: impl AsRef<Path>) -> Result<Vec<SceneSequence>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(SEQUENCE_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "no scene directories with a {SEQUENCE_FILE} under {}",
            root.display()
        )));
    }
    dirs.iter().map(load_scene_dir).collect()
}

/// Runs selection, labelling and keyframe extraction over all scenes.
/// Relative cloud paths resolve against `base`.
pub fn build_manifest(
    scenes: &[SceneSequence],
    base: &Path,
    config: &GenerationConfig,
    split: Split,
) -> Result<DatasetManifest> {
    config.thresholds.validate()?;
    let mut selected = Vec::with_capacity(scenes.len());
    for s in scenes {
        let all = scene_grids(s, base, config.voxel_size)?;
        let keep = select_database_indices(&all.grids, config.thresholds.t_c);
        let frames = keep.iter().map(|&i| s.frames[i].clone()).collect();
        let grids = SceneGrids {
            scene_id: s.scene_id.clone(),
            frame_ids: keep.iter().map(|&i| all.frame_ids[i].clone()).collect(),
            grids: keep.iter().map(|&i| all.grids[i].clone()).collect(),
        };
        selected.push((frames, grids));
    }
    assemble(selected, config, split)
}

/// Like [`build_manifest`] but treats every given frame as a database frame
/// (no selection step).
pub fn label_database(
    scenes: &[SceneSequence],
    base: &Path,
    config: &GenerationConfig,
    split: Split,
) -> Result<DatasetManifest> {
    config.thresholds.validate()?;
    let selected = scenes
        .iter()
        .map(|s| Ok((s.frames.clone(), scene_grids(s, base, config.voxel_size)?)))
        .collect::<Result<Vec<_>>>()?;
    assemble(selected, config, split)
}

fn scene_grids(s: &SceneSequence, base: &Path, voxel_size: f64) -> Result<SceneGrids> {
    if s.frames.is_empty() {
        return Err(Error::invalid(format!("scene {} has no frames", s.scene_id)));
    }
    let grids = s
        .frames
        .par_iter()
        .map(|f| f.world_grid(base, voxel_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneGrids {
        scene_id: s.scene_id.clone(),
        frame_ids: s.frames.iter().map(|f| f.frame_id.clone()).collect(),
        grids,
    })
}

fn assemble(selected: Vec<(Vec<FrameRecord>, SceneGrids)>, config: &GenerationConfig, split: Split) -> Result<DatasetManifest> {
    let opts = LabelOptions {
        negative_cap: config.negative_cap,
        seed: config.seed,
    };
    let grids: Vec<SceneGrids> = selected.iter().map(|(_, g)| g.clone()).collect();
    let labels = label_pairs(&grids, &config.thresholds, &opts)?;
    let scenes = selected
        .into_iter()
        .zip(labels)
        .map(|((frames, g), labels)| {
            let keyframes = extract_keyframes(&g.frame_ids, &labels);
            let unreachable = unreachable_frames(&frames, &labels, &keyframes);
            SceneManifest {
                scene_id: g.scene_id,
                frames,
                labels,
                keyframes,
                unreachable,
            }
        })
        .collect();
    Ok(DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        split,
        config: *config,
        scenes,
    })
}
