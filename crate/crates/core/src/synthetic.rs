//! Procedural indoor scenes: box rooms of textured planes with a few
//! furniture blocks, rendered into posed frames by frustum cropping.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameRecord, SceneSequence, SEQUENCE_FILE};
use crate::error::{Error, Result};
use crate::geometry::{transform, voxel_downsample, write_pcb, Point, PointCloud, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Full horizontal field of view, radians.
    pub h_fov: f64,
    pub v_fov: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            h_fov: 70f64.to_radians(),
            v_fov: 55f64.to_radians(),
            near: 0.3,
            far: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    /// Width, depth, height in meters.
    pub size: [f64; 3],
    pub boxes: usize,
    /// Surface sampling pitch in meters.
    pub spacing: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            size: [4.0, 3.5, 2.5],
            boxes: 4,
            spacing: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub size: [f64; 3],
    /// All surface points in world coordinates.
    pub world: PointCloud,
}

/// Per-channel sinusoidal pattern, so nearby surface points have distinct colors.
struct Texture {
    base: [f64; 3],
    freq: [[f64; 2]; 3],
    phase: [[f64; 2]; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.3..1.0));
        let mut pair = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        Texture {
            base,
            freq: [pair(1.0, 4.0), pair(1.0, 4.0), pair(1.0, 4.0)],
            phase: [pair(0.0, 2.0 * PI), pair(0.0, 2.0 * PI), pair(0.0, 2.0 * PI)],
        }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        [0, 1, 2].map(|c| {
            let (f, p) = (self.freq[c], self.phase[c]);
            let m = 0.55 + 0.45 * (2.0 * PI * f[0] * u + p[0]).sin() * (2.0 * PI * f[1] * v + p[1]).cos();
            (self.base[c] * m).clamp(0.0, 1.0)
        })
    }
}

/// Samples the rectangle `origin + s*eu + t*ev`, `s ∈ [0,|eu|]`, `t ∈ [0,|ev|]`.
fn sample_rect(
    out: &mut Vec<Point>,
    rng: &mut ChaCha8Rng,
    origin: [f64; 3],
    eu: [f64; 3],
    ev: [f64; 3],
    normal: [f64; 3],
    spacing: f64,
    tex: &Texture,
) {
    let len = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (lu, lv) = (len(eu), len(ev));
    let nu = (lu / spacing).ceil().max(1.0) as usize;
    let nv = (lv / spacing).ceil().max(1.0) as usize;
    for a in 0..nu {
        for b in 0..nv {
            let s = ((a as f64 + rng.random_range(0.2..0.8)) / nu as f64).min(1.0);
            let t = ((b as f64 + rng.random_range(0.2..0.8)) / nv as f64).min(1.0);
            let p = [0, 1, 2].map(|k| origin[k] + s * eu[k] + t * ev[k]);
            out.push(Point::new(tex.color(s * lu, t * lv), p, normal));
        }
    }
}

/// A room with textured walls, floor and ceiling plus `boxes` blocks on the floor.
pub fn generate_room(scene_id: &str, cfg: &RoomConfig, seed: u64) -> Result<SyntheticScene> {
    let [w, d, h] = cfg.size;
    if !(w > 1.0 && d > 1.0 && h > 1.0) || !(cfg.spacing > 0.0) {
        return Err(Error::invalid("rooms need sides above 1 m and a positive spacing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let faces: [([f64; 3], [f64; 3], [f64; 3], [f64; 3]); 6] = [
        ([0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 0.0, h], [w, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, -1.0]),
        ([0.0, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], [1.0, 0.0, 0.0]),
        ([w, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], [-1.0, 0.0, 0.0]),
        ([0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], [0.0, 1.0, 0.0]),
        ([0.0, d, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], [0.0, -1.0, 0.0]),
    ];
    for (o, eu, ev, n) in faces {
        let tex = Texture::random(&mut rng);
        sample_rect(&mut pts, &mut rng, o, eu, ev, n, cfg.spacing, &tex);
    }
    for _ in 0..cfg.boxes {
        let (sx, sy, sz) = (rng.random_range(0.3..0.8), rng.random_range(0.3..0.8), rng.random_range(0.3..1.2));
        let x0 = rng.random_range(0.1..w - sx - 0.1);
        let y0 = rng.random_range(0.1..d - sy - 0.1);
        let tex = Texture::random(&mut rng);
        let (x1, y1) = (x0 + sx, y0 + sy);
        let sides: [([f64; 3], [f64; 3], [f64; 3], [f64; 3]); 5] = [
            ([x0, y0, sz], [sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]),
            ([x0, y0, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], [0.0, -1.0, 0.0]),
            ([x0, y1, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], [0.0, 1.0, 0.0]),
            ([x0, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], [-1.0, 0.0, 0.0]),
            ([x1, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], [1.0, 0.0, 0.0]),
        ];
        for (o, eu, ev, n) in sides {
            sample_rect(&mut pts, &mut rng, o, eu, ev, n, cfg.spacing, &tex);
        }
    }
    Ok(SyntheticScene {
        scene_id: scene_id.to_string(),
        size: cfg.size,
        world: PointCloud::new(pts)?,
    })
}

/// Camera-to-world pose at `position` looking horizontally along `yaw`.
/// Camera axes: x right, y down, z forward.
pub fn camera_pose(position: [f64; 3], yaw: f64) -> Pose {
    let (s, c) = yaw.sin_cos();
    let right = [s, -c, 0.0];
    let down = [0.0, 0.0, -1.0];
    let forward = [c, s, 0.0];
    let rot = [0, 1, 2].map(|r| [right[r], down[r], forward[r]]);
    Pose::from_rows(rot, position).expect("orthonormal by construction")
}

/// Points of `world` visible from `pose` (inside the frustum and facing the
/// camera), in camera coordinates, voxel-thinned to at most `max_points`.
pub fn render_frame(
    world: &PointCloud,
    pose: &Pose,
    camera: &CameraModel,
    voxel_size: f64,
    max_points: usize,
) -> Result<PointCloud> {
    let inv = pose.inverse();
    let (tx, ty) = ((camera.h_fov / 2.0).tan(), (camera.v_fov / 2.0).tan());
    let mut visible = Vec::new();
    for p in world.points() {
        let l = inv.apply(&p.position);
        if l[2] < camera.near || l[2] > camera.far || l[0].abs() > tx * l[2] || l[1].abs() > ty * l[2] {
            continue;
        }
        let n = inv.rotate(&p.normal);
        // back faces point away from the camera at the origin
        if n[0] * l[0] + n[1] * l[1] + n[2] * l[2] >= 0.0 {
            continue;
        }
        visible.push(Point::new(p.color, l, n));
    }
    if visible.is_empty() {
        return Err(Error::DegenerateGeometry("camera sees no surface".into()));
    }
    voxel_downsample(&PointCloud::new(visible)?, voxel_size, max_points)
}

/// `n` poses on a horizontal circle about the room center, each looking
/// outward, sweeping `sweep` radians in total.
pub fn circular_trajectory(size: [f64; 3], n: usize, sweep: f64) -> Vec<Pose> {
    let center = [size[0] / 2.0, size[1] / 2.0, 1.3f64.min(size[2] * 0.6)];
    let r = 0.25 * size[0].min(size[1]);
    (0..n)
        .map(|k| {
            let a = sweep * k as f64 / n.max(1) as f64;
            camera_pose([center[0] + r * a.cos(), center[1] + r * a.sin(), center[2]], a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackConfig {
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub room: RoomConfig,
    pub camera: CameraModel,
    pub frame_voxel: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            scenes: 3,
            frames_per_scene: 50,
            room: RoomConfig::default(),
            camera: CameraModel::default(),
            frame_voxel: 0.02,
            max_points: 2048,
            seed: 0,
        }
    }
}

fn scene_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Renders `frames_per_scene` frames per room along a full outward-looking circle.
pub fn render_pack(cfg: &PackConfig) -> Result<Vec<(SyntheticScene, Vec<(Pose, PointCloud)>)>> {
    (0..cfg.scenes)
        .map(|k| {
            let scene = generate_room(&format!("scene_{k:03}"), &cfg.room, scene_seed(cfg.seed, k))?;
            let frames = circular_trajectory(cfg.room.size, cfg.frames_per_scene, 2.0 * PI)
                .into_iter()
                .map(|pose| {
                    let cloud = render_frame(&scene.world, &pose, &cfg.camera, cfg.frame_voxel, cfg.max_points)?;
                    Ok((pose, cloud))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((scene, frames))
        })
        .collect()
}

/// Writes one `<dir>/<scene_id>/` folder per scene with `.pcb` clouds and a
/// sequence file; returns the sequences as loaded back.
pub fn write_pack(dir: &Path, scenes: &[(String, Vec<(String, Pose, PointCloud)>)]) -> Result<Vec<SceneSequence>> {
    let mut out = Vec::new();
    for (scene_id, frames) in scenes {
        let sdir = dir.join(scene_id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut entries = Vec::new();
        let mut records = Vec::new();
        for (frame_id, pose, cloud) in frames {
            let file = format!("{frame_id}.pcb");
            write_pcb(sdir.join(&file), cloud)?;
            entries.push(serde_json::json!({ "frame_id": frame_id, "cloud_path": file, "pose": pose }));
            records.push(FrameRecord {
                frame_id: frame_id.clone(),
                scene_id: scene_id.clone(),
                cloud_path: sdir.join(&file),
                pose: *pose,
                semantic_path: None,
            });
        }
        let seq = sdir.join(SEQUENCE_FILE);
        let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::format(&seq, e.to_string()))?;
        fs::write(&seq, text).map_err(|e| Error::io(&seq, e))?;
        out.push(SceneSequence {
            scene_id: scene_id.clone(),
            frames: records,
        });
    }
    Ok(out)
}

/// Renders and writes the default pack layout (`frame_000`, `frame_001`, ...).
pub fn generate_scene_pack(dir: &Path, cfg: &PackConfig) -> Result<Vec<SceneSequence>> {
    let rendered = render_pack(cfg)?;
    let named: Vec<_> = rendered
        .into_iter()
        .map(|(scene, frames)| {
            let frames = frames
                .into_iter()
                .enumerate()
                .map(|(i, (pose, cloud))| (format!("frame_{i:03}"), pose, cloud))
                .collect();
            (scene.scene_id, frames)
        })
        .collect();
    write_pack(dir, &named)
}

/// `cloud` moved by `delta` (camera coordinates), with a `noise_fraction`
/// share of points jittered by isotropic Gaussian noise of `sigma` meters.
pub fn rigid_copy(cloud: &PointCloud, delta: &Pose, noise_fraction: f64, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&noise_fraction) || !(sigma >= 0.0) {
        return Err(Error::invalid("noise fraction must lie in [0, 1] and sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let moved = transform(cloud, delta);
    let pts = moved
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            if rng.random::<f64>() < noise_fraction {
                for v in &mut q.position {
                    *v += normal.sample(&mut rng);
                }
            }
            q
        })
        .collect();
    PointCloud::new(pts)
}

/// A random rigid motion with rotation angle up to `max_angle` and
/// translation up to `max_shift` per axis.
pub fn random_motion(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> Pose {
    let axis = loop {
        let a: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        if n > 0.1 {
            break a.map(|v| v / n);
        }
    };
    let angle = rng.random_range(-max_angle..=max_angle);
    let t = [0; 3].map(|_| rng.random_range(-max_shift..=max_shift));
    Pose::from_axis_angle(axis, angle, t)
}

/// Frames for a geometric-verification check: in every room, `views`
/// outward views spread evenly around the circle (ids `v0`, `v1`, ...), each
/// followed by a rigidly moved noisy copy (`v0_copy`, ...) whose pose keeps
/// it registered in world coordinates.
pub fn rigid_pack(cfg: &PackConfig, views: usize, noise_fraction: f64, sigma: f64) -> Result<Vec<(String, Vec<(String, Pose, PointCloud)>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    (0..cfg.scenes)
        .map(|k| {
            let scene = generate_room(&format!("rigid_{k:03}"), &cfg.room, scene_seed(cfg.seed, k))?;
            let mut frames = Vec::new();
            for (v, pose) in circular_trajectory(cfg.room.size, views, 2.0 * PI).into_iter().enumerate() {
                let cloud = render_frame(&scene.world, &pose, &cfg.camera, cfg.frame_voxel, cfg.max_points)?;
                let delta = random_motion(&mut rng, 10f64.to_radians(), 0.15);
                let copy = rigid_copy(&cloud, &delta, noise_fraction, sigma, rng.random())?;
                // world point = pose * x = (pose * delta^-1) * (delta * x)
                let copy_pose = pose.compose(&delta.inverse());
                frames.push((format!("v{v}"), pose, cloud));
                frames.push((format!("v{v}_copy"), copy_pose, copy));
            }
            Ok((scene.scene_id, frames))
        })
        .collect()
}

/// Ten labelled cloud pairs: five positives (neighbouring views of one room)
/// and five negatives (views of different rooms).
pub fn toy_pair_clouds(cfg: &PackConfig) -> Result<Vec<(PointCloud, PointCloud, bool)>> {
    let mut c = *cfg;
    c.scenes = c.scenes.max(2);
    c.frames_per_scene = 20;
    let pack = render_pack(&c)?;
    let mut out = Vec::new();
    for i in 0..5 {
        let (_, a) = &pack[i % c.scenes];
        out.push((a[4 * i].1.clone(), a[4 * i + 1].1.clone(), true));
    }
    for i in 0..5 {
        let (_, a) = &pack[i % c.scenes];
        let (_, b) = &pack[(i + 1) % c.scenes];
        out.push((a[4 * i + 2].1.clone(), b[4 * i + 2].1.clone(), false));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_looks_along_yaw() {
        let pose = camera_pose([1.0, 2.0, 1.0], 0.3);
        let ahead = pose.apply(&[0.0, 0.0, 2.0]);
        assert!((ahead[0] - (1.0 + 2.0 * 0.3f64.cos())).abs() < 1e-12);
        assert!((ahead[1] - (2.0 + 2.0 * 0.3f64.sin())).abs() < 1e-12);
        assert!((pose.apply(&[0.0, 1.0, 0.0])[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rendered_frames_are_in_the_frustum() {
        let scene = generate_room("r", &RoomConfig::default(), 1).unwrap();
        let cam = CameraModel::default();
        let pose = circular_trajectory(scene.size, 8, 2.0 * PI)[3];
        let f = render_frame(&scene.world, &pose, &cam, 0.03, 2048).unwrap();
        assert!(f.len() >= 800 && f.len() <= 2048, "{}", f.len());
        for p in f.points() {
            assert!(p.position[2] > 0.2);
        }
    }

    #[test]
    fn rigid_copy_is_registered_in_world() {
        let cfg = PackConfig {
            scenes: 1,
            ..Default::default()
        };
        let pack = rigid_pack(&cfg, 2, 0.0, 0.0).unwrap();
        let frames = &pack[0].1;
        let (a, b) = (&frames[0], &frames[1]);
        let wa = transform(&a.2, &a.1);
        let wb = transform(&b.2, &b.1);
        for (p, q) in wa.points().iter().zip(wb.points()) {
            for k in 0..3 {
                assert!((p.position[k] - q.position[k]).abs() < 1e-9);
            }
        }
    }
}
