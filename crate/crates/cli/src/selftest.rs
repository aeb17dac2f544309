use std::path::Path;

use anyhow::bail;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cscpr::dataset::{build_manifest, extract_keyframes, is_dominating, label_database, positive_graph, Split};
use cscpr::eval::{evaluate, DescriptorMode, EvalConfig, RerankerKind};
use cscpr::geometry::{kabsch_align, knn, Pose};
use cscpr::learning::{check_gradients, toy_instance};
use cscpr::synthetic::{generate_scene_pack, rigid_pack, write_pack, PackConfig};

use crate::config::RunConfig;

type Check = fn(&RunConfig, &Path) -> anyhow::Result<String>;

pub fn run(cfg: RunConfig) -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let checks: [(&str, Check); 5] = [
        ("kabsch recovers random poses", kabsch),
        ("knn matches a full sort", knn_oracle),
        ("analytic gradients match finite differences", gradients),
        ("synthetic trajectory labels and keyframes", dataset),
        ("oracle and geometric recall", recall),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(&cfg, dir.path()) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}

fn kabsch(cfg: &RunConfig, _: &Path) -> anyhow::Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
        let pose = Pose::from_axis_angle(axis, rng.random_range(-3.0..3.0), [rng.random(), rng.random(), rng.random()]);
        let src: Vec<[f64; 3]> = (0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let dst: Vec<[f64; 3]> = src.iter().map(|p| pose.apply(p)).collect();
        let got = kabsch_align(&src, &dst)?;
        worst = worst
            .max((got.rotation() - pose.rotation()).norm())
            .max((got.translation() - pose.translation()).norm());
    }
    if worst > 1e-6 {
        bail!("pose error {worst:e}");
    }
    Ok(format!("max pose error {worst:.1e}"))
}

fn knn_oracle(cfg: &RunConfig, _: &Path) -> anyhow::Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let k = rng.random_range(0..=n);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let q = [rng.random(), rng.random(), rng.random()];
        let got = knn(&[q], &pts, k)?.remove(0);
        let mut order: Vec<usize> = (0..n).collect();
        let d = |i: usize| (0..3).map(|c| (pts[i][c] - q[c]).powi(2)).sum::<f64>();
        order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
        order.truncate(k);
        if got != order {
            bail!("knn disagrees on an instance with n = {n}, k = {k}");
        }
    }
    Ok("100 random instances".into())
}

fn gradients(cfg: &RunConfig, _: &Path) -> anyhow::Result<String> {
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + 3 {
        let inst = toy_instance(seed)?;
        for b in check_gradients(&inst.model, &inst.pairs)? {
            worst = worst.max(b.max_error);
        }
    }
    if worst > 1e-4 {
        bail!("max relative error {worst:e}");
    }
    Ok(format!("max relative error {worst:.1e} over 3 instances"))
}

fn small_pack(cfg: &RunConfig) -> PackConfig {
    PackConfig {
        scenes: 1,
        frames_per_scene: 20,
        ..cfg.synthetic
    }
}

fn dataset(cfg: &RunConfig, dir: &Path) -> anyhow::Result<String> {
    let pack = small_pack(cfg);
    let root = dir.join("trajectory");
    let scenes = generate_scene_pack(&root, &pack)?;
    let m = build_manifest(&scenes, Path::new(""), &cfg.generation(), Split::Test)?;
    let s = &m.scenes[0];
    let ids: Vec<String> = s.frames.iter().map(|f| f.frame_id.clone()).collect();
    let (_, adj) = positive_graph(&ids, &s.labels);
    let keys = extract_keyframes(&ids, &s.labels);
    let sorted = {
        let mut v = ids.clone();
        v.sort();
        v
    };
    let idx: Vec<usize> = keys.iter().map(|k| sorted.binary_search(k).expect("keyframe is a frame")).collect();
    if !is_dominating(&adj, &idx) {
        bail!("keyframes do not dominate the positive graph");
    }
    Ok(format!("{} database frames, {} keyframes", s.frames.len(), keys.len()))
}

fn recall(cfg: &RunConfig, dir: &Path) -> anyhow::Result<String> {
    let pack = small_pack(cfg);
    let root = dir.join("recall");
    let scenes = generate_scene_pack(&root, &pack)?;
    let m = build_manifest(&scenes, Path::new(""), &cfg.generation(), Split::Test)?;
    let oracle = EvalConfig {
        descriptors: DescriptorMode::Oracle,
        ..cfg.eval.clone()
    };
    let r = evaluate(&m, Path::new(""), &oracle, None)?;
    if r.recall_at.get(&1) != Some(&1.0) {
        bail!("oracle Recall@1 is {:?}", r.recall_at.get(&1));
    }

    let rigid = write_pack(&dir.join("rigid"), &rigid_pack(&pack, 4, 0.1, 0.01)?)?;
    let m = label_database(&rigid, Path::new(""), &cfg.generation(), Split::Test)?;
    let geo = EvalConfig {
        reranker: RerankerKind::Kabsch,
        ..oracle
    };
    let g = evaluate(&m, Path::new(""), &geo, None)?;
    if g.recall_at.get(&1) != Some(&1.0) {
        bail!("geometric Recall@1 is {:?}", g.recall_at.get(&1));
    }
    Ok(format!(
        "oracle R@1 1.0 over {} queries, geometric R@1 1.0 over {} queries",
        r.queries.len(),
        g.queries.len()
    ))
}
