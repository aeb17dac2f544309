use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use serde::Serialize;

use cscpr::dataset::{
    build_manifest, label_database, load_scenes_root, read_manifest, write_manifest, DatasetManifest, FrameRecord,
    Split,
};
use cscpr::eval::{
    baseline_features, build_index, evaluate as run_evaluate, frame_key, rerank_cscc, rerank_kabsch_baseline,
    retrieve as run_retrieve, RankedList, RerankerKind,
};
use cscpr::geometry::read_pcb;
use cscpr::kernels::{extract_features, read_weights, scc_forward, write_weights, ModelWeights};
use cscpr::learning::{bundled_toy_pairs, check_gradients, toy_instance, toy_train as run_toy_train, Optimizer, RerankModel};
use cscpr::synthetic::{generate_scene_pack, rigid_pack, write_pack};

use crate::config::RunConfig;
use crate::{EvaluateArgs, ExtractArgs, GenDatasetArgs, GradCheckArgs, RerankArgs, RetrieveArgs, ToyTrainArgs, WeightsFlag};

/// A check that ran but did not meet its tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Any output document plus the config that produced it.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    run_config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, body: T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(&Artifact { run_config: cfg, body })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| cscpr::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_weights(cfg: &RunConfig, flag: &WeightsFlag) -> anyhow::Result<ModelWeights> {
    match &flag.weights {
        Some(p) => Ok(read_weights(p)?),
        None => {
            info!("no --weights given; using initial weights for seed {}", cfg.seed);
            Ok(ModelWeights::init(cfg.seed, cfg.model.clone())?)
        }
    }
}

/// Directory that relative paths inside a manifest are resolved against.
fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

/// Rewrites cloud paths under `dir` relative to it, so the manifest can move
/// together with its clouds.
fn relativize(m: &mut DatasetManifest, dir: &Path) {
    for s in &mut m.scenes {
        for f in &mut s.frames {
            if let Ok(rel) = f.cloud_path.strip_prefix(dir) {
                f.cloud_path = rel.to_path_buf();
            }
            if let Some(sp) = &f.semantic_path {
                if let Ok(rel) = sp.strip_prefix(dir) {
                    f.semantic_path = Some(rel.to_path_buf());
                }
            }
        }
    }
}

pub fn gen_dataset(mut cfg: RunConfig, a: GenDatasetArgs) -> anyhow::Result<()> {
    let l = &mut cfg.labels;
    if let Some(v) = a.labels.t_c {
        l.thresholds.t_c = v;
    }
    if let Some(v) = a.labels.t_p {
        l.thresholds.t_p = v;
    }
    if let Some(v) = a.labels.t_n {
        l.thresholds.t_n = v;
    }
    if let Some(v) = a.labels.voxel {
        l.voxel_size = v;
    }
    if let Some(v) = a.labels.negative_cap {
        l.negative_cap = v;
    }
    if let Some(n) = a.synthetic {
        cfg.synthetic.scenes = n;
    }
    if let Some(n) = a.frames {
        cfg.synthetic.frames_per_scene = n;
    }
    cfg.labels.thresholds.validate()?;
    let split: Split = a.split.parse()?;
    let out = absolute(&a.out)?;
    let out_dir = manifest_base(&out);
    let gen = cfg.generation();

    let mut manifest = if let Some(root) = &a.scenes {
        let root = absolute(root)?;
        let scenes = load_scenes_root(&root)?;
        info!("loaded {} scenes from {}", scenes.len(), root.display());
        build_manifest(&scenes, Path::new(""), &gen, split)?
    } else {
        let pack_dir = match &a.pack_dir {
            Some(p) => absolute(p)?,
            None => out_dir.join("scenes"),
        };
        fs::create_dir_all(&pack_dir).map_err(|e| cscpr::Error::Io {
            path: pack_dir.clone(),
            source: e,
        })?;
        match a.rigid {
            Some(views) => {
                let pack = rigid_pack(&cfg.synthetic, views, a.noise_fraction, a.noise_sigma)?;
                let scenes = write_pack(&pack_dir, &pack)?;
                label_database(&scenes, Path::new(""), &gen, split)?
            }
            None => {
                let scenes = generate_scene_pack(&pack_dir, &cfg.synthetic)?;
                build_manifest(&scenes, Path::new(""), &gen, split)?
            }
        }
    };
    relativize(&mut manifest, &out_dir);
    write_manifest(&out, &manifest)?;
    for s in &manifest.scenes {
        println!(
            "{}: {} database frames, {} keyframes, {} unreachable",
            s.scene_id,
            s.frames.len(),
            s.keyframes.len(),
            s.unreachable.len()
        );
    }
    Ok(())
}

pub fn extract(cfg: RunConfig, a: ExtractArgs) -> anyhow::Result<()> {
    let w = load_weights(&cfg, &a.weights)?;
    let cloud = read_pcb(&a.cloud)?;
    let ex = extract_features(&cloud, &w.config.extractor, &w.extractor)?;
    #[derive(Serialize)]
    struct Out<'a> {
        cloud: &'a Path,
        weights_seed: u64,
        descriptor: Vec<f64>,
    }
    write_json(
        &a.out,
        &cfg,
        Out {
            cloud: &a.cloud,
            weights_seed: w.seed,
            descriptor: ex.descriptor.0,
        },
    )
}

fn keyframes(m: &DatasetManifest) -> Vec<FrameRecord> {
    m.scenes
        .iter()
        .flat_map(|s| s.keyframes.iter().filter_map(move |k| s.frame(k).cloned()))
        .collect()
}

fn retrieve_list(cfg: &RunConfig, a: &RetrieveArgs, w: &ModelWeights) -> anyhow::Result<(RankedList, Vec<FrameRecord>, PathBuf)> {
    let m = read_manifest(&a.manifest)?;
    let base = manifest_base(&a.manifest);
    let db = keyframes(&m);
    let index = build_index(&db, &base, &w.config.extractor, &w.extractor)?;
    let query = read_pcb(&a.query)?;
    let top_n = a.top_n.unwrap_or(cfg.eval.top_n);
    let id = a.query.display().to_string();
    let ranked = run_retrieve(&id, &query, &index, top_n, &w.config.extractor, &w.extractor)?;
    Ok((ranked, db, base))
}

pub fn retrieve(mut cfg: RunConfig, a: RetrieveArgs) -> anyhow::Result<()> {
    if let Some(n) = a.top_n {
        cfg.eval.top_n = n;
    }
    let w = load_weights(&cfg, &a.weights)?;
    let (ranked, _, _) = retrieve_list(&cfg, &a, &w)?;
    print_ranked(&ranked);
    write_json(&a.out, &cfg, ranked)
}

pub fn rerank(mut cfg: RunConfig, a: RerankArgs) -> anyhow::Result<()> {
    if let Some(n) = a.retrieve.top_n {
        cfg.eval.top_n = n;
    }
    if let Some(r) = a.top_r {
        cfg.eval.top_r = r;
    }
    cfg.eval.reranker = a.reranker.parse()?;
    cfg.validate()?;
    let w = load_weights(&cfg, &a.retrieve.weights)?;
    let (ranked, db, base) = retrieve_list(&cfg, &a.retrieve, &w)?;
    let top_r = cfg.eval.top_r.min(ranked.candidates.len());
    let head: Vec<&str> = ranked.candidates[..top_r].iter().map(|c| c.frame_id.as_str()).collect();
    let by_key: BTreeMap<String, &FrameRecord> = db.iter().map(|f| (frame_key(f), f)).collect();
    let query = read_pcb(&a.retrieve.query)?;
    let out = match cfg.eval.reranker {
        RerankerKind::None => ranked,
        RerankerKind::Cscc => {
            let centers_of = |cloud: &cscpr::geometry::PointCloud| -> anyhow::Result<_> {
                let ex = extract_features(cloud, &w.config.extractor, &w.extractor)?;
                Ok(scc_forward(&ex.point_features, &w.scc)?)
            };
            let mut centers = BTreeMap::new();
            for id in &head {
                let cloud = read_pcb(by_key[*id].resolve(&base))?;
                centers.insert(id.to_string(), centers_of(&cloud)?);
            }
            rerank_cscc(&centers_of(&query)?, &ranked, top_r, &centers, &w.cscc)?
        }
        RerankerKind::Kabsch => {
            let max = cfg.eval.ransac.max_points;
            let mut feats = BTreeMap::new();
            for id in &head {
                let cloud = read_pcb(by_key[*id].resolve(&base))?;
                feats.insert(id.to_string(), baseline_features(&cloud, max)?);
            }
            rerank_kabsch_baseline(&baseline_features(&query, max)?, &ranked, top_r, &feats, &cfg.eval.ransac)?
        }
    };
    print_ranked(&out);
    write_json(&a.retrieve.out, &cfg, out)
}

fn print_ranked(r: &RankedList) {
    for (i, c) in r.candidates.iter().enumerate() {
        match c.rerank_score {
            Some(s) => println!("{:>3} {} global {:.6} rerank {:.6}{}", i + 1, c.frame_id, c.global_score, s, if c.flagged { " (flagged)" } else { "" }),
            None => println!("{:>3} {} global {:.6}", i + 1, c.frame_id, c.global_score),
        }
    }
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> anyhow::Result<()> {
    let e = &mut cfg.eval;
    if let Some(r) = &a.reranker {
        e.reranker = r.parse()?;
    }
    if let Some(d) = &a.descriptors {
        e.descriptors = d.parse()?;
    }
    if let Some(s) = &a.scope {
        e.database_scope = s.parse()?;
    }
    if let Some(n) = a.top_n {
        e.top_n = n;
    }
    if let Some(r) = a.top_r {
        e.top_r = r;
    }
    if !a.ks.is_empty() {
        e.ks = a.ks.clone();
    }
    if let Some(n) = a.ransac_iterations {
        e.ransac.iterations = n;
    }
    if let Some(t) = a.inlier_threshold {
        e.ransac.inlier_threshold = t;
    }
    cfg.validate()?;
    let m = read_manifest(&a.manifest)?;
    let weights = match (&a.weights.weights, cfg.eval.descriptors, cfg.eval.reranker) {
        (None, cscpr::eval::DescriptorMode::Oracle, RerankerKind::None | RerankerKind::Kabsch) => None,
        _ => Some(load_weights(&cfg, &a.weights)?),
    };
    let report = run_evaluate(&m, &manifest_base(&a.manifest), &cfg.eval, weights.as_ref())?;
    for (k, r) in &report.recall_at {
        println!("Recall@{k}: {r:.4}");
    }
    println!(
        "{} queries, {} unanswerable, {} database frames",
        report.queries.len(),
        report.unanswerable.len(),
        report.database_size
    );
    write_json(&a.out, &cfg, report)
}

pub fn grad_check(cfg: RunConfig, a: GradCheckArgs) -> anyhow::Result<()> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in cfg.seed..cfg.seed + a.instances {
        let inst = toy_instance(seed)?;
        for (i, b) in check_gradients(&inst.model, &inst.pairs)?.into_iter().enumerate() {
            if worst.len() <= i {
                worst.push((b.name, b.max_error));
            } else {
                worst[i].1 = worst[i].1.max(b.max_error);
            }
        }
    }
    let mut failed = Vec::new();
    for (name, e) in &worst {
        let ok = *e <= a.tolerance;
        println!("{name:<20} {e:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    if !failed.is_empty() {
        bail!(CheckFailed(format!(
            "gradient error above {:e} in {}",
            a.tolerance,
            failed.join(", ")
        )));
    }
    println!("{} instances, all blocks within {:e}", a.instances, a.tolerance);
    Ok(())
}

pub fn toy_train(mut cfg: RunConfig, a: ToyTrainArgs) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    if let Some(s) = a.steps {
        t.steps = s;
    }
    if let Some(v) = a.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    match a.optimizer.as_deref() {
        None => {}
        Some("adam") => t.optimizer = Optimizer::adam(),
        Some("sgd") => t.optimizer = Optimizer::Sgd,
        Some(o) => bail!(cscpr::Error::InvalidArgument(format!("unknown optimizer {o:?} (expected adam or sgd)"))),
    }
    cfg.validate()?;
    let w = ModelWeights::init(cfg.seed, cfg.model.clone())?;
    let pairs = bundled_toy_pairs(&cfg.synthetic, &w)?;
    let init = RerankModel {
        scc: w.scc.clone(),
        cscc: w.cscc.clone(),
    };
    let (trained, history) = run_toy_train(&pairs, &init, &cfg.train)?;

    let mut file = fs::File::create(&a.out).map_err(|e| cscpr::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    writeln!(file, "# run-config: {}", cfg.to_json())?;
    let mut csv = csv::Writer::from_writer(file);
    csv.write_record(["step", "lt", "lc", "total", "lr"])?;
    for h in &history {
        csv.write_record([
            h.step.to_string(),
            format!("{:e}", h.lt),
            format!("{:e}", h.lc),
            format!("{:e}", h.total),
            format!("{:e}", h.lr),
        ])?;
    }
    csv.flush()?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("cross-entropy {:.6} -> {:.6} over {} steps", first.lc, last.lc, history.len());
    }
    if let Some(p) = &a.weights_out {
        let out = ModelWeights {
            scc: trained.scc,
            cscc: trained.cscc,
            ..w
        };
        write_weights(p, &out)?;
        info!("wrote {}", p.display());
    }
    Ok(())
}
