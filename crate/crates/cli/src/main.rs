//! Command-line surface: synth -> train -> query -> eval -> bench.

mod artifacts;
mod config;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use artifacts::{load_cameras, load_relevancy, mask_bbox, save_cameras};
use config::{load_config, pick, FileConfig};
use nestfield::dataset::{
    build_dataset, level_canonicals, load_embeddings, load_queries, load_segments, node_mask,
    node_teachers, orbit_cameras, save_embeddings, save_queries, save_segments, segments_to_records,
    QueryLine, SegmentLine,
};
use nestfield::eval::{
    aggregate, bench_modes, localization_accuracy, miou, retrieval_rank, MetricsReport,
    PerQueryMetrics,
};
use nestfield::field::{load_checkpoint, save_checkpoint, FieldConfig, LearningRates, PlaneCombine};
use nestfield::hierarchy::{lift_segment, segment_scale, train, TrainConfig, TrainView};
use nestfield::query::{
    composite_query, explicit_scale_query, oracle_scale_query, precompute_composite, relevancy,
    scale_maps, write_relevancy, CanonicalSet, QueryMode, RelevancyConfig, RelevancyMap,
};
use nestfield::raster::{composite_weights, render_depth, CompositeWeightsMap, DEPTH_COVERAGE_FLOOR};
use nestfield::scene::{
    generate_synthetic, load_scene, save_annotations, save_scene,
    SyntheticSceneSpec,
};

const SCENE_FILE: &str = "scene.nfsc";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const SEGMENTS_FILE: &str = "segments.jsonl";
const EVAL_SEGMENTS_FILE: &str = "eval_segments.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.nfeb";
const QUERIES_FILE: &str = "queries.jsonl";
const CANONICALS_FILE: &str = "canonicals.json";
const TRAIN_CAMERAS_FILE: &str = "train_cameras.json";
const EVAL_CAMERAS_FILE: &str = "eval_cameras.json";

#[derive(Parser)]
#[command(name = "nestfield", about = "Nested feature fields over Gaussian scenes")]
struct Cli {
    /// TOML config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Composite,
    Explicit,
    Oracle,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Composite => QueryMode::Composite,
            ModeArg::Explicit => QueryMode::Explicit,
            ModeArg::Oracle => QueryMode::Oracle,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with hierarchy masks and teacher vectors.
    Synth {
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        parts: Option<usize>,
        #[arg(long)]
        gaussians_per_part: Option<usize>,
        #[arg(long)]
        scale_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training views.
        #[arg(long)]
        views: Option<usize>,
        /// Held-out views used for queries and eval.
        #[arg(long)]
        eval_views: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Embedding dimension D.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Distill the teacher embeddings into a nested field checkpoint.
    Train {
        /// Directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        step_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lr_triplane: Option<f64>,
        #[arg(long)]
        lr_mlp: Option<f64>,
        #[arg(long)]
        lr_projection: Option<f64>,
        /// Loss trace CSV path (default: loss.csv next to the checkpoint).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Answer the queries file with relevancy maps.
    Query {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        step_size: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score relevancy artifacts against the ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory of relevancy PPMs produced by `query`.
        #[arg(long)]
        relevancy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        step_size: Option<usize>,
        #[arg(long)]
        scene_name: Option<String>,
    },
    /// Time the composite and explicit query paths.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        step_size: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out,
            groups,
            objects,
            parts,
            gaussians_per_part,
            scale_ratio,
            seed,
            views,
            eval_views,
            size,
            dim,
        } => cmd_synth(
            &file,
            &out,
            groups,
            objects,
            parts,
            gaussians_per_part,
            scale_ratio,
            seed,
            views,
            eval_views,
            size,
            dim,
        ),
        Command::Train {
            data,
            out,
            iterations,
            batch,
            lambda,
            step_size,
            seed,
            resolution,
            channels,
            hidden,
            lr_triplane,
            lr_mlp,
            lr_projection,
            loss_csv,
        } => cmd_train(
            &file,
            &data,
            &out,
            iterations,
            batch,
            lambda,
            step_size,
            seed,
            resolution,
            channels,
            hidden,
            lr_triplane,
            lr_mlp,
            lr_projection,
            loss_csv,
        ),
        Command::Query { data, checkpoint, out, mode, step_size, temperature } => {
            cmd_query(&file, &data, &checkpoint, &out, mode, step_size, temperature)
        }
        Command::Eval { data, relevancy, out, threshold, step_size, scene_name } => {
            cmd_eval(&file, &data, &relevancy, &out, threshold, step_size, scene_name)
        }
        Command::Bench { data, checkpoint, out, step_size, reps, temperature } => {
            cmd_bench(&file, &data, &checkpoint, &out, step_size, reps, temperature)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    file: &FileConfig,
    out: &Path,
    groups: Option<usize>,
    objects: Option<usize>,
    parts: Option<usize>,
    gaussians_per_part: Option<usize>,
    scale_ratio: Option<f64>,
    seed: Option<u64>,
    views: Option<usize>,
    eval_views: Option<usize>,
    size: Option<usize>,
    dim: Option<usize>,
) -> Result<()> {
    let s = &file.synth;
    let spec = SyntheticSceneSpec {
        group_count: pick(groups, s.groups, 2),
        objects_per_group: pick(objects, s.objects, 2),
        parts_per_object: pick(parts, s.parts, 2),
        gaussians_per_part: pick(gaussians_per_part, s.gaussians_per_part, 8),
        scale_ratio: pick(scale_ratio, s.scale_ratio, 3.0),
        seed: pick(seed, s.seed, 7),
    };
    let views = pick(views, s.views, 6);
    let eval_views = pick(eval_views, s.eval_views, 2);
    let size = pick(size, s.size, 64);
    let dim = pick(dim, s.dim, 32);
    if dim == 0 {
        bail!("dim must be >= 1");
    }

    std::fs::create_dir_all(out)?;
    let (scene, annotations) = generate_synthetic(&spec)?;
    let teachers = node_teachers(&annotations, dim, spec.seed.wrapping_add(1));
    save_scene(&scene, &out.join(SCENE_FILE))?;
    save_annotations(&annotations, &out.join(ANNOTATIONS_FILE))?;
    save_embeddings(&teachers, dim, &out.join(EMBEDDINGS_FILE))?;

    let train_cams = orbit_cameras(&scene.extent, views, size, 0.0);
    // Held-out views sit half a slot off the training orbit.
    let phase = std::f64::consts::TAU / (2 * views.max(1)) as f64;
    let eval_cams = orbit_cameras(&scene.extent, eval_views, size, phase);
    save_cameras(&train_cams, &out.join(TRAIN_CAMERAS_FILE))?;
    save_cameras(&eval_cams, &out.join(EVAL_CAMERAS_FILE))?;

    let built = build_dataset(&scene, &annotations, &teachers, train_cams, dim)?;
    save_segments(&built.lines, &out.join(SEGMENTS_FILE))?;

    // Held-out masks for ground truth, one query per visible node per view.
    let mut eval_lines: Vec<SegmentLine> = Vec::new();
    let mut eval_nodes: Vec<usize> = Vec::new();
    for (view_id, cam) in eval_cams.iter().enumerate() {
        let weights = composite_weights(&scene, cam);
        let depth = render_depth(&weights, DEPTH_COVERAGE_FLOOR);
        for (node_idx, ann) in annotations.iter().enumerate() {
            let mask = node_mask(&weights, &ann.members);
            let area = mask.area();
            if area < 3 {
                continue;
            }
            let raw = lift_segment(&mask, &depth, cam)
                .ok()
                .and_then(|pts| segment_scale(&pts).ok());
            eval_lines.push(SegmentLine {
                view_id,
                area,
                raw_scale: raw,
                mask,
                embedding: node_idx,
            });
            eval_nodes.push(node_idx);
        }
    }
    save_segments(&eval_lines, &out.join(EVAL_SEGMENTS_FILE))?;

    let queries: Vec<QueryLine> = eval_lines
        .iter()
        .enumerate()
        .map(|(i, l)| QueryLine {
            query_id: format!("node{}-v{}", annotations[eval_nodes[i]].node_id, l.view_id),
            view_id: l.view_id,
            embedding: None,
            embedding_ref: Some(eval_nodes[i]),
            gt_mask_ref: Some(i),
            gt_box: mask_bbox(&l.mask, size),
        })
        .collect();
    save_queries(&queries, &out.join(QUERIES_FILE))?;

    let canon = level_canonicals(&annotations, &teachers)?;
    std::fs::write(out.join(CANONICALS_FILE), serde_json::to_string_pretty(&canon)?)?;
    println!(
        "synth: {} gaussians, {} train segments, {} queries -> {}",
        scene.len(),
        built.lines.len(),
        queries.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    file: &FileConfig,
    data: &Path,
    out: &Path,
    iterations: Option<usize>,
    batch: Option<usize>,
    lambda: Option<f64>,
    step_size: Option<usize>,
    seed: Option<u64>,
    resolution: Option<usize>,
    channels: Option<usize>,
    hidden: Option<usize>,
    lr_triplane: Option<f64>,
    lr_mlp: Option<f64>,
    lr_projection: Option<f64>,
    loss_csv: Option<PathBuf>,
) -> Result<()> {
    let t = &file.train;
    let scene = load_scene(&data.join(SCENE_FILE))?;
    let (dim, embeddings) = load_embeddings(&data.join(EMBEDDINGS_FILE))?;
    let lines = load_segments(&data.join(SEGMENTS_FILE))?;
    let records = segments_to_records(&lines, &embeddings, dim)?;
    let cams = load_cameras(&data.join(TRAIN_CAMERAS_FILE))?;
    let views: Vec<TrainView> = cams
        .into_iter()
        .map(|camera| {
            let weights = composite_weights(&scene, &camera);
            TrainView { camera, weights }
        })
        .collect();

    let extent = scene.extent.padded(0.25 * scene.extent.diagonal().max(1.0));
    let field_config = FieldConfig {
        resolution: pick(resolution, t.resolution, 64),
        channels: pick(channels, t.channels, 16),
        hidden: pick(hidden, t.hidden, 64),
        dim,
        extent,
        combine: PlaneCombine::Sum,
    };
    let step = pick(step_size, t.step_size, 1);
    if step == 0 || step > dim {
        bail!("step size must satisfy 1 <= k <= D, got k={step}, D={dim}");
    }
    let defaults = LearningRates::defaults(scene.extent.diagonal());
    let cfg = TrainConfig {
        iterations: pick(iterations, t.iterations, 5000),
        batch_size: pick(batch, t.batch, 128),
        lambda: pick(lambda, t.lambda, 0.001),
        learning_rates: LearningRates {
            triplane: pick(lr_triplane, t.lr_triplane, defaults.triplane),
            mlp: pick(lr_mlp, t.lr_mlp, defaults.mlp),
            projection: pick(lr_projection, t.lr_projection, defaults.projection),
        },
        step_size: step,
        seed: pick(seed, t.seed, 0),
    };

    let mut field = nestfield::field::NestedField::init(field_config, cfg.seed);
    let trace = train(&scene, &views, &records, &mut field, &cfg)?;
    save_checkpoint(&field, out)?;
    let csv_path = loss_csv.unwrap_or_else(|| {
        out.parent().unwrap_or_else(|| Path::new(".")).join("loss.csv")
    });
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&csv_path, csv)?;
    println!(
        "train: {} iterations, final loss {:.6} -> {}",
        trace.len(),
        trace.last().copied().unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn load_canonicals(data: &Path) -> Result<CanonicalSet> {
    let text = std::fs::read_to_string(data.join(CANONICALS_FILE))
        .with_context(|| format!("reading {}", data.join(CANONICALS_FILE).display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_query(
    file: &FileConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    mode: Option<ModeArg>,
    step_size: Option<usize>,
    temperature: Option<f64>,
) -> Result<()> {
    let q = &file.query;
    let mode: QueryMode = match mode.map(QueryMode::from) {
        Some(m) => m,
        None => match q.mode.as_deref() {
            None | Some("composite") => QueryMode::Composite,
            Some("explicit") => QueryMode::Explicit,
            Some("oracle") => QueryMode::Oracle,
            Some(other) => bail!("unknown query mode '{other}'"),
        },
    };
    let field = load_checkpoint(checkpoint)?;
    let dim = field.config.dim;
    let step = pick(step_size, q.step_size, 1);
    if step == 0 || step > dim {
        bail!("step size must satisfy 1 <= k <= D, got k={step}, D={dim}");
    }
    let rcfg = RelevancyConfig {
        temperature: pick(temperature, q.temperature, 1.0),
        cosine_only: false,
    };

    let scene = load_scene(&data.join(SCENE_FILE))?;
    let (_, embeddings) = load_embeddings(&data.join(EMBEDDINGS_FILE))?;
    let queries = load_queries(&data.join(QUERIES_FILE))?;
    let eval_cams = load_cameras(&data.join(EVAL_CAMERAS_FILE))?;
    let eval_lines = load_segments(&data.join(EVAL_SEGMENTS_FILE))?;
    let canon = load_canonicals(data)?;
    let cache = precompute_composite(&scene, &field, &canon)?;

    std::fs::create_dir_all(out)?;
    let mut weight_cache: HashMap<usize, CompositeWeightsMap> = HashMap::new();
    let mut scale_cache: HashMap<usize, Vec<(usize, nestfield::raster::FeatureMap)>> =
        HashMap::new();
    for line in &queries {
        let cam = eval_cams
            .get(line.view_id)
            .with_context(|| format!("query '{}' references view {}", line.query_id, line.view_id))?;
        let weights = weight_cache
            .entry(line.view_id)
            .or_insert_with(|| composite_weights(&scene, cam));
        let embedding = line.resolve_embedding(&embeddings)?;
        let rel = match mode {
            QueryMode::Composite => composite_query(
                &field, &cache, weights, &embedding, &canon, &rcfg, &line.query_id,
            )?,
            QueryMode::Explicit => explicit_scale_query(
                &scene, &field, weights, &embedding, &canon, &rcfg, step, &line.query_id,
            )?,
            QueryMode::Oracle => {
                let gt_mask = line
                    .gt_mask_ref
                    .and_then(|i| eval_lines.get(i))
                    .map(|l| l.mask.clone());
                if gt_mask.is_none() && line.gt_box.is_none() {
                    bail!("oracle mode needs ground truth for query '{}'", line.query_id);
                }
                let maps = scale_cache.entry(line.view_id).or_insert_with(|| {
                    scale_maps(&scene, &field, weights, step).expect("scale maps")
                });
                let mut candidates: Vec<RelevancyMap> = maps
                    .iter()
                    .map(|(m, map)| {
                        relevancy(map, &embedding, &canon, &rcfg, &line.query_id,
                                  QueryMode::Explicit, Some(*m))
                    })
                    .collect();
                candidates.push(composite_query(
                    &field, &cache, weights, &embedding, &canon, &rcfg, &line.query_id,
                )?);
                let score: Box<dyn Fn(&RelevancyMap) -> f64> = match &gt_mask {
                    Some(mask) => {
                        let mask = mask.clone();
                        Box::new(move |r: &RelevancyMap| miou(r, &mask, 0.5))
                    }
                    None => {
                        let b = line.gt_box.unwrap();
                        Box::new(move |r: &RelevancyMap| localization_accuracy(r, b) as u8 as f64)
                    }
                };
                oracle_scale_query(candidates, &score)?
            }
        };
        write_relevancy(&rel, &out.join(format!("{}.ppm", line.query_id)))?;
    }
    println!("query: {} relevancy maps ({mode}) -> {}", queries.len(), out.display());
    Ok(())
}

fn cmd_eval(
    file: &FileConfig,
    data: &Path,
    relevancy_dir: &Path,
    out: &Path,
    threshold: Option<f64>,
    step_size: Option<usize>,
    scene_name: Option<String>,
) -> Result<()> {
    let e = &file.eval;
    let threshold = pick(threshold, e.threshold, 0.5);
    let scene_name = pick(scene_name, e.scene_name.clone(), "synthetic".into());
    let queries = load_queries(&data.join(QUERIES_FILE))?;
    let eval_lines = load_segments(&data.join(EVAL_SEGMENTS_FILE))?;
    let (dim, _) = load_embeddings(&data.join(EMBEDDINGS_FILE))?;

    // Pool of candidate segments per view, for retrieval.
    let mut pools: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, l) in eval_lines.iter().enumerate() {
        pools.entry(l.view_id).or_default().push(i);
    }

    let mut per_query = Vec::new();
    let mut mode: Option<QueryMode> = None;
    for line in &queries {
        let rel = load_relevancy(&relevancy_dir.join(format!("{}.ppm", line.query_id)))?;
        mode.get_or_insert(rel.mode);
        let loc_hit = line.gt_box.map(|b| localization_accuracy(&rel, b));
        let gt_mask = line.gt_mask_ref.and_then(|i| eval_lines.get(i));
        let iou = gt_mask.map(|l| miou(&rel, &l.mask, threshold));
        let rank = match (line.gt_mask_ref, pools.get(&line.view_id)) {
            (Some(gt_idx), Some(pool_indices)) => {
                let pool: Vec<_> =
                    pool_indices.iter().map(|&i| eval_lines[i].mask.clone()).collect();
                let pos = pool_indices.iter().position(|&i| i == gt_idx);
                match pos {
                    Some(p) => Some(retrieval_rank(&pool, &rel, p)?),
                    None => None,
                }
            }
            _ => None,
        };
        per_query.push(PerQueryMetrics { query_id: line.query_id.clone(), loc_hit, iou, rank });
    }
    let report = MetricsReport {
        scene: scene_name,
        mode: mode.unwrap_or(QueryMode::Composite),
        dim,
        k: pick(step_size, None, 1),
        aggregate: aggregate(&per_query),
        per_query,
        timing: None,
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "eval: {} queries, loc_acc {:.3}, miou {:.3} -> {}",
        report.per_query.len(),
        report.aggregate.loc_acc,
        report.aggregate.miou,
        out.display()
    );
    Ok(())
}

fn cmd_bench(
    file: &FileConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    step_size: Option<usize>,
    reps: Option<usize>,
    temperature: Option<f64>,
) -> Result<()> {
    let b = &file.bench;
    let field = load_checkpoint(checkpoint)?;
    let dim = field.config.dim;
    let step = pick(step_size, b.step_size, 1);
    if step == 0 || step > dim {
        bail!("step size must satisfy 1 <= k <= D, got k={step}, D={dim}");
    }
    let reps = pick(reps, b.reps, 5);
    let scene = load_scene(&data.join(SCENE_FILE))?;
    let (_, embeddings) = load_embeddings(&data.join(EMBEDDINGS_FILE))?;
    let queries = load_queries(&data.join(QUERIES_FILE))?;
    let eval_cams = load_cameras(&data.join(EVAL_CAMERAS_FILE))?;
    let canon = load_canonicals(data)?;
    let rcfg = RelevancyConfig { temperature: pick(temperature, None, 1.0), cosine_only: false };

    let cam = eval_cams.first().context("no eval cameras")?;
    let weights = composite_weights(&scene, cam);
    let cache = precompute_composite(&scene, &field, &canon)?;
    let embeds: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| q.resolve_embedding(&embeddings))
        .collect::<Result<_, _>>()?;
    if embeds.is_empty() {
        bail!("no queries to benchmark");
    }
    let report =
        bench_modes(&scene, &field, &cache, &weights, &embeds, &canon, &rcfg, step, reps)?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "bench: composite {:.3}ms/query vs explicit {:.3}ms/query -> {}",
        report.composite.per_query_time * 1e3,
        report.explicit.per_query_time * 1e3,
        out.display()
    );
    Ok(())
}
