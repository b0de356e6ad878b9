//! Acceptance gate: one test per criterion, each printing a pass/fail line.
//!
//! The heavyweight criteria share a single trained fixture (built on first
//! use), so the suite trains the baseline field exactly once. The fixture
//! scene is the 2x2x2 synthetic hierarchy wrapped in an environment dome:
//! like any real capture, every ray that misses the foreground hits
//! background content, which is what lets the canonical comparison pull
//! low-coverage fringe pixels below the segmentation threshold.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use nestfield::dataset::{build_dataset, level_canonicals, node_teachers, orbit_cameras};
use nestfield::eval::{bench_modes, localization_accuracy, miou};
use nestfield::field::{
    Adam, FieldConfig, FieldGradients, LearningRates, NestedField, PlaneCombine,
};
use nestfield::hierarchy::{
    hierarchical_loss, scale_aware_feature, train, BatchSampler, DimensionMap, RleMask,
    ScaleQuantizer, SegmentRecord, TrainConfig, TrainView,
};
use nestfield::query::{
    composite_map, composite_query, explicit_scale_query, oracle_scale_query,
    precompute_composite, relevancy, relevancy_eval_count, reset_relevancy_eval_count, reweight,
    scale_maps, CanonicalSet, CompositeWeights, QueryMode, RelevancyConfig, RelevancyMap,
};
use nestfield::raster::{
    backward_features, composite_weights, render_features, CompositeWeightsMap, FeatureMap,
    FeatureSemantics,
};
use nestfield::scene::{
    generate_synthetic, Aabb, Camera, Gaussian, GaussianScene, HierarchyAnnotation,
    HierarchyLevel, SyntheticSceneSpec,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 32;
const ITERATIONS: usize = 5000;
const BATCH: usize = 1024;
const RESOLUTION: usize = 64;
const CHANNELS: usize = 16;
const HIDDEN: usize = 32;
const TRAIN_VIEWS: usize = 30;
const EVAL_VIEWS: usize = 2;
const IMG: usize = 240;
const DOME_GAUSSIANS: usize = 1600;
const TEMPERATURE: f64 = 3.0;
const THRESHOLD: f64 = 0.5;

fn report(name: &str, ok: bool, detail: &str) {
    println!("acceptance {name}: {} ({detail})", if ok { "pass" } else { "fail" });
    assert!(ok, "{name} failed: {detail}");
}

fn rcfg() -> RelevancyConfig {
    RelevancyConfig { temperature: TEMPERATURE, cosine_only: false }
}

// ---------------------------------------------------------------------------
// Shared fixture.

struct GtQuery {
    node_idx: usize,
    level: HierarchyLevel,
    view: usize,
    mask: RleMask,
    bbox: [usize; 4],
}

struct Base {
    scene: GaussianScene,
    core_extent: Aabb,
    annotations: Vec<HierarchyAnnotation>,
    teachers: Vec<Vec<f64>>,
    canon: CanonicalSet,
    train_views: Vec<TrainView>,
    records: Vec<SegmentRecord>,
    eval_views: Vec<CompositeWeightsMap>,
    queries: Vec<GtQuery>,
}

fn default_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        group_count: 2,
        objects_per_group: 2,
        parts_per_object: 2,
        gaussians_per_part: 12,
        scale_ratio: 2.0,
        seed: 7,
    }
}

/// Hand-laid 2x2x2 hierarchy: groups spread along x, objects along y, parts
/// along x again, with clear gaps between sibling nodes and near-binary
/// opacity. Sharp, well-separated silhouettes keep the rendered ground-truth
/// masks (compositing mass > 0.5) close to the relevancy contours, which is
/// what a segmentation IoU at a fixed threshold actually measures.
fn fixture_scene() -> (GaussianScene, Vec<HierarchyAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut gaussians: Vec<Gaussian> = Vec::new();
    let mut annotations: Vec<HierarchyAnnotation> = Vec::new();
    for g in 0..2 {
        let group_center = Vector3::new(g as f64 * 1.8 - 0.9, 0.0, 0.0);
        let group_idx = annotations.len();
        annotations.push(HierarchyAnnotation {
            node_id: group_idx,
            level: HierarchyLevel::Group,
            parent: None,
            members: Vec::new(),
        });
        for o in 0..2 {
            let object_center = group_center + Vector3::new(0.0, o as f64 * 0.8 - 0.4, 0.0);
            let object_idx = annotations.len();
            annotations.push(HierarchyAnnotation {
                node_id: object_idx,
                level: HierarchyLevel::Object,
                parent: Some(group_idx),
                members: Vec::new(),
            });
            for p in 0..2 {
                let part_center = object_center
                    + Vector3::new(p as f64 * 0.5 - 0.25, 0.0, rng.gen_range(-0.05..0.05));
                let part_idx = annotations.len();
                annotations.push(HierarchyAnnotation {
                    node_id: part_idx,
                    level: HierarchyLevel::Part,
                    parent: Some(object_idx),
                    members: Vec::new(),
                });
                for _ in 0..30 {
                    let offset = Vector3::new(
                        rng.gen_range(-0.06..0.06),
                        rng.gen_range(-0.06..0.06),
                        rng.gen_range(-0.04..0.04),
                    );
                    let sigma = rng.gen_range(0.014..0.02);
                    let id = gaussians.len();
                    gaussians.push(
                        Gaussian::new(
                            part_center + offset,
                            Vector3::new(sigma, sigma, sigma),
                            UnitQuaternion::identity(),
                            rng.gen_range(0.92..=1.0),
                            [0.3 * g as f64 + 0.3, 0.3 * o as f64 + 0.3, 0.3 * p as f64 + 0.3],
                        )
                        .unwrap(),
                    );
                    annotations[group_idx].members.push(id);
                    annotations[object_idx].members.push(id);
                    annotations[part_idx].members.push(id);
                }
            }
        }
    }
    (GaussianScene::new(gaussians).unwrap(), annotations)
}

/// Closer orbit with a longer lens than the dataset default, so each part
/// spans enough pixels for a meaningful IoU at the fixed 0.5 threshold.
fn ring_camera(extent: &Aabb, angle: f64, elevation: f64, size: usize) -> Camera {
    let center = extent.center();
    let dist = 1.2 * extent.diagonal().max(1.0);
    let dir = Vector3::new(angle.cos(), angle.sin(), elevation).normalize();
    Camera::look_at(
        center + dir * dist,
        center,
        Vector3::new(0.0, 0.0, -1.0),
        size as f64,
        size as f64,
        size,
        size,
    )
}

/// Steep elevations: the hierarchy is laid out in the xy plane, so high
/// viewpoints keep sibling nodes from occluding each other. The training
/// ring cycles through three elevations, which moves the regions of the
/// backdrop that the foreground occludes so far fewer background directions
/// go entirely unsupervised.
fn ring_cameras(extent: &Aabb, count: usize, size: usize, phase: f64) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let angle = phase + i as f64 / count as f64 * std::f64::consts::TAU;
            let elev = if count > EVAL_VIEWS { [-0.7, -0.95, -1.2, -1.5, -1.9][i % 5] } else { -1.2 };
            ring_camera(extent, angle, elev, size)
        })
        .collect()
}

/// Wrap the scene in a sphere of background Gaussians annotated as one
/// extra group-level node, so its teacher joins the "stuff" canonical.
fn with_dome(core: &GaussianScene, annotations: &mut Vec<HierarchyAnnotation>) -> GaussianScene {
    let center = core.extent.center();
    // Far enough that no shell Gaussian can enter a camera frustum at
    // glancing depth (cameras orbit at ~1.2 diagonals from the center).
    let radius = 6.0 * core.extent.diagonal().max(1.0);
    let sigma = 0.05 * radius;
    let mut gaussians = core.gaussians.clone();
    let mut members = Vec::with_capacity(DOME_GAUSSIANS);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for i in 0..DOME_GAUSSIANS {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / DOME_GAUSSIANS as f64;
        let r = (1.0 - z * z).sqrt();
        let lon = golden * i as f64;
        let dir = Vector3::new(r * lon.cos(), r * lon.sin(), z);
        members.push(gaussians.len());
        gaussians.push(
            Gaussian::new(
                center + dir * radius,
                Vector3::new(sigma, sigma, sigma),
                UnitQuaternion::identity(),
                0.9,
                [0.5, 0.5, 0.55],
            )
            .unwrap(),
        );
    }
    annotations.push(HierarchyAnnotation {
        node_id: annotations.len(),
        level: HierarchyLevel::Group,
        parent: None,
        members,
    });
    GaussianScene::new(gaussians).unwrap()
}

/// A flat disc of Gaussians off to the side of the hierarchy, annotated as
/// one more background node. Its teacher is orthogonal to every query
/// vector, giving each relevancy map a patch of pure non-query content.
fn add_mat(scene: &GaussianScene, annotations: &mut Vec<HierarchyAnnotation>) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gaussians = scene.gaussians.clone();
    let mut members = Vec::new();
    for _ in 0..24 {
        let r = 0.12 * rng.gen_range(0.0f64..1.0).sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        members.push(gaussians.len());
        gaussians.push(
            Gaussian::new(
                Vector3::new(r * a.cos(), 1.0 + r * a.sin(), rng.gen_range(-0.02..0.02)),
                Vector3::new(0.035, 0.035, 0.035),
                UnitQuaternion::identity(),
                rng.gen_range(0.92..=1.0),
                [0.6, 0.6, 0.4],
            )
            .unwrap(),
        );
    }
    annotations.push(HierarchyAnnotation {
        node_id: annotations.len(),
        level: HierarchyLevel::Group,
        parent: None,
        members,
    });
    GaussianScene::new(gaussians).unwrap()
}

fn mask_bbox(mask: &RleMask, width: usize) -> [usize; 4] {
    let mut b = [usize::MAX, usize::MAX, 0, 0];
    for pix in mask.pixels() {
        let (x, y) = (pix % width, pix / width);
        b = [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)];
    }
    b
}

fn base() -> &'static Base {
    static BASE: OnceLock<Base> = OnceLock::new();
    BASE.get_or_init(|| {
        let (core, mut annotations) = fixture_scene();
        let core_extent = core.extent;
        let scene = add_mat(&core, &mut annotations);
        let mat_node = annotations.len() - 1;
        let scene = with_dome(&scene, &mut annotations);
        let dome_node = annotations.len() - 1;
        let teachers = node_teachers(&annotations, DIM, 42);
        // Level means, plus the mat's teacher as a "thing" prototype. Mat
        // pixels are orthogonal to every query, so for each query they pin
        // the bottom of the relevancy range and the min-max binarization
        // calibrates itself against pure non-query content.
        let canon = {
            let lc = level_canonicals(&annotations, &teachers).unwrap();
            let mut labels = lc.labels;
            let mut vectors = lc.vectors;
            labels.push("thing".to_string());
            vectors.push(teachers[mat_node].clone());
            CanonicalSet::new(labels, vectors).unwrap()
        };
        let train_cams = ring_cameras(&core_extent, TRAIN_VIEWS, IMG, 0.0);
        let built = build_dataset(&scene, &annotations, &teachers, train_cams, DIM).unwrap();

        // The background also arrives as fine-grained segments (a real
        // segmenter over-segments homogeneous regions), so the dome features
        // are pinned at every dimension rather than only the coarsest one.
        // Each tile masks exactly the dome-dominated pixels it covers and is
        // assigned the finest quantized scale so its full feature vector is
        // supervised; the core records keep the quantizer fit on the real
        // segment hierarchy.
        let mut records = built.records.clone();
        const TILE: usize = 16;
        for (view_id, tv) in built.views.iter().enumerate() {
            let depth = nestfield::raster::render_depth(
                &tv.weights,
                nestfield::raster::DEPTH_COVERAGE_FLOOR,
            );
            let dome_bits =
                nestfield::dataset::node_mask(&tv.weights, &annotations[dome_node].members)
                    .to_bitmap(IMG * IMG);
            for y0 in (0..IMG).step_by(TILE) {
                for x0 in (0..IMG).step_by(TILE) {
                    let mut bits = vec![false; IMG * IMG];
                    let mut count = 0;
                    for y in y0..(y0 + TILE).min(IMG) {
                        for x in x0..(x0 + TILE).min(IMG) {
                            if dome_bits[y * IMG + x] {
                                bits[y * IMG + x] = true;
                                count += 1;
                            }
                        }
                    }
                    if count < 8 {
                        continue;
                    }
                    let mask = RleMask::from_bitmap(&bits);
                    let points =
                        match nestfield::hierarchy::lift_segment(&mask, &depth, &tv.camera) {
                            Ok(p) => p,
                            Err(_) => continue,
                        };
                    let raw = match nestfield::hierarchy::segment_scale(&points) {
                        Ok(r) => r,
                        Err(_) => continue,
                    };
                    records.push(SegmentRecord {
                        view_id,
                        area: count,
                        raw_scale: raw,
                        quantized_scale: 0.0,
                        teacher: teachers[dome_node].clone(),
                        mask,
                    });
                }
            }
        }

        // The mat is likewise homogeneous texture: pin its full feature
        // vector rather than only the prefix its segment scale selects.
        for (view_id, tv) in built.views.iter().enumerate() {
            let depth = nestfield::raster::render_depth(
                &tv.weights,
                nestfield::raster::DEPTH_COVERAGE_FLOOR,
            );
            let mask = nestfield::dataset::node_mask(&tv.weights, &annotations[mat_node].members);
            if mask.area() < 8 {
                continue;
            }
            let points = match nestfield::hierarchy::lift_segment(&mask, &depth, &tv.camera) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let raw = match nestfield::hierarchy::segment_scale(&points) {
                Ok(r) => r,
                Err(_) => continue,
            };
            records.push(SegmentRecord {
                view_id,
                area: mask.area(),
                raw_scale: raw,
                quantized_scale: 0.0,
                teacher: teachers[mat_node].clone(),
                mask,
            });
        }

        let phase = std::f64::consts::TAU / (2 * TRAIN_VIEWS) as f64;
        let eval_cams = ring_cameras(&core_extent, EVAL_VIEWS, IMG, phase);
        let mut eval_views = Vec::new();
        let mut queries = Vec::new();
        for (view, cam) in eval_cams.iter().enumerate() {
            let weights = composite_weights(&scene, cam);
            for (node_idx, ann) in annotations.iter().enumerate() {
                if node_idx == mat_node || node_idx == dome_node {
                    continue;
                }
                let mask = nestfield::dataset::node_mask(&weights, &ann.members);
                if mask.area() < 3 {
                    continue;
                }
                let bbox = mask_bbox(&mask, IMG);
                queries.push(GtQuery { node_idx, level: ann.level, view, mask, bbox });
            }
            eval_views.push(weights);
        }
        Base {
            scene,
            core_extent,
            annotations,
            teachers,
            canon,
            train_views: built.views,
            records,
            eval_views,
            queries,
        }
    })
}

fn field_config(extent: Aabb) -> FieldConfig {
    FieldConfig {
        resolution: RESOLUTION,
        channels: CHANNELS,
        hidden: HIDDEN,
        dim: DIM,
        extent,
        combine: PlaneCombine::Sum,
    }
}

fn train_with_step(b: &Base, step_size: usize) -> NestedField {
    let extent = b.core_extent.padded(0.25 * b.core_extent.diagonal());
    let mut field = NestedField::init(field_config(extent), 5);
    let cfg = TrainConfig {
        iterations: ITERATIONS,
        batch_size: BATCH,
        lambda: 0.001,
        learning_rates: LearningRates::defaults(b.core_extent.diagonal()),
        step_size,
        seed: 9,
    };
    train(&b.scene, &b.train_views, &b.records, &mut field, &cfg).unwrap();
    field
}

fn field_k1() -> &'static (NestedField, CompositeWeights) {
    static F: OnceLock<(NestedField, CompositeWeights)> = OnceLock::new();
    F.get_or_init(|| {
        let b = base();
        let field = train_with_step(b, 1);
        let cache = precompute_composite(&b.scene, &field, &b.canon).unwrap();
        (field, cache)
    })
}

/// Per-eval-view embedding maps, rendered once and shared by every query.
struct EvalData {
    composite: Vec<FeatureMap>,
    scales: Vec<Vec<(usize, FeatureMap)>>,
}

fn build_eval_data(
    b: &Base,
    field: &NestedField,
    cache: &CompositeWeights,
    with_scales: bool,
) -> EvalData {
    let mut composite = Vec::new();
    let mut scales = Vec::new();
    for weights in &b.eval_views {
        composite.push(composite_map(field, cache, weights).unwrap());
        if with_scales {
            scales.push(scale_maps(&b.scene, field, weights, 1).unwrap());
        }
    }
    EvalData { composite, scales }
}

fn eval_data_k1() -> &'static EvalData {
    static E: OnceLock<EvalData> = OnceLock::new();
    E.get_or_init(|| {
        let b = base();
        let (field, cache) = field_k1();
        build_eval_data(b, field, cache, true)
    })
}

#[derive(Clone, Copy)]
enum Task {
    Localization,
    Segmentation,
}

fn query_relevancy(b: &Base, data: &EvalData, q: &GtQuery, mode: QueryMode, task: Task) -> RelevancyMap {
    let embedding = &b.teachers[q.node_idx];
    let id = format!("node{}", q.node_idx);
    let composite = relevancy(
        &data.composite[q.view],
        embedding,
        &b.canon,
        &rcfg(),
        &id,
        QueryMode::Composite,
        None,
    );
    match mode {
        QueryMode::Composite => composite,
        QueryMode::Explicit => {
            // Same selection rule as the library path (global max relevancy),
            // over per-view maps rendered once for all queries.
            data.scales[q.view]
                .iter()
                .map(|(m, map)| {
                    relevancy(map, embedding, &b.canon, &rcfg(), &id, QueryMode::Explicit, Some(*m))
                })
                .max_by(|a, c| a.max_value().total_cmp(&c.max_value()))
                .unwrap()
        }
        QueryMode::Oracle => {
            let mut candidates: Vec<RelevancyMap> = data.scales[q.view]
                .iter()
                .map(|(m, map)| {
                    relevancy(map, embedding, &b.canon, &rcfg(), &id, QueryMode::Explicit, Some(*m))
                })
                .collect();
            candidates.push(composite);
            let gt_mask = q.mask.clone();
            let gt_box = q.bbox;
            let score: Box<dyn Fn(&RelevancyMap) -> f64> = match task {
                Task::Segmentation => Box::new(move |r| miou(r, &gt_mask, THRESHOLD)),
                Task::Localization => {
                    Box::new(move |r| localization_accuracy(r, gt_box) as u8 as f64)
                }
            };
            oracle_scale_query(candidates, &score).unwrap()
        }
    }
}

/// (localization accuracy, mean IoU) over object- and part-level queries.
fn evaluate_mode(b: &Base, data: &EvalData, mode: QueryMode, task: Task) -> (f64, f64) {
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    let mut n = 0usize;
    for q in &b.queries {
        if q.level == HierarchyLevel::Group {
            continue;
        }
        let rel = query_relevancy(b, data, q, mode, task);
        hits += localization_accuracy(&rel, q.bbox) as usize;
        iou_sum += miou(&rel, &q.mask, THRESHOLD);
        n += 1;
    }
    (hits as f64 / n as f64, iou_sum / n as f64)
}

// ---------------------------------------------------------------------------
// Criterion 1: suffix-sum composite equals the direct weighted sum.

#[test]
fn criterion_composite_algebra() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for &d in &[4usize, 16, 64] {
        for _ in 0..1000 {
            let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let gamma: Vec<f64> = raw.iter().map(|v| v / total).collect();

            let tilde = reweight(&theta, &gamma);
            let fast: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| w[r * d + c] * tilde[c]).sum())
                .collect();
            let mut direct = vec![0.0; d];
            for (j, &g) in gamma.iter().enumerate() {
                let masked = scale_aware_feature(&theta, j + 1, &w);
                for (o, m) in direct.iter_mut().zip(&masked) {
                    *o += g * m;
                }
            }
            let num: f64 = fast
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = direct.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "composite-algebra",
        worst < 1e-5 && elapsed < 10.0,
        &format!("worst rel err {worst:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradients match central finite differences.

#[test]
fn criterion_gradient_suite() {
    let t0 = Instant::now();
    let g1 = Gaussian::new(
        Vector3::new(0.0, 0.0, 2.0),
        Vector3::new(0.5, 0.5, 0.5),
        UnitQuaternion::identity(),
        1.0,
        [1.0, 0.0, 0.0],
    )
    .unwrap();
    let g2 = Gaussian::new(
        Vector3::new(0.4, 0.2, 2.3),
        Vector3::new(0.4, 0.4, 0.4),
        UnitQuaternion::identity(),
        0.8,
        [0.0, 1.0, 0.0],
    )
    .unwrap();
    let scene = GaussianScene::new(vec![g1, g2]).unwrap();
    let cam = orbit_cameras(&scene.extent, 1, 6, 0.0).remove(0);
    let weights = composite_weights(&scene, &cam);
    let config = FieldConfig {
        resolution: 8,
        channels: 4,
        hidden: 6,
        dim: 4,
        extent: scene.extent.padded(1.0),
        combine: PlaneCombine::Sum,
    };
    let mut field = NestedField::init(config, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in field.w.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    for p in &mut field.triplane.planes {
        for v in p.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    // Push hidden pre-activations away from the ReLU kink so the central
    // difference never straddles it.
    for v in field.mlp.b1.iter_mut().chain(field.mlp.b2.iter_mut()) {
        *v = rng.gen_range(0.05..0.15);
    }
    let means: Vec<_> = scene.gaussians.iter().map(|g| g.mean).collect();
    let mut teacher = vec![0.5; 4];
    teacher[1] = -0.5;
    let dmap = DimensionMap::new(4, 1).unwrap();
    let m = dmap.dim_for_scale(0.25);
    let lambda = 0.001;

    // Pixels covered by the scene, used as the training batch.
    let covered: Vec<usize> =
        (0..36).filter(|&p| !weights.weights[p].is_empty()).collect();
    assert!(covered.len() >= 4);

    let loss_of = |field: &NestedField| {
        let tri = field.sample_triplane(&means);
        let c = field.config.channels;
        let mut total = 0.0;
        for &pix in &covered {
            let mut theta_c = vec![0.0; c];
            for &(gi, w) in &weights.weights[pix] {
                for (t, f) in theta_c.iter_mut().zip(&tri[gi * c..(gi + 1) * c]) {
                    *t += w * f;
                }
            }
            let (theta_d, _) = field.mlp.forward(&theta_c);
            let phi = scale_aware_feature(&theta_d, m, &field.w);
            total += hierarchical_loss(&phi, &teacher, lambda).0;
        }
        total
    };

    // Analytic gradients through the training-step primitives.
    let mut grads = FieldGradients::zeros_like(&field);
    let mut cache = field.cache_points(&means);
    let tri = field.sample_triplane_cached(&mut cache);
    let c = field.config.channels;
    let d = field.config.dim;
    let mut dtri = vec![0.0; tri.len()];
    for &pix in &covered {
        let mut theta_c = vec![0.0; c];
        for &(gi, w) in &weights.weights[pix] {
            for (t, f) in theta_c.iter_mut().zip(&tri[gi * c..(gi + 1) * c]) {
                *t += w * f;
            }
        }
        let (theta_d, acts) = field.mlp.forward(&theta_c);
        let phi = scale_aware_feature(&theta_d, m, &field.w);
        let (_, dphi) = hierarchical_loss(&phi, &teacher, lambda);
        let mut dtheta_d = vec![0.0; d];
        for (r, g) in dphi.iter().enumerate() {
            for col in 0..m {
                grads.w[r * d + col] += g * theta_d[col];
                dtheta_d[col] += field.w[r * d + col] * g;
            }
        }
        let dtheta_c = field.mlp.backward(&acts, &dtheta_d, &mut grads.mlp);
        for &(gi, w) in &weights.weights[pix] {
            for (t, g) in dtri[gi * c..(gi + 1) * c].iter_mut().zip(&dtheta_c) {
                *t += w * g;
            }
        }
    }
    field.triplane_backward(&cache, &dtri, &mut grads);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let plane_len = field.triplane.planes[0].len();
    let mut check = |field: &mut NestedField, idx_of: &dyn Fn(&mut NestedField) -> &mut f64, analytic: f64| {
        let orig = *idx_of(field);
        *idx_of(field) = orig + h;
        let up = loss_of(field);
        *idx_of(field) = orig - h;
        let down = loss_of(field);
        *idx_of(field) = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max((fd - analytic).abs() / denom);
    };
    for k in 0..15 {
        let idx = (k * 37) % plane_len;
        let a = grads.planes[1][idx];
        check(&mut field, &move |f: &mut NestedField| &mut f.triplane.planes[1][idx], a);
    }
    for k in 0..10 {
        let idx = (k * 7) % (6 * 4);
        let a = grads.mlp.w1[idx];
        check(&mut field, &move |f: &mut NestedField| &mut f.mlp.w1[idx], a);
    }
    for k in 0..10 {
        let idx = (k * 11) % (4 * 6);
        let a = grads.mlp.w3[idx];
        check(&mut field, &move |f: &mut NestedField| &mut f.mlp.w3[idx], a);
    }
    for k in 0..6 {
        let a = grads.mlp.b2[k % 6];
        let idx = k % 6;
        check(&mut field, &move |f: &mut NestedField| &mut f.mlp.b2[idx], a);
    }
    for k in 0..16 {
        let a = grads.w[k];
        check(&mut field, &move |f: &mut NestedField| &mut f.w[k], a);
    }
    // Loss gradient on its own.
    let phi: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gt: Vec<f64> = {
        let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    let (_, grad) = hierarchical_loss(&phi, &gt, 0.3);
    for i in 0..6 {
        let mut up = phi.clone();
        up[i] += h;
        let mut down = phi.clone();
        down[i] -= h;
        let fd = (hierarchical_loss(&up, &gt, 0.3).0 - hierarchical_loss(&down, &gt, 0.3).0)
            / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "gradient-suite",
        worst < 1e-4 && elapsed < 60.0,
        &format!("worst rel err {worst:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: compositing conservation and the rendering adjoint.

#[test]
fn criterion_rendering_conservation() {
    let t0 = Instant::now();
    let (scene, _) = generate_synthetic(&default_spec()).unwrap();
    let cams = orbit_cameras(&scene.extent, 5, 48, 0.123);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_cons = 0.0f64;
    let mut worst_adj = 0.0f64;
    for cam in &cams {
        let weights = composite_weights(&scene, cam);
        for pix in 0..48 * 48 {
            let total: f64 = weights.weights[pix].iter().map(|&(_, w)| w).sum();
            worst_cons = worst_cons.max((total + weights.t_final[pix] - 1.0).abs());
        }
        // Adjoint: <render(F), G> == <F, backward(G)>.
        let dim = 3;
        let n = scene.len();
        let feats: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rendered =
            render_features(&weights, &feats, dim, FeatureSemantics::FieldFeature).unwrap();
        let mut gmap = FeatureMap::zeros(48, 48, dim, FeatureSemantics::FieldFeature);
        for v in gmap.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let back = backward_features(&weights, &gmap, n).unwrap();
        let lhs: f64 = rendered.data.iter().zip(&gmap.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = feats.iter().zip(&back).map(|(a, b)| a * b).sum();
        let denom = lhs.abs().max(rhs.abs()).max(1e-9);
        worst_adj = worst_adj.max((lhs - rhs).abs() / denom);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "rendering-conservation",
        worst_cons < 1e-5 && worst_adj < 1e-5 && elapsed < 30.0,
        &format!("conservation {worst_cons:.2e}, adjoint {worst_adj:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: quantizer balance at n = 10^4, D = 64.

#[test]
fn criterion_quantizer_balance() {
    let t0 = Instant::now();
    use rand_distr::{Distribution, LogNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dist = LogNormal::new(0.0, 1.0).unwrap();
    let n = 10_000;
    let d = 64;
    let scales: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let (_, bins) = ScaleQuantizer::fit(&scales, d).unwrap();
    let mut counts = vec![0usize; d];
    for b in bins {
        counts[b] += 1;
    }
    let lo = n / d;
    let hi = n.div_ceil(d);
    let ok = counts.iter().all(|&c| c == lo || c == hi);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "quantizer-balance",
        ok && elapsed < 1.0,
        &format!("bin counts within {{{lo},{hi}}}: {ok}, {elapsed:.3}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: D = 512, k = 170 -> allowed dims {170, 340, 510}.

#[test]
fn criterion_step_size_example() {
    let m = DimensionMap::new(512, 170).unwrap();
    let dims = m.allowed_dims();
    let ok = dims == vec![170, 340, 510];
    report("step-size-example", ok, &format!("allowed dims {dims:?}"));
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end distillation quality with sibling suppression.

#[test]
fn criterion_end_to_end_distillation() {
    let t0 = Instant::now();
    let b = base();
    let data = eval_data_k1();
    let (loc, m_iou) = evaluate_mode(b, data, QueryMode::Composite, Task::Segmentation);

    // Sibling suppression: a part query must not light up sibling parts.
    let mut max_sibling = 0.0f64;
    for q in &b.queries {
        if q.level != HierarchyLevel::Part {
            continue;
        }
        let parent = b.annotations[q.node_idx].parent;
        let rel = query_relevancy(b, data, q, QueryMode::Composite, Task::Segmentation);
        for s in &b.queries {
            if s.view == q.view
                && s.level == HierarchyLevel::Part
                && s.node_idx != q.node_idx
                && b.annotations[s.node_idx].parent == parent
            {
                max_sibling = max_sibling.max(miou(&rel, &s.mask, THRESHOLD));
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "end-to-end-distillation",
        m_iou >= 0.85 && loc >= 0.9 && max_sibling <= 0.2 && elapsed < 600.0,
        &format!(
            "miou {m_iou:.3}, loc {loc:.3}, max sibling iou {max_sibling:.3}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: oracle >= composite >= explicit - 0.02 on both tasks.

#[test]
fn criterion_ablation_ordering() {
    let t0 = Instant::now();
    let b = base();
    let data = eval_data_k1();
    let (loc_c, miou_c) = evaluate_mode(b, data, QueryMode::Composite, Task::Segmentation);
    let (loc_e, miou_e) = evaluate_mode(b, data, QueryMode::Explicit, Task::Segmentation);
    let (_, miou_o) = evaluate_mode(b, data, QueryMode::Oracle, Task::Segmentation);
    let (loc_o, _) = evaluate_mode(b, data, QueryMode::Oracle, Task::Localization);
    let elapsed = t0.elapsed().as_secs_f64();
    let ok = miou_o >= miou_c
        && miou_c >= miou_e - 0.02
        && loc_o >= loc_c
        && loc_c >= loc_e - 0.02
        && elapsed < 120.0;
    report(
        "ablation-ordering",
        ok,
        &format!(
            "miou o/c/e {miou_o:.3}/{miou_c:.3}/{miou_e:.3}, loc o/c/e {loc_o:.3}/{loc_c:.3}/{loc_e:.3}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: efficiency — one relevancy map per composite query, >= 5x
// faster than explicit at D = 64, and amortization beats re-rendering.

#[test]
fn criterion_efficiency() {
    let t0 = Instant::now();
    let b = base();
    let d = 64;
    let config = FieldConfig {
        resolution: RESOLUTION,
        channels: CHANNELS,
        hidden: HIDDEN,
        dim: d,
        extent: b.core_extent.padded(0.25 * b.core_extent.diagonal()),
        combine: PlaneCombine::Sum,
    };
    let mut field = NestedField::init(config, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for v in field.w.iter_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    let teachers = node_teachers(&b.annotations, d, 19);
    let canon = level_canonicals(&b.annotations, &teachers).unwrap();
    let cache = precompute_composite(&b.scene, &field, &canon).unwrap();
    // Timing is content-independent, so a small dedicated view keeps this
    // criterion fast.
    let cam = ring_cameras(&b.core_extent, 1, 64, 0.3).remove(0);
    let weights = composite_weights(&b.scene, &cam);

    reset_relevancy_eval_count();
    composite_query(&field, &cache, &weights, &teachers[0], &canon, &rcfg(), "q").unwrap();
    let composite_evals = relevancy_eval_count();
    reset_relevancy_eval_count();
    explicit_scale_query(&b.scene, &field, &weights, &teachers[0], &canon, &rcfg(), 1, "q")
        .unwrap();
    let explicit_evals = relevancy_eval_count();

    let queries: Vec<Vec<f64>> = teachers.iter().take(4).cloned().collect();
    let timing = bench_modes(
        &b.scene, &field, &cache, &weights, &queries, &canon, &rcfg(), 1, 5,
    )
    .unwrap();
    let ratio = timing.explicit.per_query_time / timing.composite.per_query_time;
    let amortized_ok = timing.composite.total_10 < 10.0 * timing.composite.total_1;
    let elapsed = t0.elapsed().as_secs_f64();
    let ok = composite_evals == 1
        && explicit_evals == d
        && ratio >= 5.0
        && amortized_ok
        && elapsed < 120.0;
    report(
        "efficiency",
        ok,
        &format!(
            "composite evals {composite_evals}, explicit evals {explicit_evals}, speedup {ratio:.1}x, amortized {amortized_ok}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: composite mIoU does not increase as the step size grows.

#[test]
fn criterion_step_size_degradation() {
    let t0 = Instant::now();
    let b = base();
    let mut mious = Vec::new();
    for &k in &[1usize, 8, DIM / 2] {
        let m = if k == 1 {
            evaluate_mode(b, eval_data_k1(), QueryMode::Composite, Task::Segmentation).1
        } else {
            let field = train_with_step(b, k);
            let cache = precompute_composite(&b.scene, &field, &b.canon).unwrap();
            let data = build_eval_data(b, &field, &cache, false);
            evaluate_mode(b, &data, QueryMode::Composite, Task::Segmentation).1
        };
        mious.push((k, m));
    }
    let ok_trend = mious.windows(2).all(|w| w[1].1 <= w[0].1 + 0.02);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "step-size-degradation",
        ok_trend && elapsed < 1800.0,
        &format!("miou by k {mious:?}, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: deferred rendering approximates per-Gaussian rendering on
// near-binary-opacity scenes.

#[test]
fn criterion_deferred_approximation() {
    let (field, _) = field_k1();
    let t0 = Instant::now();
    // A near-binary-opacity scene: a grid of fully opaque, well-separated
    // Gaussians, so the front Gaussian takes essentially all of each covered
    // pixel's weight and deferred shading is exact up to the alpha clamp.
    let mut opaque = Vec::new();
    for gy in 0..6 {
        for gx in 0..6 {
            opaque.push(
                Gaussian::new(
                    Vector3::new(gx as f64 * 0.5 - 1.25, gy as f64 * 0.5 - 1.25, 0.0),
                    Vector3::new(0.05, 0.05, 0.05),
                    UnitQuaternion::identity(),
                    1.0,
                    [0.8, 0.6, 0.4],
                )
                .unwrap(),
            );
        }
    }
    let scene = GaussianScene::new(opaque).unwrap();
    let size = 96;
    let cam = ring_cameras(&scene.extent, 1, size, 0.05).remove(0);
    let weights = composite_weights(&scene, &cam);
    let means: Vec<_> = scene.gaussians.iter().map(|g| g.mean).collect();
    let deferred = field.deferred_pixel_features(&weights, &means).unwrap();
    let per_gaussian = field.per_gaussian_pixel_features(&weights, &means).unwrap();

    let d = field.config.dim;
    let mut covered = 0usize;
    let mut within = 0usize;
    for pix in 0..size * size {
        let coverage: f64 = weights.weights[pix].iter().map(|&(_, w)| w).sum();
        if coverage < 0.5 {
            continue;
        }
        covered += 1;
        let a = &deferred.data[pix * d..(pix + 1) * d];
        let bfeat = &per_gaussian.data[pix * d..(pix + 1) * d];
        let num: f64 =
            a.iter().zip(bfeat).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = bfeat.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        if num / den <= 0.02 {
            within += 1;
        }
    }
    let frac = within as f64 / covered.max(1) as f64;
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "deferred-approximation",
        covered > 100 && frac >= 0.95 && elapsed < 60.0,
        &format!("{within}/{covered} covered pixels within 2% ({frac:.3}), {elapsed:.1}s"),
    );
}

// Keep Adam and BatchSampler linked into the suite so the shared fixture's
// training path is the one exercised everywhere.
#[allow(dead_code)]
fn _typecheck(_: &Adam, _: &BatchSampler) {}

#[test]
#[ignore]
fn diag() {
    let b = base();
    println!(
        "core extent diag {:.3}, scene extent diag {:.3}, gaussians {}, queries {}",
        b.core_extent.diagonal(),
        b.scene.extent.diagonal(),
        b.scene.len(),
        b.queries.len()
    );
    let cam = ring_cameras(&b.core_extent, EVAL_VIEWS, IMG, 0.26).remove(0);
    let w = &b.eval_views[0];
    for (i, ann) in b.annotations.iter().enumerate() {
        let mask = nestfield::dataset::node_mask(w, &ann.members);
        println!("node {i} {:?}: mask area {}", ann.level, mask.area());
    }
    // Coverage stats on eval view 0.
    let covered = (0..IMG * IMG).filter(|&p| !w.weights[p].is_empty()).count();
    let heavy = (0..IMG * IMG)
        .filter(|&p| w.weights[p].iter().map(|&(_, x)| x).sum::<f64>() > 0.5)
        .count();
    println!("view0: covered {covered}, mass>0.5 {heavy}, cam fx {:.1} eye-dist", cam.fx);
    let data = eval_data_k1();
    for q in &b.queries {
        for mode in [QueryMode::Composite, QueryMode::Explicit] {
            let rel = query_relevancy(b, data, q, mode, Task::Segmentation);
            let min = rel.values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = rel.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pred: usize = rel
                .values
                .iter()
                .filter(|&&v| max > min && (v - min) / (max - min) >= THRESHOLD)
                .count();
            let gt_bits = q.mask.to_bitmap(rel.values.len());
            let inter: usize = rel
                .values
                .iter()
                .enumerate()
                .filter(|&(i, &v)| {
                    gt_bits[i] && max > min && (v - min) / (max - min) >= THRESHOLD
                })
                .count();
            println!(
                "q node{} {:?} view{} {mode:?}: gt {}, pred {pred}, inter {inter}, iou {:.3}, scale {:?}",
                q.node_idx,
                q.level,
                q.view,
                q.mask.area(),
                miou(&rel, &q.mask, THRESHOLD),
                rel.chosen_scale,
            );
        }
    }
    for mode in [QueryMode::Composite, QueryMode::Explicit] {
        for level in [HierarchyLevel::Group, HierarchyLevel::Object, HierarchyLevel::Part] {
            let mut hits = 0;
            let mut iou = 0.0;
            let mut n = 0;
            for q in &b.queries {
                if q.level != level {
                    continue;
                }
                let rel = query_relevancy(b, data, q, mode, Task::Segmentation);
                hits += localization_accuracy(&rel, q.bbox) as usize;
                iou += miou(&rel, &q.mask, THRESHOLD);
                n += 1;
            }
            println!(
                "{mode:?} {level:?}: n {n}, loc {:.3}, miou {:.3}",
                hits as f64 / n as f64,
                iou / n as f64
            );
        }
    }
}
