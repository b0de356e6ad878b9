//! Evaluation metrics (localization, mIoU, retrieval recall), the metrics
//! report schema, and the query-speed benchmark.

use crate::field::NestedField;
use crate::hierarchy::RleMask;
use crate::query::{
    composite_map, relevancy, scale_maps, CanonicalSet, CompositeWeights, QueryError, QueryMode,
    RelevancyConfig, RelevancyMap,
};
use crate::raster::CompositeWeightsMap;
use crate::scene::GaussianScene;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval case '{0}' has neither a ground-truth mask nor a box")]
    NoGroundTruth(String),
    #[error("box {0:?} exceeds the {1}x{2} view")]
    BoxOutOfBounds([usize; 4], usize, usize),
    #[error("empty segment pool")]
    EmptyPool,
    #[error("ground-truth index {0} outside pool of {1}")]
    BadPoolIndex(usize, usize),
    #[error("query error: {0}")]
    Query(#[from] QueryError),
}

/// Per-query ground truth: at least one of mask/box must be present.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub query_id: String,
    pub view_id: usize,
    pub gt_mask: Option<RleMask>,
    pub gt_box: Option<[usize; 4]>,
    pub embedding: Vec<f64>,
}

impl EvalCase {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), EvalError> {
        if self.gt_mask.is_none() && self.gt_box.is_none() {
            return Err(EvalError::NoGroundTruth(self.query_id.clone()));
        }
        if let Some(b) = self.gt_box {
            if b[0] > b[2] || b[1] > b[3] || b[2] >= width || b[3] >= height {
                return Err(EvalError::BoxOutOfBounds(b, width, height));
            }
        }
        Ok(())
    }
}

/// Row-major argmax with ties resolved to the lowest index.
pub fn argmax_pixel(rel: &RelevancyMap) -> usize {
    let mut best = 0;
    for (i, &v) in rel.values.iter().enumerate() {
        if v > rel.values[best] {
            best = i;
        }
    }
    best
}

/// True iff the highest-relevancy pixel lies inside the closed box
/// [x0, y0, x1, y1].
pub fn localization_accuracy(rel: &RelevancyMap, gt_box: [usize; 4]) -> bool {
    let pix = argmax_pixel(rel);
    let x = pix % rel.width;
    let y = pix / rel.width;
    x >= gt_box[0] && x <= gt_box[2] && y >= gt_box[1] && y <= gt_box[3]
}

/// Min-max normalize, binarize at the threshold, and report IoU against the
/// ground-truth mask. Empty union counts as a perfect match.
pub fn miou(rel: &RelevancyMap, gt: &RleMask, threshold: f64) -> f64 {
    let min = rel.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rel.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let npix = rel.values.len();
    let gt_bits = gt.to_bitmap(npix);
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (i, &v) in rel.values.iter().enumerate() {
        // A flat map normalizes to all-zero and predicts nothing.
        let pred = max > min && (v - min) / (max - min) >= threshold;
        if pred && gt_bits[i] {
            intersection += 1;
        }
        if pred || gt_bits[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Mean relevancy per pool segment; empty segments score 0.
pub fn segment_scores(pool: &[RleMask], rel: &RelevancyMap) -> Vec<f64> {
    pool.iter()
        .map(|mask| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for pix in mask.pixels() {
                if pix < rel.values.len() {
                    sum += rel.values[pix];
                    n += 1;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// 1-based rank of the ground-truth segment: scores descending, ties broken
/// by segment id (lower id ranks first).
pub fn retrieval_rank(pool: &[RleMask], rel: &RelevancyMap, gt: usize) -> Result<usize, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    if gt >= pool.len() {
        return Err(EvalError::BadPoolIndex(gt, pool.len()));
    }
    let scores = segment_scores(pool, rel);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok(order.iter().position(|&i| i == gt).unwrap() + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQueryMetrics {
    pub query_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loc_hit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub loc_acc: f64,
    pub miou: f64,
    /// R@K for K = 1..5, keyed by K.
    pub r_at: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    /// Seconds to build the per-view query-agnostic artifacts.
    pub render_time: f64,
    pub per_query_time: f64,
    pub total_1: f64,
    pub total_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub composite: ModeTiming,
    pub explicit: ModeTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub mode: QueryMode,
    #[serde(rename = "D")]
    pub dim: usize,
    pub k: usize,
    pub per_query: Vec<PerQueryMetrics>,
    pub aggregate: AggregateMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

/// Arithmetic means over queries; R@K over the queries that have a rank.
pub fn aggregate(per_query: &[PerQueryMetrics]) -> AggregateMetrics {
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let loc_acc = mean(
        per_query
            .iter()
            .filter_map(|q| q.loc_hit.map(|h| h as usize as f64))
            .collect(),
    );
    let miou = mean(per_query.iter().filter_map(|q| q.iou).collect());
    let mut r_at = BTreeMap::new();
    for k in 1..=5usize {
        r_at.insert(
            k.to_string(),
            mean(
                per_query
                    .iter()
                    .filter_map(|q| q.rank.map(|r| (r <= k) as usize as f64))
                    .collect(),
            ),
        );
    }
    AggregateMetrics { loc_acc, miou, r_at }
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Median-of-`reps` timing of both query paths on one view. The composite
/// path renders once and scores one relevancy map per query; the explicit
/// path builds all per-scale maps once and scores every one per query.
#[allow(clippy::too_many_arguments)]
pub fn bench_modes(
    scene: &GaussianScene,
    field: &NestedField,
    cache: &CompositeWeights,
    weights: &CompositeWeightsMap,
    queries: &[Vec<f64>],
    canon: &CanonicalSet,
    rcfg: &RelevancyConfig,
    step_size: usize,
    reps: usize,
) -> Result<TimingReport, EvalError> {
    assert!(reps >= 1 && !queries.is_empty());
    // Warmup, excluded from measurement.
    let comp_map = composite_map(field, cache, weights)?;
    let per_scale = scale_maps(scene, field, weights, step_size)?;

    let time = |f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        f();
        t0.elapsed().as_secs_f64()
    };
    let nq = queries.len() as f64;

    let comp_render = median(
        (0..reps)
            .map(|_| {
                time(&mut || {
                    std::hint::black_box(composite_map(field, cache, weights).unwrap());
                })
            })
            .collect(),
    );
    let comp_query = median(
        (0..reps)
            .map(|_| {
                time(&mut || {
                    for q in queries {
                        std::hint::black_box(relevancy(
                            &comp_map,
                            q,
                            canon,
                            rcfg,
                            "bench",
                            QueryMode::Composite,
                            None,
                        ));
                    }
                }) / nq
            })
            .collect(),
    );

    let expl_render = median(
        (0..reps)
            .map(|_| {
                time(&mut || {
                    std::hint::black_box(scale_maps(scene, field, weights, step_size).unwrap());
                })
            })
            .collect(),
    );
    let expl_query = median(
        (0..reps)
            .map(|_| {
                time(&mut || {
                    for q in queries {
                        let mut best: Option<RelevancyMap> = None;
                        for (m, map) in &per_scale {
                            let r = relevancy(
                                map,
                                q,
                                canon,
                                rcfg,
                                "bench",
                                QueryMode::Explicit,
                                Some(*m),
                            );
                            let better = best
                                .as_ref()
                                .map(|b| r.max_value() > b.max_value())
                                .unwrap_or(true);
                            if better {
                                best = Some(r);
                            }
                        }
                        std::hint::black_box(best);
                    }
                }) / nq
            })
            .collect(),
    );

    let mk = |render: f64, per_query: f64| ModeTiming {
        render_time: render,
        per_query_time: per_query,
        total_1: render + per_query,
        total_10: render + 10.0 * per_query,
    };
    Ok(TimingReport {
        composite: mk(comp_render, comp_query),
        explicit: mk(expl_render, expl_query),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(width: usize, height: usize, values: Vec<f64>) -> RelevancyMap {
        RelevancyMap {
            width,
            height,
            values,
            query_id: "q".into(),
            mode: QueryMode::Composite,
            chosen_scale: None,
        }
    }

    #[test]
    fn localization_tie_break_at_origin() {
        let r = rel(4, 4, vec![0.5; 16]);
        assert!(localization_accuracy(&r, [0, 0, 0, 0]));
        assert!(!localization_accuracy(&r, [1, 1, 3, 3]));
    }

    #[test]
    fn localization_delta_outside_box() {
        let mut values = vec![0.0; 16 * 16];
        values[10 * 16 + 10] = 1.0;
        let r = rel(16, 16, values);
        assert!(!localization_accuracy(&r, [0, 0, 5, 5]));
        assert!(localization_accuracy(&r, [8, 8, 12, 12]));
    }

    proptest! {
        #[test]
        fn localization_invariant_under_monotone_rescale(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r1 = rel(8, 8, values.clone());
            // Strictly monotone: x -> x^3 * 0.5 + 0.1.
            let r2 = rel(8, 8, values.iter().map(|v| v.powi(3) * 0.5 + 0.1).collect());
            prop_assert_eq!(argmax_pixel(&r1), argmax_pixel(&r2));
        }
    }

    fn square_mask(w: usize, x0: usize, y0: usize, side: usize) -> RleMask {
        let mut bits = vec![false; w * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                bits[y * w + x] = true;
            }
        }
        RleMask::from_bitmap(&bits)
    }

    #[test]
    fn miou_identical_and_disjoint() {
        let w = 20;
        let gt = square_mask(w, 2, 2, 5);
        let mut values = vec![0.0; w * w];
        for pix in gt.pixels() {
            values[pix] = 1.0;
        }
        assert_relative_eq!(miou(&rel(w, w, values), &gt, 0.5), 1.0);

        let pred = square_mask(w, 10, 10, 5);
        let mut values = vec![0.0; w * w];
        for pix in pred.pixels() {
            values[pix] = 1.0;
        }
        assert_relative_eq!(miou(&rel(w, w, values), &gt, 0.5), 0.0);
    }

    #[test]
    fn miou_dilated_ring() {
        // gt 10x10, prediction the same square dilated by one pixel on each
        // side: intersection 100, union 144.
        let w = 20;
        let gt = square_mask(w, 4, 4, 10);
        let pred = square_mask(w, 3, 3, 12);
        let mut values = vec![0.0; w * w];
        for pix in pred.pixels() {
            values[pix] = 1.0;
        }
        assert_relative_eq!(miou(&rel(w, w, values), &gt, 0.5), 100.0 / 144.0);
    }

    #[test]
    fn miou_empty_union_is_one() {
        let w = 8;
        let empty = RleMask { runs: vec![] };
        // A flat map predicts nothing after normalization.
        assert_relative_eq!(miou(&rel(w, w, vec![0.3; w * w]), &empty, 0.5), 1.0);
    }

    #[test]
    fn miou_symmetric_in_pred_and_gt() {
        let w = 16;
        let a = square_mask(w, 2, 2, 6);
        let b = square_mask(w, 4, 4, 6);
        let as_map = |m: &RleMask| {
            let mut values = vec![0.0; w * w];
            for pix in m.pixels() {
                values[pix] = 1.0;
            }
            rel(w, w, values)
        };
        assert_relative_eq!(miou(&as_map(&a), &b, 0.5), miou(&as_map(&b), &a, 0.5));
    }

    #[test]
    fn retrieval_rank_arithmetic() {
        let w = 4;
        let pool = vec![
            square_mask(w, 0, 0, 1),
            square_mask(w, 1, 0, 1),
            square_mask(w, 2, 0, 1),
        ];
        let values = vec![0.9, 0.5, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = rel(w, w, values);
        assert_eq!(retrieval_rank(&pool, &r, 1).unwrap(), 2);
        assert_eq!(retrieval_rank(&pool, &r, 0).unwrap(), 1);
        assert_eq!(retrieval_rank(&pool, &r, 2).unwrap(), 3);
        assert!(retrieval_rank(&[], &r, 0).is_err());
        assert!(retrieval_rank(&pool, &r, 9).is_err());
    }

    #[test]
    fn retrieval_ties_break_by_id() {
        let w = 4;
        let pool = vec![square_mask(w, 0, 0, 1), square_mask(w, 1, 0, 1)];
        let r = rel(w, w, vec![0.5; 16]);
        assert_eq!(retrieval_rank(&pool, &r, 0).unwrap(), 1);
        assert_eq!(retrieval_rank(&pool, &r, 1).unwrap(), 2);
    }

    #[test]
    fn r_at_k_monotone_in_k() {
        let per_query: Vec<PerQueryMetrics> = (0..6)
            .map(|i| PerQueryMetrics {
                query_id: format!("q{i}"),
                loc_hit: Some(i % 2 == 0),
                iou: Some(0.5),
                rank: Some(i + 1),
            })
            .collect();
        let agg = aggregate(&per_query);
        let mut prev = 0.0;
        for k in 1..=5 {
            let v = agg.r_at[&k.to_string()];
            assert!(v >= prev);
            prev = v;
        }
        assert_relative_eq!(agg.loc_acc, 0.5);
    }

    #[test]
    fn report_json_is_deterministic_and_matches_schema() {
        let per_query = vec![PerQueryMetrics {
            query_id: "part-0".into(),
            loc_hit: Some(true),
            iou: Some(0.875),
            rank: Some(1),
        }];
        let report = MetricsReport {
            scene: "desk".into(),
            mode: QueryMode::Composite,
            dim: 32,
            k: 1,
            per_query: per_query.clone(),
            aggregate: aggregate(&per_query),
            timing: None,
        };
        let a = serde_json::to_string_pretty(&report).unwrap();
        let b = serde_json::to_string_pretty(&report).unwrap();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["scene"], "desk");
        assert_eq!(v["mode"], "composite");
        assert_eq!(v["D"], 32);
        assert_eq!(v["k"], 1);
        assert_eq!(v["per_query"][0]["query_id"], "part-0");
        assert_eq!(v["aggregate"]["r_at"]["1"], 1.0);
        let round: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(round, report);
    }

    #[test]
    fn bench_timing_internally_consistent() {
        use crate::field::{FieldConfig, PlaneCombine};
        use crate::query::precompute_composite;
        use crate::raster::composite_weights;
        use crate::scene::{generate_synthetic, SyntheticSceneSpec};

        let (scene, _) = generate_synthetic(&SyntheticSceneSpec {
            group_count: 1,
            objects_per_group: 2,
            parts_per_object: 2,
            gaussians_per_part: 3,
            scale_ratio: 3.0,
            seed: 2,
        })
        .unwrap();
        let d = 8;
        let config = FieldConfig {
            resolution: 16,
            channels: 4,
            hidden: 8,
            dim: d,
            extent: scene.extent.padded(0.5),
            combine: PlaneCombine::Sum,
        };
        let field = NestedField::init(config, 1);
        let cam = crate::dataset::orbit_cameras(&scene.extent, 1, 32, 0.0).remove(0);
        let weights = composite_weights(&scene, &cam);
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        let canon = CanonicalSet::new(vec!["object".into()], vec![v.clone()]).unwrap();
        let cache = precompute_composite(&scene, &field, &canon).unwrap();
        let report = bench_modes(
            &scene,
            &field,
            &cache,
            &weights,
            &[v],
            &canon,
            &RelevancyConfig::default(),
            1,
            5,
        )
        .unwrap();
        for t in [report.composite, report.explicit] {
            assert!(t.render_time > 0.0);
            assert!(t.per_query_time > 0.0);
            assert!(t.total_10 >= t.total_1);
            assert!(t.total_1 >= t.render_time);
        }
    }
}
