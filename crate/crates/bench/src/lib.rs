//! Shared fixtures for the criterion benchmarks.

use nestfield::dataset::{node_teachers, orbit_cameras};
use nestfield::field::{FieldConfig, NestedField, PlaneCombine};
use nestfield::query::{precompute_composite, CanonicalSet, CompositeWeights};
use nestfield::raster::{composite_weights, CompositeWeightsMap};
use nestfield::scene::{generate_synthetic, Camera, GaussianScene, SyntheticSceneSpec};

pub struct BenchScene {
    pub scene: GaussianScene,
    pub camera: Camera,
    pub weights: CompositeWeightsMap,
    pub field: NestedField,
    pub cache: CompositeWeights,
    pub canon: CanonicalSet,
    pub query: Vec<f64>,
}

pub fn desk_fixture(dim: usize, size: usize) -> BenchScene {
    let spec = SyntheticSceneSpec {
        group_count: 2,
        objects_per_group: 2,
        parts_per_object: 2,
        gaussians_per_part: 8,
        scale_ratio: 3.0,
        seed: 7,
    };
    let (scene, annotations) = generate_synthetic(&spec).expect("synthetic scene");
    let camera = orbit_cameras(&scene.extent, 1, size, 0.0).remove(0);
    let weights = composite_weights(&scene, &camera);
    let config = FieldConfig {
        resolution: 32,
        channels: 8,
        hidden: 16,
        dim,
        extent: scene.extent.padded(0.5),
        combine: PlaneCombine::Sum,
    };
    let field = NestedField::init(config, 1);
    let teachers = node_teachers(&annotations, dim, 2);
    let canon = nestfield::dataset::level_canonicals(&annotations, &teachers).expect("canonicals");
    let cache = precompute_composite(&scene, &field, &canon).expect("composite cache");
    let query = teachers.last().expect("at least one teacher").clone();
    BenchScene { scene, camera, weights, field, cache, canon, query }
}
