//! Nested feature field distillation over frozen 3D Gaussian scenes.
//!
//! The pipeline: a synthetic scene generator emits Gaussian geometry with
//! ground-truth hierarchy annotations; a CPU tile-based splatter renders
//! RGB, expected depth and arbitrary per-Gaussian feature maps; a
//! TriPlane+MLP field is distilled against multi-scale teacher embeddings
//! with a masked scale-aware projection; queries run in a single pass via
//! composite embeddings, with explicit-scale and oracle baselines and an
//! evaluation/benchmark harness on top.

pub mod dataset;
pub mod eval;
pub mod field;
pub mod hierarchy;
pub mod query;
pub mod raster;
pub mod scene;

pub use field::{FieldConfig, NestedField, PlaneCombine};
pub use raster::{CompositeWeightsMap, FeatureMap, FeatureSemantics};
pub use scene::{Camera, Gaussian, GaussianScene, HierarchyAnnotation, SyntheticSceneSpec};
