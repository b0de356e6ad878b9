//! Single-pass querying: per-Gaussian composite weights (gamma), suffix-sum
//! reweighted point features, composite-embedding rendering, relevancy
//! scoring, and the explicit-scale and oracle-scale baselines.

use crate::field::NestedField;
use crate::hierarchy::DimensionMap;
use crate::raster::{render_features, CompositeWeightsMap, FeatureMap, FeatureSemantics};
use crate::scene::GaussianScene;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("canonical set must contain at least one entry")]
    EmptyCanonicalSet,
    #[error("vector for '{0}' is not unit norm (|v| = {1})")]
    NotUnitNorm(String, f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stale composite cache: field checksum changed, recompute gamma")]
    StaleCache,
    #[error("oracle query needs at least one candidate map")]
    NoCandidates,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("field error: {0}")]
    Field(#[from] crate::field::FieldError),
    #[error("raster error: {0}")]
    Raster(#[from] crate::raster::RasterError),
}

/// Unit embeddings of the canonical phrases used to normalize relevancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSet {
    pub labels: Vec<String>,
    /// Row-major K x D.
    pub vectors: Vec<Vec<f64>>,
}

pub const CANONICAL_LABELS: [&str; 5] = ["object", "stuff", "thing", "part", "texture"];

impl CanonicalSet {
    pub fn new(labels: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, QueryError> {
        if vectors.is_empty() {
            return Err(QueryError::EmptyCanonicalSet);
        }
        if labels.len() != vectors.len() {
            return Err(QueryError::DimensionMismatch(format!(
                "{} labels for {} vectors",
                labels.len(),
                vectors.len()
            )));
        }
        for (l, v) in labels.iter().zip(&vectors) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(QueryError::NotUnitNorm(l.clone(), n));
            }
        }
        Ok(Self { labels, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    Composite,
    Explicit,
    Oracle,
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryMode::Composite => "composite",
            QueryMode::Explicit => "explicit",
            QueryMode::Oracle => "oracle",
        })
    }
}

/// Per-pixel relevancy in [0,1] with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub query_id: String,
    pub mode: QueryMode,
    /// Active dimension of the chosen scale (explicit/oracle only).
    pub chosen_scale: Option<usize>,
}

impl RelevancyMap {
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-Gaussian gamma simplex weights and reweighted point features,
/// precomputed once after training.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    pub dim: usize,
    /// N x D, each row on the simplex.
    pub gamma: Vec<f64>,
    /// N x D suffix-sum reweighted features.
    pub theta_tilde: Vec<f64>,
    /// Checksum of the field the cache was built from.
    pub field_checksum: u64,
}

/// Gamma for one Gaussian: softmax over d of max_k (W_{1:d} theta_{1:d}) . phi_k.
/// The partial products are prefix sums of rank-1 terms theta_d * W[:,d],
/// so the whole thing is O(D^2) with K dot products per prefix.
pub fn gamma_3d(theta: &[f64], w: &[f64], canon: &CanonicalSet) -> Vec<f64> {
    let d = theta.len();
    debug_assert_eq!(w.len(), d * d);
    let mut prefix = vec![0.0; d];
    let mut logits = vec![0.0; d];
    for j in 0..d {
        let t = theta[j];
        for (r, p) in prefix.iter_mut().enumerate() {
            *p += t * w[r * d + j];
        }
        let m = canon
            .vectors
            .iter()
            .map(|v| v.iter().zip(&prefix).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        logits[j] = m;
    }
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// theta_tilde_j = (sum_{d=j}^{D} gamma_d) * theta_j.
pub fn reweight(theta: &[f64], gamma: &[f64]) -> Vec<f64> {
    debug_assert_eq!(theta.len(), gamma.len());
    let mut out = vec![0.0; theta.len()];
    let mut suffix = 0.0;
    for j in (0..theta.len()).rev() {
        suffix += gamma[j];
        out[j] = suffix * theta[j];
    }
    out
}

/// Build the per-Gaussian composite cache from a trained field.
pub fn precompute_composite(
    scene: &GaussianScene,
    field: &NestedField,
    canon: &CanonicalSet,
) -> Result<CompositeWeights, QueryError> {
    let d = field.config.dim;
    if canon.dim() != d {
        return Err(QueryError::DimensionMismatch(format!(
            "canonical dim {} vs field dim {d}",
            canon.dim()
        )));
    }
    let means: Vec<_> = scene.gaussians.iter().map(|g| g.mean).collect();
    let theta = field.field_at(&means)?;
    let n = scene.len();
    let mut gamma = vec![0.0; n * d];
    let mut theta_tilde = vec![0.0; n * d];
    for i in 0..n {
        let t = &theta[i * d..(i + 1) * d];
        let g = gamma_3d(t, &field.w, canon);
        theta_tilde[i * d..(i + 1) * d].copy_from_slice(&reweight(t, &g));
        gamma[i * d..(i + 1) * d].copy_from_slice(&g);
    }
    Ok(CompositeWeights { dim: d, gamma, theta_tilde, field_checksum: field.checksum() })
}

/// Render the composite embedding map: composite theta_tilde, then W per pixel.
pub fn composite_map(
    field: &NestedField,
    cache: &CompositeWeights,
    weights: &CompositeWeightsMap,
) -> Result<FeatureMap, QueryError> {
    if cache.field_checksum != field.checksum() {
        return Err(QueryError::StaleCache);
    }
    let d = field.config.dim;
    let rendered =
        render_features(weights, &cache.theta_tilde, d, FeatureSemantics::FieldFeature)?;
    let mut out =
        FeatureMap::zeros(weights.width, weights.height, d, FeatureSemantics::CompositeEmbedding);
    for pix in 0..weights.width * weights.height {
        let phi = field.project_feature(&rendered.data[pix * d..(pix + 1) * d]);
        out.data[pix * d..(pix + 1) * d].copy_from_slice(&phi);
    }
    Ok(out)
}

/// Relevancy scoring knobs. Temperature scales every logit; the cosine-only
/// mode replaces the paired softmax with (cos+1)/2 for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevancyConfig {
    pub temperature: f64,
    pub cosine_only: bool,
}

impl Default for RelevancyConfig {
    fn default() -> Self {
        Self { temperature: 1.0, cosine_only: false }
    }
}

static RELEVANCY_EVALS: AtomicUsize = AtomicUsize::new(0);

/// Structural counter of relevancy-map evaluations, for asserting that the
/// composite path computes exactly one map per query.
pub fn relevancy_eval_count() -> usize {
    RELEVANCY_EVALS.load(Ordering::Relaxed)
}

pub fn reset_relevancy_eval_count() {
    RELEVANCY_EVALS.store(0, Ordering::Relaxed);
}

/// Per-pixel paired-softmax relevancy of an embedding map against a unit
/// query vector: r = min_k exp(phi.q) / (exp(phi.q) + exp(phi.canon_k)),
/// with zero-norm pixels pinned to 0.
pub fn relevancy(
    embedding_map: &FeatureMap,
    q: &[f64],
    canon: &CanonicalSet,
    cfg: &RelevancyConfig,
    query_id: &str,
    mode: QueryMode,
    chosen_scale: Option<usize>,
) -> RelevancyMap {
    RELEVANCY_EVALS.fetch_add(1, Ordering::Relaxed);
    let d = embedding_map.dim;
    let npix = embedding_map.width * embedding_map.height;
    let mut values = vec![0.0; npix];
    let t = cfg.temperature;
    for (pix, out) in values.iter_mut().enumerate() {
        let phi = &embedding_map.data[pix * d..(pix + 1) * d];
        let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let dot_q: f64 = phi.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / norm;
        if cfg.cosine_only {
            *out = ((dot_q + 1.0) / 2.0).clamp(0.0, 1.0);
            continue;
        }
        let mut r = f64::INFINITY;
        for c in &canon.vectors {
            let dot_c: f64 = phi.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / norm;
            let eq = (t * dot_q).exp();
            let ec = (t * dot_c).exp();
            r = r.min(eq / (eq + ec));
        }
        *out = r;
    }
    RelevancyMap {
        width: embedding_map.width,
        height: embedding_map.height,
        values,
        query_id: query_id.to_string(),
        mode,
        chosen_scale,
    }
}

/// Composite-mode query: one rendered map, one relevancy evaluation.
pub fn composite_query(
    field: &NestedField,
    cache: &CompositeWeights,
    weights: &CompositeWeightsMap,
    q: &[f64],
    canon: &CanonicalSet,
    cfg: &RelevancyConfig,
    query_id: &str,
) -> Result<RelevancyMap, QueryError> {
    let map = composite_map(field, cache, weights)?;
    Ok(relevancy(&map, q, canon, cfg, query_id, QueryMode::Composite, None))
}

/// The per-pixel scale-d embedding maps for every allowed dimension:
/// phi(u, s_d) = W (B_d ⊙ theta(u)), sharing one deferred theta render.
pub fn scale_maps(
    scene: &GaussianScene,
    field: &NestedField,
    weights: &CompositeWeightsMap,
    step_size: usize,
) -> Result<Vec<(usize, FeatureMap)>, QueryError> {
    let d = field.config.dim;
    let dmap = DimensionMap::new(d, step_size)
        .map_err(|e| QueryError::DimensionMismatch(e.to_string()))?;
    let means: Vec<_> = scene.gaussians.iter().map(|g| g.mean).collect();
    let theta_map = field.deferred_pixel_features(weights, &means)?;
    let npix = weights.width * weights.height;
    let mut out = Vec::new();
    for m in dmap.allowed_dims() {
        let mut map = FeatureMap::zeros(
            weights.width,
            weights.height,
            d,
            FeatureSemantics::CompositeEmbedding,
        );
        for pix in 0..npix {
            let theta = &theta_map.data[pix * d..(pix + 1) * d];
            let phi = crate::hierarchy::scale_aware_feature(theta, m, &field.w);
            map.data[pix * d..(pix + 1) * d].copy_from_slice(&phi);
        }
        out.push((m, map));
    }
    Ok(out)
}

/// Explicit scale search: one relevancy map per allowed dimension, keep the
/// scale whose map attains the global maximum relevancy.
pub fn explicit_scale_query(
    scene: &GaussianScene,
    field: &NestedField,
    weights: &CompositeWeightsMap,
    q: &[f64],
    canon: &CanonicalSet,
    cfg: &RelevancyConfig,
    step_size: usize,
    query_id: &str,
) -> Result<RelevancyMap, QueryError> {
    let maps = scale_maps(scene, field, weights, step_size)?;
    let mut best: Option<RelevancyMap> = None;
    for (m, map) in &maps {
        let r = relevancy(map, q, canon, cfg, query_id, QueryMode::Explicit, Some(*m));
        let better = match &best {
            None => true,
            Some(b) => r.max_value() > b.max_value(),
        };
        if better {
            best = Some(r);
        }
    }
    best.ok_or(QueryError::NoCandidates)
}

/// Oracle baseline: score every candidate map with the task metric and
/// return the best. Candidates typically include the per-scale maps and the
/// composite map, so the oracle dominates both by construction.
pub fn oracle_scale_query(
    candidates: Vec<RelevancyMap>,
    score: &dyn Fn(&RelevancyMap) -> f64,
) -> Result<RelevancyMap, QueryError> {
    let mut best: Option<(f64, RelevancyMap)> = None;
    for cand in candidates {
        let s = score(&cand);
        let better = match &best {
            None => true,
            Some((bs, _)) => s > *bs,
        };
        if better {
            best = Some((s, cand));
        }
    }
    best.map(|(_, mut m)| {
        m.mode = QueryMode::Oracle;
        m
    })
    .ok_or(QueryError::NoCandidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RelevancySidecar {
    query_id: String,
    mode: QueryMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    chosen_scale: Option<usize>,
    min: f64,
    max: f64,
}

/// Export as grayscale P5 PPM (min-max normalized) plus a sidecar JSON with
/// the provenance and the normalization range.
pub fn write_relevancy(map: &RelevancyMap, path: &Path) -> Result<(), QueryError> {
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        bytes.push((((v - min) / span).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)?;
    let sidecar = RelevancySidecar {
        query_id: map.query_id.clone(),
        mode: map.mode,
        chosen_scale: map.chosen_scale,
        min,
        max,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| QueryError::DimensionMismatch(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}
