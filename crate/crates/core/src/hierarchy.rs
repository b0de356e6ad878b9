//! Scale-aware hierarchical supervision: segment lifting, scale extraction
//! and quantile quantization, the dimension-scale mapping with step-size,
//! the masked scale-aware projection, segment sampling, the hierarchical
//! loss and the distillation training loop.

use crate::field::{Adam, FieldGradients, LearningRates, NestedField};
use crate::raster::{CompositeWeightsMap, DepthMap};
use crate::scene::{Camera, GaussianScene};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("degenerate segment: only {0} pixels with valid depth (need 3)")]
    DegenerateSegment(usize),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("loss became non-finite at iteration {0}")]
    NanLoss(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("field error: {0}")]
    Field(#[from] crate::field::FieldError),
}

/// Run-length-encoded pixel set over row-major pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// (start, length) pairs, sorted, non-overlapping.
    pub runs: Vec<(u32, u32)>,
}

impl RleMask {
    pub fn from_bitmap(bits: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < bits.len() {
            if bits[i] {
                let start = i;
                while i < bits.len() && bits[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        Self { runs }
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|&(_, l)| l as usize).sum()
    }

    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs
            .iter()
            .flat_map(|&(s, l)| (s as usize)..(s as usize + l as usize))
    }

    pub fn to_bitmap(&self, len: usize) -> Vec<bool> {
        let mut bits = vec![false; len];
        for p in self.pixels() {
            if p < len {
                bits[p] = true;
            }
        }
        bits
    }

    pub fn contains(&self, pixel: usize) -> bool {
        let p = pixel as u32;
        self.runs
            .binary_search_by(|&(s, l)| {
                if p < s {
                    std::cmp::Ordering::Greater
                } else if p >= s + l {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }
}

/// One class-agnostic 2D segment with its lifted scale and teacher vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub view_id: usize,
    pub mask: RleMask,
    pub area: usize,
    pub raw_scale: f64,
    /// Quantized scale in [0,1), a multiple of 1/D.
    pub quantized_scale: f64,
    pub teacher: Vec<f64>,
}

/// Unproject each valid-depth mask pixel into world space.
pub fn lift_segment(
    mask: &RleMask,
    depth: &DepthMap,
    cam: &Camera,
) -> Result<Vec<Vector3<f64>>, HierarchyError> {
    let mut points = Vec::new();
    for pix in mask.pixels() {
        if pix >= depth.valid.len() || !depth.valid[pix] {
            continue;
        }
        let z = depth.map.data[pix];
        let x = (pix % cam.width) as f64 + 0.5;
        let y = (pix / cam.width) as f64 + 0.5;
        let p_cam = Vector3::new((x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z);
        points.push(cam.camera_to_world(&p_cam));
    }
    if points.len() < 3 {
        return Err(HierarchyError::DegenerateSegment(points.len()));
    }
    Ok(points)
}

/// Largest eigenvalue of the 3x3 sample covariance (denominator n).
pub fn segment_scale(points: &[Vector3<f64>]) -> Result<f64, HierarchyError> {
    if points.len() < 3 {
        return Err(HierarchyError::EmptyInput(format!(
            "segment_scale needs >= 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let max = cov.symmetric_eigenvalues().iter().copied().fold(0.0f64, f64::max);
    Ok(max.max(0.0))
}

/// Quantile quantizer over raw scales: D balanced rank bins, s = b/D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleQuantizer {
    pub dim: usize,
    /// D+1 non-decreasing boundaries; boundary[b] is the smallest raw
    /// scale assigned to bin b during fitting.
    pub boundaries: Vec<f64>,
}

impl ScaleQuantizer {
    /// Fit D balanced bins by rank, ties broken by insertion order.
    /// Returns the quantizer and the per-input bin assignment.
    pub fn fit(raw_scales: &[f64], dim: usize) -> Result<(Self, Vec<usize>), HierarchyError> {
        if raw_scales.is_empty() {
            return Err(HierarchyError::EmptyInput("quantizer needs at least one scale".into()));
        }
        if dim == 0 {
            return Err(HierarchyError::Config("quantizer dim must be >= 1".into()));
        }
        let n = raw_scales.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort: equal values keep insertion order, which makes the
        // all-equal case fill bins round-robin.
        order.sort_by(|&a, &b| raw_scales[a].partial_cmp(&raw_scales[b]).unwrap());
        let mut bins = vec![0usize; n];
        let mut first_of_bin = vec![f64::INFINITY; dim];
        for (rank, &idx) in order.iter().enumerate() {
            let b = rank * dim / n;
            bins[idx] = b;
            first_of_bin[b] = first_of_bin[b].min(raw_scales[idx]);
        }
        let lo = raw_scales[order[0]];
        let hi = raw_scales[order[n - 1]];
        let mut boundaries = vec![lo; dim + 1];
        let mut prev = lo;
        for b in 0..dim {
            if first_of_bin[b].is_finite() {
                prev = first_of_bin[b];
            }
            boundaries[b] = prev;
        }
        boundaries[dim] = hi;
        Ok((Self { dim, boundaries }, bins))
    }

    /// Bin for a (possibly unseen) raw scale: the last bin whose lower
    /// boundary does not exceed it.
    pub fn bin(&self, raw_scale: f64) -> usize {
        let mut b = 0;
        for cand in 1..self.dim {
            if self.boundaries[cand] <= raw_scale {
                b = cand;
            } else {
                break;
            }
        }
        b
    }

    /// Quantized scale s = b/D (left bin edge).
    pub fn quantize(&self, raw_scale: f64) -> f64 {
        self.bin(raw_scale) as f64 / self.dim as f64
    }

    pub fn scale_of_bin(&self, b: usize) -> f64 {
        b as f64 / self.dim as f64
    }
}

/// The scale-to-dimension mapping M(s) with the step-size variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionMap {
    pub dim: usize,
    pub step_size: usize,
}

impl DimensionMap {
    pub fn new(dim: usize, step_size: usize) -> Result<Self, HierarchyError> {
        if step_size < 1 || step_size > dim {
            return Err(HierarchyError::Config(format!(
                "step size must satisfy 1 <= k <= D, got k={step_size}, D={dim}"
            )));
        }
        Ok(Self { dim, step_size })
    }

    /// Active dimension M(s) = ceil(D*(1-s)), snapped down to the nearest
    /// multiple of the step size (minimum k) when k > 1.
    pub fn dim_for_scale(&self, s: f64) -> usize {
        let d = self.dim;
        let target = ((d as f64) * (1.0 - s)).ceil() as usize;
        let target = target.clamp(1, d);
        if self.step_size == 1 {
            return target;
        }
        let k = self.step_size;
        let max_allowed = k * (d / k);
        ((target / k) * k).clamp(k, max_allowed)
    }

    /// The allowed dimensions {k, 2k, ..., k*floor(D/k)}.
    pub fn allowed_dims(&self) -> Vec<usize> {
        let k = self.step_size;
        (1..=self.dim / k).map(|m| m * k).collect()
    }
}

/// phi = W (B(s) ⊙ theta): the first M entries of theta through the first
/// M columns of W. theta and phi are deliberately not normalized.
pub fn scale_aware_feature(theta: &[f64], active_dim: usize, w: &[f64]) -> Vec<f64> {
    let d = theta.len();
    debug_assert_eq!(w.len(), d * d);
    let m = active_dim.min(d);
    let mut phi = vec![0.0; d];
    for (r, out) in phi.iter_mut().enumerate() {
        let row = &w[r * d..r * d + m];
        *out = row.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum();
    }
    phi
}

/// Per-segment sampling weight: inversely proportional to log(area),
/// with areas floored at 2 so the log stays positive.
pub fn segment_weight(area: usize) -> f64 {
    1.0 / (area.max(2) as f64).ln()
}

/// Pixel/segment batch sampler over the union of all training views.
pub struct BatchSampler {
    view_dims: Vec<(usize, usize)>,
    /// Per view, per pixel, indices of the segments covering it.
    covers: Vec<Vec<Vec<u32>>>,
    total_pixels: usize,
}

/// One training sample: a pixel and the segment supervising it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSample {
    pub view: usize,
    pub pixel: usize,
    pub segment: usize,
}

impl BatchSampler {
    pub fn new(view_dims: &[(usize, usize)], segments: &[SegmentRecord]) -> Self {
        let mut covers: Vec<Vec<Vec<u32>>> =
            view_dims.iter().map(|&(w, h)| vec![Vec::new(); w * h]).collect();
        for (si, seg) in segments.iter().enumerate() {
            let view_cover = &mut covers[seg.view_id];
            for pix in seg.mask.pixels() {
                if pix < view_cover.len() {
                    view_cover[pix].push(si as u32);
                }
            }
        }
        let total_pixels = view_dims.iter().map(|&(w, h)| w * h).sum();
        Self { view_dims: view_dims.to_vec(), covers, total_pixels }
    }

    /// Draw one sample: pixel uniform over the union of all images, then a
    /// covering segment with weight 1/log(area). Uncovered pixels are
    /// resampled a bounded number of times.
    pub fn sample_one(&self, segments: &[SegmentRecord], rng: &mut ChaCha8Rng) -> Option<BatchSample> {
        const MAX_RETRIES: usize = 64;
        for _ in 0..MAX_RETRIES {
            let mut flat = rng.gen_range(0..self.total_pixels);
            let mut view = 0;
            while flat >= self.view_dims[view].0 * self.view_dims[view].1 {
                flat -= self.view_dims[view].0 * self.view_dims[view].1;
                view += 1;
            }
            let candidates = &self.covers[view][flat];
            if candidates.is_empty() {
                continue;
            }
            if candidates.len() == 1 {
                return Some(BatchSample { view, pixel: flat, segment: candidates[0] as usize });
            }
            let weights: Vec<f64> =
                candidates.iter().map(|&si| segment_weight(segments[si as usize].area)).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen_range(0.0..total);
            for (ci, &w) in weights.iter().enumerate() {
                if draw < w || ci == weights.len() - 1 {
                    return Some(BatchSample { view, pixel: flat, segment: candidates[ci] as usize });
                }
                draw -= w;
            }
        }
        None
    }

    pub fn sample_batch(
        &self,
        segments: &[SegmentRecord],
        pixels_per_step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<BatchSample> {
        (0..pixels_per_step)
            .filter_map(|_| self.sample_one(segments, rng))
            .collect()
    }
}

/// L2 + lambda * cosine distance, with the cosine term gated off near
/// ||phi|| = 0. The gate is load-bearing: W is zero-initialized, so phi is
/// exactly zero at the first step.
pub fn hierarchical_loss(phi: &[f64], phi_gt: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    debug_assert_eq!(phi.len(), phi_gt.len());
    let mut l2 = 0.0;
    let mut grad: Vec<f64> = Vec::with_capacity(phi.len());
    for (a, b) in phi.iter().zip(phi_gt) {
        let d = a - b;
        l2 += d * d;
        grad.push(2.0 * d);
    }
    let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gt_norm = phi_gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut loss = l2;
    if norm >= 1e-8 && gt_norm >= 1e-8 && lambda != 0.0 {
        let dot: f64 = phi.iter().zip(phi_gt).map(|(a, b)| a * b).sum();
        let cos = dot / (norm * gt_norm);
        loss += lambda * (1.0 - cos);
        // d(1-cos)/dphi = -(gt/(|phi||gt|) - dot*phi/(|phi|^3 |gt|))
        let inv = 1.0 / (norm * gt_norm);
        let k = dot / (norm * norm);
        for i in 0..phi.len() {
            grad[i] += lambda * (-(phi_gt[i] - k * phi[i]) * inv);
        }
    }
    (loss, grad)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Pixels per optimizer step.
    pub batch_size: usize,
    /// Weight of the cosine term.
    pub lambda: f64,
    pub learning_rates: LearningRates,
    pub step_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(scene_extent: f64) -> Self {
        Self {
            iterations: 30_000,
            batch_size: 128,
            lambda: 0.001,
            learning_rates: LearningRates::defaults(scene_extent),
            step_size: 1,
            seed: 0,
        }
    }
}

/// One training view: a camera with its cached compositing weights.
pub struct TrainView {
    pub camera: Camera,
    pub weights: CompositeWeightsMap,
}

/// Distill the teacher embeddings into the field. Returns the per-iteration
/// mean batch loss.
pub fn train(
    scene: &GaussianScene,
    views: &[TrainView],
    segments: &[SegmentRecord],
    field: &mut NestedField,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, HierarchyError> {
    if segments.is_empty() {
        return Err(HierarchyError::EmptyInput("no segments to train on".into()));
    }
    let dmap = DimensionMap::new(field.config.dim, cfg.step_size)?;
    let d = field.config.dim;
    let c = field.config.channels;
    let n = scene.len();
    let means: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.mean).collect();
    let mut cache = field.cache_points(&means);
    let view_dims: Vec<(usize, usize)> =
        views.iter().map(|v| (v.weights.width, v.weights.height)).collect();
    let sampler = BatchSampler::new(&view_dims, segments);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(field);
    let mut grads = FieldGradients::zeros_like(field);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let batch = sampler.sample_batch(segments, cfg.batch_size, &mut rng);
        if batch.is_empty() {
            trace.push(0.0);
            continue;
        }
        grads.clear();
        // Gaussian means are fixed: one TriPlane sweep per iteration.
        let tri = field.sample_triplane_cached(&mut cache);
        let mut dtri = vec![0.0; n * c];
        let mut batch_loss = 0.0;

        for sample in &batch {
            let seg = &segments[sample.segment];
            let weights = &views[sample.view].weights;
            let list = &weights.weights[sample.pixel];
            // Deferred path: composite the C-dim features, then the MLP.
            let mut theta_c = vec![0.0; c];
            for &(gi, w) in list {
                let row = &tri[gi * c..(gi + 1) * c];
                for (t, f) in theta_c.iter_mut().zip(row) {
                    *t += w * f;
                }
            }
            let (theta_d, acts) = field.mlp.forward(&theta_c);
            let m = dmap.dim_for_scale(seg.quantized_scale);
            let phi = scale_aware_feature(&theta_d, m, &field.w);
            let (loss, dphi) = hierarchical_loss(&phi, &seg.teacher, cfg.lambda);
            batch_loss += loss;

            // Backward through the masked projection.
            let mut dtheta_d = vec![0.0; d];
            for (r, g) in dphi.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let wrow = &field.w[r * d..r * d + m];
                let grow = &mut grads.w[r * d..r * d + m];
                for col in 0..m {
                    grow[col] += g * theta_d[col];
                    dtheta_d[col] += wrow[col] * g;
                }
            }
            let dtheta_c = field.mlp.backward(&acts, &dtheta_d, &mut grads.mlp);
            for &(gi, w) in list {
                let row = &mut dtri[gi * c..(gi + 1) * c];
                for (t, g) in row.iter_mut().zip(&dtheta_c) {
                    *t += w * g;
                }
            }
        }
        field.triplane_backward(&cache, &dtri, &mut grads);

        let mean_loss = batch_loss / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(HierarchyError::NanLoss(iter));
        }
        trace.push(mean_loss);
        adam.apply_update(field, &grads, &cfg.learning_rates);
    }
    Ok(trace)
}
