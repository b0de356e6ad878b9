//! The trainable nested feature field: three bilinear 2D grids feeding a
//! 3-layer MLP, a zero-initialized projection matrix, hand-rolled
//! reverse-mode gradients and an Adam update rule.

use crate::raster::{render_features, CompositeWeightsMap, FeatureMap, FeatureSemantics};
use crate::scene::Aabb;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 4] = b"NFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the three plane samples are combined into one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneCombine {
    /// Elementwise sum. The default: a zero-initialized product field
    /// would have zero gradients everywhere.
    Sum,
    /// Elementwise product, available for ablation.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Plane resolution R (grid is R x R).
    pub resolution: usize,
    /// Plane channels C.
    pub channels: usize,
    /// MLP hidden width H.
    pub hidden: usize,
    /// Output feature dimension D (also the projection side length).
    pub dim: usize,
    pub extent: Aabb,
    pub combine: PlaneCombine,
}

impl FieldConfig {
    /// Desk-scale default sizes for the given scene extent.
    pub fn desk_scale(extent: Aabb) -> Self {
        Self { resolution: 64, channels: 16, hidden: 64, dim: 64, extent, combine: PlaneCombine::Sum }
    }

    /// Full-size configuration (512 planes / 64 channels / 256 hidden / 512 out).
    pub fn full_scale(extent: Aabb) -> Self {
        Self { resolution: 512, channels: 64, hidden: 256, dim: 512, extent, combine: PlaneCombine::Sum }
    }
}

/// Three R x R x C grids on the (xy), (xz), (yz) planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    pub resolution: usize,
    pub channels: usize,
    pub planes: [Vec<f64>; 3],
    pub extent: Aabb,
}

/// Bilinear taps for one point on one plane.
#[derive(Debug, Clone, Copy)]
struct PlaneTap {
    texels: [usize; 4],
    weights: [f64; 4],
}

/// Cached sampling geometry plus per-plane sample values; means are fixed
/// during distillation so this is built once and reused every iteration.
#[derive(Debug, Clone)]
pub struct SampleCache {
    taps: Vec<[PlaneTap; 3]>,
    /// Per point, per plane, the sampled C-vector (needed for the product
    /// combination's gradient).
    plane_samples: Vec<[Vec<f64>; 3]>,
}

impl TriPlane {
    pub fn new(resolution: usize, channels: usize, extent: Aabb, rng: &mut ChaCha8Rng) -> Self {
        let n = resolution * resolution * channels;
        let mut plane = || (0..n).map(|_| rng.gen_range(-1e-4..1e-4)).collect::<Vec<f64>>();
        Self { resolution, channels, planes: [plane(), plane(), plane()], extent }
    }

    fn normalize_axis(&self, v: f64, axis: usize) -> f64 {
        let (lo, hi) = (self.extent.min[axis], self.extent.max[axis]);
        let span = hi - lo;
        if span <= 0.0 {
            return 0.5;
        }
        ((v - lo) / span).clamp(0.0, 1.0)
    }

    fn tap(&self, u: f64, v: f64) -> PlaneTap {
        let r = self.resolution;
        if r == 1 {
            return PlaneTap { texels: [0; 4], weights: [1.0, 0.0, 0.0, 0.0] };
        }
        let tu = u * (r - 1) as f64;
        let tv = v * (r - 1) as f64;
        let x0 = (tu.floor() as usize).min(r - 2);
        let y0 = (tv.floor() as usize).min(r - 2);
        let fx = tu - x0 as f64;
        let fy = tv - y0 as f64;
        PlaneTap {
            texels: [y0 * r + x0, y0 * r + x0 + 1, (y0 + 1) * r + x0, (y0 + 1) * r + x0 + 1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    fn point_taps(&self, p: &Vector3<f64>) -> [PlaneTap; 3] {
        let x = self.normalize_axis(p.x, 0);
        let y = self.normalize_axis(p.y, 1);
        let z = self.normalize_axis(p.z, 2);
        [self.tap(x, y), self.tap(x, z), self.tap(y, z)]
    }

    fn sample_plane(&self, plane: usize, tap: &PlaneTap, out: &mut [f64]) {
        let c = self.channels;
        out.fill(0.0);
        for (texel, w) in tap.texels.iter().zip(&tap.weights) {
            if *w == 0.0 {
                continue;
            }
            let row = &self.planes[plane][texel * c..texel * c + c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
}

/// Dense 3-layer MLP C -> H -> H -> D with ReLU on the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// Row-major H x C.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major H x H.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Row-major D x H.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

fn kaiming_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bound = (6.0 / cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// out += Wᵀ g
fn matvec_transpose_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, gv) in g.iter().enumerate() {
        if *gv == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * gv;
        }
    }
}

/// Intermediate activations for one MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpActivations {
    pub input: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

/// Parameter gradients for one MLP.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl MlpParams {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: kaiming_uniform(hidden, input, rng),
            b1: vec![0.0; hidden],
            w2: kaiming_uniform(hidden, hidden, rng),
            b2: vec![0.0; hidden],
            w3: kaiming_uniform(output, hidden, rng),
            b3: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpActivations) {
        let mut a1 = vec![0.0; self.hidden];
        matvec(&self.w1, &self.b1, x, &mut a1);
        for v in a1.iter_mut() {
            *v = v.max(0.0);
        }
        let mut a2 = vec![0.0; self.hidden];
        matvec(&self.w2, &self.b2, &a1, &mut a2);
        for v in a2.iter_mut() {
            *v = v.max(0.0);
        }
        let mut out = vec![0.0; self.output];
        matvec(&self.w3, &self.b3, &a2, &mut out);
        (out, MlpActivations { input: x.to_vec(), a1, a2 })
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&self, acts: &MlpActivations, dout: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        // Layer 3.
        for (r, g) in dout.iter().enumerate() {
            if *g != 0.0 {
                grads.b3[r] += g;
                let row = &mut grads.w3[r * self.hidden..(r + 1) * self.hidden];
                for (wv, av) in row.iter_mut().zip(&acts.a2) {
                    *wv += g * av;
                }
            }
        }
        let mut da2 = vec![0.0; self.hidden];
        matvec_transpose_acc(&self.w3, dout, &mut da2);
        for (d, a) in da2.iter_mut().zip(&acts.a2) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        // Layer 2.
        for (r, g) in da2.iter().enumerate() {
            if *g != 0.0 {
                grads.b2[r] += g;
                let row = &mut grads.w2[r * self.hidden..(r + 1) * self.hidden];
                for (wv, av) in row.iter_mut().zip(&acts.a1) {
                    *wv += g * av;
                }
            }
        }
        let mut da1 = vec![0.0; self.hidden];
        matvec_transpose_acc(&self.w2, &da2, &mut da1);
        for (d, a) in da1.iter_mut().zip(&acts.a1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        // Layer 1.
        for (r, g) in da1.iter().enumerate() {
            if *g != 0.0 {
                grads.b1[r] += g;
                let row = &mut grads.w1[r * self.input..(r + 1) * self.input];
                for (wv, av) in row.iter_mut().zip(&acts.input) {
                    *wv += g * av;
                }
            }
        }
        let mut din = vec![0.0; self.input];
        matvec_transpose_acc(&self.w1, &da1, &mut din);
        din
    }

    fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            w3: vec![0.0; self.w3.len()],
            b3: vec![0.0; self.b3.len()],
        }
    }
}

/// TriPlane + MLP + projection matrix: all trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedField {
    pub config: FieldConfig,
    pub triplane: TriPlane,
    pub mlp: MlpParams,
    /// Learnable projection, row-major D x D, zero-initialized.
    pub w: Vec<f64>,
}

impl NestedField {
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triplane = TriPlane::new(config.resolution, config.channels, config.extent, &mut rng);
        let mlp = MlpParams::new(config.channels, config.hidden, config.dim, &mut rng);
        let w = vec![0.0; config.dim * config.dim];
        Self { config, triplane, mlp, w }
    }

    /// Build the sampling cache for a fixed point set.
    pub fn cache_points(&self, points: &[Vector3<f64>]) -> SampleCache {
        let taps: Vec<[PlaneTap; 3]> = points.iter().map(|p| self.triplane.point_taps(p)).collect();
        let c = self.config.channels;
        let plane_samples = vec![[vec![0.0; c], vec![0.0; c], vec![0.0; c]]; points.len()];
        SampleCache { taps, plane_samples }
    }

    /// Sample the TriPlane at cached points. Refreshes the cached per-plane
    /// values, so call again after any plane update.
    pub fn sample_triplane_cached(&self, cache: &mut SampleCache) -> Vec<f64> {
        let c = self.config.channels;
        let mut out = vec![0.0; cache.taps.len() * c];
        for (i, taps) in cache.taps.iter().enumerate() {
            let samples = &mut cache.plane_samples[i];
            for p in 0..3 {
                self.triplane.sample_plane(p, &taps[p], &mut samples[p]);
            }
            let dst = &mut out[i * c..(i + 1) * c];
            match self.config.combine {
                PlaneCombine::Sum => {
                    for ch in 0..c {
                        dst[ch] = samples[0][ch] + samples[1][ch] + samples[2][ch];
                    }
                }
                PlaneCombine::Product => {
                    for ch in 0..c {
                        dst[ch] = samples[0][ch] * samples[1][ch] * samples[2][ch];
                    }
                }
            }
        }
        out
    }

    /// Per-point feature = combined bilinear samples of the three planes.
    pub fn sample_triplane(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        let mut cache = self.cache_points(points);
        self.sample_triplane_cached(&mut cache)
    }

    /// Scatter per-point feature gradients back to plane texels.
    pub fn triplane_backward(&self, cache: &SampleCache, dfeatures: &[f64], grads: &mut FieldGradients) {
        let c = self.config.channels;
        assert_eq!(dfeatures.len(), cache.taps.len() * c);
        for (i, taps) in cache.taps.iter().enumerate() {
            let dv = &dfeatures[i * c..(i + 1) * c];
            for p in 0..3 {
                let tap = &taps[p];
                for (texel, w) in tap.texels.iter().zip(&tap.weights) {
                    if *w == 0.0 {
                        continue;
                    }
                    let row = &mut grads.planes[p][texel * c..texel * c + c];
                    match self.config.combine {
                        PlaneCombine::Sum => {
                            for (g, d) in row.iter_mut().zip(dv) {
                                *g += w * d;
                            }
                        }
                        PlaneCombine::Product => {
                            let s = &cache.plane_samples[i];
                            let (oa, ob) = match p {
                                0 => (&s[1], &s[2]),
                                1 => (&s[0], &s[2]),
                                _ => (&s[0], &s[1]),
                            };
                            for ch in 0..c {
                                row[ch] += w * dv[ch] * oa[ch] * ob[ch];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Full per-point evaluation: MLP over the TriPlane sample.
    pub fn field_at(&self, points: &[Vector3<f64>]) -> Result<Vec<f64>, FieldError> {
        self.validate_finite()?;
        let feats = self.sample_triplane(points);
        let c = self.config.channels;
        let d = self.config.dim;
        let mut out = vec![0.0; points.len() * d];
        for i in 0..points.len() {
            let (o, _) = self.mlp.forward(&feats[i * c..(i + 1) * c]);
            out[i * d..(i + 1) * d].copy_from_slice(&o);
        }
        Ok(out)
    }

    /// Training-path pixel features: render the C-dim TriPlane features,
    /// then apply the MLP per pixel.
    pub fn deferred_pixel_features(
        &self,
        weights: &CompositeWeightsMap,
        means: &[Vector3<f64>],
    ) -> Result<FeatureMap, FieldError> {
        let tri = self.sample_triplane(means);
        let rendered = render_features(weights, &tri, self.config.channels, FeatureSemantics::FieldFeature)
            .map_err(|e| FieldError::DimensionMismatch(e.to_string()))?;
        let c = self.config.channels;
        let d = self.config.dim;
        let mut out = FeatureMap::zeros(weights.width, weights.height, d, FeatureSemantics::FieldFeature);
        let mut tri_pix = vec![0.0; c];
        for pix in 0..weights.width * weights.height {
            // Shade the coverage-normalized (expected) triplane feature, then
            // restore the coverage factor outside the nonlinearity; this
            // matches per-Gaussian compositing exactly wherever a single
            // Gaussian dominates the pixel.
            let coverage: f64 = weights.weights[pix].iter().map(|&(_, w)| w).sum();
            if coverage <= 1e-12 {
                continue;
            }
            for (t, r) in tri_pix.iter_mut().zip(&rendered.data[pix * c..(pix + 1) * c]) {
                *t = r / coverage;
            }
            let (o, _) = self.mlp.forward(&tri_pix);
            for (dst, v) in out.data[pix * d..(pix + 1) * d].iter_mut().zip(&o) {
                *dst = coverage * v;
            }
        }
        Ok(out)
    }

    /// Test-path pixel features: evaluate the MLP per Gaussian, then render
    /// the full D-dim features.
    pub fn per_gaussian_pixel_features(
        &self,
        weights: &CompositeWeightsMap,
        means: &[Vector3<f64>],
    ) -> Result<FeatureMap, FieldError> {
        let feats = self.field_at(means)?;
        render_features(weights, &feats, self.config.dim, FeatureSemantics::FieldFeature)
            .map_err(|e| FieldError::DimensionMismatch(e.to_string()))
    }

    pub fn validate_finite(&self) -> Result<(), FieldError> {
        let check = |name: &str, data: &[f64]| {
            match data.iter().position(|v| !v.is_finite()) {
                Some(i) => Err(FieldError::NonFinite(format!("{name}[{i}]"))),
                None => Ok(()),
            }
        };
        check("plane_xy", &self.triplane.planes[0])?;
        check("plane_xz", &self.triplane.planes[1])?;
        check("plane_yz", &self.triplane.planes[2])?;
        check("mlp.w1", &self.mlp.w1)?;
        check("mlp.b1", &self.mlp.b1)?;
        check("mlp.w2", &self.mlp.w2)?;
        check("mlp.b2", &self.mlp.b2)?;
        check("mlp.w3", &self.mlp.w3)?;
        check("mlp.b3", &self.mlp.b3)?;
        check("projection", &self.w)?;
        Ok(())
    }

    /// Apply the projection: out = W x.
    pub fn project_feature(&self, x: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        let mut out = vec![0.0; d];
        for r in 0..d {
            let row = &self.w[r * d..(r + 1) * d];
            out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Cheap content checksum used to detect stale query caches.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut mix = |v: f64| {
            let bits = (v as f32).to_bits() as u64;
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.triplane.planes {
            for &v in p {
                mix(v);
            }
        }
        for buf in [&self.mlp.w1, &self.mlp.b1, &self.mlp.w2, &self.mlp.b2, &self.mlp.w3, &self.mlp.b3, &self.w] {
            for &v in buf.iter() {
                mix(v);
            }
        }
        h
    }
}

/// Parameter gradients mirroring a `NestedField`.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub planes: [Vec<f64>; 3],
    pub mlp: MlpGrads,
    pub w: Vec<f64>,
}

impl FieldGradients {
    pub fn zeros_like(field: &NestedField) -> Self {
        let n = field.triplane.planes[0].len();
        Self {
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            mlp: field.mlp.zero_grads(),
            w: vec![0.0; field.w.len()],
        }
    }

    pub fn clear(&mut self) {
        for p in &mut self.planes {
            p.fill(0.0);
        }
        for buf in [
            &mut self.mlp.w1,
            &mut self.mlp.b1,
            &mut self.mlp.w2,
            &mut self.mlp.b2,
            &mut self.mlp.w3,
            &mut self.mlp.b3,
            &mut self.w,
        ] {
            buf.fill(0.0);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.planes.iter().all(|p| p.iter().all(|&v| v == 0.0))
            && [&self.mlp.w1, &self.mlp.b1, &self.mlp.w2, &self.mlp.b2, &self.mlp.w3, &self.mlp.b3, &self.w]
                .iter()
                .all(|b| b.iter().all(|&v| v == 0.0))
    }
}

/// Per-parameter-group learning rates. The TriPlane rate scales with the
/// scene extent; the MLP and projection share a rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub triplane: f64,
    pub mlp: f64,
    pub projection: f64,
}

impl LearningRates {
    pub fn defaults(scene_extent: f64) -> Self {
        Self { triplane: 0.0016 * scene_extent, mlp: 0.00125, projection: 0.00125 }
    }
}

/// Adam with bias correction; beta = (0.9, 0.999), eps = 1e-15.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: FieldGradients,
    v: FieldGradients,
}

impl Adam {
    pub fn new(field: &NestedField) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: FieldGradients::zeros_like(field),
            v: FieldGradients::zeros_like(field),
        }
    }

    fn update_buf(
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        t: usize,
    ) {
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// One optimizer step. Zero gradients leave parameters untouched.
    pub fn apply_update(&mut self, field: &mut NestedField, grads: &FieldGradients, lr: &LearningRates) {
        if grads.is_all_zero() {
            return;
        }
        self.step += 1;
        let (b1, b2, eps, t) = (self.beta1, self.beta2, self.eps, self.step);
        for p in 0..3 {
            Self::update_buf(
                &mut field.triplane.planes[p],
                &grads.planes[p],
                &mut self.m.planes[p],
                &mut self.v.planes[p],
                lr.triplane,
                b1,
                b2,
                eps,
                t,
            );
        }
        let pairs: [(&mut Vec<f64>, &Vec<f64>, &mut Vec<f64>, &mut Vec<f64>); 6] = [
            (&mut field.mlp.w1, &grads.mlp.w1, &mut self.m.mlp.w1, &mut self.v.mlp.w1),
            (&mut field.mlp.b1, &grads.mlp.b1, &mut self.m.mlp.b1, &mut self.v.mlp.b1),
            (&mut field.mlp.w2, &grads.mlp.w2, &mut self.m.mlp.w2, &mut self.v.mlp.w2),
            (&mut field.mlp.b2, &grads.mlp.b2, &mut self.m.mlp.b2, &mut self.v.mlp.b2),
            (&mut field.mlp.w3, &grads.mlp.w3, &mut self.m.mlp.w3, &mut self.v.mlp.w3),
            (&mut field.mlp.b3, &grads.mlp.b3, &mut self.m.mlp.b3, &mut self.v.mlp.b3),
        ];
        for (param, grad, m, v) in pairs {
            Self::update_buf(param, grad, m, v, lr.mlp, b1, b2, eps, t);
        }
        Self::update_buf(&mut field.w, &grads.w, &mut self.m.w, &mut self.v.w, lr.projection, b1, b2, eps, t);
    }
}

fn push_f32s(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Write the field as a binary "NFCK" checkpoint.
pub fn save_checkpoint(field: &NestedField, path: &Path) -> Result<(), FieldError> {
    let c = &field.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.resolution as u32).to_le_bytes());
    buf.extend_from_slice(&(c.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(c.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(c.dim as u32).to_le_bytes());
    for v in c.extent.min.iter().chain(c.extent.max.iter()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf.push(match c.combine {
        PlaneCombine::Sum => 0,
        PlaneCombine::Product => 1,
    });
    for p in &field.triplane.planes {
        push_f32s(&mut buf, p);
    }
    for data in [&field.mlp.w1, &field.mlp.b1, &field.mlp.w2, &field.mlp.b2, &field.mlp.w3, &field.mlp.b3] {
        push_f32s(&mut buf, data);
    }
    push_f32s(&mut buf, &field.w);
    std::fs::write(path, &buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        if self.off + n > self.bytes.len() {
            return Err(FieldError::MalformedCheckpoint(format!(
                "truncated at offset {} (want {n} more bytes of {})",
                self.off,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, FieldError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FieldError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Load an "NFCK" checkpoint, validating the shape chain.
pub fn load_checkpoint(path: &Path) -> Result<NestedField, FieldError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, off: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(FieldError::MalformedCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FieldError::VersionMismatch(version));
    }
    let resolution = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let hidden = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let mut ext = [0.0f64; 6];
    for v in ext.iter_mut() {
        *v = cur.f32()?;
    }
    let combine = match cur.take(1)?[0] {
        0 => PlaneCombine::Sum,
        1 => PlaneCombine::Product,
        other => {
            return Err(FieldError::MalformedCheckpoint(format!(
                "unknown combine mode {other}"
            )))
        }
    };
    let config = FieldConfig {
        resolution,
        channels,
        hidden,
        dim,
        extent: Aabb { min: [ext[0], ext[1], ext[2]], max: [ext[3], ext[4], ext[5]] },
        combine,
    };
    let plane_len = resolution * resolution * channels;
    let planes = [cur.f32s(plane_len)?, cur.f32s(plane_len)?, cur.f32s(plane_len)?];
    let mlp = MlpParams {
        input: channels,
        hidden,
        output: dim,
        w1: cur.f32s(hidden * channels)?,
        b1: cur.f32s(hidden)?,
        w2: cur.f32s(hidden * hidden)?,
        b2: cur.f32s(hidden)?,
        w3: cur.f32s(dim * hidden)?,
        b3: cur.f32s(dim)?,
    };
    let w = cur.f32s(dim * dim)?;
    if cur.off != bytes.len() {
        return Err(FieldError::MalformedCheckpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.off
        )));
    }
    Ok(NestedField {
        config,
        triplane: TriPlane { resolution, channels, planes, extent: config.extent },
        mlp,
        w,
    })
}
