//! CPU tile-based EWA splatting: RGB, expected depth and D-dimensional
//! feature maps over a frozen scene, plus the exact transpose pass for
//! feature gradients.
//!
//! Geometry is frozen during distillation, so feature rendering is a fixed
//! linear map: the per-pixel compositing weights are built once per view
//! and reused for every feature render and backward pass.

use crate::scene::{Camera, Gaussian, GaussianScene};
use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const TILE_SIZE: usize = 16;
/// Low-pass dilation added to every projected covariance.
pub const COV2D_DILATION: f64 = 0.3;
/// Opacity clamp, standard 3DGS practice.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Front-to-back compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Near plane for projection culling.
pub const NEAR_PLANE: f64 = 0.01;
/// Default coverage floor below which expected depth is invalid.
pub const DEPTH_COVERAGE_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A Gaussian projected into screen space.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub gaussian_index: usize,
}

impl Splat2D {
    /// 3-sigma screen-space radius.
    pub fn radius(&self) -> f64 {
        let c = self.cov2d;
        let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        3.0 * lambda_max.sqrt()
    }
}

/// EWA projection of one Gaussian. Returns `None` for Gaussians behind the
/// near plane or whose 3-sigma footprint misses the viewport.
pub fn project(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    let t = cam.world_to_camera(&g.mean);
    // The affine (EWA) projection breaks down once the camera plane cuts the
    // gaussian's 3-sigma support, so such splats are culled along with the
    // near plane.
    if t.z <= NEAR_PLANE.max(3.0 * g.scale.max()) {
        return None;
    }
    let inv_z = 1.0 / t.z;
    let mean2d = Vector2::new(cam.fx * t.x * inv_z + cam.cx, cam.fy * t.y * inv_z + cam.cy);
    let j = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    );
    let jw = j * cam.rotation;
    let cov2d = jw * g.covariance() * jw.transpose() + Matrix2::identity() * COV2D_DILATION;
    let splat = Splat2D { mean2d, cov2d, depth: t.z, gaussian_index: 0 };
    let r = splat.radius();
    if mean2d.x + r < 0.0
        || mean2d.y + r < 0.0
        || mean2d.x - r > cam.width as f64
        || mean2d.y - r > cam.height as f64
    {
        return None;
    }
    Some(splat)
}

/// Per-pixel alpha-compositing weights for one view: for every pixel an
/// ordered front-to-back list of (gaussian index, w = alpha * T), plus the
/// residual transmittance. By construction sum(w) + t_final = 1.
#[derive(Debug, Clone)]
pub struct CompositeWeightsMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<Vec<(usize, f64)>>,
    pub t_final: Vec<f64>,
    /// Camera depth of each gaussian that contributed anywhere, indexed by
    /// gaussian index (NaN if culled). Used by expected-depth rendering.
    pub depths: Vec<f64>,
}

impl CompositeWeightsMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[(usize, f64)] {
        &self.weights[y * self.width + x]
    }

    /// Total compositing weight at a pixel (1 - t_final).
    pub fn coverage(&self, x: usize, y: usize) -> f64 {
        self.pixel(x, y).iter().map(|&(_, w)| w).sum()
    }
}

fn composite_pixel(
    px: f64,
    py: f64,
    splats: &[&Splat2D],
    opacities: &[f64],
) -> (Vec<(usize, f64)>, f64) {
    let mut list = Vec::new();
    let mut t = 1.0;
    for s in splats {
        let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
        let c = s.cov2d;
        // cov2d is PD after dilation, so the determinant is positive.
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        debug_assert!(det > 0.0);
        let inv_det = 1.0 / det;
        let quad =
            (c[(1, 1)] * d.x * d.x - 2.0 * c[(0, 1)] * d.x * d.y + c[(0, 0)] * d.y * d.y) * inv_det;
        // Support is cut at 3 sigma, matching the tile binning footprint.
        if quad > 9.0 {
            continue;
        }
        let alpha = (opacities[s.gaussian_index] * (-0.5 * quad).exp()).min(ALPHA_CLAMP);
        if alpha < 1e-6 {
            continue;
        }
        list.push((s.gaussian_index, alpha * t));
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (list, t)
}

fn project_all(scene: &GaussianScene, cam: &Camera) -> (Vec<Splat2D>, Vec<f64>) {
    let mut splats = Vec::new();
    let mut depths = vec![f64::NAN; scene.len()];
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Some(mut s) = project(g, cam) {
            s.gaussian_index = i;
            depths[i] = s.depth;
            splats.push(s);
        }
    }
    (splats, depths)
}

/// Tile-based compositing-weight construction: splats binned by 3-sigma
/// footprint, sorted front-to-back per tile with ties broken by index.
pub fn composite_weights(scene: &GaussianScene, cam: &Camera) -> CompositeWeightsMap {
    let (splats, depths) = project_all(scene, cam);
    let opacities: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity).collect();
    let (w, h) = (cam.width, cam.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);

    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let r = s.radius();
        let x0 = ((s.mean2d.x - r).floor().max(0.0) as usize) / TILE_SIZE;
        let y0 = ((s.mean2d.y - r).floor().max(0.0) as usize) / TILE_SIZE;
        let x1 = (((s.mean2d.x + r).ceil() as usize).min(w.saturating_sub(1))) / TILE_SIZE;
        let y1 = (((s.mean2d.y + r).ceil() as usize).min(h.saturating_sub(1))) / TILE_SIZE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(si);
            }
        }
    }

    let mut weights = vec![Vec::new(); w * h];
    let mut t_final = vec![1.0; w * h];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &mut bins[ty * tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            let mut ordered: Vec<&Splat2D> = bin.iter().map(|&si| &splats[si]).collect();
            ordered.sort_by(|a, b| {
                a.depth
                    .partial_cmp(&b.depth)
                    .unwrap()
                    .then(a.gaussian_index.cmp(&b.gaussian_index))
            });
            for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let (list, t) = composite_pixel(
                        px as f64 + 0.5,
                        py as f64 + 0.5,
                        &ordered,
                        &opacities,
                    );
                    weights[py * w + px] = list;
                    t_final[py * w + px] = t;
                }
            }
        }
    }
    CompositeWeightsMap { width: w, height: h, weights, t_final, depths }
}

/// Reference renderer: full splat scan per pixel, no tiling. Used to check
/// the tiled path on small scenes.
pub fn composite_weights_naive(scene: &GaussianScene, cam: &Camera) -> CompositeWeightsMap {
    let (splats, depths) = project_all(scene, cam);
    let opacities: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity).collect();
    let mut ordered: Vec<&Splat2D> = splats.iter().collect();
    ordered.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    let (w, h) = (cam.width, cam.height);
    let mut weights = vec![Vec::new(); w * h];
    let mut t_final = vec![1.0; w * h];
    for py in 0..h {
        for px in 0..w {
            let (list, t) =
                composite_pixel(px as f64 + 0.5, py as f64 + 0.5, &ordered, &opacities);
            weights[py * w + px] = list;
            t_final[py * w + px] = t;
        }
    }
    CompositeWeightsMap { width: w, height: h, weights, t_final, depths }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSemantics {
    Rgb,
    Depth,
    FieldFeature,
    CompositeEmbedding,
    Gamma,
}

/// Dense per-pixel feature payload with channel semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub semantics: FeatureSemantics,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize, semantics: FeatureSemantics) -> Self {
        Self { width, height, dim, data: vec![0.0; width * height * dim], semantics }
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    /// PPM export for dim 1 (P5) or 3 (P6); values linearly mapped to
    /// [0,255] with min/max recorded in a sidecar JSON.
    pub fn write_ppm(&self, path: &Path) -> Result<(), RasterError> {
        if self.dim != 1 && self.dim != 3 {
            return Err(RasterError::DimensionMismatch(format!(
                "ppm export needs dim 1 or 3, map has {}",
                self.dim
            )));
        }
        let finite: Vec<f64> = self.data.iter().copied().filter(|v| v.is_finite()).collect();
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (min, max) = if finite.is_empty() { (0.0, 1.0) } else { (min, max) };
        let range = if max > min { max - min } else { 1.0 };
        let mut file = std::fs::File::create(path)?;
        let tag = if self.dim == 1 { "P5" } else { "P6" };
        write!(file, "{tag}\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    (((v - min) / range) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        file.write_all(&bytes)?;
        let sidecar = serde_json::json!({
            "width": self.width,
            "height": self.height,
            "dim": self.dim,
            "semantics": self.semantics,
            "min": min,
            "max": max,
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).unwrap(),
        )?;
        Ok(())
    }

    /// Raw f32 export with a JSON header, for general D.
    pub fn write_raw(&self, path: &Path) -> Result<(), RasterError> {
        let header = serde_json::json!({
            "width": self.width,
            "height": self.height,
            "dim": self.dim,
            "semantics": self.semantics,
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&header).unwrap(),
        )?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, &bytes)?;
        Ok(())
    }
}

/// Render per-Gaussian features into a pixel feature map: value(u) =
/// sum_i w_{u,i} F_i. Exactly linear in the features, no renormalization.
pub fn render_features(
    weights: &CompositeWeightsMap,
    features: &[f64],
    dim: usize,
    semantics: FeatureSemantics,
) -> Result<FeatureMap, RasterError> {
    if features.len() % dim != 0 {
        return Err(RasterError::DimensionMismatch(format!(
            "feature buffer of {} not divisible by dim {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    let mut map = FeatureMap::zeros(weights.width, weights.height, dim, semantics);
    for (pix, list) in weights.weights.iter().enumerate() {
        let out = &mut map.data[pix * dim..(pix + 1) * dim];
        for &(gi, w) in list {
            if gi >= n {
                return Err(RasterError::DimensionMismatch(format!(
                    "weight references gaussian {gi}, features have {n} rows"
                )));
            }
            let row = &features[gi * dim..(gi + 1) * dim];
            for (o, f) in out.iter_mut().zip(row) {
                *o += w * f;
            }
        }
    }
    Ok(map)
}

/// Expected depth per pixel with a validity bitmap.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub map: FeatureMap,
    pub valid: Vec<bool>,
}

/// Weight-normalized expected depth: sum(w_i d_i) / sum(w_i) where coverage
/// exceeds the floor; invalid pixels carry a NaN sentinel.
pub fn render_depth(weights: &CompositeWeightsMap, coverage_floor: f64) -> DepthMap {
    let mut map = FeatureMap::zeros(weights.width, weights.height, 1, FeatureSemantics::Depth);
    let mut valid = vec![false; weights.width * weights.height];
    for (pix, list) in weights.weights.iter().enumerate() {
        let mut wsum = 0.0;
        let mut dsum = 0.0;
        for &(gi, w) in list {
            wsum += w;
            dsum += w * weights.depths[gi];
        }
        if wsum > coverage_floor {
            map.data[pix] = dsum / wsum;
            valid[pix] = true;
        } else {
            map.data[pix] = f64::NAN;
        }
    }
    DepthMap { map, valid }
}

/// Exact transpose of `render_features`: grad[i] = sum_p w_{p,i} g_p.
pub fn backward_features(
    weights: &CompositeWeightsMap,
    pixel_gradients: &FeatureMap,
    gaussian_count: usize,
) -> Result<Vec<f64>, RasterError> {
    if pixel_gradients.width != weights.width || pixel_gradients.height != weights.height {
        return Err(RasterError::DimensionMismatch(format!(
            "gradient map {}x{} vs weights {}x{}",
            pixel_gradients.width, pixel_gradients.height, weights.width, weights.height
        )));
    }
    let dim = pixel_gradients.dim;
    let mut grad = vec![0.0; gaussian_count * dim];
    for (pix, list) in weights.weights.iter().enumerate() {
        let g = &pixel_gradients.data[pix * dim..(pix + 1) * dim];
        for &(gi, w) in list {
            if gi >= gaussian_count {
                return Err(RasterError::DimensionMismatch(format!(
                    "weight references gaussian {gi}, gradient has {gaussian_count} rows"
                )));
            }
            let row = &mut grad[gi * dim..(gi + 1) * dim];
            for (r, gv) in row.iter_mut().zip(g) {
                *r += w * gv;
            }
        }
    }
    Ok(grad)
}

/// Render the scene's base colors.
pub fn render_rgb(scene: &GaussianScene, weights: &CompositeWeightsMap) -> FeatureMap {
    let colors: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.color).collect();
    render_features(weights, &colors, 3, FeatureSemantics::Rgb).expect("color buffer matches scene")
}
