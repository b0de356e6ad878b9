//! Dataset plumbing: segment/embedding/query files and the synthetic
//! harness that stands in for a SAM+CLIP preprocessing pipeline — exact
//! hierarchy-node silhouette masks with fixed random unit teacher vectors.

use crate::hierarchy::{
    lift_segment, segment_scale, RleMask, ScaleQuantizer, SegmentRecord, TrainView,
};
use crate::query::CanonicalSet;
use crate::raster::{composite_weights, render_depth, CompositeWeightsMap, DEPTH_COVERAGE_FLOOR};
use crate::scene::{Aabb, Camera, GaussianScene, HierarchyAnnotation, HierarchyLevel};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported version {0} (expected {1})")]
    VersionMismatch(u32, u32),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("malformed line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("reference out of range: {0}")]
    BadReference(String),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Embeddings file: "NFEB", u32 version, u32 D, u64 count, count x D f32 rows.

const EMBED_MAGIC: &[u8; 4] = b"NFEB";
const EMBED_VERSION: u32 = 1;

pub fn save_embeddings(rows: &[Vec<f64>], dim: usize, path: &Path) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(20 + rows.len() * dim * 4);
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for row in rows {
        if row.len() != dim {
            return Err(DatasetError::Invalid(format!(
                "embedding row of {} values in a D={dim} file",
                row.len()
            )));
        }
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(usize, Vec<Vec<f64>>), DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 {
        return Err(DatasetError::TruncatedPayload(format!(
            "file is {} bytes, header needs 20",
            bytes.len()
        )));
    }
    if &bytes[0..4] != EMBED_MAGIC {
        return Err(DatasetError::MalformedHeader(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(DatasetError::VersionMismatch(version, EMBED_VERSION));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = 20 + count * dim * 4;
    if bytes.len() != expected {
        return Err(DatasetError::TruncatedPayload(format!(
            "expected {expected} bytes for {count} x {dim}, got {}",
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    let mut off = 20;
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        rows.push(row);
    }
    Ok((dim, rows))
}

// ---------------------------------------------------------------------------
// Segments file: JSON-lines, one segment per line, mask as RLE runs,
// embedding as an index into an embeddings file.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLine {
    pub view_id: usize,
    pub area: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_scale: Option<f64>,
    pub mask: RleMask,
    /// Row index into the companion embeddings file.
    pub embedding: usize,
}

pub fn save_segments(lines: &[SegmentLine], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("segment line serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_segments(path: &Path) -> Result<Vec<SegmentLine>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| DatasetError::MalformedLine(i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

/// Join segment lines with their teacher embeddings and quantize the raw
/// scales into D balanced bins. Lines without a raw scale are rejected.
pub fn segments_to_records(
    lines: &[SegmentLine],
    embeddings: &[Vec<f64>],
    dim: usize,
) -> Result<Vec<SegmentRecord>, DatasetError> {
    let mut raw = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        let s = l.raw_scale.ok_or_else(|| {
            DatasetError::Invalid(format!("segment line {} has no raw_scale", i + 1))
        })?;
        raw.push(s);
        if l.embedding >= embeddings.len() {
            return Err(DatasetError::BadReference(format!(
                "segment line {} references embedding {} of {}",
                i + 1,
                l.embedding,
                embeddings.len()
            )));
        }
    }
    let (quantizer, bins) = ScaleQuantizer::fit(&raw, dim)
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    Ok(lines
        .iter()
        .enumerate()
        .map(|(i, l)| SegmentRecord {
            view_id: l.view_id,
            mask: l.mask.clone(),
            area: l.area,
            raw_scale: raw[i],
            quantized_scale: quantizer.scale_of_bin(bins[i]),
            teacher: embeddings[l.embedding].clone(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Query file: JSON-lines {query_id, embedding_ref | inline vector,
// gt_mask_ref?, gt_box?}.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLine {
    pub query_id: String,
    pub view_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<usize>,
    /// Index of the ground-truth segment in the segments file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_ref: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<[usize; 4]>,
}

impl QueryLine {
    pub fn resolve_embedding(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>, DatasetError> {
        if let Some(v) = &self.embedding {
            return Ok(v.clone());
        }
        let idx = self.embedding_ref.ok_or_else(|| {
            DatasetError::Invalid(format!(
                "query '{}' has neither an inline embedding nor a reference",
                self.query_id
            ))
        })?;
        embeddings
            .get(idx)
            .cloned()
            .ok_or_else(|| DatasetError::BadReference(format!("embedding {idx}")))
    }
}

pub fn save_queries(lines: &[QueryLine], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("query line serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryLine>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| DatasetError::MalformedLine(i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic harness.

/// Evenly spaced orbit cameras around the scene, all looking at its center.
pub fn orbit_cameras(
    extent: &Aabb,
    count: usize,
    size: usize,
    phase: f64,
) -> Vec<Camera> {
    let center = extent.center();
    let dist = 1.5 * extent.diagonal().max(1.0);
    (0..count)
        .map(|i| {
            let angle = phase + i as f64 / count as f64 * std::f64::consts::TAU;
            let eye = center + Vector3::new(angle.cos() * dist, angle.sin() * dist, -0.6 * dist);
            Camera::look_at(
                eye,
                center,
                Vector3::new(0.0, 0.0, -1.0),
                size as f64 * 0.8,
                size as f64 * 0.8,
                size,
                size,
            )
        })
        .collect()
}

/// One fixed random unit vector per hierarchy node, sequentially
/// orthogonalized while the node count fits in the embedding dimension.
pub fn node_teachers(annotations: &[HierarchyAnnotation], dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teachers: Vec<Vec<f64>> = Vec::with_capacity(annotations.len());
    for i in 0..annotations.len() {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if i < dim {
                for prev in &teachers {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (x, p) in v.iter_mut().zip(prev) {
                        *x -= dot * p;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                teachers.push(v);
                break;
            }
        }
    }
    teachers
}

/// Silhouette of one hierarchy node: a pixel belongs to the node when the
/// node's Gaussians contribute more than half the compositing mass budget.
pub fn node_mask(weights: &CompositeWeightsMap, members: &[usize]) -> RleMask {
    let member_set: std::collections::HashSet<usize> = members.iter().copied().collect();
    let npix = weights.width * weights.height;
    let mut bits = vec![false; npix];
    for (pix, bit) in bits.iter_mut().enumerate() {
        let covered: f64 = weights.weights[pix]
            .iter()
            .filter(|(gi, _)| member_set.contains(gi))
            .map(|&(_, w)| w)
            .sum();
        *bit = covered > 0.5;
    }
    RleMask::from_bitmap(&bits)
}

/// Canonical vectors: the normalized mean teacher per hierarchy level,
/// labeled coarse-to-fine.
pub fn level_canonicals(
    annotations: &[HierarchyAnnotation],
    teachers: &[Vec<f64>],
) -> Result<CanonicalSet, DatasetError> {
    let dim = teachers.first().map(|t| t.len()).unwrap_or(0);
    let levels = [
        (HierarchyLevel::Group, "stuff"),
        (HierarchyLevel::Object, "object"),
        (HierarchyLevel::Part, "part"),
    ];
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for (level, label) in levels {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for (a, t) in annotations.iter().zip(teachers) {
            if a.level == level {
                for (m, v) in mean.iter_mut().zip(t) {
                    *m += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        for m in mean.iter_mut() {
            *m /= norm;
        }
        labels.push(label.to_string());
        vectors.push(mean);
    }
    CanonicalSet::new(labels, vectors).map_err(|e| DatasetError::Invalid(e.to_string()))
}

/// Everything the trainer needs for one set of views, plus the raw segment
/// lines so the artifacts can be written to disk.
pub struct BuiltDataset {
    pub views: Vec<TrainView>,
    pub records: Vec<SegmentRecord>,
    pub lines: Vec<SegmentLine>,
    /// node index (into annotations/teachers) per segment line.
    pub segment_nodes: Vec<usize>,
    pub quantizer: ScaleQuantizer,
}

/// Render every view, cut node silhouettes, lift them through the expected
/// depth, and quantize the resulting scales into D balanced bins.
pub fn build_dataset(
    scene: &GaussianScene,
    annotations: &[HierarchyAnnotation],
    teachers: &[Vec<f64>],
    cameras: Vec<Camera>,
    dim: usize,
) -> Result<BuiltDataset, DatasetError> {
    let mut views = Vec::with_capacity(cameras.len());
    let mut lines = Vec::new();
    let mut segment_nodes = Vec::new();
    let mut raw_scales = Vec::new();
    for (view_id, cam) in cameras.into_iter().enumerate() {
        let weights = composite_weights(scene, &cam);
        let depth = render_depth(&weights, DEPTH_COVERAGE_FLOOR);
        for (node_idx, ann) in annotations.iter().enumerate() {
            let mask = node_mask(&weights, &ann.members);
            let area = mask.area();
            if area < 3 {
                continue;
            }
            let points = match lift_segment(&mask, &depth, &cam) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let raw = segment_scale(&points).map_err(|e| DatasetError::Invalid(e.to_string()))?;
            lines.push(SegmentLine {
                view_id,
                area,
                raw_scale: Some(raw),
                mask,
                embedding: node_idx,
            });
            segment_nodes.push(node_idx);
            raw_scales.push(raw);
        }
        views.push(TrainView { camera: cam, weights });
    }
    if lines.is_empty() {
        return Err(DatasetError::Invalid("no non-degenerate segments in any view".into()));
    }
    let (quantizer, bins) = ScaleQuantizer::fit(&raw_scales, dim)
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let records = lines
        .iter()
        .enumerate()
        .map(|(i, l)| SegmentRecord {
            view_id: l.view_id,
            mask: l.mask.clone(),
            area: l.area,
            raw_scale: raw_scales[i],
            quantized_scale: quantizer.scale_of_bin(bins[i]),
            teacher: teachers[segment_nodes[i]].clone(),
        })
        .collect();
    Ok(BuiltDataset { views, records, lines, segment_nodes, quantizer })
}
