//! On-disk helpers that don't belong in the core library: camera lists,
//! PPM re-ingestion for eval, and bounding boxes.

use anyhow::{bail, Context, Result};
use nalgebra::{Matrix3, Vector3};
use nestfield::hierarchy::RleMask;
use nestfield::query::{QueryMode, RelevancyMap};
use nestfield::scene::Camera;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl From<&CameraJson> for Camera {
    fn from(c: &CameraJson) -> Self {
        let r = c.rotation;
        Camera {
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: Vector3::new(c.translation[0], c.translation[1], c.translation[2]),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

pub fn save_cameras(cams: &[Camera], path: &Path) -> Result<()> {
    let json: Vec<CameraJson> = cams.iter().map(CameraJson::from).collect();
    std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading cameras from {}", path.display()))?;
    let json: Vec<CameraJson> = serde_json::from_str(&text)?;
    Ok(json.iter().map(Camera::from).collect())
}

#[derive(Debug, Deserialize)]
struct Sidecar {
    query_id: String,
    mode: QueryMode,
    #[serde(default)]
    chosen_scale: Option<usize>,
    min: f64,
    max: f64,
}

/// Re-ingest a relevancy PPM plus its sidecar, dequantizing through the
/// recorded min/max so eval is a pure function of the artifacts.
pub fn load_relevancy(ppm_path: &Path) -> Result<RelevancyMap> {
    let bytes = std::fs::read(ppm_path)
        .with_context(|| format!("reading relevancy map {}", ppm_path.display()))?;
    let header_end = {
        let mut fields = 0;
        let mut idx = 0;
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'\n' {
                fields += 1;
                if fields == 3 {
                    idx = i + 1;
                    break;
                }
            }
        }
        idx
    };
    let header = std::str::from_utf8(&bytes[..header_end])?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        bail!("{} is not a P5 PPM", ppm_path.display());
    }
    let width: usize = parts.next().context("missing width")?.parse()?;
    let height: usize = parts.next().context("missing height")?.parse()?;
    let maxval: usize = parts.next().context("missing maxval")?.parse()?;
    if maxval != 255 {
        bail!("unsupported maxval {maxval}");
    }
    let payload = &bytes[header_end..];
    if payload.len() != width * height {
        bail!("payload of {} bytes for {}x{}", payload.len(), width, height);
    }
    let sidecar_text = std::fs::read_to_string(ppm_path.with_extension("json"))
        .with_context(|| format!("reading sidecar for {}", ppm_path.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_text)?;
    let span = sidecar.max - sidecar.min;
    let values = payload
        .iter()
        .map(|&b| sidecar.min + b as f64 / 255.0 * span)
        .collect();
    Ok(RelevancyMap {
        width,
        height,
        values,
        query_id: sidecar.query_id,
        mode: sidecar.mode,
        chosen_scale: sidecar.chosen_scale,
    })
}

/// Tight pixel bounding box [x0, y0, x1, y1] of a mask, if non-empty.
pub fn mask_bbox(mask: &RleMask, width: usize) -> Option<[usize; 4]> {
    let mut bbox: Option<[usize; 4]> = None;
    for pix in mask.pixels() {
        let (x, y) = (pix % width, pix / width);
        bbox = Some(match bbox {
            None => [x, y, x, y],
            Some(b) => [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)],
        });
    }
    bbox
}
