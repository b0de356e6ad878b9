//! Gaussian scene model, serialization and the synthetic nested-scene generator.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Hard cap on generated Gaussians; anything bigger is not desk-scale.
pub const MAX_SYNTHETIC_GAUSSIANS: usize = 50_000;

const SCENE_MAGIC: &[u8; 4] = b"NFSC";
const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),
    #[error("scene must contain at least one gaussian")]
    EmptyScene,
    #[error("synthetic spec invalid: {0}")]
    InvalidSpec(String),
    #[error("synthetic spec requests {requested} gaussians, cap is {cap}")]
    TooManyGaussians { requested: usize, cap: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported scene file version {0}")]
    VersionMismatch(u32),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One anisotropic 3D Gaussian with degree-0 color.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self, SceneError> {
        if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
            return Err(SceneError::InvalidGaussian(format!(
                "scale components must be positive, got {scale:?}"
            )));
        }
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(SceneError::InvalidGaussian(format!(
                "opacity must be in (0,1], got {opacity}"
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(SceneError::InvalidGaussian("non-finite mean".into()));
        }
        Ok(Self { mean, scale, rotation, opacity, color })
    }

    /// Full 3D covariance Σ = R S Sᵀ Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let s = Matrix3::from_diagonal(&self.scale);
        let rs = r.matrix() * s;
        rs * rs.transpose()
    }
}

/// Covariance of a Gaussian, Σ = R S Sᵀ Rᵀ.
pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    g.covariance()
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn of_points<'a>(points: impl Iterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        any.then_some(Self { min, max })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        let d = Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        );
        d.norm()
    }

    /// Grow the box by a margin on every side.
    pub fn padded(&self, margin: f64) -> Self {
        Self {
            min: [self.min[0] - margin, self.min[1] - margin, self.min[2] - margin],
            max: [self.max[0] + margin, self.max[1] + margin, self.max[2] + margin],
        }
    }
}

/// The frozen scene geometry all rendering and querying runs over.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub extent: Aabb,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self, SceneError> {
        let extent = Aabb::of_points(gaussians.iter().map(|g| &g.mean))
            .ok_or(SceneError::EmptyScene)?;
        Ok(Self { gaussians, extent })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera at `eye` looking at `target`, with the given up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        // Camera convention: +z forward, +x right, +y down.
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            fwd.transpose(),
        ]);
        let translation = -rotation * eye;
        Self {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Parameters of the nested synthetic scene: groups of objects of parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub group_count: usize,
    pub objects_per_group: usize,
    pub parts_per_object: usize,
    pub gaussians_per_part: usize,
    pub scale_ratio: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.group_count < 1
            || self.objects_per_group < 1
            || self.parts_per_object < 1
            || self.gaussians_per_part < 1
        {
            return Err(SceneError::InvalidSpec("all counts must be >= 1".into()));
        }
        if !(self.scale_ratio > 1.0) {
            return Err(SceneError::InvalidSpec(format!(
                "scale_ratio must be > 1, got {}",
                self.scale_ratio
            )));
        }
        let total = self.total_gaussians();
        if total > MAX_SYNTHETIC_GAUSSIANS {
            return Err(SceneError::TooManyGaussians {
                requested: total,
                cap: MAX_SYNTHETIC_GAUSSIANS,
            });
        }
        Ok(())
    }

    pub fn total_gaussians(&self) -> usize {
        self.group_count * self.objects_per_group * self.parts_per_object * self.gaussians_per_part
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchyLevel {
    Group,
    Object,
    Part,
}

/// Ground-truth membership of one hierarchy node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyAnnotation {
    pub node_id: usize,
    pub level: HierarchyLevel,
    pub parent: Option<usize>,
    pub members: Vec<usize>,
}

fn unit_vec_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    // Rejection sample inside the unit ball; deterministic for a fixed rng.
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Deterministically generate a nested scene: groups on a coarse lattice,
/// objects on a jittered sub-lattice, parts as isotropic blobs.
pub fn generate_synthetic(
    spec: &SyntheticSceneSpec,
) -> Result<(GaussianScene, Vec<HierarchyAnnotation>), SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let part_radius = 0.1;
    let object_radius = part_radius * spec.scale_ratio;
    let group_radius = object_radius * spec.scale_ratio;
    let group_spacing = 4.0 * group_radius;

    let mut gaussians = Vec::with_capacity(spec.total_gaussians());
    let mut annotations = Vec::new();
    let mut next_node = 0usize;

    // Lay groups on a square lattice in the xy plane.
    let side = (spec.group_count as f64).sqrt().ceil() as usize;
    let mut group_nodes = Vec::new();
    for gi in 0..spec.group_count {
        let gx = (gi % side) as f64;
        let gy = (gi / side) as f64;
        let center = Vector3::new(gx * group_spacing, gy * group_spacing, 0.0);
        group_nodes.push((next_node, center));
        annotations.push(HierarchyAnnotation {
            node_id: next_node,
            level: HierarchyLevel::Group,
            parent: None,
            members: Vec::new(),
        });
        next_node += 1;
    }

    for &(group_id, group_center) in &group_nodes {
        for oi in 0..spec.objects_per_group {
            // Objects on a jittered sub-lattice around the group center.
            let oside = (spec.objects_per_group as f64).sqrt().ceil() as usize;
            let ox = (oi % oside) as f64 - (oside as f64 - 1.0) / 2.0;
            let oy = (oi / oside) as f64 - (oside as f64 - 1.0) / 2.0;
            let jitter = unit_vec_in_ball(&mut rng, 0.15 * object_radius);
            let object_center = group_center
                + Vector3::new(ox, oy, 0.0) * (2.5 * object_radius)
                + jitter;
            let object_id = next_node;
            annotations.push(HierarchyAnnotation {
                node_id: object_id,
                level: HierarchyLevel::Object,
                parent: Some(group_id),
                members: Vec::new(),
            });
            next_node += 1;

            for pi in 0..spec.parts_per_object {
                // Parts evenly spread on a circle around the object center.
                let angle = std::f64::consts::TAU * pi as f64
                    / spec.parts_per_object.max(1) as f64;
                let offset = if spec.parts_per_object == 1 {
                    Vector3::zeros()
                } else {
                    Vector3::new(angle.cos(), angle.sin(), 0.0) * (1.6 * part_radius)
                };
                let part_center =
                    object_center + offset + unit_vec_in_ball(&mut rng, 0.1 * part_radius);
                let part_id = next_node;
                let mut members = Vec::with_capacity(spec.gaussians_per_part);
                for _ in 0..spec.gaussians_per_part {
                    let mean = part_center + unit_vec_in_ball(&mut rng, part_radius);
                    let s = rng.gen_range(0.3..0.6) * part_radius;
                    let opacity = rng.gen_range(0.7..=1.0);
                    let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                    members.push(gaussians.len());
                    gaussians.push(
                        Gaussian::new(
                            mean,
                            Vector3::new(s, s, s),
                            UnitQuaternion::identity(),
                            opacity,
                            color,
                        )
                        .expect("generated gaussian is valid"),
                    );
                }
                annotations.push(HierarchyAnnotation {
                    node_id: part_id,
                    level: HierarchyLevel::Part,
                    parent: Some(object_id),
                    members: members.clone(),
                });
                next_node += 1;

                // Propagate membership up the chain.
                annotations
                    .iter_mut()
                    .find(|a| a.node_id == object_id)
                    .unwrap()
                    .members
                    .extend_from_slice(&members);
                annotations
                    .iter_mut()
                    .find(|a| a.node_id == group_id)
                    .unwrap()
                    .members
                    .extend_from_slice(&members);
            }
        }
    }

    let scene = GaussianScene::new(gaussians)?;
    Ok((scene, annotations))
}

fn f32_le(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Write a scene in the binary "NFSC" format.
pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(16 + scene.len() * 14 * 4);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    for g in &scene.gaussians {
        for a in 0..3 {
            f32_le(&mut buf, g.mean[a]);
        }
        for a in 0..3 {
            f32_le(&mut buf, g.scale[a]);
        }
        let q = g.rotation.quaternion();
        // File order is (w, x, y, z).
        f32_le(&mut buf, q.w);
        f32_le(&mut buf, q.i);
        f32_le(&mut buf, q.j);
        f32_le(&mut buf, q.k);
        f32_le(&mut buf, g.opacity);
        for c in g.color {
            f32_le(&mut buf, c);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_f32(bytes: &[u8], off: &mut usize) -> Result<f64, SceneError> {
    let end = *off + 4;
    if end > bytes.len() {
        return Err(SceneError::TruncatedPayload(format!(
            "expected 4 bytes at offset {off}, file has {}",
            bytes.len()
        )));
    }
    let v = f32::from_le_bytes(bytes[*off..end].try_into().unwrap());
    *off = end;
    Ok(v as f64)
}

/// Read a scene from the binary "NFSC" format.
pub fn load_scene(path: &Path) -> Result<GaussianScene, SceneError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(SceneError::TruncatedPayload(format!(
            "file is {} bytes, header needs 16",
            bytes.len()
        )));
    }
    if &bytes[0..4] != SCENE_MAGIC {
        return Err(SceneError::MalformedHeader(format!(
            "bad magic {:?}",
            &bytes[0..4]
        )));
    }
    if bytes.len() < 16 {
        return Err(SceneError::TruncatedPayload(
            "header truncated after magic".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SCENE_VERSION {
        return Err(SceneError::VersionMismatch(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut off = 16usize;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = Vector3::new(
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
        );
        let scale = Vector3::new(
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
        );
        let w = read_f32(&bytes, &mut off)?;
        let x = read_f32(&bytes, &mut off)?;
        let y = read_f32(&bytes, &mut off)?;
        let z = read_f32(&bytes, &mut off)?;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(SceneError::InvalidGaussian(format!(
                "quaternion norm {norm} outside 1 +/- 1e-4"
            )));
        }
        let rotation = UnitQuaternion::from_quaternion(q);
        let opacity = read_f32(&bytes, &mut off)?;
        let color = [
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
            read_f32(&bytes, &mut off)?,
        ];
        gaussians.push(Gaussian::new(mean, scale, rotation, opacity, color)?);
    }
    GaussianScene::new(gaussians)
}

/// Write hierarchy annotations as JSON-lines, one node per line.
pub fn save_annotations(annotations: &[HierarchyAnnotation], path: &Path) -> Result<(), SceneError> {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(a).expect("annotation serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<HierarchyAnnotation>, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: HierarchyAnnotation = serde_json::from_str(line)
            .map_err(|e| SceneError::MalformedHeader(format!("annotation line {}: {e}", i + 1)))?;
        out.push(a);
    }
    Ok(out)
}
