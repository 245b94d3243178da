//! Synthetic connector scene and pinhole camera.
//!
//! The world frame has z pointing up with the table at `z = 0`. A white
//! frustum-shaped base stands on the table and carries a dark trapezoidal
//! connector body whose top face holds a pattern of stud markers. Images are
//! rendered with a painter's-order polygon rasterizer, supersampled for
//! sub-pixel edge coverage and quantized to 8 bits.

mod image;

pub use image::{augment, occlude, occlude_from, Border, Image, CONNECTOR_LEVEL, WHITE_LEVEL};

use crate::geometry::{inverse, Pose, Quat, Vec3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Camera-frame depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Subsamples per pixel edge used by [`render`].
pub const DEFAULT_SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("expected {expected} pixels, got {actual}")]
    Dimensions { expected: usize, actual: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("visible fraction must be in (0, 1], got {0}")]
    VisibleFraction(f64),
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Read(#[from] std::io::Error),
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SceneError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (horizontal_fov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics { width, height, fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Intrinsics(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("zero-sized image {}x{}", self.width, self.height));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("principal point ({}, {}) outside the image", self.cx, self.cy));
        }
        Ok(())
    }
}

impl Default for CameraIntrinsics {
    /// 64×64 with a 70° horizontal field of view.
    fn default() -> Self {
        CameraIntrinsics::from_fov(64, 64, 70.0)
    }
}

/// Female connector mounted on the base. The top face is a trapezoid: full
/// width `2 * half_extents.x` along the `+y` edge, narrowed by `taper` along
/// the `-y` edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorSpec {
    pub half_extents: Vec3,
    pub taper: f64,
    pub stud_pattern: u8,
    pub albedo: f64,
}

/// Identifiers of the built-in connectors, three shapes in three sizes.
pub const CONNECTOR_IDS: [&str; 9] = ["A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2", "C3"];

impl ConnectorSpec {
    pub fn builtin(id: &str) -> Option<ConnectorSpec> {
        let mut chars = id.chars();
        let (shape, size) = (chars.next()?, chars.next()?.to_digit(10)?);
        if chars.next().is_some() || !(1..=3).contains(&size) {
            return None;
        }
        let s = (size - 1) as f64;
        let (taper, stud_pattern, albedo) = match shape {
            'A' => (0.80, 0, 0.35),
            'B' => (0.70, 1, 0.50),
            'C' => (0.85, 2, 0.15),
            _ => return None,
        };
        Some(ConnectorSpec {
            half_extents: Vec3::new(0.030 + 0.005 * s, 0.014 + 0.002 * s, 0.008 + 0.001 * s),
            taper,
            stud_pattern,
            albedo,
        })
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let h = self.half_extents;
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
            return Err(SceneError::Scene(format!("connector half extents must be positive: {h:?}")));
        }
        if !(self.taper > 0.0 && self.taper <= 1.0) {
            return Err(SceneError::Scene(format!("taper ratio {} outside (0, 1]", self.taper)));
        }
        if !(0.0..CONNECTOR_LEVEL).contains(&self.albedo) {
            return Err(SceneError::Scene(format!("connector albedo {} must be below {CONNECTOR_LEVEL}", self.albedo)));
        }
        Ok(())
    }

    fn stud_albedo(&self) -> f64 {
        if self.albedo > 0.3 {
            0.08
        } else {
            0.5
        }
    }

    /// Stud centers on the top face as fractions of `(half_extents.x, half_extents.y)`.
    fn stud_layout(&self) -> &'static [(f64, f64)] {
        match self.stud_pattern % 3 {
            0 => &[(-0.55, 0.0), (0.0, 0.0), (0.55, 0.0)],
            1 => &[(-0.5, 0.45), (0.0, 0.45), (0.5, 0.45), (-0.35, -0.45), (0.35, -0.45)],
            _ => &[(-0.6, 0.4), (0.15, 0.4), (0.0, -0.4)],
        }
    }
}

/// Frustum base the connector sits on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub bottom_half: f64,
    pub top_half: f64,
    pub height: f64,
    pub albedo: f64,
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec { bottom_half: 0.075, top_half: 0.05, height: 0.08, albedo: 0.97 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneState {
    pub connector: ConnectorSpec,
    /// Base center on the table plane, meters.
    pub base_position: [f64; 2],
    /// Degrees about world z.
    pub base_yaw: f64,
    /// Unit vector pointing towards the light.
    pub light_direction: Vec3,
    pub ambient: f64,
    /// Albedo of the table.
    pub background: f64,
    #[serde(default)]
    pub base: BaseSpec,
}

impl SceneState {
    pub fn new(connector: ConnectorSpec) -> Self {
        SceneState {
            connector,
            base_position: [0.0, 0.0],
            base_yaw: 0.0,
            light_direction: Vec3::new(0.3, 0.2, 1.0).normalized(),
            ambient: 0.75,
            background: 0.97,
            base: BaseSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.connector.validate()?;
        if (self.light_direction.norm() - 1.0).abs() > 1e-9 {
            return Err(SceneError::Scene("light direction must be a unit vector".into()));
        }
        for (name, v) in [("ambient", self.ambient), ("background", self.background), ("base albedo", self.base.albedo)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SceneError::Scene(format!("{name} level {v} outside [0, 1]")));
            }
        }
        let b = self.base;
        if !(b.height > 0.0 && b.top_half > 0.0 && b.bottom_half >= b.top_half) {
            return Err(SceneError::Scene(format!("degenerate base {b:?}")));
        }
        Ok(())
    }

    /// Pose of the base frame: on the table at the base center, yawed.
    pub fn base_frame(&self) -> Pose {
        let q = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), self.base_yaw.to_radians());
        Pose::new(q, Vec3::new(self.base_position[0], self.base_position[1], 0.0))
    }

    /// End-effector pose with the male connector seated: centered on the
    /// connector top face, z axis pointing down, x along the base x axis.
    pub fn insertion_pose(&self) -> Pose {
        let top = self.base.height + 2.0 * self.connector.half_extents.z;
        let down = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), std::f64::consts::PI);
        let frame = self.base_frame();
        Pose::new(frame.rotation * down, frame.transform_point(Vec3::new(0.0, 0.0, top)))
    }

    /// World-frame vertices of the connector body (bottom ring then top ring).
    pub fn connector_vertices(&self) -> Vec<Vec3> {
        let frame = self.base_frame();
        let (z0, z1) = self.connector_z();
        let mut out = Vec::with_capacity(8);
        for z in [z0, z1] {
            for (x, y) in self.connector_outline() {
                out.push(frame.transform_point(Vec3::new(x, y, z)));
            }
        }
        out
    }

    fn connector_z(&self) -> (f64, f64) {
        (self.base.height, self.base.height + 2.0 * self.connector.half_extents.z)
    }

    // counter-clockwise seen from above
    fn connector_outline(&self) -> [(f64, f64); 4] {
        let h = self.connector.half_extents;
        let t = self.connector.taper;
        [(-h.x * t, -h.y), (h.x * t, -h.y), (h.x, h.y), (-h.x, h.y)]
    }

    fn faces(&self) -> Vec<Face> {
        let frame = self.base_frame();
        let mut faces = Vec::new();
        let b = self.base;
        let ring = |half: f64, z: f64| [(-half, -half, z), (half, -half, z), (half, half, z), (-half, half, z)];
        let bottom = ring(b.bottom_half, 0.0);
        let top = ring(b.top_half, b.height);
        let base_center = Vec3::new(0.0, 0.0, b.height / 2.0);
        push_prism(&mut faces, &frame, &bottom, &top, base_center, b.albedo, Layer::Base);

        let (z0, z1) = self.connector_z();
        let outline = self.connector_outline();
        let lo = outline.map(|(x, y)| (x, y, z0));
        let hi = outline.map(|(x, y)| (x, y, z1));
        let body_center = Vec3::new(0.0, 0.0, (z0 + z1) / 2.0);
        push_prism(&mut faces, &frame, &lo, &hi, body_center, self.connector.albedo, Layer::Body);

        let h = self.connector.half_extents;
        let s = 0.22 * h.y;
        let zs = z1 + 0.0005;
        for &(fx, fy) in self.connector.stud_layout() {
            let (cx, cy) = (fx * h.x, fy * h.y);
            let verts = [(-s, -s), (s, -s), (s, s), (-s, s)]
                .iter()
                .map(|&(dx, dy)| frame.transform_point(Vec3::new(cx + dx, cy + dy, zs)))
                .collect();
            faces.push(Face {
                verts,
                normal: frame.rotation.rotate(Vec3::new(0.0, 0.0, 1.0)),
                albedo: self.connector.stud_albedo(),
                layer: Layer::Stud,
            });
        }
        faces
    }

    fn shade(&self, albedo: f64, normal: Vec3) -> f64 {
        let diffuse = normal.dot(self.light_direction).max(0.0);
        (albedo * (self.ambient + (1.0 - self.ambient) * diffuse)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Layer {
    Base,
    Body,
    Stud,
}

#[derive(Debug, Clone)]
struct Face {
    verts: Vec<Vec3>,
    normal: Vec3,
    albedo: f64,
    layer: Layer,
}

/// Top cap plus side quads of a prism or frustum given its bottom and top
/// rings (local frame), with normals pointing away from `center`.
fn push_prism(
    faces: &mut Vec<Face>,
    frame: &Pose,
    bottom: &[(f64, f64, f64); 4],
    top: &[(f64, f64, f64); 4],
    center: Vec3,
    albedo: f64,
    layer: Layer,
) {
    let w = |p: &(f64, f64, f64)| frame.transform_point(Vec3::new(p.0, p.1, p.2));
    let center = frame.transform_point(center);
    let mut add = |verts: Vec<Vec3>| {
        let n = newell_normal(&verts);
        let mid = verts.iter().fold(Vec3::ZERO, |a, &v| a + v).scale(1.0 / verts.len() as f64);
        let n = if n.dot(mid - center) < 0.0 { -n } else { n };
        faces.push(Face { verts, normal: n, albedo, layer });
    };
    add(top.iter().map(w).collect());
    for i in 0..4 {
        let j = (i + 1) % 4;
        add(vec![w(&bottom[i]), w(&bottom[j]), w(&top[j]), w(&top[i])]);
    }
}

fn newell_normal(verts: &[Vec3]) -> Vec3 {
    let mut n = Vec3::ZERO;
    for (i, a) in verts.iter().enumerate() {
        let b = verts[(i + 1) % verts.len()];
        n.x += (a.y - b.y) * (a.z + b.z);
        n.y += (a.z - b.z) * (a.x + b.x);
        n.z += (a.x - b.x) * (a.y + b.y);
    }
    n.normalized()
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<(f64, f64)> {
        match self {
            Projection::Pixel { u, v } => Some((u, v)),
            Projection::BehindCamera => None,
        }
    }
}

/// Pinhole projection. Camera frame: x right, y down, z along the optical axis.
pub fn project(point: Vec3, camera_pose: Pose, k: &CameraIntrinsics) -> Projection {
    let p = inverse(camera_pose).transform_point(point);
    if p.z <= MIN_DEPTH {
        return Projection::BehindCamera;
    }
    Projection::Pixel { u: k.fx * p.x / p.z + k.cx, v: k.fy * p.y / p.z + k.cy }
}

pub fn render(scene: &SceneState, camera_pose: Pose, k: &CameraIntrinsics) -> Image {
    render_supersampled(scene, camera_pose, k, DEFAULT_SUPERSAMPLE)
}

pub fn render_supersampled(scene: &SceneState, camera_pose: Pose, k: &CameraIntrinsics, supersample: usize) -> Image {
    let s = supersample.max(1);
    let (sw, sh) = (k.width * s, k.height * s);
    let table = scene.shade(scene.background, Vec3::new(0.0, 0.0, 1.0));
    let mut buf = vec![table; sw * sh];

    let eye = camera_pose.translation;
    let world_to_cam = inverse(camera_pose);
    let mut visible: Vec<(Layer, f64, Face)> = scene
        .faces()
        .into_iter()
        .filter(|f| f.normal.dot(eye - f.verts[0]) > 0.0)
        .filter_map(|f| {
            let depth = f.verts.iter().map(|&v| world_to_cam.transform_point(v).z).sum::<f64>() / f.verts.len() as f64;
            Some((f.layer, depth, f))
        })
        .collect();
    // far to near within each layer; layers stack bottom-up towards a camera above
    visible.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));

    for (_, _, face) in &visible {
        let mut poly = Vec::with_capacity(face.verts.len());
        for &v in &face.verts {
            match project(v, camera_pose, k) {
                Projection::Pixel { u, v } => poly.push((u * s as f64, v * s as f64)),
                Projection::BehindCamera => break,
            }
        }
        if poly.len() != face.verts.len() {
            continue;
        }
        let shade = scene.shade(face.albedo, face.normal);
        fill_convex(&mut buf, sw, sh, &poly, shade);
    }

    let norm = 1.0 / (s * s) as f64;
    let mut pixels = vec![0.0; k.width * k.height];
    for y in 0..k.height {
        for x in 0..k.width {
            let mut acc = 0.0;
            for dy in 0..s {
                let row = (y * s + dy) * sw + x * s;
                acc += buf[row..row + s].iter().sum::<f64>();
            }
            pixels[y * k.width + x] = acc * norm;
        }
    }
    let mut img = Image { width: k.width, height: k.height, pixels };
    img.quantize();
    img
}

fn fill_convex(buf: &mut [f64], w: usize, h: usize, poly: &[(f64, f64)], value: f64) {
    let area: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if area.abs() < 1e-12 {
        return;
    }
    let sign = area.signum();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in poly {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let (ix0, ix1) = (clamp(x0.floor(), w), clamp(x1.ceil(), w));
    let (iy0, iy1) = (clamp(y0.floor(), h), clamp(y1.ceil(), h));
    let edges: Vec<(f64, f64, f64, f64)> = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            (a.0, a.1, b.0 - a.0, b.1 - a.1)
        })
        .collect();
    for iy in iy0..iy1 {
        let py = iy as f64 + 0.5;
        for ix in ix0..ix1 {
            let px = ix as f64 + 0.5;
            if edges.iter().all(|&(ax, ay, ex, ey)| sign * (ex * (py - ay) - ey * (px - ax)) >= 0.0) {
                buf[iy * w + ix] = value;
            }
        }
    }
}
