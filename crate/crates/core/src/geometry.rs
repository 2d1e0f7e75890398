//! Pinhole cameras, rigid poses, point-cloud lifting and the soft z-buffer
//! point renderer.
//!
//! Conventions: camera frame is x right, y down, z forward. Pixel `(row, col)`
//! has its center at image coordinates `(u, v) = (col, row)`. A [`Pose`] maps
//! camera coordinates to world coordinates: `X_w = R X_c + t`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Image, Mask, Rgb};
use crate::{Error, Result};

pub const DEFAULT_RADIUS_PX: usize = 4;
pub const DEFAULT_POINTS_PER_PIXEL: usize = 8;
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ERODE_PX: usize = 2;
/// Relative depth band treated as one surface when ordering splat candidates.
pub const DEFAULT_SURFACE_TOLERANCE: f64 = 0.1;
/// Front-to-back compositing stops once this much opacity has accumulated.
const OPACITY_SATURATION: f64 = 0.999;
/// Source tag stored for pixels without any contributing point.
pub const NO_SOURCE: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// 64x64 camera with a 90 degree field of view.
    pub fn desk() -> Self {
        Self {
            fx: 32.0,
            fy: 32.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame ray through pixel `(row, col)` with unit z.
    pub fn pixel_ray(&self, row: f64, col: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0)
    }

    fn check_image<T>(&self, grid: &Grid<T>, what: &str) -> Result<()> {
        if grid.width() != self.width || grid.height() != self.height {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, camera is {}x{}",
                grid.height(),
                grid.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = (r.transpose() * r - Matrix3::identity()).abs().max();
    e.max((r.determinant() - 1.0).abs())
}

/// Rotation about the camera y axis (positive turns right) followed by a
/// rotation about the camera x axis (positive looks up), angles in degrees.
pub fn yaw_pitch_rotation(yaw_deg: f64, pitch_deg: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let yaw = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let pitch = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    yaw * pitch
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if !(err <= 1e-9) {
            return Err(Error::NotOrthonormal(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_yaw_pitch(yaw_deg: f64, pitch_deg: f64) -> Self {
        Self {
            rotation: yaw_pitch_rotation(yaw_deg, pitch_deg),
            translation: Vector3::zeros(),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-frame rotation taking coordinates in `self` to coordinates in `other`.
    pub fn relative_rotation_to(&self, other: &Pose) -> Matrix3<f64> {
        other.rotation.transpose() * self.rotation
    }

    /// Moves the camera by `meters` along its viewing direction.
    pub fn stepped_forward(&self, meters: f64) -> Pose {
        let forward = self.rotation * Vector3::new(0.0, 0.0, 1.0);
        Pose {
            rotation: self.rotation,
            translation: self.translation + forward * meters,
        }
    }
}

pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(p: &Pose) -> Pose {
    p.inverse()
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let r = repr.rotation;
        let rotation = Matrix3::from_fn(|i, j| r[i][j]);
        Pose::new(rotation, Vector3::from(repr.translation)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Grid<f64>,
    pub valid: Mask,
}

impl DepthMap {
    pub fn new(values: Grid<f64>, valid: Mask) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(Error::Shape("depth values and mask differ".into()));
        }
        Ok(Self { values, valid })
    }

    pub fn all_valid(values: Grid<f64>) -> Self {
        let valid = values.map(|_| true);
        Self { values, valid }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// Depth in millimeters as 16 bits; zero marks invalid pixels.
    fn to_luma16(&self) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
        let mut buf = image::ImageBuffer::new(self.width() as u32, self.height() as u32);
        for (row, col, &d) in self.values.iter_indexed() {
            let mm = if *self.valid.get(row, col) {
                (d * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            };
            buf.put_pixel(col as u32, row as u32, image::Luma([mm]));
        }
        buf
    }

    fn from_luma16(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        let (h, w) = (img.height() as usize, img.width() as usize);
        let values = Grid::from_fn(h, w, |r, c| img.get_pixel(c as u32, r as u32).0[0] as f64 / 1000.0);
        let valid = values.map(|&d| d > 0.0);
        Self { values, valid }
    }

    /// 16-bit PNG in millimeters; zero marks invalid pixels.
    pub fn save_png_mm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma16().save(path)?;
        Ok(())
    }

    pub fn encode_png_mm(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_luma16().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png_mm(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_luma16(&image::open(path)?.to_luma16()))
    }

    pub fn decode_png_mm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_luma16(&img.to_luma16()))
    }
}

/// Colored points in the world frame. Positions and colors are stored at the
/// precision of the on-disk format so saving and loading is lossless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub sources: Vec<u16>,
}

const PSPC_MAGIC: &[u8; 4] = b"PSPC";
const PSPC_VERSION: u32 = 1;

fn color_to_u8(c: Rgb) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, color: Rgb, source: u16) {
        self.positions
            .push([position.x as f32, position.y as f32, position.z as f32]);
        self.colors.push(color_to_u8(color));
        self.sources.push(source);
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let p = self.positions[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn color(&self, i: usize) -> Rgb {
        self.colors[i].map(|v| v as f32 / 255.0)
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.sources.extend_from_slice(&other.sources);
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PSPC_MAGIC)?;
        w.write_all(&PSPC_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.positions[i] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&self.colors[i])?;
            w.write_all(&self.sources[i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[0..4] != PSPC_MAGIC {
            return Err(Error::Format("not a PSPC point cloud".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != PSPC_VERSION {
            return Err(Error::Format(format!("unsupported PSPC version {version}")));
        }
        let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut cloud = PointCloud::default();
        let mut rec = [0u8; 17];
        for _ in 0..n {
            r.read_exact(&mut rec)?;
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            cloud.positions.push([f(0), f(4), f(8)]);
            cloud.colors.push([rec[12], rec[13], rec[14]]);
            cloud
                .sources
                .push(u16::from_le_bytes([rec[15], rec[16]]));
        }
        Ok(cloud)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Lifts every valid depth pixel to a world-frame point.
pub fn unproject(
    image: &Image,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    source: u16,
) -> Result<PointCloud> {
    unproject_where(image, depth, intrinsics, pose, source, None)
}

/// [`unproject`] restricted to pixels where `only` is set.
pub fn unproject_where(
    image: &Image,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    source: u16,
    only: Option<&Mask>,
) -> Result<PointCloud> {
    intrinsics.check_image(image, "image")?;
    intrinsics.check_image(&depth.values, "depth")?;
    intrinsics.check_image(&depth.valid, "depth mask")?;
    if let Some(m) = only {
        intrinsics.check_image(m, "selection mask")?;
    }
    let mut cloud = PointCloud::default();
    for (row, col, &d) in depth.values.iter_indexed() {
        if !*depth.valid.get(row, col) || only.is_some_and(|m| !*m.get(row, col)) {
            continue;
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidDepth {
                row,
                col,
                depth: d,
            });
        }
        let cam = intrinsics.pixel_ray(row as f64, col as f64) * d;
        cloud.push(pose.transform_point(&cam), *image.get(row, col), source);
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatParams {
    pub radius_px: usize,
    pub points_per_pixel: usize,
    pub surface_tolerance: f64,
}

impl Default for SplatParams {
    fn default() -> Self {
        Self {
            radius_px: DEFAULT_RADIUS_PX,
            points_per_pixel: DEFAULT_POINTS_PER_PIXEL,
            surface_tolerance: DEFAULT_SURFACE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub image: Image,
    pub coverage: Grid<f64>,
    pub visible: Mask,
    pub depth: Grid<f64>,
    /// Source tag of the front-most contributing point, [`NO_SOURCE`] if none.
    pub source: Grid<u16>,
}

impl RenderResult {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Depth map valid exactly on visible pixels.
    pub fn visible_depth(&self) -> DepthMap {
        DepthMap {
            values: self.depth.clone(),
            valid: self.visible.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projected {
    u: f64,
    v: f64,
    z: f64,
    color: [u8; 3],
    source: u16,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    z: f64,
    /// Screen offset of the point from the pixel center.
    du: f64,
    dv: f64,
    dist2: f64,
    alpha: f64,
    color: [u8; 3],
    source: u16,
}

fn by_screen(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.dist2
        .total_cmp(&b.dist2)
        .then(a.z.total_cmp(&b.z))
        .then(a.color.cmp(&b.color))
        .then(a.source.cmp(&b.source))
}

fn by_depth(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.z.total_cmp(&b.z)
        .then(a.dist2.total_cmp(&b.dist2))
        .then(a.color.cmp(&b.color))
        .then(a.source.cmp(&b.source))
}

/// Nearer points only hide the anchor surface when they land this close to
/// the pixel center. A real occluder is sampled about once per pixel, while
/// a surface meeting the anchor surface at a crease only reaches the pixel
/// through its splat tail.
const OCCLUDER_RADIUS_PX: f64 = 1.0;

/// Inverse-depth plane `w = p0 + p1 * du + p2 * dv` fitted by least squares
/// to `pts`; constant when the fit is degenerate.
fn fit_inverse_depth_plane(pts: &[&Candidate], fallback: f64) -> [f64; 3] {
    let mut m = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for c in pts {
        let x = [1.0, c.du, c.dv];
        let w = 1.0 / c.z;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += x[i] * x[j];
            }
            b[i] += x[i] * w;
        }
    }
    let mat = Matrix3::from_fn(|i, j| m[i][j]);
    // Points spread along a line or a single point cannot fix a gradient.
    if pts.len() < 3 || mat.determinant().abs() < 1e-9 * (pts.len() as f64).powi(3) {
        return [fallback, 0.0, 0.0];
    }
    match mat.lu().solve(&Vector3::new(b[0], b[1], b[2])) {
        Some(p) if p.iter().all(|v| v.is_finite()) => [p[0], p[1], p[2]],
        _ => [fallback, 0.0, 0.0],
    }
}

/// Orders one pixel's candidates front to back.
///
/// The candidate closest in screen space anchors the visible surface, whose
/// inverse depth is modelled as a plane in screen offsets (exact for planar
/// surfaces) fitted to the candidates within `tolerance` relative depth of
/// the anchor. A candidate occludes the surface only if it is both more than
/// `tolerance` nearer than the anchor and off the plane by as much, and it
/// lands within [`OCCLUDER_RADIUS_PX`] of the pixel center; symmetric (without
/// the radius) for candidates behind. Occluders come first by depth, then surface points
/// nearest-in-screen first, then the points behind by depth. The plane test
/// keeps slanted surfaces from occluding themselves near grazing angles.
fn order_candidates(cands: &mut Vec<Candidate>, tolerance: f64) {
    let Some(anchor) = cands.iter().copied().min_by(by_screen) else {
        return;
    };
    // Canonical order first so the fit does not depend on insertion order.
    cands.sort_by(by_depth);
    let near = anchor.z * (1.0 - tolerance);
    let far = anchor.z * (1.0 + tolerance);
    let within: Vec<&Candidate> = cands.iter().filter(|c| c.z >= near && c.z <= far).collect();
    let plane = fit_inverse_depth_plane(&within, 1.0 / anchor.z);
    let slack = tolerance / anchor.z;
    let band = |c: &Candidate| {
        let residual = 1.0 / c.z - (plane[0] + plane[1] * c.du + plane[2] * c.dv);
        if c.z < near && residual > slack && c.dist2 <= OCCLUDER_RADIUS_PX * OCCLUDER_RADIUS_PX {
            0u8
        } else if c.z > far && residual < -slack {
            2
        } else {
            1
        }
    };
    cands.sort_by(|a, b| {
        let (ba, bb) = (band(a), band(b));
        ba.cmp(&bb).then_with(|| {
            if ba == 1 {
                by_screen(a, b)
            } else {
                by_depth(a, b)
            }
        })
    });
}

struct PixelOut {
    color: Rgb,
    coverage: f64,
    depth: f64,
    source: u16,
}

fn composite(cands: &[Candidate], points_per_pixel: usize) -> PixelOut {
    let mut transmittance = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut depth = 0.0f64;
    for c in cands.iter().take(points_per_pixel) {
        let w = transmittance * c.alpha;
        for ch in 0..3 {
            color[ch] += w * (c.color[ch] as f64 / 255.0);
        }
        depth += w * c.z;
        transmittance *= 1.0 - c.alpha;
        if 1.0 - transmittance >= OPACITY_SATURATION {
            break;
        }
    }
    let coverage = 1.0 - transmittance;
    if coverage <= 0.0 {
        return PixelOut {
            color: [0.0; 3],
            coverage: 0.0,
            depth: 0.0,
            source: NO_SOURCE,
        };
    }
    PixelOut {
        color: color.map(|v| (v / coverage) as f32),
        coverage,
        depth: depth / coverage,
        source: cands[0].source,
    }
}

const TILE_ROWS: usize = 16;

/// Soft z-buffer rendering of a point cloud at `pose`.
///
/// Every pixel whose center lies within `radius_px` of a projected point
/// receives it as a candidate with opacity `1 - (dist / radius)^2`. The first
/// `points_per_pixel` candidates in front-to-back order are "over"
/// composited. `image` and `depth` are normalized by the composited coverage.
pub fn splat_render(
    cloud: &PointCloud,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    params: &SplatParams,
) -> Result<RenderResult> {
    splat_render_many(&[cloud], intrinsics, pose, params)
}

/// [`splat_render`] over the union of several clouds.
pub fn splat_render_many(
    clouds: &[&PointCloud],
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    params: &SplatParams,
) -> Result<RenderResult> {
    if params.radius_px < 1 || params.points_per_pixel < 1 {
        return Err(Error::InvalidArgument(
            "radius_px and points_per_pixel must be >= 1".into(),
        ));
    }
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let r = params.radius_px as f64;
    let rt = pose.rotation.transpose();
    let t = pose.translation;

    // Read-only prepass: project everything once.
    let projected: Vec<Projected> = clouds
        .iter()
        .flat_map(|c| (0..c.len()).map(move |i| (*c, i)))
        .collect::<Vec<_>>()
        .par_iter()
        .filter_map(|&(c, i)| {
            let p = rt * (c.position(i) - t);
            if !(p.z > 0.0) {
                return None;
            }
            let u = intrinsics.fx * p.x / p.z;
            let v = intrinsics.fy * p.y / p.z;
            let (uc, vc) = (u + intrinsics.cx, v + intrinsics.cy);
            if !(uc > -r && vc > -r && uc < w as f64 - 1.0 + r && vc < h as f64 - 1.0 + r) {
                return None;
            }
            Some(Projected {
                u,
                v,
                z: p.z,
                color: c.colors[i],
                source: c.sources[i],
            })
        })
        .collect();

    let tiles: Vec<usize> = (0..h).step_by(TILE_ROWS).collect();
    let rendered: Vec<Vec<PixelOut>> = tiles
        .par_iter()
        .map(|&row0| {
            let row1 = (row0 + TILE_ROWS).min(h);
            let mut cands: Vec<Vec<Candidate>> = (0..(row1 - row0) * w).map(|_| Vec::new()).collect();
            for p in &projected {
                let vc = p.v + intrinsics.cy;
                let uc = p.u + intrinsics.cx;
                let r_lo = (vc - r).ceil().max(row0 as f64) as isize;
                let r_hi = (vc + r).floor().min(row1 as f64 - 1.0) as isize;
                let c_lo = (uc - r).ceil().max(0.0) as isize;
                let c_hi = (uc + r).floor().min(w as f64 - 1.0) as isize;
                for row in r_lo..=r_hi {
                    let dv = p.v - (row as f64 - intrinsics.cy);
                    for col in c_lo..=c_hi {
                        let du = p.u - (col as f64 - intrinsics.cx);
                        let dist2 = du * du + dv * dv;
                        let alpha = 1.0 - dist2 / (r * r);
                        if alpha <= 0.0 {
                            continue;
                        }
                        cands[(row as usize - row0) * w + col as usize].push(Candidate {
                            z: p.z,
                            du,
                            dv,
                            dist2,
                            alpha: alpha.min(1.0),
                            color: p.color,
                            source: p.source,
                        });
                    }
                }
            }
            cands
                .into_iter()
                .map(|mut c| {
                    order_candidates(&mut c, params.surface_tolerance);
                    composite(&c, params.points_per_pixel)
                })
                .collect()
        })
        .collect();

    let mut image = Grid::filled(h, w, [0.0f32; 3]);
    let mut coverage = Grid::filled(h, w, 0.0f64);
    let mut depth = Grid::filled(h, w, 0.0f64);
    let mut source = Grid::filled(h, w, NO_SOURCE);
    for (tile, &row0) in rendered.into_iter().zip(&tiles) {
        for (k, px) in tile.into_iter().enumerate() {
            let (row, col) = (row0 + k / w, k % w);
            image.set(row, col, px.color);
            coverage.set(row, col, px.coverage);
            depth.set(row, col, px.depth);
            source.set(row, col, px.source);
        }
    }
    let visible = coverage.map(|&c| c >= DEFAULT_COVERAGE_THRESHOLD);
    Ok(RenderResult {
        image,
        coverage,
        visible,
        depth,
        source,
    })
}

/// How pixels beyond the image frame count during border erosion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameEdge {
    /// The frame itself is a border: a full mask loses its outer ring.
    Background,
    /// Only silhouettes of the projected content are eroded.
    Foreground,
}

fn erode(mask: &Mask, steps: usize, frame: FrameEdge) -> Mask {
    let mut cur = mask.clone();
    for _ in 0..steps {
        let prev = cur.clone();
        let (h, w) = (prev.height(), prev.width());
        cur = Grid::from_fn(h, w, |row, col| {
            if !*prev.get(row, col) {
                return false;
            }
            let interior = row > 0 && col > 0 && row + 1 < h && col + 1 < w;
            if !interior && frame == FrameEdge::Background {
                return false;
            }
            prev.neighbors8(row, col).all(|(r, c)| *prev.get(r, c))
        });
    }
    cur
}

/// Marks pixels with coverage below `coverage_threshold`, and an `erode_px`
/// band around them, as not visible; zeroes image and depth there. The
/// image frame counts as background.
pub fn trim_border(result: &RenderResult, coverage_threshold: f64, erode_px: usize) -> RenderResult {
    trim_border_with(result, coverage_threshold, erode_px, FrameEdge::Background)
}

pub fn trim_border_with(
    result: &RenderResult,
    coverage_threshold: f64,
    erode_px: usize,
    frame: FrameEdge,
) -> RenderResult {
    let covered = result.coverage.map(|&c| c >= coverage_threshold);
    let visible = erode(&covered, erode_px, frame);
    let mut out = result.clone();
    for i in 0..visible.len() {
        if !visible.as_slice()[i] {
            out.image.as_mut_slice()[i] = [0.0; 3];
            out.depth.as_mut_slice()[i] = 0.0;
        }
    }
    out.visible = visible;
    out
}

/// Pixel homography between two views sharing intrinsics and camera center:
/// `H = K R K^-1`, scaled so `|H[2][2]| = 1`. The sign is kept, so the
/// homogeneous coordinate stays positive for points in front of both views. `rotation_2_from_1` maps
/// view-1 camera coordinates to view-2 camera coordinates.
pub fn rotation_homography(
    intrinsics: &CameraIntrinsics,
    rotation_2_from_1: &Matrix3<f64>,
) -> Result<Matrix3<f64>> {
    let err = orthonormality_error(rotation_2_from_1);
    if !(err <= 1e-6) {
        return Err(Error::NotOrthonormal(err));
    }
    let h = intrinsics.matrix() * rotation_2_from_1 * intrinsics.inverse_matrix();
    let s = h[(2, 2)];
    Ok(if s.abs() > 1e-12 { h / s.abs() } else { h })
}
