//! Procedural textured box rooms rendered by ray casting, and view-pair
//! sampling inside them.
//!
//! Rooms span `[0, X] x [0, Y] x [0, Z]` in world meters with y pointing down,
//! so `y = 0` is the ceiling and `y = Y` the floor.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{yaw_pitch_rotation, CameraIntrinsics, DepthMap, Pose};
use crate::grid::{Grid, Image, Rgb};
use crate::{Error, Result};

pub const DEFAULT_EXTENTS: [f64; 3] = [6.0, 3.0, 4.0];
pub const CAMERA_HEIGHT: f64 = 1.5;
pub const FIXTURE_ROOMS: usize = 8;
/// Subsamples per pixel side for color.
const SUPERSAMPLE: usize = 3;
const MAX_PAIR_ATTEMPTS: usize = 1000;
const PITCH_CAP_DEG: f64 = 30.0;
const WALL_MARGIN: f64 = 0.3;
const DECAL_CONTRAST: f32 = 0.3;
/// Per-channel spread of wall colors around the room palette.
const WALL_SPREAD: f32 = 0.2;
/// Width in meters of the soft edges on textures and decals.
const EDGE_FEATHER: f64 = 0.12;
/// Width in meters of the fade to the palette color along wall borders.
const CORNER_FEATHER: f64 = 0.15;

/// Wall index: 0 `x=0`, 1 `x=X`, 2 `y=0` (ceiling), 3 `y=Y` (floor),
/// 4 `z=0`, 5 `z=Z`.
pub type WallId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Checker { period: f64 },
    /// Stripes varying along the wall's first (`along_a`) or second axis.
    Stripes { period: f64, along_a: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallStyle {
    pub base: Rgb,
    pub secondary: Rgb,
    pub pattern: Pattern,
}

/// Axis-aligned rectangle painted on a wall, in the wall's `(a, b)` plane
/// coordinates (see [`wall_coords`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decal {
    pub wall: WallId,
    pub a0: f64,
    pub b0: f64,
    pub a1: f64,
    pub b1: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub extents: [f64; 3],
    /// Color every wall fades to near its borders, so corners carry no
    /// color step.
    pub palette: Rgb,
    pub walls: [WallStyle; 6],
    pub decals: Vec<Decal>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub min_deg: f64,
    pub max_deg: f64,
    pub max_translation: f64,
    pub yaw: bool,
    pub pitch: bool,
    pub roll: bool,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            min_deg: 20.0,
            max_deg: 60.0,
            max_translation: 1.0,
            yaw: true,
            pitch: true,
            roll: false,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_deg && self.min_deg <= self.max_deg && self.max_translation >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad pair spec {self:?}")));
        }
        if !(self.yaw || self.pitch || self.roll) {
            return Err(Error::InvalidArgument("no rotation axis allowed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub wall: WallId,
    pub point: Vector3<f64>,
}

fn rand_color(rng: &mut impl Rng) -> Rgb {
    [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ]
}

/// Color within `DECAL_CONTRAST` of `base` per channel.
fn tint(base: Rgb, rng: &mut impl Rng) -> Rgb {
    base.map(|v| (v + rng.gen_range(-DECAL_CONTRAST..DECAL_CONTRAST)).clamp(0.0, 1.0))
}

fn shade(c: Rgb, amount: f32) -> Rgb {
    c.map(|v| (v + amount).clamp(0.0, 1.0))
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// 0 outside `[lo, hi]`, 1 inside, with `EDGE_FEATHER`-wide ramps centered
/// on the edges.
fn box_weight(x: f64, lo: f64, hi: f64) -> f64 {
    let rise = smoothstep((x - lo) / EDGE_FEATHER + 0.5);
    let fall = smoothstep((hi - x) / EDGE_FEATHER + 0.5);
    rise * fall
}

/// Feathered square wave in [0, 1]: 0 on even half-periods, 1 on odd ones.
/// Needs `EDGE_FEATHER < period`.
fn square_wave(x: f64, period: f64) -> f64 {
    let u = x.rem_euclid(2.0 * period);
    box_weight(u, period, 2.0 * period) + box_weight(u, -period, 0.0)
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let t = t as f32;
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// In-plane coordinates of a point on `wall`: x-walls use `(z, y)`, y-walls
/// `(x, z)`, z-walls `(x, y)`.
pub fn wall_coords(wall: WallId, p: &Vector3<f64>) -> (f64, f64) {
    match wall / 2 {
        0 => (p.z, p.y),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

fn wall_span(extents: &[f64; 3], wall: WallId) -> (f64, f64) {
    match wall / 2 {
        0 => (extents[2], extents[1]),
        1 => (extents[0], extents[2]),
        _ => (extents[0], extents[1]),
    }
}

impl RoomSpec {
    /// Seeded random room with default extents.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_700d);
        let extents = DEFAULT_EXTENTS;
        let palette = rand_color(&mut rng);
        let walls: [WallStyle; 6] = std::array::from_fn(|_| {
            let base = palette.map(|v| (v + rng.gen_range(-WALL_SPREAD..WALL_SPREAD)).clamp(0.0, 1.0));
            let delta = if rng.gen_bool(0.5) { 0.12 } else { -0.12 };
            let period = rng.gen_range(0.3..0.9);
            let pattern = match rng.gen_range(0..3) {
                0 => Pattern::Checker { period },
                1 => Pattern::Stripes {
                    period,
                    along_a: true,
                },
                _ => Pattern::Stripes {
                    period,
                    along_a: false,
                },
            };
            WallStyle {
                base,
                secondary: shade(base, delta),
                pattern,
            }
        });
        let walls_base = walls.map(|w| w.base);
        let mut decals = Vec::new();
        for wall in 0..6 {
            let (sa, sb) = wall_span(&extents, wall);
            for _ in 0..rng.gen_range(2..5) {
                let wa = rng.gen_range(0.4..1.4);
                let wb = rng.gen_range(0.3..1.0);
                let a0 = rng.gen_range(0.1..(sa - wa - 0.1));
                let b0 = rng.gen_range(0.1..(sb - wb - 0.1));
                decals.push(Decal {
                    wall,
                    a0,
                    b0,
                    a1: a0 + wa,
                    b1: b0 + wb,
                    color: tint(walls_base[wall], &mut rng),
                });
            }
        }
        Self {
            extents,
            palette,
            walls,
            decals,
            seed,
        }
    }

    /// The shipped test rooms.
    pub fn fixtures() -> Vec<Self> {
        (0..FIXTURE_ROOMS as u64).map(Self::random).collect()
    }

    /// Center of the floor plan at camera height.
    pub fn default_camera_position(&self) -> Vector3<f64> {
        Vector3::new(
            self.extents[0] / 2.0,
            self.extents[1] - CAMERA_HEIGHT,
            self.extents[2] / 2.0,
        )
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|i| p[i] > margin && p[i] < self.extents[i] - margin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidArgument(format!("room extents {:?}", self.extents)));
        }
        for w in &self.walls {
            let period = match w.pattern {
                Pattern::Checker { period } | Pattern::Stripes { period, .. } => period,
            };
            if !(period > 0.0) {
                return Err(Error::InvalidArgument(format!("texture period {period}")));
            }
        }
        Ok(())
    }

    /// Surface color at a point on `wall`.
    pub fn color_at(&self, wall: WallId, p: &Vector3<f64>) -> Rgb {
        let (a, b) = wall_coords(wall, p);
        let style = &self.walls[wall];
        let t = match style.pattern {
            Pattern::Checker { period } => {
                let (sa, sb) = (square_wave(a, period), square_wave(b, period));
                sa + sb - 2.0 * sa * sb
            }
            Pattern::Stripes { period, along_a } => square_wave(if along_a { a } else { b }, period),
        };
        let mut color = lerp(style.base, style.secondary, t);
        for d in self.decals.iter().filter(|d| d.wall == wall) {
            let w = box_weight(a, d.a0, d.a1) * box_weight(b, d.b0, d.b1);
            if w > 0.0 {
                color = lerp(color, d.color, w);
            }
        }
        let (sa, sb) = wall_span(&self.extents, wall);
        let border = a.min(sa - a).min(b).min(sb - b).max(0.0);
        lerp(self.palette, color, smoothstep(border / CORNER_FEATHER))
    }

    /// First wall hit by the ray `origin + t * dir`, `t > 0`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for axis in 0..3 {
            let d = dir[axis];
            if d == 0.0 {
                continue;
            }
            let (plane, wall) = if d > 0.0 {
                (self.extents[axis], axis * 2 + 1)
            } else {
                (0.0, axis * 2)
            };
            let t = (plane - origin[axis]) / d;
            if !(t > 0.0) || best.is_some_and(|b| b.t <= t) {
                continue;
            }
            let mut point = origin + dir * t;
            point[axis] = plane;
            best = Some(Hit { t, wall, point });
        }
        best
    }
}

/// Renders color (supersampled) and planar depth (center ray) for a camera
/// inside the room. Colors are quantized to 8 bits.
pub fn raycast_render(room: &RoomSpec, intrinsics: &CameraIntrinsics, pose: &Pose) -> Result<(Image, DepthMap)> {
    intrinsics.validate()?;
    let c = pose.translation;
    if !room.contains(&c, 0.0) {
        return Err(Error::CameraOutsideRoom {
            x: c.x,
            y: c.y,
            z: c.z,
        });
    }
    let (h, w) = (intrinsics.height, intrinsics.width);
    let r = pose.rotation;
    let cast = |row: f64, col: f64| -> (f64, Rgb) {
        let ray_c = intrinsics.pixel_ray(row, col);
        let dir = r * ray_c;
        match room.raycast(&c, &dir) {
            // With a unit-z camera ray, the ray parameter is the planar depth.
            Some(hit) => (hit.t, room.color_at(hit.wall, &hit.point)),
            None => (f64::NAN, [0.0; 3]),
        }
    };
    let rows: Vec<(Vec<f64>, Vec<Rgb>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut depths = Vec::with_capacity(w);
            let mut colors = Vec::with_capacity(w);
            for col in 0..w {
                let (d, _) = cast(row as f64, col as f64);
                let mut acc = [0.0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let oy = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let ox = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let (_, col_rgb) = cast(row as f64 + oy, col as f64 + ox);
                        for k in 0..3 {
                            acc[k] += col_rgb[k] as f64;
                        }
                    }
                }
                let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                depths.push(d);
                colors.push(acc.map(|v| (v / n) as f32));
            }
            (depths, colors)
        })
        .collect();
    let mut depth = Vec::with_capacity(h * w);
    let mut color = Vec::with_capacity(h * w);
    for (d, c) in rows {
        depth.extend(d);
        color.extend(c);
    }
    let image = Grid::from_vec(h, w, color)?.quantized();
    Ok((image, DepthMap::all_valid(Grid::from_vec(h, w, depth)?)))
}

fn axis_rotation(axis: usize, deg: f64) -> Matrix3<f64> {
    let v = match axis {
        0 => Vector3::y(),
        1 => Vector3::x(),
        _ => Vector3::z(),
    };
    Rotation3::from_axis_angle(&Unit::new_normalize(v), deg.to_radians()).into_inner()
}

/// Pitch of a camera rotation in degrees (positive looks up).
pub fn pitch_of(rotation: &Matrix3<f64>) -> f64 {
    let fwd = rotation * Vector3::z();
    (-fwd.y).clamp(-1.0, 1.0).asin().to_degrees()
}

/// Random camera inside the room looking roughly horizontal.
pub fn random_camera(room: &RoomSpec, rng: &mut impl Rng) -> Pose {
    let m = 0.8;
    let pos = Vector3::new(
        rng.gen_range(m..room.extents[0] - m),
        room.extents[1] - CAMERA_HEIGHT + rng.gen_range(-0.2..0.2),
        rng.gen_range(m..room.extents[2] - m),
    );
    let yaw = rng.gen_range(0.0..360.0);
    let pitch = rng.gen_range(-5.0..5.0);
    Pose {
        rotation: yaw_pitch_rotation(yaw, pitch),
        translation: pos,
    }
}

/// Draws a source camera and a target camera related by one rotation of
/// `[min_deg, max_deg]` about a randomly chosen allowed axis (random sign)
/// and a translation of at most `max_translation`. Rejection-samples until
/// both cameras are inside the room and the target pitch stays within the
/// cap.
pub fn sample_pair(room: &RoomSpec, spec: &PairSpec, seed: u64) -> Result<(Pose, Pose)> {
    spec.validate()?;
    room.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes: Vec<usize> = [spec.yaw, spec.pitch, spec.roll]
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| i)
        .collect();
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let src = random_camera(room, &mut rng);
        let axis = axes[rng.gen_range(0..axes.len())];
        let angle = if spec.max_deg > spec.min_deg {
            rng.gen_range(spec.min_deg..=spec.max_deg)
        } else {
            spec.min_deg
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let rel = axis_rotation(axis, sign * angle);
        let dir = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let mag = if spec.max_translation > 0.0 {
            rng.gen_range(0.0..=spec.max_translation)
        } else {
            0.0
        };
        let tgt = Pose {
            rotation: src.rotation * rel,
            translation: src.translation + dir * mag,
        };
        if !room.contains(&tgt.translation, WALL_MARGIN) || pitch_of(&tgt.rotation).abs() > PITCH_CAP_DEG {
            continue;
        }
        return Ok((src, tgt));
    }
    Err(Error::RejectionExhausted(MAX_PAIR_ATTEMPTS))
}

/// Angle of the relative rotation between two poses, in degrees.
pub fn relative_angle_deg(a: &Pose, b: &Pose) -> f64 {
    let r = a.rotation.transpose() * b.rotation;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{splat_render, trim_border_with, unproject, FrameEdge, SplatParams};

    fn facing_front(room: &RoomSpec) -> Pose {
        Pose::from_translation(room.default_camera_position())
    }

    #[test]
    fn principal_ray_depth_is_wall_distance() {
        let room = RoomSpec::random(0);
        let cam = CameraIntrinsics::desk();
        let pose = facing_front(&room);
        let (_, depth) = raycast_render(&room, &cam, &pose).unwrap();
        let d = room.extents[2] - pose.translation.z;
        assert!((depth.values.get(32, 32) - d).abs() < 1e-12);
    }

    #[test]
    fn frontal_wall_ray_length_grows_with_angle() {
        let room = RoomSpec::random(1);
        let cam = CameraIntrinsics::desk();
        let pose = facing_front(&room);
        let (_, depth) = raycast_render(&room, &cam, &pose).unwrap();
        let d = room.extents[2] - pose.translation.z;
        for col in [24usize, 32, 40] {
            let ray = cam.pixel_ray(32.0, col as f64);
            let cos = 1.0 / ray.norm();
            let len = depth.values.get(32, col) * ray.norm();
            assert!((len - d / cos).abs() < 1e-9);
            // Planar depth stays constant across the frontal wall.
            assert!((depth.values.get(32, col) - d).abs() < 1e-9);
        }
    }

    #[test]
    fn hits_satisfy_plane_equations() {
        let room = RoomSpec::random(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let o = Vector3::new(
                rng.gen_range(0.1..5.9),
                rng.gen_range(0.1..2.9),
                rng.gen_range(0.1..3.9),
            );
            let d = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let hit = room.raycast(&o, &d).unwrap();
            let axis = hit.wall / 2;
            let plane = if hit.wall % 2 == 1 { room.extents[axis] } else { 0.0 };
            let along = o[axis] + d[axis] * hit.t;
            assert!((along - plane).abs() < 1e-9);
            assert!(room.contains(&hit.point, -1e-9));
        }
    }

    #[test]
    fn camera_outside_is_an_error() {
        let room = RoomSpec::random(0);
        let pose = Pose::from_translation(Vector3::new(-1.0, 1.0, 1.0));
        assert!(matches!(
            raycast_render(&room, &CameraIntrinsics::desk(), &pose),
            Err(Error::CameraOutsideRoom { .. })
        ));
    }

    #[test]
    fn rendering_is_deterministic_and_quantized() {
        let room = RoomSpec::random(4);
        let cam = CameraIntrinsics::desk();
        let pose = Pose {
            rotation: yaw_pitch_rotation(30.0, 10.0),
            translation: room.default_camera_position(),
        };
        let a = raycast_render(&room, &cam, &pose).unwrap();
        let b = raycast_render(&room, &cam, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, a.0.quantized());
    }

    #[test]
    fn ten_degree_reprojection_matches_oracle() {
        for seed in 0..8 {
            check_reprojection(seed);
        }
    }

    fn check_reprojection(seed: u64) {
        let room = RoomSpec::random(seed);
        let cam = CameraIntrinsics::desk();
        let src = facing_front(&room);
        let tgt = Pose {
            rotation: yaw_pitch_rotation(10.0, 0.0),
            translation: src.translation,
        };
        let (img, depth) = raycast_render(&room, &cam, &src).unwrap();
        let cloud = unproject(&img, &depth, &cam, &src, 0).unwrap();
        let r = splat_render(&cloud, &cam, &tgt, &SplatParams::default()).unwrap();
        let r = trim_border_with(&r, 0.5, 2, FrameEdge::Foreground);
        let (truth, _) = raycast_render(&room, &cam, &tgt).unwrap();
        let mut se = 0.0;
        let mut n = 0usize;
        for i in 0..truth.len() {
            if r.visible.as_slice()[i] {
                for c in 0..3 {
                    let e = (r.image.as_slice()[i][c] - truth.as_slice()[i][c]) as f64;
                    se += e * e;
                }
                n += 3;
            }
        }
        let psnr = 10.0 * (1.0 / (se / n as f64)).log10();
        assert!(psnr >= 30.0, "room {seed}: psnr {psnr}");
    }

    #[test]
    fn zero_spec_gives_identical_poses() {
        let room = RoomSpec::random(0);
        let spec = PairSpec {
            min_deg: 0.0,
            max_deg: 0.0,
            max_translation: 0.0,
            ..PairSpec::default()
        };
        let (a, b) = sample_pair(&room, &spec, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_respect_bounds() {
        let room = RoomSpec::random(0);
        let spec = PairSpec::default();
        for seed in 0..10_000 {
            let (a, b) = sample_pair(&room, &spec, seed).unwrap();
            let ang = relative_angle_deg(&a, &b);
            assert!((20.0 - 1e-6..=60.0 + 1e-6).contains(&ang), "angle {ang}");
            assert!((a.translation - b.translation).norm() <= 1.0 + 1e-12);
            assert!(room.contains(&a.translation, 0.0) && room.contains(&b.translation, 0.0));
        }
    }

    #[test]
    fn pair_sampling_is_seeded() {
        let room = RoomSpec::random(3);
        let spec = PairSpec::default();
        assert_eq!(sample_pair(&room, &spec, 77).unwrap(), sample_pair(&room, &spec, 77).unwrap());
        assert_ne!(sample_pair(&room, &spec, 77).unwrap(), sample_pair(&room, &spec, 78).unwrap());
    }

    #[test]
    fn impossible_spec_exhausts_rejection() {
        let room = RoomSpec::random(0);
        let spec = PairSpec {
            min_deg: 50.0,
            max_deg: 60.0,
            max_translation: 0.0,
            yaw: false,
            pitch: true,
            roll: false,
        };
        assert!(matches!(sample_pair(&room, &spec, 1), Err(Error::RejectionExhausted(_))));
    }

    #[test]
    fn axis_rotation_signs_follow_pose_convention() {
        let y = axis_rotation(0, 25.0);
        let p = axis_rotation(1, 15.0);
        assert!((y - yaw_pitch_rotation(25.0, 0.0)).abs().max() < 1e-12);
        assert!((p - yaw_pitch_rotation(0.0, 15.0)).abs().max() < 1e-12);
        assert!((pitch_of(&p) - 15.0).abs() < 1e-9);
    }
}
