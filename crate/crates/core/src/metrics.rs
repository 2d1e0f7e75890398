//! PSNR, homography warping and the two-direction consistency protocol for
//! views related by a pure rotation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_homography, CameraIntrinsics, Pose};
use crate::grid::{Grid, Image, Mask};
use crate::{Error, Result};

pub const MIN_OVERLAP: f64 = 0.05;
/// Stand-in for an infinite PSNR when it has to enter an average.
pub const IDENTICAL_DB_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio with a distinguished value for identical
/// inputs. Serializes as a number of dB or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    /// dB value, with [`Psnr::Identical`] mapped to [`IDENTICAL_DB_CAP`].
    pub fn capped(&self) -> f64 {
        match *self {
            Psnr::Db(v) => v.min(IDENTICAL_DB_CAP),
            Psnr::Identical => IDENTICAL_DB_CAP,
        }
    }

    pub fn is_identical(&self) -> bool {
        matches!(self, Psnr::Identical)
    }

    /// Mean of two values; identical only if both are.
    pub fn mean(a: Psnr, b: Psnr) -> Psnr {
        match (a, b) {
            (Psnr::Identical, Psnr::Identical) => Psnr::Identical,
            _ => Psnr::Db(0.5 * (a.capped() + b.capped())),
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.3} dB"),
            Psnr::Identical => write!(f, "inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr::Db(v)),
            Repr::Str(s) if s == "inf" => Ok(Psnr::Identical),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr {s:?}"))),
        }
    }
}

/// `10 log10(1 / MSE)` over the masked pixels (all channels), peak 1.
pub fn psnr(a: &Image, b: &Image, mask: &Mask) -> Result<Psnr> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(Error::Shape("psnr inputs differ in shape".into()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for ((pa, pb), &m) in a.as_slice().iter().zip(b.as_slice()).zip(mask.as_slice()) {
        if m {
            for c in 0..3 {
                let d = (pa[c] - pb[c]) as f64;
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Empty("psnr mask selects no pixels".into()));
    }
    if se == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (n as f64 / se).log10()))
}

/// Inverse-warps `image` through the pixel homography `h` (source pixel
/// `(u, v) = (col, row)` to output pixel) with bilinear sampling. An output
/// pixel is valid when all four bilinear taps lie inside the source and its
/// homogeneous coordinate is positive.
pub fn warp_by_homography(image: &Image, h: &Matrix3<f64>, out_height: usize, out_width: usize) -> Result<(Image, Mask)> {
    let inv = h.try_inverse().ok_or(Error::SingularHomography)?;
    if !inv.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 {
        return Err(Error::SingularHomography);
    }
    let (sh, sw) = (image.height(), image.width());
    let mut out = Grid::filled(out_height, out_width, [0.0f32; 3]);
    let mut valid = Grid::filled(out_height, out_width, false);
    for row in 0..out_height {
        for col in 0..out_width {
            let p = inv * Vector3::new(col as f64, row as f64, 1.0);
            // Non-positive w: the ray points behind the source camera.
            if p.z <= 1e-12 {
                continue;
            }
            let (x, y) = (p.x / p.z, p.y / p.z);
            // A tiny slack keeps exact integer coordinates on the last
            // row/column inside.
            let eps = 1e-9;
            if !(x >= -eps && y >= -eps && x <= (sw - 1) as f64 + eps && y <= (sh - 1) as f64 + eps) {
                continue;
            }
            let x = x.clamp(0.0, (sw - 1) as f64);
            let y = y.clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
            let (a, b) = (image.get(y0, x0), image.get(y0, x1));
            let (c, d) = (image.get(y1, x0), image.get(y1, x1));
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bot = c[k] + (d[k] - c[k]) * fx;
                px[k] = top + (bot - top) * fy;
            }
            out.set(row, col, px);
            valid.set(row, col, true);
        }
    }
    Ok((out, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub psnr_extreme_to_mid: Psnr,
    pub psnr_mid_to_extreme: Psnr,
    pub mean: Psnr,
    pub overlap_extreme_to_mid: f64,
    pub overlap_mid_to_extreme: f64,
}

/// Scores two views of one camera center: warps each onto the other with
/// the rotation homography and takes masked PSNR on the overlaps.
pub fn consistency_between(
    intrinsics: &CameraIntrinsics,
    mid_pose: &Pose,
    mid: &Image,
    extreme_pose: &Pose,
    extreme: &Image,
) -> Result<ConsistencyReport> {
    let (h, w) = (intrinsics.height, intrinsics.width);
    let e_to_m = rotation_homography(intrinsics, &extreme_pose.relative_rotation_to(mid_pose))?;
    let m_to_e = rotation_homography(intrinsics, &mid_pose.relative_rotation_to(extreme_pose))?;
    let (warped_e, valid_e) = warp_by_homography(extreme, &e_to_m, h, w)?;
    let (warped_m, valid_m) = warp_by_homography(mid, &m_to_e, h, w)?;
    let overlap_e = valid_e.fraction();
    let overlap_m = valid_m.fraction();
    let worst = overlap_e.min(overlap_m);
    if worst < MIN_OVERLAP {
        return Err(Error::InsufficientOverlap(worst));
    }
    let a = psnr(&warped_e, mid, &valid_e)?;
    let b = psnr(&warped_m, extreme, &valid_m)?;
    Ok(ConsistencyReport {
        psnr_extreme_to_mid: a,
        psnr_mid_to_extreme: b,
        mean: Psnr::mean(a, b),
        overlap_extreme_to_mid: overlap_e,
        overlap_mid_to_extreme: overlap_m,
    })
}

/// Renders the half rotation `(yaw/2, pitch/2)` and the full rotation
/// `(yaw, pitch)` from `base` with `render` and scores their consistency.
pub fn consistency_eval(
    mut render: impl FnMut(&Pose) -> Result<Image>,
    intrinsics: &CameraIntrinsics,
    base: &Pose,
    yaw_deg: f64,
    pitch_deg: f64,
) -> Result<ConsistencyReport> {
    let mid_pose = base.compose(&Pose::from_yaw_pitch(yaw_deg / 2.0, pitch_deg / 2.0));
    let extreme_pose = base.compose(&Pose::from_yaw_pitch(yaw_deg, pitch_deg));
    let mid = render(&mid_pose)?;
    let extreme = render(&extreme_pose)?;
    consistency_between(intrinsics, &mid_pose, &mid, &extreme_pose, &extreme)
}
