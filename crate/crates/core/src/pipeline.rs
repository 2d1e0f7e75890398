//! Scene synthesis: support-view outpainting, composite refinement, point
//! cloud accumulation, intermediate re-rendering and panoramas.
//!
//! A [`SceneState`] starts as the lifted input views. Each support view is
//! rendered from the accumulated clouds, its missing tokens are sampled
//! several times by the AR model, one completion is picked by
//! [`rank_combine`], composited over the reprojection and lifted back into
//! the scene with diffused depth. Views between supports are then plain
//! renders of the accumulated clouds, so they agree with each other by
//! construction.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::ArModel;
use crate::codebook::{decode, encode, Codebook, DEFAULT_KNOWN_FRACTION};
use crate::geometry::{
    splat_render_many, trim_border_with, unproject, unproject_where, CameraIntrinsics, DepthMap,
    FrameEdge, PointCloud, Pose, RenderResult, SplatParams, DEFAULT_COVERAGE_THRESHOLD,
    DEFAULT_ERODE_PX, DEFAULT_POINTS_PER_PIXEL, DEFAULT_RADIUS_PX, DEFAULT_SURFACE_TOLERANCE,
    NO_SOURCE,
};
use crate::grid::{Grid, Image, Mask};
use crate::metrics::{consistency_eval, ConsistencyReport};
use crate::ordering::generate_order;
use crate::selection::{detail_score, entropy_score, rank_combine, ScoredSample};
use crate::{Error, Result};

pub const DEFAULT_SAMPLES: usize = 8;
pub const DEFAULT_FEATHER_PX: usize = 2;
pub const DEFAULT_FILL_ITERS: usize = 32;
pub const DEFAULT_MAX_HOLE_FRACTION: f64 = 0.02;
pub const DEFAULT_SUPPORT_YAW: f64 = 40.0;
pub const DEFAULT_SUPPORT_PITCH: f64 = 20.0;
pub const DEFAULT_SEQUENTIAL_HOPS: usize = 2;

/// The eight support directions in synthesis order, as (name, yaw sign,
/// pitch sign). Positive pitch looks up, positive yaw turns right.
pub const PANORAMA_DIRECTIONS: [(&str, f64, f64); 8] = [
    ("up", 0.0, 1.0),
    ("left", -1.0, 0.0),
    ("down", 0.0, -1.0),
    ("right", 1.0, 0.0),
    ("up-left", -1.0, 1.0),
    ("up-right", 1.0, 1.0),
    ("down-left", -1.0, -1.0),
    ("down-right", 1.0, -1.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Outpaint the extreme view first, render everything in between.
    #[default]
    SupportFirst,
    /// Outpaint nearest-first in hops towards the extreme view.
    Sequential,
    /// Never accumulate: every view is an independent outpaint of the input.
    NoAccumulation,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SupportFirst, Strategy::Sequential, Strategy::NoAccumulation];

    pub fn accumulates(self) -> bool {
        self != Strategy::NoAccumulation
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SupportFirst => "support_first",
            Strategy::Sequential => "sequential",
            Strategy::NoAccumulation => "no_accumulation",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub radius_px: usize,
    pub points_per_pixel: usize,
    pub surface_tolerance: f64,
    pub coverage_threshold: f64,
    pub erode_px: usize,
    pub known_fraction: f64,
    pub samples: usize,
    pub temperature: f64,
    pub feather_px: usize,
    pub fill_iters: usize,
    pub max_hole_fraction: f64,
    pub support_yaw: f64,
    pub support_pitch: f64,
    pub sequential_hops: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            radius_px: DEFAULT_RADIUS_PX,
            points_per_pixel: DEFAULT_POINTS_PER_PIXEL,
            surface_tolerance: DEFAULT_SURFACE_TOLERANCE,
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
            erode_px: DEFAULT_ERODE_PX,
            known_fraction: DEFAULT_KNOWN_FRACTION,
            samples: DEFAULT_SAMPLES,
            temperature: crate::ar::DEFAULT_TEMPERATURE,
            feather_px: DEFAULT_FEATHER_PX,
            fill_iters: DEFAULT_FILL_ITERS,
            max_hole_fraction: DEFAULT_MAX_HOLE_FRACTION,
            support_yaw: DEFAULT_SUPPORT_YAW,
            support_pitch: DEFAULT_SUPPORT_PITCH,
            sequential_hops: DEFAULT_SEQUENTIAL_HOPS,
        }
    }
}

impl PipelineConfig {
    pub fn splat(&self) -> SplatParams {
        SplatParams {
            radius_px: self.radius_px,
            points_per_pixel: self.points_per_pixel,
            surface_tolerance: self.surface_tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.radius_px >= 1
            && self.points_per_pixel >= 1
            && self.surface_tolerance >= 0.0
            && (0.0..=1.0).contains(&self.coverage_threshold)
            && (0.0..=1.0).contains(&self.known_fraction)
            && self.samples >= 1
            && self.temperature >= 0.0
            && (0.0..=1.0).contains(&self.max_hole_fraction)
            && self.support_yaw >= 0.0
            && self.support_pitch >= 0.0
            && self.sequential_hops >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad pipeline config {self:?}")))
        }
    }
}

/// The learned half of the pipeline: token codebook and AR model.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub codebook: Codebook,
    pub model: ArModel,
}

impl Generator {
    /// Parameters are rounded to `f32`, the precision they are saved at, so a
    /// saved and reloaded scene samples exactly the same completions.
    pub fn new(codebook: Codebook, model: ArModel) -> Result<Self> {
        if model.config().vocab != codebook.k() {
            return Err(Error::Shape(format!(
                "model vocabulary {} vs codebook size {}",
                model.config().vocab,
                codebook.k()
            )));
        }
        Ok(Self {
            codebook,
            model: model.quantized(),
        })
    }
}

/// Where a cloud came from. Point source tags index [`SceneState::origins`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Origin {
    Input(usize),
    Support(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCloud {
    pub cloud: PointCloud,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportView {
    pub pose: Pose,
    pub image: Image,
    /// Observed depth where the reprojection was visible, diffused elsewhere.
    pub depth: DepthMap,
    pub unknown_tokens: usize,
    pub new_points: usize,
}

/// One input view: image, depth and world-from-camera pose.
#[derive(Debug, Clone)]
pub struct InputView {
    pub image: Image,
    pub depth: DepthMap,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct SceneState {
    pub intrinsics: CameraIntrinsics,
    pub base_pose: Pose,
    /// Accumulated clouds: every input, plus supports when the strategy
    /// accumulates.
    pub clouds: Vec<TaggedCloud>,
    /// Support clouds kept out of rendering (NoAccumulation).
    pub detached: Vec<TaggedCloud>,
    pub support_views: Vec<SupportView>,
    /// Source tag -> origin. Tags are assigned in creation order.
    pub origins: Vec<Origin>,
    pub strategy: Strategy,
    pub config: PipelineConfig,
    pub seed: u64,
    pub generator: Option<Arc<Generator>>,
}

/// Result of one [`outpaint_support`] call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutpaintReport {
    pub unknown_tokens: usize,
    pub total_tokens: usize,
    pub sampled: bool,
    pub chosen_sample: Option<usize>,
    pub new_points: usize,
}

/// A rendered view with per-pixel bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub coverage: Grid<f64>,
    /// Pixels taken from the reprojection rather than generated or filled.
    pub visible: Mask,
    /// Fraction of pixels not visible in the reprojection.
    pub hole_fraction: f64,
    /// Source tag per pixel; [`NO_SOURCE`] only where nothing could be filled.
    pub source: Grid<u16>,
    /// Whether this render sampled the AR model.
    pub outpainted: bool,
}

/// Everything one outpaint produces before it is committed to a scene.
struct Synthesis {
    view: View,
    depth: DepthMap,
    newly: Mask,
    report: OutpaintReport,
}

/// Lifts every input into its own cloud. Source tags are input indices.
pub fn init_scene(
    inputs: &[InputView],
    intrinsics: CameraIntrinsics,
    config: PipelineConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<SceneState> {
    if inputs.is_empty() {
        return Err(Error::Empty("no input views".into()));
    }
    intrinsics.validate()?;
    config.validate()?;
    let mut clouds = Vec::with_capacity(inputs.len());
    for (i, v) in inputs.iter().enumerate() {
        let tag = u16::try_from(i).map_err(|_| Error::InvalidArgument("too many inputs".into()))?;
        clouds.push(TaggedCloud {
            cloud: unproject(&v.image, &v.depth, &intrinsics, &v.pose, tag)?,
            origin: Origin::Input(i),
        });
    }
    Ok(SceneState {
        intrinsics,
        base_pose: inputs[0].pose,
        origins: (0..inputs.len()).map(Origin::Input).collect(),
        clouds,
        detached: Vec::new(),
        support_views: Vec::new(),
        strategy,
        config,
        seed,
        generator: None,
    })
}

impl SceneState {
    pub fn with_generator(mut self, generator: Arc<Generator>) -> Self {
        self.generator = Some(generator);
        self
    }

    pub fn point_count(&self) -> usize {
        self.clouds.iter().map(|c| c.cloud.len()).sum()
    }

    pub fn input_count(&self) -> usize {
        self.origins.iter().filter(|o| matches!(o, Origin::Input(_))).count()
    }

    fn generator(&self) -> Result<&Generator> {
        self.generator.as_deref().ok_or(Error::MissingComponent("codebook and AR model"))
    }

    fn input_clouds(&self) -> Vec<&PointCloud> {
        self.clouds
            .iter()
            .filter(|c| matches!(c.origin, Origin::Input(_)))
            .map(|c| &c.cloud)
            .collect()
    }

    fn all_clouds(&self) -> Vec<&PointCloud> {
        self.clouds.iter().map(|c| &c.cloud).collect()
    }

    /// Switches strategy, moving support clouds in or out of rendering.
    pub fn set_strategy(&mut self, strategy: Strategy) {
        if strategy.accumulates() && !self.strategy.accumulates() {
            self.clouds.append(&mut self.detached);
            self.clouds.sort_by_key(|c| origin_key(c.origin));
        } else if !strategy.accumulates() && self.strategy.accumulates() {
            let (keep, moved): (Vec<_>, Vec<_>) = std::mem::take(&mut self.clouds)
                .into_iter()
                .partition(|c| matches!(c.origin, Origin::Input(_)));
            self.clouds = keep;
            self.detached.extend(moved);
            self.detached.sort_by_key(|c| origin_key(c.origin));
        }
        self.strategy = strategy;
    }

    /// Point counts by origin over accumulated and detached clouds.
    pub fn points_by_origin(&self) -> Vec<(Origin, usize)> {
        let mut out: Vec<_> = self
            .clouds
            .iter()
            .chain(&self.detached)
            .map(|c| (c.origin, c.cloud.len()))
            .collect();
        out.sort_by_key(|(o, _)| origin_key(*o));
        out
    }

    /// Origin of a point source tag.
    pub fn origin_of(&self, tag: u16) -> Option<Origin> {
        self.origins.get(tag as usize).copied()
    }

    fn synthesize(&self, pose: &Pose, clouds: &[&PointCloud], tag: u16) -> Result<Synthesis> {
        let generator = self.generator()?;
        let cfg = &self.config;
        let render = splat_render_many(clouds, &self.intrinsics, pose, &cfg.splat())?;
        let trimmed = trim_border_with(&render, cfg.coverage_threshold, cfg.erode_px, FrameEdge::Foreground);
        let partial = encode(&trimmed.image, &trimmed.visible, &generator.codebook, cfg.known_fraction)?;
        let unknown = partial.unknown_count();
        let total = partial.tokens.len();
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        if unknown == 0 {
            let (image, source) = composite(None, &trimmed, NO_SOURCE, cfg.feather_px, cfg.fill_iters)?;
            return Ok(Synthesis {
                view: View {
                    image,
                    coverage: trimmed.coverage.clone(),
                    visible: trimmed.visible.clone(),
                    hole_fraction: 1.0 - trimmed.visible.fraction(),
                    source,
                    outpainted: false,
                },
                depth: trimmed.visible_depth(),
                newly: Grid::filled(h, w, false),
                report: OutpaintReport {
                    unknown_tokens: 0,
                    total_tokens: total,
                    sampled: false,
                    chosen_sample: None,
                    new_points: 0,
                },
            });
        }
        let order = generate_order(&partial.known);
        let model = &generator.model;
        let base_seed = outpaint_seed(self.seed, self.support_views.len());
        let candidates: Vec<(Image, ScoredSample)> = (0..cfg.samples)
            .into_par_iter()
            .map(|i| {
                let completed = model.sample(&partial, &order, cfg.temperature, base_seed.wrapping_add(i as u64))?;
                let image = decode(&completed, &generator.codebook)?;
                let scored = ScoredSample {
                    index: i,
                    detail_score: detail_score(&image),
                    entropy_score: entropy_score(model, &completed, &order)?,
                };
                Ok((image, scored))
            })
            .collect::<Result<_>>()?;
        let scores: Vec<ScoredSample> = candidates.iter().map(|(_, s)| *s).collect();
        let chosen = rank_combine(&scores)?;
        let outpainted = &candidates[chosen].0;
        let (image, source) = composite(Some(outpainted), &trimmed, tag, cfg.feather_px, cfg.fill_iters)?;
        let newly = trimmed.visible.map(|&v| !v);
        let depth = depth_fill(&trimmed.visible_depth(), &newly, cfg.fill_iters)?;
        Ok(Synthesis {
            view: View {
                image,
                coverage: trimmed.coverage.clone(),
                visible: trimmed.visible.clone(),
                hole_fraction: 1.0 - trimmed.visible.fraction(),
                source,
                outpainted: true,
            },
            depth,
            newly,
            report: OutpaintReport {
                unknown_tokens: unknown,
                total_tokens: total,
                sampled: true,
                chosen_sample: Some(chosen),
                new_points: 0,
            },
        })
    }
}

/// First sample seed of an outpaint. Mixing keeps the sample streams of
/// neighbouring scene seeds, and of successive supports, disjoint.
pub fn outpaint_seed(scene_seed: u64, support_index: usize) -> u64 {
    let mut z = scene_seed ^ (support_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn origin_key(o: Origin) -> (u8, usize) {
    match o {
        Origin::Input(i) => (0, i),
        Origin::Support(i) => (1, i),
    }
}

/// Outpaints the view at `support_pose` from the accumulated clouds and
/// lifts the newly generated pixels into a support cloud. Already covered
/// regions are never outpainted again: a fully covered view is recorded
/// without sampling.
pub fn outpaint_support(state: &mut SceneState, support_pose: &Pose) -> Result<OutpaintReport> {
    // Detached supports never reach a render, so coverage alone would not
    // stop a second outpaint of the same view.
    if state.support_views.iter().any(|s| s.pose == *support_pose && s.new_points > 0) {
        let generator = state.generator.as_ref().ok_or(Error::MissingComponent("generator"))?;
        let p = generator.codebook.patch();
        return Ok(OutpaintReport {
            unknown_tokens: 0,
            total_tokens: (state.intrinsics.height / p) * (state.intrinsics.width / p),
            sampled: false,
            chosen_sample: None,
            new_points: 0,
        });
    }
    let support_index = state.support_views.len();
    let tag = u16::try_from(state.origins.len())
        .ok()
        .filter(|&t| t != NO_SOURCE)
        .ok_or_else(|| Error::InvalidArgument("too many clouds in one scene".into()))?;
    let synth = {
        let clouds = state.all_clouds();
        state.synthesize(support_pose, &clouds, tag)?
    };
    let mut report = synth.report;
    let cloud = if report.sampled {
        unproject_where(&synth.view.image, &synth.depth, &state.intrinsics, support_pose, tag, Some(&synth.newly))?
    } else {
        PointCloud::default()
    };
    report.new_points = cloud.len();
    if !cloud.is_empty() {
        let tagged = TaggedCloud {
            cloud,
            origin: Origin::Support(support_index),
        };
        state.origins.push(tagged.origin);
        if state.strategy.accumulates() {
            state.clouds.push(tagged);
        } else {
            state.detached.push(tagged);
        }
    }
    state.support_views.push(SupportView {
        pose: *support_pose,
        image: synth.view.image.quantized(),
        depth: synth.depth,
        unknown_tokens: report.unknown_tokens,
        new_points: report.new_points,
    });
    Ok(report)
}

/// Renders `pose`. Accumulating strategies splat the accumulated clouds and
/// composite without sampling; NoAccumulation outpaints afresh from the
/// inputs and discards the result.
pub fn render_view(state: &SceneState, pose: &Pose) -> Result<View> {
    if !state.strategy.accumulates() {
        let clouds = state.input_clouds();
        let tag = u16::try_from(state.origins.len()).unwrap_or(NO_SOURCE);
        return Ok(state.synthesize(pose, &clouds, tag)?.view);
    }
    let cfg = &state.config;
    let render = splat_render_many(&state.all_clouds(), &state.intrinsics, pose, &cfg.splat())?;
    let trimmed = trim_border_with(&render, cfg.coverage_threshold, cfg.erode_px, FrameEdge::Foreground);
    let holes = trimmed.visible.map(|&v| !v);
    let hole_fraction = holes.fraction();
    if hole_fraction > cfg.max_hole_fraction {
        return Err(Error::InsufficientCoverage {
            hole_fraction,
            direction: nearest_support_direction(state, pose, &holes).to_string(),
        });
    }
    let (image, source) = composite(None, &trimmed, NO_SOURCE, cfg.feather_px, cfg.fill_iters)?;
    Ok(View {
        image,
        coverage: trimmed.coverage,
        visible: trimmed.visible,
        hole_fraction,
        source,
        outpainted: false,
    })
}

/// Name of the panorama direction closest to the centroid of `holes`, in
/// (yaw, pitch) degrees relative to the base pose, using the configured
/// support extents.
pub fn nearest_support_direction(state: &SceneState, pose: &Pose, holes: &Mask) -> &'static str {
    let n = holes.count().max(1) as f64;
    let (mut sr, mut sc) = (0.0, 0.0);
    for (r, c, &h) in holes.iter_indexed() {
        if h {
            sr += r as f64;
            sc += c as f64;
        }
    }
    let ray_cam = state.intrinsics.pixel_ray(sr / n, sc / n);
    let ray_base = state.base_pose.rotation.transpose() * (pose.rotation * ray_cam);
    let (yaw, pitch) = ray_angles(&ray_base);
    let (ey, ep) = (state.config.support_yaw.max(1e-6), state.config.support_pitch.max(1e-6));
    PANORAMA_DIRECTIONS
        .iter()
        .min_by(|a, b| {
            let da = (yaw - a.1 * ey).powi(2) + (pitch - a.2 * ep).powi(2);
            let db = (yaw - b.1 * ey).powi(2) + (pitch - b.2 * ep).powi(2);
            da.total_cmp(&db)
        })
        .map(|d| d.0)
        .expect("eight directions")
}

/// Viewing direction of `pose` as (yaw, pitch) degrees relative to `base`.
pub fn relative_yaw_pitch(base: &Pose, pose: &Pose) -> (f64, f64) {
    ray_angles(&(base.rotation.transpose() * pose.rotation * Vector3::z()))
}

/// Yaw (right positive) and pitch (up positive) of a camera-frame ray, degrees.
fn ray_angles(ray: &Vector3<f64>) -> (f64, f64) {
    let yaw = ray.x.atan2(ray.z).to_degrees();
    let pitch = (-ray.y).atan2(ray.x.hypot(ray.z)).to_degrees();
    (yaw, pitch)
}

/// Support poses that prepare the view change `(yaw, pitch)` from the base
/// pose: the extreme view alone for SupportFirst, evenly spaced hops ending
/// at the extreme for Sequential, none for NoAccumulation.
pub fn support_poses(state: &SceneState, yaw_deg: f64, pitch_deg: f64) -> Vec<Pose> {
    let at = |f: f64| state.base_pose.compose(&Pose::from_yaw_pitch(f * yaw_deg, f * pitch_deg));
    match state.strategy {
        Strategy::SupportFirst => vec![at(1.0)],
        Strategy::Sequential => {
            let hops = state.config.sequential_hops;
            (1..=hops).map(|k| at(k as f64 / hops as f64)).collect()
        }
        Strategy::NoAccumulation => Vec::new(),
    }
}

/// Progress of a panorama: one event per completed support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanoramaProgress {
    pub direction: &'static str,
    pub completed: usize,
    pub total: usize,
    pub report: OutpaintReport,
}

/// Outpaints supports in the eight directions in order, each at the full
/// extent (diagonals at full yaw and pitch). Sequential reaches each
/// extreme in hops; NoAccumulation outpaints the extremes but keeps them
/// detached.
pub fn synthesize_panorama(
    state: &mut SceneState,
    yaw_extent: f64,
    pitch_extent: f64,
    mut progress: impl FnMut(&PanoramaProgress),
) -> Result<Vec<OutpaintReport>> {
    if !(yaw_extent >= 0.0 && pitch_extent >= 0.0 && yaw_extent.is_finite() && pitch_extent.is_finite()) {
        return Err(Error::InvalidArgument("panorama extents must be non-negative".into()));
    }
    let plan: Vec<(&'static str, Pose)> = PANORAMA_DIRECTIONS
        .iter()
        .flat_map(|&(name, sy, sp)| {
            let (y, p) = (sy * yaw_extent, sp * pitch_extent);
            let poses = match state.strategy {
                Strategy::Sequential => support_poses(state, y, p),
                _ => vec![state.base_pose.compose(&Pose::from_yaw_pitch(y, p))],
            };
            poses.into_iter().map(move |pose| (name, pose))
        })
        .collect();
    let total = plan.len();
    let mut reports = Vec::with_capacity(total);
    for (i, (direction, pose)) in plan.into_iter().enumerate() {
        let report = outpaint_support(state, &pose)?;
        progress(&PanoramaProgress {
            direction,
            completed: i + 1,
            total,
            report,
        });
        reports.push(report);
    }
    Ok(reports)
}

/// Outpaints the supports `strategy` needs for the view change and scores
/// the half and full rotation renders.
pub fn evaluate_consistency(state: &mut SceneState, yaw_deg: f64, pitch_deg: f64) -> Result<ConsistencyReport> {
    for pose in support_poses(state, yaw_deg, pitch_deg) {
        outpaint_support(state, &pose)?;
    }
    let state = &*state;
    consistency_eval(
        |pose| render_view(state, pose).map(|v| v.image),
        &state.intrinsics,
        &state.base_pose,
        yaw_deg,
        pitch_deg,
    )
}

/// Reprojection where visible, `outpainted` elsewhere, a cross-fade of
/// `feather_px` pixels on the visible side of the seam, and remaining
/// holes filled by up to `fill_iters` rounds of 8-neighbor averaging.
pub fn refine_composite(
    outpainted: Option<&Image>,
    reprojection: &RenderResult,
    feather_px: usize,
    fill_iters: usize,
) -> Result<Image> {
    Ok(composite(outpainted, reprojection, NO_SOURCE, feather_px, fill_iters)?.0)
}

/// [`refine_composite`] that also tracks per-pixel sources: reprojected
/// pixels keep theirs, outpainted pixels get `outpaint_tag`, filled pixels
/// inherit from a neighbor.
fn composite(
    outpainted: Option<&Image>,
    reprojection: &RenderResult,
    outpaint_tag: u16,
    feather_px: usize,
    fill_iters: usize,
) -> Result<(Image, Grid<u16>)> {
    let visible = &reprojection.visible;
    if let Some(o) = outpainted {
        if !o.same_shape(visible) {
            return Err(Error::Shape("outpainted image and reprojection differ".into()));
        }
    }
    let (h, w) = (visible.height(), visible.width());
    let mut image = Grid::from_fn(h, w, |r, c| match (*visible.get(r, c), outpainted) {
        (true, _) => *reprojection.image.get(r, c),
        (false, Some(o)) => *o.get(r, c),
        (false, None) => [0.0; 3],
    });
    let mut source = Grid::from_fn(h, w, |r, c| match (*visible.get(r, c), outpainted) {
        (true, _) => *reprojection.source.get(r, c),
        (false, Some(_)) => outpaint_tag,
        (false, None) => NO_SOURCE,
    });
    let Some(o) = outpainted else {
        fill_holes(&mut image, &mut source, visible.clone(), fill_iters);
        return Ok((image, source));
    };
    if feather_px > 0 {
        let dist = distance_to_unset(visible, feather_px + 1);
        for (r, c, &d) in dist.iter_indexed() {
            if *visible.get(r, c) && d <= feather_px {
                let t = d as f32 / (feather_px + 1) as f32;
                let (a, b) = (reprojection.image.get(r, c), o.get(r, c));
                image.set(r, c, [0, 1, 2].map(|k| t * a[k] + (1.0 - t) * b[k]));
            }
        }
    }
    Ok((image, source))
}

/// Chessboard distance of every pixel to the nearest unset pixel of `mask`,
/// saturating at `cap`; unset pixels are 0.
fn distance_to_unset(mask: &Mask, cap: usize) -> Grid<usize> {
    let mut dist = mask.map(|&m| if m { cap } else { 0 });
    let mut queue: VecDeque<(usize, usize)> = mask
        .iter_indexed()
        .filter(|(_, _, &m)| !m)
        .map(|(r, c, _)| (r, c))
        .collect();
    while let Some((r, c)) = queue.pop_front() {
        let d = *dist.get(r, c) + 1;
        if d >= cap {
            continue;
        }
        let around: Vec<_> = dist.neighbors8(r, c).collect();
        for (nr, nc) in around {
            if *dist.get(nr, nc) > d {
                dist.set(nr, nc, d);
                queue.push_back((nr, nc));
            }
        }
    }
    dist
}

/// Jacobi rounds of 8-neighbor averaging into undefined pixels. Sources are
/// copied from the first defined neighbor in scan order.
fn fill_holes(image: &mut Image, source: &mut Grid<u16>, mut defined: Mask, iters: usize) {
    for _ in 0..iters {
        let mut updates = Vec::new();
        for (r, c, &d) in defined.iter_indexed() {
            if d {
                continue;
            }
            let mut sum = [0.0f64; 3];
            let mut n = 0;
            let mut tag = NO_SOURCE;
            for (nr, nc) in defined.neighbors8(r, c) {
                if *defined.get(nr, nc) {
                    let p = image.get(nr, nc);
                    (0..3).for_each(|k| sum[k] += p[k] as f64);
                    if n == 0 {
                        tag = *source.get(nr, nc);
                    }
                    n += 1;
                }
            }
            if n > 0 {
                updates.push((r, c, sum.map(|s| (s / n as f64) as f32), tag));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (r, c, color, tag) in updates {
            image.set(r, c, color);
            source.set(r, c, tag);
            defined.set(r, c, true);
        }
    }
}

/// Depth for newly generated pixels by diffusion from the valid depths:
/// rounds of 8-neighbor averaging until every new pixel is reached or
/// `fill_iters` rounds pass, then the median valid depth for the rest,
/// all clamped to the observed range. Valid on valid and new pixels.
pub fn depth_fill(depth: &DepthMap, newly_generated: &Mask, fill_iters: usize) -> Result<DepthMap> {
    if !depth.values.same_shape(newly_generated) {
        return Err(Error::Shape("depth and newly generated mask differ".into()));
    }
    let mut observed: Vec<f64> = depth
        .values
        .as_slice()
        .iter()
        .zip(depth.valid.as_slice())
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d)
        .collect();
    if observed.is_empty() {
        return Err(Error::Empty("no valid depth to diffuse from".into()));
    }
    observed.sort_by(f64::total_cmp);
    let (lo, hi) = (observed[0], observed[observed.len() - 1]);
    let median = observed[observed.len() / 2];
    let mut values = depth.values.clone();
    let mut defined = depth.valid.clone();
    let target = Grid::from_fn(depth.height(), depth.width(), |r, c| {
        *newly_generated.get(r, c) && !*depth.valid.get(r, c)
    });
    let mut remaining = target.count();
    for _ in 0..fill_iters {
        if remaining == 0 {
            break;
        }
        let mut updates = Vec::new();
        for (r, c, &t) in target.iter_indexed() {
            if !t || *defined.get(r, c) {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for (nr, nc) in defined.neighbors8(r, c) {
                if *defined.get(nr, nc) {
                    sum += *values.get(nr, nc);
                    n += 1;
                }
            }
            if n > 0 {
                updates.push((r, c, sum / n as f64));
            }
        }
        if updates.is_empty() {
            break;
        }
        remaining -= updates.len();
        for (r, c, d) in updates {
            values.set(r, c, d);
            defined.set(r, c, true);
        }
    }
    for (r, c, &t) in target.iter_indexed() {
        if t {
            let d = if *defined.get(r, c) { *values.get(r, c) } else { median };
            values.set(r, c, d.clamp(lo, hi));
        }
    }
    let valid = Grid::from_fn(depth.height(), depth.width(), |r, c| {
        *depth.valid.get(r, c) || *newly_generated.get(r, c)
    });
    DepthMap::new(values, valid)
}

/// Pixel counts per origin in a rendered view; pixels without any source
/// are counted under `None`.
pub fn provenance_summary(state: &SceneState, view: &View) -> Vec<(Option<Origin>, usize)> {
    let mut counts: Vec<(Option<Origin>, usize)> = Vec::new();
    for &tag in view.source.as_slice() {
        let origin = if tag == NO_SOURCE { None } else { state.origin_of(tag) };
        match counts.iter_mut().find(|(o, _)| *o == origin) {
            Some((_, n)) => *n += 1,
            None => counts.push((origin, 1)),
        }
    }
    counts.sort_by_key(|(o, _)| o.map(origin_key));
    counts
}
