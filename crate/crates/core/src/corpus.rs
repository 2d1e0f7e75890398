//! Training corpus from the procedural world and the rotation curriculum.
//!
//! Each pair renders a source view, lifts it with oracle depth, splats it at
//! the target pose and trims the result. The visible tokens and the order
//! that grows outward from them form the input; the oracle target view,
//! fully encoded, is the label.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{ArModel, TrainBatch};
use crate::codebook::{encode, known_tokens, Codebook, TokenGrid, DEFAULT_KNOWN_FRACTION, DEFAULT_PATCH};
use crate::geometry::{
    splat_render, trim_border_with, unproject, CameraIntrinsics, DepthMap, FrameEdge, Pose, SplatParams,
    DEFAULT_COVERAGE_THRESHOLD, DEFAULT_ERODE_PX,
};
use crate::grid::{Image, Mask};
use crate::ordering::{generate_order, GenerationOrder};
use crate::world::{raycast_render, relative_angle_deg, sample_pair, PairSpec, RoomSpec};
use crate::{Error, Result};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub max_rotation: f64,
    pub iterations: usize,
}

/// Stages `base, 2*base, ...` clipped at `target`, each `stage_len` long.
pub fn curriculum_schedule(base_rot: f64, target_rot: f64, stage_len: usize) -> Result<Vec<Stage>> {
    if !(base_rot > 0.0 && base_rot <= target_rot && target_rot.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "curriculum needs 0 < base ({base_rot}) <= target ({target_rot})"
        )));
    }
    let mut stages = Vec::new();
    let mut k = 1.0;
    loop {
        let rot = (k * base_rot).min(target_rot);
        stages.push(Stage {
            max_rotation: rot,
            iterations: stage_len,
        });
        // Tolerate rounding when target is a multiple of base.
        if rot >= target_rot - 1e-9 * target_rot {
            break;
        }
        k += 1.0;
    }
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub intrinsics: CameraIntrinsics,
    pub splat: SplatParams,
    pub coverage_threshold: f64,
    pub erode_px: usize,
    pub patch: usize,
    pub known_fraction: f64,
    /// Rotation range is replaced per stage by `[0, max_rotation]`.
    pub pairs: PairSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::desk(),
            splat: SplatParams::default(),
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
            erode_px: DEFAULT_ERODE_PX,
            patch: DEFAULT_PATCH,
            known_fraction: DEFAULT_KNOWN_FRACTION,
            pairs: PairSpec::default(),
        }
    }
}

/// One rendered training pair, before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub room: usize,
    pub stage: usize,
    pub source: Pose,
    pub target: Pose,
    pub rotation_deg: f64,
    pub source_image: Image,
    pub source_depth: DepthMap,
    pub target_image: Image,
    pub target_depth: DepthMap,
    /// Trimmed reprojection of the source at the target pose.
    pub reprojection: Image,
    pub visible: Mask,
    pub order: GenerationOrder,
}

impl PairSample {
    pub fn unknown_fraction(&self) -> f64 {
        let total = self.order.height() * self.order.width();
        self.order.background_count() as f64 / total as f64
    }

    /// Partial grid from the reprojection and fully known label grid.
    pub fn tokenize(&self, codebook: &Codebook, known_fraction: f64) -> Result<Example> {
        let partial = encode(&self.reprojection, &self.visible, codebook, known_fraction)?;
        let all = self.target_image.map(|_| true);
        let label = encode(&self.target_image, &all, codebook, known_fraction)?;
        Ok(Example {
            partial,
            label,
            order: self.order.clone(),
            room: self.room,
            stage: self.stage,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub partial: TokenGrid,
    pub label: TokenGrid,
    pub order: GenerationOrder,
    pub room: usize,
    pub stage: usize,
}

/// Renders one pair; `None` when nothing is left to outpaint.
pub fn render_pair(
    room: &RoomSpec,
    room_index: usize,
    stage: usize,
    source: Pose,
    target: Pose,
    cfg: &CorpusConfig,
) -> Result<Option<PairSample>> {
    let k = &cfg.intrinsics;
    let (source_image, source_depth) = raycast_render(room, k, &source)?;
    let cloud = unproject(&source_image, &source_depth, k, &source, 0)?;
    let render = splat_render(&cloud, k, &target, &cfg.splat)?;
    let trimmed = trim_border_with(&render, cfg.coverage_threshold, cfg.erode_px, FrameEdge::Foreground);
    let known = known_tokens(&trimmed.visible, cfg.patch, cfg.known_fraction)?;
    let order = generate_order(&known);
    if order.background_count() == 0 {
        return Ok(None);
    }
    let (target_image, target_depth) = raycast_render(room, k, &target)?;
    Ok(Some(PairSample {
        room: room_index,
        stage,
        rotation_deg: relative_angle_deg(&source, &target),
        source,
        target,
        source_image,
        source_depth,
        target_image,
        target_depth,
        reprojection: trimmed.image,
        visible: trimmed.visible,
        order,
    }))
}

/// `pairs_per_room` pairs per room for every stage, with rotations up to the
/// stage maximum. Pairs with nothing to outpaint are skipped. Returned per
/// stage, deterministic in `seed`.
pub fn sample_corpus(
    rooms: &[RoomSpec],
    pairs_per_room: usize,
    schedule: &[Stage],
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<Vec<Vec<PairSample>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(schedule.len());
    for (s, stage) in schedule.iter().enumerate() {
        let spec = PairSpec {
            min_deg: 0.0,
            max_deg: stage.max_rotation,
            ..cfg.pairs
        };
        let jobs: Vec<(usize, u64)> = (0..rooms.len())
            .flat_map(|r| (0..pairs_per_room).map(move |_| r))
            .map(|r| (r, rng.gen()))
            .collect();
        let pairs: Vec<Option<PairSample>> = jobs
            .into_par_iter()
            .map(|(r, pair_seed)| {
                let (src, tgt) = sample_pair(&rooms[r], &spec, pair_seed)?;
                render_pair(&rooms[r], r, s, src, tgt, cfg)
            })
            .collect::<Result<_>>()?;
        out.push(pairs.into_iter().flatten().collect());
    }
    Ok(out)
}

/// [`sample_corpus`] tokenized with `codebook`.
pub fn build_corpus(
    rooms: &[RoomSpec],
    pairs_per_room: usize,
    schedule: &[Stage],
    codebook: &Codebook,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<Vec<Vec<Example>>> {
    check_patch(codebook, cfg)?;
    sample_corpus(rooms, pairs_per_room, schedule, cfg, seed)?
        .iter()
        .map(|stage| tokenize_all(stage, codebook, cfg.known_fraction))
        .collect()
}

pub fn tokenize_all(pairs: &[PairSample], codebook: &Codebook, known_fraction: f64) -> Result<Vec<Example>> {
    pairs.par_iter().map(|p| p.tokenize(codebook, known_fraction)).collect()
}

fn check_patch(codebook: &Codebook, cfg: &CorpusConfig) -> Result<()> {
    if codebook.patch() != cfg.patch {
        return Err(Error::Shape(format!(
            "codebook patch {} vs corpus patch {}",
            codebook.patch(),
            cfg.patch
        )));
    }
    Ok(())
}

/// Token-weighted mean cross-entropy over `examples`.
pub fn mean_nll(model: &ArModel, examples: &[Example]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|e| {
            let n = e.order.background_count();
            Ok((model.nll(&e.label, &e.order)? * n as f64, n))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0), |(s, c), &(l, n)| (s + l, c + n));
    if count == 0 {
        return Err(Error::Empty("no generated positions to score".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: usize,
    pub max_rotation: f64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Learning rate of the first step.
    pub lr: f64,
    /// Learning rate of the last step; linear in between.
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: crate::ar::DEFAULT_LR,
            lr_final: crate::ar::DEFAULT_LR,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = step as f64 / (total - 1) as f64;
        self.lr + (self.lr_final - self.lr) * t
    }
}

/// Runs each stage's iterations on minibatches drawn with replacement from
/// that stage's examples. Calls `log` after every step.
pub fn train_curriculum(
    model: &mut ArModel,
    schedule: &[Stage],
    stages: &[Vec<Example>],
    opts: &TrainOptions,
    mut log: impl FnMut(&StepLog),
) -> Result<Vec<f64>> {
    if schedule.len() != stages.len() {
        return Err(Error::Shape(format!(
            "{} stages scheduled, {} provided",
            schedule.len(),
            stages.len()
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let total: usize = schedule.iter().map(|s| s.iterations).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(total);
    for (s, (stage, examples)) in schedule.iter().zip(stages).enumerate() {
        if examples.is_empty() && stage.iterations > 0 {
            return Err(Error::Empty(format!("curriculum stage {s} has no examples")));
        }
        for _ in 0..stage.iterations {
            let picks: Vec<&Example> = (0..opts.batch_size)
                .map(|_| &examples[rng.gen_range(0..examples.len())])
                .collect();
            let batch = TrainBatch::new(
                picks.iter().map(|e| e.label.clone()).collect(),
                picks.iter().map(|e| e.order.clone()).collect(),
            )?;
            let lr = opts.lr_at(losses.len(), total);
            let loss = model.train_step(&batch, lr)?;
            losses.push(loss);
            log(&StepLog {
                step: losses.len(),
                stage: s,
                max_rotation: stage.max_rotation,
                lr,
                loss,
            });
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub room: usize,
    pub stage: usize,
    pub source: Pose,
    pub target: Pose,
    pub rotation_deg: f64,
    pub source_image: String,
    pub source_depth: String,
    pub target_image: String,
    pub target_depth: String,
    pub reprojection: String,
    pub visible: String,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub rooms: Vec<RoomSpec>,
    pub schedule: Vec<Stage>,
    pub seed: u64,
    pub pairs: Vec<PairRecord>,
}

/// Writes PNG images and masks, 16-bit millimetre depth PNGs, order text
/// files and a JSON manifest.
pub fn save_corpus(
    dir: impl AsRef<Path>,
    rooms: &[RoomSpec],
    schedule: &[Stage],
    cfg: &CorpusConfig,
    seed: u64,
    stages: &[Vec<PairSample>],
) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    for sub in ["images", "depths", "masks", "orders"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::new();
    for p in stages.iter().flatten() {
        let id = format!("pair_{:05}", records.len());
        let rec = PairRecord {
            room: p.room,
            stage: p.stage,
            source: p.source,
            target: p.target,
            rotation_deg: p.rotation_deg,
            source_image: format!("images/{id}_source.png"),
            source_depth: format!("depths/{id}_source.png"),
            target_image: format!("images/{id}_target.png"),
            target_depth: format!("depths/{id}_target.png"),
            reprojection: format!("images/{id}_reprojection.png"),
            visible: format!("masks/{id}_visible.png"),
            order: format!("orders/{id}.txt"),
        };
        p.source_image.save_png(dir.join(&rec.source_image))?;
        p.source_depth.save_png_mm(dir.join(&rec.source_depth))?;
        p.target_image.save_png(dir.join(&rec.target_image))?;
        p.target_depth.save_png_mm(dir.join(&rec.target_depth))?;
        p.reprojection.save_png(dir.join(&rec.reprojection))?;
        p.visible.save_png(dir.join(&rec.visible))?;
        fs::write(dir.join(&rec.order), p.order.to_text())?;
        records.push(rec);
    }
    let manifest = CorpusManifest {
        config: cfg.clone(),
        rooms: rooms.to_vec(),
        schedule: schedule.to_vec(),
        seed,
        pairs: records,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a corpus written by [`save_corpus`], grouped by stage. Images come
/// back at 8-bit and depths at millimetre precision.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Vec<PairSample>>)> {
    let dir = dir.as_ref();
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let pairs: Vec<PairSample> = manifest
        .pairs
        .par_iter()
        .map(|r| {
            Ok(PairSample {
                room: r.room,
                stage: r.stage,
                source: r.source,
                target: r.target,
                rotation_deg: r.rotation_deg,
                source_image: Image::load_png(dir.join(&r.source_image))?,
                source_depth: DepthMap::load_png_mm(dir.join(&r.source_depth))?,
                target_image: Image::load_png(dir.join(&r.target_image))?,
                target_depth: DepthMap::load_png_mm(dir.join(&r.target_depth))?,
                reprojection: Image::load_png(dir.join(&r.reprojection))?,
                visible: Mask::load_png(dir.join(&r.visible))?,
                order: GenerationOrder::from_text(&fs::read_to_string(dir.join(&r.order))?)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut stages: Vec<Vec<PairSample>> = vec![Vec::new(); manifest.schedule.len()];
    for p in pairs {
        stages
            .get_mut(p.stage)
            .ok_or_else(|| Error::Format(format!("pair stage {} outside the schedule", p.stage)))?
            .push(p);
    }
    Ok((manifest, stages))
}

/// Every image of a corpus (sources and targets), for codebook fitting.
pub fn corpus_images(stages: &[Vec<PairSample>]) -> Vec<Image> {
    stages
        .iter()
        .flatten()
        .flat_map(|p| [p.source_image.clone(), p.target_image.clone()])
        .collect()
}

/// Fraction of unknown tokens per stage, averaged over its pairs.
pub fn mean_unknown_fraction(stages: &[Vec<PairSample>]) -> Vec<f64> {
    stages
        .iter()
        .map(|s| {
            if s.is_empty() {
                0.0
            } else {
                s.iter().map(PairSample::unknown_fraction).sum::<f64>() / s.len() as f64
            }
        })
        .collect()
}
