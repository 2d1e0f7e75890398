//! Fixed experiment setups shared by the command line and the acceptance
//! run: the seeded consistency scene set and the desk-scale training recipe.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ar::{ArConfig, ArModel};
use crate::codebook::{fit_codebook, Codebook, DEFAULT_K};
use crate::corpus::{
    corpus_images, curriculum_schedule, mean_nll, mean_unknown_fraction, sample_corpus, tokenize_all,
    train_curriculum, CorpusConfig, Example, PairSample, Stage, StepLog, TrainOptions,
};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::metrics::ConsistencyReport;
use crate::pipeline::{evaluate_consistency, init_scene, Generator, InputView, PipelineConfig, Strategy};
use crate::world::{raycast_render, RoomSpec};
use crate::Result;

/// Base yaw step between consecutive scenes, so rooms are seen from
/// different headings.
const SCENE_YAW_STEP: f64 = 47.0;

/// Hole budget for consistency runs. A pure yaw leaves thin wedges above
/// and below the mid view that neither the input nor the extreme support
/// sees.
pub const CONSISTENCY_MAX_HOLE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScene {
    pub index: usize,
    pub room: usize,
    pub pose: Pose,
    /// View change to evaluate, degrees.
    pub yaw: f64,
    pub pitch: f64,
    pub seed: u64,
}

/// `count` scenes cycling through `rooms` rooms from their default camera
/// position. The yaw direction alternates between scenes.
pub fn consistency_scenes(rooms: &[RoomSpec], count: usize, yaw: f64, pitch: f64, seed_base: u64) -> Vec<ConsistencyScene> {
    if rooms.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|i| {
            let room = i % rooms.len();
            let heading = (i as f64 * SCENE_YAW_STEP) % 360.0;
            let pose = Pose::from_translation(rooms[room].default_camera_position())
                .compose(&Pose::from_yaw_pitch(heading, 0.0));
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            ConsistencyScene {
                index: i,
                room,
                pose,
                yaw: sign * yaw,
                pitch,
                seed: seed_base.wrapping_add(i as u64),
            }
        })
        .collect()
}

/// Oracle RGB-D view of a scene's input pose.
pub fn scene_input(scene: &ConsistencyScene, rooms: &[RoomSpec], intrinsics: &CameraIntrinsics) -> Result<InputView> {
    let (image, depth) = raycast_render(&rooms[scene.room], intrinsics, &scene.pose)?;
    Ok(InputView {
        image,
        depth,
        pose: scene.pose,
    })
}

pub fn run_consistency(
    scene: &ConsistencyScene,
    input: &InputView,
    intrinsics: CameraIntrinsics,
    generator: Arc<Generator>,
    config: &PipelineConfig,
    strategy: Strategy,
) -> Result<ConsistencyReport> {
    let mut state = init_scene(std::slice::from_ref(input), intrinsics, config.clone(), strategy, scene.seed)?
        .with_generator(generator);
    evaluate_consistency(&mut state, scene.yaw, scene.pitch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub scenes: usize,
    /// Scenes where SupportFirst >= Sequential >= NoAccumulation.
    pub ordered: usize,
    /// Scenes where some strategy failed; they count as unordered and are
    /// left out of the gap.
    pub failed: usize,
    /// Mean SupportFirst minus NoAccumulation, dB.
    pub mean_gap: f64,
}

impl ConsistencySummary {
    pub fn ordered_fraction(&self) -> f64 {
        if self.scenes == 0 {
            0.0
        } else {
            self.ordered as f64 / self.scenes as f64
        }
    }
}

/// Summarizes mean PSNRs per scene, given in [`Strategy::ALL`] order.
pub fn summarize_consistency(results: &[[Option<f64>; 3]]) -> ConsistencySummary {
    let mut ordered = 0;
    let mut failed = 0;
    let mut gap = 0.0;
    for r in results {
        match r {
            [Some(sf), Some(seq), Some(no)] => {
                if sf >= seq && seq >= no {
                    ordered += 1;
                }
                gap += sf - no;
            }
            _ => failed += 1,
        }
    }
    let scored = results.len() - failed;
    ConsistencySummary {
        scenes: results.len(),
        ordered,
        failed,
        mean_gap: if scored == 0 { f64::NAN } else { gap / scored as f64 },
    }
}

/// Desk-scale training setup: corpus, codebook, model and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub base_rotation: f64,
    pub target_rotation: f64,
    pub stage_len: usize,
    pub pairs_per_room: usize,
    pub corpus_seed: u64,
    pub heldout_pairs_per_room: usize,
    pub heldout_seed: u64,
    pub codebook_k: usize,
    pub codebook_seed: u64,
    pub model: ArConfig,
    pub model_seed: u64,
    pub train: TrainOptions,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            base_rotation: 30.0,
            target_rotation: 120.0,
            stage_len: 50,
            pairs_per_room: 16,
            corpus_seed: 1,
            heldout_pairs_per_room: 4,
            heldout_seed: 999,
            codebook_k: DEFAULT_K,
            codebook_seed: 1,
            model: ArConfig::default(),
            model_seed: 7,
            train: TrainOptions {
                batch_size: 128,
                lr: 3.0,
                lr_final: 0.05,
                seed: 3,
            },
        }
    }
}

impl TrainingRecipe {
    pub fn schedule(&self) -> Result<Vec<Stage>> {
        curriculum_schedule(self.base_rotation, self.target_rotation, self.stage_len)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRecipe {
    pub codebook: Codebook,
    pub model: ArModel,
    pub initial_heldout_nll: f64,
    pub final_heldout_nll: f64,
    pub losses: Vec<f64>,
    pub unknown_fraction: Vec<f64>,
}

/// Samples the corpus and a held-out set of separate pairs from the same
/// rooms, fits the codebook on the corpus images and trains the model
/// through the curriculum.
pub fn run_training_recipe(
    recipe: &TrainingRecipe,
    rooms: &[RoomSpec],
    cfg: &CorpusConfig,
    log: impl FnMut(&StepLog),
) -> Result<TrainedRecipe> {
    let schedule = recipe.schedule()?;
    let pairs = sample_corpus(rooms, recipe.pairs_per_room, &schedule, cfg, recipe.corpus_seed)?;
    let heldout_pairs = sample_corpus(rooms, recipe.heldout_pairs_per_room, &schedule, cfg, recipe.heldout_seed)?;
    let codebook = fit_codebook(&corpus_images(&pairs), recipe.codebook_k, cfg.patch, recipe.codebook_seed)?;
    let stages = tokenize_stages(&pairs, &codebook, cfg.known_fraction)?;
    let heldout: Vec<Example> = tokenize_stages(&heldout_pairs, &codebook, cfg.known_fraction)?
        .into_iter()
        .flatten()
        .collect();
    let mut model = ArModel::new(
        ArConfig {
            vocab: codebook.k(),
            ..recipe.model
        },
        recipe.model_seed,
    )?;
    let initial_heldout_nll = mean_nll(&model, &heldout)?;
    let losses = train_curriculum(&mut model, &schedule, &stages, &recipe.train, log)?;
    let final_heldout_nll = mean_nll(&model, &heldout)?;
    Ok(TrainedRecipe {
        codebook,
        model,
        initial_heldout_nll,
        final_heldout_nll,
        losses,
        unknown_fraction: mean_unknown_fraction(&pairs),
    })
}

pub fn tokenize_stages(stages: &[Vec<PairSample>], codebook: &Codebook, known_fraction: f64) -> Result<Vec<Vec<Example>>> {
    stages.iter().map(|s| tokenize_all(s, codebook, known_fraction)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_cycle_rooms_and_alternate_yaw() {
        let rooms = RoomSpec::fixtures();
        let scenes = consistency_scenes(&rooms, 10, 35.0, 0.0, 100);
        assert_eq!(scenes.len(), 10);
        assert_eq!(scenes[9].room, 1);
        assert_eq!(scenes[0].yaw, 35.0);
        assert_eq!(scenes[1].yaw, -35.0);
        assert_eq!(scenes[3].seed, 103);
        assert!(consistency_scenes(&[], 3, 35.0, 0.0, 0).is_empty());
    }

    #[test]
    fn summary_counts_order_and_failures() {
        let s = summarize_consistency(&[
            [Some(20.0), Some(18.0), Some(15.0)],
            [Some(20.0), Some(21.0), Some(15.0)],
            [None, Some(21.0), Some(15.0)],
            [Some(16.0), Some(16.0), Some(16.0)],
        ]);
        assert_eq!(s.scenes, 4);
        assert_eq!(s.ordered, 2);
        assert_eq!(s.failed, 1);
        assert!((s.mean_gap - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.ordered_fraction(), 0.5);
    }
}
