//! Scene directories: a JSON manifest, one point-cloud file per source,
//! PNG support views and the generator that produced them.
//!
//! Saving is byte-deterministic: nothing depends on time, paths or map
//! iteration order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ar::ArModel;
use crate::codebook::Codebook;
use crate::geometry::{CameraIntrinsics, DepthMap, PointCloud, Pose};
use crate::grid::Image;
use crate::pipeline::{Generator, Origin, PipelineConfig, SceneState, Strategy, SupportView, TaggedCloud};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CODEBOOK_FILE: &str = "codebook.pscb";
pub const MODEL_FILE: &str = "model.psar";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub origin: Origin,
    pub file: String,
    pub points: usize,
    /// Whether the cloud takes part in rendering.
    pub accumulated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub pose: Pose,
    pub image: String,
    pub depth: String,
    pub unknown_tokens: usize,
    pub new_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    pub base_pose: Pose,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: PipelineConfig,
    pub origins: Vec<Origin>,
    pub clouds: Vec<CloudEntry>,
    pub support_views: Vec<SupportEntry>,
    pub codebook: Option<String>,
    pub model: Option<String>,
}

fn cloud_file(origin: Origin) -> String {
    match origin {
        Origin::Input(i) => format!("clouds/input_{i:03}.pspc"),
        Origin::Support(i) => format!("clouds/support_{i:03}.pspc"),
    }
}

/// Writes `state` to `dir`, replacing any clouds and supports saved there
/// before.
pub fn save_scene(state: &SceneState, dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let dir = dir.as_ref();
    for sub in ["clouds", "supports"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p)?;
        }
        fs::create_dir_all(&p)?;
    }
    let mut clouds = Vec::new();
    for (tc, accumulated) in state
        .clouds
        .iter()
        .map(|c| (c, true))
        .chain(state.detached.iter().map(|c| (c, false)))
    {
        let file = cloud_file(tc.origin);
        tc.cloud.save(dir.join(&file))?;
        clouds.push(CloudEntry {
            origin: tc.origin,
            file,
            points: tc.cloud.len(),
            accumulated,
        });
    }
    let mut support_views = Vec::new();
    for (i, sv) in state.support_views.iter().enumerate() {
        let entry = SupportEntry {
            pose: sv.pose,
            image: format!("supports/support_{i:03}.png"),
            depth: format!("supports/support_{i:03}_depth.png"),
            unknown_tokens: sv.unknown_tokens,
            new_points: sv.new_points,
        };
        sv.image.save_png(dir.join(&entry.image))?;
        sv.depth.save_png_mm(dir.join(&entry.depth))?;
        support_views.push(entry);
    }
    let (codebook, model) = match &state.generator {
        Some(g) => {
            g.codebook.save(dir.join(CODEBOOK_FILE))?;
            g.model.save(dir.join(MODEL_FILE))?;
            (Some(CODEBOOK_FILE.to_string()), Some(MODEL_FILE.to_string()))
        }
        None => (None, None),
    };
    let manifest = SceneManifest {
        version: FORMAT_VERSION,
        intrinsics: state.intrinsics,
        base_pose: state.base_pose,
        strategy: state.strategy,
        seed: state.seed,
        config: state.config.clone(),
        origins: state.origins.clone(),
        clouds,
        support_views,
        codebook,
        model,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    let m: SceneManifest = serde_json::from_str(&text)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported scene version {}", m.version)));
    }
    Ok(m)
}

/// Reads a scene written by [`save_scene`]. Support images come back at
/// 8-bit and their depths at millimetre precision; clouds are exact.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneState> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    m.intrinsics.validate()?;
    m.config.validate()?;
    let mut clouds = Vec::new();
    let mut detached = Vec::new();
    for e in &m.clouds {
        let cloud = PointCloud::load(dir.join(&e.file))?;
        if cloud.len() != e.points {
            return Err(Error::Format(format!("{} holds {} points, manifest says {}", e.file, cloud.len(), e.points)));
        }
        let tc = TaggedCloud {
            cloud,
            origin: e.origin,
        };
        if e.accumulated {
            clouds.push(tc);
        } else {
            detached.push(tc);
        }
    }
    let support_views = m
        .support_views
        .iter()
        .map(|s| {
            Ok(SupportView {
                pose: s.pose,
                image: Image::load_png(dir.join(&s.image))?,
                depth: DepthMap::load_png_mm(dir.join(&s.depth))?,
                unknown_tokens: s.unknown_tokens,
                new_points: s.new_points,
            })
        })
        .collect::<Result<_>>()?;
    let generator = match (&m.codebook, &m.model) {
        (Some(c), Some(a)) => Some(Arc::new(Generator::new(
            Codebook::load(dir.join(c))?,
            ArModel::load(dir.join(a))?,
        )?)),
        (None, None) => None,
        _ => return Err(Error::Format("scene has a codebook or a model but not both".into())),
    };
    Ok(SceneState {
        intrinsics: m.intrinsics,
        base_pose: m.base_pose,
        clouds,
        detached,
        support_views,
        origins: m.origins,
        strategy: m.strategy,
        config: m.config,
        seed: m.seed,
        generator,
    })
}
