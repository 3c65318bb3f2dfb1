//! Controllable synthetic world used in place of recorded robot trajectories.
//!
//! An agent square moves under planar velocity actions inside a small arena.
//! Pushable blocks respond according to per-episode mass and friction,
//! deformable blocks squash on contact, and cabinets hide a randomly coloured
//! interior until the agent touches them. None of these hidden quantities
//! appear in the frames before they have a visible effect, which gives the
//! world model genuinely unpredictable regions.
//!
//! Five appearance shifts (background, lighting, clutter, target object,
//! effector) produce out-of-distribution variants without touching the
//! dynamics.

mod dataset;
mod scene;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use dataset::{
    episode_seed, generate_dataset, Dataset, DatasetManifest, ManifestEntry, Split, BLOB_FILE, MANIFEST_FILE,
    MANIFEST_VERSION,
};
pub use scene::{HiddenParams, ObjectKind, Scene, SceneObject, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodAxis {
    #[default]
    None,
    Background,
    Lighting,
    Clutter,
    TargetObject,
    Effector,
}

impl OodAxis {
    pub const SHIFTS: [OodAxis; 5] =
        [OodAxis::Background, OodAxis::Lighting, OodAxis::Clutter, OodAxis::TargetObject, OodAxis::Effector];

    pub fn as_str(self) -> &'static str {
        match self {
            OodAxis::None => "none",
            OodAxis::Background => "background",
            OodAxis::Lighting => "lighting",
            OodAxis::Clutter => "clutter",
            OodAxis::TargetObject => "target_object",
            OodAxis::Effector => "effector",
        }
    }
}

impl fmt::Display for OodAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OodAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [OodAxis::None]
            .into_iter()
            .chain(OodAxis::SHIFTS)
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown OOD axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per episode.
    pub frames: usize,
    /// Planar velocity, so always 2.
    pub action_dim: usize,
    pub agent_size: f32,
    /// Largest per-frame agent displacement in pixels.
    pub max_speed: f32,
    /// Inclusive range of pushable objects per episode.
    pub min_objects: usize,
    pub max_objects: usize,
    pub cabinet_prob: f32,
    /// Probability that the action trajectory heads toward an object.
    pub seek_prob: f32,
    /// Additive RGB tint applied on the lighting axis.
    pub lighting_tint: [f32; 3],
    pub ood_axis: OodAxis,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 32,
            width: 32,
            frames: 8,
            action_dim: 2,
            agent_size: 5.0,
            max_speed: 2.0,
            min_objects: 1,
            max_objects: 2,
            cabinet_prob: 0.5,
            seek_prob: 0.6,
            lighting_tint: [0.15, 0.1, 0.0],
            ood_axis: OodAxis::None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("arena must have nonzero size".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("episode length must be at least 2, got {}", self.frames)));
        }
        if self.action_dim != 2 {
            return Err(Error::Config(format!("action dimension must be 2, got {}", self.action_dim)));
        }
        if self.agent_size <= 0.0 || self.agent_size >= self.width.min(self.height) as f32 {
            return Err(Error::Config(format!("agent size {} does not fit the arena", self.agent_size)));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.lighting_tint.iter().any(|t| !t.is_finite() || t.abs() > 1.0) {
            return Err(Error::Config("lighting tint must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn with_axis(&self, axis: OodAxis) -> Self {
        WorldConfig { ood_axis: axis, ..self.clone() }
    }
}

/// One rendered trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `(T, H, W, 3)` in `[0, 1]`.
    pub frames: Tensor,
    /// `(T, 2)`; action `t` moves the world from frame `t` to `t + 1`.
    pub actions: Tensor,
    pub seed: u64,
    pub ood_axis: OodAxis,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels of frame `t` as a flat `(H, W, 3)` slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let per = self.frames.numel() / self.len();
        &self.frames.data()[t * per..(t + 1) * per]
    }
}

/// Samples a scene for `(cfg, seed)` and simulates it.
pub fn generate_episode(cfg: &WorldConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let scene = Scene::sample(cfg, seed);
    Ok(scene.simulate(cfg))
}

/// Scalar appearance statistic that separates nominal from shifted scenes
/// along `axis`.
///
/// * background: number of occupied 8-level RGB histogram cells in the
///   background layer
/// * lighting: mean of the applied tint
/// * clutter: object count
/// * target object: shape id of the pushable objects
/// * effector: agent palette id
pub fn appearance_statistic(axis: OodAxis, scene: &Scene, cfg: &WorldConfig) -> f64 {
    match axis {
        OodAxis::None => 0.0,
        OodAxis::Background => scene.background_histogram_cells(cfg) as f64,
        OodAxis::Lighting => scene.tint.iter().map(|&t| t as f64).sum::<f64>() / 3.0,
        OodAxis::Clutter => scene.objects.len() as f64,
        OodAxis::TargetObject => scene
            .objects
            .iter()
            .filter(|o| o.pushable())
            .map(|o| o.shape.id() as f64)
            .fold(0.0, f64::max),
        OodAxis::Effector => scene.agent_palette as f64,
    }
}
