use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::DEFAULT_BINS;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::probe::{ProbeConfig, ThresholdSet};
use crate::synth::{OodAxis, WorldConfig};
use crate::viz::DEFAULT_OPACITY;
use crate::world::{DenoiserConfig, OptimConfig};

/// Which denoiser pass of a rollout the probe reads for the
/// confidence-versus-error correlation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutReadout {
    /// The first, noisiest pass.
    First,
    /// The pass that produces the final sample.
    #[default]
    Last,
    /// Mean confidence over all passes.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub ood_episodes_per_axis: usize,
    /// Dataset directories, relative to the output directory unless absolute.
    pub train_dir: PathBuf,
    pub ood_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            world: WorldConfig::default(),
            train_episodes: 2000,
            test_episodes: 200,
            ood_episodes_per_axis: 10,
            train_dir: "data".into(),
            ood_dir: "data_ood".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Velocity-space thresholds at which calibration is measured.
    pub thresholds: ThresholdSet,
    pub bins: usize,
    /// Noised copies of every test episode on the one-step path.
    pub draws_per_episode: usize,
    /// Threshold at which confidence is correlated with rollout error.
    pub correlation_eps_v: f64,
    pub correlation_readout: RolloutReadout,
    /// Points drawn from the pooled rollout elements for the robust
    /// correlation; 0 uses every element.
    pub correlation_samples: usize,
    pub bootstrap: usize,
    /// Test episodes rendered by `render`.
    pub render_episodes: usize,
    pub heatmap_opacity: f32,
    /// Clip range of rendered latent error maps.
    pub error_span: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: ThresholdSet::evaluation(),
            bins: DEFAULT_BINS,
            draws_per_episode: 4,
            correlation_eps_v: 0.5,
            correlation_readout: RolloutReadout::Last,
            correlation_samples: 2000,
            bootstrap: 1000,
            render_episodes: 4,
            heatmap_opacity: DEFAULT_OPACITY,
            error_span: [0.0, 2.0],
        }
    }
}

/// Everything a run depends on. Every field has a default, and the exact
/// value used is written next to each artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: DenoiserConfig,
    pub probe: ProbeConfig,
    /// Joint world-model and probe optimization; its timestep mode is the
    /// diffusion-forcing switch.
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "runs/default".into(),
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            model: DenoiserConfig::default(),
            probe: ProbeConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stage seeds derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
    pub ood: u64,
    pub codec: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_run(run: u64) -> Seeds {
        let r = Rng::new(run);
        Seeds {
            run,
            data: r.derive(1).seed(),
            ood: r.derive(2).seed(),
            codec: r.derive(3).seed(),
            init: r.derive(4).seed(),
            train: r.derive(5).seed(),
            eval: r.derive(6).seed(),
        }
    }

    /// Dataset seed of one OOD axis.
    pub fn ood_axis(&self, axis: OodAxis) -> u64 {
        Rng::new(self.ood).derive(axis as u64).seed()
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_run(self.seed)
    }

    /// Resolves a configured path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.data.world;
        w.validate()?;
        self.codec.validate()?;
        self.model.validate()?;
        self.probe.validate()?;
        self.optim.validate()?;
        if w.ood_axis != OodAxis::None {
            return Err(Error::Config("the base world must be nominal; OOD axes are generated separately".into()));
        }
        if (w.height, w.width) != (self.codec.height, self.codec.width) {
            return Err(Error::Config("codec frame size differs from the world".into()));
        }
        let m = &self.model;
        let geometry = [m.frames, m.latent_height, m.latent_width, m.latent_channels, m.action_dim];
        let expected = [w.frames, self.codec.latent_height(), self.codec.latent_width(), self.codec.latent_channels, w.action_dim];
        if geometry != expected {
            return Err(Error::Config(format!(
                "denoiser geometry {geometry:?} does not match world and codec {expected:?}"
            )));
        }
        if self.data.train_episodes == 0 || self.data.test_episodes == 0 {
            return Err(Error::Config("train and test splits must be nonempty".into()));
        }
        let e = &self.eval;
        if e.bins == 0 || e.draws_per_episode == 0 || e.bootstrap == 0 {
            return Err(Error::Config("bins, draws_per_episode and bootstrap must be positive".into()));
        }
        if !(e.correlation_eps_v > 0.0) {
            return Err(Error::Config("correlation_eps_v must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.heatmap_opacity) {
            return Err(Error::Config("heatmap_opacity must lie in [0, 1]".into()));
        }
        if !(e.error_span[1] > e.error_span[0]) {
            return Err(Error::Config("error_span is empty".into()));
        }
        Ok(())
    }
}
