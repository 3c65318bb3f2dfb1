use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Seeds};
use super::eval::{evaluate, rollout_confidence, head_thresholds, write_csv, write_eval, CalibrationEval};
use crate::calib::{aggregate_reports, ReliabilityReport, ReportMeta};
use crate::codec::{train_codec, Codec, CodecReport, LatentColorMap};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::probe::{train_joint, world_gradient_from_probe, JointStep, ProbeHead, ScoreKind, TrainingLog};
use crate::synth::{Dataset, DatasetManifest, OodAxis, Split};
use crate::viz::{render_confidence, render_error_map, write_ppm, write_reliability_svg, frame_stem, HeatmapFrameSet};
use crate::world::{encode_episodes, Denoiser, LatentEpisode, TimestepMode};

pub const CONFIG_FILE: &str = "config.json";
pub const SEEDS_FILE: &str = "seeds.json";
pub const CODEC_NAME: &str = "codec";
pub const DENOISER_NAME: &str = "denoiser";
pub const PROBE_NAME: &str = "probe";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Directory of each stage under the run's output directory.
pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out.join(stage)
}

/// Creates `dir`, refusing to reuse a nonempty one unless `overwrite`.
fn prepare(dir: &Path, overwrite: bool) -> Result<()> {
    if !overwrite && dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes the exact config and derived seeds behind the artifacts in `dir`.
pub fn write_provenance(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    fs::write(dir.join(SEEDS_FILE), serde_json::to_string_pretty(&cfg.seeds())?)?;
    Ok(())
}

fn read_config(dir: &Path) -> Option<RunConfig> {
    serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE)).ok()?).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub id: DatasetManifest,
    pub ood: Vec<DatasetManifest>,
}

/// Generates the nominal train/test dataset and one all-test dataset per OOD axis.
pub fn gen_data(cfg: &RunConfig, overwrite: bool) -> Result<DataSummary> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let d = &cfg.data;
    let id_dir = cfg.resolve(&d.train_dir);
    let ood_root = cfg.resolve(&d.ood_dir);
    prepare(&id_dir, overwrite)?;
    prepare(&ood_root, overwrite)?;
    let id = Dataset::generate_split(&d.world, d.train_episodes + d.test_episodes, d.test_episodes, seeds.data)?;
    id.save(&id_dir, overwrite)?;
    write_provenance(&id_dir, cfg)?;
    let mut ood = Vec::new();
    for axis in OodAxis::SHIFTS {
        let n = d.ood_episodes_per_axis;
        let ds = Dataset::generate_split(&d.world.with_axis(axis), n, n, seeds.ood_axis(axis))?;
        ds.save(&ood_root.join(axis.as_str()), overwrite)?;
        ood.push(ds.manifest);
    }
    write_provenance(&ood_root, cfg)?;
    Ok(DataSummary { id: id.manifest, ood })
}

fn load_id(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.resolve(&cfg.data.train_dir))
}

pub fn train_codec_stage(cfg: &RunConfig, overwrite: bool) -> Result<CodecReport> {
    cfg.validate()?;
    let ds = load_id(cfg)?;
    let dir = stage_dir(cfg, "codec");
    prepare(&dir, overwrite)?;
    let codec = train_codec(&ds, &cfg.codec, cfg.seeds().codec)?;
    codec.save(&dir, CODEC_NAME)?;
    write_provenance(&dir, cfg)?;
    Ok(codec.report)
}

pub fn load_codec(cfg: &RunConfig) -> Result<Codec> {
    Codec::load(&stage_dir(cfg, "codec"), CODEC_NAME)
}

/// Trained world model and probe, as stored in one directory.
#[derive(Clone, Debug)]
pub struct TrainedPair {
    pub model: Denoiser,
    pub head: ProbeHead,
}

impl TrainedPair {
    pub fn load(dir: &Path) -> Result<TrainedPair> {
        Ok(TrainedPair { model: Denoiser::load(dir, DENOISER_NAME)?, head: ProbeHead::load(dir, PROBE_NAME)? })
    }
}

/// Fresh world model and probe initialized from the run's init seed.
pub fn initial_pair(cfg: &RunConfig, seeds: &Seeds) -> Result<TrainedPair> {
    let root = Rng::new(seeds.init);
    let model = Denoiser::new(&cfg.model, &mut root.derive(0))?;
    let head = ProbeHead::new(&cfg.probe, &cfg.model, &mut root.derive(1))?;
    Ok(TrainedPair { model, head })
}

fn train_into(cfg: &RunConfig, dir: &Path, train: &[LatentEpisode], overwrite: bool) -> Result<(TrainedPair, TrainingLog)> {
    prepare(dir, overwrite)?;
    let seeds = cfg.seeds();
    let mut pair = initial_pair(cfg, &seeds)?;
    let log = train_joint(&mut pair.model, &mut pair.head, train, &cfg.optim, seeds.train, |_| {})?;
    pair.model.save(dir, DENOISER_NAME, seeds.init, cfg.optim.steps)?;
    pair.head.save(dir, PROBE_NAME, seeds.init)?;
    fs::write(dir.join(TRAIN_LOG), log.to_csv())?;
    write_provenance(dir, cfg)?;
    Ok((pair, log))
}

/// Jointly trains the world model and the probe on the encoded training split.
pub fn train_stage(cfg: &RunConfig, overwrite: bool) -> Result<TrainingLog> {
    cfg.validate()?;
    let codec = load_codec(cfg)?;
    let train = encode_episodes(&codec, &load_id(cfg)?, Some(Split::Train))?;
    Ok(train_into(cfg, &stage_dir(cfg, "train"), &train, overwrite)?.1)
}

fn test_episodes(cfg: &RunConfig, codec: &Codec) -> Result<Vec<LatentEpisode>> {
    let eps = encode_episodes(codec, &load_id(cfg)?, Some(Split::Test))?;
    if eps.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    Ok(eps)
}

fn model_label(pair: &TrainedPair) -> String {
    let s = serde_json::to_value(pair.head.cfg.kind).expect("head kind serializes");
    s.as_str().unwrap_or("probe").to_string()
}

pub fn evaluate_pair(cfg: &RunConfig, pair: &TrainedPair, episodes: &[LatentEpisode], dataset: &str) -> Result<CalibrationEval> {
    evaluate(&pair.model, &pair.head, episodes, &cfg.eval, cfg.optim.timestep_mode, cfg.seeds().eval, dataset)
}

/// Calibration and correlation of the trained pair on the nominal test split.
pub fn eval_stage(cfg: &RunConfig, overwrite: bool) -> Result<CalibrationEval> {
    cfg.validate()?;
    let codec = load_codec(cfg)?;
    let pair = TrainedPair::load(&stage_dir(cfg, "train"))?;
    let episodes = test_episodes(cfg, &codec)?;
    let dir = stage_dir(cfg, "eval");
    prepare(&dir, overwrite)?;
    let eval = evaluate_pair(cfg, &pair, &episodes, "id")?;
    write_eval(&dir, &eval, &model_label(&pair))?;
    write_provenance(&dir, cfg)?;
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub dataset: String,
    pub mean_confidence: f64,
    pub delta_confidence: f64,
    pub ece: f64,
    pub mce: f64,
    pub n: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodEval {
    pub id: CalibrationEval,
    pub axes: Vec<CalibrationEval>,
    /// Pairs of every requested axis pooled.
    pub pooled: ReliabilityReport,
    /// ID row first, then one per axis, then the pooled OOD row.
    pub table: Vec<OodRow>,
}

/// Parses `all` or a comma-separated list of axis names.
pub fn parse_axes(s: &str) -> Result<Vec<OodAxis>> {
    if s == "all" {
        return Ok(OodAxis::SHIFTS.to_vec());
    }
    let axes = s.split(',').map(|a| a.trim().parse()).collect::<Result<Vec<OodAxis>>>()?;
    if axes.is_empty() || axes.contains(&OodAxis::None) {
        return Err(Error::Config(format!("{s:?} does not name any OOD axis")));
    }
    Ok(axes)
}

/// Calibration on every requested OOD axis next to the nominal test split.
pub fn ood_stage(cfg: &RunConfig, axes: &[OodAxis], overwrite: bool) -> Result<OodEval> {
    cfg.validate()?;
    if axes.is_empty() {
        return Err(Error::Config("no OOD axes requested".into()));
    }
    let codec = load_codec(cfg)?;
    let pair = TrainedPair::load(&stage_dir(cfg, "train"))?;
    let ood_root = cfg.resolve(&cfg.data.ood_dir);
    let mut shifted = Vec::new();
    for &axis in axes {
        let ds = Dataset::load(&ood_root.join(axis.as_str()))?;
        shifted.push((axis, encode_episodes(&codec, &ds, None)?));
    }
    let dir = stage_dir(cfg, "ood");
    prepare(&dir, overwrite)?;
    let id = evaluate_pair(cfg, &pair, &test_episodes(cfg, &codec)?, "id")?;
    let label = model_label(&pair);
    write_eval(&dir.join("id"), &id, &label)?;
    let mut evals = Vec::new();
    for (axis, episodes) in &shifted {
        let e = evaluate_pair(cfg, &pair, episodes, axis.as_str())?;
        write_eval(&dir.join(axis.as_str()), &e, &label)?;
        evals.push(e);
    }
    let pooled_reports: Vec<ReliabilityReport> = evals.iter().map(|e| e.pooled.clone()).collect();
    let pooled = aggregate_reports(&pooled_reports, ReportMeta { head: Some(label), eps_v: None, dataset: "ood".into() })?;
    let id_conf = id.mean_confidence();
    let row = |dataset: &str, r: &ReliabilityReport| OodRow {
        dataset: dataset.into(),
        mean_confidence: r.mean_confidence(),
        delta_confidence: r.mean_confidence() - id_conf,
        ece: r.ece,
        mce: r.mce,
        n: r.n,
    };
    let mut table = vec![row("id", &id.pooled)];
    table.extend(evals.iter().map(|e| row(&e.dataset, &e.pooled)));
    table.push(row("ood_pooled", &pooled));
    write_csv(&dir.join("ood_table.csv"), &table)?;
    write_reliability_svg(&pooled, &dir.join("reliability_ood_pooled.svg"))?;
    let out = OodEval { id, axes: evals, pooled, table };
    fs::write(dir.join("ood.json"), serde_json::to_string_pretty(&out)?)?;
    write_provenance(&dir, cfg)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    ScoreRule,
    DiffusionForcing,
    StopGradient,
}

impl AblationKind {
    pub const ALL: [AblationKind; 3] = [AblationKind::ScoreRule, AblationKind::DiffusionForcing, AblationKind::StopGradient];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::ScoreRule => "score_rule",
            AblationKind::DiffusionForcing => "diffusion_forcing",
            AblationKind::StopGradient => "stop_gradient",
        }
    }

    /// The baseline with this one design choice flipped.
    pub fn variant(self, base: &RunConfig) -> Result<RunConfig> {
        let mut v = base.clone();
        match self {
            AblationKind::ScoreRule => {
                v.probe.score = match base.probe.score {
                    ScoreKind::Brier => ScoreKind::Bce,
                    ScoreKind::Bce => ScoreKind::Brier,
                    ScoreKind::Ce => {
                        return Err(Error::Config("the score-rule ablation needs a binary head".into()));
                    }
                }
            }
            AblationKind::DiffusionForcing => {
                v.optim.timestep_mode = match base.optim.timestep_mode {
                    TimestepMode::DiffusionForcing => TimestepMode::Shared,
                    TimestepMode::Shared => TimestepMode::DiffusionForcing,
                }
            }
            AblationKind::StopGradient => v.probe.stop_gradient = !base.probe.stop_gradient,
        }
        v.validate()?;
        Ok(v)
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub config: RunConfig,
    /// Where the checkpoints came from.
    pub checkpoints: PathBuf,
    pub mean_ece: f64,
    pub mean_mce: f64,
    pub pooled_ece: f64,
    pub pooled_mce: f64,
    /// Largest gradient the probe loss alone puts on a world-model weight.
    pub world_gradient_from_probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub kind: AblationKind,
    pub baseline: AblationArm,
    pub variant: AblationArm,
    /// Variant minus baseline, on the per-threshold mean.
    pub delta_ece: f64,
    pub delta_mce: f64,
    pub delta_pooled_ece: f64,
    pub delta_pooled_mce: f64,
}

fn arm(
    cfg: &RunConfig,
    pair: &TrainedPair,
    checkpoints: PathBuf,
    train: &[LatentEpisode],
    test: &[LatentEpisode],
    dir: &Path,
) -> Result<AblationArm> {
    let eval = evaluate_pair(cfg, pair, test, "id")?;
    write_eval(dir, &eval, &model_label(pair))?;
    write_provenance(dir, cfg)?;
    let mut rng = Rng::new(cfg.seeds().train).derive(u64::MAX);
    let picks: Vec<&LatentEpisode> = train.iter().take(cfg.optim.batch_size).collect();
    let step = JointStep::sample(&pair.model, &pair.head, &picks, cfg.optim.timestep_mode, &mut rng)?;
    let grad = world_gradient_from_probe(&pair.model, &pair.head, &step, pair.head.cfg.stop_gradient)?;
    Ok(AblationArm {
        config: cfg.clone(),
        checkpoints,
        mean_ece: eval.mean_ece,
        mean_mce: eval.mean_mce,
        pooled_ece: eval.pooled.ece,
        pooled_mce: eval.pooled.mce,
        world_gradient_from_probe: grad,
    })
}

/// Trains and evaluates the baseline and the variant with shared seeds.
/// The main run's checkpoints stand in for the baseline when they were
/// trained from an identical config.
pub fn ablate_stage(cfg: &RunConfig, kind: AblationKind, overwrite: bool) -> Result<Ablation> {
    cfg.validate()?;
    let variant_cfg = kind.variant(cfg)?;
    let codec = load_codec(cfg)?;
    let ds = load_id(cfg)?;
    let train = encode_episodes(&codec, &ds, Some(Split::Train))?;
    let test = test_episodes(cfg, &codec)?;
    let dir = stage_dir(cfg, "ablate").join(kind.as_str());
    prepare(&dir, overwrite)?;

    let main = stage_dir(cfg, "train");
    let (base_pair, base_ckpt) = if read_config(&main).as_ref() == Some(cfg) {
        (TrainedPair::load(&main)?, main)
    } else {
        let d = dir.join("baseline_checkpoints");
        (train_into(cfg, &d, &train, overwrite)?.0, d)
    };
    let var_ckpt = dir.join("variant_checkpoints");
    let (var_pair, _) = train_into(&variant_cfg, &var_ckpt, &train, overwrite)?;

    let baseline = arm(cfg, &base_pair, base_ckpt, &train, &test, &dir.join("baseline"))?;
    let variant = arm(&variant_cfg, &var_pair, var_ckpt, &train, &test, &dir.join("variant"))?;
    let out = Ablation {
        kind,
        delta_ece: variant.mean_ece - baseline.mean_ece,
        delta_mce: variant.mean_mce - baseline.mean_mce,
        delta_pooled_ece: variant.pooled_ece - baseline.pooled_ece,
        delta_pooled_mce: variant.pooled_mce - baseline.pooled_mce,
        baseline,
        variant,
    };
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&out)?)?;
    #[derive(Serialize)]
    struct Row<'a> {
        ablation: &'a str,
        arm: &'a str,
        mean_ece: f64,
        mean_mce: f64,
        pooled_ece: f64,
        pooled_mce: f64,
    }
    let rows = [("baseline", &out.baseline), ("variant", &out.variant)]
        .map(|(name, a)| Row {
            ablation: kind.as_str(),
            arm: name,
            mean_ece: a.mean_ece,
            mean_mce: a.mean_mce,
            pooled_ece: a.pooled_ece,
            pooled_mce: a.pooled_mce,
        });
    write_csv(&dir.join("ablation.csv"), &rows)?;
    fs::write(dir.join("baseline_config.json"), cfg.to_json())?;
    fs::write(dir.join("variant_config.json"), variant_cfg.to_json())?;
    Ok(out)
}

/// Writes heatmap, error-map and reliability-diagram images for the first
/// test episodes; heatmaps read the probe at the final denoiser pass.
pub fn render_stage(cfg: &RunConfig, overwrite: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let codec = load_codec(cfg)?;
    let cmap = LatentColorMap::build(&codec)?;
    let pair = TrainedPair::load(&stage_dir(cfg, "train"))?;
    let ds = load_id(cfg)?;
    let test: Vec<_> = ds.split(Split::Test).take(cfg.eval.render_episodes).collect();
    let latents = test_episodes(cfg, &codec)?;
    let dir = stage_dir(cfg, "render");
    prepare(&dir, overwrite)?;
    let eps = head_thresholds(&pair.head, &[cfg.eval.correlation_eps_v])[0];
    let seed = cfg.seeds().eval;
    let mut paths = Vec::new();
    for (i, (ep, lat)) in test.iter().zip(&latents).enumerate() {
        let r = rollout_confidence(&pair.model, &pair.head, lat, eps, Rng::new(seed).derive(lat.seed).derive(1).seed())?;
        let q = r.passes.last().expect("at least one pass");
        let generated = codec.decode(&r.sample)?;
        let heat = render_confidence(q, &cmap, &codec)?;
        let name = format!("ep{i:03}");
        let set = HeatmapFrameSet::new(ep.frames.clone(), generated, heat, cfg.eval.heatmap_opacity)?;
        paths.extend(set.write_ppm(&dir, &name)?);
        let err = render_error_map(&r.sample, &lat.latents, &cmap, &codec, cfg.eval.error_span)?;
        paths.extend(write_frames(&dir, &name, "error", &err)?);
    }
    let reports = stage_dir(cfg, "eval").join("reports.json");
    if reports.exists() {
        let eval: CalibrationEval = serde_json::from_str(&fs::read_to_string(&reports)?)?;
        let p = dir.join("reliability_pooled.svg");
        write_reliability_svg(&eval.pooled, &p)?;
        paths.push(p);
    }
    write_provenance(&dir, cfg)?;
    Ok(paths)
}

fn write_frames(dir: &Path, episode: &str, kind: &str, frames: &Tensor) -> Result<Vec<PathBuf>> {
    let s = frames.shape();
    let per = s[1] * s[2] * 3;
    (0..s[0])
        .map(|f| {
            let p = dir.join(format!("{}.ppm", frame_stem(episode, f, kind)));
            write_ppm(&p, &frames.data()[f * per..(f + 1) * per], s[1], s[2])?;
            Ok(p)
        })
        .collect()
}
