use std::path::PathBuf;
use std::process::ExitCode;

use calvid::harness::{self, AblationKind, RunConfig};
use calvid::synth::OodAxis;
use calvid::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "calvid", version, about = "Calibrated confidence for latent video world models")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces existing stage outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generates the in-distribution and OOD datasets.
    GenData,
    /// Trains the frame codec.
    TrainCodec,
    /// Jointly trains the world model and the confidence probe.
    Train,
    /// Measures calibration and the confidence-error correlation on the test split.
    Eval,
    /// Evaluates the trained pair on the OOD datasets.
    Ood {
        /// Comma-separated axes, or "all".
        #[arg(long, default_value = "all")]
        axes: String,
    },
    /// Trains and evaluates one ablation variant against the baseline.
    Ablate {
        /// score_rule, diffusion_forcing or stop_gradient.
        #[arg(long)]
        which: String,
    },
    /// Writes confidence heatmaps and the pooled reliability diagram.
    Render,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load(cli)?;
    let ow = cli.overwrite;
    Ok(match &cli.command {
        Command::GenData => {
            let s = harness::gen_data(&cfg, ow)?;
            let ood: Vec<_> = OodAxis::SHIFTS.iter().zip(&s.ood).map(|(a, m)| json!({ a.as_str(): m.entries.len() })).collect();
            json!({ "episodes": s.id.entries.len(), "ood": ood })
        }
        Command::TrainCodec => serde_json::to_value(harness::train_codec_stage(&cfg, ow)?)?,
        Command::Train => {
            let log = harness::train_stage(&cfg, ow)?;
            let (theta, phi) = log.tail_mean(100);
            json!({ "steps": log.rows.len(), "loss_theta": theta, "loss_phi": phi })
        }
        Command::Eval => {
            let e = harness::eval_stage(&cfg, ow)?;
            json!({
                "pooled_ece": e.pooled.ece,
                "pooled_mce": e.pooled.mce,
                "mean_ece": e.mean_ece,
                "mean_mce": e.mean_mce,
                "oracle_ece": e.oracle.ece,
                "correlation": e.correlation,
            })
        }
        Command::Ood { axes } => serde_json::to_value(harness::ood_stage(&cfg, &harness::parse_axes(axes)?, ow)?.table)?,
        Command::Ablate { which } => {
            let kind: AblationKind = which.parse()?;
            let a = harness::ablate_stage(&cfg, kind, ow)?;
            json!({
                "kind": kind.to_string(),
                "delta_ece": a.delta_ece,
                "delta_mce": a.delta_mce,
                "delta_pooled_ece": a.delta_pooled_ece,
                "delta_pooled_mce": a.delta_pooled_mce,
            })
        }
        Command::Render => json!({ "files": harness::render_stage(&cfg, ow)?.len() }),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            ExitCode::from(harness::EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
