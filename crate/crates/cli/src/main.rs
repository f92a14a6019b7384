mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use advpatch::attack::AttackMode;
use advpatch::metrics::{Bake, EvalPlacement};
use advpatch::scene::{SceneId, Split};

/// Adversarial patches against a small semantic-segmentation network on
/// synthetic driving scenes.
#[derive(Parser, Debug)]
#[command(name = "advpatch", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData,
    /// Train the segmentation model on the train split.
    TrainModel(TrainArgs),
    /// Optimize an adversarial patch.
    CraftPatch(CraftArgs),
    /// Evaluate random / no-EOT / EOT / scene-specific patches per scene.
    Evaluate(EvalArgs),
    /// Run the gradient, adjoint and reprojection self-checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (or manifest path).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
}

#[derive(Args, Debug)]
pub struct CraftArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained weights file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AttackMode>,
    /// Scene for scene-specific attacks (A, B or C).
    #[arg(long, value_parser = parse_scene)]
    pub scene: Option<SceneId>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Centre EOT placements on the image or on each projected billboard.
    #[arg(long, value_enum)]
    pub eot_anchor: Option<AnchorArg>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Run the gamma grid and the cross-entropy baselines on identical streams.
    #[arg(long)]
    pub compare_losses: bool,
    /// Printable-colour set (JSON list of RGB triples in [0,1]).
    #[arg(long)]
    pub colors: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AnchorArg {
    Image,
    Billboard,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// `MODE[:SCENE]=PATH`, e.g. `eot=eot/patch.pft` or
    /// `scene_specific:B=ssB/patch.pft`; repeatable.
    #[arg(long = "patch")]
    pub patches: Vec<String>,
    #[arg(long, default_value = "scene", value_parser = parse_bake)]
    pub bake: Bake,
    /// Digital-overlay placement.
    #[arg(long, value_enum, default_value_t = PlacementArg::Center)]
    pub placement: PlacementArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlacementArg {
    Center,
    Billboard,
}

impl From<PlacementArg> for EvalPlacement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Center => EvalPlacement::Center,
            PlacementArg::Billboard => EvalPlacement::Billboard,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    ConvSignFlip,
}

fn parse_mode(s: &str) -> Result<AttackMode, String> {
    s.parse().map_err(|e: advpatch::Error| e.to_string())
}

fn parse_scene(s: &str) -> Result<SceneId, String> {
    s.parse().map_err(|e: advpatch::Error| e.to_string())
}

fn parse_bake(s: &str) -> Result<Bake, String> {
    s.parse().map_err(|e: advpatch::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                // thiserror already folds direct sources into the message
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
