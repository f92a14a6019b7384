use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use advpatch::attack::{
    compare_losses, gamma_grid, optimize_patch, write_comparison, AttackConfig, AttackMode, EotAnchor,
};
use advpatch::autodiff::{set_fault, Fault};
use advpatch::gradcheck;
use advpatch::loss::{BaselineMode, LossConfig, PrintableColorSet};
use advpatch::metrics::{evaluate_images, evaluate_patch, Bake, MetricsReport};
use advpatch::model::{self, write_atomic, ModelConfig, SegModel};
use advpatch::patch::{random_patch, PatchState};
use advpatch::scene::{generate_dataset, Dataset, DatasetConfig, SceneId, SceneSample, Split, CLASS_NAMES};
use advpatch::{Error, Result};

use crate::output::StagedDir;
use crate::{AnchorArg, Cli, Command, CraftArgs, EvalArgs, FaultArg, GradcheckArgs, TrainArgs};

/// Training settings read from `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.01,
            model: ModelConfig::default(),
        }
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn load_config<T: DeserializeOwned + Default>(&self) -> Result<T> {
        let Some(path) = &self.config else {
            return Ok(T::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx {
        config: cli.common.config,
        seed: cli.common.seed,
        out: cli.common.out,
        quiet: cli.common.quiet,
    };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainModel(args) => train_model(&ctx, &args),
        Command::CraftPatch(args) => craft_patch(&ctx, &args),
        Command::Evaluate(args) => evaluate(&ctx, &args),
        Command::Gradcheck(args) => run_gradcheck(&ctx, &args),
    }
}

fn gen_data(ctx: &Ctx) -> Result<ExitCode> {
    let config: DatasetConfig = ctx.load_config()?;
    config.validate()?;
    let seed = ctx.seed.unwrap_or(7);
    let staged = StagedDir::new(&ctx.out("data"))?;
    generate_dataset(&config, seed, staged.path())?;
    let dir = staged.commit()?;
    ctx.say(format!("manifest: {}", dir.join(advpatch::scene::dataset::MANIFEST_NAME).display()));
    ctx.say(format!(
        "samples: {} (train {}, val {}, test {})",
        config.total(),
        config.train,
        config.val,
        config.test
    ));
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

fn train_model(ctx: &Ctx, args: &TrainArgs) -> Result<ExitCode> {
    let mut config: TrainConfig = ctx.load_config()?;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(s) = ctx.seed {
        config.model.seed = s;
    }
    if config.epochs == 0 {
        return Err(Error::Usage("--epochs must be at least 1".into()));
    }
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(Error::Usage(format!("learning rate {} must be positive", config.lr)));
    }
    let data = load_dataset(&args.data)?;
    let train: Vec<_> = data.split(Split::Train).into_iter().map(|s| (&s.image, &s.labels)).collect();
    let val: Vec<_> = data.split(Split::Val).into_iter().map(|s| (s.image.clone(), &s.labels)).collect();
    let staged = StagedDir::new(&ctx.out("model"))?;

    let mut net = SegModel::new(config.model)?;
    let start = Instant::now();
    let curve = model::train(&mut net, &train, config.epochs, config.lr)?;
    info!("trained {} epochs in {:.1?}", config.epochs, start.elapsed());

    net.save_weights(&staged.path().join("model.bin"))?;
    let mut csv = String::from("epoch,mean_ce\n");
    for e in &curve {
        writeln!(csv, "{},{:.6}", e.epoch, e.mean_ce).expect("string write");
    }
    write_atomic(&staged.path().join("loss_curve.csv"), csv.as_bytes())?;
    let report = if val.is_empty() { None } else { Some(evaluate_images(&net, val)?) };
    if let Some(r) = &report {
        write_atomic(&staged.path().join("val_metrics.json"), &serde_json::to_vec_pretty(r)?)?;
    }
    let dir = staged.commit()?;
    ctx.say(format!("weights: {}", dir.join("model.bin").display()));
    match report {
        Some(r) => ctx.say(format!("validation miou {:.4} macc {:.4}", r.miou, r.macc)),
        None => ctx.say("validation split is empty; no metrics"),
    }
    Ok(ExitCode::SUCCESS)
}

fn craft_patch(ctx: &Ctx, args: &CraftArgs) -> Result<ExitCode> {
    let mut config: AttackConfig = ctx.load_config()?;
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(s) = args.scene {
        config.scene = Some(s);
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    if let Some(a) = args.eot_anchor {
        config.eot_anchor = match a {
            AnchorArg::Image => EotAnchor::ImageCenter,
            AnchorArg::Billboard => EotAnchor::Billboard,
        };
    }
    if config.mode != AttackMode::SceneSpecific && args.scene.is_some() {
        return Err(Error::Usage("--scene only applies to --mode scene-specific".into()));
    }
    config.validate()?;
    let colors = match &args.colors {
        Some(p) => PrintableColorSet::from_json_file(p)?,
        None => PrintableColorSet::default(),
    };
    let data = load_dataset(&args.data)?;
    let net = SegModel::open(&args.model)?;
    let mut samples = match (config.mode, config.scene) {
        (AttackMode::SceneSpecific, Some(scene)) => data.split_scene(Split::Train, scene),
        _ => data.split(Split::Train),
    };
    if let Some(n) = args.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::Usage("no training samples for this attack".into()));
    }
    let staged = StagedDir::new(&ctx.out("patch"))?;
    let start = Instant::now();
    if args.compare_losses {
        let configs = comparison_configs(&config);
        let results = compare_losses(&net, &samples, &configs, &colors)?;
        let traces: Vec<_> = results.iter().map(|(_, t)| t.clone()).collect();
        write_comparison(staged.path(), &configs, &traces)?;
        for (c, (p, _)) in configs.iter().zip(&results) {
            p.save(&staged.path().join(format!("patch_{}.pft", c.loss.label())))?;
        }
        write_atomic(&staged.path().join("config.json"), &serde_json::to_vec_pretty(&configs)?)?;
        let dir = staged.commit()?;
        info!("compared {} losses in {:.1?}", configs.len(), start.elapsed());
        for (c, t) in configs.iter().zip(&traces) {
            if let Some(last) = t.records.last() {
                ctx.say(format!("{:<20} final miou {:.4}", c.loss.label(), last.miou));
            }
        }
        ctx.say(format!("traces: {}", dir.join("compare.csv").display()));
    } else {
        let (patch, trace) = optimize_patch(&net, &samples, &config, &colors)?;
        patch.save(&staged.path().join("patch.pft"))?;
        patch.save_preview(&staged.path().join("patch.ppm"))?;
        trace.save_csv(&staged.path().join("trace.csv"))?;
        write_atomic(&staged.path().join("config.json"), &serde_json::to_vec_pretty(&config)?)?;
        let dir = staged.commit()?;
        info!("{} attack finished in {:.1?}", config.mode, start.elapsed());
        if let Some(last) = trace.records.last() {
            ctx.say(format!("final attacked train miou {:.4}", last.miou));
        }
        if trace.skipped > 0 {
            ctx.say(format!("skipped {} infeasible sample draws", trace.skipped));
        }
        ctx.say(format!("patch: {}", dir.join("patch.pft").display()));
    }
    Ok(ExitCode::SUCCESS)
}

/// The gamma grid followed by the two cross-entropy baselines.
fn comparison_configs(base: &AttackConfig) -> Vec<AttackConfig> {
    let mut losses = gamma_grid();
    for baseline in [BaselineMode::CeFullN, BaselineMode::CeExcludingPatch] {
        losses.push(LossConfig { baseline, ..base.loss });
    }
    losses
        .into_iter()
        .map(|loss| AttackConfig {
            loss: LossConfig {
                lambda_smooth: base.loss.lambda_smooth,
                lambda_nps: base.loss.lambda_nps,
                ..loss
            },
            ..base.clone()
        })
        .collect()
}

/// Patch sources for the report; keys are (mode, optional scene).
type PatchTable = BTreeMap<(AttackMode, Option<SceneId>), PathBuf>;

fn parse_patch_args(specs: &[String]) -> Result<PatchTable> {
    let mut table = PatchTable::new();
    for spec in specs {
        let (key, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--patch {spec:?}: expected MODE[:SCENE]=PATH")))?;
        let (mode, scene) = match key.split_once(':') {
            Some((m, s)) => (m, Some(s.parse::<SceneId>()?)),
            None => (key, None),
        };
        let mode: AttackMode = mode.parse()?;
        if table.insert((mode, scene), PathBuf::from(path)).is_some() {
            return Err(Error::Usage(format!("--patch {key} given twice")));
        }
    }
    Ok(table)
}

fn report_header() -> String {
    let mut h = String::from("mode,scene,miou,macc,");
    h.push_str(&CLASS_NAMES.iter().map(|c| format!("iou_{c}")).collect::<Vec<_>>().join(","));
    h
}

fn report_row(mode: &str, scene: SceneId, r: &MetricsReport) -> String {
    let classes: Vec<String> = r
        .per_class_iou
        .iter()
        .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
        .collect();
    format!("{mode},{scene},{:.6},{:.6},{}", r.miou, r.macc, classes.join(","))
}

fn evaluate(ctx: &Ctx, args: &EvalArgs) -> Result<ExitCode> {
    if ctx.config.is_some() {
        return Err(Error::Usage("evaluate takes no --config".into()));
    }
    let table = parse_patch_args(&args.patches)?;
    let mut loaded = BTreeMap::new();
    for (key, path) in &table {
        loaded.insert(*key, PatchState::load(path)?);
    }
    let data = load_dataset(&args.data)?;
    let net = SegModel::open(&args.model)?;
    let split: Split = args.split.into();
    let dims = loaded.values().next().map(|p| p.dims()).unwrap_or(advpatch::scene::AD_DIMS);
    let random = random_patch(ctx.seed.unwrap_or(7), dims)?;
    let staged = StagedDir::new(&ctx.out("eval"))?;

    let mut csv = report_header();
    csv.push('\n');
    let mut rows = 0;
    for scene in SceneId::ALL {
        let samples: Vec<&SceneSample> = data.split_scene(split, scene);
        if samples.is_empty() {
            continue;
        }
        let mut entries: Vec<(String, &PatchState)> = vec![("random".into(), &random)];
        for mode in AttackMode::ALL {
            let patch = loaded.get(&(mode, Some(scene))).or_else(|| loaded.get(&(mode, None)));
            if let Some(p) = patch {
                entries.push((mode.to_string(), p));
            }
        }
        for (mode, patch) in entries {
            let r = evaluate_patch(&net, &samples, Some(&patch.delta), args.bake, args.placement.into())?;
            info!("{mode} scene {scene}: miou {:.4}", r.miou);
            csv.push_str(&report_row(&mode, scene, &r));
            csv.push('\n');
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Usage(format!("split {split} has no samples")));
    }
    write_atomic(&staged.path().join("report.csv"), csv.as_bytes())?;
    let dir = staged.commit()?;
    if !ctx.quiet {
        print!("{csv}");
    }
    ctx.say(format!(
        "report: {} ({} bake)",
        dir.join("report.csv").display(),
        match args.bake {
            Bake::SceneBake => "scene",
            Bake::DigitalOverlay => "digital",
        }
    ));
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> Result<ExitCode> {
    if ctx.config.is_some() {
        return Err(Error::Usage("gradcheck takes no --config".into()));
    }
    set_fault(args.inject_fault.map(|FaultArg::ConvSignFlip| Fault::ConvBackwardSignFlip));
    let start = Instant::now();
    let results = gradcheck::run_all(ctx.seed.unwrap_or(7));
    set_fault(None);
    let results = results?;
    for r in &results {
        ctx.say(format!(
            "{:<5} {:<26} instances {:>3}  worst {:.2e}  tol {:.0e}  skipped {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.instances,
            r.worst,
            r.tolerance,
            r.skipped
        ));
    }
    if let Some(out) = &ctx.out {
        let staged = StagedDir::new(out)?;
        write_atomic(&staged.path().join("gradcheck.json"), &serde_json::to_vec_pretty(&results)?)?;
        staged.commit()?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    ctx.say(format!(
        "{} of {} checks passed in {:.1?}",
        results.len() - failed,
        results.len(),
        start.elapsed()
    ));
    if failed > 0 {
        eprintln!("gradcheck: {failed} check(s) failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
