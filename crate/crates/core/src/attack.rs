//! Patch optimisation: clipped stochastic gradient ascent for the
//! non-robust, EOT and scene-specific attacks, and the loss comparison.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::labels::{predict_labels, LabelMap};
use crate::loss::{
    adaptive_gamma, combined_gradient, correct_set, normalized, nps_loss, pixelwise_ce, smoothness_loss,
    split_losses, BaselineMode, GammaMode, LossConfig, PrintableColorSet,
};
use crate::metrics::ConfusionMatrix;
use crate::model::{write_atomic, SegModel};
use crate::optim::{adam_update, AdamConfig, Direction};
use crate::patch::{
    appearance_transform, apply_patch, billboard_anchor, centered_placement, random_patch, sample_eot_placement,
    scene_placement, AppearanceDraw, AppearanceParams, PatchState, PlacementSpec, TranslateMode,
};
use crate::rng::{self, Stream};
use crate::scene::render::{SceneId, SceneLayout, SceneSample, AD_DIMS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Fixed central placement, no appearance changes.
    NoEot,
    /// Random placement and scale plus appearance noise.
    Eot,
    /// Placement through the billboard homography of each sample's camera.
    SceneSpecific,
}

impl AttackMode {
    pub const ALL: [AttackMode; 3] = [AttackMode::NoEot, AttackMode::Eot, AttackMode::SceneSpecific];

    /// Appearance ranges used when the config does not override them.
    pub fn default_appearance(self) -> AppearanceParams {
        match self {
            AttackMode::NoEot => AppearanceParams::default(),
            AttackMode::Eot => AppearanceParams {
                noise_std: 0.05,
                ..Default::default()
            },
            AttackMode::SceneSpecific => AppearanceParams {
                noise_std: 0.1,
                brightness_delta: 0.1,
                contrast_delta: 0.1,
            },
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::NoEot => "no_eot",
            AttackMode::Eot => "eot",
            AttackMode::SceneSpecific => "scene_specific",
        })
    }
}

impl FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "no_eot" => Ok(AttackMode::NoEot),
            "eot" => Ok(AttackMode::Eot),
            "scene_specific" => Ok(AttackMode::SceneSpecific),
            _ => Err(Error::Usage(format!(
                "unknown attack mode {s:?} (expected no-eot, eot or scene-specific)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// One Adam ascent step per image.
    Adam,
    /// One plain step per epoch along the summed per-image directions.
    SgdSum,
}

/// Where EOT placements are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EotAnchor {
    /// Around the image centre at the patch's own size (digital setting).
    #[default]
    ImageCenter,
    /// Around each image's projected billboard, sized to its area.
    Billboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// `(rows, cols)`.
    pub patch_dims: (usize, usize),
    pub epochs: usize,
    pub lr: f32,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub scale_range: [f64; 2],
    pub eot_anchor: EotAnchor,
    /// Overrides the mode's default appearance ranges.
    pub appearance: Option<AppearanceParams>,
    pub seed: u64,
    pub scene: Option<SceneId>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::Eot,
            patch_dims: AD_DIMS,
            epochs: 200,
            lr: 0.5,
            optimizer: OptimizerKind::Adam,
            loss: LossConfig::default(),
            scale_range: [0.8, 1.2],
            eot_anchor: EotAnchor::ImageCenter,
            appearance: None,
            seed: 7,
            scene: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.patch_dims.0 == 0 || self.patch_dims.1 == 0 {
            return Err(Error::Config("patch dimensions must be positive".into()));
        }
        if self.mode == AttackMode::SceneSpecific && self.scene.is_none() {
            return Err(Error::Config("scene_specific mode needs a scene".into()));
        }
        self.loss.validate()?;
        self.appearance().validate()
    }

    pub fn appearance(&self) -> AppearanceParams {
        self.appearance.unwrap_or_else(|| self.mode.default_appearance())
    }

    fn same_except_loss(&self, other: &AttackConfig) -> bool {
        let mut o = other.clone();
        o.loss = self.loss;
        &o == self
    }
}

/// Per-epoch record of an attack run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// mIoU of the predictions made under attack during this epoch.
    pub miou: f32,
    pub l_adv: f32,
    pub upsilon_frac: f32,
    pub gamma: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttackTrace {
    pub records: Vec<EpochRecord>,
    pub skipped: usize,
}

impl AttackTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,miou,l_adv,upsilon_frac,gamma\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.miou, r.l_adv, r.upsilon_frac, r.gamma
            ));
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Placement and appearance draw for sample `index` of `epoch`.
fn draw_transform(
    cfg: &AttackConfig,
    sample: &SceneSample,
    draw_index: u64,
) -> Result<(PlacementSpec, AppearanceDraw)> {
    let dims = sample.labels.dims();
    let spec = match cfg.mode {
        AttackMode::NoEot => centered_placement(dims, cfg.patch_dims)?,
        AttackMode::Eot => {
            let translate = match cfg.eot_anchor {
                EotAnchor::ImageCenter => TranslateMode::ImageCenter,
                EotAnchor::Billboard => {
                    let quad = sample.billboard_quad_image.ok_or_else(|| {
                        Error::PlacementInfeasible("billboard is behind the camera".into())
                    })?;
                    billboard_anchor(&quad, cfg.patch_dims)?
                }
            };
            let mut rng = rng::stream(cfg.seed, Stream::Eot, draw_index);
            sample_eot_placement(&mut rng, dims, cfg.patch_dims, cfg.scale_range, translate)?
        }
        AttackMode::SceneSpecific => {
            let layout = SceneLayout::canonical(sample.scene);
            scene_placement(&sample.camera, &layout.billboard, dims, cfg.patch_dims)?
        }
    };
    let params = cfg.appearance();
    let draw = if params.is_identity() {
        AppearanceDraw::identity()
    } else {
        let mut rng = rng::stream(cfg.seed, Stream::Appearance, draw_index);
        params.sample(&mut rng, cfg.patch_dims)?
    };
    Ok((spec, draw))
}

struct StepOutput {
    direction: Vec<f32>,
    pred: LabelMap,
    l_adv: f32,
    upsilon_frac: f32,
    gamma: f32,
}

fn zero_if_absent(tape: &Tape, v: crate::autodiff::Var, n: usize) -> Vec<f32> {
    tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n])
}

/// Ascent direction on the adversarial loss for one patched image, before
/// regularisers.
fn adversarial_step(
    model: &SegModel,
    delta: &Tensor,
    sample: &SceneSample,
    spec: &PlacementSpec,
    draw: &AppearanceDraw,
    loss: &LossConfig,
) -> Result<StepOutput> {
    let n = delta.len();
    let mut tape = Tape::new();
    let d = tape.leaf(delta.clone(), true);
    let transformed = appearance_transform(&mut tape, d, draw)?;
    let x = tape.constant(sample.image.clone());
    let xt = apply_patch(&mut tape, x, transformed, spec)?;
    let mask = spec.mask().clone();
    debug_assert!(
        tape.value(xt)
            .data()
            .iter()
            .zip(sample.image.data())
            .enumerate()
            .all(|(i, (a, b))| mask[i % mask.len()] || a.to_bits() == b.to_bits()),
        "patched image differs from the original outside the patch"
    );
    let probs = model.forward_on(&mut tape, xt, false)?.probs;
    let pred = predict_labels(tape.value(probs))?;
    let gt = &sample.labels;
    let upsilon = correct_set(&pred, gt, &mask)?;
    debug_assert!(upsilon.iter().zip(mask.iter()).all(|(&u, &m)| !(u && m)));
    let upsilon_frac = adaptive_gamma(&upsilon, &mask)?;
    debug_assert!((0.0..=1.0).contains(&upsilon_frac));
    let outside = Rc::new(mask.iter().map(|m| !m).collect::<Vec<_>>());

    let (direction, l_adv, gamma) = match loss.baseline {
        BaselineMode::GammaSplit => {
            let (lm, lmb) = split_losses(&mut tape, probs, gt, &upsilon, &mask)?;
            let total = tape.value(lm).item()? + tape.value(lmb).item()?;
            tape.backward(lm)?;
            let gm = zero_if_absent(&tape, d, n);
            tape.reset_grads();
            tape.backward(lmb)?;
            let gmb = zero_if_absent(&tape, d, n);
            let gamma = match loss.gamma {
                GammaMode::Fixed(g) => g,
                GammaMode::Adaptive => upsilon_frac,
            };
            let dir = combined_gradient(&gm, &gmb, gamma)?;
            debug_assert!(crate::tensor::pairwise_sum(&dir.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt() <= 1.0 + 1e-4);
            let count = outside.iter().filter(|&&o| o).count();
            (dir, total / count as f32, gamma)
        }
        BaselineMode::CeFullN | BaselineMode::CeExcludingPatch => {
            let set = if loss.baseline == BaselineMode::CeFullN {
                Rc::new(vec![true; gt.len()])
            } else {
                outside
            };
            let l = pixelwise_ce(&mut tape, probs, gt, &set)?;
            let value = tape.value(l).item()?;
            tape.backward(l)?;
            (normalized(&zero_if_absent(&tape, d, n)), value, f32::NAN)
        }
    };
    Ok(StepOutput {
        direction,
        pred,
        l_adv,
        upsilon_frac,
        gamma,
    })
}

/// Gradient of `λ_S L_S + λ_N L_N` at `delta`, or `None` when both weights are 0.
fn regularizer_gradient(delta: &Tensor, loss: &LossConfig, colors: &PrintableColorSet) -> Result<Option<Vec<f32>>> {
    if loss.lambda_smooth == 0.0 && loss.lambda_nps == 0.0 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let d = tape.leaf(delta.clone(), true);
    let ls = smoothness_loss(&mut tape, d)?;
    let ln = nps_loss(&mut tape, d, colors)?;
    let ls = tape.mul_scalar(ls, loss.lambda_smooth)?;
    let ln = tape.mul_scalar(ln, loss.lambda_nps)?;
    let total = tape.add(ls, ln)?;
    tape.backward(total)?;
    Ok(Some(zero_if_absent(&tape, d, delta.len())))
}

fn clamp01_in_place(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

/// Crafts a patch against the frozen `model` over `samples` (in order).
pub fn optimize_patch(
    model: &SegModel,
    samples: &[&SceneSample],
    config: &AttackConfig,
    colors: &PrintableColorSet,
) -> Result<(PatchState, AttackTrace)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("attack set is empty".into()));
    }
    for s in samples {
        let (h, w) = s.labels.dims();
        if config.patch_dims.0 >= h || config.patch_dims.1 >= w {
            return Err(Error::Config(format!(
                "patch {:?} must be smaller than the {h}x{w} images",
                config.patch_dims
            )));
        }
        s.labels.check_classes(model.num_classes())?;
        if config.mode == AttackMode::SceneSpecific && Some(s.scene) != config.scene {
            return Err(Error::Usage(format!(
                "scene-specific attack on scene {} got a sample of scene {}",
                config.scene.expect("validated"),
                s.scene
            )));
        }
    }
    #[cfg(debug_assertions)]
    let weights_before: Vec<Tensor> = model.params().to_vec();

    let mut state = random_patch(config.seed, config.patch_dims)?;
    let adam = AdamConfig::with_lr(config.lr);
    let n = state.delta.len();
    let mut trace = AttackTrace::default();
    for epoch in 0..config.epochs {
        let mut cm = ConfusionMatrix::new(model.num_classes());
        let (mut l_sum, mut u_sum, mut g_sum, mut used) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        let mut summed = vec![0.0f32; n];
        for (i, sample) in samples.iter().enumerate() {
            let draw_index = (epoch * samples.len() + i) as u64;
            let wrap = |e: Error| Error::AttackStep {
                epoch,
                sample: i,
                source: Box::new(e),
            };
            let (spec, draw) = match draw_transform(config, sample, draw_index) {
                Ok(t) => t,
                Err(Error::PlacementInfeasible(msg)) => {
                    warn!("epoch {epoch}, sample {i}: skipped ({msg})");
                    trace.skipped += 1;
                    continue;
                }
                Err(e) => return Err(wrap(e)),
            };
            let out = adversarial_step(model, &state.delta, sample, &spec, &draw, &config.loss).map_err(wrap)?;
            cm.accumulate(&out.pred, &sample.labels, None).map_err(wrap)?;
            l_sum += out.l_adv as f64;
            u_sum += out.upsilon_frac as f64;
            g_sum += out.gamma as f64;
            used += 1;
            let mut dir = out.direction;
            if let Some(reg) = regularizer_gradient(&state.delta, &config.loss, colors).map_err(wrap)? {
                dir.iter_mut().zip(&reg).for_each(|(d, r)| *d -= r);
            }
            if dir.iter().any(|v| !v.is_finite()) {
                return Err(wrap(Error::NonFinite {
                    op: "attack direction",
                    node: 0,
                }));
            }
            match config.optimizer {
                OptimizerKind::Adam => {
                    state.t += 1;
                    adam_update(&adam, &mut state.moments, state.t, state.delta.data_mut(), &dir, Direction::Ascent);
                    clamp01_in_place(state.delta.data_mut());
                    debug_assert!(state.delta.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                OptimizerKind::SgdSum => summed.iter_mut().zip(&dir).for_each(|(s, d)| *s += d),
            }
        }
        if config.optimizer == OptimizerKind::SgdSum && used > 0 {
            state.t += 1;
            state.delta.data_mut().iter_mut().zip(&summed).for_each(|(p, s)| *p += config.lr * s);
            clamp01_in_place(state.delta.data_mut());
            debug_assert!(state.delta.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        if used == 0 {
            return Err(Error::PlacementInfeasible(format!("every sample was skipped in epoch {epoch}")));
        }
        let k = used as f64;
        trace.records.push(EpochRecord {
            epoch,
            miou: cm.miou()?,
            l_adv: (l_sum / k) as f32,
            upsilon_frac: (u_sum / k) as f32,
            gamma: (g_sum / k) as f32,
        });
    }
    #[cfg(debug_assertions)]
    debug_assert!(
        model.params().iter().zip(&weights_before).all(|(a, b)| a == b),
        "attack modified the model weights"
    );
    Ok((state, trace))
}

/// The γ grid of the loss comparison, with the adaptive rule last.
pub fn gamma_grid() -> Vec<LossConfig> {
    let mut v: Vec<LossConfig> = [0.5, 0.6, 0.7, 0.8, 0.95, 1.0]
        .into_iter()
        .map(|g| LossConfig {
            gamma: GammaMode::Fixed(g),
            ..LossConfig::default()
        })
        .collect();
    v.push(LossConfig::default());
    v
}

/// Runs [`optimize_patch`] for each config; configs may differ only in `loss`.
pub fn compare_losses(
    model: &SegModel,
    samples: &[&SceneSample],
    configs: &[AttackConfig],
    colors: &PrintableColorSet,
) -> Result<Vec<(PatchState, AttackTrace)>> {
    let Some(first) = configs.first() else {
        return Err(Error::Usage("no loss configurations to compare".into()));
    };
    if let Some(bad) = configs.iter().find(|c| !first.same_except_loss(c)) {
        return Err(Error::Usage(format!(
            "configs must differ only in the loss; {} differs elsewhere",
            bad.loss.label()
        )));
    }
    configs.iter().map(|c| optimize_patch(model, samples, c, colors)).collect()
}

/// Writes one trace CSV per config plus an aligned `compare.csv` of mIoU.
pub fn write_comparison(dir: &Path, configs: &[AttackConfig], traces: &[AttackTrace]) -> Result<()> {
    let mut table = Vec::new();
    let header: Vec<String> = configs.iter().map(|c| c.loss.label()).collect();
    writeln!(table, "epoch,{}", header.join(",")).expect("vec write");
    let epochs = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let cells: Vec<String> = traces
            .iter()
            .map(|t| t.records.get(e).map(|r| format!("{:.6}", r.miou)).unwrap_or_default())
            .collect();
        writeln!(table, "{e},{}", cells.join(",")).expect("vec write");
    }
    for (c, t) in configs.iter().zip(traces) {
        t.save_csv(&dir.join(format!("trace_{}.csv", c.loss.label())))?;
    }
    write_atomic(&dir.join("compare.csv"), &table)
}
