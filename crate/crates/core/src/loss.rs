//! Adversarial losses: pixel-wise cross-entropy, the correctly-classified
//! set, the split losses with their γ-blended normalised gradient, and the
//! smoothness and non-printability regularisers.

use std::fmt;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::pairwise_sum;

pub const PROB_FLOOR: f32 = 1e-12;
pub const NORM_GUARD: f32 = 1e-12;

/// Fixed γ or the per-step adaptive value `|Υ| / |N \ Ñ|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaMode {
    Fixed(f32),
    Adaptive,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaMode::Fixed(g) => write!(f, "{g}"),
            GammaMode::Adaptive => f.write_str("adaptive"),
        }
    }
}

impl Serialize for GammaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GammaMode::Fixed(g) => s.serialize_f32(*g),
            GammaMode::Adaptive => s.serialize_str("adaptive"),
        }
    }
}

impl<'de> Deserialize<'de> for GammaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => Ok(GammaMode::Fixed(g)),
            Raw::Str(s) if s == "adaptive" => Ok(GammaMode::Adaptive),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "gamma must be a number or \"adaptive\", got {s:?}"
            ))),
        }
    }
}

/// Which adversarial objective drives the patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean CE over every pixel, patch pixels included.
    CeFullN,
    /// Mean CE over the non-patch pixels.
    CeExcludingPatch,
    /// γ-blend of the normalised split-loss gradients.
    GammaSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub baseline: BaselineMode,
    /// Only consulted for [`BaselineMode::GammaSplit`].
    pub gamma: GammaMode,
    pub lambda_smooth: f32,
    pub lambda_nps: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            baseline: BaselineMode::GammaSplit,
            gamma: GammaMode::Adaptive,
            lambda_smooth: 0.01,
            lambda_nps: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let GammaMode::Fixed(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("gamma {g} must lie in [0, 1]")));
            }
        }
        for (name, l) in [("lambda_smooth", self.lambda_smooth), ("lambda_nps", self.lambda_nps)] {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("{name} = {l} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Short name used in file names and tables.
    pub fn label(&self) -> String {
        match self.baseline {
            BaselineMode::CeFullN => "ce_full_n".into(),
            BaselineMode::CeExcludingPatch => "ce_excluding_patch".into(),
            BaselineMode::GammaSplit => format!("gamma_{}", self.gamma),
        }
    }
}

/// Palette against which the non-printability score is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrintableColorSet {
    colors: Vec<[f32; 3]>,
}

impl Default for PrintableColorSet {
    /// The 3x3x3 lattice on {0, 0.5, 1} plus black, white and mid-gray.
    fn default() -> Self {
        let levels = [0.0, 0.5, 1.0];
        let mut colors = Vec::with_capacity(30);
        for r in levels {
            for g in levels {
                for b in levels {
                    colors.push([r, g, b]);
                }
            }
        }
        colors.extend([[0.0; 3], [1.0; 3], [0.5; 3]]);
        PrintableColorSet { colors }
    }
}

impl PrintableColorSet {
    pub fn new(colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::Config("printable color set is empty".into()));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("printable colors must lie in [0, 1]".into()));
        }
        Ok(PrintableColorSet { colors })
    }

    /// Reads a JSON array of RGB triplets.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PrintableColorSet::new(serde_json::from_str(&text)?)
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }
}

fn log_probs(tape: &mut Tape, probs: Var, labels: &LabelMap) -> Result<Var> {
    let picked = tape.gather_channels(probs, Rc::new(labels.data().to_vec()))?;
    let floored = tape.clamp_min(picked, PROB_FLOOR)?;
    tape.log(floored)
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Mean of `-log p[label]` over `pixel_set`.
pub fn pixelwise_ce(tape: &mut Tape, probs: Var, labels: &LabelMap, pixel_set: &Rc<Vec<bool>>) -> Result<Var> {
    let n = count(pixel_set);
    if n == 0 {
        return Err(Error::EmptySet("pixel-wise cross-entropy over an empty set".into()));
    }
    let logp = log_probs(tape, probs, labels)?;
    let s = tape.masked_sum(logp, pixel_set.clone())?;
    tape.mul_scalar(s, -1.0 / n as f32)
}

/// `Υ`: non-patch pixels whose prediction matches the ground truth.
pub fn correct_set(pred: &LabelMap, gt: &LabelMap, patch_mask: &[bool]) -> Result<Vec<bool>> {
    if pred.dims() != gt.dims() || patch_mask.len() != gt.len() {
        return Err(Error::Dimension("correct_set: shapes differ".into()));
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(patch_mask)
        .map(|((p, g), &m)| !m && p == g)
        .collect())
}

/// `(L_M, L_M̄)`: summed CE over `Υ` and over the misclassified non-patch pixels.
pub fn split_losses(
    tape: &mut Tape,
    probs: Var,
    labels: &LabelMap,
    upsilon: &[bool],
    patch_mask: &[bool],
) -> Result<(Var, Var)> {
    if upsilon.len() != labels.len() || patch_mask.len() != labels.len() {
        return Err(Error::Dimension("split_losses: mask sizes differ".into()));
    }
    if upsilon.iter().zip(patch_mask).any(|(&u, &m)| u && m) {
        return Err(Error::Usage("correct set overlaps the patch pixels".into()));
    }
    let rest: Vec<bool> = upsilon.iter().zip(patch_mask).map(|(&u, &m)| !u && !m).collect();
    let logp = log_probs(tape, probs, labels)?;
    let sm = tape.masked_sum(logp, Rc::new(upsilon.to_vec()))?;
    let sr = tape.masked_sum(logp, Rc::new(rest))?;
    Ok((tape.mul_scalar(sm, -1.0)?, tape.mul_scalar(sr, -1.0)?))
}

fn l2(v: &[f32]) -> f32 {
    let sq: Vec<f32> = v.iter().map(|x| x * x).collect();
    pairwise_sum(&sq).sqrt()
}

/// `v / max(‖v‖₂, 1e-12)`.
pub fn normalized(v: &[f32]) -> Vec<f32> {
    let n = l2(v).max(NORM_GUARD);
    v.iter().map(|x| x / n).collect()
}

/// `γ gM/‖gM‖ + (1-γ) gM̄/‖gM̄‖` over the flattened patch gradient.
pub fn combined_gradient(g_m: &[f32], g_mbar: &[f32], gamma: f32) -> Result<Vec<f32>> {
    if g_m.len() != g_mbar.len() {
        return Err(Error::Dimension("combined_gradient: gradient sizes differ".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} must lie in [0, 1]")));
    }
    let nm = l2(g_m).max(NORM_GUARD);
    let nb = l2(g_mbar).max(NORM_GUARD);
    Ok(g_m
        .iter()
        .zip(g_mbar)
        .map(|(a, b)| gamma * (a / nm) + (1.0 - gamma) * (b / nb))
        .collect())
}

/// `|Υ| / |N \ Ñ|`.
pub fn adaptive_gamma(upsilon: &[bool], patch_mask: &[bool]) -> Result<f32> {
    let outside = patch_mask.iter().filter(|&&m| !m).count();
    if outside == 0 {
        return Err(Error::Config("the patch covers the whole image".into()));
    }
    let u = upsilon.iter().zip(patch_mask).filter(|(&u, &m)| u && !m).count();
    Ok(u as f32 / outside as f32)
}

/// Total variation: squared neighbour differences summed over channels,
/// divided by the patch pixel count.
pub fn smoothness_loss(tape: &mut Tape, patch: Var) -> Result<Var> {
    let shape = tape.value(patch).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("smoothness_loss needs [C,H,W], got {shape:?}")));
    }
    let mut total = None;
    for axis in 0..2 {
        let d = tape.shift_diff(patch, axis)?;
        if tape.value(d).is_empty() {
            continue;
        }
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => {
            let z = tape.mul_scalar(patch, 0.0)?;
            tape.sum(z)?
        }
    };
    tape.mul_scalar(total, 1.0 / (shape[1] * shape[2]) as f32)
}

/// Mean over patch pixels of the product of squared distances to every
/// printable color.
pub fn nps_loss(tape: &mut Tape, patch: Var, colors: &PrintableColorSet) -> Result<Var> {
    let mut prod = None;
    for &c in colors.colors() {
        let d = tape.sq_dist_to_color(patch, c)?;
        prod = Some(match prod {
            Some(p) => tape.mul(p, d)?,
            None => d,
        });
    }
    let prod = prod.ok_or_else(|| Error::Config("printable color set is empty".into()))?;
    tape.mean(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs_tape(data: Vec<f32>, c: usize, h: usize, w: usize) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![c, h, w], data).unwrap(), true);
        (tape, v)
    }

    #[test]
    fn ce_examples() {
        let (mut tape, p) = probs_tape(vec![0.2; 5 * 2 * 3], 5, 2, 3);
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let all = Rc::new(vec![true; 6]);
        let l = pixelwise_ce(&mut tape, p, &labels, &all).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f32.ln()).abs() < 1e-6);

        let (mut tape, p) = probs_tape(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2);
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let l = pixelwise_ce(&mut tape, p, &labels, &Rc::new(vec![true; 2])).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let (mut tape, p) = probs_tape(vec![0.25, 0.75], 2, 1, 1);
        let labels = LabelMap::new(1, 1, vec![0]).unwrap();
        let l = pixelwise_ce(&mut tape, p, &labels, &Rc::new(vec![true])).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f32.ln()).abs() < 1e-6);

        assert!(matches!(
            pixelwise_ce(&mut tape, p, &labels, &Rc::new(vec![false])),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn correct_set_examples() {
        let gt = LabelMap::new(2, 5, vec![1; 10]).unwrap();
        let none = vec![false; 10];
        assert!(correct_set(&gt, &gt, &none).unwrap().iter().all(|&u| u));
        let mut patch = vec![false; 10];
        patch[..4].iter_mut().for_each(|m| *m = true);
        let u = correct_set(&gt, &gt, &patch).unwrap();
        assert_eq!(count(&u), 6);
        let wrong = LabelMap::new(2, 5, vec![2; 10]).unwrap();
        assert_eq!(count(&correct_set(&wrong, &gt, &none).unwrap()), 0);
    }

    #[test]
    fn split_losses_sum_to_total() {
        let data: Vec<f32> = (0..3 * 4).map(|i| 0.1 + (i % 5) as f32 * 0.15).collect();
        let (mut tape, p) = probs_tape(data, 3, 2, 2);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let patch = vec![false, false, false, true];
        let ups = vec![true, false, true, false];
        let (lm, lmb) = split_losses(&mut tape, p, &labels, &ups, &patch).unwrap();
        let outside = Rc::new(patch.iter().map(|m| !m).collect::<Vec<_>>());
        let mean = pixelwise_ce(&mut tape, p, &labels, &outside).unwrap();
        let total = tape.value(lm).item().unwrap() + tape.value(lmb).item().unwrap();
        assert!((total - 3.0 * tape.value(mean).item().unwrap()).abs() < 1e-5);
        let all_wrong = vec![false; 4];
        let (lm, _) = split_losses(&mut tape, p, &labels, &all_wrong, &patch).unwrap();
        assert_eq!(tape.value(lm).item().unwrap(), 0.0);
    }

    #[test]
    fn combined_gradient_endpoints() {
        let a = [3.0, 4.0];
        let b = [0.0, 2.0];
        assert_eq!(combined_gradient(&a, &b, 1.0).unwrap(), vec![0.6, 0.8]);
        assert_eq!(combined_gradient(&a, &b, 0.0).unwrap(), vec![0.0, 1.0]);
        for g in [0.0, 0.3, 0.7, 1.0] {
            let r = combined_gradient(&a, &a, g).unwrap();
            assert!((r[0] - 0.6).abs() < 1e-6 && (r[1] - 0.8).abs() < 1e-6);
        }
        assert_eq!(combined_gradient(&[0.0; 2], &[0.0; 2], 0.5).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn adaptive_gamma_examples() {
        let patch = vec![false; 4];
        assert_eq!(adaptive_gamma(&[false; 4], &patch).unwrap(), 0.0);
        assert_eq!(adaptive_gamma(&[true; 4], &patch).unwrap(), 1.0);
        let mut ups = vec![false; 8192 + 100];
        let mut patch = vec![false; 8192 + 100];
        ups[..4096].iter_mut().for_each(|u| *u = true);
        patch[8192..].iter_mut().for_each(|m| *m = true);
        assert_eq!(adaptive_gamma(&ups, &patch).unwrap(), 0.5);
        assert!(matches!(adaptive_gamma(&[false; 2], &[true; 2]), Err(Error::Config(_))));
    }

    #[test]
    fn smoothness_examples() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[3, 4, 4], 0.3), true);
        let l = smoothness_loss(&mut tape, c).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let p = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(), true);
        let l = smoothness_loss(&mut tape, p).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
    }

    #[test]
    fn nps_examples() {
        let colors = PrintableColorSet::default();
        assert_eq!(colors.colors().len(), 30);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[3, 2, 2], 0.5), true);
        let l = nps_loss(&mut tape, p, &colors).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let black = PrintableColorSet::new(vec![[0.0; 3]]).unwrap();
        let w = tape.leaf(Tensor::full(&[3, 2, 2], 1.0), true);
        let l = nps_loss(&mut tape, w, &black).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 3.0);
        assert!(PrintableColorSet::new(vec![]).is_err());
    }

    #[test]
    fn loss_config_json() {
        let c: LossConfig = serde_json::from_str(r#"{"baseline":"gamma_split","gamma":0.8}"#).unwrap();
        assert_eq!(c.gamma, GammaMode::Fixed(0.8));
        let c: LossConfig = serde_json::from_str(r#"{"gamma":"adaptive"}"#).unwrap();
        assert_eq!(c, LossConfig::default());
        assert!(serde_json::from_str::<LossConfig>(r#"{"gamma":"often"}"#).is_err());
        let bad = LossConfig { gamma: GammaMode::Fixed(1.5), ..Default::default() };
        assert!(bad.validate().is_err());
        let back: LossConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
