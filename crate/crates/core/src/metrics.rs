//! Confusion matrices, mIoU / mAcc, and patch evaluation on rendered scenes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::SegModel;
use crate::patch::{centered_placement, overlay, scene_placement};
use crate::scene::render::{quantize, render_scene, SceneLayout, SceneSample};
use crate::tensor::Tensor;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { n: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel not flagged in `exclude`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, exclude: Option<&[bool]>) -> Result<()> {
        if pred.dims() != gt.dims() || exclude.is_some_and(|e| e.len() != gt.len()) {
            return Err(Error::Dimension("accumulate: shapes differ".into()));
        }
        pred.check_classes(self.n)?;
        gt.check_classes(self.n)?;
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if exclude.is_some_and(|e| e[i]) {
                continue;
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Dimension("merging confusion matrices of different size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP / (TP + FP + FN)`; `None` for a class absent from both.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.n).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.n).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// `TP / (TP + FN)`; `None` for a class absent from the ground truth.
    pub fn class_acc(&self, c: usize) -> Option<f64> {
        let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
        (row > 0).then(|| self.get(c, c) as f64 / row as f64)
    }

    fn mean_of(&self, f: impl Fn(usize) -> Option<f64>) -> Result<f32> {
        if self.total() == 0 {
            return Err(Error::Usage("metrics of an empty confusion matrix".into()));
        }
        let vals: Vec<f64> = (0..self.n).filter_map(f).collect();
        Ok((vals.iter().sum::<f64>() / vals.len() as f64) as f32)
    }

    pub fn miou(&self) -> Result<f32> {
        self.mean_of(|c| self.class_iou(c))
    }

    pub fn macc(&self) -> Result<f32> {
        self.mean_of(|c| self.class_acc(c))
    }
}

pub const ABSENT_POLICY: &str = "absent_classes_excluded";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f32>>,
    pub miou: f32,
    pub macc: f32,
    pub per_image_miou: Vec<f32>,
    pub policy: &'static str,
}

impl MetricsReport {
    pub fn from_matrix(cm: &ConfusionMatrix, per_image_miou: Vec<f32>) -> Result<Self> {
        Ok(MetricsReport {
            per_class_iou: (0..cm.num_classes()).map(|c| cm.class_iou(c).map(|v| v as f32)).collect(),
            miou: cm.miou()?,
            macc: cm.macc()?,
            per_image_miou,
            policy: ABSENT_POLICY,
        })
    }
}

/// Pools the predictions of `model` over `(image, labels)` pairs.
pub fn evaluate_images<'a, I>(model: &SegModel, pairs: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (Tensor, &'a LabelMap)>,
{
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let mut per_image = Vec::new();
    for (image, gt) in pairs {
        let pred = model.predict(&image)?;
        let mut one = ConfusionMatrix::new(model.num_classes());
        one.accumulate(&pred, gt, None)?;
        per_image.push(one.miou()?);
        cm.merge(&one)?;
    }
    if per_image.is_empty() {
        return Err(Error::EmptySet("no images to evaluate".into()));
    }
    MetricsReport::from_matrix(&cm, per_image)
}

/// How the patch enters the evaluated image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bake {
    /// Re-render the scene with the patch as the billboard texture.
    SceneBake,
    /// Paste the patch onto the stored image.
    DigitalOverlay,
}

impl FromStr for Bake {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" | "scene_bake" => Ok(Bake::SceneBake),
            "digital" | "digital_overlay" => Ok(Bake::DigitalOverlay),
            _ => Err(Error::Usage(format!("unknown bake mode {s:?} (expected digital or scene)"))),
        }
    }
}

impl fmt::Display for Bake {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bake::SceneBake => "scene",
            Bake::DigitalOverlay => "digital",
        })
    }
}

/// Placement for digital overlays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPlacement {
    /// Unscaled, at the image centre.
    Center,
    /// Warped onto the billboard face through the camera homography.
    Billboard,
}

/// The image the model sees for `sample` under the given protocol.
pub fn attacked_image(
    sample: &SceneSample,
    patch: Option<&Tensor>,
    bake: Bake,
    placement: EvalPlacement,
) -> Result<Tensor> {
    let Some(patch) = patch else {
        return Ok(sample.image.clone());
    };
    let dims = sample.labels.dims();
    let pdims = (patch.dim(1), patch.dim(2));
    match bake {
        Bake::SceneBake => {
            let layout = SceneLayout::canonical(sample.scene);
            let r = render_scene(&layout, &sample.camera, dims, &sample.style, Some(patch))?;
            Ok(quantize(&r.image))
        }
        Bake::DigitalOverlay => {
            let spec = match placement {
                EvalPlacement::Center => centered_placement(dims, pdims)?,
                EvalPlacement::Billboard => {
                    let layout = SceneLayout::canonical(sample.scene);
                    scene_placement(&sample.camera, &layout.billboard, dims, pdims)?
                }
            };
            overlay(&sample.image, patch, &spec)
        }
    }
}

/// Metrics of `model` on `samples` with `patch` applied (clean when `None`).
pub fn evaluate_patch(
    model: &SegModel,
    samples: &[&SceneSample],
    patch: Option<&Tensor>,
    bake: Bake,
    placement: EvalPlacement,
) -> Result<MetricsReport> {
    let images = samples
        .iter()
        .map(|s| attacked_image(s, patch, bake, placement).map(|img| (img, &s.labels)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(model, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt, None).unwrap();
        assert_eq!((cm.miou().unwrap(), cm.macc().unwrap()), (1.0, 1.0));
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p);
            }
        }
    }

    #[test]
    fn two_class_example() {
        let gt = LabelMap::new(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 4, vec![0, 0, 0, 1, 1, 1, 1, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt, None).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap());
        assert_eq!(cm.class_iou(0), Some(0.6));
        assert!((cm.miou().unwrap() - 0.6).abs() < 1e-7);
    }

    #[test]
    fn absent_class_excluded() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&pred, &gt, None).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&pred, &gt, None).unwrap();
        assert_eq!(a.miou().unwrap(), b.miou().unwrap());
        assert_eq!(a.macc().unwrap(), b.macc().unwrap());
    }

    #[test]
    fn exclusion_and_errors() {
        let gt = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &gt, Some(&[true; 3])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::Usage(_))));
        let bad = LabelMap::new(1, 3, vec![0, 1, 7]).unwrap();
        assert!(matches!(cm.accumulate(&bad, &gt, None), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn halves_add_up(a in proptest::collection::vec(0u8..4, 16), b in proptest::collection::vec(0u8..4, 16)) {
            let pred = LabelMap::new(4, 4, a).unwrap();
            let gt = LabelMap::new(4, 4, b).unwrap();
            let top: Vec<bool> = (0..16).map(|i| i < 8).collect();
            let bottom: Vec<bool> = top.iter().map(|t| !t).collect();
            let mut full = ConfusionMatrix::new(4);
            full.accumulate(&pred, &gt, None).unwrap();
            let mut split = ConfusionMatrix::new(4);
            split.accumulate(&pred, &gt, Some(&top)).unwrap();
            split.accumulate(&pred, &gt, Some(&bottom)).unwrap();
            prop_assert_eq!(full, split);
        }

        #[test]
        fn relabeling_is_equivariant(a in proptest::collection::vec(0u8..4, 16), b in proptest::collection::vec(0u8..4, 16)) {
            let perm = [2u8, 0, 3, 1];
            let p = |v: &[u8]| LabelMap::new(4, 4, v.iter().map(|&x| perm[x as usize]).collect()).unwrap();
            let mut x = ConfusionMatrix::new(4);
            x.accumulate(&LabelMap::new(4, 4, a.clone()).unwrap(), &LabelMap::new(4, 4, b.clone()).unwrap(), None).unwrap();
            let mut y = ConfusionMatrix::new(4);
            y.accumulate(&p(&a), &p(&b), None).unwrap();
            prop_assert!((x.miou().unwrap() - y.miou().unwrap()).abs() < 1e-6);
            prop_assert!((x.macc().unwrap() - y.macc().unwrap()).abs() < 1e-6);
        }
    }
}
