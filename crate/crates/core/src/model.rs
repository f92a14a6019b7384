//! Compact encoder-decoder segmentation network.
//!
//! Layout (widths `[w0, w1]`, defaults `[16, 32]`):
//!
//! ```text
//! enc0  conv3x3  3 -> w0            relu   full res
//! down1 conv3x3  w0 -> w1, stride 2 relu   1/2
//! down2 conv3x3  w1 -> w1, stride 2 relu   1/4
//! mid   conv3x3  w1 -> w1           relu   1/4
//! up1   upsample(mid) + down1, conv3x3 w1 -> w0 relu   1/2
//! head  upsample(up1) + enc0, conv1x1 w0 -> N_c, softmax
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::optim::{adam_update, AdamConfig, Direction, Moments};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Architecture header stored in weight files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub widths: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 5,
            widths: [16, 32],
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// (kernel shape, bias len) per layer, in storage order.
    fn layer_shapes(&self) -> Vec<([usize; 4], usize)> {
        let [w0, w1] = self.widths;
        vec![
            ([w0, 3, 3, 3], w0),
            ([w1, w0, 3, 3], w1),
            ([w1, w1, 3, 3], w1),
            ([w1, w1, 3, 3], w1),
            ([w0, w1, 3, 3], w0),
            ([self.num_classes, w0, 1, 1], self.num_classes),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    /// kernel, bias, kernel, bias, ... in layer order.
    params: Vec<Tensor>,
}

/// Parameter handles of one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    pub params: Vec<Var>,
}

impl SegModel {
    /// He-normal kernels and zero biases from the `init` stream of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_classes < 2 || config.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                config.num_classes
            )));
        }
        if config.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let mut rng = rng::stream(config.seed, Stream::Init, 0);
        let mut params = Vec::new();
        for (kshape, blen) in config.layer_shapes() {
            let fan_in = (kshape[1] * kshape[2] * kshape[3]) as f32;
            let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
            let n: usize = kshape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(Tensor::new(kshape.to_vec(), data)?);
            params.push(Tensor::zeros(&[blen]));
        }
        Ok(SegModel { config, params })
    }

    /// Model with explicit parameters (kernel, bias, ... in layer order).
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = config
            .layer_shapes()
            .into_iter()
            .flat_map(|(k, b)| [k.to_vec(), vec![b]])
            .collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if got != expected {
            return Err(Error::Dimension(format!(
                "parameter shapes {got:?} do not match the architecture {expected:?}"
            )));
        }
        Ok(SegModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Records the network on `tape`. Parameters are leaves that require
    /// gradients only when `trainable`.
    pub fn forward_on(&self, tape: &mut Tape, image: Var, trainable: bool) -> Result<ForwardVars> {
        let s = tape.value(image).shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("model input must be [3,H,W], got {s:?}")));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Dimension(format!(
                "model input {}x{} must have both sides divisible by 4",
                s[1], s[2]
            )));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        let layer = |tape: &mut Tape, x: Var, i: usize, stride: usize, relu: bool| -> Result<Var> {
            let pad = tape.value(params[2 * i]).dim(2) / 2;
            let y = tape.conv2d(x, params[2 * i], stride, pad)?;
            let y = tape.add_bias(y, params[2 * i + 1])?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };
        let enc0 = layer(tape, image, 0, 1, true)?;
        let down1 = layer(tape, enc0, 1, 2, true)?;
        let down2 = layer(tape, down1, 2, 2, true)?;
        let mid = layer(tape, down2, 3, 1, true)?;
        let up = tape.upsample2(mid)?;
        let skip1 = tape.add(up, down1)?;
        let up1 = layer(tape, skip1, 4, 1, true)?;
        let up = tape.upsample2(up1)?;
        let skip0 = tape.add(up, enc0)?;
        let logits = layer(tape, skip0, 5, 1, false)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(ForwardVars {
            logits,
            probs,
            params,
        })
    }

    /// Class probabilities `[N_c,H,W]` for `image` `[3,H,W]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward_on(&mut tape, x, false)?;
        Ok(tape.value(out.probs).clone())
    }

    pub fn forward_logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward_on(&mut tape, x, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        crate::labels::predict_labels(&self.forward(image)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.config).expect("config serialises");
        out.push(b'\n');
        for p in &self.params {
            p.write_pft(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    /// Parses a weight file. Any structural problem is a format error; the
    /// header must describe a valid architecture.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| Error::Format(format!("weight header: {e}")))?;
        if !header.ends_with('\n') {
            return Err(Error::Format("weight file has no header line".into()));
        }
        let config: ModelConfig = serde_json::from_str(header.trim_end())
            .map_err(|e| Error::Format(format!("weight header: {e}")))?;
        let mut model = SegModel::new(config).map_err(|e| Error::Format(e.to_string()))?;
        for (slot, (kshape, blen)) in model.params.chunks_mut(2).zip(config.layer_shapes()) {
            let k = Tensor::read_pft(&mut reader)?;
            let b = Tensor::read_pft(&mut reader)?;
            if k.shape() != kshape || b.shape() != [blen] {
                return Err(Error::Format(format!(
                    "tensor shapes {:?}/{:?} do not match architecture {kshape:?}/[{blen}]",
                    k.shape(),
                    b.shape()
                )));
            }
            slot[0] = k;
            slot[1] = b;
        }
        let mut rest = Vec::new();
        std::io::Read::read_to_end(&mut reader, &mut rest)
            .map_err(|e| Error::Format(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after weights", rest.len())));
        }
        Ok(model)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Replaces this model's weights with those in `path`. The file must
    /// match this model's class count and widths; on any error `self` is
    /// left untouched.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let loaded = SegModel::from_bytes(&bytes)?;
        if loaded.config.num_classes != self.config.num_classes
            || loaded.config.widths != self.config.widths
        {
            return Err(Error::Dimension(format!(
                "weights are for {} classes / widths {:?}, model expects {} / {:?}",
                loaded.config.num_classes,
                loaded.config.widths,
                self.config.num_classes,
                self.config.widths
            )));
        }
        *self = loaded;
        Ok(())
    }

    /// Loads a model with whatever architecture the file declares.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        SegModel::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Mean pixel-wise cross-entropy with the 1e-12 probability floor.
pub fn mean_cross_entropy(tape: &mut Tape, probs: Var, labels: &LabelMap) -> Result<Var> {
    let picked = tape.gather_channels(probs, Rc::new(labels.data().to_vec()))?;
    let floored = tape.clamp_min(picked, 1e-12)?;
    let logp = tape.log(floored)?;
    let m = tape.mean(logp)?;
    tape.mul_scalar(m, -1.0)
}

/// Per-epoch record of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_ce: f32,
}

/// Per-image Adam descent on mean cross-entropy, samples shuffled each epoch
/// from the `init` stream. Returns the mean training CE of every epoch.
pub fn train(
    model: &mut SegModel,
    samples: &[(&Tensor, &LabelMap)],
    epochs: usize,
    lr: f32,
) -> Result<Vec<EpochLoss>> {
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if epochs == 0 {
        return Err(Error::Usage("epochs must be >= 1".into()));
    }
    for (_, labels) in samples {
        labels.check_classes(model.num_classes())?;
    }
    let cfg = AdamConfig::with_lr(lr);
    let mut moments: Vec<Moments> = model.params.iter().map(|p| Moments::zeros(p.len())).collect();
    let mut t = 0u32;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = rng::stream(model.config.seed, Stream::Init, 1 + epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(samples.len());
        for &i in &order {
            let (image, labels) = samples[i];
            let mut tape = Tape::new();
            let x = tape.constant(image.clone());
            let out = model.forward_on(&mut tape, x, true)?;
            let loss = mean_cross_entropy(&mut tape, out.probs, labels)?;
            losses.push(tape.value(loss).item()?);
            tape.backward(loss)?;
            t += 1;
            for (k, var) in out.params.iter().enumerate() {
                let g = tape.grad(*var).ok_or_else(|| Error::NonFinite {
                    op: "train",
                    node: var.id(),
                })?;
                let g = g.data().to_vec();
                adam_update(&cfg, &mut moments[k], t, model.params[k].data_mut(), &g, Direction::Descent);
            }
            if let Some(k) = model.params.iter().position(|p| !p.all_finite()) {
                return Err(Error::NonFinite {
                    op: "train",
                    node: k,
                });
            }
        }
        let mean_ce = crate::tensor::pairwise_sum(&losses) / losses.len() as f32;
        log::info!("epoch {} mean CE {mean_ce:.4}", epoch + 1);
        curve.push(EpochLoss {
            epoch: epoch + 1,
            mean_ce,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::predict_labels;

    fn image(h: usize, w: usize, seed: u32) -> Tensor {
        let data = (0..3 * h * w)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0)
            .collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn forward_shape_and_normalisation() {
        let model = SegModel::new(ModelConfig::default()).unwrap();
        let probs = model.forward(&image(64, 128, 1)).unwrap();
        assert_eq!(probs.shape(), &[5, 64, 128]);
        let hw = 64 * 128;
        for p in (0..hw).step_by(97) {
            let s: f32 = (0..5).map(|k| probs.data()[k * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SegModel::new(ModelConfig::default()).unwrap();
        let x = image(16, 32, 3);
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn indivisible_input_is_dimension_error() {
        let model = SegModel::new(ModelConfig::default()).unwrap();
        assert!(matches!(model.forward(&image(10, 16, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_commutes_with_softmax_and_logit_scaling() {
        let model = SegModel::new(ModelConfig::default()).unwrap();
        let x = image(16, 16, 9);
        let logits = model.forward_logits(&x).unwrap();
        let probs = model.forward(&x).unwrap();
        assert_eq!(predict_labels(&logits).unwrap(), predict_labels(&probs).unwrap());
        let doubled = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|v| v * 2.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(doubled);
        let p2 = tape.softmax_channels(z).unwrap();
        assert_eq!(
            predict_labels(tape.value(p2)).unwrap(),
            predict_labels(&probs).unwrap()
        );
    }

    #[test]
    fn overfits_single_sample() {
        let mut model = SegModel::new(ModelConfig::default()).unwrap();
        let x = image(16, 16, 5);
        let labels = LabelMap::new(16, 16, (0..256).map(|i| ((i / 16) / 4) as u8).collect()).unwrap();
        let curve = train(&mut model, &[(&x, &labels)], 50, 0.01).unwrap();
        assert!(curve.last().unwrap().mean_ce < curve[0].mean_ce);
    }

    #[test]
    fn training_is_deterministic() {
        let x = image(8, 8, 2);
        let labels = LabelMap::new(8, 8, (0..64).map(|i| (i % 5) as u8).collect()).unwrap();
        let run = || {
            let mut m = SegModel::new(ModelConfig::default()).unwrap();
            train(&mut m, &[(&x, &labels), (&x, &labels)], 3, 0.01).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_label_is_data_error() {
        let mut model = SegModel::new(ModelConfig::default()).unwrap();
        let x = image(8, 8, 2);
        let labels = LabelMap::filled(8, 8, 7);
        assert!(matches!(train(&mut model, &[(&x, &labels)], 1, 0.01), Err(Error::Data(_))));
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = SegModel::new(ModelConfig { seed: 11, ..Default::default() }).unwrap();
        model.save_weights(&path).unwrap();
        let mut other = SegModel::new(ModelConfig::default()).unwrap();
        other.load_weights(&path).unwrap();
        let x = image(16, 16, 4);
        assert_eq!(model.forward(&x).unwrap().data(), other.forward(&x).unwrap().data());
    }

    #[test]
    fn truncated_weights_are_format_error_and_leave_model_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let bytes = SegModel::new(ModelConfig { seed: 3, ..Default::default() }).unwrap().to_bytes();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let mut model = SegModel::new(ModelConfig::default()).unwrap();
        let before = model.clone();
        assert!(matches!(model.load_weights(&path), Err(Error::Format(_))));
        assert_eq!(model, before);
    }

    #[test]
    fn wrong_class_count_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        SegModel::new(ModelConfig::default()).unwrap().save_weights(&path).unwrap();
        let mut model = SegModel::new(ModelConfig { num_classes: 4, ..Default::default() }).unwrap();
        assert!(matches!(model.load_weights(&path), Err(Error::Dimension(_))));
    }
}
