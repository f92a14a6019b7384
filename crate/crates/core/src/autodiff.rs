//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node ids increase in
//! recording order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use advpatch::autodiff::Tape;
//! use advpatch::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{pairwise_masked_sum, pairwise_sum, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate corruptions of backward rules, used to confirm that the
/// gradient checks catch broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvBackwardSignFlip,
}

thread_local! {
    static FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Installs (or clears) a fault for tapes running on the current thread.
pub fn set_fault(fault: Option<Fault>) {
    FAULT.with(|f| f.set(fault));
}

fn fault_active(fault: Fault) -> bool {
    FAULT.with(|f| f.get() == Some(fault))
}

/// Per-output-pixel source coordinates for [`Tape::bilinear_sample`].
///
/// Coordinates are in texel-index units: `(x, y) = (col, row)`, with integer
/// values landing on texel centres. A pixel is covered when its source point
/// lies inside the source extent `[-0.5, w - 0.5) x [-0.5, h - 0.5)`; taps
/// beyond the last texel centre clamp to the edge texel.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
    taps: Vec<[(u32, f32); 4]>,
    covered: Vec<bool>,
}

impl SampleGrid {
    pub fn new(
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
        coords: &[Option<[f32; 2]>],
    ) -> Result<Self> {
        if coords.len() != out_h * out_w {
            return Err(Error::Dimension(format!(
                "sample grid expects {} coordinates, got {}",
                out_h * out_w,
                coords.len()
            )));
        }
        if src_h == 0 || src_w == 0 {
            return Err(Error::Dimension("empty sample source".into()));
        }
        let mut taps = Vec::with_capacity(coords.len());
        let mut covered = Vec::with_capacity(coords.len());
        for c in coords {
            match c {
                Some([x, y])
                    if x.is_finite()
                        && y.is_finite()
                        && *x >= -0.5
                        && *x < src_w as f32 - 0.5
                        && *y >= -0.5
                        && *y < src_h as f32 - 0.5 =>
                {
                    let x0 = x.floor();
                    let y0 = y.floor();
                    let fx = x - x0;
                    let fy = y - y0;
                    let clamp_x = |v: f32| (v.max(0.0) as usize).min(src_w - 1);
                    let clamp_y = |v: f32| (v.max(0.0) as usize).min(src_h - 1);
                    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
                    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
                    let idx = |r: usize, c: usize| (r * src_w + c) as u32;
                    taps.push([
                        (idx(ya, xa), (1.0 - fx) * (1.0 - fy)),
                        (idx(ya, xb), fx * (1.0 - fy)),
                        (idx(yb, xa), (1.0 - fx) * fy),
                        (idx(yb, xb), fx * fy),
                    ]);
                    covered.push(true);
                }
                _ => {
                    taps.push([(0, 0.0); 4]);
                    covered.push(false);
                }
            }
        }
        Ok(SampleGrid {
            out_h,
            out_w,
            src_h,
            src_w,
            taps,
            covered,
        })
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn src_dims(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    /// Coverage mask, one entry per output pixel.
    pub fn covered(&self) -> &[bool] {
        &self.covered
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Clamp01(Var),
    ClampMin(Var, f32),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    Upsample2(Var),
    Bilinear {
        src: Var,
        grid: Rc<SampleGrid>,
    },
    Select {
        overlay: Var,
        base: Var,
        mask: Rc<Vec<bool>>,
    },
    Gather {
        input: Var,
        labels: Rc<Vec<u8>>,
    },
    Sum(Var),
    MaskedSum(Var, Rc<Vec<bool>>),
    Mean(Var),
    ShiftDiff {
        input: Var,
        axis: usize,
    },
    SqDistToColor {
        input: Var,
        color: [f32; 3],
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Clamp01(..) => "clamp01",
            Op::ClampMin(..) => "clamp_min",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax_channels",
            Op::Upsample2(..) => "upsample2",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Select { .. } => "select",
            Op::Gather { .. } => "gather_channels",
            Op::Sum(..) => "sum",
            Op::MaskedSum(..) => "masked_sum",
            Op::Mean(..) => "mean",
            Op::ShiftDiff { .. } => "shift_diff",
            Op::SqDistToColor { .. } => "sq_dist_to_color",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Clamp01,
    Log,
    Exp,
}

/// Records a computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are kept for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears stored gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(id))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::Usage(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Clamp01 => self.clamp01(a),
            Elementwise::Log => self.log(a),
            Elementwise::Exp => self.exp(a),
        }
    }

    fn binary_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} are not equal and rhs is not a scalar",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.binary_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if tb.is_scalar() && ta.len() != 1 {
            let s = tb.data()[0];
            ta.data().iter().map(|&x| f(x, s)).collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_scalar(&mut self, a: Var, k: f32) -> Result<Var> {
        let out = self.map(a, |x| x * k);
        self.push(out, Op::MulScalar(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f32) -> Result<Var> {
        let out = self.map(a, |x| x + k);
        self.push(out, Op::AddScalar(a), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Clips into `[0, 1]`. The backward rule passes gradient only where the
    /// input lies strictly inside the interval.
    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.clamp(0.0, 1.0));
        self.push(out, Op::Clamp01(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Result<Var> {
        let out = self.map(a, |x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {x}"),
            });
        }
        let out = self.map(a, f32::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f32::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    fn chw(&self, v: Var, name: &str) -> Result<(usize, usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("{name}: expected [C,H,W], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2-D cross-correlation of `input` `[C_in,H,W]` with `kernel`
    /// `[C_out,C_in,kH,kW]`, zero padding on all sides.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, w) = self.chw(input, "conv2d input")?;
        let ks = self.value(kernel).shape();
        if ks.len() != 4 {
            return Err(Error::Dimension(format!("conv2d kernel must be 4-D, got {ks:?}")));
        }
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c_in} channels, kernel expects {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0f32; c_out * geom.out_len()];
        // out[O, P] = K[O, CK] * cols[CK, P]
        gemm(
            c_out,
            geom.patch_len(),
            geom.out_len(),
            self.value(kernel).data(),
            (geom.patch_len(), 1),
            &cols,
            (geom.out_len(), 1),
            &mut out,
            false,
        );
        let t = Tensor::from_parts(vec![c_out, geom.ho, geom.wo], out);
        self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        )
    }

    /// Adds a per-channel bias `[C]` to `[C,H,W]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} vs {c} channels",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(input).data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += b[ch];
            }
        }
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::AddBias { input, bias }, &[input, bias])
    }

    /// Softmax over the channel axis of `[N_c,H,W]`, per pixel.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let (c, h, w) = self.chw(logits, "softmax_channels")?;
        if c < 2 {
            return Err(Error::Config(format!("softmax over {c} channel(s); need at least 2")));
        }
        let hw = h * w;
        let x = self.value(logits).data();
        let mut out = vec![0.0f32; x.len()];
        for p in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for k in 0..c {
                m = m.max(x[k * hw + p]);
            }
            let mut z = 0.0f32;
            for k in 0..c {
                let e = (x[k * hw + p] - m).exp();
                out[k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[k * hw + p] /= z;
            }
        }
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::Softmax(logits), &[logits])
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "upsample2")?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; c * h2 * w2];
        for ch in 0..c {
            for r in 0..h2 {
                let src = &x[ch * h * w + (r / 2) * w..ch * h * w + (r / 2) * w + w];
                let dst = &mut out[ch * h2 * w2 + r * w2..ch * h2 * w2 + (r + 1) * w2];
                for (col, d) in dst.iter_mut().enumerate() {
                    *d = src[col / 2];
                }
            }
        }
        self.push(Tensor::from_parts(vec![c, h2, w2], out), Op::Upsample2(input), &[input])
    }

    /// Bilinear resampling of `src` `[C,H_s,W_s]` onto the grid's output
    /// raster. Uncovered outputs are zero.
    pub fn bilinear_sample(&mut self, src: Var, grid: Rc<SampleGrid>) -> Result<Var> {
        let (c, sh, sw) = self.chw(src, "bilinear_sample")?;
        if (sh, sw) != grid.src_dims() {
            return Err(Error::Dimension(format!(
                "bilinear_sample: source {sh}x{sw}, grid built for {:?}",
                grid.src_dims()
            )));
        }
        let (oh, ow) = grid.out_dims();
        let x = self.value(src).data();
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            let plane = &x[ch * sh * sw..(ch + 1) * sh * sw];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (p, taps) in grid.taps.iter().enumerate() {
                if grid.covered[p] {
                    dst[p] = taps.iter().map(|&(i, wt)| wt * plane[i as usize]).sum();
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, oh, ow], out),
            Op::Bilinear { src, grid },
            &[src],
        )
    }

    /// Per pixel, takes `overlay` where `mask` is set and `base` elsewhere.
    /// Both are `[C,H,W]`; `mask` has one entry per pixel.
    pub fn select(&mut self, mask: Rc<Vec<bool>>, overlay: Var, base: Var) -> Result<Var> {
        let (c, h, w) = self.chw(base, "select")?;
        if self.value(overlay).shape() != self.value(base).shape() || mask.len() != h * w {
            return Err(Error::Dimension(format!(
                "select: overlay {:?}, base {:?}, mask {}",
                self.value(overlay).shape(),
                self.value(base).shape(),
                mask.len()
            )));
        }
        let hw = h * w;
        let (o, b) = (self.value(overlay).data(), self.value(base).data());
        let mut out = b.to_vec();
        for ch in 0..c {
            for p in 0..hw {
                if mask[p] {
                    out[ch * hw + p] = o[ch * hw + p];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::Select { overlay, base, mask },
            &[overlay, base],
        )
    }

    /// Picks `input[labels[p], p]` for every pixel, giving `[H,W]`.
    pub fn gather_channels(&mut self, input: Var, labels: Rc<Vec<u8>>) -> Result<Var> {
        let (c, h, w) = self.chw(input, "gather_channels")?;
        if labels.len() != h * w {
            return Err(Error::Dimension(format!(
                "gather_channels: {} labels for {h}x{w}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Data(format!("label {l} out of range for {c} channels")));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let out = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| x[l as usize * hw + p])
            .collect();
        self.push(Tensor::from_parts(vec![h, w], out), Op::Gather { input, labels }, &[input])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sum over the flat positions selected by `mask` (same length as `a`).
    pub fn masked_sum(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "masked_sum: mask of {} for {} values",
                mask.len(),
                self.value(a).len()
            )));
        }
        let s = pairwise_masked_sum(self.value(a).data(), &mask);
        self.push(Tensor::scalar(s), Op::MaskedSum(a, mask), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptySet("mean of empty tensor".into()));
        }
        let s = self.value(a).sum() / n as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Forward differences `x[i] - x[i+1]` along rows (`axis = 0`) or
    /// columns (`axis = 1`) of `[C,H,W]`.
    pub fn shift_diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "shift_diff")?;
        let x = self.value(input).data();
        let (oh, ow) = match axis {
            0 if h >= 2 => (h - 1, w),
            1 if w >= 2 => (h, w - 1),
            0 | 1 => (0, 0),
            _ => return Err(Error::Usage(format!("shift_diff axis {axis}"))),
        };
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let i = ch * h * w + r * w + col;
                    let j = if axis == 0 { i + w } else { i + 1 };
                    out.push(x[i] - x[j]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::ShiftDiff { input, axis }, &[input])
    }

    /// Squared Euclidean distance of every RGB pixel of `[3,H,W]` to `color`.
    pub fn sq_dist_to_color(&mut self, input: Var, color: [f32; 3]) -> Result<Var> {
        let (c, h, w) = self.chw(input, "sq_dist_to_color")?;
        if c != 3 {
            return Err(Error::Dimension(format!("sq_dist_to_color needs 3 channels, got {c}")));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let out = (0..hw)
            .map(|p| (0..3).map(|k| (x[k * hw + p] - color[k]).powi(2)).sum())
            .collect();
        self.push(
            Tensor::from_parts(vec![h, w], out),
            Op::SqDistToColor { input, color },
            &[input],
        )
    }

    /// Reverse sweep from the scalar `loss`. Gradients of requires-grad
    /// leaves become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let _ = i;
                return Err(Error::NonFinite {
                    op: self.nodes[id].op.name(),
                    node: id,
                });
            }
            if let Op::Leaf = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::from_parts(self.nodes[id].value.shape().to_vec(), data))
            })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                acc(a, &mut |s| add_into(s, g));
                let broadcast = self.nodes[b.0].value.len() == 1 && g.len() != 1;
                acc(b, &mut |s| {
                    if broadcast {
                        s[0] += sign * pairwise_sum(g);
                    } else {
                        for (d, &gi) in s.iter_mut().zip(g) {
                            *d += sign * gi;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (xa, xb) = (val(a), val(b));
                let broadcast = xb.len() == 1 && g.len() != 1;
                acc(a, &mut |s| {
                    if broadcast {
                        for (d, &gi) in s.iter_mut().zip(g) {
                            *d += gi * xb[0];
                        }
                    } else {
                        for ((d, &gi), &y) in s.iter_mut().zip(g).zip(xb) {
                            *d += gi * y;
                        }
                    }
                });
                acc(b, &mut |s| {
                    if broadcast {
                        let prod: Vec<f32> = g.iter().zip(xa).map(|(&gi, &x)| gi * x).collect();
                        s[0] += pairwise_sum(&prod);
                    } else {
                        for ((d, &gi), &x) in s.iter_mut().zip(g).zip(xa) {
                            *d += gi * x;
                        }
                    }
                });
            }
            Op::MulScalar(a, k) => {
                let k = *k;
                acc(*a, &mut |s| {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * k;
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Clamp01(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 && xi < 1.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = val(*a);
                let floor = *floor;
                acc(*a, &mut |s| {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > floor {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((d, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let s0 = node.value.shape();
                let (c, hw) = (s0[0], s0[1] * s0[2]);
                acc(*a, &mut |s| {
                    for p in 0..hw {
                        let mut dot = 0.0f32;
                        for k in 0..c {
                            dot += y[k * hw + p] * g[k * hw + p];
                        }
                        for k in 0..c {
                            let i = k * hw + p;
                            s[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::Upsample2(a) => {
                let s0 = node.value.shape();
                let (c, h2, w2) = (s0[0], s0[1], s0[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                acc(*a, &mut |s| {
                    for ch in 0..c {
                        for r in 0..h2 {
                            for col in 0..w2 {
                                s[ch * h * w + (r / 2) * w + col / 2] += g[ch * h2 * w2 + r * w2 + col];
                            }
                        }
                    }
                });
            }
            Op::Bilinear { src, grid } => {
                let (sh, sw) = grid.src_dims();
                let (oh, ow) = grid.out_dims();
                let c = self.nodes[src.0].value.dim(0);
                acc(*src, &mut |s| {
                    for ch in 0..c {
                        let plane = &mut s[ch * sh * sw..(ch + 1) * sh * sw];
                        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        for (p, taps) in grid.taps.iter().enumerate() {
                            if grid.covered[p] {
                                for &(i, wt) in taps {
                                    plane[i as usize] += wt * gp[p];
                                }
                            }
                        }
                    }
                });
            }
            Op::Select { overlay, base, mask } => {
                let hw = mask.len();
                acc(*overlay, &mut |s| {
                    for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                        if mask[i % hw] {
                            *d += gi;
                        }
                    }
                });
                acc(*base, &mut |s| {
                    for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                        if !mask[i % hw] {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Gather { input, labels } => {
                let hw = labels.len();
                acc(*input, &mut |s| {
                    for (p, &l) in labels.iter().enumerate() {
                        s[l as usize * hw + p] += g[p];
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g0));
            }
            Op::MaskedSum(a, mask) => {
                let g0 = g[0];
                acc(*a, &mut |s| {
                    for (d, &m) in s.iter_mut().zip(mask.iter()) {
                        if m {
                            *d += g0;
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f32;
                let g0 = g[0] / n;
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g0));
            }
            Op::ShiftDiff { input, axis } => {
                let s0 = self.nodes[input.0].value.shape();
                let (c, h, w) = (s0[0], s0[1], s0[2]);
                let (oh, ow) = if *axis == 0 { (h.saturating_sub(1), w) } else { (h, w.saturating_sub(1)) };
                let axis = *axis;
                acc(*input, &mut |s| {
                    let mut k = 0;
                    for ch in 0..c {
                        for r in 0..oh {
                            for col in 0..ow {
                                let i = ch * h * w + r * w + col;
                                let j = if axis == 0 { i + w } else { i + 1 };
                                s[i] += g[k];
                                s[j] -= g[k];
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::SqDistToColor { input, color } => {
                let x = val(*input);
                let hw = g.len();
                acc(*input, &mut |s| {
                    for k in 0..3 {
                        for p in 0..hw {
                            s[k * hw + p] += 2.0 * (x[k * hw + p] - color[k]) * g[p];
                        }
                    }
                });
            }
            Op::AddBias { input, bias } => {
                let s0 = node.value.shape();
                let hw = s0[1] * s0[2];
                acc(*input, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    for (ch, d) in s.iter_mut().enumerate() {
                        *d += pairwise_sum(&g[ch * hw..(ch + 1) * hw]);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (input, kernel, geom) = (*input, *kernel, *geom);
                if wants(kernel) {
                    // dK[O, CK] = g[O, P] * cols^T
                    let mut dk = vec![0.0f32; geom.c_out * geom.patch_len()];
                    gemm(
                        geom.c_out,
                        geom.out_len(),
                        geom.patch_len(),
                        g,
                        (geom.out_len(), 1),
                        cols,
                        (1, geom.out_len()),
                        &mut dk,
                        false,
                    );
                    acc(kernel, &mut |s| add_into(s, &dk));
                }
                if wants(input) {
                    // dcols[CK, P] = K^T * g
                    let mut dcols = vec![0.0f32; geom.patch_len() * geom.out_len()];
                    gemm(
                        geom.patch_len(),
                        geom.c_out,
                        geom.out_len(),
                        val(kernel),
                        (1, geom.patch_len()),
                        g,
                        (geom.out_len(), 1),
                        &mut dcols,
                        false,
                    );
                    if fault_active(Fault::ConvBackwardSignFlip) {
                        dcols.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(input, &mut |s| col2im_add(&dcols, &geom, s));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.out_len();
    let mut cols = vec![0.0f32; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with `a` of logical shape
/// `m x k` and `b` of `k x n`, given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
