//! Self-verification: recorded gradients against central finite differences
//! of independent double-precision reference implementations, the adjoint
//! identity of the bilinear warp, and homography reprojection.

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{SampleGrid, Tape, Var};
use crate::error::Result;
use crate::labels::LabelMap;
use crate::loss::{nps_loss, pixelwise_ce, smoothness_loss, PrintableColorSet};
use crate::model::{mean_cross_entropy, ModelConfig, SegModel};
use crate::patch::{apply_patch, Placement, PlacementSpec};
use crate::rng::{self, Stream, StreamRng};
use crate::scene::geometry::{billboard_homography, Billboard, CameraPose};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
pub const ADJOINT_TOL: f64 = 1e-5;
pub const REPROJ_TOL: f64 = 1e-6;
pub const COMPOSE_TOL: f64 = 1e-5;
pub const INSTANCES: usize = 20;
pub const POSES: usize = 100;

/// Outcome of one family of checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Largest error seen (relative for gradients, pixels for geometry).
    pub worst: f64,
    pub tolerance: f64,
    /// Finite-difference coordinates skipped because the step crossed a kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.failures == 0
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

type TapeFn<'a> = dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a;
/// Flat output plus a signature of the piecewise regime (relu signs, clamp
/// regions); finite differences whose signature changes are skipped.
type RefFn<'a> = dyn Fn(&[Vec<f64>]) -> (Vec<f64>, Vec<u8>) + 'a;

struct FdOutcome {
    worst: f64,
    skipped: usize,
}

/// Compares `d/dx sum(w * f(x))` from the tape with central differences of
/// the reference, for random weights `w` and the given coordinates.
fn fd_check(
    rng: &mut StreamRng,
    inputs: &[Tensor],
    coords: Option<Vec<(usize, usize)>>,
    tape_fn: &TapeFn,
    ref_fn: &RefFn,
) -> Result<FdOutcome> {
    let mut tape = Tape::new();
    let (out, leaves) = tape_fn(&mut tape, inputs)?;
    let shape = tape.value(out).shape().to_vec();
    let w: Vec<f32> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let wv = tape.constant(Tensor::new(shape, w.clone())?);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let loss_ref = |x: &[Vec<f64>]| {
        let (o, sig) = ref_fn(x);
        assert_eq!(o.len(), w.len(), "reference output size");
        (o.iter().zip(&w).map(|(a, &b)| a * b as f64).sum::<f64>(), sig)
    };
    let mut x: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let (_, sig0) = loss_ref(&x);
    let coords = coords.unwrap_or_else(|| {
        inputs
            .iter()
            .enumerate()
            .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
            .collect()
    });
    let mut outcome = FdOutcome { worst: 0.0, skipped: 0 };
    for (k, i) in coords {
        let analytic = tape.grad(leaves[k]).map(|g| g.data()[i] as f64).unwrap_or(0.0);
        let orig = x[k][i];
        let mut eval = |dx: f64| {
            x[k][i] = orig + dx;
            let r = loss_ref(&x);
            x[k][i] = orig;
            r
        };
        let (l2p, s2p) = eval(2.0 * FD_STEP);
        let (l1p, s1p) = eval(FD_STEP);
        let (l1m, s1m) = eval(-FD_STEP);
        let (l2m, s2m) = eval(-2.0 * FD_STEP);
        if [s2p, s1p, s1m, s2m].iter().any(|s| *s != sig0) {
            outcome.skipped += 1;
            continue;
        }
        // fourth-order central stencil: the plain three-point rule's O(h^2)
        // truncation alone exceeds the tolerance on high-degree polynomials
        // such as the printability product
        let fd = (-l2p + 8.0 * l1p - 8.0 * l1m + l2m) / (12.0 * FD_STEP);
        outcome.worst = outcome.worst.max(relative_error(analytic, fd));
    }
    Ok(outcome)
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect()
}

fn random_tensor(rng: &mut StreamRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("finite")
}

// ---- double-precision references ----

fn conv_ref(x: &[f64], (c, h, w): (usize, usize, usize), k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let [o, _, kh, kw] = ks;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let yy = (y * stride + i) as isize - pad as isize;
                            let xx = (xo * stride + j) as isize - pad as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x[ic * h * w + yy as usize * w + xx as usize] * k[((oc * c + ic) * kh + i) * kw + j];
                        }
                    }
                }
                out[(oc * ho + y) * wo + xo] = acc;
            }
        }
    }
    (out, ho, wo)
}

fn softmax_ref(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let m = (0..c).map(|k| x[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (x[k * hw + p] - m).exp()).sum();
        for k in 0..c {
            out[k * hw + p] = (x[k * hw + p] - m).exp() / z;
        }
    }
    out
}

/// Bilinear lookup with clamp-to-edge taps at texel-centre coordinates.
fn bilinear_ref(src: &[f64], (c, sh, sw): (usize, usize, usize), coords: &[Option<[f64; 2]>]) -> Vec<f64> {
    let n = coords.len();
    let mut out = vec![0.0; c * n];
    for (p, co) in coords.iter().enumerate() {
        let Some([x, y]) = *co else { continue };
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let cx = |v: f64| v.clamp(0.0, (sw - 1) as f64) as usize;
        let cy = |v: f64| v.clamp(0.0, (sh - 1) as f64) as usize;
        let taps = [
            (cy(y0), cx(x0), (1.0 - fx) * (1.0 - fy)),
            (cy(y0), cx(x0 + 1.0), fx * (1.0 - fy)),
            (cy(y0 + 1.0), cx(x0), (1.0 - fx) * fy),
            (cy(y0 + 1.0), cx(x0 + 1.0), fx * fy),
        ];
        for k in 0..c {
            out[k * n + p] = taps.iter().map(|&(r, cc, wt)| wt * src[k * sh * sw + r * sw + cc]).sum();
        }
    }
    out
}

fn relu_ref(v: &mut [f64], sig: &mut Vec<u8>) {
    for x in v.iter_mut() {
        sig.push((*x > 0.0) as u8);
        *x = x.max(0.0);
    }
}

fn upsample_ref(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for k in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(k * 2 * h + y) * 2 * w + xx] = x[(k * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// The segmentation network in f64: `[image, k0, b0, ..., k5, b5]`.
fn model_ref(x: &[Vec<f64>], cfg: &ModelConfig, h: usize, w: usize, sig: &mut Vec<u8>) -> Vec<f64> {
    let [w0, w1] = cfg.widths;
    let nc = cfg.num_classes;
    let layer = |inp: &[f64], c: usize, hh: usize, ww: usize, li: usize, cout: usize, k: usize, stride: usize| {
        let (mut out, ho, wo) = conv_ref(inp, (c, hh, ww), &x[1 + 2 * li], [cout, c, k, k], stride, k / 2);
        let b = &x[2 + 2 * li];
        for oc in 0..cout {
            for v in &mut out[oc * ho * wo..(oc + 1) * ho * wo] {
                *v += b[oc];
            }
        }
        (out, ho, wo)
    };
    let (mut e0, h0, ww0) = layer(&x[0], 3, h, w, 0, w0, 3, 1);
    relu_ref(&mut e0, sig);
    let (mut d1, h1, ww1) = layer(&e0, w0, h0, ww0, 1, w1, 3, 2);
    relu_ref(&mut d1, sig);
    let (mut d2, h2, ww2) = layer(&d1, w1, h1, ww1, 2, w1, 3, 2);
    relu_ref(&mut d2, sig);
    let (mut mid, _, _) = layer(&d2, w1, h2, ww2, 3, w1, 3, 1);
    relu_ref(&mut mid, sig);
    let s1: Vec<f64> = upsample_ref(&mid, w1, h2, ww2).iter().zip(&d1).map(|(a, b)| a + b).collect();
    let (mut u1, _, _) = layer(&s1, w1, h1, ww1, 4, w0, 3, 1);
    relu_ref(&mut u1, sig);
    let s0: Vec<f64> = upsample_ref(&u1, w0, h1, ww1).iter().zip(&e0).map(|(a, b)| a + b).collect();
    let (logits, _, _) = layer(&s0, w0, h0, ww0, 5, nc, 1, 1);
    softmax_ref(&logits, nc, h * w)
}

fn ce_ref(probs: &[f64], labels: &[u8], set: &[bool], hw: usize) -> f64 {
    let n = set.iter().filter(|&&s| s).count() as f64;
    -(0..hw)
        .filter(|&p| set[p])
        .map(|p| probs[labels[p] as usize * hw + p].max(1e-12).ln())
        .sum::<f64>()
        / n
}

// ---- individual checks ----

struct Acc {
    name: String,
    instances: usize,
    failures: usize,
    worst: f64,
    tolerance: f64,
    skipped: usize,
}

impl Acc {
    fn new(name: &str, tolerance: f64) -> Self {
        Acc {
            name: name.into(),
            instances: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
            skipped: 0,
        }
    }

    fn record(&mut self, err: f64, skipped: usize) {
        self.instances += 1;
        self.skipped += skipped;
        self.worst = self.worst.max(err);
        if !(err < self.tolerance) {
            self.failures += 1;
        }
    }

    fn fd(&mut self, o: FdOutcome) {
        self.record(o.worst, o.skipped);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            instances: self.instances,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
            skipped: self.skipped,
        }
    }
}

fn check_conv(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("conv2d", GRAD_TOL);
    for i in 0..INSTANCES {
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..5));
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let k = if i % 3 == 0 { 1 } else { 3 };
        let stride = 1 + i % 2;
        let pad = if k == 1 { 0 } else { (i / 2) % 2 };
        let inputs = [random_tensor(rng, &[c, h, w], -1.0, 1.0), random_tensor(rng, &[o, c, k, k], -1.0, 1.0)];
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((t.conv2d(v[0], v[1], stride, pad)?, v))
        };
        let rf = |x: &[Vec<f64>]| (conv_ref(&x[0], (c, h, w), &x[1], [o, c, k, k], stride, pad).0, vec![]);
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn check_elementwise(rng: &mut StreamRng) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let binary: [(&str, fn(f64, f64) -> f64); 3] = [("add", |a, b| a + b), ("sub", |a, b| a - b), ("mul", |a, b| a * b)];
    for (name, f) in binary {
        let mut acc = Acc::new(&format!("elementwise {name}"), GRAD_TOL);
        for i in 0..INSTANCES {
            let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
            let b_shape: Vec<usize> = if i % 4 == 3 { vec![] } else { shape.to_vec() };
            let inputs = [random_tensor(rng, &shape, -1.0, 1.0), random_tensor(rng, &b_shape, -1.0, 1.0)];
            let tf = |t: &mut Tape, ins: &[Tensor]| {
                let v = leaves(t, ins);
                let out = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                Ok((out, v))
            };
            let rf = |x: &[Vec<f64>]| {
                let b = |j: usize| if x[1].len() == 1 { x[1][0] } else { x[1][j] };
                (x[0].iter().enumerate().map(|(j, &a)| f(a, b(j))).collect(), vec![])
            };
            acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
        }
        results.push(acc.finish());
    }
    type Unary = (&'static str, f32, f32, fn(f64) -> (f64, u8));
    let unary: [Unary; 4] = [
        ("relu", -1.0, 1.0, |a| (a.max(0.0), (a > 0.0) as u8)),
        ("clamp01", -0.5, 1.5, |a| (a.clamp(0.0, 1.0), (a > 0.0) as u8 + (a >= 1.0) as u8)),
        ("log", 0.2, 2.0, |a| (a.ln(), 0)),
        ("exp", -2.0, 2.0, |a| (a.exp(), 0)),
    ];
    for (name, lo, hi, f) in unary {
        let mut acc = Acc::new(&format!("elementwise {name}"), GRAD_TOL);
        for _ in 0..INSTANCES {
            let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
            let inputs = [random_tensor(rng, &shape, lo, hi)];
            let tf = |t: &mut Tape, ins: &[Tensor]| {
                let v = leaves(t, ins);
                let out = match name {
                    "relu" => t.relu(v[0])?,
                    "clamp01" => t.clamp01(v[0])?,
                    "log" => t.log(v[0])?,
                    _ => t.exp(v[0])?,
                };
                Ok((out, v))
            };
            let rf = |x: &[Vec<f64>]| x[0].iter().map(|&a| f(a)).unzip();
            acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
        }
        results.push(acc.finish());
    }
    Ok(results)
}

fn check_softmax(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("softmax_channels", GRAD_TOL);
    for _ in 0..INSTANCES {
        let (c, h, w) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [random_tensor(rng, &[c, h, w], -3.0, 3.0)];
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((t.softmax_channels(v[0])?, v))
        };
        let rf = |x: &[Vec<f64>]| (softmax_ref(&x[0], c, h * w), vec![]);
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn random_coords(rng: &mut StreamRng, n: usize, sh: usize, sw: usize) -> Vec<Option<[f32; 2]>> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                None
            } else {
                Some([
                    rng.random_range(-1.0..sw as f32 + 0.5),
                    rng.random_range(-1.0..sh as f32 + 0.5),
                ])
            }
        })
        .collect()
}

/// Reference coordinates restricted to the grid's coverage.
fn covered_coords(grid: &SampleGrid, coords: &[Option<[f32; 2]>]) -> Vec<Option<[f64; 2]>> {
    coords
        .iter()
        .zip(grid.covered())
        .map(|(c, &cov)| if cov { c.map(|[x, y]| [x as f64, y as f64]) } else { None })
        .collect()
}

fn check_bilinear(rng: &mut StreamRng) -> Result<(CheckResult, CheckResult)> {
    let mut fd = Acc::new("bilinear_sample", GRAD_TOL);
    let mut adj = Acc::new("bilinear adjoint", ADJOINT_TOL);
    for _ in 0..INSTANCES {
        let (c, sh, sw) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let (oh, ow) = (rng.random_range(1..6), rng.random_range(1..6));
        let coords = random_coords(rng, oh * ow, sh, sw);
        let grid = Rc::new(SampleGrid::new(oh, ow, sh, sw, &coords)?);
        let ref_coords = covered_coords(&grid, &coords);
        let inputs = [random_tensor(rng, &[c, sh, sw], -1.0, 1.0)];
        let g = grid.clone();
        let tf = move |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((t.bilinear_sample(v[0], g.clone())?, v))
        };
        let rf = |x: &[Vec<f64>]| (bilinear_ref(&x[0], (c, sh, sw), &ref_coords), vec![]);
        fd.fd(fd_check(rng, &inputs, None, &tf, &rf)?);

        // <u, W v> == <W^T u, v>
        let v = random_tensor(rng, &[c, sh, sw], -1.0, 1.0);
        let u = random_tensor(rng, &[c, oh, ow], -1.0, 1.0);
        let mut tape = Tape::new();
        let vv = tape.leaf(v.clone(), true);
        let wv = tape.bilinear_sample(vv, grid.clone())?;
        let uu = tape.constant(u.clone());
        let prod = tape.mul(wv, uu)?;
        let s = tape.sum(prod)?;
        tape.backward(s)?;
        let lhs: f64 = u.data().iter().zip(tape.value(wv).data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let wtu = tape.grad(vv).expect("leaf gradient");
        let rhs: f64 = wtu.data().iter().zip(v.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        adj.record((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0), 0);
    }
    Ok((fd.finish(), adj.finish()))
}

fn random_homography_placement(rng: &mut StreamRng, dims: (usize, usize), pdims: (usize, usize)) -> Result<PlacementSpec> {
    let s = rng.random_range(0.6..1.4);
    let m = [
        [s * rng.random_range(0.8..1.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..3.0)],
        [rng.random_range(-0.2..0.2), s * rng.random_range(0.8..1.2), rng.random_range(0.0..3.0)],
        [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 1.0],
    ];
    PlacementSpec::new(Placement::SceneHomography { matrix: m }, dims, pdims)
}

fn check_apply_patch(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("apply_patch", GRAD_TOL);
    for _ in 0..INSTANCES {
        let dims = (rng.random_range(6..12), rng.random_range(6..12));
        let pdims = (rng.random_range(2..6), rng.random_range(2..6));
        let spec = random_homography_placement(rng, dims, pdims)?;
        let inputs = [random_tensor(rng, &[3, pdims.0, pdims.1], 0.0, 1.0)];
        let image = random_tensor(rng, &[3, dims.0, dims.1], 0.0, 1.0);
        let img = image.clone();
        let sp = spec.clone();
        let tf = move |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            let x = t.constant(img.clone());
            Ok((apply_patch(t, x, v[0], &sp)?, v))
        };
        // independent inverse mapping of pixel centres in f64
        let Placement::SceneHomography { matrix } = *spec.placement() else { unreachable!() };
        let inv = Matrix3::from_row_slice(&matrix.concat()).try_inverse().expect("invertible");
        let coords: Vec<Option<[f64; 2]>> = (0..dims.0 * dims.1)
            .map(|p| {
                if !spec.mask()[p] {
                    return None;
                }
                let q = inv * Vector3::new((p % dims.1) as f64 + 0.5, (p / dims.1) as f64 + 0.5, 1.0);
                Some([q.x / q.z - 0.5, q.y / q.z - 0.5])
            })
            .collect();
        let mask = spec.mask().clone();
        let rf = |x: &[Vec<f64>]| {
            let warped = bilinear_ref(&x[0], (3, pdims.0, pdims.1), &coords);
            let hw = dims.0 * dims.1;
            let out = (0..3 * hw)
                .map(|i| if mask[i % hw] { warped[i] } else { image.data()[i] as f64 })
                .collect();
            (out, vec![])
        };
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn check_pixelwise_ce(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("pixelwise_ce", GRAD_TOL);
    for _ in 0..INSTANCES {
        let (c, h, w) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(1..5));
        let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c as u8)).collect();
        let mut set: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        set[0] = true;
        let inputs = [random_tensor(rng, &[c, h, w], 0.05, 1.0)];
        let lm = LabelMap::new(h, w, labels.clone())?;
        let set_rc = Rc::new(set.clone());
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((pixelwise_ce(t, v[0], &lm, &set_rc)?, v))
        };
        let rf = |x: &[Vec<f64>]| (vec![ce_ref(&x[0], &labels, &set, h * w)], vec![]);
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn check_smoothness(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("smoothness_loss", GRAD_TOL);
    for i in 0..INSTANCES {
        let (h, w) = if i == 0 { (8, 8) } else { (rng.random_range(1..9), rng.random_range(2..9)) };
        let inputs = [random_tensor(rng, &[3, h, w], 0.0, 1.0)];
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((smoothness_loss(t, v[0])?, v))
        };
        let rf = |x: &[Vec<f64>]| {
            let p = &x[0];
            let mut s = 0.0;
            for k in 0..3 {
                for r in 0..h {
                    for c in 0..w {
                        let v = p[(k * h + r) * w + c];
                        if r + 1 < h {
                            s += (v - p[(k * h + r + 1) * w + c]).powi(2);
                        }
                        if c + 1 < w {
                            s += (v - p[(k * h + r) * w + c + 1]).powi(2);
                        }
                    }
                }
            }
            (vec![s / (h * w) as f64], vec![])
        };
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn check_nps(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("nps_loss", GRAD_TOL);
    for _ in 0..INSTANCES {
        let colors: Vec<[f32; 3]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let set = PrintableColorSet::new(colors.clone())?;
        let inputs = [random_tensor(rng, &[3, 4, 4], 0.0, 1.0)];
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let v = leaves(t, ins);
            Ok((nps_loss(t, v[0], &set)?, v))
        };
        let rf = |x: &[Vec<f64>]| {
            let p = &x[0];
            let total: f64 = (0..16)
                .map(|i| {
                    colors
                        .iter()
                        .map(|c| (0..3).map(|k| (p[k * 16 + i] - c[k] as f64).powi(2)).sum::<f64>())
                        .product::<f64>()
                })
                .sum();
            (vec![total / 16.0], vec![])
        };
        acc.fd(fd_check(rng, &inputs, None, &tf, &rf)?);
    }
    Ok(acc.finish())
}

fn check_model(rng: &mut StreamRng) -> Result<CheckResult> {
    let mut acc = Acc::new("model composite", GRAD_TOL);
    let (h, w) = (8, 8);
    for i in 0..INSTANCES {
        let cfg = ModelConfig {
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let base = SegModel::new(cfg)?;
        // non-zero biases so their gradients are exercised too
        let params: Vec<Tensor> = base
            .params()
            .iter()
            .map(|p| if p.rank() == 1 { random_tensor(rng, p.shape(), -0.1, 0.1) } else { p.clone() })
            .collect();
        let mut inputs = vec![random_tensor(rng, &[3, h, w], 0.0, 1.0)];
        inputs.extend(params);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..cfg.num_classes as u8)).collect();
        let lm = LabelMap::new(h, w, labels.clone())?;
        let mut coords: Vec<(usize, usize)> = (0..20).map(|_| (0, rng.random_range(0..3 * h * w))).collect();
        for k in 1..inputs.len() {
            for _ in 0..2 {
                coords.push((k, rng.random_range(0..inputs[k].len())));
            }
        }
        let tf = |t: &mut Tape, ins: &[Tensor]| {
            let x = t.leaf(ins[0].clone(), true);
            let m = SegModel::from_parts(cfg, ins[1..].to_vec())?;
            let fv = m.forward_on(t, x, true)?;
            let loss = if i % 2 == 0 {
                mean_cross_entropy(t, fv.probs, &lm)?
            } else {
                fv.probs
            };
            let mut v = vec![x];
            v.extend(fv.params);
            Ok((loss, v))
        };
        let all = vec![true; h * w];
        let rf = |x: &[Vec<f64>]| {
            let mut sig = Vec::new();
            let probs = model_ref(x, &cfg, h, w, &mut sig);
            if i % 2 == 0 {
                (vec![ce_ref(&probs, &labels, &all, h * w)], sig)
            } else {
                (probs, sig)
            }
        };
        acc.fd(fd_check(rng, &inputs, Some(coords), &tf, &rf)?);
    }
    Ok(acc.finish())
}

/// Random billboard and a camera at 3-30 m looking at it with random roll.
pub fn random_view(rng: &mut StreamRng) -> Result<(CameraPose, Billboard)> {
    let yaw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt: f64 = rng.random_range(-0.3..0.3);
    let normal = Vector3::new(yaw.sin() * tilt.cos(), tilt.sin(), -yaw.cos() * tilt.cos());
    let up = (Vector3::y() - normal * normal.y).normalize();
    let center = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(0.5..4.0), rng.random_range(-10.0..10.0));
    let bb = Billboard::new(
        center.into(),
        normal.into(),
        up.into(),
        rng.random_range(0.5..4.0),
        rng.random_range(0.5..2.0),
    )?;
    let dir = loop {
        let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0));
        if d.norm() > 0.1 && d.normalize().dot(&normal) > 0.2 {
            break d.normalize();
        }
    };
    let pos = center + dir * rng.random_range(3.0..30.0);
    let fwd = (center - pos).normalize();
    let tmp = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let right = fwd.cross(&tmp).normalize();
    let down = fwd.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    let f = rng.random_range(50.0..200.0);
    let cam = CameraPose::new([f, f * rng.random_range(0.9..1.1), 64.0, 32.0], r, -(r * pos))?;
    Ok((cam, bb))
}

fn check_reprojection(rng: &mut StreamRng) -> Result<(CheckResult, CheckResult)> {
    let mut reproj = Acc::new("homography reprojection", REPROJ_TOL);
    let mut compose = Acc::new("homography composition", COMPOSE_TOL);
    let dims = (12, 24);
    for _ in 0..POSES {
        let (cam, bb) = random_view(rng)?;
        let h = billboard_homography(&cam, &bb, dims)?;
        let patch_corners = [(0.0, 0.0), (24.0, 0.0), (24.0, 12.0), (0.0, 12.0)];
        let mut worst: f64 = 0.0;
        for ((u, v), world) in patch_corners.iter().zip(bb.corners()) {
            let got = h.apply(*u, *v).expect("finite");
            let want = cam.project_point(&world).pixel().expect("visible");
            worst = worst.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
        reproj.record(worst, 0);

        // camera moved by a rigid step: H(C o T) == project(C, T x)
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rt = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(-0.05..0.05))
            .into_inner();
        let tt = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let k = cam.intrinsics();
        let composed = CameraPose::new(
            [k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]],
            cam.rotation * rt,
            cam.rotation * tt + cam.translation,
        )?;
        let mut worst: f64 = 0.0;
        if let Ok(hc) = billboard_homography(&composed, &bb, dims) {
            for _ in 0..8 {
                let (u, v) = (rng.random_range(0.0..24.0), rng.random_range(0.0..12.0));
                let world = bb.patch_point(dims, u, v);
                let stepped = rt * world + tt;
                let want = cam.project_point(&stepped).pixel().expect("visible");
                let got = hc.apply(u, v).expect("finite");
                worst = worst.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
            }
        }
        compose.record(worst, 0);
    }
    Ok((reproj.finish(), compose.finish()))
}

/// Runs every check with randomness from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, Stream::Gradcheck, 0);
    let mut out = vec![check_conv(&mut rng)?];
    out.extend(check_elementwise(&mut rng)?);
    out.push(check_softmax(&mut rng)?);
    let (fd, adj) = check_bilinear(&mut rng)?;
    out.extend([fd, adj]);
    out.push(check_apply_patch(&mut rng)?);
    out.push(check_pixelwise_ce(&mut rng)?);
    out.push(check_smoothness(&mut rng)?);
    out.push(check_nps(&mut rng)?);
    out.push(check_model(&mut rng)?);
    let (rp, cp) = check_reprojection(&mut rng)?;
    out.extend([rp, cp]);
    Ok(out)
}
