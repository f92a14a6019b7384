//! Patch state, appearance transforms, placement and differentiable
//! application of a patch onto an image.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{SampleGrid, Tape, Var};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::write_atomic;
use crate::optim::Moments;
use crate::rng::{self, Stream};
use crate::scene::geometry::{billboard_homography, Billboard, CameraPose, Homography};
use crate::tensor::Tensor;

/// The optimised patch with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchState {
    pub delta: Tensor,
    pub moments: Moments,
    pub t: u32,
}

impl PatchState {
    pub fn new(delta: Tensor) -> Result<Self> {
        if delta.rank() != 3 || delta.dim(0) != 3 || delta.dim(1) == 0 || delta.dim(2) == 0 {
            return Err(Error::Dimension(format!("patch must be [3,H,W], got {:?}", delta.shape())));
        }
        if delta.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain {
                op: "patch",
                detail: "patch values must lie in [0, 1]".into(),
            });
        }
        let moments = Moments::zeros(delta.len());
        Ok(PatchState { delta, moments, t: 0 })
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.delta.dim(1), self.delta.dim(2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.delta.to_pft_bytes())
    }

    pub fn save_preview(&self, path: &Path) -> Result<()> {
        write_atomic(path, &imageio::encode_ppm(&self.delta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        PatchState::new(Tensor::read_pft(&bytes[..])?)
    }
}

/// Patch with i.i.d. `U[0,1]` texels drawn from the `patch` stream.
pub fn random_patch(seed: u64, dims: (usize, usize)) -> Result<PatchState> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("patch dimensions must be positive".into()));
    }
    let mut rng = rng::stream(seed, Stream::Patch, 0);
    let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    PatchState::new(Tensor::new(vec![3, h, w], data)?)
}

/// Ranges of the random appearance changes, as fractions of the value range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceParams {
    pub noise_std: f32,
    pub brightness_delta: f32,
    pub contrast_delta: f32,
}

impl AppearanceParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("brightness_delta", self.brightness_delta),
            ("contrast_delta", self.contrast_delta),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 0.5]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.brightness_delta == 0.0 && self.contrast_delta == 0.0
    }

    /// Draws one concrete transform for a patch of `dims`.
    pub fn sample<R: Rng>(&self, rng: &mut R, dims: (usize, usize)) -> Result<AppearanceDraw> {
        self.validate()?;
        let sym = |rng: &mut R, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let contrast = sym(rng, self.contrast_delta);
        let brightness = sym(rng, self.brightness_delta);
        let noise = if self.noise_std > 0.0 {
            let normal = Normal::new(0.0f32, self.noise_std).expect("positive std");
            let data = (0..3 * dims.0 * dims.1).map(|_| normal.sample(rng)).collect();
            Some(Tensor::new(vec![3, dims.0, dims.1], data)?)
        } else {
            None
        };
        Ok(AppearanceDraw { contrast, brightness, noise })
    }
}

/// A sampled appearance transform.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppearanceDraw {
    pub contrast: f32,
    pub brightness: f32,
    pub noise: Option<Tensor>,
}

impl AppearanceDraw {
    pub fn identity() -> Self {
        AppearanceDraw::default()
    }

    pub fn is_identity(&self) -> bool {
        self.contrast == 0.0 && self.brightness == 0.0 && self.noise.is_none()
    }
}

/// `clamp01((p - 0.5)(1 + c) + 0.5 + b + noise)`; the identity draw returns
/// `patch` itself.
pub fn appearance_transform(tape: &mut Tape, patch: Var, draw: &AppearanceDraw) -> Result<Var> {
    if draw.is_identity() {
        return Ok(patch);
    }
    let gain = 1.0 + draw.contrast;
    let mut x = if draw.contrast != 0.0 { tape.mul_scalar(patch, gain)? } else { patch };
    let offset = 0.5 - 0.5 * gain + draw.brightness;
    if offset != 0.0 {
        x = tape.add_scalar(x, offset)?;
    }
    if let Some(noise) = &draw.noise {
        if noise.shape() != tape.value(patch).shape() {
            return Err(Error::Dimension("appearance noise does not match the patch".into()));
        }
        let n = tape.constant(noise.clone());
        x = tape.add(x, n)?;
    }
    tape.clamp01(x)
}

/// Where the patch goes in the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Placement {
    /// Axis-aligned rectangle with top-left corner `(top, left)` in pixel-edge
    /// coordinates, scaled by `scale`.
    EotRect { top: f64, left: f64, scale: f64 },
    /// Patch-to-image homography, both in pixel-edge coordinates `(x, y)`.
    SceneHomography { matrix: [[f64; 3]; 3] },
}

/// A placement resolved against concrete image and patch sizes, with its
/// sampling grid and the patch-pixel mask.
#[derive(Clone, Debug)]
pub struct PlacementSpec {
    placement: Placement,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
    grid: Rc<SampleGrid>,
    mask: Rc<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct PlacementRecord {
    #[serde(flatten)]
    placement: Placement,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
}

impl PlacementSpec {
    pub fn new(placement: Placement, image_dims: (usize, usize), patch_dims: (usize, usize)) -> Result<Self> {
        let (h, w) = image_dims;
        let (ph, pw) = patch_dims;
        if h == 0 || w == 0 || ph == 0 || pw == 0 {
            return Err(Error::Dimension("image and patch dimensions must be positive".into()));
        }
        // image pixel centre -> patch point (edge coordinates)
        let to_patch: Box<dyn Fn(f64, f64) -> Option<[f64; 2]>> = match placement {
            Placement::EotRect { top, left, scale } => {
                if !(scale.is_finite() && scale > 0.0 && top.is_finite() && left.is_finite()) {
                    return Err(Error::Config("invalid rectangle placement".into()));
                }
                Box::new(move |x, y| Some([(x - left) / scale, (y - top) / scale]))
            }
            Placement::SceneHomography { matrix } => {
                let inv = Homography::from_rows(matrix)?.inverse()?;
                Box::new(move |x, y| inv.apply(x, y))
            }
        };
        let mut coords = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let src = to_patch(c as f64 + 0.5, r as f64 + 0.5).and_then(|[px, py]| {
                    let inside = px >= 0.0 && px < pw as f64 && py >= 0.0 && py < ph as f64;
                    inside.then(|| [(px - 0.5) as f32, (py - 0.5) as f32])
                });
                coords.push(src);
            }
        }
        let grid = SampleGrid::new(h, w, ph, pw, &coords)?;
        let mask = grid.covered().to_vec();
        Ok(PlacementSpec {
            placement,
            image_dims,
            patch_dims,
            grid: Rc::new(grid),
            mask: Rc::new(mask),
        })
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        self.patch_dims
    }

    /// The patch-pixel set: image pixels with positive warp coverage.
    pub fn mask(&self) -> &Rc<Vec<bool>> {
        &self.mask
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PlacementRecord {
            placement: self.placement,
            image_dims: self.image_dims,
            patch_dims: self.patch_dims,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: PlacementRecord = serde_json::from_str(s)?;
        PlacementSpec::new(r.placement, r.image_dims, r.patch_dims)
    }
}

/// Scale factors accepted for rectangle placements.
pub const SCALE_LIMITS: [f64; 2] = [0.5, 1.5];

/// Rectangle of `scale` centred at pixel-edge point `(cy, cx)`.
pub fn rect_at(
    center: (f64, f64),
    scale: f64,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
) -> Result<PlacementSpec> {
    let (h, w) = (image_dims.0 as f64, image_dims.1 as f64);
    let (sh, sw) = (patch_dims.0 as f64 * scale, patch_dims.1 as f64 * scale);
    let top = center.0 - sh / 2.0;
    let left = center.1 - sw / 2.0;
    let eps = 1e-9;
    if top < -eps || left < -eps || top + sh > h + eps || left + sw > w + eps {
        return Err(Error::PlacementInfeasible(format!(
            "{sh:.1}x{sw:.1} patch at ({top:.1}, {left:.1}) leaves the {h}x{w} image"
        )));
    }
    PlacementSpec::new(Placement::EotRect { top, left, scale }, image_dims, patch_dims)
}

/// Unscaled patch at the image centre.
pub fn centered_placement(image_dims: (usize, usize), patch_dims: (usize, usize)) -> Result<PlacementSpec> {
    let c = (image_dims.0 as f64 / 2.0, image_dims.1 as f64 / 2.0);
    rect_at(c, 1.0, image_dims, patch_dims)
}

/// Centre and base size of the EOT translation window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TranslateMode {
    /// Around the image centre, at the patch's native size.
    ImageCenter,
    /// Around `center` (row, col in pixel-edge units) with the patch
    /// pre-scaled by `base_scale`; scale draws multiply the base.
    Anchored { center: (f64, f64), base_scale: f64 },
}

/// Window anchored on a projected billboard quad: centred on the corner
/// mean, base scale matching the quad's area.
pub fn billboard_anchor(quad: &[[f64; 2]; 4], patch_dims: (usize, usize)) -> Result<TranslateMode> {
    let cx = quad.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = quad.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let area = 0.5
        * (0..4)
            .map(|i| {
                let (a, b) = (quad[i], quad[(i + 1) % 4]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            .abs();
    let base_scale = (area / (patch_dims.0 * patch_dims.1) as f64).sqrt();
    if !(base_scale.is_finite() && base_scale > 0.0) {
        return Err(Error::PlacementInfeasible("degenerate billboard quad".into()));
    }
    Ok(TranslateMode::Anchored {
        center: (cy, cx),
        base_scale,
    })
}

/// Random EOT placement: `s ~ U(scale_range)`, `r ~ U[0,1]`, and the centre
/// drawn uniformly within `r` half-patch sizes of the window centre.
pub fn sample_eot_placement<R: Rng>(
    rng: &mut R,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
    scale_range: [f64; 2],
    translate: TranslateMode,
) -> Result<PlacementSpec> {
    let [lo, hi] = scale_range;
    if !(SCALE_LIMITS[0] <= lo && lo <= hi && hi <= SCALE_LIMITS[1]) {
        return Err(Error::Config(format!("scale range [{lo}, {hi}] must lie within [0.5, 1.5]")));
    }
    let (anchor, base) = match translate {
        TranslateMode::ImageCenter => ((image_dims.0 as f64 / 2.0, image_dims.1 as f64 / 2.0), 1.0),
        TranslateMode::Anchored { center, base_scale } => (center, base_scale),
    };
    let s = rng.random_range(lo..=hi);
    let r: f64 = rng.random();
    let dy = rng.random_range(-1.0..=1.0) * r * base * patch_dims.0 as f64 / 2.0;
    let dx = rng.random_range(-1.0..=1.0) * r * base * patch_dims.1 as f64 / 2.0;
    rect_at((anchor.0 + dy, anchor.1 + dx), s * base, image_dims, patch_dims)
}

/// Placement of a patch covering the whole billboard face, seen from `camera`.
pub fn scene_placement(
    camera: &CameraPose,
    billboard: &Billboard,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
) -> Result<PlacementSpec> {
    let h = billboard_homography(camera, billboard, patch_dims)?;
    PlacementSpec::new(Placement::SceneHomography { matrix: h.rows() }, image_dims, patch_dims)
}

/// `x~`: warped patch inside the mask, the image bit-exactly elsewhere.
pub fn apply_patch(tape: &mut Tape, image: Var, patch: Var, spec: &PlacementSpec) -> Result<Var> {
    let (is, ps) = (tape.value(image).shape(), tape.value(patch).shape());
    if is != [3, spec.image_dims.0, spec.image_dims.1] || ps != [3, spec.patch_dims.0, spec.patch_dims.1] {
        return Err(Error::Dimension(format!(
            "placement for image {:?} / patch {:?} used with {is:?} / {ps:?}",
            spec.image_dims, spec.patch_dims
        )));
    }
    let warped = tape.bilinear_sample(patch, spec.grid.clone())?;
    tape.select(spec.mask.clone(), warped, image)
}

/// Non-differentiable [`apply_patch`].
pub fn overlay(image: &Tensor, patch: &Tensor, spec: &PlacementSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let p = tape.constant(patch.clone());
    let out = apply_patch(&mut tape, x, p, spec)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::render::{render_scene, RenderStyle, SceneId, SceneLayout, CLASS_BILLBOARD};
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn identity_appearance_is_exact() {
        let p = random_patch(1, (4, 5)).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(p.delta.clone(), true);
        let mut rng = rng::stream(0, Stream::Appearance, 0);
        let draw = AppearanceParams::default().sample(&mut rng, (4, 5)).unwrap();
        let out = appearance_transform(&mut tape, v, &draw).unwrap();
        assert_eq!(tape.value(out), &p.delta);
    }

    #[test]
    fn brightness_shift_on_constant_patch() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::full(&[3, 2, 2], 0.5), true);
        let draw = AppearanceDraw { brightness: 0.1, ..AppearanceDraw::identity() };
        let out = appearance_transform(&mut tape, v, &draw).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| (x - 0.6).abs() < 1e-7));
    }

    #[test]
    fn appearance_ranges_validated() {
        let bad = AppearanceParams { noise_std: 0.6, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn centred_unit_placement_copies_patch() {
        let spec = centered_placement((64, 128), (12, 24)).unwrap();
        assert_eq!(spec.mask_count(), 12 * 24);
        let patch = random_patch(3, (12, 24)).unwrap().delta;
        let image = Tensor::full(&[3, 64, 128], 1.0);
        let out = overlay(&image, &patch, &spec).unwrap();
        let (hw, pw) = (64 * 128, 12 * 24);
        for k in 0..3 {
            for r in 0..12 {
                for c in 0..24 {
                    assert_eq!(out.data()[k * hw + (26 + r) * 128 + 52 + c], patch.data()[k * pw + r * 24 + c]);
                }
            }
        }
    }

    #[test]
    fn zero_patch_on_white_image() {
        let spec = centered_placement((16, 16), (4, 4)).unwrap();
        let out = overlay(&Tensor::full(&[3, 16, 16], 1.0), &Tensor::zeros(&[3, 4, 4]), &spec).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            assert_eq!(v, if spec.mask()[i % 256] { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn patch_equal_to_crop_is_noop() {
        let image = random_patch(9, (16, 20)).unwrap().delta;
        let spec = rect_at((8.0, 10.0), 1.0, (16, 20), (4, 6)).unwrap();
        // crop rows 6..10, cols 7..13
        let mut crop = Vec::new();
        for k in 0..3 {
            for r in 6..10 {
                for c in 7..13 {
                    crop.push(image.data()[k * 320 + r * 20 + c]);
                }
            }
        }
        let crop = Tensor::new(vec![3, 4, 6], crop).unwrap();
        assert_eq!(overlay(&image, &crop, &spec).unwrap(), image);
    }

    #[test]
    fn eot_centres_stay_in_window() {
        let mut rng = rng::stream(5, Stream::Eot, 0);
        for _ in 0..500 {
            let spec = sample_eot_placement(&mut rng, (64, 128), (12, 24), [0.8, 1.2], TranslateMode::ImageCenter).unwrap();
            let Placement::EotRect { top, left, scale } = *spec.placement() else { panic!() };
            assert!((0.8..=1.2).contains(&scale));
            let (cy, cx) = (top + 6.0 * scale, left + 12.0 * scale);
            assert!((52.0..=76.0).contains(&cx) && (26.0..=38.0).contains(&cy), "{cx} {cy}");
        }
    }

    #[test]
    fn anchored_window_follows_the_quad() {
        // axis-aligned 48x24 quad centred at (30, 70): base scale 2
        let quad = [[46.0, 18.0], [94.0, 18.0], [94.0, 42.0], [46.0, 42.0]];
        let anchor = billboard_anchor(&quad, (12, 24)).unwrap();
        assert_eq!(
            anchor,
            TranslateMode::Anchored {
                center: (30.0, 70.0),
                base_scale: 2.0
            }
        );
        let mut rng = rng::stream(5, Stream::Eot, 0);
        for _ in 0..200 {
            let spec = sample_eot_placement(&mut rng, (64, 128), (12, 24), [0.8, 1.2], anchor).unwrap();
            let Placement::EotRect { top, left, scale } = *spec.placement() else { panic!() };
            assert!((1.6..=2.4).contains(&scale));
            let (cy, cx) = (top + 6.0 * scale, left + 12.0 * scale);
            assert!((46.0..=94.0).contains(&cx) && (18.0..=42.0).contains(&cy), "{cx} {cy}");
        }
        let flat = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert!(billboard_anchor(&flat, (12, 24)).is_err());
    }

    #[test]
    fn oversized_rect_is_infeasible() {
        assert!(matches!(rect_at((4.0, 4.0), 1.0, (8, 8), (10, 4)), Err(Error::PlacementInfeasible(_))));
        let mut rng = rng::stream(5, Stream::Eot, 0);
        assert!(matches!(
            sample_eot_placement(&mut rng, (64, 128), (12, 24), [0.2, 1.0], TranslateMode::ImageCenter),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn placement_json_round_trip() {
        let spec = rect_at((20.0, 40.0), 1.1, (64, 128), (12, 24)).unwrap();
        let back = PlacementSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(back.placement(), spec.placement());
        assert_eq!(back.mask(), spec.mask());
    }

    fn fronto_camera(z: f64) -> CameraPose {
        CameraPose::new([100.0, 100.0, 64.0, 32.0], Matrix3::identity(), Vector3::new(0.0, 0.0, z)).unwrap()
    }

    #[test]
    fn fronto_parallel_mask_is_projected_rectangle() {
        // 0.42 m x 0.22 m at 4 m: u in [58.75, 69.25), v in [29.25, 34.75)
        let bb = Billboard::new([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0], 0.42, 0.22).unwrap();
        let spec = scene_placement(&fronto_camera(4.0), &bb, (64, 128), (12, 24)).unwrap();
        for r in 0..64 {
            for c in 0..128 {
                let expect = (29..35).contains(&r) && (59..69).contains(&c);
                assert_eq!(spec.mask()[r * 128 + c], expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn mask_shrinks_with_distance() {
        let layout = SceneLayout::canonical(SceneId::A);
        let bc = layout.billboard.center;
        let mut last = usize::MAX;
        for d in [5.0, 10.0, 15.0, 20.0, 25.0, 30.0] {
            let pos = Vector3::new(0.0, 1.5, bc[2] - d);
            let yaw = (bc[0] - pos.x).atan2(d);
            let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], pos, yaw, 0.0).unwrap();
            let n = scene_placement(&cam, &layout.billboard, (64, 128), (12, 24)).unwrap().mask_count();
            assert!(n < last, "{d}: {n} >= {last}");
            last = n;
        }
    }

    #[test]
    fn scene_mask_lies_on_billboard_labels() {
        let layout = SceneLayout::canonical(SceneId::B);
        let bc = layout.billboard.center;
        let pos = Vector3::new(0.5, 1.5, bc[2] - 9.0);
        let yaw = (bc[0] - pos.x).atan2(9.0);
        let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], pos, yaw, 0.0).unwrap();
        let sample = render_scene(&layout, &cam, (64, 128), &RenderStyle::default(), None).unwrap();
        let spec = scene_placement(&cam, &layout.billboard, (64, 128), (12, 24)).unwrap();
        let lab = &sample.labels;
        assert!(spec.mask_count() > 50);
        for r in 0..64 {
            for c in 0..128 {
                if !spec.mask()[r * 128 + c] {
                    continue;
                }
                let near_billboard = (r.saturating_sub(1)..=(r + 1).min(63))
                    .any(|rr| (c.saturating_sub(1)..=(c + 1).min(127)).any(|cc| lab.get(rr, cc) == CLASS_BILLBOARD));
                assert!(near_billboard, "mask pixel ({r},{c}) far from billboard");
            }
        }
    }

    #[test]
    fn random_patch_statistics() {
        let a = random_patch(11, (100, 100)).unwrap();
        assert_eq!(a, random_patch(11, (100, 100)).unwrap());
        assert!(a.delta.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.delta.data()[..10_000].iter().sum::<f32>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn patch_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_patch(2, (6, 8)).unwrap();
        p.save(&dir.path().join("patch.pft")).unwrap();
        p.save_preview(&dir.path().join("patch.ppm")).unwrap();
        assert_eq!(PatchState::load(&dir.path().join("patch.pft")).unwrap().delta, p.delta);
    }
}
