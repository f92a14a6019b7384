//! Flat-shaded ray-cast renderer for the three billboard scenes.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::geometry::{Billboard, CameraPose, Projection};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const CLASS_SKY: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_OBSTACLE: u8 = 3;
pub const CLASS_BILLBOARD: u8 = 4;
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "road", "building", "obstacle", "billboard"];

/// Texel grid of the stock billboard artwork.
pub const AD_DIMS: (usize, usize) = (12, 24);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SceneId {
    A,
    B,
    C,
}

impl SceneId {
    pub const ALL: [SceneId; 3] = [SceneId::A, SceneId::B, SceneId::C];

    /// Billboard yaw away from facing straight down the road, in degrees.
    pub fn billboard_yaw_deg(self) -> f64 {
        match self {
            SceneId::A => 0.0,
            SceneId::B => 40.0,
            SceneId::C => 65.0,
        }
    }
}

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SceneId::A => "A",
            SceneId::B => "B",
            SceneId::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for SceneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(SceneId::A),
            "B" | "b" => Ok(SceneId::B),
            "C" | "c" => Ok(SceneId::C),
            other => Err(Error::Usage(format!("unknown scene '{other}' (expected A, B or C)"))),
        }
    }
}

/// Axis-aligned solid box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u8,
    pub color: [f32; 3],
}

impl SceneBox {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }

    /// Entry distance and outward face normal axis/sign for a ray from outside.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 1.0;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[i] - o[i]) / d[i];
            let t2 = (self.max[i] - o[i]) / d[i];
            let (a, b, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
            if a > t_near {
                t_near = a;
                axis = i;
                sign = s;
            }
            t_far = t_far.min(b);
        }
        (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis, sign))
    }
}

/// Static geometry of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub id: SceneId,
    pub billboard: Billboard,
    pub boxes: Vec<SceneBox>,
}

/// Half-width of the paved road; the camera drives within it.
pub const ROAD_HALF_WIDTH: f64 = 4.0;

impl SceneLayout {
    /// The fixed layout of scene `id`: a straight road along world +z, a
    /// roadside billboard at the origin's longitude on two posts, parked
    /// cars and building blocks on both sides.
    pub fn canonical(id: SceneId) -> Self {
        let yaw = id.billboard_yaw_deg().to_radians();
        let center = [-6.0, 2.6, 0.0];
        let billboard = Billboard::new(center, [yaw.sin(), 0.0, -yaw.cos()], [0.0, 1.0, 0.0], 4.0, 2.0)
            .expect("canonical billboard is valid");
        let mut boxes = Vec::new();
        // Posts under the bottom corners.
        for side in [-1.0, 1.0] {
            let p = billboard.patch_point((1, 1), 0.5 + side * 0.35, 1.0);
            boxes.push(SceneBox {
                min: [p.x - 0.12, 0.0, p.z - 0.12],
                max: [p.x + 0.12, p.y - 0.02, p.z + 0.12],
                class: CLASS_OBSTACLE,
                color: [0.32, 0.32, 0.34],
            });
        }
        let building_colors = [[0.62, 0.46, 0.36], [0.72, 0.68, 0.58], [0.50, 0.52, 0.58], [0.58, 0.38, 0.30]];
        let offset = match id {
            SceneId::A => 0.0,
            SceneId::B => 7.0,
            SceneId::C => 13.0,
        };
        let mut k = 0;
        for side in [-1.0f64, 1.0] {
            let mut z = -70.0 + offset * side.max(0.0);
            while z < 140.0 {
                let len = 12.0 + ((k * 7) % 5) as f64 * 3.0;
                let height = 6.0 + ((k * 5) % 7) as f64 * 1.6;
                let depth = 10.0 + ((k * 3) % 4) as f64 * 2.0;
                let near = if side < 0.0 { 11.0 } else { 9.0 };
                let (x0, x1) = if side < 0.0 { (-near - depth, -near) } else { (near, near + depth) };
                boxes.push(SceneBox {
                    min: [x0, 0.0, z],
                    max: [x1, height, z + len],
                    class: CLASS_BUILDING,
                    color: building_colors[k % building_colors.len()],
                });
                z += len + 3.0 + (k % 3) as f64 * 2.0;
                k += 1;
            }
        }
        let car_colors = [[0.72, 0.14, 0.14], [0.16, 0.26, 0.62], [0.86, 0.78, 0.20], [0.90, 0.90, 0.92]];
        let cars: &[(f64, f64)] = match id {
            SceneId::A => &[(3.2, -12.0), (-3.2, 9.0), (3.2, 22.0), (-3.2, -38.0)],
            SceneId::B => &[(-3.2, -20.0), (3.2, 6.0), (3.2, -34.0), (-3.2, 18.0)],
            SceneId::C => &[(3.2, -26.0), (-3.2, -8.0), (3.2, 14.0), (-3.2, 30.0)],
        };
        for (i, &(x, z)) in cars.iter().enumerate() {
            boxes.push(SceneBox {
                min: [x - 0.9, 0.0, z - 2.1],
                max: [x + 0.9, 1.5, z + 2.1],
                class: CLASS_OBSTACLE,
                color: car_colors[i % car_colors.len()],
            });
        }
        SceneLayout { id, billboard, boxes }
    }

    pub fn inside_geometry(&self, p: &Vector3<f64>) -> bool {
        p.y <= 0.0 || self.boxes.iter().any(|b| b.contains(p))
    }
}

/// Per-sample appearance parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    /// Multiplier on every non-billboard colour.
    pub brightness: f32,
    /// Seed of the per-pixel noise.
    pub noise_seed: u64,
    /// Seed of the stock billboard artwork.
    pub ad_seed: u64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            brightness: 1.0,
            noise_seed: 0,
            ad_seed: 0,
        }
    }
}

/// Amplitude of the per-pixel noise on non-billboard surfaces.
const PIXEL_NOISE: f32 = 0.02;

fn hash64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

fn unit_hash(seed: u64, i: u64) -> f32 {
    (hash64(seed ^ hash64(i.wrapping_add(0x632b_e59b_d9b4_e019))) >> 40) as f32 / (1u64 << 24) as f32
}

/// The stock billboard artwork for `seed`: a 3x6 grid of flat colour blocks.
pub fn ad_texture(seed: u64) -> Tensor {
    let (h, w) = AD_DIMS;
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let block = ((r * 3 / h) * 6 + c * 6 / w) as u64;
            for k in 0..3 {
                data[k * h * w + r * w + c] = 0.1 + 0.85 * unit_hash(seed, block * 3 + k as u64);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// One rendered view with its ground truth and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene: SceneId,
    pub image: Tensor,
    pub labels: LabelMap,
    pub camera: CameraPose,
    pub style: RenderStyle,
    pub billboard_quad_world: [[f64; 3]; 4],
    pub billboard_quad_image: Option<[[f64; 2]; 4]>,
}

impl SceneSample {
    /// The image as it would be stored in 8-bit files.
    pub fn quantized_image(&self) -> Tensor {
        quantize(&self.image)
    }
}

pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0).collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Projects the billboard corners; `None` if any lies behind the camera.
pub fn billboard_quad_image(camera: &CameraPose, bb: &Billboard) -> Option<[[f64; 2]; 4]> {
    let c = bb.corners();
    let mut out = [[0.0; 2]; 4];
    for (o, p) in out.iter_mut().zip(&c) {
        match camera.project_point(p) {
            Projection::Visible { u, v, .. } => *o = [u, v],
            Projection::BehindCamera { .. } => return None,
        }
    }
    Some(out)
}

enum Hit {
    Ground(Vector3<f64>),
    Box(usize, usize, f64, Vector3<f64>),
    Billboard { u: f64, v: f64, front: bool },
}

/// Renders `layout` from `camera` at `dims = (H, W)`. When `patch`
/// (`[3,H~,W~]`) is given it replaces the stock artwork and covers the
/// whole billboard face, sampled with nearest-texel lookup.
pub fn render_scene(
    layout: &SceneLayout,
    camera: &CameraPose,
    dims: (usize, usize),
    style: &RenderStyle,
    patch: Option<&Tensor>,
) -> Result<SceneSample> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("render size must be positive".into()));
    }
    let origin = camera.center();
    if layout.inside_geometry(&origin) {
        return Err(Error::Render(format!(
            "camera at ({:.2}, {:.2}, {:.2}) is inside scene geometry",
            origin.x, origin.y, origin.z
        )));
    }
    let ad;
    let texture = match patch {
        Some(p) => {
            if p.rank() != 3 || p.dim(0) != 3 {
                return Err(Error::Dimension(format!("patch must be [3,H,W], got {:?}", p.shape())));
            }
            p
        }
        None => {
            ad = ad_texture(style.ad_seed);
            &ad
        }
    };
    let (th, tw) = (texture.dim(1), texture.dim(2));
    let bb = &layout.billboard;
    let n = Vector3::from(bb.normal);
    let up = Vector3::from(bb.up);
    let right = bb.right();
    let tl = bb.top_left();
    let bc = Vector3::from(bb.center);

    let mut image = vec![0.0f32; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    let hw = h * w;
    for r in 0..h {
        for c in 0..w {
            let d = camera.ray_direction(c as f64 + 0.5, r as f64 + 0.5);
            let mut best_t = f64::INFINITY;
            let mut hit = None;
            if d.y < -1e-12 {
                let t = -origin.y / d.y;
                best_t = t;
                hit = Some(Hit::Ground(origin + d * t));
            }
            for (i, b) in layout.boxes.iter().enumerate() {
                if let Some((t, axis, sign)) = b.intersect(&origin, &d) {
                    if t < best_t {
                        best_t = t;
                        hit = Some(Hit::Box(i, axis, sign, origin + d * t));
                    }
                }
            }
            let denom = d.dot(&n);
            if denom.abs() > 1e-12 {
                let t = (bc - origin).dot(&n) / denom;
                if t > 1e-9 && t < best_t {
                    let rel = origin + d * t - tl;
                    let u = rel.dot(&right) / bb.width;
                    let v = -rel.dot(&up) / bb.height;
                    if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                        hit = Some(Hit::Billboard { u, v, front: denom < 0.0 });
                    }
                }
            }
            let p = r * w + c;
            let (rgb, class, lit) = match hit {
                None => {
                    let e = (d.y / d.norm()).max(0.0) as f32;
                    let t = (e * 3.0).min(1.0);
                    ([0.80 - 0.25 * t, 0.86 - 0.14 * t, 0.94 - 0.02 * t], CLASS_SKY, true)
                }
                Some(Hit::Ground(pt)) => (ground_color(&pt), CLASS_ROAD, true),
                Some(Hit::Box(i, axis, sign, pt)) => {
                    let b = &layout.boxes[i];
                    (box_color(b, axis, sign, &pt), b.class, true)
                }
                Some(Hit::Billboard { u, v, front }) => {
                    if front {
                        let tr = ((v * th as f64) as usize).min(th - 1);
                        let tc = ((u * tw as f64) as usize).min(tw - 1);
                        let t = texture.data();
                        let i = tr * tw + tc;
                        ([t[i], t[th * tw + i], t[2 * th * tw + i]], CLASS_BILLBOARD, false)
                    } else {
                        ([0.45, 0.45, 0.47], CLASS_BILLBOARD, true)
                    }
                }
            };
            labels[p] = class;
            for k in 0..3 {
                let v = if lit {
                    let noise = (unit_hash(style.noise_seed, (p * 3 + k) as u64) - 0.5) * 2.0 * PIXEL_NOISE;
                    (rgb[k] * style.brightness + noise).clamp(0.0, 1.0)
                } else {
                    rgb[k]
                };
                image[k * hw + p] = v;
            }
        }
    }
    let corners = bb.corners();
    Ok(SceneSample {
        scene: layout.id,
        image: Tensor::new(vec![3, h, w], image)?,
        labels: LabelMap::new(h, w, labels)?,
        camera: *camera,
        style: *style,
        billboard_quad_world: corners.map(|c| [c.x, c.y, c.z]),
        billboard_quad_image: billboard_quad_image(camera, bb),
    })
}

fn ground_color(p: &Vector3<f64>) -> [f32; 3] {
    let ax = p.x.abs();
    if ax < 0.12 && p.z.rem_euclid(6.0) < 3.0 {
        [0.88, 0.88, 0.84]
    } else if ax < ROAD_HALF_WIDTH {
        [0.36, 0.36, 0.38]
    } else if ax < 6.5 {
        [0.58, 0.56, 0.52]
    } else {
        [0.42, 0.40, 0.36]
    }
}

fn box_color(b: &SceneBox, axis: usize, sign: f64, p: &Vector3<f64>) -> [f32; 3] {
    let shade = match (axis, sign > 0.0) {
        (1, true) => 1.0,
        (1, false) => 0.5,
        (0, _) => 0.82,
        _ => 0.68,
    };
    let mut c = b.color.map(|v| v * shade);
    if b.class == CLASS_BUILDING && axis != 1 {
        // Window grid on the facades.
        let along = if axis == 0 { p.z } else { p.x };
        let (fu, fv) = (along.rem_euclid(3.0), p.y.rem_euclid(3.2));
        if (0.8..2.2).contains(&fu) && (1.0..2.4).contains(&fv) && p.y > 1.0 {
            c = c.map(|v| v * 0.45);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::geometry::billboard_homography;

    #[test]
    fn empty_sky_view() {
        let layout = SceneLayout::canonical(SceneId::A);
        // Straight up.
        let cam = CameraPose::from_heading([96.0, 96.0, 32.0, 16.0], Vector3::new(0.0, 1.5, -20.0), 0.0, 1.5).unwrap();
        let s = render_scene(&layout, &cam, (32, 64), &RenderStyle::default(), None).unwrap();
        assert!(s.labels.data().iter().all(|&l| l == CLASS_SKY));
    }

    #[test]
    fn constant_patch_is_rendered_verbatim() {
        let layout = SceneLayout::canonical(SceneId::A);
        // Directly in front of the billboard, looking at it.
        let bc = Vector3::from(layout.billboard.center);
        let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], Vector3::new(bc.x, bc.y, bc.z - 8.0), 0.0, 0.0).unwrap();
        let patch = Tensor::full(&[3, 12, 24], 0.5);
        let style = RenderStyle { brightness: 1.1, noise_seed: 3, ad_seed: 4 };
        let s = render_scene(&layout, &cam, (64, 128), &style, Some(&patch)).unwrap();
        let hw = 64 * 128;
        let mut n = 0;
        for p in 0..hw {
            if s.labels.data()[p] == CLASS_BILLBOARD {
                n += 1;
                for k in 0..3 {
                    assert_eq!(s.image.data()[k * hw + p], 0.5);
                }
            }
        }
        assert!(n > 500, "billboard pixels: {n}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let layout = SceneLayout::canonical(SceneId::B);
        let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], Vector3::new(0.5, 1.5, -15.0), -0.3, 0.0).unwrap();
        let style = RenderStyle { brightness: 0.9, noise_seed: 11, ad_seed: 5 };
        let a = render_scene(&layout, &cam, (64, 128), &style, None).unwrap();
        let b = render_scene(&layout, &cam, (64, 128), &style, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn camera_inside_box_is_render_error() {
        let layout = SceneLayout::canonical(SceneId::A);
        let b = layout.boxes.iter().find(|b| b.class == CLASS_BUILDING).unwrap();
        let inside = Vector3::new((b.min[0] + b.max[0]) / 2.0, 1.0, (b.min[2] + b.max[2]) / 2.0);
        let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], inside, 0.0, 0.0).unwrap();
        assert!(matches!(
            render_scene(&layout, &cam, (8, 8), &RenderStyle::default(), None),
            Err(Error::Render(_))
        ));
    }

    #[test]
    fn billboard_pixels_lie_inside_projected_quad() {
        let layout = SceneLayout::canonical(SceneId::C);
        let cam = CameraPose::from_heading([96.0, 96.0, 64.0, 32.0], Vector3::new(-1.0, 1.4, -12.0), -0.4, 0.0).unwrap();
        let s = render_scene(&layout, &cam, (64, 128), &RenderStyle::default(), None).unwrap();
        let h = billboard_homography(&cam, &layout.billboard, (1, 1)).unwrap().inverse().unwrap();
        let mut count = 0;
        for r in 0..64 {
            for c in 0..128 {
                if s.labels.get(r, c) == CLASS_BILLBOARD {
                    count += 1;
                    let [u, v] = h.apply(c as f64 + 0.5, r as f64 + 0.5).unwrap();
                    assert!((-1e-9..1.0 + 1e-9).contains(&u) && (-1e-9..1.0 + 1e-9).contains(&v));
                }
            }
        }
        assert!(count > 0);
    }
}
