//! Dataset generation and the JSON-lines manifest.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::CameraPose;
use super::render::{render_scene, RenderStyle, SceneId, SceneLayout, SceneSample};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels (both axes); principal point at the image centre.
    pub focal: f64,
    /// Distance to the billboard measured along the road, metres.
    pub distance: [f64; 2],
    pub yaw_jitter_deg: f64,
    pub camera_height: [f64; 2],
    /// Lateral camera position on the road, metres.
    pub lateral: [f64; 2],
    pub brightness: [f32; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 120,
            val: 40,
            test: 40,
            height: 64,
            width: 128,
            focal: 96.0,
            distance: [5.0, 30.0],
            yaw_jitter_deg: 25.0,
            camera_height: [1.2, 1.8],
            lateral: [-1.5, 1.5],
            brightness: [0.8, 1.2],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("distance", self.distance),
            ("camera_height", self.camera_height),
            ("lateral", self.lateral),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.distance[0] <= 0.0 || self.camera_height[0] <= 0.0 {
            return Err(Error::Config("distance and camera height must be positive".into()));
        }
        if !(self.brightness[0] > 0.0 && self.brightness[0] <= self.brightness[1]) {
            return Err(Error::Config("brightness range is invalid".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be positive and divisible by 4",
                self.height, self.width
            )));
        }
        if self.focal <= 0.0 {
            return Err(Error::Config("focal length must be positive".into()));
        }
        if self.total() == 0 {
            return Err(Error::Config("dataset has no samples".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.focal, self.focal, self.width as f64 / 2.0, self.height as f64 / 2.0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl From<&CameraPose> for CameraRecord {
    fn from(c: &CameraPose) -> Self {
        let m = &c.rotation;
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl CameraRecord {
    pub fn to_pose(&self) -> Result<CameraPose> {
        CameraPose::new(
            [self.fx, self.fy, self.cx, self.cy],
            Matrix3::from_row_slice(&self.r.concat()),
            Vector3::from(self.t),
        )
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
    pub split: Split,
    pub camera: CameraRecord,
    pub billboard_quad_world: [[f64; 3]; 4],
    pub billboard_quad_image: Option<[[f64; 2]; 4]>,
    pub index: usize,
    pub scene: SceneId,
    pub style: RenderStyle,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Draws a camera for scene `layout` that is not inside any geometry.
pub fn sample_camera<R: Rng>(config: &DatasetConfig, layout: &SceneLayout, rng: &mut R) -> Result<CameraPose> {
    let bc = layout.billboard.center;
    for _ in 0..64 {
        let along = rng.random_range(config.distance[0]..=config.distance[1]);
        let x = rng.random_range(config.lateral[0]..=config.lateral[1]);
        let y = rng.random_range(config.camera_height[0]..=config.camera_height[1]);
        let pos = Vector3::new(x, y, bc[2] - along);
        let bearing = (bc[0] - x).atan2(bc[2] - pos.z);
        let jitter = rng.random_range(-config.yaw_jitter_deg..=config.yaw_jitter_deg).to_radians();
        let cam = CameraPose::from_heading(config.intrinsics(), pos, bearing + jitter, 0.0)?;
        if !layout.inside_geometry(&pos) {
            return Ok(cam);
        }
    }
    Err(Error::Config("could not place a camera outside the scene geometry".into()))
}

fn split_of(config: &DatasetConfig, index: usize) -> Split {
    if index < config.train {
        Split::Train
    } else if index < config.train + config.val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Renders sample `index` of the dataset `(config, seed)`.
pub fn generate_sample(config: &DatasetConfig, seed: u64, index: usize) -> Result<(ManifestEntry, SceneSample)> {
    let scene = SceneId::ALL[index % 3];
    let layout = SceneLayout::canonical(scene);
    let mut rng = rng::stream(seed, Stream::Dataset, index as u64);
    let camera = sample_camera(config, &layout, &mut rng)?;
    let style = RenderStyle {
        brightness: rng.random_range(config.brightness[0]..=config.brightness[1]),
        noise_seed: rng.random(),
        ad_seed: rng.random(),
    };
    let sample = render_scene(&layout, &camera, config.dims(), &style, None)?;
    let split = split_of(config, index);
    let stem = format!("{split}_{index:04}");
    let entry = ManifestEntry {
        image_path: format!("images/{stem}.ppm"),
        label_path: format!("labels/{stem}.pgm"),
        split,
        camera: CameraRecord::from(&camera),
        billboard_quad_world: sample.billboard_quad_world,
        billboard_quad_image: sample.billboard_quad_image,
        index,
        scene,
        style,
    };
    Ok((entry, sample))
}

/// Writes images, label maps and `manifest.jsonl` under `out`. Returns the
/// manifest path.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Vec::new();
    for index in 0..config.total() {
        let (entry, sample) = generate_sample(config, seed, index)?;
        let img = out.join(&entry.image_path);
        fs::write(&img, imageio::encode_ppm(&sample.image)?).map_err(|e| Error::io(&img, e))?;
        let lbl = out.join(&entry.label_path);
        fs::write(&lbl, imageio::encode_pgm(&sample.labels)).map_err(|e| Error::io(&lbl, e))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    let path = out.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// A loaded dataset: manifest entries with their images and labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Loads `manifest.jsonl` (or a directory containing one).
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let entries = read_manifest(&manifest)?;
        let samples = entries
            .iter()
            .map(|e| {
                let image = imageio::read_ppm(&root.join(&e.image_path))?;
                let labels = imageio::read_pgm(&root.join(&e.label_path))?;
                if (image.dim(1), image.dim(2)) != labels.dims() {
                    return Err(Error::Data(format!("{}: image and label sizes differ", e.image_path)));
                }
                Ok(SceneSample {
                    scene: e.scene,
                    image,
                    labels,
                    camera: e.camera.to_pose()?,
                    style: e.style,
                    billboard_quad_world: e.billboard_quad_world,
                    billboard_quad_image: e.billboard_quad_image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root, entries, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&SceneSample> {
        self.filter(|e| e.split == split)
    }

    pub fn split_scene(&self, split: Split, scene: SceneId) -> Vec<&SceneSample> {
        self.filter(|e| e.split == split && e.scene == scene)
    }

    fn filter(&self, pred: impl Fn(&ManifestEntry) -> bool) -> Vec<&SceneSample> {
        self.entries
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| pred(e))
            .map(|(_, s)| s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 4,
            val: 2,
            test: 2,
            height: 32,
            width: 64,
            focal: 48.0,
            ..Default::default()
        }
    }

    #[test]
    fn manifest_counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_dataset(&small(), 7, dir.path()).unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 8);
        let count = |s| entries.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (4, 2, 2));
        let line = fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["image_path", "label_path", "split", "camera", "billboard_quad_world", "billboard_quad_image"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        for key in ["fx", "fy", "cx", "cy", "R", "t"] {
            assert!(first["camera"].get(key).is_some(), "missing camera.{key}");
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&small(), 3, a.path()).unwrap();
        generate_dataset(&small(), 3, b.path()).unwrap();
        for e in read_manifest(&a.path().join(MANIFEST_NAME)).unwrap() {
            for p in [&e.image_path, &e.label_path] {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_NAME)).unwrap(),
            fs::read(b.path().join(MANIFEST_NAME)).unwrap()
        );
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(generate_dataset(&small(), 1, &file), Err(Error::Io { .. })));
    }

    #[test]
    fn loaded_samples_match_stored_geometry() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&small(), 5, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 8);
        assert_eq!(ds.split(Split::Val).len(), 2);
        for (e, s) in ds.entries.iter().zip(&ds.samples) {
            assert_eq!(s.scene, SceneId::ALL[e.index % 3]);
            assert_eq!(s.camera, e.camera.to_pose().unwrap());
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = DatasetConfig { height: 30, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DatasetConfig { distance: [10.0, 5.0], ..small() };
        assert!(bad.validate().is_err());
    }
}
