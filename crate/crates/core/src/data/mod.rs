//! Procedural gaze scenes: a cartoon face whose pupils move with the gaze
//! angles, cropped into eye patches and split into face regions.
//!
//! Every sample is a pure function of its seed, so a dataset is fully
//! described by `(seed, count, split, image sizes)` and can be regenerated
//! bit for bit from that description.

mod scene;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use scene::{
    crop_box, crop_eyes, estimate_gaze, paste_box, pupil_centroid, reassemble, region_split,
    render_clean, render_scene, EyeBox, FaceGeometry, MAX_ANGLE_DEG, NOISE_AMPLITUDE, PUPIL_TRAVEL,
};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imageio;
use crate::losses::GazeAngles;
use crate::tensor::Tensor;

pub const MAX_ROLL_DEG: f64 = 3.0;
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.7, 1.3);
/// File that describes a dataset directory.
pub const DESCRIPTOR: &str = "dataset.toml";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub seed: u64,
    pub brightness: f64,
    /// Radians.
    pub roll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub face: Tensor,
    /// `[3, eye_h, eye_w]`, cut from the image-left eye box.
    pub eye_l: Tensor,
    pub eye_r: Tensor,
    pub region_top: Tensor,
    pub region_mid: Tensor,
    pub region_bot: Tensor,
    pub truth: GazeAngles,
    pub meta: SampleMeta,
}

impl GazeSample {
    /// Draws the gaze, brightness and roll from `seed` and renders them.
    pub fn generate(
        id: usize,
        seed: u64,
        geom: &FaceGeometry,
        eye_size: [usize; 2],
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = MAX_ANGLE_DEG.to_radians();
        let truth = GazeAngles::new(rng.gen_range(-max..=max), rng.gen_range(-max..=max));
        let brightness = rng.gen_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
        let roll_max = MAX_ROLL_DEG.to_radians();
        let roll = rng.gen_range(-roll_max..=roll_max);
        let face = render_scene(geom, rng.next_u64(), truth, brightness, roll)?;
        let (eye_l, eye_r) = crop_eyes(&face, geom, eye_size)?;
        let [region_top, region_mid, region_bot] = region_split(&face, geom)?;
        Ok(Self {
            face,
            eye_l,
            eye_r,
            region_top,
            region_mid,
            region_bot,
            truth,
            meta: SampleMeta {
                id,
                seed,
                brightness,
                roll,
            },
        })
    }
}

/// The full description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub train_fraction: f64,
    pub face_size: [usize; 2],
    pub eye_size: [usize; 2],
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, train_fraction: f64, model: &ModelConfig) -> Self {
        Self {
            seed,
            count,
            train_fraction,
            face_size: model.face_size,
            eye_size: model.eye_size,
        }
    }

    pub fn train_count(&self) -> usize {
        (self.count as f64 * self.train_fraction).round() as usize
    }

    pub fn geometry(&self) -> FaceGeometry {
        FaceGeometry::new(self.face_size[0], self.face_size[1])
    }

    /// Distinct per-sample seeds drawn from the master seed.
    pub fn sample_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::with_capacity(self.count);
        let mut out = Vec::with_capacity(self.count);
        while out.len() < self.count {
            let s = rng.next_u64();
            if seen.insert(s) {
                out.push(s);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config(format!(
                "train fraction {} outside [0, 1]",
                self.train_fraction
            )));
        }
        if self.eye_size.contains(&0) {
            return Err(Error::config("eye size must be positive"));
        }
        self.geometry().validate()
    }

    /// Reads `dir/dataset.toml`.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(DESCRIPTOR))?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Regenerates sample `id` alone.
    pub fn sample(&self, id: usize) -> Result<GazeSample> {
        if id >= self.count {
            return Err(Error::usage(format!(
                "sample {id} out of range (dataset has {})",
                self.count
            )));
        }
        let seed = self.sample_seeds()[id];
        GazeSample::generate(id, seed, &self.geometry(), self.eye_size)
    }

    /// Image sizes match those the model expects.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.face_size != model.face_size || self.eye_size != model.eye_size {
            return Err(Error::config(format!(
                "dataset has faces {:?} and eyes {:?}, model expects {:?} and {:?}",
                self.face_size, self.eye_size, model.face_size, model.eye_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<GazeSample>,
    pub test: Vec<GazeSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let geom = spec.geometry();
        let n_train = spec.train_count();
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(spec.count - n_train);
        for (id, seed) in spec.sample_seeds().into_iter().enumerate() {
            let s = GazeSample::generate(id, seed, &geom, spec.eye_size)?;
            if id < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            train,
            test,
        })
    }

    /// Regenerates the dataset described by `dir/dataset.toml`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::generate(&DatasetSpec::load(dir)?)
    }

    pub fn save_descriptor(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(&self.spec).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(dir.join(DESCRIPTOR), text)?;
        Ok(())
    }

    /// Writes the descriptor plus `train/` and `test/` directories of PPM
    /// images with a `manifest.csv` each.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        self.save_descriptor(dir)?;
        let geom = self.spec.geometry();
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub)?;
            let mut csv = String::from(
                "sample_id,seed,pitch_deg,yaw_deg,eye_l_x0,eye_l_y0,eye_l_w,eye_l_h,eye_r_x0,eye_r_y0,eye_r_w,eye_r_h\n",
            );
            for s in split {
                let id = s.meta.id;
                imageio::write_ppm(&sub.join(format!("{id:05}_face.ppm")), &s.face)?;
                imageio::write_ppm(&sub.join(format!("{id:05}_eye_l.ppm")), &s.eye_l)?;
                imageio::write_ppm(&sub.join(format!("{id:05}_eye_r.ppm")), &s.eye_r)?;
                let (p, y) = s.truth.degrees();
                let (l, r) = (geom.eye_l, geom.eye_r);
                let _ = writeln!(
                    csv,
                    "{id},{},{p:.6},{y:.6},{},{},{},{},{},{},{},{}",
                    s.meta.seed, l.x0, l.y0, l.w, l.h, r.x0, r.y0, r.w, r.h
                );
            }
            std::fs::write(sub.join("manifest.csv"), csv)?;
        }
        Ok(())
    }
}

/// `dataset_generate(seed, count, split_ratio)` at the given model's image
/// sizes.
pub fn dataset_generate(
    seed: u64,
    count: usize,
    split_ratio: f64,
    model: &ModelConfig,
) -> Result<Dataset> {
    Dataset::generate(&DatasetSpec::new(seed, count, split_ratio, model))
}

/// Samples stacked along a new batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub face: Tensor,
    pub eye_l: Tensor,
    pub eye_r: Tensor,
    pub regions: [Tensor; 3],
    pub truth: Vec<GazeAngles>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&GazeSample]) -> Result<Self> {
        let stack = |f: fn(&GazeSample) -> &Tensor| {
            Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(Self {
            face: stack(|s| &s.face)?,
            eye_l: stack(|s| &s.eye_l)?,
            eye_r: stack(|s| &s.eye_r)?,
            regions: [
                stack(|s| &s.region_top)?,
                stack(|s| &s.region_mid)?,
                stack(|s| &s.region_bot)?,
            ],
            truth: samples.iter().map(|s| s.truth).collect(),
            ids: samples.iter().map(|s| s.meta.id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// `[N, 2]` of `(pitch, yaw)` in radians.
    pub fn truth_tensor(&self) -> Tensor {
        let data = self.truth.iter().flat_map(|t| [t.pitch, t.yaw]).collect();
        Tensor::new(&[self.len(), 2], data).expect("two angles per sample")
    }
}
