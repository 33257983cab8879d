//! Synthetic multi-organ volumes: axis-aligned ellipsoids of distinct mean
//! intensity over a background, with Gaussian noise.
//!
//! Each patient jitters every organ's centre and semi-axes within the ranges
//! of its [`OrganSpec`]. Organs are painted in class order, so a later class
//! wins where two ellipsoids overlap.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dice::{class_counts, ClassCounts, DiceError};
use crate::voxelgrid::vvol::{read_labels, read_scalar};
use crate::voxelgrid::{write_volume, LabelVolume, ScalarVolume, Shape3, VolumeError};

/// Intensities are clamped to `[-INTENSITY_LIMIT, INTENSITY_LIMIT]`.
pub const INTENSITY_LIMIT: f32 = 1.0e3;

/// Stream reserved for the train/test shuffle; patient `i` uses stream `i`.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("class {class} ({name}) can extend outside the volume along axis {axis}")]
    OutsideVolume { class: usize, name: String, axis: usize },
    #[error("intensity means of classes {a} and {b} are closer than 2 sigma")]
    IntensitiesTooClose { a: usize, b: usize },
    #[error("need at least 2 patients, got {0}")]
    TooFewPatients(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One foreground class: ranges for the per-patient ellipsoid and its mean intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganSpec {
    pub name: String,
    /// Per-axis `(min, max)` of the centre, in voxels.
    pub center: [(f64, f64); 3],
    /// Per-axis `(min, max)` of the semi-axis length, in voxels.
    pub semi_axes: [(f64, f64); 3],
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub background_intensity: f32,
    /// Foreground classes `1..L` in painting order.
    pub organs: Vec<OrganSpec>,
    pub noise_sigma: f32,
    pub seed: u64,
}

fn organ(name: &str, center: [f64; 3], semi: [f64; 3], intensity: f32) -> OrganSpec {
    OrganSpec {
        name: name.into(),
        center: center.map(|c| (c - 2.0, c + 2.0)),
        semi_axes: semi.map(|s| (s * 0.85, s * 1.15)),
        intensity,
    }
}

impl Default for PhantomSpec {
    /// 48^3 volume with seven abdominal-style organs.
    fn default() -> Self {
        Self {
            shape: Shape3::cube(48).expect("nonzero"),
            background_intensity: -2.0,
            organs: vec![
                organ("artery", [24.0, 41.0, 24.0], [2.0, 2.0, 12.0], 3.6),
                organ("vein", [12.0, 38.0, 24.0], [3.5, 3.5, 12.0], 3.0),
                organ("liver", [17.0, 18.0, 24.0], [12.0, 11.5, 11.0], 1.8),
                organ("spleen", [37.0, 32.0, 24.0], [6.0, 5.0, 5.0], 2.4),
                organ("stomach", [33.0, 15.0, 24.0], [8.0, 7.0, 6.0], 0.6),
                organ("gallbladder", [22.0, 29.0, 35.0], [6.5, 6.0, 6.0], 1.2),
                organ("pancreas", [26.0, 31.0, 18.0], [9.0, 3.5, 3.5], 4.2),
            ],
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// The default organ layout rescaled to an `n^3` volume.
    pub fn cube(n: usize) -> Result<Self, PhantomError> {
        let base = Self::default();
        let shape = Shape3::cube(n)?;
        let f = (n as f64 - 1.0) / (base.shape.nx as f64 - 1.0);
        let scale = |r: [(f64, f64); 3]| r.map(|(a, b)| (a * f, b * f));
        let organs = base
            .organs
            .into_iter()
            .map(|o| OrganSpec { center: scale(o.center), semi_axes: scale(o.semi_axes), ..o })
            .collect();
        Ok(Self { shape, organs, ..base })
    }

    pub fn num_classes(&self) -> usize {
        self.organs.len() + 1
    }

    /// `background` followed by the organ names.
    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string()).chain(self.organs.iter().map(|o| o.name.clone())).collect()
    }

    fn intensity(&self, class: usize) -> f32 {
        if class == 0 {
            self.background_intensity
        } else {
            self.organs[class - 1].intensity
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.organs.is_empty() {
            return bad("need at least one organ".into());
        }
        if self.num_classes() > 255 {
            return bad(format!("{} classes do not fit in u8 labels", self.num_classes()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let extents = self.shape.as_array();
        for (k, o) in self.organs.iter().enumerate() {
            let class = k + 1;
            if !o.intensity.is_finite() {
                return bad(format!("class {class} has non-finite intensity"));
            }
            for (axis, &extent) in extents.iter().enumerate() {
                let (c0, c1) = o.center[axis];
                let (s0, s1) = o.semi_axes[axis];
                if !(c0 <= c1 && s0 <= s1 && s0 > 0.0 && c0.is_finite() && c1.is_finite() && s1.is_finite()) {
                    return bad(format!("class {class} has an empty or non-positive range on axis {axis}"));
                }
                if c0 - s1 < 0.0 || c1 + s1 > (extent - 1) as f64 {
                    return Err(PhantomError::OutsideVolume { class, name: o.name.clone(), axis });
                }
            }
        }
        let n = self.num_classes();
        for a in 0..n {
            for b in a + 1..n {
                if (self.intensity(a) - self.intensity(b)).abs() < 2.0 * self.noise_sigma {
                    return Err(PhantomError::IntensitiesTooClose { a, b });
                }
            }
        }
        Ok(())
    }
}

/// Image and labels of patient `patient_index`; deterministic in `(spec.seed, patient_index)`.
pub fn generate(spec: &PhantomSpec, patient_index: usize) -> Result<(ScalarVolume, LabelVolume), PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(patient_index as u64);
    let shape = spec.shape;
    let mut labels = vec![0u8; shape.voxel_count()];
    for (k, o) in spec.organs.iter().enumerate() {
        let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(o.center[a].0..=o.center[a].1));
        let semi: [f64; 3] = std::array::from_fn(|a| rng.random_range(o.semi_axes[a].0..=o.semi_axes[a].1));
        let lo: [usize; 3] = std::array::from_fn(|a| (center[a] - semi[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| (center[a] + semi[a]).ceil() as usize);
        let hi = [hi[0].min(shape.nx - 1), hi[1].min(shape.ny - 1), hi[2].min(shape.nz - 1)];
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = [x as f64, y as f64, z as f64];
                    let r: f64 = (0..3).map(|a| ((d[a] - center[a]) / semi[a]).powi(2)).sum();
                    if r <= 1.0 {
                        labels[shape.index(x, y, z)] = (k + 1) as u8;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma");
    let image = labels
        .iter()
        .map(|&c| {
            let mean = spec.intensity(c as usize);
            let v = if spec.noise_sigma > 0.0 { mean + noise.sample(&mut rng) } else { mean };
            v.clamp(-INTENSITY_LIMIT, INTENSITY_LIMIT)
        })
        .collect();
    Ok((ScalarVolume::new(shape, image)?, LabelVolume::new(shape, labels, spec.num_classes())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: usize,
    pub image: ScalarVolume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Patients partitioned into disjoint train and test sets, each sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub train: Vec<Patient>,
    pub test: Vec<Patient>,
}

impl Dataset {
    fn pairs(patients: &[Patient]) -> Vec<(ScalarVolume, LabelVolume)> {
        patients.iter().map(|p| (p.image.clone(), p.labels.clone())).collect()
    }

    pub fn train_pairs(&self) -> Vec<(ScalarVolume, LabelVolume)> {
        Self::pairs(&self.train)
    }

    pub fn test_pairs(&self) -> Vec<(ScalarVolume, LabelVolume)> {
        Self::pairs(&self.test)
    }

    pub fn train_counts(&self) -> Result<ClassCounts, PhantomError> {
        Ok(class_counts(self.num_classes, self.train.iter().map(|p| &p.labels))?)
    }
}

/// Number of training patients for `n` patients at `fraction`.
pub fn train_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

pub fn generate_dataset(spec: &PhantomSpec, n_patients: usize, train_fraction: f64) -> Result<Dataset, PhantomError> {
    if n_patients < 2 {
        return Err(PhantomError::TooFewPatients(n_patients));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PhantomError::BadFraction(train_fraction));
    }
    spec.validate()?;
    let mut order: Vec<usize> = (0..n_patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let n_train = train_size(n_patients, train_fraction);
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let build = |ids: Vec<usize>| -> Result<Vec<Patient>, PhantomError> {
        ids.into_iter()
            .map(|id| {
                let (image, labels) = generate(spec, id)?;
                Ok(Patient { id, image, labels })
            })
            .collect()
    };
    Ok(Dataset {
        num_classes: spec.num_classes(),
        class_names: spec.class_names(),
        train: build(train_ids)?,
        test: build(test_ids)?,
    })
}

pub const MANIFEST: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.json";

pub fn image_file(id: usize) -> String {
    format!("patient_{id}_img.vvol")
}

pub fn label_file(id: usize) -> String {
    format!("patient_{id}_lbl.vvol")
}

/// Write volume pairs, `manifest.csv` and the class names under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rows: Vec<(&Patient, Split)> =
        dataset.train.iter().map(|p| (p, Split::Train)).chain(dataset.test.iter().map(|p| (p, Split::Test))).collect();
    rows.sort_by_key(|(p, _)| p.id);
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    let mut header = vec!["patient_id".to_string(), "split".to_string()];
    header.extend((0..dataset.num_classes).map(|c| format!("count_{c}")));
    w.write_record(&header)?;
    for (p, split) in rows {
        write_volume(&p.image, dir.join(image_file(p.id)))?;
        write_volume(&p.labels, dir.join(label_file(p.id)))?;
        let counts = class_counts(dataset.num_classes, [&p.labels])?;
        let mut row = vec![p.id.to_string(), if split == Split::Train { "train" } else { "test" }.to_string()];
        row.extend(counts.per_class().iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    fs::write(dir.join(CLASSES_FILE), serde_json::to_string_pretty(&dataset.class_names).expect("strings serialize"))?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`], checking stored counts.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset, PhantomError> {
    let dir = dir.as_ref();
    let mut r = csv::Reader::from_path(dir.join(MANIFEST))?;
    let header = r.headers()?.clone();
    if header.len() < 4 || &header[0] != "patient_id" || &header[1] != "split" {
        return Err(PhantomError::Manifest("expected columns patient_id,split,count_0,...".into()));
    }
    let num_classes = header.len() - 2;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: usize = rec[0].parse().map_err(|_| PhantomError::Manifest(format!("bad patient id {:?}", &rec[0])))?;
        let image = read_scalar(dir.join(image_file(id)))?;
        let labels = read_labels(dir.join(label_file(id)), Some(num_classes))?;
        if image.shape() != labels.shape() {
            return Err(PhantomError::Manifest(format!("patient {id}: image and label shapes differ")));
        }
        let counts = class_counts(num_classes, [&labels])?;
        for (c, stored) in rec.iter().skip(2).enumerate() {
            if stored.parse::<u64>().ok() != Some(counts.per_class()[c]) {
                return Err(PhantomError::Manifest(format!("patient {id}: count_{c} does not match the label file")));
            }
        }
        let patient = Patient { id, image, labels };
        match &rec[1] {
            "train" => train.push(patient),
            "test" => test.push(patient),
            other => return Err(PhantomError::Manifest(format!("patient {id}: unknown split {other:?}"))),
        }
    }
    if train.is_empty() {
        return Err(PhantomError::Manifest("no training patients".into()));
    }
    train.sort_by_key(|p| p.id);
    test.sort_by_key(|p| p.id);
    let class_names = match fs::read_to_string(dir.join(CLASSES_FILE)) {
        Ok(text) => serde_json::from_str::<Vec<String>>(&text)
            .ok()
            .filter(|n| n.len() == num_classes)
            .ok_or_else(|| PhantomError::Manifest(format!("{CLASSES_FILE} must list {num_classes} names")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (0..num_classes).map(|c| format!("class_{c}")).collect(),
        Err(e) => return Err(e.into()),
    };
    Ok(Dataset { num_classes, class_names, train, test })
}
