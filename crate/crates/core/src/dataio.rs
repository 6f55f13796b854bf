//! Dataset ingestion: the CIFAR-10 binary format and a deterministic
//! synthetic imbalanced-image generator, plus seeded batch sampling.
//!
//! Synthetic classes are oriented gratings whose frequency and orientation
//! differ per class, so distinct filters specialize per class. All per-image
//! randomness flows through the Gaussian pixel noise; with noise_std = 0
//! every image of a class is identical.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
        }
    }
}

/// Images in [0,1], NCHW, with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn from_parts(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Self {
        let mut class_counts = vec![0usize; num_classes];
        for &l in &labels {
            class_counts[l] += 1;
        }
        Dataset {
            images,
            labels,
            num_classes,
            class_counts,
            split,
        }
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_DIM: usize = 32;

/// Read one CIFAR-style binary batch file: each record is a label byte
/// followed by 3072 pixel bytes (R plane, G plane, B plane, row-major).
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse {
            path: path.to_string_lossy().into_owned(),
            message: format!(
                "file size {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let records = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(records * 3072);
    let mut labels = Vec::with_capacity(records);
    for r in 0..records {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Parse {
                path: path.to_string_lossy().into_owned(),
                message: format!("record {r}: label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Load the standard CIFAR-10 archive layout from a directory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let (p, l) = read_cifar_batch(&path)?;
        train_pixels.extend(p);
        train_labels.extend(l);
    }
    let (test_pixels, test_labels) = read_cifar_batch(&dir.join("test_batch.bin"))?;
    let train_n = train_labels.len();
    let test_n = test_labels.len();
    let train = Dataset::from_parts(
        Tensor::from_vec(vec![train_n, 3, CIFAR_DIM, CIFAR_DIM], train_pixels)?,
        train_labels,
        10,
        Split::Train,
    );
    let validation = Dataset::from_parts(
        Tensor::from_vec(vec![test_n, 3, CIFAR_DIM, CIFAR_DIM], test_pixels)?,
        test_labels,
        10,
        Split::Validation,
    );
    Ok((train, validation))
}

// ---------------------------------------------------------------------------
// Synthetic imbalanced generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub per_class_counts: Vec<usize>,
    /// Explicit validation counts; defaults to max(1, round(count / 4)).
    pub val_counts: Option<Vec<usize>>,
    pub image_size: (usize, usize, usize),
    /// Grating orientation per class, radians. Defaults spread over [0, pi).
    pub orientations: Option<Vec<f32>>,
    /// Grating frequency per class, cycles per image. Defaults 2 + 2c.
    pub frequencies: Option<Vec<f32>>,
    pub noise_std: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_class_counts.len() < 2 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least 2 classes".into(),
            ));
        }
        if self.per_class_counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "synthetic spec has a zero-count class".into(),
            ));
        }
        if let Some(v) = &self.val_counts {
            if v.len() != self.per_class_counts.len() || v.iter().any(|&c| c == 0) {
                return Err(Error::InvalidArgument(
                    "validation counts must match class count and be positive".into(),
                ));
            }
        }
        let (c, h, w) = self.image_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("empty image size".into()));
        }
        Ok(())
    }

    /// Three classes with the 177/41/195 training skew and 45/10/48
    /// validation counts of a small retinopathy-grading corpus. The heavy
    /// pixel noise keeps the task off the 100%-accuracy ceiling so pruning
    /// quality differences stay visible.
    pub fn imbalanced3(seed: u64) -> Self {
        SyntheticSpec {
            per_class_counts: vec![177, 41, 195],
            val_counts: Some(vec![45, 10, 48]),
            image_size: (3, 32, 32),
            orientations: None,
            frequencies: None,
            noise_std: 2.0,
            seed,
        }
    }

    /// Balanced three-class preset used for calibration checks.
    pub fn balanced3(seed: u64) -> Self {
        SyntheticSpec {
            per_class_counts: vec![200, 200, 200],
            val_counts: Some(vec![50, 50, 50]),
            image_size: (3, 32, 32),
            orientations: None,
            frequencies: None,
            noise_std: 0.25,
            seed,
        }
    }

    /// Parse the key = value config format. Unknown keys are rejected.
    pub fn from_config_str(text: &str, path: &str) -> Result<Self> {
        let mut spec = SyntheticSpec {
            per_class_counts: Vec::new(),
            val_counts: None,
            image_size: (3, 32, 32),
            orientations: None,
            frequencies: None,
            noise_std: 0.25,
            seed: 0,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.into(),
                    message: format!("line {}: expected key = value", lineno + 1),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let perr = |message: String| Error::Parse {
                path: path.into(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let parse_list_usize = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| perr(format!("invalid integer {s:?}")))
                    })
                    .collect()
            };
            let parse_list_f32 = |v: &str| -> Result<Vec<f32>> {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| perr(format!("invalid float {s:?}")))
                    })
                    .collect()
            };
            match key {
                "counts" => spec.per_class_counts = parse_list_usize(value)?,
                "val_counts" => spec.val_counts = Some(parse_list_usize(value)?),
                "image_size" => {
                    let dims = parse_list_usize(value)?;
                    if dims.len() != 3 {
                        return Err(perr("image_size needs C,H,W".into()));
                    }
                    spec.image_size = (dims[0], dims[1], dims[2]);
                }
                "orientations" => spec.orientations = Some(parse_list_f32(value)?),
                "frequencies" => spec.frequencies = Some(parse_list_f32(value)?),
                "noise_std" => {
                    spec.noise_std = value
                        .parse()
                        .map_err(|_| perr(format!("invalid float {value:?}")))?
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| perr(format!("invalid seed {value:?}")))?
                }
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        spec.validate().map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    fn orientation(&self, class: usize) -> f32 {
        match &self.orientations {
            Some(o) => o[class % o.len()],
            None => std::f32::consts::PI * class as f32 / self.per_class_counts.len() as f32,
        }
    }

    fn frequency(&self, class: usize) -> f32 {
        match &self.frequencies {
            Some(f) => f[class % f.len()],
            None => 2.0 + 2.0 * class as f32,
        }
    }
}

/// Deterministic class motif: an oriented grating with a per-channel phase
/// offset, values inside [0.15, 0.85] before noise.
fn motif_pixel(spec: &SyntheticSpec, class: usize, ch: usize, y: usize, x: usize) -> f32 {
    let (_, h, w) = spec.image_size;
    let u = (x as f32 + 0.5) / w as f32;
    let v = (y as f32 + 0.5) / h as f32;
    let theta = spec.orientation(class);
    let freq = spec.frequency(class);
    let phase = 0.9 * ch as f32;
    let arg = std::f32::consts::TAU * freq * (u * theta.cos() + v * theta.sin()) + phase;
    0.5 + 0.35 * arg.sin()
}

fn generate_split(spec: &SyntheticSpec, counts: &[usize], seed: u64, split: Split) -> Result<Dataset> {
    let (c, h, w) = spec.image_size;
    let total: usize = counts.iter().sum();
    let mut images = Tensor::zeros(&[total, c, h, w]);
    let mut labels = Vec::with_capacity(total);
    let mut rng = Rng::new(seed);
    let data = images.data_mut();
    let mut idx = 0usize;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            labels.push(class);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let clean = motif_pixel(spec, class, ch, y, x);
                        let noisy = clean + spec.noise_std * rng.normal_f32();
                        data[((idx * c + ch) * h + y) * w + x] = noisy.clamp(0.0, 1.0);
                    }
                }
            }
            idx += 1;
        }
    }
    Ok(Dataset::from_parts(
        images,
        labels,
        counts.len(),
        split,
    ))
}

/// Generate train and validation splits. Both are drawn from the same class
/// motifs; the validation noise stream is seeded independently.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let val_counts: Vec<usize> = match &spec.val_counts {
        Some(v) => v.clone(),
        None => spec
            .per_class_counts
            .iter()
            .map(|&n| ((n as f64 / 4.0).round() as usize).max(1))
            .collect(),
    };
    let train = generate_split(
        spec,
        &spec.per_class_counts,
        derive_seed(spec.seed, tag("synthetic-train")),
        Split::Train,
    )?;
    let validation = generate_split(
        spec,
        &val_counts,
        derive_seed(spec.seed, tag("synthetic-validation")),
        Split::Validation,
    )?;
    Ok((train, validation))
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Uniform sample without replacement, deterministic per seed.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} outside [1, {}]",
            dataset.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let picks = rng.sample_without_replacement(dataset.len(), batch_size);
    Ok(gather(dataset, &picks))
}

/// Copy the given sample indices into a fresh batch tensor.
pub fn gather(dataset: &Dataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let (c, h, w) = dataset.image_shape();
    let sample_len = c * h * w;
    let mut images = Tensor::zeros(&[indices.len(), c, h, w]);
    let mut labels = Vec::with_capacity(indices.len());
    let src = dataset.images.data();
    let dst = images.data_mut();
    for (row, &i) in indices.iter().enumerate() {
        dst[row * sample_len..(row + 1) * sample_len]
            .copy_from_slice(&src[i * sample_len..(i + 1) * sample_len]);
        labels.push(dataset.labels[i]);
    }
    (images, labels)
}
