//! Dataset sources: seeded synthetic generators, IDX files and CSV files.
//! Every loader returns train/test splits normalized per channel with the
//! train split's statistics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ReplError, Result};
use crate::tensor::Tensor;
use crate::trainer::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Gaussian class templates plus pixel noise.
    #[default]
    Blobs,
    /// Class-specific stripe or checker textures at random phase.
    Textures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "four")]
        classes: usize,
        #[serde(default = "default_train")]
        train: usize,
        #[serde(default = "default_test")]
        test: usize,
        /// `[channels, height, width]`.
        shape: [usize; 3],
        #[serde(default)]
        pattern: Pattern,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "ten")]
        classes: usize,
        /// Keep only the first `limit` samples of each split.
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        shape: [usize; 3],
        classes: usize,
    },
}

fn four() -> usize {
    4
}

fn ten() -> usize {
    10
}

fn default_train() -> usize {
    2000
}

fn default_test() -> usize {
    500
}

fn default_noise() -> f64 {
    1.0
}

fn default_data_seed() -> u64 {
    7
}

impl DataConfig {
    /// Sample shape when declared in the config, and the class count.
    pub fn shape_and_classes(&self) -> (Option<[usize; 3]>, usize) {
        match self {
            DataConfig::Synthetic { shape, classes, .. } | DataConfig::Csv { shape, classes, .. } => (Some(*shape), *classes),
            DataConfig::Idx { classes, .. } => (None, *classes),
        }
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataConfig::Synthetic { .. } => {}
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataConfig::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
        }
    }
}

/// Raw train/test splits, then per-channel normalization from train.
pub fn load_dataset(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg {
        DataConfig::Synthetic {
            classes,
            train,
            test,
            shape,
            pattern,
            noise,
            seed,
        } => synthetic(*classes, *train, *test, *shape, *pattern, *noise, *seed)?,
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            limit,
        } => (
            read_idx_pair(train_images, train_labels, *classes, *limit)?,
            read_idx_pair(test_images, test_labels, *classes, *limit)?,
        ),
        DataConfig::Csv {
            train,
            test,
            shape,
            classes,
        } => (read_csv(train, *shape, *classes)?, read_csv(test, *shape, *classes)?),
    };
    normalize(train, test)
}

/// Zero-mean unit-variance per channel using `train` statistics.
pub fn normalize(mut train: Dataset, mut test: Dataset) -> Result<(Dataset, Dataset)> {
    if train.is_empty() {
        return Err(ReplError::Dataset("train split is empty".into()));
    }
    let [c, h, w] = train.sample_shape();
    if test.sample_shape() != [c, h, w] {
        return Err(ReplError::Dataset(format!(
            "train samples {:?} and test samples {:?} differ in shape",
            [c, h, w],
            test.sample_shape()
        )));
    }
    let hw = h * w;
    let n = train.len();
    let mut stats = vec![(0.0, 1.0); c];
    for (ch, st) in stats.iter_mut().enumerate() {
        let vals = || (0..n).flat_map(|i| train.x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied());
        let count = (n * hw) as f64;
        let mean = vals().sum::<f64>() / count;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        *st = (mean, if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    for d in [&mut train, &mut test] {
        for (i, v) in d.x.data_mut().iter_mut().enumerate() {
            let (m, s) = stats[(i / hw) % c];
            *v = (*v - m) / s;
        }
    }
    Ok((train, test))
}

fn synthetic(
    classes: usize,
    n_train: usize,
    n_test: usize,
    shape: [usize; 3],
    pattern: Pattern,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 || shape.contains(&0) {
        return Err(ReplError::Dataset(format!("synthetic data needs ≥ 2 classes and a non-empty shape, got {classes}, {shape:?}")));
    }
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..per).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut x = Vec::with_capacity(n * per);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..classes);
            match pattern {
                Pattern::Blobs => {
                    for &t in &templates[c] {
                        let e: f64 = StandardNormal.sample(rng);
                        x.push(t + noise * e);
                    }
                }
                Pattern::Textures => x.extend(texture(c, shape, noise, rng)),
            }
            y.push(c);
        }
        Dataset::new(Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], x), y, classes)
    };
    let train = draw(n_train, &mut rng)?;
    let test = draw(n_test, &mut rng)?;
    Ok((train, test))
}

/// Class `c` picks orientation (`c % 4`: rows, columns, diagonal, checker)
/// and period (`2 + c / 4`); phase is random per sample.
fn texture(c: usize, [ch, h, w]: [usize; 3], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = 2 + c / 4;
    let phase = rng.random_range(0..period);
    let mut out = Vec::with_capacity(ch * h * w);
    for _ in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let k = match c % 4 {
                    0 => i,
                    1 => j,
                    2 => i + j,
                    _ => i / period + j / period,
                };
                let on = if c % 4 == 3 { k % 2 == 0 } else { (k + phase) % period == 0 };
                let e: f64 = StandardNormal.sample(rng);
                out.push(if on { 1.0 } else { -1.0 } + noise * e);
            }
        }
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ReplError::io(path, e))
}

/// `(dims, payload)` of an unsigned-byte IDX file.
pub fn parse_idx(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |d: String| ReplError::Dataset(format!("{name}: {d}"));
    if bytes.len() < 4 {
        return Err(bad("file shorter than the IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != 0x08 {
        return Err(bad(format!("unsupported element type 0x{:02x}; only unsigned bytes", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(bad(format!("truncated header for {ndim} dimensions")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header != count {
        return Err(bad(format!("payload holds {} bytes, dims {dims:?} need {count}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Images `[N, H, W]` or `[N, C, H, W]` scaled to [0, 1] plus `[N]` labels.
pub fn read_idx_pair(images: &Path, labels: &Path, classes: usize, limit: Option<usize>) -> Result<Dataset> {
    let (dims, px) = parse_idx(&read(images)?, &images.display().to_string())?;
    let (ldims, lab) = parse_idx(&read(labels)?, &labels.display().to_string())?;
    let shape = match dims[..] {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(ReplError::Dataset(format!("image file has dims {dims:?}"))),
    };
    if ldims.len() != 1 || ldims[0] != shape[0] {
        return Err(ReplError::Dataset(format!("{} images but label dims {ldims:?}", shape[0])));
    }
    let n = limit.map_or(shape[0], |l| l.min(shape[0]));
    let per = shape[1] * shape[2] * shape[3];
    let x = px[..n * per].iter().map(|&b| b as f64 / 255.0).collect();
    let y = lab[..n].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::from_vec(&[n, shape[1], shape[2], shape[3]], x), y, classes)
}

/// Numeric rows with a trailing integer label; `#` starts a comment line.
pub fn parse_csv(text: &str, shape: [usize; 3], classes: usize, name: &str) -> Result<Dataset> {
    let per: usize = shape.iter().product();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != per + 1 {
            return Err(ReplError::Dataset(format!(
                "{name}:{}: expected {} values and a label, found {} cells",
                ln + 1,
                per,
                cells.len()
            )));
        }
        for c in &cells[..per] {
            x.push(
                c.parse::<f64>()
                    .map_err(|e| ReplError::Dataset(format!("{name}:{}: `{c}`: {e}", ln + 1)))?,
            );
        }
        let l = cells[per];
        y.push(
            l.parse::<usize>()
                .map_err(|e| ReplError::Dataset(format!("{name}:{}: label `{l}`: {e}", ln + 1)))?,
        );
    }
    Dataset::new(Tensor::from_vec(&[y.len(), shape[0], shape[1], shape[2]], x), y, classes)
}

pub fn read_csv(path: &Path, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| ReplError::io(path, e))?;
    parse_csv(&text, shape, classes, &path.display().to_string())
}
