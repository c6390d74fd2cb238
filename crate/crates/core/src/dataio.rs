//! Synthetic small-object dataset generation, dataset directory I/O, and the
//! five-fold split protocol.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{derive_seed, BlobShapes, ModelConfig};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One image with its binary ground-truth mask.
pub struct Sample<S: Scalar> {
    pub id: String,
    /// `(C, H, W)`, values in `[0, 1]`.
    pub image: Tensor<S>,
    /// `(1, H, W)`, strictly 0/1.
    pub mask: Tensor<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn mask_bits(&self) -> Vec<u8> {
        self.mask.data().iter().map(|v| u8::from(*v > S::of(0.5))).collect()
    }
}

/// Generation recipe for the synthetic benchmark. Object areas are drawn so
/// that every object's pixel-count ratio lies inside `[ratio_min, ratio_max]`.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub noise: f64,
    pub shapes: BlobShapes,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        SyntheticSpec {
            height: cfg.input_height,
            width: cfg.input_width,
            channels: cfg.input_channels,
            objects_min: cfg.data_objects_min,
            objects_max: cfg.data_objects_max,
            ratio_min: cfg.data_ratio_min,
            ratio_max: cfg.data_ratio_max,
            noise: cfg.data_noise,
            shapes: cfg.data_shapes,
            seed: derive_seed(cfg.seed, "data"),
        }
    }

    fn validate(&self) -> Result<()> {
        let total = (self.height * self.width) as f64;
        if self.ratio_min <= 0.0 || self.ratio_max > 1.0 || self.ratio_min > self.ratio_max {
            return Err(Error::Config(format!(
                "bad area-ratio range ({}, {})",
                self.ratio_min, self.ratio_max
            )));
        }
        if self.ratio_min * total < 1.0 {
            return Err(Error::Config(format!(
                "minimum object area {} is below one pixel",
                self.ratio_min * total
            )));
        }
        if self.objects_min < 1 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "bad object count range ({}, {})",
                self.objects_min, self.objects_max
            )));
        }
        Ok(())
    }
}

/// Size regime of one object relative to the full image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    ExtremelySmall,
    Small,
    NotSmall,
}

/// Pixel-ratio classification: below 1% is extremely small, below 5% small.
pub fn classify_object_size(object_pixels: usize, total_pixels: usize) -> Result<SizeClass> {
    if object_pixels > total_pixels {
        return Err(Error::invalid(
            "classify_object_size",
            format!("object {object_pixels} larger than image {total_pixels}"),
        ));
    }
    let ratio = object_pixels as f64 / total_pixels as f64;
    Ok(if ratio < 0.01 {
        SizeClass::ExtremelySmall
    } else if ratio < 0.05 {
        SizeClass::Small
    } else {
        SizeClass::NotSmall
    })
}

/// Offsets of a blob with exactly `area` pixels: candidates sorted by
/// elliptical distance (then row-major), taking the closest `area`. The set
/// is 4-connected because every row's span contains column 0.
fn blob_offsets(area: usize, aspect: f64) -> Vec<(i64, i64)> {
    let r = (area as f64 / std::f64::consts::PI).sqrt();
    let (ry, rx) = (r / aspect.sqrt(), r * aspect.sqrt());
    // generous candidate window around the expected radius
    let span_y = (ry * 3.0).ceil() as i64 + 2;
    let span_x = (rx * 3.0).ceil() as i64 + 2;
    let mut candidates: Vec<((i64, i64), f64)> = Vec::new();
    for dy in -span_y..=span_y {
        for dx in -span_x..=span_x {
            let d = (dy as f64 / ry).powi(2) + (dx as f64 / rx).powi(2);
            candidates.push(((dy, dx), d));
        }
    }
    candidates.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then(a.0 .0.cmp(&b.0 .0))
            .then(a.0 .1.cmp(&b.0 .1))
    });
    candidates.truncate(area);
    candidates.into_iter().map(|(off, _)| off).collect()
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn generate_sample<S: Scalar>(spec: &SyntheticSpec, index: usize) -> Result<Sample<S>> {
    let (h, w) = (spec.height, spec.width);
    let total = h * w;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, &format!("sample{index}")));

    let area_min = (spec.ratio_min * total as f64).ceil() as usize;
    let area_max = ((spec.ratio_max * total as f64).floor() as usize).max(area_min);

    let mut mask = vec![0u8; total];
    // occupancy with a one-pixel halo so objects never touch, even diagonally
    let mut blocked = vec![false; total];
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut object_brightness = Vec::new();
    let mut object_id = vec![usize::MAX; total];

    for obj in 0..count {
        let area = rng.gen_range(area_min..=area_max);
        let aspect = match spec.shapes {
            BlobShapes::Disks => 1.0,
            BlobShapes::Ellipses => rng.gen_range(0.4..2.5),
            BlobShapes::Mixed => {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    rng.gen_range(0.4..2.5)
                }
            }
        };
        let offsets = blob_offsets(area, aspect);
        let mut placed = false;
        for _attempt in 0..1000 {
            let cy = rng.gen_range(0..h) as i64;
            let cx = rng.gen_range(0..w) as i64;
            let ok = offsets.iter().all(|(dy, dx)| {
                let (y, x) = (cy + dy, cx + dx);
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
                    && !blocked[y as usize * w + x as usize]
            });
            if !ok {
                continue;
            }
            for (dy, dx) in &offsets {
                let (y, x) = ((cy + dy) as usize, (cx + dx) as usize);
                mask[y * w + x] = 1;
                object_id[y * w + x] = obj;
                for by in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for bx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        blocked[by * w + bx] = true;
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place object {obj} in sample {index}; image too crowded"
            )));
        }
        object_brightness.push(rng.gen_range(0.70..0.95));
    }

    // background: base level plus a linear gradient scaled by the noise
    // amplitude, so a zero-noise spec yields a piecewise-constant image
    let base = rng.gen_range(0.15..0.35);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad_amp = 1.5 * spec.noise;
    let (gy, gx) = (theta.sin(), theta.cos());
    let diag = ((h * h + w * w) as f64).sqrt();

    let mut image = vec![S::zero(); spec.channels * total];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let gradient = grad_amp * ((gy * y as f64 + gx * x as f64) / diag - 0.5);
            let value = if mask[idx] == 1 {
                object_brightness[object_id[idx]]
            } else {
                base + gradient
            };
            for c in 0..spec.channels {
                let noisy = value + spec.noise * gaussian(&mut rng);
                image[c * total + idx] = S::of(noisy.clamp(0.0, 1.0));
            }
        }
    }

    Ok(Sample {
        id: format!("s{index:04}"),
        image: Tensor::from_vec(vec![spec.channels, h, w], image)?,
        mask: Tensor::from_vec(
            vec![1, h, w],
            mask.iter().map(|b| S::of(*b as f64)).collect(),
        )?,
    })
}

/// Deterministic generation: each sample draws from a stream derived from
/// `(spec.seed, index)`, so the dataset is a pure function of the spec.
pub fn generate_dataset<S: Scalar>(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample<S>>> {
    spec.validate()?;
    if count < 1 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    (0..count).map(|i| generate_sample(spec, i)).collect()
}

/// One cross-validation fold: disjoint train/val/test id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded k-fold protocol: one shuffle, k rotating test blocks partitioning
/// the ids as evenly as divisibility allows, `floor(n/10)` validation ids
/// from the remainder, everything else to train (7:1:2).
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if ids.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 ids for a split, got {}",
            ids.len()
        )));
    }
    if k < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "kfold"));
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let base = n / k;
    let extra = n % k;
    let mut blocks: Vec<Vec<String>> = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        blocks.push(shuffled[cursor..cursor + len].to_vec());
        cursor += len;
    }

    let val_len = n / 10;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test = blocks[f].clone();
        let rest: Vec<String> = (0..k)
            .filter(|b| *b != f)
            .flat_map(|b| blocks[b].iter().cloned())
            .collect();
        let val = rest[..val_len].to_vec();
        let train = rest[val_len..].to_vec();
        folds.push(FoldSplit { fold: f, train, val, test });
    }
    Ok(folds)
}

/// Directory layout: `images/<id>.pgm` (or `.ppm`), `masks/<id>.pbm`,
/// `folds.csv` with `id,fold,role` rows.
pub struct DatasetDir;

fn quantize<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Interleaves `(C, H, W)` planes into per-pixel channel order for PPM.
fn interleave(planes: &[u8], channels: usize, pixels: usize) -> Vec<u8> {
    let mut out = vec![0u8; planes.len()];
    for p in 0..pixels {
        for c in 0..channels {
            out[p * channels + c] = planes[c * pixels + p];
        }
    }
    out
}

fn deinterleave(packed: &[u8], channels: usize, pixels: usize) -> Vec<u8> {
    let mut out = vec![0u8; packed.len()];
    for p in 0..pixels {
        for c in 0..channels {
            out[c * pixels + p] = packed[p * channels + c];
        }
    }
    out
}

pub fn save_sample<S: Scalar>(dir: &Path, sample: &Sample<S>) -> Result<()> {
    let shape = sample.image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    {
        let mask_shape = sample.mask.shape();
        if mask_shape.len() != 3 || mask_shape[1] != h || mask_shape[2] != w {
            return Err(Error::shape(
                "save_sample",
                format!("mask {mask_shape:?} does not match image {shape:?}"),
            ));
        }
    }
    let quantized = quantize(&sample.image);
    let image_bytes = match c {
        1 => netpbm::encode_pgm(w, h, &quantized)?,
        3 => netpbm::encode_ppm(w, h, &interleave(&quantized, 3, h * w))?,
        other => {
            return Err(Error::invalid(
                "save_sample",
                format!("{other}-channel images are not supported"),
            ))
        }
    };
    let ext = if c == 1 { "pgm" } else { "ppm" };
    netpbm::write_file(&dir.join("images").join(format!("{}.{ext}", sample.id)), &image_bytes)?;

    let bits: Vec<u8> = sample
        .mask
        .data()
        .iter()
        .map(|v| {
            let x = v.as_f64();
            if x == 0.0 {
                Ok(0u8)
            } else if x == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::invalid(
                    "save_sample",
                    format!("mask value {x} is not 0 or 1"),
                ))
            }
        })
        .collect::<Result<_>>()?;
    let mask_bytes = netpbm::encode_pbm(w, h, &bits)?;
    netpbm::write_file(&dir.join("masks").join(format!("{}.pbm", sample.id)), &mask_bytes)?;
    Ok(())
}

pub fn load_sample<S: Scalar>(dir: &Path, id: &str) -> Result<Sample<S>> {
    let images = dir.join("images");
    let pgm = images.join(format!("{id}.pgm"));
    let ppm = images.join(format!("{id}.ppm"));
    let image_path = if pgm.exists() { pgm } else { ppm };
    let decoded = netpbm::decode_image(&netpbm::read_file(&image_path)?)?;
    let (w, h, c) = (decoded.width, decoded.height, decoded.channels);
    let planar = if c == 1 {
        decoded.pixels
    } else {
        deinterleave(&decoded.pixels, c, w * h)
    };
    let image: Vec<S> = planar.iter().map(|b| S::of(*b as f64 / 255.0)).collect();

    let (mw, mh, bits) = netpbm::decode_pbm(&netpbm::read_file(
        &dir.join("masks").join(format!("{id}.pbm")),
    )?)?;
    if (mw, mh) != (w, h) {
        return Err(Error::shape(
            "load_sample",
            format!("mask {mw}x{mh} does not match image {w}x{h}"),
        ));
    }
    Ok(Sample {
        id: id.to_string(),
        image: Tensor::from_vec(vec![c, h, w], image)?,
        mask: Tensor::from_vec(vec![1, h, w], bits.iter().map(|b| S::of(*b as f64)).collect())?,
    })
}

pub fn save_dataset<S: Scalar>(dir: &Path, samples: &[Sample<S>], folds: &[FoldSplit]) -> Result<()> {
    for sample in samples {
        save_sample(dir, sample)?;
    }
    let mut csv = String::from("id,fold,role\n");
    for fold in folds {
        for (role, ids) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
            for id in ids {
                csv.push_str(&format!("{id},{},{role}\n", fold.fold));
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("folds.csv"), csv)?;
    Ok(())
}

pub fn load_fold_splits(dir: &Path) -> Result<Vec<FoldSplit>> {
    let path = dir.join("folds.csv");
    let text = std::fs::read_to_string(&path)?;
    let mut folds: Vec<FoldSplit> = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: expected id,fold,role", lineno + 1),
            });
        }
        let fold_idx: usize = parts[1].parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: bad fold index", lineno + 1),
        })?;
        while folds.len() <= fold_idx {
            folds.push(FoldSplit {
                fold: folds.len(),
                train: vec![],
                val: vec![],
                test: vec![],
            });
        }
        let split = &mut folds[fold_idx];
        match parts[2] {
            "train" => split.train.push(parts[0].to_string()),
            "val" => split.val.push(parts[0].to_string()),
            "test" => split.test.push(parts[0].to_string()),
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    detail: format!("line {}: unknown role `{other}`", lineno + 1),
                })
            }
        }
    }
    Ok(folds)
}

/// Loads every sample listed in any fold role, keyed by id.
pub fn load_samples_by_id<S: Scalar>(dir: &Path, ids: &[String]) -> Result<Vec<Sample<S>>> {
    ids.iter().map(|id| load_sample(dir, id)).collect()
}
