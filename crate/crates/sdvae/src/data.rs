//! Dataset handling: IDX files, binarization, the synthetic corpus, and
//! CSV exporters for latents and reconstructions.

use crate::model::{encode_latents, reconstruct, LatentMask, ModelError, ModelParams};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad IDX magic at byte {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        expected: u32,
        found: u32,
        offset: usize,
    },
    #[error("truncated IDX file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("data format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub dim_x: usize,
}

impl Dataset {
    pub fn rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim_x);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim_x..(i + 1) * self.dim_x]);
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

fn read_u32(bytes: &[u8], off: usize) -> Result<u32, DataError> {
    if off + 4 > bytes.len() {
        return Err(DataError::Truncated {
            offset: off,
            needed: 4,
        });
    }
    Ok(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()))
}

/// Big-endian IDX image file: magic 2051, then n, rows, cols, then
/// n*rows*cols u8 pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize), DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
            offset: 0,
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let need = n * h * w;
    if bytes.len() < 16 + need {
        return Err(DataError::Truncated {
            offset: 16,
            needed: need,
        });
    }
    if bytes.len() > 16 + need {
        return Err(DataError::Format(format!(
            "{} trailing bytes after pixel data",
            bytes.len() - 16 - need
        )));
    }
    Ok((bytes[16..].to_vec(), n, h, w))
}

pub fn serialize_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Big-endian IDX label file: magic 2049, then n, then n u8 labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
            offset: 0,
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated {
            offset: 8,
            needed: n,
        });
    }
    if bytes.len() > 8 + n {
        return Err(DataError::Format(format!(
            "{} trailing bytes after label data",
            bytes.len() - 8 - n
        )));
    }
    Ok(bytes[8..].to_vec())
}

pub fn serialize_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DataError> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// Deterministic binarization: pixel/255 >= threshold.
pub fn binarize(pixels: &[u8], threshold: f64) -> Vec<f64> {
    pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 >= threshold) as u8 as f64)
        .collect()
}

/// Loads an image/label IDX pair into a binarized dataset.
pub fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    threshold: f64,
) -> Result<Dataset, DataError> {
    let (pixels, n, h, w) = load_idx_images(images)?;
    let lab = load_idx_labels(labels)?;
    if lab.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lab.len(),
        });
    }
    Ok(Dataset {
        x: binarize(&pixels, threshold),
        labels: lab.iter().map(|&l| l as usize).collect(),
        n,
        dim_x: h * w,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub corruption: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            k: 4,
            h: 8,
            w: 8,
            corruption: 0.1,
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// K random binary templates (pairwise Hamming distance >= 8 by rejection),
/// then balanced class-cycled samples with independent pixel flips.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Vec<Vec<f64>>), DataError>
{
    let dim = spec.h * spec.w;
    if dim < 8 * spec.k.min(2) {
        return Err(DataError::Format(format!(
            "{}x{} images too small for {} separated templates",
            spec.h, spec.w, spec.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut templates: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while templates.len() < spec.k {
        let cand: Vec<f64> = (0..dim).map(|_| (rng.gen::<f64>() < 0.5) as u8 as f64).collect();
        if templates.iter().all(|t| hamming(t, &cand) >= 8) {
            templates.push(cand);
        }
        attempts += 1;
        if attempts > 10_000 {
            return Err(DataError::Format(
                "could not draw separated templates".into(),
            ));
        }
    }
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let mut x = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.k;
            labels.push(c);
            for &p in &templates[c] {
                let flip = rng.gen::<f64>() < spec.corruption;
                x.push(if flip { 1.0 - p } else { p });
            }
        }
        Dataset {
            x,
            labels,
            n,
            dim_x: dim,
        }
    };
    let train = draw(spec.n_train, &mut rng);
    let test = draw(spec.n_test, &mut rng);
    Ok((train, test, templates))
}

/// CSV with one row per example: label, v_probs, u mean.
pub fn export_latents(path: &Path, model: &ModelParams, ds: &Dataset) -> Result<(), DataError> {
    let (v, u) = encode_latents(model, &ds.x, ds.n)?;
    let k = model.arch.k;
    let du = model.arch.dim_u;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "label")?;
    for j in 0..k {
        write!(f, ",v_{j}")?;
    }
    for j in 0..du {
        write!(f, ",u_{j}")?;
    }
    writeln!(f)?;
    for i in 0..ds.n {
        write!(f, "{}", ds.labels[i])?;
        for j in 0..k {
            write!(f, ",{:.17e}", v[i * k + j])?;
        }
        for j in 0..du {
            write!(f, ",{:.17e}", u[i * du + j])?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// CSV with one row per example: label, reconstruction log-likelihood,
/// pixel means. The mask argument zeroes the chosen latent before decoding.
pub fn export_reconstructions(
    path: &Path,
    model: &ModelParams,
    ds: &Dataset,
    mask: LatentMask,
) -> Result<(), DataError> {
    let (means, re) = reconstruct(model, &ds.x, ds.n, mask)?;
    let d = model.arch.dim_x;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "label,re")?;
    for j in 0..d {
        write!(f, ",m_{j}")?;
    }
    writeln!(f)?;
    for i in 0..ds.n {
        write!(f, "{},{:.17e}", ds.labels[i], re[i])?;
        for j in 0..d {
            write!(f, ",{:.17e}", means[i * d + j])?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Mean masked reconstruction log-likelihood over a dataset; used to check
/// that zeroing u hurts reconstruction more than zeroing v.
pub fn masked_re_mean(model: &ModelParams, ds: &Dataset, mask: LatentMask) -> Result<f64, DataError> {
    let (_, re) = reconstruct(model, &ds.x, ds.n, mask)?;
    Ok(re.iter().sum::<f64>() / ds.n as f64)
}
