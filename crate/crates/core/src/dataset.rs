//! Dataset directories and batch assembly.
//!
//! Images are resized to the model height preserving aspect, mirrored for
//! right-to-left scripts so that time runs in reading order, converted to
//! ink intensity (`1 − gray`, background 0) and right-padded with zeros to
//! a common width.

use std::path::{Path, PathBuf};

use crate::charset::CharSet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::ModelConfig;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub image: GrayImage,
    pub transcript: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub charset: CharSet,
    /// Reading order of the script.
    pub rtl: bool,
}

/// Reads `labels.tsv`, `charset.txt` and (optionally) `meta.conf` from
/// `dir`, decoding every image and validating every row.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let charset = CharSet::load(&dir.join("charset.txt"))?;
    let labels_path = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let meta_path = dir.join("meta.conf");
    let rtl = if meta_path.exists() {
        match Config::load(&meta_path)?
            .get("", "direction")
            .unwrap_or("ltr")
        {
            "rtl" => true,
            "ltr" => false,
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown direction {other:?}",
                    meta_path.display()
                )))
            }
        }
    } else {
        false
    };
    let mut samples = Vec::new();
    for (n, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let row = n + 1;
        let (rel, transcript) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{} row {row}: expected path<TAB>transcript",
                labels_path.display()
            ))
        })?;
        if let Some(c) = transcript.chars().find(|&c| charset.index_of(c).is_none()) {
            return Err(Error::Data(format!(
                "{} row {row}: character {c:?} (U+{:04X}) is not in charset.txt",
                labels_path.display(),
                c as u32
            )));
        }
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "{} row {row}: image {} does not exist",
                labels_path.display(),
                path.display()
            )));
        }
        let image = GrayImage::load_png(&path)?;
        if image.width() < MIN_SIDE || image.height() < MIN_SIDE {
            return Err(Error::Data(format!(
                "{} row {row}: image {} is {}x{}, below the {MIN_SIDE}x{MIN_SIDE} minimum",
                labels_path.display(),
                path.display(),
                image.width(),
                image.height()
            )));
        }
        samples.push(Sample {
            path,
            image,
            transcript: transcript.to_string(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no samples",
            labels_path.display()
        )));
    }
    Ok(Dataset {
        samples,
        charset,
        rtl,
    })
}

/// A model-ready line: ink values `[height, width]` and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub ink: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub text: String,
}

pub fn prepare_image(img: &GrayImage, height: usize, rtl: bool) -> (Vec<f32>, usize) {
    let r = if img.height() == height {
        img.clone()
    } else {
        img.resize_to_height(height)
    };
    let w = r.width();
    let mut ink = Vec::with_capacity(w * height);
    for y in 0..height {
        for x in 0..w {
            let sx = if rtl { w - 1 - x } else { x };
            ink.push(1.0 - r.get(sx, y));
        }
    }
    (ink, w)
}

pub fn prepare(sample: &Sample, charset: &CharSet, height: usize, rtl: bool) -> Result<Prepared> {
    let (ink, width) = prepare_image(&sample.image, height, rtl);
    Ok(Prepared {
        ink,
        width,
        height,
        labels: charset.encode(&sample.transcript)?,
        text: sample.transcript.clone(),
    })
}

pub fn prepare_all(ds: &Dataset, height: usize) -> Result<Vec<Prepared>> {
    ds.samples
        .iter()
        .map(|s| prepare(s, &ds.charset, height, ds.rtl))
        .collect()
}

/// Zero-padded images `[N,1,H,W]` with per-sample frame counts.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub frames: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

pub fn assemble_batch<T: Real>(items: &[&Prepared], model: &ModelConfig) -> Result<Batch<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?;
    let h = first.height;
    if items.iter().any(|p| p.height != h) {
        return Err(Error::dim("batch items differ in height"));
    }
    let w = model.padded_width(items.iter().map(|p| p.width).max().unwrap_or(1));
    let mut data = vec![T::zero(); items.len() * h * w];
    for (n, p) in items.iter().enumerate() {
        for y in 0..h {
            let dst = &mut data[(n * h + y) * w..(n * h + y) * w + p.width];
            for (d, &s) in dst.iter_mut().zip(&p.ink[y * p.width..(y + 1) * p.width]) {
                *d = T::lit(s as f64);
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(&[items.len(), 1, h, w], data)?,
        frames: items
            .iter()
            .map(|p| model.frames_for_width(p.width))
            .collect(),
        targets: items.iter().map(|p| p.labels.clone()).collect(),
    })
}
