//! Image augmentation.
//!
//! Stages run in a fixed order: geometric (resize, stretch, rotation,
//! translation), noise (additive Gaussian, salt and pepper), border crop,
//! contrast stretch. Each enabled stage fires with probability
//! `probability`; the result is clamped to `[0, 1]`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::Rng;

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("range {s:?} must be lo,hi")))?;
        let lo: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad range {s:?}")))?;
        let hi: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad range {s:?}")))?;
        if !(lo <= hi) {
            return Err(Error::Config(format!("range {s:?} has lo > hi")));
        }
        Ok(Range { lo, hi })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub probability: f64,
    pub resize: Option<Range>,
    pub stretch: Option<Range>,
    /// Degrees.
    pub rotation: Option<Range>,
    /// Pixels, both axes.
    pub translation: Option<Range>,
    /// Standard deviation.
    pub gaussian_noise: Option<Range>,
    /// Per-pixel flip probability.
    pub salt_pepper: Option<Range>,
    /// Pixels removed from each border.
    pub border_crop: Option<Range>,
    pub contrast: bool,
}

const KEYS: [&str; 7] = [
    "resize",
    "stretch",
    "rotation",
    "translation",
    "gaussian_noise",
    "salt_pepper",
    "border_crop",
];

impl AugmentationConfig {
    /// Every stage disabled.
    pub fn off() -> Self {
        AugmentationConfig {
            probability: 0.5,
            resize: None,
            stretch: None,
            rotation: None,
            translation: None,
            gaussian_noise: None,
            salt_pepper: None,
            border_crop: None,
            contrast: false,
        }
    }

    pub fn standard() -> Self {
        AugmentationConfig {
            probability: 0.5,
            resize: Some(Range::new(0.8, 1.2)),
            stretch: Some(Range::new(0.85, 1.15)),
            rotation: Some(Range::new(-3.0, 3.0)),
            translation: Some(Range::new(-2.0, 2.0)),
            gaussian_noise: Some(Range::new(0.0, 0.05)),
            salt_pepper: Some(Range::new(0.0, 0.01)),
            border_crop: Some(Range::new(0.0, 2.0)),
            contrast: true,
        }
    }

    pub fn is_off(&self) -> bool {
        self.slots().iter().all(|s| s.is_none()) && !self.contrast
    }

    fn slots(&self) -> [&Option<Range>; 7] {
        [
            &self.resize,
            &self.stretch,
            &self.rotation,
            &self.translation,
            &self.gaussian_noise,
            &self.salt_pepper,
            &self.border_crop,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Option<Range>; 7] {
        [
            &mut self.resize,
            &mut self.stretch,
            &mut self.rotation,
            &mut self.translation,
            &mut self.gaussian_noise,
            &mut self.salt_pepper,
            &mut self.border_crop,
        ]
    }

    /// Reads `[section]` keys; a stage is `off` or `lo,hi`.
    pub fn from_config(cfg: &Config, section: &str) -> Result<Self> {
        let mut a = match cfg.get(section, "augment").unwrap_or("off") {
            "off" | "false" => Self::off(),
            "standard" | "true" => Self::standard(),
            other => {
                return Err(Error::Config(format!(
                    "{section}.augment {other:?}: expected off | standard"
                )))
            }
        };
        for (key, slot) in KEYS.iter().zip(a.slots_mut()) {
            if let Some(v) = cfg.get(section, &format!("aug_{key}")) {
                *slot = if v == "off" {
                    None
                } else {
                    Some(Range::parse(v)?)
                };
            }
        }
        a.probability = cfg.get_or(section, "aug_probability", a.probability)?;
        a.contrast = cfg.get_or(section, "aug_contrast", a.contrast)?;
        if !(0.0..=1.0).contains(&a.probability) {
            return Err(Error::Config("aug_probability must lie in [0, 1]".into()));
        }
        if let Some(r) = a.rotation {
            if r.lo < -45.0 || r.hi > 45.0 {
                return Err(Error::Config("rotation range must lie within ±45°".into()));
            }
        }
        Ok(a)
    }

    pub fn write_to(&self, cfg: &mut Config, section: &str) {
        cfg.set(section, "augment", "off");
        for (key, slot) in KEYS.iter().zip(self.slots()) {
            let v = slot.map_or("off".to_string(), |r| format!("{},{}", r.lo, r.hi));
            cfg.set(section, &format!("aug_{key}"), v);
        }
        cfg.set(section, "aug_probability", self.probability.to_string());
        cfg.set(section, "aug_contrast", self.contrast.to_string());
    }
}

/// Lightest value, used to fill uncovered pixels.
fn background(img: &GrayImage) -> f32 {
    img.data().iter().copied().fold(0.0, f32::max)
}

pub fn rotate(img: &GrayImage, degrees: f64, fill: f32) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = GrayImage::filled(w, h, fill);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = c * dx + s * dy + cx - 0.5;
            let sy = -s * dx + c * dy + cy - 0.5;
            out.set(x, y, sample_bilinear(img, sx, sy, fill));
        }
    }
    out
}

fn sample_bilinear(img: &GrayImage, x: f64, y: f64, fill: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let p = |dx, dy| img.get_or(x0 + dx, y0 + dy, fill);
    let top = p(0, 0) * (1.0 - fx) + p(1, 0) * fx;
    let bot = p(0, 1) * (1.0 - fx) + p(1, 1) * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn translate(img: &GrayImage, dx: isize, dy: isize, fill: f32) -> GrayImage {
    let mut out = GrayImage::filled(img.width(), img.height(), fill);
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set(x, y, img.get_or(x as isize - dx, y as isize - dy, fill));
        }
    }
    out
}

/// Min–max stretch to `[0, 1]`; constant images are returned unchanged.
pub fn contrast_stretch(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if !(hi > lo) {
        return img.clone();
    }
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - lo) / (hi - lo));
    out
}

/// Removes `[left, right, top, bottom]` pixels, keeping at least 8×8.
pub fn crop(img: &GrayImage, [l, r, t, b]: [usize; 4]) -> GrayImage {
    let min = 8;
    let keep_w = img.width().saturating_sub(l + r).max(min.min(img.width()));
    let keep_h = img
        .height()
        .saturating_sub(t + b)
        .max(min.min(img.height()));
    let l = l.min(img.width() - keep_w);
    let t = t.min(img.height() - keep_h);
    let mut out = GrayImage::filled(keep_w, keep_h, 0.0);
    for y in 0..keep_h {
        for x in 0..keep_w {
            out.set(x, y, img.get(x + l, y + t));
        }
    }
    out
}

pub fn augment(img: &GrayImage, cfg: &AugmentationConfig, rng: &mut Rng) -> GrayImage {
    if cfg.is_off() {
        return img.clone();
    }
    let fire = |rng: &mut Rng, stage: &Option<Range>| -> Option<f64> {
        let r = (*stage)?;
        rng.random_bool(cfg.probability).then(|| r.sample(rng))
    };
    let fill = background(img);
    let mut out = img.clone();
    if let Some(s) = fire(rng, &cfg.resize) {
        let w = ((out.width() as f64 * s).round() as usize).max(8);
        let h = ((out.height() as f64 * s).round() as usize).max(8);
        out = out.resize(w, h);
    }
    if let Some(s) = fire(rng, &cfg.stretch) {
        let w = ((out.width() as f64 * s).round() as usize).max(8);
        out = out.resize(w, out.height());
    }
    if let Some(deg) = fire(rng, &cfg.rotation) {
        out = rotate(&out, deg, fill);
    }
    if let Some(t) = fire(rng, &cfg.translation) {
        let dy = Range::new(-t.abs(), t.abs()).sample(rng);
        out = translate(&out, t.round() as isize, dy.round() as isize, fill);
    }
    if let Some(std) = fire(rng, &cfg.gaussian_noise) {
        if std > 0.0 {
            let n = Normal::new(0.0, std).expect("positive std");
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v += n.sample(rng) as f32);
        }
    }
    if let Some(p) = fire(rng, &cfg.salt_pepper) {
        for v in out.data_mut() {
            if rng.random_bool(p) {
                *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
    }
    if let Some(m) = fire(rng, &cfg.border_crop) {
        let r = Range::new(0.0, m);
        let sides = [(); 4].map(|_| r.sample(rng).round() as usize);
        out = crop(&out, sides);
    }
    if cfg.contrast && rng.random_bool(cfg.probability) {
        out = contrast_stretch(&out);
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}
