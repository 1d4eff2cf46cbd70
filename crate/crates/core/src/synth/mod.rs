//! Synthetic labelled line images.
//!
//! A dataset directory holds `images/{index:06}.png` (8-bit grayscale),
//! `labels.tsv` (`relative path<TAB>transcript`), `charset.txt` (one
//! character per line, order = class index) and `meta.conf`, the effective
//! configuration. Sample `i` is produced from its own seed derived from the
//! root seed and `i`, so output bytes depend only on `(seed, config)`.

pub mod atlas;
pub mod augment;
pub mod render;
pub mod text;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

pub use atlas::{GlyphAtlas, GlyphBitmap, GlyphSpec, Placement, Position};
pub use augment::{augment, AugmentationConfig, Range};
pub use render::{layout, render_line, LineSpec};
pub use text::{procedural_vocab, sample_text, TextSampler, VocabGroup};

use crate::charset::CharSet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng};

/// Stream indices reserved below the per-sample ones.
const VOCAB_STREAM: u64 = u64::MAX;
const COVERAGE_STREAM: u64 = u64::MAX - 1;
const AUGMENT_STREAM: u64 = u64::MAX - 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub vocab_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Optional word list, one word per line; replaces the procedural vocabulary.
    pub vocab_file: Option<String>,
    /// Sampling weight of the main vocabulary against `extra_vocab`.
    pub vocab_weight: f64,
    /// Further word lists (e.g. numerals) as `(path, weight)`.
    pub extra_vocab: Vec<(String, f64)>,
    pub overlap: Range,
    /// Gray levels (0–255) for ink and background.
    pub ink: Range,
    pub background: Range,
    pub size_scale: Range,
    pub height: usize,
    pub coverage: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_words: 1,
            max_words: 3,
            vocab_size: 200,
            min_word_len: 2,
            max_word_len: 4,
            vocab_file: None,
            vocab_weight: 1.0,
            extra_vocab: Vec::new(),
            overlap: Range::new(0.0, 0.3),
            ink: Range::new(0.0, 40.0),
            background: Range::new(215.0, 255.0),
            size_scale: Range::new(1.0, 1.0),
            height: atlas::EM,
            coverage: true,
            augmentation: AugmentationConfig::off(),
        }
    }
}

/// `path:weight,path:weight`.
fn vocab_list_key(cfg: &Config) -> Result<Vec<(String, f64)>> {
    let Some(s) = cfg.get("synth", "extra_vocab") else {
        return Ok(Vec::new());
    };
    s.split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|e| {
            let (path, w) = e.rsplit_once(':').ok_or_else(|| {
                Error::Config(format!("synth.extra_vocab entry {e:?} must be path:weight"))
            })?;
            let w = w
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("synth.extra_vocab: bad weight in {e:?}")))?;
            Ok((path.trim().to_string(), w))
        })
        .collect()
}

fn range_key(cfg: &Config, key: &str, default: Range) -> Result<Range> {
    match cfg.get("synth", key) {
        None => Ok(default),
        Some(s) => {
            let (a, b) = s
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("synth.{key} must be lo,hi")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("synth.{key}: bad number {v:?}")))
            };
            let r = Range::new(parse(a)?, parse(b)?);
            if r.lo > r.hi {
                return Err(Error::Config(format!("synth.{key}: lo > hi")));
            }
            Ok(r)
        }
    }
}

impl SynthConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = SynthConfig::default();
        let c = SynthConfig {
            min_words: cfg.get_or("synth", "min_words", d.min_words)?,
            max_words: cfg.get_or("synth", "max_words", d.max_words)?,
            vocab_size: cfg.get_or("synth", "vocab_size", d.vocab_size)?,
            min_word_len: cfg.get_or("synth", "min_word_len", d.min_word_len)?,
            max_word_len: cfg.get_or("synth", "max_word_len", d.max_word_len)?,
            vocab_file: cfg.get("synth", "vocab_file").map(str::to_string),
            vocab_weight: cfg.get_or("synth", "vocab_weight", d.vocab_weight)?,
            extra_vocab: vocab_list_key(cfg)?,
            overlap: range_key(cfg, "overlap", d.overlap)?,
            ink: range_key(cfg, "ink", d.ink)?,
            background: range_key(cfg, "background", d.background)?,
            size_scale: range_key(cfg, "size_scale", d.size_scale)?,
            height: cfg.get_or("synth", "height", d.height)?,
            coverage: cfg.get_or("synth", "coverage", d.coverage)?,
            augmentation: AugmentationConfig::from_config(cfg, "synth")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, cfg: &mut Config) {
        let r = |r: Range| format!("{},{}", r.lo, r.hi);
        cfg.set("synth", "min_words", self.min_words.to_string());
        cfg.set("synth", "max_words", self.max_words.to_string());
        cfg.set("synth", "vocab_size", self.vocab_size.to_string());
        cfg.set("synth", "min_word_len", self.min_word_len.to_string());
        cfg.set("synth", "max_word_len", self.max_word_len.to_string());
        if let Some(f) = &self.vocab_file {
            cfg.set("synth", "vocab_file", f.clone());
        }
        if !self.extra_vocab.is_empty() {
            let list: Vec<String> = self
                .extra_vocab
                .iter()
                .map(|(p, w)| format!("{p}:{w}"))
                .collect();
            cfg.set("synth", "vocab_weight", self.vocab_weight.to_string());
            cfg.set("synth", "extra_vocab", list.join(","));
        }
        cfg.set("synth", "overlap", r(self.overlap));
        cfg.set("synth", "ink", r(self.ink));
        cfg.set("synth", "background", r(self.background));
        cfg.set("synth", "size_scale", r(self.size_scale));
        cfg.set("synth", "height", self.height.to_string());
        cfg.set("synth", "coverage", self.coverage.to_string());
        self.augmentation.write_to(cfg, "synth");
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 ≤ min_words ≤ max_words");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len || self.vocab_size == 0 {
            return bad("need a positive vocab_size and 1 ≤ min_word_len ≤ max_word_len");
        }
        let weights =
            std::iter::once(self.vocab_weight).chain(self.extra_vocab.iter().map(|e| e.1));
        if weights.into_iter().any(|w| !(w > 0.0 && w.is_finite())) {
            return bad("vocabulary weights must be positive and finite");
        }
        if self.overlap.lo < 0.0 {
            return bad("overlap must be nonnegative");
        }
        if self.size_scale.lo <= 0.0 || self.height < 8 {
            return bad("size_scale must be positive and height at least 8");
        }
        for r in [self.ink, self.background] {
            if r.lo < 0.0 || r.hi > 255.0 {
                return bad("gray levels must lie in 0..=255");
            }
        }
        Ok(())
    }
}

/// One planned sample before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedLine {
    pub index: usize,
    pub spec: LineSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationSummary {
    pub samples: usize,
    pub char_counts: BTreeMap<char, usize>,
    /// Characters still absent after coverage resampling.
    pub uncovered: Vec<char>,
}

fn read_words(path: &str, atlas: &GlyphAtlas) -> Result<Vec<String>> {
    let p = Path::new(path);
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect();
    for w in &words {
        if let Some(c) = w.chars().find(|&c| atlas.get(c).is_none()) {
            return Err(Error::Data(format!(
                "vocabulary word {w:?} in {path} uses {c:?}, which the atlas lacks"
            )));
        }
    }
    if words.is_empty() {
        return Err(Error::Data(format!("vocabulary file {path} has no words")));
    }
    Ok(words)
}

pub fn build_sampler(cfg: &SynthConfig, atlas: &GlyphAtlas, seed: u64) -> Result<TextSampler> {
    let words = match &cfg.vocab_file {
        Some(f) => read_words(f, atlas)?,
        None => procedural_vocab(
            &atlas.letters(),
            cfg.vocab_size,
            cfg.min_word_len,
            cfg.max_word_len,
            &mut rng_for(seed, VOCAB_STREAM),
        )?,
    };
    if cfg.extra_vocab.is_empty() {
        return TextSampler::single(words);
    }
    let mut groups = vec![VocabGroup {
        name: "words".into(),
        words,
        weight: cfg.vocab_weight,
    }];
    for (path, weight) in &cfg.extra_vocab {
        groups.push(VocabGroup {
            name: path.clone(),
            words: read_words(path, atlas)?,
            weight: *weight,
        });
    }
    TextSampler::new(groups)
}

/// Draws every line's text and rendering parameters.
pub fn plan_lines(
    n: usize,
    cfg: &SynthConfig,
    atlas: &GlyphAtlas,
    seed: u64,
) -> Result<Vec<PlannedLine>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    cfg.validate()?;
    let sampler = build_sampler(cfg, atlas, seed)?;
    let overlap = Range::new(
        cfg.overlap.lo.min(atlas.max_overlap),
        cfg.overlap.hi.min(atlas.max_overlap),
    );
    let mut lines = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = rng_for(seed, index as u64);
        let text = sampler.sample(cfg.min_words, cfg.max_words, &mut rng)?;
        let ink = cfg.ink.sample(&mut rng).round() as u8;
        let bg = cfg.background.sample(&mut rng).round() as u8;
        let spec = LineSpec {
            text,
            atlas_id: atlas.id.clone(),
            size_scale: cfg.size_scale.sample(&mut rng),
            ink: [ink; 3],
            background: [bg; 3],
            overlap: overlap.sample(&mut rng),
            height: cfg.height,
        };
        lines.push(PlannedLine { index, spec });
    }
    if cfg.coverage {
        ensure_coverage(&mut lines, &atlas.letters(), seed);
    }
    Ok(lines)
}

fn count_chars(lines: &[PlannedLine]) -> BTreeMap<char, usize> {
    let mut m = BTreeMap::new();
    for l in lines {
        for c in l.spec.text.chars() {
            *m.entry(c).or_insert(0) += 1;
        }
    }
    m
}

/// Replaces letters that occur more than once in the corpus with each
/// missing letter until every letter appears, when the corpus is large
/// enough to hold them all.
fn ensure_coverage(lines: &mut [PlannedLine], letters: &[char], seed: u64) {
    let mut counts = count_chars(lines);
    let mut rng: Rng = rng_for(seed, COVERAGE_STREAM);
    for &missing in letters {
        if counts.contains_key(&missing) {
            continue;
        }
        // Candidate slots: letters that would stay present after replacement.
        let slots: Vec<(usize, usize)> = lines
            .iter()
            .enumerate()
            .flat_map(|(li, l)| {
                l.spec
                    .text
                    .chars()
                    .enumerate()
                    .map(move |(ci, c)| (li, ci, c))
            })
            .filter(|&(_, _, c)| c != ' ' && counts.get(&c).copied().unwrap_or(0) > 1)
            .map(|(li, ci, _)| (li, ci))
            .collect();
        if slots.is_empty() {
            break;
        }
        let (li, ci) = slots[rng.random_range(0..slots.len())];
        let mut chars: Vec<char> = lines[li].spec.text.chars().collect();
        let old = chars[ci];
        chars[ci] = missing;
        lines[li].spec.text = chars.into_iter().collect();
        *counts.get_mut(&old).expect("counted") -= 1;
        counts.insert(missing, 1);
    }
}

pub fn image_name(index: usize) -> String {
    format!("images/{index:06}.png")
}

/// Renders one planned line and applies the configured augmentation.
pub fn render_planned(
    line: &PlannedLine,
    cfg: &SynthConfig,
    atlas: &GlyphAtlas,
    seed: u64,
) -> Result<(crate::image::GrayImage, String)> {
    let (img, gt) = render_line(&line.spec, atlas)?;
    if cfg.augmentation.is_off() {
        return Ok((img, gt));
    }
    let mut rng = rng_for(derive_seed(seed, AUGMENT_STREAM), line.index as u64);
    Ok((augment(&img, &cfg.augmentation, &mut rng), gt))
}

/// Writes a dataset of `n` lines to `dir`.
pub fn generate_dataset(
    n: usize,
    cfg: &SynthConfig,
    atlas: &GlyphAtlas,
    seed: u64,
    dir: &Path,
) -> Result<GenerationSummary> {
    let lines = plan_lines(n, cfg, atlas, seed)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = String::new();
    for line in &lines {
        let (img, gt) = render_planned(line, cfg, atlas, seed)?;
        let name = image_name(line.index);
        img.save_png(&dir.join(&name))?;
        let _ = writeln!(labels, "{name}\t{gt}");
    }
    let lp = dir.join("labels.tsv");
    std::fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    CharSet::new(atlas.chars().to_vec())?.save(&dir.join("charset.txt"))?;
    let mut meta = Config::new();
    meta.set("", "seed", seed.to_string());
    meta.set("", "samples", n.to_string());
    meta.set("", "atlas", atlas.id.clone());
    meta.set("", "direction", "rtl");
    cfg.write_to(&mut meta);
    meta.save(&dir.join("meta.conf"))?;
    let char_counts = count_chars(&lines);
    let uncovered = atlas
        .letters()
        .into_iter()
        .filter(|c| !char_counts.contains_key(c))
        .collect();
    Ok(GenerationSummary {
        samples: n,
        char_counts,
        uncovered,
    })
}
