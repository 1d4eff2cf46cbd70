//! Composition of glyph bitmaps into right-to-left line images.

use super::atlas::{GlyphAtlas, Position};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Clone, Debug, PartialEq)]
pub struct LineSpec {
    pub text: String,
    pub atlas_id: String,
    /// Glyph scale relative to the atlas em.
    pub size_scale: f64,
    /// RGB colours; rendering maps them to luma.
    pub ink: [u8; 3],
    pub background: [u8; 3],
    /// Fraction of each glyph's advance overlapped by its successor.
    pub overlap: f64,
    pub height: usize,
}

impl LineSpec {
    pub fn new(text: impl Into<String>, atlas: &GlyphAtlas) -> Self {
        LineSpec {
            text: text.into(),
            atlas_id: atlas.id.clone(),
            size_scale: 1.0,
            ink: [0, 0, 0],
            background: [255, 255, 255],
            overlap: 0.0,
            height: atlas.em,
        }
    }
}

pub fn luma([r, g, b]: [u8; 3]) -> f32 {
    (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0
}

/// One placed glyph: left column on the em-height canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placed {
    pub ch: char,
    pub position: Position,
    pub left: usize,
    pub advance: usize,
}

/// Contextual forms of `text`: letters join within a word unless the
/// preceding letter does not connect forward.
pub fn positions(text: &[char], atlas: &GlyphAtlas) -> Result<Vec<Position>> {
    let mut out = Vec::with_capacity(text.len());
    for (i, &c) in text.iter().enumerate() {
        let g = atlas.get(c).ok_or_else(|| {
            Error::Data(format!("no glyph for character {c:?} (U+{:04X})", c as u32))
        })?;
        if g.is_space() {
            out.push(Position::Isolated);
            continue;
        }
        let prev_joins = i > 0
            && atlas
                .get(text[i - 1])
                .is_some_and(|p| !p.is_space() && p.joins_next);
        let next_is_letter = text.get(i + 1).is_some_and(|&n| n != ' ');
        out.push(Position::from_joins(
            prev_joins,
            g.joins_next && next_is_letter,
        ));
    }
    Ok(out)
}

/// Overlap in pixels between glyph `i` and its successor.
pub fn overlap_pixels(advance: usize, overlap: f64) -> usize {
    (overlap * advance as f64).round() as usize
}

/// Lays out `text` right to left and returns the canvas width and the glyph
/// placements in text order.
pub fn layout(text: &str, atlas: &GlyphAtlas, overlap: f64) -> Result<(usize, Vec<Placed>)> {
    let chars: Vec<char> = text.chars().collect();
    let pos = positions(&chars, atlas)?;
    let adv: Vec<usize> = chars
        .iter()
        .zip(&pos)
        .map(|(c, p)| atlas.get(*c).expect("checked").advance(*p))
        .collect();
    let n = chars.len();
    let width: usize = adv.iter().sum::<usize>()
        - adv[..n.saturating_sub(1)]
            .iter()
            .map(|&a| overlap_pixels(a, overlap))
            .sum::<usize>();
    let mut right = width;
    let mut placed = Vec::with_capacity(n);
    for i in 0..n {
        let left = right - adv[i];
        placed.push(Placed {
            ch: chars[i],
            position: pos[i],
            left,
            advance: adv[i],
        });
        right = left + overlap_pixels(adv[i], overlap);
    }
    Ok((width, placed))
}

/// Renders the line and returns it with its ground truth, which is
/// `spec.text` verbatim.
pub fn render_line(spec: &LineSpec, atlas: &GlyphAtlas) -> Result<(GrayImage, String)> {
    if spec.text.is_empty() {
        return Err(Error::contract("cannot render an empty line"));
    }
    if !(0.0..=atlas.max_overlap).contains(&spec.overlap) {
        return Err(Error::contract(format!(
            "overlap {} outside [0, {}]",
            spec.overlap, atlas.max_overlap
        )));
    }
    if spec.size_scale <= 0.0 || spec.height == 0 {
        return Err(Error::contract("size scale and height must be positive"));
    }
    let (width, placed) = layout(&spec.text, atlas, spec.overlap)?;
    let mut cover = vec![0.0f32; width * atlas.em];
    for p in &placed {
        let bm = atlas.get(p.ch).expect("checked").bitmap(p.position);
        for y in 0..atlas.em {
            for x in 0..bm.width {
                let c = &mut cover[y * width + p.left + x];
                *c = c.max(bm.at(x, y));
            }
        }
    }
    let (ink, bg) = (luma(spec.ink), luma(spec.background));
    let canvas = GrayImage::from_data(
        width,
        atlas.em,
        cover.iter().map(|&c| bg + (ink - bg) * c).collect(),
    )?;
    let scaled = if spec.size_scale == 1.0 {
        canvas
    } else {
        let w = ((width as f64 * spec.size_scale).round() as usize).max(1);
        let h = ((atlas.em as f64 * spec.size_scale).round() as usize).max(1);
        canvas.resize(w, h)
    };
    let image = if scaled.height() == spec.height {
        scaled
    } else {
        let mut out = GrayImage::filled(scaled.width(), spec.height, bg);
        let offset = spec.height as isize / 2 - scaled.height() as isize / 2;
        for y in 0..spec.height {
            let sy = y as isize - offset;
            if sy < 0 || sy as usize >= scaled.height() {
                continue;
            }
            for x in 0..scaled.width() {
                out.set(x, y, scaled.get(x, sy as usize));
            }
        }
        out
    };
    Ok((image, spec.text.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contextual_forms() {
        let a = GlyphAtlas::desk();
        // 'g' is a non-joining base: it breaks the word's chain after itself.
        let chars: Vec<char> = "aag a".chars().collect();
        let p = positions(&chars, &a).unwrap();
        assert_eq!(
            p,
            vec![
                Position::Initial,
                Position::Medial,
                Position::Final,
                Position::Isolated,
                Position::Isolated
            ]
        );
    }

    #[test]
    fn missing_glyph_is_named() {
        let a = GlyphAtlas::desk();
        let err = render_line(&LineSpec::new("a?", &a), &a)
            .unwrap_err()
            .to_string();
        assert!(err.contains("'?'"), "{err}");
    }
}
