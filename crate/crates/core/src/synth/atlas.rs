//! Procedural glyph atlas.
//!
//! The desk alphabet has eight base shapes, each appearing with zero, one or
//! two dots (above for even bases, below for odd ones), so three characters
//! share every base and differ only in their dots. Four further characters
//! have unique base shapes and no dots, and a space separates words.
//!
//! All bitmaps are ink coverage in `[0, 1]` on a common em of 32 rows. The
//! body of every base sits between rows 9 and 22; dots are 3×3 squares in
//! rows 4–6 (above) or 25–27 (below), clear of the body.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const EM: usize = 32;
/// Row of the body's `y = 0` line.
pub const BASELINE: usize = 21;
pub const DOT: usize = 3;
const DOT_ROW_ABOVE: usize = 4;
const DOT_ROW_BELOW: usize = 25;
const STROKE_RADIUS: f64 = 1.0;
const SPACE_ADVANCE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    None,
    Above,
    Below,
}

/// Contextual form; in right-to-left text "previous" is the right neighbour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Position {
    Isolated,
    Initial,
    Medial,
    Final,
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::Isolated,
        Position::Initial,
        Position::Medial,
        Position::Final,
    ];

    pub fn from_joins(joins_prev: bool, joins_next: bool) -> Self {
        match (joins_prev, joins_next) {
            (false, false) => Position::Isolated,
            (false, true) => Position::Initial,
            (true, true) => Position::Medial,
            (true, false) => Position::Final,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Position::Isolated => "isolated",
            Position::Initial => "initial",
            Position::Medial => "medial",
            Position::Final => "final",
        }
    }
}

/// Ink coverage bitmap of `EM` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBitmap {
    pub width: usize,
    pub coverage: Vec<f32>,
}

impl GlyphBitmap {
    pub fn blank(width: usize) -> Self {
        GlyphBitmap {
            width,
            coverage: vec![0.0; width * EM],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.coverage[y * self.width + x]
    }

    pub fn ink_pixels(&self) -> usize {
        self.coverage.iter().filter(|&&c| c > 0.5).count()
    }

    fn stamp_max(&mut self, x: usize, y: usize, v: f32) {
        if x < self.width && y < EM {
            let c = &mut self.coverage[y * self.width + x];
            *c = c.max(v);
        }
    }

    /// Strokes a segment given in body coordinates (`y` up from the baseline).
    fn stroke(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) {
        let (r0, r1) = (BASELINE as f64 - y0, BASELINE as f64 - y1);
        for row in 0..EM {
            for col in 0..self.width {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                if seg_distance(px, py, x0 + 0.5, r0 + 0.5, x1 + 0.5, r1 + 0.5) <= STROKE_RADIUS {
                    self.stamp_max(col, row, 1.0);
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)]) {
        for w in pts.windows(2) {
            self.stroke(w[0], w[1]);
        }
    }

    fn dots(&mut self, count: u8, placement: Placement) {
        let row = match placement {
            Placement::None => return,
            Placement::Above => DOT_ROW_ABOVE,
            Placement::Below => DOT_ROW_BELOW,
        };
        let n = count as usize;
        let span = n * DOT + n.saturating_sub(1);
        let left = (self.width.saturating_sub(span)) / 2;
        for d in 0..n {
            let x0 = left + d * (DOT + 1);
            for y in row..row + DOT {
                for x in x0..x0 + DOT {
                    self.stamp_max(x, y, 1.0);
                }
            }
        }
    }
}

fn seg_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub ch: char,
    pub base: usize,
    pub dots: u8,
    pub placement: Placement,
    /// Whether the glyph connects to the following character.
    pub joins_next: bool,
    /// Indexed by [`Position`].
    pub variants: [GlyphBitmap; 4],
}

impl GlyphSpec {
    pub fn bitmap(&self, pos: Position) -> &GlyphBitmap {
        &self.variants[pos.index()]
    }

    pub fn advance(&self, pos: Position) -> usize {
        self.bitmap(pos).width
    }

    pub fn is_space(&self) -> bool {
        self.ch == ' '
    }
}

struct BaseShape {
    width: usize,
    joins_next: bool,
    strokes: Vec<Vec<(f64, f64)>>,
}

fn base_shapes() -> Vec<BaseShape> {
    let s = |width, joins_next, strokes: Vec<Vec<(f64, f64)>>| BaseShape {
        width,
        joins_next,
        strokes,
    };
    vec![
        // Shared bases: bowl, hook, stem, loop, zigzag, teeth, wedge, ring.
        s(
            14,
            true,
            vec![vec![(2.0, 5.0), (2.0, 1.0), (11.0, 1.0), (11.0, 5.0)]],
        ),
        s(
            12,
            true,
            vec![vec![(10.0, 9.0), (2.0, 9.0), (2.0, 1.0), (9.0, 1.0)]],
        ),
        s(9, false, vec![vec![(4.0, 1.0), (4.0, 11.0)]]),
        s(
            13,
            true,
            vec![vec![
                (2.0, 1.0),
                (2.0, 7.0),
                (10.0, 7.0),
                (10.0, 1.0),
                (2.0, 1.0),
            ]],
        ),
        s(
            15,
            true,
            vec![vec![(2.0, 1.0), (5.0, 8.0), (8.0, 1.0), (11.0, 8.0)]],
        ),
        s(
            14,
            true,
            vec![
                vec![(2.0, 1.0), (11.0, 1.0)],
                vec![(2.0, 1.0), (2.0, 6.0)],
                vec![(6.0, 1.0), (6.0, 6.0)],
                vec![(11.0, 1.0), (11.0, 6.0)],
            ],
        ),
        s(11, false, vec![vec![(8.0, 9.0), (2.0, 1.0), (8.0, 1.0)]]),
        s(
            11,
            true,
            vec![
                vec![(3.0, 4.0), (7.0, 4.0), (7.0, 9.0), (3.0, 9.0), (3.0, 4.0)],
                vec![(7.0, 4.0), (2.0, 0.0)],
            ],
        ),
        // Unique bases: cross, tall hook, diamond, ladder.
        s(
            12,
            true,
            vec![vec![(5.0, 0.0), (5.0, 10.0)], vec![(1.0, 5.0), (10.0, 5.0)]],
        ),
        s(
            10,
            false,
            vec![vec![(7.0, 11.0), (7.0, 1.0), (2.0, 1.0), (2.0, 4.0)]],
        ),
        s(
            13,
            true,
            vec![vec![
                (6.0, 0.0),
                (11.0, 5.0),
                (6.0, 10.0),
                (1.0, 5.0),
                (6.0, 0.0),
            ]],
        ),
        s(
            12,
            true,
            vec![
                vec![(1.0, 1.0), (10.0, 1.0)],
                vec![(1.0, 9.0), (10.0, 9.0)],
                vec![(5.0, 1.0), (5.0, 9.0)],
            ],
        ),
    ]
}

/// Characters with dotted siblings, family-major: `a b c` share base 0, etc.
pub const DOT_FAMILY_CHARS: &str = "abcdefghijklmnopqrstuvwx";
/// Characters whose base shape no other character uses.
pub const UNIQUE_CHARS: &str = "ABCD";
pub const SHARED_BASES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphAtlas {
    pub id: String,
    pub em: usize,
    pub baseline: usize,
    /// Upper bound on the overlap factor of a line.
    pub max_overlap: f64,
    glyphs: BTreeMap<char, GlyphSpec>,
    order: Vec<char>,
}

impl GlyphAtlas {
    /// The procedural desk alphabet.
    pub fn desk() -> Self {
        let shapes = base_shapes();
        let mut glyphs = BTreeMap::new();
        let mut order = Vec::new();
        let mut add = |spec: GlyphSpec| {
            order.push(spec.ch);
            glyphs.insert(spec.ch, spec);
        };
        for (i, ch) in DOT_FAMILY_CHARS.chars().enumerate() {
            let base = i / 3;
            let dots = (i % 3) as u8;
            let placement = match (dots, base % 2) {
                (0, _) => Placement::None,
                (_, 0) => Placement::Above,
                _ => Placement::Below,
            };
            add(render_spec(ch, base, &shapes[base], dots, placement));
        }
        for (j, ch) in UNIQUE_CHARS.chars().enumerate() {
            let base = SHARED_BASES + j;
            add(render_spec(ch, base, &shapes[base], 0, Placement::None));
        }
        add(space_spec());
        GlyphAtlas {
            id: "desk-v1".into(),
            em: EM,
            baseline: BASELINE,
            max_overlap: 0.4,
            glyphs,
            order,
        }
    }

    /// Loads externally shaped glyphs. `dir/atlas.tsv` rows are
    /// `char  base  dots  placement  joins_next  isolated.png  initial.png  medial.png  final.png`
    /// with placement one of `none|above|below`; PNGs are `EM` rows of
    /// dark ink on a light ground.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("atlas.tsv");
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut glyphs = BTreeMap::new();
        let mut order = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("{}:{}: {what}", manifest.display(), n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 9 {
                return Err(bad("expected 9 tab-separated columns"));
            }
            let mut chars = cols[0].chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(bad("first column must be one character")),
            };
            let base = cols[1].parse().map_err(|_| bad("bad base id"))?;
            let dots: u8 = cols[2].parse().map_err(|_| bad("bad dot count"))?;
            if dots > 3 {
                return Err(bad("dot count must be 0..=3"));
            }
            let placement = match cols[3] {
                "none" => Placement::None,
                "above" => Placement::Above,
                "below" => Placement::Below,
                _ => return Err(bad("placement must be none|above|below")),
            };
            let joins_next = cols[4]
                .parse()
                .map_err(|_| bad("joins_next must be true|false"))?;
            let mut variants = Vec::with_capacity(4);
            for file in &cols[5..9] {
                let img = GrayImage::load_png(&dir.join(file))?;
                if img.height() != EM {
                    return Err(bad(&format!("{file} must be {EM} rows tall")));
                }
                variants.push(GlyphBitmap {
                    width: img.width(),
                    coverage: img.data().iter().map(|v| 1.0 - v).collect(),
                });
            }
            let variants: [GlyphBitmap; 4] = variants.try_into().expect("four variants");
            order.push(ch);
            if glyphs
                .insert(
                    ch,
                    GlyphSpec {
                        ch,
                        base,
                        dots,
                        placement,
                        joins_next,
                        variants,
                    },
                )
                .is_some()
            {
                return Err(bad(&format!("character {ch:?} listed twice")));
            }
        }
        if !glyphs.contains_key(&' ') {
            order.push(' ');
            glyphs.insert(' ', space_spec());
        }
        Ok(GlyphAtlas {
            id: dir.display().to_string(),
            em: EM,
            baseline: BASELINE,
            max_overlap: 0.4,
            glyphs,
            order,
        })
    }

    pub fn get(&self, c: char) -> Option<&GlyphSpec> {
        self.glyphs.get(&c)
    }

    /// Characters in class order (space last for the desk atlas).
    pub fn chars(&self) -> &[char] {
        &self.order
    }

    /// Non-space characters.
    pub fn letters(&self) -> Vec<char> {
        self.order.iter().copied().filter(|&c| c != ' ').collect()
    }

    /// Characters sharing their base shape with another character.
    pub fn dot_distinguished(&self) -> Vec<char> {
        self.letters()
            .into_iter()
            .filter(|&c| {
                let b = self.glyphs[&c].base;
                self.glyphs
                    .values()
                    .filter(|g| !g.is_space() && g.base == b)
                    .count()
                    > 1
            })
            .collect()
    }

    /// Characters whose base shape is theirs alone.
    pub fn base_unique(&self) -> Vec<char> {
        let dotted = self.dot_distinguished();
        self.letters()
            .into_iter()
            .filter(|c| !dotted.contains(c))
            .collect()
    }
}

fn space_spec() -> GlyphSpec {
    let b = GlyphBitmap::blank(SPACE_ADVANCE);
    GlyphSpec {
        ch: ' ',
        base: usize::MAX,
        dots: 0,
        placement: Placement::None,
        joins_next: false,
        variants: [b.clone(), b.clone(), b.clone(), b],
    }
}

fn render_spec(
    ch: char,
    base: usize,
    shape: &BaseShape,
    dots: u8,
    placement: Placement,
) -> GlyphSpec {
    let variants = Position::ALL.map(|pos| {
        let mut bm = GlyphBitmap::blank(shape.width);
        for s in &shape.strokes {
            bm.polyline(s);
        }
        let w = shape.width as f64 - 1.0;
        // Right-to-left: the previous character sits to the right.
        if matches!(pos, Position::Medial | Position::Final) {
            bm.stroke((w - 2.0, 1.0), (w, 1.0));
        }
        if matches!(pos, Position::Initial | Position::Medial) {
            bm.stroke((0.0, 1.0), (2.0, 1.0));
        }
        bm.dots(dots, placement);
        bm
    });
    GlyphSpec {
        ch,
        base,
        dots,
        placement,
        joins_next: shape.joins_next,
        variants,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_alphabet_layout() {
        let a = GlyphAtlas::desk();
        assert_eq!(a.chars().len(), 29);
        assert_eq!(a.dot_distinguished().len(), 24);
        assert_eq!(a.base_unique(), UNIQUE_CHARS.chars().collect::<Vec<_>>());
        let b = a.get('b').unwrap();
        assert_eq!((b.base, b.dots, b.placement), (0, 1, Placement::Above));
        let e = a.get('e').unwrap();
        assert_eq!((e.base, e.dots, e.placement), (1, 1, Placement::Below));
    }

    #[test]
    fn dots_do_not_touch_the_body() {
        let a = GlyphAtlas::desk();
        for c in a.letters() {
            let g = a.get(c).unwrap();
            let bare = a
                .get(DOT_FAMILY_CHARS.chars().nth(g.base * 3).unwrap_or(c))
                .unwrap();
            if g.base < SHARED_BASES {
                let diff = g.bitmap(Position::Isolated).ink_pixels()
                    - bare.bitmap(Position::Isolated).ink_pixels();
                assert_eq!(diff, g.dots as usize * DOT * DOT, "{c}");
            }
        }
    }

    #[test]
    fn variants_differ_by_connectors() {
        let a = GlyphAtlas::desk();
        let g = a.get('a').unwrap();
        let iso = g.bitmap(Position::Isolated).ink_pixels();
        assert!(g.bitmap(Position::Medial).ink_pixels() > g.bitmap(Position::Initial).ink_pixels());
        assert!(g.bitmap(Position::Initial).ink_pixels() > iso);
        assert!(a.get('ü').is_none());
    }
}
