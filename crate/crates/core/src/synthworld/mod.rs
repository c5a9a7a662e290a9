//! Procedurally generated multimodal world: 3×3 scenes of coloured glyphs,
//! their 24×24 renderings, ground-truth concept sets, and the grammar that
//! turns scenes into captions, questions and filler text.

mod dataset;
mod grammar;
mod render;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_text_corpus, example_from_record, mm_caption_record, mm_qa_record, read_records,
    vit_pair_record, write_records, DatasetError, MmExample, Record,
};
pub use grammar::{
    caption_of, clause, describe, filler_sentence, gen_qa, QaTemplate, CAPTION_INSTRUCTION, COLOR_WORDS,
    DESCRIBE_INSTRUCTION, POSITION_WORDS, SHAPE_WORDS, VOCABULARY,
};
pub use render::{render, CELL_PX, IMAGE_SIDE, PIXEL_LEN};

pub const GRID_SIDE: usize = 3;
pub const N_CELLS: usize = GRID_SIDE * GRID_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        SHAPE_WORDS[self.index()]
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        COLOR_WORDS[self.index()]
    }
}

/// Content of one grid cell. Empty cells carry no colour by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellContent {
    Empty,
    Glyph { shape: Shape, color: Color },
}

impl CellContent {
    pub fn is_empty(&self) -> bool {
        matches!(self, CellContent::Empty)
    }

    pub fn shape(&self) -> Option<Shape> {
        match self {
            CellContent::Glyph { shape, .. } => Some(*shape),
            CellContent::Empty => None,
        }
    }

    pub fn color(&self) -> Option<Color> {
        match self {
            CellContent::Glyph { color, .. } => Some(*color),
            CellContent::Empty => None,
        }
    }

    /// Class label used by shape probes: 0 = empty, 1.. = shape index + 1.
    pub fn shape_class(&self) -> usize {
        self.shape().map_or(0, |s| s.index() + 1)
    }
}

/// Row-major 3×3 scene; cell `k` sits at row `k / 3`, column `k % 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid(pub [CellContent; N_CELLS]);

impl Grid {
    pub fn filled(&self) -> impl Iterator<Item = (usize, Shape, Color)> + '_ {
        self.0.iter().enumerate().filter_map(|(k, c)| match c {
            CellContent::Glyph { shape, color } => Some((k, *shape, *color)),
            CellContent::Empty => None,
        })
    }

    pub fn n_filled(&self) -> usize {
        self.0.iter().filter(|c| !c.is_empty()).count()
    }
}

/// One atom of the closed concept vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Concept {
    Shape(Shape),
    Color(Color),
    Composite(Color, Shape),
    /// Grid cell index 0..9, named by a position phrase.
    Position(usize),
}

/// Number of atoms: 4 shapes + 4 colours + 16 colour-shape composites + 9 positions.
pub const N_CONCEPTS: usize = 4 + 4 + 16 + 9;

impl Concept {
    pub fn id(self) -> usize {
        match self {
            Concept::Shape(s) => s.index(),
            Concept::Color(c) => 4 + c.index(),
            Concept::Composite(c, s) => 8 + c.index() * 4 + s.index(),
            Concept::Position(p) => 24 + p,
        }
    }

    pub fn from_id(id: usize) -> Option<Concept> {
        Some(match id {
            0..=3 => Concept::Shape(Shape::ALL[id]),
            4..=7 => Concept::Color(Color::ALL[id - 4]),
            8..=23 => Concept::Composite(Color::ALL[(id - 8) / 4], Shape::ALL[(id - 8) % 4]),
            24..=32 => Concept::Position(id - 24),
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Concept> {
        (0..N_CONCEPTS).filter_map(Concept::from_id)
    }

    /// Canonical text label, e.g. `red circle` or `top-left`.
    pub fn label(self) -> String {
        match self {
            Concept::Shape(s) => s.word().to_string(),
            Concept::Color(c) => c.word().to_string(),
            Concept::Composite(c, s) => format!("{} {}", c.word(), s.word()),
            Concept::Position(p) => POSITION_WORDS[p].to_string(),
        }
    }

    pub fn from_label(label: &str) -> Option<Concept> {
        Concept::all().find(|c| c.label() == label)
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Subset of the concept vocabulary, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConceptSet(u64);

impl ConceptSet {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn insert(&mut self, c: Concept) {
        self.0 |= 1 << c.id();
    }

    pub fn contains(&self, c: Concept) -> bool {
        self.0 & (1 << c.id()) != 0
    }

    pub fn is_subset(&self, other: &ConceptSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(&self, other: &ConceptSet) -> ConceptSet {
        ConceptSet(self.0 | other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = Concept> + '_ {
        (0..N_CONCEPTS).filter(|i| self.0 & (1 << i) != 0).filter_map(Concept::from_id)
    }
}

impl FromIterator<Concept> for ConceptSet {
    fn from_iter<I: IntoIterator<Item = Concept>>(iter: I) -> Self {
        let mut s = ConceptSet::new();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

/// Concepts realised by a single filled cell.
pub fn cell_concepts(cell: usize, shape: Shape, color: Color) -> [Concept; 4] {
    [
        Concept::Shape(shape),
        Concept::Color(color),
        Concept::Composite(color, shape),
        Concept::Position(cell),
    ]
}

/// The concept set realised by a grid.
pub fn concepts_of(grid: &Grid) -> ConceptSet {
    grid.filled().flat_map(|(k, s, c)| cell_concepts(k, s, c)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub grid: Grid,
    /// `24 × 24 × 3`, row-major `(y, x, channel)`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub concepts: ConceptSet,
    pub seed: u64,
    pub density: f64,
}

impl SynthImage {
    pub fn from_grid(grid: Grid, seed: u64, density: f64) -> Self {
        Self { pixels: render(&grid), concepts: concepts_of(&grid), grid, seed, density }
    }
}

/// Draws a scene where each cell is independently filled with probability
/// `density`; an all-empty draw is rejected and redrawn.
///
/// Panics unless `0 < density <= 1`.
pub fn gen_image(seed: u64, density: f64) -> SynthImage {
    assert!(density > 0.0 && density <= 1.0, "density must be in (0, 1], got {density}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut cells = [CellContent::Empty; N_CELLS];
        for cell in cells.iter_mut() {
            if rng.gen_bool(density) {
                *cell = CellContent::Glyph {
                    shape: Shape::ALL[rng.gen_range(0..4)],
                    color: Color::ALL[rng.gen_range(0..4)],
                };
            }
        }
        let grid = Grid(cells);
        if grid.n_filled() > 0 {
            return SynthImage::from_grid(grid, seed, density);
        }
    }
}

/// Derives independent sub-seeds (SplitMix64 finaliser over a mixed key).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
