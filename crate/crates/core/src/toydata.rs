//! Procedural desk-scale dataset: parametric scenes, a closed caption
//! vocabulary, deterministic rendering, and the five-task edit-triplet
//! benchmark.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneShape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneColor {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneSize {
    Small,
    Large,
}

/// Cell on the 3x3 placement grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub row: u8,
    pub col: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Background {
    Plain,
    Textured,
}

pub const SHAPES: [SceneShape; 3] = [SceneShape::Square, SceneShape::Circle, SceneShape::Triangle];
pub const COLORS: [SceneColor; 4] = [
    SceneColor::Red,
    SceneColor::Green,
    SceneColor::Blue,
    SceneColor::Yellow,
];
pub const SIZES: [SceneSize; 2] = [SceneSize::Small, SceneSize::Large];
pub const BACKGROUNDS: [Background; 2] = [Background::Plain, Background::Textured];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyScene {
    pub shape: SceneShape,
    pub color: SceneColor,
    pub size: SceneSize,
    pub position: GridPos,
    pub background: Background,
}

/// Token vocabulary: 4 colors, 3 shapes, 2 sizes, 9 positions, 2 backgrounds.
pub const VOCAB_SIZE: usize = 20;

const COLOR_BASE: usize = 0;
const SHAPE_BASE: usize = 4;
const SIZE_BASE: usize = 7;
const POS_BASE: usize = 9;
const BG_BASE: usize = 18;

pub fn token_word(token: usize) -> &'static str {
    match token {
        0 => "red",
        1 => "green",
        2 => "blue",
        3 => "yellow",
        4 => "square",
        5 => "circle",
        6 => "triangle",
        7 => "small",
        8 => "large",
        9 => "top-left",
        10 => "top",
        11 => "top-right",
        12 => "left",
        13 => "center",
        14 => "right",
        15 => "bottom-left",
        16 => "bottom",
        17 => "bottom-right",
        18 => "plain",
        19 => "textured",
        _ => panic!("token {token} out of vocabulary"),
    }
}

/// Caption over the closed vocabulary: one token per scene field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    /// `[size, color, shape, position, background]` token ids.
    pub tokens: [usize; 5],
}

impl Caption {
    pub fn text(&self) -> String {
        format!(
            "a {} {} {} at {} on {} background",
            token_word(self.tokens[0]),
            token_word(self.tokens[1]),
            token_word(self.tokens[2]),
            token_word(self.tokens[3]),
            token_word(self.tokens[4]),
        )
    }
}

impl std::fmt::Display for Caption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.text())
    }
}

impl ToyScene {
    pub fn caption(&self) -> Caption {
        let color = COLOR_BASE + self.color as usize;
        let shape = SHAPE_BASE + self.shape as usize;
        let size = SIZE_BASE + self.size as usize;
        let pos = POS_BASE + (self.position.row as usize) * 3 + self.position.col as usize;
        let bg = BG_BASE + self.background as usize;
        Caption {
            tokens: [size, color, shape, pos, bg],
        }
    }

    pub fn from_caption(c: &Caption) -> Result<ToyScene> {
        let field = |base: usize, len: usize, tok: usize, what: &str| -> Result<usize> {
            if tok < base || tok >= base + len {
                return Err(Error::invalid(format!(
                    "token {tok} is not a {what} token"
                )));
            }
            Ok(tok - base)
        };
        let size = field(SIZE_BASE, 2, c.tokens[0], "size")?;
        let color = field(COLOR_BASE, 4, c.tokens[1], "color")?;
        let shape = field(SHAPE_BASE, 3, c.tokens[2], "shape")?;
        let pos = field(POS_BASE, 9, c.tokens[3], "position")?;
        let bg = field(BG_BASE, 2, c.tokens[4], "background")?;
        Ok(ToyScene {
            shape: SHAPES[shape],
            color: COLORS[color],
            size: SIZES[size],
            position: GridPos {
                row: (pos / 3) as u8,
                col: (pos % 3) as u8,
            },
            background: BACKGROUNDS[bg],
        })
    }
}

/// Parse a free-form caption string ("a small red square at center on plain
/// background"); filler words are ignored, every scene field must appear
/// exactly once.
pub fn parse_caption(text: &str) -> Result<Caption> {
    let mut size = None;
    let mut color = None;
    let mut shape = None;
    let mut pos = None;
    let mut bg = None;
    for word in text.split_whitespace() {
        let word = word.trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '-');
        if matches!(word, "a" | "an" | "at" | "on" | "the" | "background" | "") {
            continue;
        }
        let tok = (0..VOCAB_SIZE)
            .find(|t| token_word(*t) == word)
            .ok_or_else(|| Error::invalid(format!("unknown caption token '{word}'")))?;
        let slot = match tok {
            t if t >= BG_BASE => &mut bg,
            t if t >= POS_BASE => &mut pos,
            t if t >= SIZE_BASE => &mut size,
            t if t >= SHAPE_BASE => &mut shape,
            _ => &mut color,
        };
        if slot.replace(tok).is_some() {
            return Err(Error::invalid(format!("duplicate caption field near '{word}'")));
        }
    }
    match (size, color, shape, pos, bg) {
        (Some(s), Some(c), Some(sh), Some(p), Some(b)) => Ok(Caption {
            tokens: [s, c, sh, p, b],
        }),
        _ => Err(Error::invalid(
            "caption must name size, color, shape, position and background",
        )),
    }
}

fn color_rgb(c: SceneColor) -> [f64; 3] {
    match c {
        SceneColor::Red => [0.85, 0.10, 0.10],
        SceneColor::Green => [0.10, 0.85, 0.10],
        SceneColor::Blue => [0.10, 0.10, 0.85],
        SceneColor::Yellow => [0.85, 0.85, 0.10],
    }
}

fn grid_center(p: GridPos) -> (isize, isize) {
    let axis = [4isize, 8, 12];
    (axis[p.row as usize], axis[p.col as usize])
}

fn shape_mask(scene: &ToyScene) -> Vec<(isize, isize)> {
    let (cy, cx) = grid_center(scene.position);
    let r: isize = match scene.size {
        SceneSize::Small => 3,
        SceneSize::Large => 5,
    };
    let mut cells = Vec::new();
    match scene.shape {
        SceneShape::Square => {
            for dy in -(r - 1)..=(r - 1) {
                for dx in -(r - 1)..=(r - 1) {
                    cells.push((cy + dy, cx + dx));
                }
            }
        }
        SceneShape::Circle => {
            let rr = (r as f64 - 0.5) * (r as f64 - 0.5);
            for dy in -(r - 1)..=(r - 1) {
                for dx in -(r - 1)..=(r - 1) {
                    if (dy * dy + dx * dx) as f64 <= rr {
                        cells.push((cy + dy, cx + dx));
                    }
                }
            }
        }
        SceneShape::Triangle => {
            for (i, dy) in (-(r - 1)..=(r - 1)).enumerate() {
                let half = (i / 2) as isize;
                for dx in -half..=half {
                    cells.push((cy + dy, cx + dx));
                }
            }
        }
    }
    cells
}

/// Number of foreground pixels after clipping to the canvas; closed-form
/// check target for the renderer.
pub fn analytic_pixel_count(scene: &ToyScene) -> usize {
    shape_mask(scene)
        .into_iter()
        .filter(|(y, x)| {
            *y >= 0 && *x >= 0 && (*y as usize) < IMAGE_SIZE && (*x as usize) < IMAGE_SIZE
        })
        .count()
}

/// Deterministic 16x16 rendering of a scene. The seed perturbs only the
/// background; foreground pixels carry the exact palette color.
pub fn render<T: Scalar>(scene: &ToyScene, seed: u64) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_7964);
    let n = IMAGE_SIZE;
    let mut img = Image::filled(n, n, [T::zero(); 3]);
    for y in 0..n {
        for x in 0..n {
            let base = match scene.background {
                Background::Plain => 0.15,
                Background::Textured => {
                    if (y / 2 + x / 2) % 2 == 0 {
                        0.08
                    } else {
                        0.28
                    }
                }
            };
            let jitter: f64 = rng.gen_range(-0.02..0.02);
            let v = T::from_f64_lossy((base + jitter).clamp(0.0, 1.0));
            for c in 0..3 {
                img.set(c, y, x, v);
            }
        }
    }
    let rgb = color_rgb(scene.color);
    for (y, x) in shape_mask(scene) {
        if y < 0 || x < 0 || y as usize >= n || x as usize >= n {
            continue;
        }
        for c in 0..3 {
            img.set(c, y as usize, x as usize, T::from_f64_lossy(rgb[c]));
        }
    }
    img
}

/// Every scene in the combinatorial space (432 in total).
pub fn all_scenes() -> Vec<ToyScene> {
    let mut out = Vec::new();
    for shape in SHAPES {
        for color in COLORS {
            for size in SIZES {
                for row in 0..3u8 {
                    for col in 0..3u8 {
                        for background in BACKGROUNDS {
                            out.push(ToyScene {
                                shape,
                                color,
                                size,
                                position: GridPos { row, col },
                                background,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// The five editing-task categories, in report column order. The first three
/// form the structure-preserved group, the last two the non-rigid group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    ObjectReplacement,
    AttributeManipulation,
    StyleTransfer,
    PoseChange,
    ShapeChange,
}

pub const TASK_CATEGORIES: [TaskCategory; 5] = [
    TaskCategory::ObjectReplacement,
    TaskCategory::AttributeManipulation,
    TaskCategory::StyleTransfer,
    TaskCategory::PoseChange,
    TaskCategory::ShapeChange,
];

impl TaskCategory {
    pub fn label(&self) -> &'static str {
        match self {
            TaskCategory::ObjectReplacement => "object-replacement",
            TaskCategory::AttributeManipulation => "attribute-manipulation",
            TaskCategory::StyleTransfer => "style-transfer",
            TaskCategory::PoseChange => "pose-change",
            TaskCategory::ShapeChange => "shape-change",
        }
    }

    /// Structure-preserved tasks keep geometry and change appearance;
    /// non-rigid tasks do the opposite.
    pub fn is_structure_preserved(&self) -> bool {
        matches!(
            self,
            TaskCategory::ObjectReplacement
                | TaskCategory::AttributeManipulation
                | TaskCategory::StyleTransfer
        )
    }
}

/// Scene fields a category is allowed to change between source and target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneField {
    Shape,
    Color,
    Size,
    Position,
    Background,
}

impl TaskCategory {
    pub fn permitted_fields(&self) -> &'static [SceneField] {
        match self {
            // Replacing the object swaps its whole identity: kind and color.
            TaskCategory::ObjectReplacement => &[SceneField::Shape, SceneField::Color],
            TaskCategory::AttributeManipulation => &[SceneField::Color],
            TaskCategory::StyleTransfer => &[SceneField::Background],
            TaskCategory::PoseChange => &[SceneField::Position],
            TaskCategory::ShapeChange => &[SceneField::Shape],
        }
    }
}

fn differing_fields(a: &ToyScene, b: &ToyScene) -> Vec<SceneField> {
    let mut out = Vec::new();
    if a.shape != b.shape {
        out.push(SceneField::Shape);
    }
    if a.color != b.color {
        out.push(SceneField::Color);
    }
    if a.size != b.size {
        out.push(SceneField::Size);
    }
    if a.position != b.position {
        out.push(SceneField::Position);
    }
    if a.background != b.background {
        out.push(SceneField::Background);
    }
    out
}

/// One benchmark case: a source scene, its target edit and the task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTriplet {
    pub source: ToyScene,
    pub target: ToyScene,
    pub category: TaskCategory,
    pub render_seed: u64,
}

impl EditTriplet {
    pub fn source_caption(&self) -> Caption {
        self.source.caption()
    }

    pub fn target_caption(&self) -> Caption {
        self.target.caption()
    }

    /// Source and target must differ in exactly the category's permitted
    /// fields.
    pub fn validate(&self) -> Result<()> {
        let diff = differing_fields(&self.source, &self.target);
        let permitted = self.category.permitted_fields();
        if diff.len() == permitted.len() && permitted.iter().all(|f| diff.contains(f)) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} triplet changes {:?}, permitted {:?}",
                self.category.label(),
                diff,
                permitted
            )))
        }
    }
}

fn mutate<T: PartialEq + Copy>(rng: &mut ChaCha8Rng, current: T, options: &[T]) -> T {
    let others: Vec<T> = options.iter().copied().filter(|o| *o != current).collect();
    *others.choose(rng).expect("at least two options per field")
}

/// Generate `n_per_task` triplets per category (default protocol: 20 each,
/// 100 in total).
pub fn generate_benchmark(n_per_task: usize, seed: u64) -> Result<Vec<EditTriplet>> {
    if n_per_task < 1 {
        return Err(Error::invalid("n_per_task must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_positions: Vec<GridPos> = (0..3u8)
        .flat_map(|row| (0..3u8).map(move |col| GridPos { row, col }))
        .collect();
    let mut out = Vec::with_capacity(n_per_task * TASK_CATEGORIES.len());
    for category in TASK_CATEGORIES {
        for i in 0..n_per_task {
            let source = ToyScene {
                shape: *SHAPES.as_slice().choose(&mut rng).unwrap(),
                color: *COLORS.as_slice().choose(&mut rng).unwrap(),
                size: *SIZES.as_slice().choose(&mut rng).unwrap(),
                position: *all_positions.choose(&mut rng).unwrap(),
                background: *BACKGROUNDS.as_slice().choose(&mut rng).unwrap(),
            };
            let mut target = source;
            for field in category.permitted_fields() {
                match field {
                    SceneField::Shape => target.shape = mutate(&mut rng, source.shape, &SHAPES),
                    SceneField::Color => target.color = mutate(&mut rng, source.color, &COLORS),
                    SceneField::Size => target.size = mutate(&mut rng, source.size, &SIZES),
                    SceneField::Position => {
                        target.position = mutate(&mut rng, source.position, &all_positions)
                    }
                    SceneField::Background => {
                        target.background = mutate(&mut rng, source.background, &BACKGROUNDS)
                    }
                }
            }
            let triplet = EditTriplet {
                source,
                target,
                category,
                render_seed: seed.wrapping_add((out.len() + i) as u64).wrapping_mul(0x9e37),
            };
            triplet.validate()?;
            out.push(triplet);
        }
    }
    Ok(out)
}
