//! Deterministic synthetic image-caption corpus: parametric scenes of 1–4
//! colored shapes on a 3×3 cell grid, rendered with anti-aliased
//! rasterization at log-uniform native resolutions, captioned by templates,
//! plus a closed word-level vocabulary, instruction (question/answer) pairs,
//! and the word-frequency prior.
//!
//! Everything is a pure function of a 64-bit seed, so any sample can be
//! regenerated independently and training order carries no hidden state.

use crate::align::PriorMarginal;
use crate::error::{Error, Result};
use crate::patcher::ImageSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Closed word list; line index in the vocabulary file = token id.
const CORE_WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", // specials first, ids 0..3
    "a", "the", "at", "and", "is", // function words
    "what", "color", "shape", "shapes", "where", "how", "many", // question words
    "one", "two", "three", "four", // counts
    "small", "large", // sizes
    "red", "blue", "green", "yellow", "orange", "purple", "white", "gray", // colors
    "circle", "square", "triangle", "bar", // shapes
    "top", "middle", "bottom", // rows
    "left", "center", "right", // columns
];

const COLOR_WORDS: [&str; 8] = ["red", "blue", "green", "yellow", "orange", "purple", "white", "gray"];
const COLOR_RGB: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.30, 0.90],
    [0.10, 0.75, 0.20],
    [0.95, 0.85, 0.10],
    [0.95, 0.55, 0.10],
    [0.60, 0.20, 0.80],
    [0.95, 0.95, 0.95],
    [0.50, 0.50, 0.50],
];
const BACKGROUND: [f32; 3] = [0.06, 0.06, 0.09];
const SHAPE_WORDS: [&str; 4] = ["circle", "square", "triangle", "bar"];
const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];
const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub fn word(self) -> &'static str {
        SHAPE_WORDS[self as usize]
    }

    fn from_index(i: usize) -> Shape {
        match i {
            0 => Shape::Circle,
            1 => Shape::Square,
            2 => Shape::Triangle,
            _ => Shape::Bar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Palette index into the 8-color table.
    pub color: usize,
    /// Quantized (row, col) position on the 3×3 grid.
    pub cell: (usize, usize),
    pub large: bool,
}

impl SceneObject {
    pub fn color_word(&self) -> &'static str {
        COLOR_WORDS[self.color]
    }

    pub fn size_word(&self) -> &'static str {
        if self.large {
            "large"
        } else {
            "small"
        }
    }

    pub fn row_word(&self) -> &'static str {
        ROW_WORDS[self.cell.0]
    }

    pub fn col_word(&self) -> &'static str {
        COL_WORDS[self.cell.1]
    }
}

/// Fully seed-determined scene description; rendering and captioning are pure
/// functions of this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    /// Log-uniform canvas side range, in pixels, independently per axis.
    pub min_side: usize,
    pub max_side: usize,
    /// Scenes hold 1..=max_objects shapes on distinct cells (≤ 9).
    pub max_objects: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_side: 112,
            max_side: 896,
            max_objects: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::InvalidArg {
                op: "corpus_config",
                detail: format!("side range [{}, {}] is empty", self.min_side, self.max_side),
            });
        }
        if self.max_objects == 0 || self.max_objects > 9 {
            return Err(Error::InvalidArg {
                op: "corpus_config",
                detail: format!("max_objects {} not in 1..=9 (cells are distinct)", self.max_objects),
            });
        }
        Ok(())
    }
}

/// splitmix64 finalizer: decorrelates structured (seed, stream, index)
/// triples into per-sample generator seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed for (run seed, stream tag, sample index). Streams keep
/// stages and splits (train/held-out) from replaying each other's scenes.
pub fn sample_seed(run_seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64(stream.wrapping_mul(0xA076_1D64_78BD_642F).wrapping_add(index)))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let v = rng.random_range(a..b).exp().round() as usize;
    v.clamp(lo, hi)
}

/// Draw the scene for a seed: canvas from the log-uniform range, 1..=max
/// objects on distinct cells with independent shape/color/size.
pub fn scene_from_seed(seed: u64, cfg: &CorpusConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas_h = log_uniform(&mut rng, cfg.min_side, cfg.max_side);
    let canvas_w = log_uniform(&mut rng, cfg.min_side, cfg.max_side);
    let n = rng.random_range(1..=cfg.max_objects);
    // partial Fisher-Yates over the 9 cells → distinct positions
    let mut cells: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    for i in 0..n {
        let j = rng.random_range(i..9);
        cells.swap(i, j);
    }
    let objects = (0..n)
        .map(|i| SceneObject {
            shape: Shape::from_index(rng.random_range(0..4)),
            color: rng.random_range(0..8),
            cell: (cells[i] / 3, cells[i] % 3),
            large: rng.random_bool(0.5),
        })
        .collect();
    Ok(SceneSpec {
        canvas_h,
        canvas_w,
        objects,
    })
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
        Shape::Triangle => {
            // upward triangle: apex (0, −r), base (±0.9r, +0.75r)
            let v = [(0.0, -r), (-0.9 * r, 0.75 * r), (0.9 * r, 0.75 * r)];
            let mut sign = 0.0f64;
            for i in 0..3 {
                let (x0, y0) = v[i];
                let (x1, y1) = v[(i + 1) % 3];
                let cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0);
                if cross != 0.0 {
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
            }
            true
        }
        Shape::Bar => dx.abs() <= 0.35 * r && dy.abs() <= 1.15 * r,
    }
}

/// Rasterize with 3×3 supersampled coverage per pixel (anti-aliasing);
/// objects draw in order, later over earlier. Pixels are RGB in [0,1],
/// channel-major.
pub fn render(spec: &SceneSpec) -> Result<ImageSpec<f32>> {
    let (h, w) = (spec.canvas_h, spec.canvas_w);
    let mut img = ImageSpec::constant(h, w, 3, 0.0f32)?;
    for c in 0..3 {
        for i in 0..h * w {
            img.pixels[c * h * w + i] = BACKGROUND[c];
        }
    }
    let cell_min = (h.min(w) as f64) / 3.0;
    for obj in &spec.objects {
        let r = cell_min * if obj.large { 0.38 } else { 0.22 };
        let cx = (obj.cell.1 as f64 + 0.5) * w as f64 / 3.0;
        let cy = (obj.cell.0 as f64 + 0.5) * h as f64 / 3.0;
        // conservative bounding box: the largest shape extent is 1.15r + AA
        let reach = 1.2 * r + 1.0;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
        let rgb = COLOR_RGB[obj.color];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut hits = 0u32;
                for sy in 0..3 {
                    for sx in 0..3 {
                        let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                        if inside(obj.shape, px - cx, py - cy, r) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f32 / 9.0;
                for c in 0..3 {
                    let idx = (c * h + y) * w + x;
                    img.pixels[idx] = img.pixels[idx] * (1.0 - cov) + rgb[c] * cov;
                }
            }
        }
    }
    Ok(img)
}

/// Template caption: per object "a {size} {color} {shape} at the {row} {col}",
/// joined by "and". Truthful by construction; `check_caption_faithful`
/// re-derives that from the spec.
pub fn caption(spec: &SceneSpec) -> String {
    spec.objects
        .iter()
        .map(|o| {
            format!(
                "a {} {} {} at the {} {}",
                o.size_word(),
                o.color_word(),
                o.shape.word(),
                o.row_word(),
                o.col_word()
            )
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Assert the caption mentions every attribute of every object, token-wise.
/// Attributes come from the SceneSpec, never from pixels.
pub fn check_caption_faithful(spec: &SceneSpec, text: &str) -> Result<()> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    for (i, o) in spec.objects.iter().enumerate() {
        for word in [o.size_word(), o.color_word(), o.shape.word(), o.row_word(), o.col_word()] {
            if !tokens.contains(&word) {
                return Err(Error::Contract {
                    op: "caption_faithfulness",
                    detail: format!("object {i} attribute {word:?} missing from caption {text:?}"),
                });
            }
        }
    }
    Ok(())
}

/// Render + caption for one seed.
pub fn generate_pair(seed: u64, cfg: &CorpusConfig) -> Result<(ImageSpec<f32>, String)> {
    let spec = scene_from_seed(seed, cfg)?;
    let img = render(&spec)?;
    Ok((img, caption(&spec)))
}

/// Question/answer templates over a scene, used by the instruction stage.
/// The question kind is drawn from the seed; kinds that would be ambiguous
/// for the scene (duplicate shape, duplicate color+shape) fall back to the
/// always-valid count question.
pub fn instruction(spec: &SceneSpec, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = spec.objects[rng.random_range(0..spec.objects.len())];
    let kind = rng.random_range(0..4u32);
    let shape_unique = spec.objects.iter().filter(|o| o.shape == obj.shape).count() == 1;
    let combo_unique = spec
        .objects
        .iter()
        .filter(|o| o.shape == obj.shape && o.color == obj.color)
        .count()
        == 1;
    match kind {
        0 if shape_unique => (
            format!("what color is the {}", obj.shape.word()),
            obj.color_word().to_string(),
        ),
        1 => (
            format!("what shape is at the {} {}", obj.row_word(), obj.col_word()),
            obj.shape.word().to_string(),
        ),
        2 if combo_unique => (
            format!("where is the {} {}", obj.color_word(), obj.shape.word()),
            format!("at the {} {}", obj.row_word(), obj.col_word()),
        ),
        _ => (
            "how many shapes".to_string(),
            COUNT_WORDS[spec.objects.len() - 1].to_string(),
        ),
    }
}

/// Render + question/answer for one seed (question derived from the same
/// seed, offset so it does not replay the scene draws).
pub fn generate_instruction_pair(seed: u64, cfg: &CorpusConfig) -> Result<(ImageSpec<f32>, String, String)> {
    let spec = scene_from_seed(seed, cfg)?;
    let img = render(&spec)?;
    let (q, a) = instruction(&spec, splitmix64(seed));
    Ok((img, q, a))
}

/// Closed word-level vocabulary; id = position in the word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn core() -> Vocabulary {
        Vocabulary::from_words(CORE_WORDS.iter().map(|s| s.to_string()).collect()).expect("core list is valid")
    }

    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.len() < 3 {
            return Err(Error::Config(format!(
                "vocabulary needs at least the 3 special tokens, got {} words",
                words.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?} at line {i}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(|s| s.as_str()).ok_or_else(|| Error::Contract {
            op: "vocab.word",
            detail: format!("id {id} out of range for K={}", self.words.len()),
        })
    }

    /// BOS + whitespace-split word ids + EOS; "" → [BOS, EOS].
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            ids.push(self.id(w)?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of `tokenize` for text over the closed vocabulary: specials
    /// are dropped, words joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            words.push(self.word(id)?);
        }
        Ok(words.join(" "))
    }

    /// One word per line, line index = id.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut words = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                words.push(line);
            }
        }
        Vocabulary::from_words(words)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::core()
    }
}

/// Word-frequency prior u_W over the full vocabulary from a caption sample:
/// counts of caption words (specials never appear in raw text) normalized to
/// unit mass, with never-observed words floored.
pub fn compute_prior<'a>(captions: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> Result<PriorMarginal> {
    let mut counts = vec![0u64; vocab.size()];
    let mut seen = 0usize;
    for text in captions {
        seen += 1;
        for w in text.split_whitespace() {
            counts[vocab.id(w)?] += 1;
        }
    }
    if seen == 0 {
        return Err(Error::Contract {
            op: "compute_prior",
            detail: "prior needs at least one caption".into(),
        });
    }
    PriorMarginal::from_counts(&counts)
}
