//! Synthetic paired corpus: rendered shapes with sentence reports and known
//! sentence-to-region alignment.
//!
//! Each image is 32x32x3 split into four 16x16 quadrants; each quadrant holds
//! at most one object. On the 4x4 encoder grid a quadrant covers exactly four
//! sub-regions, indexed `row * 4 + col`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const GRID: usize = 4;
pub const NUM_CLASSES: usize = 4;
pub const NOISE_STD: f64 = 0.02;
/// Fraction of reports carrying a distractor sentence unless told otherwise.
pub const DEFAULT_DISTRACTOR_RATE: f64 = 0.1;
const PIXEL_QUANTUM: f64 = 1e-4;

pub type Token = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Cross,
    Bar,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Cross, Shape::Bar, Shape::Ring];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Cross => "cross",
            Shape::Bar => "bar",
            Shape::Ring => "ring",
        }
    }

    fn covers(self, dy: f64, dx: f64) -> bool {
        let r = (dy * dy + dx * dx).sqrt();
        match self {
            Shape::Disc => r <= 5.5,
            Shape::Ring => (3.5..=6.0).contains(&r),
            Shape::Cross => {
                (dy.abs() <= 1.5 && dx.abs() <= 6.0) || (dx.abs() <= 1.5 && dy.abs() <= 6.0)
            }
            Shape::Bar => dy.abs() <= 2.0 && dx.abs() <= 6.5,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn origin(self) -> (usize, usize) {
        let h = IMAGE_SIZE / 2;
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, h),
            Quadrant::BottomLeft => (h, 0),
            Quadrant::BottomRight => (h, h),
        }
    }

    /// Encoder sub-regions covered by this quadrant, ascending.
    pub fn regions(self) -> Vec<usize> {
        let half = GRID / 2;
        let (r0, c0) = match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, half),
            Quadrant::BottomLeft => (half, 0),
            Quadrant::BottomRight => (half, half),
        };
        let mut out = Vec::with_capacity(half * half);
        for r in r0..r0 + half {
            for c in c0..c0 + half {
                out.push(r * GRID + c);
            }
        }
        out
    }
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn intensity(self) -> f64 {
        match self {
            Severity::Mild => 0.4,
            Severity::Moderate => 0.7,
            Severity::Severe => 1.0,
        }
    }
}

/// The fixed vocabulary. Id 0 is padding and never appears in a sentence.
pub mod vocab {
    use super::Token;

    pub const PAD: Token = 0;
    pub const MILD: Token = 1;
    pub const MODERATE: Token = 2;
    pub const SEVERE: Token = 3;
    pub const DISC: Token = 4;
    pub const CROSS: Token = 5;
    pub const BAR: Token = 6;
    pub const RING: Token = 7;
    pub const IN: Token = 8;
    pub const UPPER_LEFT: Token = 9;
    pub const UPPER_RIGHT: Token = 10;
    pub const LOWER_LEFT: Token = 11;
    pub const LOWER_RIGHT: Token = 12;
    pub const COMMA: Token = 13;
    pub const REGION: Token = 14;
    pub const IMAGE: Token = 15;
    pub const ACQUIRED: Token = 16;
    pub const ROUTINELY: Token = 17;
    pub const IS: Token = 18;
    pub const OBSERVED: Token = 19;
    pub const ANY: Token = 20;
    pub const QUADRANT: Token = 21;

    pub const WORDS: [&str; 22] = [
        "<pad>",
        "mild",
        "moderate",
        "severe",
        "disc",
        "cross",
        "bar",
        "ring",
        "in",
        "upper-left",
        "upper-right",
        "lower-left",
        "lower-right",
        ",",
        "region",
        "image",
        "acquired",
        "routinely",
        "is",
        "observed",
        "any",
        "quadrant",
    ];

    pub const SIZE: usize = WORDS.len();
}

fn shape_token(s: Shape) -> Token {
    vocab::DISC + s.index() as Token
}

fn quadrant_token(q: Quadrant) -> Token {
    vocab::UPPER_LEFT + q.index() as Token
}

fn severity_token(s: Severity) -> Token {
    vocab::MILD + s as Token
}

/// What a non-distractor sentence states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Meaning {
    pub shape: Shape,
    pub quadrant: Quadrant,
    pub severity: Severity,
}

impl Meaning {
    /// All 48 meanings in a fixed order.
    pub fn all() -> Vec<Meaning> {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for quadrant in Quadrant::ALL {
                for severity in Severity::ALL {
                    out.push(Meaning {
                        shape,
                        quadrant,
                        severity,
                    });
                }
            }
        }
        out
    }

    /// `<severity> <shape> in <quadrant>`.
    pub fn canonical(self) -> Vec<Token> {
        vec![
            severity_token(self.severity),
            shape_token(self.shape),
            vocab::IN,
            quadrant_token(self.quadrant),
        ]
    }

    /// `<shape> , <severity> , <quadrant> region`.
    pub fn paraphrase(self) -> Vec<Token> {
        vec![
            shape_token(self.shape),
            vocab::COMMA,
            severity_token(self.severity),
            vocab::COMMA,
            quadrant_token(self.quadrant),
            vocab::REGION,
        ]
    }

    pub fn render(self, template: Template) -> Vec<Token> {
        match template {
            Template::Canonical => self.canonical(),
            Template::Paraphrase => self.paraphrase(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    Canonical,
    Paraphrase,
}

pub fn distractor_sentence() -> Vec<Token> {
    vec![vocab::IMAGE, vocab::ACQUIRED, vocab::ROUTINELY]
}

/// Class prompt, the grammar's rendering of "<shape> is observed".
pub fn prompt(shape: Shape) -> Vec<Token> {
    vec![shape_token(shape), vocab::IN, vocab::ANY, vocab::QUADRANT]
}

pub fn prompts() -> Vec<Vec<Token>> {
    Shape::ALL.iter().map(|&s| prompt(s)).collect()
}

/// Parsed form of a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parsed {
    Finding(Meaning, Template),
    Distractor,
}

pub fn parse_sentence(tokens: &[Token]) -> Option<Parsed> {
    let shape = |t: Token| {
        (vocab::DISC..=vocab::RING)
            .contains(&t)
            .then(|| Shape::ALL[(t - vocab::DISC) as usize])
    };
    let quad = |t: Token| {
        (vocab::UPPER_LEFT..=vocab::LOWER_RIGHT)
            .contains(&t)
            .then(|| Quadrant::ALL[(t - vocab::UPPER_LEFT) as usize])
    };
    let sev = |t: Token| {
        (vocab::MILD..=vocab::SEVERE)
            .contains(&t)
            .then(|| Severity::ALL[(t - vocab::MILD) as usize])
    };
    match tokens {
        [s, sh, vocab::IN, q] => Some(Parsed::Finding(
            Meaning {
                shape: shape(*sh)?,
                quadrant: quad(*q)?,
                severity: sev(*s)?,
            },
            Template::Canonical,
        )),
        [sh, vocab::COMMA, s, vocab::COMMA, q, vocab::REGION] => Some(Parsed::Finding(
            Meaning {
                shape: shape(*sh)?,
                quadrant: quad(*q)?,
                severity: sev(*s)?,
            },
            Template::Paraphrase,
        )),
        [vocab::IMAGE, vocab::ACQUIRED, vocab::ROUTINELY] => Some(Parsed::Distractor),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub meaning: Meaning,
    pub template: Template,
}

/// Scene content; distinct quadrants, one to four objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub distractor: bool,
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn sample(rng: &mut impl Rng, distractor_rate: f64) -> Self {
        let count = rng.gen_range(1..=4);
        let mut quads = Quadrant::ALL;
        quads.shuffle(rng);
        let objects = quads[..count]
            .iter()
            .map(|&quadrant| ObjectSpec {
                meaning: Meaning {
                    shape: Shape::ALL[rng.gen_range(0..4)],
                    quadrant,
                    severity: Severity::ALL[rng.gen_range(0..3)],
                },
                template: if rng.gen_bool(0.5) {
                    Template::Paraphrase
                } else {
                    Template::Canonical
                },
            })
            .collect();
        let distractor = rng.gen::<f64>() < distractor_rate;
        let noise_seed = rng.gen();
        Self {
            objects,
            distractor,
            noise_seed,
        }
    }

    /// Renders the image and the shuffled report.
    pub fn render(&self, id: usize) -> ImageReportPair {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut image = vec![0.0; IMAGE_LEN];
        for obj in &self.objects {
            let (r0, c0) = obj.meaning.quadrant.origin();
            let jy = rng.gen_range(-1i32..=1) as f64;
            let jx = rng.gen_range(-1i32..=1) as f64;
            let cy = r0 as f64 + 7.5 + jy;
            let cx = c0 as f64 + 7.5 + jx;
            let value = obj.meaning.severity.intensity();
            for y in r0..r0 + IMAGE_SIZE / 2 {
                for x in c0..c0 + IMAGE_SIZE / 2 {
                    if obj.meaning.shape.covers(y as f64 - cy, x as f64 - cx) {
                        let base = (y * IMAGE_SIZE + x) * CHANNELS;
                        image[base..base + CHANNELS]
                            .iter_mut()
                            .for_each(|p| *p = value);
                    }
                }
            }
        }
        for p in &mut image {
            let noise: f64 = rng.sample(StandardNormal);
            let v = (*p + NOISE_STD * noise).clamp(0.0, 1.0);
            *p = (v / PIXEL_QUANTUM).round() * PIXEL_QUANTUM;
        }

        let mut entries: Vec<(Vec<Token>, Vec<usize>)> = self
            .objects
            .iter()
            .map(|o| (o.meaning.render(o.template), o.meaning.quadrant.regions()))
            .collect();
        if self.distractor {
            entries.push((distractor_sentence(), Vec::new()));
        }
        entries.shuffle(&mut rng);
        let mut labels = vec![0u8; NUM_CLASSES];
        for o in &self.objects {
            labels[o.meaning.shape.index()] = 1;
        }
        let (sentences, gt_alignment) = entries.into_iter().unzip();
        ImageReportPair {
            id,
            image,
            sentences,
            gt_alignment,
            labels,
        }
    }
}

/// One corpus record. `image` is row-major `[H, W, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReportPair {
    pub id: usize,
    pub image: Vec<f64>,
    pub sentences: Vec<Vec<Token>>,
    /// Sub-regions described by each sentence; empty for distractors.
    pub gt_alignment: Vec<Vec<usize>>,
    /// Multi-hot shape presence.
    pub labels: Vec<u8>,
}

impl ImageReportPair {
    /// Sentences sorted by token sequence, alignment permuted to match.
    ///
    /// The model consumes this order so that every loss and metric is
    /// independent of how a report's sentences were shuffled.
    pub fn canonical(&self) -> ImageReportPair {
        let mut entries: Vec<(Vec<Token>, Vec<usize>)> = self
            .sentences
            .iter()
            .cloned()
            .zip(self.gt_alignment.iter().cloned())
            .collect();
        entries.sort();
        let (sentences, gt_alignment) = entries.into_iter().unzip();
        ImageReportPair {
            sentences,
            gt_alignment,
            ..self.clone()
        }
    }

    /// The class index when exactly one shape class is present.
    pub fn exclusive_label(&self) -> Option<usize> {
        let present: Vec<usize> = (0..self.labels.len())
            .filter(|&c| self.labels[c] == 1)
            .collect();
        (present.len() == 1).then(|| present[0])
    }

    fn validate(&self, record: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::Corpus { record, reason });
        if self.image.len() != IMAGE_LEN {
            return fail(format!(
                "image has {} values, expected {IMAGE_LEN}",
                self.image.len()
            ));
        }
        if let Some(i) = self.image.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return fail(format!("pixel {i} outside [0, 1]"));
        }
        if self.sentences.is_empty() {
            return fail("report has no sentences".into());
        }
        if self.gt_alignment.len() != self.sentences.len() {
            return fail(format!(
                "{} alignments for {} sentences",
                self.gt_alignment.len(),
                self.sentences.len()
            ));
        }
        for (u, s) in self.sentences.iter().enumerate() {
            if s.is_empty() {
                return fail(format!("sentence {u} is empty"));
            }
            if let Some(t) = s
                .iter()
                .find(|&&t| t == vocab::PAD || t as usize >= vocab::SIZE)
            {
                return fail(format!("sentence {u} has invalid token {t}"));
            }
        }
        let cells = GRID * GRID;
        if self.gt_alignment.iter().flatten().any(|&r| r >= cells) {
            return fail(format!("alignment region outside 0..{cells}"));
        }
        if self.labels.len() != NUM_CLASSES || self.labels.iter().any(|&l| l > 1) {
            return fail("labels must be 4 binary entries".into());
        }
        Ok(())
    }
}

/// Record `i` depends only on `(seed, i)`.
pub fn generate_corpus(n: usize, seed: u64, distractor_rate: f64) -> Result<Vec<ImageReportPair>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    if !(0.0..1.0).contains(&distractor_rate) {
        return Err(Error::invalid(format!(
            "distractor rate must lie in [0, 1), got {distractor_rate}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            SceneSpec::sample(&mut rng, distractor_rate).render(i)
        })
        .collect())
}

pub fn write_corpus(path: &Path, pairs: &[ImageReportPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Corpus {
            record: p.id,
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<ImageReportPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ImageReportPair = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            record: i,
            reason: format!("line {}, column {}: {e}", i + 1, e.column()),
        })?;
        pair.validate(i)?;
        out.push(pair);
    }
    if out.is_empty() {
        return Err(Error::Corpus {
            record: 0,
            reason: "corpus is empty".into(),
        });
    }
    Ok(out)
}

/// Deterministic split: the last `test_fraction` of records is held out.
pub fn split(
    pairs: &[ImageReportPair],
    test_fraction: f64,
) -> (Vec<ImageReportPair>, Vec<ImageReportPair>) {
    let n_test = ((pairs.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(pairs.len().saturating_sub(1));
    let cut = pairs.len() - n_test;
    (pairs[..cut].to_vec(), pairs[cut..].to_vec())
}
