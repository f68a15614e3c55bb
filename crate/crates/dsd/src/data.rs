//! Deterministic compositional-shapes dataset: two colored shapes in a
//! spatial relation, rendered at 32x32, captioned by a fixed six-token
//! grammar, and bundled into N-way caption-matching instances whose
//! negatives differ from the truth in exactly one slot.
//!
//! Pixels are never persisted; a [`Scene`] re-renders bit-identically from
//! its stored fields, so dataset files carry scenes plus candidate token
//! ids only.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive, SplitMix64};

pub const IMAGE_SIZE: usize = 32;
pub const CAPTION_LEN: usize = 6;

/// Stream labels for seed derivation.
const LABEL_NEGATIVES: u64 = 0x4E45_47;
const LABEL_MUTATE: u64 = 0x4D55_54;
pub const LABEL_SCORE_NOISE: u64 = 0x4E4F_49;

// ── attribute domains ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Predicate {
    pub const ALL: [Predicate; 4] = [
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Above,
        Predicate::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left_of",
            Predicate::RightOf => "right_of",
            Predicate::Above => "above",
            Predicate::Below => "below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
}

/// Caption slot a negative candidate was mutated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Subject,
    Predicate,
    Object,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Slot::Subject => "subject",
            Slot::Predicate => "predicate",
            Slot::Object => "object",
        };
        f.write_str(s)
    }
}

// ── vocabulary ──────────────────────────────────────────────────────────

pub const BOS_TOKEN: &str = "<bos>";

/// Fixed caption vocabulary: BOS, colors, shapes, predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words = vec![BOS_TOKEN.to_string()];
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        words.extend(Predicate::ALL.iter().map(|p| p.name().to_string()));
        Vocab { words }
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(format!("unknown word '{word}'")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
    }
}

// ── core types ──────────────────────────────────────────────────────────

/// Token-id caption. Fixed layout:
/// `[BOS, color1, shape1, predicate, color2, shape2]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub ids: Vec<usize>,
}

/// Per-scene position and size perturbations, derived from the scene seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    pub subject_offset: (i32, i32),
    pub object_offset: (i32, i32),
    pub subject_halfsize: i32,
    pub object_halfsize: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub subject: ObjectSpec,
    pub object: ObjectSpec,
    pub predicate: Predicate,
    pub seed: u64,
    pub jitter: Jitter,
}

/// 32x32 RGB raster, row-major `(y, x, channel)`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn white() -> Self {
        Image {
            pixels: vec![1.0; IMAGE_SIZE * IMAGE_SIZE * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let base = (y * IMAGE_SIZE + x) * 3;
        [
            self.pixels[base],
            self.pixels[base + 1],
            self.pixels[base + 2],
        ]
    }

    fn put(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let base = (y * IMAGE_SIZE + x) * 3;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }
}

/// One matching problem: a rendered scene plus candidate captions, exactly
/// one of which is the scene's own caption.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchInstance {
    pub scene: Scene,
    pub candidates: Vec<Caption>,
    pub true_index: usize,
}

// ── generation ──────────────────────────────────────────────────────────

fn draw_object(rng: &mut SplitMix64) -> ObjectSpec {
    ObjectSpec {
        color: Color::ALL[rng.next_index(Color::ALL.len())],
        shape: Shape::ALL[rng.next_index(Shape::ALL.len())],
    }
}

fn draw_jitter(rng: &mut SplitMix64) -> Jitter {
    let subject_offset = (
        rng.next_index(5) as i32 - 2, // -2..=2
        rng.next_index(5) as i32 - 2,
    );
    let object_offset = (
        rng.next_index(5) as i32 - 2,
        rng.next_index(5) as i32 - 2,
    );
    Jitter {
        subject_offset,
        object_offset,
        subject_halfsize: 3 + rng.next_index(3) as i32, // 3..=5
        object_halfsize: 3 + rng.next_index(3) as i32,
    }
}

/// Uniform scene draw. Same seed, same scene, always.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = SplitMix64::new(seed);
    let subject = draw_object(&mut rng);
    let object = draw_object(&mut rng);
    let predicate = Predicate::ALL[rng.next_index(Predicate::ALL.len())];
    let jitter = draw_jitter(&mut rng);
    Scene {
        subject,
        object,
        predicate,
        seed,
        jitter,
    }
}

/// Centers implied by the predicate, before jitter. Canvas rows grow
/// downward, so "above" means a smaller y.
fn base_centers(predicate: Predicate) -> ((i32, i32), (i32, i32)) {
    match predicate {
        Predicate::LeftOf => ((8, 16), (24, 16)),
        Predicate::RightOf => ((24, 16), (8, 16)),
        Predicate::Above => ((16, 8), (16, 24)),
        Predicate::Below => ((16, 24), (16, 8)),
    }
}

/// Jittered (x, y) centers for subject and object. Offsets are at most 2
/// and half-sizes at most 5, so the shapes stay in-canvas and the 16px
/// center gap on the predicate axis can never close.
pub fn placements(scene: &Scene) -> ((i32, i32), (i32, i32)) {
    let ((sx, sy), (ox, oy)) = base_centers(scene.predicate);
    let j = &scene.jitter;
    (
        (sx + j.subject_offset.0, sy + j.subject_offset.1),
        (ox + j.object_offset.0, oy + j.object_offset.1),
    )
}

fn covered(shape: Shape, cx: i32, cy: i32, half: i32, x: i32, y: i32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Circle => dx * dx + dy * dy <= half * half,
        // Upward-pointing triangle: apex at cy - half, full width at the base.
        Shape::Triangle => dy >= -half && dy <= half && 2 * dx.abs() <= dy + half,
    }
}

/// Hard-edged rasterization onto a white background. Pure function of the
/// scene; no antialiasing.
pub fn render(scene: &Scene) -> Image {
    let mut img = Image::white();
    let ((sx, sy), (ox, oy)) = placements(scene);
    let draws = [
        (scene.object, ox, oy, scene.jitter.object_halfsize),
        (scene.subject, sx, sy, scene.jitter.subject_halfsize),
    ];
    for (spec, cx, cy, half) in draws {
        let rgb = spec.color.rgb();
        for y in (cy - half).max(0)..=(cy + half).min(IMAGE_SIZE as i32 - 1) {
            for x in (cx - half).max(0)..=(cx + half).min(IMAGE_SIZE as i32 - 1) {
                if covered(spec.shape, cx, cy, half, x, y) {
                    img.put(y as usize, x as usize, rgb);
                }
            }
        }
    }
    img
}

// ── captions ────────────────────────────────────────────────────────────

/// Scene to caption. Fixed token order: color1 shape1 predicate color2 shape2.
pub fn tokenize(scene: &Scene, vocab: &Vocab) -> Result<Caption> {
    let words = [
        BOS_TOKEN,
        scene.subject.color.name(),
        scene.subject.shape.name(),
        scene.predicate.name(),
        scene.object.color.name(),
        scene.object.shape.name(),
    ];
    let ids = words
        .iter()
        .map(|w| vocab.id(w))
        .collect::<Result<Vec<_>>>()?;
    Ok(Caption { ids })
}

/// Caption back to text (BOS dropped).
pub fn detokenize(caption: &Caption, vocab: &Vocab) -> Result<String> {
    if caption.ids.len() != CAPTION_LEN {
        return Err(Error::Vocabulary(format!(
            "caption must have {CAPTION_LEN} tokens, got {}",
            caption.ids.len()
        )));
    }
    let words = caption.ids[1..]
        .iter()
        .map(|&id| vocab.word(id))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Parse "color shape predicate color shape" text into a caption.
pub fn parse_caption(text: &str, vocab: &Vocab) -> Result<Caption> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() != CAPTION_LEN - 1 {
        return Err(Error::Vocabulary(format!(
            "caption text needs {} words, got {}",
            CAPTION_LEN - 1,
            words.len()
        )));
    }
    let mut ids = vec![vocab.id(BOS_TOKEN)?];
    for w in words {
        ids.push(vocab.id(w)?);
    }
    Ok(Caption { ids })
}

// ── mutation ────────────────────────────────────────────────────────────

fn mutate_object(current: ObjectSpec, rng: &mut SplitMix64) -> ObjectSpec {
    let mut pool = Vec::with_capacity(Color::ALL.len() * Shape::ALL.len() - 1);
    for &color in &Color::ALL {
        for &shape in &Shape::ALL {
            let candidate = ObjectSpec { color, shape };
            if candidate != current {
                pool.push(candidate);
            }
        }
    }
    pool[rng.next_index(pool.len())]
}

/// Replace exactly the named slot with a different uniformly drawn value.
/// Seed and jitter carry over, so a mutated scene still renders
/// consistently with its own (new) predicate.
pub fn mutate(scene: &Scene, slot: Slot, seed: u64) -> Scene {
    let mut rng = SplitMix64::new(derive(seed, LABEL_MUTATE));
    let mut out = scene.clone();
    match slot {
        Slot::Subject => out.subject = mutate_object(scene.subject, &mut rng),
        Slot::Object => out.object = mutate_object(scene.object, &mut rng),
        Slot::Predicate => {
            let pool: Vec<Predicate> = Predicate::ALL
                .iter()
                .copied()
                .filter(|&p| p != scene.predicate)
                .collect();
            out.predicate = pool[rng.next_index(pool.len())];
        }
    }
    out
}

/// Which slot two captions differ in, if they differ in exactly one.
pub fn mutated_slot(positive: &Caption, candidate: &Caption) -> Option<Slot> {
    let p = &positive.ids;
    let c = &candidate.ids;
    if p.len() != CAPTION_LEN || c.len() != CAPTION_LEN {
        return None;
    }
    let subject_diff = p[1] != c[1] || p[2] != c[2];
    let predicate_diff = p[3] != c[3];
    let object_diff = p[4] != c[4] || p[5] != c[5];
    match (subject_diff, predicate_diff, object_diff) {
        (true, false, false) => Some(Slot::Subject),
        (false, true, false) => Some(Slot::Predicate),
        (false, false, true) => Some(Slot::Object),
        _ => None,
    }
}

// ── dataset assembly ────────────────────────────────────────────────────

/// Most distinct candidates a single scene supports: the positive plus all
/// single-slot mutants (11 subject + 11 object + 3 predicate).
pub const MAX_CANDIDATES: usize = 26;

fn build_instance(scene_seed: u64, candidates: usize, vocab: &Vocab) -> Result<MatchInstance> {
    let scene = generate_scene(scene_seed);
    let positive = tokenize(&scene, vocab)?;

    let mut rng = SplitMix64::new(derive(scene_seed, LABEL_NEGATIVES));
    let mut negatives: Vec<Caption> = Vec::with_capacity(candidates - 1);
    while negatives.len() < candidates - 1 {
        let slot = match rng.next_index(3) {
            0 => Slot::Subject,
            1 => Slot::Predicate,
            _ => Slot::Object,
        };
        let mutant = mutate(&scene, slot, rng.next_u64());
        let caption = tokenize(&mutant, vocab)?;
        if caption != positive && !negatives.contains(&caption) {
            negatives.push(caption);
        }
    }

    let true_index = rng.next_index(candidates);
    let mut cands = Vec::with_capacity(candidates);
    let mut it = negatives.into_iter();
    for pos in 0..candidates {
        if pos == true_index {
            cands.push(positive.clone());
        } else {
            cands.push(it.next().expect("negative count"));
        }
    }
    Ok(MatchInstance {
        scene,
        candidates: cands,
        true_index,
    })
}

/// Deterministic train/eval splits. Scene seeds are derived from the split
/// seed by index, train first, so the two splits never share a scene.
pub fn build_dataset(
    n_train: usize,
    n_eval: usize,
    candidates_per_instance: usize,
    seed: u64,
) -> Result<(Vec<MatchInstance>, Vec<MatchInstance>)> {
    if candidates_per_instance < 2 {
        return Err(Error::Parameter(format!(
            "candidates_per_instance must be >= 2, got {candidates_per_instance}"
        )));
    }
    if candidates_per_instance > MAX_CANDIDATES {
        return Err(Error::Parameter(format!(
            "candidates_per_instance must be <= {MAX_CANDIDATES}, got {candidates_per_instance}"
        )));
    }
    let vocab = Vocab::default();
    let mut all = Vec::with_capacity(n_train + n_eval);
    for i in 0..n_train + n_eval {
        all.push(build_instance(
            derive(seed, i as u64),
            candidates_per_instance,
            &vocab,
        )?);
    }
    let eval = all.split_off(n_train);
    Ok((all, eval))
}

// ── file format ─────────────────────────────────────────────────────────

/// One JSONL record. Jitter is recomputed from the seed on load, pixels are
/// re-rendered, so this is the whole instance.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    seed: u64,
    subject: ObjectSpec,
    object: ObjectSpec,
    predicate: Predicate,
    candidates: Vec<Vec<usize>>,
    true_index: usize,
}

pub fn write_instances(path: &Path, instances: &[MatchInstance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let rec = InstanceRecord {
            seed: inst.scene.seed,
            subject: inst.scene.subject,
            object: inst.scene.object,
            predicate: inst.scene.predicate,
            candidates: inst.candidates.iter().map(|c| c.ids.clone()).collect(),
            true_index: inst.true_index,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<MatchInstance>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let scene = Scene {
            subject: rec.subject,
            object: rec.object,
            predicate: rec.predicate,
            seed: rec.seed,
            jitter: generate_scene(rec.seed).jitter,
        };
        if rec.true_index >= rec.candidates.len() {
            return Err(Error::Format(format!(
                "{}:{}: true_index out of range",
                path.display(),
                lineno + 1
            )));
        }
        out.push(MatchInstance {
            scene,
            candidates: rec
                .candidates
                .into_iter()
                .map(|ids| Caption { ids })
                .collect(),
            true_index: rec.true_index,
        });
    }
    Ok(out)
}

/// Scene-only JSON (the `score` CLI input).
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub subject: ObjectSpec,
    pub object: ObjectSpec,
    pub predicate: Predicate,
}

impl SceneRecord {
    pub fn into_scene(self) -> Scene {
        Scene {
            subject: self.subject,
            object: self.object,
            predicate: self.predicate,
            seed: self.seed,
            jitter: generate_scene(self.seed).jitter,
        }
    }

    pub fn from_scene(scene: &Scene) -> Self {
        SceneRecord {
            seed: scene.seed,
            subject: scene.subject,
            object: scene.object,
            predicate: scene.predicate,
        }
    }
}
