//! Word-level tokenizer over a closed vocabulary, prompt templating with the
//! learnable token, and concept-span bookkeeping.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const LEARNABLE_ID: usize = 1;
pub const PAD_WORD: &str = "<pad>";
pub const LEARNABLE_WORD: &str = "<s*>";
/// Concept placeholder inside templates.
pub const PLACEHOLDER: &str = "{C}";
pub const DEFAULT_MAX_LEN: usize = 16;

const BUILTIN_WORDS: &[&str] = &[
    // function words and template glue
    "a", "an", "the", "on", "in", "of", "with", "and", "against", "over", "at", "near", "by", "front", "top",
    "photo", "picture", "image", "drawing", "rendering", "painting", "sketch", "view", "close", "up", "shot",
    "background", "backdrop", "scene", "canvas", "wall", "floor", "surface", "field", "setting", "studio",
    "placed", "sitting", "shown", "drawn", "centered", "lying", "floating", "standing", "resting",
    "small", "large", "big", "tiny", "simple", "single", "lonely", "bold", "flat", "solid", "bright", "dark",
    "one", "two", "some", "this", "that", "there", "is", "are", "here", "together", "beside", "next", "to",
    // classes and categories
    "shape", "square", "circle", "triangle",
    // concept surface names
    "tile", "flag", "coin", "ball", "wedge", "tent",
    // pattern words
    "plain", "striped",
    // palette
    "red", "green", "blue", "yellow", "white", "black", "cyan", "magenta", "gray",
];

/// Closed vocabulary; line `i` of the vocabulary file is token id `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD_ID] != PAD_WORD || words[LEARNABLE_ID] != LEARNABLE_WORD {
            return Err(Error::Prompt(format!("vocabulary must start with {PAD_WORD} and {LEARNABLE_WORD}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Prompt(format!("invalid vocabulary entry {w:?} at line {i}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Prompt(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn builtin() -> Self {
        let words = [PAD_WORD, LEARNABLE_WORD].iter().chain(BUILTIN_WORDS).map(|s| s.to_string()).collect();
        Self::new(words).expect("builtin vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Prompt(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize) with padding stripped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.word(i).ok_or_else(|| Error::Prompt(format!("token id {i} out of range"))))
            .collect();
        Ok(words?.join(" "))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Square,
    Circle,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Circle, ShapeClass::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Circle => "circle",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Plain,
    Striped,
}

impl Pattern {
    pub const ALL: [Pattern; 2] = [Pattern::Plain, Pattern::Striped];
}

/// Named colors. Glyph fills use the first four; backgrounds the next four;
/// gray is reserved for reference-image backgrounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
    Cyan,
    Magenta,
    Gray,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 9] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::White,
        PaletteColor::Black,
        PaletteColor::Cyan,
        PaletteColor::Magenta,
        PaletteColor::Gray,
    ];
    pub const GLYPH: [PaletteColor; 4] = [PaletteColor::Red, PaletteColor::Green, PaletteColor::Blue, PaletteColor::Yellow];
    pub const BACKGROUND: [PaletteColor; 4] =
        [PaletteColor::White, PaletteColor::Black, PaletteColor::Cyan, PaletteColor::Magenta];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            PaletteColor::Red => [1.0, 0.0, 0.0],
            PaletteColor::Green => [0.0, 1.0, 0.0],
            PaletteColor::Blue => [0.0, 0.0, 1.0],
            PaletteColor::Yellow => [1.0, 1.0, 0.0],
            PaletteColor::White => [1.0, 1.0, 1.0],
            PaletteColor::Black => [0.0, 0.0, 0.0],
            PaletteColor::Cyan => [0.0, 1.0, 1.0],
            PaletteColor::Magenta => [1.0, 0.0, 1.0],
            PaletteColor::Gray => [0.5, 0.5, 0.5],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::White => "white",
            PaletteColor::Black => "black",
            PaletteColor::Cyan => "cyan",
            PaletteColor::Magenta => "magenta",
            PaletteColor::Gray => "gray",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    /// Palette entry closest in squared RGB distance (ties resolve to the
    /// earlier entry).
    pub fn nearest(rgb: [f64; 3]) -> Self {
        let dist = |c: PaletteColor| c.rgb().iter().zip(&rgb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = Self::ALL[0];
        for c in Self::ALL {
            if dist(c) < dist(best) {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisualAttrs {
    pub shape: ShapeClass,
    pub color: PaletteColor,
    pub pattern: Pattern,
}

/// A concept with its three-level name hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: u32,
    pub surface_name: Vec<String>,
    pub parent_name: Vec<String>,
    pub broader_name: Vec<String>,
    pub attrs: VisualAttrs,
}

impl ConceptRecord {
    pub fn name(&self, level: NameLevel) -> &[String] {
        match level {
            NameLevel::Surface => &self.surface_name,
            NameLevel::Parent => &self.parent_name,
            NameLevel::Broader => &self.broader_name,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for level in NameLevel::ALL {
            let name = self.name(level);
            if name.is_empty() {
                return Err(Error::Prompt(format!("concept {} has an empty {level:?} name", self.concept_id)));
            }
            for w in name {
                vocab.id(w)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameLevel {
    Surface,
    Parent,
    Broader,
}

impl NameLevel {
    pub const ALL: [NameLevel; 3] = [NameLevel::Surface, NameLevel::Parent, NameLevel::Broader];
}

/// Categorical draw over (surface, parent, broader).
pub fn sample_name_level(rng: &mut impl Rng, probs: [f64; 3]) -> Result<NameLevel> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Prompt(format!("name-level probabilities must be non-negative, got {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Prompt(format!("name-level probabilities sum to {total}, expected 1")));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (level, p) in NameLevel::ALL.into_iter().zip(probs) {
        acc += p;
        if u < acc {
            return Ok(level);
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    Ok(NameLevel::ALL.into_iter().zip(probs).rev().find(|(_, p)| *p > 0.0).map(|(l, _)| l).unwrap())
}

/// Half-open token interval `[start, end)` covering one concept occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub start: usize,
    pub end: usize,
    pub concept_id: u32,
    /// Whether `start` holds the learnable token.
    pub learnable: bool,
}

impl ConceptSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub token_ids: Vec<usize>,
    pub spans: Vec<ConceptSpan>,
    pub relevance: Vec<bool>,
    pub raw_template: String,
}

impl PromptBundle {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position of the learnable token of the first concept.
    pub fn s_star_index(&self) -> Option<usize> {
        self.spans.iter().find(|s| s.learnable).map(|s| s.start)
    }

    pub fn concept_span(&self) -> Option<ConceptSpan> {
        self.spans.first().copied()
    }

    /// Checks the span/relevance invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.token_ids.len();
        if self.relevance.len() != m {
            return Err(Error::Prompt("relevance length differs from token count".into()));
        }
        let mut expected = vec![false; m];
        let mut prev_end = 0;
        for s in &self.spans {
            if s.start >= s.end || s.end > m || s.start < prev_end {
                return Err(Error::Prompt(format!("invalid or overlapping span [{}, {})", s.start, s.end)));
            }
            if s.learnable != (self.token_ids[s.start] == LEARNABLE_ID) {
                return Err(Error::Prompt(format!("span at {} disagrees with learnable-token placement", s.start)));
            }
            if self.token_ids[s.start..s.end].contains(&PAD_ID) {
                return Err(Error::Prompt("padding inside a concept span".into()));
            }
            expected[s.start..s.end].iter_mut().for_each(|r| *r = true);
            prev_end = s.end;
        }
        let stray = self.token_ids.iter().enumerate().filter(|(i, &t)| t == LEARNABLE_ID && !self.spans.iter().any(|s| s.learnable && s.start == *i)).count();
        if stray > 0 {
            return Err(Error::Prompt("learnable token outside a concept span".into()));
        }
        if expected != self.relevance {
            return Err(Error::Prompt("relevance flags do not match concept spans".into()));
        }
        Ok(())
    }
}

/// How a concept occurrence is written into the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConceptSlot {
    pub level: NameLevel,
    /// Prepend the learnable token before the name.
    pub learnable: bool,
}

impl Default for ConceptSlot {
    fn default() -> Self {
        Self { level: NameLevel::Surface, learnable: true }
    }
}

fn placeholder_positions(words: &[&str]) -> Vec<usize> {
    words.iter().enumerate().filter(|(_, w)| **w == PLACEHOLDER).map(|(i, _)| i).collect()
}

fn instantiate(
    vocab: &Vocab,
    template: &str,
    concepts: &[(&ConceptRecord, ConceptSlot)],
    max_len: usize,
) -> Result<PromptBundle> {
    let words: Vec<&str> = template.split_whitespace().collect();
    let holes = placeholder_positions(&words);
    if holes.len() != concepts.len() {
        return Err(Error::Prompt(format!(
            "template {template:?} has {} placeholder(s) for {} concept(s)",
            holes.len(),
            concepts.len()
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut spans = Vec::new();
    let mut next = concepts.iter();
    for w in words {
        if w == PLACEHOLDER {
            let (concept, slot) = next.next().expect("placeholder count checked");
            let start = ids.len();
            if slot.learnable {
                ids.push(LEARNABLE_ID);
            }
            for n in concept.name(slot.level) {
                ids.push(vocab.id(n)?);
            }
            if ids.len() == start {
                return Err(Error::Prompt(format!("concept {} has an empty name", concept.concept_id)));
            }
            spans.push(ConceptSpan { start, end: ids.len(), concept_id: concept.concept_id, learnable: slot.learnable });
        } else {
            let id = vocab.id(w)?;
            if id == LEARNABLE_ID || id == PAD_ID {
                return Err(Error::Prompt(format!("reserved token {w:?} cannot appear in a template")));
            }
            ids.push(id);
        }
    }
    finish(ids, spans, template, max_len)
}

fn finish(mut ids: Vec<usize>, spans: Vec<ConceptSpan>, template: &str, max_len: usize) -> Result<PromptBundle> {
    if ids.len() > max_len {
        return Err(Error::Prompt(format!("prompt has {} tokens, limit is {max_len}", ids.len())));
    }
    ids.resize(max_len, PAD_ID);
    let mut relevance = vec![false; max_len];
    for s in &spans {
        relevance[s.start..s.end].iter_mut().for_each(|r| *r = true);
    }
    let bundle = PromptBundle { token_ids: ids, spans, relevance, raw_template: template.to_string() };
    bundle.validate()?;
    Ok(bundle)
}

/// Expands a single-placeholder template into `[S*] + name` at `level`.
pub fn build_prompt(
    vocab: &Vocab,
    template: &str,
    concept: &ConceptRecord,
    level: NameLevel,
    max_len: usize,
) -> Result<PromptBundle> {
    build_prompt_with(vocab, template, concept, ConceptSlot { level, learnable: true }, max_len)
}

pub fn build_prompt_with(
    vocab: &Vocab,
    template: &str,
    concept: &ConceptRecord,
    slot: ConceptSlot,
    max_len: usize,
) -> Result<PromptBundle> {
    instantiate(vocab, template, &[(concept, slot)], max_len)
}

/// One placeholder per concept; every occurrence gets the same learnable token.
pub fn build_multi_prompt(
    vocab: &Vocab,
    template: &str,
    concepts: &[ConceptRecord],
    level: NameLevel,
    max_len: usize,
) -> Result<PromptBundle> {
    if concepts.len() < 2 {
        return Err(Error::Prompt("multi-concept prompts need at least two concepts; use build_prompt".into()));
    }
    let slot = ConceptSlot { level, learnable: true };
    let pairs: Vec<_> = concepts.iter().map(|c| (c, slot)).collect();
    instantiate(vocab, template, &pairs, max_len)
}

/// Prompt with no concept occurrence (every token irrelevant to references).
pub fn build_plain_prompt(vocab: &Vocab, text: &str, max_len: usize) -> Result<PromptBundle> {
    let ids = vocab.tokenize(text)?;
    if ids.iter().any(|&i| i == LEARNABLE_ID || i == PAD_ID) {
        return Err(Error::Prompt("reserved tokens cannot appear in a plain prompt".into()));
    }
    finish(ids, Vec::new(), text, max_len)
}

/// Parses free text where each `{name words}` group marks a concept
/// occurrence, e.g. `a {striped square} on white background`. Each group
/// receives the learnable token; concepts are numbered in order.
pub fn bundle_from_text(vocab: &Vocab, text: &str, max_len: usize) -> Result<PromptBundle> {
    bundle_from_text_with(vocab, text, max_len, true)
}

/// As [`bundle_from_text`], with the learnable token optional.
pub fn bundle_from_text_with(vocab: &Vocab, text: &str, max_len: usize, learnable: bool) -> Result<PromptBundle> {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        for w in rest[..open].split_whitespace() {
            ids.push(vocab.id(w)?);
        }
        let close = rest[open..].find('}').ok_or_else(|| Error::Prompt(format!("unclosed '{{' in {text:?}")))? + open;
        let name: Vec<&str> = rest[open + 1..close].split_whitespace().collect();
        if name.is_empty() {
            return Err(Error::Prompt(format!("empty concept group in {text:?}")));
        }
        let start = ids.len();
        if learnable {
            ids.push(LEARNABLE_ID);
        }
        for w in name {
            ids.push(vocab.id(w)?);
        }
        spans.push(ConceptSpan { start, end: ids.len(), concept_id: spans.len() as u32, learnable });
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(Error::Prompt(format!("unbalanced '}}' in {text:?}")));
    }
    for w in rest.split_whitespace() {
        ids.push(vocab.id(w)?);
    }
    if ids.iter().enumerate().any(|(i, &t)| t == LEARNABLE_ID && !spans.iter().any(|s| s.start == i)) {
        return Err(Error::Prompt("write concepts as {name}, not with the reserved token".into()));
    }
    finish(ids, spans, text, max_len)
}
