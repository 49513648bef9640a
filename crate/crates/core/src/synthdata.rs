//! Procedural glyph corpus with a manufactured color prior per shape class,
//! anti-skewed reference/target pairs, and the on-disk dataset format.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::promptkit::{sample_name_level, ConceptRecord, PaletteColor, Pattern, ShapeClass, VisualAttrs, Vocab, PLACEHOLDER};

/// Rows of a striped glyph alternate between full color and this fraction.
pub const STRIPE_INTENSITY: f32 = 0.7;
pub const REFERENCE_BACKGROUND: PaletteColor = PaletteColor::Gray;

pub const TEMPLATES: &[&str] = &[
    "a {C} on {bg} background",
    "a photo of a {C} on {bg} background",
    "{C} on a {bg} backdrop",
    "a {C} in front of a {bg} wall",
];

pub fn surface_word(shape: ShapeClass, pattern: Pattern) -> &'static str {
    match (shape, pattern) {
        (ShapeClass::Square, Pattern::Plain) => "tile",
        (ShapeClass::Square, Pattern::Striped) => "flag",
        (ShapeClass::Circle, Pattern::Plain) => "coin",
        (ShapeClass::Circle, Pattern::Striped) => "ball",
        (ShapeClass::Triangle, Pattern::Plain) => "wedge",
        (ShapeClass::Triangle, Pattern::Striped) => "tent",
    }
}

pub fn concept_record(id: u32, attrs: VisualAttrs) -> ConceptRecord {
    ConceptRecord {
        concept_id: id,
        surface_name: vec![surface_word(attrs.shape, attrs.pattern).to_string()],
        parent_name: vec![attrs.shape.word().to_string()],
        broader_name: vec!["shape".to_string()],
        attrs,
    }
}

/// Every `(shape, glyph color, pattern)` combination.
pub fn all_attrs() -> Vec<VisualAttrs> {
    let mut v = Vec::new();
    for shape in ShapeClass::ALL {
        for color in PaletteColor::GLYPH {
            for pattern in Pattern::ALL {
                v.push(VisualAttrs { shape, color, pattern });
            }
        }
    }
    v
}

/// `n` distinct concepts drawn from all combinations.
pub fn gen_catalog(n: usize, rng: &mut impl Rng) -> Result<Vec<ConceptRecord>> {
    pick_catalog(all_attrs(), n, rng)
}

fn pick_catalog(mut pool: Vec<VisualAttrs>, n: usize, rng: &mut impl Rng) -> Result<Vec<ConceptRecord>> {
    if n < 2 || n > pool.len() {
        return Err(Error::Data(format!("catalog of {n} concepts requested; between 2 and {} available", pool.len())));
    }
    pool.shuffle(rng);
    Ok(pool.into_iter().take(n).enumerate().map(|(i, a)| concept_record(i as u32, a)).collect())
}

/// Attribute skew of the pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub images: usize,
    pub image_side: usize,
    /// Probability of the dominant color for each shape class.
    pub skew: f64,
    pub dominant: BTreeMap<ShapeClass, PaletteColor>,
    /// Caption name level probabilities (surface, parent, broader).
    pub name_probs: [f64; 3],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            images: 4000,
            image_side: 16,
            skew: 0.9,
            dominant: default_dominant(),
            name_probs: [0.4, 0.5, 0.1],
        }
    }
}

pub fn default_dominant() -> BTreeMap<ShapeClass, PaletteColor> {
    BTreeMap::from([
        (ShapeClass::Square, PaletteColor::Green),
        (ShapeClass::Circle, PaletteColor::Blue),
        (ShapeClass::Triangle, PaletteColor::Yellow),
    ])
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::Data(format!("skew {} outside [0, 1]", self.skew)));
        }
        if ShapeClass::ALL.iter().any(|s| !self.dominant.get(s).is_some_and(|c| PaletteColor::GLYPH.contains(c))) {
            return Err(Error::Data("every shape class needs a dominant glyph color".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Data(format!("image side {} too small", self.image_side)));
        }
        Ok(())
    }

    /// Color distribution for a shape class: dominant with `skew`, the rest
    /// spread evenly. Sums to one.
    pub fn color_distribution(&self, shape: ShapeClass) -> Vec<(PaletteColor, f64)> {
        let dom = self.dominant[&shape];
        let rest = (1.0 - self.skew) / (PaletteColor::GLYPH.len() - 1) as f64;
        PaletteColor::GLYPH.iter().map(|&c| (c, if c == dom { self.skew } else { rest })).collect()
    }

    pub fn draw_color(&self, shape: ShapeClass, rng: &mut impl Rng) -> PaletteColor {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let dist = self.color_distribution(shape);
        for &(c, p) in &dist {
            acc += p;
            if u < acc {
                return c;
            }
        }
        dist.last().expect("non-empty palette").0
    }

    /// Concepts whose color conflicts with the prior of their shape.
    pub fn anti_skew_attrs(&self) -> Vec<VisualAttrs> {
        all_attrs().into_iter().filter(|a| self.dominant[&a.shape] != a.color).collect()
    }
}

/// `n` distinct concepts whose colors are never the dominant one.
pub fn anti_skew_catalog(spec: &CorpusSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<ConceptRecord>> {
    spec.validate()?;
    pick_catalog(spec.anti_skew_attrs(), n, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub attrs: VisualAttrs,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub background: PaletteColor,
    pub template: usize,
}

impl Scene {
    pub fn validate(&self, side: usize) -> Result<()> {
        if self.size < 2 || self.top + self.size > side || self.left + self.size > side {
            return Err(Error::Data(format!("glyph at ({}, {}) size {} leaves a {side} canvas", self.top, self.left, self.size)));
        }
        Ok(())
    }

    /// Whether pixel `(r, c)` lies inside the glyph (pixel-center sampling).
    pub fn covers(&self, r: usize, c: usize) -> bool {
        if r < self.top || c < self.left || r >= self.top + self.size || c >= self.left + self.size {
            return false;
        }
        let s = self.size as f64;
        let (y, x) = (r as f64 + 0.5 - self.top as f64, c as f64 + 0.5 - self.left as f64);
        match self.attrs.shape {
            ShapeClass::Square => true,
            ShapeClass::Circle => (y - s / 2.0).powi(2) + (x - s / 2.0).powi(2) <= (s / 2.0).powi(2),
            ShapeClass::Triangle => (x - s / 2.0).abs() <= y / 2.0,
        }
    }
}

fn scale(rgb: [f64; 3], k: f32) -> [f32; 3] {
    [rgb[0] as f32 * k, rgb[1] as f32 * k, rgb[2] as f32 * k]
}

/// Rasterizes a scene at 8-bit precision; returns the image and the glyph
/// mask (row-major).
pub fn render(scene: &Scene, side: usize) -> Result<(Image, Vec<bool>)> {
    scene.validate(side)?;
    let mut im = Image::filled(side, side, scale(scene.background.rgb(), 1.0));
    let mut mask = vec![false; side * side];
    let full = scale(scene.attrs.color.rgb(), 1.0);
    let dim = scale(scene.attrs.color.rgb(), STRIPE_INTENSITY);
    for r in 0..side {
        for c in 0..side {
            if scene.covers(r, c) {
                let striped = scene.attrs.pattern == Pattern::Striped && (r - scene.top) % 2 == 1;
                im.set_pixel(r, c, if striped { dim } else { full });
                mask[r * side + c] = true;
            }
        }
    }
    Ok((im.quantized(), mask))
}

/// The canonical reference view: centered on neutral gray.
pub fn reference_scene(attrs: VisualAttrs, side: usize) -> Scene {
    let size = side * 5 / 8;
    let off = (side - size) / 2;
    Scene { attrs, top: off, left: off, size, background: REFERENCE_BACKGROUND, template: 0 }
}

pub fn random_scene(attrs: VisualAttrs, side: usize, rng: &mut impl Rng) -> Scene {
    let size = rng.random_range(side * 3 / 8..=side * 5 / 8);
    Scene {
        attrs,
        top: rng.random_range(0..=side - size),
        left: rng.random_range(0..=side - size),
        size,
        background: PaletteColor::BACKGROUND[rng.random_range(0..PaletteColor::BACKGROUND.len())],
        template: rng.random_range(0..TEMPLATES.len()),
    }
}

/// Template with the background filled in and the concept placeholder kept.
pub fn caption_template(template: usize, background: PaletteColor) -> String {
    TEMPLATES[template].replace("{bg}", background.word())
}

pub fn fill_placeholder(template: &str, name: &[String]) -> String {
    template.replace(PLACEHOLDER, &name.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Pretrain,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub kind: RecordKind,
    pub split: Split,
    pub image: String,
    pub reference: Option<String>,
    pub concept_id: Option<u32>,
    pub attrs: VisualAttrs,
    pub background: PaletteColor,
    /// Pretraining: the full caption. Pairs: template with `{C}`.
    pub caption: String,
    pub caption_tokens: Vec<usize>,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Vec<ConceptRecord>,
    pub records: Vec<Record>,
    pub images: BTreeMap<String, Image>,
    pub image_side: usize,
}

/// Pretraining examples whose captions never name the glyph color.
pub fn make_pretrain_corpus(spec: &CorpusSpec, vocab: &Vocab, rng: &mut impl Rng) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.image_side;
    let mut ds = Dataset { catalog: Vec::new(), records: Vec::new(), images: BTreeMap::new(), image_side: side };
    for i in 0..spec.images {
        let shape = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
        let pattern = Pattern::ALL[rng.random_range(0..Pattern::ALL.len())];
        let color = spec.draw_color(shape, rng);
        let attrs = VisualAttrs { shape, color, pattern };
        let scene = random_scene(attrs, side, rng);
        let level = sample_name_level(rng, spec.name_probs)?;
        let rec = concept_record(0, attrs);
        let caption = fill_placeholder(&caption_template(scene.template, scene.background), rec.name(level));
        let (im, _) = render(&scene, side)?;
        let image = format!("pre_{i:05}.ppm");
        ds.images.insert(image.clone(), im);
        ds.records.push(Record {
            id: format!("pre_{i:05}"),
            kind: RecordKind::Pretrain,
            split: Split::Train,
            image,
            reference: None,
            concept_id: None,
            attrs,
            background: scene.background,
            caption_tokens: vocab.tokenize(&caption)?,
            caption,
            scene,
        });
    }
    Ok(ds)
}

/// Chooses held-out concepts while keeping every shape, color and pattern
/// present in the training concepts.
pub fn choose_heldout(catalog: &[ConceptRecord], count: usize) -> Vec<u32> {
    let mut held: Vec<u32> = Vec::new();
    for c in catalog {
        if held.len() == count {
            break;
        }
        let rest: Vec<&ConceptRecord> =
            catalog.iter().filter(|o| o.concept_id != c.concept_id && !held.contains(&o.concept_id)).collect();
        let covers = ShapeClass::ALL.iter().all(|s| rest.iter().any(|o| o.attrs.shape == *s))
            && Pattern::ALL.iter().all(|p| rest.iter().any(|o| o.attrs.pattern == *p))
            && catalog.iter().all(|x| rest.iter().any(|o| o.attrs.color == x.attrs.color));
        if covers {
            held.push(c.concept_id);
        }
    }
    held
}

/// Reference/target pairs: centered reference on gray, target with varied
/// position, size and background.
pub fn make_pair_dataset(
    catalog: &[ConceptRecord],
    per_concept: usize,
    heldout: &[u32],
    side: usize,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    let mut ds = Dataset { catalog: catalog.to_vec(), records: Vec::new(), images: BTreeMap::new(), image_side: side };
    for c in catalog {
        c.validate(vocab)?;
        let reference = format!("ref_{:03}.ppm", c.concept_id);
        ds.images.insert(reference.clone(), render(&reference_scene(c.attrs, side), side)?.0);
        let split = if heldout.contains(&c.concept_id) { Split::Heldout } else { Split::Train };
        for j in 0..per_concept {
            let scene = random_scene(c.attrs, side, rng);
            let caption = caption_template(scene.template, scene.background);
            let image = format!("pair_{:03}_{j:04}.ppm", c.concept_id);
            ds.images.insert(image.clone(), render(&scene, side)?.0);
            ds.records.push(Record {
                id: format!("pair_{:03}_{j:04}", c.concept_id),
                kind: RecordKind::Pair,
                split,
                image,
                reference: Some(reference.clone()),
                concept_id: Some(c.concept_id),
                attrs: c.attrs,
                background: scene.background,
                caption_tokens: vocab.tokenize(&fill_placeholder(&caption, &c.surface_name))?,
                caption,
                scene,
            });
        }
    }
    Ok(ds)
}

/// Full generation recipe behind the `synth-data` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub concepts: usize,
    pub pairs_per_concept: usize,
    pub heldout_concepts: usize,
    pub corpus: CorpusSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 0, concepts: 18, pairs_per_concept: 48, heldout_concepts: 6, corpus: CorpusSpec::default() }
    }
}

pub fn generate(spec: &SynthSpec, vocab: &Vocab) -> Result<Dataset> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let catalog = anti_skew_catalog(&spec.corpus, spec.concepts, &mut rng)?;
    let held = choose_heldout(&catalog, spec.heldout_concepts);
    let mut ds = make_pretrain_corpus(&spec.corpus, vocab, &mut rng)?;
    let pairs = make_pair_dataset(&catalog, spec.pairs_per_concept, &held, spec.corpus.image_side, vocab, &mut rng)?;
    ds.catalog = pairs.catalog;
    ds.records.extend(pairs.records);
    ds.images.extend(pairs.images);
    Ok(ds)
}

impl Dataset {
    pub fn concept(&self, id: u32) -> Option<&ConceptRecord> {
        self.catalog.iter().find(|c| c.concept_id == id)
    }

    pub fn image(&self, name: &str) -> Result<&Image> {
        self.images.get(name).ok_or_else(|| Error::Data(format!("missing image {name:?}")))
    }

    pub fn records_of(&self, kind: RecordKind, split: Option<Split>) -> Vec<&Record> {
        self.records.iter().filter(|r| r.kind == kind && split.is_none_or(|s| r.split == s)).collect()
    }

    pub fn manifest_text(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn catalog_text(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.catalog).map_err(|e| Error::Data(e.to_string()))
    }

    /// SHA-256 over manifest, catalog and every image in manifest order.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest_text()?.as_bytes());
        h.update(self.catalog_text()?.as_bytes());
        for (name, im) in &self.images {
            h.update(name.as_bytes());
            h.update(im.to_ppm());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Hash of the records of one split (used to tie evaluation rows to
    /// the same split).
    pub fn split_hash(&self, kind: RecordKind, split: Split) -> Result<String> {
        let mut h = Sha256::new();
        for r in self.records_of(kind, Some(split)) {
            h.update(serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?.as_bytes());
        }
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn write(&self, dir: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (name, im) in &self.images {
            im.write_ppm(images.join(name))?;
        }
        let manifest = dir.join("manifest.jsonl");
        let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        f.write_all(self.manifest_text()?.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
        let catalog = dir.join("catalog.json");
        std::fs::write(&catalog, self.catalog_text()?).map_err(|e| Error::io(&catalog, e))?;
        vocab.write(dir.join("vocab.txt"))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<(Self, Vocab)> {
        let dir = dir.as_ref();
        let vocab = Vocab::read(dir.join("vocab.txt"))?;
        let catalog_path = dir.join("catalog.json");
        let text = std::fs::read_to_string(&catalog_path).map_err(|e| Error::io(&catalog_path, e))?;
        let catalog: Vec<ConceptRecord> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", catalog_path.display())))?;
        let manifest = dir.join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: Record = serde_json::from_str(line).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let mut images = BTreeMap::new();
        let mut side = 0;
        for r in &records {
            for name in std::iter::once(&r.image).chain(r.reference.as_ref()) {
                if !images.contains_key(name) {
                    let im = Image::read_ppm(dir.join("images").join(name))?;
                    side = im.height();
                    images.insert(name.clone(), im);
                }
            }
        }
        for c in &catalog {
            c.validate(&vocab)?;
        }
        Ok((Self { catalog, records, images, image_side: side }, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn catalog_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let two = gen_catalog(2, &mut rng).unwrap();
        assert_ne!(two[0].attrs, two[1].attrs);
        let vocab = Vocab::builtin();
        let all = gen_catalog(24, &mut rng).unwrap();
        assert!(all.iter().all(|c| vocab.contains(&c.parent_name[0]) && c.validate(&vocab).is_ok()));
        assert!(gen_catalog(25, &mut rng).is_err());
        assert!(gen_catalog(1, &mut rng).is_err());
        let a = gen_catalog(5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_catalog(5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let spec = CorpusSpec::default();
        let anti = anti_skew_catalog(&spec, 18, &mut rng).unwrap();
        assert!(anti.iter().all(|c| spec.dominant[&c.attrs.shape] != c.attrs.color));
        assert!(anti_skew_catalog(&spec, 19, &mut rng).is_err());
    }

    #[test]
    fn square_rasterizes_to_block() {
        let attrs = VisualAttrs { shape: ShapeClass::Square, color: PaletteColor::Red, pattern: Pattern::Plain };
        let scene = Scene { attrs, top: 4, left: 4, size: 8, background: PaletteColor::Blue, template: 0 };
        let (im, mask) = render(&scene, 16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = (4..12).contains(&r) && (4..12).contains(&c);
                assert_eq!(im.pixel(r, c), if inside { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
                assert_eq!(mask[r * 16 + c], inside);
            }
        }
        assert_eq!(render(&scene, 16).unwrap().0, im);
    }

    /// Independent point-in-shape tests on pixel centers.
    fn brute_inside(s: &Scene, r: usize, c: usize) -> bool {
        let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
        let (t, l, z) = (s.top as f64, s.left as f64, s.size as f64);
        match s.attrs.shape {
            ShapeClass::Square => py > t && py < t + z && px > l && px < l + z,
            ShapeClass::Circle => {
                let (cy, cx, rad) = (t + z / 2.0, l + z / 2.0, z / 2.0);
                (py - cy).hypot(px - cx) <= rad + 1e-12
            }
            ShapeClass::Triangle => {
                // barycentric test against apex (t, l + z/2), base corners (t+z, l), (t+z, l+z)
                let (ax, ay, bx, by, cx, cy) = (l + z / 2.0, t, l, t + z, l + z, t + z);
                let det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy);
                let w1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det;
                let w2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det;
                let w3 = 1.0 - w1 - w2;
                w1 >= -1e-12 && w2 >= -1e-12 && w3 >= -1e-12 && py < t + z
            }
        }
    }

    #[test]
    fn mask_matches_geometric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for attrs in all_attrs() {
            for _ in 0..10 {
                let scene = random_scene(attrs, 16, &mut rng);
                let (_, mask) = render(&scene, 16).unwrap();
                for r in 0..16 {
                    for c in 0..16 {
                        assert_eq!(mask[r * 16 + c], brute_inside(&scene, r, c), "{scene:?} at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn pretrain_skew_is_binomial() {
        let spec = CorpusSpec { images: 10_000, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let green = (0..n).filter(|_| spec.draw_color(ShapeClass::Square, &mut rng) == PaletteColor::Green).count();
        let sigma = (n as f64 * 0.9 * 0.1).sqrt();
        assert!((green as f64 - 9000.0).abs() < 3.0 * sigma, "{green}");
        for s in ShapeClass::ALL {
            let total: f64 = spec.color_distribution(s).iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_captions_name_no_glyph_color() {
        let spec = CorpusSpec { images: 300, ..Default::default() };
        let vocab = Vocab::builtin();
        let ds = make_pretrain_corpus(&spec, &vocab, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for r in &ds.records {
            let words: Vec<&str> = r.caption.split_whitespace().collect();
            assert!(PaletteColor::GLYPH.iter().all(|c| !words.contains(&c.word())), "{}", r.caption);
            assert!(words.contains(&r.background.word()));
            assert_eq!(ds.images[&r.image].pixel(0, 0).map(|v| v as f64), {
                let covered = r.scene.covers(0, 0);
                if covered { ds.images[&r.image].pixel(0, 0).map(|v| v as f64) } else { r.background.rgb() }
            });
        }
    }

    #[test]
    fn pairs_share_attrs_and_use_gray_reference() {
        let vocab = Vocab::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cat = anti_skew_catalog(&CorpusSpec::default(), 6, &mut rng).unwrap();
        let held = choose_heldout(&cat, 2);
        let ds = make_pair_dataset(&cat, 3, &held, 16, &vocab, &mut rng).unwrap();
        assert_eq!(ds.records.len(), 18);
        for r in &ds.records {
            let c = ds.concept(r.concept_id.unwrap()).unwrap();
            assert_eq!(c.attrs, r.attrs);
            let refim = ds.image(r.reference.as_ref().unwrap()).unwrap();
            let gray = (0.5f32 * 255.0).round() / 255.0;
            assert_eq!(refim.pixel(0, 0), [gray; 3]);
            assert!(r.caption.contains(PLACEHOLDER));
            assert_eq!(r.split == Split::Heldout, held.contains(&c.concept_id));
        }
    }

    #[test]
    fn heldout_keeps_training_coverage() {
        let spec = CorpusSpec::default();
        for seed in 0..20 {
            let cat = anti_skew_catalog(&spec, 18, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let held = choose_heldout(&cat, 6);
            assert_eq!(held.len(), 6);
            let train: Vec<_> = cat.iter().filter(|c| !held.contains(&c.concept_id)).collect();
            for col in PaletteColor::GLYPH {
                assert!(train.iter().any(|c| c.attrs.color == col));
            }
        }
    }

    #[test]
    fn manifest_roundtrip_and_stable_hash() {
        let vocab = Vocab::builtin();
        let spec = SynthSpec {
            seed: 3,
            concepts: 4,
            pairs_per_concept: 2,
            heldout_concepts: 1,
            corpus: CorpusSpec { images: 12, ..Default::default() },
        };
        let a = generate(&spec, &vocab).unwrap();
        let b = generate(&spec, &vocab).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path(), &vocab).unwrap();
        let (back, v2) = Dataset::read(dir.path()).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(back, a);
        assert_eq!(back.manifest_text().unwrap(), std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap());
        assert_eq!(back.hash().unwrap(), a.hash().unwrap());
    }
}
