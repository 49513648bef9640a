//! Evaluation: concept-preservation and prompt-following proxies, the
//! reference misalignment probe and the component ablation harness.

pub mod ablation;
pub mod metrics;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::ditnet::{AlignOptions, Conditioning};
use crate::encoders::{black_reference, patch_batch, Image};
use crate::error::{Error, Result};
use crate::flow::{sample_batch, SampleConfig};
use crate::params::ParamStore;
use crate::promptkit::{build_prompt_with, ConceptRecord, ConceptSlot, NameLevel, PaletteColor, Vocab};
use crate::synthdata::{caption_template, Dataset, RecordKind, Split};
use crate::trainer::checkpoint;

pub use ablation::{ablation_csv, ablation_run, AblationSettings, Variant};
pub use metrics::{analyze, cp_proxy, pf_proxy, Glyph};

/// An adapted (or base) model ready for sampling.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub store: &'a ParamStore<f32>,
    pub cfg: &'a ModelConfig,
    pub opts: AlignOptions,
    /// Whether prompts carry the learnable token.
    pub learnable_token: bool,
}

impl Model<'_> {
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(checkpoint::encode(self.store)?);
        h.update(format!("{:?}|{:?}|{}", self.cfg, self.opts, self.learnable_token).as_bytes());
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// How evaluation prompts are sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub seeds: usize,
    pub first_seed: u64,
    pub sample: SampleConfig,
    pub level: NameLevel,
    /// Template index into the caption templates.
    pub template: usize,
    pub backgrounds: Vec<PaletteColor>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seeds: 8,
            first_seed: 1000,
            sample: SampleConfig::default(),
            level: NameLevel::Parent,
            template: 0,
            backgrounds: PaletteColor::BACKGROUND.to_vec(),
        }
    }
}

/// Conditioning for `captions.len()` samples of one concept, every sample
/// sharing `reference`. Captions are templates holding the concept
/// placeholder.
pub fn concept_conditioning(
    model: &Model<'_>,
    vocab: &Vocab,
    concept: &ConceptRecord,
    captions: &[String],
    level: NameLevel,
    reference: &Image,
) -> Result<Conditioning<f32>> {
    let cfg = model.cfg;
    let slot = ConceptSlot { level, learnable: model.learnable_token };
    let bundles = captions.iter().map(|c| build_prompt_with(vocab, c, concept, slot, cfg.text_len)).collect::<Result<Vec<_>>>()?;
    let refs = vec![reference; captions.len()];
    let ref_tensor = patch_batch(cfg, &refs)?;
    let dem = if model.opts.use_dem {
        let spans: Vec<_> = bundles.iter().enumerate().filter_map(|(i, b)| b.concept_span().map(|s| (i, s))).collect();
        let rows: Vec<&Image> = spans.iter().map(|_| reference).collect();
        Some((spans, patch_batch(cfg, &rows)?))
    } else {
        None
    };
    Ok(Conditioning { bundles, refs: vec![ref_tensor], dem, redux_text: None })
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub concept_id: u32,
    pub seed: u64,
    pub prompt: String,
    pub cp: f64,
    pub pf: f64,
    pub color: Option<PaletteColor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub cp: f64,
    pub pf: f64,
    pub cp_pf: f64,
    pub fingerprint: String,
    pub split_hash: String,
    /// Blocked entries in the evaluation attention masks (zero without the
    /// selective mask).
    pub mask_blocked: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(name: &str, fingerprint: String, split_hash: String, mask_blocked: usize, rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("evaluation produced no rows".into()));
        }
        let n = rows.len() as f64;
        let cp = rows.iter().map(|r| r.cp).sum::<f64>() / n;
        let pf = rows.iter().map(|r| r.pf).sum::<f64>() / n;
        Ok(Self { name: name.to_string(), cp, pf, cp_pf: cp * pf, fingerprint, split_hash, mask_blocked, rows })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("name,concept_id,seed,prompt,cp,pf,color\n");
        for r in &self.rows {
            let color = r.color.map_or("none", |c| c.word());
            s.push_str(&format!("{},{},{},\"{}\",{},{},{}\n", self.name, r.concept_id, r.seed, r.prompt, r.cp, r.pf, color));
        }
        s
    }

    /// Aggregates without the per-case rows.
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "name": self.name,
            "cp": self.cp,
            "pf": self.pf,
            "cp_pf": self.cp_pf,
            "fingerprint": self.fingerprint,
            "split_hash": self.split_hash,
            "mask_blocked": self.mask_blocked,
            "cases": self.rows.len(),
        });
        serde_json::to_string_pretty(&v).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.summary_json()?).map_err(|e| Error::io(&json, e))
    }
}

fn reference_of(ds: &Dataset, concept_id: u32) -> Result<&Image> {
    let r = ds
        .records
        .iter()
        .find(|r| r.concept_id == Some(concept_id) && r.reference.is_some())
        .ok_or_else(|| Error::Data(format!("no reference image for concept {concept_id}")))?;
    ds.image(r.reference.as_deref().expect("checked"))
}

/// Concepts of a split, in catalog order.
pub fn split_concepts(ds: &Dataset, split: Split) -> Vec<&ConceptRecord> {
    let ids: Vec<u32> = ds.records_of(RecordKind::Pair, Some(split)).iter().filter_map(|r| r.concept_id).collect();
    ds.catalog.iter().filter(|c| ids.contains(&c.concept_id)).collect()
}

/// Samples every concept of `split` under every background and seed and
/// scores the results.
pub fn evaluate(model: &Model<'_>, ds: &Dataset, vocab: &Vocab, split: Split, settings: &EvalSettings, name: &str) -> Result<EvalReport> {
    let concepts = split_concepts(ds, split);
    if concepts.is_empty() {
        return Err(Error::Data(format!("no concepts in the {split:?} split")));
    }
    let mut rows = Vec::new();
    let mut blocked = 0;
    for c in concepts {
        let reference = reference_of(ds, c.concept_id)?;
        let mut captions = Vec::new();
        let mut seeds = Vec::new();
        for &bg in &settings.backgrounds {
            for j in 0..settings.seeds {
                captions.push(caption_template(settings.template, bg));
                seeds.push(settings.first_seed + j as u64);
            }
        }
        let cond = concept_conditioning(model, vocab, c, &captions, settings.level, reference)?;
        blocked += mask_blocked(model, &cond)?;
        let images = sample_batch(model.store, model.cfg, model.opts, &cond, &seeds, &settings.sample, None)?;
        for ((im, caption), seed) in images.iter().zip(&captions).zip(&seeds) {
            let g = analyze(im);
            let cp = g.as_ref().map_or(0.0, |g| metrics::cp_of(g, c));
            let pf = metrics::pf_with(im, g.as_ref().map_or(&[][..], |g| &g.pixels), metrics::caption_background(caption)?);
            rows.push(EvalRow { concept_id: c.concept_id, seed: *seed, prompt: caption.clone(), cp, pf, color: g.map(|g| g.color) });
        }
    }
    EvalReport::from_rows(name, model.fingerprint()?, ds.split_hash(RecordKind::Pair, split)?, blocked, rows)
}

/// Number of blocked mask entries the model would use for `cond`.
pub fn mask_blocked(model: &Model<'_>, cond: &Conditioning<f32>) -> Result<usize> {
    let mut ctx = crate::params::Ctx::new(model.store, false);
    let prep = crate::ditnet::prepare(&mut ctx, model.cfg, cond, &model.opts)?;
    Ok(prep.masks.iter().map(|m| m.blocked_count()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub concept_id: u32,
    pub seed: u64,
    pub prompt: String,
    pub cp_with_ref: f64,
    pub cp_black_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cp_with_ref: f64,
    pub cp_black_ref: f64,
    pub delta: f64,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn from_rows(rows: Vec<ProbeRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("probe produced no rows".into()));
        }
        let n = rows.len() as f64;
        let w = rows.iter().map(|r| r.cp_with_ref).sum::<f64>() / n;
        let b = rows.iter().map(|r| r.cp_black_ref).sum::<f64>() / n;
        Ok(Self { cp_with_ref: w, cp_black_ref: b, delta: w - b, rows })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("concept_id,seed,prompt,cp_with_ref,cp_black_ref\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},\"{}\",{},{}\n", r.concept_id, r.seed, r.prompt, r.cp_with_ref, r.cp_black_ref));
        }
        s
    }
}

/// Minimum number of seeds for a probe.
pub const PROBE_MIN_SEEDS: usize = 20;

/// Samples each seed twice with identical noise and prompt: once with the
/// concept's reference, once with a black image in its place.
pub fn misalignment_probe(
    model: &Model<'_>,
    vocab: &Vocab,
    concept: &ConceptRecord,
    reference: &Image,
    caption: &str,
    level: NameLevel,
    seeds: &[u64],
    sample: &SampleConfig,
) -> Result<ProbeReport> {
    if seeds.len() < PROBE_MIN_SEEDS {
        return Err(Error::Config(format!("probe needs at least {PROBE_MIN_SEEDS} seeds, got {}", seeds.len())));
    }
    let black = black_reference(reference.height(), reference.width())?;
    let captions = vec![caption.to_string(); seeds.len()];
    let arm = |r: &Image| -> Result<Vec<f64>> {
        let cond = concept_conditioning(model, vocab, concept, &captions, level, r)?;
        let images = sample_batch(model.store, model.cfg, model.opts, &cond, seeds, sample, None)?;
        Ok(images.iter().map(|im| cp_proxy(im, concept)).collect())
    };
    let with = arm(reference)?;
    let without = arm(&black)?;
    let rows = seeds
        .iter()
        .zip(with.iter().zip(&without))
        .map(|(&seed, (&w, &b))| ProbeRow { concept_id: concept.concept_id, seed, prompt: caption.to_string(), cp_with_ref: w, cp_black_ref: b })
        .collect();
    ProbeReport::from_rows(rows)
}

/// The probe over every concept of a split; rows from all concepts are
/// pooled.
pub fn probe_split(
    model: &Model<'_>,
    ds: &Dataset,
    vocab: &Vocab,
    split: Split,
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for c in split_concepts(ds, split) {
        let reference = reference_of(ds, c.concept_id)?;
        let caption = caption_template(settings.template, settings.backgrounds.first().copied().unwrap_or(PaletteColor::White));
        rows.extend(misalignment_probe(model, vocab, c, reference, &caption, settings.level, seeds, &settings.sample)?.rows);
    }
    ProbeReport::from_rows(rows)
}

#[cfg(test)]
mod tests;
