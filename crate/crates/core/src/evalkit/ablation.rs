//! Trains adaptation variants from one pretrained store and evaluates each
//! on the same held-out split.

use std::fmt;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::{evaluate, EvalReport, EvalSettings, Model};
use crate::config::{KvConfig, ModelConfig};
use crate::dem::SpliceMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::promptkit::Vocab;
use crate::synthdata::{Dataset, Split};
use crate::trainer::{self, checkpoint, AdaptVariant, TrainConfig, SURFACE_ONLY};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Full,
    /// Concept name without the learnable token.
    NoLt,
    /// Learnable token used as is, without the DEM.
    NoDem,
    /// All-zero attention mask.
    NoMask,
    /// No reference dropout and surface names only.
    NoTs,
    /// DEM output replaces every token of the concept span.
    ReplaceAll,
    Drop(f64),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoLt => f.write_str("no_LT"),
            Variant::NoDem => f.write_str("no_DEM"),
            Variant::NoMask => f.write_str("no_mask"),
            Variant::NoTs => f.write_str("no_TS"),
            Variant::ReplaceAll => f.write_str("replace_all"),
            Variant::Drop(r) => write!(f, "drop={r}"),
        }
    }
}

impl Variant {
    pub const COMPONENTS: [Variant; 5] = [Variant::Full, Variant::NoLt, Variant::NoDem, Variant::NoMask, Variant::NoTs];
    pub const DROP_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

    pub fn parse(s: &str) -> Result<Self> {
        let v = match s.trim() {
            "full" => Variant::Full,
            "no_LT" | "no_lt" => Variant::NoLt,
            "no_DEM" | "no_dem" => Variant::NoDem,
            "no_mask" => Variant::NoMask,
            "no_TS" | "no_ts" => Variant::NoTs,
            "replace_all" => Variant::ReplaceAll,
            other => match other.strip_prefix("drop=").or_else(|| other.strip_prefix("drop")) {
                Some(r) => {
                    let r: f64 = r.parse().map_err(|_| Error::Config(format!("bad drop ratio in variant {other:?}")))?;
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Config(format!("drop ratio {r} outside [0, 1]")));
                    }
                    Variant::Drop(r)
                }
                None => return Err(Error::Config(format!("unknown variant {other:?}"))),
            },
        };
        Ok(v)
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|x| !x.trim().is_empty()).map(Self::parse).collect()
    }

    /// Adaptation switches and training config for this variant, derived
    /// from the full-model training config.
    pub fn setup(&self, base: &TrainConfig) -> (AdaptVariant, TrainConfig) {
        let full = AdaptVariant::default();
        let t = base.clone();
        match *self {
            Variant::Full => (full, t),
            Variant::NoLt => (AdaptVariant { learnable_token: false, ..full }, t),
            Variant::NoDem => (AdaptVariant { use_dem: false, ..full }, t),
            Variant::NoMask => (AdaptVariant { use_mask: false, ..full }, t),
            Variant::NoTs => (full, TrainConfig { drop_ratio: 0.0, name_level_probs: SURFACE_ONLY, ..t }),
            Variant::ReplaceAll => (AdaptVariant { splice: SpliceMode::All, ..full }, t),
            Variant::Drop(r) => (full, TrainConfig { drop_ratio: r, ..t }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Directory for adapted checkpoints keyed by their full training
    /// inputs; reused when present.
    pub cache: Option<PathBuf>,
}

fn hex(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Key over everything that determines an adapted checkpoint.
pub fn adapt_key(base: &ParamStore<f32>, ds_hash: &str, cfg: &ModelConfig, tcfg: &TrainConfig, av: &AdaptVariant) -> Result<String> {
    let mut kv = KvConfig::new();
    cfg.write_kv(&mut kv);
    tcfg.write_kv(&mut kv);
    av.write_kv(&mut kv);
    let mut h = Sha256::new();
    h.update(checkpoint::encode(base)?);
    h.update(ds_hash.as_bytes());
    h.update(kv.render().as_bytes());
    Ok(hex(&h.finalize(), 12))
}

/// Adapts `base` for one variant, going through the cache when set.
pub fn adapt_variant(
    ds: &Dataset,
    vocab: &Vocab,
    cfg: &ModelConfig,
    base: &ParamStore<f32>,
    tcfg: &TrainConfig,
    av: AdaptVariant,
    cache: Option<&PathBuf>,
) -> Result<ParamStore<f32>> {
    let path = match cache {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("adapt-{}.agck", adapt_key(base, &ds.hash()?, cfg, tcfg, &av)?));
            if p.exists() {
                let mut store = base.clone();
                checkpoint::load_into(&mut store, &checkpoint::load_checkpoint(&p)?)?;
                return Ok(store);
            }
            Some(p)
        }
        None => None,
    };
    let (store, _) = trainer::adapt(ds, vocab, cfg, tcfg, av, base.clone())?;
    if let Some(p) = path {
        checkpoint::save_checkpoint(&store, &p)?;
    }
    Ok(store)
}

/// Trains and evaluates each variant on the held-out split. `progress`
/// is told when each variant finishes.
pub fn ablation_run(
    ds: &Dataset,
    vocab: &Vocab,
    cfg: &ModelConfig,
    base: &ParamStore<f32>,
    variants: &[Variant],
    settings: &AblationSettings,
    mut progress: impl FnMut(&EvalReport),
) -> Result<Vec<EvalReport>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let (av, tcfg) = v.setup(&settings.train);
        let store = adapt_variant(ds, vocab, cfg, base, &tcfg, av, settings.cache.as_ref())?;
        let model = Model { store: &store, cfg, opts: av.options(), learnable_token: av.learnable_token };
        let report = evaluate(&model, ds, vocab, Split::Heldout, &settings.eval, &v.to_string())?;
        progress(&report);
        out.push(report);
    }
    Ok(out)
}

/// One aggregate row per variant.
pub fn ablation_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("variant,cp,pf,cp_pf,cases,split_hash,mask_blocked,fingerprint\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.name,
            r.cp,
            r.pf,
            r.cp_pf,
            r.rows.len(),
            r.split_hash,
            r.mask_blocked,
            r.fingerprint
        ));
    }
    s
}
