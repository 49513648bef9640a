//! Two-phase training: pretraining the text-to-image backbone on the skewed
//! corpus, then adapting LoRA, DEM and the learnable token on
//! reference/target pairs with the base frozen.

pub mod checkpoint;
pub mod optim;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{KvConfig, ModelConfig};
use crate::dem::SpliceMode;
use crate::diffcore::Tensor;
use crate::ditnet::{AlignOptions, Conditioning, SegmentGate};
use crate::encoders::black_reference;
use crate::error::{Error, Result};
use crate::flow::{self, FlowSample};
use crate::params::{Ctx, Group, Phase, ParamStore};
use crate::promptkit::{build_plain_prompt, build_prompt_with, sample_name_level, ConceptSlot, Vocab};
use crate::synthdata::{Dataset, Record, RecordKind, Split};

pub use checkpoint::{load_checkpoint, load_into, load_model, save_checkpoint, save_model};
pub use optim::{AdamW, AdamWConfig, StepOutcome};

/// Loss multiple over the initial loss that counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverging steps before pretraining aborts.
pub const DIVERGENCE_PATIENCE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub drop_ratio: f64,
    /// Surface, parent, broader.
    pub name_level_probs: [f64; 3],
    pub seed: u64,
    /// Fraction of pretraining samples whose caption is replaced by the
    /// redux tokens of the target image.
    pub redux_aux: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch: 16,
            iterations: 20_000,
            lr: 1e-3,
            weight_decay: 0.01,
            drop_ratio: 0.0,
            name_level_probs: [1.0, 0.0, 0.0],
            seed: 0,
            redux_aux: 0.25,
            grad_clip: 1.0,
        }
    }

    pub fn adapt() -> Self {
        Self {
            phase: Phase::Adapt,
            iterations: 5_000,
            lr: 3e-4,
            drop_ratio: 0.5,
            name_level_probs: [0.6, 0.3, 0.1],
            redux_aux: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Adapt => Self::adapt(),
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "train.batch",
        "train.iterations",
        "train.lr",
        "train.weight_decay",
        "train.drop_ratio",
        "train.name_probs",
        "train.seed",
        "train.redux_aux",
        "train.grad_clip",
    ];

    /// Phase defaults overridden by `train.*` keys.
    pub fn from_kv(phase: Phase, kv: &KvConfig) -> Result<Self> {
        let d = Self::for_phase(phase);
        let probs = match kv.get_raw("train.name_probs") {
            Some(s) => parse_probs(s)?,
            None => d.name_level_probs,
        };
        let c = Self {
            phase,
            batch: kv.get_or("train.batch", d.batch)?,
            iterations: kv.get_or("train.iterations", d.iterations)?,
            lr: kv.get_or("train.lr", d.lr)?,
            weight_decay: kv.get_or("train.weight_decay", d.weight_decay)?,
            drop_ratio: kv.get_or("train.drop_ratio", d.drop_ratio)?,
            name_level_probs: probs,
            seed: kv.get_or("train.seed", d.seed)?,
            redux_aux: kv.get_or("train.redux_aux", d.redux_aux)?,
            grad_clip: kv.get_or("train.grad_clip", d.grad_clip)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("train.batch", self.batch);
        kv.set("train.iterations", self.iterations);
        kv.set("train.lr", self.lr);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.drop_ratio", self.drop_ratio);
        let p = self.name_level_probs;
        kv.set("train.name_probs", format!("{},{},{}", p[0], p[1], p[2]));
        kv.set("train.seed", self.seed);
        kv.set("train.redux_aux", self.redux_aux);
        kv.set("train.grad_clip", self.grad_clip);
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return Err(Error::Config(format!("drop_ratio {} outside [0, 1]", self.drop_ratio)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} is negative", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.redux_aux) {
            return Err(Error::Config(format!("redux_aux {} outside [0, 1]", self.redux_aux)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        sample_name_level(&mut ChaCha8Rng::seed_from_u64(0), self.name_level_probs).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, grad_clip: self.grad_clip, ..Default::default() }
    }
}

pub fn parse_probs(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad probability {x:?} in {s:?}"))))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("expected three name-level probabilities, got {s:?}")))
}

/// Which alignment components an adapted model uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptVariant {
    pub use_dem: bool,
    pub use_mask: bool,
    /// Prepend the learnable token to concept names.
    pub learnable_token: bool,
    pub splice: SpliceMode,
}

impl Default for AdaptVariant {
    fn default() -> Self {
        Self { use_dem: true, use_mask: true, learnable_token: true, splice: SpliceMode::FirstOnly }
    }
}

impl AdaptVariant {
    pub const KEYS: &'static [&'static str] = &["adapt.dem", "adapt.mask", "adapt.learnable_token", "adapt.splice"];

    pub fn options(&self) -> AlignOptions {
        AlignOptions {
            gate: SegmentGate::adapt(),
            use_mask: self.use_mask,
            symmetric_mask: false,
            use_dem: self.use_dem,
            splice: self.splice,
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let splice = match kv.get_raw("adapt.splice") {
            None | Some("first_only") => SpliceMode::FirstOnly,
            Some("all") => SpliceMode::All,
            Some(other) => return Err(Error::Config(format!("adapt.splice must be first_only or all, got {other:?}"))),
        };
        Ok(Self {
            use_dem: kv.get_or("adapt.dem", d.use_dem)?,
            use_mask: kv.get_or("adapt.mask", d.use_mask)?,
            learnable_token: kv.get_or("adapt.learnable_token", d.learnable_token)?,
            splice,
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("adapt.dem", self.use_dem);
        kv.set("adapt.mask", self.use_mask);
        kv.set("adapt.learnable_token", self.learnable_token);
        kv.set("adapt.splice", if self.splice == SpliceMode::All { "all" } else { "first_only" });
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dropped_refs: usize,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,grad_norm,dropped_refs\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.grad_norm, r.dropped_refs));
    }
    s
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sets the learnable token to the mean embedding of the catalog's surface
/// names.
pub fn init_s_star(store: &mut ParamStore<f32>, vocab: &Vocab, dataset: &Dataset) -> Result<()> {
    let mut ids: Vec<usize> = Vec::new();
    for c in &dataset.catalog {
        for w in &c.surface_name {
            ids.push(vocab.id(w)?);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Data("no concept names to initialize the learnable token from".into()));
    }
    let table = store.get("text.embed")?;
    let d = table.last_dim();
    let mut mean = vec![0.0f64; d];
    for &i in &ids {
        for (m, &v) in mean.iter_mut().zip(table.row(i)) {
            *m += v as f64 / ids.len() as f64;
        }
    }
    store.set("s_star", Tensor::new([1, d], mean.into_iter().map(|v| v as f32).collect())?)
}

/// Step-by-step trainer for either phase.
pub struct Trainer<'d> {
    store: ParamStore<f32>,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    variant: AdaptVariant,
    data: &'d Dataset,
    vocab: Vocab,
    pool: Vec<&'d Record>,
    patches: HashMap<String, Vec<f32>>,
    black: Vec<f32>,
    rng: ChaCha8Rng,
    opt: AdamW,
    frozen: Option<ParamStore<f32>>,
    log: Vec<LogRow>,
    initial_loss: Option<f64>,
    over: usize,
}

impl<'d> Trainer<'d> {
    /// Pretraining on every `Pretrain` record; `store` is usually fresh.
    pub fn pretrain(data: &'d Dataset, vocab: &Vocab, cfg: &ModelConfig, tcfg: &TrainConfig, mut store: ParamStore<f32>) -> Result<Self> {
        if tcfg.phase != Phase::Pretrain {
            return Err(Error::Config("pretraining needs a pretrain-phase config".into()));
        }
        store.set_phase(Phase::Pretrain);
        let pool = data.records_of(RecordKind::Pretrain, None);
        Self::new(data, vocab, cfg, tcfg, AdaptVariant::default(), store, pool, None)
    }

    /// Adaptation on the training split of the pair records, starting from a
    /// pretrained store. The learnable token is initialized here.
    pub fn adapt(
        data: &'d Dataset,
        vocab: &Vocab,
        cfg: &ModelConfig,
        tcfg: &TrainConfig,
        variant: AdaptVariant,
        mut store: ParamStore<f32>,
    ) -> Result<Self> {
        if tcfg.phase != Phase::Adapt {
            return Err(Error::Config("adaptation needs an adapt-phase config".into()));
        }
        init_s_star(&mut store, vocab, data)?;
        store.set_phase(Phase::Adapt);
        let frozen = store.clone();
        let pool = data.records_of(RecordKind::Pair, Some(Split::Train));
        Self::new(data, vocab, cfg, tcfg, variant, store, pool, Some(frozen))
    }

    #[allow(clippy::too_many_arguments)]
    fn new(
        data: &'d Dataset,
        vocab: &Vocab,
        cfg: &ModelConfig,
        tcfg: &TrainConfig,
        variant: AdaptVariant,
        store: ParamStore<f32>,
        pool: Vec<&'d Record>,
        frozen: Option<ParamStore<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        tcfg.validate()?;
        if pool.is_empty() {
            return Err(Error::Data(format!("no training records for the {:?} phase", tcfg.phase)));
        }
        if data.image_side != cfg.image_side {
            return Err(Error::Data(format!("dataset images are {}px, model expects {}px", data.image_side, cfg.image_side)));
        }
        let mut patches = HashMap::new();
        for r in &pool {
            for name in std::iter::once(&r.image).chain(r.reference.as_ref()) {
                if !patches.contains_key(name) {
                    patches.insert(name.clone(), data.image(name)?.patchify(cfg.patch)?);
                }
            }
        }
        let black = black_reference(cfg.image_side, cfg.image_side)?.patchify(cfg.patch)?;
        Ok(Self {
            opt: AdamW::new(tcfg.adamw(), &store)?,
            store,
            cfg: cfg.clone(),
            tcfg: tcfg.clone(),
            variant,
            data,
            vocab: vocab.clone(),
            pool,
            patches,
            black,
            rng: ChaCha8Rng::seed_from_u64(tcfg.seed),
            frozen,
            log: Vec::new(),
            initial_loss: None,
            over: 0,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn into_store(self) -> ParamStore<f32> {
        self.store
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.log.len()
    }

    fn tensor(&self, rows: &[&[f32]]) -> Result<Tensor<f32>> {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::new([rows.len(), self.cfg.tokens(), self.cfg.patch_dim()], data)?)
    }

    /// Draws a batch and builds its conditioning; returns the number of
    /// black references.
    fn batch(&mut self) -> Result<(Vec<FlowSample>, Conditioning<f32>, usize)> {
        let b = self.tcfg.batch;
        let picks: Vec<&Record> = (0..b).map(|_| self.pool[self.rng.random_range(0..self.pool.len())]).collect();
        let mut samples = Vec::with_capacity(b);
        let mut bundles = Vec::with_capacity(b);
        let mut refs: Vec<&[f32]> = Vec::with_capacity(b);
        let mut dropped = 0;
        let mut aux = Vec::new();
        let mut spans = Vec::new();
        for (i, r) in picks.iter().enumerate() {
            let x = &self.patches[&r.image];
            match self.tcfg.phase {
                Phase::Pretrain => {
                    bundles.push(build_plain_prompt(&self.vocab, &r.caption, self.cfg.text_len)?);
                    refs.push(&self.black);
                    if self.rng.random::<f64>() < self.tcfg.redux_aux {
                        aux.push(i);
                    }
                }
                Phase::Adapt => {
                    let id = r.concept_id.ok_or_else(|| Error::Data(format!("pair record {} has no concept", r.id)))?;
                    let concept = self.data.concept(id).ok_or_else(|| Error::Data(format!("unknown concept {id}")))?;
                    let level = sample_name_level(&mut self.rng, self.tcfg.name_level_probs)?;
                    let slot = ConceptSlot { level, learnable: self.variant.learnable_token };
                    let bundle = build_prompt_with(&self.vocab, &r.caption, concept, slot, self.cfg.text_len)?;
                    if let Some(span) = bundle.concept_span() {
                        spans.push((i, span));
                    }
                    bundles.push(bundle);
                    let drop = self.rng.random::<f64>() < self.tcfg.drop_ratio;
                    if drop {
                        dropped += 1;
                        refs.push(&self.black);
                    } else {
                        let name = r.reference.as_ref().ok_or_else(|| Error::Data(format!("pair record {} has no reference", r.id)))?;
                        refs.push(&self.patches[name]);
                    }
                }
            }
            samples.push(flow::make_flow_sample(x, &mut self.rng, flow::uniform_t)?);
        }
        let ref_tensor = self.tensor(&refs)?;
        let redux_text = if aux.is_empty() {
            None
        } else {
            let rows: Vec<&[f32]> = aux.iter().map(|&i| samples[i].x_data.as_slice()).collect();
            Some((aux.clone(), self.tensor(&rows)?))
        };
        let dem = if self.variant.use_dem && self.tcfg.phase == Phase::Adapt && !spans.is_empty() {
            let rows: Vec<&[f32]> = spans.iter().map(|(i, _)| refs[*i]).collect();
            Some((spans, self.tensor(&rows)?))
        } else {
            None
        };
        let cond = Conditioning { bundles, refs: vec![ref_tensor], dem, redux_text };
        Ok((samples, cond, dropped))
    }

    fn options(&self) -> AlignOptions {
        match self.tcfg.phase {
            Phase::Pretrain => AlignOptions::base(),
            Phase::Adapt => self.variant.options(),
        }
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LogRow> {
        let (samples, cond, dropped) = self.batch()?;
        let opts = self.options();
        let (loss, grads) = {
            let mut ctx = Ctx::new(&self.store, true);
            let l = flow::loss(&mut ctx, &self.cfg, &samples, &cond, &opts)?;
            let v = ctx.g.value(l).data()[0] as f64;
            (v, ctx.grads(l)?)
        };
        let grad_norm = match self.opt.step(&mut self.store, &grads)? {
            StepOutcome::Applied { grad_norm } => grad_norm,
            StepOutcome::Skipped => f64::NAN,
        };
        if let Some(frozen) = &self.frozen {
            assert!(self.store.group_bit_eq(frozen, Group::Base), "base parameters changed during adaptation");
        }
        let init = *self.initial_loss.get_or_insert(loss);
        if self.tcfg.phase == Phase::Pretrain {
            self.over = if loss > DIVERGENCE_FACTOR * init { self.over + 1 } else { 0 };
            if self.over >= DIVERGENCE_PATIENCE {
                return Err(Error::Numeric(format!(
                    "diverged: loss above {DIVERGENCE_FACTOR}x the initial {init:.4} for {DIVERGENCE_PATIENCE} steps"
                )));
            }
        }
        let row = LogRow { step: self.log.len(), loss, grad_norm, dropped_refs: dropped };
        self.log.push(row);
        Ok(row)
    }

    /// Runs the configured number of iterations; `progress` sees every row.
    pub fn run(&mut self, mut progress: impl FnMut(&LogRow)) -> Result<()> {
        while self.log.len() < self.tcfg.iterations {
            let row = self.step()?;
            progress(&row);
        }
        Ok(())
    }
}

/// Pretrains from a fresh initialization with `tcfg.seed`.
pub fn pretrain(data: &Dataset, vocab: &Vocab, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(ParamStore<f32>, Vec<LogRow>)> {
    let store = crate::ditnet::init_params(cfg, tcfg.seed)?;
    let mut t = Trainer::pretrain(data, vocab, cfg, tcfg, store)?;
    t.run(|_| {})?;
    let log = t.log().to_vec();
    Ok((t.into_store(), log))
}

pub fn adapt(
    data: &Dataset,
    vocab: &Vocab,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    variant: AdaptVariant,
    base: ParamStore<f32>,
) -> Result<(ParamStore<f32>, Vec<LogRow>)> {
    let mut t = Trainer::adapt(data, vocab, cfg, tcfg, variant, base)?;
    t.run(|_| {})?;
    let log = t.log().to_vec();
    Ok((t.into_store(), log))
}

/// The surface-only name distribution used when substitution is disabled.
pub const SURFACE_ONLY: [f64; 3] = [1.0, 0.0, 0.0];

#[cfg(test)]
mod tests;
