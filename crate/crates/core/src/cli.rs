//! The `prioralign` command line: argument parsing, layered configuration,
//! and the mapping from failures to exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attnlayout::{build_mask, AttentionMask, LayoutShape};
use crate::config::{KvConfig, ModelConfig};
use crate::ditnet::{AlignOptions, Conditioning};
use crate::encoders::{black_reference, patch_batch, Image};
use crate::error::{Error, Result};
use crate::evalkit::{self, AblationSettings, EvalSettings, Model, Variant};
use crate::flow::{self, SampleConfig, StepStat};
use crate::gradsuite;
use crate::params::{ParamStore, Phase};
use crate::promptkit::{bundle_from_text_with, Vocab};
use crate::synthdata::{generate, CorpusSpec, Dataset, Split, SynthSpec};
use crate::trainer::{self, checkpoint, AdaptVariant, LogRow, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Environment variable naming the default adapted-checkpoint cache.
pub const CACHE_ENV: &str = "PRIORALIGN_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Config(_)) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Run(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Run(_) => EXIT_DATA,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_USAGE => "usage",
            EXIT_NUMERIC => "numeric",
            EXIT_CHECK => "check",
            _ => "data",
        }
    }

    /// The single `error: <kind>: <message>` line printed on failure.
    pub fn line(&self) -> String {
        format!("error: {}: {}", self.kind(), self.to_string().replace('\n', " "))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "prioralign", version, about = "Synthetic-glyph personalization: data, training, sampling and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic glyph dataset.
    SynthData(SynthDataArgs),
    /// Train the base model on the skewed corpus.
    Pretrain(PretrainArgs),
    /// Train the adapter, DEM and learnable token on reference pairs.
    Adapt(AdaptArgs),
    /// Generate one image from a prompt and optional references.
    Sample(SampleArgs),
    /// Score a checkpoint on one split of the dataset.
    Eval(EvalArgs),
    /// Compare concept fidelity with and without the reference.
    Probe(ProbeArgs),
    /// Adapt and evaluate a list of ablation variants.
    Ablate(AblateArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

/// Config layering shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of anti-skew concepts.
    #[arg(long, default_value_t = 18)]
    pub concepts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of the dominant color per shape class in the corpus.
    #[arg(long, default_value_t = 0.9)]
    pub skew: f64,
    /// Reference/target pairs per concept.
    #[arg(long, default_value_t = 48)]
    pub pairs: usize,
    /// Concepts held out from adaptation.
    #[arg(long, default_value_t = 6)]
    pub heldout: usize,
    /// Pretraining corpus size.
    #[arg(long, default_value_t = 4000)]
    pub images: usize,
    #[arg(long, default_value_t = 16)]
    pub image_side: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output checkpoint; the config and log are written beside it.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training steps [default: 20000].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Batch size [default: 16].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initialization and batch seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the mean loss every N steps (0 is silent).
    #[arg(long, default_value_t = 500)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub base: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Probability of replacing the reference with a black image [default: 0.5].
    #[arg(long)]
    pub drop_ratio: Option<f64>,
    /// Train without the deviation extraction module.
    #[arg(long)]
    pub no_dem: bool,
    /// Train with an all-zero attention mask.
    #[arg(long)]
    pub no_mask: bool,
    /// Train without the learnable token.
    #[arg(long)]
    pub no_lt: bool,
    /// Splice the DEM output over every token of the concept span.
    #[arg(long)]
    pub replace_all: bool,
    /// Surface, parent and broader name probabilities [default: 0.6,0.3,0.1].
    #[arg(long, value_name = "A,B,C")]
    pub name_probs: Option<String>,
    /// Training steps [default: 5000].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Batch and dropout seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the mean loss every N steps (0 is silent).
    #[arg(long, default_value_t = 500)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Prompt; write each concept as `{name words}`.
    #[arg(long)]
    pub prompt: String,
    /// Reference PPM images, comma separated, one per concept or one shared
    /// [default: a black image].
    #[arg(long = "ref", value_name = "IMG[,IMG2]")]
    pub refs: Option<String>,
    /// Output PPM.
    #[arg(long, value_name = "IMG")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.5)]
    pub guidance: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also write the attention mask as text beside the image.
    #[arg(long)]
    pub dump_mask: bool,
    /// Also write per-step velocity norms as CSV beside the image.
    #[arg(long)]
    pub telemetry: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seeds per concept and background.
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1000)]
    pub first_seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Seeds 0..K per concept; at least 20.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    /// Optional report directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub base: PathBuf,
    /// Comma-separated variants: full, no_LT, no_DEM, no_mask, no_TS,
    /// replace_all, drop=R.
    #[arg(long, default_value = "full,no_LT,no_DEM,no_mask,no_TS")]
    pub variants: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Adaptation steps per variant [default: 5000].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Evaluation seeds per concept and background.
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    /// Adapted-checkpoint cache [default: $PRIORALIGN_CACHE_DIR, else none].
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Module to check (repeatable): attention, dem, lora, model [default: all].
    #[arg(long = "module", value_name = "NAME")]
    pub modules: Vec<String>,
}

/// Resolved settings of one run: the full key-value config, the paths it
/// touched and its global seed. Written next to every output.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub kv: KvConfig,
    pub paths: Vec<(String, PathBuf)>,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(kv: KvConfig, seed: u64) -> Self {
        Self { kv, paths: Vec::new(), seed }
    }

    pub fn path(mut self, key: &str, p: &Path) -> Self {
        self.paths.push((key.to_string(), std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())));
        self
    }

    pub fn resolved(&self) -> KvConfig {
        let mut kv = self.kv.clone();
        kv.set("run.seed", self.seed);
        for (k, p) in &self.paths {
            kv.set(&format!("path.{k}"), p.display());
        }
        kv
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.resolved().write(path)
    }
}

fn known_keys() -> Vec<&'static str> {
    let mut k: Vec<&str> = ModelConfig::KEYS.to_vec();
    k.extend_from_slice(TrainConfig::KEYS);
    k.extend_from_slice(AdaptVariant::KEYS);
    k
}

/// File, then `--set` overrides; unknown keys are rejected.
pub fn layered_config(args: &ConfigArgs) -> Result<KvConfig> {
    let mut kv = match &args.config {
        Some(p) => KvConfig::read(p)?,
        None => KvConfig::new(),
    };
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let mut one = KvConfig::new();
        one.set(k.trim(), v.trim());
        kv.overlay(&one);
    }
    kv.reject_unknown(&known_keys())?;
    Ok(kv)
}

fn model_keys_conflict(kv: &KvConfig, cfg: &ModelConfig) -> Result<()> {
    let mut base = KvConfig::new();
    cfg.write_kv(&mut base);
    for k in ModelConfig::KEYS {
        if let Some(v) = kv.get_raw(k) {
            if base.get_raw(k) != Some(v) {
                return Err(Error::Config(format!("config conflict: {k} = {v} but the base checkpoint has {}", base.get_raw(k).unwrap_or("?"))));
            }
        }
    }
    Ok(())
}

fn read_data(dir: &Path, cfg: Option<&ModelConfig>) -> Result<(Dataset, Vocab)> {
    let (ds, vocab) = Dataset::read(dir)?;
    if let Some(cfg) = cfg {
        if ds.image_side != cfg.image_side {
            return Err(Error::Config(format!("dataset images are {0}x{0} but the model expects {1}x{1}", ds.image_side, cfg.image_side)));
        }
        if vocab.len() != cfg.vocab_size {
            return Err(Error::Config(format!("dataset vocabulary has {} words, model has {}", vocab.len(), cfg.vocab_size)));
        }
    }
    Ok((ds, vocab))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The variant a checkpoint was adapted with, or `None` for a pretrained one.
pub fn checkpoint_variant(kv: &KvConfig) -> Result<Option<AdaptVariant>> {
    if AdaptVariant::KEYS.iter().any(|k| kv.get_raw(k).is_some()) {
        Ok(Some(AdaptVariant::from_kv(kv)?))
    } else {
        Ok(None)
    }
}

/// How a checkpoint is evaluated: adapted checkpoints with their own
/// variant; pretrained ones as the adaptation starting point (zero adapter,
/// identity DEM, learnable token at the mean surface-name embedding).
pub fn evaluation_view(kv: &KvConfig, store: &ParamStore<f32>, ds: &Dataset, vocab: &Vocab) -> Result<(ParamStore<f32>, AdaptVariant)> {
    match checkpoint_variant(kv)? {
        Some(v) => Ok((store.clone(), v)),
        None => {
            let mut s = store.clone();
            trainer::init_s_star(&mut s, vocab, ds)?;
            Ok((s, AdaptVariant::default()))
        }
    }
}

fn progress_printer(every: usize, label: &'static str) -> impl FnMut(&LogRow) {
    let mut acc = 0.0;
    move |r: &LogRow| {
        if every == 0 {
            return;
        }
        acc += r.loss;
        if (r.step + 1).is_multiple_of(every) {
            eprintln!("{label} step {} loss {:.5}", r.step + 1, acc / every as f64);
            acc = 0.0;
        }
    }
}

fn synth_data(a: &SynthDataArgs) -> CliResult<()> {
    let spec = SynthSpec {
        seed: a.seed,
        concepts: a.concepts,
        pairs_per_concept: a.pairs,
        heldout_concepts: a.heldout,
        corpus: CorpusSpec { images: a.images, image_side: a.image_side, skew: a.skew, ..Default::default() },
    };
    let vocab = Vocab::builtin();
    let ds = generate(&spec, &vocab)?;
    ds.write(&a.out, &vocab)?;
    let mut kv = KvConfig::new();
    kv.set("data.concepts", spec.concepts);
    kv.set("data.pairs", spec.pairs_per_concept);
    kv.set("data.heldout", spec.heldout_concepts);
    kv.set("data.images", spec.corpus.images);
    kv.set("data.image_side", spec.corpus.image_side);
    kv.set("data.skew", spec.corpus.skew);
    let hash = ds.hash()?;
    kv.set("data.hash", &hash);
    RunConfig::new(kv, a.seed).path("out", &a.out).write(a.out.join("run.cfg"))?;
    println!("wrote {} records, {} concepts, hash {hash}", ds.records.len(), ds.catalog.len());
    Ok(())
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let mut kv = layered_config(&a.cfg)?;
    if let Some(v) = a.iterations {
        kv.set("train.iterations", v);
    }
    if let Some(v) = a.batch {
        kv.set("train.batch", v);
    }
    if let Some(v) = a.lr {
        kv.set("train.lr", v);
    }
    if let Some(v) = a.seed {
        kv.set("train.seed", v);
    }
    if AdaptVariant::KEYS.iter().any(|k| kv.get_raw(k).is_some()) {
        return Err(CliError::Usage("adapt.* keys have no meaning for pretrain".into()));
    }
    let cfg = ModelConfig::from_kv(&kv)?;
    let tcfg = TrainConfig::from_kv(Phase::Pretrain, &kv)?;
    let (ds, vocab) = read_data(&a.data, Some(&cfg))?;
    let mut t = Trainer::pretrain(&ds, &vocab, &cfg, &tcfg, crate::ditnet::init_params(&cfg, tcfg.seed)?)?;
    t.run(progress_printer(a.log_every, "pretrain"))?;
    let mut out = KvConfig::new();
    cfg.write_kv(&mut out);
    tcfg.write_kv(&mut out);
    out.set("data.hash", ds.hash()?);
    let run = RunConfig::new(out, tcfg.seed).path("data", &a.data).path("out", &a.out);
    checkpoint::save_model(t.store(), &run.resolved(), &a.out)?;
    trainer::write_log(t.log(), log_path(&a.out))?;
    println!("final loss {:.5} after {} steps", t.log().last().map_or(f64::NAN, |r| r.loss), t.steps_done());
    Ok(())
}

fn adapt(a: &AdaptArgs) -> CliResult<()> {
    let mut kv = layered_config(&a.cfg)?;
    let (cfg, base_kv, store) = checkpoint::load_model(&a.base)?;
    if checkpoint_variant(&base_kv)?.is_some() {
        return Err(CliError::Usage(format!("{} is already adapted; pass a pretrained checkpoint", a.base.display())));
    }
    model_keys_conflict(&kv, &cfg)?;
    if let Some(v) = a.drop_ratio {
        kv.set("train.drop_ratio", v);
    }
    if let Some(v) = &a.name_probs {
        kv.set("train.name_probs", v);
    }
    if let Some(v) = a.iterations {
        kv.set("train.iterations", v);
    }
    if let Some(v) = a.seed {
        kv.set("train.seed", v);
    }
    for (flag, key) in [(a.no_dem, "adapt.dem"), (a.no_mask, "adapt.mask"), (a.no_lt, "adapt.learnable_token")] {
        if flag {
            kv.set(key, false);
        }
    }
    if a.replace_all {
        kv.set("adapt.splice", "all");
    }
    let tcfg = TrainConfig::from_kv(Phase::Adapt, &kv)?;
    let variant = AdaptVariant::from_kv(&kv)?;
    if variant.splice == crate::dem::SpliceMode::All && !variant.use_dem {
        return Err(CliError::Usage("config conflict: replace-all splicing needs the DEM".into()));
    }
    let (ds, vocab) = read_data(&a.data, Some(&cfg))?;
    let mut t = Trainer::adapt(&ds, &vocab, &cfg, &tcfg, variant, store)?;
    t.run(progress_printer(a.log_every, "adapt"))?;
    let mut out = KvConfig::new();
    cfg.write_kv(&mut out);
    tcfg.write_kv(&mut out);
    variant.write_kv(&mut out);
    out.set("data.hash", ds.hash()?);
    let run = RunConfig::new(out, tcfg.seed).path("data", &a.data).path("base", &a.base).path("out", &a.out);
    checkpoint::save_model(t.store(), &run.resolved(), &a.out)?;
    trainer::write_log(t.log(), log_path(&a.out))?;
    println!("final loss {:.5} after {} steps", t.log().last().map_or(f64::NAN, |r| r.loss), t.steps_done());
    Ok(())
}

fn sample(a: &SampleArgs) -> CliResult<()> {
    let (cfg, kv, store) = checkpoint::load_model(&a.ckpt)?;
    let (opts, learnable) = match checkpoint_variant(&kv)? {
        Some(v) => (v.options(), v.learnable_token),
        None => (AlignOptions::base(), false),
    };
    let vocab = Vocab::builtin();
    let bundle = bundle_from_text_with(&vocab, &a.prompt, cfg.text_len, learnable)?;
    let side = cfg.image_side;
    let refs: Vec<Image> = match &a.refs {
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|p| {
                let im = Image::read_ppm(p.trim())?;
                if (im.height(), im.width()) != (side, side) {
                    return Err(Error::Data(format!("reference {p} is {}x{}, model expects {side}x{side}", im.width(), im.height())));
                }
                Ok(im)
            })
            .collect::<Result<_>>()?,
        None => vec![black_reference(side, side)?],
    };
    if refs.is_empty() {
        return Err(CliError::Usage("--ref lists no images".into()));
    }
    let spans = bundle.spans.len();
    if refs.len() > 1 && refs.len() != spans {
        return Err(CliError::Usage(format!("{} references for {spans} concept group(s)", refs.len())));
    }
    let ref_tensors = refs.iter().map(|r| patch_batch(&cfg, &[r])).collect::<Result<Vec<_>>>()?;
    let dem = if opts.use_dem && spans > 0 {
        let rows: Vec<&Image> = (0..spans).map(|i| &refs[i.min(refs.len() - 1)]).collect();
        Some((bundle.spans.iter().map(|s| (0, *s)).collect(), patch_batch(&cfg, &rows)?))
    } else {
        None
    };
    let cond = Conditioning { bundles: vec![bundle.clone()], refs: ref_tensors, dem, redux_text: None };
    let scfg = SampleConfig { steps: a.steps, guidance: a.guidance, seed: a.seed };
    let mut tel: Vec<StepStat> = Vec::new();
    let im = flow::sample(&store, &cfg, opts, &cond, &scfg, a.telemetry.then_some(&mut tel))?;
    im.write_ppm(&a.out)?;
    if a.dump_mask {
        let shape = LayoutShape::new(cfg.grid(), cfg.grid(), cfg.text_len, refs.len());
        let mask = if opts.use_mask { build_mask(&shape, &bundle.relevance, opts.symmetric_mask)? } else { AttentionMask::zeros(shape.total()) };
        write_text(&a.out.with_extension("mask.txt"), &mask.dump())?;
    }
    if a.telemetry {
        let mut s = String::from("step,t,v_norm\n");
        for r in &tel {
            s.push_str(&format!("{},{},{}\n", r.step, r.t, r.v_norm));
        }
        write_text(&a.out.with_extension("telemetry.csv"), &s)?;
    }
    let mut out = KvConfig::new();
    out.set("sample.steps", a.steps);
    out.set("sample.guidance", a.guidance);
    out.set("sample.prompt", &a.prompt);
    out.set("sample.refs", a.refs.as_deref().unwrap_or("black"));
    RunConfig::new(out, a.seed).path("ckpt", &a.ckpt).path("out", &a.out).write(a.out.with_extension("cfg"))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let (cfg, kv, store) = checkpoint::load_model(&a.ckpt)?;
    let (ds, vocab) = read_data(&a.data, Some(&cfg))?;
    let (store, variant) = evaluation_view(&kv, &store, &ds, &vocab)?;
    let model = Model { store: &store, cfg: &cfg, opts: variant.options(), learnable_token: variant.learnable_token };
    let settings = EvalSettings { seeds: a.seeds, first_seed: a.first_seed, ..Default::default() };
    let name = a.ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let report = evalkit::evaluate(&model, &ds, &vocab, a.split.into(), &settings, &name)?;
    report.write(&a.out)?;
    let mut out = KvConfig::new();
    out.set("eval.seeds", a.seeds);
    out.set("eval.split", format!("{:?}", a.split).to_lowercase());
    RunConfig::new(out, a.first_seed).path("ckpt", &a.ckpt).path("data", &a.data).path("out", &a.out).write(a.out.join("run.cfg"))?;
    println!("{}", report.summary_json()?);
    Ok(())
}

fn probe(a: &ProbeArgs) -> CliResult<()> {
    let (cfg, kv, store) = checkpoint::load_model(&a.ckpt)?;
    let (ds, vocab) = read_data(&a.data, Some(&cfg))?;
    let (store, variant) = evaluation_view(&kv, &store, &ds, &vocab)?;
    let model = Model { store: &store, cfg: &cfg, opts: variant.options(), learnable_token: variant.learnable_token };
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let report = evalkit::probe_split(&model, &ds, &vocab, a.split.into(), &seeds, &EvalSettings::default())?;
    let summary = serde_json::json!({
        "cp_with_ref": report.cp_with_ref,
        "cp_black_ref": report.cp_black_ref,
        "delta": report.delta,
        "samples": report.rows.len(),
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("probe.csv"), &report.csv())?;
        write_text(&dir.join("probe.json"), &format!("{summary:#}\n"))?;
        let mut out = KvConfig::new();
        out.set("probe.seeds", a.seeds);
        out.set("probe.split", format!("{:?}", a.split).to_lowercase());
        RunConfig::new(out, 0).path("ckpt", &a.ckpt).path("data", &a.data).path("out", dir).write(dir.join("run.cfg"))?;
    }
    println!("{summary}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let variants = Variant::parse_list(&a.variants)?;
    let mut kv = layered_config(&a.cfg)?;
    let (cfg, base_kv, base) = checkpoint::load_model(&a.base)?;
    if checkpoint_variant(&base_kv)?.is_some() {
        return Err(CliError::Usage(format!("{} is already adapted; pass a pretrained checkpoint", a.base.display())));
    }
    model_keys_conflict(&kv, &cfg)?;
    if AdaptVariant::KEYS.iter().any(|k| kv.get_raw(k).is_some()) {
        return Err(CliError::Usage("config conflict: adapt.* keys are set per variant by ablate".into()));
    }
    if let Some(v) = a.iterations {
        kv.set("train.iterations", v);
    }
    let train = TrainConfig::from_kv(Phase::Adapt, &kv)?;
    let (ds, vocab) = read_data(&a.data, Some(&cfg))?;
    let cache = a.cache.clone().or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let settings = AblationSettings { train: train.clone(), eval: EvalSettings { seeds: a.seeds, ..Default::default() }, cache };
    create_dir(&a.out)?;
    let reports = evalkit::ablation_run(&ds, &vocab, &cfg, &base, &variants, &settings, |r| {
        eprintln!("{}: cp {:.4} pf {:.4} cp*pf {:.4}", r.name, r.cp, r.pf, r.cp_pf);
    })?;
    for r in &reports {
        r.write(a.out.join(r.name.replace('=', "_")))?;
    }
    let csv = evalkit::ablation_csv(&reports);
    write_text(&a.out.join("ablation.csv"), &csv)?;
    let mut out = KvConfig::new();
    cfg.write_kv(&mut out);
    train.write_kv(&mut out);
    out.set("ablate.variants", &a.variants);
    out.set("ablate.seeds", a.seeds);
    RunConfig::new(out, train.seed).path("data", &a.data).path("base", &a.base).path("out", &a.out).write(a.out.join("run.cfg"))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let reports = gradsuite::run_all(&a.modules)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(gradsuite::TOLERANCE);
        println!("{:<10} max_rel_err {:.3e} over {} scalars {}", r.op_name, r.max_rel_err, r.scalars_checked, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(r.op_name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Help and version go to stdout with code 0.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            eprintln!("{}", err.line());
            let rest: Vec<&str> = rendered.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
            if !rest.is_empty() {
                eprintln!("{}", rest.join("\n"));
            }
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
