//! Miniature single-stream diffusion transformer over the joint
//! `[noisy, text, refs]` sequence.
//!
//! Each block is pre-norm attention and MLP, both modulated by the timestep
//! embedding (shift, scale, gate). q/k/v and both MLP linears carry LoRA
//! pairs whose contribution is applied only to rows of gated segments; other
//! rows never see the adapter, so their values are bitwise those of the base.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnlayout::{assemble, build_mask, rope_indices, stack_masks, AttentionMask, LayoutShape, Position, Segment};
use crate::config::ModelConfig;
use crate::dem::{self, SpliceMode};
use crate::diffcore::{Real, Tensor, Var};
use crate::encoders::{self, encode_redux, encode_reference, encode_text};
use crate::error::{Error, Result};
use crate::layers::{attention_specs, linear_specs, mlp_specs, rms, RopeTables};
use crate::params::{Ctx, Group, Init, ParamSpec, ParamStore};
use crate::promptkit::{ConceptSpan, PromptBundle};

/// LoRA scale per segment. Noisy and text segments are never adapted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentGate {
    refs: f64,
}

impl SegmentGate {
    /// No adapter anywhere (pretraining and the base model).
    pub fn off() -> Self {
        Self { refs: 0.0 }
    }

    /// Adapter on every reference segment.
    pub fn adapt() -> Self {
        Self { refs: 1.0 }
    }

    pub fn with_ref_scale(scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::Config(format!("LoRA scale {scale} is not finite")));
        }
        Ok(Self { refs: scale })
    }

    pub fn scale(&self, seg: Segment) -> f64 {
        match seg {
            Segment::Noisy | Segment::Text => 0.0,
            Segment::Ref(_) => self.refs,
        }
    }
}

/// Knobs that switch alignment components on and off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignOptions {
    pub gate: SegmentGate,
    pub use_mask: bool,
    pub symmetric_mask: bool,
    pub use_dem: bool,
    pub splice: SpliceMode,
}

impl AlignOptions {
    /// The pretrained text-to-image model: no adapter, no DEM.
    pub fn base() -> Self {
        Self { gate: SegmentGate::off(), use_mask: true, symmetric_mask: false, use_dem: false, splice: SpliceMode::FirstOnly }
    }

    pub fn full() -> Self {
        Self { gate: SegmentGate::adapt(), use_dem: true, ..Self::base() }
    }
}

/// Conditioning streams for a batch of `B` samples.
#[derive(Clone, Debug)]
pub struct Conditioning<F: Real> {
    pub bundles: Vec<PromptBundle>,
    /// `K` tensors of reference patches, each `[B, N, p·p·3]`.
    pub refs: Vec<Tensor<F>>,
    /// Concept spans fed through the DEM, with one redux source image per
    /// span (`[S, N, p·p·3]`).
    pub dem: Option<(Vec<(usize, ConceptSpan)>, Tensor<F>)>,
    /// Samples whose leading text rows are replaced by redux tokens of the
    /// given images (`[A, N, p·p·3]`); the image-variation auxiliary task.
    pub redux_text: Option<(Vec<usize>, Tensor<F>)>,
}

impl<F: Real> Conditioning<F> {
    pub fn batch(&self) -> usize {
        self.bundles.len()
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, r, hid) = (cfg.d, cfg.lora_rank, cfg.d * cfg.mlp_ratio);
    let mut v = encoders::param_specs(cfg);
    v.extend(linear_specs("time.fc1", cfg.time_dim, d, Group::Base, false));
    v.extend(linear_specs("time.fc2", d, d, Group::Base, false));
    let lora = |name: String, input: usize, output: usize| {
        vec![
            ParamSpec::new(format!("{name}.a"), &[input, r], Group::Lora, Init::Normal(1.0 / (input as f64).sqrt())),
            ParamSpec::new(format!("{name}.b"), &[r, output], Group::Lora, Init::Zeros),
        ]
    };
    for i in 0..cfg.blocks {
        v.push(ParamSpec::new(format!("blocks.{i}.mod.w"), &[d, 6 * d], Group::Base, Init::Normal(0.02)));
        v.push(ParamSpec::new(format!("blocks.{i}.mod.b"), &[6 * d], Group::Base, Init::Zeros));
        v.extend(attention_specs(&format!("blocks.{i}.attn"), d, Group::Base, false));
        v.extend(mlp_specs(&format!("blocks.{i}.mlp"), d, hid, Group::Base, false));
        for n in ["q", "k", "v"] {
            v.extend(lora(format!("lora.blocks.{i}.attn.{n}"), d, d));
        }
        v.extend(lora(format!("lora.blocks.{i}.mlp.fc1"), d, hid));
        v.extend(lora(format!("lora.blocks.{i}.mlp.fc2"), hid, d));
    }
    v.push(ParamSpec::new("final.mod.w", &[d, 2 * d], Group::Base, Init::Normal(0.02)));
    v.push(ParamSpec::new("final.mod.b", &[2 * d], Group::Base, Init::Zeros));
    v.push(ParamSpec::new("final.out.w", &[d, cfg.patch_dim()], Group::Base, Init::Normal(0.02)));
    v.push(ParamSpec::new("final.out.b", &[cfg.patch_dim()], Group::Base, Init::Zeros));
    v.extend(dem::param_specs(cfg));
    v
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    ParamStore::init(&param_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn angle(pos: Position, pair: usize, quarter: usize, theta: f64) -> f64 {
    let (coord, j) = if pair < quarter { (pos.0, pair) } else { (pos.1, pair - quarter) };
    coord as f64 * theta.powf(-(j as f64) / quarter as f64)
}

/// Rotates one head vector: the first half of the pairs by the row index,
/// the second half by the column index.
pub fn rope_rotate(v: &[f64], pos: Position, theta: f64) -> Result<Vec<f64>> {
    if v.is_empty() || !v.len().is_multiple_of(4) {
        return Err(Error::Config(format!("rotary head dim {} not divisible by 4", v.len())));
    }
    let quarter = v.len() / 4;
    let mut out = v.to_vec();
    for p in 0..v.len() / 2 {
        let a = angle(pos, p, quarter, theta);
        let (c, s) = (a.cos(), a.sin());
        out[2 * p] = v[2 * p] * c - v[2 * p + 1] * s;
        out[2 * p + 1] = v[2 * p] * s + v[2 * p + 1] * c;
    }
    Ok(out)
}

pub fn rope_tables<F: Real>(positions: &[Position], head_dim: usize, theta: f64) -> Result<RopeTables<F>> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::Config(format!("rotary head dim {head_dim} not divisible by 4")));
    }
    let (half, quarter) = (head_dim / 2, head_dim / 4);
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for p in 0..half {
            let a = angle(pos, p, quarter, theta);
            cos.push(F::of(a.cos()));
            sin.push(F::of(a.sin()));
        }
    }
    Ok(RopeTables { cos: Rc::new(cos), sin: Rc::new(sin) })
}

/// Flattened `B·T` rows that receive the adapter, with their scale.
#[derive(Clone, Debug, Default)]
pub struct LoraRows {
    pub rows: Vec<usize>,
    pub scale: f64,
}

impl LoraRows {
    pub fn new(shape: &LayoutShape, batch: usize, gate: &SegmentGate) -> Self {
        let segs = shape.segments();
        let t = segs.len();
        let scale = gate.scale(Segment::Ref(0));
        if scale == 0.0 {
            return Self::default();
        }
        let rows = (0..batch)
            .flat_map(|b| segs.iter().enumerate().filter(|(_, s)| gate.scale(**s) != 0.0).map(move |(i, _)| b * t + i))
            .collect();
        Self { rows, scale }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn lora_linear<F: Real>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, lora: &str, rows: &LoraRows) -> Result<Var> {
    let base = ctx.linear(x, prefix)?;
    if rows.is_empty() {
        return Ok(base);
    }
    let a = ctx.p(&format!("{lora}.a"))?;
    let b = ctx.p(&format!("{lora}.b"))?;
    let sub = ctx.g.gather_rows(x, &rows.rows)?;
    let h = ctx.g.matmul(sub, a)?;
    let mut delta = ctx.g.matmul(h, b)?;
    if rows.scale != 1.0 {
        delta = ctx.g.scale(delta, F::of(rows.scale))?;
    }
    Ok(ctx.g.scatter_rows(base, &rows.rows, delta, true)?)
}

/// `h · (1 + scale) + shift` per batch element.
fn modulate<F: Real>(ctx: &mut Ctx<'_, F>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = ctx.g.add_scalar(scale, F::one())?;
    let h = ctx.g.mul_per_batch(h, s1)?;
    Ok(ctx.g.add_per_batch(h, shift)?)
}

fn chunks<F: Real>(ctx: &mut Ctx<'_, F>, m: Var, n: usize, d: usize) -> Result<Vec<Var>> {
    Ok(ctx.g.split(m, 1, &vec![d; n])?)
}

/// `[B, d]` timestep conditioning.
pub fn time_embedding<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, t: &[f64]) -> Result<Var> {
    if t.is_empty() || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Numeric(format!("timesteps {t:?} outside [0, 1]")));
    }
    let tv = ctx.g.constant(Tensor::new([t.len()], t.iter().map(|&v| F::of(v)).collect())?);
    let e = ctx.g.timestep_embedding(tv, cfg.time_dim, F::of(1000.0))?;
    let h = ctx.linear(e, "time.fc1")?;
    let h = ctx.g.gelu(h)?;
    ctx.linear(h, "time.fc2")
}

pub struct BlockOut {
    pub tokens: Var,
    /// Attention probabilities `[B·heads, T, T]`.
    pub attention: Var,
}

/// One modulated attention + MLP block over `x: [B, T, d]`.
pub fn mma_block<F: Real>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    t_emb: Var,
    mask: Option<&Tensor<F>>,
    rope: &RopeTables<F>,
    lora: &LoraRows,
) -> Result<BlockOut> {
    let d = cfg.d;
    let pre = format!("blocks.{block}");
    let lp = format!("lora.blocks.{block}");
    let act = ctx.g.gelu(t_emb)?;
    let m = ctx.linear(act, &format!("{pre}.mod"))?;
    let c = chunks(ctx, m, 6, d)?;

    let h = rms(ctx, x)?;
    let h = modulate(ctx, h, c[0], c[1])?;
    let q = lora_linear(ctx, h, &format!("{pre}.attn.q"), &format!("{lp}.attn.q"), lora)?;
    let k = lora_linear(ctx, h, &format!("{pre}.attn.k"), &format!("{lp}.attn.k"), lora)?;
    let v = lora_linear(ctx, h, &format!("{pre}.attn.v"), &format!("{lp}.attn.v"), lora)?;
    let (q, k, v) = (ctx.g.split_heads(q, cfg.heads)?, ctx.g.split_heads(k, cfg.heads)?, ctx.g.split_heads(v, cfg.heads)?);
    let q = ctx.g.rope(q, rope.cos.clone(), rope.sin.clone())?;
    let k = ctx.g.rope(k, rope.cos.clone(), rope.sin.clone())?;
    let logits = ctx.g.matmul_nt(q, k)?;
    let logits = ctx.g.scale(logits, F::of(1.0 / (cfg.head_dim() as f64).sqrt()))?;
    let attention = ctx.g.softmax_masked(logits, mask, cfg.heads)?;
    let a = ctx.g.matmul(attention, v)?;
    let a = ctx.g.merge_heads(a, cfg.heads)?;
    let a = ctx.linear(a, &format!("{pre}.attn.o"))?;
    let a = ctx.g.mul_per_batch(a, c[2])?;
    let x = ctx.g.add(x, a)?;

    let h = rms(ctx, x)?;
    let h = modulate(ctx, h, c[3], c[4])?;
    let h = lora_linear(ctx, h, &format!("{pre}.mlp.fc1"), &format!("{lp}.mlp.fc1"), lora)?;
    let h = ctx.g.gelu(h)?;
    let h = lora_linear(ctx, h, &format!("{pre}.mlp.fc2"), &format!("{lp}.mlp.fc2"), lora)?;
    let h = ctx.g.mul_per_batch(h, c[5])?;
    let tokens = ctx.g.add(x, h)?;
    if !ctx.g.value(tokens).all_finite() {
        return Err(Error::Numeric(format!("non-finite activations in block {block}")));
    }
    Ok(BlockOut { tokens, attention })
}

/// Text stream after encoding, optional redux substitution and DEM splice.
pub fn condition_text<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, cond: &Conditioning<F>, opts: &AlignOptions) -> Result<Var> {
    let mut text = encode_text(ctx, cfg, &cond.bundles)?;
    if let Some((samples, patches)) = &cond.redux_text {
        let px = ctx.g.constant(patches.clone());
        let red = encode_redux(ctx, cfg, px)?;
        let r = cfg.redux_tokens;
        let rows: Vec<usize> = samples.iter().flat_map(|&s| s * cfg.text_len..s * cfg.text_len + r).collect();
        let flat = ctx.g.reshape(red, &[samples.len() * r, cfg.d])?;
        text = ctx.g.scatter_rows(text, &rows, flat, false)?;
    }
    if opts.use_dem {
        if let Some((spans, patches)) = &cond.dem {
            if !spans.is_empty() {
                let px = ctx.g.constant(patches.clone());
                let red = encode_redux(ctx, cfg, px)?;
                text = dem::apply(ctx, cfg, text, spans, red, opts.splice)?;
            }
        }
    }
    Ok(text)
}

/// Everything the backbone needs besides the noisy image and time.
pub struct Prepared<F: Real> {
    pub shape: LayoutShape,
    pub text: Var,
    pub refs: Vec<Var>,
    pub masks: Vec<AttentionMask>,
    pub mask: Option<Tensor<F>>,
    pub rope: RopeTables<F>,
    pub lora: LoraRows,
}

pub fn prepare<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, cond: &Conditioning<F>, opts: &AlignOptions) -> Result<Prepared<F>> {
    let b = cond.batch();
    let text = condition_text(ctx, cfg, cond, opts)?;
    let ref_scale = opts.gate.scale(Segment::Ref(0));
    let mut refs = Vec::with_capacity(cond.refs.len());
    for r in &cond.refs {
        if r.dims()[0] != b {
            return Err(Error::Layout(format!("reference batch {:?} for {b} samples", r.dims())));
        }
        let px = ctx.g.constant(r.clone());
        refs.push(encode_reference(ctx, cfg, px, ref_scale)?);
    }
    prepared_from(cfg, text, refs, &cond.bundles, opts)
}

fn prepared_from<F: Real>(
    cfg: &ModelConfig,
    text: Var,
    refs: Vec<Var>,
    bundles: &[PromptBundle],
    opts: &AlignOptions,
) -> Result<Prepared<F>> {
    let shape = LayoutShape::new(cfg.grid(), cfg.grid(), cfg.text_len, refs.len());
    let masks = bundles
        .iter()
        .map(|bd| {
            if opts.use_mask {
                build_mask(&shape, &bd.relevance, opts.symmetric_mask)
            } else {
                Ok(AttentionMask::zeros(shape.total()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = if masks.iter().all(AttentionMask::is_zero) { None } else { Some(stack_masks(&masks)?) };
    let rope = rope_tables(&rope_indices(&shape, cfg.ref_col_offset()), cfg.head_dim(), cfg.rope_theta)?;
    let lora = LoraRows::new(&shape, bundles.len(), &opts.gate);
    Ok(Prepared { shape, text, refs, masks, mask, rope, lora })
}

/// Re-binds precomputed text and reference streams as constants in a fresh
/// context (used by the sampler, whose conditioning is step-invariant).
pub fn prepare_constant<'a, F: Real>(
    ctx: &mut Ctx<'a, F>,
    cfg: &ModelConfig,
    text: &Tensor<F>,
    refs: &[Tensor<F>],
    bundles: &[PromptBundle],
    opts: &AlignOptions,
) -> Result<Prepared<F>> {
    let tv = ctx.g.constant(text.clone());
    let rv = refs.iter().map(|r| ctx.g.constant(r.clone())).collect();
    prepared_from(cfg, tv, rv, bundles, opts)
}

pub struct VelocityOut {
    /// `[B, N, p·p·3]`.
    pub velocity: Var,
    pub attention: Vec<Var>,
}

/// Backbone forward on noisy patches `[B, N, p·p·3]` at times `t`.
pub fn velocity<F: Real>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    prep: &Prepared<F>,
    noisy: &Tensor<F>,
    t: &[f64],
    bundles: &[PromptBundle],
) -> Result<VelocityOut> {
    let n = cfg.tokens();
    let b = bundles.len();
    if noisy.dims() != [b, n, cfg.patch_dim()] || t.len() != b {
        return Err(Error::Layout(format!("noisy {:?} with {} times for batch {b}", noisy.dims(), t.len())));
    }
    let xv = ctx.g.constant(noisy.clone());
    let x = ctx.linear(xv, "img_in")?;
    let layout = assemble(&mut ctx.g, x, prep.text, &prep.refs, bundles, (cfg.grid(), cfg.grid()))?;
    let t_emb = time_embedding(ctx, cfg, t)?;
    let mut h = layout.tokens;
    let mut attention = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        let out = mma_block(ctx, cfg, i, h, t_emb, prep.mask.as_ref(), &prep.rope, &prep.lora)?;
        h = out.tokens;
        attention.push(out.attention);
    }
    let h = ctx.g.slice(h, 1, 0, n)?;
    let act = ctx.g.gelu(t_emb)?;
    let m = ctx.linear(act, "final.mod")?;
    let c = chunks(ctx, m, 2, cfg.d)?;
    let h = rms(ctx, h)?;
    let h = modulate(ctx, h, c[0], c[1])?;
    let velocity = ctx.linear(h, "final.out")?;
    Ok(VelocityOut { velocity, attention })
}

/// Full forward: encode conditions, assemble, run blocks, predict velocity.
pub fn forward_velocity<F: Real>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    noisy: &Tensor<F>,
    t: &[f64],
    cond: &Conditioning<F>,
    opts: &AlignOptions,
) -> Result<VelocityOut> {
    let prep = prepare(ctx, cfg, cond, opts)?;
    velocity(ctx, cfg, &prep, noisy, t, &cond.bundles)
}
