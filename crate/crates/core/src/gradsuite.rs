//! Central-difference gradient checks for every trainable building block,
//! run in 64-bit on a deliberately tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attnlayout::{build_mask, rope_indices, stack_masks, LayoutShape};
use crate::config::ModelConfig;
use crate::diffcore::{gradcheck, project_to_scalar, DiffError, GradReport, Graph, Tensor, Var};
use crate::ditnet::{forward_velocity, init_params, mma_block, rope_tables, AlignOptions, Conditioning, LoraRows, SegmentGate};
use crate::encoders::{patch_batch, Image};
use crate::error::{Error, Result};
use crate::layers::attend;
use crate::params::{Ctx, ParamStore};
use crate::promptkit::{bundle_from_text, Vocab};

/// Largest relative error a block may show.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-5;
pub const MODULES: [&str; 4] = ["attention", "dem", "lora", "model"];

fn check_cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        blocks: 1,
        heads: 2,
        text_heads: 2,
        dem_heads: 2,
        patch: 4,
        image_side: 8,
        text_len: 4,
        redux_tokens: 4,
        lora_rank: 2,
        mlp_ratio: 2,
        dem_mlp_ratio: 2,
        time_dim: 4,
        ..Default::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Every group drawn away from its init so zero-init paths are exercised.
fn random_store(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut s = init_params(cfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for e in s.entries_mut() {
        for v in e.tensor.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    s.set_all_trainable(true);
    Ok(s)
}

fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Invalid(other.to_string()),
    }
}

fn named(store: &ParamStore<f64>, keep: impl Fn(&str) -> bool) -> Vec<(String, Tensor<f64>)> {
    store.entries().iter().filter(|e| keep(&e.name)).map(|e| (e.name.clone(), e.tensor.clone())).collect()
}

/// Fresh context over `store` with the first `params.len()` leaves bound
/// to the named parameters.
fn bound<'a>(g: &mut Graph<f64>, store: &'a ParamStore<f64>, params: &[(String, Tensor<f64>)], vars: &[Var]) -> Result<Ctx<'a, f64>> {
    let mut ctx = Ctx::with_graph(std::mem::take(g), store, false);
    for ((name, _), &v) in params.iter().zip(vars) {
        ctx.bind(name, v)?;
    }
    Ok(ctx)
}

/// Text positions 1 and 3 irrelevant, so part of the mask is active.
fn layout(cfg: &ModelConfig) -> Result<(LayoutShape, Tensor<f64>, crate::layers::RopeTables<f64>)> {
    let shape = LayoutShape::new(cfg.grid(), cfg.grid(), cfg.text_len, 1);
    let relevance: Vec<bool> = (0..cfg.text_len).map(|i| i % 2 == 0).collect();
    let mask = stack_masks(&[build_mask(&shape, &relevance, false)?])?;
    let rope = rope_tables(&rope_indices(&shape, cfg.ref_col_offset()), cfg.head_dim(), cfg.rope_theta)?;
    Ok((shape, mask, rope))
}

fn attention_check() -> Result<GradReport> {
    let cfg = check_cfg();
    let (shape, mask, rope) = layout(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = shape.total();
    let params: Vec<(String, Tensor<f64>)> =
        ["q", "k", "v"].iter().map(|n| (n.to_string(), uniform(&mut rng, &[1, t, cfg.d], 1.0))).collect();
    let proj = uniform(&mut rng, &[1, t, cfg.d], 1.0);
    let empty = ParamStore::<f64>::new();
    Ok(gradcheck("attention", &params, EPS, |g, v| {
        let mut ctx = Ctx::with_graph(std::mem::take(g), &empty, false);
        let o = attend(&mut ctx, v[0], v[1], v[2], cfg.heads, Some(&mask), Some(&rope)).map_err(to_diff)?;
        let y = project_to_scalar(&mut ctx.g, o, &proj)?;
        *g = ctx.g;
        Ok(y)
    })?)
}

fn dem_check() -> Result<GradReport> {
    let cfg = check_cfg();
    let s = random_store(&cfg, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = named(&s, |n| n.starts_with("dem."));
    params.push(("concept".into(), uniform(&mut rng, &[1, 2, cfg.d], 1.0)));
    let redux = uniform(&mut rng, &[1, cfg.redux_tokens, cfg.d], 1.0);
    let proj = uniform(&mut rng, &[1, 2, cfg.d], 1.0);
    let n = params.len() - 1;
    Ok(gradcheck("dem", &params, EPS, |g, v| {
        let mut ctx = bound(g, &s, &params[..n], v).map_err(to_diff)?;
        let r = ctx.g.constant(redux.clone());
        let o = crate::dem::dem_forward(&mut ctx, &cfg, v[n], r).map_err(to_diff)?;
        let y = project_to_scalar(&mut ctx.g, o, &proj)?;
        *g = ctx.g;
        Ok(y)
    })?)
}

/// One backbone block with the adapter live on reference rows.
fn lora_check() -> Result<GradReport> {
    let cfg = check_cfg();
    let s = random_store(&cfg, 4)?;
    let (shape, mask, rope) = layout(&cfg)?;
    let rows = LoraRows::new(&shape, 1, &SegmentGate::adapt());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = named(&s, |n| n.starts_with("blocks.0.") || n.starts_with("lora.blocks.0."));
    let x = uniform(&mut rng, &[1, shape.total(), cfg.d], 1.0);
    let temb = uniform(&mut rng, &[1, cfg.d], 1.0);
    let proj = uniform(&mut rng, &[1, shape.total(), cfg.d], 1.0);
    Ok(gradcheck("lora", &params, EPS, |g, v| {
        let mut ctx = bound(g, &s, &params, v).map_err(to_diff)?;
        let (xv, tv) = (ctx.g.constant(x.clone()), ctx.g.constant(temb.clone()));
        let o = mma_block(&mut ctx, &cfg, 0, xv, tv, Some(&mask), &rope, &rows).map_err(to_diff)?;
        let y = project_to_scalar(&mut ctx.g, o.tokens, &proj)?;
        *g = ctx.g;
        Ok(y)
    })?)
}

/// Whole one-block model with DEM, mask, adapter and learnable token.
fn model_check() -> Result<GradReport> {
    let cfg = check_cfg();
    let s = random_store(&cfg, 6)?;
    let vocab = Vocab::builtin();
    let bundle = bundle_from_text(&vocab, "a {coin} on", cfg.text_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let side = cfg.image_side;
    let reference = Image::new(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect())?;
    let patches: Tensor<f64> = patch_batch(&cfg, &[&reference])?;
    let spans = bundle.spans.iter().map(|sp| (0, *sp)).collect();
    let cond = Conditioning { bundles: vec![bundle], refs: vec![patches.clone()], dem: Some((spans, patches)), redux_text: None };
    let dims = [1, cfg.tokens(), cfg.patch_dim()];
    let (x, proj) = (uniform(&mut rng, &dims, 1.0), uniform(&mut rng, &dims, 1.0));
    let params = named(&s, |_| true);
    Ok(gradcheck("model", &params, EPS, |g, v| {
        let mut ctx = bound(g, &s, &params, v).map_err(to_diff)?;
        let o = forward_velocity(&mut ctx, &cfg, &x, &[0.6], &cond, &AlignOptions::full()).map_err(to_diff)?;
        let y = project_to_scalar(&mut ctx.g, o.velocity, &proj)?;
        *g = ctx.g;
        Ok(y)
    })?)
}

/// Runs one named check.
pub fn run(module: &str) -> Result<GradReport> {
    match module {
        "attention" => attention_check(),
        "dem" => dem_check(),
        "lora" => lora_check(),
        "model" => model_check(),
        other => Err(Error::Config(format!("unknown gradcheck module {other:?}; expected one of {}", MODULES.join(", ")))),
    }
}

/// Runs `modules`, or every module when empty.
pub fn run_all(modules: &[String]) -> Result<Vec<GradReport>> {
    if modules.is_empty() {
        MODULES.iter().map(|m| run(m)).collect()
    } else {
        modules.iter().map(|m| run(m)).collect()
    }
}
