//! Attention and MLP building blocks shared by the encoders, the DEM and the
//! backbone.

use std::rc::Rc;

use crate::diffcore::{Real, Tensor, Var};
use crate::error::Result;
use crate::params::{Ctx, Group, Init, ParamSpec};

pub const NORM_EPS: f64 = 1e-6;

/// Rotary tables `[T, dh/2]` for every token of a sequence.
#[derive(Clone, Debug)]
pub struct RopeTables<F: Real> {
    pub cos: Rc<Vec<F>>,
    pub sin: Rc<Vec<F>>,
}

/// Multi-head scaled dot-product attention over already projected
/// `q: [B, T, d]`, `k, v: [B, S, d]`. `mask` is `[B, T, S]`.
pub fn attend<F: Real>(
    ctx: &mut Ctx<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<F>>,
    rope: Option<&RopeTables<F>>,
) -> Result<Var> {
    let g = &mut ctx.g;
    let mut qh = g.split_heads(q, heads)?;
    let mut kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    if let Some(r) = rope {
        qh = g.rope(qh, r.cos.clone(), r.sin.clone())?;
        kh = g.rope(kh, r.cos.clone(), r.sin.clone())?;
    }
    let dh = g.dims(qh)[2];
    let logits = g.matmul_nt(qh, kh)?;
    let logits = g.scale(logits, F::of(1.0 / (dh as f64).sqrt()))?;
    let att = g.softmax_masked(logits, mask, heads)?;
    let out = g.matmul(att, vh)?;
    Ok(g.merge_heads(out, heads)?)
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp<F: Real>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.linear(x, &format!("{prefix}.fc1"))?;
    let h = ctx.g.gelu(h)?;
    ctx.linear(h, &format!("{prefix}.fc2"))
}

pub fn rms<F: Real>(ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
    Ok(ctx.g.rms_norm(x, None, F::of(NORM_EPS))?)
}

/// Specs for a `{prefix}.w` / `{prefix}.b` linear layer.
pub fn linear_specs(prefix: &str, input: usize, output: usize, group: Group, zero: bool) -> Vec<ParamSpec> {
    let w_init = if zero { Init::Zeros } else { Init::Normal(1.0 / (input as f64).sqrt()) };
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[input, output], group, w_init),
        ParamSpec::new(format!("{prefix}.b"), &[output], group, Init::Zeros),
    ]
}

/// q/k/v/o projections; the output projection optionally zero-initialized.
pub fn attention_specs(prefix: &str, d: usize, group: Group, zero_out: bool) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for n in ["q", "k", "v"] {
        v.extend(linear_specs(&format!("{prefix}.{n}"), d, d, group, false));
    }
    v.extend(linear_specs(&format!("{prefix}.o"), d, d, group, zero_out));
    v
}

pub fn mlp_specs(prefix: &str, d: usize, hidden: usize, group: Group, zero_out: bool) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.fc1"), d, hidden, group, false);
    v.extend(linear_specs(&format!("{prefix}.fc2"), hidden, d, group, zero_out));
    v
}
