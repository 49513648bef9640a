//! Deviation extraction: rewrites the learnable token from the redux summary
//! of the reference and splices it back into the text stream.
//!
//! The block is residual self-attention over the concept tokens, residual
//! cross-attention onto the redux tokens, then a residual MLP. Each sub-layer
//! is pre-normalized and its output projection starts at zero, so the module
//! is the identity at initialization.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffcore::{Real, Var};
use crate::error::{Error, Result};
use crate::layers::{attend, attention_specs, mlp, mlp_specs, rms};
use crate::params::{Ctx, Group, ParamSpec};
use crate::promptkit::ConceptSpan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceMode {
    /// Only the learnable position is replaced.
    #[default]
    FirstOnly,
    /// The whole concept span is replaced.
    All,
}

/// Rows `[start, end)` of one sample's text stream.
#[derive(Clone, Copy, Debug)]
pub struct ConceptTokens {
    pub tokens: Var,
    pub sample: usize,
    pub start: usize,
    pub end: usize,
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = attention_specs("dem.sa", cfg.d, Group::Dem, true);
    v.extend(attention_specs("dem.ca", cfg.d, Group::Dem, true));
    v.extend(mlp_specs("dem.mlp", cfg.d, cfg.d * cfg.dem_mlp_ratio, Group::Dem, true));
    v
}

/// Copies rows `[span.start, span.end)` of sample `sample` out of the text
/// stream `[B, M, d]` into a `[1+l, d]` matrix.
pub fn extract_concept_tokens<F: Real>(
    ctx: &mut Ctx<'_, F>,
    text: Var,
    sample: usize,
    span: &ConceptSpan,
) -> Result<ConceptTokens> {
    let dims = ctx.g.dims(text).to_vec();
    if dims.len() != 3 || sample >= dims[0] {
        return Err(Error::Layout(format!("sample {sample} of text stream {dims:?}")));
    }
    let m = dims[1];
    if span.start >= span.end || span.end > m {
        return Err(Error::Layout(format!("span [{}, {}) outside text length {m}", span.start, span.end)));
    }
    let rows: Vec<usize> = (span.start..span.end).map(|r| sample * m + r).collect();
    let tokens = ctx.g.gather_rows(text, &rows)?;
    Ok(ConceptTokens { tokens, sample, start: span.start, end: span.end })
}

/// `c: [S, L, d]`, `redux: [S, R, d]` → updated `[S, L, d]`.
pub fn dem_forward<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, c: Var, redux: Var) -> Result<Var> {
    let (cd, rd) = (ctx.g.dims(c).to_vec(), ctx.g.dims(redux).to_vec());
    if cd.len() != 3 || rd.len() != 3 || cd[0] != rd[0] || cd[2] != rd[2] || cd[2] != cfg.d {
        return Err(Error::Layout(format!("DEM streams {cd:?} and {rd:?} disagree (d = {})", cfg.d)));
    }
    let h = rms(ctx, c)?;
    let q = ctx.linear(h, "dem.sa.q")?;
    let k = ctx.linear(h, "dem.sa.k")?;
    let v = ctx.linear(h, "dem.sa.v")?;
    let a = attend(ctx, q, k, v, cfg.dem_heads, None, None)?;
    let a = ctx.linear(a, "dem.sa.o")?;
    let c = ctx.g.add(c, a)?;

    let h = rms(ctx, c)?;
    let kv = if cfg.normalize_redux { rms(ctx, redux)? } else { redux };
    let q = ctx.linear(h, "dem.ca.q")?;
    let k = ctx.linear(kv, "dem.ca.k")?;
    let v = ctx.linear(kv, "dem.ca.v")?;
    let a = attend(ctx, q, k, v, cfg.dem_heads, None, None)?;
    let a = ctx.linear(a, "dem.ca.o")?;
    let c = ctx.g.add(c, a)?;

    let h = rms(ctx, c)?;
    let h = mlp(ctx, h, "dem.mlp")?;
    Ok(ctx.g.add(c, h)?)
}

/// Writes `updated` (`[1+l, d]`) back into the text stream `[B, M, d]`.
pub fn splice_token<F: Real>(
    ctx: &mut Ctx<'_, F>,
    text: Var,
    origin: &ConceptTokens,
    updated: Var,
    mode: SpliceMode,
) -> Result<Var> {
    splice_many(ctx, text, std::slice::from_ref(origin), updated, mode)
}

/// Splices several updates at once; `updated` stacks the per-origin
/// matrices row-wise (`Σ(1+lᵢ)` rows).
pub fn splice_many<F: Real>(
    ctx: &mut Ctx<'_, F>,
    text: Var,
    origins: &[ConceptTokens],
    updated: Var,
    mode: SpliceMode,
) -> Result<Var> {
    let dims = ctx.g.dims(text).to_vec();
    let total: usize = origins.iter().map(|o| o.end - o.start).sum();
    let ud = ctx.g.dims(updated).to_vec();
    if dims.len() != 3 || ud.iter().product::<usize>() != total * dims[2] || ud.last() != dims.last() {
        return Err(Error::Layout(format!("update {ud:?} does not fit {} span rows of {dims:?}", total)));
    }
    let m = dims[1];
    let mut dst = Vec::new();
    let mut src = Vec::new();
    let mut offset = 0;
    for o in origins {
        let len = o.end - o.start;
        let take = match mode {
            SpliceMode::FirstOnly => 1,
            SpliceMode::All => len,
        };
        for i in 0..take {
            dst.push(o.sample * m + o.start + i);
            src.push(offset + i);
        }
        offset += len;
    }
    let flat = ctx.g.reshape(updated, &[total, dims[2]])?;
    let rows = ctx.g.gather_rows(flat, &src)?;
    Ok(ctx.g.scatter_rows(text, &dst, rows, false)?)
}

/// Runs the DEM over every listed span of the text stream and splices the
/// results. `spans[i]` pairs a sample with a span; `redux` is `[S, R, d]`
/// with row block `i` serving span `i`. Spans of equal length are batched.
pub fn apply<F: Real>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    text: Var,
    spans: &[(usize, ConceptSpan)],
    redux: Var,
    mode: SpliceMode,
) -> Result<Var> {
    if spans.is_empty() {
        return Ok(text);
    }
    let rd = ctx.g.dims(redux).to_vec();
    if rd.len() != 3 || rd[0] != spans.len() {
        return Err(Error::Layout(format!("redux {rd:?} for {} spans", spans.len())));
    }
    let (r, d) = (rd[1], rd[2]);
    let mut lengths: Vec<usize> = spans.iter().map(|(_, s)| s.end - s.start).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut out = text;
    for len in lengths {
        let members: Vec<usize> = (0..spans.len()).filter(|&i| spans[i].1.end - spans[i].1.start == len).collect();
        let mut origins = Vec::with_capacity(members.len());
        let mut parts = Vec::with_capacity(members.len());
        for &i in &members {
            let (sample, span) = &spans[i];
            let ct = extract_concept_tokens(ctx, text, *sample, span)?;
            parts.push(ct.tokens);
            origins.push(ct);
        }
        let n = members.len();
        let c = if n == 1 { parts[0] } else { ctx.g.concat(&parts, 0)? };
        let c = ctx.g.reshape(c, &[n, len, d])?;
        let redux_rows: Vec<usize> = members.iter().flat_map(|&i| i * r..(i + 1) * r).collect();
        let red = ctx.g.gather_rows(redux, &redux_rows)?;
        let red = ctx.g.reshape(red, &[n, r, d])?;
        let upd = dem_forward(ctx, cfg, c, red)?;
        out = splice_many(ctx, out, &origins, upd, mode)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, project_to_scalar, DiffError, Graph, Tensor};
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(d: usize, heads: usize) -> ModelConfig {
        ModelConfig { d, heads: 1, text_heads: 1, dem_heads: heads, redux_tokens: 4, dem_mlp_ratio: 4, ..Default::default() }
    }

    fn span(start: usize, end: usize) -> ConceptSpan {
        ConceptSpan { start, end, concept_id: 0, learnable: true }
    }

    fn rand_tensor(rng: &mut impl Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-scale..scale))
    }

    fn randomized(cfg: &ModelConfig, seed: u64, scale: f64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::init(&param_specs(cfg), &mut rng).unwrap();
        for e in s.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        s
    }

    #[test]
    fn extract_examples() {
        let cfg = small_cfg(4, 1);
        let s = ParamStore::<f64>::init(&param_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ctx = Ctx::new(&s, false);
        let t = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[1, 8, 4], 1.0);
        let x = ctx.g.constant(t.clone());
        let c = extract_concept_tokens(&mut ctx, x, 0, &span(1, 3)).unwrap();
        assert_eq!(ctx.g.value(c.tokens).data(), &t.data()[4..12]);
        let all = extract_concept_tokens(&mut ctx, x, 0, &span(0, 8)).unwrap();
        assert_eq!(ctx.g.value(all.tokens).data(), t.data());
        assert!(extract_concept_tokens(&mut ctx, x, 0, &span(3, 3)).is_err());
        assert!(extract_concept_tokens(&mut ctx, x, 0, &span(7, 9)).is_err());
    }

    #[test]
    fn identity_at_init_and_splice_is_noop() {
        let cfg = small_cfg(16, 4);
        let s = ParamStore::<f32>::init(&param_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let text: Tensor<f32> = rand_tensor(&mut rng, &[2, 8, 16], 2.0).cast();
        let red: Tensor<f32> = rand_tensor(&mut rng, &[1, 4, 16], 2.0).cast();
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(text.clone());
        let r = ctx.g.constant(red);
        let c = extract_concept_tokens(&mut ctx, x, 1, &span(2, 4)).unwrap();
        let c3 = ctx.g.reshape(c.tokens, &[1, 2, 16]).unwrap();
        let u = dem_forward(&mut ctx, &cfg, c3, r).unwrap();
        assert!(ctx.g.value(u).data() == ctx.g.value(c.tokens).data());
        for mode in [SpliceMode::FirstOnly, SpliceMode::All] {
            let y = splice_token(&mut ctx, x, &c, u, mode).unwrap();
            assert!(ctx.g.value(y).bit_eq(&text));
        }
    }

    #[test]
    fn splice_touches_only_target_rows() {
        let cfg = small_cfg(4, 1);
        let s = ParamStore::<f64>::init(&param_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ctx = Ctx::new(&s, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, &[2, 6, 4], 1.0);
        let x = ctx.g.constant(t.clone());
        let c = extract_concept_tokens(&mut ctx, x, 1, &span(2, 5)).unwrap();
        let upd = ctx.g.constant(Tensor::full([3, 4], 9.0));
        let first = splice_token(&mut ctx, x, &c, upd, SpliceMode::FirstOnly).unwrap();
        let all = splice_token(&mut ctx, x, &c, upd, SpliceMode::All).unwrap();
        for r in 0..12 {
            let (f, a) = (ctx.g.value(first).row(r), ctx.g.value(all).row(r));
            if r == 8 {
                assert_eq!(f, &[9.0; 4]);
            } else {
                assert_eq!(f, t.row(r));
            }
            if (8..11).contains(&r) {
                assert_eq!(a, &[9.0; 4]);
            } else {
                assert_eq!(a, t.row(r));
            }
        }
        let bad = ctx.g.constant(Tensor::full([2, 4], 1.0));
        assert!(splice_token(&mut ctx, x, &c, bad, SpliceMode::All).is_err());
    }

    /// Direct dense implementation of the three residual sub-layers.
    fn oracle(s: &ParamStore<f64>, c: &[Vec<f64>], red: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
        let p = |n: &str| s.get(n).unwrap().data().to_vec();
        let d = c[0].len();
        let lin = |x: &[f64], pre: &str, o: usize| -> Vec<f64> {
            let (w, b) = (p(&format!("{pre}.w")), p(&format!("{pre}.b")));
            (0..o).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * o + j]).sum::<f64>()).collect()
        };
        let norm = |x: &[f64]| -> Vec<f64> {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            x.iter().map(|v| v / (ms + 1e-6).sqrt()).collect()
        };
        let mha = |qx: &[Vec<f64>], kvx: &[Vec<f64>], pre: &str| -> Vec<Vec<f64>> {
            let q: Vec<_> = qx.iter().map(|r| lin(r, &format!("{pre}.q"), d)).collect();
            let k: Vec<_> = kvx.iter().map(|r| lin(r, &format!("{pre}.k"), d)).collect();
            let v: Vec<_> = kvx.iter().map(|r| lin(r, &format!("{pre}.v"), d)).collect();
            let dh = d / heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            for h in 0..heads {
                for i in 0..q.len() {
                    let l: Vec<f64> = k
                        .iter()
                        .map(|kr| (h * dh..(h + 1) * dh).map(|e| q[i][e] * kr[e]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let z: f64 = l.iter().map(|x| x.exp()).sum();
                    for (j, lj) in l.iter().enumerate() {
                        for e in h * dh..(h + 1) * dh {
                            out[i][e] += lj.exp() / z * v[j][e];
                        }
                    }
                }
            }
            out.iter().map(|r| lin(r, &format!("{pre}.o"), d)).collect()
        };
        let add = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
        };
        let h: Vec<_> = c.iter().map(|r| norm(r)).collect();
        let c1 = add(c, &mha(&h, &h, "dem.sa"));
        let h: Vec<_> = c1.iter().map(|r| norm(r)).collect();
        let c2 = add(&c1, &mha(&h, red, "dem.ca"));
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let m: Vec<Vec<f64>> = c2
            .iter()
            .map(|r| {
                let hid: Vec<f64> = lin(&norm(r), "dem.mlp.fc1", 4 * d).into_iter().map(gelu).collect();
                lin(&hid, "dem.mlp.fc2", d)
            })
            .collect();
        add(&c2, &m)
    }

    #[test]
    fn matches_dense_oracle() {
        let cfg = small_cfg(4, 1);
        let s = randomized(&cfg, 11, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = rand_tensor(&mut rng, &[1, 2, 4], 1.0);
        let red = rand_tensor(&mut rng, &[1, 4, 4], 1.0);
        let mut ctx = Ctx::new(&s, false);
        let (cv, rv) = (ctx.g.constant(c.clone()), ctx.g.constant(red.clone()));
        let out = dem_forward(&mut ctx, &cfg, cv, rv).unwrap();
        let rows = |t: &Tensor<f64>| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        let want = oracle(&s, &rows(&c), &rows(&red), 1);
        for (i, w) in want.iter().enumerate() {
            for (j, v) in w.iter().enumerate() {
                assert!((ctx.g.value(out).row(i)[j] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradcheck_over_all_dem_params() {
        let cfg = small_cfg(8, 2);
        let s = randomized(&cfg, 21, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = rand_tensor(&mut rng, &[1, 2, 8], 1.0);
        let red = rand_tensor(&mut rng, &[1, 4, 8], 1.0);
        let proj = rand_tensor(&mut rng, &[1, 2, 8], 1.0);
        let mut params: Vec<(String, Tensor<f64>)> =
            s.entries().iter().map(|e| (e.name.clone(), e.tensor.clone())).collect();
        params.push(("c_concept".into(), c));
        let report = gradcheck("dem", &params, 1e-5, |g: &mut Graph<f64>, vars| {
            let mut ctx = Ctx::with_graph(std::mem::take(g), &s, false);
            for (e, &v) in s.entries().iter().zip(vars) {
                ctx.bind(&e.name, v).map_err(|e| DiffError::Invalid(e.to_string()))?;
            }
            let rv = ctx.g.constant(red.clone());
            let out = dem_forward(&mut ctx, &cfg, vars[vars.len() - 1], rv).map_err(|e| DiffError::Invalid(e.to_string()))?;
            let y = project_to_scalar(&mut ctx.g, out, &proj)?;
            *g = ctx.g;
            Ok(y)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
        assert!(report.scalars_checked > 500);
    }

    #[test]
    fn identical_spans_give_identical_updates() {
        let cfg = small_cfg(8, 2);
        let s = randomized(&cfg, 31, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let row = rand_tensor(&mut rng, &[2, 8], 1.0);
        let mut text = rand_tensor(&mut rng, &[1, 8, 8], 1.0);
        for (dst, src) in [(1, 0), (2, 1), (5, 0), (6, 1)] {
            text.row_mut(dst).copy_from_slice(row.row(src));
        }
        let red1 = rand_tensor(&mut rng, &[1, 4, 8], 1.0);
        let mut red = red1.data().to_vec();
        red.extend_from_slice(red1.data());
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(text.clone());
        let r = ctx.g.constant(Tensor::new([2, 4, 8], red).unwrap());
        let y = apply(&mut ctx, &cfg, x, &[(0, span(1, 3)), (0, span(5, 7))], r, SpliceMode::FirstOnly).unwrap();
        let out = ctx.g.value(y);
        assert_eq!(out.row(1), out.row(5));
        assert_ne!(out.row(1), text.row(1));
        for i in [0, 2, 3, 4, 6, 7] {
            assert_eq!(out.row(i), text.row(i));
        }
    }
}
