//! Images, PPM I/O, and the three conditioning streams: text tokens,
//! redux tokens (DEM input only) and reference tokens (attention input).

use std::path::Path;
use std::rc::Rc;

use crate::config::ModelConfig;
use crate::diffcore::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{attend, attention_specs, linear_specs, mlp, mlp_specs, rms};
use crate::params::{Ctx, Group, Init, ParamSpec};
use crate::promptkit::{PromptBundle, LEARNABLE_ID};

/// `H×W×3` image with channel values in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * 3 {
            return Err(Error::Data(format!("image {h}x{w} needs {} values, got {}", h * w * 3, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let data = (0..h * w).flat_map(|_| rgb).collect();
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let o = (r * self.w + c) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let o = (r * self.w + c) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_byte(v) as f32 / 255.0).collect();
        Self { h: self.h, w: self.w, data }
    }

    /// Non-overlapping `p×p` patches, row-major over the patch grid; each
    /// patch flattened as `(dy, dx, channel)`. Shape `[N, p·p·3]`.
    pub fn patchify(&self, p: usize) -> Result<Vec<f32>> {
        if p == 0 || !self.h.is_multiple_of(p) || !self.w.is_multiple_of(p) {
            return Err(Error::Data(format!("image {}x{} not divisible by patch {p}", self.h, self.w)));
        }
        let (gh, gw) = (self.h / p, self.w / p);
        let mut out = Vec::with_capacity(self.data.len());
        for pi in 0..gh {
            for pj in 0..gw {
                for dy in 0..p {
                    let o = ((pi * p + dy) * self.w + pj * p) * 3;
                    out.extend_from_slice(&self.data[o..o + p * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(patches: &[f32], h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || patches.len() != h * w * 3 {
            return Err(Error::Data(format!("cannot unpatchify {} values into {h}x{w} (p={p})", patches.len())));
        }
        let gw = w / p;
        let mut data = vec![0.0; h * w * 3];
        for (n, patch) in patches.chunks(p * p * 3).enumerate() {
            let (pi, pj) = (n / gw, n % gw);
            for dy in 0..p {
                let o = ((pi * p + dy) * w + pj * p) * 3;
                data[o..o + p * 3].copy_from_slice(&patch[dy * p * 3..(dy + 1) * p * 3]);
            }
        }
        Ok(Self { h, w, data })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Data(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field {s:?}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("PPM maxval {maxval} unsupported (need 255)")));
        }
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Data("truncated PPM body".into()))?;
        Self::new(h, w, body.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_ppm()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// All-zero image used for reference dropout and the unconditional branch.
pub fn black_reference(h: usize, w: usize) -> Result<Image> {
    Image::new(h, w, vec![0.0; h * w * 3])
}

/// Stacks images into a `[B, N, p·p·3]` patch tensor, checking the grid.
pub fn patch_batch<F: Real>(cfg: &ModelConfig, images: &[&Image]) -> Result<Tensor<F>> {
    let side = cfg.image_side;
    let mut data = Vec::with_capacity(images.len() * side * side * 3);
    for im in images {
        if im.height() != side || im.width() != side {
            return Err(Error::Data(format!(
                "image {}x{} does not match the {side}x{side} model grid",
                im.height(),
                im.width()
            )));
        }
        data.extend(im.patchify(cfg.patch)?.into_iter().map(|v| F::of(v as f64)));
    }
    Ok(Tensor::new([images.len(), cfg.tokens(), cfg.patch_dim()], data)?)
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, pd) = (cfg.d, cfg.patch_dim());
    let mut v = vec![
        ParamSpec::new("text.embed", &[cfg.vocab_size, d], Group::Base, Init::Normal(1.0)),
        ParamSpec::new("text.pos", &[cfg.text_len, d], Group::Base, Init::Normal(0.1)),
    ];
    v.extend(attention_specs("text.blk.attn", d, Group::Base, false));
    v.extend(mlp_specs("text.blk.mlp", d, d * cfg.mlp_ratio, Group::Base, false));
    v.push(ParamSpec::new("text.norm.g", &[d], Group::Base, Init::Ones));
    v.extend(linear_specs("redux.patch", pd, d, Group::Base, false));
    v.extend(linear_specs("redux.proj", d, d, Group::Base, false));
    v.extend(linear_specs("img_in", pd, d, Group::Base, false));
    // Pretraining only ever shows this embedder black images, so its weight
    // gets no gradient and stays zero: the base model is blind to reference
    // content until the LoRA delta opens the path.
    v.extend(linear_specs("ref_in", pd, d, Group::Base, true));
    v.push(ParamSpec::new("lora.ref_in.a", &[pd, cfg.lora_rank], Group::Lora, Init::Normal(1.0 / (pd as f64).sqrt())));
    v.push(ParamSpec::new("lora.ref_in.b", &[cfg.lora_rank, d], Group::Lora, Init::Zeros));
    v.push(ParamSpec::new("s_star", &[1, d], Group::SStar, Init::Normal(1.0)));
    v
}

/// Text stream `[B, M, d]`: token embedding with the learnable row spliced
/// in at `S*` positions, positional embedding, one pre-norm encoder block.
pub fn encode_text<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, bundles: &[PromptBundle]) -> Result<Var> {
    let m = cfg.text_len;
    let mut ids = Vec::with_capacity(bundles.len() * m);
    for b in bundles {
        if b.len() != m {
            return Err(Error::Prompt(format!("bundle length {} != text_len {m}", b.len())));
        }
        if let Some(&bad) = b.token_ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Prompt(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        ids.extend_from_slice(&b.token_ids);
    }
    if ids.is_empty() {
        return Err(Error::Prompt("empty batch".into()));
    }
    let table = ctx.p("text.embed")?;
    let mut x = ctx.g.embedding(table, &ids)?;
    let learn_rows: Vec<usize> = ids.iter().enumerate().filter(|(_, &i)| i == LEARNABLE_ID).map(|(r, _)| r).collect();
    if !learn_rows.is_empty() {
        let s = ctx.p("s_star")?;
        let rows = ctx.g.embedding(s, &vec![0; learn_rows.len()])?;
        x = ctx.g.scatter_rows(x, &learn_rows, rows, false)?;
    }
    let pos_table = ctx.p("text.pos")?;
    let pos_ids: Vec<usize> = (0..bundles.len()).flat_map(|_| 0..m).collect();
    let pos = ctx.g.embedding(pos_table, &pos_ids)?;
    let x = ctx.g.add(x, pos)?;
    let x = ctx.g.reshape(x, &[bundles.len(), m, cfg.d])?;
    text_block(ctx, cfg, x)
}

fn text_block<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let h = rms(ctx, x)?;
    let q = ctx.linear(h, "text.blk.attn.q")?;
    let k = ctx.linear(h, "text.blk.attn.k")?;
    let v = ctx.linear(h, "text.blk.attn.v")?;
    let a = attend(ctx, q, k, v, cfg.text_heads, None, None)?;
    let a = ctx.linear(a, "text.blk.attn.o")?;
    let x = ctx.g.add(x, a)?;
    let h = rms(ctx, x)?;
    let h = mlp(ctx, h, "text.blk.mlp")?;
    let x = ctx.g.add(x, h)?;
    let gain = ctx.p("text.norm.g")?;
    Ok(ctx.g.rms_norm(x, Some(gain), F::of(crate::layers::NORM_EPS))?)
}

/// Row-stochastic `[R, N]` average pooling of the patch grid onto a
/// `√R×√R` grid (adaptive cell boundaries).
pub fn pool_matrix<F: Real>(grid: usize, out_side: usize) -> Result<Tensor<F>> {
    if out_side == 0 || out_side > grid {
        return Err(Error::Config(format!("cannot pool a {grid}-grid onto {out_side}")));
    }
    let cells = |i: usize| (i * grid / out_side, ((i + 1) * grid).div_ceil(out_side));
    let mut w = vec![F::zero(); out_side * out_side * grid * grid];
    for oi in 0..out_side {
        for oj in 0..out_side {
            let ((r0, r1), (c0, c1)) = (cells(oi), cells(oj));
            let inv = F::of(1.0 / ((r1 - r0) * (c1 - c0)) as f64);
            let row = oi * out_side + oj;
            for r in r0..r1 {
                for c in c0..c1 {
                    w[row * grid * grid + r * grid + c] = inv;
                }
            }
        }
    }
    Ok(Tensor::new([out_side * out_side, grid * grid], w)?)
}

/// Redux tokens `[B, R, d]` from patches `[B, N, p·p·3]`.
pub fn encode_redux<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    check_patches(ctx, cfg, patches)?;
    let h = ctx.linear(patches, "redux.patch")?;
    let side = (cfg.redux_tokens as f64).sqrt().round() as usize;
    let pool = Rc::new(pool_matrix::<F>(cfg.grid(), side)?);
    let h = ctx.g.mix_tokens(h, pool)?;
    ctx.linear(h, "redux.proj")
}

/// Reference tokens `[B, N, d]`: the reference embedder plus its LoRA delta
/// scaled by `lora_scale`. A zero scale skips the delta entirely.
pub fn encode_reference<F: Real>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, patches: Var, lora_scale: f64) -> Result<Var> {
    check_patches(ctx, cfg, patches)?;
    let base = ctx.linear(patches, "ref_in")?;
    if lora_scale == 0.0 {
        return Ok(base);
    }
    let a = ctx.p("lora.ref_in.a")?;
    let b = ctx.p("lora.ref_in.b")?;
    let h = ctx.g.matmul(patches, a)?;
    let mut delta = ctx.g.matmul(h, b)?;
    if lora_scale != 1.0 {
        delta = ctx.g.scale(delta, F::of(lora_scale))?;
    }
    Ok(ctx.g.add(base, delta)?)
}

fn check_patches<F: Real>(ctx: &Ctx<'_, F>, cfg: &ModelConfig, patches: Var) -> Result<()> {
    let d = ctx.g.dims(patches);
    if d.len() != 3 || d[1] != cfg.tokens() || d[2] != cfg.patch_dim() {
        return Err(Error::Layout(format!(
            "patch tensor {d:?} does not match grid of {} tokens x {}",
            cfg.tokens(),
            cfg.patch_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::promptkit::{build_plain_prompt, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { d: 32, heads: 2, text_heads: 2, dem_heads: 2, redux_tokens: 4, ..Default::default() }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        ParamStore::init(&param_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_image(rng: &mut impl Rng, side: usize) -> Image {
        Image::new(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn randomize(s: &mut ParamStore<f64>, rng: &mut impl Rng) {
        for e in s.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn patchify_roundtrip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let im = random_image(&mut rng, 8);
        let p = im.patchify(4).unwrap();
        assert_eq!(&p[..3], &im.pixel(0, 0));
        assert_eq!(&p[48..51], &im.pixel(0, 4));
        assert_eq!(Image::unpatchify(&p, 8, 8, 4).unwrap(), im);
        assert!(im.patchify(3).is_err());
    }

    #[test]
    fn ppm_roundtrip_is_lossless_for_quantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let im = random_image(&mut rng, 6).quantized();
        let bytes = im.to_ppm();
        let back = Image::from_ppm(&bytes).unwrap();
        assert_eq!(back, im);
        assert_eq!(back.to_ppm(), bytes);
        let commented = b"P6\n# note\n1 1\n255\n\x01\x02\x03";
        assert_eq!(Image::from_ppm(commented).unwrap().pixel(0, 0), [1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn black_reference_is_zero() {
        let b = black_reference(16, 16).unwrap();
        assert_eq!(b.data().len(), 16 * 16 * 3);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_rows_are_averages() {
        let w = pool_matrix::<f64>(4, 2).unwrap();
        for r in 0..4 {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(w.row(r).iter().filter(|&&v| v > 0.0).count(), 4);
        }
        assert_eq!(w.row(0)[0], 0.25);
        assert_eq!(w.row(0)[5], 0.25);
        assert_eq!(w.row(0)[2], 0.0);
    }

    #[test]
    fn redux_of_black_has_identical_rows() {
        let c = cfg();
        let s = store(&c, 1);
        let mut ctx = Ctx::new(&s, false);
        let black = black_reference(16, 16).unwrap();
        let x = ctx.g.constant(patch_batch(&c, &[&black]).unwrap());
        let r = encode_redux(&mut ctx, &c, x).unwrap();
        let t = ctx.g.value(r);
        assert_eq!(t.dims(), &[1, 4, 32]);
        for i in 1..4 {
            assert_eq!(t.row(i), t.row(0));
        }
    }

    #[test]
    fn redux_is_local_to_pool_cells() {
        let c = cfg();
        let s = store(&c, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16);
        let mut b = a.clone();
        b.set_pixel(0, 0, [0.9, 0.1, 0.3]);
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(patch_batch(&c, &[&a, &b]).unwrap());
        let r = encode_redux(&mut ctx, &c, x).unwrap();
        let t = ctx.g.value(r);
        assert_ne!(t.row(0), t.row(4));
        for i in 1..4 {
            assert_eq!(t.row(i), t.row(4 + i));
        }
    }

    #[test]
    fn reference_lora_matches_dense_oracle() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = store(&c, 3);
        let base_only = {
            let mut ctx = Ctx::new(&s, false);
            let im = random_image(&mut ChaCha8Rng::seed_from_u64(10), 16);
            let x = ctx.g.constant(patch_batch(&c, &[&im]).unwrap());
            let b0 = encode_reference(&mut ctx, &c, x, 0.0).unwrap();
            let b1 = encode_reference(&mut ctx, &c, x, 1.0).unwrap();
            assert!(ctx.g.value(b0).bit_eq(ctx.g.value(b1)), "zero-init up-projection must be inert");
            ctx.g.value(b0).clone()
        };
        randomize(&mut s, &mut rng);
        let im = random_image(&mut ChaCha8Rng::seed_from_u64(10), 16);
        let patches = patch_batch::<f64>(&c, &[&im]).unwrap();
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(patches.clone());
        let r0 = encode_reference(&mut ctx, &c, x, 0.0).unwrap();
        let r1 = encode_reference(&mut ctx, &c, x, 1.0).unwrap();
        let (w, bias) = (s.get("ref_in.w").unwrap(), s.get("ref_in.b").unwrap());
        let (a, b) = (s.get("lora.ref_in.a").unwrap(), s.get("lora.ref_in.b").unwrap());
        let (n, pd, d, r) = (c.tokens(), c.patch_dim(), c.d, c.lora_rank);
        for t in 0..n {
            let xr = &patches.data()[t * pd..(t + 1) * pd];
            let xa: Vec<f64> = (0..r).map(|j| (0..pd).map(|i| xr[i] * a.data()[i * r + j]).sum()).collect();
            for o in 0..d {
                let base = bias.data()[o] + (0..pd).map(|i| xr[i] * w.data()[i * d + o]).sum::<f64>();
                let delta: f64 = (0..r).map(|j| xa[j] * b.data()[j * d + o]).sum();
                assert!((ctx.g.value(r0).data()[t * d + o] - base).abs() < 1e-12);
                assert!((ctx.g.value(r1).data()[t * d + o] - base - delta).abs() < 1e-10);
            }
        }
        assert_eq!(base_only.dims(), &[1, n, d]);
    }

    #[test]
    fn reference_encoder_is_affine_in_the_image() {
        let c = cfg();
        let mut s = store(&c, 4);
        randomize(&mut s, &mut ChaCha8Rng::seed_from_u64(5));
        let im = random_image(&mut ChaCha8Rng::seed_from_u64(6), 16);
        let alpha = 0.37f32;
        let scaled = Image::new(16, 16, im.data().iter().map(|v| v * alpha).collect()).unwrap();
        let black = black_reference(16, 16).unwrap();
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(patch_batch(&c, &[&im, &scaled, &black]).unwrap());
        let y = encode_reference(&mut ctx, &c, x, 1.0).unwrap();
        let t = ctx.g.value(y);
        let per = c.tokens() * c.d;
        let (f1, fa, f0) = (&t.data()[..per], &t.data()[per..2 * per], &t.data()[2 * per..]);
        let a = alpha as f64;
        for i in 0..per {
            assert!((fa[i] - (a * f1[i] + (1.0 - a) * f0[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_grid_mismatch_errors() {
        let c = cfg();
        let s = store(&c, 1);
        let small = black_reference(8, 8).unwrap();
        assert!(patch_batch::<f64>(&c, &[&small]).is_err());
        let mut ctx = Ctx::new(&s, false);
        let x = ctx.g.constant(Tensor::zeros([1, 4, c.patch_dim()]));
        assert!(encode_reference(&mut ctx, &c, x, 1.0).is_err());
    }

    /// Scripted single-block oracle: embedding + pos, pre-norm MHA, MLP, final norm.
    fn text_oracle(s: &ParamStore<f64>, c: &ModelConfig, ids: &[usize]) -> Vec<Vec<f64>> {
        let d = c.d;
        let p = |n: &str| s.get(n).unwrap().data().to_vec();
        let lin = |x: &[f64], w: &[f64], b: &[f64], o: usize| -> Vec<f64> {
            (0..o).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * o + j]).sum::<f64>()).collect()
        };
        let norm = |x: &[f64]| -> Vec<f64> {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            x.iter().map(|v| v / (ms + 1e-6).sqrt()).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let (emb, pos, sst) = (p("text.embed"), p("text.pos"), p("s_star"));
        let x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                let src = if id == LEARNABLE_ID { &sst[..] } else { &emb[id * d..(id + 1) * d] };
                (0..d).map(|j| src[j] + pos[t * d + j]).collect()
            })
            .collect();
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r)).collect();
        let proj = |n: &str| -> Vec<Vec<f64>> {
            h.iter().map(|r| lin(r, &p(&format!("text.blk.attn.{n}.w")), &p(&format!("text.blk.attn.{n}.b")), d)).collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let (hn, dh) = (c.text_heads, d / c.text_heads);
        let mut att = vec![vec![0.0; d]; ids.len()];
        for head in 0..hn {
            let r = head * dh..(head + 1) * dh;
            for i in 0..ids.len() {
                let logits: Vec<f64> = (0..ids.len())
                    .map(|j| r.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..ids.len() {
                    let w = (logits[j] - mx).exp() / z;
                    for e in r.clone() {
                        att[i][e] += w * v[j][e];
                    }
                }
            }
        }
        let (ow, ob) = (p("text.blk.attn.o.w"), p("text.blk.attn.o.b"));
        let hid = d * c.mlp_ratio;
        let gain = p("text.norm.g");
        x.iter()
            .zip(&att)
            .map(|(xr, ar)| {
                let o = lin(ar, &ow, &ob, d);
                let x1: Vec<f64> = xr.iter().zip(&o).map(|(a, b)| a + b).collect();
                let h1: Vec<f64> = lin(&norm(&x1), &p("text.blk.mlp.fc1.w"), &p("text.blk.mlp.fc1.b"), hid)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let h2 = lin(&h1, &p("text.blk.mlp.fc2.w"), &p("text.blk.mlp.fc2.b"), d);
                let x2: Vec<f64> = x1.iter().zip(&h2).map(|(a, b)| a + b).collect();
                norm(&x2).iter().zip(&gain).map(|(a, g)| a * g).collect()
            })
            .collect()
    }

    #[test]
    fn text_encoder_matches_scripted_oracle() {
        let c = ModelConfig { d: 16, heads: 2, text_heads: 2, dem_heads: 2, redux_tokens: 4, text_len: 8, ..Default::default() };
        let vocab = Vocab::builtin();
        let mut s = store(&c, 7);
        randomize(&mut s, &mut ChaCha8Rng::seed_from_u64(8));
        let mut b = build_plain_prompt(&vocab, "a square on white background", c.text_len).unwrap();
        b.token_ids[1] = LEARNABLE_ID;
        let mut ctx = Ctx::new(&s, false);
        let y = encode_text(&mut ctx, &c, std::slice::from_ref(&b)).unwrap();
        let want = text_oracle(&s, &c, &b.token_ids);
        let got = ctx.g.value(y);
        assert_eq!(got.dims(), &[1, 8, 16]);
        for (t, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.row(t)[j] - w).abs() < 1e-9, "row {t} col {j}");
            }
        }
    }

    #[test]
    fn text_encoder_zero_table_is_deterministic_bias_path() {
        let c = ModelConfig { d: 16, heads: 2, text_heads: 2, dem_heads: 2, redux_tokens: 4, text_len: 8, ..Default::default() };
        let vocab = Vocab::builtin();
        let mut s = store(&c, 1);
        randomize(&mut s, &mut ChaCha8Rng::seed_from_u64(2));
        for n in ["text.embed", "text.pos", "s_star"] {
            let dims = s.get(n).unwrap().dims().to_vec();
            s.set(n, Tensor::zeros(dims)).unwrap();
        }
        let b = build_plain_prompt(&vocab, "a coin", c.text_len).unwrap();
        let mut ctx = Ctx::new(&s, false);
        let y = encode_text(&mut ctx, &c, &[b.clone(), b.clone()]).unwrap();
        let want = text_oracle(&s, &c, &b.token_ids);
        let got = ctx.g.value(y);
        for t in 0..16 {
            for j in 0..16 {
                assert!((got.row(t)[j] - want[t % 8][j]).abs() < 1e-9);
            }
        }
        assert_eq!(got.row(0), got.row(8));
    }

    #[test]
    fn text_encoder_rejects_bad_ids() {
        let c = cfg();
        let s = store(&c, 1);
        let mut b = build_plain_prompt(&Vocab::builtin(), "a coin", c.text_len).unwrap();
        b.token_ids[0] = c.vocab_size + 3;
        let mut ctx = Ctx::new(&s, false);
        assert!(encode_text(&mut ctx, &c, &[b]).is_err());
    }
}
