//! Rectified-flow objective and the guided Euler sampler.
//!
//! `x_t = (1 − t)·x + t·ε`, target velocity `ε − x`. Sampling integrates
//! from pure noise at `t = 1` down to `t = 0` on a uniform grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::diffcore::{Tensor, Var};
use crate::ditnet::{prepare, prepare_constant, velocity, AlignOptions, Conditioning};
use crate::encoders::{black_reference, patch_batch, Image};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::promptkit::{build_plain_prompt, PromptBundle, Vocab};

/// One training example in patch layout (`N·p·p·3` values).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_data: Vec<f32>,
    pub noise: Vec<f32>,
    pub t: f64,
    pub x_t: Vec<f32>,
    pub v_target: Vec<f32>,
}

impl FlowSample {
    pub fn new(x_data: Vec<f32>, noise: Vec<f32>, t: f64) -> Result<Self> {
        if x_data.len() != noise.len() || !(0.0..=1.0).contains(&t) {
            return Err(Error::Data(format!("flow sample with {} data, {} noise values, t = {t}", x_data.len(), noise.len())));
        }
        let tf = t as f32;
        let x_t = x_data.iter().zip(&noise).map(|(&x, &e)| (1.0 - tf) * x + tf * e).collect();
        let v_target = x_data.iter().zip(&noise).map(|(&x, &e)| e - x).collect();
        Ok(Self { x_data, noise, t, x_t, v_target })
    }
}

pub fn uniform_t(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn make_flow_sample<R: Rng>(x_data: &[f32], rng: &mut R, mut t_sampler: impl FnMut(&mut R) -> f64) -> Result<FlowSample> {
    let noise = gaussian(rng, x_data.len());
    let t = t_sampler(rng);
    FlowSample::new(x_data.to_vec(), noise, t)
}

/// Mean squared velocity error of the model over a batch.
pub fn loss(
    ctx: &mut Ctx<'_, f32>,
    cfg: &ModelConfig,
    samples: &[FlowSample],
    cond: &Conditioning<f32>,
    opts: &AlignOptions,
) -> Result<Var> {
    let b = samples.len();
    if b == 0 || b != cond.batch() {
        return Err(Error::Data(format!("{b} flow samples for a conditioning batch of {}", cond.batch())));
    }
    let dims = [b, cfg.tokens(), cfg.patch_dim()];
    let x_t = Tensor::new(dims, samples.iter().flat_map(|s| s.x_t.iter().copied()).collect())?;
    let target = Tensor::new(dims, samples.iter().flat_map(|s| s.v_target.iter().copied()).collect())?;
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let prep = prepare(ctx, cfg, cond, opts)?;
    let out = velocity(ctx, cfg, &prep, &x_t, &t, &cond.bundles)?;
    let tv = ctx.g.constant(target);
    let l = ctx.g.mse(out.velocity, tv)?;
    let v = ctx.g.value(l).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 28, guidance: 3.5, seed: 42 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config(format!("guidance {} is not finite", self.guidance)));
        }
        Ok(())
    }
}

/// A velocity field with a conditional and an unconditional branch.
pub trait VelocityModel {
    /// `v_cond` and, when `uncond` is set, `v_uncond` at state `x`.
    fn velocities(&mut self, x: &[f64], t: f64, uncond: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStat {
    pub step: usize,
    pub t: f64,
    pub v_norm: f64,
}

/// Guided Euler integration from `noise` at `t = 1` to `t = 0`; returns the
/// unclamped endpoint.
pub fn euler(
    model: &mut impl VelocityModel,
    noise: Vec<f64>,
    cfg: &SampleConfig,
    mut telemetry: Option<&mut Vec<StepStat>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let g = cfg.guidance;
    let mut x = noise;
    for s in (1..=cfg.steps).rev() {
        let t = s as f64 * dt;
        let (vc, vu) = model.velocities(&x, t, g != 1.0)?;
        let v: Vec<f64> = match vu {
            Some(vu) => vu.iter().zip(&vc).map(|(u, c)| u + g * (c - u)).collect(),
            None => vc,
        };
        if v.len() != x.len() || v.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite velocity at t = {t}")));
        }
        if let Some(tel) = telemetry.as_deref_mut() {
            let norm = (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
            tel.push(StepStat { step: cfg.steps - s, t, v_norm: norm });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
    }
    Ok(x)
}

/// Initial noise for one seed, in patch layout.
pub fn seed_noise(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.tokens() * cfg.patch_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// The backbone as a two-branch field. Conditioning streams are encoded
/// once; the unconditional branch is an empty prompt with black references.
pub struct DitField<'a> {
    store: &'a ParamStore<f32>,
    cfg: ModelConfig,
    opts: AlignOptions,
    batch: usize,
    cond_text: Tensor<f32>,
    cond_refs: Vec<Tensor<f32>>,
    uncond_text: Tensor<f32>,
    uncond_refs: Vec<Tensor<f32>>,
    bundles: Vec<PromptBundle>,
    uncond_bundles: Vec<PromptBundle>,
}

impl<'a> DitField<'a> {
    pub fn new(store: &'a ParamStore<f32>, cfg: &ModelConfig, opts: AlignOptions, cond: &Conditioning<f32>) -> Result<Self> {
        let b = cond.batch();
        let empty = build_plain_prompt(&Vocab::builtin(), "", cfg.text_len)?;
        let black = black_reference(cfg.image_side, cfg.image_side)?;
        let blacks = vec![&black; b];
        let uncond = Conditioning {
            bundles: vec![empty; b],
            refs: (0..cond.refs.len()).map(|_| patch_batch(cfg, &blacks)).collect::<Result<_>>()?,
            dem: None,
            redux_text: None,
        };
        let encode = |c: &Conditioning<f32>| -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
            let mut ctx = Ctx::new(store, false);
            let p = prepare(&mut ctx, cfg, c, &opts)?;
            Ok((ctx.g.value(p.text).clone(), p.refs.iter().map(|&r| ctx.g.value(r).clone()).collect()))
        };
        let (cond_text, cond_refs) = encode(cond)?;
        let (uncond_text, uncond_refs) = encode(&uncond)?;
        Ok(Self {
            store,
            cfg: cfg.clone(),
            opts,
            batch: b,
            cond_text,
            cond_refs,
            uncond_text,
            uncond_refs,
            bundles: cond.bundles.clone(),
            uncond_bundles: uncond.bundles,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn text_stream(&self) -> &Tensor<f32> {
        &self.cond_text
    }
}

fn cat0(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut dims = a.dims().to_vec();
    dims[0] += b.dims()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(dims, data)?)
}

impl VelocityModel for DitField<'_> {
    fn velocities(&mut self, x: &[f64], t: f64, uncond: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let per = self.cfg.tokens() * self.cfg.patch_dim();
        if x.len() != self.batch * per {
            return Err(Error::Layout(format!("state of {} values for batch {}", x.len(), self.batch)));
        }
        let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let one = Tensor::new([self.batch, self.cfg.tokens(), self.cfg.patch_dim()], xs)?;
        let (text, refs, bundles, noisy) = if uncond {
            let refs = self.cond_refs.iter().zip(&self.uncond_refs).map(|(c, u)| cat0(c, u)).collect::<Result<Vec<_>>>()?;
            let mut bundles = self.bundles.clone();
            bundles.extend(self.uncond_bundles.iter().cloned());
            (cat0(&self.cond_text, &self.uncond_text)?, refs, bundles, cat0(&one, &one)?)
        } else {
            (self.cond_text.clone(), self.cond_refs.clone(), self.bundles.clone(), one)
        };
        let mut ctx = Ctx::new(self.store, false);
        let prep = prepare_constant(&mut ctx, &self.cfg, &text, &refs, &bundles, &self.opts)?;
        let ts = vec![t; bundles.len()];
        let out = velocity(&mut ctx, &self.cfg, &prep, &noisy, &ts, &bundles)?;
        let v: Vec<f64> = ctx.g.value(out.velocity).data().iter().map(|&a| a as f64).collect();
        if uncond {
            let (c, u) = v.split_at(self.batch * per);
            Ok((c.to_vec(), Some(u.to_vec())))
        } else {
            Ok((v, None))
        }
    }
}

/// Samples one image per batch element; element `i` starts from the noise
/// of `seeds[i]`.
pub fn sample_batch(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    opts: AlignOptions,
    cond: &Conditioning<f32>,
    seeds: &[u64],
    scfg: &SampleConfig,
    telemetry: Option<&mut Vec<StepStat>>,
) -> Result<Vec<Image>> {
    if seeds.len() != cond.batch() {
        return Err(Error::Config(format!("{} seeds for a batch of {}", seeds.len(), cond.batch())));
    }
    let mut field = DitField::new(store, cfg, opts, cond)?;
    let noise: Vec<f64> = seeds.iter().flat_map(|&s| seed_noise(cfg, s)).collect();
    let x = euler(&mut field, noise, scfg, telemetry)?;
    let per = cfg.tokens() * cfg.patch_dim();
    x.chunks(per)
        .map(|c| {
            let v: Vec<f32> = c.iter().map(|&a| a as f32).collect();
            let mut im = Image::unpatchify(&v, cfg.image_side, cfg.image_side, cfg.patch)?;
            im.clamp01();
            Ok(im)
        })
        .collect()
}

/// Single-prompt sampling with `scfg.seed`.
pub fn sample(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    opts: AlignOptions,
    cond: &Conditioning<f32>,
    scfg: &SampleConfig,
    telemetry: Option<&mut Vec<StepStat>>,
) -> Result<Image> {
    let mut v = sample_batch(store, cfg, opts, cond, &[scfg.seed], scfg, telemetry)?;
    Ok(v.remove(0))
}
