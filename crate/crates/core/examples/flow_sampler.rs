//! The guided Euler sampler on fields with closed-form solutions: a constant
//! field moves the state by exactly the field value, a linear field `v = a·x`
//! scales it by `(1 − a/n)^n` after `n` steps.

use prioralign::flow::{euler, SampleConfig, StepStat, VelocityModel};
use prioralign::Result;

struct Constant(f64);

impl VelocityModel for Constant {
    fn velocities(&mut self, x: &[f64], _t: f64, uncond: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        Ok((vec![self.0; x.len()], uncond.then(|| vec![0.0; x.len()])))
    }
}

struct Linear(f64);

impl VelocityModel for Linear {
    fn velocities(&mut self, x: &[f64], _t: f64, uncond: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let v: Vec<f64> = x.iter().map(|a| self.0 * a).collect();
        Ok((v.clone(), uncond.then_some(v)))
    }
}

fn main() -> Result<()> {
    let cfg = SampleConfig::default();
    println!("defaults: {} steps, guidance {}, seed {}", cfg.steps, cfg.guidance, cfg.seed);

    let x = euler(&mut Constant(0.5), vec![1.0, -2.0], &cfg, None)?;
    // guided velocity is u + g·(c − u) = 3.5 · 0.5, integrated over unit time
    println!("constant field: {x:?} (expected {:?})", [1.0 - 1.75, -2.0 - 1.75]);

    let mut tel: Vec<StepStat> = Vec::new();
    let x = euler(&mut Linear(0.8), vec![1.0], &cfg, Some(&mut tel))?;
    let expect = (1.0 - 0.8 / cfg.steps as f64).powi(cfg.steps as i32);
    println!("linear field: {:.12} (expected {expect:.12}), continuous limit {:.6}", x[0], (-0.8f64).exp());
    for s in tel.iter().step_by(7) {
        println!("  step {:>2} t {:.3} |v| {:.4}", s.step, s.t, s.v_norm);
    }
    Ok(())
}
