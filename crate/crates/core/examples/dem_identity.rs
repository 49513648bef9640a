//! The deviation extraction module at initialization: a freshly built DEM
//! returns its input unchanged, so splicing it leaves the text stream as is.
//! After perturbing its output projections the concept tokens move.

use prioralign::config::ModelConfig;
use prioralign::dem::{apply, dem_forward, SpliceMode};
use prioralign::diffcore::Tensor;
use prioralign::ditnet::init_params;
use prioralign::params::Ctx;
use prioralign::promptkit::{bundle_from_text, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> prioralign::Result<()> {
    let cfg = ModelConfig { d: 16, heads: 2, text_heads: 2, dem_heads: 2, redux_tokens: 4, ..Default::default() };
    let mut store = init_params(&cfg, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rand = |dims: &[usize]| Tensor::<f32>::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0));
    let concept = rand(&[1, 3, cfg.d]);
    let redux = rand(&[1, cfg.redux_tokens, cfg.d]);

    let mut ctx = Ctx::new(&store, false);
    let (c, r) = (ctx.g.constant(concept.clone()), ctx.g.constant(redux.clone()));
    let out = dem_forward(&mut ctx, &cfg, c, r)?;
    println!("DEM at init is the identity: {}", ctx.g.value(out).data() == concept.data());

    let vocab = Vocab::builtin();
    let bundle = bundle_from_text(&vocab, "a {striped square} on white background", cfg.text_len)?;
    let span = bundle.spans[0];
    let text = rand(&[1, cfg.text_len, cfg.d]);
    let splice = |store: &prioralign::params::ParamStore<f32>, mode| -> prioralign::Result<Vec<usize>> {
        let mut ctx = Ctx::new(store, false);
        let (t, r) = (ctx.g.constant(text.clone()), ctx.g.constant(redux.clone()));
        let y = apply(&mut ctx, &cfg, t, &[(0, span)], r, mode)?;
        let out = ctx.g.value(y);
        Ok((0..cfg.text_len).filter(|&i| out.row(i) != text.row(i)).collect())
    };
    println!("rows changed at init: {:?}", splice(&store, SpliceMode::FirstOnly)?);

    for e in store.entries_mut().iter_mut().filter(|e| e.name.starts_with("dem.") && e.name.ends_with(".w")) {
        for (i, v) in e.tensor.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i % 5) as f32 - 2.0);
        }
    }
    println!("concept span rows {}..{}", span.start, span.end);
    println!("rows changed, first_only: {:?}", splice(&store, SpliceMode::FirstOnly)?);
    println!("rows changed, all:        {:?}", splice(&store, SpliceMode::All)?);
    Ok(())
}
