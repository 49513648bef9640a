use super::*;
use crate::ditnet::init_params;
use crate::params::Group;
use crate::synthdata::{generate, CorpusSpec, SynthSpec};

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 16,
        blocks: 1,
        heads: 2,
        text_heads: 2,
        dem_heads: 2,
        image_side: 8,
        redux_tokens: 4,
        lora_rank: 2,
        mlp_ratio: 2,
        dem_mlp_ratio: 2,
        time_dim: 8,
        ..Default::default()
    }
}

fn data() -> (Dataset, Vocab) {
    let vocab = Vocab::builtin();
    let spec = SynthSpec {
        seed: 11,
        concepts: 6,
        pairs_per_concept: 4,
        heldout_concepts: 2,
        corpus: CorpusSpec { images: 40, image_side: 8, ..Default::default() },
    };
    (generate(&spec, &vocab).unwrap(), vocab)
}

fn quick(phase: Phase, iterations: usize, batch: usize) -> TrainConfig {
    TrainConfig { iterations, batch, ..TrainConfig::for_phase(phase) }
}

#[test]
fn overfit_fixed_batch_of_eight() {
    let cfg = ModelConfig { d: 32, heads: 2, text_heads: 2, dem_heads: 2, ..tiny() };
    let (ds, vocab) = data();
    let mut store = init_params(&cfg, 1).unwrap();
    store.set_phase(Phase::Pretrain);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs = ds.records_of(RecordKind::Pretrain, None);
    let mut samples = Vec::new();
    let mut bundles = Vec::new();
    for r in recs.iter().take(8) {
        let x = ds.image(&r.image).unwrap().patchify(cfg.patch).unwrap();
        samples.push(flow::make_flow_sample(&x, &mut rng, flow::uniform_t).unwrap());
        bundles.push(build_plain_prompt(&vocab, &r.caption, cfg.text_len).unwrap());
    }
    let black = black_reference(8, 8).unwrap();
    let refs = crate::encoders::patch_batch(&cfg, &[&black; 8]).unwrap();
    let cond = Conditioning { bundles, refs: vec![refs], dem: None, redux_text: None };
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..Default::default() }, &store).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..2000 {
        let (l, grads) = {
            let mut ctx = Ctx::new(&store, true);
            let l = flow::loss(&mut ctx, &cfg, &samples, &cond, &AlignOptions::base()).unwrap();
            (ctx.g.value(l).data()[0] as f64, ctx.grads(l).unwrap())
        };
        first.get_or_insert(l);
        last = l;
        opt.step(&mut store, &grads).unwrap();
    }
    let first = first.unwrap();
    assert!(last < 0.1 * first, "loss {last} not below 10% of {first}");
}

#[test]
fn pretraining_is_deterministic() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let tcfg = quick(Phase::Pretrain, 5, 4);
    let (a, la) = pretrain(&ds, &vocab, &cfg, &tcfg).unwrap();
    let (b, lb) = pretrain(&ds, &vocab, &cfg, &tcfg).unwrap();
    assert_eq!(la.last().unwrap().loss.to_bits(), lb.last().unwrap().loss.to_bits());
    assert_eq!(checkpoint::encode(&a).unwrap(), checkpoint::encode(&b).unwrap());
    let (c, _) = pretrain(&ds, &vocab, &cfg, &TrainConfig { seed: 1, ..tcfg }).unwrap();
    assert_ne!(checkpoint::encode(&a).unwrap(), checkpoint::encode(&c).unwrap());
}

#[test]
fn pretraining_reaches_every_base_parameter() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let tcfg = TrainConfig { redux_aux: 0.5, ..quick(Phase::Pretrain, 1, 8) };
    let store = init_params(&cfg, 0).unwrap();
    let mut t = Trainer::pretrain(&ds, &vocab, &cfg, &tcfg, store).unwrap();
    let (samples, cond, dropped) = t.batch().unwrap();
    assert_eq!(dropped, 0);
    assert!(cond.redux_text.as_ref().is_some_and(|(a, _)| !a.is_empty() && a.len() < 8));
    let mut ctx = Ctx::new(t.store(), true);
    let l = flow::loss(&mut ctx, &cfg, &samples, &cond, &AlignOptions::base()).unwrap();
    let grads = ctx.grads(l).unwrap();
    for (e, g) in t.store().entries().iter().zip(&grads) {
        if e.group == Group::Base {
            let g = g.as_ref().unwrap_or_else(|| panic!("{} has no gradient", e.name));
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            // black references are zero input, so the reference weight stays put
            assert_eq!(nonzero, e.name != "ref_in.w", "{} gradient", e.name);
        } else {
            assert!(g.is_none(), "{} is frozen in pretraining", e.name);
        }
    }
}

#[test]
fn adaptation_keeps_base_bitwise_frozen() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let base = init_params(&cfg, 5).unwrap();
    let mut t = Trainer::adapt(&ds, &vocab, &cfg, &quick(Phase::Adapt, 100, 4), AdaptVariant::default(), base.clone()).unwrap();
    let start = t.store().clone();
    t.run(|_| {}).unwrap();
    assert_eq!(t.steps_done(), 100);
    assert!(t.store().group_bit_eq(&base, Group::Base));
    for g in [Group::Lora, Group::Dem, Group::SStar] {
        assert!(!t.store().group_bit_eq(&start, g), "{} never moved", g.name());
    }
}

#[test]
fn dropout_boundaries() {
    let (ds, vocab) = data();
    let cfg = tiny();
    for (ratio, expect) in [(0.0, 0), (1.0, 4)] {
        let tcfg = TrainConfig { drop_ratio: ratio, ..quick(Phase::Adapt, 20, 4) };
        let mut t = Trainer::adapt(&ds, &vocab, &cfg, &tcfg, AdaptVariant::default(), init_params(&cfg, 0).unwrap()).unwrap();
        for _ in 0..20 {
            let (_, cond, dropped) = t.batch().unwrap();
            assert_eq!(dropped, expect);
            let refs = cond.refs[0].data();
            let blacks = refs.chunks(cfg.tokens() * cfg.patch_dim()).filter(|c| c.iter().all(|&v| v == 0.0)).count();
            assert_eq!(blacks, expect);
        }
    }
}

#[test]
fn dropout_count_within_three_sigma() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let (steps, batch, p) = (300, 4, 0.5);
    let tcfg = TrainConfig { drop_ratio: p, ..quick(Phase::Adapt, steps, batch) };
    let mut t = Trainer::adapt(&ds, &vocab, &cfg, &tcfg, AdaptVariant::default(), init_params(&cfg, 0).unwrap()).unwrap();
    let total: usize = (0..steps).map(|_| t.batch().unwrap().2).sum();
    let n = (steps * batch) as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((total as f64 - n * p).abs() <= 3.0 * sigma, "{total} black references out of {n}");
}

#[test]
fn learnable_token_receives_gradient() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let mut base = init_params(&cfg, 0).unwrap();
    // a trained-looking LoRA-B and DEM so every adapted path is live
    for e in base.entries_mut() {
        if e.name.starts_with("lora.") || e.name.starts_with("dem.") {
            for (i, v) in e.tensor.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f32 - 3.0);
            }
        }
    }
    let mut t = Trainer::adapt(&ds, &vocab, &cfg, &quick(Phase::Adapt, 1, 4), AdaptVariant::default(), base).unwrap();
    let (samples, cond, _) = t.batch().unwrap();
    assert!(cond.bundles.iter().all(|b| b.s_star_index().is_some()));
    let mut ctx = Ctx::new(t.store(), true);
    let l = flow::loss(&mut ctx, &cfg, &samples, &cond, &AdaptVariant::default().options()).unwrap();
    let grads = ctx.grads(l).unwrap();
    let i = t.store().position("s_star").unwrap();
    assert!(grads[i].as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    let base_pos = t.store().position("blocks.0.attn.q.w").unwrap();
    assert!(grads[base_pos].is_none());
}

#[test]
fn s_star_starts_at_mean_surface_embedding() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let mut store = init_params(&cfg, 0).unwrap();
    init_s_star(&mut store, &vocab, &ds).unwrap();
    let mut words: Vec<&str> = ds.catalog.iter().map(|c| c.surface_name[0].as_str()).collect();
    words.sort_unstable();
    words.dedup();
    let table = store.get("text.embed").unwrap();
    let s = store.get("s_star").unwrap().data();
    for j in 0..cfg.d {
        let mean: f64 = words.iter().map(|w| table.row(vocab.id(w).unwrap())[j] as f64).sum::<f64>() / words.len() as f64;
        assert!((s[j] as f64 - mean).abs() < 1e-6);
    }
}

#[test]
fn configs_roundtrip_and_validate() {
    let mut kv = KvConfig::new();
    let t = TrainConfig { drop_ratio: 0.3, name_level_probs: [0.5, 0.5, 0.0], seed: 9, ..TrainConfig::adapt() };
    t.write_kv(&mut kv);
    assert_eq!(TrainConfig::from_kv(Phase::Adapt, &kv).unwrap(), t);
    let v = AdaptVariant { use_dem: false, splice: SpliceMode::All, ..Default::default() };
    v.write_kv(&mut kv);
    assert_eq!(AdaptVariant::from_kv(&kv).unwrap(), v);
    assert_eq!(TrainConfig::adapt().drop_ratio, 0.5);
    assert_eq!(TrainConfig::adapt().weight_decay, 0.01);
    assert_eq!((TrainConfig::pretrain().lr, TrainConfig::adapt().lr), (1e-3, 3e-4));
    for bad in [TrainConfig { drop_ratio: 1.5, ..TrainConfig::adapt() }, TrainConfig { weight_decay: -0.1, ..TrainConfig::adapt() }] {
        assert!(bad.validate().is_err());
    }
    assert!(parse_probs("0.2,0.8").is_err());
    assert!(TrainConfig { name_level_probs: [0.2, 0.2, 0.2], ..TrainConfig::adapt() }.validate().is_err());
}

#[test]
fn log_csv_header() {
    let rows = [LogRow { step: 0, loss: 1.5, grad_norm: 2.0, dropped_refs: 3 }];
    assert_eq!(log_csv(&rows), "step,loss,grad_norm,dropped_refs\n0,1.5,2,3\n");
}
