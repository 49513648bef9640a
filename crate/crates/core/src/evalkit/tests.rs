use super::*;
use crate::ditnet::init_params;
use crate::synthdata::{generate, CorpusSpec, SynthSpec};
use crate::trainer::{AdaptVariant, TrainConfig};

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
        seed: 4,
        concepts: 6,
        pairs_per_concept: 3,
        heldout_concepts: 2,
        corpus: CorpusSpec { images: 10, image_side: 8, ..Default::default() },
    };
    (generate(&spec, &vocab).unwrap(), vocab)
}

fn quick_eval() -> EvalSettings {
    EvalSettings { seeds: 1, sample: SampleConfig { steps: 3, ..Default::default() }, backgrounds: vec![PaletteColor::White], ..Default::default() }
}

#[test]
fn probe_arms_share_noise_and_are_order_free() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let store = init_params(&cfg, 0).unwrap();
    let model = Model { store: &store, cfg: &cfg, opts: AlignOptions::full(), learnable_token: true };
    let c = &ds.catalog[0];
    let reference = reference_of(&ds, c.concept_id).unwrap();
    let seeds: Vec<u64> = (0..20).collect();
    let sample = SampleConfig { steps: 2, ..Default::default() };
    let caption = caption_template(0, PaletteColor::White);
    let rep = misalignment_probe(&model, &vocab, c, reference, &caption, NameLevel::Parent, &seeds, &sample).unwrap();
    assert_eq!(rep.rows.len(), 20);
    assert!((rep.delta - (rep.cp_with_ref - rep.cp_black_ref)).abs() < 1e-15);
    // with black in both arms the arms coincide and match the first black arm
    let black = black_reference(8, 8).unwrap();
    let again = misalignment_probe(&model, &vocab, c, &black, &caption, NameLevel::Parent, &seeds, &sample).unwrap();
    for (a, b) in again.rows.iter().zip(&rep.rows) {
        assert_eq!(a.cp_with_ref.to_bits(), b.cp_black_ref.to_bits());
        assert_eq!(a.cp_with_ref.to_bits(), a.cp_black_ref.to_bits());
    }
    assert!(misalignment_probe(&model, &vocab, c, reference, &caption, NameLevel::Parent, &seeds[..19], &sample).is_err());
}

#[test]
fn evaluation_is_reproducible_and_consistent() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let store = init_params(&cfg, 0).unwrap();
    let model = Model { store: &store, cfg: &cfg, opts: AlignOptions::full(), learnable_token: true };
    let a = evaluate(&model, &ds, &vocab, Split::Heldout, &quick_eval(), "x").unwrap();
    let b = evaluate(&model, &ds, &vocab, Split::Heldout, &quick_eval(), "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    assert!((a.cp_pf - a.cp * a.pf).abs() < 1e-15);
    assert!(a.rows.iter().all(|r| r.prompt.contains("{C}") && r.seed == 1000));
    assert!(a.mask_blocked > 0);
    assert!(a.csv().starts_with("name,concept_id,seed,prompt,cp,pf,color\n"));
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["cases"], 2);
}

#[test]
fn variants_parse_and_configure() {
    let list = Variant::parse_list("full,no_LT,no_DEM,no_mask,no_TS,replace_all,drop=0.9,drop0.1").unwrap();
    assert_eq!(list.len(), 8);
    assert_eq!(list[6], Variant::Drop(0.9));
    for v in &list {
        assert_eq!(Variant::parse(&v.to_string()).unwrap(), *v);
    }
    assert!(Variant::parse("no_such").is_err());
    assert!(Variant::parse("drop=1.5").is_err());
    let base = TrainConfig::adapt();
    let (av, t) = Variant::NoTs.setup(&base);
    assert_eq!((av, t.drop_ratio, t.name_level_probs), (AdaptVariant::default(), 0.0, [1.0, 0.0, 0.0]));
    assert!(!Variant::NoMask.setup(&base).0.options().use_mask);
    assert!(!Variant::NoLt.setup(&base).0.learnable_token);
    assert_eq!(Variant::ReplaceAll.setup(&base).0.splice, crate::dem::SpliceMode::All);
}

#[test]
fn ablation_rows_share_split_and_no_mask_is_zero() {
    let (ds, vocab) = data();
    let cfg = tiny();
    let base = init_params(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = AblationSettings {
        train: TrainConfig { iterations: 2, batch: 2, ..TrainConfig::adapt() },
        eval: quick_eval(),
        cache: Some(dir.path().to_path_buf()),
    };
    let variants = [Variant::Full, Variant::NoMask, Variant::NoLt];
    let reports = ablation_run(&ds, &vocab, &cfg, &base, &variants, &settings, |_| {}).unwrap();
    assert_eq!(reports.len(), variants.len());
    assert_eq!(reports[0].name, "full");
    assert!(reports.iter().all(|r| r.split_hash == reports[0].split_hash));
    assert_eq!(reports[1].mask_blocked, 0);
    assert!(reports[0].mask_blocked > 0);
    let csv = ablation_csv(&reports);
    assert_eq!(csv.lines().count(), 4);
    // second run is served from the cache and identical
    let cached = ablation_run(&ds, &vocab, &cfg, &base, &variants, &settings, |_| {}).unwrap();
    assert_eq!(cached, reports);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}
