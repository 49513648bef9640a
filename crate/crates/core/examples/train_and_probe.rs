//! Both training phases on a tiny model: pretrain on the skewed corpus,
//! adapt on reference pairs, save and reload the checkpoint, then run the
//! misalignment probe on the pretrained and the adapted model.
//!
//! The model is far too small and short-trained to show the effect; the
//! acceptance suite runs the full-size version.

use prioralign::config::ModelConfig;
use prioralign::evalkit::{probe_split, EvalSettings, Model};
use prioralign::flow::SampleConfig;
use prioralign::promptkit::Vocab;
use prioralign::synthdata::{generate, CorpusSpec, Split, SynthSpec};
use prioralign::trainer::{self, checkpoint, AdaptVariant, TrainConfig};

fn main() -> prioralign::Result<()> {
    let vocab = Vocab::builtin();
    let spec = SynthSpec { concepts: 6, pairs_per_concept: 8, heldout_concepts: 2, corpus: CorpusSpec { images: 200, image_side: 8, ..Default::default() }, ..Default::default() };
    let ds = generate(&spec, &vocab)?;
    let cfg = ModelConfig { d: 32, blocks: 1, heads: 2, text_heads: 2, dem_heads: 2, image_side: 8, redux_tokens: 4, lora_rank: 4, ..Default::default() };

    let pre = TrainConfig { iterations: 300, batch: 8, ..TrainConfig::pretrain() };
    let (base, log) = trainer::pretrain(&ds, &vocab, &cfg, &pre)?;
    println!("pretrain loss {:.4} -> {:.4}", log[0].loss, log.last().unwrap().loss);

    let ada = TrainConfig { iterations: 200, batch: 8, ..TrainConfig::adapt() };
    let variant = AdaptVariant::default();
    let (adapted, log) = trainer::adapt(&ds, &vocab, &cfg, &ada, variant, base.clone())?;
    let dropped: usize = log.iter().map(|r| r.dropped_refs).sum();
    println!("adapt loss {:.4} -> {:.4}, {dropped} of {} references dropped", log[0].loss, log.last().unwrap().loss, 200 * 8);

    let path = std::env::temp_dir().join("prioralign-example.agck");
    let mut kv = prioralign::config::KvConfig::new();
    cfg.write_kv(&mut kv);
    variant.write_kv(&mut kv);
    checkpoint::save_model(&adapted, &kv, &path)?;
    let (cfg_back, _, store_back) = checkpoint::load_model(&path)?;
    assert_eq!(cfg_back, cfg);
    assert_eq!(checkpoint::encode(&store_back)?, checkpoint::encode(&adapted)?);
    println!("checkpoint round trip at {} is byte-identical", path.display());

    let settings = EvalSettings { sample: SampleConfig { steps: 8, ..Default::default() }, ..Default::default() };
    let seeds: Vec<u64> = (0..20).collect();
    let mut start = base.clone();
    trainer::init_s_star(&mut start, &vocab, &ds)?;
    for (label, store) in [("pretrained", &start), ("adapted", &adapted)] {
        let model = Model { store, cfg: &cfg, opts: variant.options(), learnable_token: true };
        let p = probe_split(&model, &ds, &vocab, Split::Heldout, &seeds, &settings)?;
        println!("{label:<10} CP with ref {:.3}, black ref {:.3}, delta {:+.3}", p.cp_with_ref, p.cp_black_ref, p.delta);
    }
    Ok(())
}
