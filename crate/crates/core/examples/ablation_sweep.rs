//! Adapts one tiny pretrained model under several ablation variants and
//! prints the held-out scores of each.

use prioralign::config::ModelConfig;
use prioralign::evalkit::{ablation_csv, ablation_run, AblationSettings, EvalSettings, Variant};
use prioralign::flow::SampleConfig;
use prioralign::promptkit::Vocab;
use prioralign::synthdata::{generate, CorpusSpec, SynthSpec};
use prioralign::trainer::{self, TrainConfig};

fn main() -> prioralign::Result<()> {
    let vocab = Vocab::builtin();
    let spec = SynthSpec { concepts: 6, pairs_per_concept: 8, heldout_concepts: 2, corpus: CorpusSpec { images: 200, image_side: 8, ..Default::default() }, ..Default::default() };
    let ds = generate(&spec, &vocab)?;
    let cfg = ModelConfig { d: 32, blocks: 1, heads: 2, text_heads: 2, dem_heads: 2, image_side: 8, redux_tokens: 4, lora_rank: 4, ..Default::default() };
    let (base, _) = trainer::pretrain(&ds, &vocab, &cfg, &TrainConfig { iterations: 200, batch: 8, ..TrainConfig::pretrain() })?;

    let mut variants = Variant::COMPONENTS.to_vec();
    variants.extend([Variant::ReplaceAll, Variant::Drop(0.9)]);
    let settings = AblationSettings {
        train: TrainConfig { iterations: 100, batch: 8, ..TrainConfig::adapt() },
        eval: EvalSettings { seeds: 1, sample: SampleConfig { steps: 8, ..Default::default() }, ..Default::default() },
        cache: None,
    };
    let reports = ablation_run(&ds, &vocab, &cfg, &base, &variants, &settings, |r| eprintln!("finished {}", r.name))?;
    print!("{}", ablation_csv(&reports));
    Ok(())
}
