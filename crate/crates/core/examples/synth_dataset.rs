//! Generates a small glyph dataset, writes it to a temporary directory,
//! reads it back and prints what the corpus and the concept catalog hold.

use prioralign::promptkit::{ShapeClass, Vocab};
use prioralign::synthdata::{generate, CorpusSpec, Dataset, RecordKind, Split, SynthSpec};

fn main() -> prioralign::Result<()> {
    let vocab = Vocab::builtin();
    let spec = SynthSpec {
        seed: 7,
        concepts: 8,
        pairs_per_concept: 6,
        heldout_concepts: 2,
        corpus: CorpusSpec { images: 300, ..Default::default() },
    };
    let ds = generate(&spec, &vocab)?;
    let dir = std::env::temp_dir().join("prioralign-example-data");
    ds.write(&dir, &vocab)?;
    let (back, _) = Dataset::read(&dir)?;
    assert_eq!(back.hash()?, ds.hash()?);
    println!("wrote {} to {}", ds.hash()?, dir.display());

    let corpus = ds.records_of(RecordKind::Pretrain, None);
    for shape in ShapeClass::ALL {
        let of_shape: Vec<_> = corpus.iter().filter(|r| r.attrs.shape == shape).collect();
        let dominant = spec.corpus.dominant[&shape];
        let hits = of_shape.iter().filter(|r| r.attrs.color == dominant).count();
        println!("{:<8} {:>4} images, {:>5.1}% {}", shape.word(), of_shape.len(), 100.0 * hits as f64 / of_shape.len() as f64, dominant.word());
    }
    for c in &ds.catalog {
        let split = if ds.records_of(RecordKind::Pair, Some(Split::Heldout)).iter().any(|r| r.concept_id == Some(c.concept_id)) { "heldout" } else { "train" };
        println!("concept {:>2} {:<20} {:?} ({split})", c.concept_id, c.surface_name.join(" "), c.attrs);
    }
    Ok(())
}
