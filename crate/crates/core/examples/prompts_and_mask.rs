//! Builds prompts at each name level, then shows the token layout, the
//! selective attention mask and the rotary positions for one of them.

use prioralign::attnlayout::{build_mask, rope_indices, LayoutShape, Segment};
use prioralign::promptkit::{build_prompt, NameLevel, Vocab};
use prioralign::synthdata::{all_attrs, concept_record};

fn main() -> prioralign::Result<()> {
    let vocab = Vocab::builtin();
    let concept = concept_record(3, all_attrs()[5]);
    for level in NameLevel::ALL {
        let b = build_prompt(&vocab, "a {C} on white background", &concept, level, 10)?;
        let rel: String = b.relevance.iter().map(|&r| if r { '1' } else { '0' }).collect();
        println!("{level:<8?} {:<45} relevance {rel}", vocab.detokenize(&b.token_ids)?);
    }

    let b = build_prompt(&vocab, "a {C} on white background", &concept, NameLevel::Parent, 10)?;
    let shape = LayoutShape::new(2, 2, 10, 1);
    for seg in [Segment::Noisy, Segment::Text, Segment::Ref(0)] {
        println!("{seg:?}: rows {:?}", shape.range(seg));
    }
    let mask = build_mask(&shape, &b.relevance, false)?;
    println!("{} blocked pairs (X = blocked query/key)\n{}", mask.blocked_count(), mask.dump());
    let pos = rope_indices(&shape, 2);
    let noisy = &pos[shape.range(Segment::Noisy)];
    let refs = &pos[shape.range(Segment::Ref(0))];
    println!("noisy positions {noisy:?}\nreference positions {refs:?}");
    Ok(())
}
