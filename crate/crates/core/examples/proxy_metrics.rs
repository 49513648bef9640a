//! Scores rendered glyphs with the concept-preservation and
//! prompt-following proxies, including deliberate mismatches.

use prioralign::evalkit::{analyze, cp_proxy, pf_proxy};
use prioralign::promptkit::{PaletteColor, Pattern, ShapeClass, VisualAttrs};
use prioralign::synthdata::{concept_record, render, Scene};

fn main() -> prioralign::Result<()> {
    let attrs = VisualAttrs { shape: ShapeClass::Circle, color: PaletteColor::Blue, pattern: Pattern::Striped };
    let scene = Scene { attrs, top: 3, left: 4, size: 9, background: PaletteColor::White, template: 0 };
    let (im, _) = render(&scene, 16)?;
    let g = analyze(&im).expect("a glyph is drawn");
    println!("detected {:?} {:?} {:?}, fill {:.2}, {} pixels", g.color, g.shape, g.pattern, g.fill, g.pixels.len());

    let wanted = [
        ("exact", attrs),
        ("wrong color", VisualAttrs { color: PaletteColor::Red, ..attrs }),
        ("wrong shape", VisualAttrs { shape: ShapeClass::Square, ..attrs }),
        ("wrong pattern", VisualAttrs { pattern: Pattern::Plain, ..attrs }),
    ];
    for (label, a) in wanted {
        println!("CP against {label:<13} {:.2}", cp_proxy(&im, &concept_record(0, a)));
    }
    for bg in ["white", "black"] {
        println!("PF for \"on {bg} background\": {:.2}", pf_proxy(&im, &format!("a circle on {bg} background"))?);
    }
    Ok(())
}
