//! Closed-form pixel statistics standing in for learned judges.

use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::promptkit::{ConceptRecord, PaletteColor, Pattern, ShapeClass};

pub const COLOR_WEIGHT: f64 = 0.5;
pub const SHAPE_WEIGHT: f64 = 0.3;
pub const PATTERN_WEIGHT: f64 = 0.2;

/// Fill ratio (pixels over bounding box) at or above which a blob is a square.
const SQUARE_FILL: f64 = 0.9;
/// Fill ratio at or above which a non-square blob is a circle.
const CIRCLE_FILL: f64 = 0.65;
/// Mean absolute row-to-row intensity change that marks stripes.
const STRIPE_STEP: f64 = 0.12;

/// The dominant glyph of an image and its classified attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    /// Row-major pixel indices of the component.
    pub pixels: Vec<usize>,
    pub color: PaletteColor,
    pub shape: ShapeClass,
    pub pattern: Pattern,
    pub fill: f64,
}

fn rgb(im: &Image, i: usize) -> [f64; 3] {
    let d = &im.data()[3 * i..3 * i + 3];
    [d[0] as f64, d[1] as f64, d[2] as f64]
}

fn is_glyph_pixel(c: [f64; 3]) -> bool {
    PaletteColor::GLYPH.contains(&PaletteColor::nearest(c))
}

fn nearest_glyph_color(c: [f64; 3]) -> PaletteColor {
    let dist = |p: PaletteColor| p.rgb().iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = PaletteColor::GLYPH[0];
    for p in PaletteColor::GLYPH {
        if dist(p) < dist(best) {
            best = p;
        }
    }
    best
}

/// Largest 4-connected set of pixels whose nearest palette entry is a glyph
/// color. Ties go to the component found first in raster order.
pub fn largest_component(im: &Image) -> Vec<usize> {
    let (h, w) = (im.height(), im.width());
    let glyph: Vec<bool> = (0..h * w).map(|i| is_glyph_pixel(rgb(im, i))).collect();
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !glyph[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            let (r, c) = (i / w, i % w);
            let mut push = |j: usize| {
                if glyph[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            };
            if r > 0 {
                push(i - w);
            }
            if r + 1 < h {
                push(i + w);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < w {
                push(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Locates and classifies the dominant glyph; `None` when there is none.
pub fn analyze(im: &Image) -> Option<Glyph> {
    let pixels = largest_component(im);
    if pixels.is_empty() {
        return None;
    }
    let w = im.width();
    let n = pixels.len() as f64;
    let mut mean = [0.0; 3];
    for &i in &pixels {
        for (m, v) in mean.iter_mut().zip(rgb(im, i)) {
            *m += v / n;
        }
    }
    let color = nearest_glyph_color(mean);
    let (r0, r1) = (pixels.iter().map(|i| i / w).min()?, pixels.iter().map(|i| i / w).max()?);
    let (c0, c1) = (pixels.iter().map(|i| i % w).min()?, pixels.iter().map(|i| i % w).max()?);
    let fill = n / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    let shape = if fill >= SQUARE_FILL {
        ShapeClass::Square
    } else if fill >= CIRCLE_FILL {
        ShapeClass::Circle
    } else {
        ShapeClass::Triangle
    };
    // per-row mean of the brightest channel inside the component
    let mut rows = vec![(0.0f64, 0usize); r1 - r0 + 1];
    for &i in &pixels {
        let c = rgb(im, i);
        let e = &mut rows[i / w - r0];
        e.0 += c[0].max(c[1]).max(c[2]);
        e.1 += 1;
    }
    let means: Vec<f64> = rows.iter().filter(|e| e.1 > 0).map(|e| e.0 / e.1 as f64).collect();
    let step = if means.len() < 2 {
        0.0
    } else {
        means.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>() / (means.len() - 1) as f64
    };
    let pattern = if step > STRIPE_STEP { Pattern::Striped } else { Pattern::Plain };
    Some(Glyph { pixels, color, shape, pattern, fill })
}

/// Weighted attribute agreement between the dominant glyph and a concept;
/// zero when no glyph is found.
pub fn cp_proxy(im: &Image, concept: &ConceptRecord) -> f64 {
    match analyze(im) {
        None => 0.0,
        Some(g) => cp_of(&g, concept),
    }
}

pub fn cp_of(g: &Glyph, concept: &ConceptRecord) -> f64 {
    let a = &concept.attrs;
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    COLOR_WEIGHT * hit(g.color == a.color) + SHAPE_WEIGHT * hit(g.shape == a.shape) + PATTERN_WEIGHT * hit(g.pattern == a.pattern)
}

/// The first background color named in a caption.
pub fn caption_background(caption: &str) -> Result<PaletteColor> {
    caption
        .split_whitespace()
        .filter_map(PaletteColor::from_word)
        .find(|c| PaletteColor::BACKGROUND.contains(c))
        .ok_or_else(|| Error::Data(format!("caption {caption:?} names no background color")))
}

/// Fraction of pixels outside the dominant glyph whose nearest palette
/// entry is the captioned background.
pub fn pf_proxy(im: &Image, caption: &str) -> Result<f64> {
    let bg = caption_background(caption)?;
    let glyph = largest_component(im);
    Ok(pf_with(im, &glyph, bg))
}

pub fn pf_with(im: &Image, glyph: &[usize], bg: PaletteColor) -> f64 {
    let total = im.height() * im.width();
    let mut inside = vec![false; total];
    for &i in glyph {
        inside[i] = true;
    }
    let rest = total - glyph.len();
    if rest == 0 {
        return 0.0;
    }
    let hits = (0..total).filter(|&i| !inside[i] && PaletteColor::nearest(rgb(im, i)) == bg).count();
    hits as f64 / rest as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::VisualAttrs;
    use crate::synthdata::{all_attrs, concept_record, render, Scene};
    use proptest::prelude::*;

    fn scene(attrs: VisualAttrs, top: usize, left: usize, size: usize, bg: PaletteColor) -> Scene {
        Scene { attrs, top, left, size, background: bg, template: 0 }
    }

    #[test]
    fn exact_renders_score_one() {
        for attrs in all_attrs() {
            for size in 6..=10 {
                for bg in PaletteColor::BACKGROUND {
                    let s = scene(attrs, 16 - size, 1, size, bg);
                    let (im, mask) = render(&s, 16).unwrap();
                    let c = concept_record(0, attrs);
                    assert_eq!(cp_proxy(&im, &c), 1.0, "{attrs:?} size {size} on {bg:?}: {:?}", analyze(&im));
                    let comp = largest_component(&im);
                    let expect: Vec<usize> = (0..256).filter(|&i| mask[i]).collect();
                    assert_eq!(comp, expect);
                    let caption = format!("a {} on {} background", "tile", bg.word());
                    assert_eq!(pf_proxy(&im, &caption).unwrap(), 1.0);
                }
            }
        }
    }

    #[test]
    fn weight_algebra() {
        let attrs = VisualAttrs { shape: ShapeClass::Circle, color: PaletteColor::Red, pattern: Pattern::Striped };
        let (im, _) = render(&scene(attrs, 3, 3, 9, PaletteColor::White), 16).unwrap();
        let wrong_color = concept_record(0, VisualAttrs { color: PaletteColor::Blue, ..attrs });
        assert!((cp_proxy(&im, &wrong_color) - 0.5).abs() < 1e-12);
        let wrong_shape = concept_record(0, VisualAttrs { shape: ShapeClass::Square, ..attrs });
        assert!((cp_proxy(&im, &wrong_shape) - 0.7).abs() < 1e-12);
        let wrong_pattern = concept_record(0, VisualAttrs { pattern: Pattern::Plain, ..attrs });
        assert!((cp_proxy(&im, &wrong_pattern) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn blank_and_wrong_backgrounds() {
        let c = concept_record(0, all_attrs()[0]);
        for bg in PaletteColor::BACKGROUND {
            let rgb = bg.rgb();
            let im = Image::filled(16, 16, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
            assert_eq!(cp_proxy(&im, &c), 0.0);
            for other in PaletteColor::BACKGROUND {
                let caption = format!("a tile on {} background", other.word());
                assert_eq!(pf_proxy(&im, &caption).unwrap(), if other == bg { 1.0 } else { 0.0 });
            }
        }
        assert!(pf_proxy(&Image::filled(4, 4, [1.0; 3]), "a tile on a wall").is_err());
    }

    proptest! {
        #[test]
        fn split_background_counts_pixels(cut in 0usize..=16, h in 4usize..20) {
            let w = 16;
            let mut im = Image::filled(h, w, [1.0, 1.0, 1.0]);
            for r in 0..h {
                for c in cut..w {
                    im.set_pixel(r, c, [0.0, 0.0, 0.0]);
                }
            }
            // counting oracle: white columns are exactly those left of the cut
            let expect = (cut * h) as f64 / (w * h) as f64;
            let got = pf_proxy(&im, "a tile on white background").unwrap();
            prop_assert!((got - expect).abs() <= 1.0 / w as f64);
            if cut == w / 2 {
                prop_assert!((got - 0.5).abs() <= 1.0 / w as f64);
            }
        }

        #[test]
        fn metrics_are_pure(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
            let im = Image::new(16, 16, data).unwrap();
            let c = concept_record(0, all_attrs()[(seed % 24) as usize]);
            prop_assert_eq!(cp_proxy(&im, &c).to_bits(), cp_proxy(&im.clone(), &c).to_bits());
            let p = pf_proxy(&im, "a tile on cyan background").unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let q = cp_proxy(&im, &c);
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }
}
