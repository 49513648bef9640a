//! Joint attention sequence `[noisy N, text M, ref_1 N, …, ref_K N]`, its 2D
//! rotary positions, and the selective cross-modal attention mask.

use std::ops::Range;

use crate::diffcore::{Graph, Real, Tensor, Var, MASK_NEG};
use crate::error::{Error, Result};
use crate::promptkit::PromptBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Noisy,
    Text,
    Ref(usize),
}

/// `(row, col)` rotary position index.
pub type Position = (usize, usize);

/// Geometry of a joint sequence, independent of token values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutShape {
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_len: usize,
    pub refs: usize,
}

impl LayoutShape {
    pub fn new(grid_h: usize, grid_w: usize, text_len: usize, refs: usize) -> Self {
        Self { grid_h, grid_w, text_len, refs }
    }

    /// Image tokens per image.
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn total(&self) -> usize {
        self.text_len + (self.refs + 1) * self.n()
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        let (n, m) = (self.n(), self.text_len);
        match seg {
            Segment::Noisy => 0..n,
            Segment::Text => n..n + m,
            Segment::Ref(k) => n + m + k * n..n + m + (k + 1) * n,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut v = vec![Segment::Noisy; self.n()];
        v.extend(std::iter::repeat_n(Segment::Text, self.text_len));
        for k in 0..self.refs {
            v.extend(std::iter::repeat_n(Segment::Ref(k), self.n()));
        }
        v
    }

    pub fn ref_rows(&self) -> Range<usize> {
        self.n() + self.text_len..self.total()
    }
}

/// An assembled batch sequence `[B, T, d]` with its per-token tags.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub shape: LayoutShape,
    pub tokens: Var,
    pub segments: Vec<Segment>,
    pub bundles: Vec<PromptBundle>,
}

/// Concatenates noisy tokens `[B, N, d]`, text `[B, M, d]` and each reference
/// `[B, N, d]` in contract order.
pub fn assemble<F: Real>(
    g: &mut Graph<F>,
    x_t: Var,
    text: Var,
    refs: &[Var],
    bundles: &[PromptBundle],
    grid: (usize, usize),
) -> Result<SequenceLayout> {
    let xd = g.dims(x_t).to_vec();
    let td = g.dims(text).to_vec();
    if xd.len() != 3 || td.len() != 3 || xd[0] != td[0] || xd[2] != td[2] {
        return Err(Error::Layout(format!("noisy {xd:?} and text {td:?} disagree")));
    }
    if xd[1] != grid.0 * grid.1 {
        return Err(Error::Layout(format!("noisy stream has {} tokens, grid {grid:?}", xd[1])));
    }
    if bundles.len() != xd[0] || bundles.iter().any(|b| b.len() != td[1]) {
        return Err(Error::Layout(format!("{} bundles for a batch of {} with text length {}", bundles.len(), xd[0], td[1])));
    }
    for (k, &r) in refs.iter().enumerate() {
        if g.dims(r) != xd.as_slice() {
            return Err(Error::Layout(format!("reference {k} has dims {:?}, expected {xd:?}", g.dims(r))));
        }
    }
    let mut parts = vec![x_t, text];
    parts.extend_from_slice(refs);
    let tokens = g.concat(&parts, 1)?;
    let shape = LayoutShape::new(grid.0, grid.1, td[1], refs.len());
    Ok(SequenceLayout { shape, tokens, segments: shape.segments(), bundles: bundles.to_vec() })
}

/// Text at `(0,0)`, noisy `(i,j)`, every reference `(i, j + offset)`.
pub fn rope_indices(shape: &LayoutShape, ref_offset: usize) -> Vec<Position> {
    let grid: Vec<Position> = (0..shape.grid_h).flat_map(|i| (0..shape.grid_w).map(move |j| (i, j))).collect();
    let mut pos = grid.clone();
    pos.extend(std::iter::repeat_n((0, 0), shape.text_len));
    for _ in 0..shape.refs {
        pos.extend(grid.iter().map(|&(i, j)| (i, j + ref_offset)));
    }
    pos
}

/// Boolean `T×T` block pattern; `true` entries receive `MASK_NEG`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn zeros(size: usize) -> Self {
        Self { size, blocked: vec![false; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.size + k]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.blocked.iter().any(|&b| b)
    }

    /// Additive values: 0 or `MASK_NEG`.
    pub fn additive<F: Real>(&self) -> Vec<F> {
        let neg = F::of(MASK_NEG);
        self.blocked.iter().map(|&b| if b { neg } else { F::zero() }).collect()
    }

    /// One line per query row: `.` open, `X` blocked.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for row in self.blocked.chunks(self.size) {
            s.extend(row.iter().map(|&b| if b { 'X' } else { '.' }));
            s.push('\n');
        }
        s
    }
}

/// Irrelevant text queries may not see reference keys; references may not
/// see each other. With `symmetric`, reference queries also skip irrelevant
/// text keys.
pub fn build_mask(shape: &LayoutShape, relevance: &[bool], symmetric: bool) -> Result<AttentionMask> {
    if relevance.len() != shape.text_len {
        return Err(Error::Layout(format!("relevance of length {} for text length {}", relevance.len(), shape.text_len)));
    }
    let t = shape.total();
    let mut m = AttentionMask::zeros(t);
    let text = shape.range(Segment::Text);
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            continue;
        }
        let q = text.start + i;
        for k in shape.ref_rows() {
            m.blocked[q * t + k] = true;
            if symmetric {
                m.blocked[k * t + q] = true;
            }
        }
    }
    for a in 0..shape.refs {
        for b in 0..shape.refs {
            if a == b {
                continue;
            }
            for q in shape.range(Segment::Ref(a)) {
                for k in shape.range(Segment::Ref(b)) {
                    m.blocked[q * t + k] = true;
                }
            }
        }
    }
    Ok(m)
}

/// Stacks per-sample masks into a `[B, T, T]` additive tensor.
pub fn stack_masks<F: Real>(masks: &[AttentionMask]) -> Result<Tensor<F>> {
    let t = masks.first().map(|m| m.size).ok_or_else(|| Error::Layout("no masks".into()))?;
    if masks.iter().any(|m| m.size != t) {
        return Err(Error::Layout("masks of different sizes".into()));
    }
    let data = masks.iter().flat_map(|m| m.additive::<F>()).collect();
    Ok(Tensor::new([masks.len(), t, t], data)?)
}
