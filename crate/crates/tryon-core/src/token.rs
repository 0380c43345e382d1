//! Patchify latent grids into token sequences with 2-D positions and
//! segment labels; unpatchify model output back to a latent grid.

use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::math::{Mat, Real};

/// Role of a token within the concatenated in-context sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Noise,
    Reference,
    MaskedSource,
    Pose,
}

pub const SEGMENT_COUNT: usize = 4;

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::Noise => 0,
            Segment::Reference => 1,
            Segment::MaskedSource => 2,
            Segment::Pose => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Noise => "noise",
            Segment::Reference => "reference",
            Segment::MaskedSource => "masked_source",
            Segment::Pose => "pose",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    /// Patch size p; must divide the latent extent.
    pub p: usize,
    /// Token width after projection.
    pub d: usize,
}

/// Optional linear map applied per token.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'a, T> {
    Identity,
    Linear { w: &'a Mat<T>, b: &'a [T] },
}

/// Tokens with their patch-grid positions and segment labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Mat<T>,
    pub positions: Vec<(usize, usize)>,
    pub segments: Vec<Segment>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.tokens.rows || self.segments.len() != self.tokens.rows {
            return Err(Error::ShapeMismatch(format!(
                "token sequence arrays inconsistent: {} tokens, {} positions, {} segments",
                self.tokens.rows,
                self.positions.len(),
                self.segments.len()
            )));
        }
        Ok(())
    }
}

/// Split a latent grid into p×p patches (row-major over the grid), flatten
/// each patch row-major (dy, dx, channel), and optionally project.
pub fn patchify<T: Real>(
    lat: &LatentGrid<T>,
    seg: Segment,
    p: usize,
    proj: Projection<'_, T>,
) -> Result<TokenSequence<T>> {
    if p == 0 {
        return Err(Error::InvalidInput("patch size must be >= 1".into()));
    }
    if lat.h % p != 0 || lat.w % p != 0 {
        return Err(Error::ShapeMismatch(format!(
            "latent {}x{} not divisible by patch size {p}",
            lat.h, lat.w
        )));
    }
    let gr = lat.h / p;
    let gc = lat.w / p;
    let raw_dim = p * p * lat.c;
    let n = gr * gc;
    let mut raw = Mat::zeros(n, raw_dim);
    let mut positions = Vec::with_capacity(n);
    for gy in 0..gr {
        for gx in 0..gc {
            let row = raw.row_mut(gy * gc + gx);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let cell = lat.cell(gy * p + dy, gx * p + dx);
                    row[k..k + lat.c].copy_from_slice(cell);
                    k += lat.c;
                }
            }
            positions.push((gy, gx));
        }
    }
    let tokens = match proj {
        Projection::Identity => raw,
        Projection::Linear { w, b } => {
            if w.rows != raw_dim {
                return Err(Error::ShapeMismatch(format!(
                    "projection rows {} != patch dim {raw_dim}",
                    w.rows
                )));
            }
            crate::math::linear(&raw, w, b)
        }
    };
    Ok(TokenSequence {
        tokens,
        positions,
        segments: vec![seg; n],
    })
}

/// Concatenate sequences in argument order; order is significant and stable.
pub fn concat_sequences<T: Real>(seqs: &[&TokenSequence<T>]) -> Result<TokenSequence<T>> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("concat of zero sequences".into()));
    }
    let d = seqs[0].width();
    for s in seqs {
        s.validate()?;
        if s.width() != d {
            return Err(Error::ShapeMismatch(format!(
                "token widths differ: {d} vs {}",
                s.width()
            )));
        }
    }
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    let mut tokens = Mat::zeros(n, d);
    let mut positions = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    let mut at = 0;
    for s in seqs {
        for i in 0..s.len() {
            tokens.row_mut(at + i).copy_from_slice(s.tokens.row(i));
        }
        positions.extend_from_slice(&s.positions);
        segments.extend_from_slice(&s.segments);
        at += s.len();
    }
    Ok(TokenSequence {
        tokens,
        positions,
        segments,
    })
}

/// Keep only tokens of one segment, preserving relative order.
pub fn strip_to_segment<T: Real>(seq: &TokenSequence<T>, seg: Segment) -> Result<TokenSequence<T>> {
    seq.validate()?;
    let idx: Vec<usize> = (0..seq.len()).filter(|&i| seq.segments[i] == seg).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!(
            "segment {} absent from sequence",
            seg.name()
        )));
    }
    let mut tokens = Mat::zeros(idx.len(), seq.width());
    let mut positions = Vec::with_capacity(idx.len());
    for (o, &i) in idx.iter().enumerate() {
        tokens.row_mut(o).copy_from_slice(seq.tokens.row(i));
        positions.push(seq.positions[i]);
    }
    Ok(TokenSequence {
        tokens,
        positions,
        segments: vec![seg; idx.len()],
    })
}

/// Scatter tokens back onto a grid. Positions must tile a complete patch
/// grid exactly once and the sequence must be single-segment.
pub fn unpatchify<T: Real>(
    seq: &TokenSequence<T>,
    p: usize,
    channels: usize,
    proj_out: Projection<'_, T>,
) -> Result<LatentGrid<T>> {
    seq.validate()?;
    if seq.is_empty() {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    let seg0 = seq.segments[0];
    if !seq.segments.iter().all(|&s| s == seg0) {
        return Err(Error::InvalidInput(
            "unpatchify requires a single-segment sequence".into(),
        ));
    }
    let gr = seq.positions.iter().map(|&(r, _)| r).max().unwrap() + 1;
    let gc = seq.positions.iter().map(|&(_, c)| c).max().unwrap() + 1;
    if seq.len() != gr * gc {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens cannot tile a {gr}x{gc} patch grid",
            seq.len()
        )));
    }
    let mut seen = vec![false; gr * gc];
    for &(r, c) in &seq.positions {
        let k = r * gc + c;
        if seen[k] {
            return Err(Error::InvalidInput(format!(
                "duplicate patch position ({r},{c})"
            )));
        }
        seen[k] = true;
    }

    let patch_dim = p * p * channels;
    let projected: Mat<T> = match proj_out {
        Projection::Identity => {
            if seq.width() != patch_dim {
                return Err(Error::ShapeMismatch(format!(
                    "token width {} != p^2*c = {patch_dim} for identity projection",
                    seq.width()
                )));
            }
            seq.tokens.clone()
        }
        Projection::Linear { w, b } => {
            if w.rows != seq.width() || w.cols != patch_dim || b.len() != patch_dim {
                return Err(Error::ShapeMismatch(
                    "output projection shape inconsistent with p^2*c".into(),
                ));
            }
            crate::math::linear(&seq.tokens, w, b)
        }
    };

    let mut out = LatentGrid::zeros(gr * p, gc * p, channels);
    for (i, &(gy, gx)) in seq.positions.iter().enumerate() {
        let row = projected.row(i);
        let mut k = 0;
        for dy in 0..p {
            for dx in 0..p {
                out.cell_mut(gy * p + dy, gx * p + dx)
                    .copy_from_slice(&row[k..k + channels]);
                k += channels;
            }
        }
    }
    Ok(out)
}
