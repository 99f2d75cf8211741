//! Row-wise bidirectional LSTM re-encoding of the feature grid.
//!
//! Each grid row is an independent sequence over its `W'` columns. A forward
//! and a backward LSTM run over every row and their hidden states are
//! concatenated, giving `2E` features per cell. The grid is then flattened
//! row-major into the annotation sequence the decoder attends over.

use crate::error::{shape_err, Error, Result};
use crate::feature_extractor::{FeatureGrid, STRIDE};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamSpec};

/// Grid rows for 64-pixel-high inputs; one learned initial state per row.
pub const GRID_ROWS: usize = 4;

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

pub fn param_specs(input: usize, hidden: usize) -> Vec<ParamSpec> {
    let gates = 4 * hidden;
    DIRECTIONS
        .iter()
        .flat_map(|dir| {
            [
                ParamSpec::matrix(format!("enc.{dir}.w_ih"), input, gates),
                ParamSpec::matrix(format!("enc.{dir}.w_hh"), hidden, gates),
                ParamSpec::new(format!("enc.{dir}.bias"), &[gates], Init::ForgetBias { hidden }),
                ParamSpec::zeros(format!("enc.{dir}.h0"), &[GRID_ROWS, hidden]),
                ParamSpec::zeros(format!("enc.{dir}.c0"), &[GRID_ROWS, hidden]),
            ]
        })
        .collect()
}

/// One direction's LSTM weights. Gate blocks are ordered input, forget,
/// cell candidate, output.
#[derive(Clone, Copy)]
pub struct LstmParams<'t, T: Scalar = f32> {
    pub w_ih: Var<'t, T>,
    pub w_hh: Var<'t, T>,
    pub bias: Var<'t, T>,
    pub h0: Var<'t, T>,
    pub c0: Var<'t, T>,
}

impl<'t, T: Scalar> LstmParams<'t, T> {
    pub fn bind(params: &Bound<'t, T>, direction: &str) -> Result<Self> {
        let get = |n: &str| params.get(&format!("enc.{direction}.{n}"));
        Ok(Self {
            w_ih: get("w_ih")?,
            w_hh: get("w_hh")?,
            bias: get("bias")?,
            h0: get("h0")?,
            c0: get("c0")?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')` with sigmoid gates i, f, o and tanh
/// candidate g. `x_proj` is `x·W_ih` when already computed for the step.
fn lstm_step_projected<'t, T: Scalar>(
    x_proj: Var<'t, T>,
    h: Var<'t, T>,
    c: Var<'t, T>,
    p: &LstmParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let e = p.hidden();
    let gates = x_proj.add(h.matmul(p.w_hh)?)?.add(p.bias)?;
    let i = gates.slice(1, 0, e)?.sigmoid()?;
    let f = gates.slice(1, e, e)?.sigmoid()?;
    let g = gates.slice(1, 2 * e, e)?.tanh()?;
    let o = gates.slice(1, 3 * e, e)?.sigmoid()?;
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh()?)?;
    Ok((h_next, c_next))
}

/// Single LSTM step on `x: [N,D]`, `h, c: [N,E]`.
pub fn lstm_cell_step<'t, T: Scalar>(
    x: Var<'t, T>,
    h: Var<'t, T>,
    c: Var<'t, T>,
    p: &LstmParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (xs, hs, cs) = (x.shape(), h.shape(), c.shape());
    let e = p.hidden();
    if xs.len() != 2 || hs != [xs[0], e] || cs != hs || p.w_ih.shape()[0] != xs[1] {
        return Err(shape_err(
            "lstm_cell_step",
            format!("x {xs:?}, h {hs:?}, c {cs:?}, w_ih {:?}", p.w_ih.shape()),
        ));
    }
    lstm_step_projected(x.matmul(p.w_ih)?, h, c, p)
}

/// Re-encoded grid, flattened row-major to `[N, H'·W', 2E]`.
pub struct AnnotationGrid<'t, T: Scalar = f32> {
    pub values: Var<'t, T>,
    pub rows: usize,
    pub cols: usize,
    /// Per batch element, per flattened position: true when the position's
    /// column lies inside the source image.
    pub mask: Vec<bool>,
}

impl<'t, T: Scalar> AnnotationGrid<'t, T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of flattened source positions `S = H'·W'`.
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    /// Grid cell of a flattened index.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Unflattened view `[N, H', W', 2E]`.
    pub fn grid(&self) -> Result<Var<'t, T>> {
        self.values.reshape(&[self.batch(), self.rows, self.cols, self.features()])
    }
}

/// Grid columns covered by a source image of `width` pixels.
pub fn valid_columns(width: usize, cols: usize) -> usize {
    width.div_ceil(STRIDE).clamp(1, cols)
}

/// Runs both LSTM directions over every grid row.
pub fn encode_rows<'t, T: Scalar>(
    tape: &'t Tape<T>,
    grid: &FeatureGrid<'t, T>,
    params: &Bound<'t, T>,
) -> Result<AnnotationGrid<'t, T>> {
    let (n, d, rows, cols) = grid.dims();
    if rows > GRID_ROWS {
        return Err(shape_err("encode_rows", format!("{rows} grid rows, at most {GRID_ROWS} supported")));
    }
    let seqs = n * rows;
    // [N,D,H',W'] -> [N,H',W',D] -> [N·H'·W', D]
    let x = grid.values.transpose(1, 2)?.transpose(2, 3)?.reshape(&[seqs * cols, d])?;
    let row_ids: Vec<usize> = (0..seqs).map(|s| s % rows).collect();

    let mut halves = Vec::with_capacity(2);
    for dir in DIRECTIONS {
        let p = LstmParams::bind(params, dir)?;
        let e = p.hidden();
        let proj = x.matmul(p.w_ih)?.reshape(&[seqs, cols, 4 * e])?;
        let mut h = tape.embedding(p.h0, &row_ids)?;
        let mut c = tape.embedding(p.c0, &row_ids)?;
        let mut outs = vec![None; cols];
        let order: Vec<usize> = if dir == "fwd" { (0..cols).collect() } else { (0..cols).rev().collect() };
        for col in order {
            let xp = proj.slice(1, col, 1)?.reshape(&[seqs, 4 * e])?;
            (h, c) = lstm_step_projected(xp, h, c, &p)?;
            outs[col] = Some(h.reshape(&[seqs, 1, e])?);
        }
        let outs: Vec<_> = outs.into_iter().map(Option::unwrap).collect();
        halves.push(tape.concat(&outs, 1)?);
    }
    let e2 = halves[0].shape()[2] * 2;
    let values = tape.concat(&halves, 2)?.reshape(&[n, rows * cols, e2])?;

    let mut mask = Vec::with_capacity(n * rows * cols);
    for &w in &grid.source_widths {
        let valid = valid_columns(w, cols);
        for _ in 0..rows {
            mask.extend((0..cols).map(|c| c < valid));
        }
    }
    Ok(AnnotationGrid { values, rows, cols, mask })
}

/// Mean annotation over each batch element's valid positions, `[N, 2E]`.
pub fn final_states<'t, T: Scalar>(tape: &'t Tape<T>, ann: &AnnotationGrid<'t, T>) -> Result<Var<'t, T>> {
    let (n, s) = (ann.batch(), ann.positions());
    let mut weights = vec![T::zero(); n * s];
    for b in 0..n {
        let valid = &ann.mask[b * s..(b + 1) * s];
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Data(format!("batch element {b} has no valid annotation positions")));
        }
        let w = T::one() / T::from_usize(count).unwrap();
        for (dst, &v) in weights[b * s..(b + 1) * s].iter_mut().zip(valid) {
            if v {
                *dst = w;
            }
        }
    }
    let weights = tape.constant(Tensor::from_parts(vec![n, 1, s], weights));
    let e2 = ann.features();
    weights.matmul(ann.values)?.reshape(&[n, e2])
}
