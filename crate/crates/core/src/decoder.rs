//! Two-layer GRU decoder with bilinear attention over the annotation grid.

use std::fmt;
use std::str::FromStr;

use crate::corpus::Vocabulary;
use crate::encoder::{final_states, AnnotationGrid};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamSpec};

pub const DEFAULT_MAX_LEN: usize = 128;

/// Map from raw attention scores to combination weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMechanism {
    /// Normalized over the valid source positions.
    Softmax,
    /// Independent logistic weight per position.
    Sigmoid,
    /// Raw scores used directly.
    None,
}

impl AttentionMechanism {
    pub const ALL: [AttentionMechanism; 3] = [Self::Softmax, Self::Sigmoid, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
            Self::None => "none",
        }
    }
}

impl fmt::Display for AttentionMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mechanism `{s}` (softmax|sigmoid|none)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub embedding: usize,
    pub attention: AttentionMechanism,
    /// Feed the previous combined output back in alongside the token embedding.
    pub input_feeding: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.embedding == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }

    fn step_input(&self) -> usize {
        self.embedding + if self.input_feeding { self.hidden } else { 0 }
    }

    /// Parameters for attending over annotations of width `annotation`.
    pub fn param_specs(&self, annotation: usize) -> Vec<ParamSpec> {
        let (h, v) = (self.hidden, Vocabulary::SIZE);
        let mut specs = vec![ParamSpec::matrix("dec.embedding", v, self.embedding)];
        for l in 1..=self.layers {
            let input = if l == 1 { self.step_input() } else { h };
            specs.extend([
                ParamSpec::matrix(format!("dec.init{l}.weight"), annotation, h),
                ParamSpec::zeros(format!("dec.init{l}.bias"), &[h]),
                ParamSpec::matrix(format!("dec.gru{l}.w_ih"), input, 3 * h),
                ParamSpec::matrix(format!("dec.gru{l}.w_hh_zr"), h, 2 * h),
                ParamSpec::matrix(format!("dec.gru{l}.w_hh_n"), h, h),
                ParamSpec::zeros(format!("dec.gru{l}.bias"), &[3 * h]),
            ]);
        }
        specs.extend([
            ParamSpec::matrix("attn.w_score", annotation, h),
            ParamSpec::matrix("out.w_comb", h + annotation, h),
            ParamSpec::zeros("out.b_comb", &[h]),
            ParamSpec::matrix("out.w_out", h, v),
            ParamSpec::zeros("out.b_out", &[v]),
        ]);
        specs
    }
}

/// GRU weights. Input projection columns are ordered update, reset,
/// candidate; the bias follows the same layout.
#[derive(Clone, Copy)]
pub struct GruParams<'t, T: Scalar = f32> {
    pub w_ih: Var<'t, T>,
    pub w_hh_zr: Var<'t, T>,
    pub w_hh_n: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> GruParams<'t, T> {
    pub fn hidden(&self) -> usize {
        self.w_hh_n.shape()[0]
    }
}

/// `z, r = σ(x·W_zr + h·U_zr + b_zr)`, `n = tanh(x·W_n + (r⊙h)·U_n + b_n)`,
/// `h' = (1−z)⊙h + z⊙n`.
pub fn gru_cell_step<'t, T: Scalar>(x: Var<'t, T>, h: Var<'t, T>, p: &GruParams<'t, T>) -> Result<Var<'t, T>> {
    let (xs, hs) = (x.shape(), h.shape());
    let hid = p.hidden();
    if xs.len() != 2 || hs != [xs[0], hid] || p.w_ih.shape() != [xs[1], 3 * hid] {
        return Err(shape_err(
            "gru_cell_step",
            format!("x {xs:?}, h {hs:?}, w_ih {:?}", p.w_ih.shape()),
        ));
    }
    let xp = x.matmul(p.w_ih)?.add(p.bias)?;
    let zr = xp.slice(1, 0, 2 * hid)?.add(h.matmul(p.w_hh_zr)?)?.sigmoid()?;
    let z = zr.slice(1, 0, hid)?;
    let r = zr.slice(1, hid, hid)?;
    let n = xp.slice(1, 2 * hid, hid)?.add(r.mul(h)?.matmul(p.w_hh_n)?)?.tanh()?;
    h.add(z.mul(n.sub(h)?)?)
}

/// `score[b,i] = annotation[b,i] · (W_score · state[b])`, shape `[N,S]`.
pub fn attention_scores<'t, T: Scalar>(
    annotations: Var<'t, T>,
    state_top: Var<'t, T>,
    w_score: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (a, s, w) = (annotations.shape(), state_top.shape(), w_score.shape());
    if a.len() != 3 || s.len() != 2 || s[0] != a[0] || w != [a[2], s[1]] {
        return Err(shape_err("attention_scores", format!("annotations {a:?}, state {s:?}, w_score {w:?}")));
    }
    let query = state_top.matmul(w_score.transpose(0, 1)?)?.reshape(&[a[0], a[2], 1])?;
    annotations.matmul(query)?.reshape(&[a[0], a[1]])
}

/// Combination weights under `mechanism`; positions where `mask` is false
/// get weight exactly zero.
pub fn attention_weights<'t, T: Scalar>(
    scores: Var<'t, T>,
    mask: &[bool],
    mechanism: AttentionMechanism,
) -> Result<Var<'t, T>> {
    let shape = scores.shape();
    if mask.len() != shape.iter().product::<usize>() {
        return Err(shape_err("attention_weights", format!("mask of {} for {shape:?}", mask.len())));
    }
    let keep = || {
        let m = Tensor::from_fn(shape.clone(), |i| if mask[i] { T::one() } else { T::zero() });
        scores.tape().constant(m)
    };
    match mechanism {
        AttentionMechanism::Softmax => scores.softmax(Some(mask)),
        AttentionMechanism::Sigmoid => scores.sigmoid()?.mul(keep()),
        AttentionMechanism::None => scores.mul(keep()),
    }
}

/// `c[b] = Σ_i weight[b,i] · annotation[b,i]`, shape `[N,2E]`.
pub fn context_vector<'t, T: Scalar>(weights: Var<'t, T>, annotations: Var<'t, T>) -> Result<Var<'t, T>> {
    let (w, a) = (weights.shape(), annotations.shape());
    if a.len() != 3 || w != [a[0], a[1]] {
        return Err(shape_err("context_vector", format!("weights {w:?}, annotations {a:?}")));
    }
    weights.reshape(&[a[0], 1, a[1]])?.matmul(annotations)?.reshape(&[a[0], a[2]])
}

/// Per-layer hidden states, bottom layer first.
#[derive(Clone)]
pub struct DecoderState<'t, T: Scalar = f32> {
    pub layers: Vec<Var<'t, T>>,
    /// Previous combined output, present only with input feeding.
    pub feed: Option<Var<'t, T>>,
}

pub struct StepOutput<'t, T: Scalar = f32> {
    /// Unnormalized next-token scores `[N, V]`.
    pub logits: Var<'t, T>,
    pub state: DecoderState<'t, T>,
    /// Attention weights `[N, S]` used to form this step's context.
    pub weights: Var<'t, T>,
}

/// Decoder parameters bound to one tape.
pub struct Decoder<'t, T: Scalar = f32> {
    cfg: DecoderConfig,
    embedding: Var<'t, T>,
    init: Vec<(Var<'t, T>, Var<'t, T>)>,
    gru: Vec<GruParams<'t, T>>,
    w_score: Var<'t, T>,
    w_comb: Var<'t, T>,
    b_comb: Var<'t, T>,
    w_out: Var<'t, T>,
    b_out: Var<'t, T>,
}

impl<'t, T: Scalar> Decoder<'t, T> {
    pub fn bind(params: &Bound<'t, T>, cfg: &DecoderConfig) -> Result<Self> {
        let mut init = Vec::with_capacity(cfg.layers);
        let mut gru = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            init.push((params.get(&format!("dec.init{l}.weight"))?, params.get(&format!("dec.init{l}.bias"))?));
            gru.push(GruParams {
                w_ih: params.get(&format!("dec.gru{l}.w_ih"))?,
                w_hh_zr: params.get(&format!("dec.gru{l}.w_hh_zr"))?,
                w_hh_n: params.get(&format!("dec.gru{l}.w_hh_n"))?,
                bias: params.get(&format!("dec.gru{l}.bias"))?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embedding: params.get("dec.embedding")?,
            init,
            gru,
            w_score: params.get("attn.w_score")?,
            w_comb: params.get("out.w_comb")?,
            b_comb: params.get("out.b_comb")?,
            w_out: params.get("out.w_out")?,
            b_out: params.get("out.b_out")?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Each layer starts at `tanh(mean_annotation · W_init + b_init)`.
    pub fn initial_state(&self, tape: &'t Tape<T>, ann: &AnnotationGrid<'t, T>) -> Result<DecoderState<'t, T>> {
        let mean = final_states(tape, ann)?;
        let layers = self
            .init
            .iter()
            .map(|&(w, b)| mean.matmul(w)?.add(b)?.tanh())
            .collect::<Result<Vec<_>>>()?;
        let feed = if self.cfg.input_feeding {
            Some(tape.constant(Tensor::zeros(vec![ann.batch(), self.cfg.hidden])))
        } else {
            None
        };
        Ok(DecoderState { layers, feed })
    }

    /// One decoding step from the previous token of every batch row.
    pub fn step(
        &self,
        tape: &'t Tape<T>,
        prev: &[usize],
        state: &DecoderState<'t, T>,
        ann: &AnnotationGrid<'t, T>,
    ) -> Result<StepOutput<'t, T>> {
        if prev.len() != ann.batch() || state.layers.len() != self.gru.len() {
            return Err(shape_err(
                "decode_step",
                format!("{} tokens, {} layers for batch {}", prev.len(), state.layers.len(), ann.batch()),
            ));
        }
        let mut x = tape.embedding(self.embedding, prev)?;
        if let Some(feed) = state.feed {
            x = tape.concat(&[x, feed], 1)?;
        }
        let mut layers = Vec::with_capacity(self.gru.len());
        for (p, &h) in self.gru.iter().zip(&state.layers) {
            x = gru_cell_step(x, h, p)?;
            layers.push(x);
        }
        let scores = attention_scores(ann.values, x, self.w_score)?;
        let weights = attention_weights(scores, &ann.mask, self.cfg.attention)?;
        let context = context_vector(weights, ann.values)?;
        let combined = tape.concat(&[x, context], 1)?.matmul(self.w_comb)?.add(self.b_comb)?.tanh()?;
        let logits = combined.matmul(self.w_out)?.add(self.b_out)?;
        let feed = state.feed.map(|_| combined);
        Ok(StepOutput { logits, state: DecoderState { layers, feed }, weights })
    }

    /// Next-token distribution, new state and attention weights.
    pub fn decode_step(
        &self,
        tape: &'t Tape<T>,
        prev: &[usize],
        state: &DecoderState<'t, T>,
        ann: &AnnotationGrid<'t, T>,
    ) -> Result<(Var<'t, T>, DecoderState<'t, T>, Var<'t, T>)> {
        let out = self.step(tape, prev, state, ann)?;
        Ok((out.logits.softmax(None)?, out.state, out.weights))
    }

    /// Teacher-forced logits `[N, T, V]` for `inputs`, a row-major `[N, T]`
    /// matrix of previous tokens.
    pub fn unroll(&self, tape: &'t Tape<T>, inputs: &[usize], steps: usize, ann: &AnnotationGrid<'t, T>) -> Result<Var<'t, T>> {
        let n = ann.batch();
        if steps == 0 || inputs.len() != n * steps {
            return Err(shape_err("unroll", format!("{} inputs for {n}×{steps}", inputs.len())));
        }
        let mut state = self.initial_state(tape, ann)?;
        let mut logits = Vec::with_capacity(steps);
        let mut prev = vec![0; n];
        for t in 0..steps {
            for (b, p) in prev.iter_mut().enumerate() {
                *p = inputs[b * steps + t];
            }
            let out = self.step(tape, &prev, &state, ann)?;
            logits.push(out.logits.reshape(&[n, 1, Vocabulary::SIZE])?);
            state = out.state;
        }
        tape.concat(&logits, 1)
    }
}

/// Attention weights of every emitted step over the flattened source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub rows: Vec<Vec<f32>>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl AttentionTrace {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn positions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Weight of step `t` at grid cell `(row, col)`.
    pub fn at(&self, t: usize, row: usize, col: usize) -> f32 {
        self.rows[t][row * self.grid_cols + col]
    }

    /// Step `t` summed over grid rows, one value per source column.
    pub fn column_profile(&self, t: usize) -> Vec<f32> {
        (0..self.grid_cols)
            .map(|c| (0..self.grid_rows).map(|r| self.at(t, r, c)).sum())
            .collect()
    }
}

/// Decoded token ids (without EOS) and the attention trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub trace: AttentionTrace,
}

/// Index of the largest emittable logit, lowest id on ties. PAD and SOS are
/// never emitted.
fn argmax_token<T: Scalar>(row: &[T]) -> usize {
    let mut best = Vocabulary::EOS;
    for (id, &v) in row.iter().enumerate().skip(Vocabulary::EOS) {
        if v > row[best] {
            best = id;
        }
    }
    best
}

/// Greedy decoding of every batch row from SOS until EOS or `max_len`
/// emitted characters.
pub fn greedy_decode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    decoder: &Decoder<'t, T>,
    ann: &AnnotationGrid<'t, T>,
    max_len: usize,
) -> Result<Vec<Decoded>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let n = ann.batch();
    let s = ann.positions();
    let mut state = decoder.initial_state(tape, ann)?;
    let mut prev = vec![Vocabulary::SOS; n];
    let mut done = vec![false; n];
    let mut out: Vec<Decoded> = (0..n)
        .map(|_| Decoded {
            tokens: Vec::new(),
            trace: AttentionTrace { rows: Vec::new(), grid_rows: ann.rows, grid_cols: ann.cols },
        })
        .collect();
    while done.iter().any(|d| !d) {
        let step = decoder.step(tape, &prev, &state, ann)?;
        let logits = step.logits.value();
        let weights = step.weights.value();
        for b in 0..n {
            if done[b] {
                continue;
            }
            let tok = argmax_token(&logits.data()[b * Vocabulary::SIZE..(b + 1) * Vocabulary::SIZE]);
            let row = weights.data()[b * s..(b + 1) * s].iter().map(|v| v.to_f64_lossy() as f32).collect();
            out[b].trace.rows.push(row);
            if tok == Vocabulary::EOS {
                done[b] = true;
            } else {
                out[b].tokens.push(tok);
                done[b] = out[b].tokens.len() >= max_len;
            }
            prev[b] = tok;
        }
        state = step.state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, Coords};
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigm(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
    }

    fn small_cfg(attention: AttentionMechanism) -> DecoderConfig {
        DecoderConfig { hidden: 6, layers: 2, embedding: 5, attention, input_feeding: false }
    }

    fn grid<'t>(tape: &'t Tape<f64>, values: Tensor<f64>, rows: usize, cols: usize, mask: Vec<bool>) -> AnnotationGrid<'t, f64> {
        AnnotationGrid { values: tape.constant(values), rows, cols, mask }
    }

    #[test]
    fn mechanism_names_round_trip() {
        for m in AttentionMechanism::ALL {
            assert_eq!(m.to_string().parse::<AttentionMechanism>().unwrap(), m);
        }
        assert!("bernoulli".parse::<AttentionMechanism>().is_err());
    }

    #[test]
    fn gru_zero_params_keep_zero_state() {
        let tape = Tape::<f64>::new();
        let z = |s: &[usize]| tape.constant(Tensor::zeros(s.to_vec()));
        let p = GruParams { w_ih: z(&[3, 6]), w_hh_zr: z(&[2, 4]), w_hh_n: z(&[2, 2]), bias: z(&[6]) };
        let h = gru_cell_step(tape.constant(rand_tensor(&[1, 3], 1, 1.0)), z(&[1, 2]), &p).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_closed_update_gate_copies_state() {
        let tape = Tape::<f64>::new();
        let bias: Vec<f64> = (0..6).map(|i| if i < 2 { -100.0 } else { 0.3 }).collect();
        let p = GruParams {
            w_ih: tape.constant(rand_tensor(&[3, 6], 2, 1.0)),
            w_hh_zr: tape.constant(rand_tensor(&[2, 4], 3, 1.0)),
            w_hh_n: tape.constant(rand_tensor(&[2, 2], 4, 1.0)),
            bias: tape.constant(Tensor::vector(&bias)),
        };
        let h0 = rand_tensor(&[1, 2], 5, 1.0);
        let h = gru_cell_step(tape.constant(rand_tensor(&[1, 3], 6, 1.0)), tape.constant(h0.clone()), &p).unwrap();
        assert!(h.value().max_abs_diff(&h0) < 1e-12);
    }

    #[test]
    fn gru_scalar_matches_hand_evaluation() {
        let (x, h) = (0.7, -0.2);
        let (wz, wr, wn) = (0.4, -0.8, 1.1);
        let (uz, ur, un) = (0.6, 0.3, -0.9);
        let (bz, br, bn) = (0.05, -0.1, 0.2);
        let z = sigm(wz * x + uz * h + bz);
        let r = sigm(wr * x + ur * h + br);
        let n = (wn * x + un * (r * h) + bn).tanh();
        let want = (1.0 - z) * h + z * n;

        let tape = Tape::<f64>::new();
        let m = |v: &[f64]| tape.constant(Tensor::vector(v).reshape(vec![1, v.len()]).unwrap());
        let p = GruParams {
            w_ih: m(&[wz, wr, wn]),
            w_hh_zr: m(&[uz, ur]),
            w_hh_n: m(&[un]),
            bias: tape.constant(Tensor::vector(&[bz, br, bn])),
        };
        let got = gru_cell_step(m(&[x]), m(&[h]), &p).unwrap();
        assert!((got.value().item() - want).abs() < 1e-15);
    }

    #[test]
    fn gru_rejects_mismatched_state() {
        let tape = Tape::<f64>::new();
        let z = |s: &[usize]| tape.constant(Tensor::zeros(s.to_vec()));
        let p = GruParams { w_ih: z(&[3, 6]), w_hh_zr: z(&[2, 4]), w_hh_n: z(&[2, 2]), bias: z(&[6]) };
        let err = gru_cell_step(z(&[1, 3]), z(&[1, 3]), &p).unwrap_err();
        assert!(err.to_string().contains("gru_cell_step"));
    }

    #[test]
    fn score_examples() {
        let tape = Tape::<f64>::new();
        let ann = tape.constant(rand_tensor(&[2, 3, 4], 1, 1.0));
        let state = tape.constant(rand_tensor(&[2, 5], 2, 1.0));
        let zero = attention_scores(ann, state, tape.constant(Tensor::zeros(vec![4, 5]))).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));

        // Loop oracle: score = Σ_jk a_j W_jk s_k.
        let a = rand_tensor(&[1, 1, 4], 3, 1.0);
        let s = rand_tensor(&[1, 5], 4, 1.0);
        let w = rand_tensor(&[4, 5], 5, 1.0);
        let mut want = 0.0;
        for j in 0..4 {
            for k in 0..5 {
                want += a.data()[j] * w.at(&[j, k]) * s.data()[k];
            }
        }
        let got = attention_scores(tape.constant(a), tape.constant(s.clone()), tape.constant(w.clone())).unwrap();
        assert!((got.value().item() - want).abs() < 1e-14);

        // An annotation orthogonal to W·s scores zero.
        let q: Vec<f64> = (0..4).map(|j| (0..5).map(|k| w.at(&[j, k]) * s.data()[k]).sum()).collect();
        let orth = Tensor::vector(&[q[1], -q[0], 0.0, 0.0]).reshape(vec![1, 1, 4]).unwrap();
        let got = attention_scores(tape.constant(orth), tape.constant(s), tape.constant(w)).unwrap();
        assert!(got.value().item().abs() < 1e-14);
    }

    #[test]
    fn weight_examples() {
        let tape = Tape::<f64>::new();
        let c = |v: &[f64]| tape.constant(Tensor::vector(v).reshape(vec![1, v.len()]).unwrap());
        let w = attention_weights(c(&[0.3; 4]), &[true; 4], AttentionMechanism::Softmax).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let w = attention_weights(c(&[0.0, 0.0]), &[true; 2], AttentionMechanism::Sigmoid).unwrap();
        assert_eq!(w.value().data(), &[0.5, 0.5]);
        let w = attention_weights(c(&[1.5, -2.0]), &[true; 2], AttentionMechanism::None).unwrap();
        assert_eq!(w.value().data(), &[1.5, -2.0]);

        let mask = [true, false, true];
        for m in AttentionMechanism::ALL {
            let w = attention_weights(c(&[0.4, 2.0, -1.0]), &mask, m).unwrap();
            assert_eq!(w.value().data()[1], 0.0, "{m}");
        }
    }

    #[test]
    fn shifting_scores_separates_mechanisms() {
        let tape = Tape::<f64>::new();
        let scores = rand_tensor(&[2, 5], 7, 2.0);
        let shifted = scores.map(|v| v + 1.3);
        let mask = vec![true, true, true, false, true, true, false, true, true, true];
        let weights = |t: &Tensor<f64>, m| attention_weights(tape.constant(t.clone()), &mask, m).unwrap().value();
        let soft = weights(&scores, AttentionMechanism::Softmax);
        assert!(soft.max_abs_diff(&weights(&shifted, AttentionMechanism::Softmax)) < 1e-12);
        for row in soft.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for m in [AttentionMechanism::Sigmoid, AttentionMechanism::None] {
            assert!(weights(&scores, m).max_abs_diff(&weights(&shifted, m)) > 0.1, "{m}");
        }
        let sig = weights(&scores, AttentionMechanism::Sigmoid);
        for (v, &keep) in sig.data().iter().zip(&mask) {
            assert!(if keep { *v > 0.0 && *v < 1.0 } else { *v == 0.0 });
        }
    }

    #[test]
    fn context_examples() {
        let tape = Tape::<f64>::new();
        let ann = rand_tensor(&[1, 3, 4], 8, 1.0);
        let onehot = Tensor::vector(&[0.0, 1.0, 0.0]).reshape(vec![1, 3]).unwrap();
        let c = context_vector(tape.constant(onehot), tape.constant(ann.clone())).unwrap();
        assert_eq!(c.value().data(), &ann.data()[4..8]);

        let uniform = Tensor::full(vec![1, 3], 1.0 / 3.0);
        let c = context_vector(tape.constant(uniform), tape.constant(ann.clone())).unwrap();
        for f in 0..4 {
            let mean = (0..3).map(|i| ann.at(&[0, i, f])).sum::<f64>() / 3.0;
            assert!((c.value().data()[f] - mean).abs() < 1e-15);
        }

        // S=3, 2E=4, loop oracle.
        let w = rand_tensor(&[2, 3], 9, 1.0);
        let a = rand_tensor(&[2, 3, 4], 10, 1.0);
        let c = context_vector(tape.constant(w.clone()), tape.constant(a.clone())).unwrap().value();
        for b in 0..2 {
            for f in 0..4 {
                let want: f64 = (0..3).map(|i| w.at(&[b, i]) * a.at(&[b, i, f])).sum();
                assert!((c.at(&[b, f]) - want).abs() < 1e-15);
            }
        }
    }

    fn decoder_fixture(attention: AttentionMechanism, seed: u64) -> (DecoderConfig, ParamSet<f64>) {
        let cfg = small_cfg(attention);
        let params = ParamSet::init(&cfg.param_specs(4), seed);
        (cfg, params)
    }

    #[test]
    fn decode_step_distribution_and_determinism() {
        for m in AttentionMechanism::ALL {
            let (cfg, params) = decoder_fixture(m, 1);
            let run = || {
                let tape = Tape::new();
                let bound = params.bind(&tape, false);
                let dec = Decoder::bind(&bound, &cfg).unwrap();
                let ann = grid(&tape, rand_tensor(&[2, 6, 4], 2, 1.0), 2, 3, vec![true; 12]);
                let state = dec.initial_state(&tape, &ann).unwrap();
                let (dist, st, w) = dec.decode_step(&tape, &[Vocabulary::SOS, 10], &state, &ann).unwrap();
                for row in dist.value().data().chunks(Vocabulary::SIZE) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                ((*dist.value()).clone(), (*st.layers[1].value()).clone(), (*w.value()).clone())
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn single_position_softmax_context_is_that_annotation() {
        let (cfg, params) = decoder_fixture(AttentionMechanism::Softmax, 3);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let dec = Decoder::bind(&bound, &cfg).unwrap();
        let ann = grid(&tape, rand_tensor(&[1, 1, 4], 4, 5.0), 1, 1, vec![true]);
        let state = dec.initial_state(&tape, &ann).unwrap();
        let out = dec.step(&tape, &[Vocabulary::SOS], &state, &ann).unwrap();
        assert_eq!(out.weights.value().data(), &[1.0]);
        let c = context_vector(out.weights, ann.values).unwrap();
        assert_eq!(c.value().data(), ann.values.value().data());
    }

    #[test]
    fn decode_step_rejects_invalid_token() {
        let (cfg, params) = decoder_fixture(AttentionMechanism::Softmax, 3);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let dec = Decoder::bind(&bound, &cfg).unwrap();
        let ann = grid(&tape, rand_tensor(&[1, 2, 4], 4, 1.0), 1, 2, vec![true; 2]);
        let state = dec.initial_state(&tape, &ann).unwrap();
        assert!(matches!(
            dec.step(&tape, &[Vocabulary::SIZE], &state, &ann),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    /// Sets the output bias so that `favoured` dominates every step.
    fn biased_params(favoured: usize) -> (DecoderConfig, ParamSet<f64>) {
        let (cfg, mut params) = decoder_fixture(AttentionMechanism::Softmax, 5);
        let bias = Tensor::from_fn(vec![Vocabulary::SIZE], |i| if i == favoured { 100.0 } else { 0.0 });
        params.insert("out.b_out", bias);
        (cfg, params)
    }

    #[test]
    fn greedy_stops_at_eos() {
        let (cfg, params) = biased_params(Vocabulary::EOS);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let dec = Decoder::bind(&bound, &cfg).unwrap();
        let ann = grid(&tape, rand_tensor(&[1, 4, 4], 6, 1.0), 2, 2, vec![true; 4]);
        let out = greedy_decode(&tape, &dec, &ann, 10).unwrap();
        assert!(out[0].tokens.is_empty());
        assert_eq!(out[0].trace.steps(), 1);
    }

    #[test]
    fn greedy_respects_cap_and_skips_pad_sos() {
        for favoured in [20, Vocabulary::PAD, Vocabulary::SOS] {
            let (cfg, params) = biased_params(favoured);
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let dec = Decoder::bind(&bound, &cfg).unwrap();
            let ann = grid(&tape, rand_tensor(&[2, 4, 4], 6, 1.0), 2, 2, vec![true; 8]);
            for d in greedy_decode(&tape, &dec, &ann, 3).unwrap() {
                assert_eq!(d.tokens.len(), 3);
                assert_eq!(d.trace.steps(), 3);
                assert!(d.tokens.iter().all(|&t| t > Vocabulary::EOS));
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        let mut row = vec![0.0f64; Vocabulary::SIZE];
        row[7] = 2.0;
        row[5] = 2.0;
        row[0] = 9.0;
        assert_eq!(argmax_token(&row), 5);
        assert_eq!(argmax_token(&vec![0.0f64; Vocabulary::SIZE]), Vocabulary::EOS);
    }

    #[test]
    fn unroll_matches_stepwise_logits() {
        let (cfg, params) = decoder_fixture(AttentionMechanism::Sigmoid, 8);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let dec = Decoder::bind(&bound, &cfg).unwrap();
        let ann = grid(&tape, rand_tensor(&[2, 4, 4], 9, 1.0), 1, 4, vec![true, true, true, false, true, true, true, true]);
        let inputs = [Vocabulary::SOS, 12, 13, Vocabulary::SOS, 40, 41];
        let all = dec.unroll(&tape, &inputs, 3, &ann).unwrap().value();
        let mut state = dec.initial_state(&tape, &ann).unwrap();
        for t in 0..3 {
            let out = dec.step(&tape, &[inputs[t], inputs[3 + t]], &state, &ann).unwrap();
            let v = out.logits.value();
            for b in 0..2 {
                for k in 0..Vocabulary::SIZE {
                    assert_eq!(all.at(&[b, t, k]), v.at(&[b, k]));
                }
            }
            state = out.state;
        }
    }

    #[test]
    fn input_feeding_changes_second_step_only() {
        let mut cfg = small_cfg(AttentionMechanism::Softmax);
        cfg.input_feeding = true;
        let params: ParamSet<f64> = ParamSet::init(&cfg.param_specs(4), 2);
        assert_eq!(params.get("dec.gru1.w_ih").unwrap().shape(), &[11, 18]);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let dec = Decoder::bind(&bound, &cfg).unwrap();
        let ann = grid(&tape, rand_tensor(&[1, 3, 4], 3, 1.0), 1, 3, vec![true; 3]);
        let logits = dec.unroll(&tape, &[Vocabulary::SOS, 10], 2, &ann).unwrap();
        assert_eq!(logits.shape(), vec![1, 2, Vocabulary::SIZE]);
    }

    fn decode_step_grad_err(attention: AttentionMechanism) -> f64 {
        // Desk-scale sizes: hidden 64, embedding 300, annotations 64 wide.
        let cfg = DecoderConfig { hidden: 64, layers: 2, embedding: 300, attention, input_feeding: false };
        let specs = cfg.param_specs(64);
        let params: ParamSet<f64> = ParamSet::init(&specs, 21);
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let mask = vec![true, true, true, true, true, false, true, true, true, true, true, true];
        let mut inputs = vec![rand_tensor(&[2, 6, 64], 22, 0.5)];
        inputs.extend(names.iter().map(|n| params.get(n).unwrap().map(|v| v + 0.01)));
        let probe = rand_tensor(&[2, Vocabulary::SIZE], 23, 1.0);
        let probe_w = rand_tensor(&[2, 6], 24, 1.0);
        finite_diff_check_many(
            |tape, v| {
                let bound = Bound::from_vars(&names, &v[1..]);
                let dec = Decoder::bind(&bound, &cfg)?;
                let ann = AnnotationGrid { values: v[0], rows: 2, cols: 3, mask: mask.clone() };
                let state = dec.initial_state(tape, &ann)?;
                let (dist, _, w) = dec.decode_step(tape, &[Vocabulary::SOS, 30], &state, &ann)?;
                let a = dist.mul(tape.constant(probe.clone()))?.sum_all()?;
                let b = w.mul(tape.constant(probe_w.clone()))?.sum_all()?;
                a.add(b)
            },
            &inputs,
            1e-5,
            Coords::Sample { per_input: 12, seed: 3 },
        )
        .unwrap()
    }

    #[test]
    fn decode_step_gradient_check_per_mechanism() {
        for m in AttentionMechanism::ALL {
            let err = decode_step_grad_err(m);
            assert!(err < 1e-4, "{m}: {err}");
        }
    }
}
