//! Recurrent decoder with look-back attention.
//!
//! At every prediction step the previous hidden state scores each encoded
//! time slot by Frobenius inner product; the softmax of those scores
//! weights the slots into an attention state `Z`. A GRU cell whose gate
//! transforms are diffusion convolutions consumes `[prev_output || Z]`
//! together with the hidden state, and a two-layer head maps the new state
//! to the prediction that is fed back at the next step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::graph::{diffusion_conv, GraphVars};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `Z = sum_j alpha_j S^j` with `alpha = softmax_j <H_prev, S^j>_F`.
///
/// Unbatched: `h_prev: [N, D]`, `s: [P, N, D]` give `Z: [N, D]` and
/// `alpha: [1, P]`. Batched: `[B, N, D]` and `[B, P, N, D]` give
/// `[B, N, D]` and `[B, P]`.
pub fn lookback_attention(tape: &mut Tape, h_prev: Var, s: Var) -> Result<(Var, Var)> {
    let s_shape = tape.value(s).shape().to_vec();
    let h_shape = tape.value(h_prev).shape().to_vec();
    let mismatch = || Error::dim("lookback_attention", format!("state {h_shape:?} vs sequence {s_shape:?}"));
    match (s_shape.len(), h_shape.len()) {
        (3, 2) if h_shape[..] == s_shape[1..] => {
            let (p, n, d) = (s_shape[0], s_shape[1], s_shape[2]);
            let s1 = tape.reshape(s, [1, p, n, d])?;
            let h1 = tape.reshape(h_prev, [1, n, d])?;
            let (z, alpha) = batched_attention(tape, h1, s1)?;
            Ok((tape.reshape(z, [n, d])?, tape.reshape(alpha, [1, p])?))
        }
        (4, 3) if h_shape[0] == s_shape[0] && h_shape[1..] == s_shape[2..] => batched_attention(tape, h_prev, s),
        _ => Err(mismatch()),
    }
}

fn batched_attention(tape: &mut Tape, h_prev: Var, s: Var) -> Result<(Var, Var)> {
    let shape = tape.value(s).shape().to_vec();
    let (b, p, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let flat_s = tape.reshape(s, [b, p, n * d])?;
    let flat_h = tape.reshape(h_prev, [b, n * d, 1])?;
    let scores = tape.bmm(flat_s, flat_h)?;
    let scores = tape.reshape(scores, [b, 1, p])?;
    let alpha = tape.softmax_rows(scores);
    let z = tape.bmm(alpha, flat_s)?;
    Ok((tape.reshape(z, [b, n, d])?, tape.reshape(alpha, [b, p])?))
}

/// Gate transform of a recurrent cell.
#[derive(Clone, Debug)]
pub enum GateTransform {
    /// Bidirectional diffusion convolution over the road graph.
    Diffusion { w_forward: Vec<ParamId>, w_backward: Vec<ParamId>, max_step: usize },
    /// Plain per-node affine map (no spatial mixing).
    Dense { w: ParamId },
}

impl GateTransform {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        max_step: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match max_step {
            Some(k) => GateTransform::Diffusion {
                w_forward: (0..=k)
                    .map(|i| store.glorot(format!("{prefix}.w_forward.{i}"), &[d_in, d_out], rng))
                    .collect(),
                w_backward: (0..=k)
                    .map(|i| store.glorot(format!("{prefix}.w_backward.{i}"), &[d_in, d_out], rng))
                    .collect(),
                max_step: k,
            },
            None => GateTransform::Dense { w: store.glorot(format!("{prefix}.w"), &[d_in, d_out], rng) },
        }
    }

    fn apply(&self, tape: &mut Tape, params: &Binding, graph: GraphVars, x: Var) -> Result<Var> {
        match self {
            GateTransform::Diffusion { w_forward, w_backward, max_step } => {
                let wf: Vec<Var> = w_forward.iter().map(|&p| params.var(p)).collect();
                let wb: Vec<Var> = w_backward.iter().map(|&p| params.var(p)).collect();
                diffusion_conv(tape, graph, x, *max_step, &wf, &wb)
            }
            GateTransform::Dense { w } => tape.matmul(x, params.var(*w)),
        }
    }
}

/// GRU cell with graph-convolutional gates. Inputs are concatenated on the
/// feature axis as `[x || z || h]`; `z` may be absent.
#[derive(Clone, Debug)]
pub struct DcgruaCell {
    pub reset: GateTransform,
    pub update: GateTransform,
    pub candidate: GateTransform,
    pub bias_reset: ParamId,
    pub bias_update: ParamId,
    pub bias_candidate: ParamId,
    input_dim: usize,
    hidden: usize,
}

impl DcgruaCell {
    /// `input_dim` counts every non-recurrent channel (`C + D` with
    /// attention, `C` without). `max_step = None` builds dense gates.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        max_step: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_in = input_dim + hidden;
        let reset = GateTransform::new(store, &format!("{prefix}.reset"), d_in, hidden, max_step, rng);
        let update = GateTransform::new(store, &format!("{prefix}.update"), d_in, hidden, max_step, rng);
        let candidate = GateTransform::new(store, &format!("{prefix}.candidate"), d_in, hidden, max_step, rng);
        DcgruaCell {
            reset,
            update,
            candidate,
            bias_reset: store.insert(format!("{prefix}.reset.bias"), Tensor::ones([hidden])),
            bias_update: store.insert(format!("{prefix}.update.bias"), Tensor::ones([hidden])),
            bias_candidate: store.zeros(format!("{prefix}.candidate.bias"), &[hidden]),
            input_dim,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        x_in: Var,
        z: Option<Var>,
        h_prev: Var,
    ) -> Result<Var> {
        let last = tape.value(x_in).rank() - 1;
        let inputs = match z {
            Some(z) => tape.concat(&[x_in, z], last)?,
            None => x_in,
        };
        let in_shape = tape.value(inputs).shape().to_vec();
        let h_shape = tape.value(h_prev).shape().to_vec();
        if in_shape[last] != self.input_dim
            || h_shape.len() != in_shape.len()
            || h_shape[last] != self.hidden
            || h_shape[..last] != in_shape[..last]
        {
            return Err(Error::dim(
                "dcgrua_step",
                format!(
                    "cell expects {} input and {} hidden channels, got inputs {in_shape:?} and state {h_shape:?}",
                    self.input_dim, self.hidden
                ),
            ));
        }
        let gate_in = tape.concat(&[inputs, h_prev], last)?;
        let r = self.reset.apply(tape, params, graph, gate_in)?;
        let r = tape.add(r, params.var(self.bias_reset))?;
        let r = tape.sigmoid(r);
        let u = self.update.apply(tape, params, graph, gate_in)?;
        let u = tape.add(u, params.var(self.bias_update))?;
        let u = tape.sigmoid(u);

        let reset_h = tape.mul(r, h_prev)?;
        let cand_in = tape.concat(&[inputs, reset_h], last)?;
        let c = self.candidate.apply(tape, params, graph, cand_in)?;
        let c = tape.add(c, params.var(self.bias_candidate))?;
        let c = tape.tanh(c);

        // H = u * H_prev + (1 - u) * C
        let keep = tape.mul(u, h_prev)?;
        let one_minus_u = tape.affine(u, -1.0, 1.0);
        let fresh = tape.mul(one_minus_u, c)?;
        tape.add(keep, fresh)
    }
}

/// `affine(D -> D) -> relu -> affine(D -> C)`.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl OutputHead {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        OutputHead {
            w1: store.glorot(format!("{prefix}.w1"), &[hidden, hidden], rng),
            b1: store.zeros(format!("{prefix}.b1"), &[hidden]),
            w2: store.glorot(format!("{prefix}.w2"), &[hidden, out_dim], rng),
            b2: store.zeros(format!("{prefix}.b2"), &[out_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, h: Var) -> Result<Var> {
        let z = tape.matmul(h, params.var(self.w1))?;
        let z = tape.add(z, params.var(self.b1))?;
        let z = tape.relu(z);
        let y = tape.matmul(z, params.var(self.w2))?;
        tape.add(y, params.var(self.b2))
    }
}

/// What the decoder consumes at step `i > 1`.
pub enum Feed<'a> {
    /// Its own previous prediction.
    Free,
    /// The previous ground-truth target.
    TeacherForcing,
    /// Ground truth with probability `epsilon`, drawn independently per
    /// step and sample.
    Scheduled { epsilon: f64, rng: &'a mut ChaCha8Rng },
}

impl Feed<'_> {
    fn needs_targets(&self) -> bool {
        !matches!(self, Feed::Free)
    }

    fn use_truth(&mut self) -> bool {
        match self {
            Feed::Free => false,
            Feed::TeacherForcing => true,
            Feed::Scheduled { epsilon, rng } => rng.gen::<f64>() < *epsilon,
        }
    }
}

/// Attention weights and states of decoded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `[B, Q, P]`
    pub alpha: Tensor,
    /// `[B, Q, N, D]`
    pub z: Tensor,
}

impl AttentionRecord {
    /// Record of sample `i` as `alpha: [Q, P]`, `z: [Q, N, D]`.
    pub fn sample(&self, i: usize) -> Result<AttentionRecord> {
        let a = self.alpha.slice(0, i, 1)?;
        let z = self.z.slice(0, i, 1)?;
        Ok(AttentionRecord { alpha: a.reshape(&self.alpha.shape()[1..])?, z: z.reshape(&self.z.shape()[1..])? })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cell: DcgruaCell,
    pub head: OutputHead,
    pub attention: bool,
    out_dim: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        out_dim: usize,
        hidden: usize,
        max_step: Option<usize>,
        attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input_dim = out_dim + if attention { hidden } else { 0 };
        let cell = DcgruaCell::new(store, &format!("{prefix}.cell"), input_dim, hidden, max_step, rng);
        let head = OutputHead::new(store, &format!("{prefix}.head"), hidden, out_dim, rng);
        Decoder { cell, head, attention, out_dim }
    }

    /// Runs `horizon` steps from `enc.h0: [B, N, D]` over
    /// `enc.s: [B, P, N, D]`. `targets` is `[B, Q, N, C]` and is required
    /// unless `feed` is [`Feed::Free`]. Returns `[B, Q, N, C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        enc: EncodedSequence,
        horizon: usize,
        feed: &mut Feed<'_>,
        targets: Option<Var>,
    ) -> Result<(Var, Option<AttentionRecord>)> {
        if feed.needs_targets() && targets.is_none() {
            return Err(Error::Usage("ground-truth feeding requires targets".into()));
        }
        let h_shape = tape.value(enc.h0).shape().to_vec();
        let [b, n, _] = h_shape[..] else {
            return Err(Error::dim("decode", format!("initial state {h_shape:?}, expected [B, N, D]")));
        };
        let c = self.out_dim;
        if let Some(t) = targets {
            let shape = tape.value(t).shape();
            if shape != [b, horizon, n, c] {
                return Err(Error::dim("decode", format!("targets {shape:?}, expected [{b}, {horizon}, {n}, {c}]")));
            }
        }
        let mut h = enc.h0;
        let mut input = tape.constant(Tensor::zeros([b, n, c]));
        let mut outputs = Vec::with_capacity(horizon);
        let mut alphas = Vec::new();
        let mut zs = Vec::new();
        for i in 0..horizon {
            if i > 0 {
                let draws: Vec<bool> = (0..b).map(|_| feed.use_truth()).collect();
                let prev = outputs[i - 1];
                input = match targets {
                    Some(t) if draws.iter().any(|&d| d) => {
                        let y = tape.slice(t, 1, i - 1, 1)?;
                        let truth = tape.reshape(y, [b, n, c])?;
                        if draws.iter().all(|&d| d) {
                            truth
                        } else {
                            mix_rows(tape, &draws, truth, prev, n * c)?
                        }
                    }
                    _ => prev,
                };
            }
            let z = if self.attention {
                let (z, alpha) = lookback_attention(tape, h, enc.s)?;
                alphas.push(tape.value(alpha).clone());
                zs.push(tape.value(z).clone());
                Some(z)
            } else {
                None
            };
            h = self.cell.step(tape, params, graph, input, z, h)?;
            outputs.push(self.head.forward(tape, params, h)?);
        }
        let stacked: Vec<Var> = outputs
            .iter()
            .map(|&y| tape.reshape(y, [b, 1, n, c]))
            .collect::<Result<_>>()?;
        let prediction = tape.concat(&stacked, 1)?;
        let record = if self.attention {
            let d = h_shape[2];
            let a: Vec<Tensor> = alphas.iter().map(|a| a.reshape([b, 1, a.shape()[1]])).collect::<Result<_>>()?;
            let z: Vec<Tensor> = zs.iter().map(|z| z.reshape([b, 1, n, d])).collect::<Result<_>>()?;
            Some(AttentionRecord {
                alpha: Tensor::concat(&a.iter().collect::<Vec<_>>(), 1)?,
                z: Tensor::concat(&z.iter().collect::<Vec<_>>(), 1)?,
            })
        } else {
            None
        };
        Ok((prediction, record))
    }
}

/// Per-sample choice between `truth` and `pred` (both `[B, ..]`).
fn mix_rows(tape: &mut Tape, draws: &[bool], truth: Var, pred: Var, row: usize) -> Result<Var> {
    let shape = tape.value(truth).shape().to_vec();
    let pick: Vec<f64> = draws.iter().flat_map(|&d| std::iter::repeat(if d { 1.0 } else { 0.0 }).take(row)).collect();
    let keep: Vec<f64> = pick.iter().map(|p| 1.0 - p).collect();
    let pick = tape.constant(Tensor::new(shape.clone(), pick)?);
    let keep = tape.constant(Tensor::new(shape, keep)?);
    let a = tape.mul(truth, pick)?;
    let b = tape.mul(pred, keep)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::graph::TrafficGraph;

    #[test]
    fn identical_slots_give_uniform_attention() {
        let mut tape = Tape::new();
        let slot: Vec<f64> = (0..6).map(|v| v as f64 * 0.3).collect();
        let s = Tensor::new([4, 3, 2], slot.iter().cycle().take(24).copied().collect()).unwrap();
        let s = tape.constant(s);
        let h = tape.constant(Tensor::new([3, 2], vec![0.1, -0.4, 0.2, 0.9, -1.0, 0.5]).unwrap());
        let (z, alpha) = lookback_attention(&mut tape, h, s).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&a| (a - 0.25).abs() < 1e-12));
        assert!(tape.value(z).data().iter().zip(&slot).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_state_gives_uniform_attention() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([3, 2, 1], vec![1.0, 2.0, -3.0, 4.0, 0.5, 9.0]).unwrap());
        let h = tape.constant(Tensor::zeros([2, 1]));
        let (_, alpha) = lookback_attention(&mut tape, h, s).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn batched_attention_matches_single() {
        let s = Tensor::new([2, 3, 2, 2], (0..24).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let h = Tensor::new([2, 2, 2], (0..8).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let (sv, hv) = (tape.constant(s.clone()), tape.constant(h.clone()));
        let (z, alpha) = lookback_attention(&mut tape, hv, sv).unwrap();
        let (z, alpha) = (tape.value(z).clone(), tape.value(alpha).clone());
        for i in 0..2 {
            let si = tape.constant(s.slice(0, i, 1).unwrap().reshape([3, 2, 2]).unwrap());
            let hi = tape.constant(h.slice(0, i, 1).unwrap().reshape([2, 2]).unwrap());
            let (zi, ai) = lookback_attention(&mut tape, hi, si).unwrap();
            assert!(tape.value(zi).max_abs_diff(&z.slice(0, i, 1).unwrap().reshape([2, 2]).unwrap()) < 1e-15);
            assert!(tape.value(ai).max_abs_diff(&alpha.slice(0, i, 1).unwrap()) < 1e-15);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros([3, 2, 2]));
        let h = tape.constant(Tensor::zeros([2, 3]));
        assert!(lookback_attention(&mut tape, h, s).is_err());
    }

    fn zero_cell(n: usize, c: usize, d: usize) -> (ParamStore, DcgruaCell, TrafficGraph) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = DcgruaCell::new(&mut store, "cell", c + d, d, Some(1), &mut rng);
        for v in store.values_mut() {
            *v = Tensor::zeros(v.shape());
        }
        let a = Tensor::new([n, n], (0..n * n).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        (store, cell, TrafficGraph::from_adjacency(a).unwrap())
    }

    #[test]
    fn zero_parameters_halve_state() {
        let (store, cell, graph) = zero_cell(8, 1, 4);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let g = graph.bind(&mut tape);
        let x = tape.constant(Tensor::ones([8, 1]));
        let z = tape.constant(Tensor::ones([8, 4]));
        let h_val = Tensor::new([8, 4], (0..32).map(|v| v as f64 - 10.0).collect()).unwrap();
        let h = tape.constant(h_val.clone());
        let out = cell.step(&mut tape, &b, g, x, Some(z), h).unwrap();
        assert_eq!(tape.value(out).shape(), &[8, 4]);
        assert!(tape.value(out).max_abs_diff(&h_val.scale(0.5)) < 1e-15);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let (mut store, cell, graph) = zero_cell(3, 1, 2);
        store.set(cell.bias_update, Tensor::filled([2], 50.0)).unwrap();
        store.set(cell.bias_candidate, Tensor::filled([2], 3.0)).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let g = graph.bind(&mut tape);
        let x = tape.constant(Tensor::ones([3, 1]));
        let z = tape.constant(Tensor::ones([3, 2]));
        let h_val = Tensor::new([3, 2], vec![0.3, -0.2, 1.0, 0.0, -0.7, 0.4]).unwrap();
        let h = tape.constant(h_val.clone());
        let out = cell.step(&mut tape, &b, g, x, Some(z), h).unwrap();
        assert!(tape.value(out).max_abs_diff(&h_val) < 1e-15);
    }

    #[test]
    fn teacher_forcing_without_targets_is_usage_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::new(&mut store, "dec", 1, 2, Some(1), true, &mut rng);
        let graph = TrafficGraph::isolated(3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let g = graph.bind(&mut tape);
        let s = tape.constant(Tensor::zeros([1, 4, 3, 2]));
        let h0 = tape.constant(Tensor::zeros([1, 3, 2]));
        let enc = EncodedSequence { s, h0 };
        let err = dec.decode(&mut tape, &b, g, enc, 2, &mut Feed::TeacherForcing, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
