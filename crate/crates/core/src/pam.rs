//! Pattern-aware adjacency.
//!
//! Each node's most recent `P` observations are embedded by a two-layer
//! rectifier MLP; the adjacency row of node `i` is the softmax over `j` of
//! the dot products `<e_i, e_j>`. The matrix is rebuilt for every input
//! window, so it follows whichever nodes currently behave alike regardless
//! of road distance.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

/// Two-layer MLP mapping a length-`P` series to a `D_e` embedding:
/// `e = relu(relu(x · W1 + b1) · W2 + b2)`.
#[derive(Clone, Debug)]
pub struct PatternEmbedder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    window: usize,
    embed_dim: usize,
}

impl PatternEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, window: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PatternEmbedder {
            w1: store.glorot(format!("{prefix}.w1"), &[window, embed_dim], rng),
            b1: store.zeros(format!("{prefix}.b1"), &[embed_dim]),
            w2: store.glorot(format!("{prefix}.w2"), &[embed_dim, embed_dim], rng),
            b2: store.zeros(format!("{prefix}.b2"), &[embed_dim]),
            window,
            embed_dim,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Embeds one series `[P]` or a batch of node series `[N, P]`.
    pub fn embed(&self, tape: &mut Tape, params: &Binding, series: Var) -> Result<Var> {
        let shape = tape.value(series).shape().to_vec();
        let (rows, is_vector) = match shape[..] {
            [p] if p == self.window => (1, true),
            [n, p] if p == self.window => (n, false),
            _ => {
                return Err(Error::dim(
                    "pattern_embed",
                    format!("expected series of length {}, got shape {shape:?}", self.window),
                ))
            }
        };
        let x = if is_vector { tape.reshape(series, [rows, self.window])? } else { series };
        let e = self.embed_rows(tape, params, x)?;
        if is_vector {
            tape.reshape(e, [self.embed_dim])
        } else {
            Ok(e)
        }
    }

    /// Row-stochastic similarity matrix from a window of one feature
    /// channel: `[P, N]` gives `[N, N]`, `[B, P, N]` gives `[B, N, N]`.
    pub fn adjacency(&self, tape: &mut Tape, params: &Binding, window: Var) -> Result<Var> {
        let shape = tape.value(window).shape().to_vec();
        let (n, single) = match shape[..] {
            [p, n] if p == self.window => (n, true),
            [_, p, n] if p == self.window => (n, false),
            _ => {
                return Err(Error::dim(
                    "pam_build",
                    format!("expected window [{}, N], got {shape:?}", self.window),
                ))
            }
        };
        if n < 2 {
            return Err(Error::Input("pattern-aware adjacency needs at least two nodes".into()));
        }
        let window = if single { tape.reshape(window, [1, self.window, n])? } else { window };
        let series = tape.swap_axes(window, 1, 2)?;
        let e = self.embed_rows(tape, params, series)?;
        let et = tape.swap_axes(e, 1, 2)?;
        let sim = tape.bmm(e, et)?;
        let a = tape.softmax_rows(sim);
        if single {
            tape.reshape(a, [n, n])
        } else {
            Ok(a)
        }
    }

    /// Embeds `[.., P]` row-wise without shape dispatch.
    fn embed_rows(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params.var(self.w1))?;
        let h = tape.add(h, params.var(self.b1))?;
        let h = tape.relu(h);
        let e = tape.matmul(h, params.var(self.w2))?;
        let e = tape.add(e, params.var(self.b2))?;
        Ok(tape.relu(e))
    }
}

/// Freely learned static adjacency with softmax-normalised rows.
#[derive(Clone, Debug)]
pub struct SelfAdaptiveAdjacency {
    pub logits: ParamId,
}

impl SelfAdaptiveAdjacency {
    pub fn new(store: &mut ParamStore, name: &str, n_nodes: usize, rng: &mut ChaCha8Rng) -> Self {
        SelfAdaptiveAdjacency { logits: store.glorot(name, &[n_nodes, n_nodes], rng) }
    }

    pub fn adjacency(&self, tape: &mut Tape, params: &Binding) -> Var {
        tape.softmax_rows(params.var(self.logits))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn embedder(p: usize, de: usize) -> (ParamStore, PatternEmbedder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = PatternEmbedder::new(&mut store, "pam", p, de, &mut rng);
        (store, e)
    }

    fn run_embed(store: &ParamStore, e: &PatternEmbedder, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = e.embed(&mut tape, &b, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_weights_zero_embedding() {
        let (mut store, e) = embedder(4, 3);
        for v in store.values_mut() {
            *v = Tensor::zeros(v.shape());
        }
        let out = run_embed(&store, &e, &Tensor::vector(&[1.0, -2.0, 3.0, 0.5]));
        assert_eq!(out, Tensor::zeros([3]));
    }

    #[test]
    fn identity_weights_pass_nonnegative_input() {
        let (mut store, e) = embedder(3, 3);
        store.set(e.w1, Tensor::identity(3)).unwrap();
        store.set(e.w2, Tensor::identity(3)).unwrap();
        let x = Tensor::vector(&[0.5, 0.0, 2.0]);
        assert_eq!(run_embed(&store, &e, &x), x);
    }

    #[test]
    fn wrong_length_is_dimension_error() {
        let (store, e) = embedder(4, 3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros([5]));
        assert!(matches!(e.embed(&mut tape, &b, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_node_rejected() {
        let (store, e) = embedder(4, 3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = tape.constant(Tensor::zeros([4, 1]));
        assert!(matches!(e.adjacency(&mut tape, &b, w), Err(Error::Input(_))));
    }

    #[test]
    fn identical_series_give_uniform_rows() {
        let (store, e) = embedder(4, 3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let col = [0.3, -1.0, 2.0, 0.7];
        let data: Vec<f64> = col.iter().flat_map(|&v| [v; 5]).collect();
        let w = tape.constant(Tensor::new([4, 5], data).unwrap());
        let a = e.adjacency(&mut tape, &b, w).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn self_adaptive_rows_are_distributions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SelfAdaptiveAdjacency::new(&mut store, "adp", 4, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let a = s.adjacency(&mut tape, &b);
        for row in tape.value(a).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
