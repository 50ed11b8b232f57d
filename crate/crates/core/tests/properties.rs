mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stseq2seq::evaluation::metrics;
use stseq2seq::graph::diffusion_conv_values;
use stseq2seq::pam::PatternEmbedder;
use stseq2seq::params::ParamStore;
use stseq2seq::{Tape, Tensor, TrafficGraph};

use common::{inputs, random_graph};

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let row = t.numel() / n;
    let mut out = vec![0.0; t.numel()];
    for (i, &p) in perm.iter().enumerate() {
        out[i * row..(i + 1) * row].copy_from_slice(&t.data()[p * row..(p + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

fn permute_square(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a.data()[perm[i] * n + perm[j]];
        }
    }
    Tensor::new([n, n], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_distributions(
        rows in 1usize..6, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..30.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = inputs(&mut rng, &[rows, cols]).map(|v| v * scale).softmax_rows();
        for row in t.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diffusion_is_permutation_equivariant(n in 2usize..9, k in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.4);
        let x = inputs(&mut rng, &[n, 3]);
        let wf: Vec<Tensor> = (0..=k).map(|_| inputs(&mut rng, &[3, 2])).collect();
        let wb: Vec<Tensor> = (0..=k).map(|_| inputs(&mut rng, &[3, 2])).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = TrafficGraph::from_adjacency(permute_square(g.adjacency(), &perm)).unwrap();
        let lhs = diffusion_conv_values(&pg, &permute(&x, &perm), k, &wf, &wb).unwrap();
        let rhs = permute(&diffusion_conv_values(&g, &x, k, &wf, &wb).unwrap(), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn transition_rows_are_stochastic(n in 1usize..10, density in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, density);
        for m in [g.m_forward(), g.m_backward()] {
            for row in m.data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pattern_adjacency_rows_are_distributions(n in 2usize..8, window in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pam = PatternEmbedder::new(&mut store, "pam", window, 6, &mut rng);
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let x = tape.constant(inputs(&mut rng, &[window, n]));
        let a = pam.adjacency(&mut tape, &params, x).unwrap();
        for row in tape.value(a).data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rmse_never_below_mae(values in prop::collection::vec((1.0f64..80.0, 0.0f64..80.0), 1..50)) {
        let n = values.len();
        let y = Tensor::new([n], values.iter().map(|v| v.0).collect()).unwrap();
        let p = Tensor::new([n], values.iter().map(|v| v.1).collect()).unwrap();
        let m = metrics(&y, &p, None).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-12);
    }

    #[test]
    fn tape_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.variable(inputs(&mut rng, &[3, 4]));
            let b = tape.variable(inputs(&mut rng, &[4, 2]));
            let m = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(m);
            let t = tape.tanh(s);
            let loss = tape.sum(t);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).item().to_bits(), grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn pattern_adjacency_tracks_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let pam = PatternEmbedder::new(&mut store, "pam", 6, 8, &mut rng);
    let adjacency = |w: Tensor| {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let x = tape.constant(w);
        let a = pam.adjacency(&mut tape, &params, x).unwrap();
        tape.value(a).clone()
    };
    let flat = Tensor::filled([6, 4], 0.5);
    let mut spiked = vec![0.5; 24];
    spiked[3 * 4 + 1] = 3.0;
    spiked[5 * 4 + 2] = -2.0;
    assert_ne!(adjacency(flat), adjacency(Tensor::new([6, 4], spiked).unwrap()));

    let mut zeroed = store.clone();
    for v in zeroed.values_mut() {
        *v = v.map(|_| 0.0);
    }
    let mut tape = Tape::new();
    let params = zeroed.bind_frozen(&mut tape);
    let x = tape.constant(inputs(&mut rng, &[6, 4]));
    let a = pam.adjacency(&mut tape, &params, x).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}
