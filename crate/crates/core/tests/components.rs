mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stseq2seq::data::{chronological_split, synth_generate, Regime, SplitRatios};
use stseq2seq::decoder::{Decoder, Feed};
use stseq2seq::encoder::{EncodedSequence, Encoder, EncoderShape};
use stseq2seq::experiment::PreparedData;
use stseq2seq::pam::PatternEmbedder;
use stseq2seq::params::ParamStore;
use stseq2seq::training::{FeedPolicy, TrainConfig, Trainer};
use stseq2seq::{ModelConfig, StSeq2Seq, Tape, Tensor, Var};

use common::{inputs, random_graph};

fn encoder_shape(with_extra: bool) -> EncoderShape {
    EncoderShape {
        window: 9,
        input_dim: 1,
        hidden: 4,
        projection_dim: 4,
        layers: 2,
        temporal_kernel: 3,
        max_step: 1,
        with_extra_adjacency: with_extra,
    }
}

#[test]
fn encoder_footprint_is_two_steps_without_pattern_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "enc", &encoder_shape(false), &mut rng).unwrap();
    let graph = random_graph(&mut rng, 3, 0.6);
    let x = inputs(&mut rng, &[1, 9, 3, 1]);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let g = graph.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let enc = encoder.encode(&mut tape, &params, g, None, xv).unwrap();
        tape.value(enc.s).clone()
    };
    let base = run(&x);
    for t0 in [0, 4, 8] {
        let mut d = x.data().to_vec();
        for node in 0..3 {
            d[t0 * 3 + node] += 0.5;
        }
        let moved = run(&Tensor::new(x.shape().to_vec(), d).unwrap());
        let mut touched = false;
        for t in 0..9 {
            let a = base.slice(1, t, 1).unwrap();
            let b = moved.slice(1, t, 1).unwrap();
            if t.abs_diff(t0) > 2 {
                assert_eq!(a, b, "step {t} moved after perturbing {t0}");
            } else if a != b {
                touched = true;
            }
        }
        assert!(touched, "perturbation at {t0} changed nothing");
    }
}

#[test]
fn loss_on_initial_state_reaches_every_encoder_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let pam = PatternEmbedder::new(&mut store, "pam", 9, 4, &mut rng);
    let encoder = Encoder::new(&mut store, "enc", &encoder_shape(true), &mut rng).unwrap();
    let graph = random_graph(&mut rng, 3, 0.6);
    let x = inputs(&mut rng, &[2, 9, 3, 1]);
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let g = graph.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let window = tape.reshape(xv, [2, 9, 3]).unwrap();
    let a = pam.adjacency(&mut tape, &params, window).unwrap();
    let enc = encoder.encode(&mut tape, &params, g, Some(a), xv).unwrap();
    let r = tape.constant(inputs(&mut rng, &[2, 3, 4]));
    let weighted = tape.mul(enc.h0, r).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();
    for ((name, _), g) in store.iter().zip(params.collect_grads(&grads, &store)) {
        assert!(g.sq_norm() > 0.0, "{name} receives no gradient");
    }
}

struct Seq2Seq {
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

fn seq2seq(rng: &mut ChaCha8Rng) -> Seq2Seq {
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "enc", &encoder_shape(false), rng).unwrap();
    let decoder = Decoder::new(&mut store, "dec", 1, 4, Some(1), true, rng);
    Seq2Seq { store, encoder, decoder }
}

/// Encoder gradient norm when the attention path, the initial-state path,
/// or neither is cut.
fn encoder_grad_norm(m: &Seq2Seq, cut_attention: bool, cut_state: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let graph = random_graph(&mut rng, 3, 0.6);
    let x = inputs(&mut rng, &[1, 9, 3, 1]);
    let mut tape = Tape::new();
    let params = m.store.bind(&mut tape);
    let g = graph.bind(&mut tape);
    let xv = tape.constant(x);
    let enc = m.encoder.encode(&mut tape, &params, g, None, xv).unwrap();
    let detach = |tape: &mut Tape, v: Var| {
        let value = tape.value(v).clone();
        tape.constant(value)
    };
    let s = if cut_attention { detach(&mut tape, enc.s) } else { enc.s };
    let h0 = if cut_state { detach(&mut tape, enc.h0) } else { enc.h0 };
    let (y, _) = m.decoder.decode(&mut tape, &params, g, EncodedSequence { s, h0 }, 4, &mut Feed::Free, None).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    m.store
        .iter()
        .zip(params.collect_grads(&grads, &m.store))
        .filter(|((name, _), _)| name.starts_with("enc"))
        .map(|(_, g)| g.sq_norm())
        .sum()
}

#[test]
fn encoder_gradient_flows_through_attention_and_initial_state() {
    let m = seq2seq(&mut ChaCha8Rng::seed_from_u64(4));
    assert!(encoder_grad_norm(&m, false, false) > 0.0);
    assert!(encoder_grad_norm(&m, true, false) > 0.0, "initial-state path alone is dead");
    assert!(encoder_grad_norm(&m, false, true) > 0.0, "attention path alone is dead");
}

#[test]
fn decoder_is_autoregressive() {
    let ds = synth_generate(4, 200, 1, Regime::ChainLag).unwrap();
    let mut config = ModelConfig::new(4);
    config.window = 6;
    config.horizon = 4;
    config.hidden = 8;
    config.embed_dim = 8;
    let model = StSeq2Seq::new(config, &ds.graph, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = inputs(&mut rng, &[1, 6, 4, 1]);
    let y = inputs(&mut rng, &[1, 4, 4, 1]);
    let predict = |y: &Tensor| {
        let mut tape = Tape::new();
        let params = model.params().bind_frozen(&mut tape);
        let pass = model.forward(&mut tape, &params, &x, &mut Feed::TeacherForcing, Some(y)).unwrap();
        tape.value(pass.prediction).clone()
    };
    let base = predict(&y);
    let mut d = y.data().to_vec();
    d[..4].iter_mut().for_each(|v| *v += 0.3);
    let nudged = predict(&Tensor::new(y.shape().to_vec(), d).unwrap());
    assert_eq!(base.slice(1, 0, 1).unwrap(), nudged.slice(1, 0, 1).unwrap());
    assert!(base.slice(1, 1, 1).unwrap().max_abs_diff(&nudged.slice(1, 1, 1).unwrap()) > 0.0);
}

#[test]
fn small_step_decreases_single_sample_loss() {
    let ds = synth_generate(4, 300, 9, Regime::Diurnal).unwrap();
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 6, 4, 1).unwrap();
    for init in 0..5 {
        let mut config = ModelConfig::new(4);
        config.window = 6;
        config.horizon = 4;
        config.hidden = 8;
        config.embed_dim = 8;
        let mut model = StSeq2Seq::new(config, &ds.graph, init).unwrap();
        let tc = TrainConfig { lr: 1e-5, feed: FeedPolicy::TeacherForcing, clip_norm: None, ..TrainConfig::default() };
        let mut trainer = Trainer::new(&model, tc).unwrap();
        let batch = [&data.train[init as usize * 7]];
        let before = trainer.step(&mut model, &batch, 0).unwrap();
        let (after, _) = trainer.loss_and_grads(&model, &batch).unwrap();
        assert!(after < before, "init {init}: {before} -> {after}");
    }
}

#[test]
fn split_has_no_leakage_and_scaler_sees_train_only() {
    let ds = synth_generate(3, 500, 4, Regime::Diurnal).unwrap();
    let split = chronological_split(&ds.table, SplitRatios::default(), 12, 12).unwrap();
    let last_train = split.train.iter().map(|w| w.target_index(12)).max().unwrap();
    let first_test = split.test.iter().map(|w| w.start).min().unwrap();
    assert!(last_train < first_test);
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 12, 12, 1).unwrap();
    assert_eq!(data.scaler.fit_range(), data.split.ranges[0]);
}
