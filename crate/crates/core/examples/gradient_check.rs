//! Central-difference check of a DCGRUA step's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stseq2seq::decoder::DcgruaCell;
use stseq2seq::params::ParamStore;
use stseq2seq::{Tape, Tensor, TrafficGraph};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn main() -> stseq2seq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = TrafficGraph::from_adjacency(Tensor::from_rows(&[&[1.0, 0.5, 0.0], &[0.0, 1.0, 0.8], &[0.3, 0.0, 1.0]])?)?;
    let mut store = ParamStore::new();
    let cell = DcgruaCell::new(&mut store, "cell", 2, 4, Some(2), &mut rng);
    let (x, h) = (random(&mut rng, &[3, 2]), random(&mut rng, &[3, 4]));

    let loss = |store: &ParamStore| -> stseq2seq::Result<(Tape, stseq2seq::params::Binding, stseq2seq::Var)> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let g = graph.bind(&mut tape);
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(h.clone()));
        let out = cell.step(&mut tape, &params, g, xv, None, hv)?;
        let sq = tape.mul(out, out)?;
        let l = tape.sum(sq);
        Ok((tape, params, l))
    };

    let (tape, params, l) = loss(&store)?;
    let analytic = params.collect_grads(&tape.backward(l)?, &store);
    let eps = 1e-6;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, grad) in names.iter().zip(&analytic) {
        let id = store.id(name).unwrap();
        let base = store.get(id).clone();
        let (mut num, mut diff) = (0.0f64, 0.0f64);
        for i in 0..base.numel() {
            let mut probe = store.clone();
            let mut d = base.data().to_vec();
            d[i] += eps;
            probe.set(id, Tensor::new(base.shape().to_vec(), d.clone())?)?;
            let (t, _, up) = loss(&probe)?;
            let up = t.value(up).item();
            d[i] -= 2.0 * eps;
            probe.set(id, Tensor::new(base.shape().to_vec(), d)?)?;
            let (t, _, down) = loss(&probe)?;
            let g = (up - t.value(down).item()) / (2.0 * eps);
            num += g * g;
            diff += (g - grad.data()[i]).powi(2);
        }
        let rel = diff.sqrt() / (num.sqrt() + grad.sq_norm().sqrt()).max(1e-12);
        println!("{name:<28} {:>4} entries  relative error {rel:.2e}", base.numel());
    }
    Ok(())
}
