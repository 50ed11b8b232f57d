//! Shared helpers for the integration tests: central-difference gradient
//! checks over every differentiable building block, and plain scalar-loop
//! reference implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stseq2seq::decoder::{lookback_attention, DcgruaCell, OutputHead};
use stseq2seq::encoder::{Projection, SpatialConv, TemporalGatedConv};
use stseq2seq::graph::{diffusion_conv, diffusion_conv_values, graph_conv, GraphVars};
use stseq2seq::pam::PatternEmbedder;
use stseq2seq::params::{Binding, ParamStore};
use stseq2seq::training::mae_loss;
use stseq2seq::{ElementwiseOp, Result, Tape, Tensor, TrafficGraph, Var};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const DRAWS: usize = 20;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn inputs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0)
}

/// Random nonnegative weights with unit self-loops, row-normalised.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> TrafficGraph {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                a[i * n + j] = 1.0;
            } else if rng.gen_bool(density) {
                a[i * n + j] = rng.gen_range(0.1..1.0);
            }
        }
    }
    TrafficGraph::from_adjacency(Tensor::new([n, n], a).unwrap()).unwrap()
}

pub type Forward = dyn Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>;

/// Largest norm-wise relative error `|g - g_fd| / max(|g| + |g_fd|, 1e-12)`
/// over every parameter tensor in `store` and every tensor in `xs`, for the
/// scalar loss `sum(r * f)` with random weights `r`.
pub fn gradient_error(store: &ParamStore, xs: &[Tensor], f: &Forward, rng: &mut ChaCha8Rng) -> Result<f64> {
    let eval = |store: &ParamStore, xs: &[Tensor], r: Option<&Tensor>| -> Result<(Tape, Binding, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &binding, &vars)?;
        let loss = match r {
            Some(r) => {
                let rv = tape.constant(r.clone());
                let weighted = tape.mul(out, rv)?;
                tape.sum(weighted)
            }
            None => out,
        };
        Ok((tape, binding, vars, loss))
    };

    let (tape, _, _, out) = eval(store, xs, None)?;
    let r = uniform(rng, tape.value(out).shape(), -1.0, 1.0);
    let (tape, binding, vars, loss) = eval(store, xs, Some(&r))?;
    let grads = tape.backward(loss)?;
    let analytic_params = binding.collect_grads(&grads, store);
    let analytic_inputs: Vec<Tensor> = vars.iter().zip(xs).map(|(&v, x)| grads.get_or_zeros(v, x)).collect();

    let loss_at = |store: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let (tape, _, _, loss) = eval(store, xs, Some(&r))?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, analytic) in names.iter().zip(&analytic_params) {
        let base = store.by_name(name).unwrap().clone();
        let id = store.id(name).unwrap();
        let mut numeric = vec![0.0; base.numel()];
        let mut probe = store.clone();
        for (i, g) in numeric.iter_mut().enumerate() {
            let mut d = base.data().to_vec();
            d[i] += FD_STEP;
            probe.set(id, Tensor::new(base.shape().to_vec(), d.clone())?)?;
            let up = loss_at(&probe, xs)?;
            d[i] -= 2.0 * FD_STEP;
            probe.set(id, Tensor::new(base.shape().to_vec(), d)?)?;
            let down = loss_at(&probe, xs)?;
            *g = (up - down) / (2.0 * FD_STEP);
        }
        probe.set(id, base)?;
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    for (k, analytic) in analytic_inputs.iter().enumerate() {
        let mut numeric = vec![0.0; xs[k].numel()];
        let mut probe = xs.to_vec();
        for (i, g) in numeric.iter_mut().enumerate() {
            let mut d = xs[k].data().to_vec();
            d[i] += FD_STEP;
            probe[k] = Tensor::new(xs[k].shape().to_vec(), d.clone())?;
            let up = loss_at(store, &probe)?;
            d[i] -= 2.0 * FD_STEP;
            probe[k] = Tensor::new(xs[k].shape().to_vec(), d)?;
            let down = loss_at(store, &probe)?;
            *g = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// One gradient-check subject: builds its parameters and inputs from a
/// seed and returns the forward closure.
pub struct GradCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> (ParamStore, Vec<Tensor>, Box<Forward>),
}

pub struct GradResult {
    pub name: &'static str,
    pub draws: usize,
    pub worst: f64,
}

pub fn run_case(case: &GradCase, draws: usize, seed: u64) -> Result<GradResult> {
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(d as u64));
        let (mut store, xs, f) = (case.build)(&mut rng);
        // zero-initialised biases put rectifiers exactly on their kink
        for value in store.values_mut() {
            if value.data().iter().all(|&v| v == 0.0) {
                *value = uniform(&mut rng, value.shape(), -0.5, 0.5);
            }
        }
        worst = worst.max(gradient_error(&store, &xs, f.as_ref(), &mut rng)?);
    }
    Ok(GradResult { name: case.name, draws, worst })
}

fn no_params() -> ParamStore {
    ParamStore::new()
}

fn unary(op: ElementwiseOp) -> Box<Forward> {
    Box::new(move |t: &mut Tape, _: &Binding, v: &[Var]| t.elementwise(op, v[0], None))
}

/// Every differentiable primitive plus every model component.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add (broadcast)", build: |rng| (no_params(), vec![inputs(rng, &[3, 4]), inputs(rng, &[4])], Box::new(|t, _, v| t.add(v[0], v[1]))) },
        GradCase { name: "sub", build: |rng| (no_params(), vec![inputs(rng, &[3, 4]), inputs(rng, &[3, 4])], Box::new(|t, _, v| t.sub(v[0], v[1]))) },
        GradCase { name: "mul (broadcast)", build: |rng| (no_params(), vec![inputs(rng, &[2, 3, 4]), inputs(rng, &[3, 4])], Box::new(|t, _, v| t.mul(v[0], v[1]))) },
        GradCase { name: "affine", build: |rng| (no_params(), vec![inputs(rng, &[5])], Box::new(|t, _, v| Ok(t.affine(v[0], -1.5, 0.25)))) },
        GradCase { name: "sigmoid", build: |rng| (no_params(), vec![inputs(rng, &[6])], unary(ElementwiseOp::Sigmoid)) },
        GradCase { name: "tanh", build: |rng| (no_params(), vec![inputs(rng, &[6])], unary(ElementwiseOp::Tanh)) },
        GradCase { name: "relu", build: |rng| (no_params(), vec![inputs(rng, &[6])], unary(ElementwiseOp::Relu)) },
        GradCase { name: "exp", build: |rng| (no_params(), vec![inputs(rng, &[6])], unary(ElementwiseOp::Exp)) },
        GradCase { name: "abs", build: |rng| (no_params(), vec![inputs(rng, &[6])], Box::new(|t, _, v| Ok(t.abs(v[0])))) },
        GradCase { name: "matmul", build: |rng| (no_params(), vec![inputs(rng, &[2, 3, 4]), inputs(rng, &[4, 5])], Box::new(|t, _, v| t.matmul(v[0], v[1]))) },
        GradCase { name: "slot_matmul", build: |rng| (no_params(), vec![inputs(rng, &[3, 3]), inputs(rng, &[2, 3, 4])], Box::new(|t, _, v| t.slot_matmul(v[0], v[1]))) },
        GradCase { name: "bmm", build: |rng| (no_params(), vec![inputs(rng, &[2, 3, 4]), inputs(rng, &[2, 4, 2])], Box::new(|t, _, v| t.bmm(v[0], v[1]))) },
        GradCase { name: "softmax_rows", build: |rng| (no_params(), vec![inputs(rng, &[3, 5])], Box::new(|t, _, v| Ok(t.softmax_rows(v[0])))) },
        GradCase { name: "concat", build: |rng| (no_params(), vec![inputs(rng, &[2, 3]), inputs(rng, &[2, 2])], Box::new(|t, _, v| t.concat(&[v[0], v[1]], 1))) },
        GradCase { name: "slice", build: |rng| (no_params(), vec![inputs(rng, &[3, 5])], Box::new(|t, _, v| t.slice(v[0], 1, 1, 3))) },
        GradCase { name: "swap_axes", build: |rng| (no_params(), vec![inputs(rng, &[2, 3, 4])], Box::new(|t, _, v| t.swap_axes(v[0], 0, 2))) },
        GradCase { name: "shift", build: |rng| (no_params(), vec![inputs(rng, &[5, 2])], Box::new(|t, _, v| t.shift(v[0], 0, -2))) },
        GradCase { name: "sum", build: |rng| (no_params(), vec![inputs(rng, &[3, 2])], Box::new(|t, _, v| Ok(t.sum(v[0])))) },
        GradCase {
            name: "graph_conv",
            build: |rng| {
                let a = random_graph(rng, 4, 0.5).m_forward().clone();
                (no_params(), vec![a, inputs(rng, &[4, 3]), inputs(rng, &[3, 2])], Box::new(|t, _, v| graph_conv(t, v[0], v[1], v[2])))
            },
        },
        GradCase {
            name: "diffusion_conv",
            build: |rng| {
                let g = random_graph(rng, 4, 0.5);
                let mut xs = vec![g.m_forward().clone(), g.m_backward().clone(), inputs(rng, &[2, 4, 3])];
                for _ in 0..6 {
                    xs.push(inputs(rng, &[3, 2]));
                }
                (no_params(), xs, Box::new(|t, _, v| diffusion_conv(t, GraphVars { m_forward: v[0], m_backward: v[1] }, v[2], 2, &v[3..6], &v[6..9])))
            },
        },
        GradCase {
            name: "pattern_embed",
            build: |rng| {
                let mut store = ParamStore::new();
                let pam = PatternEmbedder::new(&mut store, "pam", 5, 4, rng);
                (store, vec![inputs(rng, &[3, 5])], Box::new(move |t, p, v| pam.embed(t, p, v[0])))
            },
        },
        GradCase {
            name: "pattern_adjacency",
            build: |rng| {
                let mut store = ParamStore::new();
                let pam = PatternEmbedder::new(&mut store, "pam", 5, 4, rng);
                (store, vec![inputs(rng, &[2, 5, 4])], Box::new(move |t, p, v| pam.adjacency(t, p, v[0])))
            },
        },
        GradCase {
            name: "temporal_gated_conv",
            build: |rng| {
                let mut store = ParamStore::new();
                let conv = TemporalGatedConv::new(&mut store, "tc", 3, 2, 3, rng).unwrap();
                (store, vec![inputs(rng, &[5, 3, 2])], Box::new(move |t, p, v| conv.forward(t, p, v[0])))
            },
        },
        GradCase {
            name: "spatial_conv",
            build: |rng| {
                let mut store = ParamStore::new();
                let conv = SpatialConv::new(&mut store, "sc", 3, 2, 2, true, rng);
                let g = random_graph(rng, 4, 0.5);
                let a = uniform(rng, &[4, 4], -1.0, 1.0).softmax_rows();
                let f = move |t: &mut Tape, p: &Binding, v: &[Var]| {
                    let gv = GraphVars { m_forward: v[0], m_backward: v[1] };
                    conv.forward(t, p, gv, Some(v[2]), v[3])
                };
                (store, vec![g.m_forward().clone(), g.m_backward().clone(), a, inputs(rng, &[3, 4, 3])], Box::new(f))
            },
        },
        GradCase {
            name: "projection",
            build: |rng| {
                let mut store = ParamStore::new();
                let proj = Projection::new(&mut store, "proj", 4, 3, 2, rng);
                (store, vec![inputs(rng, &[2, 4, 3, 3])], Box::new(move |t, p, v| proj.forward(t, p, v[0])))
            },
        },
        GradCase {
            name: "lookback_attention",
            build: |rng| {
                // keep scores moderate so the softmax is not saturated
                let h = uniform(rng, &[2, 3, 2], -0.5, 0.5);
                let s = uniform(rng, &[2, 4, 3, 2], -0.5, 0.5);
                (no_params(), vec![h, s], Box::new(|t, _, v| {
                    let (z, alpha) = lookback_attention(t, v[0], v[1])?;
                    let flat_z = t.reshape(z, [12])?;
                    let flat_a = t.reshape(alpha, [8])?;
                    t.concat(&[flat_z, flat_a], 0)
                }))
            },
        },
        GradCase {
            name: "dcgrua_cell",
            build: |rng| {
                let mut store = ParamStore::new();
                let cell = DcgruaCell::new(&mut store, "cell", 3, 3, Some(2), rng);
                let g = random_graph(rng, 3, 0.5);
                let f = move |t: &mut Tape, p: &Binding, v: &[Var]| {
                    let gv = GraphVars { m_forward: v[0], m_backward: v[1] };
                    cell.step(t, p, gv, v[2], Some(v[3]), v[4])
                };
                let xs = vec![g.m_forward().clone(), g.m_backward().clone(), inputs(rng, &[3, 1]), inputs(rng, &[3, 2]), inputs(rng, &[3, 3])];
                (store, xs, Box::new(f))
            },
        },
        GradCase {
            name: "output_head",
            build: |rng| {
                let mut store = ParamStore::new();
                let head = OutputHead::new(&mut store, "head", 4, 2, rng);
                (store, vec![inputs(rng, &[3, 4])], Box::new(move |t, p, v| head.forward(t, p, v[0])))
            },
        },
        GradCase {
            name: "masked_mae_loss",
            build: |rng| {
                let mask = uniform(rng, &[4, 3], 0.0, 1.0).map(|m| if m < 0.3 { 0.0 } else { 1.0 });
                let mask = if mask.sum() == 0.0 { Tensor::ones([4, 3]) } else { mask };
                (no_params(), vec![inputs(rng, &[4, 3]), inputs(rng, &[4, 3])], Box::new(move |t, _, v| mae_loss(t, v[0], v[1], Some(&mask))))
            },
        },
    ]
}

/// `sum_k M_f^k X W_f[k] + sum_k M_b^k X W_b[k]` with explicit matrix
/// powers and scalar loops; `x` is `[N, D_in]`.
pub fn diffusion_oracle(mf: &Tensor, mb: &Tensor, x: &Tensor, wf: &[Tensor], wb: &[Tensor]) -> Vec<f64> {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let d_out = wf[0].shape()[1];
    let mut out = vec![0.0; n * d_out];
    for (m, ws) in [(mf, wf), (mb, wb)] {
        let mut power = identity(n);
        for (k, w) in ws.iter().enumerate() {
            if k > 0 {
                power = square_mul(&power, m.data(), n);
            }
            for i in 0..n {
                for o in 0..d_out {
                    let mut acc = 0.0;
                    for j in 0..n {
                        for c in 0..d_in {
                            acc += power[i * n + j] * x.data()[j * d_in + c] * w.data()[c * d_out + o];
                        }
                    }
                    out[i * d_out + o] += acc;
                }
            }
        }
    }
    out
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

fn square_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
        }
    }
    out
}

/// Worst absolute gap between `diffusion_conv` and explicit matrix powers
/// over `count` random graphs with `N <= 10`, `K <= 3`.
pub fn diffusion_gap(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.gen_range(2..=10);
        let k = rng.gen_range(0..=3);
        let (d_in, d_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let density = rng.gen_range(0.1..0.9);
        let g = random_graph(&mut rng, n, density);
        let x = inputs(&mut rng, &[n, d_in]);
        let wf: Vec<Tensor> = (0..=k).map(|_| inputs(&mut rng, &[d_in, d_out])).collect();
        let wb: Vec<Tensor> = (0..=k).map(|_| inputs(&mut rng, &[d_in, d_out])).collect();
        let fast = diffusion_conv_values(&g, &x, k, &wf, &wb).unwrap();
        let slow = diffusion_oracle(g.m_forward(), g.m_backward(), &x, &wf, &wb);
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// MAE, RMSE and MAPE by explicit loops; `None` when nothing is valid.
pub fn metrics_oracle(y: &[f64], y_hat: &[f64], mask: &[f64]) -> Option<(f64, f64, f64, usize)> {
    let (mut abs, mut sq, mut ape) = (0.0, 0.0, 0.0);
    let (mut n, mut n_ape) = (0usize, 0usize);
    for i in 0..y.len() {
        if mask[i] == 0.0 {
            continue;
        }
        let e = y_hat[i] - y[i];
        abs += e.abs();
        sq += e * e;
        n += 1;
        if y[i] != 0.0 {
            ape += (e / y[i]).abs();
            n_ape += 1;
        }
    }
    if n == 0 || n_ape == 0 {
        return None;
    }
    Some((abs / n as f64, (sq / n as f64).sqrt(), ape / n_ape as f64, n))
}

/// Largest relative gap between two metric values.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
