//! Convolutional encoder: a stack of ST-Conv blocks followed by a
//! projection that collapses the time axis into the decoder's initial
//! hidden state.
//!
//! Tensors flowing through the encoder are laid out `[B, P, N, D]`
//! (batch, time, node, feature); the batch axis may be omitted.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{diffusion_conv, graph_conv, GraphVars};
use crate::params::{Binding, ParamId, ParamStore};

/// 1-D convolution along time with symmetric zero padding, followed by a
/// gated linear unit over the two halves of the output channels.
#[derive(Clone, Debug)]
pub struct TemporalGatedConv {
    /// `[K_t, 1, D_in, 2 * D_out]`
    pub kernel: ParamId,
    /// `[2 * D_out]`
    pub bias: ParamId,
    kernel_size: usize,
    d_in: usize,
    d_out: usize,
}

impl TemporalGatedConv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kernel_size: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel size must be odd, got {kernel_size}")));
        }
        Ok(TemporalGatedConv {
            kernel: store.glorot(format!("{prefix}.kernel"), &[kernel_size, 1, d_in, 2 * d_out], rng),
            bias: store.zeros(format!("{prefix}.bias"), &[2 * d_out]),
            kernel_size,
            d_in,
            d_out,
        })
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Pre-gate convolution output `[.., P, N, 2 * D_out]`.
    pub fn convolve(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if !(3..=4).contains(&shape.len()) || shape[shape.len() - 1] != self.d_in {
            return Err(Error::dim(
                "temporal_gated_conv",
                format!("kernel expects [.., P, N, {}], got {shape:?}", self.d_in),
            ));
        }
        let time_axis = shape.len() - 3;
        let pad = (self.kernel_size / 2) as isize;
        let kernel = params.var(self.kernel);
        let mut acc: Option<Var> = None;
        for k in 0..self.kernel_size {
            let tap = tape.slice(kernel, 0, k, 1)?;
            let tap = tape.reshape(tap, [self.d_in, 2 * self.d_out])?;
            let shifted = tape.shift(x, time_axis, k as isize - pad)?;
            let term = tape.matmul(shifted, tap)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        tape.add(acc.expect("kernel size >= 1"), params.var(self.bias))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let conv = self.convolve(tape, params, x)?;
        let last = tape.value(conv).rank() - 1;
        let p = tape.slice(conv, last, 0, self.d_out)?;
        let q = tape.slice(conv, last, self.d_out, self.d_out)?;
        let gate = tape.sigmoid(q);
        tape.mul(p, gate)
    }
}

/// Sum of a graph convolution over an extra (dynamic) adjacency and a
/// bidirectional diffusion convolution over the road graph, applied to
/// every time slot.
#[derive(Clone, Debug)]
pub struct SpatialConv {
    /// Present when the block mixes with an extra adjacency.
    pub w_extra: Option<ParamId>,
    pub w_forward: Vec<ParamId>,
    pub w_backward: Vec<ParamId>,
    pub bias: ParamId,
    max_step: usize,
}

impl SpatialConv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        max_step: usize,
        with_extra: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_extra = with_extra.then(|| store.glorot(format!("{prefix}.w_pa"), &[d_in, d_out], rng));
        let w_forward = (0..=max_step)
            .map(|k| store.glorot(format!("{prefix}.w_forward.{k}"), &[d_in, d_out], rng))
            .collect();
        let w_backward = (0..=max_step)
            .map(|k| store.glorot(format!("{prefix}.w_backward.{k}"), &[d_in, d_out], rng))
            .collect();
        SpatialConv { w_extra, w_forward, w_backward, bias: store.zeros(format!("{prefix}.bias"), &[d_out]), max_step }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        extra_adjacency: Option<Var>,
        x: Var,
    ) -> Result<Var> {
        let wf: Vec<Var> = self.w_forward.iter().map(|&p| params.var(p)).collect();
        let wb: Vec<Var> = self.w_backward.iter().map(|&p| params.var(p)).collect();
        let mut out = diffusion_conv(tape, graph, x, self.max_step, &wf, &wb)?;
        match (self.w_extra, extra_adjacency) {
            (Some(w), Some(a)) => {
                let mixed = extra_mix(tape, a, x, params.var(w))?;
                out = tape.add(out, mixed)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Usage("spatial conv expects an extra adjacency".into())),
            (None, Some(_)) => return Err(Error::Usage("spatial conv has no weights for an extra adjacency".into())),
        }
        tape.add(out, params.var(self.bias))
    }
}

/// `A X W` where `A` is one `[N, N]` matrix shared by every sample or a
/// `[B, N, N]` stack matched to the batch axis of `x: [B, P, N, D]`.
fn extra_mix(tape: &mut Tape, a: Var, x: Var, w: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let a_shape = tape.value(a).shape().to_vec();
    let n = xs[xs.len() - 2];
    let bad = || Error::dim("spatial_conv", format!("adjacency {a_shape:?} for input {xs:?}"));
    match (&a_shape[..], &xs[..]) {
        (&[r, c], _) if r == n && c == n => graph_conv(tape, a, x, w),
        (&[b, r, c], &[bx, p, _, _]) if b == bx && r == n && c == n => {
            let xw = tape.matmul(x, w)?;
            let d_out = tape.value(xw).shape()[3];
            let by_node = tape.swap_axes(xw, 1, 2)?;
            let flat = tape.reshape(by_node, [b, n, p * d_out])?;
            let mixed = tape.bmm(a, flat)?;
            let mixed = tape.reshape(mixed, [b, n, p, d_out])?;
            tape.swap_axes(mixed, 1, 2)
        }
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug)]
pub struct StConvBlock {
    pub temporal: TemporalGatedConv,
    pub spatial: SpatialConv,
}

impl StConvBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        extra_adjacency: Option<Var>,
        x: Var,
    ) -> Result<Var> {
        let t = self.temporal.forward(tape, params, x)?;
        self.spatial.forward(tape, params, graph, extra_adjacency, t)
    }
}

/// Temporal convolution with kernel size `P` and no padding:
/// `[.., P, N, D]` to `[.., N, D_out]`.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `[P, 1, D, D_out]`
    pub kernel: ParamId,
    pub bias: ParamId,
    window: usize,
    d_in: usize,
    d_out: usize,
}

impl Projection {
    pub fn new(store: &mut ParamStore, prefix: &str, window: usize, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Projection {
            kernel: store.glorot(format!("{prefix}.kernel"), &[window, 1, d_in, d_out], rng),
            bias: store.zeros(format!("{prefix}.bias"), &[d_out]),
            window,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, s: Var) -> Result<Var> {
        let shape = tape.value(s).shape().to_vec();
        let r = shape.len();
        if !(3..=4).contains(&r) || shape[r - 3] != self.window || shape[r - 1] != self.d_in {
            return Err(Error::dim(
                "projection",
                format!("expects [.., {}, N, {}], got {shape:?}", self.window, self.d_in),
            ));
        }
        let by_node = tape.swap_axes(s, r - 3, r - 2)?;
        let mut flat_shape = shape[..r - 3].to_vec();
        flat_shape.extend([shape[r - 2], self.window * self.d_in]);
        let flat = tape.reshape(by_node, flat_shape)?;
        let kernel = tape.reshape(params.var(self.kernel), [self.window * self.d_in, self.d_out])?;
        let out = tape.matmul(flat, kernel)?;
        tape.add(out, params.var(self.bias))
    }
}

/// Encoder output: the last block's sequence and the projected state.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `[B, P, N, D]`
    pub s: Var,
    /// `[B, N, D_out]`
    pub h0: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<StConvBlock>,
    pub projection: Projection,
}

pub struct EncoderShape {
    pub window: usize,
    pub input_dim: usize,
    pub hidden: usize,
    /// Channels produced by the projection (hidden size, or `Q * C` when the
    /// decoder is removed).
    pub projection_dim: usize,
    pub layers: usize,
    pub temporal_kernel: usize,
    pub max_step: usize,
    pub with_extra_adjacency: bool,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, shape: &EncoderShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        if shape.layers == 0 {
            return Err(Error::Config("encoder needs at least one ST-Conv block".into()));
        }
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let d_in = if l == 0 { shape.input_dim } else { shape.hidden };
            let temporal = TemporalGatedConv::new(
                store,
                &format!("{prefix}.block{l}.temporal"),
                shape.temporal_kernel,
                d_in,
                shape.hidden,
                rng,
            )?;
            let spatial = SpatialConv::new(
                store,
                &format!("{prefix}.block{l}.spatial"),
                shape.hidden,
                shape.hidden,
                shape.max_step,
                shape.with_extra_adjacency,
                rng,
            );
            blocks.push(StConvBlock { temporal, spatial });
        }
        let projection = Projection::new(
            store,
            &format!("{prefix}.projection"),
            shape.window,
            shape.hidden,
            shape.projection_dim,
            rng,
        );
        Ok(Encoder { blocks, projection })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        extra_adjacency: Option<Var>,
        x: Var,
    ) -> Result<EncodedSequence> {
        let mut s = x;
        for block in &self.blocks {
            s = block.forward(tape, params, graph, extra_adjacency, s)?;
        }
        let h0 = self.projection.forward(tape, params, s)?;
        Ok(EncodedSequence { s, h0 })
    }
}
