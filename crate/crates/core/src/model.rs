//! Full forecasting model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::{AttentionRecord, DcgruaCell, Decoder, Feed};
use crate::encoder::{EncodedSequence, Encoder, EncoderShape};
use crate::error::{Error, Result};
use crate::graph::{GraphVars, TrafficGraph};
use crate::pam::{PatternEmbedder, SelfAdaptiveAdjacency};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Which adjacency information the encoder's spatial layers see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    /// Road-graph diffusion plus the pattern-aware adjacency.
    Pattern,
    /// Road-graph diffusion only.
    GeoOnly,
    /// Transition matrices replaced by `I`, no extra adjacency.
    Identity,
    /// Road-graph diffusion plus a learned static adjacency.
    SelfAdaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Recurrent decoder with look-back attention.
    Attention,
    /// Recurrent decoder fed only with its previous output.
    NoAttention,
    /// Projection maps straight to all `Q` outputs.
    NoDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    StSeq2Seq { spatial: SpatialMode, decoder: DecoderMode },
    /// Per-node GRU encoder/decoder with attention and dense gates.
    GruBaseline,
}

impl Variant {
    pub const FULL: Variant = Variant::StSeq2Seq { spatial: SpatialMode::Pattern, decoder: DecoderMode::Attention };

    pub fn spatial(self) -> Option<SpatialMode> {
        match self {
            Variant::StSeq2Seq { spatial, .. } => Some(spatial),
            Variant::GruBaseline => None,
        }
    }

    pub fn decoder(self) -> DecoderMode {
        match self {
            Variant::StSeq2Seq { decoder, .. } => decoder,
            Variant::GruBaseline => DecoderMode::Attention,
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

/// Accepts `full`, `identity`, `geo-only`, `self-adpt`, `no-dec`,
/// `no-attn`, `gru-baseline`, and `+`-joined combinations of one spatial
/// and one decoder ablation such as `geo-only+no-attn`.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "gru-baseline" {
            return Ok(Variant::GruBaseline);
        }
        let mut spatial = None;
        let mut decoder = None;
        for part in s.split('+').map(str::trim) {
            let (slot_is_spatial, value) = match part {
                "full" => continue,
                "identity" => (true, Some(SpatialMode::Identity)),
                "geo-only" => (true, Some(SpatialMode::GeoOnly)),
                "self-adpt" => (true, Some(SpatialMode::SelfAdaptive)),
                "no-dec" => {
                    decoder = replace_once(decoder, DecoderMode::NoDecoder, s)?;
                    (false, None)
                }
                "no-attn" => {
                    decoder = replace_once(decoder, DecoderMode::NoAttention, s)?;
                    (false, None)
                }
                other => return Err(Error::Usage(format!("unknown variant {other:?}"))),
            };
            if slot_is_spatial {
                spatial = replace_once(spatial, value.unwrap(), s)?;
            }
        }
        Ok(Variant::StSeq2Seq {
            spatial: spatial.unwrap_or(SpatialMode::Pattern),
            decoder: decoder.unwrap_or(DecoderMode::Attention),
        })
    }
}

fn replace_once<T>(slot: Option<T>, value: T, whole: &str) -> Result<Option<T>> {
    match slot {
        Some(_) => Err(Error::Usage(format!("variant {whole:?} combines two ablations of the same kind"))),
        None => Ok(Some(value)),
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (spatial, decoder) = match *self {
            Variant::GruBaseline => return f.write_str("gru-baseline"),
            Variant::StSeq2Seq { spatial, decoder } => (spatial, decoder),
        };
        let s = match spatial {
            SpatialMode::Pattern => None,
            SpatialMode::GeoOnly => Some("geo-only"),
            SpatialMode::Identity => Some("identity"),
            SpatialMode::SelfAdaptive => Some("self-adpt"),
        };
        let d = match decoder {
            DecoderMode::Attention => None,
            DecoderMode::NoAttention => Some("no-attn"),
            DecoderMode::NoDecoder => Some("no-dec"),
        };
        match (s, d) {
            (None, None) => f.write_str("full"),
            (Some(s), None) => f.write_str(s),
            (None, Some(d)) => f.write_str(d),
            (Some(s), Some(d)) => write!(f, "{s}+{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    /// Channels `C` of the input windows.
    pub input_dim: usize,
    /// Channels predicted (the leading `output_dim` input channels).
    pub output_dim: usize,
    /// History length `P`.
    pub window: usize,
    /// Forecast horizon `Q`.
    pub horizon: usize,
    /// ST-Conv blocks `L`.
    pub layers: usize,
    /// Hidden size `D` of every layer.
    pub hidden: usize,
    /// Pattern embedding size `D_e`.
    pub embed_dim: usize,
    /// Diffusion steps `K`.
    pub max_diffusion_step: usize,
    /// Temporal kernel size `K_t`.
    pub temporal_kernel: usize,
    /// Input channel the pattern embedder reads.
    pub pam_channel: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            input_dim: 1,
            output_dim: 1,
            window: 12,
            horizon: 12,
            layers: 2,
            hidden: 64,
            embed_dim: 64,
            max_diffusion_step: 1,
            temporal_kernel: 3,
            pam_channel: 0,
            variant: Variant::FULL,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("window", self.window),
            ("horizon", self.horizon),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.output_dim > self.input_dim {
            return Err(Error::Config("output_dim cannot exceed input_dim".into()));
        }
        if self.pam_channel >= self.input_dim {
            return Err(Error::Config(format!("pam_channel {} out of range", self.pam_channel)));
        }
        if matches!(self.variant.spatial(), Some(SpatialMode::Pattern)) && self.n_nodes < 2 {
            return Err(Error::Config("pattern-aware adjacency needs at least two nodes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum ExtraAdjacency {
    None,
    Pattern(PatternEmbedder),
    SelfAdaptive(SelfAdaptiveAdjacency),
}

#[derive(Clone, Debug)]
enum EncoderKind {
    Convolutional(Encoder),
    Recurrent(DcgruaCell),
}

/// Values produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[Q, N, output_dim]`, normalised space.
    pub prediction: Var,
    pub attention: Option<AttentionRecord>,
    /// Extra adjacency used by the encoder, `[N, N]`.
    pub adjacency: Option<Var>,
    pub encoded: EncodedSequence,
}

/// Untracked inference result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y: Tensor,
    pub attention: Option<AttentionRecord>,
    pub adjacency: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct StSeq2Seq {
    config: ModelConfig,
    params: ParamStore,
    graph: TrafficGraph,
    extra: ExtraAdjacency,
    encoder: EncoderKind,
    decoder: Option<Decoder>,
}

impl StSeq2Seq {
    pub fn new(config: ModelConfig, graph: &TrafficGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.n_nodes() != config.n_nodes {
            return Err(Error::Config(format!(
                "graph has {} nodes, model configured for {}",
                graph.n_nodes(),
                config.n_nodes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let (graph, extra, encoder, decoder) = match c.variant {
            Variant::GruBaseline => {
                let enc = DcgruaCell::new(&mut params, "encoder.gru", c.input_dim, c.hidden, None, &mut rng);
                let dec = Decoder::new(&mut params, "decoder", c.output_dim, c.hidden, None, true, &mut rng);
                (graph.clone(), ExtraAdjacency::None, EncoderKind::Recurrent(enc), Some(dec))
            }
            Variant::StSeq2Seq { spatial, decoder } => {
                let graph = match spatial {
                    SpatialMode::Identity => graph.with_identity_transitions(),
                    _ => graph.clone(),
                };
                let extra = match spatial {
                    SpatialMode::Pattern => ExtraAdjacency::Pattern(PatternEmbedder::new(
                        &mut params,
                        "pam",
                        c.window,
                        c.embed_dim,
                        &mut rng,
                    )),
                    SpatialMode::SelfAdaptive => ExtraAdjacency::SelfAdaptive(SelfAdaptiveAdjacency::new(
                        &mut params,
                        "self_adaptive.logits",
                        c.n_nodes,
                        &mut rng,
                    )),
                    SpatialMode::GeoOnly | SpatialMode::Identity => ExtraAdjacency::None,
                };
                let projection_dim = match decoder {
                    DecoderMode::NoDecoder => c.horizon * c.output_dim,
                    _ => c.hidden,
                };
                let shape = EncoderShape {
                    window: c.window,
                    input_dim: c.input_dim,
                    hidden: c.hidden,
                    projection_dim,
                    layers: c.layers,
                    temporal_kernel: c.temporal_kernel,
                    max_step: c.max_diffusion_step,
                    with_extra_adjacency: !matches!(extra, ExtraAdjacency::None),
                };
                let encoder = Encoder::new(&mut params, "encoder", &shape, &mut rng)?;
                let dec = match decoder {
                    DecoderMode::NoDecoder => None,
                    mode => Some(Decoder::new(
                        &mut params,
                        "decoder",
                        c.output_dim,
                        c.hidden,
                        Some(c.max_diffusion_step),
                        mode == DecoderMode::Attention,
                        &mut rng,
                    )),
                };
                (graph, extra, EncoderKind::Convolutional(encoder), dec)
            }
        };
        Ok(StSeq2Seq { config, params, graph, extra, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Graph as seen by the model (identity transitions for that ablation).
    pub fn graph(&self) -> &TrafficGraph {
        &self.graph
    }

    pub fn pattern_embedder(&self) -> Option<&PatternEmbedder> {
        match &self.extra {
            ExtraAdjacency::Pattern(p) => Some(p),
            _ => None,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.rank() != 4 || x.shape()[1..] != [c.window, c.n_nodes, c.input_dim] {
            return Err(Error::dim(
                "forward",
                format!("input {:?}, expected [B, {}, {}, {}]", x.shape(), c.window, c.n_nodes, c.input_dim),
            ));
        }
        Ok(())
    }

    /// Records one forward pass on `tape`. `x` is `[B, P, N, C]`; `targets`
    /// (`[B, Q, N, output_dim]`) are needed for ground-truth feeding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        x: &Tensor,
        feed: &mut Feed<'_>,
        targets: Option<&Tensor>,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        let c = &self.config;
        let b = x.shape()[0];
        let graph = self.graph.bind(tape);
        let xv = tape.constant(x.clone());
        let adjacency = match &self.extra {
            ExtraAdjacency::None => None,
            ExtraAdjacency::Pattern(embedder) => {
                let channel = tape.slice(xv, 3, c.pam_channel, 1)?;
                let window = tape.reshape(channel, [b, c.window, c.n_nodes])?;
                Some(embedder.adjacency(tape, params, window)?)
            }
            ExtraAdjacency::SelfAdaptive(s) => Some(s.adjacency(tape, params)),
        };
        let encoded = match &self.encoder {
            EncoderKind::Convolutional(enc) => enc.encode(tape, params, graph, adjacency, xv)?,
            EncoderKind::Recurrent(cell) => self.encode_recurrent(tape, params, graph, cell, xv)?,
        };
        let targets = targets.map(|t| tape.constant(t.clone()));
        let (prediction, attention) = match &self.decoder {
            Some(dec) => dec.decode(tape, params, graph, encoded, c.horizon, feed, targets)?,
            None => {
                let flat = tape.reshape(encoded.h0, [b, c.n_nodes, c.horizon, c.output_dim])?;
                (tape.swap_axes(flat, 1, 2)?, None)
            }
        };
        Ok(ForwardPass { prediction, attention, adjacency, encoded })
    }

    fn encode_recurrent(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: GraphVars,
        cell: &DcgruaCell,
        x: Var,
    ) -> Result<EncodedSequence> {
        let c = &self.config;
        let b = tape.value(x).shape()[0];
        let mut h = tape.constant(Tensor::zeros([b, c.n_nodes, c.hidden]));
        let mut states = Vec::with_capacity(c.window);
        for t in 0..c.window {
            let xt = tape.slice(x, 1, t, 1)?;
            let xt = tape.reshape(xt, [b, c.n_nodes, c.input_dim])?;
            h = cell.step(tape, params, graph, xt, None, h)?;
            states.push(tape.reshape(h, [b, 1, c.n_nodes, c.hidden])?);
        }
        let s = tape.concat(&states, 1)?;
        Ok(EncodedSequence { s, h0: h })
    }

    /// Free-running inference on a batch `[B, P, N, C]` with frozen
    /// parameters.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let pass = self.forward(&mut tape, &params, x, &mut Feed::Free, None)?;
        Ok(Prediction {
            y: tape.value(pass.prediction).clone(),
            attention: pass.attention,
            adjacency: pass.adjacency.map(|a| tape.value(a).clone()),
        })
    }

    /// Free-running inference on one window `[P, N, C]`; outputs drop the
    /// batch axis.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut batched = x.shape().to_vec();
        batched.insert(0, 1);
        let p = self.predict_batch(&x.reshape(batched)?)?;
        let unbatch = |t: Tensor| -> Result<Tensor> {
            match t.rank() {
                2 => Ok(t),
                _ => t.reshape(&t.shape()[1..]),
            }
        };
        Ok(Prediction {
            y: unbatch(p.y)?,
            attention: p.attention.map(|a| a.sample(0)).transpose()?,
            adjacency: p.adjacency.map(unbatch).transpose()?,
        })
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::dim("stack", "no inputs"))?;
    let mut shape = first.shape().to_vec();
    shape.insert(0, 1);
    let lifted: Vec<Tensor> = items.iter().map(|t| t.reshape(shape.clone())).collect::<Result<_>>()?;
    Tensor::concat(&lifted.iter().collect::<Vec<_>>(), 0)
}
