//! One-stream and two-stream convolutional LSTM models and a single-frame
//! CNN baseline.
//!
//! Every stream is `layers` blocks of (recurrent or plain convolution →
//! 2×2 max pool → batch norm). Two-stream models fuse the last block outputs
//! of the RGB and flow streams elementwise, apply dropout, and share one
//! time-distributed dense head with a per-unit sigmoid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::nn::{
    clstm_layer, dense, dropout, BatchNormSpec, BatchNormUpdate, Bound, ClstmSpec, DenseSpec, LayerSpec, Mode,
    ParamStore,
};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Clstm1,
    Clstm2,
    FrameCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionMode {
    None,
    Add,
    Mult,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($t), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(ModelKind { Clstm1 => "clstm1", Clstm2 => "clstm2", FrameCnn => "framecnn" });
text_enum!(Modality { Rgb => "rgb", Flow => "flow", Both => "both" });
text_enum!(FusionMode { None => "none", Add => "add", Mult => "mult" });

impl Modality {
    pub fn streams(self) -> &'static [Modality] {
        match self {
            Modality::Rgb => &[Modality::Rgb],
            Modality::Flow => &[Modality::Flow],
            Modality::Both => &[Modality::Rgb, Modality::Flow],
        }
    }

    pub fn uses_flow(self) -> bool {
        self != Modality::Rgb
    }

    pub fn uses_rgb(self) -> bool {
        self != Modality::Flow
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    fn base(kind: ModelKind, modality: Modality, fusion: FusionMode) -> Self {
        Self {
            kind,
            modality,
            fusion,
            hidden: 32,
            kernel: 5,
            layers: 4,
            frames: 10,
            height: 128,
            width: 128,
            channels: 3,
            dropout: 0.2,
            bn_momentum: BatchNormSpec::DEFAULT_MOMENTUM,
            bn_epsilon: BatchNormSpec::DEFAULT_EPSILON,
        }
    }

    pub fn clstm1(modality: Modality) -> Self {
        Self::base(ModelKind::Clstm1, modality, FusionMode::None)
    }

    pub fn clstm2(fusion: FusionMode) -> Self {
        Self::base(ModelKind::Clstm2, Modality::Both, fusion)
    }

    pub fn frame_cnn(modality: Modality) -> Self {
        Self::base(ModelKind::FrameCnn, modality, FusionMode::None)
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        match self.kind {
            ModelKind::Clstm2 => {
                if self.modality != Modality::Both {
                    return cfg("clstm2 takes both modalities".into());
                }
                if self.fusion == FusionMode::None {
                    return cfg("clstm2 needs fusion add or mult".into());
                }
            }
            _ => {
                if self.modality == Modality::Both {
                    return cfg(format!("{} is single-stream; modality must be rgb or flow", self.kind));
                }
                if self.fusion != FusionMode::None {
                    return cfg(format!("{} has no fusion", self.kind));
                }
            }
        }
        if self.kernel % 2 == 0 || self.hidden == 0 || self.layers == 0 || self.frames == 0 {
            return cfg(format!("bad architecture {self:?}"));
        }
        let div = 1usize << self.layers;
        if self.height % div != 0 || self.width % div != 0 {
            return cfg(format!(
                "{}x{} input cannot be halved {} times",
                self.height, self.width, self.layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Feature extent entering the head per timestep.
    pub fn head_inputs(&self) -> usize {
        let div = 1usize << self.layers;
        (self.height / div) * (self.width / div) * self.hidden
    }

    pub fn stream_layers(&self) -> Result<Vec<LayerSpec>> {
        let mut out = Vec::with_capacity(3 * self.layers);
        let mut cin = self.channels;
        for _ in 0..self.layers {
            out.push(match self.kind {
                ModelKind::FrameCnn => LayerSpec::Conv {
                    in_channels: cin,
                    out_channels: self.hidden,
                    kernel: self.kernel,
                },
                _ => LayerSpec::Clstm(ClstmSpec::new(cin, self.hidden, self.kernel)?),
            });
            out.push(LayerSpec::MaxPool);
            out.push(LayerSpec::BatchNorm(BatchNormSpec {
                channels: self.hidden,
                momentum: self.bn_momentum,
                epsilon: self.bn_epsilon,
            }));
            cin = self.hidden;
        }
        Ok(out)
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("model", self.kind.to_string()),
            ("modality", self.modality.to_string()),
            ("fusion", self.fusion.to_string()),
            ("hidden", self.hidden.to_string()),
            ("kernel", self.kernel.to_string()),
            ("layers", self.layers.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("dropout", self.dropout.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_epsilon", self.bn_epsilon.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Build from `key=value` settings. `model` is required; everything else
    /// falls back to the per-model defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let kind: ModelKind = kv
            .get("model")
            .ok_or_else(|| Error::Config("missing key `model`".into()))?
            .parse()?;
        let mut c = match kind {
            ModelKind::Clstm1 => Self::clstm1(Modality::Rgb),
            ModelKind::Clstm2 => Self::clstm2(FusionMode::Add),
            ModelKind::FrameCnn => Self::frame_cnn(Modality::Rgb),
        };
        fn num<T: FromStr>(kv: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))?;
            }
            Ok(())
        }
        if let Some(m) = kv.get("modality") {
            c.modality = m.parse()?;
        }
        if let Some(f) = kv.get("fusion") {
            c.fusion = f.parse()?;
        }
        num(kv, "hidden", &mut c.hidden)?;
        num(kv, "kernel", &mut c.kernel)?;
        num(kv, "layers", &mut c.layers)?;
        num(kv, "frames", &mut c.frames)?;
        num(kv, "height", &mut c.height)?;
        num(kv, "width", &mut c.width)?;
        num(kv, "dropout", &mut c.dropout)?;
        num(kv, "bn_momentum", &mut c.bn_momentum)?;
        num(kv, "bn_epsilon", &mut c.bn_epsilon)?;
        c.validate()?;
        Ok(c)
    }
}

/// Input tensors for one forward pass, each `[B, T, H, W, 3]`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub rgb: Option<Tensor>,
    pub flow: Option<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.rgb.as_ref().or(self.flow.as_ref()).map_or(0, |t| t.shape()[0])
    }
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub bound: Bound,
    /// `[B, T, 2]` per-frame class probabilities.
    pub probs: NodeId,
    /// Last block output of each stream, `[B, T, h, w, C]`, in stream order.
    pub stream_outputs: Vec<NodeId>,
    /// Fused feature map for two-stream models.
    pub fused: Option<NodeId>,
    pub bn_updates: Vec<BatchNormUpdate>,
}

/// Output nodes of [`Model::forward_in`].
#[derive(Debug)]
pub struct ForwardNodes {
    pub probs: NodeId,
    pub stream_outputs: Vec<NodeId>,
    pub fused: Option<NodeId>,
    pub bn_updates: Vec<BatchNormUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub config: ModelConfig,
    pub head: DenseSpec,
    pub params: ParamStore,
}

pub const CLASSES: usize = 2;

fn stream_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Rgb => "stream_rgb",
        Modality::Flow => "stream_flow",
        Modality::Both => unreachable!("streams are single-modality"),
    }
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed);
        let mut params = ParamStore::new();
        let layers = config.stream_layers()?;
        for &m in config.modality.streams() {
            let prefix = stream_prefix(m);
            for (block, chunk) in layers.chunks(3).enumerate() {
                let i = block + 1;
                for layer in chunk {
                    match layer {
                        LayerSpec::Clstm(s) => s.init(&mut params, &format!("{prefix}/clstm_{i}"), &mut rng),
                        LayerSpec::Conv { in_channels, out_channels, kernel } => {
                            let k = *kernel;
                            params.insert(
                                format!("{prefix}/conv_{i}/kernel"),
                                crate::nn::init::glorot_uniform(&[k, k, *in_channels, *out_channels], &mut rng),
                                true,
                            );
                            params.insert(format!("{prefix}/conv_{i}/bias"), Tensor::zeros(&[*out_channels]), true);
                        }
                        LayerSpec::BatchNorm(b) => b.init(&mut params, &format!("{prefix}/bn_{i}")),
                        _ => {}
                    }
                }
            }
        }
        let head = DenseSpec {
            inputs: config.head_inputs(),
            units: CLASSES,
        };
        head.init(&mut params, "head", &mut rng);
        let name = match config.kind {
            ModelKind::Clstm1 => format!("clstm1_{}", config.modality),
            ModelKind::Clstm2 => format!("clstm2_{}", config.fusion),
            ModelKind::FrameCnn => format!("framecnn_{}", config.modality),
        };
        Ok(Self { name, config, head, params })
    }

    /// (trainable, total); total includes batch-norm moving statistics.
    pub fn count_parameters(&self) -> (usize, usize) {
        self.params.count()
    }

    /// Closed-form count from the layer specs alone.
    pub fn expected_parameters(config: &ModelConfig) -> Result<usize> {
        let per_stream: usize = config.stream_layers()?.iter().map(LayerSpec::param_count).sum();
        let head = DenseSpec {
            inputs: config.head_inputs(),
            units: CLASSES,
        };
        Ok(per_stream * config.modality.streams().len() + head.param_count())
    }

    fn check_input(&self, t: Option<&Tensor>, which: &str) -> Result<Tensor> {
        let t = t.ok_or_else(|| Error::Usage(format!("{} needs {which} input", self.name)))?;
        let c = &self.config;
        let s = t.shape();
        if s.len() != 5 || s[1] != c.frames || s[2] != c.height || s[3] != c.width || s[4] != c.channels {
            return Err(Error::dim(
                "forward",
                format!(
                    "{which} input {s:?}, model expects [B, {}, {}, {}, {}]",
                    c.frames, c.height, c.width, c.channels
                ),
            ));
        }
        Ok(t.clone())
    }

    pub fn forward(&self, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<ForwardPass> {
        self.forward_with(batch, mode, rng, &[])
    }

    /// Forward pass where the listed streams' last block outputs are replaced
    /// by fixed tensors before fusion.
    pub fn forward_with(
        &self,
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
        overrides: &[(Modality, Tensor)],
    ) -> Result<ForwardPass> {
        let mut graph = Graph::new();
        let bound = Bound::bind(&mut graph, &self.params);
        let out = self.forward_in(&mut graph, &bound, batch, mode, rng, overrides)?;
        Ok(ForwardPass {
            graph,
            bound,
            probs: out.probs,
            stream_outputs: out.stream_outputs,
            fused: out.fused,
            bn_updates: out.bn_updates,
        })
    }

    /// Record the forward pass into an existing graph using already bound
    /// parameter nodes.
    pub fn forward_in(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
        overrides: &[(Modality, Tensor)],
    ) -> Result<ForwardNodes> {
        let c = &self.config;
        let layers = c.stream_layers()?;
        let mut bn_updates = Vec::new();
        let mut stream_outputs = Vec::new();
        for &m in c.modality.streams() {
            let input = match m {
                Modality::Rgb => self.check_input(batch.rgb.as_ref(), "rgb")?,
                _ => self.check_input(batch.flow.as_ref(), "flow")?,
            };
            let prefix = stream_prefix(m);
            let x = g.constant(input);
            let out = self.stream_forward(g, bound, x, prefix, &layers, mode, &mut bn_updates)?;
            let out = match overrides.iter().find(|(om, _)| *om == m) {
                Some((_, t)) => {
                    if t.shape() != g.shape(out) {
                        return Err(Error::dim("forward", format!("override {:?} vs {:?}", t.shape(), g.shape(out))));
                    }
                    g.constant(t.clone())
                }
                None => out,
            };
            stream_outputs.push(out);
        }
        let (features, fused) = match c.fusion {
            FusionMode::None => (stream_outputs[0], None),
            fusion => {
                let f = fuse(g, fusion, stream_outputs[0], stream_outputs[1])?;
                let d = dropout(g, f, c.dropout, mode, rng)?;
                (d, Some(f))
            }
        };
        let probs = self.head_forward(g, bound, features)?;
        Ok(ForwardNodes {
            probs,
            stream_outputs,
            fused,
            bn_updates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stream_forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        mut x: NodeId,
        prefix: &str,
        layers: &[LayerSpec],
        mode: Mode,
        bn_updates: &mut Vec<BatchNormUpdate>,
    ) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        for (block, chunk) in layers.chunks(3).enumerate() {
            let i = block + 1;
            for layer in chunk {
                x = match layer {
                    LayerSpec::Clstm(spec) => {
                        let w = spec.bind(g, bound, &format!("{prefix}/clstm_{i}"))?;
                        clstm_layer(g, x, &w)?
                    }
                    LayerSpec::Conv { .. } => {
                        // Frames are independent: fold time into the batch axis.
                        let sh = g.shape(x).to_vec();
                        let flat = g.reshape(x, &[b * t, sh[2], sh[3], sh[4]])?;
                        let k = bound.node(&format!("{prefix}/conv_{i}/kernel"))?;
                        let bias = bound.node(&format!("{prefix}/conv_{i}/bias"))?;
                        let y = g.conv2d(flat, k, Some(bias), Padding::Same)?;
                        let y = g.relu(y);
                        let ys = g.shape(y).to_vec();
                        g.reshape(y, &[b, t, ys[1], ys[2], ys[3]])?
                    }
                    LayerSpec::MaxPool => g.max_pool2(x)?,
                    LayerSpec::BatchNorm(spec) => {
                        let (y, upd) = spec.forward(g, x, bound, &self.params, &format!("{prefix}/bn_{i}"), mode)?;
                        bn_updates.extend(upd);
                        y
                    }
                    other => return Err(Error::Config(format!("unexpected stream layer {other:?}"))),
                };
            }
        }
        Ok(x)
    }

    fn head_forward(&self, g: &mut Graph, bound: &Bound, features: NodeId) -> Result<NodeId> {
        let s = g.shape(features).to_vec();
        let (b, t) = (s[0], s[1]);
        let flat = g.reshape(features, &[b * t, self.head.inputs])?;
        let w = bound.node("head/w")?;
        let bias = bound.node("head/b")?;
        let logits = dense(g, flat, w, bias)?;
        let p = g.sigmoid(logits);
        g.reshape(p, &[b, t, CLASSES])
    }

    /// Apply the moving-statistics updates collected in a train-mode pass.
    pub fn apply_bn_updates(&mut self, updates: &[BatchNormUpdate]) -> Result<()> {
        updates.iter().try_for_each(|u| u.apply(&mut self.params))
    }

    /// Per-frame probabilities `[B, T, 2]` in infer mode.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut r = rng::stream(0);
        let pass = self.forward(batch, Mode::Infer, &mut r)?;
        Ok(pass.graph.value(pass.probs).clone())
    }
}

/// Elementwise feature fusion: flow features act as an additive or
/// multiplicative mask on the RGB features.
pub fn fuse(g: &mut Graph, mode: FusionMode, rgb: NodeId, flow: NodeId) -> Result<NodeId> {
    match mode {
        FusionMode::Add => g.add(rgb, flow),
        FusionMode::Mult => g.mul(rgb, flow),
        FusionMode::None => Err(Error::Usage("fusion mode none cannot fuse two streams".into())),
    }
}

pub fn build_clstm1(modality: Modality, seed: u64) -> Result<Model> {
    Model::build(ModelConfig::clstm1(modality), seed)
}

pub fn build_clstm2(fusion: FusionMode, seed: u64) -> Result<Model> {
    Model::build(ModelConfig::clstm2(fusion), seed)
}

pub fn build_frame_cnn(seed: u64) -> Result<Model> {
    Model::build(ModelConfig::frame_cnn(Modality::Rgb), seed)
}

/// Predicted class per frame from `[B, T, 2]` probabilities; exact ties go
/// to class 0.
pub fn frame_labels(probs: &Tensor) -> Vec<Vec<u8>> {
    let s = probs.shape();
    let (b, t) = (s[0], s[1]);
    (0..b)
        .map(|i| {
            (0..t)
                .map(|j| {
                    let p0 = probs.get(&[i, j, 0]);
                    let p1 = probs.get(&[i, j, 1]);
                    u8::from(p1 > p0)
                })
                .collect()
        })
        .collect()
}
