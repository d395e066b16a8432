//! Toy-scale ResNet and VGG speaker embedders.
//!
//! Both families share a static 3×3 stem followed by four stages, each of
//! which halves the frequency and time extents with its first convolution.
//! In `dy` and `tdy` mode every convolution after the stem (shortcut
//! projections included) is a [`TdyConvLayer`]. The final feature map is
//! averaged over frequency and projected to the embedding size, giving one
//! embedding per remaining time bin; the utterance embedding is their mean.
//!
//! Inputs shorter than [`Model::min_frames`] (16 frames, the cumulative
//! time stride) are rejected.

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, N_MELS};
use crate::dynconv::{AttentionMap, AttentionScope, TdyConvLayer};
use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::{BatchNormMode, ConvGeometry, TimePadding};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{BnStats, ConvBn, ConvUnit, ForwardRecord, Linear, StaticConv};

const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Resnet,
    Vgg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Static,
    Dy,
    Tdy,
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvMode::Static => "static",
            ConvMode::Dy => "dy",
            ConvMode::Tdy => "tdy",
        })
    }
}

impl FromStr for ConvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ConvMode::Static),
            "dy" => Ok(ConvMode::Dy),
            "tdy" => Ok(ConvMode::Tdy),
            other => Err(Error::Config(format!("unknown conv mode {other:?}"))),
        }
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Family::Resnet),
            "vgg" => Ok(Family::Vgg),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    /// Blocks (resnet) or convolutions (vgg) per stage.
    pub depth: Vec<usize>,
    pub channel_scale: f64,
    pub conv_mode: ConvMode,
    pub k: usize,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Resnet,
            depth: vec![1; STAGES],
            channel_scale: 0.25,
            conv_mode: ConvMode::Tdy,
            k: 6,
            embedding_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return Err(Error::Config(format!("channel_scale must be positive, got {}", self.channel_scale)));
        }
        if self.depth.len() != STAGES || self.depth.contains(&0) {
            return Err(Error::Config(format!("depth must list {STAGES} positive stage sizes, got {:?}", self.depth)));
        }
        if self.conv_mode != ConvMode::Static && self.k == 0 {
            return Err(Error::Config("k must be at least 1 for dynamic convolutions".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the stem and of stage 1.
    pub fn base_width(&self) -> usize {
        ((16.0 * self.channel_scale).round() as usize).max(1)
    }

    /// Canonical text form, as stored in checkpoints.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn count_parameters(&self) -> Result<usize> {
        Ok(build_model(self, 0)?.count_parameters())
    }
}

/// One residual block: `relu(bn(conv2(relu(bn(conv1 x)))) + shortcut x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub shortcut: Option<ConvBn>,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Res(Vec<ResBlock>),
    Plain(Vec<ConvBn>),
}

/// A dynamic layer's position in the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicLayerInfo {
    pub layer_id: usize,
    pub name: String,
    /// Cumulative time stride of the layer output relative to the input frames.
    pub time_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
    pub proj: Linear,
}

/// Everything the forward pass records on the tape.
pub struct ForwardOutput {
    /// `[N, T_f, D]`
    pub frames: Var,
    /// `(layer_id, π [N, T_att, K], T')` per dynamic layer, in forward order.
    pub attention: Vec<(usize, Var, usize)>,
    pub bn_stats: Vec<BnStats>,
    /// `[N, C, F, T]` after the stem and after every stage.
    pub stage_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Tensor,
    pub speaker_id: Option<String>,
}

/// Frame-level embeddings `[D, T_f]` and the attention maps by layer id.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings {
    pub frames: Tensor,
    pub attention: BTreeMap<usize, AttentionMap>,
}

/// Shrinks the initial attention logits so the kernel mix stays close to
/// uniform until the attention weights have been trained.
pub const ATTENTION_OUTPUT_GAIN: f64 = 0.1;

struct Builder {
    rng: ChaCha8Rng,
    mode: ConvMode,
    k: usize,
    next_id: usize,
}

impl Builder {
    fn conv_bn(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        in_freq: usize,
    ) -> Result<ConvBn> {
        let pad = kernel / 2;
        let geom = ConvGeometry::new((stride, stride), (pad, pad)).with_time_padding(TimePadding::Circular);
        let conv_name = format!("{name}.conv");
        let conv = match self.mode {
            ConvMode::Static => {
                ConvUnit::Static(StaticConv::new(conv_name, c_in, c_out, (kernel, kernel), geom, &mut self.rng))
            }
            ConvMode::Dy | ConvMode::Tdy => {
                let mut layer =
                    TdyConvLayer::new(conv_name, c_in, c_out, (kernel, kernel), in_freq, self.k, geom, &mut self.rng)?;
                layer.attn_w2.data_mut().iter_mut().for_each(|w| *w *= ATTENTION_OUTPUT_GAIN);
                layer.layer_id = self.next_id;
                self.next_id += 1;
                let scope = if self.mode == ConvMode::Tdy { AttentionScope::Frame } else { AttentionScope::Utterance };
                ConvUnit::Dynamic { layer, scope }
            }
        };
        Ok(ConvBn::new(conv, c_out, format!("{name}.bn")))
    }
}

/// Deterministic construction from `cfg` and `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), mode: ConvMode::Static, k: cfg.k, next_id: 0 };
    let width = cfg.base_width();
    let stem_geom = ConvGeometry::new((1, 1), (1, 1)).with_time_padding(TimePadding::Circular);
    let stem = ConvBn::new(
        ConvUnit::Static(StaticConv::new("stem.conv", 1, width, (3, 3), stem_geom, &mut b.rng)),
        width,
        "stem.bn",
    );
    b.mode = cfg.conv_mode;
    let mut stages = Vec::with_capacity(STAGES);
    let (mut c_in, mut freq) = (width, N_MELS);
    for (s, &depth) in cfg.depth.iter().enumerate() {
        let c_out = width << s;
        let stage = match cfg.family {
            Family::Resnet => {
                let mut blocks = Vec::with_capacity(depth);
                for j in 0..depth {
                    let stride = if j == 0 { 2 } else { 1 };
                    let name = format!("s{}.b{}", s + 1, j + 1);
                    let shortcut = if stride != 1 || c_in != c_out {
                        Some(b.conv_bn(&format!("{name}.short"), c_in, c_out, 1, stride, freq)?)
                    } else {
                        None
                    };
                    let conv1 = b.conv_bn(&format!("{name}.c1"), c_in, c_out, 3, stride, freq)?;
                    freq = freq.div_ceil(stride);
                    let conv2 = b.conv_bn(&format!("{name}.c2"), c_out, c_out, 3, 1, freq)?;
                    blocks.push(ResBlock { shortcut, conv1, conv2 });
                    c_in = c_out;
                }
                Stage::Res(blocks)
            }
            Family::Vgg => {
                let mut convs = Vec::with_capacity(depth);
                for j in 0..depth {
                    let stride = if j == 0 { 2 } else { 1 };
                    convs.push(b.conv_bn(&format!("s{}.c{}", s + 1, j + 1), c_in, c_out, 3, stride, freq)?);
                    freq = freq.div_ceil(stride);
                    c_in = c_out;
                }
                Stage::Plain(convs)
            }
        };
        stages.push(stage);
    }
    let proj = Linear::new("proj", c_in, cfg.embedding_dim, &mut b.rng);
    Ok(Model { config: cfg.clone(), stem, stages, proj })
}

impl Model {
    /// Shortest accepted input, in frames.
    pub fn min_frames(&self) -> usize {
        self.frame_stride()
    }

    /// Cumulative time stride of the frame embeddings.
    pub fn frame_stride(&self) -> usize {
        1 << STAGES
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut out = vec![&self.stem];
        for stage in &self.stages {
            match stage {
                Stage::Res(blocks) => {
                    for blk in blocks {
                        out.extend(blk.shortcut.iter());
                        out.push(&blk.conv1);
                        out.push(&blk.conv2);
                    }
                }
                Stage::Plain(convs) => out.extend(convs.iter()),
            }
        }
        out
    }

    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = vec![&mut self.stem];
        for stage in &mut self.stages {
            match stage {
                Stage::Res(blocks) => {
                    for blk in blocks {
                        out.extend(blk.shortcut.iter_mut());
                        out.push(&mut blk.conv1);
                        out.push(&mut blk.conv2);
                    }
                }
                Stage::Plain(convs) => out.extend(convs.iter_mut()),
            }
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self.conv_bns().into_iter().flat_map(|c| c.named_params()).collect();
        out.extend(self.proj.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let Model { stem, stages, proj, .. } = self;
        out.extend(stem.named_params_mut());
        for stage in stages {
            match stage {
                Stage::Res(blocks) => {
                    for blk in blocks {
                        if let Some(s) = &mut blk.shortcut {
                            out.extend(s.named_params_mut());
                        }
                        out.extend(blk.conv1.named_params_mut());
                        out.extend(blk.conv2.named_params_mut());
                    }
                }
                Stage::Plain(convs) => {
                    for c in convs {
                        out.extend(c.named_params_mut());
                    }
                }
            }
        }
        out.extend(proj.named_params_mut());
        out
    }

    /// Trainable parameters plus running statistics and layer temperatures.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for cb in self.conv_bns() {
            for (n, t) in cb.named_buffers() {
                out.insert(n, t.clone());
            }
            if let Some(layer) = cb.conv.dynamic() {
                out.insert(format!("{}.temperature", layer.name), Tensor::scalar(layer.temperature()));
            }
        }
        out
    }

    /// Overwrites every entry of [`Model::state`] from `state`; names and
    /// shapes must match exactly.
    pub fn load_state(&mut self, mut state: BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() || expected.keys().any(|k| !state.contains_key(k)) {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        for (name, t) in &expected {
            if state[name].shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
        }
        let mut take = |name: &str| state.remove(name).expect("checked");
        for (name, t) in self.named_params_mut() {
            let requires = t.requires_grad();
            *t = take(&name).with_requires_grad(requires);
        }
        for cb in self.conv_bns_mut() {
            for (name, t) in cb.named_buffers_mut() {
                *t = take(&name);
            }
            if let Some(layer) = cb.conv.dynamic_mut() {
                let tau = take(&format!("{}.temperature", layer.name)).data()[0];
                layer.set_temperature(tau)?;
            }
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Kernel and bias scalars of all convolutions.
    pub fn conv_parameter_count(&self) -> usize {
        self.conv_bns().iter().map(|c| c.conv.conv_param_count()).sum()
    }

    pub fn dynamic_layers(&self) -> Vec<DynamicLayerInfo> {
        let mut out = Vec::new();
        let mut stride = 1;
        let mut visit = |unit: &ConvBn, s: usize| {
            if let Some(layer) = unit.conv.dynamic() {
                out.push(DynamicLayerInfo { layer_id: layer.layer_id, name: layer.name.clone(), time_stride: s });
            }
        };
        for stage in &self.stages {
            match stage {
                Stage::Res(blocks) => {
                    for blk in blocks {
                        let s = stride * blk.conv1.conv.time_stride();
                        if let Some(sc) = &blk.shortcut {
                            visit(sc, s);
                        }
                        visit(&blk.conv1, s);
                        visit(&blk.conv2, s);
                        stride = s;
                    }
                }
                Stage::Plain(convs) => {
                    for c in convs {
                        stride *= c.conv.time_stride();
                        visit(c, stride);
                    }
                }
            }
        }
        out.sort_by_key(|l| l.layer_id);
        out
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        for cb in self.conv_bns_mut() {
            if let Some(layer) = cb.conv.dynamic_mut() {
                layer.set_temperature(temperature)?;
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        let mut by_name: BTreeMap<&str, (&[f64], &[f64])> = BTreeMap::new();
        for (n, m, v) in stats {
            by_name.insert(n.as_str(), (m, v));
        }
        for cb in self.conv_bns_mut() {
            if let Some((m, v)) = by_name.get(cb.bn_name.as_str()) {
                cb.bn.update_running(m, v);
            }
        }
    }

    /// Records the network on `x` of shape `[N, 1, 64, T]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BatchNormMode) -> Result<ForwardOutput> {
        let shape = tape.value(x).shape().to_vec();
        match shape.as_slice() {
            &[_, 1, f, t] if f == N_MELS => {
                if t < self.min_frames() {
                    return Err(Error::TooShort(format!("{t} frames, need at least {}", self.min_frames())));
                }
            }
            s => return dim_err(format!("model expects [N, 1, {N_MELS}, T], got {s:?}")),
        }
        let mut rec = ForwardRecord::default();
        let mut shapes = Vec::new();
        let h = self.stem.forward_tape(tape, x, mode, &mut rec)?;
        let mut h = tape.relu(h);
        shapes.push(tape.value(h).shape().to_vec());
        for stage in &self.stages {
            match stage {
                Stage::Res(blocks) => {
                    for blk in blocks {
                        let short = match &blk.shortcut {
                            Some(s) => s.forward_tape(tape, h, mode, &mut rec)?,
                            None => h,
                        };
                        let a = blk.conv1.forward_tape(tape, h, mode, &mut rec)?;
                        let a = tape.relu(a);
                        let a = blk.conv2.forward_tape(tape, a, mode, &mut rec)?;
                        let sum = tape.add(a, short)?;
                        h = tape.relu(sum);
                    }
                }
                Stage::Plain(convs) => {
                    for c in convs {
                        let a = c.forward_tape(tape, h, mode, &mut rec)?;
                        h = tape.relu(a);
                    }
                }
            }
            shapes.push(tape.value(h).shape().to_vec());
        }
        let pooled = tape.freq_mean_frames(h)?;
        let frames = self.proj.forward_tape(tape, pooled)?;
        Ok(ForwardOutput { frames, attention: rec.attention, bn_stats: rec.bn_stats, stage_shapes: shapes })
    }

    fn batch_input(mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let Some(first) = mels.first() else {
            return dim_err("empty batch");
        };
        let t = first.frames();
        let mut data = Vec::with_capacity(mels.len() * N_MELS * t);
        for m in mels {
            if m.values.shape() != [N_MELS, t] {
                return dim_err(format!("batch members must share shape [{N_MELS}, {t}], got {:?}", m.values.shape()));
            }
            data.extend_from_slice(m.values.data());
        }
        Tensor::new([mels.len(), 1, N_MELS, t], data)
    }

    /// Inference-mode frame embeddings `[N, T_f, D]` for equally long inputs.
    pub fn embed_frames_batch(&self, mels: &[&MelSpectrogram]) -> Result<(Tensor, Vec<BTreeMap<usize, AttentionMap>>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(Self::batch_input(mels)?);
        let out = self.forward(&mut tape, x, BatchNormMode::Eval)?;
        let frames = tape.value(out.frames).clone();
        frames.check_finite("frame embeddings")?;
        let mut maps = vec![BTreeMap::new(); mels.len()];
        let temps: BTreeMap<usize, f64> =
            self.conv_bns().iter().filter_map(|c| c.conv.dynamic()).map(|l| (l.layer_id, l.temperature())).collect();
        for (id, pi, t_out) in out.attention {
            let p = tape.value(pi);
            let (t_att, k) = (p.shape()[1], p.shape()[2]);
            for (n, m) in maps.iter_mut().enumerate() {
                let mut w = Tensor::zeros([k, t_out]);
                for t in 0..t_out {
                    let src = if t_att == 1 { 0 } else { t };
                    for kk in 0..k {
                        w.set(&[kk, t], p.at(&[n, src, kk]));
                    }
                }
                m.insert(id, AttentionMap { weights: w, layer_id: id, temperature: temps[&id] });
            }
        }
        Ok((frames, maps))
    }

    /// Utterance embeddings `[N, D]` for equally long inputs.
    pub fn embed_batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let (frames, _) = self.embed_frames_batch(mels)?;
        let (n, t, d) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
        let mut out = vec![0.0; n * d];
        for ni in 0..n {
            for ti in 0..t {
                for (o, v) in out[ni * d..(ni + 1) * d].iter_mut().zip(&frames.data()[(ni * t + ti) * d..][..d]) {
                    *o += v / t as f64;
                }
            }
        }
        Tensor::new([n, d], out)
    }
}

/// Per-frame embeddings `[D, T_f]` and the attention maps of every dynamic layer.
pub fn embed_frames(model: &Model, mel: &MelSpectrogram) -> Result<FrameEmbeddings> {
    let (frames, mut maps) = model.embed_frames_batch(&[mel])?;
    let (t, d) = (frames.shape()[1], frames.shape()[2]);
    let mut out = Tensor::zeros([d, t]);
    for ti in 0..t {
        for di in 0..d {
            out.set(&[di, ti], frames.data()[ti * d + di]);
        }
    }
    Ok(FrameEmbeddings { frames: out, attention: maps.remove(0) })
}

/// Time average of [`embed_frames`].
pub fn embed_utterance(model: &Model, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
    let e = model.embed_batch(&[mel])?;
    let d = e.shape()[1];
    Ok(SpeakerEmbedding { vector: e.reshape([d])?, speaker_id: None })
}

pub fn count_parameters(model: &Model) -> usize {
    model.count_parameters()
}
