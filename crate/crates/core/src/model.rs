//! The slow-fast transformer classifier.
//!
//! Two convolutional pathways read the keyframe stack at different temporal
//! rates: the slow pathway keeps every `slow_stride`-th frame with wide
//! channels, the fast pathway keeps every frame with narrow channels and a
//! temporal convolution. Their per-frame tokens are projected to a common
//! width, tagged with a pathway embedding and concatenated along the
//! sequence axis (slow first). A stack of pre-norm transformer encoders
//! follows; the sequence is mean-pooled and mapped to class scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_row, Graph, NodeId};
use crate::kernels::Padding;
use crate::nn::{self, AttentionWeights};
use crate::objective::{long_loss_node, LongLossParams};
use crate::rng::Rng;
use crate::tensor::{argmax, Scalar, Tensor};

const SPATIAL_KERNEL: usize = 3;
const TEMPORAL_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Frames per clip fed to the model.
    pub k: usize,
    pub slow_stride: usize,
    pub slow_channels: usize,
    pub fast_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoders: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    /// `(height, width)` of each input frame.
    pub input_hw: (usize, usize),
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            k: 8,
            slow_stride: 4,
            slow_channels: 16,
            fast_channels: 4,
            d_model: 64,
            n_heads: 4,
            n_encoders: 4,
            ffn_dim: 128,
            n_classes: 10,
            in_channels: 1,
            input_hw: (32, 32),
        }
    }
}

impl SftConfig {
    /// The 224×224 input resolution used for full-size experiments.
    pub fn full_resolution() -> Self {
        Self {
            input_hw: (224, 224),
            ..Self::default()
        }
    }

    /// A very small configuration for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            k: 4,
            slow_stride: 2,
            slow_channels: 3,
            fast_channels: 2,
            d_model: 8,
            n_heads: 2,
            n_encoders: 4,
            ffn_dim: 12,
            n_classes: 3,
            in_channels: 1,
            input_hw: (6, 6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("slow_stride", self.slow_stride),
            ("slow_channels", self.slow_channels),
            ("fast_channels", self.fast_channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoders", self.n_encoders),
            ("ffn_dim", self.ffn_dim),
            ("in_channels", self.in_channels),
            ("input height", self.input_hw.0),
            ("input width", self.input_hw.1),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.k % self.slow_stride != 0 {
            return Err(Error::invalid(format!(
                "k={} is not divisible by slow_stride={}",
                self.k, self.slow_stride
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn slow_tokens(&self) -> usize {
        self.k / self.slow_stride
    }

    /// Transformer sequence length: slow tokens plus fast tokens.
    pub fn seq_len(&self) -> usize {
        self.slow_tokens() + self.k
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.k, self.in_channels, self.input_hw.0, self.input_hw.1]
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He normal, fan-in given.
    Relu(usize),
    /// LeCun normal, fan-in given.
    Linear(usize),
    Small,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
struct EncoderSlots {
    ln1_gain: usize,
    ln1_offset: usize,
    attn: [usize; 7],
    ln2_gain: usize,
    ln2_offset: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
}

/// Positions of every parameter in the declared order.
#[derive(Debug, Clone)]
struct Layout {
    slow_conv: [usize; 4],
    fast_conv: [usize; 4],
    fast_temporal: [usize; 2],
    fuse_slow: [usize; 2],
    fuse_fast: [usize; 2],
    pathway: usize,
    embed_w: usize,
    embed_b: usize,
    positions: usize,
    encoders: Vec<EncoderSlots>,
    final_gain: usize,
    final_offset: usize,
    cls_w: usize,
    cls_b: usize,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push((name.into(), shape.to_vec(), init));
        self.specs.len() - 1
    }
}

impl Layout {
    fn build(c: &SftConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
        let mut b = LayoutBuilder { specs: Vec::new() };
        let (cin, cs, cf, d, f, m) = (
            c.in_channels,
            c.slow_channels,
            c.fast_channels,
            c.d_model,
            c.ffn_dim,
            c.n_classes,
        );
        let kk = SPATIAL_KERNEL * SPATIAL_KERNEL;
        let ks = SPATIAL_KERNEL;
        let slow_conv = [
            b.add("slow.conv1.weight", &[cs, cin, ks, ks], Init::Relu(cin * kk)),
            b.add("slow.conv1.bias", &[cs], Init::Zeros),
            b.add("slow.conv2.weight", &[cs, cs, ks, ks], Init::Relu(cs * kk)),
            b.add("slow.conv2.bias", &[cs], Init::Zeros),
        ];
        let fast_conv = [
            b.add("fast.conv1.weight", &[cf, cin, ks, ks], Init::Relu(cin * kk)),
            b.add("fast.conv1.bias", &[cf], Init::Zeros),
            b.add("fast.conv2.weight", &[cf, cf, ks, ks], Init::Relu(cf * kk)),
            b.add("fast.conv2.bias", &[cf], Init::Zeros),
        ];
        let fast_temporal = [
            b.add(
                "fast.temporal.weight",
                &[cf, cf, TEMPORAL_KERNEL],
                Init::Relu(cf * TEMPORAL_KERNEL),
            ),
            b.add("fast.temporal.bias", &[cf], Init::Zeros),
        ];
        let fuse_slow = [
            b.add("fuse.slow.weight", &[cs, d], Init::Linear(cs)),
            b.add("fuse.slow.bias", &[d], Init::Zeros),
        ];
        let fuse_fast = [
            b.add("fuse.fast.weight", &[cf, d], Init::Linear(cf)),
            b.add("fuse.fast.bias", &[d], Init::Zeros),
        ];
        let pathway = b.add("fuse.pathway", &[2, d], Init::Small);
        let embed_w = b.add("embed.weight", &[d, d], Init::Linear(d));
        let embed_b = b.add("embed.bias", &[d], Init::Zeros);
        let positions = b.add("embed.positions", &[c.seq_len(), d], Init::Small);
        let mut encoders = Vec::with_capacity(c.n_encoders);
        for i in 0..c.n_encoders {
            let p = |s: &str| format!("encoder.{i}.{s}");
            let ln1_gain = b.add(p("ln1.gain"), &[d], Init::Ones);
            let ln1_offset = b.add(p("ln1.offset"), &[d], Init::Zeros);
            // No key bias: it shifts every score of a query row equally and
            // cancels in the softmax, so it would never receive a gradient.
            let mut attn = [0; 7];
            for (slot, name) in attn
                .iter_mut()
                .zip(["wq", "bq", "wk", "wv", "bv", "wo", "bo"])
            {
                *slot = if name.starts_with('w') {
                    b.add(p(&format!("attn.{name}")), &[d, d], Init::Linear(d))
                } else {
                    b.add(p(&format!("attn.{name}")), &[d], Init::Zeros)
                };
            }
            let ln2_gain = b.add(p("ln2.gain"), &[d], Init::Ones);
            let ln2_offset = b.add(p("ln2.offset"), &[d], Init::Zeros);
            let ffn_w1 = b.add(p("ffn.w1"), &[d, f], Init::Linear(d));
            let ffn_b1 = b.add(p("ffn.b1"), &[f], Init::Zeros);
            let ffn_w2 = b.add(p("ffn.w2"), &[f, d], Init::Linear(f));
            let ffn_b2 = b.add(p("ffn.b2"), &[d], Init::Zeros);
            encoders.push(EncoderSlots {
                ln1_gain,
                ln1_offset,
                attn,
                ln2_gain,
                ln2_offset,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let final_gain = b.add("final_norm.gain", &[d], Init::Ones);
        let final_offset = b.add("final_norm.offset", &[d], Init::Zeros);
        let cls_w = b.add("classifier.weight", &[d, m], Init::Linear(d));
        let cls_b = b.add("classifier.bias", &[m], Init::Zeros);
        let layout = Layout {
            slow_conv,
            fast_conv,
            fast_temporal,
            fuse_slow,
            fuse_fast,
            pathway,
            embed_w,
            embed_b,
            positions,
            encoders,
            final_gain,
            final_offset,
            cls_w,
            cls_b,
        };
        (layout, b.specs)
    }
}

/// All learnable tensors of the model, in a fixed declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct SftParams<T: Scalar = f32> {
    config: SftConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> SftParams<T> {
    /// Fresh parameters drawn from `rng`.
    pub fn init(config: &SftConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (_, specs) = Layout::build(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Relu(fan_in) => Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng),
                Init::Linear(fan_in) => Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), rng),
                Init::Small => Tensor::randn(&shape, 0.02, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors listed in declared order.
    pub fn from_tensors(config: &SftConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (_, specs) = Layout::build(config);
        if specs.len() != tensors.len() {
            return Err(Error::HeaderMismatch(format!(
                "config declares {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::HeaderMismatch(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            names: specs.into_iter().map(|(n, _, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &SftConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SftParams<U> {
        SftParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_with(g, true)
    }

    /// Adds every tensor to `g` as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let (layout, _) = Layout::build(&self.config);
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            config: self.config.clone(),
            layout,
            ids,
        }
    }
}

/// Parameters registered in a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    config: SftConfig,
    layout: Layout,
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Wraps node ids that already hold parameters in declared order.
    pub fn from_ids(config: &SftConfig, ids: &[NodeId]) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        if specs.len() != ids.len() {
            return Err(Error::invalid(format!(
                "config declares {} parameter tensors, got {} nodes",
                specs.len(),
                ids.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            ids: ids.to_vec(),
        })
    }

    /// Node ids in declared parameter order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn config(&self) -> &SftConfig {
        &self.config
    }

    fn id(&self, slot: usize) -> NodeId {
        self.ids[slot]
    }
}

fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    x: NodeId,
    slots: &[usize; 4],
) -> Result<NodeId> {
    let y = g.conv2d(x, p.id(slots[0]), p.id(slots[1]), 2, Padding::Same)?;
    let y = g.relu(y);
    let y = g.conv2d(y, p.id(slots[2]), p.id(slots[3]), 2, Padding::Same)?;
    let y = g.relu(y);
    // global spatial average pool: [t, c, h, w] -> [t, c]
    let s = g.shape(y).to_vec();
    let flat = g.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    g.mean_axis(flat, 2)
}

fn check_input<T: Scalar>(g: &Graph<T>, p: &BoundParams, x: NodeId, op: &'static str) -> Result<()> {
    let expected = p.config.input_shape();
    if g.shape(x) != expected {
        return Err(Error::shape(
            op,
            format!("expected clip of shape {expected:?}, got {:?}", g.shape(x)),
        ));
    }
    Ok(())
}

/// Temporally subsampled, channel-wide pathway: `[k/τ, slow_channels]`.
pub fn slow_pathway<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
    check_input(g, p, x, "slow_pathway")?;
    let c = &p.config;
    let frames = g.narrow(x, 0, 0, c.slow_tokens(), c.slow_stride)?;
    conv_block(g, p, frames, &p.layout.slow_conv)
}

/// Full-rate, channel-narrow pathway with a temporal convolution:
/// `[k, fast_channels]`.
pub fn fast_pathway<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
    check_input(g, p, x, "fast_pathway")?;
    let tokens = fast_frame_tokens(g, p, x)?;
    let [w, b] = p.layout.fast_temporal;
    let y = g.conv1d(tokens, p.id(w), p.id(b), Padding::Same)?;
    Ok(g.relu(y))
}

/// Per-frame fast tokens before the temporal convolution.
pub fn fast_frame_tokens<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
    conv_block(g, p, x, &p.layout.fast_conv)
}

/// Projects both token sets to `d_model`, adds pathway embeddings and
/// concatenates along the sequence axis, slow tokens first.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    slow_tokens: NodeId,
    fast_tokens: NodeId,
) -> Result<NodeId> {
    let d = p.config.d_model;
    let l = &p.layout;
    let slow = nn::linear(g, slow_tokens, p.id(l.fuse_slow[0]), p.id(l.fuse_slow[1]))?;
    let fast = nn::linear(g, fast_tokens, p.id(l.fuse_fast[0]), p.id(l.fuse_fast[1]))?;
    let slow_tag = g.narrow(p.id(l.pathway), 0, 0, 1, 1)?;
    let slow_tag = g.reshape(slow_tag, &[d])?;
    let fast_tag = g.narrow(p.id(l.pathway), 0, 1, 1, 1)?;
    let fast_tag = g.reshape(fast_tag, &[d])?;
    let slow = g.add(slow, slow_tag)?;
    let fast = g.add(fast, fast_tag)?;
    g.concat(&[slow, fast], 0)
}

/// Intermediate nodes of the transformer head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Class scores `[m]`.
    pub logits: NodeId,
    /// Attention weights, per encoder then per head.
    pub attention: Vec<Vec<NodeId>>,
}

/// Embedding, encoder stack, mean pooling over the sequence and classifier.
pub fn transformer_head<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, seq: NodeId) -> Result<HeadOutput> {
    let c = &p.config;
    let l = &p.layout;
    if g.shape(seq) != [c.seq_len(), c.d_model] {
        return Err(Error::shape(
            "transformer_head",
            format!(
                "expected sequence [{}, {}], got {:?}",
                c.seq_len(),
                c.d_model,
                g.shape(seq)
            ),
        ));
    }
    let mut x = nn::embedding(g, seq, p.id(l.embed_w), p.id(l.embed_b), p.id(l.positions))?;
    let mut attention = Vec::with_capacity(l.encoders.len());
    for enc in &l.encoders {
        let h = nn::layer_norm_affine(g, x, p.id(enc.ln1_gain), p.id(enc.ln1_offset))?;
        let a = enc.attn;
        let weights = AttentionWeights {
            wq: p.id(a[0]),
            bq: p.id(a[1]),
            wk: p.id(a[2]),
            bk: None,
            wv: p.id(a[3]),
            bv: p.id(a[4]),
            wo: p.id(a[5]),
            bo: p.id(a[6]),
        };
        let att = nn::multi_head_attention(g, h, &weights, c.n_heads)?;
        attention.push(att.weights);
        x = g.add(x, att.output)?;
        let h = nn::layer_norm_affine(g, x, p.id(enc.ln2_gain), p.id(enc.ln2_offset))?;
        let h = nn::linear(g, h, p.id(enc.ffn_w1), p.id(enc.ffn_b1))?;
        let h = g.gelu(h);
        let h = nn::linear(g, h, p.id(enc.ffn_w2), p.id(enc.ffn_b2))?;
        x = g.add(x, h)?;
    }
    let x = nn::layer_norm_affine(g, x, p.id(l.final_gain), p.id(l.final_offset))?;
    let pooled = g.mean_axis(x, 0)?;
    let pooled = g.reshape(pooled, &[1, c.d_model])?;
    let logits = nn::linear(g, pooled, p.id(l.cls_w), p.id(l.cls_b))?;
    let logits = g.reshape(logits, &[c.n_classes])?;
    Ok(HeadOutput { logits, attention })
}

/// Every intermediate of one clip's forward pass.
#[derive(Debug, Clone)]
pub struct ClipForward {
    pub slow_tokens: NodeId,
    pub fast_tokens: NodeId,
    pub sequence: NodeId,
    pub head: HeadOutput,
}

/// Full forward pass of one clip `[k, C, h, w]`.
pub fn forward_clip<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<ClipForward> {
    let slow_tokens = slow_pathway(g, p, x)?;
    let fast_tokens = fast_pathway(g, p, x)?;
    let sequence = fuse(g, p, slow_tokens, fast_tokens)?;
    let head = transformer_head(g, p, sequence)?;
    Ok(ClipForward {
        slow_tokens,
        fast_tokens,
        sequence,
        head,
    })
}

/// Logits `[b, m]` for a batch of clips, each processed independently.
pub fn forward_batch<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, clips: &[NodeId]) -> Result<NodeId> {
    let m = p.config.n_classes;
    let mut rows = Vec::with_capacity(clips.len());
    for &x in clips {
        let out = forward_clip(g, p, x)?;
        rows.push(g.reshape(out.head.logits, &[1, m])?);
    }
    g.concat(&rows, 0)
}

/// Batch forward pass followed by the distance-weighted loss.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    clips: &[NodeId],
    labels: &[usize],
    distances: &[f64],
    loss: &LongLossParams,
) -> Result<NodeId> {
    let logits = forward_batch(g, p, clips)?;
    long_loss_node(g, logits, labels, distances, loss)
}

/// Class scores for one clip.
pub fn logits<T: Scalar>(params: &SftParams<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(frames.clone());
    let out = forward_clip(&mut g, &p, x)?;
    Ok(g.value(out.head.logits).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Scalar = f32> {
    pub class: usize,
    pub probabilities: Tensor<T>,
}

/// Softmax posterior and its argmax (ties go to the lowest class id).
pub fn prediction_from_logits<T: Scalar>(logits: &Tensor<T>) -> Prediction<T> {
    let mut probs = vec![T::zero(); logits.numel()];
    softmax_row(logits.data(), &mut probs);
    let class = argmax(&probs);
    Prediction {
        class,
        probabilities: Tensor::from_vec(probs),
    }
}

/// Most probable gesture given the clip's keyframes.
pub fn predict<T: Scalar>(params: &SftParams<T>, frames: &Tensor<T>) -> Result<Prediction<T>> {
    Ok(prediction_from_logits(&logits(params, frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SftConfig {
        SftConfig {
            input_hw: (16, 16),
            d_model: 16,
            ffn_dim: 24,
            ..SftConfig::default()
        }
    }

    fn clip(cfg: &SftConfig, seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(&cfg.input_shape(), 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn config_validation() {
        assert!(SftConfig::default().validate().is_ok());
        assert!(SftConfig { k: 6, ..SftConfig::default() }.validate().is_err());
        assert!(SftConfig { n_heads: 5, ..SftConfig::default() }.validate().is_err());
        assert!(SftConfig { n_classes: 1, ..SftConfig::default() }.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(clip(&cfg, 2));
        let out = forward_clip(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.slow_tokens), &[2, cfg.slow_channels]);
        assert_eq!(g.shape(out.fast_tokens), &[8, cfg.fast_channels]);
        assert_eq!(g.shape(out.sequence), &[10, cfg.d_model]);
        assert_eq!(g.shape(out.head.logits), &[cfg.n_classes]);

        let cfg2 = SftConfig { slow_stride: 2, ..small_config() };
        assert_eq!(cfg2.slow_tokens(), 4);
        let cfg3 = SftConfig { k: 16, ..small_config() };
        assert_eq!(cfg3.seq_len(), 20);
    }

    #[test]
    fn identical_frames_give_identical_interior_fast_tokens() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(5)).unwrap();
        let frame = Tensor::<f64>::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut Rng::new(9));
        let frames = Tensor::stack(&vec![frame; 8]).unwrap();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(frames);
        let fast = fast_pathway(&mut g, &p, x).unwrap();
        let v = g.value(fast);
        let c = cfg.fast_channels;
        for t in 2..7 {
            assert_eq!(&v.data()[t * c..(t + 1) * c], &v.data()[c..2 * c]);
        }
    }

    #[test]
    fn fast_frame_tokens_follow_frame_permutation() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(5)).unwrap();
        let frames = clip(&cfg, 3);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted = Tensor::stack(
            &perm
                .iter()
                .map(|&i| frames.index_axis0(i).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let a = g.constant(frames);
        let b = g.constant(permuted);
        let ta = fast_frame_tokens(&mut g, &p, a).unwrap();
        let tb = fast_frame_tokens(&mut g, &p, b).unwrap();
        let c = cfg.fast_channels;
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(
                &g.value(tb).data()[j * c..(j + 1) * c],
                &g.value(ta).data()[i * c..(i + 1) * c]
            );
        }
    }

    #[test]
    fn zero_input_slow_tokens_follow_bias_images() {
        let cfg = SftConfig { input_hw: (8, 8), ..small_config() };
        let mut params = SftParams::<f64>::init(&cfg, &mut Rng::new(8)).unwrap();
        let b1: Vec<f64> = (0..cfg.slow_channels).map(|i| i as f64 * 0.1 - 0.5).collect();
        params.get_mut("slow.conv1.bias").unwrap().data_mut().copy_from_slice(&b1);
        let b2: Vec<f64> = (0..cfg.slow_channels).map(|i| 0.3 - i as f64 * 0.05).collect();
        params.get_mut("slow.conv2.bias").unwrap().data_mut().copy_from_slice(&b2);
        let w2 = params.get("slow.conv2.weight").unwrap().clone();

        // Independent evaluation: conv1 of zeros is relu(b1) everywhere on a
        // 4x4 map; conv2 (stride 2, same padding, pad_top = 0 for 4 -> 2)
        // sees each tap in-bounds except the ones falling off the bottom/right.
        let cs = cfg.slow_channels;
        let mut expected = vec![0.0; cs];
        for (o, e) in expected.iter_mut().enumerate() {
            let mut acc = 0.0;
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut v = b2[o];
                    for c in 0..cs {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy * 2 + ky, ox * 2 + kx);
                                if iy < 4 && ix < 4 {
                                    v += w2.data()[((o * cs + c) * 3 + ky) * 3 + kx] * b1[c].max(0.0);
                                }
                            }
                        }
                    }
                    acc += v.max(0.0);
                }
            }
            *e = acc / 4.0;
        }

        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&cfg.input_shape()));
        let slow = slow_pathway(&mut g, &p, x).unwrap();
        for t in 0..2 {
            for (a, e) in g.value(slow).data()[t * cs..(t + 1) * cs].iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn zero_tokens_fuse_to_pathway_embeddings() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(4)).unwrap();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let slow = g.constant(Tensor::zeros(&[2, cfg.slow_channels]));
        let fast = g.constant(Tensor::zeros(&[8, cfg.fast_channels]));
        let seq = fuse(&mut g, &p, slow, fast).unwrap();
        let tags = params.get("fuse.pathway").unwrap();
        let d = cfg.d_model;
        for t in 0..10 {
            let row = &g.value(seq).data()[t * d..(t + 1) * d];
            let tag = if t < 2 { &tags.data()[..d] } else { &tags.data()[d..] };
            assert_eq!(row, tag);
        }
    }

    #[test]
    fn zeroed_head_outputs_classifier_bias() {
        let cfg = small_config();
        let mut params = SftParams::<f64>::init(&cfg, &mut Rng::new(6)).unwrap();
        let bias: Vec<f64> = (0..cfg.n_classes).map(|i| i as f64 * 0.25 - 1.0).collect();
        let names: Vec<String> = params.names().to_vec();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let zero = (name.contains(".attn.") || name.contains(".ffn.")) || name == "classifier.weight";
            if zero {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        params.get_mut("classifier.bias").unwrap().data_mut().copy_from_slice(&bias);
        for seed in 0..3 {
            let logits = logits(&params, &clip(&cfg, seed)).unwrap();
            assert_eq!(logits.data(), bias.as_slice());
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(7)).unwrap();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(clip(&cfg, 1));
        let out = forward_clip(&mut g, &p, x).unwrap();
        assert_eq!(out.head.attention.len(), 4);
        for enc in &out.head.attention {
            for &a in enc {
                for row in g.value(a).data().chunks(cfg.seq_len()) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let cfg = small_config();
        let params = SftParams::<f32>::init(&cfg, &mut Rng::new(3)).unwrap();
        let clips: Vec<Tensor<f32>> = (0..3).map(|s| clip(&cfg, s).cast()).collect();
        let alone: Vec<Tensor<f32>> = clips.iter().map(|c| logits(&params, c).unwrap()).collect();
        let again = logits(&params, &clips[1]).unwrap();
        assert_eq!(alone[1].data(), again.data());

        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let ids: Vec<NodeId> = clips.iter().map(|c| g.constant(c.clone())).collect();
        let batch = forward_batch(&mut g, &p, &ids).unwrap();
        let m = cfg.n_classes;
        for (i, a) in alone.iter().enumerate() {
            assert_eq!(&g.value(batch).data()[i * m..(i + 1) * m], a.data());
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(12)).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let clips: Vec<NodeId> = (0..2).map(|s| g.constant(clip(&cfg, s))).collect();
        let loss = batch_loss(&mut g, &p, &clips, &[1, 4], &[5.0, 18.0], &LongLossParams::default()).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, &id) in params.names().iter().zip(p.ids()) {
            let grad = grads.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert_eq!(grad.shape(), g.shape(id));
        }
    }

    #[test]
    fn prediction_rules() {
        let p = prediction_from_logits(&Tensor::from_vec(vec![0.1f64.ln(), 0.7f64.ln(), 0.2f64.ln()]));
        assert_eq!(p.class, 1);
        assert!((p.probabilities.data()[1] - 0.7).abs() < 1e-12);
        let tie = prediction_from_logits(&Tensor::from_vec(vec![1.0f64, 3.0, 3.0]));
        assert_eq!(tie.class, 1);
    }

    #[test]
    fn rejects_wrong_clip_shape() {
        let cfg = small_config();
        let params = SftParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        let bad = Tensor::zeros(&[4, 1, 16, 16]);
        assert!(matches!(logits(&params, &bad), Err(Error::Shape { .. })));
    }
}
