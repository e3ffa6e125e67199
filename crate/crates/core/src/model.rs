//! The HOI transformer: convolutional stem, flattened features with 2-D
//! sinusoidal positions, encoder, decoder over learnt HOI queries, and five
//! prediction heads producing one quintuple per query.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::tensor::{self, multi_head_attention, Binding, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Parameter-name prefix of the convolutional stem (the "backbone" learning-rate group).
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input image {h}x{w} is smaller than the downsample factor {factor}")]
    ImageTooSmall { h: usize, w: usize, factor: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub num_object_classes: usize,
    pub num_interaction_classes: usize,
    /// Output channels of the stride-2 3x3 convolution blocks; the stem
    /// downsamples by `2^len`.
    pub stem_channels: Vec<usize>,
    pub dropout: f64,
    pub query_init_std: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            ffn_dim: 2048,
            num_queries: 100,
            num_object_classes: 80,
            num_interaction_classes: 117,
            stem_channels: vec![64, 128, 256, 512],
            dropout: 0.0,
            query_init_std: 0.02,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk(num_object_classes: usize, num_interaction_classes: usize) -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            num_queries: 16,
            num_object_classes,
            num_interaction_classes,
            stem_channels: vec![16, 32, 64, 64],
            ..Self::default()
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.stem_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!("d_model ({}) must be divisible by 4 for 2-D positional encoding", self.d_model));
        }
        if self.num_queries == 0 {
            return fail("num_queries must be positive".into());
        }
        if self.num_object_classes == 0 || self.num_interaction_classes == 0 {
            return fail("class counts must be positive".into());
        }
        if self.ffn_dim == 0 || self.stem_channels.iter().any(|&c| c == 0) {
            return fail("ffn_dim and stem channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.query_init_std >= 0.0) {
            return fail("query_init_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Flattened backbone output: `seq` is `[h * w, d]`, rows in row-major `(y, x)` order.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub seq: Var,
}

/// One decoded query: raw logits plus boxes squashed into `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiPrediction {
    /// `[foreground, background]`.
    pub human_logits: Vec<f64>,
    /// `C_obj` classes followed by background.
    pub object_logits: Vec<f64>,
    /// `C_int` classes followed by background.
    pub interaction_logits: Vec<f64>,
    pub human_box: BBox,
    pub object_box: BBox,
}

/// Head outputs of a forward pass, still on the tape.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub human_logits: Var,
    pub object_logits: Var,
    pub interaction_logits: Var,
    pub human_boxes: Var,
    pub object_boxes: Var,
}

impl HeadOutputs {
    pub fn predictions(&self, g: &Graph) -> Vec<HoiPrediction> {
        let hl = g.value(self.human_logits);
        let ol = g.value(self.object_logits);
        let il = g.value(self.interaction_logits);
        let hb = g.value(self.human_boxes);
        let ob = g.value(self.object_boxes);
        let n = hl.shape()[0];
        let to_box = |r: &[f64]| BBox::new(r[0], r[1], r[2], r[3]);
        (0..n)
            .map(|i| HoiPrediction {
                human_logits: hl.row(i).to_vec(),
                object_logits: ol.row(i).to_vec(),
                interaction_logits: il.row(i).to_vec(),
                human_box: to_box(hb.row(i)),
                object_box: to_box(ob.row(i)),
            })
            .collect()
    }
}

/// Result of [`HoiTransformer::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub heads: HeadOutputs,
    /// Last decoder layer's cross-attention, `[N, h * w]` averaged over heads.
    /// `None` when the decoder has no layers.
    pub cross_attention: Option<Tensor>,
    pub feature_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: AttnParams,
    norm1: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: AttnParams,
    norm1: Norm,
    cross_attn: AttnParams,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Vec<Conv>,
    input_proj: Conv,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    queries: ParamId,
    human_cls: Linear,
    object_cls: Linear,
    interaction_cls: Linear,
    human_box: [Linear; 3],
    object_box: [Linear; 3],
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in, fan_out),
            b: self.zeros(format!("{prefix}.bias"), &[fan_out]),
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        Conv {
            w: self.xavier(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k, cout * k * k),
            b: self.zeros(format!("{prefix}.bias"), &[cout]),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: self.zeros(format!("{prefix}.bias"), &[d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            out: self.linear(&format!("{prefix}.out"), d, d),
        }
    }
}

/// Per-forward options.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Random source for dropout; dropout is inactive when `None`.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

pub struct HoiTransformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl HoiTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.init_seed),
        };
        let d = config.d_model;
        let mut stem = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.stem_channels.iter().enumerate() {
            stem.push(init.conv(&format!("{BACKBONE_PREFIX}conv{i}"), cin, c, 3));
            cin = c;
        }
        let input_proj = init.conv("input_proj", cin, d, 1);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    attn: init.attn(&format!("{p}.self_attn"), d),
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    ffn1: init.linear(&format!("{p}.ffn1"), d, config.ffn_dim),
                    ffn2: init.linear(&format!("{p}.ffn2"), config.ffn_dim, d),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: init.attn(&format!("{p}.self_attn"), d),
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                    ffn1: init.linear(&format!("{p}.ffn1"), d, config.ffn_dim),
                    ffn2: init.linear(&format!("{p}.ffn2"), config.ffn_dim, d),
                    norm3: init.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let decoder_norm = init.norm("decoder.norm", d);
        let normal = Normal::new(0.0, config.query_init_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let qdata = (0..config.num_queries * d)
            .map(|_| if config.query_init_std == 0.0 { 0.0 } else { normal.sample(&mut init.rng) })
            .collect();
        let queries = init.store.add(
            "queries",
            Tensor::new(vec![config.num_queries, d], qdata).expect("shape matches"),
        );
        let human_cls = init.linear("heads.human_cls", d, 2);
        let object_cls = init.linear("heads.object_cls", d, config.num_object_classes + 1);
        let interaction_cls = init.linear("heads.interaction_cls", d, config.num_interaction_classes + 1);
        let mut mlp = |name: &str| {
            [
                init.linear(&format!("heads.{name}.0"), d, d),
                init.linear(&format!("heads.{name}.1"), d, d),
                init.linear(&format!("heads.{name}.2"), d, 4),
            ]
        };
        let human_box = mlp("human_box");
        let object_box = mlp("object_box");
        let layout = Layout {
            stem,
            input_proj,
            encoder,
            decoder,
            decoder_norm,
            queries,
            human_cls,
            object_cls,
            interaction_cls,
            human_box,
            object_box,
        };
        Ok(Self {
            config,
            params,
            layout,
        })
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

    /// Whether a parameter belongs to the backbone learning-rate group.
    pub fn is_backbone(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with(BACKBONE_PREFIX)
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Binding {
        self.params.bind(g, requires_grad)
    }

    /// Stride-2 3x3 conv blocks with ReLU, a 1x1 projection to `d_model`,
    /// then flattening of the spatial grid into a sequence.
    pub fn backbone_forward(&self, g: &mut Graph, p: &Binding, image: &Tensor) -> Result<FeatureMap> {
        let (h0, w0) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => {
                return Err(ModelError::Config(format!(
                    "image tensor must be [3, H, W], got {s:?}"
                )))
            }
        };
        let factor = self.config.downsample();
        if h0 < factor || w0 < factor {
            return Err(ModelError::ImageTooSmall { h: h0, w: w0, factor });
        }
        let mut x = g.constant(image.clone());
        for conv in &self.layout.stem {
            x = g.conv2d(x, p.var(conv.w), p.var(conv.b), 2, 1)?;
            x = g.relu(x);
        }
        x = g.conv2d(x, p.var(self.layout.input_proj.w), p.var(self.layout.input_proj.b), 1, 0)?;
        let (d, h, w) = match g.shape(x) {
            [d, h, w] => (*d, *h, *w),
            _ => unreachable!("conv2d yields 3-D output"),
        };
        let flat = g.reshape(x, &[d, h * w])?;
        let seq = g.transpose(flat)?;
        Ok(FeatureMap { h, w, d, seq })
    }

    fn linear(&self, g: &mut Graph, p: &Binding, x: Var, l: Linear) -> tensor::Result<Var> {
        g.linear(x, p.var(l.w), p.var(l.b))
    }

    fn norm(&self, g: &mut Graph, p: &Binding, x: Var, n: Norm) -> tensor::Result<Var> {
        g.layer_norm(x, p.var(n.gain), p.var(n.bias))
    }

    fn dropout(&self, g: &mut Graph, x: Var, opts: &mut ForwardOptions) -> tensor::Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: &Binding,
        a: AttnParams,
        query: Var,
        key: Var,
        value: Var,
    ) -> tensor::Result<(Var, Tensor)> {
        let q = self.linear(g, p, query, a.q)?;
        let k = self.linear(g, p, key, a.k)?;
        let v = self.linear(g, p, value, a.v)?;
        let att = multi_head_attention(g, q, k, v, self.config.heads)?;
        let out = self.linear(g, p, att.output, a.out)?;
        Ok((out, att.weights))
    }

    fn ffn(&self, g: &mut Graph, p: &Binding, x: Var, l1: Linear, l2: Linear, opts: &mut ForwardOptions) -> tensor::Result<Var> {
        let h = self.linear(g, p, x, l1)?;
        let h = g.relu(h);
        let h = self.dropout(g, h, opts)?;
        self.linear(g, p, h, l2)
    }

    /// Encoder stack; positions are added to query and key of every layer,
    /// never to the value.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        features: Var,
        pos: Var,
        opts: &mut ForwardOptions,
    ) -> Result<Var> {
        let mut x = features;
        for layer in &self.layout.encoder {
            let qk = g.add(x, pos)?;
            let (a, _) = self.attention(g, p, layer.attn, qk, qk, x)?;
            let a = self.dropout(g, a, opts)?;
            let r = g.add(x, a)?;
            x = self.norm(g, p, r, layer.norm1)?;
            let f = self.ffn(g, p, x, layer.ffn1, layer.ffn2, opts)?;
            let f = self.dropout(g, f, opts)?;
            let r = g.add(x, f)?;
            x = self.norm(g, p, r, layer.norm2)?;
        }
        Ok(x)
    }

    /// Decoder stack over the query embeddings. The query stream starts at
    /// zero; query embeddings act as positions for self- and cross-attention
    /// queries, image positions are added to cross-attention keys, and values
    /// come from the memory directly. Without layers the heads see the query
    /// embeddings untouched.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        memory: Var,
        pos: Var,
        queries: Var,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Option<Tensor>)> {
        if self.layout.decoder.is_empty() {
            return Ok((queries, None));
        }
        let n = g.shape(queries)[0];
        let d = self.config.d_model;
        let mut t = g.constant(Tensor::zeros(&[n, d]));
        let key = g.add(memory, pos)?;
        let mut last = None;
        for layer in &self.layout.decoder {
            let qk = g.add(t, queries)?;
            let (a, _) = self.attention(g, p, layer.self_attn, qk, qk, t)?;
            let a = self.dropout(g, a, opts)?;
            let r = g.add(t, a)?;
            t = self.norm(g, p, r, layer.norm1)?;

            let q = g.add(t, queries)?;
            let (a, w) = self.attention(g, p, layer.cross_attn, q, key, memory)?;
            last = Some(w);
            let a = self.dropout(g, a, opts)?;
            let r = g.add(t, a)?;
            t = self.norm(g, p, r, layer.norm2)?;

            let f = self.ffn(g, p, t, layer.ffn1, layer.ffn2, opts)?;
            let f = self.dropout(g, f, opts)?;
            let r = g.add(t, f)?;
            t = self.norm(g, p, r, layer.norm3)?;
        }
        let out = self.norm(g, p, t, self.layout.decoder_norm)?;
        Ok((out, last))
    }

    /// Three one-layer classifiers and two three-layer box MLPs with a
    /// logistic output.
    pub fn heads_forward(&self, g: &mut Graph, p: &Binding, embeddings: Var) -> Result<HeadOutputs> {
        let human_logits = self.linear(g, p, embeddings, self.layout.human_cls)?;
        let object_logits = self.linear(g, p, embeddings, self.layout.object_cls)?;
        let interaction_logits = self.linear(g, p, embeddings, self.layout.interaction_cls)?;
        let mut box_mlp = |layers: [Linear; 3]| -> tensor::Result<Var> {
            let h = self.linear(g, p, embeddings, layers[0])?;
            let h = g.relu(h);
            let h = self.linear(g, p, h, layers[1])?;
            let h = g.relu(h);
            let h = self.linear(g, p, h, layers[2])?;
            Ok(g.sigmoid(h))
        };
        let human_boxes = box_mlp(self.layout.human_box)?;
        let object_boxes = box_mlp(self.layout.object_box)?;
        Ok(HeadOutputs {
            human_logits,
            object_logits,
            interaction_logits,
            human_boxes,
            object_boxes,
        })
    }

    /// Full pass from a normalized `[3, H, W]` image to `N` quintuples. No
    /// post-processing of any kind.
    pub fn forward(&self, g: &mut Graph, p: &Binding, image: &Tensor, mut opts: ForwardOptions) -> Result<ForwardOutput> {
        let fm = self.backbone_forward(g, p, image)?;
        let pos = g.constant(positional_encoding(fm.h, fm.w, fm.d)?);
        let memory = self.encoder_forward(g, p, fm.seq, pos, &mut opts)?;
        let queries = p.var(self.layout.queries);
        let (emb, cross_attention) = self.decoder_forward(g, p, memory, pos, queries, &mut opts)?;
        let heads = self.heads_forward(g, p, emb)?;
        Ok(ForwardOutput {
            heads,
            cross_attention,
            feature_hw: (fm.h, fm.w),
        })
    }

    /// Inference-only forward on a fresh tape.
    pub fn predict(&self, image: &Tensor) -> Result<(Vec<HoiPrediction>, ForwardOutput, Graph)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image, ForwardOptions::default())?;
        Ok((out.heads.predictions(&g), out, g))
    }
}

/// Fixed 2-D sinusoidal encoding, `[h * w, d]`.
///
/// Channels `0..d/2` encode the row index and `d/2..d` the column index. Within
/// each half, channel `j` uses frequency `10000^(-2*floor(j/2) / (d/2))`, sine
/// on even `j` and cosine on odd `j`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding width {d} must be a positive multiple of 4"
        )));
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half)
        .map(|j| 10000f64.powf(-2.0 * (j / 2) as f64 / half as f64))
        .collect();
    let wave = |pos: usize, j: usize| {
        let a = pos as f64 * freq[j];
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            data.extend((0..half).map(|j| wave(y, j)));
            data.extend((0..half).map(|j| wave(x, j)));
        }
    }
    Ok(Tensor::new(vec![h * w, d], data)?)
}
