//! The full transformer: embeddings, dual-channel layers, language-model head and loss.
//!
//! Inputs are shifted inside each predicted frame: the position of token
//! `(t, i)` reads token `(t, i-1)` and the first position of the frame reads
//! `[B]`. Known positions read their own token. Logits at `(t, i)` therefore
//! depend only on tokens the decoder has already fixed.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::attention::{dual_channel_forward, shared_ffn_forward, BlockMasks, BlockOutput, ChannelKind, ChannelMode, DualChannelParams, Norm};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::masks::{AttentionMask, LocalExtent, WindowConfig};
use crate::numkernel::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::sequence::{Region, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: Vocab,
    /// Token-grid side `F`.
    pub side: usize,
    /// Frames per sequence.
    pub ts: usize,
    /// Rate token plus caption slots.
    pub n_text: usize,
    pub channel: ChannelKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 4,
            heads: 4,
            vocab: Vocab { image: 16, text: crate::synthvid::CAPTION_VOCAB, rates: vec![1.0, 2.0, 4.0, 8.0] },
            side: 4,
            ts: 5,
            n_text: 8,
            channel: ChannelKind::Swin3d(WindowConfig { ax: 2, ay: 2, x: 4, y: 4 }),
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 11] =
    ["d", "layers", "heads", "image_vocab", "text_vocab", "rates", "side", "ts", "n_text", "channel", "init_seed"];

fn channel_text(kind: &ChannelKind) -> String {
    match kind {
        ChannelKind::Swin3d(w) => format!("swin:{},{}", w.ax, w.ay),
        ChannelKind::Local3d(e) => format!("local:{},{},{}", e.lt, e.lx, e.ly),
    }
}

fn parse_channel(text: &str, side: usize) -> Result<ChannelKind> {
    let bad = || Error::Config(format!("channel {text:?}: expected swin:AX,AY or local:LT,LX,LY"));
    let (tag, rest) = text.split_once(':').ok_or_else(bad)?;
    let nums: Vec<usize> = rest.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match (tag.trim(), nums.as_slice()) {
        ("swin", &[ax, ay]) => Ok(ChannelKind::Swin3d(WindowConfig::new(ax, ay, side, side)?)),
        ("local", &[lt, lx, ly]) => Ok(ChannelKind::Local3d(LocalExtent::new(lt, lx, ly)?)),
        _ => Err(bad()),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("hidden size {} must be a positive multiple of heads {}", self.d, self.heads)));
        }
        if self.side == 0 || self.ts == 0 || self.n_text < 1 {
            return Err(Error::Config("side, ts and n_text must be positive".into()));
        }
        if let ChannelKind::Swin3d(w) = self.channel {
            if w.x != self.side || w.y != self.side {
                return Err(Error::Config(format!("window frame {}x{} differs from side {}", w.x, w.y, self.side)));
            }
        }
        Vocab::new(self.vocab.image, self.vocab.text, self.vocab.rates.clone())?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let rates: Vec<String> = self.vocab.rates.iter().map(|r| format!("{r:?}")).collect();
        format!(
            "d = {}\nlayers = {}\nheads = {}\nimage_vocab = {}\ntext_vocab = {}\nrates = {}\nside = {}\nts = {}\nn_text = {}\nchannel = {}\ninit_seed = {}\n",
            self.d,
            self.layers,
            self.heads,
            self.vocab.image,
            self.vocab.text,
            rates.join(","),
            self.side,
            self.ts,
            self.n_text,
            channel_text(&self.channel),
            self.seed
        )
    }

    /// Reads the keys present in `map` over the defaults; other keys are the caller's.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = map.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!("d", c.d);
        take!("layers", c.layers);
        take!("heads", c.heads);
        take!("image_vocab", c.vocab.image);
        take!("text_vocab", c.vocab.text);
        take!("side", c.side);
        take!("ts", c.ts);
        take!("n_text", c.n_text);
        take!("init_seed", c.seed);
        if let Some(r) = map.get_list("rates")? {
            c.vocab.rates = r;
        }
        c.channel = match map.get("channel") {
            Some(text) => parse_channel(text, c.side)?,
            None => match c.channel {
                ChannelKind::Swin3d(w) => ChannelKind::Swin3d(WindowConfig::new(w.ax.min(c.side), w.ay.min(c.side), c.side, c.side)?),
                other => other,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }

    /// Parameter counts `(total, trainable)` implied by the configuration.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let (d, v_img) = (self.d, self.vocab.image);
        let embeddings_frozen = self.vocab.size() * d + self.side * self.side * d + (self.n_text + 1) * d;
        let embeddings_trainable = self.ts * d + 2 * d;
        let layer_frozen = 8 * d + 4 * d * d + 8 * d * d + 5 * d;
        let layer_trainable = 4 * d * d + d;
        let head = 2 * d + d * v_img + v_img;
        let trainable = embeddings_trainable + self.layers * layer_trainable + head;
        (embeddings_frozen + self.layers * layer_frozen + trainable, trainable)
    }
}

/// Parameter handles of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub token_emb: ParamId,
    pub spatial_pos: ParamId,
    pub text_pos: ParamId,
    pub frame_emb: ParamId,
    pub region_emb: ParamId,
    pub layers: Vec<DualChannelParams>,
    pub final_norm: Norm,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl ModelParams {
    /// Handles of the single-image backbone: token and position embeddings, the
    /// spatial channel, layer norms and feed-forward networks of every layer.
    pub fn backbone(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_emb, self.spatial_pos, self.text_pos];
        for l in &self.layers {
            v.extend([l.attn_pre.gain, l.attn_pre.bias, l.attn_post.gain, l.attn_post.bias]);
            v.extend(l.base.ids());
            let f = &l.ffn;
            v.extend([f.pre.gain, f.pre.bias, f.w1, f.b1, f.w2, f.b2, f.post.gain, f.post.bias]);
        }
        v
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub blocks: Vec<BlockOutput>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model; the trainable channel of every layer starts as a copy of the spatial one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let token_emb = store.add("embed.token", rng.normal_tensor(&[config.vocab.size(), d], 1.0), true);
        let spatial_pos = store.add("embed.spatial", rng.normal_tensor(&[config.side * config.side, d], 0.5), true);
        let text_pos = store.add("embed.text_pos", rng.normal_tensor(&[config.n_text + 1, d], 0.5), true);
        let frame_emb = store.add("embed.frame", rng.normal_tensor(&[config.ts, d], 0.1), false);
        let region_emb = store.add("embed.region", rng.normal_tensor(&[2, d], 0.1), false);
        let layers = (0..config.layers).map(|l| DualChannelParams::init(&mut store, &format!("layer{l}"), d, &mut rng)).collect();
        let final_norm = Norm {
            gain: store.add("final_norm.gain", Tensor::filled(&[d], 1.0), false),
            bias: store.add("final_norm.bias", Tensor::zeros(&[d]), false),
        };
        let head_w = store.add("head.w", Tensor::zeros(&[d, config.vocab.image]), false);
        let head_b = store.add("head.b", Tensor::zeros(&[config.vocab.image]), false);
        let params = ModelParams { token_emb, spatial_pos, text_pos, frame_emb, region_emb, layers, final_norm, head_w, head_b };
        Ok(Self { config, store, params })
    }

    /// Copies the spatial channel into the trainable channel of every layer.
    pub fn copy_base_to_plus(&mut self) -> Result<()> {
        for l in &self.params.layers {
            l.copy_base_to_plus(&mut self.store)?;
        }
        Ok(())
    }

    pub fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let (c, l) = (&self.config, &seq.layout);
        if l.side != c.side || l.n_text != c.n_text || l.ts > c.ts || l.ts == 0 {
            return Err(Error::Dimension(format!(
                "sequence layout (ts {}, side {}, text {}) does not fit model (ts <= {}, side {}, text {})",
                l.ts, l.side, l.n_text, c.ts, c.side, c.n_text
            )));
        }
        if seq.tokens.len() != l.len() || seq.regions.len() != l.len() {
            return Err(Error::Dimension("token or region count differs from layout".into()));
        }
        let size = c.vocab.size();
        if let Some(&id) = seq.tokens.iter().find(|&&t| t >= size) {
            return Err(Error::Vocab { id, vocab: size });
        }
        for p in seq.unidirectional_positions() {
            if !seq.is_frame(p) {
                return Err(Error::Parameter(format!("text position {p} marked unidirectional")));
            }
        }
        Ok(())
    }

    /// Input id of every position after the per-frame shift.
    pub fn input_ids(&self, seq: &TokenSequence) -> Vec<usize> {
        let sep = self.config.vocab.separator();
        (0..seq.len())
            .map(|p| match (seq.region(p), seq.coords(p)) {
                (Region::Unidirectional, Some((_, 0, 0))) => sep,
                (Region::Unidirectional, Some(_)) => seq.tokens[p - 1],
                _ => seq.tokens[p],
            })
            .collect()
    }

    /// Per-layer masks for `seq`.
    pub fn layer_masks(&self, seq: &TokenSequence) -> Result<Vec<BlockMasks>> {
        self.check_sequence(seq)?;
        let mut out: Vec<BlockMasks> = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            // Masks repeat with period two at most.
            if l >= 2 {
                out.push(out[l - 2].clone());
            } else {
                out.push(BlockMasks::new(seq, &self.config.channel, l)?);
            }
        }
        Ok(out)
    }

    /// Union of every permission used by any layer and channel.
    pub fn dependency_mask(&self, seq: &TokenSequence) -> Result<AttentionMask> {
        let masks = self.layer_masks(seq)?;
        let mut acc = AttentionMask::empty(seq.len(), seq.len());
        for m in &masks {
            acc = acc.or(&m.base).or(&m.plus);
        }
        Ok(acc)
    }

    /// Sum of token, position, frame-index and region embeddings.
    pub fn embed(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        let p = &self.params;
        let side = self.config.side;
        let coords: Vec<_> = (0..seq.len()).map(|q| seq.coords(q)).collect();
        let table = g.param(&self.store, p.token_emb);
        let mut x = g.gather(table, self.input_ids(seq).into_iter().map(Some).collect())?;
        let lookups = [
            (p.spatial_pos, coords.iter().map(|c| c.map(|(_, a, b)| a * side + b)).collect::<Vec<_>>()),
            (p.frame_emb, coords.iter().map(|c| c.map(|(t, _, _)| t)).collect()),
            (p.text_pos, coords.iter().enumerate().map(|(q, c)| c.is_none().then_some(q)).collect()),
            (
                p.region_emb,
                (0..seq.len()).map(|q| Some(usize::from(seq.region(q) == Region::Unidirectional))).collect(),
            ),
        ];
        for (id, ids) in lookups {
            let t = g.param(&self.store, id);
            let e = g.gather(t, ids)?;
            x = g.add(x, e)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence, masks: &[BlockMasks], mode: ChannelMode) -> Result<Forward> {
        if masks.len() != self.config.layers {
            return Err(Error::Dimension(format!("{} layer masks for {} layers", masks.len(), self.config.layers)));
        }
        let mut h = self.embed(g, seq)?;
        let mut blocks = Vec::with_capacity(masks.len());
        for (layer, m) in self.params.layers.iter().zip(masks) {
            let b = dual_channel_forward(g, &self.store, h, m, layer, self.config.heads, mode)?;
            h = shared_ffn_forward(g, &self.store, b.out, &layer.ffn)?;
            blocks.push(b);
        }
        let p = &self.params;
        let (ng, nb) = (g.param(&self.store, p.final_norm.gain), g.param(&self.store, p.final_norm.bias));
        let h = g.layer_norm(h, ng, nb)?;
        let (w, b) = (g.param(&self.store, p.head_w), g.param(&self.store, p.head_b));
        let logits = g.matmul(h, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(Forward { logits, blocks })
    }

    /// `L × V_img` logits of the dual-channel model.
    pub fn forward_logits(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.forward_logits_with(seq, &self.layer_masks(seq)?, ChannelMode::Dual)
    }

    pub fn forward_logits_with(&self, seq: &TokenSequence, masks: &[BlockMasks], mode: ChannelMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, seq, masks, mode)?;
        Ok(g.value(f.logits).clone())
    }

    /// `(position, token)` pairs scored by the loss.
    pub fn targets(&self, seq: &TokenSequence) -> Result<Vec<(usize, usize)>> {
        let targets: Vec<_> = seq.unidirectional_positions().into_iter().map(|p| (p, seq.tokens[p])).collect();
        if targets.is_empty() {
            return Err(Error::Parameter("sequence has no unidirectional targets".into()));
        }
        if let Some(&(_, t)) = targets.iter().find(|(_, t)| *t >= self.config.vocab.image) {
            return Err(Error::Vocab { id: t, vocab: self.config.vocab.image });
        }
        Ok(targets)
    }

    /// Mean cross-entropy node over the unidirectional positions.
    pub fn loss_var(&self, g: &mut Graph, seq: &TokenSequence, mode: ChannelMode) -> Result<Var> {
        let targets = self.targets(seq)?;
        let masks = self.layer_masks(seq)?;
        let f = self.forward(g, seq, &masks, mode)?;
        g.cross_entropy(f.logits, targets)
    }

    pub fn loss(&self, seq: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss_var(&mut g, seq, ChannelMode::Dual)?;
        Ok(g.value(l).data()[0])
    }

    /// Loss and per-parameter gradients indexed by `ParamId`.
    pub fn loss_and_grads(&self, seq: &TokenSequence, mode: ChannelMode) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let l = self.loss_var(&mut g, seq, mode)?;
        let value = g.value(l).data()[0];
        Ok((value, g.backward(l)?.params(self.store.len())))
    }
}
