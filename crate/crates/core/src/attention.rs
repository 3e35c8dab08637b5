//! Dual-channel transformer block.
//!
//! Each layer runs a frozen spatial channel (own frame plus text) and a
//! trainable spatio-temporal channel on the same normalized input, mixes
//! them per hidden dimension with `sigmoid(a)`, and wraps the result and the
//! shared feed-forward network in sandwich layer norms.

use crate::error::{Error, Result};
use crate::masks::{local_rf_mask, shifted_window_mask, spatial_mask, region_mask, AttentionMask, LocalExtent, WindowConfig};
use crate::numkernel::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::sequence::TokenSequence;

/// Which spatio-temporal mask the trainable channel uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Local3d(LocalExtent),
    Swin3d(WindowConfig),
}

impl ChannelKind {
    /// Trainable-channel mask for `layer`; swin windows alternate their shift per layer.
    pub fn mask(&self, seq: &TokenSequence, layer: usize) -> Result<AttentionMask> {
        match *self {
            ChannelKind::Local3d(extent) => Ok(local_rf_mask(seq, extent, &region_mask(seq))),
            ChannelKind::Swin3d(w) => {
                if w.x != seq.layout.side || w.y != seq.layout.side {
                    return Err(Error::Dimension(format!(
                        "window configured for {}x{} frames, sequence has side {}",
                        w.x, w.y, seq.layout.side
                    )));
                }
                Ok(shifted_window_mask(seq, w, w.layer_shift(layer)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub pre: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub post: Norm,
}

/// Parameter handles of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualChannelParams {
    pub attn_pre: Norm,
    pub base: Projections,
    pub plus: Projections,
    pub mix: ParamId,
    pub attn_post: Norm,
    pub ffn: FfnParams,
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0), true),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true),
    }
}

fn projections(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng, frozen: bool) -> Projections {
    let std = 1.0 / (d as f64).sqrt();
    let mut w = |k: &str| store.add(format!("{name}.{k}"), rng.normal_tensor(&[d, d], std), frozen);
    Projections { wq: w("wq"), wk: w("wk"), wv: w("wv"), wo: w("wo") }
}

impl DualChannelParams {
    /// Registers one layer under `prefix`. The trainable channel starts as a
    /// copy of the spatial channel and the mixture pre-activation at zero.
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let attn_pre = norm(store, &format!("{prefix}.attn_pre"), d);
        let base = projections(store, &format!("{prefix}.base"), d, rng, true);
        let plus = Projections {
            wq: store.add(format!("{prefix}.plus.wq"), store.value(base.wq).clone(), false),
            wk: store.add(format!("{prefix}.plus.wk"), store.value(base.wk).clone(), false),
            wv: store.add(format!("{prefix}.plus.wv"), store.value(base.wv).clone(), false),
            wo: store.add(format!("{prefix}.plus.wo"), store.value(base.wo).clone(), false),
        };
        let mix = store.add(format!("{prefix}.mix"), Tensor::zeros(&[d]), false);
        let attn_post = norm(store, &format!("{prefix}.attn_post"), d);
        let h = 4 * d;
        let ffn = FfnParams {
            pre: norm(store, &format!("{prefix}.ffn_pre"), d),
            w1: store.add(format!("{prefix}.ffn.w1"), rng.normal_tensor(&[d, h], 1.0 / (d as f64).sqrt()), true),
            b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[h]), true),
            w2: store.add(format!("{prefix}.ffn.w2"), rng.normal_tensor(&[h, d], 1.0 / (h as f64).sqrt()), true),
            b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]), true),
            post: norm(store, &format!("{prefix}.ffn_post"), d),
        };
        Self { attn_pre, base, plus, mix, attn_post, ffn }
    }

    /// Overwrites the trainable channel with the spatial channel's weights.
    pub fn copy_base_to_plus(&self, store: &mut ParamStore) -> Result<()> {
        for (src, dst) in self.base.ids().into_iter().zip(self.plus.ids()) {
            store.set_value(dst, store.value(src).clone())?;
        }
        Ok(())
    }

    /// Every parameter handle of the layer in registration order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.attn_pre.gain, self.attn_pre.bias];
        v.extend(self.base.ids());
        v.extend(self.plus.ids());
        v.extend([self.mix, self.attn_post.gain, self.attn_post.bias]);
        let f = &self.ffn;
        v.extend([f.pre.gain, f.pre.bias, f.w1, f.b1, f.w2, f.b2, f.post.gain, f.post.bias]);
        v
    }
}

impl Projections {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// How a block combines its channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Dual,
    /// Spatial channel only, as in the single-image backbone.
    BaseOnly,
}

/// Masks for both channels of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMasks {
    pub base: AttentionMask,
    pub plus: AttentionMask,
}

impl BlockMasks {
    pub fn new(seq: &TokenSequence, kind: &ChannelKind, layer: usize) -> Result<Self> {
        Ok(Self { base: spatial_mask(seq), plus: kind.mask(seq, layer)? })
    }
}

/// Attention node and projected output of a channel.
#[derive(Clone, Copy, Debug)]
pub struct ChannelOutput {
    /// Node whose probabilities `Graph::attention_probs` exposes.
    pub attention: Var,
    pub out: Var,
}

/// Multi-head self-attention of `x` under `mask` with the given projections.
pub fn channel_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    proj: &Projections,
    mask: &AttentionMask,
    heads: usize,
) -> Result<ChannelOutput> {
    let (wq, wk, wv, wo) = (g.param(store, proj.wq), g.param(store, proj.wk), g.param(store, proj.wv), g.param(store, proj.wo));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let attention = g.attention(q, k, v, mask, heads)?;
    let out = g.matmul(attention, wo)?;
    Ok(ChannelOutput { attention, out })
}

fn check_len(g: &Graph, x: Var, seq: &TokenSequence) -> Result<()> {
    if g.value(x).rows() != seq.len() {
        return Err(Error::Dimension(format!("{} rows for a sequence of {}", g.value(x).rows(), seq.len())));
    }
    Ok(())
}

/// Spatial channel: frame tokens see their own frame and the text.
pub fn attention_base_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    seq: &TokenSequence,
    params: &DualChannelParams,
    heads: usize,
) -> Result<ChannelOutput> {
    check_len(g, x, seq)?;
    channel_forward(g, store, x, &params.base, &spatial_mask(seq), heads)
}

/// Spatio-temporal channel under the 3D local or shifted-window mask of `layer`.
pub fn attention_plus_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    seq: &TokenSequence,
    params: &DualChannelParams,
    kind: &ChannelKind,
    layer: usize,
    heads: usize,
) -> Result<ChannelOutput> {
    check_len(g, x, seq)?;
    channel_forward(g, store, x, &params.plus, &kind.mask(seq, layer)?, heads)
}

/// Result of one attention sub-block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub base: ChannelOutput,
    pub plus: Option<ChannelOutput>,
}

/// `x_out = x_in + LN(x̃)` with `x̃ = α⊙base + (1−α)⊙plus`, `α = sigmoid(a)`.
///
/// The mixture is evaluated as `plus + α⊙(base − plus)`, so identical channel
/// outputs give a result that does not depend on `a` at all.
pub fn dual_channel_forward(
    g: &mut Graph,
    store: &ParamStore,
    x_in: Var,
    masks: &BlockMasks,
    params: &DualChannelParams,
    heads: usize,
    mode: ChannelMode,
) -> Result<BlockOutput> {
    let (pg, pb) = (g.param(store, params.attn_pre.gain), g.param(store, params.attn_pre.bias));
    let h = g.layer_norm(x_in, pg, pb)?;
    let base = channel_forward(g, store, h, &params.base, &masks.base, heads)?;
    let (mixed, plus) = match mode {
        ChannelMode::BaseOnly => (base.out, None),
        ChannelMode::Dual => {
            let plus = channel_forward(g, store, h, &params.plus, &masks.plus, heads)?;
            let a = g.param(store, params.mix);
            let alpha = g.sigmoid(a);
            let diff = g.sub(base.out, plus.out)?;
            let gated = g.mul_row(diff, alpha)?;
            (g.add(plus.out, gated)?, Some(plus))
        }
    };
    let (qg, qb) = (g.param(store, params.attn_post.gain), g.param(store, params.attn_post.bias));
    let normed = g.layer_norm(mixed, qg, qb)?;
    let out = g.add(x_in, normed)?;
    Ok(BlockOutput { out, base, plus })
}

/// Position-wise `W2·gelu(W1·LN(x) + b1) + b2`, post-normalized and added to `x`.
pub fn shared_ffn_forward(g: &mut Graph, store: &ParamStore, x: Var, ffn: &FfnParams) -> Result<Var> {
    let (pg, pb) = (g.param(store, ffn.pre.gain), g.param(store, ffn.pre.bias));
    let h = g.layer_norm(x, pg, pb)?;
    let (w1, b1) = (g.param(store, ffn.w1), g.param(store, ffn.b1));
    let u = g.matmul(h, w1)?;
    let u = g.add_row(u, b1)?;
    let u = g.gelu(u);
    let (w2, b2) = (g.param(store, ffn.w2), g.param(store, ffn.b2));
    let y = g.matmul(u, w2)?;
    let y = g.add_row(y, b2)?;
    let (qg, qb) = (g.param(store, ffn.post.gain), g.param(store, ffn.post.bias));
    let y = g.layer_norm(y, qg, qb)?;
    g.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{adam_step, grad_check, AdamConfig, AdamState};
    use crate::sequence::{build_stage1_sequence, Layout, Vocab};
    use crate::synthvid::TokenGrid;

    const D: usize = 8;

    fn seq(ts: usize, side: usize, seed: u64) -> TokenSequence {
        let vocab = Vocab::new(16, 12, vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let mut rng = Rng::new(seed);
        let frames: Vec<_> = (0..ts)
            .map(|_| TokenGrid { side, tokens: (0..side * side).map(|_| rng.below(16)).collect() })
            .collect();
        build_stage1_sequence(&vocab, 1.0, &[0, 4, 8], &frames, Layout::new(ts, side, 4).unwrap()).unwrap()
    }

    fn layer(seed: u64) -> (ParamStore, DualChannelParams) {
        let mut store = ParamStore::new();
        let p = DualChannelParams::init(&mut store, "l0", D, &mut Rng::new(seed));
        (store, p)
    }

    fn perturb_plus(store: &mut ParamStore, p: &DualChannelParams, seed: u64) {
        let mut rng = Rng::new(seed);
        for id in p.plus.ids() {
            let t = rng.normal_tensor(&[D, D], 0.4);
            store.set_value(id, t).unwrap();
        }
    }

    fn run(store: &ParamStore, p: &DualChannelParams, x: &Tensor, masks: &BlockMasks, mode: ChannelMode) -> Tensor {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = dual_channel_forward(&mut g, store, xv, masks, p, 2, mode).unwrap().out;
        g.value(out).clone()
    }

    #[test]
    fn init_copies_base_and_zero_mixture() {
        let (store, p) = layer(1);
        for (b, q) in p.base.ids().into_iter().zip(p.plus.ids()) {
            assert_eq!(store.value(b), store.value(q));
            assert!(store.get(b).frozen && !store.get(q).frozen);
        }
        assert!(store.value(p.mix).data().iter().all(|&a| a == 0.0));
        let mut g = Graph::new();
        let a = g.param(&store, p.mix);
        let alpha = g.sigmoid(a);
        assert!(g.value(alpha).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_frame_full_extent_matches_base_only() {
        let (store, p) = layer(2);
        let s = seq(1, 2, 3);
        let kind = ChannelKind::Local3d(LocalExtent::new(1, 2, 2).unwrap());
        let masks = BlockMasks::new(&s, &kind, 0).unwrap();
        assert_eq!(masks.base, masks.plus);
        let mut rng = Rng::new(4);
        for _ in 0..5 {
            let x = rng.normal_tensor(&[s.len(), D], 1.0);
            let dual = run(&store, &p, &x, &masks, ChannelMode::Dual);
            let base = run(&store, &p, &x, &masks, ChannelMode::BaseOnly);
            assert!(dual.max_abs_diff(&base) <= 1e-12);
        }
    }

    #[test]
    fn identical_channels_ignore_mixture() {
        let (mut store, p) = layer(5);
        let s = seq(3, 2, 6);
        let masks = BlockMasks { base: spatial_mask(&s), plus: spatial_mask(&s) };
        let x = Rng::new(7).normal_tensor(&[s.len(), D], 1.0);
        let reference = run(&store, &p, &x, &masks, ChannelMode::Dual);
        for a in [-30.0, -1.0, 0.7, 12.0] {
            store.set_value(p.mix, Tensor::filled(&[D], a)).unwrap();
            assert_eq!(run(&store, &p, &x, &masks, ChannelMode::Dual), reference);
        }
    }

    #[test]
    fn saturated_mixture_is_base_only() {
        let (mut store, p) = layer(8);
        perturb_plus(&mut store, &p, 9);
        let s = seq(3, 2, 10);
        let kind = ChannelKind::Swin3d(WindowConfig::new(2, 2, 2, 2).unwrap());
        let masks = BlockMasks::new(&s, &kind, 0).unwrap();
        store.set_value(p.mix, Tensor::filled(&[D], 20.0)).unwrap();
        let x = Rng::new(11).normal_tensor(&[s.len(), D], 1.0);
        let dual = run(&store, &p, &x, &masks, ChannelMode::Dual);
        let base = run(&store, &p, &x, &masks, ChannelMode::BaseOnly);
        assert!(dual.max_abs_diff(&base) < 1e-6);
    }

    #[test]
    fn base_output_ignores_other_frames() {
        let (store, p) = layer(12);
        let s = seq(3, 2, 13);
        let mut rng = Rng::new(14);
        let x = rng.normal_tensor(&[s.len(), D], 1.0);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let o = attention_base_forward(&mut g, &store, xv, &s, &p, 2).unwrap().out;
            g.value(o).clone()
        };
        let before = eval(&x);
        // Permute the rows of frame 2.
        let mut y = x.clone();
        let start = s.layout.position(2, 0, 0);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(start + (i + 1) % 4).to_vec()).collect();
        for (i, r) in rows.iter().enumerate() {
            y.data_mut()[(start + i) * D..(start + i + 1) * D].copy_from_slice(r);
        }
        let after = eval(&y);
        for pos in 0..s.layout.position(2, 0, 0) {
            assert_eq!(before.row(pos), after.row(pos));
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let (mut store, p) = layer(15);
        store.set_value(p.base.wv, Tensor::zeros(&[D, D])).unwrap();
        let s = seq(2, 2, 16);
        let mut g = Graph::new();
        let x = g.input(Rng::new(17).normal_tensor(&[s.len(), D], 1.0));
        let o = attention_base_forward(&mut g, &store, x, &s, &p, 2).unwrap().out;
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plus_sees_previous_frames() {
        let s = seq(3, 4, 18);
        let kind = ChannelKind::Swin3d(WindowConfig::new(4, 4, 4, 4).unwrap());
        let m = BlockMasks::new(&s, &kind, 0).unwrap();
        assert!(m.base.is_subset_of(&m.plus));
        for pos in s.layout.position(1, 0, 0)..s.len() {
            assert!(m.plus.row_count(pos) > m.base.row_count(pos));
        }
    }

    #[test]
    fn unit_time_extent_equals_base() {
        let (store, p) = layer(19);
        let s = seq(3, 2, 20);
        let kind = ChannelKind::Local3d(LocalExtent::new(1, 2, 2).unwrap());
        let masks = BlockMasks::new(&s, &kind, 0).unwrap();
        let x = Rng::new(21).normal_tensor(&[s.len(), D], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let b = attention_base_forward(&mut g, &store, xv, &s, &p, 2).unwrap().out;
        let q = attention_plus_forward(&mut g, &store, xv, &s, &p, &kind, 0, 2).unwrap().out;
        for pos in s.layout.frame_start()..s.len() {
            assert_eq!(g.value(b).row(pos), g.value(q).row(pos));
        }
        assert!(masks.plus.first_empty_row().is_none());
    }

    #[test]
    fn ffn_zero_weights_is_identity() {
        let (mut store, p) = layer(22);
        store.set_value(p.ffn.w1, Tensor::zeros(&[D, 4 * D])).unwrap();
        store.set_value(p.ffn.w2, Tensor::zeros(&[4 * D, D])).unwrap();
        let x = Rng::new(23).normal_tensor(&[5, D], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = shared_ffn_forward(&mut g, &store, xv, &p.ffn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ffn_is_position_wise() {
        let (store, p) = layer(24);
        let x = Rng::new(25).normal_tensor(&[4, D], 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut y = Tensor::zeros(&[4, D]);
        for (i, &j) in perm.iter().enumerate() {
            y.data_mut()[i * D..(i + 1) * D].copy_from_slice(x.row(j));
        }
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let o = shared_ffn_forward(&mut g, &store, v, &p.ffn).unwrap();
            g.value(o).clone()
        };
        let (fx, fy) = (eval(&x), eval(&y));
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(fy.row(i), fx.row(j));
        }
    }

    #[test]
    fn frozen_ffn_gets_gradient_but_no_update() {
        let (mut store, p) = layer(26);
        let s = seq(2, 2, 27);
        let masks = BlockMasks::new(&s, &ChannelKind::Local3d(LocalExtent::new(2, 2, 2).unwrap()), 0).unwrap();
        let x = Rng::new(28).normal_tensor(&[s.len(), D], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let h = dual_channel_forward(&mut g, &store, xv, &masks, &p, 2, ChannelMode::Dual).unwrap().out;
        let y = shared_ffn_forward(&mut g, &store, h, &p.ffn).unwrap();
        let sq = g.square(y);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap().params(store.len());
        assert!(grads[p.ffn.w1.0].as_ref().unwrap().data().iter().any(|&v| v != 0.0));
        let before = store.value(p.ffn.w1).clone();
        store.accumulate(&grads);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default(), 1e-2).unwrap();
        assert_eq!(store.value(p.ffn.w1), &before);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (mut store, p) = layer(29);
        perturb_plus(&mut store, &p, 30);
        let mut rng = Rng::new(31);
        for n in [p.attn_pre, p.attn_post] {
            store.set_value(n.gain, rng.normal_tensor(&[D], 1.0)).unwrap();
            store.set_value(n.bias, rng.normal_tensor(&[D], 0.3)).unwrap();
        }
        store.set_value(p.mix, rng.normal_tensor(&[D], 1.0)).unwrap();
        let s = seq(3, 2, 32);
        let masks = BlockMasks::new(&s, &ChannelKind::Swin3d(WindowConfig::new(1, 2, 2, 2).unwrap()), 1).unwrap();
        let x = rng.normal_tensor(&[s.len(), D], 1.0);
        let ids: Vec<ParamId> = [p.mix, p.attn_pre.gain, p.attn_post.gain].into_iter().chain(p.plus.ids()).chain(p.base.ids()).collect();
        let report = grad_check(
            &mut store,
            &ids,
            |g, st| {
                let xv = g.input(x.clone());
                let o = dual_channel_forward(g, st, xv, &masks, &p, 2, ChannelMode::Dual)?.out;
                let w = g.input(Rng::new(33).normal_tensor(&[s.len(), D], 1.0));
                let prod = g.mul(o, w)?;
                Ok(g.mean(prod))
            },
            1e-5,
            88,
            34,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn shifted_layers_carry_information_across_windows() {
        // Two layers (shift 0, then shift 1) of a 2x2-window swin channel on
        // 4x4 frames: (t,0,0) must reach (t+2,2,2).
        let s = seq(3, 4, 35);
        let w = WindowConfig::new(2, 2, 4, 4).unwrap();
        let kind = ChannelKind::Swin3d(w);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(36);
        let layers: Vec<_> = (0..2).map(|l| DualChannelParams::init(&mut store, &format!("l{l}"), D, &mut rng)).collect();
        for l in &layers {
            perturb_plus(&mut store, l, 37);
        }
        let masks: Vec<_> = (0..2).map(|l| BlockMasks::new(&s, &kind, l).unwrap()).collect();
        let mut g = Graph::new();
        let x = g.input(rng.normal_tensor(&[s.len(), D], 1.0));
        let mut h = x;
        for (l, m) in layers.iter().zip(&masks) {
            h = dual_channel_forward(&mut g, &store, h, m, l, 2, ChannelMode::Dual).unwrap().out;
        }
        let target = s.layout.position(2, 2, 2);
        let sel = g.input(Tensor::from_parts(
            vec![s.len(), D],
            (0..s.len() * D).map(|i| if i / D == target { 1.0 } else { 0.0 }).collect(),
        ));
        let picked = g.mul(h, sel).unwrap();
        let loss = g.sum(picked);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        let source = s.layout.position(0, 0, 0);
        assert!(gx.row(source).iter().any(|&v| v != 0.0));
        // A single unshifted layer cannot do it.
        let mut g1 = Graph::new();
        let x1 = g1.input(Rng::new(38).normal_tensor(&[s.len(), D], 1.0));
        let h1 = dual_channel_forward(&mut g1, &store, x1, &masks[0], &layers[0], 2, ChannelMode::Dual).unwrap().out;
        let sel1 = g1.input(g.value(sel).clone());
        let p1 = g1.mul(h1, sel1).unwrap();
        let l1 = g1.sum(p1);
        let g1x = g1.backward(l1).unwrap();
        assert!(g1x.get(x1).unwrap().row(source).iter().all(|&v| v == 0.0));
    }
}
