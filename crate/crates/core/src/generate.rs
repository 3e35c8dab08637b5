//! Two-stage generation: key frames at a low rate, then recursive
//! interpolation that doubles the frame rate each round.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::attention::{ChannelKind, ChannelMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{mix64, Rng};
use crate::scheduler::build_schedule;
use crate::sequence::{build_stage1_sequence, build_stage2_sequence, Layout, TokenSequence};
use crate::synthvid::{reconstruct_frame, TokenGrid};

/// Token choice from a row of logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Argmax; the lowest id wins ties.
    Greedy,
    /// Top-`k` at `temperature`, one derived random stream per position.
    TopK { k: usize, temperature: f64, seed: u64 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::TopK { k: 8, temperature: 1.0, seed: 0 }
    }
}

impl Sampler {
    /// Draws a token for the position identified by `key`; the draw does not
    /// depend on the order in which positions are decoded.
    pub fn sample(&self, logits: &[f64], key: u64) -> Result<usize> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("logits are empty or non-finite".into()));
        }
        match *self {
            Sampler::Greedy => Ok(argmax(logits)),
            Sampler::TopK { k, temperature, seed } => {
                if k == 0 || !(temperature > 0.0) {
                    return Err(Error::Parameter(format!("top-k {k} at temperature {temperature}")));
                }
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                order.truncate(k.min(logits.len()));
                let top = logits[order[0]];
                let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = Rng::derived(seed, key).uniform() * total;
                for (&i, w) in order.iter().zip(&weights) {
                    if u < *w {
                        return Ok(i);
                    }
                    u -= w;
                }
                Ok(*order.last().expect("k >= 1"))
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stable key for a position within a generation call.
pub fn position_key(salt: u64, t: usize, x: usize, y: usize) -> u64 {
    mix64(salt ^ mix64(((t as u64) << 42) ^ ((x as u64) << 21) ^ y as u64))
}

/// Fills positions step by step: every position of a step is sampled from a
/// single forward pass over the sequence as it stood before the step.
pub fn decode_in_steps(model: &Model, seq: &mut TokenSequence, steps: &[Vec<usize>], sampler: &Sampler, salt: u64) -> Result<()> {
    let masks = model.layer_masks(seq)?;
    for step in steps {
        let logits = model.forward_logits_with(seq, &masks, ChannelMode::Dual)?;
        let picks: Vec<usize> = step
            .iter()
            .map(|&p| {
                let (t, x, y) = seq.coords(p).ok_or_else(|| Error::Parameter(format!("position {p} is not a frame token")))?;
                sampler.sample(logits.row(p), position_key(salt, t, x, y))
            })
            .collect::<Result<_>>()?;
        for (&p, tok) in step.iter().zip(picks) {
            seq.tokens[p] = tok;
        }
    }
    Ok(())
}

/// One position per step in raster order over the unidirectional region.
pub fn sequential_steps(seq: &TokenSequence) -> Vec<Vec<usize>> {
    seq.unidirectional_positions().into_iter().map(|p| vec![p]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Sequential,
    /// Wavefront schedule over the model's window configuration.
    Wavefront,
}

/// Rate token for `rate`, or the nearest trained one with a warning.
pub fn trained_rate(model: &Model, rate: f64) -> f64 {
    let near = model.config.vocab.nearest_rate(rate);
    if near != rate {
        warn!("rate {rate} was not trained; conditioning on {near}");
    }
    near
}

/// Samples `ts` key frames for `caption` at `rate`.
pub fn stage1_generate(model: &Model, caption: &[usize], rate: f64, sampler: &Sampler, decoding: Decoding) -> Result<Vec<TokenGrid>> {
    let c = &model.config;
    let rate = trained_rate(model, rate);
    let layout = Layout::new(c.ts, c.side, c.n_text)?;
    let blank = vec![TokenGrid { side: c.side, tokens: vec![0; c.side * c.side] }; c.ts];
    let mut seq = build_stage1_sequence(&c.vocab, rate, caption, &blank, layout)?;
    let steps = match decoding {
        Decoding::Sequential => sequential_steps(&seq),
        Decoding::Wavefront => {
            let ChannelKind::Swin3d(w) = c.channel else {
                return Err(Error::Parameter("wavefront decoding needs a shifted-window model".into()));
            };
            build_schedule(w, c.ts).positions(&layout)
        }
    };
    decode_in_steps(model, &mut seq, &steps, sampler, position_key(0x5eed, 0, 0, 0))?;
    Ok((0..c.ts).map(|t| seq.frame_grid(t)).collect())
}

/// Doubles the frame count minus one: `n` frames become `2n - 1`.
///
/// Frames are split into three-frame blocks overlapping by one frame; each
/// block fills slots 1, 3, 5 of a five-frame sequence whose slots 2 and 4 are
/// generated in order. A trailing pair uses a three-frame sequence. Blocks are
/// independent and run concurrently.
pub fn interpolate_round(
    model: &Model,
    frames: &[TokenGrid],
    caption: &[usize],
    rate: f64,
    sampler: &Sampler,
    salt: u64,
) -> Result<Vec<TokenGrid>> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::Parameter(format!("interpolation needs at least 2 frames, got {n}")));
    }
    let rate = trained_rate(model, rate);
    let c = &model.config;
    let starts: Vec<usize> = (0..n - 1).step_by(2).collect();
    let filled: Vec<Vec<TokenGrid>> = starts
        .par_iter()
        .enumerate()
        .map(|(b, &s)| {
            let block = &frames[s..(s + 3).min(n)];
            let ts = 2 * block.len() - 1;
            let known: Vec<_> = block.iter().enumerate().map(|(i, g)| (2 * i + 1, g.clone())).collect();
            let mut seq = build_stage2_sequence(&c.vocab, rate, caption, &known, Layout::new(ts, c.side, c.n_text)?)?;
            let steps = sequential_steps(&seq);
            decode_in_steps(model, &mut seq, &steps, sampler, position_key(salt, b, 0, 1))?;
            Ok((0..ts).map(|t| seq.frame_grid(t)).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = vec![frames[0].clone()];
    for block in filled {
        out.extend(block.into_iter().skip(1));
    }
    Ok(out)
}

/// Origin of a generated frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    KeyFrame,
    /// Inserted by interpolation round `k` (1-based).
    Interpolated(usize),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::KeyFrame => write!(f, "stage1"),
            Provenance::Interpolated(k) => write!(f, "interp_round_{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedVideo {
    pub frames: Vec<TokenGrid>,
    pub fps: f64,
    pub provenance: Vec<Provenance>,
}

impl GeneratedVideo {
    /// Writes `frame_0000.pgm`, ... and returns their paths.
    pub fn write_frames(&self, dir: &Path, frame_px: usize, palette_bits: u32) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.frames
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let path = dir.join(format!("frame_{i:04}.pgm"));
                reconstruct_frame(g, frame_px, frame_px, palette_bits)?.write_pgm(&path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Key frames at `base_fps`, then `rounds` interpolation rounds; round `k`
/// conditions on the rate `base_fps·2^k` of the frames it produces.
pub fn hierarchical_generate(
    caption: &[usize],
    base_fps: f64,
    rounds: usize,
    key_model: &Model,
    interp_model: &Model,
    sampler: &Sampler,
    decoding: Decoding,
) -> Result<GeneratedVideo> {
    let frames = stage1_generate(key_model, caption, base_fps, sampler, decoding)?;
    let mut provenance = vec![Provenance::KeyFrame; frames.len()];
    let mut video = GeneratedVideo { frames, fps: base_fps, provenance: Vec::new() };
    for k in 1..=rounds {
        let rate = base_fps * f64::from(1u32 << k.min(31));
        video.frames = interpolate_round(interp_model, &video.frames, caption, rate, sampler, k as u64)?;
        provenance = provenance
            .iter()
            .flat_map(|&p| [p, Provenance::Interpolated(k)])
            .take(video.frames.len())
            .collect();
        video.fps *= 2.0;
    }
    video.provenance = provenance;
    Ok(video)
}
