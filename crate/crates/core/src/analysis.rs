//! Attention bookkeeping: frame-to-frame attention mass per layer, head and
//! channel, and statistics of the per-dimension mixture weights.

use std::fmt::Write as _;
use std::path::Path;

use crate::attention::ChannelMode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{ops::sigmoid, Graph};
use crate::sequence::TokenSequence;
use crate::synthvid::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Base,
    Plus,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Base => "base",
            Channel::Plus => "plus",
        })
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Channel::Base),
            "plus" => Ok(Channel::Plus),
            _ => Err(Error::Parse(format!("channel {s:?}: expected base or plus"))),
        }
    }
}

/// `grid[i][j]`: attention mass from frame `i` to frame `j`; the last column
/// is the mass from frame `i` to the text positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub layer: usize,
    pub head: usize,
    pub channel: Channel,
    pub grid: Vec<Vec<f64>>,
}

impl AttentionSummary {
    pub fn row_sum(&self, i: usize) -> f64 {
        self.grid[i].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let ts = self.grid.len();
        let mut s = String::from("frame");
        for j in 0..ts {
            let _ = write!(s, ",frame{j}");
        }
        s.push_str(",text\n");
        for (i, row) in self.grid.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale heatmap, one `cell`-pixel square per entry; lighter is larger.
    pub fn write_pgm(&self, path: &Path, cell: usize) -> Result<()> {
        let (rows, cols) = (self.grid.len(), self.grid.first().map_or(0, Vec::len));
        let max = self.grid.iter().flatten().copied().fold(0.0, f64::max);
        let mut img = Image::new(rows * cell, cols * cell, 0.0);
        for r in 0..rows * cell {
            for c in 0..cols * cell {
                let v = self.grid[r / cell][c / cell];
                img.set(r, c, if max > 0.0 { v / max } else { 0.0 });
            }
        }
        img.write_pgm(path)
    }
}

/// Summaries of every layer, head and channel from a single forward pass.
pub fn attention_summaries(model: &Model, seq: &TokenSequence) -> Result<Vec<AttentionSummary>> {
    let masks = model.layer_masks(seq)?;
    let mut g = Graph::new();
    let f = model.forward(&mut g, seq, &masks, ChannelMode::Dual)?;
    let (l, ts, start, flen) = (seq.len(), seq.layout.ts, seq.layout.frame_start(), seq.layout.frame_len());
    let heads = model.config.heads;
    let mut out = Vec::new();
    for (layer, b) in f.blocks.iter().enumerate() {
        let plus = b.plus.ok_or_else(|| Error::Parameter("forward ran without the trainable channel".into()))?;
        for (channel, node) in [(Channel::Base, b.base.attention), (Channel::Plus, plus.attention)] {
            let probs = g.attention_probs(node).ok_or_else(|| Error::Parameter("node has no attention probabilities".into()))?;
            for head in 0..heads {
                let p = &probs[head * l * l..(head + 1) * l * l];
                let mut grid = vec![vec![0.0; ts + 1]; ts];
                for (i, row) in grid.iter_mut().enumerate() {
                    for q in start + i * flen..start + (i + 1) * flen {
                        let pr = &p[q * l..(q + 1) * l];
                        row[ts] += pr[..start].iter().sum::<f64>();
                        for (j, cell) in row.iter_mut().take(ts).enumerate() {
                            *cell += pr[start + j * flen..start + (j + 1) * flen].iter().sum::<f64>();
                        }
                    }
                }
                out.push(AttentionSummary { layer, head, channel, grid });
            }
        }
    }
    Ok(out)
}

/// Summary for one layer, head and channel.
pub fn attention_summary(model: &Model, seq: &TokenSequence, layer: usize, head: usize, channel: Channel) -> Result<AttentionSummary> {
    if layer >= model.config.layers || head >= model.config.heads {
        return Err(Error::Parameter(format!(
            "layer {layer} / head {head} outside {} layers x {} heads",
            model.config.layers, model.config.heads
        )));
    }
    attention_summaries(model, seq)?
        .into_iter()
        .find(|s| s.layer == layer && s.head == head && s.channel == channel)
        .ok_or_else(|| Error::Parameter("summary not produced".into()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaStats {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance of `sigmoid(a)` over the hidden dimensions of each layer.
pub fn alpha_stats(model: &Model) -> Vec<AlphaStats> {
    model
        .params
        .layers
        .iter()
        .map(|l| {
            let alpha: Vec<f64> = model.store.value(l.mix).data().iter().map(|&a| sigmoid(a)).collect();
            let n = alpha.len() as f64;
            let mean = alpha.iter().sum::<f64>() / n;
            let variance = alpha.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            AlphaStats { mean, variance }
        })
        .collect()
}

pub fn alpha_csv(stats: &[AlphaStats]) -> String {
    let mut s = String::from("layer,mean,variance\n");
    for (i, a) in stats.iter().enumerate() {
        let _ = writeln!(s, "{i},{:?},{:?}", a.mean, a.variance);
    }
    s
}
