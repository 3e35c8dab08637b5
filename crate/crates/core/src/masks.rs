//! Attention-permission structures: region masks, 3D local receptive fields,
//! autoregressive shifted-window masks and the transitive dependency oracle.
//!
//! Rate, caption and `[B]` keys are never restricted by locality: every
//! locality rule below applies to frame-query/frame-key pairs only and is
//! intersected with the region mask.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
pub use crate::numkernel::AttentionMask;
use crate::sequence::{Region, TokenSequence};

/// Height/width of the attention window over an `X×Y` token frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowConfig {
    pub ax: usize,
    pub ay: usize,
    pub x: usize,
    pub y: usize,
}

impl WindowConfig {
    pub fn new(ax: usize, ay: usize, x: usize, y: usize) -> Result<Self> {
        if ax == 0 || ay == 0 || ax > x || ay > y {
            return Err(Error::Parameter(format!("window {ax}x{ay} does not fit a {x}x{y} frame")));
        }
        Ok(Self { ax, ay, x, y })
    }

    /// Flat offset `A_x·Y + A_y` between consecutive frames of a wavefront.
    pub fn frame_offset(&self) -> usize {
        self.ax * self.y + self.ay
    }

    /// Per-layer partition shift: `(⌊A_x/2⌋, ⌊A_y/2⌋)` on odd layers.
    pub fn layer_shift(&self, layer: usize) -> (usize, usize) {
        if layer % 2 == 1 {
            (self.ax / 2, self.ay / 2)
        } else {
            (0, 0)
        }
    }
}

/// Extent of the 3D local receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalExtent {
    pub lt: usize,
    pub lx: usize,
    pub ly: usize,
}

impl LocalExtent {
    pub fn new(lt: usize, lx: usize, ly: usize) -> Result<Self> {
        if lt == 0 || lx == 0 || ly == 0 {
            return Err(Error::Parameter(format!("local extent ({lt}, {lx}, {ly})")));
        }
        Ok(Self { lt, lx, ly })
    }
}

/// Bidirectional queries see bidirectional keys; unidirectional queries see
/// bidirectional keys and unidirectional keys at or before themselves.
pub fn region_mask(seq: &TokenSequence) -> AttentionMask {
    let n = seq.len();
    AttentionMask::from_fn(n, n, |q, k| match (seq.region(q), seq.region(k)) {
        (_, Region::Bidirectional) => true,
        (Region::Unidirectional, Region::Unidirectional) => k <= q,
        (Region::Bidirectional, Region::Unidirectional) => false,
    })
}

/// Restricts frame/frame pairs of `base` by `keep`; other pairs copy `base`.
fn restrict_frames(
    seq: &TokenSequence,
    base: &AttentionMask,
    keep: impl Fn((usize, usize, usize), (usize, usize, usize)) -> bool,
) -> AttentionMask {
    let n = seq.len();
    AttentionMask::from_fn(n, n, |q, k| {
        if !base.allowed(q, k) {
            return false;
        }
        match (seq.coords(q), seq.coords(k)) {
            (Some(cq), Some(ck)) => keep(cq, ck),
            _ => true,
        }
    })
}

/// Spatial channel: frame queries keep their own frame plus text; text queries keep text.
pub fn spatial_mask(seq: &TokenSequence) -> AttentionMask {
    let base = region_mask(seq);
    let n = seq.len();
    AttentionMask::from_fn(n, n, |q, k| {
        base.allowed(q, k)
            && match (seq.coords(q), seq.coords(k)) {
                (Some(cq), Some(ck)) => cq.0 == ck.0,
                (None, Some(_)) => false,
                _ => true,
            }
    })
}

/// `base` intersected with `|Δt| < l_t, |Δx| < l_x, |Δy| < l_y` on frame pairs.
/// Extents larger than the sequence are equivalent to the full extent.
pub fn local_rf_mask(seq: &TokenSequence, extent: LocalExtent, base: &AttentionMask) -> AttentionMask {
    let l = &seq.layout;
    let (lt, lx, ly) = (extent.lt.min(l.ts), extent.lx.min(l.side), extent.ly.min(l.side));
    restrict_frames(seq, base, |(tq, xq, yq), (tk, xk, yk)| {
        tq.abs_diff(tk) < lt && xq.abs_diff(xk) < lx && yq.abs_diff(yk) < ly
    })
}

/// Window locality `|Δx| < A_x, |Δy| < A_y` on frame pairs, intersected with the
/// region mask. For a stage-1 sequence this is the autoregressive window mask:
/// earlier frames, or earlier-or-equal raster positions in the same frame.
pub fn swin_ar_mask(seq: &TokenSequence, w: WindowConfig) -> AttentionMask {
    let base = region_mask(seq);
    restrict_frames(seq, &base, |(_, xq, yq), (_, xk, yk)| xq.abs_diff(xk) < w.ax && yq.abs_diff(yk) < w.ay)
}

/// Partitioned windows for one layer: frame pairs must share the window
/// `(⌊(x + s_x)/A_x⌋, ⌊(y + s_y)/A_y⌋)`, intersected with the region mask.
pub fn shifted_window_mask(seq: &TokenSequence, w: WindowConfig, shift: (usize, usize)) -> AttentionMask {
    let base = region_mask(seq);
    let win = |x: usize, y: usize| ((x + shift.0) / w.ax, (y + shift.1) / w.ay);
    restrict_frames(seq, &base, |(_, xq, yq), (_, xk, yk)| win(xq, yq) == win(xk, yk))
}

/// Transitive closure of `mask` restricted to frame positions.
///
/// `reach.allowed(q, k)` means `k` influences `q` through a chain of one or
/// more permitted frame-to-frame edges.
pub fn reachability_oracle(seq: &TokenSequence, mask: &AttentionMask) -> AttentionMask {
    transitive_closure(mask, |p| seq.is_frame(p))
}

/// Transitive closure of the edges `q -> k` of `mask` whose endpoints both satisfy `keep`.
pub fn transitive_closure(mask: &AttentionMask, keep: impl Fn(usize) -> bool) -> AttentionMask {
    let n = mask.rows();
    let words = n.div_ceil(64);
    let mut bits = vec![0u64; n * words];
    for q in (0..n).filter(|&q| keep(q)) {
        for k in (0..n).filter(|&k| keep(k) && mask.allowed(q, k)) {
            bits[q * words + k / 64] |= 1 << (k % 64);
        }
    }
    // Warshall over bit rows.
    for m in 0..n {
        let (mw, mb) = (m / 64, 1u64 << (m % 64));
        let row_m: Vec<u64> = bits[m * words..(m + 1) * words].to_vec();
        for q in 0..n {
            if bits[q * words + mw] & mb != 0 {
                for (dst, src) in bits[q * words..(q + 1) * words].iter_mut().zip(&row_m) {
                    *dst |= src;
                }
            }
        }
    }
    AttentionMask::from_fn(n, n, |q, k| bits[q * words + k / 64] & (1 << (k % 64)) != 0)
}

/// Binary PBM (P4); permitted pairs are black.
pub fn write_pbm(mask: &AttentionMask, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P4\n{} {}\n", mask.cols(), mask.rows())?;
    let stride = mask.cols().div_ceil(8);
    for q in 0..mask.rows() {
        let mut row = vec![0u8; stride];
        for (k, &a) in mask.row(q).iter().enumerate() {
            if a {
                row[k / 8] |= 0x80 >> (k % 8);
            }
        }
        f.write_all(&row)?;
    }
    Ok(())
}
