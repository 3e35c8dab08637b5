//! Wavefront decoding under shifted-window attention.
//!
//! With raster index `i = x·Y + y`, a token of frame `t` can only be reached
//! from frame `t + 1` through positions at most `(A_x - 1)·Y + A_y - 1` flat
//! steps further on. Placing `(t, i)` in step `i + t·(A_x·Y + A_y)` therefore
//! puts every dependency in an earlier step, and consecutive frames advance
//! in parallel.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generate::{decode_in_steps, Sampler};
use crate::masks::{transitive_closure, AttentionMask, WindowConfig};
use crate::model::Model;
use crate::sequence::{Layout, TokenSequence};

pub type Coord = (usize, usize, usize);

/// Whether `p2` may depend, directly or transitively, on `p1`.
///
/// Across frames (`t1 < t2`) independence holds when
/// `(x1 - x2)·Y + (y1 - y2) >= (t2 - t1 + 1)·(A_x·Y + A_y)`. Within a frame a
/// token may depend on every earlier raster position. A later frame never
/// feeds an earlier one.
pub fn may_depend(p1: Coord, p2: Coord, w: WindowConfig) -> bool {
    let (t1, x1, y1) = p1;
    let (t2, x2, y2) = p2;
    let y = w.y as i64;
    let flat = |x: usize, yy: usize| x as i64 * y + yy as i64;
    match t1.cmp(&t2) {
        std::cmp::Ordering::Less => {
            let lhs = flat(x1, y1) - flat(x2, y2);
            lhs < (t2 - t1 + 1) as i64 * w.frame_offset() as i64
        }
        std::cmp::Ordering::Equal => flat(x1, y1) < flat(x2, y2),
        std::cmp::Ordering::Greater => false,
    }
}

/// Partition of all frame-token coordinates into ordered parallel steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WavefrontSchedule {
    pub steps: Vec<Vec<Coord>>,
    pub window: WindowConfig,
    pub ts: usize,
}

/// Step `s` holds every `(t, i)` with `i + t·(A_x·Y + A_y) = s`.
pub fn build_schedule(w: WindowConfig, ts: usize) -> WavefrontSchedule {
    let xy = w.x * w.y;
    let off = w.frame_offset();
    let n_steps = if ts == 0 { 0 } else { xy + (ts - 1) * off };
    let mut steps = vec![Vec::new(); n_steps];
    for t in 0..ts {
        for i in 0..xy {
            steps[i + t * off].push((t, i / w.y, i % w.y));
        }
    }
    steps.retain(|s| !s.is_empty());
    WavefrontSchedule { steps, window: w, ts }
}

/// One token per step in raster order.
pub fn sequential_schedule(w: WindowConfig, ts: usize) -> WavefrontSchedule {
    let steps = (0..ts).flat_map(|t| (0..w.x * w.y).map(move |i| vec![(t, i / w.y, i % w.y)])).collect();
    WavefrontSchedule { steps, window: w, ts }
}

impl WavefrontSchedule {
    pub fn peak_parallelism(&self) -> usize {
        self.steps.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn token_count(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    /// Sequential steps over parallel steps.
    pub fn speedup(&self) -> f64 {
        self.token_count() as f64 / self.steps.len().max(1) as f64
    }

    /// Sequence positions of each step under `layout` (square frames only).
    pub fn positions(&self, layout: &Layout) -> Vec<Vec<usize>> {
        self.steps.iter().map(|s| s.iter().map(|&(t, x, y)| layout.position(t, x, y)).collect()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,x,y\n");
        for (k, step) in self.steps.iter().enumerate() {
            for &(t, x, y) in step {
                let _ = writeln!(s, "{k},{t},{x},{y}");
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "frames = {}\nwindow = {}x{}\ngrid = {}x{}\ntokens = {}\nsteps = {}\npeak_parallelism = {}\nspeedup = {:.4}\n",
            self.ts,
            self.window.ax,
            self.window.ay,
            self.window.x,
            self.window.y,
            self.token_count(),
            self.steps.len(),
            self.peak_parallelism(),
            self.speedup()
        )
    }

    /// Index of `(t, x, y)` among frame tokens: `t·X·Y + x·Y + y`.
    pub fn flat(&self, c: Coord) -> usize {
        c.0 * self.window.x * self.window.y + c.1 * self.window.y + c.2
    }
}

/// Stage-1 shifted-window mask over frame tokens only (`Ts·X·Y` square, flat
/// order `t·X·Y + x·Y + y`): earlier-or-equal flat positions within the window.
pub fn frame_swin_mask(w: WindowConfig, ts: usize) -> AttentionMask {
    let xy = w.x * w.y;
    let n = ts * xy;
    AttentionMask::from_fn(n, n, |q, k| {
        let (qi, ki) = (q % xy, k % xy);
        k <= q && (qi / w.y).abs_diff(ki / w.y) < w.ax && (qi % w.y).abs_diff(ki % w.y) < w.ay
    })
}

/// Frame-token block of a full-sequence mask, in the same flat order.
pub fn frame_block(seq: &TokenSequence, mask: &AttentionMask) -> AttentionMask {
    let s = seq.layout.frame_start();
    let n = seq.len() - s;
    AttentionMask::from_fn(n, n, |q, k| mask.allowed(s + q, s + k))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Missing(Coord),
    Duplicate(Coord),
    OutOfRange(Coord),
    /// Two coordinates of one step, one depending on the other.
    SameStep { step: usize, dependent: Coord, dependency: Coord },
    /// A dependency scheduled after its dependent.
    LateDependency { dependent: Coord, dependency: Coord },
}

/// Checks the partition and ordering invariants of `s` against the transitive
/// closure of `mask`, a frame-token mask in `frame_swin_mask` order.
pub fn verify_schedule(s: &WavefrontSchedule, mask: &AttentionMask) -> Vec<Violation> {
    let (xy, n) = (s.window.x * s.window.y, s.ts * s.window.x * s.window.y);
    let mut out = Vec::new();
    if mask.rows() != n || mask.cols() != n {
        return (0..n).map(|f| Violation::Missing((f / xy, f % xy / s.window.y, f % s.window.y))).collect();
    }
    let mut step_of: Vec<Option<usize>> = vec![None; n];
    for (k, step) in s.steps.iter().enumerate() {
        for &c in step {
            if c.0 >= s.ts || c.1 >= s.window.x || c.2 >= s.window.y {
                out.push(Violation::OutOfRange(c));
                continue;
            }
            let f = s.flat(c);
            if step_of[f].is_some() {
                out.push(Violation::Duplicate(c));
            } else {
                step_of[f] = Some(k);
            }
        }
    }
    let coord = |f: usize| (f / xy, f % xy / s.window.y, f % s.window.y);
    for (f, st) in step_of.iter().enumerate() {
        if st.is_none() {
            out.push(Violation::Missing(coord(f)));
        }
    }
    let reach = transitive_closure(mask, |_| true);
    for q in 0..n {
        for k in 0..n {
            if q == k || !reach.allowed(q, k) {
                continue;
            }
            if let (Some(sq), Some(sk)) = (step_of[q], step_of[k]) {
                if sq == sk {
                    out.push(Violation::SameStep { step: sq, dependent: coord(q), dependency: coord(k) });
                } else if sk > sq {
                    out.push(Violation::LateDependency { dependent: coord(q), dependency: coord(k) });
                }
            }
        }
    }
    out
}

/// Decodes every unidirectional frame token of a key-frame sequence along the
/// schedule, one forward pass per step. Bit-identical to sequential decoding
/// with the same keyed sampler.
pub fn parallel_decode(model: &Model, seq: &TokenSequence, schedule: &WavefrontSchedule, sampler: &Sampler, salt: u64) -> Result<Vec<usize>> {
    let l = seq.layout;
    if schedule.window.x != l.side || schedule.window.y != l.side || schedule.ts != l.ts {
        return Err(Error::Parameter("schedule does not match the sequence layout".into()));
    }
    let mut out = seq.clone();
    decode_in_steps(model, &mut out, &schedule.positions(&l), sampler, salt)?;
    Ok(out.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{reachability_oracle, swin_ar_mask};
    use crate::sequence::{build_stage1_sequence, Vocab};
    use crate::synthvid::TokenGrid;

    fn w(ax: usize, ay: usize, x: usize, y: usize) -> WindowConfig {
        WindowConfig::new(ax, ay, x, y).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert!(may_depend((0, 3, 3), (1, 0, 0), w(2, 2, 4, 4)));
        assert!(may_depend((0, 0, 0), (1, 3, 3), w(2, 2, 4, 4)));
        assert!(!may_depend((0, 7, 7), (1, 0, 0), w(2, 2, 8, 8)));
        assert!(may_depend((1, 0, 0), (1, 0, 1), w(2, 2, 4, 4)));
        assert!(!may_depend((1, 0, 1), (1, 0, 0), w(2, 2, 4, 4)));
    }

    #[test]
    fn schedule_shapes() {
        let s = build_schedule(w(2, 2, 4, 4), 1);
        assert_eq!(s.steps.len(), 16);
        assert!(s.steps.iter().all(|st| st.len() == 1));
        let s = build_schedule(w(2, 2, 8, 8), 5);
        assert_eq!(s.steps.len(), 64 + 4 * 18);
        assert_eq!(s.peak_parallelism(), 4);
        assert!(s.peak_parallelism() >= 64 / 18);
        assert_eq!(s.token_count(), 5 * 64);
        assert!(s.to_csv().starts_with("step,t,x,y\n0,0,0,0\n"));
        assert!(s.summary().contains("steps = 136"));
    }

    #[test]
    fn frame_mask_matches_sequence_mask() {
        let vocab = Vocab::new(16, 12, vec![1.0]).unwrap();
        let frames = vec![TokenGrid { side: 4, tokens: vec![0; 16] }; 3];
        let seq = build_stage1_sequence(&vocab, 1.0, &[], &frames, Layout::new(3, 4, 2).unwrap()).unwrap();
        let wc = w(2, 3, 4, 4);
        assert_eq!(frame_block(&seq, &swin_ar_mask(&seq, wc)), frame_swin_mask(wc, 3));
        let full = reachability_oracle(&seq, &swin_ar_mask(&seq, wc));
        let local = transitive_closure(&frame_swin_mask(wc, 3), |_| true);
        assert_eq!(frame_block(&seq, &full), local);
    }

    #[test]
    fn built_schedules_verify_and_merged_ones_fail() {
        for (ax, ay, x, y, ts) in [(1, 1, 2, 2, 3), (2, 2, 4, 4, 3), (2, 3, 4, 6, 2), (3, 1, 6, 2, 3)] {
            let wc = w(ax, ay, x, y);
            let m = frame_swin_mask(wc, ts);
            assert!(verify_schedule(&build_schedule(wc, ts), &m).is_empty());
            assert!(verify_schedule(&sequential_schedule(wc, ts), &m).is_empty());
            // (1,0,0) depends on (0,0,0); put them in one step.
            let mut merged = build_schedule(wc, ts);
            let later = merged.steps.remove(wc.frame_offset());
            merged.steps[0].extend(later);
            let v = verify_schedule(&merged, &m);
            assert!(v.iter().any(|v| matches!(v, Violation::SameStep { .. })), "{v:?}");
        }
    }

    #[test]
    fn partition_errors_are_reported() {
        let wc = w(1, 1, 2, 2);
        let m = frame_swin_mask(wc, 2);
        let mut s = build_schedule(wc, 2);
        s.steps[0].push((0, 0, 0));
        s.steps.pop();
        let v = verify_schedule(&s, &m);
        assert!(v.contains(&Violation::Duplicate((0, 0, 0))));
        assert!(v.iter().any(|x| matches!(x, Violation::Missing(_))));
    }
}
