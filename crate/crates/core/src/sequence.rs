//! Token sequence layout `[rate, caption.., [B], frame 1 .. frame Ts]`, region labels,
//! frame-rate selection and rate resampling.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synthvid::{quantize_frame, SyntheticClip, TokenGrid};

/// Unified id space: image tokens, caption tokens, one token per frame rate, `[B]`, pad.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pub image: usize,
    pub text: usize,
    pub rates: Vec<f64>,
}

impl Vocab {
    pub fn new(image: usize, text: usize, rates: Vec<f64>) -> Result<Self> {
        if image == 0 || text == 0 || rates.is_empty() {
            return Err(Error::Parameter("vocabulary regions must be non-empty".into()));
        }
        if rates.windows(2).any(|w| !(w[0] < w[1])) || rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Parameter(format!("rates {rates:?} must be positive and ascending")));
        }
        Ok(Self { image, text, rates })
    }

    pub fn text_id(&self, caption_token: usize) -> Result<usize> {
        if caption_token >= self.text {
            return Err(Error::Vocab { id: caption_token, vocab: self.text });
        }
        Ok(self.image + caption_token)
    }

    /// Token for an exactly listed rate.
    pub fn rate_id(&self, rate: f64) -> Result<usize> {
        self.rates
            .iter()
            .position(|&r| r == rate)
            .map(|i| self.image + self.text + i)
            .ok_or_else(|| Error::Parameter(format!("rate {rate} not in {:?}", self.rates)))
    }

    pub fn rate_of(&self, id: usize) -> Option<f64> {
        id.checked_sub(self.image + self.text).and_then(|i| self.rates.get(i).copied())
    }

    /// Listed rate closest to `rate` (ties go to the lower rate).
    pub fn nearest_rate(&self, rate: f64) -> f64 {
        let mut best = self.rates[0];
        for &r in &self.rates {
            if (r - rate).abs() < (best - rate).abs() {
                best = r;
            }
        }
        best
    }

    pub fn separator(&self) -> usize {
        self.image + self.text + self.rates.len()
    }

    pub fn pad(&self) -> usize {
        self.separator() + 1
    }

    pub fn size(&self) -> usize {
        self.pad() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Bidirectional,
    Unidirectional,
}

/// Shape of a sequence: frames, grid side and text length (rate token included).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub ts: usize,
    pub side: usize,
    pub n_text: usize,
}

impl Layout {
    pub fn new(ts: usize, side: usize, n_text: usize) -> Result<Self> {
        if ts == 0 || side == 0 || n_text < 1 {
            return Err(Error::Parameter(format!("layout ts={ts} side={side} n_text={n_text}")));
        }
        Ok(Self { ts, side, n_text })
    }

    pub fn frame_len(&self) -> usize {
        self.side * self.side
    }

    /// Index of the first frame token.
    pub fn frame_start(&self) -> usize {
        self.n_text + 1
    }

    pub fn len(&self) -> usize {
        self.frame_start() + self.ts * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, t: usize, x: usize, y: usize) -> usize {
        self.frame_start() + t * self.frame_len() + x * self.side + y
    }

    /// `(t, x, y)` of a frame position, `None` for rate/text/[B].
    pub fn coords(&self, pos: usize) -> Option<(usize, usize, usize)> {
        let rel = pos.checked_sub(self.frame_start())?;
        if rel >= self.ts * self.frame_len() {
            return None;
        }
        let t = rel / self.frame_len();
        let i = rel % self.frame_len();
        Some((t, i / self.side, i % self.side))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub layout: Layout,
    pub rate: f64,
    pub tokens: Vec<usize>,
    pub regions: Vec<Region>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn frame_rate_token(&self) -> usize {
        self.tokens[0]
    }

    pub fn text_tokens(&self) -> &[usize] {
        &self.tokens[1..self.layout.n_text]
    }

    pub fn separator_token(&self) -> usize {
        self.tokens[self.layout.n_text]
    }

    pub fn coords(&self, pos: usize) -> Option<(usize, usize, usize)> {
        self.layout.coords(pos)
    }

    pub fn region(&self, pos: usize) -> Region {
        self.regions[pos]
    }

    pub fn is_frame(&self, pos: usize) -> bool {
        pos >= self.layout.frame_start()
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        let s = self.layout.position(t, 0, 0);
        &self.tokens[s..s + self.layout.frame_len()]
    }

    pub fn frame_grid(&self, t: usize) -> TokenGrid {
        TokenGrid { side: self.layout.side, tokens: self.frame(t).to_vec() }
    }

    pub fn set_frame(&mut self, t: usize, grid: &TokenGrid) -> Result<()> {
        if grid.side != self.layout.side || t >= self.layout.ts {
            return Err(Error::Parameter(format!("frame {t} of side {} does not fit", grid.side)));
        }
        let s = self.layout.position(t, 0, 0);
        self.tokens[s..s + self.layout.frame_len()].copy_from_slice(&grid.tokens);
        Ok(())
    }

    pub fn unidirectional_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.regions[p] == Region::Unidirectional).collect()
    }

    /// Frames (0-based) whose tokens are prediction targets.
    pub fn target_frames(&self) -> Vec<usize> {
        (0..self.layout.ts)
            .filter(|&t| self.regions[self.layout.position(t, 0, 0)] == Region::Unidirectional)
            .collect()
    }

    /// Line-oriented text: a header, then `id flag` per position (`B`/`U`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.layout;
        writeln!(s, "hiervid-sequence 1").unwrap();
        writeln!(s, "ts {}", l.ts).unwrap();
        writeln!(s, "side {}", l.side).unwrap();
        writeln!(s, "n_text {}", l.n_text).unwrap();
        writeln!(s, "rate {:?}", self.rate).unwrap();
        for (t, r) in self.tokens.iter().zip(&self.regions) {
            let flag = match r {
                Region::Bidirectional => 'B',
                Region::Unidirectional => 'U',
            };
            writeln!(s, "{t} {flag}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Parse(format!("sequence text: {m}"));
        if lines.next() != Some("hiervid-sequence 1") {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {name}")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|e| bad(&e.to_string()));
        let ts = num(field("ts")?)?;
        let side = num(field("side")?)?;
        let n_text = num(field("n_text")?)?;
        let rate: f64 = field("rate")?.parse().map_err(|_| bad("rate"))?;
        let layout = Layout::new(ts, side, n_text)?;
        let mut tokens = Vec::with_capacity(layout.len());
        let mut regions = Vec::with_capacity(layout.len());
        for line in lines {
            let (id, flag) = line.split_once(' ').ok_or_else(|| bad(line))?;
            tokens.push(id.parse::<usize>().map_err(|e| bad(&e.to_string()))?);
            regions.push(match flag {
                "B" => Region::Bidirectional,
                "U" => Region::Unidirectional,
                _ => return Err(bad(flag)),
            });
        }
        if tokens.len() != layout.len() {
            return Err(bad(&format!("{} positions, layout needs {}", tokens.len(), layout.len())));
        }
        Ok(Self { layout, rate, tokens, regions })
    }
}

/// Lowest rate in `allowed` at which frames at instants `0, 1/r, 2/r, ...` give
/// at least `min_frames` frames within `[0, duration_s]`.
pub fn select_frame_rate(duration_s: f64, allowed: &[f64], min_frames: usize) -> Result<f64> {
    if allowed.is_empty() || min_frames == 0 {
        return Err(Error::Parameter("need at least one rate and one frame".into()));
    }
    if allowed.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Parameter(format!("rates {allowed:?} are not ascending")));
    }
    allowed
        .iter()
        .copied()
        .find(|&r| (min_frames - 1) as f64 / r <= duration_s)
        .ok_or(Error::NoValidRate { duration_s, min_frames })
}

/// Quantized frames at instants `start_s + k / rate`, each taken from the
/// nearest native frame (halves round up).
pub fn sample_frames_at_rate(
    clip: &SyntheticClip,
    rate: f64,
    count: usize,
    start_s: f64,
    grid_side: usize,
    palette_bits: u32,
) -> Result<Vec<TokenGrid>> {
    if count == 0 || !(rate > 0.0) || start_s < 0.0 {
        return Err(Error::Range(format!("count {count} at rate {rate} from {start_s} s")));
    }
    let end = start_s + (count - 1) as f64 / rate;
    if end > clip.duration() + 1e-9 {
        return Err(Error::Range(format!("window ends at {end} s, clip lasts {} s", clip.duration())));
    }
    let last = clip.frames.len() - 1;
    (0..count)
        .map(|k| {
            let t = start_s + k as f64 / rate;
            let idx = ((t * clip.native_fps + 0.5).floor() as usize).min(last);
            quantize_frame(&clip.frames[idx], grid_side, palette_bits)
        })
        .collect()
}

fn header(vocab: &Vocab, layout: &Layout, rate: f64, caption: &[usize]) -> Result<Vec<usize>> {
    if caption.len() > layout.n_text - 1 {
        return Err(Error::Parameter(format!(
            "caption of {} tokens exceeds {} text slots",
            caption.len(),
            layout.n_text - 1
        )));
    }
    let mut tokens = Vec::with_capacity(layout.len());
    tokens.push(vocab.rate_id(rate)?);
    for &c in caption {
        tokens.push(vocab.text_id(c)?);
    }
    tokens.resize(layout.n_text, vocab.pad());
    tokens.push(vocab.separator());
    Ok(tokens)
}

fn check_grid(vocab: &Vocab, layout: &Layout, g: &TokenGrid) -> Result<()> {
    if g.side != layout.side {
        return Err(Error::Parameter(format!("grid side {} vs layout side {}", g.side, layout.side)));
    }
    if let Some(&id) = g.tokens.iter().find(|&&t| t >= vocab.image) {
        return Err(Error::Vocab { id, vocab: vocab.image });
    }
    Ok(())
}

/// Sequential key-frame layout: every frame token is unidirectional.
pub fn build_stage1_sequence(
    vocab: &Vocab,
    rate: f64,
    caption: &[usize],
    frames: &[TokenGrid],
    layout: Layout,
) -> Result<TokenSequence> {
    if frames.len() != layout.ts {
        return Err(Error::Parameter(format!("expected {} frames, got {}", layout.ts, frames.len())));
    }
    let mut tokens = header(vocab, &layout, rate, caption)?;
    for g in frames {
        check_grid(vocab, &layout, g)?;
        tokens.extend_from_slice(&g.tokens);
    }
    let mut regions = vec![Region::Bidirectional; layout.frame_start()];
    regions.resize(layout.len(), Region::Unidirectional);
    Ok(TokenSequence { layout, rate, tokens, regions })
}

/// Interpolation layout: `known` holds the odd slots `1, 3, .., ts` (1-indexed);
/// even slots are unidirectional targets, filled with token 0 until set.
pub fn build_stage2_sequence(
    vocab: &Vocab,
    rate: f64,
    caption: &[usize],
    known: &[(usize, TokenGrid)],
    layout: Layout,
) -> Result<TokenSequence> {
    if layout.ts % 2 == 0 || layout.ts < 3 {
        return Err(Error::Parameter(format!("interpolation needs an odd ts >= 3, got {}", layout.ts)));
    }
    if let Some((slot, _)) = known.iter().find(|(s, _)| s % 2 == 0) {
        return Err(Error::Parameter(format!("slot {slot} is an interpolation target, not a known frame")));
    }
    let mut slots: Vec<usize> = known.iter().map(|(s, _)| *s).collect();
    slots.sort_unstable();
    let expected: Vec<usize> = (1..=layout.ts).step_by(2).collect();
    if slots != expected {
        return Err(Error::Parameter(format!("known slots {slots:?}, expected {expected:?}")));
    }
    let mut tokens = header(vocab, &layout, rate, caption)?;
    tokens.resize(layout.len(), 0);
    let mut regions = vec![Region::Bidirectional; layout.len()];
    for t in (1..layout.ts).step_by(2) {
        let s = layout.position(t, 0, 0);
        regions[s..s + layout.frame_len()].fill(Region::Unidirectional);
    }
    let mut seq = TokenSequence { layout, rate, tokens, regions };
    for (slot, g) in known {
        check_grid(vocab, &layout, g)?;
        seq.set_frame(slot - 1, g)?;
    }
    Ok(seq)
}
