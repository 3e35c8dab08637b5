//! Synthetic captioned clips and the palette tokenizer that turns frames into token grids.
//!
//! A clip shows one bright shape translating over a dark background with
//! toroidal wrap. Its caption is a closed-vocabulary encoding of the motion
//! descriptor (shape, direction, speed), so caption and descriptor are in
//! one-to-one correspondence.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    HBar,
    VBar,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::HBar, Shape::VBar, Shape::Dot];

    /// Height and width in pixels.
    fn extent(self) -> (usize, usize) {
        match self {
            Shape::Square => (8, 8),
            Shape::HBar => (4, 16),
            Shape::VBar => (16, 4),
            Shape::Dot => (4, 4),
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit step as (row, column) deltas.
    fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Shape::Square => "square",
            Shape::HBar => "hbar",
            Shape::VBar => "vbar",
            Shape::Dot => "dot",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("shape {s:?}: expected square, hbar, vbar or dot")))
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("direction {s:?}: expected left, right, up or down")))
    }
}

pub const MAX_SPEED: u32 = 3;

/// What moves, where to, and how fast (pixels per native frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MotionSpec {
    pub shape: Shape,
    pub direction: Direction,
    pub speed: u32,
}

/// Caption vocabulary: shapes, then directions, then speeds.
pub const CAPTION_VOCAB: usize = Shape::ALL.len() + Direction::ALL.len() + (MAX_SPEED as usize + 1);
/// Tokens per caption.
pub const CAPTION_LEN: usize = 3;

impl MotionSpec {
    pub fn new(shape: Shape, direction: Direction, speed: u32) -> Result<Self> {
        if speed > MAX_SPEED {
            return Err(Error::Parameter(format!("speed {speed} above {MAX_SPEED}")));
        }
        Ok(Self { shape, direction, speed })
    }

    /// Every descriptor in the closed space.
    pub fn all() -> Vec<MotionSpec> {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for direction in Direction::ALL {
                for speed in 0..=MAX_SPEED {
                    out.push(MotionSpec { shape, direction, speed });
                }
            }
        }
        out
    }

    /// Caption ids in `[0, CAPTION_VOCAB)`.
    pub fn caption(&self) -> Vec<usize> {
        let s = Shape::ALL.iter().position(|&x| x == self.shape).unwrap();
        let d = Direction::ALL.iter().position(|&x| x == self.direction).unwrap();
        vec![s, Shape::ALL.len() + d, Shape::ALL.len() + Direction::ALL.len() + self.speed as usize]
    }

    pub fn from_caption(caption: &[usize]) -> Result<Self> {
        let [s, d, v] = caption else {
            return Err(Error::Parameter(format!("caption of length {}", caption.len())));
        };
        let ns = Shape::ALL.len();
        let nd = Direction::ALL.len();
        let bad = || Error::Parameter(format!("caption {caption:?} outside the motion vocabulary"));
        let shape = *Shape::ALL.get(*s).ok_or_else(bad)?;
        let direction = *Direction::ALL.get(d.checked_sub(ns).ok_or_else(bad)?).ok_or_else(bad)?;
        let speed = v.checked_sub(ns + nd).ok_or_else(bad)?;
        if speed > MAX_SPEED as usize {
            return Err(bad());
        }
        Ok(Self { shape, direction, speed: speed as u32 })
    }
}

impl fmt::Display for MotionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.shape, self.direction, self.speed)
    }
}

/// Parses `shape,direction,speed`, e.g. `square,right,2`.
impl std::str::FromStr for MotionSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [shape, direction, speed] = parts[..] else {
            return Err(Error::Parse(format!("motion {s:?}: expected shape,direction,speed")));
        };
        let speed = speed.parse().map_err(|_| Error::Parse(format!("speed {speed:?}")))?;
        MotionSpec::new(shape.parse()?, direction.parse()?, speed)
    }
}

/// A grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub frames: Vec<Image>,
    pub native_fps: f64,
    pub caption_tokens: Vec<usize>,
    pub motion: MotionSpec,
}

impl SyntheticClip {
    /// Time of the last frame; frames sit at instants `k / native_fps`.
    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.native_fps
    }
}

/// Renders a clip spanning `[0, duration_s]` at `native_fps`.
///
/// The seed picks the start position (within two pixels of the centre) and
/// the shape brightness in `[0.75, 1]`.
pub fn make_clip(
    motion: MotionSpec,
    native_fps: f64,
    duration_s: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SyntheticClip> {
    if height == 0 || width == 0 || !(native_fps > 0.0) || !(duration_s > 0.0) {
        return Err(Error::Parameter(format!(
            "clip {height}x{width} at {native_fps} fps for {duration_s} s"
        )));
    }
    if duration_s * native_fps < 1.0 {
        return Err(Error::Parameter(format!(
            "{duration_s} s at {native_fps} fps spans less than one frame interval"
        )));
    }
    let n_frames = (duration_s * native_fps + 1e-9).floor() as usize + 1;
    let mut rng = Rng::new(seed);
    let jitter_r = rng.below(5) as i64 - 2;
    let jitter_c = rng.below(5) as i64 - 2;
    let brightness = rng.uniform_range(0.75, 1.0);
    let (sh, sw) = motion.shape.extent();
    let (sh, sw) = (sh.min(height), sw.min(width));
    let r0 = (height as i64 - sh as i64) / 2 + jitter_r;
    let c0 = (width as i64 - sw as i64) / 2 + jitter_c;
    let (dr, dc) = motion.direction.delta();
    let frames = (0..n_frames)
        .map(|t| {
            let shift = motion.speed as i64 * t as i64;
            let top = r0 + dr * shift;
            let left = c0 + dc * shift;
            let mut img = Image::new(height, width, 0.0);
            for i in 0..sh as i64 {
                for j in 0..sw as i64 {
                    let r = (top + i).rem_euclid(height as i64) as usize;
                    let c = (left + j).rem_euclid(width as i64) as usize;
                    img.set(r, c, brightness);
                }
            }
            img
        })
        .collect();
    Ok(SyntheticClip { frames, native_fps, caption_tokens: motion.caption(), motion })
}

/// An `F×F` grid of image token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub side: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.len() != side * side {
            return Err(Error::Parameter(format!(
                "grid of side {side} needs {} tokens, got {}",
                side * side,
                tokens.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocab { id, vocab });
        }
        Ok(Self { side, tokens })
    }

    pub fn at(&self, x: usize, y: usize) -> usize {
        self.tokens[x * self.side + y]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.tokens.chunks(self.side) {
            let line: Vec<String> = row.iter().map(ToString::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, vocab: usize) -> Result<Self> {
        let rows: Vec<Vec<usize>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|e| Error::Parse(format!("{v:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(Error::Parse("token grid CSV is not square".into()));
        }
        Self::new(side, rows.concat(), vocab)
    }
}

/// Image-token vocabulary size for a palette.
pub fn palette_size(palette_bits: u32) -> usize {
    1usize << palette_bits
}

/// Uniform quantization of each patch mean to `2^palette_bits` levels at `k / (levels - 1)`.
pub fn quantize_frame(image: &Image, grid_side: usize, palette_bits: u32) -> Result<TokenGrid> {
    if grid_side == 0 || image.height % grid_side != 0 || image.width % grid_side != 0 {
        return Err(Error::Parameter(format!(
            "{}x{} frame is not divisible into a {grid_side}x{grid_side} grid",
            image.height, image.width
        )));
    }
    if palette_bits == 0 || palette_bits > 16 {
        return Err(Error::Parameter(format!("palette of {palette_bits} bits")));
    }
    let levels = palette_size(palette_bits);
    let (ph, pw) = (image.height / grid_side, image.width / grid_side);
    let mut tokens = Vec::with_capacity(grid_side * grid_side);
    for gx in 0..grid_side {
        for gy in 0..grid_side {
            let mut sum = 0.0;
            for r in gx * ph..(gx + 1) * ph {
                for c in gy * pw..(gy + 1) * pw {
                    sum += image.at(r, c);
                }
            }
            let mean = (sum / (ph * pw) as f64).clamp(0.0, 1.0);
            tokens.push((mean * (levels - 1) as f64).round() as usize);
        }
    }
    Ok(TokenGrid { side: grid_side, tokens })
}

/// Fills each patch with its token's palette level.
pub fn reconstruct_frame(grid: &TokenGrid, height: usize, width: usize, palette_bits: u32) -> Result<Image> {
    if grid.side == 0 || height % grid.side != 0 || width % grid.side != 0 {
        return Err(Error::Parameter(format!(
            "{height}x{width} frame is not divisible into a {0}x{0} grid",
            grid.side
        )));
    }
    let levels = palette_size(palette_bits);
    let (ph, pw) = (height / grid.side, width / grid.side);
    let mut img = Image::new(height, width, 0.0);
    for r in 0..height {
        for c in 0..width {
            let t = grid.at(r / ph, c / pw);
            img.set(r, c, t as f64 / (levels - 1) as f64);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use proptest::prelude::*;

    fn spec(direction: Direction, speed: u32) -> MotionSpec {
        MotionSpec::new(Shape::Square, direction, speed).unwrap()
    }

    #[test]
    fn static_clip_frames_identical() {
        let clip = make_clip(spec(Direction::Left, 0), 8.0, 1.0, 32, 32, 3).unwrap();
        assert_eq!(clip.frames.len(), 9);
        assert!(clip.frames.iter().all(|f| f == &clip.frames[0]));
    }

    #[test]
    fn rightward_motion_is_toroidal_shift() {
        let clip = make_clip(spec(Direction::Right, 1), 16.0, 2.0, 32, 32, 9).unwrap();
        let f0 = &clip.frames[0];
        for (t, f) in clip.frames.iter().enumerate() {
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(f.at(r, c), f0.at(r, (c + 32 - t % 32) % 32), "t={t} r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn clips_are_deterministic() {
        let a = make_clip(spec(Direction::Up, 2), 16.0, 1.5, 32, 32, 77).unwrap();
        let b = make_clip(spec(Direction::Up, 2), 16.0, 1.5, 32, 32, 77).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.caption_tokens, b.caption_tokens);
    }

    #[test]
    fn bad_dimensions_rejected() {
        assert!(make_clip(spec(Direction::Up, 1), 16.0, 1.0, 0, 32, 1).is_err());
        assert!(make_clip(spec(Direction::Up, 1), 16.0, 0.01, 32, 32, 1).is_err());
    }

    #[test]
    fn caption_is_a_bijection() {
        let all = MotionSpec::all();
        let captions: std::collections::HashSet<Vec<usize>> = all.iter().map(|s| s.caption()).collect();
        assert_eq!(captions.len(), all.len());
        for s in all {
            assert!(s.caption().iter().all(|&t| t < CAPTION_VOCAB));
            assert_eq!(MotionSpec::from_caption(&s.caption()).unwrap(), s);
        }
        assert!(MotionSpec::from_caption(&[0, 0, 0]).is_err());
    }

    #[test]
    fn black_and_white_frames() {
        let black = Image::new(32, 32, 0.0);
        let white = Image::new(32, 32, 1.0);
        assert!(quantize_frame(&black, 4, 4).unwrap().tokens.iter().all(|&t| t == 0));
        assert!(quantize_frame(&white, 4, 4).unwrap().tokens.iter().all(|&t| t == 15));
    }

    #[test]
    fn half_split_frame() {
        let mut img = Image::new(32, 32, 0.0);
        for r in 0..32 {
            for c in 16..32 {
                img.set(r, c, 1.0);
            }
        }
        let g = quantize_frame(&img, 4, 4).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(g.at(x, y), if y < 2 { 0 } else { 15 });
            }
        }
    }

    #[test]
    fn indivisible_grid_rejected() {
        assert!(quantize_frame(&Image::new(30, 32, 0.0), 4, 4).is_err());
    }

    #[test]
    fn reconstruct_zero_grid_is_black() {
        let g = TokenGrid::new(4, vec![0; 16], 16).unwrap();
        let img = reconstruct_frame(&g, 32, 32, 4).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn single_token_lights_one_patch() {
        let mut tokens = vec![0; 16];
        tokens[6] = 9;
        let g = TokenGrid::new(4, tokens, 16).unwrap();
        let img = reconstruct_frame(&g, 32, 32, 4).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let inside = r / 8 == 1 && c / 8 == 2;
                assert_eq!(img.at(r, c) > 0.0, inside);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = TokenGrid::new(2, vec![1, 15, 0, 7], 16).unwrap();
        assert_eq!(TokenGrid::from_csv(&g.to_csv(), 16).unwrap(), g);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        Image::new(2, 3, 1.0).write_pgm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255; 6]);
    }

    #[test]
    fn round_trip_on_random_grids() {
        let mut rng = Rng::new(123);
        for _ in 0..100 {
            let tokens = (0..64).map(|_| rng.below(16)).collect();
            let g = TokenGrid::new(8, tokens, 16).unwrap();
            let img = reconstruct_frame(&g, 32, 32, 4).unwrap();
            assert_eq!(quantize_frame(&img, 8, 4).unwrap(), g);
        }
    }

    proptest! {
        #[test]
        fn quantize_reconstruct_identity(bits in 1u32..6, side in prop::sample::select(vec![1usize, 2, 4, 8]), seed: u64) {
            let levels = palette_size(bits);
            let mut rng = Rng::new(seed);
            let g = TokenGrid::new(side, (0..side * side).map(|_| rng.below(levels)).collect(), levels).unwrap();
            let img = reconstruct_frame(&g, 32, 32, bits).unwrap();
            prop_assert_eq!(quantize_frame(&img, side, bits).unwrap(), g);
        }
    }

    #[test]
    fn motion_text_round_trip() {
        for m in MotionSpec::all() {
            assert_eq!(m.to_string().parse::<MotionSpec>().unwrap(), m);
        }
        assert!("square,right".parse::<MotionSpec>().is_err());
        assert!("blob,right,1".parse::<MotionSpec>().is_err());
        assert!("dot,left,9".parse::<MotionSpec>().is_err());
    }
}
