//! Multi-frame-rate training: synthetic clip sets, batch construction for both
//! stages, data-parallel gradients with an ordered reduction, and Adam with
//! linear warmup.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::attention::ChannelMode;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::Model;
use crate::numkernel::{adam_step, mix64, AdamConfig, AdamState, Rng};
use crate::sequence::{build_stage1_sequence, build_stage2_sequence, sample_frames_at_rate, select_frame_rate, Layout, TokenSequence, Vocab};
use crate::synthvid::{make_clip, MotionSpec, SyntheticClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Sequential key frames.
    KeyFrames,
    /// Interpolation of even slots between known odd slots.
    Interpolation,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::KeyFrames => 1,
            Stage::Interpolation => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::KeyFrames),
            2 => Ok(Stage::Interpolation),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub steps: usize,
    pub stage: Stage,
    /// Rates the interpolation stage samples from.
    pub interp_rates: Vec<f64>,
    pub seed: u64,
    /// Number of synthetic clips in the training set.
    pub clips: usize,
    pub native_fps: f64,
    pub frame_px: usize,
    pub palette_bits: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup: 100,
            steps: 500,
            stage: Stage::KeyFrames,
            interp_rates: vec![2.0, 4.0, 8.0],
            seed: 0,
            clips: 2000,
            native_fps: 16.0,
            frame_px: 32,
            palette_bits: 4,
        }
    }
}

const TRAIN_KEYS: [&str; 15] = [
    "batch_size",
    "max_lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup",
    "steps",
    "stage",
    "interp_rates",
    "seed",
    "clips",
    "native_fps",
    "frame_px",
    "palette_bits",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open01 = |b: f64| b > 0.0 && b < 1.0;
        if !open01(self.beta1) || !open01(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.max_lr > 0.0) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("max_lr and eps must be positive, weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.clips == 0 || self.interp_rates.is_empty() {
            return Err(Error::Config("batch_size, clips and interp_rates must be non-empty".into()));
        }
        if !(self.native_fps > 0.0) || self.frame_px == 0 {
            return Err(Error::Config("native_fps and frame_px must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Linear warmup to `max_lr` over `warmup` steps, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            return self.max_lr;
        }
        self.max_lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
    }

    pub fn to_kv(&self) -> String {
        let rates: Vec<String> = self.interp_rates.iter().map(|r| format!("{r:?}")).collect();
        format!(
            "batch_size = {}\nmax_lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}\nwarmup = {}\nsteps = {}\nstage = {}\ninterp_rates = {}\nseed = {}\nclips = {}\nnative_fps = {:?}\nframe_px = {}\npalette_bits = {}\n",
            self.batch_size,
            self.max_lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.warmup,
            self.steps,
            self.stage.number(),
            rates.join(","),
            self.seed,
            self.clips,
            self.native_fps,
            self.frame_px,
            self.palette_bits
        )
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = map.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!("batch_size", c.batch_size);
        take!("max_lr", c.max_lr);
        take!("beta1", c.beta1);
        take!("beta2", c.beta2);
        take!("eps", c.eps);
        take!("weight_decay", c.weight_decay);
        take!("warmup", c.warmup);
        take!("steps", c.steps);
        take!("seed", c.seed);
        take!("clips", c.clips);
        take!("native_fps", c.native_fps);
        take!("frame_px", c.frame_px);
        take!("palette_bits", c.palette_bits);
        if let Some(s) = map.get_parsed::<u8>("stage")? {
            c.stage = Stage::from_number(s)?;
        }
        if let Some(r) = map.get_list("interp_rates")? {
            c.interp_rates = r;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn keys() -> &'static [&'static str] {
        &TRAIN_KEYS
    }
}

/// Recipe for one synthetic clip; rendered on demand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub motion: MotionSpec,
    pub duration_s: f64,
    pub seed: u64,
}

impl ClipSpec {
    pub fn render(&self, cfg: &TrainConfig) -> Result<SyntheticClip> {
        make_clip(self.motion, cfg.native_fps, self.duration_s, cfg.frame_px, cfg.frame_px, self.seed)
    }
}

/// Random clip recipes. Key-frame clips last between `(ts-1)/r` and
/// `1.5·(ts-1)/r` for a random listed rate `r`, so the selected rate varies;
/// interpolation clips last `(ts-1)/r_min` of the interpolation rates.
pub fn make_dataset(n: usize, stage: Stage, ts: usize, rates: &[f64], cfg: &TrainConfig, seed: u64) -> Vec<ClipSpec> {
    let motions = MotionSpec::all();
    let mut rng = Rng::new(seed);
    let span = ts.saturating_sub(1).max(1) as f64;
    (0..n)
        .map(|i| {
            let motion = motions[rng.below(motions.len())];
            let duration_s = match stage {
                Stage::KeyFrames => {
                    let r = rates[rng.below(rates.len())];
                    span / r * rng.uniform_range(1.0, 1.5)
                }
                Stage::Interpolation => {
                    let slowest = cfg.interp_rates.iter().copied().fold(f64::INFINITY, f64::min);
                    span / slowest * rng.uniform_range(1.0, 1.25)
                }
            };
            let duration_s = duration_s.max(1.0 / cfg.native_fps);
            ClipSpec { motion, duration_s, seed: mix64(seed ^ mix64(i as u64)) }
        })
        .collect()
}

/// Builds one training sequence per usable clip.
///
/// Key frames use the lowest valid rate and the first `ts` samples.
/// Interpolation draws a rate uniformly from the rates the clip can support
/// and keeps the true tokens in the target slots for the loss.
pub fn make_batch(
    clips: &[SyntheticClip],
    stage: Stage,
    cfg: &TrainConfig,
    vocab: &Vocab,
    layout: Layout,
    rng: &mut Rng,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let built = match stage {
            Stage::KeyFrames => stage1_example(clip, cfg, vocab, layout),
            Stage::Interpolation => {
                let usable: Vec<f64> = cfg
                    .interp_rates
                    .iter()
                    .copied()
                    .filter(|&r| (layout.ts - 1) as f64 / r <= clip.duration() + 1e-9)
                    .collect();
                if usable.is_empty() {
                    Err(Error::NoValidRate { duration_s: clip.duration(), min_frames: layout.ts })
                } else {
                    let r = usable[rng.below(usable.len())];
                    stage2_example(clip, r, cfg, vocab, layout)
                }
            }
        };
        match built {
            Ok(seq) => out.push(seq),
            Err(e) => warn!("skipping clip {i}: {e}"),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(out)
}

fn stage1_example(clip: &SyntheticClip, cfg: &TrainConfig, vocab: &Vocab, layout: Layout) -> Result<TokenSequence> {
    let rate = select_frame_rate(clip.duration(), &vocab.rates, layout.ts)?;
    let frames = sample_frames_at_rate(clip, rate, layout.ts, 0.0, layout.side, cfg.palette_bits)?;
    build_stage1_sequence(vocab, rate, &clip.caption_tokens, &frames, layout)
}

fn stage2_example(clip: &SyntheticClip, rate: f64, cfg: &TrainConfig, vocab: &Vocab, layout: Layout) -> Result<TokenSequence> {
    let frames = sample_frames_at_rate(clip, rate, layout.ts, 0.0, layout.side, cfg.palette_bits)?;
    let known: Vec<_> = frames.iter().enumerate().filter(|(t, _)| t % 2 == 0).map(|(t, g)| (t + 1, g.clone())).collect();
    let mut seq = build_stage2_sequence(vocab, rate, &clip.caption_tokens, &known, layout)?;
    for t in (1..layout.ts).step_by(2) {
        seq.set_frame(t, &frames[t])?;
    }
    Ok(seq)
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean loss over `batch`, gradients reduced in batch order, one Adam step at `lr`.
pub fn train_step(
    model: &mut Model,
    batch: &[TokenSequence],
    opt: &mut AdamState,
    adam: &AdamConfig,
    lr: f64,
    mode: ChannelMode,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shared = &*model;
    let results: Vec<_> = batch.par_iter().map(|s| shared.loss_and_grads(s, mode)).collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss {loss} at optimizer step {}", opt.step + 1)));
    }
    model.store.zero_grads();
    for (_, g) in &results {
        model.store.accumulate(g);
    }
    let mut sq = 0.0;
    for id in model.store.ids().collect::<Vec<_>>() {
        let p = model.store.get_mut(id);
        for v in p.grad.data_mut() {
            *v /= n;
        }
        if !p.frozen {
            sq += p.grad.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    adam_step(&mut model.store, opt, adam, lr)?;
    Ok(StepStats { loss, grad_norm: sq.sqrt() })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,loss,lr,grad_norm,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:?},{:?},{:?},{:.3}", self.step, self.loss, self.lr, self.grad_norm, self.wall_ms)
    }
}

/// Training loop state.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub mode: ChannelMode,
    pub dataset: Vec<ClipSpec>,
    /// Frames per training sequence; the model's own `ts` unless overridden.
    pub ts: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ts = model.config.ts;
        let dataset = make_dataset(cfg.clips, cfg.stage, ts, &model.config.vocab.rates, &cfg, cfg.seed);
        let opt = AdamState::new(&model.store);
        Ok(Self { model, opt, cfg, mode: ChannelMode::Dual, dataset, ts })
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.ts, self.model.config.side, self.model.config.n_text)
    }

    /// Batch for optimizer step `step`; depends only on the seed and the step.
    pub fn batch(&self, step: usize) -> Result<Vec<TokenSequence>> {
        let mut rng = Rng::derived(self.cfg.seed, step as u64);
        let picks: Vec<ClipSpec> = (0..self.cfg.batch_size).map(|_| self.dataset[rng.below(self.dataset.len())]).collect();
        let clips: Vec<SyntheticClip> = picks.par_iter().map(|c| c.render(&self.cfg)).collect::<Result<_>>()?;
        make_batch(&clips, self.cfg.stage, &self.cfg, &self.model.config.vocab, self.layout()?, &mut rng)
    }

    /// Runs `steps` optimizer steps, writing CSV rows to `log` when given.
    /// Fails if any frozen tensor changed.
    pub fn run(&mut self, steps: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<LogRow>> {
        let frozen_before = self.model.store.frozen_hash();
        let adam = self.cfg.adam();
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.opt.step as usize;
            let t0 = Instant::now();
            let batch = self.batch(step)?;
            let lr = self.cfg.lr_at(step);
            let stats = train_step(&mut self.model, &batch, &mut self.opt, &adam, lr, self.mode)?;
            let row = LogRow { step, loss: stats.loss, lr, grad_norm: stats.grad_norm, wall_ms: t0.elapsed().as_secs_f64() * 1e3 };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            if step % 50 == 0 {
                info!("step {step} loss {:.4} lr {:.2e}", stats.loss, lr);
            }
            rows.push(row);
        }
        if self.model.store.frozen_hash() != frozen_before {
            return Err(Error::Numeric("a frozen parameter changed during training".into()));
        }
        Ok(rows)
    }
}

/// Trains the backbone alone on single-frame sequences, then freezes it again
/// and copies the spatial channel into the trainable channel of every layer.
pub fn pretrain_spatial(model: Model, cfg: TrainConfig, steps: usize, log: Option<&mut dyn Write>) -> Result<(Model, Vec<LogRow>)> {
    let cfg = TrainConfig { stage: Stage::KeyFrames, ..cfg };
    let backbone = model.params.backbone();
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.ts = 1;
    trainer.mode = ChannelMode::BaseOnly;
    for &id in &backbone {
        trainer.model.store.set_frozen(id, false);
    }
    trainer.opt = AdamState::new(&trainer.model.store);
    let rows = trainer.run(steps, log)?;
    let mut model = trainer.model;
    for &id in &backbone {
        model.store.set_frozen(id, true);
    }
    model.copy_base_to_plus()?;
    Ok((model, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ChannelKind;
    use crate::masks::WindowConfig;
    use crate::model::ModelConfig;
    use crate::numkernel::{ParamStore, Tensor};
    use crate::synthvid::{Direction, Shape};

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            side: 4,
            ts: 5,
            channel: ChannelKind::Swin3d(WindowConfig::new(2, 2, 4, 4).unwrap()),
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, clips: 32, steps: 3, max_lr: 1e-2, warmup: 2, ..TrainConfig::default() }
    }

    fn clip(duration: f64) -> SyntheticClip {
        let m = MotionSpec::new(Shape::Square, Direction::Right, 1).unwrap();
        make_clip(m, 16.0, duration, 32, 32, 1).unwrap()
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let c = TrainConfig { stage: Stage::Interpolation, max_lr: 3e-3, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_kv(&KvMap::parse(&c.to_kv()).unwrap()).unwrap(), c);
        assert!(TrainConfig::from_kv(&KvMap::parse("beta1 = 1.0").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvMap::parse("max_lr = 0").unwrap()).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig { max_lr: 1.0, warmup: 4, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn boundary_duration_selects_that_rate() {
        let m = tiny_model();
        let layout = Layout::new(5, 4, 8).unwrap();
        let batch = make_batch(&[clip(4.0 / 2.0)], Stage::KeyFrames, &tiny_cfg(), &m.config.vocab, layout, &mut Rng::new(0)).unwrap();
        assert_eq!(batch[0].rate, 2.0);
        assert_eq!(batch[0].frame_rate_token(), m.config.vocab.rate_id(2.0).unwrap());
    }

    #[test]
    fn interpolation_batches_have_even_slot_targets() {
        let m = tiny_model();
        let layout = Layout::new(5, 4, 8).unwrap();
        let clips: Vec<_> = (0..6).map(|i| clip(2.0 + 0.1 * i as f64)).collect();
        let batch = make_batch(&clips, Stage::Interpolation, &tiny_cfg(), &m.config.vocab, layout, &mut Rng::new(1)).unwrap();
        for s in &batch {
            assert_eq!(s.unidirectional_positions().len(), 2 * 16);
            assert!([2.0, 4.0, 8.0].contains(&s.rate));
        }
    }

    #[test]
    fn unusable_clips_are_skipped() {
        let m = tiny_model();
        let layout = Layout::new(5, 4, 8).unwrap();
        let short = clip(0.25);
        let mixed = make_batch(&[short.clone(), clip(1.0)], Stage::KeyFrames, &tiny_cfg(), &m.config.vocab, layout, &mut Rng::new(2)).unwrap();
        assert_eq!(mixed.len(), 1);
        assert!(matches!(
            make_batch(&[short], Stage::KeyFrames, &tiny_cfg(), &m.config.vocab, layout, &mut Rng::new(2)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batches_are_deterministic() {
        let a = Trainer::new(tiny_model(), tiny_cfg()).unwrap();
        let b = Trainer::new(tiny_model(), tiny_cfg()).unwrap();
        assert_eq!(a.batch(3).unwrap(), b.batch(3).unwrap());
        assert_ne!(a.batch(3).unwrap(), a.batch(4).unwrap());
    }

    #[test]
    fn dataset_varies_selected_rate() {
        let cfg = tiny_cfg();
        let specs = make_dataset(200, Stage::KeyFrames, 5, &[1.0, 2.0, 4.0, 8.0], &cfg, 3);
        let mut seen = std::collections::BTreeSet::new();
        for s in specs {
            let r = select_frame_rate(s.duration_s, &[1.0, 2.0, 4.0, 8.0], 5).unwrap();
            seen.insert(r as u32);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn all_frozen_model_is_unchanged() {
        let mut m = tiny_model();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.set_frozen(id, true);
        }
        let before = m.store.clone();
        let t = Trainer::new(m.clone(), tiny_cfg()).unwrap();
        let batch = t.batch(0).unwrap();
        let mut opt = AdamState::new(&m.store);
        let stats = train_step(&mut m, &batch, &mut opt, &AdamConfig::default(), 1e-2, ChannelMode::Dual).unwrap();
        assert!(stats.loss > 0.0 && stats.grad_norm == 0.0);
        for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn quadratic_adam_step_matches_hand_computation() {
        // Single step on sum(w^2): m̂ = g, v̂ = g², update = lr·(sign(g)·|g|/(|g|+eps) + wd·w).
        let mut store = ParamStore::new();
        let w0 = [0.3, -0.7];
        let id = store.add("w", Tensor::vector(w0.to_vec()), false);
        let g: Vec<f64> = w0.iter().map(|w| 2.0 * w).collect();
        store.get_mut(id).grad = Tensor::vector(g.clone());
        let mut opt = AdamState::new(&store);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &mut opt, &cfg, 0.1).unwrap();
        for j in 0..2 {
            let expected = w0[j] - 0.1 * (g[j] / (g[j].abs() + cfg.eps));
            assert!((store.value(id).data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_runs_identical_traces() {
        let run = || {
            let mut t = Trainer::new(tiny_model(), tiny_cfg()).unwrap();
            t.run(3, None).unwrap().into_iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_keeps_frozen_and_moves_trainable() {
        let mut t = Trainer::new(tiny_model(), tiny_cfg()).unwrap();
        let (frozen, trainable) = (t.model.store.frozen_hash(), t.model.store.trainable_hash());
        let mut log = Vec::new();
        let rows = t.run(3, Some(&mut log)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(t.model.store.frozen_hash(), frozen);
        assert_ne!(t.model.store.trainable_hash(), trainable);
        let text = String::from_utf8(log).unwrap();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn pretraining_moves_backbone_then_refreezes() {
        let m = tiny_model();
        let frozen = m.store.frozen_hash();
        let (m2, rows) = pretrain_spatial(m, tiny_cfg(), 2, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_ne!(m2.store.frozen_hash(), frozen);
        for l in &m2.params.layers {
            for (b, p) in l.base.ids().into_iter().zip(l.plus.ids()) {
                assert_eq!(m2.store.value(b), m2.store.value(p));
            }
        }
        let backbone = m2.params.backbone();
        assert!(m2.store.iter().all(|(id, p)| p.frozen == backbone.contains(&id)));
    }
}
