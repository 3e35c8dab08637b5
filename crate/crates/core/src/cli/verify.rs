//! Invariant suite behind the `verify` subcommand.

use serde_json::json;

use hiervid::attention::{ChannelKind, ChannelMode};
use hiervid::generate::{stage1_generate, Decoding, Sampler};
use hiervid::masks::{region_mask, spatial_mask, transitive_closure, LocalExtent, WindowConfig};
use hiervid::model::{Model, ModelConfig};
use hiervid::numkernel::{grad_check, Rng};
use hiervid::scheduler::{build_schedule, frame_swin_mask, may_depend, verify_schedule};
use hiervid::sequence::{build_stage1_sequence, build_stage2_sequence, select_frame_rate, Layout, Region, TokenSequence, Vocab};
use hiervid::synthvid::TokenGrid;
use hiervid::trainer::{TrainConfig, Trainer};
use hiervid::Result;

use super::{CliResult, Run, Settings};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    /// Failing property that is documented as a limitation and does not
    /// affect the exit code.
    Limitation,
}

struct Row {
    name: &'static str,
    status: Status,
    detail: String,
}

fn row(name: &'static str, outcome: Result<(bool, String)>) -> Row {
    match outcome {
        Ok((ok, detail)) => Row { name, status: if ok { Status::Pass } else { Status::Fail }, detail },
        Err(e) => Row { name, status: Status::Fail, detail: format!("error: {e}") },
    }
}

pub(super) fn run(mut run: Run, settings: &Settings) -> CliResult<()> {
    let (sound, converse) = window_dependency();
    let mut rows = vec![
        row("mask semantics (stage 1 and 2)", mask_semantics()),
        row("spatial channel stays in frame", spatial_confinement()),
        sound,
        converse,
        row("wavefront schedule validity", schedule_validity()),
        row("gradient check (2-layer model)", gradients()),
        row("frozen tensors unchanged by training", frozen_contract()),
        row("init equivalence of channels", init_equivalence()),
        row("wavefront decode equals sequential", decode_equivalence()),
        row("frame-rate selection oracle", rate_oracle()),
    ];
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut table = format!("{:width$}  status  detail\n", "check");
    for r in &rows {
        let status = match r.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Limitation => "FAIL*",
        };
        table.push_str(&format!("{:width$}  {status:6}  {}\n", r.name, r.detail));
    }
    if rows.iter().any(|r| r.status == Status::Limitation) {
        table.push_str("* known limitation, reported but not counted\n");
    }
    print!("{table}");
    run.write("verify.txt", &table)?;
    let failed: Vec<&str> = rows.iter().filter(|r| r.status == Status::Fail).map(|r| r.name).collect();
    let checks: Vec<_> = rows
        .drain(..)
        .map(|r| json!({ "check": r.name, "pass": r.status == Status::Pass, "counted": r.status != Status::Limitation, "detail": r.detail }))
        .collect();
    run.finish(None, &settings.model, &settings.train, json!({ "checks": checks }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(hiervid::Error::Numeric(format!("failed checks: {}", failed.join(", "))).into())
    }
}

fn vocab() -> Vocab {
    ModelConfig::default().vocab
}

fn random_frames(n: usize, side: usize, rng: &mut Rng) -> Vec<TokenGrid> {
    (0..n).map(|_| TokenGrid { side, tokens: (0..side * side).map(|_| rng.below(16)).collect() }).collect()
}

fn example_sequences() -> Result<Vec<TokenSequence>> {
    let v = vocab();
    let layout = Layout::new(5, 4, 8)?;
    let mut rng = Rng::new(11);
    let frames = random_frames(5, 4, &mut rng);
    let s1 = build_stage1_sequence(&v, 1.0, &[0, 5, 9], &frames, layout)?;
    let known: Vec<_> = [1, 3, 5].into_iter().zip(frames).map(|(s, g)| (s, g)).collect();
    let s2 = build_stage2_sequence(&v, 4.0, &[0, 5, 9], &known, layout)?;
    Ok(vec![s1, s2])
}

fn mask_semantics() -> Result<(bool, String)> {
    let mut bad = 0;
    let mut pairs = 0;
    for s in example_sequences()? {
        let m = region_mask(&s);
        for q in 0..s.len() {
            for k in 0..s.len() {
                let expect = match (s.region(q), s.region(k)) {
                    (_, Region::Bidirectional) => true,
                    (Region::Unidirectional, Region::Unidirectional) => k <= q,
                    (Region::Bidirectional, Region::Unidirectional) => false,
                };
                pairs += 1;
                bad += usize::from(m.allowed(q, k) != expect);
            }
        }
    }
    Ok((bad == 0, format!("{bad} violations over {pairs} pairs")))
}

fn spatial_confinement() -> Result<(bool, String)> {
    let mut bad = 0;
    for s in example_sequences()? {
        let m = spatial_mask(&s);
        for q in 0..s.len() {
            for k in 0..s.len() {
                if let (Some((tq, ..)), Some((tk, ..))) = (s.coords(q), s.coords(k)) {
                    bad += usize::from(tq != tk && m.allowed(q, k));
                }
            }
        }
    }
    Ok((bad == 0, format!("{bad} cross-frame pairs")))
}

/// Compares the closed-form dependency bound with reachability in the
/// window mask: soundness (bound says independent, so unreachable) and the
/// converse (bound says dependent, so reachable).
fn window_dependency() -> (Row, Row) {
    let mut sound_bad = 0usize;
    let mut converse_bad = 0usize;
    let mut pairs = 0usize;
    for x in [2, 4] {
        for y in [2, 4] {
            for ax in 1..=2 {
                for ay in 1..=2 {
                    let Ok(w) = WindowConfig::new(ax, ay, x, y) else { continue };
                    for ts in 2..=3 {
                        let reach = transitive_closure(&frame_swin_mask(w, ts), |_| true);
                        let flat = |t: usize, i: usize| t * x * y + i;
                        for t1 in 0..ts {
                            for t2 in t1 + 1..ts {
                                for i1 in 0..x * y {
                                    for i2 in 0..x * y {
                                        let dep = may_depend((t1, i1 / y, i1 % y), (t2, i2 / y, i2 % y), w);
                                        let r = reach.allowed(flat(t2, i2), flat(t1, i1));
                                        pairs += 1;
                                        sound_bad += usize::from(!dep && r);
                                        converse_bad += usize::from(dep && !r);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let sound = Row {
        name: "dependency bound soundness",
        status: if sound_bad == 0 { Status::Pass } else { Status::Fail },
        detail: format!("{sound_bad} reachable pairs declared independent over {pairs}"),
    };
    let converse = Row {
        name: "dependency bound tightness",
        status: if converse_bad == 0 { Status::Pass } else { Status::Limitation },
        detail: format!("{converse_bad} unreachable pairs declared dependent over {pairs}"),
    };
    (sound, converse)
}

fn schedule_validity() -> Result<(bool, String)> {
    let mut bad = 0;
    let mut configs = 0;
    for (ax, ay, x, y, ts) in [(2, 2, 8, 8, 5), (1, 1, 4, 4, 3), (2, 1, 4, 6, 3), (3, 2, 6, 4, 2), (2, 2, 4, 4, 5)] {
        let w = WindowConfig::new(ax, ay, x, y)?;
        bad += verify_schedule(&build_schedule(w, ts), &frame_swin_mask(w, ts)).len();
        configs += 1;
    }
    Ok((bad == 0, format!("{bad} violations over {configs} configurations")))
}

fn small_config(channel: ChannelKind) -> ModelConfig {
    ModelConfig { d: 8, layers: 2, heads: 2, side: 4, ts: 3, n_text: 4, channel, seed: 7, ..ModelConfig::default() }
}

fn swin(a: usize) -> ChannelKind {
    ChannelKind::Swin3d(WindowConfig::new(a, a, 4, 4).expect("window fits a 4x4 frame"))
}

/// Every parameter randomized so that no gradient vanishes by construction.
fn randomized(c: ModelConfig, seed: u64) -> Result<Model> {
    let mut m = Model::new(c)?;
    let mut rng = Rng::new(seed);
    for id in m.store.ids().collect::<Vec<_>>() {
        let shape = m.store.value(id).shape().to_vec();
        let scale = if shape.len() == 2 { 0.4 } else { 0.3 };
        let mut t = rng.normal_tensor(&shape, scale);
        if m.store.get(id).name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        m.store.set_value(id, t)?;
    }
    Ok(m)
}

fn stage1_sequence(c: &ModelConfig, seed: u64) -> Result<TokenSequence> {
    let mut rng = Rng::new(seed);
    let frames = random_frames(c.ts, c.side, &mut rng);
    build_stage1_sequence(&c.vocab, 2.0, &[1, 5, 9], &frames, Layout::new(c.ts, c.side, c.n_text)?)
}

fn gradients() -> Result<(bool, String)> {
    let c = small_config(swin(2));
    let mut m = randomized(c.clone(), 3)?;
    let seq = stage1_sequence(&c, 4)?;
    let model = m.clone();
    let report = grad_check(
        &mut m.store,
        &[],
        |g, st| {
            let view = Model { store: st.clone(), ..model.clone() };
            view.loss_var(g, &seq, ChannelMode::Dual)
        },
        1e-5,
        64,
        5,
    )?;
    Ok((report.max_rel_error <= 1e-4, format!("max relative error {:.2e} over {} coordinates", report.max_rel_error, report.checked)))
}

fn frozen_contract() -> Result<(bool, String)> {
    let model = Model::new(small_config(swin(2)))?;
    let cfg = TrainConfig { batch_size: 2, clips: 8, warmup: 1, max_lr: 1e-2, seed: 9, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg)?;
    let (frozen, trainable) = (trainer.model.store.frozen_hash(), trainer.model.store.trainable_hash());
    trainer.run(3, None)?;
    let same = trainer.model.store.frozen_hash() == frozen;
    let moved = trainer.model.store.trainable_hash() != trainable;
    Ok((same && moved, format!("frozen unchanged: {same}, trainable changed: {moved}, after 3 steps")))
}

fn init_equivalence() -> Result<(bool, String)> {
    let c = small_config(ChannelKind::Local3d(LocalExtent::new(3, 4, 4)?));
    let m = Model::new(c.clone())?;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let frames = random_frames(1, c.side, &mut rng);
        let seq = build_stage1_sequence(&c.vocab, 1.0, &[2, 6, 10], &frames, Layout::new(1, c.side, c.n_text)?)?;
        let masks = m.layer_masks(&seq)?;
        let dual = m.forward_logits_with(&seq, &masks, ChannelMode::Dual)?;
        let base = m.forward_logits_with(&seq, &masks, ChannelMode::BaseOnly)?;
        for (a, b) in dual.data().iter().zip(base.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max |dual - base| = {worst:.2e} over 5 single-frame inputs")))
}

fn decode_equivalence() -> Result<(bool, String)> {
    let mut mismatches = 0;
    for seed in 0..3 {
        let m = randomized(small_config(swin(2)), 100 + seed)?;
        let caption = [0, 4, 9];
        let seq = stage1_generate(&m, &caption, 1.0, &Sampler::Greedy, Decoding::Sequential)?;
        let wave = stage1_generate(&m, &caption, 1.0, &Sampler::Greedy, Decoding::Wavefront)?;
        mismatches += usize::from(seq != wave);
    }
    Ok((mismatches == 0, format!("{mismatches} of 3 seeds differ")))
}

fn rate_oracle() -> Result<(bool, String)> {
    let brute = |d: f64, rates: &[f64], n: usize| {
        rates.iter().copied().find(|&r| (0..n).filter(|&k| k as f64 / r <= d).count() >= n)
    };
    let mut rng = Rng::new(21);
    let pool = [1.0, 2.0, 4.0, 8.0, 16.0];
    let mut bad = usize::from(select_frame_rate(3.75, &[1.0, 2.0, 4.0, 8.0], 5).ok() != Some(2.0));
    for _ in 0..500 {
        let mut rates: Vec<f64> = pool.iter().copied().filter(|_| rng.uniform() < 0.6).collect();
        if rates.is_empty() {
            rates.push(pool[rng.below(pool.len())]);
        }
        let d = rng.uniform_range(0.0, 6.0);
        let n = 1 + rng.below(6);
        bad += usize::from(select_frame_rate(d, &rates, n).ok() != brute(d, &rates, n));
    }
    Ok((bad == 0, format!("{bad} disagreements over 501 instances")))
}
