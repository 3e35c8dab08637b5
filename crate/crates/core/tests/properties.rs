//! Property tests over randomly drawn shapes and configurations.

use proptest::prelude::*;

use hiervid::generate::Sampler;
use hiervid::kv::KvMap;
use hiervid::masks::{transitive_closure, WindowConfig};
use hiervid::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use hiervid::numkernel::{layer_norm, masked_softmax, AttentionMask, Rng, Tensor};
use hiervid::scheduler::{build_schedule, frame_swin_mask, may_depend, verify_schedule};
use hiervid::sequence::Layout;
use hiervid::trainer::TrainConfig;

fn window() -> impl Strategy<Value = (WindowConfig, usize)> {
    (1usize..=6, 1usize..=6, 1usize..=4)
        .prop_flat_map(|(x, y, ts)| (1..=x, 1..=y, Just(x), Just(y), Just(ts)))
        .prop_map(|(ax, ay, x, y, ts)| (WindowConfig::new(ax, ay, x, y).unwrap(), ts))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scores = rng.normal_tensor(&[rows, cols], 5.0);
        let mut mask = AttentionMask::empty(rows, cols);
        for q in 0..rows {
            for k in 0..cols {
                mask.set(q, k, rng.uniform() < 0.6);
            }
            mask.set(q, rng.below(cols), true);
        }
        let p = masked_softmax(&scores, &mask).unwrap();
        for q in 0..rows {
            let row = p.row(q);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (k, &v) in row.iter().enumerate() {
                if mask.allowed(q, k) { prop_assert!(v >= 0.0) } else { prop_assert_eq!(v, 0.0) }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, d in 2usize..12, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[rows, d], 3.0).map(|v| v + shift);
        let y = layer_norm(&x, &Tensor::filled(&[d], 1.0), &Tensor::zeros(&[d])).unwrap();
        for r in 0..rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var <= 1.0 && var > 0.9);
        }
    }

    #[test]
    fn wavefront_schedule_is_a_valid_partition((w, ts) in window()) {
        let s = build_schedule(w, ts);
        prop_assert_eq!(s.token_count(), ts * w.x * w.y);
        prop_assert!(verify_schedule(&s, &frame_swin_mask(w, ts)).is_empty());
        prop_assert!(s.peak_parallelism() <= (w.x * w.y).div_ceil(w.frame_offset()));
        prop_assert!(s.steps.iter().all(|st| !st.is_empty()));
        // Consecutive frames overlap in time only when the offset fits inside a frame.
        if w.frame_offset() <= w.x * w.y {
            prop_assert_eq!(s.steps.len(), w.x * w.y + (ts - 1) * w.frame_offset());
        }
    }

    #[test]
    fn dependency_bound_is_sound((w, ts) in window()) {
        let reach = transitive_closure(&frame_swin_mask(w, ts), |_| true);
        let n = w.x * w.y;
        for p2 in 0..ts * n {
            for p1 in 0..ts * n {
                let (c1, c2) = ((p1 / n, (p1 % n) / w.y, p1 % w.y), (p2 / n, (p2 % n) / w.y, p2 % w.y));
                if p1 != p2 && reach.allowed(p2, p1) {
                    prop_assert!(may_depend(c1, c2, w), "{:?} reaches {:?}", c1, c2);
                }
            }
        }
    }

    #[test]
    fn layout_positions_round_trip(ts in 1usize..6, side in 1usize..6, n_text in 2usize..10) {
        let l = Layout::new(ts, side, n_text).unwrap();
        prop_assert_eq!(l.len(), l.frame_start() + ts * side * side);
        for t in 0..ts {
            for x in 0..side {
                for y in 0..side {
                    prop_assert_eq!(l.coords(l.position(t, x, y)), Some((t, x, y)));
                }
            }
        }
        for p in 0..l.frame_start() {
            prop_assert_eq!(l.coords(p), None);
        }
    }

    #[test]
    fn samplers_respect_their_support(logits in proptest::collection::vec(-20.0f64..20.0, 2..20), k in 1usize..6, key in any::<u64>()) {
        let best = Sampler::Greedy.sample(&logits, key).unwrap();
        prop_assert!(logits.iter().all(|&v| v <= logits[best]));
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let kth = sorted[k.min(logits.len()) - 1];
        let pick = Sampler::TopK { k, temperature: 0.7, seed: 3 }.sample(&logits, key).unwrap();
        prop_assert!(logits[pick] >= kth);
        prop_assert_eq!(pick, Sampler::TopK { k, temperature: 0.7, seed: 3 }.sample(&logits, key).unwrap());
    }

    #[test]
    fn configs_round_trip_through_text(d_heads in 1usize..4, heads in 1usize..4, layers in 1usize..4, side in 2usize..6, ts in 1usize..6, lr in 1e-5f64..1e-2, batch in 1usize..32) {
        let c = ModelConfig {
            d: d_heads * heads * 2,
            heads,
            layers,
            side,
            ts,
            channel: hiervid::attention::ChannelKind::Swin3d(WindowConfig::new(1, side, side, side).unwrap()),
            ..ModelConfig::default()
        };
        prop_assert_eq!(ModelConfig::from_kv(&KvMap::parse(&c.to_kv()).unwrap()).unwrap(), c);
        let t = TrainConfig { max_lr: lr, batch_size: batch, ..TrainConfig::default() };
        prop_assert_eq!(TrainConfig::from_kv(&KvMap::parse(&t.to_kv()).unwrap()).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(heads in 1usize..3, layers in 1usize..3, seed in any::<u64>()) {
        let c = ModelConfig { d: 4 * heads, heads, layers, side: 2, ts: 3, n_text: 4, seed, channel: hiervid::attention::ChannelKind::Swin3d(WindowConfig::new(1, 1, 2, 2).unwrap()), ..ModelConfig::default() };
        let m = Model::new(c.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, None, &path).unwrap();
        let back = load_checkpoint(&path, Some(&c)).unwrap();
        prop_assert_eq!(back.model.config, c);
        prop_assert_eq!(back.model.store.frozen_hash(), m.store.frozen_hash());
        prop_assert_eq!(back.model.store.trainable_hash(), m.store.trainable_hash());
        prop_assert!(back.optimizer.is_none());
    }
}
