mod support;

use gahcda::backbone::{forward, init_params, Prediction};
use gahcda::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use gahcda::config::RunConfig;
use gahcda::dataset::{normalize_image, DomainRole, GazeSample, GazeTrajectory, Image, SegMask};
use gahcda::eval::{assd, dsc};
use gahcda::gaa::{cross_attention_tokens, GaaParams};
use gahcda::gaze::{decode_gzh1, encode_gzh1, rasterize_heatmap, regularize_to_weights, WeightMask};
use gahcda::losses::{cross_entropy_loss, gaze_balance_loss, total_loss, LossComponents, LossWeights};
use gahcda::synth::{generate_domain, SynthConfig};
use proptest::prelude::*;
use support::{brute_assd, brute_attention, brute_dsc};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = SegMask> {
    proptest::collection::vec(0u8..=1, h * w).prop_map(move |px| SegMask::new(h, w, px).unwrap())
}

fn points_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..12)
}

fn trajectory(points: &[(f64, f64)]) -> GazeTrajectory {
    let samples = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| GazeSample {
            t_ms: 200.0 * i as f64,
            x,
            y,
        })
        .collect();
    GazeTrajectory::new("f", samples).unwrap()
}

fn probs_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.001..0.999f64, n)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn heatmap_is_permutation_invariant_with_unit_max(points in points_strategy(), rot in 0usize..12) {
        let a = rasterize_heatmap::<f64>(&trajectory(&points), 24, 20, 1.5).unwrap();
        let mut shuffled = points.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = rasterize_heatmap::<f64>(&trajectory(&shuffled), 24, 20, 1.5).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let max = a.values().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-9);
        prop_assert!(a.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn weights_are_affine_bounded_and_order_preserving(points in points_strategy(), floor in 0.01..=1.0f64) {
        let h = rasterize_heatmap::<f64>(&trajectory(&points), 16, 16, 2.0).unwrap();
        let w = regularize_to_weights(&h, floor).unwrap();
        for (&hv, &wv) in h.values().iter().zip(w.values()) {
            prop_assert!(wv >= floor && wv <= 1.0);
            prop_assert!((wv - (floor + (1.0 - floor) * hv)).abs() < 1e-12);
        }
        let (hv, wv) = (h.values(), w.values());
        for i in (0..hv.len()).step_by(7) {
            for j in (0..hv.len()).step_by(5) {
                if hv[i] <= hv[j] {
                    prop_assert!(wv[i] <= wv[j]);
                }
            }
        }
    }

    #[test]
    fn normalize_image_is_idempotent(raw in proptest::collection::vec(0.0..5.0f64, 256)) {
        let once: Image<f64> = normalize_image(16, 16, &raw).unwrap();
        let twice: Image<f64> = normalize_image(16, 16, once.pixels()).unwrap();
        prop_assert_eq!(once.pixels(), twice.pixels());
        prop_assert!(once.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn gb_loss_with_unit_weights_is_cross_entropy(probs in probs_strategy(64), labels in mask_strategy(8, 8)) {
        let pred = Prediction::from_probs(8, 8, probs).unwrap();
        let ones = WeightMask::constant(8, 8, 1.0).unwrap();
        let gb = gaze_balance_loss(&pred, &labels, &ones).unwrap();
        let ce = cross_entropy_loss(&pred, &labels).unwrap();
        prop_assert!((gb - ce).abs() < 1e-9);
    }

    #[test]
    fn gb_loss_is_monotone_in_the_weight(p in 0.05..0.95f64, w0 in 0.05..0.9f64, dw in 0.01..0.1f64) {
        let w1 = (w0 + dw).min(1.0);
        let eval = |label: u8, w: f64| {
            let pred = Prediction::from_probs(1, 1, vec![p]).unwrap();
            let m = SegMask::new(1, 1, vec![label]).unwrap();
            let wm = WeightMask::constant(1, 1, w).unwrap();
            gaze_balance_loss(&pred, &m, &wm).unwrap()
        };
        prop_assert!(eval(1, w1) < eval(1, w0));
        prop_assert!(eval(0, w1) > eval(0, w0));
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(
        comps in proptest::array::uniform4(0.0..3.0f64),
        lams in proptest::array::uniform4(0.1..3.0f64),
        which in 0usize..4,
    ) {
        let c = LossComponents { l_gaa: comps[0], l_gb: comps[1], l_dice: comps[2], l_ce: comps[3] };
        let w = LossWeights { lambda_gaa: lams[0], lambda_gb: lams[1], lambda_dice: lams[2], lambda_ce: lams[3] };
        let mut doubled = lams;
        doubled[which] *= 2.0;
        let w2 = LossWeights { lambda_gaa: doubled[0], lambda_gb: doubled[1], lambda_dice: doubled[2], lambda_ce: doubled[3] };
        let delta = total_loss(&c, &w2).unwrap() - total_loss(&c, &w).unwrap();
        prop_assert!((delta - lams[which] * comps[which]).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_match_brute_force(a in mask_strategy(12, 12), b in mask_strategy(12, 12)) {
        let (ab, ba) = (dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((ab - brute_dsc(&a, &b)).abs() < 1e-9);
        match brute_assd(&a, &b) {
            Some(expect) => {
                let (x, y) = (assd(&a, &b).unwrap(), assd(&b, &a).unwrap());
                prop_assert_eq!(x, y);
                prop_assert!((x - expect).abs() < 1e-9);
            }
            None => prop_assert!(assd(&a, &b).is_err()),
        }
        if !a.is_empty() {
            prop_assert_eq!(dsc(&a, &a).unwrap(), 100.0);
            prop_assert_eq!(assd(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn assd_is_translation_invariant(y0 in 2usize..6, x0 in 2usize..6, h in 2usize..5, w in 2usize..5, dy in 0usize..4, dx in 0usize..4, shift in 0usize..4) {
        let rect = |oy: usize, ox: usize, hh: usize, ww: usize| {
            SegMask::from_fn(20, 20, move |y, x| y >= oy && y < oy + hh && x >= ox && x < ox + ww)
        };
        let a = rect(y0, x0, h, w);
        let b = rect(y0 + dy, x0 + dx, h + 1, w);
        let a2 = rect(y0 + shift, x0 + shift, h, w);
        let b2 = rect(y0 + dy + shift, x0 + dx + shift, h + 1, w);
        prop_assert!((assd(&a, &b).unwrap() - assd(&a2, &b2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic_with_exact_prefix(
        n in 1usize..8,
        d in 1usize..8,
        seed in proptest::collection::vec(-2.0..2.0f64, 128),
    ) {
        let q: Vec<f64> = seed[..n * d].to_vec();
        let kv: Vec<f64> = seed[64..64 + n * d].to_vec();
        let fused = cross_attention_tokens(&q, &kv, n, d).unwrap();
        let (attn, attended) = brute_attention(&q, &kv, n, d);
        for i in 0..n {
            let row = &fused.attention[i * n..(i + 1) * n];
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for j in 0..n {
                prop_assert!((row[j] - attn[i * n + j]).abs() < 1e-6);
            }
            let tok = fused.token(i);
            prop_assert_eq!(&tok[..d], &kv[i * d..(i + 1) * d]);
            for k in 0..d {
                prop_assert!((tok[d + k] - attended[i * d + k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_is_shift_invariant_per_row(n in 2usize..6, d in 1usize..5, c in -3.0..3.0f64, vals in proptest::collection::vec(-1.0..1.0f64, 50)) {
        // A query scaled toward a fixed key direction shifts every score in
        // its row by the same constant when all keys share that component.
        let mut kv: Vec<f64> = vals[..n * d].to_vec();
        for j in 0..n {
            kv[j * d] = 1.0;
        }
        let mut q = vals[25..25 + n * d].to_vec();
        let base = cross_attention_tokens(&q, &kv, n, d).unwrap();
        for i in 0..n {
            q[i * d] += c;
        }
        let shifted = cross_attention_tokens(&q, &kv, n, d).unwrap();
        for (a, b) in base.attention.iter().zip(&shifted.attention) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn gaze_csv_round_trips(points in points_strategy()) {
        let traj = trajectory(&points);
        let back = GazeTrajectory::parse_csv("f", &traj.to_csv()).unwrap();
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn gzh1_round_trips_bit_exactly(h in 1usize..10, w in 1usize..10, vals in proptest::collection::vec(proptest::num::f32::ANY, 100)) {
        let values = vals[..h * w].to_vec();
        let (h2, w2, back) = decode_gzh1(&encode_gzh1(h, w, &values)).unwrap();
        prop_assert_eq!((h2, w2), (h, w));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&values));
    }

    #[test]
    fn checkpoint_round_trips_and_preserves_forward(seed in 0u64..1000) {
        let params = init_params::<f32>(2, 4, seed).unwrap();
        let aux = GaaParams::<f32>::init(&[8, 16], seed).unwrap().into_tensors();
        let ckpt = Checkpoint { params, aux };
        let bytes = encode_checkpoint(&ckpt);
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
        let img = Image::new(16, 16, (0..256).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let (p1, f1) = forward(&ckpt.params, &img).unwrap();
        let (p2, f2) = forward(&back.params, &img).unwrap();
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(f1, f2);
    }

    #[test]
    fn config_overrides_round_trip(lr in 1e-6..1.0f64, epochs in 1usize..500, floor in 0.01..1.0f64) {
        let cfg = RunConfig::default()
            .with_overrides(&[
                format!("optimizer.lr={lr}"),
                format!("epochs={epochs}"),
                format!("gaze.w_floor={floor}"),
            ])
            .unwrap();
        prop_assert_eq!(cfg.optimizer.lr, lr);
        prop_assert_eq!(cfg.epochs, epochs);
        prop_assert_eq!(cfg.gaze.w_floor, floor);
        let flat: Vec<String> = cfg.flattened().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        prop_assert_eq!(RunConfig::default().with_overrides(&flat).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn synthetic_domains_hold_their_invariants(seed in 0u64..10_000) {
        let cfg = SynthConfig { n_source: 4, n_target: 4, seed, ..SynthConfig::default() };
        let area = (cfg.image_size * cfg.image_size) as f64;
        for role in [DomainRole::Source, DomainRole::Target] {
            let a = generate_domain::<f64>(&cfg, role).unwrap();
            let b = generate_domain::<f64>(&cfg, role).unwrap();
            prop_assert_eq!(&a, &b);
            for i in 0..a.len() {
                prop_assert!(a.image(i).pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
                let m = a.eval_mask(i).unwrap();
                let frac = m.count() as f64 / area;
                prop_assert!(frac >= cfg.area_min && frac <= cfg.area_max);
                let item = a.training_item(i);
                match role {
                    DomainRole::Source => prop_assert!(item.label.is_some() && item.gaze.is_none()),
                    DomainRole::Target => {
                        prop_assert!(item.label.is_none());
                        prop_assert_eq!(item.gaze.unwrap().len(), cfg.gaze_samples);
                    }
                }
            }
            let first: Vec<String> = a.training_items().map(|t| t.id.to_string()).collect();
            let second: Vec<String> = a.training_items().map(|t| t.id.to_string()).collect();
            prop_assert_eq!(first, second);
        }
    }
}
