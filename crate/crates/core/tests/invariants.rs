mod common;

use grnet_core::data::checkpoint;
use grnet_core::data::config::RunConfig;
use grnet_core::data::featfile;
use grnet_core::data::manifest::{parse_records, to_jsonl, ManifestRecord};
use grnet_core::pyramid::{FeatureMap, PyramidConfig};
use grnet_core::reasoning::{loss, propagate, GrNet};
use grnet_core::retrieval::{topk_accuracy, ScoreMatrix};
use grnet_core::simgraph::{edge_weights, EdgeMaskConfig, GraphLayout};
use grnet_core::tensor::Tensor;
use grnet_core::training::{init_params, lr_at, OptimizerConfig};
use grnet_core::DType;
use proptest::prelude::*;
use rand::Rng;

fn mask_strategy() -> impl Strategy<Value = EdgeMaskConfig> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(intra, inter, global)| EdgeMaskConfig {
        intra_scale: intra,
        inter_scale: inter,
        global_links: global,
        self_loops: true,
        source_scales: None,
    })
}

fn pyramid_strategy() -> impl Strategy<Value = PyramidConfig> {
    prop::sample::select(vec!["1x1", "1x1,2x2", "1x1,1x2,2x1", "1x1,1x3,3x1,3x3"])
        .prop_map(|s| s.parse().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edge_rows_are_distributions_and_propagation_stays_in_hull(
        pyramid in pyramid_strategy(),
        mask in mask_strategy(),
        d in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let layout = GraphLayout::new(&pyramid);
        let n = layout.len();
        let v = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let t = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(vec![d, d], (0..d * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let (ti, to) = (t(&mut rng), t(&mut rng));
        let w = edge_weights(&v, &ti, &to, &layout, &mask).unwrap();
        let out = propagate(&v, &w.matrix).unwrap();
        for r in 0..n {
            let row = w.matrix.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (s, &x) in row.iter().enumerate() {
                prop_assert!(x >= 0.0);
                if !w.mask[r * n + s] {
                    prop_assert_eq!(x, 0.0);
                }
            }
            for c in 0..d {
                let col = (0..n).map(|s| v.get2(s, c));
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                prop_assert!(out.get2(r, c) >= lo - 1e-12 && out.get2(r, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_reference_and_loss_is_consistent(seed in any::<u64>(), label in 0u8..2) {
        let mut rng = common::rng(seed);
        let cfg = RunConfig::from_json(r#"{"pyramid":"1x1,2x2","reasoning":{"layers":2,"hidden":3,"proj_dim":4}}"#).unwrap();
        let mut model = GrNet::<f64>::zeros(cfg.model_shape(3)).unwrap();
        init_params(model.params_mut(), &mut rng);
        let q = common::random_map(&mut rng, 3, 4, 4);
        let g = common::random_map(&mut rng, 3, 4, 4);
        let r = model.forward(&q, &g).unwrap();
        let want = common::forward(&model, &q, &g);
        prop_assert!((r.logits[0] - want[0]).abs() < 1e-12 && (r.logits[1] - want[1]).abs() < 1e-12);
        prop_assert!(r.score > 0.0 && r.score < 1.0);
        let l = loss(&r, label).unwrap();
        let p = if label == 1 { r.score } else { 1.0 - r.score };
        prop_assert!(l >= 0.0 && (l + p.ln()).abs() < 1e-9);
        let swapped = model.forward(&g, &q).unwrap();
        prop_assert!((swapped.score - r.score).abs() < 1e-12);
    }

    #[test]
    fn topk_matches_counting_oracle_and_grows_with_k(
        rows in prop::collection::vec(prop::collection::vec(0u8..5, 6), 1..8),
        truth_col in 0usize..6,
    ) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let truth: Vec<Vec<usize>> = (0..scores.len()).map(|i| vec![(truth_col + i) % 6]).collect();
        let sm = ScoreMatrix::new(
            (0..scores.len()).map(|i| format!("q{i}")).collect(),
            (0..6).map(|j| format!("g{j}")).collect(),
            scores.concat(),
            truth.clone(),
        ).unwrap();
        let mut prev = 0.0;
        for k in 1..=8 {
            let acc = topk_accuracy(&sm, k).unwrap().accuracy;
            prop_assert_eq!(acc, common::topk_by_counting(&scores, &truth, k));
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn feature_files_round_trip_any_bits(bits in prop::collection::vec(any::<u64>(), 12)) {
        let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let map = FeatureMap::new(3, 2, 2, data).unwrap();
        let (back, dtype) = featfile::decode::<f64>(&featfile::encode(&map, DType::F64)).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let m32: FeatureMap<f32> = map.cast();
        let (back, _) = featfile::decode::<f32>(&featfile::encode(&m32, DType::F32)).unwrap();
        prop_assert!(back.data().iter().zip(m32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let cfg = RunConfig::from_json(r#"{"pyramid":"1x1,1x2,2x1","reasoning":{"layers":1,"hidden":2,"proj_dim":3}}"#).unwrap();
        let mut model = GrNet::<f64>::zeros(cfg.model_shape(2)).unwrap();
        init_params(model.params_mut(), &mut common::rng(seed));
        let (back, cfg_back) = checkpoint::decode::<f64>(&checkpoint::encode(&model, &cfg)).unwrap();
        prop_assert_eq!(back, model);
        prop_assert_eq!(cfg_back, cfg);
    }

    #[test]
    fn manifest_lines_round_trip(n in 1usize..6, cropped in any::<bool>()) {
        let records: Vec<ManifestRecord> = (0..n)
            .map(|i| serde_json::from_value(serde_json::json!({
                "id": format!("item-{i}"),
                "role": if i % 2 == 0 { "query" } else { "gallery" },
                "identity": format!("id-{}", i / 2),
                "path": format!("f/{i}.spyr"),
                "cropped": cropped,
                "split": "test",
            })).unwrap())
            .collect();
        prop_assert_eq!(parse_records(&to_jsonl(&records)).unwrap(), records);
    }

    #[test]
    fn learning_rate_never_increases(epoch in 0usize..200, every in 1usize..30) {
        let cfg = OptimizerConfig { decay_every: every, ..OptimizerConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        prop_assert!(lr_at(epoch, &cfg) > 0.0);
    }
}
