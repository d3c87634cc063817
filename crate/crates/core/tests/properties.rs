use std::collections::HashMap;

use proptest::prelude::*;

use plugdef_core::attacks::{distortion, project, Norm};
use plugdef_core::checkpoint::StoredParam;
use plugdef_core::data::{nshot_sample, random_sample};
use plugdef_core::harness::{parse_results, results_to_string, Format, ResultRow};
use plugdef_core::nn::PixelShuffleDecoder;
use plugdef_core::optim::{lion_step, LionConfig, LionState};
use plugdef_core::{Checkpoint, Dataset, Module, Parameter, Tensor};

struct Params(Vec<Parameter<f64>>);

impl Module<f64> for Params {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        self.0.iter().for_each(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        self.0.iter_mut().for_each(f);
    }
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(
        center in pixels(12),
        noise in prop::collection::vec(-1.0f64..1.0, 12),
        eps in 0.0f64..0.5,
        l2 in any::<bool>(),
    ) {
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let c = Tensor::new(vec![3, 2, 2], center.clone()).unwrap();
        let v = Tensor::new(vec![3, 2, 2], center.iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
        let p = project(&v, &c, norm, eps).unwrap();
        prop_assert!(distortion(p.data(), c.data(), norm) <= eps + 1e-9);
        let again = project(&p, &c, norm, eps).unwrap();
        prop_assert!(again.max_abs_diff(&p) <= 1e-12);
    }

    #[test]
    fn pixel_shuffle_index_is_a_permutation(c in 1usize..4, r in 1usize..4, gh in 1usize..4, gw in 1usize..4, b in 1usize..3) {
        let dec = PixelShuffleDecoder::new(r, c);
        let mut idx = dec.index(b, c * r * r, (gh, gw)).unwrap();
        idx.sort_unstable();
        prop_assert!(idx.iter().enumerate().all(|(i, &j)| i == j));
    }

    #[test]
    fn lion_moves_each_coordinate_by_zero_or_lr(
        init in prop::collection::vec(-2.0f64..2.0, 6),
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6),
        lr in 1e-5f64..1e-2,
    ) {
        let mut m = Params(vec![Parameter::new("w", "layer_norm", Tensor::new(vec![6], init).unwrap())]);
        let mut state = LionState::new(&m, LionConfig { lr, ..LionConfig::default() });
        for g in grads {
            let before = m.0[0].tensor.clone();
            let mut map = HashMap::new();
            map.insert("w".to_string(), Tensor::new(vec![6], g).unwrap());
            lion_step(&mut m, &map, &mut state).unwrap();
            for (a, b) in before.data().iter().zip(m.0[0].tensor.data()) {
                let d = (a - b).abs();
                prop_assert!(d == 0.0 || (d - lr).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..4),
        seed in any::<u32>(),
    ) {
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                StoredParam {
                    name: format!("p{i}"),
                    shape: s.clone(),
                    data: (0..n).map(|j| (seed as f32) * 1e-3 + j as f32).collect(),
                }
            })
            .collect();
        let ck = Checkpoint { kind: "defender".into(), header: serde_json::json!({ "seed": seed }), params };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn samplers_are_seeded_and_balanced(labels in prop::collection::vec(0usize..4, 16..40), seed in any::<u64>()) {
        let n = labels.len();
        let ds = Dataset::new("p", Tensor::zeros(&[n, 1, 1, 1]), labels.clone(), 4).unwrap();
        let a = random_sample(&ds, n / 2, seed).unwrap();
        prop_assert_eq!(&a, &random_sample(&ds, n / 2, seed).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n / 2);
        let min_count = (0..4).map(|c| labels.iter().filter(|&&y| y == c).count()).min().unwrap();
        if min_count > 0 {
            let pick = nshot_sample(&ds, 1, seed).unwrap();
            let mut seen: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, vec![0, 1, 2, 3]);
        } else {
            prop_assert!(nshot_sample(&ds, 1, seed).is_err());
        }
    }

    #[test]
    fn result_rows_round_trip(ca in 0.0f64..=1.0, aa in 0.0f64..=1.0, wall in 0.0f64..1e4, seed in any::<u64>(), name in "[a-z&,\" -]{1,12}") {
        let rows = vec![ResultRow::new("synthetic", "tiny-vit", &name, "pgd-linf", seed, ca, aa, wall).unwrap()];
        for f in [Format::Csv, Format::Jsonl] {
            prop_assert_eq!(parse_results(&results_to_string(&rows, f).unwrap(), f).unwrap(), rows.clone());
        }
    }
}
