use proptest::prelude::*;

use idsis_core::autograd::Tensor;
use idsis_core::config::ConfigLayers;
use idsis_core::data::{one_hot, LabelMap};
use idsis_core::encoders::{assemble_tokens, StyleCodeSet};
use idsis_core::evaluation::{acceptance_rate, calibrate_threshold, frechet_distance};
use idsis_core::identity::cosine;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // coarse grid so ties are common
    prop::collection::vec((-40i32..=40).prop_map(|v| v as f64 / 40.0), 100..400)
}

fn codes(c: usize, d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, c * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibrated_tau_is_the_least_admissible_score(s in scores(), far in 0.01f64..0.2) {
        let tau = calibrate_threshold(&s, far).unwrap();
        prop_assert!(acceptance_rate(&s, tau) <= far);
        prop_assert!(s.contains(&tau));
        // any smaller observed score would accept too many
        for &c in s.iter().filter(|&&c| c < tau) {
            prop_assert!(acceptance_rate(&s, c) > far);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 5..20),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 5..20),
    ) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        v in prop::collection::vec(-5.0f32..5.0, 8),
        w in prop::collection::vec(-5.0f32..5.0, 8),
        k in 0.1f32..10.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let c = cosine(&v, &w);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        let scaled: Vec<f32> = v.iter().map(|x| x * k).collect();
        prop_assert!((cosine(&scaled, &w) - c).abs() < 1e-5);
    }

    #[test]
    fn replacing_one_style_row_touches_only_that_token(
        a in codes(6, 4), b in codes(6, 4), id in prop::collection::vec(-1.0f32..1.0, 4), row in 0usize..6,
    ) {
        let set = |d: Vec<f32>| StyleCodeSet { codes: Tensor::new(&[6, 4], d).unwrap(), null_flags: vec![false; 6] };
        let (sa, sb) = (set(a), set(b));
        let mut mixed = sa.clone();
        mixed.replace_row(row, &sb);
        let (ta, tm) = (assemble_tokens(&sa, &id).unwrap(), assemble_tokens(&mixed, &id).unwrap());
        for r in 0..7 {
            if r == row {
                prop_assert_eq!(tm.row(r), sb.row(r));
            } else {
                prop_assert_eq!(tm.row(r), ta.row(r));
            }
        }
    }

    #[test]
    fn one_hot_is_a_partition(labels in prop::collection::vec(0u8..6, 64)) {
        let m = one_hot(&LabelMap::new(8, 8, labels.clone()).unwrap(), 6).unwrap();
        let d = m.channels.data();
        for p in 0..64 {
            let col: Vec<f32> = (0..6).map(|c| d[c * 64 + p]).collect();
            prop_assert_eq!(col.iter().sum::<f32>(), 1.0);
            prop_assert_eq!(col[labels[p] as usize], 1.0);
        }
    }

    #[test]
    fn config_text_round_trips(lid in 0.0f64..20.0, batch in 1usize..64, seed in any::<u32>()) {
        let mut l = ConfigLayers::new();
        l.set("lambda_id", &lid.to_string()).unwrap();
        l.set("batch", &batch.to_string()).unwrap();
        l.set("seed", &seed.to_string()).unwrap();
        let cfg = l.resolve(None).unwrap();
        let mut again = ConfigLayers::new();
        again.file_text(&cfg.to_text(), "round-trip").unwrap();
        let back = again.resolve(None).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back.lambda_id, lid);
    }
}
