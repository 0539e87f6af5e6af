use boundmatch_core::augment::{mix, sample_box, CutMixRecord};
use boundmatch_core::boundary_gt::LabelMap;
use boundmatch_core::metrics::{boundary_f1, boundary_iou, miou};
use boundmatch_core::oracle::run_oracle_suite;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_suite_is_clean() {
    for k in [1, 3, 5] {
        let r = run_oracle_suite(300, k, 9).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.checks.len(), 4);
    }
}

fn label_map(h: usize, w: usize, c: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..c, h * w).prop_map(move |l| LabelMap::new(h, w, l).unwrap())
}

fn maps() -> impl Strategy<Value = (LabelMap, LabelMap, usize)> {
    (2usize..10, 2usize..10, 2u8..5)
        .prop_flat_map(|(h, w, c)| (label_map(h, w, c), label_map(h, w, c), Just(c as usize)))
}

proptest! {
    #[test]
    fn perfect_prediction_scores_one((a, _b, c) in maps(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let one = |s: Option<f64>| s.is_none_or(|v| v == 1.0);
        prop_assert!(one(miou(std::slice::from_ref(&a), std::slice::from_ref(&a), c, 255).unwrap().mean));
        prop_assert!(one(boundary_iou(std::slice::from_ref(&a), std::slice::from_ref(&a), c, k).unwrap().mean));
        prop_assert!(one(boundary_f1(std::slice::from_ref(&a), std::slice::from_ref(&a), c, k).unwrap().mean));
    }

    #[test]
    fn scores_bounded_and_iou_symmetric((a, b, c) in maps(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let ab = miou(std::slice::from_ref(&a), std::slice::from_ref(&b), c, 255).unwrap();
        let ba = miou(std::slice::from_ref(&b), std::slice::from_ref(&a), c, 255).unwrap();
        prop_assert_eq!(ab.per_class, ba.per_class);
        let bi = boundary_iou(std::slice::from_ref(&a), std::slice::from_ref(&b), c, k).unwrap();
        let bf = boundary_f1(&[a], &[b], c, k).unwrap();
        for v in bi.per_class.iter().chain(&bf.per_class).flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn cutmix_pastes_only_inside_the_box(
        h in 1usize..20,
        w in 1usize..20,
        lo in 0.05f64..0.5,
        span in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cut = sample_box(&mut rng, h, w, lo, lo + span);
        prop_assert!(cut.y0 + cut.h <= h && cut.x0 + cut.w <= w);
        let a: Vec<u32> = (0..2 * h * w).map(|i| i as u32).collect();
        let b: Vec<u32> = a.iter().map(|v| v + 1_000_000).collect();
        let out = mix(&[a.clone(), b.clone()], &[Some(CutMixRecord { partner: 1, cut }), None], 2, h, w);
        prop_assert_eq!(&out[1], &b);
        for p in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let i = (p * h + y) * w + x;
                    let want = if cut.contains(y, x) { b[i] } else { a[i] };
                    prop_assert_eq!(out[0][i], want);
                }
            }
        }
    }
}
