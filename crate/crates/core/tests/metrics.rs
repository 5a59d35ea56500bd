use ndcore::Tensor;
use proptest::prelude::*;
use trajpred::metrics::{average_precision, evaluate, top_k_accuracy, TopK};
use trajpred::synth::default_vocabulary;

fn matrix(n: usize, c: usize, v: Vec<f64>) -> Tensor {
    Tensor::new(vec![n, c], v).unwrap()
}

prop_compose! {
    fn scored(max_n: usize, c: usize)(n in 1..max_n)
        (s in prop::collection::vec(0u8..6, n * c), y in prop::collection::vec(prop::bool::weighted(0.3), n * c), n in Just(n))
        -> (usize, Vec<f64>, Vec<f64>) {
        (n, s.into_iter().map(|v| v as f64 / 5.0).collect(), y.into_iter().map(|b| b as u8 as f64).collect())
    }
}

proptest! {
    #[test]
    fn ap_is_invariant_under_monotone_rescaling((n, s, y) in scored(30, 1), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let t: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(average_precision(&s, &y), average_precision(&t, &y));
        let _ = n;
    }

    #[test]
    fn ap_lies_in_unit_interval((_n, s, y) in scored(30, 1)) {
        if let Some(ap) = average_precision(&s, &y) {
            prop_assert!((0.0..=1.0).contains(&ap));
        } else {
            prop_assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perfect_separation_gives_full_ap(y in prop::collection::vec(prop::bool::ANY, 1..30)) {
        let y: Vec<f64> = y.into_iter().map(|b| b as u8 as f64).collect();
        let s: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
        prop_assert_eq!(average_precision(&s, &y), y.contains(&1.0).then_some(1.0));
    }

    #[test]
    fn top_k_is_monotone_in_k((n, s, y) in scored(12, 24)) {
        let (s, y) = (matrix(n, 24, s), matrix(n, 24, y));
        let mut last = 0.0;
        for k in 1..=24 {
            if let (Some(v), _) = top_k_accuracy(&s, &y, TopK::Fixed(k)).unwrap() {
                prop_assert!(v >= last - 1e-12);
                last = v;
            }
        }
        if last > 0.0 {
            prop_assert!((last - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_fields_stay_in_percent_range((n, s, y) in scored(12, 24)) {
        let r = evaluate(&matrix(n, 24, s), &matrix(n, 24, y), &default_vocabulary()).unwrap();
        for (_, v) in r.headline() {
            if let Some(v) = v {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }
    }
}

#[test]
fn rows_without_positives_are_skipped() {
    let s = matrix(2, 2, vec![0.9, 0.1, 0.3, 0.7]);
    let y = matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    let (v, skipped) = top_k_accuracy(&s, &y, TopK::GroundTruth).unwrap();
    assert_eq!((v, skipped), (Some(100.0), 1));
}
