use mavr_core::metrics::{compute_metrics, parse_confusion, render_confusion};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class (precision, recall, f1) by counting pairs directly.
fn brute_force(truth: &[usize], pred: &[usize], classes: usize) -> (f64, Vec<(f64, f64, f64)>) {
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let acc = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    let per = (0..classes)
        .map(|c| {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fneg = 0.0;
            for (&t, &p) in truth.iter().zip(pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fneg += 1.0,
                    _ => {}
                }
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect();
    (acc, per)
}

/// Compares against the counting oracle on 1000 random label vectors,
/// C in 2..=6 and N up to 200; returns the largest absolute difference.
pub fn brute_force_sweep() -> f64 {
    let mut worst = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let classes = rng.gen_range(2..=6);
        let n = rng.gen_range(0..=200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let m = compute_metrics(&truth, &pred, classes).unwrap();
        let (acc, per) = brute_force(&truth, &pred, classes);
        let mut dev = vec![(m.accuracy - acc).abs()];
        for (c, &(p, r, f)) in per.iter().enumerate() {
            let got = &m.per_class[c];
            dev.extend([(got.precision - p).abs(), (got.recall - r).abs(), (got.f1 - f).abs()]);
        }
        let mean = |k: fn(&(f64, f64, f64)) -> f64| per.iter().map(k).sum::<f64>() / classes as f64;
        dev.extend([
            (m.precision_macro - mean(|x| x.0)).abs(),
            (m.recall_macro - mean(|x| x.1)).abs(),
            (m.f1_macro - mean(|x| x.2)).abs(),
        ]);
        let total: u64 = m.confusion.iter().flatten().sum();
        assert_eq!(total, n as u64);
        worst = dev.into_iter().fold(worst, f64::max);
    }
    worst
}

#[test]
fn agrees_with_brute_force_on_random_vectors() {
    let worst = brute_force_sweep();
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

fn labels(classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..classes, 0..classes), 1..80).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn sample_order_does_not_matter((truth, pred) in labels(4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..truth.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let t2: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
        let p2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        prop_assert_eq!(compute_metrics(&truth, &pred, 4).unwrap(), compute_metrics(&t2, &p2, 4).unwrap());
    }

    #[test]
    fn relabelling_classes_keeps_macro_scores((truth, pred) in labels(4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = compute_metrics(&truth, &pred, 4).unwrap();
        let b = compute_metrics(
            &truth.iter().map(|&c| perm[c]).collect::<Vec<_>>(),
            &pred.iter().map(|&c| perm[c]).collect::<Vec<_>>(),
            4,
        ).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() <= 1e-12);
        prop_assert!((a.f1_macro - b.f1_macro).abs() <= 1e-12);
        prop_assert!((a.precision_macro - b.precision_macro).abs() <= 1e-12);
    }

    #[test]
    fn balanced_recall_macro_equals_accuracy(per_class in 1usize..10, preds in prop::collection::vec(0usize..3, 30)) {
        let truth: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
        let pred: Vec<usize> = (0..truth.len()).map(|i| preds[i % preds.len()]).collect();
        let m = compute_metrics(&truth, &pred, 3).unwrap();
        prop_assert!((m.recall_macro - m.accuracy).abs() <= 1e-12);
        for v in [m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn confusion_csv_round_trips((truth, pred) in labels(4)) {
        let m = compute_metrics(&truth, &pred, 4).unwrap();
        let csv = render_confusion(&m, &["a", "b", "c", "d"], false);
        let (names, rows) = parse_confusion(&csv).unwrap();
        prop_assert_eq!(names, vec!["a", "b", "c", "d"]);
        let counts: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|&v| v as u64).collect()).collect();
        prop_assert_eq!(counts, m.confusion);
    }
}
