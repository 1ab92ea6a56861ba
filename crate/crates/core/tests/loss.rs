use ndarray::Array2;
use proptest::prelude::*;

use pseudolabel::loss::{
    attention_redistribute, column_means, detection_loss, dice_loss, dice_loss_grad, directional_derivative,
    js_divergence, js_row, masked_cross_entropy, masked_cross_entropy_grad, softmax_rows, total_segmentation_loss,
    SegmentationLosses, Target,
};

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    bounded(rows, cols, 6.0)
}

fn bounded(rows: usize, cols: usize, limit: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-limit..limit, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Reference JS from the textbook definition with explicit logs.
fn js_reference(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 }).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (kl(p, &m) + kl(q, &m)) / 2.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(m in logits(4, 5)) {
        let p = softmax_rows(m.view()).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = softmax_rows((&m + 100.0).view()).unwrap();
        prop_assert!(p.iter().zip(shifted.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn js_matches_reference_and_bounds(a in logits(3, 4), b in logits(3, 4)) {
        let p = softmax_rows(a.view()).unwrap();
        let q = softmax_rows(b.view()).unwrap();
        for i in 0..3 {
            let v = js_row(p.row(i), q.row(i));
            let want = js_reference(p.row(i).as_slice().unwrap(), q.row(i).as_slice().unwrap());
            prop_assert!((v - want).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&v));
            prop_assert!((v - js_row(q.row(i), p.row(i))).abs() < 1e-15);
        }
        let all = js_divergence(p.view(), q.view(), &[true; 3], 3.0).unwrap();
        let none = js_divergence(p.view(), q.view(), &[false; 3], 3.0).unwrap();
        prop_assert_eq!(none, 0.0);
        prop_assert!(all >= 0.0);
    }

    #[test]
    fn cross_entropy_gradient(a in bounded(4, 3, 2.0), t in logits(4, 3), dir in logits(4, 3),
                              mask in prop::collection::vec(any::<bool>(), 4), divisor in 0.5..8.0f64) {
        let p = softmax_rows(a.view()).unwrap();
        let t = softmax_rows(t.view()).unwrap();
        let h = 1e-6;
        let f = |x: &Array2<f64>| masked_cross_entropy(x.view(), Target::Distribution(t.view()), &mask, divisor).unwrap();
        let numeric = (f(&(&p + &(&dir * h))) - f(&(&p - &(&dir * h)))) / (2.0 * h);
        let g = masked_cross_entropy_grad(p.view(), Target::Distribution(t.view()), &mask, divisor).unwrap();
        let analytic = directional_derivative(g.iter(), dir.iter());
        prop_assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1.0));
    }

    #[test]
    fn hard_targets_equal_one_hot_distributions(a in logits(5, 4), classes in prop::collection::vec(0usize..4, 5)) {
        let p = softmax_rows(a.view()).unwrap();
        let onehot = Array2::from_shape_fn((5, 4), |(i, c)| if classes[i] == c { 1.0 } else { 0.0 });
        let mask = [true, false, true, true, false];
        let hard = masked_cross_entropy(p.view(), Target::Classes(&classes), &mask, 2.0).unwrap();
        let soft = masked_cross_entropy(p.view(), Target::Distribution(onehot.view()), &mask, 2.0).unwrap();
        prop_assert!((hard - soft).abs() < 1e-12);
    }

    #[test]
    fn dice_bounds_and_gradient(p in prop::collection::vec(0.0..1.0f64, 1..30), seed in any::<u64>()) {
        let g: Vec<f64> = (0..p.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let d = dice_loss(&p, &g).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
        prop_assert!(dice_loss(&g, &g).unwrap().abs() < 1e-12);
        let dir: Vec<f64> = (0..p.len()).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let h = 1e-6;
        let at = |s: f64| -> f64 {
            let x: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            dice_loss(&x, &g).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let analytic = directional_derivative(&dice_loss_grad(&p, &g).unwrap(), &dir);
        prop_assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1.0));
    }

    #[test]
    fn attention_is_row_stochastic(enc in logits(6, 3), w1 in logits(3, 2), w2 in logits(3, 2)) {
        let a = attention_redistribute(enc.view(), w1.view(), w2.view()).unwrap();
        prop_assert_eq!(a.scores.dim(), (6, 6));
        prop_assert_eq!(a.redistributed.dim(), (6, 3));
        for row in a.scores.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        for c in 0..3 {
            let col = enc.column(c);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            prop_assert!(a.redistributed.column(c).iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }
    }
}

#[test]
fn shape_and_value_errors() {
    let p = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
    assert!(masked_cross_entropy(p.view(), Target::Classes(&[2]), &[true], 1.0).is_err());
    assert!(masked_cross_entropy(p.view(), Target::Classes(&[0]), &[true, true], 1.0).is_err());
    assert!(masked_cross_entropy(p.view(), Target::Classes(&[0]), &[true], 0.0).is_err());
    let bad = Array2::from_shape_vec((1, 2), vec![0.7, 0.7]).unwrap();
    assert!(js_divergence(bad.view(), p.view(), &[true], 1.0).is_err());
    assert!(dice_loss(&[0.5], &[1.0, 0.0]).is_err());
    assert_eq!(dice_loss(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
    let zero = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
    let ce = masked_cross_entropy(zero.view(), Target::Classes(&[0]), &[true], 1.0).unwrap();
    assert!((ce + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn totals_are_sums() {
    let parts = SegmentationLosses {
        cls: 1.0,
        clus: 0.5,
        js_aug: 0.25,
        js_rec: 0.125,
        att: 2.0,
        wsl: 0.0625,
    };
    assert_eq!(total_segmentation_loss(&parts).unwrap(), 3.9375);
    assert_eq!(detection_loss(3.9375, 0.5).unwrap(), 4.4375);
    let m = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    assert_eq!(column_means(m.view()).into_raw_vec_and_offset().0, vec![2.0, 4.0]);
}
