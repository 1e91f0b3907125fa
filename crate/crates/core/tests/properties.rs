use std::f64::consts::PI;

use proptest::collection::vec;
use proptest::prelude::*;

use barfiq::dataio::CircularTarget;
use barfiq::head::{circular_loss, total_loss, wrapped_error_metrics, LossConfig};
use barfiq::model::{linear_attention, rope_rotate};
use barfiq::model::bar_aggregate;
use barfiq::numcore::{softmax, wrap, Tensor};
use barfiq::qfm::{expectations, StateVector};
use barfiq::training::clip_gradients;

fn circ(a: f64, b: f64) -> f64 {
    let d = a - b;
    d.sin().atan2(d.cos()).abs()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-2.0f64..2.0, cols), rows)
}

fn bar_instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(d, n)| {
        (1..=d).prop_flat_map(move |d_r| {
            (vec(-2.0f64..2.0, d), matrix(n, d), matrix(d, d_r), matrix(d, d_r), matrix(d, d))
        })
    })
}

fn t(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wrap_is_two_pi_periodic(x in -50.0f64..50.0, k in -20i32..20) {
        let a = wrap(x);
        let b = wrap(x + 2.0 * PI * k as f64);
        prop_assert!((-PI..PI).contains(&a));
        prop_assert!(circ(a, b) < 1e-9);
        prop_assert!(circ(a, x) < 1e-9);
    }

    #[test]
    fn softmax_ignores_constant_shifts(xs in vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let a = softmax(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = softmax(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_weights_form_a_simplex((c, hist, wq, wk, wv) in bar_instance()) {
        let (r, alpha) = bar_aggregate(&c, &hist, &t(&wq), &t(&wk), &t(&wv)).unwrap();
        prop_assert!(alpha.iter().all(|&a| a > 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        let bound = hist
            .iter()
            .map(|b| {
                let v: Vec<f64> = (0..b.len()).map(|k| (0..b.len()).map(|i| b[i] * wv[i][k]).sum()).collect();
                norm(&v)
            })
            .fold(0.0, f64::max);
        prop_assert!(norm(&r) <= bound + 1e-9);
    }

    #[test]
    fn rotary_scores_depend_on_offset_only(
        half in 1usize..5,
        seed in vec(-1.0f64..1.0, 16),
        m in 0usize..40,
        n in 0usize..40,
        s in 0usize..40,
    ) {
        let d = 2 * half;
        let (q, k) = (&seed[..d], &seed[8..8 + d]);
        let dot = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        let base = 100.0;
        let s1 = dot(rope_rotate(q, m, base).unwrap(), rope_rotate(k, n, base).unwrap());
        let s2 = dot(rope_rotate(q, m + s, base).unwrap(), rope_rotate(k, n + s, base).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-9);
    }

    #[test]
    fn statevector_stays_normalized(angles in vec(-20.0f64..20.0, 2..=6), depth in 1usize..=4) {
        let n = angles.len();
        let mut psi = StateVector::<f64>::zero(n);
        for _ in 0..depth {
            for (q, &a) in angles.iter().enumerate() {
                psi.apply_ry(q, a);
                prop_assert!((psi.norm_sqr() - 1.0).abs() <= 1e-10);
            }
            for r in 0..n {
                psi.apply_cnot(r, (r + 1) % n);
                prop_assert!((psi.norm_sqr() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn measurements_are_bounded(angles in vec(-20.0f64..20.0, 2..=6), depth in 1usize..=4) {
        let m = expectations(&angles, depth).unwrap();
        prop_assert!(m.iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert!(norm(&m) <= (angles.len() as f64).sqrt() + 1e-12);
    }

    #[test]
    fn unit_predictions_give_chord_loss(psi in -PI..PI, phi in -PI..PI) {
        let y = CircularTarget::from_angle(phi);
        let l = circular_loss((psi.cos(), psi.sin()), &y);
        prop_assert!((l - (2.0 - 2.0 * (psi - phi).cos())).abs() <= 1e-12);
        let cfg = LossConfig::new(0.0, 1e-6).unwrap();
        prop_assert!((total_loss((psi.cos(), psi.sin()), &y, &cfg) - l).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_whole_turns(pairs in vec((-PI..PI, -PI..PI, -5i32..5), 1..20)) {
        let hat: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let tru: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let moved: Vec<f64> = pairs.iter().map(|p| p.0 + 2.0 * PI * p.2 as f64).collect();
        let a = wrapped_error_metrics(&hat, &tru).unwrap();
        let b = wrapped_error_metrics(&moved, &tru).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-9 && (a.mse - b.mse).abs() < 1e-9);
        prop_assert!(a.mae <= PI + 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm(g in vec(vec(-10.0f64..10.0, 1..6), 1..5), max in 0.01f64..20.0) {
        let mut grads: Vec<Tensor<f64>> = g.into_iter().map(Tensor::row_vector).collect();
        let (pre, post) = clip_gradients(&mut grads, max);
        let actual = grads.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((post - pre.min(max)).abs() <= 1e-12 * (1.0 + pre));
        prop_assert!((actual - post).abs() <= 1e-12 * (1.0 + pre));
    }

    #[test]
    fn linear_attention_stays_in_the_value_hull(
        (q, k, v) in (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(n, d, dv)| (matrix(n, d), matrix(n, d), matrix(n, dv)))
    ) {
        let out = linear_attention(&t(&q), &t(&k), &t(&v), 0.0).unwrap();
        for c in 0..v[0].len() {
            let lo = v.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..q.len() {
                let y = out.get(i, c);
                prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
            }
        }
    }
}
