//! Loss values against plain scalar arithmetic, loss gradients against
//! central finite differences, and randomized invariants.

use approx::assert_abs_diff_eq;
use nastykd::autodiff::{Graph, Tensor};
use nastykd::objectives::{
    cross_entropy, kd_loss, kl_divergence, nasty_loss, softmax_temperature, softmax_temperature_values,
    KDParams, NastyParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STUDENT: [[f64; 3]; 2] = [[0.5, -1.2, 2.0], [1.0, 0.3, -0.7]];
const TEACHER: [[f64; 3]; 2] = [[1.5, 0.2, -0.3], [-0.4, 2.2, 0.9]];
const LABELS: [usize; 2] = [2, 1];

fn oracle_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_xe(z: &[[f64; 3]], y: &[usize]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(row, &l)| -oracle_softmax(row, 1.0)[l].ln())
        .sum::<f64>()
        / z.len() as f64
}

fn oracle_kl(p_logits: &[[f64; 3]], q_logits: &[[f64; 3]], tau: f64) -> f64 {
    p_logits
        .iter()
        .zip(q_logits)
        .map(|(a, b)| {
            let (p, q) = (oracle_softmax(a, tau), oracle_softmax(b, tau));
            p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / p_logits.len() as f64
}

fn rows(r: &[[f64; 3]]) -> Tensor {
    let refs: Vec<&[f64]> = r.iter().map(|x| &x[..]).collect();
    Tensor::from_rows(&refs)
}

fn kd_value(student: &Tensor, kd: &KDParams) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(rows(&TEACHER));
    let l = kd_loss(&mut g, s, t, &LABELS, kd).unwrap();
    g.value(l).item().unwrap()
}

fn nasty_value(teacher: &Tensor, np: &NastyParams) -> f64 {
    let mut g = Graph::new();
    let t = g.constant(teacher.clone());
    let a = g.constant(rows(&STUDENT));
    let l = nasty_loss(&mut g, t, a, &LABELS, np).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn kd_loss_matches_scalar_oracle() {
    let kd = KDParams { alpha: 0.9, tau_s: 4.0 };
    let expected = 0.9 * 16.0 * oracle_kl(&TEACHER, &STUDENT, 4.0) + 0.1 * oracle_xe(&STUDENT, &LABELS);
    assert_abs_diff_eq!(kd_value(&rows(&STUDENT), &kd), expected, epsilon = 1e-5);
}

#[test]
fn nasty_loss_matches_scalar_oracle() {
    let np = NastyParams { omega: 0.004, tau_a: 4.0 };
    let expected = oracle_xe(&TEACHER, &LABELS) - 0.004 * 16.0 * oracle_kl(&TEACHER, &STUDENT, 4.0);
    assert_abs_diff_eq!(nasty_value(&rows(&TEACHER), &np), expected, epsilon = 1e-5);
}

#[test]
fn hand_computed_examples() {
    let p = softmax_temperature_values(&Tensor::from_rows(&[&[2.0, 0.0]]), 2.0).unwrap();
    assert_abs_diff_eq!(p.data()[0], 0.7311, epsilon = 1e-4);
    assert_abs_diff_eq!(p.data()[1], 0.2689, epsilon = 1e-4);

    let mut g = Graph::new();
    let z = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
    let xe = cross_entropy(&mut g, z, &[2]).unwrap();
    assert_abs_diff_eq!(g.value(xe).item().unwrap(), 0.4076, epsilon = 1e-4);

    let u = g.constant(Tensor::zeros(&[3, 10]));
    let xe = cross_entropy(&mut g, u, &[0, 4, 9]).unwrap();
    assert_abs_diff_eq!(g.value(xe).item().unwrap(), 10f64.ln(), epsilon = 1e-4);

    let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
    let q = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
    let kl = kl_divergence(&mut g, p, q).unwrap();
    assert_abs_diff_eq!(g.value(kl).item().unwrap(), 2f64.ln(), epsilon = 1e-4);
}

#[test]
fn boundaries_of_both_objectives() {
    let s = rows(&STUDENT);
    let xe_s = oracle_xe(&STUDENT, &LABELS);
    assert_abs_diff_eq!(kd_value(&s, &KDParams { alpha: 0.0, tau_s: 4.0 }), xe_s, epsilon = 1e-12);
    assert_abs_diff_eq!(kd_value(&rows(&TEACHER), &KDParams { alpha: 1.0, tau_s: 3.0 }), 0.0, epsilon = 1e-12);
    // τ_s = 1, α = 1 is the KL between plain softmaxes.
    assert_abs_diff_eq!(
        kd_value(&s, &KDParams { alpha: 1.0, tau_s: 1.0 }),
        oracle_kl(&TEACHER, &STUDENT, 1.0),
        epsilon = 1e-12
    );

    let t = rows(&TEACHER);
    let xe_t = oracle_xe(&TEACHER, &LABELS);
    assert_abs_diff_eq!(nasty_value(&t, &NastyParams { omega: 0.0, tau_a: 4.0 }), xe_t, epsilon = 1e-12);
    // Teacher equal to the adversary leaves only the cross-entropy term.
    let mut g = Graph::new();
    let a = g.constant(t.clone());
    let b = g.constant(t.clone());
    let l = nasty_loss(&mut g, a, b, &LABELS, &NastyParams { omega: 0.5, tau_a: 4.0 }).unwrap();
    assert_abs_diff_eq!(g.value(l).item().unwrap(), xe_t, epsilon = 1e-12);
}

#[test]
fn nasty_loss_never_increases_with_omega() {
    let t = rows(&TEACHER);
    let mut last = f64::INFINITY;
    for omega in [0.0, 0.001, 0.004, 0.01, 0.04, 0.5] {
        let v = nasty_value(&t, &NastyParams { omega, tau_a: 4.0 });
        assert!(v <= last);
        last = v;
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
    let scale = numeric.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    for (a, n) in analytic.iter().zip(numeric) {
        assert!((a - n).abs() / scale <= 1e-4, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn kd_loss_gradient_flows_to_student_only() {
    let kd = KDParams { alpha: 0.9, tau_s: 4.0 };
    let s0 = rows(&STUDENT);
    let mut g = Graph::new();
    let s = g.variable(s0.clone());
    let t = g.constant(rows(&TEACHER));
    let l = kd_loss(&mut g, s, t, &LABELS, &kd).unwrap();
    g.backward(l).unwrap();
    let numeric = numeric_grad(&s0, |x| kd_value(x, &kd));
    assert_grad_close(g.grad(s).unwrap().data(), &numeric);
    assert!(g.grad(t).is_none());
}

#[test]
fn nasty_loss_gradient_flows_to_teacher_only() {
    let np = NastyParams { omega: 0.04, tau_a: 4.0 };
    let t0 = rows(&TEACHER);
    let mut g = Graph::new();
    let t = g.variable(t0.clone());
    let a = g.constant(rows(&STUDENT));
    let l = nasty_loss(&mut g, t, a, &LABELS, &np).unwrap();
    g.backward(l).unwrap();
    let numeric = numeric_grad(&t0, |x| nasty_value(x, &np));
    assert_grad_close(g.grad(t).unwrap().data(), &numeric);
    assert!(g.grad(a).is_none());
}

#[test]
fn kl_is_non_negative_over_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let c = rng.random_range(2..12);
        let scale = rng.random_range(0.1..20.0);
        let p: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let q: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut g = Graph::new();
        let pl = g.constant(Tensor::new(vec![1, c], p).unwrap());
        let ql = g.constant(Tensor::new(vec![1, c], q).unwrap());
        let ps = softmax_temperature(&mut g, pl, 1.0).unwrap();
        let qs = softmax_temperature(&mut g, ql, 1.0).unwrap();
        let kl = kl_divergence(&mut g, ps, qs).unwrap();
        assert!(g.value(kl).item().unwrap() >= -1e-7);
    }
}

fn logit_rows(range: f64) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..8).prop_flat_map(move |c| (Just(c), prop::collection::vec(-range..range, c * 3)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((c, z) in logit_rows(30.0), tau in 0.05f64..50.0) {
        let p = softmax_temperature_values(&Tensor::new(vec![3, c], z).unwrap(), tau).unwrap();
        for i in 0..3 {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn huge_temperature_flattens_rows((c, z) in logit_rows(10.0)) {
        let p = softmax_temperature_values(&Tensor::new(vec![3, c], z).unwrap(), 1e4).unwrap();
        for &v in p.data() {
            prop_assert!((v - 1.0 / c as f64).abs() <= 1e-3);
        }
    }

    #[test]
    fn kd_loss_is_non_negative((c, z) in logit_rows(30.0), alpha in 0.0f64..=1.0, tau in 1.0f64..20.0) {
        let (s, t) = (&z[..c], &z[c..2 * c]);
        let mut g = Graph::new();
        let sv = g.constant(Tensor::new(vec![1, c], s.to_vec()).unwrap());
        let tv = g.constant(Tensor::new(vec![1, c], t.to_vec()).unwrap());
        let l = kd_loss(&mut g, sv, tv, &[c - 1], &KDParams { alpha, tau_s: tau }).unwrap();
        prop_assert!(g.value(l).item().unwrap() >= -1e-7);
    }
}
