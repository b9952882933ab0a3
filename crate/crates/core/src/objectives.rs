//! Distillation objectives built on the autodiff graph.
//!
//! Both the KD objective and the self-undermining objective reduce over the
//! batch with an arithmetic mean, for the cross-entropy and the KL terms
//! alike. Per-sample weights such as `ω` therefore do not depend on the
//! batch size. KL is always taken as `KL(teacher ∥ other)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside `log` so KL never reaches `Inf`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Knowledge-distillation weights: `α` mixes KL and cross-entropy, `τ_s`
/// softens both distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KDParams {
    #[serde(default = "KDParams::default_alpha")]
    pub alpha: f64,
    #[serde(default = "KDParams::default_tau")]
    pub tau_s: f64,
}

impl KDParams {
    fn default_alpha() -> f64 {
        0.9
    }

    fn default_tau() -> f64 {
        4.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Param(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau_s >= 1.0 && self.tau_s.is_finite()) {
            return Err(Error::Param(format!("tau_s must be >= 1, got {}", self.tau_s)));
        }
        Ok(())
    }
}

impl Default for KDParams {
    fn default() -> Self {
        KDParams {
            alpha: Self::default_alpha(),
            tau_s: Self::default_tau(),
        }
    }
}

/// Self-undermining weights: `ω` scales the subtracted KL term, `τ_A` is
/// its temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NastyParams {
    #[serde(default = "NastyParams::default_omega")]
    pub omega: f64,
    #[serde(default = "NastyParams::default_tau")]
    pub tau_a: f64,
}

impl NastyParams {
    pub const DEFAULT_OMEGA: f64 = 0.004;

    fn default_omega() -> f64 {
        Self::DEFAULT_OMEGA
    }

    fn default_tau() -> f64 {
        4.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Param(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.tau_a >= 1.0 && self.tau_a.is_finite()) {
            return Err(Error::Param(format!("tau_a must be >= 1, got {}", self.tau_a)));
        }
        Ok(())
    }
}

impl Default for NastyParams {
    fn default() -> Self {
        NastyParams {
            omega: Self::default_omega(),
            tau_a: Self::default_tau(),
        }
    }
}

fn check_logits(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        &[b, c] if c >= 2 => Ok((b, c)),
        s => Err(Error::dim(
            "objective",
            format!("{what} must be [batch, classes>=2], got {s:?}"),
        )),
    }
}

/// Row-wise `softmax(logits / τ)`.
pub fn softmax_temperature(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    let scaled = g.scale(logits, 1.0 / tau);
    let lp = g.log_softmax(scaled)?;
    Ok(g.exp(lp))
}

/// Gradient-free `softmax(logits / τ)` on plain values.
pub fn softmax_temperature_values(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let p = softmax_temperature(&mut g, l, tau)?;
    Ok(g.value(p).clone())
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!(
                "label {l} at index {i} outside [0, {classes})"
            )));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Batch-mean of `−log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = check_logits(g, logits, "logits")?;
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{b} rows but {} labels", labels.len()),
        ));
    }
    let oh = g.constant(one_hot(labels, c)?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, oh)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Batch-mean `Σ p·(log p − log q)` over probability rows, with `0·log 0 = 0`
/// and `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (b, c) = check_logits(g, p, "p")?;
    if g.shape(q) != [b, c] {
        return Err(Error::dim(
            "kl_divergence",
            format!("p is [{b}, {c}] but q is {:?}", g.shape(q)),
        ));
    }
    for (name, v) in [("p", p), ("q", q)] {
        for (i, row) in g.value(v).data().chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if !((s - 1.0).abs() <= 1e-5) || row.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "row {i} of {name} is not a probability vector (sum {s})"
                )));
            }
        }
    }
    let log_p = g.log_clamped(p, PROB_FLOOR);
    let log_q = g.log_clamped(q, PROB_FLOOR);
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// `KL(σ_τ(a) ∥ σ_τ(b))` directly from logits.
fn softened_kl(g: &mut Graph, first: Var, second: Var, tau: f64) -> Result<Var> {
    let p = softmax_temperature(g, first, tau)?;
    let q = softmax_temperature(g, second, tau)?;
    kl_divergence(g, p, q)
}

/// `α·τ_s²·KL(σ_τs(teacher) ∥ σ_τs(student)) + (1 − α)·XE(student, labels)`.
///
/// The teacher logits must be a gradient-free leaf (constant or detached);
/// anything else is a contract violation.
pub fn kd_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    kd: &KDParams,
) -> Result<Var> {
    kd.validate()?;
    if g.requires_grad(teacher_logits) {
        return Err(Error::Contract(
            "teacher logits must be detached in kd_loss".into(),
        ));
    }
    check_logits(g, teacher_logits, "teacher logits")?;
    let kl = softened_kl(g, teacher_logits, student_logits, kd.tau_s)?;
    let xe = cross_entropy(g, student_logits, labels)?;
    let soft = g.scale(kl, kd.alpha * kd.tau_s * kd.tau_s);
    let hard = g.scale(xe, 1.0 - kd.alpha);
    g.add(soft, hard)
}

/// `XE(teacher, labels) − ω·τ_A²·KL(σ_τA(teacher) ∥ σ_τA(adversary))`.
///
/// The adversary logits must be a gradient-free leaf. The value may be
/// negative.
pub fn nasty_loss(
    g: &mut Graph,
    teacher_logits: Var,
    adversary_logits: Var,
    labels: &[usize],
    np: &NastyParams,
) -> Result<Var> {
    np.validate()?;
    if g.requires_grad(adversary_logits) {
        return Err(Error::Contract(
            "adversary logits must be detached in nasty_loss".into(),
        ));
    }
    check_logits(g, adversary_logits, "adversary logits")?;
    let xe = cross_entropy(g, teacher_logits, labels)?;
    let kl = softened_kl(g, teacher_logits, adversary_logits, np.tau_a)?;
    let push = g.scale(kl, np.omega * np.tau_a * np.tau_a);
    g.sub(xe, push)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item().unwrap()
    }

    #[test]
    fn softmax_temperature_examples() {
        let p = softmax_temperature_values(&Tensor::from_rows(&[&[3.3, 3.3]]), 7.0).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        let p = softmax_temperature_values(&Tensor::from_rows(&[&[2.0, 0.0]]), 2.0).unwrap();
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
        let logits = Tensor::from_rows(&[&[5.0, -3.0, 1.0, 0.0]]);
        let p = softmax_temperature_values(&logits, 1e4).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-3));
        assert!(matches!(
            softmax_temperature_values(&logits, 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let row: Vec<f64> = (0..7).map(|_| rng.random_range(-50.0..50.0)).collect();
            let t = Tensor::new(vec![1, 7], row).unwrap();
            for tau in [1.0, 4.0, 20.0] {
                let p = softmax_temperature_values(&t, tau).unwrap();
                assert!((p.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = eval(|g| {
            let l = g.constant(Tensor::zeros(&[3, 10]));
            cross_entropy(g, l, &[0, 4, 9])
        });
        assert!((uniform - 10f64.ln()).abs() < 1e-4);

        let confident = eval(|g| {
            let mut t = Tensor::zeros(&[1, 10]);
            t.data_mut()[3] = 50.0;
            let l = g.constant(t);
            cross_entropy(g, l, &[3])
        });
        assert!(confident.abs() < 1e-12);

        let v = eval(|g| {
            let l = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
            cross_entropy(g, l, &[2])
        });
        assert!((v - 0.4076).abs() < 1e-4);

        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(&mut g, l, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn kl_examples() {
        let same = eval(|g| {
            let p = g.constant(Tensor::from_rows(&[&[0.2, 0.3, 0.5]]));
            let q = g.constant(Tensor::from_rows(&[&[0.2, 0.3, 0.5]]));
            kl_divergence(g, p, q)
        });
        assert_eq!(same, 0.0);
        let v = eval(|g| {
            let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
            let q = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
            kl_divergence(g, p, q)
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-4);
        let floored = eval(|g| {
            let p = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
            let q = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
            kl_divergence(g, p, q)
        });
        assert!(floored.is_finite() && floored > 10.0);

        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[&[0.7, 0.7]]));
        let q = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
        assert!(matches!(kl_divergence(&mut g, p, q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kd_loss_boundaries() {
        let s = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -0.5]]);
        let t = Tensor::from_rows(&[&[1.5, 0.2, -0.3], &[0.0, 2.0, 1.0]]);
        let labels = [2, 1];
        let xe = eval(|g| {
            let sv = g.constant(s.clone());
            cross_entropy(g, sv, &labels)
        });
        let kd0 = eval(|g| {
            let sv = g.constant(s.clone());
            let tv = g.constant(t.clone());
            kd_loss(g, sv, tv, &labels, &KDParams { alpha: 0.0, tau_s: 4.0 })
        });
        assert_eq!(kd0, xe);
        let self_kd = eval(|g| {
            let sv = g.constant(s.clone());
            let tv = g.constant(s.clone());
            kd_loss(g, sv, tv, &labels, &KDParams { alpha: 1.0, tau_s: 4.0 })
        });
        assert_eq!(self_kd, 0.0);
    }

    #[test]
    fn kd_loss_rejects_live_teacher() {
        let mut g = Graph::new();
        let s = g.variable(Tensor::zeros(&[1, 2]));
        let t = g.variable(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            kd_loss(&mut g, s, t, &[0], &KDParams::default()),
            Err(Error::Contract(_))
        ));
        let td = g.detach(t);
        assert!(kd_loss(&mut g, s, td, &[0], &KDParams::default()).is_ok());
        assert!(matches!(
            nasty_loss(&mut g, s, t, &[0], &NastyParams::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nasty_loss_boundaries() {
        let t = Tensor::from_rows(&[&[0.5, -1.0, 2.0]]);
        let a = Tensor::from_rows(&[&[2.0, 0.0, 0.0]]);
        let xe = eval(|g| {
            let tv = g.constant(t.clone());
            cross_entropy(g, tv, &[2])
        });
        let n0 = eval(|g| {
            let tv = g.constant(t.clone());
            let av = g.constant(a.clone());
            nasty_loss(g, tv, av, &[2], &NastyParams { omega: 0.0, tau_a: 4.0 })
        });
        assert_eq!(n0, xe);
        let same = eval(|g| {
            let tv = g.constant(t.clone());
            let av = g.constant(t.clone());
            nasty_loss(g, tv, av, &[2], &NastyParams { omega: 0.5, tau_a: 4.0 })
        });
        assert_eq!(same, xe);
    }

    #[test]
    fn parameter_validation() {
        assert!(KDParams { alpha: 1.1, tau_s: 4.0 }.validate().is_err());
        assert!(KDParams { alpha: 0.5, tau_s: 0.5 }.validate().is_err());
        assert!(NastyParams { omega: -0.1, tau_a: 4.0 }.validate().is_err());
        assert!(NastyParams { omega: 0.1, tau_a: 0.9 }.validate().is_err());
        assert!(NastyParams::default().validate().is_ok());
        assert_eq!(KDParams::default().alpha, 0.9);
        assert_eq!(NastyParams::default().omega, 0.004);
    }
}
