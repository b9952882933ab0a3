//! Data-free distillation: synthesize a labeled input set by optimizing
//! random noise against a frozen teacher, then distill a student on it.
//!
//! Inputs are optimized in raw data space `[0, 1]` and clamped after every
//! step; the teacher sees them through its recorded input normalization,
//! and the synthetic dataset is stored in that normalized space so a student
//! trained on it can be evaluated directly on real held-out data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datasets::{Dataset, Normalization, Split};
use crate::distill::{train_student, DistillRun, StudentOutcome};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::objectives::{self, KDParams};
use crate::optim::TrainConfig;

const MAX_ATTEMPTS: u64 = 3;
const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSpec {
    pub samples_per_class: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub tv_weight: f64,
    #[serde(default)]
    pub l2_weight: f64,
    /// Temperature applied to the teacher's logits in the target term.
    #[serde(default = "InversionSpec::default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

impl InversionSpec {
    fn default_temperature() -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::Param("samples_per_class must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("inversion lr must be > 0, got {}", self.lr)));
        }
        if !(self.tv_weight >= 0.0 && self.l2_weight >= 0.0) {
            return Err(Error::Param(format!(
                "regularizer weights must be >= 0, got tv {} l2 {}",
                self.tv_weight, self.l2_weight
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Summary statistics of one inversion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    /// Mean teacher probability (τ = 1) of the target class.
    pub mean_confidence: f64,
    /// Mean per-image total variation, in raw data space.
    pub mean_total_variation: f64,
    /// Number of per-sample restarts after a non-finite step.
    pub retries: usize,
}

/// Optimizes one batch of `n` inputs towards class `class`.
fn invert_batch(teacher: &Model, spec: &InversionSpec, class: usize, n: usize, attempt: u64) -> Result<Tensor> {
    let norm = teacher.input_norm().unwrap_or(Normalization::IDENTITY);
    let mut shape = vec![n];
    shape.extend_from_slice(&teacher.spec().input_shape);
    let numel: usize = shape.iter().product();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class as u64) * MAX_ATTEMPTS + attempt);
    let mut x: Vec<f64> = (0..numel).map(|_| rng.random::<f64>()).collect();
    let (mut m, mut v) = (vec![0.0; numel], vec![0.0; numel]);
    let labels = vec![class; n];
    let is_image = shape.len() == 4;

    for step in 1..=spec.steps {
        let mut g = Graph::new();
        let raw = g.variable(Tensor::new(shape.clone(), x.clone())?);
        let centered = g.shift(raw, -norm.mean);
        let input = g.scale(centered, 1.0 / norm.std);
        let bound = teacher.bind(&mut g, false);
        let logits = teacher.forward(&mut g, &bound, input)?;
        let soft = g.scale(logits, 1.0 / spec.temperature);
        let mut loss = objectives::cross_entropy(&mut g, soft, &labels)?;
        if spec.tv_weight > 0.0 && is_image {
            let tv = g.total_variation(raw)?;
            let tv = g.scale(tv, spec.tv_weight / n as f64);
            loss = g.add(loss, tv)?;
        }
        if spec.l2_weight > 0.0 {
            let sq = g.mul(raw, raw)?;
            let sq = g.sum(sq);
            let sq = g.scale(sq, spec.l2_weight / n as f64);
            loss = g.add(loss, sq)?;
        }
        g.backward(loss)?;
        let grad = g.grad(raw).expect("input leaf requires grad").data();
        let (b1, b2) = ADAM_BETAS;
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for i in 0..numel {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let upd = spec.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            // `clamp` keeps NaN, which the caller detects per sample.
            x[i] = (x[i] - upd).clamp(0.0, 1.0);
        }
    }
    Tensor::new(shape, x)
}

fn per_image_tv(x: &[f64], h: usize, w: usize) -> f64 {
    let planes = x.len() / (h * w);
    let mut acc = 0.0;
    for p in 0..planes {
        let img = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    acc += (img[(i + 1) * w + j] - img[i * w + j]).powi(2);
                }
                if j + 1 < w {
                    acc += (img[i * w + j + 1] - img[i * w + j]).powi(2);
                }
            }
        }
    }
    acc
}

/// Synthesizes `samples_per_class` inputs for every class of `teacher`.
/// `steps = 0` returns the initial uniform noise.
pub fn invert(teacher: &Model, spec: &InversionSpec) -> Result<(Dataset, InversionReport)> {
    spec.validate()?;
    let before = teacher.checksum();
    let classes = teacher.spec().num_classes;
    let sample_shape = teacher.spec().input_shape.clone();
    let sample_len: usize = sample_shape.iter().product();
    let norm = teacher.input_norm().unwrap_or(Normalization::IDENTITY);
    let n = spec.samples_per_class;

    let mut raw = Vec::with_capacity(classes * n * sample_len);
    let mut labels = Vec::with_capacity(classes * n);
    let mut retries = 0;
    for class in 0..classes {
        let mut batch = invert_batch(teacher, spec, class, n, 0)?.into_data();
        for i in 0..n {
            let mut attempt = 0;
            while !batch[i * sample_len..(i + 1) * sample_len].iter().all(|v| v.is_finite()) {
                attempt += 1;
                if attempt >= MAX_ATTEMPTS {
                    return Err(Error::Data(format!(
                        "inversion of class {class} sample {i} diverged after {MAX_ATTEMPTS} attempts"
                    )));
                }
                retries += 1;
                let redo = invert_batch(teacher, spec, class, 1, attempt)?;
                batch[i * sample_len..(i + 1) * sample_len].copy_from_slice(redo.data());
            }
        }
        raw.extend_from_slice(&batch);
        labels.extend(std::iter::repeat_n(class, n));
    }

    let mut shape = vec![classes * n];
    shape.extend_from_slice(&sample_shape);
    let inputs = Tensor::new(shape, raw.iter().map(|&v| norm.apply(v)).collect())?;

    let logits = teacher.predict(&inputs)?;
    let probs = objectives::softmax_temperature_values(&logits, 1.0)?;
    let confidence: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.row(i)[y])
        .sum::<f64>()
        / labels.len() as f64;
    let mean_total_variation = if sample_shape.len() == 3 {
        per_image_tv(&raw, sample_shape[1], sample_shape[2]) / labels.len() as f64
    } else {
        0.0
    };
    if teacher.checksum() != before || teacher.has_grads() {
        return Err(Error::Contract("teacher changed during inversion".into()));
    }
    let data = Dataset::new(inputs, labels, classes, Split::Synthetic, norm)?;
    Ok((
        data,
        InversionReport {
            mean_confidence: confidence,
            mean_total_variation,
            retries,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct DatafreeOutcome {
    pub student: StudentOutcome,
    pub synthetic: Dataset,
    pub inversion: InversionReport,
}

/// Inverts `teacher` and distills a fresh `student` on the synthetic set.
/// No training data is accepted; `test` is used only for evaluation.
pub fn datafree_distill(
    teacher: &Model,
    student: &ModelSpec,
    inversion: &InversionSpec,
    kd: &KDParams,
    seed: u64,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<DatafreeOutcome> {
    let (synthetic, report) = invert(teacher, inversion)?;
    let run = DistillRun {
        student: student.clone(),
        kd: *kd,
        fraction: 1.0,
        seed,
        train: cfg.clone(),
    };
    let outcome = train_student(teacher, &run, &synthetic, test, None)?;
    Ok(DatafreeOutcome {
        student: outcome,
        synthetic,
        inversion: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    fn teacher() -> Model {
        let spec = ModelSpec::desk(ModelKind::TinyCnn, &[1, 6, 6], 3);
        let mut m = Model::build(&spec, 4).unwrap();
        m.set_input_norm(Some(Normalization { mean: 0.3, std: 0.5 }));
        m
    }

    fn spec(steps: usize) -> InversionSpec {
        InversionSpec {
            samples_per_class: 4,
            steps,
            lr: 0.1,
            tv_weight: 0.0,
            l2_weight: 0.0,
            temperature: 1.0,
            seed: 8,
        }
    }

    #[test]
    fn zero_steps_returns_initial_noise() {
        let t = teacher();
        let (a, _) = invert(&t, &spec(0)).unwrap();
        let norm = t.input_norm().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        rng.set_stream(0);
        let first: Vec<f64> = (0..36).map(|_| norm.apply(rng.random::<f64>())).collect();
        assert_eq!(&a.inputs().data()[..36], &first[..]);
        assert_eq!(a.split(), Split::Synthetic);
        assert_eq!(a.labels()[..4], [0, 0, 0, 0]);
    }

    #[test]
    fn inversion_raises_confidence_and_respects_range() {
        let t = teacher();
        let (noise, r0) = invert(&t, &spec(0)).unwrap();
        let (x, r1) = invert(&t, &InversionSpec { tv_weight: 0.01, l2_weight: 0.01, ..spec(60) }).unwrap();
        assert!(r1.mean_confidence > r0.mean_confidence);
        let norm = t.input_norm().unwrap();
        for &v in x.inputs().data() {
            let raw = norm.invert(v);
            assert!((-1e-12..=1.0 + 1e-12).contains(&raw));
        }
        assert_eq!(noise.len(), x.len());
    }

    #[test]
    fn inversion_is_reproducible_and_leaves_teacher_alone() {
        let t = teacher();
        let before = t.checksum();
        let (a, _) = invert(&t, &spec(5)).unwrap();
        let (b, _) = invert(&t, &spec(5)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(t.checksum(), before);
        assert!(!t.has_grads());
    }

    #[test]
    fn spec_validation() {
        assert!(InversionSpec { tv_weight: -1.0, ..spec(1) }.validate().is_err());
        assert!(InversionSpec { samples_per_class: 0, ..spec(1) }.validate().is_err());
        assert!(InversionSpec { temperature: 0.0, ..spec(1) }.validate().is_err());
    }
}
