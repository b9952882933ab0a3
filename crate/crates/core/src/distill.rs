//! Teacher/student procedures: normal teacher training, knowledge
//! distillation into a student, self-undermining ("nasty") teacher training
//! against a frozen reference network, Teacher-Self distillation, and the
//! multi-peak statistic of softened teacher outputs.
//!
//! Reference networks (the KD teacher, the nasty-training adversary) are
//! only ever evaluated through [`Model::predict`], which binds parameters as
//! frozen leaves. Their logits are computed once per run and enter each
//! batch's graph as constants, so no gradient can reach them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datasets::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::objectives::{self, KDParams, NastyParams};
use crate::optim::{self, evaluate, TrainConfig, TrainReport};

/// Shuffling seed paired with a model-initialization seed. Every procedure
/// derives it the same way, so runs sharing a seed share a batch order.
pub fn shuffle_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRun {
    pub student: ModelSpec,
    pub kd: KDParams,
    /// Fraction of each class of the training set used, in `(0, 1]`.
    pub fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NastyRun {
    pub teacher: ModelSpec,
    pub nasty: NastyParams,
    pub seed: u64,
    pub train: TrainConfig,
    /// Start from the adversary's weights instead of a fresh initialization.
    #[serde(default)]
    pub init_from_adversary: bool,
}

#[derive(Clone, Debug)]
pub struct StudentOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub test_accuracy: Option<f64>,
    /// `test_accuracy − baseline` when a baseline was supplied.
    pub baseline_delta: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub test_accuracy: Option<f64>,
    /// Adversary test accuracy, for nasty runs.
    pub adversary_accuracy: Option<f64>,
}

impl TeacherOutcome {
    /// `teacher − adversary` test accuracy.
    pub fn accuracy_gap(&self) -> Option<f64> {
        Some(self.test_accuracy? - self.adversary_accuracy?)
    }
}

fn test_accuracy(model: &Model, test: Option<&Dataset>) -> Result<Option<f64>> {
    test.map(|t| evaluate(model, t).map(|e| e.accuracy)).transpose()
}

fn check_compatible(reference: &ModelSpec, other: &ModelSpec, data: &Dataset, what: &str) -> Result<()> {
    if reference.num_classes != other.num_classes || reference.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "{what}: class counts differ ({} vs {} vs data {})",
            reference.num_classes,
            other.num_classes,
            data.num_classes()
        )));
    }
    if reference.input_shape != other.input_shape || reference.input_shape != data.sample_shape() {
        return Err(Error::Config(format!(
            "{what}: input shapes differ ({:?} vs {:?} vs data {:?})",
            reference.input_shape,
            other.input_shape,
            data.sample_shape()
        )));
    }
    Ok(())
}

/// Supervised cross-entropy training from scratch; the normal teacher and
/// every student baseline.
pub fn train_from_scratch(
    spec: &ModelSpec,
    seed: u64,
    fraction: f64,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<TeacherOutcome> {
    let data = subsample(train, fraction, seed)?;
    let mut model = Model::build(spec, seed)?;
    check_compatible(spec, spec, &data, "supervised")?;
    let report = optim::train_supervised(&mut model, &data, test, cfg, shuffle_seed(seed))?;
    let test_accuracy = test_accuracy(&model, test)?;
    Ok(TeacherOutcome {
        model,
        report,
        test_accuracy,
        adversary_accuracy: None,
    })
}

/// Distills `teacher` into a freshly initialized student with the KD
/// objective. The teacher is left untouched (checked by checksum).
pub fn train_student(
    teacher: &Model,
    run: &DistillRun,
    train: &Dataset,
    test: Option<&Dataset>,
    baseline: Option<f64>,
) -> Result<StudentOutcome> {
    run.kd.validate()?;
    check_compatible(teacher.spec(), &run.student, train, "distill")?;
    let data = subsample(train, run.fraction, run.seed)?;
    let before = teacher.checksum();
    let teacher_logits = teacher.predict(data.inputs())?;

    let mut student = Model::build(&run.student, run.seed)?;
    let report = optim::train(
        &mut student,
        &data,
        test,
        |g: &mut Graph, logits, batch| {
            let t = g.constant(teacher_logits.select_rows(batch.indices));
            objectives::kd_loss(g, logits, t, &batch.labels, &run.kd)
        },
        &run.train,
        shuffle_seed(run.seed),
    )?;
    if teacher.checksum() != before || teacher.has_grads() {
        return Err(Error::Contract("teacher changed during distillation".into()));
    }
    let test_accuracy = test_accuracy(&student, test)?;
    Ok(StudentOutcome {
        model: student,
        report,
        baseline_delta: baseline.zip(test_accuracy).map(|(b, a)| a - b),
        test_accuracy,
    })
}

/// Distillation into a student sharing the teacher's exact architecture.
pub fn teacher_self(
    teacher: &Model,
    run: &DistillRun,
    train: &Dataset,
    test: Option<&Dataset>,
    baseline: Option<f64>,
) -> Result<StudentOutcome> {
    if &run.student != teacher.spec() {
        return Err(Error::Config(format!(
            "teacher-self needs the student spec to equal the teacher spec ({:?} vs {:?})",
            run.student,
            teacher.spec()
        )));
    }
    train_student(teacher, run, train, test, baseline)
}

/// Trains a teacher with the self-undermining objective against a frozen,
/// pre-trained `adversary`.
pub fn train_nasty_teacher(
    adversary: &Model,
    run: &NastyRun,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<TeacherOutcome> {
    run.nasty.validate()?;
    check_compatible(adversary.spec(), &run.teacher, train, "nasty training")?;
    let before = adversary.checksum();
    let adversary_logits = adversary.predict(train.inputs())?;

    let mut teacher = if run.init_from_adversary {
        if adversary.spec() != &run.teacher {
            return Err(Error::Config(
                "init_from_adversary needs identical teacher and adversary specs".into(),
            ));
        }
        let mut m = adversary.clone();
        m.zero_grad();
        m
    } else {
        Model::build(&run.teacher, run.seed)?
    };
    let report = optim::train(
        &mut teacher,
        train,
        test,
        |g: &mut Graph, logits, batch| {
            let a = g.constant(adversary_logits.select_rows(batch.indices));
            objectives::nasty_loss(g, logits, a, &batch.labels, &run.nasty)
        },
        &run.train,
        shuffle_seed(run.seed),
    )?;
    if adversary.checksum() != before || adversary.has_grads() {
        return Err(Error::Contract("adversary changed during nasty training".into()));
    }
    Ok(TeacherOutcome {
        test_accuracy: test_accuracy(&teacher, test)?,
        adversary_accuracy: test_accuracy(adversary, test)?,
        model: teacher,
        report,
    })
}

/// Mean number of classes whose `σ_τ` probability exceeds `threshold`.
pub fn multi_peak_from_probs(probs: &Tensor, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 0.5) {
        return Err(Error::Param(format!(
            "threshold must be in (0, 0.5), got {threshold}"
        )));
    }
    let rows = probs.shape()[0];
    let peaks: usize = (0..rows)
        .map(|i| probs.row(i).iter().filter(|&&p| p > threshold).count())
        .sum();
    Ok(peaks as f64 / rows as f64)
}

/// [`multi_peak_from_probs`] over a model's softened outputs on `data`.
pub fn multi_peak_statistic(model: &Model, data: &Dataset, tau: f64, threshold: f64) -> Result<f64> {
    let logits = model.predict(data.inputs())?;
    let probs = objectives::softmax_temperature_values(&logits, tau)?;
    multi_peak_from_probs(&probs, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{BlobGenerator, Split};
    use crate::models::ModelKind;
    use crate::optim::ScheduleSpec;

    fn blobs() -> (Dataset, Dataset) {
        let gen = BlobGenerator::new(3, 6, 4.0, 21).unwrap();
        (
            gen.sample(40, 0, Split::Train).unwrap(),
            gen.sample(20, 1, Split::Test).unwrap(),
        )
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            schedule: ScheduleSpec::scaled(3),
            batch_size: 16,
            ..TrainConfig::desk()
        }
    }

    fn mlp(width: usize) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp,
            widths: vec![width],
            num_classes: 3,
            input_shape: vec![6],
        }
    }

    #[test]
    fn multi_peak_examples() {
        let one_hot = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(multi_peak_from_probs(&one_hot, 0.1).unwrap(), 1.0);
        let uniform = Tensor::full(&[4, 5], 0.2);
        assert_eq!(multi_peak_from_probs(&uniform, 0.1).unwrap(), 5.0);
        assert!(multi_peak_from_probs(&uniform, 0.5).is_err());
        assert!(multi_peak_from_probs(&uniform, 0.0).is_err());
    }

    #[test]
    fn alpha_zero_matches_supervised_trajectory() {
        let (train, test) = blobs();
        let teacher = train_from_scratch(&mlp(16), 1, 1.0, &cfg(), &train, None).unwrap().model;
        let base = train_from_scratch(&mlp(8), 5, 0.5, &cfg(), &train, Some(&test)).unwrap();
        let run = DistillRun {
            student: mlp(8),
            kd: KDParams { alpha: 0.0, tau_s: 4.0 },
            fraction: 0.5,
            seed: 5,
            train: cfg(),
        };
        let kd = train_student(&teacher, &run, &train, Some(&test), base.test_accuracy).unwrap();
        assert_eq!(kd.report.step_losses.len(), base.report.step_losses.len());
        for (a, b) in kd.report.step_losses.iter().zip(&base.report.step_losses) {
            assert!((a - b).abs() <= 1e-7);
        }
        assert_eq!(kd.baseline_delta, Some(0.0));
    }

    #[test]
    fn omega_zero_matches_normal_training() {
        let (train, test) = blobs();
        let normal = train_from_scratch(&mlp(16), 2, 1.0, &cfg(), &train, Some(&test)).unwrap();
        let run = NastyRun {
            teacher: mlp(16),
            nasty: NastyParams { omega: 0.0, tau_a: 4.0 },
            seed: 2,
            train: cfg(),
            init_from_adversary: false,
        };
        let nasty = train_nasty_teacher(&normal.model, &run, &train, Some(&test)).unwrap();
        assert_eq!(nasty.report.step_losses, normal.report.step_losses);
        assert_eq!(nasty.model.checksum(), normal.model.checksum());
        assert_eq!(nasty.accuracy_gap(), Some(0.0));
    }

    #[test]
    fn mismatches_are_config_errors() {
        let (train, _) = blobs();
        let teacher = Model::build(&mlp(4), 0).unwrap();
        let mut other = mlp(4);
        other.num_classes = 4;
        let run = DistillRun {
            student: other,
            kd: KDParams::default(),
            fraction: 1.0,
            seed: 0,
            train: cfg(),
        };
        assert!(matches!(
            train_student(&teacher, &run, &train, None, None),
            Err(Error::Config(_))
        ));
        let run = DistillRun {
            student: mlp(5),
            ..run
        };
        assert!(matches!(
            teacher_self(&teacher, &run, &train, None, None),
            Err(Error::Config(_))
        ));
        let nasty = NastyRun {
            teacher: ModelSpec {
                input_shape: vec![7],
                ..mlp(4)
            },
            nasty: NastyParams::default(),
            seed: 0,
            train: cfg(),
            init_from_adversary: false,
        };
        assert!(matches!(
            train_nasty_teacher(&teacher, &nasty, &train, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adversary_is_frozen_and_init_flag_works() {
        let (train, _) = blobs();
        let adversary = train_from_scratch(&mlp(16), 3, 1.0, &cfg(), &train, None).unwrap().model;
        let before = adversary.checksum();
        let run = NastyRun {
            teacher: mlp(16),
            nasty: NastyParams { omega: 0.05, tau_a: 4.0 },
            seed: 9,
            train: cfg(),
            init_from_adversary: true,
        };
        let out = train_nasty_teacher(&adversary, &run, &train, None).unwrap();
        assert_eq!(adversary.checksum(), before);
        assert!(!adversary.has_grads());
        assert_ne!(out.model.checksum(), before);
    }
}
