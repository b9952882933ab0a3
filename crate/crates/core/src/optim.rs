//! Optimizers, step learning-rate schedules, and the generic training and
//! evaluation loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{Mode, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
}

mod defaults {
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl OptimizerSpec {
    /// SGD with momentum 0.9 and weight decay 5e-4.
    pub fn sgd(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0)
        {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

/// Multiplies the base learning rate by `decay_factor` after each milestone
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl ScheduleSpec {
    /// 30 epochs, ×0.1 after epochs 15 and 23.
    pub fn desk() -> Self {
        ScheduleSpec {
            milestones: vec![15, 23],
            decay_factor: 0.1,
            total_epochs: 30,
        }
    }

    /// Same milestone placement (~50% and ~75%) scaled to `epochs`.
    pub fn scaled(epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [epochs / 2, (epochs * 3) / 4]
            .into_iter()
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        ScheduleSpec {
            milestones,
            decay_factor: 0.1,
            total_epochs: epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.milestones.iter().all(|&m| m < self.total_epochs);
        if !increasing || !in_range {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing and below total_epochs {}",
                self.milestones, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize, base: f64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        base * self.decay_factor.powi(passed as i32)
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec, model: &Model) -> Result<Self> {
        spec.validate()?;
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        Ok(Optimizer {
            spec: spec.clone(),
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        })
    }

    /// Applies one update at learning rate `lr` using the gradients stored
    /// on `model`. Gradients are left in place; the caller zeroes them.
    ///
    /// SGD: `v ← μv + g + λθ; θ ← θ − lr·v`.
    /// Adam: bias-corrected moments of `g + λθ`.
    pub fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        if let Some(p) = model.parameters().iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{}` has no gradient at optimizer step",
                p.name
            )));
        }
        self.steps += 1;
        let s = &self.spec;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - s.beta1.powi(t), 1.0 - s.beta2.powi(t));
        for (i, p) in model.parameters_mut().iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above").data();
            let theta = p.value.data_mut();
            match s.kind {
                OptimizerKind::SgdMomentum => {
                    let v = &mut self.first[i];
                    for ((th, &g), vel) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
                        *vel = s.momentum * *vel + g + s.weight_decay * *th;
                        *th -= lr * *vel;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((th, &g), mm), vv) in
                        theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let g = g + s.weight_decay * *th;
                        *mm = s.beta1 * *mm + (1.0 - s.beta1) * g;
                        *vv = s.beta2 * *vv + (1.0 - s.beta2) * g * g;
                        let mhat = *mm / bc1;
                        let vhat = *vv / bc2;
                        *th -= lr * mhat / (vhat.sqrt() + s.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything `train` needs besides the model, data and objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
}

impl TrainConfig {
    pub const DEFAULT_BATCH: usize = 64;
    pub const DESK_LR: f64 = 0.02;

    fn default_batch() -> usize {
        Self::DEFAULT_BATCH
    }

    /// SGD(lr 0.02, momentum 0.9, wd 5e-4), 30 epochs, batch 64.
    pub fn desk() -> Self {
        TrainConfig {
            optimizer: OptimizerSpec::sgd(Self::DESK_LR),
            schedule: ScheduleSpec::desk(),
            batch_size: Self::DEFAULT_BATCH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A minibatch handed to the objective.
pub struct Batch<'a> {
    /// Row indices into the training set.
    pub indices: &'a [usize],
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Objective value of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` on `data` by minimizing `objective`.
///
/// The objective receives the graph, the model's logits for the batch, and
/// the batch itself, and returns a scalar loss. Shuffling is driven by
/// `seed`, so identical inputs give identical trajectories.
///
/// The run is flagged as diverged when a loss is NaN/Inf (training stops
/// there) or when train accuracy is at most 1.5× chance once a quarter of
/// the epochs have elapsed (training continues).
pub fn train<F>(
    model: &mut Model,
    data: &Dataset,
    test: Option<&Dataset>,
    mut objective: F,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport>
where
    F: FnMut(&mut Graph, Var, &Batch) -> Result<Var>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if model.input_norm().is_none() {
        model.set_input_norm(Some(data.norm()));
    }
    let epochs = cfg.schedule.total_epochs;
    let mut report = TrainReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    model.set_mode(Mode::Train);
    let mut opt = Optimizer::new(&cfg.optimizer, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let chance = 1.0 / data.num_classes() as f64;
    let check_epoch = epochs.div_ceil(4);
    let classes = data.num_classes();

    'epochs: for epoch in 1..=epochs {
        let started = Instant::now();
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                indices: chunk,
                labels: chunk.iter().map(|&i| data.labels()[i]).collect(),
            };
            model.zero_grad();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(data.inputs().select_rows(chunk));
            let logits = model.forward(&mut g, &bound, x)?;
            let loss = objective(&mut g, logits, &batch)?;
            let value = g.value(loss).item()?;
            report.step_losses.push(value);
            if !value.is_finite() {
                report.diverged = true;
                report.divergence_reason =
                    Some(format!("non-finite loss {value} in epoch {epoch}"));
                report.epochs.push(EpochStats {
                    epoch,
                    lr,
                    train_loss: value,
                    train_accuracy: 0.0,
                    test_accuracy: None,
                    test_loss: None,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
                break 'epochs;
            }
            loss_sum += value * chunk.len() as f64;
            correct += g
                .value(logits)
                .data()
                .chunks(classes)
                .zip(&batch.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            g.backward(loss)?;
            model.accumulate_grads(&g, &bound);
            opt.step(model, lr)?;
        }
        model.zero_grad();
        let train_accuracy = correct as f64 / data.len() as f64;
        let eval = match test {
            Some(t) => Some(evaluate(model, t)?),
            None => None,
        };
        report.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_accuracy,
            test_accuracy: eval.map(|e| e.accuracy),
            test_loss: eval.map(|e| e.mean_loss),
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if epoch == check_epoch && train_accuracy <= 1.5 * chance && !report.diverged {
            report.diverged = true;
            report.divergence_reason = Some(format!(
                "train accuracy {train_accuracy:.4} <= 1.5x chance after epoch {epoch}"
            ));
        }
    }
    model.set_mode(Mode::Eval);
    Ok(report)
}

/// Plain supervised training with batch-mean cross-entropy.
pub fn train_supervised(
    model: &mut Model,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train(
        model,
        data,
        test,
        |g, logits, batch| crate::objectives::cross_entropy(g, logits, &batch.labels),
        cfg,
        seed,
    )
}

/// Accuracy and mean cross-entropy over `data`; never mutates the model.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    evaluate_batched(model, data, 256)
}

/// As [`evaluate`], forwarding `batch_size` rows at a time. Results do not
/// depend on the partition.
pub fn evaluate_batched(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let classes = data.num_classes();
    let mut correct = 0usize;
    let mut losses = Vec::with_capacity(data.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let logits = model.predict(&data.inputs().select_rows(chunk))?;
        if logits.shape()[1] != classes {
            return Err(Error::Config(format!(
                "model predicts {} classes, dataset has {classes}",
                logits.shape()[1]
            )));
        }
        for (row, &i) in logits.data().chunks(classes).zip(chunk) {
            let label = data.labels()[i];
            if argmax(row) == label {
                correct += 1;
            }
            losses.push(row_cross_entropy(row, label));
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: losses.iter().sum::<f64>() / data.len() as f64,
    })
}

fn row_cross_entropy(row: &[f64], label: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    lse - row[label]
}

/// Logits of `model` over every row of `data`, detached from any graph.
pub fn logits_for(model: &Model, data: &Dataset) -> Result<Tensor> {
    model.predict(data.inputs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_blobs, BlobGenerator, Split};
    use crate::models::{ModelKind, ModelSpec};

    fn one_param_model(theta: f64) -> Model {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            widths: vec![],
            num_classes: 2,
            input_shape: vec![1],
        };
        let mut m = Model::build(&spec, 0).unwrap();
        m.parameters_mut()[0].value.data_mut().copy_from_slice(&[theta, theta]);
        m
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut m = one_param_model(1.0);
        let before = m.checksum();
        for p in m.parameters_mut() {
            p.grad = Some(Tensor::full(p.value.shape(), 0.3));
        }
        let mut opt = Optimizer::new(&OptimizerSpec::sgd(0.0), &m).unwrap();
        opt.step(&mut m, 0.0).unwrap();
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = one_param_model(1.0);
        for p in m.parameters_mut() {
            p.grad = Some(Tensor::full(p.value.shape(), 0.5));
        }
        let spec = OptimizerSpec {
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerSpec::sgd(0.1)
        };
        let mut opt = Optimizer::new(&spec, &m).unwrap();
        opt.step(&mut m, 0.1).unwrap();
        assert!((m.parameters()[0].value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut m = one_param_model(1.0);
        let mut opt = Optimizer::new(&OptimizerSpec::sgd(0.1), &m).unwrap();
        assert!(matches!(opt.step(&mut m, 0.1), Err(Error::Contract(_))));
    }

    /// Minimizes Σ (θ − c)² through the autodiff engine.
    fn bowl(spec: &OptimizerSpec, steps: usize) -> f64 {
        let target = [3.0, -1.5];
        let mut m = one_param_model(0.0);
        let mut opt = Optimizer::new(spec, &m).unwrap();
        for _ in 0..steps {
            m.zero_grad();
            let mut g = Graph::new();
            let bound = m.bind(&mut g, true);
            let c = g.constant(Tensor::new(vec![1, 2], target.to_vec()).unwrap());
            let d = g.sub(bound.vars()[0], c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq);
            let bias_sq = g.mul(bound.vars()[1], bound.vars()[1]).unwrap();
            let lb = g.sum(bias_sq);
            let total = g.add(l, lb).unwrap();
            g.backward(total).unwrap();
            m.accumulate_grads(&g, &bound);
            opt.step(&mut m, spec.lr).unwrap();
        }
        let w = m.parameters()[0].value.data();
        (w[0] - target[0]).abs().max((w[1] - target[1]).abs())
    }

    #[test]
    fn quadratic_bowl_converges() {
        let sgd = OptimizerSpec {
            momentum: 0.5,
            weight_decay: 0.0,
            ..OptimizerSpec::sgd(0.2)
        };
        assert!(bowl(&sgd, 200) < 1e-6);
        let err = bowl(&OptimizerSpec::adam(0.05), 200);
        assert!(err < 1e-2);
    }

    #[test]
    fn schedule_decays_exactly_at_milestones() {
        let s = ScheduleSpec::desk();
        s.validate().unwrap();
        assert_eq!(s.lr_at(1, 0.1), 0.1);
        assert_eq!(s.lr_at(15, 0.1), 0.1);
        assert_eq!(s.lr_at(16, 0.1), 0.1 * 0.1);
        assert_eq!(s.lr_at(24, 0.1), 0.1 * 0.1f64.powi(2));
        let bad = ScheduleSpec {
            milestones: vec![10, 5],
            ..ScheduleSpec::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleSpec {
            milestones: vec![30],
            ..ScheduleSpec::desk()
        };
        assert!(bad.validate().is_err());
    }

    fn blob_pair() -> (Dataset, Dataset) {
        let gen = BlobGenerator::new(2, 4, 10.0, 11).unwrap();
        (
            gen.sample(100, 0, Split::Train).unwrap(),
            gen.sample(100, 1, Split::Test).unwrap(),
        )
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerSpec::sgd(0.05),
            schedule: ScheduleSpec::scaled(epochs),
            batch_size: 32,
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (train, test) = blob_pair();
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            widths: vec![16],
            num_classes: 2,
            input_shape: vec![4],
        };
        let mut m = Model::build(&spec, 1).unwrap();
        let report = train_supervised(&mut m, &train, Some(&test), &quick_cfg(10), 0).unwrap();
        assert!(!report.diverged, "{:?}", report.divergence_reason);
        assert!(evaluate(&m, &test).unwrap().accuracy >= 0.99);
        assert_eq!(evaluate(&m, &train).unwrap().accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (train, _) = blob_pair();
        let spec = ModelSpec::desk(ModelKind::Mlp, &[4], 2);
        let mut m = Model::build(&spec, 1).unwrap();
        let before = m.checksum();
        let cfg = TrainConfig {
            schedule: ScheduleSpec {
                milestones: vec![],
                decay_factor: 0.1,
                total_epochs: 0,
            },
            ..quick_cfg(1)
        };
        let r = train_supervised(&mut m, &train, None, &cfg, 0).unwrap();
        assert!(r.epochs.is_empty() && r.step_losses.is_empty());
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (train, _) = blob_pair();
        let spec = ModelSpec::desk(ModelKind::Mlp, &[4], 2);
        let run = |seed| {
            let mut m = Model::build(&spec, 3).unwrap();
            train_supervised(&mut m, &train, None, &quick_cfg(3), seed)
                .unwrap()
                .step_losses
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn non_finite_loss_flags_divergence() {
        let (data, _) = blob_pair();
        let spec = ModelSpec::desk(ModelKind::Mlp, &[4], 2);
        let mut m = Model::build(&spec, 3).unwrap();
        let r = train(
            &mut m,
            &data,
            None,
            |g, logits, _| {
                let s = g.sum(logits);
                Ok(g.scale(s, f64::NAN))
            },
            &quick_cfg(4),
            0,
        )
        .unwrap();
        assert!(r.diverged);
        assert_eq!(r.step_losses.len(), 1);
    }

    #[test]
    fn constant_model_scores_chance_and_evaluate_is_pure() {
        let gen = BlobGenerator::new(10, 3, 5.0, 2).unwrap();
        let data = gen.sample(30, 0, Split::Test).unwrap();
        let spec = ModelSpec::desk(ModelKind::Mlp, &[3], 10);
        let mut m = Model::build(&spec, 0).unwrap();
        for name in ["out.weight", "out.bias"] {
            let p = m.parameter_mut(name).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let before = m.checksum();
        let e = evaluate(&m, &data).unwrap();
        assert!((e.accuracy - 0.10).abs() <= 0.03);
        assert!((e.mean_loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn evaluate_is_partition_invariant() {
        let data = synth_blobs(3, 40, 5, 2.0, 8).unwrap();
        let m = Model::build(&ModelSpec::desk(ModelKind::Mlp, &[5], 3), 2).unwrap();
        let a = evaluate_batched(&m, &data, 7).unwrap();
        let b = evaluate_batched(&m, &data, 120).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
