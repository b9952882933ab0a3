//! Declarative experiment runs: TOML configs, the run pipelines, sweeps,
//! the per-run metrics log and logit dumps.
//!
//! A run directory holds `config.resolved.toml` (the fully resolved config
//! with a code-version stamp), `metrics.csv`, one checkpoint per trained
//! model and, on failure, `error.txt`.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datafree::{datafree_distill, InversionSpec};
use crate::datasets::{self, normalize_pair, BlobGenerator, Dataset, Normalization, Split};
use crate::distill::{
    multi_peak_from_probs, train_from_scratch, train_nasty_teacher, train_student, DistillRun,
    NastyRun, TeacherOutcome,
};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ModelSpec};
use crate::objectives::{softmax_temperature_values, KDParams, NastyParams};
use crate::optim::{TrainConfig, TrainReport};

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "NASTYKD_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const METRICS_HEADER: &str = "run_id,epoch,split,metric,value,wall_clock_ms";
pub const DIVERGED: &str = "diverged";
pub const SUMMARY_HEADER: &str = "axis,value,teacher_accuracy,nasty_teacher_accuracy,\
student_baseline_accuracy,student_normal_accuracy,student_nasty_accuracy,kd_gain,nasty_drop";

/// Students are initialized from a seed offset from the teacher's, so
/// Teacher-Self never reuses the teacher's initialization.
pub const STUDENT_SEED_OFFSET: u64 = 1000;
/// Threshold of the multi-peak statistic reported by runs.
pub const MULTI_PEAK_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    TrainTeacher,
    TrainNasty,
    Distill,
    TeacherSelf,
    Datafree,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The bundled 8×8 handwritten-digits corpus.
    Digits,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
}

impl DataSource {
    /// Train and test sets, both normalized with statistics of the train set.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DataSource::Digits => datasets::digits_raw()?,
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                datasets::load_idx(train_images, train_labels, Split::Train)?,
                datasets::load_idx(test_images, test_labels, Split::Test)?,
            ),
            DataSource::Blobs {
                classes,
                dim,
                separation,
                train_per_class,
                test_per_class,
            } => {
                let gen = BlobGenerator::new(*classes, *dim, *separation, seed)?;
                (
                    gen.sample(*train_per_class, 0, Split::Train)?,
                    gen.sample(*test_per_class, 1, Split::Test)?,
                )
            }
        };
        if train.num_classes() != test.num_classes() || train.sample_shape() != test.sample_shape() {
            return Err(Error::Data(format!(
                "train and test sets disagree: {} classes {:?} vs {} classes {:?}",
                train.num_classes(),
                train.sample_shape(),
                test.num_classes(),
                test.sample_shape()
            )));
        }
        normalize_pair(&train, &test)
    }
}

/// Architecture choice; `widths` defaults to the desk roster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl ArchSpec {
    pub fn new(kind: ModelKind) -> Self {
        ArchSpec { kind, widths: None }
    }

    pub fn resolve(&self, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::desk(self.kind, input_shape, classes);
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    fn resolved(&self, input_shape: &[usize], classes: usize) -> Result<ArchSpec> {
        let spec = self.resolve(input_shape, classes)?;
        Ok(ArchSpec {
            kind: spec.kind,
            widths: Some(spec.widths),
        })
    }
}

/// `kind` or `kind:w1-w2-...`, e.g. `small_cnn:8-16-32`.
impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, widths) = match s.split_once(':') {
            Some((k, w)) => {
                let widths = w
                    .split('-')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad width {x:?} in {s:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                (k, Some(widths))
            }
            None => (s, None),
        };
        Ok(ArchSpec {
            kind: kind.trim().parse()?,
            widths,
        })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.as_str())?;
        if let Some(w) = &self.widths {
            let w: Vec<String> = w.iter().map(|x| x.to_string()).collect();
            write!(f, ":{}", w.join("-"))?;
        }
        Ok(())
    }
}

/// Inversion settings; the seed is the run's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub samples_per_class: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub tv_weight: f64,
    #[serde(default)]
    pub l2_weight: f64,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl InversionConfig {
    pub fn with_seed(&self, seed: u64) -> InversionSpec {
        InversionSpec {
            samples_per_class: self.samples_per_class,
            steps: self.steps,
            lr: self.lr,
            tv_weight: self.tv_weight,
            l2_weight: self.l2_weight,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Omega,
    TauS,
    Alpha,
    Fraction,
    AdversaryArch,
    StudentArch,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Omega,
        SweepAxis::TauS,
        SweepAxis::Alpha,
        SweepAxis::Fraction,
        SweepAxis::AdversaryArch,
        SweepAxis::StudentArch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Omega => "omega",
            SweepAxis::TauS => "tau_s",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Fraction => "fraction",
            SweepAxis::AdversaryArch => "adversary_arch",
            SweepAxis::StudentArch => "student_arch",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown sweep axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// A sweep value as written in TOML: a number or an architecture string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

impl SweepValue {
    /// Parses a command-line value: numbers where possible, text otherwise.
    pub fn parse(s: &str) -> SweepValue {
        s.trim()
            .parse()
            .map(SweepValue::Number)
            .unwrap_or_else(|_| SweepValue::Text(s.trim().to_string()))
    }

    fn number(&self, axis: SweepAxis) -> Result<f64> {
        match self {
            SweepValue::Number(v) => Ok(*v),
            SweepValue::Text(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("axis {} needs numbers, got {s:?}", axis.as_str()))),
        }
    }

    fn arch(&self) -> Result<ArchSpec> {
        match self {
            SweepValue::Text(s) => s.parse(),
            SweepValue::Number(v) => Err(Error::Config(format!("expected an architecture, got {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub code_version: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: RunKind,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths are taken under the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    #[serde(default = "TrainConfig::desk")]
    pub train: TrainConfig,
    #[serde(default = "default_teacher")]
    pub teacher: ArchSpec,
    /// Defaults to the teacher's architecture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary_checkpoint: Option<PathBuf>,
    /// Defaults to α = 0.9 and τ_s = τ_A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<KDParams>,
    /// For distillation runs, also trains a nasty teacher and distills
    /// from it for comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nasty: Option<NastyParams>,
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default)]
    pub init_from_adversary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<InversionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Written into resolved snapshots; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
}

fn default_teacher() -> ArchSpec {
    ArchSpec::new(ModelKind::SmallCnn)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
        }
        if let Some(n) = &self.nasty {
            n.validate()?;
        }
        match self.kind {
            RunKind::Distill | RunKind::Datafree if self.student.is_none() => {
                return Err(Error::Config(format!(
                    "{:?} runs need a [student] section",
                    self.kind
                )))
            }
            RunKind::Datafree if self.inversion.is_none() => {
                return Err(Error::Config("datafree runs need an [inversion] section".into()))
            }
            RunKind::Sweep => match &self.sweep {
                None => return Err(Error::Config("sweep runs need a [sweep] section".into())),
                Some(s) if s.values.is_empty() => {
                    return Err(Error::Config("sweep values must not be empty".into()))
                }
                _ => {}
            },
            _ => {}
        }
        if let Some(inv) = &self.inversion {
            inv.with_seed(self.seed).validate()?;
        }
        Ok(())
    }

    pub fn nasty_params(&self) -> NastyParams {
        self.nasty.unwrap_or_default()
    }

    pub fn kd_params(&self) -> KDParams {
        self.kd.unwrap_or(KDParams {
            tau_s: self.nasty_params().tau_a,
            ..KDParams::default()
        })
    }

    fn student_arch(&self) -> ArchSpec {
        match self.kind {
            RunKind::TeacherSelf => self.teacher.clone(),
            _ => self.student.clone().unwrap_or_else(|| self.teacher.clone()),
        }
    }

    /// This config with one sweep value applied.
    pub fn with_axis(&self, axis: SweepAxis, value: &SweepValue) -> Result<Self> {
        let mut c = self.clone();
        match axis {
            SweepAxis::Omega => {
                c.nasty = Some(NastyParams {
                    omega: value.number(axis)?,
                    ..self.nasty_params()
                })
            }
            SweepAxis::TauS => {
                c.kd = Some(KDParams {
                    tau_s: value.number(axis)?,
                    ..self.kd_params()
                })
            }
            SweepAxis::Alpha => {
                c.kd = Some(KDParams {
                    alpha: value.number(axis)?,
                    ..self.kd_params()
                })
            }
            SweepAxis::Fraction => c.fraction = value.number(axis)?,
            SweepAxis::AdversaryArch => c.adversary = Some(value.arch()?),
            SweepAxis::StudentArch => c.student = Some(value.arch()?),
        }
        c.validate()?;
        Ok(c)
    }
}

/// Resolves a configured output path against the output root.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn resolve_output(cfg: &ExperimentConfig, fallback_name: &str) -> PathBuf {
    match &cfg.output_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => output_root().join(p),
        None => output_root().join(fallback_name),
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        DIVERGED.to_string()
    }
}

/// Append-only metrics CSV of one run directory.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
    run_id: String,
}

impl MetricsLog {
    pub fn create(path: &Path, run_id: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            run_id: run_id.to_string(),
        };
        log.line(METRICS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, role: &str, epoch: usize, split: &str, metric: &str, value: f64, wall_ms: u64) -> Result<()> {
        let line = format!(
            "{}/{role},{epoch},{split},{metric},{},{wall_ms}",
            self.run_id,
            fmt_value(value)
        );
        self.line(&line)
    }

    pub fn record_report(&mut self, role: &str, report: &TrainReport) -> Result<()> {
        for e in &report.epochs {
            self.record(role, e.epoch, "train", "lr", e.lr, e.wall_ms)?;
            self.record(role, e.epoch, "train", "loss", e.train_loss, e.wall_ms)?;
            self.record(role, e.epoch, "train", "accuracy", e.train_accuracy, e.wall_ms)?;
            if let Some(l) = e.test_loss {
                self.record(role, e.epoch, "test", "loss", l, e.wall_ms)?;
            }
            if let Some(a) = e.test_accuracy {
                self.record(role, e.epoch, "test", "accuracy", a, e.wall_ms)?;
            }
        }
        if report.diverged {
            let epoch = report.epochs.last().map_or(0, |e| e.epoch);
            let line = format!("{}/{role},{epoch},train,status,{DIVERGED},0", self.run_id);
            self.line(&line)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Final accuracies of one comparison run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub teacher_accuracy: Option<f64>,
    pub nasty_teacher_accuracy: Option<f64>,
    pub student_baseline_accuracy: Option<f64>,
    pub student_normal_accuracy: Option<f64>,
    pub student_nasty_accuracy: Option<f64>,
}

impl RunSummary {
    pub fn kd_gain(&self) -> Option<f64> {
        Some(self.student_normal_accuracy? - self.student_baseline_accuracy?)
    }

    pub fn nasty_drop(&self) -> Option<f64> {
        Some(self.student_normal_accuracy? - self.student_nasty_accuracy?)
    }

    fn csv_row(&self, axis: SweepAxis, value: &SweepValue) -> String {
        let f = |v: Option<f64>| v.map(fmt_value).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            axis.as_str(),
            value,
            f(self.teacher_accuracy),
            f(self.nasty_teacher_accuracy),
            f(self.student_baseline_accuracy),
            f(self.student_normal_accuracy),
            f(self.student_nasty_accuracy),
            f(self.kd_gain()),
            f(self.nasty_drop()),
        )
    }
}

/// Executes configs. Teachers trained during one runner's lifetime are
/// reused across sweep children that would train them identically.
#[derive(Default)]
pub struct Runner {
    teachers: HashMap<String, TeacherOutcome>,
    data: HashMap<String, (Dataset, Dataset)>,
}

struct RunCtx {
    dir: PathBuf,
    log: MetricsLog,
}

impl RunCtx {
    fn save(&self, model: &Model, name: &str) -> Result<()> {
        model.save(&self.dir.join(format!("{name}.ckpt")))
    }
}

impl Runner {
    pub fn new() -> Self {
        Runner::default()
    }

    fn data(&mut self, cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
        let key = format!("{:?}/{}", cfg.data, cfg.seed);
        if let Some(d) = self.data.get(&key) {
            return Ok(d.clone());
        }
        let d = cfg.data.load(cfg.seed)?;
        self.data.insert(key, d.clone());
        Ok(d)
    }

    fn cached(
        &mut self,
        key: String,
        make: impl FnOnce() -> Result<TeacherOutcome>,
    ) -> Result<TeacherOutcome> {
        if let Some(t) = self.teachers.get(&key) {
            return Ok(t.clone());
        }
        let t = make()?;
        self.teachers.insert(key, t.clone());
        Ok(t)
    }

    /// Runs `cfg`, writing artifacts under its output directory. On error
    /// the partial artifacts stay and `error.txt` records the failure.
    pub fn run(&mut self, cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
        cfg.validate()?;
        let dir = resolve_output(cfg, name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let result = self.run_in(cfg, &dir);
        if let Err(e) = &result {
            let path = dir.join("error.txt");
            fs::write(&path, format!("{e}\n")).map_err(|io| Error::io(&path, io))?;
        }
        result.map(|_| dir)
    }

    fn run_in(&mut self, cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
        let (train, test) = self.data(cfg)?;
        let shape = train.sample_shape().to_vec();
        let classes = train.num_classes();
        let resolved = self.resolve(cfg, &shape, classes, dir)?;
        let snapshot = dir.join("config.resolved.toml");
        fs::write(&snapshot, resolved.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

        if cfg.kind == RunKind::Sweep {
            return self.sweep_in(&resolved, dir).map(|_| RunSummary::default());
        }
        let run_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let log = MetricsLog::create(&dir.join("metrics.csv"), &run_id)?;
        let mut ctx = RunCtx {
            dir: dir.to_path_buf(),
            log,
        };
        let out = self.pipeline(&resolved, &train, &test, &mut ctx);
        ctx.log.flush()?;
        out
    }

    /// Fills every defaulted field so the snapshot alone reproduces the run.
    fn resolve(&self, cfg: &ExperimentConfig, shape: &[usize], classes: usize, dir: &Path) -> Result<ExperimentConfig> {
        let mut r = cfg.clone();
        r.output_dir = Some(dir.to_path_buf());
        r.teacher = cfg.teacher.resolved(shape, classes)?;
        let needs_adversary = matches!(cfg.kind, RunKind::TrainNasty) || cfg.nasty.is_some() || cfg.kind == RunKind::Sweep;
        if needs_adversary {
            r.adversary = Some(cfg.adversary.as_ref().unwrap_or(&cfg.teacher).resolved(shape, classes)?);
            r.nasty = Some(cfg.nasty_params());
        }
        if !matches!(cfg.kind, RunKind::TrainTeacher | RunKind::TrainNasty) {
            r.student = Some(cfg.student_arch().resolved(shape, classes)?);
            r.kd = Some(cfg.kd_params());
        }
        r.stamp = Some(Stamp {
            code_version: CODE_VERSION.to_string(),
            seed: cfg.seed,
        });
        Ok(r)
    }

    fn normal_teacher(&mut self, cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TeacherOutcome> {
        if let Some(path) = &cfg.teacher_checkpoint {
            return loaded(path, test);
        }
        let spec = cfg.teacher.resolve(train.sample_shape(), train.num_classes())?;
        self.normal(&spec, cfg, train, test)
    }

    fn normal(&mut self, spec: &ModelSpec, cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TeacherOutcome> {
        let key = format!("normal/{spec:?}/{}/{:?}/{:?}", cfg.seed, cfg.train, cfg.data);
        self.cached(key, || train_from_scratch(spec, cfg.seed, 1.0, &cfg.train, train, Some(test)))
    }

    fn adversary(&mut self, cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TeacherOutcome> {
        if let Some(path) = &cfg.adversary_checkpoint {
            return loaded(path, test);
        }
        let arch = cfg.adversary.as_ref().unwrap_or(&cfg.teacher);
        if arch == &cfg.teacher {
            return self.normal_teacher(cfg, train, test);
        }
        let spec = arch.resolve(train.sample_shape(), train.num_classes())?;
        self.normal(&spec, cfg, train, test)
    }

    fn nasty_teacher(
        &mut self,
        cfg: &ExperimentConfig,
        adversary: &Model,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<TeacherOutcome> {
        let spec = cfg.teacher.resolve(train.sample_shape(), train.num_classes())?;
        let run = NastyRun {
            teacher: spec,
            nasty: cfg.nasty_params(),
            seed: cfg.seed,
            train: cfg.train.clone(),
            init_from_adversary: cfg.init_from_adversary,
        };
        let key = format!(
            "nasty/{run:?}/{}/{:?}",
            adversary.checksum(),
            cfg.data
        );
        self.cached(key, || train_nasty_teacher(adversary, &run, train, Some(test)))
    }

    fn pipeline(&mut self, cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, ctx: &mut RunCtx) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        let tau = cfg.nasty_params().tau_a;
        let epochs = cfg.train.schedule.total_epochs;

        let teacher = self.normal_teacher(cfg, train, test)?;
        ctx.log.record_report("teacher", &teacher.report)?;
        ctx.save(&teacher.model, "teacher")?;
        summary.teacher_accuracy = teacher.test_accuracy;
        record_teacher(&mut ctx.log, "teacher", &teacher.model, test, tau, epochs)?;

        let nasty = if cfg.kind == RunKind::TrainNasty || cfg.nasty.is_some() {
            let adversary = self.adversary(cfg, train, test)?;
            if cfg.adversary.as_ref().is_some_and(|a| a != &cfg.teacher) || cfg.adversary_checkpoint.is_some() {
                ctx.save(&adversary.model, "adversary")?;
            }
            let nasty = self.nasty_teacher(cfg, &adversary.model, train, test)?;
            ctx.log.record_report("nasty_teacher", &nasty.report)?;
            ctx.save(&nasty.model, "nasty_teacher")?;
            record_teacher(&mut ctx.log, "nasty_teacher", &nasty.model, test, tau, epochs)?;
            if let Some(gap) = nasty.accuracy_gap() {
                ctx.log.record("nasty_teacher", epochs, "test", "accuracy_gap", gap, 0)?;
            }
            summary.nasty_teacher_accuracy = nasty.test_accuracy;
            Some(nasty)
        } else {
            None
        };
        if matches!(cfg.kind, RunKind::TrainTeacher | RunKind::TrainNasty) {
            return Ok(summary);
        }

        let student_spec = cfg.student_arch().resolve(train.sample_shape(), train.num_classes())?;
        let student_seed = cfg.seed.wrapping_add(STUDENT_SEED_OFFSET);
        let kd = cfg.kd_params();

        if cfg.kind == RunKind::Datafree {
            let inv = cfg.inversion.as_ref().expect("validated").with_seed(cfg.seed);
            let mut teachers = vec![("normal", &teacher.model)];
            if let Some(n) = &nasty {
                teachers.push(("nasty", &n.model));
            }
            for (label, t) in teachers {
                let out = datafree_distill(t, &student_spec, &inv, &kd, student_seed, &cfg.train, Some(test))?;
                let role = format!("student_{label}");
                ctx.log.record_report(&role, &out.student.report)?;
                ctx.log.record(&role, epochs, "synthetic", "teacher_confidence", out.inversion.mean_confidence, 0)?;
                ctx.log.record(&role, epochs, "synthetic", "total_variation", out.inversion.mean_total_variation, 0)?;
                ctx.save(&out.student.model, &role)?;
                let path = ctx.dir.join(format!("synthetic_{label}.nkd"));
                out.synthetic.save(&path)?;
                match label {
                    "normal" => summary.student_normal_accuracy = out.student.test_accuracy,
                    _ => summary.student_nasty_accuracy = out.student.test_accuracy,
                }
            }
            return Ok(summary);
        }

        let baseline = train_from_scratch(&student_spec, student_seed, cfg.fraction, &cfg.train, train, Some(test))?;
        ctx.log.record_report("student_baseline", &baseline.report)?;
        ctx.save(&baseline.model, "student_baseline")?;
        summary.student_baseline_accuracy = baseline.test_accuracy;

        let run = DistillRun {
            student: student_spec,
            kd,
            fraction: cfg.fraction,
            seed: student_seed,
            train: cfg.train.clone(),
        };
        let mut teachers = vec![("normal", &teacher.model)];
        if let Some(n) = &nasty {
            teachers.push(("nasty", &n.model));
        }
        for (label, t) in teachers {
            let out = train_student(t, &run, train, Some(test), baseline.test_accuracy)?;
            let role = format!("student_{label}");
            ctx.log.record_report(&role, &out.report)?;
            if let Some(d) = out.baseline_delta {
                ctx.log.record(&role, epochs, "test", "baseline_delta", d, 0)?;
            }
            ctx.save(&out.model, &role)?;
            match label {
                "normal" => summary.student_normal_accuracy = out.test_accuracy,
                _ => summary.student_nasty_accuracy = out.test_accuracy,
            }
        }
        Ok(summary)
    }

    fn sweep_in(&mut self, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
        let sweep = cfg.sweep.clone().expect("validated");
        let summary_path = dir.join("summary.csv");
        let mut rows = vec![SUMMARY_HEADER.to_string()];
        for value in &sweep.values {
            let mut child = cfg.with_axis(sweep.axis, value)?;
            child.kind = RunKind::Distill;
            child.sweep = None;
            child.stamp = None;
            child.nasty = Some(child.nasty_params());
            let child_dir = dir.join(format!("{}={}", sweep.axis.as_str(), value));
            child.output_dir = Some(child_dir.clone());
            fs::create_dir_all(&child_dir).map_err(|e| Error::io(&child_dir, e))?;
            let result = self.run_in(&child, &child_dir);
            if let Err(e) = &result {
                let path = child_dir.join("error.txt");
                fs::write(&path, format!("{e}\n")).map_err(|io| Error::io(&path, io))?;
            }
            rows.push(result?.csv_row(sweep.axis, value));
            fs::write(&summary_path, rows.join("\n") + "\n").map_err(|e| Error::io(&summary_path, e))?;
        }
        Ok(())
    }

    /// Runs the sweep `axis`/`values` over a base config of any
    /// distillation kind.
    pub fn sweep(&mut self, base: &ExperimentConfig, axis: SweepAxis, values: Vec<SweepValue>, name: &str) -> Result<PathBuf> {
        if values.is_empty() {
            return Err(Error::Config("sweep values must not be empty".into()));
        }
        let mut cfg = base.clone();
        if cfg.student.is_none() {
            cfg.student = Some(cfg.student_arch());
        }
        cfg.kind = RunKind::Sweep;
        cfg.sweep = Some(SweepSpec { axis, values });
        self.run(&cfg, name)
    }
}

fn loaded(path: &Path, test: &Dataset) -> Result<TeacherOutcome> {
    let model = Model::load(path)?;
    let acc = crate::optim::evaluate(&model, test)?.accuracy;
    Ok(TeacherOutcome {
        model,
        report: TrainReport::default(),
        test_accuracy: Some(acc),
        adversary_accuracy: None,
    })
}

fn record_teacher(log: &mut MetricsLog, role: &str, model: &Model, test: &Dataset, tau: f64, epoch: usize) -> Result<()> {
    let mp = crate::distill::multi_peak_statistic(model, test, tau, MULTI_PEAK_THRESHOLD)?;
    log.record(role, epoch, "test", "multi_peak", mp, 0)
}

/// Reads a sweep summary back as `(header, rows)`.
pub fn read_summary(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

/// Loads a dataset argument: a dataset file, or `digits:train` / `digits:test`.
/// Un-normalized data is normalized with the model's recorded statistics.
pub fn load_dataset_for(model: &Model, arg: &str) -> Result<Dataset> {
    let data = match arg {
        "digits:train" => datasets::digits_raw()?.0,
        "digits:test" => datasets::digits_raw()?.1,
        path => Dataset::load(Path::new(path))?,
    };
    let want = model.input_norm().unwrap_or(Normalization::IDENTITY);
    if data.norm() == want {
        Ok(data)
    } else if data.norm() == Normalization::IDENTITY {
        data.normalized(want)
    } else {
        Err(Error::Config(format!(
            "dataset normalization {:?} differs from the model's {:?}",
            data.norm(),
            want
        )))
    }
}

/// Writes one CSV row per sample: index, label, raw logits, `σ_τ`
/// probabilities and the penultimate-layer embedding. Returns the row count.
pub fn dump_logits(model: &Model, data: &Dataset, tau: f64, out: &Path) -> Result<usize> {
    let (emb, logits) = model.predict_with_embedding(data.inputs())?;
    let probs = softmax_temperature_values(&logits, tau)?;
    let (c, e) = (logits.shape()[1], emb.shape()[1]);
    let file = File::create(out).map_err(|err| Error::io(out, err))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..c).map(|k| format!("logit_{k}")));
    header.extend((0..c).map(|k| format!("prob_{k}")));
    header.extend((0..e).map(|k| format!("emb_{k}")));
    let io = |err| Error::io(out, err);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, &y) in data.labels().iter().enumerate() {
        let mut row = vec![i.to_string(), y.to_string()];
        for t in [&logits, &probs, &emb] {
            row.extend(t.row(i).iter().map(|v| format!("{v:?}")));
        }
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(data.len())
}

/// Reads the probability columns of a logit dump.
pub fn read_dump_probs(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty dump", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<usize> = header
        .split(',')
        .enumerate()
        .filter(|(_, h)| h.starts_with("prob_"))
        .map(|(i, _)| i)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split(',').collect();
        for &c in &cols {
            let v = fields
                .get(c)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad row {}", path.display(), rows + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols.len()], data)
}

/// Multi-peak statistic recomputed from a logit dump.
pub fn multi_peak_from_dump(path: &Path, threshold: f64) -> Result<f64> {
    multi_peak_from_probs(&read_dump_probs(path)?, threshold)
}
