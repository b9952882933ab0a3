//! Small teacher/student architectures and their checkpoint format.
//!
//! Three kinds cover the capacity range used in experiments:
//!
//! * `tiny_cnn`: conv3×3(c₁) → relu → maxpool2 → linear.
//! * `mlp`: flatten → [linear → relu]* → linear. `widths` are hidden sizes.
//! * `small_cnn`: conv3×3(c₁) → relu → conv3×3(c₂) → relu → maxpool2 →
//!   linear(f) → relu → linear, with `widths = [c₁, c₂, f]`.
//!
//! Weights are initialized from `U(−√(6/fan_in), √(6/fan_in))`, biases at
//! zero, drawn in parameter order from a ChaCha8 stream seeded by the caller.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fnv, Graph, Tensor, Var};
use crate::datasets::Normalization;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    SmallCnn,
    TinyCnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::SmallCnn => "small_cnn",
            ModelKind::TinyCnn => "tiny_cnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "small_cnn" => Ok(ModelKind::SmallCnn),
            "tiny_cnn" => Ok(ModelKind::TinyCnn),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected mlp, small_cnn or tiny_cnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl ModelSpec {
    /// The desk-scale roster configuration of `kind` for the given input.
    pub fn desk(kind: ModelKind, input_shape: &[usize], num_classes: usize) -> Self {
        let widths = match kind {
            ModelKind::TinyCnn => vec![4],
            ModelKind::Mlp => vec![128],
            ModelKind::SmallCnn => vec![16, 32, 64],
        };
        ModelSpec {
            kind,
            widths,
            num_classes,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return bad(format!("widths must be positive, got {:?}", self.widths));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return bad(format!("invalid input_shape {:?}", self.input_shape));
        }
        let need = match self.kind {
            ModelKind::Mlp => None,
            ModelKind::TinyCnn => Some(1),
            ModelKind::SmallCnn => Some(3),
        };
        if let Some(n) = need {
            if self.widths.len() != n {
                return bad(format!(
                    "{} needs {n} widths, got {:?}",
                    self.kind.as_str(),
                    self.widths
                ));
            }
            if self.input_shape.len() != 3 || self.input_shape[1] < 2 || self.input_shape[2] < 2 {
                return bad(format!(
                    "{} needs a [c, h, w] input with h, w >= 2, got {:?}",
                    self.kind.as_str(),
                    self.input_shape
                ));
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in initialization order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let classes = self.num_classes;
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        match self.kind {
            ModelKind::Mlp => {
                let mut fan = self.input_shape.iter().product::<usize>();
                for (i, &w) in self.widths.iter().enumerate() {
                    linear(&mut out, &format!("fc{}", i + 1), fan, w);
                    fan = w;
                }
                linear(&mut out, "out", fan, classes);
            }
            ModelKind::TinyCnn => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let c1 = self.widths[0];
                out.push(("conv1.weight".into(), vec![c1, c, 3, 3]));
                out.push(("conv1.bias".into(), vec![c1]));
                linear(&mut out, "out", c1 * (h / 2) * (w / 2), classes);
            }
            ModelKind::SmallCnn => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (c1, c2, f) = (self.widths[0], self.widths[1], self.widths[2]);
                out.push(("conv1.weight".into(), vec![c1, c, 3, 3]));
                out.push(("conv1.bias".into(), vec![c1]));
                out.push(("conv2.weight".into(), vec![c2, c1, 3, 3]));
                out.push(("conv2.bias".into(), vec![c2]));
                linear(&mut out, "fc1", c2 * (h / 2) * (w / 2), f);
                linear(&mut out, "out", f, classes);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One named, trainable tensor with an optional accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles for a model's parameters, aligned with [`Model::parameters`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
    mode: Mode,
    input_norm: Option<Normalization>,
}

/// Rows per chunk for gradient-free batch inference.
const PREDICT_CHUNK: usize = 256;

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shapes are consistent")
                };
                Parameter {
                    name,
                    value,
                    grad: None,
                }
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            params,
            mode: Mode::Train,
            input_norm: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Input normalization the model was trained under, if recorded.
    pub fn input_norm(&self) -> Option<Normalization> {
        self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: Option<Normalization>) {
        self.input_norm = norm;
    }

    /// Hash over parameter names and bit patterns; gradients are excluded.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            h.write(&p.value.checksum().to_le_bytes());
        }
        h.finish()
    }

    /// Records every parameter as a leaf of `g`. With `trainable = false`
    /// the leaves are frozen and never receive gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.leaf(p.value.clone(), trainable))
                .collect(),
        )
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() < 2 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {s:?} does not match [batch, {:?}]",
                    self.spec.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Logits `[batch × classes]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_embedding(g, bound, x)?.1)
    }

    /// Returns `(embedding, logits)`, where the embedding is the input of the
    /// final linear layer.
    pub fn forward_with_embedding(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        let v = bound.vars();
        let linear = |g: &mut Graph, h: Var, w: Var, b: Var| -> Result<Var> {
            let y = g.matmul(h, w)?;
            g.add_bias(y, b)
        };
        let n = v.len();
        let embedding = match self.spec.kind {
            ModelKind::Mlp => {
                let mut h = g.flatten(x)?;
                for layer in 0..self.spec.widths.len() {
                    h = linear(g, h, v[2 * layer], v[2 * layer + 1])?;
                    h = g.relu(h);
                }
                h
            }
            ModelKind::TinyCnn => {
                let h = g.conv2d(x, v[0], 1, 1)?;
                let h = g.add_channel_bias(h, v[1])?;
                let h = g.relu(h);
                let h = g.max_pool2d(h, 2)?;
                g.flatten(h)?
            }
            ModelKind::SmallCnn => {
                let h = g.conv2d(x, v[0], 1, 1)?;
                let h = g.add_channel_bias(h, v[1])?;
                let h = g.relu(h);
                let h = g.conv2d(h, v[2], 1, 1)?;
                let h = g.add_channel_bias(h, v[3])?;
                let h = g.relu(h);
                let h = g.max_pool2d(h, 2)?;
                let h = g.flatten(h)?;
                let h = linear(g, h, v[4], v[5])?;
                g.relu(h)
            }
        };
        let logits = linear(g, embedding, v[n - 2], v[n - 1])?;
        Ok((embedding, logits))
    }

    /// Gradient-free logits for a whole batch, computed in fixed-size chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_embedding(x)?.1)
    }

    pub fn predict_with_embedding(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x.shape()[0];
        let mut emb = Vec::new();
        let mut logits = Vec::with_capacity(n * self.spec.num_classes);
        let mut emb_width = 0;
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.constant(x.select_rows(chunk));
            let (e, l) = self.forward_with_embedding(&mut g, &bound, xv)?;
            emb_width = g.shape(e)[1];
            emb.extend_from_slice(g.value(e).data());
            logits.extend_from_slice(g.value(l).data());
        }
        Ok((
            Tensor::new(vec![n, emb_width], emb)?,
            Tensor::new(vec![n, self.spec.num_classes], logits)?,
        ))
    }

    /// Adds the gradients computed on `g` into each parameter's buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(grad) = g.grad(v) {
                match &mut p.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, &b)| *a += b),
                    None => p.grad = Some(grad.clone()),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, checkpoint::encode(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        checkpoint::decode(&bytes)
    }
}

/// Binary checkpoint layout (all integers little-endian):
///
/// ```text
/// magic    8 bytes  "NKDCKPT\0"
/// version  u32
/// hlen     u32, then hlen bytes of JSON {spec, input_norm}
/// count    u32
/// count × { name_len u32, name, rank u32, rank × u64 extent, f64 values }
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"NKDCKPT\0";
    pub const VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Header {
        spec: ModelSpec,
        input_norm: Option<Normalization>,
    }

    pub fn encode(m: &Model) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            spec: m.spec.clone(),
            input_norm: m.input_norm,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
        for p in &m.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.buf.len() < n {
                return Err(Error::Checkpoint(format!(
                    "truncated file while reading {what}: need {n} bytes, {} left",
                    self.buf.len()
                )));
            }
            let (head, rest) = self.buf.split_at(n);
            self.buf = rest;
            Ok(head)
        }

        fn u32(&mut self, what: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
        }

        fn u64(&mut self, what: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { buf: bytes };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "wrong magic bytes {magic:?}, not a model checkpoint"
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let hlen = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let mut model = Model::build(&header.spec, 0)?;
        model.input_norm = header.input_norm;
        let count = r.u32("parameter count")? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "spec expects {} parameters, file has {count}",
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if name != p.name {
                return Err(Error::Checkpoint(format!(
                    "expected parameter `{}`, found `{name}`",
                    p.name
                )));
            }
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {shape:?}, spec expects {:?}",
                    p.value.shape()
                )));
            }
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(r.take(8, "values")?.try_into().unwrap());
            }
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last parameter",
                r.buf.len()
            )));
        }
        model.mode = Mode::Eval;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn digits_input() -> Vec<usize> {
        vec![1, 8, 8]
    }

    fn random_batch(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            widths: vec![128],
            num_classes: 10,
            input_shape: vec![784],
        };
        let a = Model::build(&spec, 7).unwrap();
        let b = Model::build(&spec, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), Model::build(&spec, 8).unwrap().checksum());
        assert_eq!(a.parameter_count(), 784 * 128 + 128 + 128 * 10 + 10);
    }

    #[test]
    fn small_cnn_forward_shape() {
        let spec = ModelSpec::desk(ModelKind::SmallCnn, &[1, 28, 28], 10);
        let m = Model::build(&spec, 1).unwrap();
        let x = random_batch(&[3, 1, 28, 28], 0, 1.0);
        assert_eq!(m.predict(&x).unwrap().shape(), &[3, 10]);
    }

    #[test]
    fn roster_capacity_ordering() {
        let input = digits_input();
        let tiny = ModelSpec::desk(ModelKind::TinyCnn, &input, 10);
        let mlp = ModelSpec::desk(ModelKind::Mlp, &input, 10);
        let small = ModelSpec::desk(ModelKind::SmallCnn, &input, 10);
        // tiny: 4·9+4 + 4·4·4·10+10 = 690
        assert_eq!(tiny.parameter_count(), 690);
        // mlp: 64·128+128 + 128·10+10 = 9610
        assert_eq!(mlp.parameter_count(), 9610);
        // small: 16·9+16 + 32·16·9+32 + 512·64+64 + 64·10+10 = 38282
        assert_eq!(small.parameter_count(), 38282);
        assert!(tiny.parameter_count() < mlp.parameter_count());
        assert!(mlp.parameter_count() < small.parameter_count());
        assert_eq!(
            Model::build(&small, 0).unwrap().parameter_count(),
            small.parameter_count()
        );
    }

    #[test]
    fn unknown_kind_and_bad_specs_are_config_errors() {
        assert!(matches!("resnet".parse::<ModelKind>(), Err(Error::Config(_))));
        let mut spec = ModelSpec::desk(ModelKind::SmallCnn, &digits_input(), 10);
        spec.widths = vec![4, 4];
        assert!(matches!(Model::build(&spec, 0), Err(Error::Config(_))));
        let spec = ModelSpec::desk(ModelKind::Mlp, &digits_input(), 1);
        assert!(Model::build(&spec, 0).is_err());
        let parsed: std::result::Result<ModelSpec, _> = serde_json::from_str(
            r#"{"kind":"vgg","widths":[],"num_classes":2,"input_shape":[2]}"#,
        );
        assert!(parsed.is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let spec = ModelSpec::desk(ModelKind::TinyCnn, &digits_input(), 10);
        let mut m = Model::build(&spec, 3).unwrap();
        for name in ["out.weight", "out.bias"] {
            let p = m.parameter_mut(name).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = m.predict(&random_batch(&[4, 1, 8, 8], 1, 1.0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_are_batch_independent() {
        for kind in [ModelKind::TinyCnn, ModelKind::Mlp, ModelKind::SmallCnn] {
            let m = Model::build(&ModelSpec::desk(kind, &digits_input(), 10), 5).unwrap();
            let x = random_batch(&[32, 1, 8, 8], 2, 1.0);
            let all = m.predict(&x).unwrap();
            let one = m.predict(&x.select_rows(&[17])).unwrap();
            for (a, b) in one.data().iter().zip(all.row(17)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn finite_inputs_give_finite_logits() {
        let m = Model::build(&ModelSpec::desk(ModelKind::SmallCnn, &digits_input(), 10), 9).unwrap();
        let x = random_batch(&[1000, 1, 8, 8], 11, 3.0);
        assert!(m.predict(&x).unwrap().all_finite());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = Model::build(&ModelSpec::desk(ModelKind::Mlp, &digits_input(), 10), 0).unwrap();
        let x = random_batch(&[2, 64], 0, 1.0);
        assert!(matches!(m.predict(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut m = Model::build(&ModelSpec::desk(ModelKind::SmallCnn, &digits_input(), 10), 4).unwrap();
        m.set_input_norm(Some(Normalization { mean: 0.3, std: 0.4 }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.input_norm(), m.input_norm());
        let x = random_batch(&[5, 1, 8, 8], 3, 1.0);
        let a = m.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn checkpoint_errors() {
        let m = Model::build(&ModelSpec::desk(ModelKind::TinyCnn, &digits_input(), 10), 4).unwrap();
        let mut bytes = checkpoint::encode(&m);
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(checkpoint::decode(truncated), Err(Error::Checkpoint(_))));
        bytes[8] = 99;
        let err = checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        bytes[0] = b'X';
        let err = checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }
}
