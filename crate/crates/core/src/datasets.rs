//! Labeled datasets: IDX parsing, Gaussian blobs, normalization and
//! stratified subsampling, plus a small binary format for synthetic sets.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, IdxError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const DATASET_MAGIC: &[u8; 8] = b"NKDDATA\0";
const TENSOR_MAGIC: &[u8; 8] = b"NKDTENS\0";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Scalar affine input normalization `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    norm: Normalization,
}

impl Dataset {
    /// `inputs` is `[n × ...]`; labels must lie in `[0, num_classes)`.
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        norm: Normalization,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} at index {i} outside [0, {num_classes})"
            )));
        }
        if !(norm.std > 0.0 && norm.std.is_finite() && norm.mean.is_finite()) {
            return Err(Error::Data(format!("invalid normalization {norm:?}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn norm(&self) -> Normalization {
        self.norm
    }

    /// Per-sample extents, e.g. `[1, 8, 8]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            norm: self.norm,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Applies `norm` to raw inputs (those currently carrying the identity
    /// normalization) and records it.
    pub fn normalized(&self, norm: Normalization) -> Result<Dataset> {
        if self.norm != Normalization::IDENTITY {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        Dataset::new(
            self.inputs.map(|v| norm.apply(v)),
            self.labels.clone(),
            self.num_classes,
            self.split,
            norm,
        )
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::autodiff::Fnv::new();
        h.write(&self.inputs.checksum().to_le_bytes());
        for &l in &self.labels {
            h.write(&(l as u64).to_le_bytes());
        }
        h.write(&self.norm.mean.to_bits().to_le_bytes());
        h.write(&self.norm.std.to_bits().to_le_bytes());
        h.finish()
    }

    /// Writes the dataset in the internal tensor-file format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&self.norm.mean.to_le_bytes());
        buf.extend_from_slice(&self.norm.std.to_le_bytes());
        let split_code: u32 = match self.split {
            Split::Train => 0,
            Split::Test => 1,
            Split::Synthetic => 2,
        };
        buf.extend_from_slice(&split_code.to_le_bytes());
        write_tensor(&mut buf, &self.inputs);
        let labels = Tensor::new(
            vec![self.labels.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        write_tensor(&mut buf, &labels);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != DATASET_MAGIC {
            return Err(bad("not a dataset file (bad magic)"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let num_classes = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let mean = read_f64(&mut r).ok_or_else(|| bad("truncated header"))?;
        let std = read_f64(&mut r).ok_or_else(|| bad("truncated header"))?;
        let split = match read_u32(&mut r).ok_or_else(|| bad("truncated header"))? {
            0 => Split::Train,
            1 => Split::Test,
            2 => Split::Synthetic,
            other => return Err(bad(&format!("unknown split code {other}"))),
        };
        let inputs = read_tensor(&mut r).map_err(|m| bad(&m))?;
        let labels = read_tensor(&mut r).map_err(|m| bad(&m))?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let labels = labels.data().iter().map(|&v| v as usize).collect();
        Dataset::new(inputs, labels, num_classes, split, Normalization { mean, std })
    }
}

/// Writes one tensor record: magic, version, rank, extents, then the
/// little-endian `f64` payload.
pub fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_tensor(r: &mut &[u8]) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| "truncated tensor header")?;
    if &magic != TENSOR_MAGIC {
        return Err("bad tensor magic".into());
    }
    let version = read_u32(r).ok_or("truncated tensor header")?;
    if version != DATASET_VERSION {
        return Err(format!("unsupported tensor version {version}"));
    }
    let rank = read_u32(r).ok_or("truncated tensor header")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| "truncated tensor shape")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() < n * 8 {
        return Err(format!("truncated tensor payload: need {} bytes, have {}", n * 8, r.len()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(r).expect("length checked"));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Option<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(f64::from_le_bytes(b))
}

/// A parsed IDX file: big-endian magic, big-endian `u32` extents, raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxArray {
    /// Parses an unsigned-byte IDX file whose magic must equal `expected`.
    pub fn parse(bytes: &[u8], expected: u32) -> Result<Self, IdxError> {
        let header_err = |actual: usize| IdxError::Truncated { expected: 4, actual };
        if bytes.len() < 4 {
            return Err(header_err(bytes.len()));
        }
        let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        if magic != expected {
            return Err(IdxError::BadMagic {
                expected,
                actual: magic,
            });
        }
        let rank = (magic & 0xff) as usize;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(IdxError::Truncated {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<u32> = (0..rank)
            .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        let body: usize = dims.iter().map(|&d| d as usize).product();
        if bytes.len() != header + body {
            return Err(IdxError::Truncated {
                expected: header + body,
                actual: bytes.len(),
            });
        }
        Ok(IdxArray {
            magic,
            dims,
            payload: bytes[header..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Builds a dataset from IDX image and label bytes. Pixels are scaled by
/// 1/255 into `[0, 1]`; the class count is the largest label plus one
/// (at least 2).
pub fn dataset_from_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset> {
    let img = IdxArray::parse(images, IDX_IMAGES_MAGIC).map_err(|kind| Error::Idx {
        path: images_path.to_path_buf(),
        kind,
    })?;
    let lab = IdxArray::parse(labels, IDX_LABELS_MAGIC).map_err(|kind| Error::Idx {
        path: labels_path.to_path_buf(),
        kind,
    })?;
    let n = img.dims[0] as usize;
    if n != lab.dims[0] as usize {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            kind: IdxError::CountMismatch {
                images: n,
                labels: lab.dims[0] as usize,
            },
        });
    }
    if n == 0 {
        return Err(Error::Data("IDX file holds no samples".into()));
    }
    let (h, w) = (img.dims[1] as usize, img.dims[2] as usize);
    let data = img.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, h, w], data)?;
    let labels: Vec<usize> = lab.payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, num_classes, split, Normalization::IDENTITY)
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    dataset_from_idx(&images, &labels, images_path, labels_path, split)
}

/// Writes images (pixel values assumed in `[0,1]`) and labels as IDX files.
pub fn save_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = d.sample_shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!("IDX needs single-channel images, got {s:?}")));
    }
    let img = IdxArray {
        magic: IDX_IMAGES_MAGIC,
        dims: vec![d.len() as u32, s[1] as u32, s[2] as u32],
        payload: d
            .inputs()
            .data()
            .iter()
            .map(|&v| (d.norm().invert(v) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect(),
    };
    let lab = IdxArray {
        magic: IDX_LABELS_MAGIC,
        dims: vec![d.len() as u32],
        payload: d.labels().iter().map(|&l| l as u8).collect(),
    };
    let mut f = fs::File::create(images_path).map_err(|e| Error::io(images_path, e))?;
    f.write_all(&img.to_bytes()).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab.to_bytes()).map_err(|e| Error::io(labels_path, e))
}

const DIGITS_TRAIN_IMAGES: &[u8] = include_bytes!("../data/digits/train-images-idx3-ubyte");
const DIGITS_TRAIN_LABELS: &[u8] = include_bytes!("../data/digits/train-labels-idx1-ubyte");
const DIGITS_TEST_IMAGES: &[u8] = include_bytes!("../data/digits/test-images-idx3-ubyte");
const DIGITS_TEST_LABELS: &[u8] = include_bytes!("../data/digits/test-labels-idx1-ubyte");

/// The bundled 10-class 8×8 handwritten-digit corpus (1438 train / 359 test),
/// raw pixels in `[0, 1]`.
pub fn digits_raw() -> Result<(Dataset, Dataset)> {
    let p = Path::new("<bundled digits>");
    let train = dataset_from_idx(DIGITS_TRAIN_IMAGES, DIGITS_TRAIN_LABELS, p, p, Split::Train)?;
    let test = dataset_from_idx(DIGITS_TEST_IMAGES, DIGITS_TEST_LABELS, p, p, Split::Test)?;
    Ok((train, test))
}

/// Mean and standard deviation over every input value of `d`.
pub fn fit_normalization(d: &Dataset) -> Normalization {
    let v = d.inputs().data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Normalization { mean, std }
}

/// Normalizes both splits with statistics fitted on the train split.
pub fn normalize_pair(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset)> {
    let norm = fit_normalization(train);
    Ok((train.normalized(norm)?, test.normalized(norm)?))
}

/// Isotropic unit-variance Gaussian clusters around seeded centers.
///
/// When `dim >= classes`, centers sit on scaled orthonormal directions so
/// every pair is exactly `separation` apart; otherwise they are drawn at
/// random and rescaled so the closest pair is `separation` apart.
#[derive(Clone, Debug)]
pub struct BlobGenerator {
    centers: Vec<Vec<f64>>,
    seed: u64,
}

impl BlobGenerator {
    pub fn new(classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if !(separation > 0.0) {
            return Err(Error::Param(format!("separation must be > 0, got {separation}")));
        }
        if classes < 2 || dim == 0 {
            return Err(Error::Param(format!(
                "blobs need >= 2 classes and dim >= 1 (got {classes}, {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        if dim >= classes {
            // Gram-Schmidt
            for i in 0..classes {
                for j in 0..i {
                    let dot: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| a * b).sum();
                    let prev = raw[j].clone();
                    for (a, b) in raw[i].iter_mut().zip(prev) {
                        *a -= dot * b;
                    }
                }
                let norm = raw[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                raw[i].iter_mut().for_each(|a| *a /= norm);
            }
            let scale = separation / std::f64::consts::SQRT_2;
            raw.iter_mut().flatten().for_each(|a| *a *= scale);
        } else {
            let mut min_d = f64::INFINITY;
            for i in 0..classes {
                for j in 0..i {
                    let d: f64 = raw[i]
                        .iter()
                        .zip(&raw[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    min_d = min_d.min(d);
                }
            }
            let scale = separation / min_d;
            raw.iter_mut().flatten().for_each(|a| *a *= scale);
        }
        Ok(BlobGenerator { centers: raw, seed })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Draws `per_class` points per class from an independent stream.
    /// Rows are interleaved by class (0, 1, …, k−1, 0, 1, …).
    pub fn sample(&self, per_class: usize, stream: u64, split: Split) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::Data("per-class count must be positive".into()));
        }
        let classes = self.centers.len();
        let dim = self.centers[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut data = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for (c, center) in self.centers.iter().enumerate() {
                for &m in center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + z);
                }
                labels.push(c);
            }
        }
        let inputs = Tensor::new(vec![labels.len(), dim], data)?;
        Dataset::new(inputs, labels, classes, split, Normalization::IDENTITY)
    }
}

/// Seeded Gaussian blobs; see [`BlobGenerator`].
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobGenerator::new(classes, dim, separation, seed)?.sample(per_class, 0, Split::Train)
}

/// Stratified, seed-stable subsample keeping `round(fraction · n_c)` rows of
/// every class. For a fixed seed, smaller fractions select subsets of larger
/// ones. Row order of the source is preserved.
pub fn subsample(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Param(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(d.clone());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes()];
    for (i, &l) in d.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves class {c} ({} samples) empty",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(d.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn idx_images(n: u32, h: u32, w: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..(n * h * w) as usize).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_constructed_fixture() {
        let img = idx_images(2, 28, 28, |i| (i % 256) as u8);
        assert_eq!(img.len(), 16 + 1568);
        let lab = idx_labels(&[3, 1]);
        let p = Path::new("fixture");
        let d = dataset_from_idx(&img, &lab, p, p, Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[1, 28, 28]);
        assert_eq!(d.labels(), &[3, 1]);
        assert_eq!(d.inputs().data()[255], 1.0);
        assert_eq!(d.inputs().data()[0], 0.0);
    }

    #[test]
    fn wrong_magic_names_expected_and_actual() {
        let mut img = idx_images(1, 2, 2, |_| 0);
        img[3] = 0x02;
        let err = IdxArray::parse(&img, IDX_IMAGES_MAGIC).unwrap_err();
        assert_eq!(
            err,
            IdxError::BadMagic {
                expected: 0x803,
                actual: 0x802
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000802"), "{msg}");
    }

    #[test]
    fn truncation_and_count_mismatch_are_distinct() {
        let img = idx_images(2, 2, 2, |_| 7);
        let short = &img[..img.len() - 1];
        assert!(matches!(
            IdxArray::parse(short, IDX_IMAGES_MAGIC),
            Err(IdxError::Truncated { .. })
        ));
        let p = Path::new("x");
        let err = dataset_from_idx(&img, &idx_labels(&[0, 1, 1]), p, p, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::Idx {
                kind: IdxError::CountMismatch { images: 2, labels: 3 },
                ..
            }
        ));
    }

    #[test]
    fn bundled_digits_reserialize_bit_exact() {
        for (bytes, magic) in [
            (DIGITS_TRAIN_IMAGES, IDX_IMAGES_MAGIC),
            (DIGITS_TRAIN_LABELS, IDX_LABELS_MAGIC),
            (DIGITS_TEST_IMAGES, IDX_IMAGES_MAGIC),
            (DIGITS_TEST_LABELS, IDX_LABELS_MAGIC),
        ] {
            let parsed = IdxArray::parse(bytes, magic).unwrap();
            assert_eq!(parsed.to_bytes(), bytes);
        }
        let (train, test) = digits_raw().unwrap();
        assert_eq!((train.len(), test.len()), (1438, 359));
        assert_eq!(train.num_classes(), 10);
    }

    #[test]
    fn blobs_are_deterministic_with_exact_counts() {
        let a = synth_blobs(4, 25, 6, 10.0, 3).unwrap();
        let b = synth_blobs(4, 25, 6, 10.0, 3).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.class_counts(), vec![25; 4]);
        let c = synth_blobs(4, 25, 6, 10.0, 4).unwrap();
        assert_ne!(a.checksum(), c.checksum());

        let gen = BlobGenerator::new(3, 5, 7.5, 1).unwrap();
        let cs = gen.centers();
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 7.5).abs() < 1e-9);
            }
        }
        assert!(synth_blobs(2, 5, 2, 0.0, 1).is_err());
    }

    #[test]
    fn subsample_stratified_and_nested() {
        let d = synth_blobs(3, 100, 2, 5.0, 9).unwrap();
        assert_eq!(subsample(&d, 1.0, 1).unwrap(), d);
        let half = subsample(&d, 0.5, 1).unwrap();
        for c in half.class_counts() {
            assert!((49..=51).contains(&c));
        }
        let small: HashSet<u64> = subsample(&d, 0.2, 5)
            .unwrap()
            .inputs()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let large: HashSet<u64> = subsample(&d, 0.4, 5)
            .unwrap()
            .inputs()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert!(small.is_subset(&large));
        assert!(matches!(subsample(&d, 0.001, 1), Err(Error::Data(_))));
        assert!(matches!(subsample(&d, 0.0, 1), Err(Error::Param(_))));
    }

    #[test]
    fn dataset_file_round_trip() {
        let d = synth_blobs(2, 3, 4, 3.0, 0).unwrap();
        let n = fit_normalization(&d);
        let d = d.normalized(n).unwrap().with_split(Split::Synthetic);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.nkd");
        d.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), d);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(Dataset::load(&p).is_err());
    }

    #[test]
    fn normalization_fitted_on_train_applied_to_both() {
        let (train, test) = digits_raw().unwrap();
        let (ntrain, ntest) = normalize_pair(&train, &test).unwrap();
        assert_eq!(ntrain.norm(), ntest.norm());
        let v = ntrain.inputs().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-9);
    }
}
