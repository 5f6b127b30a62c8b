//! Dataset ingestion: IDX files, raw `f32` blobs, the blended ambiguous-digit
//! surrogate and optional input quantization.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::RangeQuantizer;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{INPUT_DIM, NUM_CLASSES};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "QBNN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Mnist,
    Ambiguous,
    Fashion,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Mnist => "mnist",
            DatasetTag::Ambiguous => "ambiguous",
            DatasetTag::Fashion => "fashion",
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images scaled to `[0, 1]`, one flattened 28×28 image per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub tag: DatasetTag,
    pub split: Split,
}

impl DatasetSplit {
    pub fn new(images: Tensor, labels: Vec<usize>, tag: DatasetTag, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.cols() != INPUT_DIM {
            return Err(Error::Validation(format!(
                "images have {} pixels, expected {INPUT_DIM}",
                images.cols()
            )));
        }
        if let Some(v) = images.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {l} outside [0, {NUM_CLASSES})")));
        }
        Ok(DatasetSplit {
            images,
            labels,
            tag,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> DatasetSplit {
        self.range(0, n.min(self.len()))
    }

    /// Examples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> DatasetSplit {
        let end = end.min(self.len());
        let start = start.min(end);
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> DatasetSplit {
        DatasetSplit {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tag: self.tag,
            split: self.split,
        }
    }

    /// Concatenation of `self` and `other`; the tag of `self` is kept.
    pub fn concat(&self, other: &DatasetSplit) -> DatasetSplit {
        let mut data = self.images.values().to_vec();
        data.extend_from_slice(other.images.values());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        DatasetSplit {
            images: Tensor::from_vec(labels.len(), INPUT_DIM, data).expect("widths agree"),
            labels,
            tag: self.tag,
            split: self.split,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header: missing {field}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_idx_images(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic: expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = read_u32(&bytes, 4, path, "image count")? as usize;
    let rows = read_u32(&bytes, 8, path, "row count")? as usize;
    let cols = read_u32(&bytes, 12, path, "column count")? as usize;
    if rows * cols != INPUT_DIM {
        return Err(Error::format(
            path,
            format!("image dimensions {rows}x{cols} do not flatten to {INPUT_DIM}"),
        ));
    }
    let want = n * INPUT_DIM;
    let payload = &bytes[16..];
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("image payload: expected {want} bytes, found {}", payload.len()),
        ));
    }
    Ok((n, payload.to_vec()))
}

fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic: expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = read_u32(&bytes, 4, path, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("label payload: expected {n} bytes, found {}", payload.len()),
        ));
    }
    if let Some(l) = payload.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format(path, format!("label {l} outside [0, {NUM_CLASSES})")));
    }
    Ok(payload.to_vec())
}

/// Loads an IDX image/label file pair, scaling pixels by 1/255.
pub fn load_idx(images: &Path, labels: &Path, tag: DatasetTag, split: Split) -> Result<DatasetSplit> {
    load_idx_prefix(images, labels, tag, split, None)
}

/// Like [`load_idx`], keeping only the first `limit` examples.
pub fn load_idx_prefix(
    images: &Path,
    labels: &Path,
    tag: DatasetTag,
    split: Split,
    limit: Option<usize>,
) -> Result<DatasetSplit> {
    let (n, pixels) = parse_idx_images(images)?;
    let labels_raw = parse_idx_labels(labels)?;
    if labels_raw.len() != n {
        return Err(Error::format(
            labels,
            format!("label count {} does not match image count {n}", labels_raw.len()),
        ));
    }
    let keep = match limit {
        Some(k) if k > n => {
            return Err(Error::format(
                images,
                format!("requested {k} images but the file holds {n}"),
            ));
        }
        Some(k) => k,
        None => n,
    };
    let data = pixels[..keep * INPUT_DIM]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    DatasetSplit::new(
        Tensor::from_vec(keep, INPUT_DIM, data)?,
        labels_raw[..keep].iter().map(|&l| l as usize).collect(),
        tag,
        split,
    )
}

/// Writes an IDX image/label pair from raw 28×28 `u8` images.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    let n = label_bytes.len();
    if pixels.len() != n * INPUT_DIM {
        return Err(Error::Validation(format!(
            "{} pixel bytes for {n} labels",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(images, img).map_err(|e| Error::io(images, e))?;

    let mut lbl = Vec::with_capacity(8 + n);
    for v in [IDX_LABEL_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(label_bytes);
    fs::write(labels, lbl).map_err(|e| Error::io(labels, e))
}

/// Loads `n` images stored as little-endian `f32` values in `[0, 1]`, with
/// labels from an IDX label file. Tagged as ambiguous.
pub fn load_raw_f32(path: &Path, n: usize, labels: &Path) -> Result<DatasetSplit> {
    let bytes = read_file(path)?;
    let want = n * INPUT_DIM * 4;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!("raw payload: expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::format(path, format!("value {v} outside [0, 1]")));
    }
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != n {
        return Err(Error::format(
            labels,
            format!("label count {} does not match image count {n}", label_bytes.len()),
        ));
    }
    DatasetSplit::new(
        Tensor::from_vec(n, INPUT_DIM, data)?,
        label_bytes.iter().map(|&l| l as usize).collect(),
        DatasetTag::Ambiguous,
        Split::Test,
    )
}

/// Writes images as little-endian `f32`, the format read by [`load_raw_f32`].
pub fn write_raw_f32(path: &Path, images: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(images.len() * 4);
    for &v in images.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parameters of the blended-digit surrogate for ambiguous inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousSpec {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub count: usize,
}

impl Default for AmbiguousSpec {
    fn default() -> Self {
        AmbiguousSpec {
            lambda_lo: 0.4,
            lambda_hi: 0.6,
            count: 1000,
        }
    }
}

impl AmbiguousSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda_lo && self.lambda_lo <= self.lambda_hi && self.lambda_hi < 1.0) {
            return Err(Error::Spec(format!(
                "blend range must satisfy 0 < lo <= hi < 1, got [{}, {}]",
                self.lambda_lo, self.lambda_hi
            )));
        }
        Ok(())
    }
}

/// `clamp(λ·a + (1−λ)·b, 0, 1)` pixelwise.
pub fn blend(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (lambda * x + (1.0 - lambda) * y).clamp(0.0, 1.0))
        .collect()
}

/// Blends random pairs of differently-labelled images; each output keeps one
/// of its two source labels, chosen uniformly.
pub fn synth_ambiguous(source: &DatasetSplit, spec: &AmbiguousSpec, rng: &mut Rng) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in source.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Spec("ambiguous blends need at least two classes".into()));
    }

    let mut data = Vec::with_capacity(spec.count * INPUT_DIM);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let a = rng.random_range(0..source.len());
        let la = source.labels[a];
        let others: Vec<usize> = present.iter().copied().filter(|&c| c != la).collect();
        let lb = *others.choose(rng).expect("at least one other class");
        let b = *by_class[lb].choose(rng).expect("class is non-empty");
        let lambda = if spec.lambda_lo == spec.lambda_hi {
            spec.lambda_lo
        } else {
            rng.random_range(spec.lambda_lo..=spec.lambda_hi)
        };
        data.extend(blend(source.images.row(a), source.images.row(b), lambda));
        labels.push(if rng.random_bool(0.5) { la } else { lb });
    }
    DatasetSplit::new(
        Tensor::from_vec(spec.count, INPUT_DIM, data)?,
        labels,
        DatasetTag::Ambiguous,
        source.split,
    )
}

/// Snaps every pixel to the unsigned `2^bits`-level grid on `[0, 1]`.
pub fn quantize_inputs(split: &DatasetSplit, bits: u32) -> Result<DatasetSplit> {
    let q = RangeQuantizer::new(bits, 1.0)?;
    Ok(DatasetSplit {
        images: split.images.map(|v| q.quantize_value(v)),
        ..split.clone()
    })
}

/// Standard file locations under a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn images(&self, tag: DatasetTag, split: Split) -> PathBuf {
        self.root
            .join(Self::dir(tag))
            .join(format!("{}-images-idx3-ubyte", Self::prefix(split)))
    }

    pub fn labels(&self, tag: DatasetTag, split: Split) -> PathBuf {
        self.root
            .join(Self::dir(tag))
            .join(format!("{}-labels-idx1-ubyte", Self::prefix(split)))
    }

    fn dir(tag: DatasetTag) -> &'static str {
        match tag {
            DatasetTag::Fashion => "fashion",
            _ => "mnist",
        }
    }

    fn prefix(split: Split) -> &'static str {
        match split {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn load(&self, tag: DatasetTag, split: Split, limit: Option<usize>) -> Result<DatasetSplit> {
        load_idx_prefix(&self.images(tag, split), &self.labels(tag, split), tag, split, limit)
    }

    /// Every file this layout needs for MNIST and Fashion-MNIST.
    pub fn required_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for tag in [DatasetTag::Mnist, DatasetTag::Fashion] {
            for split in [Split::Train, Split::Test] {
                out.push(self.images(tag, split));
                out.push(self.labels(tag, split));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixture(dir: &Path, n: usize) -> (PathBuf, PathBuf, Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..n * INPUT_DIM).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i * 3 % 10) as u8).collect();
        let img = dir.join("img");
        let lbl = dir.join("lbl");
        write_idx(&img, &lbl, &pixels, &labels).unwrap();
        (img, lbl, pixels, labels)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl, pixels, labels) = fixture(dir.path(), 4);
        let s = load_idx(&img, &lbl, DatasetTag::Mnist, Split::Test).unwrap();
        assert_eq!(s.images.shape(), (4, 784));
        assert_eq!(s.labels.len(), 4);
        for (v, &p) in s.images.values().iter().zip(&pixels) {
            assert_eq!((v * 255.0).round() as u8, p);
        }
        assert_eq!(s.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());

        let head = load_idx_prefix(&img, &lbl, DatasetTag::Mnist, Split::Test, Some(2)).unwrap();
        assert_eq!(head, s.take(2));
        assert!(load_idx_prefix(&img, &lbl, DatasetTag::Mnist, Split::Test, Some(5)).is_err());
    }

    #[test]
    fn label_byte_seven() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lbl = dir.path().join("l");
        write_idx(&img, &lbl, &[0u8; INPUT_DIM], &[7]).unwrap();
        assert_eq!(
            load_idx(&img, &lbl, DatasetTag::Mnist, Split::Train).unwrap().labels,
            vec![7]
        );
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl, _, _) = fixture(dir.path(), 4);
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..16 + 3000]).unwrap();
        let err = load_idx(&img, &lbl, DatasetTag::Mnist, Split::Test).unwrap_err();
        assert!(err.to_string().contains("expected 3136 bytes, found 3000"), "{err}");
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl, _, _) = fixture(dir.path(), 4);
        // swapping the files trips the magic check
        let err = load_idx(&lbl, &img, DatasetTag::Mnist, Split::Test).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let lbl3 = dir.path().join("lbl3");
        let img3 = dir.path().join("img3");
        write_idx(&img3, &lbl3, &[0u8; 3 * INPUT_DIM], &[1, 2, 3]).unwrap();
        let err = load_idx(&img, &lbl3, DatasetTag::Mnist, Split::Test).unwrap_err();
        assert!(
            err.to_string().contains("label count 3 does not match image count 4"),
            "{err}"
        );
    }

    #[test]
    fn raw_f32_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        let lbl = dir.path().join("lbl");
        let img = dir.path().join("img");
        write_idx(&img, &lbl, &[0u8; 2 * INPUT_DIM], &[3, 4]).unwrap();
        let halves = Tensor::full(2, INPUT_DIM, 0.5);
        write_raw_f32(&raw, &halves).unwrap();
        let s = load_raw_f32(&raw, 2, &lbl).unwrap();
        assert_eq!(s.images, halves);
        assert_eq!(s.tag, DatasetTag::Ambiguous);

        let mut bytes = fs::read(&raw).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&raw, bytes).unwrap();
        assert!(load_raw_f32(&raw, 2, &lbl).is_err());
    }

    fn toy_source() -> DatasetSplit {
        let mut rng = Rng::seed_from_u64(0);
        let data = (0..20 * INPUT_DIM).map(|_| rng.random::<f64>()).collect();
        let labels = (0..20).map(|i| i % 4).collect();
        DatasetSplit::new(
            Tensor::from_vec(20, INPUT_DIM, data).unwrap(),
            labels,
            DatasetTag::Mnist,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn blend_identities() {
        let x: Vec<f64> = (0..INPUT_DIM).map(|i| (i % 255) as f64 / 255.0).collect();
        assert_eq!(blend(&x, &x, 0.5), x);
        let zeros = vec![0.0; INPUT_DIM];
        assert_eq!(blend(&zeros, &zeros, 0.45), zeros);
    }

    #[test]
    fn ambiguous_blends_are_deterministic_and_bounded() {
        let src = toy_source();
        let spec = AmbiguousSpec {
            count: 50,
            ..AmbiguousSpec::default()
        };
        let a = synth_ambiguous(&src, &spec, &mut Rng::seed_from_u64(5)).unwrap();
        let b = synth_ambiguous(&src, &spec, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.images.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn all_zero_sources_blend_to_zero() {
        let src = DatasetSplit::new(
            Tensor::zeros(4, INPUT_DIM),
            vec![0, 1, 2, 3],
            DatasetTag::Mnist,
            Split::Test,
        )
        .unwrap();
        let out = synth_ambiguous(&src, &AmbiguousSpec::default(), &mut Rng::seed_from_u64(1)).unwrap();
        assert!(out.images.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_source_is_rejected() {
        let src = DatasetSplit::new(
            Tensor::zeros(3, INPUT_DIM),
            vec![2, 2, 2],
            DatasetTag::Mnist,
            Split::Test,
        )
        .unwrap();
        assert!(synth_ambiguous(&src, &AmbiguousSpec::default(), &mut Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn input_quantization() {
        let src = toy_source();
        let q1 = quantize_inputs(&src, 1).unwrap();
        assert!(q1.images.values().iter().all(|&v| v == 0.0 || v == 1.0));
        let half = DatasetSplit::new(Tensor::full(1, INPUT_DIM, 0.5), vec![0], DatasetTag::Mnist, Split::Test).unwrap();
        assert_eq!(quantize_inputs(&half, 8).unwrap().images.get(0, 0), 128.0 / 255.0);
        let q8 = quantize_inputs(&src, 8).unwrap();
        assert_eq!(quantize_inputs(&q8, 8).unwrap(), q8);
    }

    #[test]
    fn dataset_split_validates() {
        assert!(DatasetSplit::new(Tensor::full(1, INPUT_DIM, 1.5), vec![0], DatasetTag::Mnist, Split::Test).is_err());
        assert!(DatasetSplit::new(Tensor::zeros(1, INPUT_DIM), vec![10], DatasetTag::Mnist, Split::Test).is_err());
        assert!(DatasetSplit::new(Tensor::zeros(2, INPUT_DIM), vec![0], DatasetTag::Mnist, Split::Test).is_err());
    }
}
