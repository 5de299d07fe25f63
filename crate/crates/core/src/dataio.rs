//! Datasets: IDX (MNIST) ingestion, leave-one-label-out splits and a
//! seeded Gaussian-blob generator for fast end-to-end runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix (one sample per row, entries in `[0, 1]`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::BadParameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadParameter("features must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, relabelled through `relabel`.
    fn select(&self, indices: &[usize], relabel: impl Fn(usize) -> usize, num_classes: usize) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| relabel(self.labels[i])).collect(),
            num_classes,
        }
    }

    /// Loads an image/label IDX pair. The class count is `max(label) + 1`.
    pub fn from_idx_files(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let images = images.as_ref();
        let labels = labels.as_ref();
        let file = File::open(images).map_err(|e| Error::io(images, e))?;
        let features = load_idx_images(BufReader::new(file))?;
        let file = File::open(labels).map_err(|e| Error::io(labels, e))?;
        let labels = load_idx_labels(BufReader::new(file))?;
        let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
        Self::new(features, labels, num_classes)
    }
}

fn read_u32_be<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(format!("missing {what}")),
        _ => Error::RawIo(e),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::TruncatedFile(format!(
            "expected {len} payload bytes, found {}",
            buf.len()
        )));
    }
    Ok(buf)
}

/// Reads an IDX image file (magic `0x00000803`) into an `n x (rows*cols)`
/// matrix scaled to `[0, 1]`.
pub fn load_idx_images<R: Read>(mut source: R) -> Result<Matrix> {
    let magic = read_u32_be(&mut source, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(&mut source, "image count")? as usize;
    let rows = read_u32_be(&mut source, "row count")? as usize;
    let cols = read_u32_be(&mut source, "column count")? as usize;
    let dim = rows * cols;
    let len = n
        .checked_mul(dim)
        .ok_or_else(|| Error::BadFormat("IDX header counts overflow".into()))?;
    let bytes = read_payload(&mut source, len)?;
    let data = bytes.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((n, dim), data).expect("payload length checked"))
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels<R: Read>(mut source: R) -> Result<Vec<usize>> {
    let magic = read_u32_be(&mut source, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(&mut source, "label count")? as usize;
    let bytes = read_payload(&mut source, n)?;
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Writes features as an IDX image file, quantizing to the nearest `1/255`.
pub fn write_idx_images<W: Write>(features: &Matrix, rows: usize, cols: usize, mut sink: W) -> Result<()> {
    if rows * cols != features.ncols() {
        return Err(Error::DimensionMismatch {
            expected: features.ncols(),
            actual: rows * cols,
        });
    }
    let count = u32::try_from(features.nrows())
        .map_err(|_| Error::BadParameter("too many images for IDX".into()))?;
    sink.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    sink.write_all(&count.to_be_bytes())?;
    sink.write_all(&(rows as u32).to_be_bytes())?;
    sink.write_all(&(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = features
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    sink.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(labels: &[usize], mut sink: W) -> Result<()> {
    let count = u32::try_from(labels.len())
        .map_err(|_| Error::BadParameter("too many labels for IDX".into()))?;
    sink.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    sink.write_all(&count.to_be_bytes())?;
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::BadParameter(format!("label {l} exceeds 255"))))
        .collect::<Result<Vec<u8>>>()?;
    sink.write_all(&bytes)?;
    Ok(())
}

/// Writes a dataset as an image/label IDX pair. Image geometry is a single
/// row of `dim` pixels unless the dimension is a perfect square.
pub fn write_idx_dataset(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let d = data.dim();
    let side = (d as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == d { (side, side) } else { (1, d) };
    let f = File::create(images).map_err(|e| Error::io(images, e))?;
    let mut w = BufWriter::new(f);
    write_idx_images(data.features(), rows, cols, &mut w)?;
    w.flush().map_err(|e| Error::io(images, e))?;
    let f = File::create(labels).map_err(|e| Error::io(labels, e))?;
    let mut w = BufWriter::new(f);
    write_idx_labels(data.labels(), &mut w)?;
    w.flush().map_err(|e| Error::io(labels, e))?;
    Ok(())
}

/// Leave-one-label-out split.
#[derive(Debug, Clone)]
pub struct OodSplit {
    /// Training data without the held-out label, labels remapped to `0..K-1`.
    pub train: Dataset,
    /// Test data without the held-out label, same label space as `train`.
    pub test_in: Dataset,
    /// Test samples of the held-out label only, original labels.
    pub test_ood: Dataset,
    pub held_out_label: usize,
    /// Original label -> remapped label, for the `K - 1` remaining labels.
    pub label_map: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub held_out_label: usize,
    pub train: usize,
    pub test_in: usize,
    pub test_ood: usize,
}

impl OodSplit {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            held_out_label: self.held_out_label,
            train: self.train.len(),
            test_in: self.test_in.len(),
            test_ood: self.test_ood.len(),
        }
    }

    /// Inverse of `label_map`.
    pub fn original_label(&self, remapped: usize) -> Option<usize> {
        self.label_map
            .iter()
            .find_map(|(&orig, &new)| (new == remapped).then_some(orig))
    }
}

/// Removes `held_out_label` from training and builds in-distribution and
/// out-of-distribution test sets.
pub fn make_ood_split(train: &Dataset, test: &Dataset, held_out_label: usize) -> Result<OodSplit> {
    if train.num_classes() != test.num_classes() {
        return Err(Error::BadParameter(format!(
            "train has {} classes but test has {}",
            train.num_classes(),
            test.num_classes()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    let k = train.num_classes();
    let present = |d: &Dataset| d.labels().contains(&held_out_label);
    if held_out_label >= k || !(present(train) || present(test)) {
        return Err(Error::LabelAbsent(held_out_label));
    }
    if k < 3 {
        return Err(Error::BadParameter(
            "holding out a label needs at least 3 classes".into(),
        ));
    }
    let label_map: BTreeMap<usize, usize> = (0..k)
        .filter(|&l| l != held_out_label)
        .enumerate()
        .map(|(new, orig)| (orig, new))
        .collect();
    let remap = |l: usize| label_map[&l];

    let idx = |d: &Dataset, keep: bool| -> Vec<usize> {
        (0..d.len())
            .filter(|&i| (d.labels()[i] == held_out_label) != keep)
            .collect()
    };
    let train_in = train.select(&idx(train, true), remap, k - 1);
    let test_in = test.select(&idx(test, true), remap, k - 1);
    let test_ood = test.select(&idx(test, false), |l| l, k);
    Ok(OodSplit {
        train: train_in,
        test_in,
        test_ood,
        held_out_label,
        label_map,
    })
}

/// Isotropic unit-variance Gaussian clusters on a lattice of spacing
/// `separation`, min-max rescaled per feature into `[0, 1]`.
///
/// Samples are ordered class-major (`per_class` rows of class 0, then class 1, ...).
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::BadParameter("num_classes must be at least 2".into()));
    }
    if dim == 0 {
        return Err(Error::BadParameter("dim must be at least 1".into()));
    }
    if per_class == 0 {
        return Err(Error::BadParameter("per_class must be at least 1".into()));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::BadParameter("separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct lattice points differ by at least one unit in some coordinate.
    let side = (1..)
        .find(|&m: &usize| m.checked_pow(dim.min(64) as u32).map_or(true, |c| c >= num_classes))
        .expect("some side length covers every class");
    let mut slots: Vec<usize> = (0..num_classes).collect();
    slots.shuffle(&mut rng);
    let centers: Vec<Vec<f64>> = slots
        .iter()
        .map(|&slot| {
            let mut rem = slot;
            (0..dim)
                .map(|_| {
                    let digit = rem % side;
                    rem /= side;
                    digit as f64 * separation
                })
                .collect()
        })
        .collect();

    let n = num_classes * per_class;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let mut row = features.row_mut(class * per_class + i);
            for (v, c) in row.iter_mut().zip(center) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = c + z;
            }
            labels.push(class);
        }
    }
    for mut col in features.axis_iter_mut(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        col.mapv_inplace(|v| if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 });
    }
    Dataset::new(features, labels, num_classes)
}

/// Blob train/test pair drawn from one generator run, so both share cluster
/// centers and scaling. The first `train_per_class` samples of every class go
/// to the training set.
pub fn synth_blobs_split(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if train_per_class == 0 || test_per_class == 0 {
        return Err(Error::BadParameter(
            "train and test sample counts must be at least 1".into(),
        ));
    }
    let per_class = train_per_class + test_per_class;
    let all = synth_blobs(num_classes, dim, per_class, separation, seed)?;
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for class in 0..num_classes {
        let base = class * per_class;
        tr.extend(base..base + train_per_class);
        te.extend(base + train_per_class..base + per_class);
    }
    Ok((
        all.select(&tr, |l| l, num_classes),
        all.select(&te, |l| l, num_classes),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn idx_image_bytes(magic: u32, n: u32, r: u32, c: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn images_crafted_stream() {
        let bytes = idx_image_bytes(0x803, 1, 2, 2, &[0, 255, 0, 255]);
        let m = load_idx_images(&bytes[..]).unwrap();
        assert_eq!(m, array![[0.0, 1.0, 0.0, 1.0]]);
    }

    #[test]
    fn images_bad_magic_and_truncation() {
        let bytes = idx_image_bytes(0x801, 1, 2, 2, &[0, 255, 0, 255]);
        assert!(matches!(
            load_idx_images(&bytes[..]),
            Err(Error::BadMagic { found: 0x801, .. })
        ));
        let bytes = idx_image_bytes(0x803, 2, 2, 2, &[0, 255, 0, 255]);
        assert!(matches!(load_idx_images(&bytes[..]), Err(Error::TruncatedFile(_))));
        assert!(matches!(load_idx_images(&[0u8, 0, 8][..]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn images_empty_stream_is_legal() {
        let bytes = idx_image_bytes(0x803, 0, 28, 28, &[]);
        let m = load_idx_images(&bytes[..]).unwrap();
        assert_eq!(m.dim(), (0, 784));
    }

    #[test]
    fn labels_crafted_stream() {
        let mut b = Vec::new();
        b.extend_from_slice(&0x801u32.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 3]);
        assert_eq!(load_idx_labels(&b[..]).unwrap(), vec![7, 0, 3]);
        assert!(matches!(
            load_idx_labels(&b[..b.len() - 1]),
            Err(Error::TruncatedFile(_))
        ));
        let mut empty = Vec::new();
        empty.extend_from_slice(&0x801u32.to_be_bytes());
        empty.extend_from_slice(&0u32.to_be_bytes());
        assert!(load_idx_labels(&empty[..]).unwrap().is_empty());
        let mut wrong = b.clone();
        wrong[3] = 0x03;
        assert!(matches!(load_idx_labels(&wrong[..]), Err(Error::BadMagic { .. })));
    }

    fn toy(labels: &[usize], k: usize) -> Dataset {
        let f = Array2::from_shape_fn((labels.len(), 2), |(i, j)| ((i + j) % 3) as f64 / 2.0);
        Dataset::new(f, labels.to_vec(), k).unwrap()
    }

    #[test]
    fn split_remaps_contiguously() {
        let train = toy(&[0, 1, 2, 1, 0, 2], 3);
        let test = toy(&[2, 1, 0, 1], 3);
        let s = make_ood_split(&train, &test, 1).unwrap();
        assert_eq!(s.label_map, BTreeMap::from([(0, 0), (2, 1)]));
        assert_eq!(s.train.labels(), &[0, 1, 0, 1]);
        assert_eq!(s.train.num_classes(), 2);
        assert_eq!(s.test_in.labels(), &[1, 0]);
        assert_eq!(s.test_ood.labels(), &[1, 1]);
        assert_eq!(s.original_label(1), Some(2));
        assert_eq!(s.train.features().row(1), train.features().row(2));
    }

    #[test]
    fn split_rejects_absent_label() {
        let train = toy(&[0, 1, 2], 3);
        assert!(matches!(
            make_ood_split(&train, &train, 11),
            Err(Error::LabelAbsent(11))
        ));
        let train = toy(&[0, 1, 0], 3);
        assert!(matches!(
            make_ood_split(&train, &train, 2),
            Err(Error::LabelAbsent(2))
        ));
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = synth_blobs(3, 4, 20, 10.0, 7).unwrap();
        let b = synth_blobs(3, 4, 20, 10.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.features().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        let c = synth_blobs(3, 4, 20, 10.0, 8).unwrap();
        assert_ne!(a, c);
        assert!(matches!(synth_blobs(3, 4, 0, 10.0, 7), Err(Error::BadParameter(_))));
        assert!(matches!(synth_blobs(1, 4, 5, 10.0, 7), Err(Error::BadParameter(_))));
    }

    #[test]
    fn blob_centers_respect_separation_before_scaling() {
        // More classes than a 1-D lattice of side 2 can hold forces side 4 in 1-D.
        let d = synth_blobs(4, 1, 400, 50.0, 1).unwrap();
        let means: Vec<f64> = (0..4)
            .map(|k| d.features().slice(ndarray::s![k * 400..(k + 1) * 400, 0]).mean().unwrap())
            .collect();
        let mut sorted = means.clone();
        sorted.sort_by(f64::total_cmp);
        // After rescaling to [0,1] the four centers are roughly equally spaced.
        for w in sorted.windows(2) {
            assert!(w[1] - w[0] > 0.25);
        }
    }

    #[test]
    fn blob_split_shares_generator() {
        let (tr, te) = synth_blobs_split(3, 2, 5, 2, 8.0, 3).unwrap();
        assert_eq!(tr.len(), 15);
        assert_eq!(te.len(), 6);
        let all = synth_blobs(3, 2, 7, 8.0, 3).unwrap();
        assert_eq!(tr.features().row(5), all.features().row(7));
        assert_eq!(te.features().row(0), all.features().row(5));
    }
}
