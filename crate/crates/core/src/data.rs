//! Datasets, synthetic generators, splitting/corruption helpers and loaders.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::numkit::{Matrix, RngStream};

/// Features, labels and stable ids for `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        ids: Vec<u64>,
        num_classes: usize,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            labels,
            ids,
            num_classes,
            image_shape,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Ids `0..n` in row order.
    pub fn with_sequential_ids(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Dataset::new(features, labels, ids, num_classes, image_shape)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.len() != n || self.ids.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows, {} labels, {} ids",
                n,
                self.labels.len(),
                self.ids.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(Error::InvalidDataset(format!(
                "label {y} at row {i} outside [0, {})",
                self.num_classes
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::InvalidDataset(format!("duplicate sample id {id}")));
            }
        }
        if let Some((h, w)) = self.image_shape {
            if h * w != self.features.cols() {
                return Err(Error::InvalidDataset(format!(
                    "image shape {h}x{w} does not match feature dimension {}",
                    self.features.cols()
                )));
            }
        }
        if !crate::numkit::all_finite(self.features.as_slice()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample::new(self.row(i), self.labels[i])
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Dataset {
            features: Matrix::from_vec(indices.len(), d, data).expect("consistent row length"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    /// Row indices labelled `class`, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.ids.clone(),
            self.num_classes,
            self.image_shape,
        )
    }
}

/// Gaussian class blobs around randomly placed means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub num_classes: usize,
    pub dim: usize,
    /// Standard deviation of each class-mean coordinate.
    pub spread: f64,
    /// Per-coordinate noise standard deviation around the class mean.
    pub noise: f64,
}

impl BlobParams {
    fn validate(&self, n: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("blobs need at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("blobs need dim >= 1".into()));
        }
        if n < self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "blobs need n >= num_classes ({n} < {})",
                self.num_classes
            )));
        }
        if !(self.noise >= 0.0) || !(self.spread >= 0.0) {
            return Err(Error::InvalidConfig(
                "spread and noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn draw_means(&self, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|_| (0..self.dim).map(|_| self.spread * rng.normal()).collect())
            .collect()
    }
}

fn sample_around(means: &[Vec<f64>], n: usize, noise: f64, rng: &mut RngStream) -> Result<Dataset> {
    let k = means.len();
    let d = means[0].len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        labels.push(y);
        for &m in &means[y] {
            data.push(m + noise * rng.normal());
        }
    }
    Dataset::with_sequential_ids(Matrix::from_vec(n, d, data)?, labels, k, None)
}

/// `n` samples with label `i mod K`, features `mean[label] + noise·N(0, I)`.
pub fn gen_blobs(params: &BlobParams, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    params.validate(n)?;
    let means = params.draw_means(rng);
    sample_around(&means, n, params.noise, rng)
}

/// How the target domain departs from the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Translation of every class mean along the unit all-ones direction.
    pub mean_offset: f64,
    /// Rotation (radians) of the class layout in the plane of the first two coordinates.
    pub rotation: f64,
    /// Multiplier on the blob noise.
    pub noise_scale: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            mean_offset: 0.0,
            rotation: 0.0,
            noise_scale: 1.0,
        }
    }

    fn apply(&self, means: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = means[0].len();
        let step = if d > 0 {
            self.mean_offset / (d as f64).sqrt()
        } else {
            0.0
        };
        let (s, c) = self.rotation.sin_cos();
        means
            .iter()
            .map(|m| {
                let mut out = m.clone();
                if d >= 2 && self.rotation != 0.0 {
                    out[0] = c * m[0] - s * m[1];
                    out[1] = s * m[0] + c * m[1];
                }
                for v in &mut out {
                    *v += step;
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
    pub shift: DomainShift,
}

/// Source and target sets sharing class means up to `shift`.
pub fn gen_domain_pair(
    base: &BlobParams,
    shift: &DomainShift,
    n_source: usize,
    n_target: usize,
    rng: &mut RngStream,
) -> Result<DomainPair> {
    base.validate(n_source.min(n_target))?;
    if !(shift.noise_scale >= 0.0) {
        return Err(Error::InvalidConfig("noise_scale must be nonnegative".into()));
    }
    let means = base.draw_means(rng);
    let source = sample_around(&means, n_source, base.noise, rng)?;
    let target = sample_around(
        &shift.apply(&means),
        n_target,
        base.noise * shift.noise_scale,
        rng,
    )?;
    Ok(DomainPair {
        source,
        target,
        shift: shift.clone(),
    })
}

/// Extra samples drawn from the target distribution of a domain pair (for test sets).
pub fn gen_domain_pair_with_test(
    base: &BlobParams,
    shift: &DomainShift,
    n_source: usize,
    n_target: usize,
    n_test: usize,
    rng: &mut RngStream,
) -> Result<(DomainPair, Dataset)> {
    base.validate(n_source.min(n_target).min(n_test))?;
    let means = base.draw_means(rng);
    let source = sample_around(&means, n_source, base.noise, rng)?;
    let shifted = shift.apply(&means);
    let noise = base.noise * shift.noise_scale;
    let target = sample_around(&shifted, n_target, noise, rng)?;
    let test = sample_around(&shifted, n_test, noise, rng)?;
    Ok((
        DomainPair {
            source,
            target,
            shift: shift.clone(),
        },
        test,
    ))
}

/// Validation size for `n` samples: `max(1, ⌊fraction·n⌋)`.
pub fn validation_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).max(1)
}

/// Random train/validation split. Both halves keep the original row order.
pub fn split_validation(ds: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 10 {
        return Err(Error::InvalidDataset(format!(
            "need at least 10 samples to split a validation set, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let k = validation_size(n, fraction);
    let mut in_val = vec![false; n];
    for i in rng.sample_indices(n, k) {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
    let val: Vec<usize> = (0..n).filter(|&i| in_val[i]).collect();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Reassign `⌊fraction·n⌋` labels uniformly among the other classes.
pub fn corrupt_labels(ds: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<(Dataset, BTreeSet<u64>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "corruption fraction must be in (0, 1), got {fraction}"
        )));
    }
    let k = ds.num_classes();
    let n_flip = (fraction * ds.len() as f64).floor() as usize;
    let mut labels = ds.labels().to_vec();
    let mut flipped = BTreeSet::new();
    for i in rng.sample_indices(ds.len(), n_flip) {
        let old = labels[i];
        let mut new = rng.below(k - 1);
        if new >= old {
            new += 1;
        }
        labels[i] = new;
        flipped.insert(ds.id(i));
    }
    Ok((ds.with_labels(labels)?, flipped))
}

pub fn augment_flip(image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h * w != image.len() {
        return Err(Error::DimensionMismatch {
            what: "image length for flip",
            expected: h * w,
            got: image.len(),
        });
    }
    let mut out = Vec::with_capacity(image.len());
    for r in 0..h {
        out.extend(image[r * w..(r + 1) * w].iter().rev());
    }
    Ok(out)
}

/// Clockwise quarter turn of a square image.
pub fn augment_rot90(image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h * w != image.len() {
        return Err(Error::DimensionMismatch {
            what: "image length for rotation",
            expected: h * w,
            got: image.len(),
        });
    }
    if h != w {
        return Err(Error::InvalidDataset(format!(
            "90-degree rotation needs a square image, got {h}x{w}"
        )));
    }
    let n = h;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = image[(n - 1 - j) * n + i];
        }
    }
    Ok(out)
}

/// Test set dominated by one class: `repeats` rounds of `per_class` augmented
/// copies of class `majority`, then `per_class` untouched samples of every
/// other class. Rounds draw independently, so copies may repeat across rounds.
///
/// Image data gets a horizontal flip or a quarter turn (even odds; flip only
/// for non-square images). Tabular data gets Gaussian jitter with standard
/// deviation `0.05 ×` the per-feature standard deviation of `ds`.
pub fn build_skewed_test(
    ds: &Dataset,
    majority: usize,
    repeats: usize,
    per_class: usize,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let k = ds.num_classes();
    if majority >= k {
        return Err(Error::InvalidConfig(format!(
            "majority class {majority} outside [0, {k})"
        )));
    }
    let by_class: Vec<Vec<usize>> = (0..k).map(|c| ds.class_indices(c)).collect();
    if by_class[majority].is_empty() {
        return Err(Error::InvalidDataset(format!(
            "majority class {majority} has no samples"
        )));
    }
    if repeats > 0 && by_class[majority].len() < per_class {
        return Err(Error::InvalidDataset(format!(
            "class {majority} has {} samples, need {per_class} per round",
            by_class[majority].len()
        )));
    }
    for (c, idx) in by_class.iter().enumerate() {
        if c != majority && idx.len() < per_class {
            return Err(Error::InvalidDataset(format!(
                "class {c} has {} samples, need {per_class}",
                idx.len()
            )));
        }
    }

    let d = ds.dim();
    let jitter: Vec<f64> = if ds.image_shape().is_none() {
        feature_std(ds).into_iter().map(|s| 0.05 * s).collect()
    } else {
        Vec::new()
    };

    let total = repeats * per_class + (k - 1) * per_class;
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let pool = &by_class[majority];
    for _ in 0..repeats {
        for pick in rng.sample_indices(pool.len(), per_class) {
            let x = ds.row(pool[pick]);
            let aug = match ds.image_shape() {
                Some((h, w)) => {
                    if h == w && rng.bernoulli(0.5) {
                        augment_rot90(x, h, w)?
                    } else {
                        augment_flip(x, h, w)?
                    }
                }
                None => x.iter().zip(&jitter).map(|(v, s)| v + s * rng.normal()).collect(),
            };
            data.extend(aug);
            labels.push(majority);
        }
    }
    for (c, idx) in by_class.iter().enumerate() {
        if c == majority {
            continue;
        }
        for pick in rng.sample_indices(idx.len(), per_class) {
            data.extend_from_slice(ds.row(idx[pick]));
            labels.push(c);
        }
    }
    Dataset::with_sequential_ids(Matrix::from_vec(total, d, data)?, labels, k, ds.image_shape())
}

fn feature_std(ds: &Dataset) -> Vec<f64> {
    let n = ds.len() as f64;
    (0..ds.dim())
        .map(|j| {
            let mean = (0..ds.len()).map(|i| ds.row(i)[j]).sum::<f64>() / n;
            let var = (0..ds.len()).map(|i| (ds.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect()
}

/// Writes `id,label,f0,…,f{d−1}` with round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::from("id,label");
    for j in 0..ds.dim() {
        line.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for i in 0..ds.len() {
        line.clear();
        line.push_str(&format!("{},{}", ds.id(i), ds.label(i)));
        for v in ds.row(i) {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the CSV layout written by [`write_csv`]. When `num_classes` is
/// `None` it is inferred as `max label + 1` (at least 2).
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty file, expected a header row")),
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::format(path, "row 1: header must start with `id,label,f0`"));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::format(
                path,
                format!("row 1: expected column f{j}, found `{c}`"),
            ));
        }
    }
    let d = cols.len() - 2;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row = lineno + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 2 {
            return Err(Error::format(
                path,
                format!("row {row}: expected {} cells, found {}", d + 2, cells.len()),
            ));
        }
        ids.push(
            cells[0].trim().parse::<u64>().map_err(|_| {
                Error::format(path, format!("row {row}, column 1: invalid id `{}`", cells[0]))
            })?,
        );
        labels.push(cells[1].trim().parse::<usize>().map_err(|_| {
            Error::format(path, format!("row {row}, column 2: invalid label `{}`", cells[1]))
        })?);
        for (j, cell) in cells[2..].iter().enumerate() {
            let v = cell.trim().parse::<f64>().map_err(|_| {
                Error::format(
                    path,
                    format!("row {row}, column {}: non-numeric value `{cell}`", j + 3),
                )
            })?;
            data.push(v);
        }
    }
    let n = labels.len();
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, ids, k, None)
        .map_err(|e| Error::format(path, e.to_string()))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("byte {offset}: truncated header")))
}

/// MNIST-style IDX pair. Pixels are scaled to `[0, 1]` by `byte / 255`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;

    let magic = read_be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images,
            format!("byte 0: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(&img, 4, images)? as usize;
    let rows = read_be_u32(&img, 8, images)? as usize;
    let cols = read_be_u32(&img, 12, images)? as usize;
    let d = rows * cols;
    let expected = 16 + count * d;
    if img.len() != expected {
        return Err(Error::format(
            images,
            format!(
                "byte {}: expected {expected} bytes for {count} images of {rows}x{cols}, file has {}",
                img.len().min(expected),
                img.len()
            ),
        ));
    }

    let lmagic = read_be_u32(&lab, 0, labels)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels,
            format!("byte 0: magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lcount = read_be_u32(&lab, 4, labels)? as usize;
    if lcount != count {
        return Err(Error::format(
            labels,
            format!("byte 4: {lcount} labels but {count} images"),
        ));
    }
    if lab.len() != 8 + count {
        return Err(Error::format(
            labels,
            format!(
                "byte {}: expected {} bytes, file has {}",
                lab.len().min(8 + count),
                8 + count,
                lab.len()
            ),
        ));
    }

    let data: Vec<f64> = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let ys: Vec<usize> = lab[8..].iter().map(|&b| usize::from(b)).collect();
    let k = num_classes.unwrap_or_else(|| ys.iter().max().map_or(2, |m| (m + 1).max(2)));
    if let Some(pos) = ys.iter().position(|&y| y >= k) {
        return Err(Error::format(
            labels,
            format!("byte {}: label {} outside [0, {k})", 8 + pos, ys[pos]),
        ));
    }
    Dataset::with_sequential_ids(Matrix::from_vec(count, d, data)?, ys, k, Some((rows, cols)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, noise: f64, seed: u64) -> Dataset {
        let params = BlobParams {
            num_classes: 3,
            dim: 4,
            spread: 3.0,
            noise,
        };
        gen_blobs(&params, n, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn blobs_balanced_counts() {
        let params = BlobParams {
            num_classes: 2,
            dim: 3,
            spread: 1.0,
            noise: 1.0,
        };
        let ds = gen_blobs(&params, 10, &mut RngStream::new(0)).unwrap();
        assert_eq!(ds.class_counts(), vec![5, 5]);
        let ds = blobs(301, 1.0, 0);
        let c = ds.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn blobs_without_noise_sit_on_means() {
        let ds = blobs(30, 0.0, 4);
        for c in 0..3 {
            let idx = ds.class_indices(c);
            for &i in &idx {
                assert_eq!(ds.row(i), ds.row(idx[0]));
            }
        }
    }

    #[test]
    fn blobs_reject_too_few_samples() {
        let params = BlobParams {
            num_classes: 5,
            dim: 2,
            spread: 1.0,
            noise: 1.0,
        };
        assert!(gen_blobs(&params, 4, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn domain_pair_sizes_and_zero_shift() {
        let base = BlobParams {
            num_classes: 3,
            dim: 2,
            spread: 2.0,
            noise: 0.0,
        };
        let pair = gen_domain_pair(&base, &DomainShift::none(), 5000, 500, &mut RngStream::new(1)).unwrap();
        assert_eq!(pair.source.len(), 5000);
        assert_eq!(pair.target.len(), 500);
        // noiseless: the class means themselves must coincide
        for c in 0..3 {
            let s = pair.source.row(pair.source.class_indices(c)[0]);
            let t = pair.target.row(pair.target.class_indices(c)[0]);
            assert_eq!(s, t);
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = blobs(100, 1.0, 2);
        let (train, val) = split_validation(&ds, 0.1, &mut RngStream::new(3)).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let t: BTreeSet<u64> = train.ids().iter().copied().collect();
        let v: BTreeSet<u64> = val.ids().iter().copied().collect();
        assert!(t.is_disjoint(&v));
        let all: BTreeSet<u64> = t.union(&v).copied().collect();
        assert_eq!(all, ds.ids().iter().copied().collect());

        let small = blobs(15, 1.0, 2);
        let (_, val) = split_validation(&small, 0.1, &mut RngStream::new(3)).unwrap();
        assert_eq!(val.len(), 1);
        assert!(split_validation(&blobs(9, 1.0, 2), 0.1, &mut RngStream::new(3)).is_err());
    }

    #[test]
    fn corruption_flips_exact_count() {
        let ds = blobs(300, 1.0, 5);
        let (bad, flipped) = corrupt_labels(&ds, 0.1, &mut RngStream::new(6)).unwrap();
        assert_eq!(flipped.len(), 30);
        for i in 0..ds.len() {
            let changed = bad.label(i) != ds.label(i);
            assert_eq!(changed, flipped.contains(&ds.id(i)));
        }
        let (_, again) = corrupt_labels(&ds, 0.1, &mut RngStream::new(6)).unwrap();
        assert_eq!(flipped, again);
    }

    #[test]
    fn flip_and_rotation_permutations() {
        let img = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(augment_flip(&img, 2, 2).unwrap(), vec![2.0, 1.0, 4.0, 3.0]);
        let img: Vec<f64> = (0..12).map(f64::from).collect();
        let twice = augment_flip(&augment_flip(&img, 3, 4).unwrap(), 3, 4).unwrap();
        assert_eq!(twice, img);
        let sq: Vec<f64> = (0..9).map(f64::from).collect();
        let mut r = sq.clone();
        for _ in 0..4 {
            r = augment_rot90(&r, 3, 3).unwrap();
        }
        assert_eq!(r, sq);
        assert_eq!(
            augment_rot90(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap(),
            vec![3.0, 1.0, 4.0, 2.0]
        );
        assert!(augment_rot90(&img, 3, 4).is_err());
        assert!(augment_flip(&img, 5, 5).is_err());
    }

    #[test]
    fn skewed_test_counts() {
        let params = BlobParams {
            num_classes: 10,
            dim: 4,
            spread: 2.0,
            noise: 1.0,
        };
        let ds = gen_blobs(&params, 400, &mut RngStream::new(8)).unwrap();
        let sk = build_skewed_test(&ds, 3, 91, 10, &mut RngStream::new(9)).unwrap();
        assert_eq!(sk.len(), 1000);
        assert_eq!(sk.class_counts()[3], 910);
        let none = build_skewed_test(&ds, 3, 0, 10, &mut RngStream::new(9)).unwrap();
        assert_eq!(none.class_counts()[3], 0);
        assert_eq!(none.len(), 90);
        assert!(build_skewed_test(&ds, 3, 1, 100, &mut RngStream::new(9)).is_err());
    }

    #[test]
    fn skewed_test_on_images_uses_permutations() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            for p in 0..9 {
                data.push((i * 9 + p) as f64);
            }
            labels.push(i % 2);
        }
        let ds =
            Dataset::with_sequential_ids(Matrix::from_vec(20, 9, data).unwrap(), labels, 2, Some((3, 3)))
                .unwrap();
        let sk = build_skewed_test(&ds, 1, 4, 5, &mut RngStream::new(2)).unwrap();
        for i in 0..20 {
            let x = sk.row(i);
            let found = ds.class_indices(1).into_iter().any(|j| {
                let o = ds.row(j);
                augment_flip(o, 3, 3).unwrap() == x || augment_rot90(o, 3, 3).unwrap() == x
            });
            assert!(found, "row {i} is not an augmented copy");
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = blobs(25, 1.3, 11);
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, Some(3)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_reports_bad_cell_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "id,label,f0,f1\n0,1,0.5,2\n1,0,abc,3\n").unwrap();
        let msg = load_csv(&path, None).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("column 3"), "{msg}");
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
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
    fn idx_load_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut px = vec![0u8; 12];
        px[0] = 255;
        px[5] = 51;
        fs::write(&ip, idx_images(3, 2, 2, &px)).unwrap();
        fs::write(&lp, idx_labels(&[0, 1, 2])).unwrap();
        let ds = load_idx(&ip, &lp, None).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.image_shape()), (3, 4, Some((2, 2))));
        assert_eq!(ds.row(0)[0], 1.0);
        assert_eq!(ds.row(1)[1], 0.2);
        assert_eq!(ds.ids(), &[0, 1, 2]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut bad = idx_images(1, 2, 2, &[0; 4]);
        bad[3] = 0x01;
        fs::write(&ip, bad).unwrap();
        fs::write(&lp, idx_labels(&[0])).unwrap();
        assert!(load_idx(&ip, &lp, None)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        fs::write(&ip, idx_images(2, 2, 2, &[0; 8])).unwrap();
        let msg = load_idx(&ip, &lp, None).unwrap_err().to_string();
        assert!(msg.contains("1 labels but 2 images"), "{msg}");
    }
}
