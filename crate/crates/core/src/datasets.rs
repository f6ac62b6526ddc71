//! Synthetic classification tasks and IDX ingestion, all inside `[0,1]^d`.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-coordinate standard deviation of blob clusters unless overridden.
pub const BLOB_SIGMA: f64 = 0.05;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
    seed: u64,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape("dataset inputs must be 2-D".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("input value {v} outside [0,1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!("label {y} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
            seed,
        })
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

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(inputs, labels, self.num_classes, self.name.clone(), self.seed)
    }

    /// Seeded shuffle split; `test_fraction` of the examples (rounded) go to
    /// the second half. Both halves keep at least one example.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || self.len() < 2 {
            return Err(Error::Domain(format!(
                "cannot split {} examples with test fraction {test_fraction}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    /// Header `x0,...,x{d-1},label`, one row per example.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        out.push_str(",label\n");
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        out
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> Batches<'_> {
        batches(self, batch_size, seed)
    }
}

/// Seeded mini-batch iterator; every example appears exactly once and the
/// last batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = self.dataset.inputs.select_rows(idx).expect("indices in range");
        let y = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((x, y))
    }
}

pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Batches<'_> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    Batches {
        dataset,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

fn blob_centers(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if classes <= dim {
        // regular simplex: 0.5 + s/sqrt(2) (e_k - 1/M), pairwise distance s
        let scale = separation / 2f64.sqrt();
        (0..classes)
            .map(|k| {
                (0..dim)
                    .map(|j| {
                        let e = if j == k { 1.0 } else { 0.0 };
                        let centred = if j < classes { e - 1.0 / classes as f64 } else { 0.0 };
                        0.5 + scale * centred
                    })
                    .collect()
            })
            .collect()
    } else {
        // circle in the first two coordinates with chord length = separation
        let radius = separation / (2.0 * (PI / classes as f64).sin());
        (0..classes)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / classes as f64;
                let mut c = vec![0.5; dim];
                c[0] += radius * a.cos();
                c[1] += radius * a.sin();
                c
            })
            .collect()
    }
}

/// `classes` Gaussian clusters (std [`BLOB_SIGMA`]) whose centres are
/// `separation` apart, clipped to the unit box.
pub fn gen_blobs(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Dataset> {
    gen_blobs_with_sigma(seed, n_per_class, classes, dim, separation, BLOB_SIGMA)
}

pub fn gen_blobs_with_sigma(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::Domain(format!(
            "blobs need >= 2 classes, >= 2 dims and examples (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "separation {separation} and sigma {sigma} must be positive"
        )));
    }
    let centers = blob_centers(classes, dim, separation);
    if centers.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Domain(format!(
            "separation {separation} puts cluster centres outside the unit box"
        )));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(c.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(k);
        }
    }
    let inputs = Tensor::matrix(labels.len(), dim, data)?;
    Dataset::new(inputs, labels, classes, "blobs", seed)
}

/// `classes` concentric rings in the plane, centred at (0.5, 0.5) with radii
/// `0.4 (k+1) / classes`; `noise` is the radial standard deviation.
pub fn gen_rings(seed: u64, n_per_class: usize, classes: usize, noise: f64) -> Result<Dataset> {
    if classes < 2 || n_per_class == 0 {
        return Err(Error::Domain(format!(
            "rings need >= 2 classes and examples (got {classes}, {n_per_class})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Domain(format!("noise {noise} must be non-negative")));
    }
    let mut rng = seed::rng(seed);
    let radial = Normal::new(0.0, noise).map_err(|e| Error::Domain(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * n_per_class * 2);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        let r0 = 0.4 * (k + 1) as f64 / classes as f64;
        for _ in 0..n_per_class {
            let theta = rng.random_range(0.0..2.0 * PI);
            let r = r0 + if noise > 0.0 { radial.sample(&mut rng) } else { 0.0 };
            data.push((0.5 + r * theta.cos()).clamp(0.0, 1.0));
            data.push((0.5 + r * theta.sin()).clamp(0.0, 1.0));
            labels.push(k);
        }
    }
    let inputs = Tensor::matrix(labels.len(), 2, data)?;
    Dataset::new(inputs, labels, classes, "rings", seed)
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(path, io::Error::new(ErrorKind::UnexpectedEof, what.to_string()))
}

fn read_header(bytes: &[u8], path: &Path, magic: u32) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(truncated(path, "missing IDX magic number"));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic 0x{found:08x}, expected 0x{magic:08x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(truncated(path, "IDX header cut short"));
    }
    Ok((0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect())
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`);
/// pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lab = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let idims = read_header(&img, ip, IDX_IMAGES_MAGIC)?;
    let ldims = read_header(&lab, lp, IDX_LABELS_MAGIC)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            ldims[0]
        )));
    }
    if n == 0 || rows * cols == 0 {
        return Err(Error::Format("IDX file declares no data".into()));
    }
    let d = rows * cols;
    let pixels = &img[16..];
    if pixels.len() < n * d {
        return Err(truncated(ip, "IDX image payload cut short"));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() < n {
        return Err(truncated(lp, "IDX label payload cut short"));
    }
    let data = pixels[..n * d].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::matrix(n, d, data)?, labels, num_classes, "idx", 0)
}

/// Writes raw IDX image bytes (`n x rows x cols`) and labels.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Consistency(format!(
            "{} pixel bytes for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        img.extend((v as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend((n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_reproducible_and_balanced() {
        let a = gen_blobs(3, 50, 3, 4, 0.4).unwrap();
        let b = gen_blobs(3, 50, 3, 4, 0.4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        for k in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&y| y == k).count(), 50);
        }
        assert_ne!(a, gen_blobs(4, 50, 3, 4, 0.4).unwrap());
    }

    #[test]
    fn blob_centres_are_separation_apart() {
        for (m, d) in [(3, 8), (5, 2)] {
            let c = blob_centers(m, d, 0.3);
            for i in 0..m {
                for j in 0..i {
                    let dist: f64 = c[i]
                        .iter()
                        .zip(&c[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if m <= d || i == j + 1 {
                        assert!((dist - 0.3).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn blobs_reject_centres_outside_box() {
        assert!(matches!(
            gen_blobs(0, 10, 3, 4, 5.0),
            Err(Error::Domain(_))
        ));
        assert!(gen_blobs(0, 10, 1, 4, 0.2).is_err());
    }

    #[test]
    fn noiseless_rings_keep_classes_apart() {
        let ds = gen_rings(1, 60, 2, 0.0).unwrap();
        let x = ds.inputs();
        let mut min = f64::INFINITY;
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if ds.labels()[i] != ds.labels()[j] {
                    let d = ((x.row(i)[0] - x.row(j)[0]).powi(2)
                        + (x.row(i)[1] - x.row(j)[1]).powi(2))
                    .sqrt();
                    min = min.min(d);
                }
            }
        }
        assert!(min >= 0.19, "min inter-class distance {min}");
        assert_eq!(ds.labels().iter().filter(|&&y| y == 0).count(), 60);
        assert_eq!(ds, gen_rings(1, 60, 2, 0.0).unwrap());
    }

    #[test]
    fn batches_cover_dataset_once() {
        let ds = gen_blobs(2, 7, 3, 2, 0.3).unwrap();
        let all: Vec<_> = ds.batches(4, 11).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all.last().unwrap().1.len(), 1);
        let mut labels: Vec<usize> = all.iter().flat_map(|(_, y)| y.clone()).collect();
        labels.sort();
        let mut want = ds.labels().to_vec();
        want.sort();
        assert_eq!(labels, want);

        let again: Vec<_> = ds.batches(4, 11).collect();
        assert_eq!(all, again);

        let one: Vec<_> = ds.batches(ds.len(), 5).collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1.len(), ds.len());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = gen_blobs(2, 20, 2, 2, 0.3).unwrap();
        let (train, test) = ds.split(0.25, 3).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 10);
    }

    #[test]
    fn csv_header() {
        let ds = gen_blobs(2, 1, 2, 3, 0.3).unwrap();
        let csv = ds.to_csv();
        assert!(csv.starts_with("x0,x1,x2,label\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn idx_scaling_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 1, 2, &[0, 255, 51, 102], &[1, 0]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs().data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[1, 0]);

        // label count disagrees with image count
        let mut lab = fs::read(&lp).unwrap();
        lab[7] = 3;
        lab.push(2);
        fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));

        // magic swapped
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format(_))));

        // payload cut short
        let img = fs::read(&ip).unwrap();
        fs::write(&ip, &img[..img.len() - 1]).unwrap();
        write_idx(dir.path().join("x"), &lp, 1, 1, &[0, 0], &[0, 0]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io { .. })));
    }
}
