//! Datasets, the IDX image/label loader, a synthetic Gaussian-classes
//! generator, and minibatch samplers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

/// A labeled classification dataset: one feature row per point, labels in
/// 0..c.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub c: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, c: usize, name: impl Into<String>) -> Result<Dataset> {
        let ds = Dataset { x, y, c, name: name.into() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.shape().0
    }

    pub fn d(&self) -> usize {
        self.x.shape().1
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.n() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels in {}",
                self.n(),
                self.y.len(),
                self.name
            )));
        }
        if self.c == 0 {
            return Err(Error::Domain("class count must be positive".into()));
        }
        if let Some(&bad) = self.y.iter().find(|&&l| l >= self.c) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {} classes in {}",
                self.c, self.name
            )));
        }
        self.x.ensure_finite("dataset features")
    }

    /// Split off the last `count` points as a second dataset (head, tail).
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        let n = self.n();
        if count >= n {
            return Err(Error::Config(format!(
                "validation split of {count} leaves no training data (n = {n})"
            )));
        }
        let head_n = n - count;
        let d = self.d();
        let take = |lo: usize, hi: usize, suffix: &str| -> Result<Dataset> {
            let mut data = Vec::with_capacity((hi - lo) * d);
            for r in lo..hi {
                data.extend_from_slice(self.x.row(r));
            }
            Dataset::new(
                Matrix::from_vec(hi - lo, d, data)?,
                self.y[lo..hi].to_vec(),
                self.c,
                format!("{}{suffix}", self.name),
            )
        };
        Ok((take(0, head_n, "")?, take(head_n, n, "-val")?))
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct BeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> BeReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(format!(
                "{} file truncated: needed {n} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("length checked")))
    }
}

/// Parse an IDX image file: returns (n, rows, cols, raw pixel bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = BeReader { bytes, pos: 0, what: "image" };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08X}, expected 0x{IMAGE_MAGIC:08X}"
        )));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

/// Parse an IDX label file: returns the raw label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = BeReader { bytes, pos: 0, what: "label" };
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic 0x{magic:08X}, expected 0x{LABEL_MAGIC:08X}"
        )));
    }
    let n = r.u32_be()? as usize;
    Ok(r.take(n)?.to_vec())
}

/// Load an MNIST-format image/label file pair. Pixels are scaled to
/// [0, 1] by dividing by 255; the class count is fixed at 10.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Consistency(format!("label byte {bad} exceeds class 9")));
    }
    let x = Matrix::from_vec(
        n,
        rows * cols,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(x, labels.iter().map(|&l| l as usize).collect(), 10, "mnist")
}

/// Write an IDX image file from raw pixel bytes (row-major per image).
pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Shape(format!(
            "{} pixel bytes do not fill {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(Error::from)
}

/// Write an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(Error::from)
}

/// Balanced Gaussian blobs: class k has unit covariance around
/// separation * e_{k mod d}. Rows are shuffled deterministically, so the
/// same seed reproduces the dataset bit for bit.
pub fn synthetic_gaussian_classes(
    n_per_class: usize,
    d: usize,
    c: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || d == 0 || c == 0 {
        return Err(Error::Config(
            "synthetic dataset needs positive points-per-class, dimension, and classes".into(),
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Domain(format!(
            "class separation must be finite and nonnegative, got {separation}"
        )));
    }
    let mut rng = RngStream::new(seed, 0);
    let n = n_per_class * c;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for class in 0..c {
        let hot = class % d;
        for _ in 0..n_per_class {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let mean = if j == hot { separation } else { 0.0 };
                row.push(mean + rng.next_normal());
            }
            rows.push((row, class));
        }
    }
    // Fisher-Yates so batches drawn in order are not class-sorted.
    for i in (1..n).rev() {
        let j = rng.next_index(i + 1);
        rows.swap(i, j);
    }
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for (row, label) in rows {
        data.extend_from_slice(&row);
        y.push(label);
    }
    Dataset::new(
        Matrix::from_vec(n, d, data)?,
        y,
        c,
        format!("synthetic(c={c},d={d},sep={separation})"),
    )
}

/// Draws index sets for stochastic training.
///
/// Without replacement the sampler walks a per-epoch permutation, so one
/// epoch covers every point exactly once (the last batch may be short).
/// When the batch is the whole dataset the permutation is the identity and
/// no random state is consumed, so a full-batch pass is deterministic.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    m: usize,
    n: usize,
    with_replacement: bool,
    rng: RngStream,
    perm: Vec<usize>,
    pos: usize,
}

impl MinibatchSampler {
    pub fn new(m: usize, n: usize, with_replacement: bool, rng: RngStream) -> Result<MinibatchSampler> {
        if m == 0 || n == 0 {
            return Err(Error::Config(format!(
                "batch size {m} and dataset size {n} must be positive"
            )));
        }
        if !with_replacement && m > n {
            return Err(Error::Config(format!(
                "batch size {m} exceeds dataset size {n} for without-replacement sampling"
            )));
        }
        let mut s = MinibatchSampler { m, n, with_replacement, rng, perm: Vec::new(), pos: 0 };
        if !with_replacement {
            s.perm = (0..n).collect();
            s.reshuffle();
        }
        Ok(s)
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    fn reshuffle(&mut self) {
        self.pos = 0;
        if self.m == self.n {
            // Full batch: keep the identity ordering and touch no randomness.
            for (i, p) in self.perm.iter_mut().enumerate() {
                *p = i;
            }
            return;
        }
        for i in (1..self.n).rev() {
            let j = self.rng.next_index(i + 1);
            self.perm.swap(i, j);
        }
    }

    /// The next batch's dataset indices.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.with_replacement {
            return (0..self.m).map(|_| self.rng.next_index(self.n)).collect();
        }
        if self.pos >= self.n {
            self.reshuffle();
        }
        let take = self.m.min(self.n - self.pos);
        let idx = self.perm[self.pos..self.pos + take].to_vec();
        self.pos += take;
        idx
    }

    /// Gather the next batch's features and labels from `data`.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<(Matrix, Vec<usize>, Vec<usize>)> {
        if data.n() != self.n {
            return Err(Error::Shape(format!(
                "sampler built for {} points used on a dataset of {}",
                self.n,
                data.n()
            )));
        }
        let idx = self.next_indices();
        let d = data.d();
        let mut xm = Vec::with_capacity(idx.len() * d);
        let mut ym = Vec::with_capacity(idx.len());
        for &i in &idx {
            xm.extend_from_slice(data.x.row(i));
            ym.push(data.y[i]);
        }
        Ok((Matrix::from_vec(idx.len(), d, xm)?, ym, idx))
    }
}
