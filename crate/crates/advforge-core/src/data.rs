//! Dataset ingestion and plumbing: IDX parsing, normalization, seeded
//! mini-batching, stratified subsetting, and byte- or float-exact export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;
const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image set with its valid pixel interval.
///
/// Images are `[n, 1, 28, 28]`; labels are class indices `0..=9`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub data_range: [f64; 2],
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, data_range: [f64; 2]) -> Result<Self> {
        match images.shape() {
            [n, 1, h, w] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => {
                if *n != labels.len() {
                    return Err(Error::DataFormat(format!(
                        "image/label count mismatch: {} images, {} labels",
                        n,
                        labels.len()
                    )));
                }
            }
            other => {
                return Err(Error::shape(
                    "[n, 1, 28, 28]".to_string(),
                    format!("{other:?}"),
                ))
            }
        }
        let [lo, hi] = data_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "data_range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if images.data().iter().any(|&v| !(lo..=hi).contains(&v)) {
            return Err(Error::DataFormat(format!(
                "pixel outside data_range [{lo}, {hi}]"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::DataFormat(format!(
                "label {bad} out of range 0..{NUM_CLASSES}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            data_range,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the examples at `indices` into a new dataset. Order follows
    /// `indices`.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.rows(i, i + 1));
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(vec![indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)
                .unwrap(),
            labels,
            data_range: self.data_range,
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| truncation_or_io(e, path))?;
    Ok(u32::from_be_bytes(b))
}

fn truncation_or_io(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::DataFormat(format!("{}: truncated file", path.display()))
    } else {
        Error::io(path, e)
    }
}

/// Parses a big-endian IDX image/label file pair into a normalized
/// dataset: pixel bytes are divided by 255 into `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path).map_err(|e| Error::io(images_path, e))?);
    let magic = read_u32_be(&mut ir, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad image magic {magic:#010x} (want {IMAGE_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut ir, images_path)? as usize;
    let rows = read_u32_be(&mut ir, images_path)? as usize;
    let cols = read_u32_be(&mut ir, images_path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::DataFormat(format!(
            "{}: expected 28x28 images, got {rows}x{cols}",
            images_path.display()
        )));
    }
    let mut bytes = vec![0u8; n * IMAGE_PIXELS];
    ir.read_exact(&mut bytes)
        .map_err(|e| truncation_or_io(e, images_path))?;

    let mut lr = BufReader::new(File::open(labels_path).map_err(|e| Error::io(labels_path, e))?);
    let magic = read_u32_be(&mut lr, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad label magic {magic:#010x} (want {LABEL_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut lr, labels_path)? as usize;
    if ln != n {
        return Err(Error::DataFormat(format!(
            "image/label count mismatch: {n} images, {ln} labels"
        )));
    }
    let mut labels = vec![0u8; ln];
    lr.read_exact(&mut labels)
        .map_err(|e| truncation_or_io(e, labels_path))?;

    let data: Vec<f64> = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::from_vec(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
        [0.0, 1.0],
    )
}

/// Writes images + labels as an IDX pair. Pixels are quantized to the
/// nearest /255 level, so a load → export → load cycle is bit-stable
/// after the first quantization.
pub fn export_idx(
    images: &Tensor,
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let n = images.dim0();
    if n != labels.len() {
        return Err(Error::DataFormat(format!(
            "image/label count mismatch: {} images, {} labels",
            n,
            labels.len()
        )));
    }
    let mut iw =
        BufWriter::new(File::create(images_path).map_err(|e| Error::io(images_path, e))?);
    iw.write_all(&IMAGE_MAGIC.to_be_bytes())
        .and_then(|_| iw.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| iw.write_all(&(IMAGE_SIDE as u32).to_be_bytes()))
        .and_then(|_| iw.write_all(&(IMAGE_SIDE as u32).to_be_bytes()))
        .map_err(|e| Error::io(images_path, e))?;
    let mut bytes = Vec::with_capacity(images.len());
    for &v in images.data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    iw.write_all(&bytes).map_err(|e| Error::io(images_path, e))?;
    iw.flush().map_err(|e| Error::io(images_path, e))?;

    let mut lw =
        BufWriter::new(File::create(labels_path).map_err(|e| Error::io(labels_path, e))?);
    lw.write_all(&LABEL_MAGIC.to_be_bytes())
        .and_then(|_| lw.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| lw.write_all(labels))
        .map_err(|e| Error::io(labels_path, e))?;
    lw.flush().map_err(|e| Error::io(labels_path, e))
}

/// Lossless float export: CSV with header `index,label,pix_0..pix_783`,
/// each pixel printed with shortest round-trip f64 formatting.
pub fn export_float_csv(images: &Tensor, labels: &[u8], path: &Path) -> Result<()> {
    let n = images.dim0();
    if n != labels.len() {
        return Err(Error::DataFormat(format!(
            "image/label count mismatch: {} images, {} labels",
            n,
            labels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    let mut header = String::from("index,label");
    for p in 0..IMAGE_PIXELS {
        header.push_str(&format!(",pix_{p}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for i in 0..n {
        let mut line = format!("{i},{}", labels[i]);
        for v in images.rows(i, i + 1) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a float CSV produced by [`export_float_csv`]. Values round-trip
/// bit-exactly.
pub fn load_float_csv(path: &Path, data_range: [f64; 2]) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut content = String::new();
    BufReader::new(file)
        .read_to_string(&mut content)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::DataFormat(format!("{}: {msg}", path.display()));
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if !header.starts_with("index,label,pix_0,") {
        return Err(bad("unexpected header".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let _index = fields.next();
        let label: u8 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad label", lineno + 2)))?;
        labels.push(label);
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| bad(format!("line {}: bad pixel '{f}'", lineno + 2)))?;
            data.push(v);
        }
        if data.len() - before != IMAGE_PIXELS {
            return Err(bad(format!(
                "line {}: expected {IMAGE_PIXELS} pixels, got {}",
                lineno + 2,
                data.len() - before
            )));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
        data_range,
    )
}

/// Seeded, class-stratified sample of `n` examples without replacement.
///
/// Per-class quotas are `n / 10`, with the remainder going one each to the
/// lowest class indices. Selected indices are emitted in ascending order.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "subset of {n} from a dataset of {}",
            dataset.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let base = n / NUM_CLASSES;
    let rem = n % NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (c, group) in by_class.iter_mut().enumerate() {
        let quota = base + usize::from(c < rem);
        if quota > group.len() {
            return Err(Error::InvalidConfig(format!(
                "class {c} has only {} examples, need {quota}",
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        chosen.extend_from_slice(&group[..quota]);
    }
    chosen.sort_unstable();
    Ok(dataset.gather(&chosen))
}

/// Infinite stream of seeded mini-batches. Each epoch is one seeded
/// permutation of the dataset, cut into batches of `m` with the short
/// final batch kept, so every epoch visits every example exactly once.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    m: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    perm: Vec<usize>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, m: usize, seed: u64) -> Result<Self> {
        if m < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if dataset.is_empty() {
            return Err(Error::InvalidConfig("cannot batch an empty dataset".into()));
        }
        let mut it = BatchIterator {
            dataset,
            m,
            seed,
            epoch: 0,
            pos: 0,
            perm: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    /// Epochs completed so far (the permutation currently being consumed
    /// is epoch `self.epoch()`).
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        // Epoch e's permutation depends only on (seed, e): the base seed
        // picks the key, the epoch picks the stream.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.perm = (0..self.dataset.len()).collect();
        self.perm.shuffle(&mut rng);
        self.pos = 0;
    }

    /// Next mini-batch of up to `m` examples; rolls into the next epoch
    /// automatically.
    pub fn next_batch(&mut self) -> (Tensor, Vec<u8>) {
        if self.pos >= self.perm.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.m).min(self.perm.len());
        let idx = &self.perm[self.pos..end];
        self.pos = end;
        let ds = self.dataset.gather(idx);
        (ds.images, ds.labels)
    }
}
