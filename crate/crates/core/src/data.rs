//! Datasets: synthetic class blobs, CSV/IDX ingestion, and IID sharding.
//!
//! Features are row-major `f64` in `[0, 1]`.
//!
//! CSV: UTF-8, comma separated, one sample per line, integer label in the
//! last column, no header. Feature values above 1 mark a byte-scaled file:
//! every value must then lie in `[0, 255]` and is divided by 255.
//!
//! IDX: the usual big-endian layout. Images use magic `0x00000803`
//! (`u8`, dims `n × rows × cols`), labels `0x00000801` (`u8`, dims `n`).
//! Pixels are divided by 255.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seed::{Purpose, RunSeeds, SHARED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Validation(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!("label {y} out of range for {classes} classes")));
        }
        if let Some(v) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("feature value {v} outside [0, 1]")));
        }
        if split == Split::Train {
            let mut seen = vec![false; classes];
            for &y in &labels {
                seen[y] = true;
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(Error::Validation(format!("class {c} missing from training set")));
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            split,
        })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows into a contiguous feature buffer and label list.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Parameters of the synthetic blob task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub dim: usize,
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 3000,
            n_test: 1000,
            classes: 10,
            dim: 48,
            sigma: 0.15,
        }
    }
}

fn blob_split<R: Rng + ?Sized>(
    rng: &mut R,
    prototypes: &[Vec<f64>],
    n: usize,
    noise: &Normal<f64>,
    split: Split,
) -> Result<Dataset> {
    let classes = prototypes.len();
    let dim = prototypes[0].len();
    let mut features = Vec::with_capacity(n * dim);
    // Round-robin labels keep classes balanced within ±1.
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &y in &labels {
        features.extend(
            prototypes[y]
                .iter()
                .map(|c| (c + noise.sample(rng)).clamp(0.0, 1.0)),
        );
    }
    Dataset::new(features, dim, labels, classes, split)
}

/// Gaussian blobs (`σ = spec.sigma`) around per-class prototypes drawn
/// uniformly from `[0.2, 0.8]^dim`, clipped to `[0, 1]`.
pub fn generate_synthetic(seed: u64, spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.dim < spec.classes {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2 and dim >= classes (got {} classes, dim {})",
            spec.classes, spec.dim
        )));
    }
    if spec.n_train < spec.classes || spec.n_test == 0 {
        return Err(Error::Config("synthetic split sizes too small".into()));
    }
    let mut rng = RunSeeds::new(seed, SHARED, SHARED).rng(SHARED, 0, Purpose::Data);
    let box_dist = Uniform::new_inclusive(0.2, 0.8);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| box_dist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.sigma)
        .map_err(|e| Error::Config(format!("bad blob sigma: {e}")))?;
    let train = blob_split(&mut rng, &prototypes, spec.n_train, &noise, Split::Train)?;
    let test = blob_split(&mut rng, &prototypes, spec.n_test, &noise, Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExternalSource {
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

/// Loads a dataset from disk. `classes` defaults to `max label + 1`.
pub fn load_external(source: &ExternalSource, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let (features, dim, labels) = match source {
        ExternalSource::Csv(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, &path.display().to_string())?
        }
        ExternalSource::Idx { images, labels } => {
            let img = fs::read(images).map_err(|e| Error::io(images, e))?;
            let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
            parse_idx(&img, &lab)?
        }
    };
    let k = match classes {
        Some(k) => k,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    Dataset::new(features, dim, labels, k, split)
}

fn parse_csv(text: &str, name: &str) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::parse(name, format!("line {line}"), e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::parse(name, format!("line {line}"), "need features and a label"));
        }
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::parse(
                    name,
                    format!("line {line}"),
                    format!("expected {d} features, found {width}"),
                ));
            }
            _ => {}
        }
        for (col, field) in record.iter().take(width).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(name, format!("line {line}, column {}", col + 1), format!("bad number {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(name, format!("line {line}, column {}", col + 1), "non-finite value"));
            }
            features.push(v);
        }
        let label_field = &record[width];
        let y: i64 = label_field.parse().map_err(|_| {
            Error::parse(name, format!("line {line}"), format!("bad label {label_field:?}"))
        })?;
        if y < 0 {
            return Err(Error::Validation(format!("negative label {y} on line {line}")));
        }
        labels.push(y as usize);
    }
    let dim = dim.ok_or_else(|| Error::parse(name, "line 1", "no samples"))?;
    if features.iter().any(|&v| v < 0.0) {
        return Err(Error::Validation("negative feature values are not normalizable".into()));
    }
    if features.iter().any(|&v| v > 1.0) {
        if features.iter().any(|&v| v > 255.0) {
            return Err(Error::Validation("feature values exceed the byte range".into()));
        }
        for v in &mut features {
            *v /= 255.0;
        }
    }
    Ok((features, dim, labels))
}

fn idx_header(bytes: &[u8], magic: u32, name: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::parse(name, "offset 0", "truncated magic"));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::parse(name, "offset 0", format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::parse(name, "offset 4", "truncated dimensions"));
    }
    let dims = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect::<Vec<_>>();
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::parse(
            name,
            format!("offset {header}"),
            format!("expected {payload} data bytes, found {}", bytes.len().saturating_sub(header)),
        ));
    }
    Ok((dims, header))
}

fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let (img_dims, img_off) = idx_header(images, 0x0000_0803, "idx images")?;
    let (lab_dims, lab_off) = idx_header(labels, 0x0000_0801, "idx labels")?;
    if img_dims[0] != lab_dims[0] {
        return Err(Error::Validation(format!(
            "{} images but {} labels",
            img_dims[0], lab_dims[0]
        )));
    }
    let dim = img_dims[1] * img_dims[2];
    let features = images[img_off..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels[lab_off..].iter().map(|&b| b as usize).collect();
    Ok((features, dim, labels))
}

/// Writes the CSV layout read by [`load_external`]. Values are printed in
/// shortest round-trip form.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.row(i).iter().map(|v| format!("{v:?}")).collect();
        fields.push(d.labels[i].to_string());
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Client id → sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    shards: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.shards[client]
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

/// Seeded permutation of all indices, cut into `n_clients` contiguous
/// blocks whose sizes differ by at most one.
pub fn shard_uniform<R: Rng + ?Sized>(d: &Dataset, n_clients: usize, rng: &mut R) -> Result<ShardPlan> {
    if n_clients == 0 || d.len() < n_clients {
        return Err(Error::Config(format!(
            "cannot split {} samples across {n_clients} clients",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(rng);
    let base = d.len() / n_clients;
    let extra = d.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(ShardPlan { shards })
}
