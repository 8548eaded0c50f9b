//! Datasets and client partitioning.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX file")]
    Truncated { path: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
}

/// Feature matrix with integer class labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::InvalidParams(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenation of several subsets, in the given order.
    pub fn union(&self, index_sets: &[&[usize]]) -> LabeledDataset {
        let all: Vec<usize> = index_sets.iter().flat_map(|s| s.iter().copied()).collect();
        self.subset(&all)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Shuffles the samples and splits them into `(first n, rest)`.
    pub fn shuffle_split(&self, n: usize, seed: u64) -> Result<(Self, Self), DataError> {
        if n > self.len() {
            return Err(DataError::InvalidParams(format!(
                "cannot take {n} of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..n]), self.subset(&order[n..])))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
        })
}

/// Reads an IDX image/label pair (raw or gzip-compressed). Pixels are scaled
/// to `[0, 1]` by dividing by 255 and each image is flattened row-major.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(ip)?;
    let labels = read_maybe_gz(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: ip.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lp.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }

    let n = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let n_labels = be_u32(&labels, 4, lp)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    let pixels = images.get(16..16 + n * d).ok_or_else(|| DataError::Truncated {
        path: ip.display().to_string(),
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| DataError::Truncated {
        path: lp.display().to_string(),
    })?;

    let features = Array2::from_shape_vec((n, d), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("idx layout");
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, labels, num_classes)
}

/// Isotropic Gaussian blobs: class centers are drawn from `N(0, I)` and each
/// sample is `center + spread * N(0, I)`. Samples are returned shuffled.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 || dim == 0 || !(spread >= 0.0) {
        return Err(DataError::InvalidParams(format!(
            "blobs need classes >= 2, dim >= 1, spread >= 0 (got {classes}, {dim}, {spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Array2<f64> = Array2::from_shape_fn((classes, dim), |_| StandardNormal.sample(&mut rng));
    let mut order: Vec<usize> = (0..classes * per_class).collect();
    order.shuffle(&mut rng);

    let mut features = Array2::zeros((order.len(), dim));
    let mut labels = vec![0; order.len()];
    for (row, &slot) in order.iter().enumerate() {
        let class = slot / per_class;
        labels[row] = class;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[row, j]] = centers[[class, j]] + spread * noise;
        }
    }
    LabeledDataset::new(features, labels, classes)
}

/// Client shards plus the optional server root set, as indices into one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub root_indices: Vec<usize>,
}

impl Partition {
    /// Indices of `ds` not yet assigned to the root set or any shard, ascending.
    pub fn unassigned(&self, n: usize) -> Vec<usize> {
        let mut taken = vec![false; n];
        for &i in self.root_indices.iter().chain(self.shards.iter().flatten()) {
            taken[i] = true;
        }
        (0..n).filter(|&i| !taken[i]).collect()
    }

    /// Deals the unassigned samples uniformly at random to `k` shards;
    /// leftovers go round-robin so sizes differ by at most one.
    pub fn with_iid_shards(
        mut self,
        ds: &LabeledDataset,
        k: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        let mut pool = self.unassigned(ds.len());
        if k == 0 || k > pool.len() {
            return Err(DataError::InvalidParams(format!(
                "cannot split {} samples into {k} shards",
                pool.len()
            )));
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut shards = vec![Vec::with_capacity(pool.len() / k + 1); k];
        for (pos, idx) in pool.into_iter().enumerate() {
            shards[pos % k].push(idx);
        }
        self.shards = shards;
        Ok(self)
    }

    /// Label-skewed shards. Client `c` belongs to group `c mod C`; a sample of
    /// class `y` goes to group `y` with probability `p` and to each other group
    /// with probability `(1 - p) / (C - 1)`, then to a uniform client of that
    /// group.
    pub fn with_noniid_shards(
        mut self,
        ds: &LabeledDataset,
        k: usize,
        p: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        let c = ds.num_classes();
        if c < 2 {
            return Err(DataError::InvalidParams("non-IID split needs >= 2 classes".into()));
        }
        let lo = 1.0 / c as f64;
        if !(p >= lo - 1e-12 && p <= 1.0) {
            return Err(DataError::InvalidParams(format!(
                "non-IID degree p = {p} outside [{lo}, 1]"
            )));
        }
        if k < c {
            return Err(DataError::InvalidParams(format!(
                "non-IID split needs at least {c} clients, got {k}"
            )));
        }
        let groups: Vec<Vec<usize>> = (0..c)
            .map(|g| (0..k).filter(|client| client % c == g).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shards = vec![Vec::new(); k];
        for idx in self.unassigned(ds.len()) {
            let home = ds.labels()[idx];
            let group = if rng.random::<f64>() < p {
                home
            } else {
                // uniform over the other C - 1 groups
                let g = rng.random_range(0..c - 1);
                if g >= home {
                    g + 1
                } else {
                    g
                }
            };
            let members = &groups[group];
            shards[members[rng.random_range(0..members.len())]].push(idx);
        }
        self.shards = shards;
        Ok(self)
    }
}

/// Uniformly samples `n_root` indices as the server's root set.
pub fn split_root(ds: &LabeledDataset, n_root: usize, seed: u64) -> Result<Partition, DataError> {
    if n_root >= ds.len() && n_root > 0 {
        return Err(DataError::InvalidParams(format!(
            "root set of {n_root} leaves no client data out of {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n_root);
    order.sort_unstable();
    Ok(Partition {
        shards: Vec::new(),
        root_indices: order,
    })
}

/// Root set biased toward class 0: a class-0 sample has weight `p`, every other
/// sample `(1 - p) / (C - 1)`; drawn without replacement.
pub fn split_root_noniid(
    ds: &LabeledDataset,
    n_root: usize,
    p: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    if n_root >= ds.len() && n_root > 0 {
        return Err(DataError::InvalidParams(format!(
            "root set of {n_root} leaves no client data out of {}",
            ds.len()
        )));
    }
    let c = ds.num_classes().max(2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Efraimidis-Spirakis weighted sampling: keep the n_root largest u^(1/w).
    let mut keyed: Vec<(f64, usize)> = ds
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let w = if y == 0 { p } else { (1.0 - p) / (c - 1.0) }.max(1e-12);
            (rng.random::<f64>().powf(1.0 / w), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut root: Vec<usize> = keyed.into_iter().take(n_root).map(|(_, i)| i).collect();
    root.sort_unstable();
    Ok(Partition {
        shards: Vec::new(),
        root_indices: root,
    })
}

pub fn partition_iid(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Partition, DataError> {
    Partition::default().with_iid_shards(ds, k, seed)
}

pub fn partition_noniid(
    ds: &LabeledDataset,
    k: usize,
    p: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    Partition::default().with_noniid_shards(ds, k, p, seed)
}
