//! Datasets: samples, synthetic blobs, MNIST IDX files, client partitions
//! and the class-balanced test set used for the drift score.

mod idx;
mod partition;

pub use idx::{load_mnist, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{
    parse_manifests, partition_dirichlet, ClientCounts, PartitionManifest, PartitionSpec, MANIFEST_HEADER, TEST_SOURCE,
};

use ndarray::Array2;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::ClassPresence;
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    /// Held out from the same allocation, stratified per class.
    pub test: Vec<Sample>,
    /// Derived from `train`.
    pub presence: ClassPresence,
}

impl ClientDataset {
    pub fn new(client_id: usize, train: Vec<Sample>, test: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let presence = ClassPresence::from_labels(train.iter().map(|s| s.label), num_classes)?;
        Ok(Self {
            client_id,
            train,
            test,
            presence,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.presence.num_classes()
    }
}

/// Class-balanced test set: every class has the same number of samples.
#[derive(Debug, Clone)]
pub struct IidTestSet {
    samples: Vec<Sample>,
    per_class: usize,
    num_classes: usize,
}

impl IidTestSet {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws `per_class` samples of every class without replacement.
pub fn build_iid_test(
    global_test: &[Sample],
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<IidTestSet> {
    let by_class = indices_by_class(global_test, num_classes)?;
    let mut rng = rng::derived(seed, &[stream::IID]);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                requested: per_class,
            });
        }
        let mut picked = index::sample(&mut rng, members.len(), per_class).into_vec();
        picked.sort_unstable();
        samples.extend(picked.into_iter().map(|k| global_test[members[k]].clone()));
    }
    Ok(IidTestSet {
        samples,
        per_class,
        num_classes,
    })
}

/// Distance of every blob center from the origin.
pub const BLOB_RADIUS: f64 = 1.0;

/// Gaussian blobs, `per_class` samples per class, ordered by class.
///
/// With `dim >= num_classes` class `c` is centered at `BLOB_RADIUS · e_c`
/// (vertices of a simplex); otherwise centers are spread evenly on a circle
/// in the first two coordinates. `spread` is the per-coordinate standard
/// deviation.
pub fn make_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Vec<Sample>> {
    if num_classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need >= 2 classes, >= 1 sample per class and dim >= 1 (got {num_classes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("blob spread {spread}")));
    }
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut center = vec![0.0; dim];
            if dim >= num_classes {
                center[c] = BLOB_RADIUS;
            } else if dim >= 2 {
                let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
                center[0] = BLOB_RADIUS * angle.cos();
                center[1] = BLOB_RADIUS * angle.sin();
            } else {
                center[0] = BLOB_RADIUS * c as f64;
            }
            center
        })
        .collect();
    let mut rng = rng::derived(seed, &[stream::BLOBS]);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + spread * noise
                })
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Ok(samples)
}

pub(crate) fn indices_by_class(samples: &[Sample], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (k, s) in samples.iter().enumerate() {
        let slot = by_class.get_mut(s.label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {} outside 0..{num_classes}", s.label))
        })?;
        slot.push(k);
    }
    Ok(by_class)
}

pub fn class_counts(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        if let Some(c) = counts.get_mut(s.label) {
            *c += 1;
        }
    }
    counts
}

/// Shannon entropy (nats) of a label histogram; 0 for an empty histogram.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Stacks features into a `[N × D]` matrix alongside the labels.
pub fn to_matrix<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for s in samples {
        match width {
            None => width = Some(s.features.len()),
            Some(w) if w != s.features.len() => {
                return Err(Error::Shape(format!(
                    "sample width {} != {w}",
                    s.features.len()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(&s.features);
        labels.push(s.label);
    }
    let width = width.unwrap_or(0);
    let matrix = Array2::from_shape_vec((labels.len(), width), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((matrix, labels))
}
