//! Class-wise Dirichlet partitioning.
//!
//! For every class a proportion vector `p ~ Dir(alpha · 1_m)` is drawn over
//! the `m` clients and the shuffled samples of that class are dealt out in
//! those proportions (largest-remainder rounding, so totals are exact). Each
//! client then holds out a per-class stratified share of its allocation as
//! its local test set.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::{class_counts, indices_by_class, ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};

/// Recorded in manifests: client test sets are carved from each client's own
/// allocation of the training pool.
pub const TEST_SOURCE: &str = "client_allocation";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

impl PartitionSpec {
    pub const DEFAULT_TEST_FRACTION: f64 = 1.0 / 6.0;

    pub fn new(alpha: f64, num_clients: usize, seed: u64) -> Self {
        Self {
            alpha,
            num_clients,
            seed,
            test_fraction: Self::DEFAULT_TEST_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha = {}", self.alpha)));
        }
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients = 0".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction = {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

fn dirichlet(alpha: f64, dims: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let draws: Vec<f64> = (0..dims).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // Every gamma draw underflowed; the limit is a point mass on one client.
        let mut p = vec![0.0; dims];
        p[rng.random_range(0..dims)] = 1.0;
        Ok(p)
    }
}

/// Splits `total` into integer shares proportional to `weights`, ties in the
/// remainder going to the lower index.
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut shares: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        shares[k] += 1;
    }
    shares
}

pub fn partition_dirichlet(data: &[Sample], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let m = spec.num_clients;
    if data.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover {m} clients",
            data.len()
        )));
    }
    let mut by_class = indices_by_class(data, num_classes)?;
    if let Some(class) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientSamples {
            class,
            available: 0,
            requested: 1,
        });
    }

    let mut rng = rng::derived(spec.seed, &[stream::PARTITION]);
    // allocation[client][class] = sample indices
    let mut allocation = vec![vec![Vec::new(); num_classes]; m];
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let p = dirichlet(spec.alpha, m, &mut rng)?;
        let shares = largest_remainder(members.len(), &p);
        let mut start = 0;
        for (client, &n) in shares.iter().enumerate() {
            allocation[client][class].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }

    repair_empty_clients(&mut allocation, &mut rng);

    allocation
        .into_iter()
        .enumerate()
        .map(|(client_id, per_class)| split_client(client_id, per_class, data, num_classes, spec.test_fraction))
        .collect()
}

fn total(per_class: &[Vec<usize>]) -> usize {
    per_class.iter().map(Vec::len).sum()
}

/// Moves one random sample from the largest client into every empty one.
fn repair_empty_clients(allocation: &mut [Vec<Vec<usize>>], rng: &mut Rng) {
    while let Some(empty) = allocation.iter().position(|c| total(c) == 0) {
        let largest = (0..allocation.len())
            .max_by(|&a, &b| total(&allocation[a]).cmp(&total(&allocation[b])).then(b.cmp(&a)))
            .expect("at least one client");
        let mut pick = rng.random_range(0..total(&allocation[largest]));
        let class = allocation[largest]
            .iter()
            .position(|members| {
                if pick < members.len() {
                    true
                } else {
                    pick -= members.len();
                    false
                }
            })
            .expect("pick within total");
        let sample = allocation[largest][class].remove(pick);
        allocation[empty][class].push(sample);
    }
}

fn split_client(
    client_id: usize,
    per_class: Vec<Vec<usize>>,
    data: &[Sample],
    num_classes: usize,
    test_fraction: f64,
) -> Result<ClientDataset> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in &per_class {
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).min(members.len());
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    if train_idx.is_empty() {
        // Local training needs at least one sample.
        let moved = test_idx.pop().expect("client allocation is non-empty");
        train_idx.push(moved);
    }
    let pick = |idx: &[usize]| idx.iter().map(|&k| data[k].clone()).collect::<Vec<_>>();
    ClientDataset::new(client_id, pick(&train_idx), pick(&test_idx), num_classes)
}

/// Per-client class counts of a partition, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCounts {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    pub alpha: f64,
    pub seed: u64,
    pub num_clients: usize,
    pub num_classes: usize,
    pub test_fraction: f64,
    pub test_source: String,
    pub clients: Vec<ClientCounts>,
}

impl PartitionManifest {
    pub fn from_partition(spec: &PartitionSpec, clients: &[ClientDataset]) -> Self {
        let num_classes = clients.first().map_or(0, ClientDataset::num_classes);
        Self {
            alpha: spec.alpha,
            seed: spec.seed,
            num_clients: clients.len(),
            num_classes,
            test_fraction: spec.test_fraction,
            test_source: TEST_SOURCE.to_string(),
            clients: clients
                .iter()
                .map(|c| ClientCounts {
                    client_id: c.client_id,
                    train: class_counts(&c.train, num_classes),
                    test: class_counts(&c.test, num_classes),
                })
                .collect(),
        }
    }
}

fn join(counts: &[usize]) -> String {
    let mut out = String::new();
    for (k, c) in counts.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "{c}");
    }
    out
}

/// Text layout:
///
/// ```text
/// # fedabc partition manifest
/// alpha = 0.3
/// seed = 7
/// num_clients = 2
/// num_classes = 3
/// test_fraction = 0.16666666666666666
/// test_source = client_allocation
/// client 0 train 10,0,4 test 2,0,1
/// client 1 train 0,12,5 test 0,2,1
/// ```
impl fmt::Display for PartitionManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{MANIFEST_HEADER}")?;
        writeln!(f, "alpha = {}", self.alpha)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "num_clients = {}", self.num_clients)?;
        writeln!(f, "num_classes = {}", self.num_classes)?;
        writeln!(f, "test_fraction = {}", self.test_fraction)?;
        writeln!(f, "test_source = {}", self.test_source)?;
        for c in &self.clients {
            writeln!(f, "client {} train {} test {}", c.client_id, join(&c.train), join(&c.test))?;
        }
        Ok(())
    }
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "partition manifest",
        detail: detail.into(),
    }
}

fn parse_counts(s: &str, lineno: usize) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.parse().map_err(|_| format_err(format!("line {lineno}: bad count {v:?}"))))
        .collect()
}

impl FromStr for PartitionManifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut clients = Vec::new();
        for (k, line) in s.lines().enumerate() {
            let lineno = k + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("client ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                match parts.as_slice() {
                    [id, "train", train, "test", test] => clients.push(ClientCounts {
                        client_id: id
                            .parse()
                            .map_err(|_| format_err(format!("line {lineno}: bad client id")))?,
                        train: parse_counts(train, lineno)?,
                        test: parse_counts(test, lineno)?,
                    }),
                    _ => return Err(format_err(format!("line {lineno}: bad client record"))),
                }
            } else if let Some((key, value)) = line.split_once('=') {
                header.insert(key.trim().to_string(), value.trim().to_string());
            } else {
                return Err(format_err(format!("line {lineno}: unrecognized")));
            }
        }
        fn field<T: FromStr>(h: &std::collections::HashMap<String, String>, key: &str) -> Result<T> {
            h.get(key)
                .ok_or_else(|| format_err(format!("missing {key}")))?
                .parse()
                .map_err(|_| format_err(format!("bad {key}")))
        }
        Ok(Self {
            alpha: field(&header, "alpha")?,
            seed: field(&header, "seed")?,
            num_clients: field(&header, "num_clients")?,
            num_classes: field(&header, "num_classes")?,
            test_fraction: field(&header, "test_fraction")?,
            test_source: field(&header, "test_source")?,
            clients,
        })
    }
}

/// Header line that starts every manifest.
pub const MANIFEST_HEADER: &str = "# fedabc partition manifest";

/// Parses a file holding several manifests back to back, one per seed.
pub fn parse_manifests(text: &str) -> Result<Vec<PartitionManifest>> {
    let mut blocks: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim() == MANIFEST_HEADER || blocks.is_empty() {
            blocks.push(String::new());
        }
        let block = blocks.last_mut().expect("pushed above");
        block.push_str(line);
        block.push('\n');
    }
    blocks
        .iter()
        .filter(|b| b.lines().any(|l| !l.trim().is_empty()))
        .map(|b| b.parse())
        .collect()
}
