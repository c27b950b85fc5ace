//! Seeded experiment runs and their on-disk artifacts.
//!
//! A run directory holds:
//!
//! - `metrics.csv`: one row per (seed, round), then a `summary` row of
//!   final-round mean ± population standard deviation over seeds.
//! - `partition_manifest.txt`: one manifest per seed, back to back.
//! - `checkpoint_seed<N>.bin`: final global and personalized models.
//! - `provenance.txt`: artifact version and the fully resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use fedabc::data::{build_iid_test, load_mnist, make_blobs, partition_dirichlet, PartitionManifest};
use fedabc::federation::{run_federation, Checkpoint, FederationOutput};
use fedabc::{rng, MetricsRecord, PartitionSpec, Sample};
use rayon::prelude::*;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "partition_manifest.txt";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const SUMMARY_SEED: &str = "summary";

/// Columns before the per-class block.
pub const LEADING_COLUMNS: [&str; 8] = [
    "seed",
    "round",
    "strategy",
    "alpha",
    "pfl_acc",
    "drift",
    "global_pfl_acc",
    "mean_train_loss",
];

/// Column after the per-class block.
pub const TRAILING_COLUMN: &str = "pfl_acc_macro";

pub fn metrics_header(num_classes: usize) -> Vec<String> {
    LEADING_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..num_classes).map(|k| format!("per_class_acc_{k}")))
        .chain([TRAILING_COLUMN.to_string()])
        .collect()
}

pub fn checkpoint_file(seed: u64) -> String {
    format!("checkpoint_seed{seed}.bin")
}

pub fn provenance(cfg: &ExperimentConfig) -> String {
    format!("# {} {}\n{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), cfg.emit())
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub manifest: PartitionManifest,
    pub output: FederationOutput,
}

impl SeedRun {
    pub fn final_metrics(&self) -> &MetricsRecord {
        self.output.metrics.last().expect("rounds >= 1")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub strategy: &'static str,
    pub alpha: f64,
    pub num_classes: usize,
    pub seeds: Vec<SeedRun>,
    pub provenance: String,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn pm((mean, std): (f64, f64)) -> String {
    format!("{mean:.6}±{std:.6}")
}

impl RunOutput {
    /// Seed-mean final PFL accuracy.
    pub fn mean_pfl_accuracy(&self) -> f64 {
        self.final_column(|m| m.pfl_accuracy).0
    }

    /// Seed-mean final drift score.
    pub fn mean_drift(&self) -> f64 {
        self.final_column(|m| m.drift_score).0
    }

    pub fn final_column(&self, f: impl Fn(&MetricsRecord) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.seeds.iter().map(|s| f(s.final_metrics())).collect();
        mean_std(&values)
    }

    fn row_cells(&self, seed: String, m: &MetricsRecord, cell: impl Fn(&dyn Fn(&MetricsRecord) -> f64) -> String) -> Vec<String> {
        let mut row = vec![
            seed,
            m.round.to_string(),
            self.strategy.to_string(),
            self.alpha.to_string(),
            cell(&|m| m.pfl_accuracy),
            cell(&|m| m.drift_score),
            cell(&|m| m.global_model_pfl_accuracy),
            cell(&|m| m.mean_train_loss),
        ];
        for k in 0..self.num_classes {
            row.push(cell(&move |m: &MetricsRecord| m.per_class_accuracy[k]));
        }
        row.push(cell(&|m| m.pfl_accuracy_macro));
        row
    }

    /// Header, per-round rows and summary row.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![metrics_header(self.num_classes)];
        for s in &self.seeds {
            for m in &s.output.metrics {
                rows.push(self.row_cells(s.seed.to_string(), m, |f| num(f(m))));
            }
        }
        rows.push(self.summary_row());
        rows
    }

    pub fn summary_row(&self) -> Vec<String> {
        let last = self.seeds[0].final_metrics();
        self.row_cells(SUMMARY_SEED.to_string(), last, |f| pm(self.final_column(f)))
    }

    pub fn metrics_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.write_record(&row).map_err(|e| CliError::Io {
                path: self.dir.join(METRICS_FILE),
                detail: e.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io {
            path: self.dir.join(METRICS_FILE),
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("ascii and utf-8 only"))
    }

    pub fn write(&self) -> Result<(), CliError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |e: std::io::Error| CliError::Io {
                path,
                detail: e.to_string(),
            }
        };
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        let metrics = self.dir.join(METRICS_FILE);
        fs::write(&metrics, self.metrics_csv()?).map_err(io(&metrics))?;
        let manifests: Vec<String> = self.seeds.iter().map(|s| s.manifest.to_string()).collect();
        let manifest = self.dir.join(MANIFEST_FILE);
        fs::write(&manifest, manifests.join("\n")).map_err(io(&manifest))?;
        let prov = self.dir.join(PROVENANCE_FILE);
        fs::write(&prov, &self.provenance).map_err(io(&prov))?;
        for s in &self.seeds {
            let path = self.dir.join(checkpoint_file(s.seed));
            Checkpoint {
                global: s.output.global.clone(),
                personalized: s.output.personalized.clone(),
            }
            .save(&path)
            .map_err(|source| CliError::Runtime {
                seed: Some(s.seed),
                source,
            })?;
        }
        Ok(())
    }
}

/// Train and test pools for one seed.
enum Pools {
    Fixed(Vec<Sample>, Vec<Sample>),
    PerSeed,
}

fn load_pools(cfg: &ExperimentConfig) -> Result<Pools, CliError> {
    match &cfg.dataset {
        DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (train, test) = load_mnist(train_images, train_labels, test_images, test_labels)
                .map_err(|source| CliError::Runtime { seed: None, source })?;
            Ok(Pools::Fixed(train, test))
        }
        DatasetConfig::Blobs { .. } => Ok(Pools::PerSeed),
    }
}

fn blobs_for_seed(cfg: &ExperimentConfig, seed: u64) -> fedabc::Result<(Vec<Sample>, Vec<Sample>)> {
    let DatasetConfig::Blobs {
        classes,
        per_class,
        dim,
        spread,
        test_per_class,
    } = cfg.dataset
    else {
        unreachable!("blobs only");
    };
    let train = make_blobs(classes, per_class, dim, spread, seed)?;
    let test = make_blobs(classes, test_per_class, dim, spread, rng::derive_seed(seed, &[rng::stream::IID]))?;
    Ok((train, test))
}

fn run_seed(cfg: &ExperimentConfig, pools: &Pools, seed: u64) -> fedabc::Result<SeedRun> {
    let generated;
    let (train, test) = match pools {
        Pools::Fixed(train, test) => (train, test),
        Pools::PerSeed => {
            generated = blobs_for_seed(cfg, seed)?;
            (&generated.0, &generated.1)
        }
    };
    let classes = cfg.num_classes();
    let spec = PartitionSpec { seed, ..cfg.partition };
    let clients = partition_dirichlet(train, classes, &spec)?;
    let iid = build_iid_test(test, classes, cfg.iid_per_class, seed)?;
    let mut federation = cfg.federation.clone();
    federation.seed = seed;
    let output = run_federation(&clients, &cfg.strategy(), &federation, &iid)?;
    Ok(SeedRun {
        seed,
        manifest: PartitionManifest::from_partition(&spec, &clients),
        output,
    })
}

/// Runs every seed without touching the filesystem (beyond reading MNIST).
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let pools = load_pools(cfg)?;
    let one = |&seed: &u64| run_seed(cfg, &pools, seed).map_err(|source| CliError::Runtime { seed: Some(seed), source });
    let seeds = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(one).collect::<Result<Vec<_>, _>>()?
    } else {
        cfg.seeds.iter().map(one).collect::<Result<Vec<_>, _>>()?
    };
    Ok(RunOutput {
        dir: cfg.output_dir.clone(),
        strategy: cfg.strategy().name(),
        alpha: cfg.partition.alpha,
        num_classes: cfg.num_classes(),
        seeds,
        provenance: provenance(cfg),
    })
}

/// Runs every seed and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let out = execute(cfg)?;
    out.write()?;
    Ok(out)
}

/// Ablation arm names, in grid order.
pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("no_undersampling", false, true),
    ("no_hard_mining", true, false),
    ("plain", false, false),
];

/// The four FedABC configs of the {undersampling} × {hard mining} grid, each
/// writing to its own subdirectory of `base.output_dir`.
pub fn ablation_grid(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    ABLATION_ARMS
        .iter()
        .map(|&(name, undersampling, hard_mining)| {
            let mut cfg = base.clone();
            cfg.strategy = crate::config::StrategyKind::FedAbc;
            cfg.loss.enable_undersampling = undersampling;
            cfg.loss.enable_hard_mining = hard_mining;
            cfg.output_dir = base.output_dir.join(name);
            (name, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_str;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn grid_has_four_distinct_arms() {
        let base = parse_str("strategy.kind = fedavg\nrun.output_dir = out", &[]).unwrap();
        let grid = ablation_grid(&base);
        assert_eq!(grid.len(), 4);
        let mut toggles: Vec<_> = grid
            .iter()
            .map(|(_, c)| (c.loss.enable_undersampling, c.loss.enable_hard_mining))
            .collect();
        toggles.sort();
        toggles.dedup();
        assert_eq!(toggles.len(), 4);
        assert!(grid.iter().all(|(_, c)| c.strategy().name() == "fedabc"));
        assert_eq!(grid[3].1.output_dir, Path::new("out/plain"));
    }

    #[test]
    fn header_layout() {
        let h = metrics_header(3);
        assert_eq!(h.len(), 8 + 3 + 1);
        assert_eq!(h[8], "per_class_acc_0");
        assert_eq!(h.last().unwrap(), TRAILING_COLUMN);
    }
}
