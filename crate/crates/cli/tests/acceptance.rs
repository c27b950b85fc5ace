//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedabc::data::{class_counts, label_entropy, make_blobs, partition_dirichlet, PartitionSpec, Sample};
use fedabc::federation::aggregate;
use fedabc::loss::{bce, client_empirical_loss, fedabc_term, sigmoid, softmax_ce, ClassKind, ClassPresence, LossConfig, PROB_EPS};
use fedabc::nn::{backward, forward, ModelParams};
use fedabc::rng;
use fedabc_cli::{execute, parse_str, run_experiment, ExperimentConfig, RunOutput};
use ndarray::Array2;
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    if took <= limit {
        Ok(took)
    } else {
        Err(format!("took {took:.1?}, limit {limit:.0?}"))
    }
}

fn loss_closed_forms() -> Verdict {
    let ln2 = std::f64::consts::LN_2;
    let ln10 = std::f64::consts::LN_10;
    let unfiltered = LossConfig {
        focal_exponent: 2.0,
        enable_undersampling: false,
        enable_hard_mining: true,
        ..LossConfig::MNIST
    };
    let a = bce(0.5, true);
    let b = fedabc_term(0.5, true, ClassKind::Present, &unfiltered).unwrap().loss;
    let (c, _) = softmax_ce(Array2::zeros((1, 10)).view(), &[3]).unwrap();
    let errs = [(a - ln2).abs(), (b - 0.25 * ln2).abs(), (c - ln10).abs()];
    check(
        errs.iter().all(|e| *e <= 1e-9),
        format!("abs errors {:.1e} {:.1e} {:.1e}", errs[0], errs[1], errs[2]),
    )
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradient_checks() -> Verdict {
    let started = Instant::now();
    let mut r = rng::seeded(31);

    let h = 1e-6;
    let mut term_cases = 0;
    let mut term_worst: f64 = 0.0;
    while term_cases < 200 {
        let q: f64 = r.random_range(0.05..0.95);
        let z = (q / (1.0 - q)).ln();
        let (positive, kind) = match r.random_range(0..3) {
            0 => (true, ClassKind::Present),
            1 => (false, ClassKind::Present),
            _ => (false, ClassKind::Absent),
        };
        let cfg = LossConfig {
            focal_exponent: r.random_range(0.0..4.0),
            ..LossConfig::CIFAR10
        };
        let thr = match (positive, kind) {
            (true, _) => cfg.m_p,
            (false, ClassKind::Present) => cfg.m_n,
            (false, ClassKind::Absent) => cfg.m_nn,
        };
        let q0 = sigmoid(z).unwrap();
        if (q0 - thr).abs() < 1e-3 {
            continue;
        }
        let loss = |z: f64| fedabc_term(sigmoid(z).unwrap(), positive, kind, &cfg).unwrap().loss;
        let numeric = (loss(z + h) - loss(z - h)) / (2.0 * h);
        let analytic = fedabc_term(q0, positive, kind, &cfg).unwrap().dloss_dlogit;
        term_worst = term_worst.max(rel_err(analytic, numeric, 1e-8));
        term_cases += 1;
    }

    let h = 1e-5;
    let mut net_cases = 0;
    let mut net_worst: f64 = 0.0;
    let mut case = 0u64;
    while net_cases < 200 {
        case += 1;
        let widths = [r.random_range(2..6), r.random_range(2..7), r.random_range(2..7), r.random_range(2..5)];
        let params = ModelParams::init(&widths, &mut rng::seeded(1000 + case)).unwrap();
        let batch = r.random_range(1..5);
        let x = Array2::from_shape_fn((batch, widths[0]), |_| r.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((batch, widths[3]), |_| r.random_range(-1.0..1.0));
        let trace = forward(&params, x.view()).unwrap();
        if trace.pre_activations[..2].iter().any(|z| z.iter().any(|v| v.abs() < 1e-4)) {
            continue;
        }
        let grads = backward(&params, &trace, g.view()).unwrap().to_flat();
        let flat = params.to_flat();
        let objective = |p: &[f64]| {
            let m = ModelParams::from_flat(&widths, p).unwrap();
            (forward(&m, x.view()).unwrap().logits() * &g).sum()
        };
        for _ in 0..5 {
            let k = r.random_range(0..flat.len());
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[k] += h;
            minus[k] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            net_worst = net_worst.max(rel_err(grads[k], numeric, 1e-8));
            net_cases += 1;
        }
    }
    let took = match within(Duration::from_secs(10), started) {
        Ok(t) => t,
        Err(e) => return Fail(e),
    };
    check(
        term_worst <= 1e-6 && net_worst <= 1e-4,
        format!("{term_cases} term cases worst {term_worst:.1e}, {net_cases} network cases worst {net_worst:.1e}, {took:.1?}"),
    )
}

fn filtering_semantics() -> Verdict {
    let cfg = LossConfig::CIFAR10;
    let spot = [
        (0.9, true, ClassKind::Present, false),
        (0.25, false, ClassKind::Absent, false),
        (0.25, false, ClassKind::Present, true),
    ];
    for (q, positive, kind, nonzero) in spot {
        let t = fedabc_term(q, positive, kind, &cfg).unwrap();
        let is_zero = t.loss == 0.0 && t.dloss_dlogit == 0.0 && !t.kept;
        if is_zero == nonzero || (nonzero && (t.loss == 0.0 || t.dloss_dlogit == 0.0)) {
            return Fail(format!("q={q} positive={positive} {kind:?}: {t:?}"));
        }
    }
    let branches = [
        (true, ClassKind::Present, cfg.m_p),
        (false, ClassKind::Present, cfg.m_n),
        (false, ClassKind::Absent, cfg.m_nn),
    ];
    let mut points = 0;
    for (positive, kind, thr) in branches {
        for i in 0..1000 {
            let q = (i as f64 + 0.5) / 1000.0;
            let t = fedabc_term(q, positive, kind, &cfg).unwrap();
            let should_keep = if positive { q < thr } else { q > thr };
            let zero = t.loss == 0.0 && t.dloss_dlogit == 0.0;
            if t.kept != should_keep || zero == should_keep {
                return Fail(format!("q={q} positive={positive} {kind:?}: {t:?}"));
            }
            points += 1;
        }
    }
    Pass(format!("3 spot checks, {points} grid points"))
}

/// `Σ_i [-ln q_{i,y_i} - Σ_{c≠y_i} ln(1 - q_{i,c})] / B` with the shared clamp.
fn split_bce(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (b, c) = logits.dim();
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    let mut grads = Array2::zeros((b, c));
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..c {
            let q = sigmoid(logits[[i, k]]).unwrap();
            let qc = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if k == y {
                total += -qc.ln();
                grads[[i, k]] = (q - 1.0) * scale;
            } else {
                total += -(1.0 - qc).ln();
                grads[[i, k]] = q * scale;
            }
        }
    }
    (total * scale, grads)
}

fn same_bits(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> bool {
    let a: Vec<u64> = a.into_iter().map(f64::to_bits).collect();
    let b: Vec<u64> = b.into_iter().map(f64::to_bits).collect();
    a == b
}

fn small_config(extra: &[&str]) -> ExperimentConfig {
    let base = "dataset.per_class = 60\ndataset.test_per_class = 30\neval.iid_per_class = 20\n\
                model.hidden = 32\npartition.num_clients = 5\nfederation.rounds = 4\nrun.seeds = 3\n";
    parse_str(base, &extra.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
}

fn reduction_identities() -> Verdict {
    let plain = LossConfig::CIFAR10.plain();
    let mut r = rng::seeded(5);
    for case in 0..200 {
        let b = r.random_range(1..9);
        let c = r.random_range(2..8);
        let logits = Array2::from_shape_fn((b, c), |_| r.random_range(-12.0..12.0));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let presence = ClassPresence::from_labels(labels.iter().copied(), c).unwrap();
        let got = client_empirical_loss(logits.view(), &labels, &presence, &plain).unwrap();
        let (want, want_grads) = split_bce(&logits, &labels);
        if got.loss_value.to_bits() != want.to_bits() || !same_bits(got.logit_grads.iter().copied(), want_grads.iter().copied()) {
            return Fail(format!("case {case}: loss {} vs split-BCE {want}", got.loss_value));
        }
    }
    let prox = execute(&small_config(&["strategy.kind=fedprox", "strategy.mu=0"])).unwrap();
    let avg = execute(&small_config(&["strategy.kind=fedavg"])).unwrap();
    let (p, a) = (&prox.seeds[0].output, &avg.seeds[0].output);
    let models_equal = same_bits(p.global.iter().copied(), a.global.iter().copied())
        && p.personalized.iter().zip(&a.personalized).all(|(x, y)| same_bits(x.iter().copied(), y.iter().copied()));
    let metrics_equal = p.metrics.iter().zip(&a.metrics).all(|(x, y)| {
        same_bits(
            [x.pfl_accuracy, x.drift_score, x.global_model_pfl_accuracy, x.mean_train_loss],
            [y.pfl_accuracy, y.drift_score, y.global_model_pfl_accuracy, y.mean_train_loss],
        )
    });
    check(
        models_equal && metrics_equal && p.metrics.len() == a.metrics.len(),
        format!("200 random batches match split-BCE bitwise; FedProx(0) vs FedAvg models equal: {models_equal}, metrics equal: {metrics_equal}"),
    )
}

fn partition_invariants() -> Verdict {
    let started = Instant::now();
    let mut data = make_blobs(10, 120, 10, 0.2, 99).unwrap();
    for (k, s) in data.iter_mut().enumerate() {
        s.features[0] = k as f64;
    }
    let id = |s: &Sample| s.features[0] as usize;
    let mut mean_entropy = BTreeMap::new();
    for alpha in [0.1, 1.0] {
        let mut total = 0.0;
        for seed in 0..50 {
            let clients = match partition_dirichlet(&data, 10, &PartitionSpec::new(alpha, 20, seed)) {
                Ok(c) => c,
                Err(e) => return Fail(format!("alpha {alpha} seed {seed}: {e}")),
            };
            let mut seen = vec![0u32; data.len()];
            for c in &clients {
                for s in c.train.iter().chain(&c.test) {
                    seen[id(s)] += 1;
                }
            }
            if seen.iter().any(|&n| n != 1) {
                return Fail(format!("alpha {alpha} seed {seed}: sample missing or duplicated"));
            }
            let per_client: f64 = clients
                .iter()
                .map(|c| {
                    let mut counts = class_counts(&c.train, 10);
                    for (k, n) in class_counts(&c.test, 10).into_iter().enumerate() {
                        counts[k] += n;
                    }
                    label_entropy(&counts)
                })
                .sum::<f64>()
                / clients.len() as f64;
            total += per_client;
        }
        mean_entropy.insert(alpha.to_string(), total / 50.0);
    }
    let took = match within(Duration::from_secs(30), started) {
        Ok(t) => t,
        Err(e) => return Fail(e),
    };
    let (lo, hi) = (mean_entropy["0.1"], mean_entropy["1"]);
    check(
        lo < hi,
        format!("100 partitions complete and disjoint; mean entropy {lo:.4} (alpha 0.1) vs {hi:.4} (alpha 1.0), {took:.1?}"),
    )
}

fn aggregation_oracle() -> Verdict {
    let mut r = rng::seeded(17);
    for case in 0..20 {
        let widths = [r.random_range(1..6), r.random_range(1..8), r.random_range(1..5)];
        let k = r.random_range(1..7);
        let models: Vec<ModelParams> = (0..k).map(|_| ModelParams::init(&widths, &mut r).unwrap()).collect();
        let sizes: Vec<usize> = (0..k).map(|_| r.random_range(1..200)).collect();
        let pairs: Vec<_> = models.iter().zip(&sizes).map(|(m, &n)| (m, n)).collect();
        let got = aggregate(&pairs).unwrap().to_flat();
        let flats: Vec<Vec<f64>> = models.iter().map(ModelParams::to_flat).collect();
        let total: usize = sizes.iter().sum();
        for e in 0..got.len() {
            let mut want = 0.0;
            for (flat, &n) in flats.iter().zip(&sizes) {
                want += n as f64 / total as f64 * flat[e];
            }
            let lo = flats.iter().map(|f| f[e]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[e]).fold(f64::NEG_INFINITY, f64::max);
            if got[e].to_bits() != want.to_bits() {
                return Fail(format!("case {case} entry {e}: {} vs loop {want}", got[e]));
            }
            if !(lo <= got[e] && got[e] <= hi) {
                return Fail(format!("case {case} entry {e}: {} outside [{lo}, {hi}]", got[e]));
            }
        }
    }
    Pass("20 cases equal the loop oracle bitwise and stay in the convex hull".into())
}

fn blobs(extra: &[&str]) -> ExperimentConfig {
    let mut ov = vec![
        "dataset.kind=blobs",
        "dataset.classes=10",
        "dataset.dim=16",
        "partition.num_clients=8",
        "partition.alpha=0.3",
        "federation.rounds=30",
        "run.seeds=0,1,2,3,4",
    ];
    ov.extend_from_slice(extra);
    parse_str("", &ov.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
}

fn run(cfg: &ExperimentConfig) -> Result<RunOutput, String> {
    execute(cfg).map_err(|e| e.to_string())
}

fn end_to_end() -> Verdict {
    let started = Instant::now();
    let outcome = (|| -> Result<Verdict, String> {
        let avg = run(&blobs(&["strategy.kind=fedavg"]))?;
        let abc = run(&blobs(&["strategy.kind=fedabc"]))?;
        let local = run(&blobs(&["strategy.kind=local"]))?;
        let took = within(Duration::from_secs(300), started)?;
        let (pa, pb) = (avg.mean_pfl_accuracy(), abc.mean_pfl_accuracy());
        let (dl, db) = (local.mean_drift(), abc.mean_drift());
        let a = pa >= 0.90;
        let b = pb >= pa - 0.01;
        let c = dl < db;
        Ok(check(
            a && b && c,
            format!(
                "(a) fedavg pfl {pa:.4} >= 0.90: {a}; (b) fedabc pfl {pb:.4} >= fedavg - 0.01: {b}; \
                 (c) local drift {dl:.4} < fedabc drift {db:.4}: {c}; {took:.1?}"
            ),
        ))
    })();
    outcome.unwrap_or_else(Fail)
}

fn ablation_direction() -> Verdict {
    let outcome = (|| -> Result<Verdict, String> {
        let full = run(&blobs(&["partition.alpha=0.5", "strategy.kind=fedabc"]))?;
        let off = run(&blobs(&[
            "partition.alpha=0.5",
            "strategy.kind=fedabc",
            "loss.undersampling=false",
            "loss.hard_mining=false",
        ]))?;
        let (f, o) = (full.mean_pfl_accuracy(), off.mean_pfl_accuracy());
        Ok(check(
            f >= o - 0.005,
            format!("full {f:.4}, toggles off {o:.4}, signed difference {:+.4}", f - o),
        ))
    })();
    outcome.unwrap_or_else(Fail)
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let mut cfg = blobs(&["federation.rounds=5", "run.seeds=0,1"]);
        cfg.output_dir = dir.path().to_owned();
        if let Err(e) = run_experiment(&cfg) {
            return Fail(e.to_string());
        }
        files.push(std::fs::read(dir.path().join("metrics.csv")).unwrap());
    }
    check(files[0] == files[1], format!("two reruns, {} bytes each", files[0].len()))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDABC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_smoke() -> Verdict {
    let dir = mnist_dir();
    let names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    if !paths.iter().all(|p| p.is_file()) {
        return Skip(format!("IDX files not found in {}", dir.display()));
    }
    let started = Instant::now();
    let ov: Vec<String> = vec![
        "dataset.kind=mnist".into(),
        format!("dataset.train_images={}", paths[0].display()),
        format!("dataset.train_labels={}", paths[1].display()),
        format!("dataset.test_images={}", paths[2].display()),
        format!("dataset.test_labels={}", paths[3].display()),
        "partition.num_clients=5".into(),
        "federation.rounds=10".into(),
        "model.hidden=260,200".into(),
        "eval.iid_per_class=100".into(),
        "run.seeds=0".into(),
    ];
    let cfg = parse_str("", &ov).unwrap();
    let out = match run(&cfg) {
        Ok(o) => o,
        Err(e) => return Fail(e),
    };
    let took = match within(Duration::from_secs(900), started) {
        Ok(t) => t,
        Err(e) => return Fail(e),
    };
    let acc = out.mean_pfl_accuracy();
    check(acc >= 0.90, format!("fedabc pfl {acc:.4} >= 0.90, {took:.1?}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("loss closed forms", loss_closed_forms),
        ("gradient checks", gradient_checks),
        ("filtering semantics", filtering_semantics),
        ("reduction identities", reduction_identities),
        ("partition invariants", partition_invariants),
        ("aggregation oracle", aggregation_oracle),
        ("scaled end-to-end on blobs", end_to_end),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
        ("mnist smoke", mnist_smoke),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{}] {name}: {detail}", k + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
