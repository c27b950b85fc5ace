//! Per-class binary losses for one-vs-all training, plus softmax
//! cross-entropy for the softmax baselines.
//!
//! Each class column of the logit matrix is an independent binary problem:
//! the target is 1 for samples of that class and 0 otherwise. Which loss
//! applies to a column depends on whether the client has any positive
//! training samples for that class ([`ClassKind`]).
//!
//! Per term, with `q = sigmoid(logit)` and focal exponent `s`:
//!
//! | class kind | target | kept when   | loss                   |
//! |------------|--------|-------------|------------------------|
//! | present    | 1      | `q < m_p`   | `-(1-q)^s · ln q`      |
//! | present    | 0      | `q > m_n`   | `-q^s · ln(1-q)`       |
//! | absent     | 0      | `q > m_nn`  | `-q^s · ln(1-q)`       |
//!
//! Terms outside their keep region contribute exactly zero loss and
//! gradient. The keep mask is treated as a constant when differentiating.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Numerically stable logistic function.
///
/// The result is kept strictly inside `(0, 1)` so downstream logarithms
/// stay finite even for saturated logits.
pub fn sigmoid(logit: f64) -> Result<f64> {
    if !logit.is_finite() {
        return Err(Error::NonFinite("logit"));
    }
    let q = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    Ok(q.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Plain binary cross-entropy `-[y ln q + (1-y) ln(1-q)]`.
pub fn bce(q: f64, positive: bool) -> f64 {
    let q = clamp_prob(q);
    let y = if positive { 1.0 } else { 0.0 };
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

/// Whether a client has positive training samples for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKind {
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Positives are kept while `q < m_p`.
    pub m_p: f64,
    /// Negatives of present classes are kept while `q > m_n`.
    pub m_n: f64,
    /// Negatives of absent classes are kept while `q > m_nn`.
    pub m_nn: f64,
    pub focal_exponent: f64,
    pub enable_undersampling: bool,
    pub enable_hard_mining: bool,
}

impl LossConfig {
    /// Thresholds used for the MNIST experiments.
    pub const MNIST: Self = Self {
        m_p: 0.75,
        m_n: 0.25,
        m_nn: 0.3,
        focal_exponent: 2.0,
        enable_undersampling: true,
        enable_hard_mining: true,
    };

    /// Thresholds used for the CIFAR-10 experiments.
    pub const CIFAR10: Self = Self {
        m_p: 0.85,
        m_n: 0.2,
        m_nn: 0.3,
        focal_exponent: 2.0,
        enable_undersampling: true,
        enable_hard_mining: true,
    };

    /// Both imbalance techniques switched off: the loss reduces to BCE on
    /// present classes and the negative-only term on absent classes.
    pub fn plain(self) -> Self {
        Self {
            enable_undersampling: false,
            enable_hard_mining: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} = {v} out of range")))
            }
        };
        check(self.m_p > 0.0 && self.m_p <= 1.0, "m_p", self.m_p)?;
        check((0.0..1.0).contains(&self.m_n), "m_n", self.m_n)?;
        check((0.0..1.0).contains(&self.m_nn), "m_nn", self.m_nn)?;
        check(
            self.focal_exponent >= 0.0 && self.focal_exponent.is_finite(),
            "focal_exponent",
            self.focal_exponent,
        )
    }

    fn exponent(&self) -> f64 {
        if self.enable_hard_mining {
            self.focal_exponent
        } else {
            0.0
        }
    }

    /// Strict inequalities: a probability exactly on a threshold is dropped.
    fn keeps(&self, q: f64, positive: bool, kind: ClassKind) -> bool {
        if !self.enable_undersampling {
            return true;
        }
        match (positive, kind) {
            (true, _) => q < self.m_p,
            (false, ClassKind::Present) => q > self.m_n,
            (false, ClassKind::Absent) => q > self.m_nn,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::MNIST
    }
}

/// Partition of the class ids into those with and without local positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPresence {
    present: BTreeSet<usize>,
    absent: BTreeSet<usize>,
}

impl ClassPresence {
    /// Derives presence from a client's training labels.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let mut present = BTreeSet::new();
        for label in labels {
            if label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} outside 0..{num_classes}"
                )));
            }
            present.insert(label);
        }
        let absent = (0..num_classes).filter(|c| !present.contains(c)).collect();
        Ok(Self { present, absent })
    }

    pub fn all_present(num_classes: usize) -> Self {
        Self {
            present: (0..num_classes).collect(),
            absent: BTreeSet::new(),
        }
    }

    pub fn present(&self) -> &BTreeSet<usize> {
        &self.present
    }

    pub fn absent(&self) -> &BTreeSet<usize> {
        &self.absent
    }

    pub fn num_classes(&self) -> usize {
        self.present.len() + self.absent.len()
    }

    pub fn kind(&self, class: usize) -> ClassKind {
        if self.present.contains(&class) {
            ClassKind::Present
        } else {
            ClassKind::Absent
        }
    }
}

/// Outcome of one (sample, class) loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermOutcome {
    pub loss: f64,
    /// Derivative of `loss` with respect to the logit behind `q`.
    pub dloss_dlogit: f64,
    pub kept: bool,
}

impl TermOutcome {
    const DROPPED: Self = Self {
        loss: 0.0,
        dloss_dlogit: 0.0,
        kept: false,
    };
}

/// `a · ln(b)`, taking `0 · ln(0)` as 0.
fn mul_ln(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

/// One loss term for probability `q` of a class column.
pub fn fedabc_term(q: f64, positive: bool, kind: ClassKind, cfg: &LossConfig) -> Result<TermOutcome> {
    if positive && kind == ClassKind::Absent {
        return Err(Error::InvalidArgument(
            "positive target for a class without local positives".into(),
        ));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("probability {q} outside [0, 1]")));
    }
    if !cfg.keeps(q, positive, kind) {
        return Ok(TermOutcome::DROPPED);
    }
    let s = cfg.exponent();
    let qc = clamp_prob(q);
    let outcome = if positive {
        // L = -(1-q)^s ln q
        // dL/dz = s·q·(1-q)^s·ln q - (1-q)^(s+1)
        let loss = (1.0 - qc).powf(s) * -qc.ln();
        let grad = s * mul_ln(q * (1.0 - q).powf(s), q) - (1.0 - q).powf(s + 1.0);
        TermOutcome {
            loss,
            dloss_dlogit: grad,
            kept: true,
        }
    } else {
        // L = -q^s ln(1-q)
        // dL/dz = q^(s+1) - s·q^s·(1-q)·ln(1-q)
        let loss = qc.powf(s) * -(1.0 - qc).ln();
        let grad = q.powf(s + 1.0) - s * mul_ln(q.powf(s) * (1.0 - q), 1.0 - q);
        TermOutcome {
            loss,
            dloss_dlogit: grad,
            kept: true,
        }
    };
    Ok(outcome)
}

/// Per-class counters for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KeptCounts {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone)]
pub struct BatchLossResult {
    /// Sum of kept terms divided by the batch size.
    pub loss_value: f64,
    /// `[B × C]`, already divided by the batch size.
    pub logit_grads: Array2<f64>,
    pub kept_counts: Vec<KeptCounts>,
    /// Number of terms that survived filtering.
    pub total_terms: usize,
}

/// Client loss over one mini-batch.
///
/// Terms are accumulated sample-major, class-minor. The normalizer is the
/// batch size regardless of how many terms were kept.
pub fn client_empirical_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    presence: &ClassPresence,
    cfg: &LossConfig,
) -> Result<BatchLossResult> {
    let (batch, classes) = logits.dim();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if presence.num_classes() != classes {
        return Err(Error::Shape(format!(
            "presence covers {} classes, logits have {classes}",
            presence.num_classes()
        )));
    }
    let scale = 1.0 / batch as f64;
    let mut logit_grads = Array2::zeros((batch, classes));
    let mut kept_counts = vec![KeptCounts::default(); classes];
    let mut total = 0.0;
    let mut total_terms = 0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside 0..{classes}"
            )));
        }
        for class in 0..classes {
            let kind = presence.kind(class);
            let positive = label == class;
            if positive && kind == ClassKind::Absent {
                return Err(Error::PresenceViolation { class });
            }
            let term = fedabc_term(sigmoid(logits[[i, class]])?, positive, kind, cfg)?;
            if term.kept {
                total += term.loss;
                logit_grads[[i, class]] = term.dloss_dlogit * scale;
                total_terms += 1;
                if positive {
                    kept_counts[class].positives += 1;
                } else {
                    kept_counts[class].negatives += 1;
                }
            }
        }
    }
    Ok(BatchLossResult {
        loss_value: total * scale,
        logit_grads,
        kept_counts,
        total_terms,
    })
}

/// Mean softmax cross-entropy and its logit gradient `(softmax - onehot)/B`.
pub fn softmax_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (batch, classes) = logits.dim();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    let scale = 1.0 / batch as f64;
    let mut grads = Array2::zeros((batch, classes));
    let mut total = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside 0..{classes}"
            )));
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if !max.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        total += log_norm - row[label];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - log_norm).exp();
            grads[[i, c]] = (p - if c == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok((total * scale, grads))
}
