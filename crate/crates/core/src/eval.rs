//! Evaluation metrics.
//!
//! Predictions take the argmax over the per-class outputs, lowest class id
//! on ties. Sigmoid and softmax are both monotone per sample, so the argmax
//! is taken directly over the logits.

use rayon::prelude::*;

use crate::data::{to_matrix, ClientDataset, IidTestSet, Sample};
use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams};

/// Metrics for one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// Personalized models on their own clients' test sets, micro-averaged.
    pub pfl_accuracy: f64,
    /// Same, macro-averaged over clients with a non-empty test set.
    pub pfl_accuracy_macro: f64,
    /// Personalized models on the shared class-balanced test set.
    pub drift_score: f64,
    /// The global model on every client's test set (generic-FL reading).
    pub global_model_pfl_accuracy: f64,
    /// Per-class accuracy on the balanced test set, averaged over clients.
    pub per_class_accuracy: Vec<f64>,
    pub mean_train_loss: f64,
}

/// Index of the largest entry, first one on ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

pub fn predict(model: &ModelParams, samples: &[Sample]) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let (x, _) = to_matrix(samples)?;
    let trace = forward(model, x.view())?;
    Ok(trace
        .logits()
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect())
}

pub fn correct_count(model: &ModelParams, samples: &[Sample]) -> Result<usize> {
    Ok(predict(model, samples)?
        .into_iter()
        .zip(samples)
        .filter(|(p, s)| *p == s.label)
        .count())
}

fn model_for(models: &[ModelParams], client_id: usize) -> Result<&ModelParams> {
    models.get(client_id).ok_or(Error::MissingModel(client_id))
}

/// `(correct, total)` of each client's model on its own test set.
fn local_counts(models: &[ModelParams], clients: &[ClientDataset]) -> Result<Vec<(usize, usize)>> {
    clients
        .par_iter()
        .map(|c| {
            let model = model_for(models, c.client_id)?;
            Ok((correct_count(model, &c.test)?, c.test.len()))
        })
        .collect()
}

/// Total correct local predictions over the total local test size.
/// `models` is indexed by client id.
pub fn pfl_accuracy(models: &[ModelParams], clients: &[ClientDataset]) -> Result<f64> {
    let counts = local_counts(models, clients)?;
    let (correct, total) = counts
        .iter()
        .fold((0, 0), |(c, t), &(ci, ti)| (c + ci, t + ti));
    if total == 0 {
        return Err(Error::InvalidArgument("no client has test samples".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Unweighted mean of per-client accuracies, skipping empty test sets.
pub fn pfl_accuracy_macro(models: &[ModelParams], clients: &[ClientDataset]) -> Result<f64> {
    let accs: Vec<f64> = local_counts(models, clients)?
        .into_iter()
        .filter(|&(_, t)| t > 0)
        .map(|(c, t)| c as f64 / t as f64)
        .collect();
    if accs.is_empty() {
        return Err(Error::InvalidArgument("no client has test samples".into()));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Every model evaluated on the same balanced set, micro-averaged.
pub fn drift_score(models: &[ModelParams], iid: &IidTestSet) -> Result<f64> {
    if models.is_empty() || iid.is_empty() {
        return Err(Error::InvalidArgument(
            "drift score needs at least one model and a non-empty test set".into(),
        ));
    }
    let correct: usize = models
        .par_iter()
        .map(|m| correct_count(m, iid.samples()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / (models.len() * iid.len()) as f64)
}

pub fn per_class_accuracy(model: &ModelParams, iid: &IidTestSet) -> Result<Vec<f64>> {
    let classes = iid.num_classes();
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (pred, s) in predict(model, iid.samples())?.into_iter().zip(iid.samples()) {
        seen[s.label] += 1;
        if pred == s.label {
            hits[s.label] += 1;
        }
    }
    Ok(hits
        .into_iter()
        .zip(seen)
        .map(|(h, n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect())
}

/// All metrics for one round.
pub fn evaluate_round(
    round: usize,
    personalized: &[ModelParams],
    global: &ModelParams,
    clients: &[ClientDataset],
    iid: &IidTestSet,
    mean_train_loss: f64,
) -> Result<MetricsRecord> {
    let globals = vec![global.clone(); personalized.len()];
    let per_client: Vec<Vec<f64>> = personalized
        .par_iter()
        .map(|m| per_class_accuracy(m, iid))
        .collect::<Result<_>>()?;
    let classes = iid.num_classes();
    let per_class_accuracy = (0..classes)
        .map(|k| per_client.iter().map(|v| v[k]).sum::<f64>() / per_client.len().max(1) as f64)
        .collect();
    Ok(MetricsRecord {
        round,
        pfl_accuracy: pfl_accuracy(personalized, clients)?,
        pfl_accuracy_macro: pfl_accuracy_macro(personalized, clients)?,
        drift_score: drift_score(personalized, iid)?,
        global_model_pfl_accuracy: pfl_accuracy(&globals, clients)?,
        per_class_accuracy,
        mean_train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_iid_test;
    use crate::nn::Layer;
    use ndarray::{Array1, Array2};

    /// Linear model whose logit for class k is feature k.
    fn oracle(classes: usize) -> ModelParams {
        ModelParams::new(vec![Layer {
            weights: Array2::eye(classes),
            bias: Array1::zeros(classes),
        }])
        .unwrap()
    }

    /// Always predicts class 0.
    fn constant_zero(classes: usize) -> ModelParams {
        let mut bias = Array1::zeros(classes);
        bias[0] = 1.0;
        ModelParams::new(vec![Layer {
            weights: Array2::zeros((classes, classes)),
            bias,
        }])
        .unwrap()
    }

    fn one_hot(label: usize, classes: usize) -> Sample {
        let mut features = vec![0.0; classes];
        features[label] = 1.0;
        Sample { features, label }
    }

    fn balanced(classes: usize, per_class: usize) -> IidTestSet {
        let pool: Vec<Sample> = (0..classes)
            .flat_map(|c| std::iter::repeat_with(move || one_hot(c, classes)).take(per_class))
            .collect();
        build_iid_test(&pool, classes, per_class, 0).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax([0.0, 0.0]), 0);
    }

    #[test]
    fn perfect_models_score_one() {
        let clients: Vec<_> = (0..3)
            .map(|id| {
                let samples: Vec<_> = (0..4).map(|c| one_hot(c, 4)).collect();
                ClientDataset::new(id, samples.clone(), samples, 4).unwrap()
            })
            .collect();
        let models = vec![oracle(4); 3];
        assert_eq!(pfl_accuracy(&models, &clients).unwrap(), 1.0);
        assert_eq!(drift_score(&models, &balanced(4, 2)).unwrap(), 1.0);
        assert_eq!(per_class_accuracy(&models[0], &balanced(4, 2)).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn micro_not_macro() {
        // client A: 3 of 4 correct; client B: 1 of 2 correct.
        let a = ClientDataset::new(0, vec![one_hot(0, 2)], vec![one_hot(0, 2), one_hot(0, 2), one_hot(0, 2), one_hot(1, 2)], 2).unwrap();
        let b = ClientDataset::new(1, vec![one_hot(0, 2)], vec![one_hot(0, 2), one_hot(1, 2)], 2).unwrap();
        let models = vec![constant_zero(2), constant_zero(2)];
        let clients = [a, b];
        assert!((pfl_accuracy(&models, &clients).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((pfl_accuracy_macro(&models, &clients).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_drift() {
        let iid = balanced(10, 3);
        let models = vec![constant_zero(10); 4];
        assert!((drift_score(&models, &iid).unwrap() - 0.1).abs() < 1e-15);
        let per_class = per_class_accuracy(&models[0], &iid).unwrap();
        assert_eq!(per_class[0], 1.0);
        assert!(per_class[1..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn missing_model_is_an_error() {
        let c = ClientDataset::new(2, vec![one_hot(0, 2)], vec![one_hot(0, 2)], 2).unwrap();
        assert!(matches!(
            pfl_accuracy(&[oracle(2)], &[c]),
            Err(Error::MissingModel(2))
        ));
    }

    #[test]
    fn identical_models_drift_equals_single_accuracy() {
        let iid = balanced(5, 4);
        let mut r = crate::rng::seeded(1);
        let m = ModelParams::init(&[5, 3, 5], &mut r).unwrap();
        let single = correct_count(&m, iid.samples()).unwrap() as f64 / iid.len() as f64;
        assert_eq!(drift_score(&vec![m; 6], &iid).unwrap(), single);
    }
}
