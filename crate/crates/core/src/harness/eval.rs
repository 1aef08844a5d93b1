use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per domain, in the dataset's domain order; unlabeled samples
    /// form a trailing row.
    pub domains: Vec<DomainAccuracy>,
    /// Arithmetic mean of the per-domain accuracies.
    pub mean_accuracy: f64,
    pub num_samples: usize,
}

pub const UNLABELED_DOMAIN: &str = "(unlabeled)";

/// Scores a predictor on every sample of `test`. The predictor maps a sample
/// embedding to a class index.
pub fn evaluate<F>(test: &EmbeddingDataset, mut predictor: F) -> Result<EvalReport>
where
    F: FnMut(&[f64]) -> Result<usize>,
{
    if test.is_empty() {
        return Err(ShedError::EmptyDataset);
    }
    let slots = test.num_domains() + 1;
    let mut correct = vec![0usize; slots];
    let mut total = vec![0usize; slots];
    for (i, s) in test.samples().iter().enumerate() {
        let slot = s.domain_id.unwrap_or(slots - 1);
        let predicted = predictor(&s.vec).map_err(|e| e.at_sample(i))?;
        total[slot] += 1;
        if predicted == s.class_id {
            correct[slot] += 1;
        }
    }
    let names = test
        .domain_names()
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(UNLABELED_DOMAIN));
    let domains: Vec<DomainAccuracy> = names
        .zip(correct.iter().zip(&total))
        .filter(|(_, (_, t))| **t > 0)
        .map(|(name, (&c, &t))| DomainAccuracy {
            domain: name.to_string(),
            correct: c,
            total: t,
            accuracy: 100.0 * c as f64 / t as f64,
        })
        .collect();
    let mean_accuracy = domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64;
    Ok(EvalReport {
        domains,
        mean_accuracy,
        num_samples: test.len(),
    })
}

/// Wall-clock cost of a prediction pass. Kept apart from reports, which must
/// be reproducible bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub samples: usize,
    pub total_seconds: f64,
    pub seconds_per_sample: f64,
}

pub fn timed<T>(samples: usize, f: impl FnOnce() -> Result<T>) -> Result<(T, Timing)> {
    let start = Instant::now();
    let value = f()?;
    let total_seconds = start.elapsed().as_secs_f64();
    Ok((
        value,
        Timing {
            samples,
            total_seconds,
            seconds_per_sample: if samples == 0 { 0.0 } else { total_seconds / samples as f64 },
        },
    ))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: EvalReport,
}

/// Seed-aggregated accuracy of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean over seeds of each domain's accuracy, in report row order.
    pub domains: Vec<(String, f64)>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_seed: Vec<SeedReport>,
}

pub fn summarize(per_seed: Vec<SeedReport>) -> Result<Summary> {
    let first = per_seed.first().ok_or(ShedError::EmptyInput)?;
    let names: Vec<String> = first.report.domains.iter().map(|d| d.domain.clone()).collect();
    let mut domains = Vec::with_capacity(names.len());
    for name in names {
        let values: Vec<f64> = per_seed
            .iter()
            .map(|s| {
                s.report
                    .domains
                    .iter()
                    .find(|d| d.domain == name)
                    .map(|d| d.accuracy)
                    .ok_or_else(|| ShedError::InvalidDataset(format!("seed {} has no domain {name}", s.seed)))
            })
            .collect::<Result<_>>()?;
        domains.push((name, mean_std(&values).0));
    }
    let means: Vec<f64> = per_seed.iter().map(|s| s.report.mean_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&means);
    Ok(Summary {
        domains,
        mean_accuracy,
        std_accuracy,
        per_seed,
    })
}
