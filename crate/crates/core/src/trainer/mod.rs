//! Adapter training under the style-homogenized alignment objective.
//!
//! Source-domain centroids are computed from the base embeddings before the
//! first step and stay frozen unless a moving-average update is requested.

pub mod adapter;
pub mod objective;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{forward_adapter, AdapterParams};
pub use objective::{anchor_samples, Alignment, AnchoredSample, Gradient, LossValue, Objective};
pub use optim::{cosine_lr, warmup_cosine_lr, AdamW, AdamWConfig};

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};
use crate::homogenize::ClassTextBank;
use crate::vector::{check_temperature, mean_vector, Vector, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CentroidUpdate {
    #[default]
    Frozen,
    /// `mu <- momentum * mu + (1 - momentum) * batch_mean` per domain, each step.
    Ema { momentum: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup length before the cosine decay.
    pub warmup_iterations: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eps: f64,
    /// Weight of the regularizer; the method itself uses 1.
    pub reg_weight: f64,
    pub alignment: Alignment,
    pub centroid_update: CentroidUpdate,
    /// Draw each batch round-robin across source domains.
    pub balanced_domains: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0 / 20.0,
            epochs: 4,
            iterations_per_epoch: 100,
            batch_size: 32,
            learning_rate: 5e-3,
            warmup_iterations: 200,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eps: DEFAULT_EPS,
            reg_weight: 1.0,
            alignment: Alignment::StyleHomogenized,
            centroid_update: CentroidUpdate::Frozen,
            balanced_domains: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau)?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("eps", self.eps),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(ShedError::InvalidConfig(format!("train.{name} must be > 0")));
            }
        }
        let nonneg = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("reg_weight", self.reg_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ShedError::InvalidConfig(format!("train.{name} must be >= 0")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ShedError::InvalidConfig(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if let CentroidUpdate::Ema { momentum } = self.centroid_update {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(ShedError::InvalidConfig("EMA momentum must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub loss_align: f64,
    pub loss_reg: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub trace: Vec<TraceEntry>,
    /// Source centroids after training; identical to the input when frozen.
    pub centroids: Vec<Vector>,
}

impl TrainOutcome {
    /// Mean alignment loss of each epoch.
    pub fn epoch_mean_align(&self) -> Vec<f64> {
        epoch_means(&self.trace, |e| e.loss_align)
    }
}

pub fn epoch_means(trace: &[TraceEntry], key: impl Fn(&TraceEntry) -> f64) -> Vec<f64> {
    let epochs = trace.iter().map(|e| e.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for e in trace {
        sums[e.epoch].0 += key(e);
        sums[e.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// Deterministic batch index stream. Indices are drawn from a reshuffled
/// permutation so every sample is visited once per pass.
struct BatchSampler {
    rng: ChaCha8Rng,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_pool: usize,
}

impl BatchSampler {
    fn new(samples: &[AnchoredSample], balanced: bool, seed: u64) -> Self {
        let pools = if balanced {
            let domains = samples.iter().map(|s| s.domain_id + 1).max().unwrap_or(0);
            let mut pools = vec![Vec::new(); domains];
            for (i, s) in samples.iter().enumerate() {
                pools[s.domain_id].push(i);
            }
            pools.retain(|p| !p.is_empty());
            pools
        } else {
            vec![(0..samples.len()).collect()]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools = pools;
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        let cursors = vec![0; pools.len()];
        BatchSampler {
            rng,
            pools,
            cursors,
            next_pool: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                let k = self.next_pool;
                self.next_pool = (self.next_pool + 1) % self.pools.len();
                if self.cursors[k] == self.pools[k].len() {
                    self.pools[k].shuffle(&mut self.rng);
                    self.cursors[k] = 0;
                }
                let idx = self.pools[k][self.cursors[k]];
                self.cursors[k] += 1;
                idx
            })
            .collect()
    }
}

/// Runs the training loop and returns the final adapter with its loss trace.
pub fn train(
    dataset: &EmbeddingDataset,
    text_bank: &ClassTextBank,
    centroids: &[Vector],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ShedError::EmptyDataset);
    }
    if centroids.len() != dataset.num_domains() {
        return Err(ShedError::LengthMismatch {
            left: centroids.len(),
            right: dataset.num_domains(),
        });
    }
    let samples = anchor_samples(dataset, config.eps)?;
    train_on(&samples, dataset.dim(), text_bank, centroids, config)
}

pub fn train_on(
    samples: &[AnchoredSample],
    dim: usize,
    text_bank: &ClassTextBank,
    centroids: &[Vector],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = AdapterParams::identity(dim);
    let mut centroids = centroids.to_vec();
    let mut trace = Vec::with_capacity(config.total_steps());
    if config.total_steps() == 0 || samples.is_empty() {
        return Ok(TrainOutcome {
            params,
            trace,
            centroids,
        });
    }

    let mut optimizer = AdamW::new(
        AdamWConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_eps,
            weight_decay: config.weight_decay,
        },
        params.num_params(),
    );
    let mut sampler = BatchSampler::new(samples, config.balanced_domains, config.seed);
    let total = config.total_steps();
    let mut flat = params.to_flat();

    for step in 0..total {
        let epoch = step / config.iterations_per_epoch;
        let batch: Vec<&AnchoredSample> = sampler
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let objective = Objective {
            centroids: &centroids,
            bank: text_bank,
            tau: config.tau,
            reg_weight: config.reg_weight,
            alignment: config.alignment,
            eps: config.eps,
        };
        let (loss, grad) = objective.grad_total(&batch, &params)?;
        if !(loss.align.is_finite() && loss.reg.is_finite()) {
            return Err(ShedError::NonFiniteLoss {
                iteration: step,
                align: loss.align,
                reg: loss.reg,
            });
        }
        let lr = warmup_cosine_lr(config.learning_rate, step, total, config.warmup_iterations);
        trace.push(TraceEntry {
            epoch,
            iteration: step,
            loss_align: loss.align,
            loss_reg: loss.reg,
            learning_rate: lr,
        });

        let adapted = match config.centroid_update {
            CentroidUpdate::Ema { .. } => Some(objective.adapted(&batch, &params)?),
            CentroidUpdate::Frozen => None,
        };

        optimizer.step(&mut flat, &grad.to_flat(), lr);
        params = AdapterParams::from_flat(dim, &flat)?;

        if let (CentroidUpdate::Ema { momentum }, Some(adapted)) = (config.centroid_update, adapted) {
            for (domain, mu) in centroids.iter_mut().enumerate() {
                let members: Vec<&[f64]> = batch
                    .iter()
                    .zip(&adapted)
                    .filter(|(s, _)| s.domain_id == domain)
                    .map(|(_, f)| &f[..])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let batch_mean = mean_vector(members)?;
                let updated = mu
                    .iter()
                    .zip(batch_mean.iter())
                    .map(|(m, b)| momentum * m + (1.0 - momentum) * b)
                    .collect();
                *mu = Vector::new(updated)?;
            }
        }
    }

    Ok(TrainOutcome {
        params,
        trace,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_visits_everything_once_per_pass() {
        let samples: Vec<AnchoredSample> = (0..10)
            .map(|i| AnchoredSample {
                base: Vector::new(vec![1.0]).unwrap(),
                anchor: Vector::new(vec![1.0]).unwrap(),
                class_id: 0,
                domain_id: i % 2,
            })
            .collect();
        let mut s = BatchSampler::new(&samples, false, 7);
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());

        let mut s = BatchSampler::new(&samples, true, 7);
        let batch = s.next_batch(6);
        let domains: Vec<usize> = batch.iter().map(|&i| samples[i].domain_id).collect();
        assert_eq!(domains, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            centroid_update: CentroidUpdate::Ema { momentum: 1.5 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn epoch_means_group_by_epoch() {
        let trace: Vec<TraceEntry> = (0..6)
            .map(|i| TraceEntry {
                epoch: i / 3,
                iteration: i,
                loss_align: i as f64,
                loss_reg: 0.0,
                learning_rate: 0.0,
            })
            .collect();
        assert_eq!(epoch_means(&trace, |e| e.loss_align), vec![1.0, 4.0]);
    }
}
