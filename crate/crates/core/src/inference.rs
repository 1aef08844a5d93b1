//! Domain-agnostic prediction for samples whose domain is unknown.
//!
//! Text centroids of additional style templates are projected into the visual
//! space two ways (CPM: shift the mean source centroid by the text-space style
//! offset; SWM: attention-weighted average of sampled visual embeddings). A
//! test embedding is softly assigned to every candidate centroid, centered by
//! each in turn, and the resulting class distributions are mixed by the
//! assignment weights. The mixture is finally blended with the raw zero-shot
//! distribution, weighted by the latter's confidence.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};
use crate::homogenize::{compute_text_domain_centroid, CentroidBank, ClassTextBank};
use crate::trainer::{forward_adapter, AdapterParams};
use crate::vector::{check_dims, check_temperature, dot, mean_vector, tempered_softmax, Vector, DEFAULT_EPS};
use crate::zeroshot::{clip_zeroshot_bank, sh_zeroshot_probs, ZeroShotText};

/// How the source text centroids enter the CPM projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpmReading {
    /// `mean_s(mu_s + mu_t - mu_s_text) = mean(mu_s) + mu_t - mean(mu_s_text)`.
    #[default]
    MeanOffset,
    /// `mean(mu_s) + mu_t - mu_s*_text` with `s*` the source text centroid
    /// most similar to `mu_t`.
    NearestSourceText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Alignment temperature, shared with training; also scales the raw
    /// zero-shot logits.
    pub tau: f64,
    pub tau_swm: f64,
    pub tau_c: f64,
    pub swm_pool_size: usize,
    pub seed: u64,
    pub cpm_reading: CpmReading,
    pub additional_centroids: bool,
    pub cpm: bool,
    pub swm: bool,
    pub fusion: bool,
    pub zero_shot_text: ZeroShotText,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tau: 1.0 / 20.0,
            tau_swm: 1.0 / 100.0,
            tau_c: 1.0 / 100.0,
            swm_pool_size: 256,
            seed: 0,
            cpm_reading: CpmReading::MeanOffset,
            additional_centroids: true,
            cpm: true,
            swm: true,
            fusion: true,
            zero_shot_text: ZeroShotText::Aggregated,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau)?;
        check_temperature(self.tau_swm)?;
        check_temperature(self.tau_c)?;
        if self.swm && self.additional_centroids && self.swm_pool_size == 0 {
            return Err(ShedError::InvalidConfig("inference.swm_pool_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Projects an additional text centroid onto the visual source centroids.
pub fn project_cpm(mu_t: &[f64], mu_s: &[Vector], mu_text_s: &[Vector]) -> Result<Vector> {
    project_cpm_with(mu_t, mu_s, mu_text_s, CpmReading::MeanOffset)
}

pub fn project_cpm_with(
    mu_t: &[f64],
    mu_s: &[Vector],
    mu_text_s: &[Vector],
    reading: CpmReading,
) -> Result<Vector> {
    if mu_s.is_empty() || mu_text_s.is_empty() {
        return Err(ShedError::EmptyInput);
    }
    for v in mu_s.iter().chain(mu_text_s) {
        check_dims(mu_t.len(), v.dim())?;
    }
    let visual = mean_vector(mu_s.iter().map(|v| &v[..]))?;
    let text = match reading {
        CpmReading::MeanOffset => mean_vector(mu_text_s.iter().map(|v| &v[..]))?,
        CpmReading::NearestSourceText => {
            let scores: Vec<f64> = mu_text_s.iter().map(|v| dot(mu_t, v)).collect();
            mu_text_s[crate::vector::argmax(&scores)].clone()
        }
    };
    Vector::new(
        visual
            .iter()
            .zip(mu_t)
            .zip(text.iter())
            .map(|((v, t), s)| v + (t - s))
            .collect(),
    )
}

/// `softmax(mu_t . V / tau_swm) . V` over a pool of visual embeddings.
pub fn project_swm(mu_t: &[f64], pool: &[&[f64]], tau_swm: f64) -> Result<Vector> {
    check_temperature(tau_swm)?;
    if pool.is_empty() {
        return Err(ShedError::EmptyPool);
    }
    for v in pool {
        check_dims(mu_t.len(), v.len())?;
    }
    let scores: Vec<f64> = pool.iter().map(|v| dot(mu_t, v)).collect();
    let weights = tempered_softmax(&scores, tau_swm)?;
    let mut out = vec![crate::vector::CompensatedSum::default(); mu_t.len()];
    for (w, v) in weights.iter().zip(pool) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            o.add(w * x);
        }
    }
    Vector::new(out.iter().map(|o| o.value()).collect())
}

/// Draws the SWM visual pool: `size` distinct training indices (all of them
/// when the set is smaller), in ascending order.
pub fn sample_pool(num_samples: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = size.min(num_samples);
    let mut idx = rand::seq::index::sample(&mut rng, num_samples, amount).into_vec();
    idx.sort_unstable();
    idx
}

/// Builds every candidate visual centroid.
///
/// `source_centroids` are the frozen source-domain centroids (one per source
/// template, in the same order).
pub fn build_centroid_bank(
    train: &EmbeddingDataset,
    text_bank: &ClassTextBank,
    source_centroids: &[Vector],
    config: &InferenceConfig,
) -> Result<CentroidBank> {
    config.validate()?;
    let dim = train.dim();
    check_dims(dim, text_bank.dim())?;
    if source_centroids.is_empty() {
        return Err(ShedError::EmptyInput);
    }
    for c in source_centroids {
        check_dims(dim, c.dim())?;
    }
    let source_text = text_bank
        .source_templates()
        .iter()
        .map(|&t| compute_text_domain_centroid(text_bank, t))
        .collect::<Result<Vec<_>>>()?;

    let additional_text = if config.additional_centroids {
        text_bank
            .additional_templates()
            .iter()
            .map(|&t| compute_text_domain_centroid(text_bank, t))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let cpm = if config.cpm {
        additional_text
            .iter()
            .map(|mu_t| project_cpm_with(mu_t, source_centroids, &source_text, config.cpm_reading))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let (swm, pool_indices) = if config.swm && !additional_text.is_empty() {
        let pool_indices = sample_pool(train.len(), config.swm_pool_size, config.seed);
        let pool: Vec<&[f64]> = pool_indices.iter().map(|&i| &train.samples()[i].vec[..]).collect();
        let swm = additional_text
            .iter()
            .map(|mu_t| project_swm(mu_t, &pool, config.tau_swm))
            .collect::<Result<Vec<_>>>()?;
        (swm, pool_indices)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(CentroidBank {
        dim,
        source: source_centroids.to_vec(),
        source_text,
        additional_text,
        cpm,
        swm,
        pool_indices,
    })
}

/// Membership weights of a base embedding over all centroids of the bank.
pub fn soft_assign(x_base: &[f64], bank: &CentroidBank, tau_c: f64) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(ShedError::EmptyInput);
    }
    let scores = bank
        .combined()
        .map(|mu| {
            check_dims(x_base.len(), mu.dim())?;
            Ok(dot(x_base, mu))
        })
        .collect::<Result<Vec<_>>>()?;
    tempered_softmax(&scores, tau_c)
}

/// Style-homogenized class distribution of an adapted embedding under one
/// candidate centroid.
pub fn per_centroid_probs(
    x_adapted: &[f64],
    centroid: &[f64],
    text_bank: &ClassTextBank,
    tau: f64,
) -> Result<Vec<f64>> {
    sh_zeroshot_probs(x_adapted, centroid, text_bank, tau)
}

/// `sum_v pi_v * P_v`.
pub fn aggregate_predictions(per_centroid: &[Vec<f64>], pi: &[f64]) -> Result<Vec<f64>> {
    if per_centroid.len() != pi.len() {
        return Err(ShedError::LengthMismatch {
            left: per_centroid.len(),
            right: pi.len(),
        });
    }
    let classes = per_centroid.first().ok_or(ShedError::EmptyInput)?.len();
    let mut out = vec![0.0; classes];
    for (p, w) in per_centroid.iter().zip(pi) {
        check_dims(classes, p.len())?;
        for (o, x) in out.iter_mut().zip(p) {
            *o += w * x;
        }
    }
    Ok(out)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(ShedError::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(ShedError::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ShedError::InvalidDistribution(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Confidence-gated blend: `lambda * p_clip + (1 - lambda) * p_mu` with
/// `lambda = max(p_clip)`.
pub fn fuse_with_zeroshot(p_clip: &[f64], p_mu: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_distribution(p_clip, "p_clip")?;
    check_distribution(p_mu, "p_mu")?;
    if p_clip.len() != p_mu.len() {
        return Err(ShedError::InvalidDistribution(format!(
            "class counts differ: {} vs {}",
            p_clip.len(),
            p_mu.len()
        )));
    }
    let lambda = p_clip.iter().copied().fold(0.0, f64::max);
    let fused = p_clip
        .iter()
        .zip(p_mu)
        .map(|(c, m)| lambda * c + (1.0 - lambda) * m)
        .collect();
    Ok((fused, lambda))
}

/// Full per-sample inference output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub p_clip: Vec<f64>,
    pub p_mu: Vec<f64>,
    pub p_final: Vec<f64>,
    pub pi: Vec<f64>,
    /// Zero-shot confidence `max(p_clip)`.
    pub lambda: f64,
    /// Weight actually given to `p_clip` in `p_final`: `lambda` when fusing,
    /// 0 otherwise.
    pub fusion_weight: f64,
}

impl PredictionRecord {
    pub fn predicted_class(&self) -> usize {
        crate::vector::argmax(&self.p_final)
    }

    pub fn check_invariants(&self) -> Result<()> {
        check_distribution(&self.p_clip, "p_clip")?;
        check_distribution(&self.p_mu, "p_mu")?;
        check_distribution(&self.p_final, "p_final")?;
        check_distribution(&self.pi, "pi")?;
        let c = self.p_clip.len() as f64;
        if !(self.lambda >= 1.0 / c - 1e-12 && self.lambda <= 1.0 + 1e-12) {
            return Err(ShedError::InvalidDistribution(format!(
                "lambda {} outside [1/C, 1]",
                self.lambda
            )));
        }
        let w = self.fusion_weight;
        for ((f, c), m) in self.p_final.iter().zip(&self.p_clip).zip(&self.p_mu) {
            if (f - (w * c + (1.0 - w) * m)).abs() > 1e-12 {
                return Err(ShedError::InvalidDistribution(
                    "p_final is not the stated blend".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Runs the complete inference pipeline for one base embedding.
pub fn predict(
    x_base: &[f64],
    adapter: &AdapterParams,
    bank: &CentroidBank,
    text_bank: &ClassTextBank,
    config: &InferenceConfig,
) -> Result<PredictionRecord> {
    let p_clip = clip_zeroshot_bank(x_base, text_bank, config.zero_shot_text, config.tau)?;
    let pi = soft_assign(x_base, bank, config.tau_c)?;
    let x_adapted = forward_adapter(adapter, x_base, DEFAULT_EPS)?;

    let classes = text_bank.num_classes();
    let mut p_mu = vec![0.0; classes];
    for (mu, &w) in bank.combined().zip(&pi) {
        // exact zeros contribute nothing; skip the work
        if w == 0.0 {
            continue;
        }
        let p = match per_centroid_probs(&x_adapted, mu, text_bank, config.tau) {
            Ok(p) => p,
            Err(ShedError::DegenerateEmbedding { norm, .. }) => {
                warn!("embedding coincides with a centroid (residual norm {norm:e}); using uniform");
                vec![1.0 / classes as f64; classes]
            }
            Err(e) => return Err(e),
        };
        for (o, x) in p_mu.iter_mut().zip(&p) {
            *o += w * x;
        }
    }

    let (fused, lambda) = fuse_with_zeroshot(&p_clip, &p_mu)?;
    let (p_final, fusion_weight) = if config.fusion {
        (fused, lambda)
    } else {
        (p_mu.clone(), 0.0)
    };
    let record = PredictionRecord {
        p_clip,
        p_mu,
        p_final,
        pi,
        lambda,
        fusion_weight,
    };
    record.check_invariants()?;
    Ok(record)
}

/// Predicts every sample of a dataset, attaching the sample index to errors.
pub fn predict_dataset(
    data: &EmbeddingDataset,
    adapter: &AdapterParams,
    bank: &CentroidBank,
    text_bank: &ClassTextBank,
    config: &InferenceConfig,
) -> Result<Vec<PredictionRecord>> {
    config.validate()?;
    data.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| predict(&s.vec, adapter, bank, text_bank, config).map_err(|e| e.at_sample(i)))
        .collect()
}
