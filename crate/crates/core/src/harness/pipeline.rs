use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, DataConfig, ExperimentConfig};
use super::eval::{evaluate, summarize, timed, EvalReport, SeedReport, Summary, Timing};
use super::format::{load_dataset_any, load_text_bank};
use crate::dataset::EmbeddingDataset;
use crate::error::Result;
use crate::homogenize::{
    build_text_bank_with, compute_domain_centroids, CentroidBank, ClassTextBank, TextCentering, TextEmbeddings,
};
use crate::inference::{build_centroid_bank, predict_dataset, InferenceConfig, PredictionRecord};
use crate::synthgen::{generate_benchmark, GenConfig};
use crate::trainer::{train, AdapterParams, TrainConfig, TrainOutcome};
use crate::vector::{argmax, Vector};
use crate::zeroshot::clip_zeroshot_bank;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub text: TextEmbeddings,
}

/// Loads the configured files, or generates the synthetic benchmark with the
/// experiment seed.
pub fn prepare_data(cfg: &DataConfig, seed: u64) -> Result<ExperimentData> {
    cfg.validate()?;
    match (&cfg.train, &cfg.test, &cfg.text) {
        (Some(train), Some(test), Some(text)) => Ok(ExperimentData {
            train: load_dataset_any(train)?,
            test: load_dataset_any(test)?,
            text: load_text_bank(text)?,
        }),
        _ => {
            let b = generate_benchmark(&GenConfig {
                seed,
                ..cfg.synthetic.clone()
            })?;
            Ok(ExperimentData {
                train: b.train,
                test: b.test,
                text: b.text,
            })
        }
    }
}

pub fn text_bank(text: &TextEmbeddings, centering: TextCentering) -> Result<ClassTextBank> {
    build_text_bank_with(text, &text.source_templates, &text.additional_templates, centering)
}

/// Everything produced by one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Fitted {
    pub text_bank: ClassTextBank,
    /// Frozen centroids computed before training.
    pub initial_centroids: Vec<Vector>,
    pub outcome: TrainOutcome,
    pub bank: CentroidBank,
}

pub fn fit(
    data: &ExperimentData,
    train_cfg: &TrainConfig,
    inference_cfg: &InferenceConfig,
    centering: TextCentering,
) -> Result<Fitted> {
    let text_bank = text_bank(&data.text, centering)?;
    let initial_centroids = compute_domain_centroids(&data.train)?;
    let outcome = train(&data.train, &text_bank, &initial_centroids, train_cfg)?;
    let bank = build_centroid_bank(&data.train, &text_bank, &outcome.centroids, inference_cfg)?;
    Ok(Fitted {
        text_bank,
        initial_centroids,
        outcome,
        bank,
    })
}

pub fn accuracy_report(test: &EmbeddingDataset, records: &[PredictionRecord]) -> Result<EvalReport> {
    let mut it = records.iter();
    evaluate(test, |_| Ok(it.next().map(|r| r.predicted_class()).unwrap_or(usize::MAX)))
}

/// Predicts the whole test set and scores it.
pub fn predict_and_score(
    test: &EmbeddingDataset,
    adapter: &AdapterParams,
    bank: &CentroidBank,
    text_bank: &ClassTextBank,
    cfg: &InferenceConfig,
) -> Result<(Vec<PredictionRecord>, EvalReport, Timing)> {
    let (records, timing) = timed(test.len(), || predict_dataset(test, adapter, bank, text_bank, cfg))?;
    let report = accuracy_report(test, &records)?;
    Ok((records, report, timing))
}

/// Raw and style-homogenized zero-shot accuracy on the test set. The latter
/// runs the full inference pipeline with an untrained adapter, since a test
/// sample's domain is unknown.
pub fn zeroshot_reports(
    data: &ExperimentData,
    cfg: &InferenceConfig,
    centering: TextCentering,
) -> Result<(EvalReport, EvalReport)> {
    let text_bank = text_bank(&data.text, centering)?;
    let raw = evaluate(&data.test, |x| {
        Ok(argmax(&clip_zeroshot_bank(x, &text_bank, cfg.zero_shot_text, cfg.tau)?))
    })?;
    let centroids = compute_domain_centroids(&data.train)?;
    let bank = build_centroid_bank(&data.train, &text_bank, &centroids, cfg)?;
    let identity = AdapterParams::identity(data.train.dim());
    let (_, sh, _) = predict_and_score(&data.test, &identity, &bank, &text_bank, cfg)?;
    Ok((raw, sh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub flags: AblationFlags,
    /// Absent when the variant failed.
    pub summary: Option<Summary>,
    /// Mean accuracy minus the full method's.
    pub delta: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn run_variant(
    data: &ExperimentData,
    full: &Fitted,
    cfg: &ExperimentConfig,
    flags: &AblationFlags,
    seed: u64,
) -> Result<EvalReport> {
    let (train_cfg, inf_cfg) = cfg.resolved(flags, seed);
    let (adapter, bank, text_bank) = if flags.affects_training() {
        let fitted = fit(data, &train_cfg, &inf_cfg, flags.text_centering())?;
        (fitted.outcome.params, fitted.bank, fitted.text_bank)
    } else {
        let bank = build_centroid_bank(&data.train, &full.text_bank, &full.outcome.centroids, &inf_cfg)?;
        (full.outcome.params.clone(), bank, full.text_bank.clone())
    };
    let (_, report, _) = predict_and_score(&data.test, &adapter, &bank, &text_bank, &inf_cfg)?;
    Ok(report)
}

/// Runs the full method and every flag set in `cfg.ablations` as its own
/// variant, over all seeds with shared data per seed. A failing variant is
/// recorded and does not stop the others.
pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let mut variants = vec![AblationFlags::default()];
    for name in cfg.ablations.enabled() {
        variants.push(AblationFlags::only(name)?);
    }
    let mut per_variant: Vec<std::result::Result<Vec<SeedReport>, String>> = vec![Ok(Vec::new()); variants.len()];

    for &seed in &cfg.seeds {
        let data = prepare_data(&cfg.data, seed)?;
        let (train_cfg, inf_cfg) = cfg.resolved(&AblationFlags::default(), seed);
        let full = fit(&data, &train_cfg, &inf_cfg, TextCentering::SourceTemplates)?;
        for (flags, slot) in variants.iter().zip(per_variant.iter_mut()) {
            let Ok(reports) = slot else { continue };
            match run_variant(&data, &full, cfg, flags, seed) {
                Ok(report) => {
                    info!("seed {seed} {}: {:.2}", flags.label(), report.mean_accuracy);
                    reports.push(SeedReport { seed, report });
                }
                Err(e) => {
                    warn!("variant {} failed on seed {seed}: {e}", flags.label());
                    *slot = Err(format!("seed {seed}: {e}"));
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(variants.len());
    let mut full_mean = None;
    for (flags, result) in variants.iter().zip(per_variant) {
        let (summary, error) = match result.and_then(|r| summarize(r).map_err(|e| e.to_string())) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e)),
        };
        let mean = summary.as_ref().map(|s| s.mean_accuracy);
        if flags.enabled().is_empty() {
            full_mean = mean;
        }
        let delta = match (mean, full_mean) {
            (Some(m), Some(f)) => Some(m - f),
            _ => None,
        };
        rows.push(VariantRow {
            label: flags.label(),
            flags: *flags,
            summary,
            delta,
            error,
        });
    }
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        rows,
    })
}
