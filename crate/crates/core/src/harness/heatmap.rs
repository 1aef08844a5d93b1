use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};
use crate::homogenize::{center_and_normalize, ClassTextBank};
use crate::trainer::{forward_adapter, AdapterParams};
use crate::vector::{cosine_sim, mean_vector, Vector, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapMode {
    /// Image class centroids against the raw class prototypes.
    Raw,
    /// Centered image embeddings against the homogenized class texts.
    Homogenized,
    /// As `Homogenized`, on adapted embeddings.
    PostTraining,
}

impl std::str::FromStr for HeatmapMode {
    type Err = ShedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(HeatmapMode::Raw),
            "homogenized" => Ok(HeatmapMode::Homogenized),
            "post-training" => Ok(HeatmapMode::PostTraining),
            other => Err(ShedError::InvalidConfig(format!("unknown heatmap mode {other:?}"))),
        }
    }
}

/// Row `i`, column `j`: cosine between the image centroid of class `i` and
/// the text vector of class `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub mode: HeatmapMode,
    pub classes: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    /// Mean diagonal minus mean off-diagonal entry.
    pub fn diagonal_dominance(&self) -> f64 {
        let c = self.values.len();
        if c < 2 {
            return self.values.first().map_or(0.0, |r| r[0]);
        }
        let mut diag = 0.0;
        let mut off = 0.0;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
        diag / c as f64 - off / (c * (c - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for name in &self.classes {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the class-by-class similarity grid.
///
/// `centroids` are the per-domain centroids used for centering (required by
/// the homogenized modes); `adapter` is required for post-training mode.
pub fn export_similarity_heatmap(
    dataset: &EmbeddingDataset,
    text_bank: &ClassTextBank,
    mode: HeatmapMode,
    centroids: &[Vector],
    adapter: Option<&AdapterParams>,
) -> Result<Heatmap> {
    let c = text_bank.num_classes();
    if dataset.num_classes() != c {
        return Err(ShedError::LengthMismatch {
            left: dataset.num_classes(),
            right: c,
        });
    }
    let embed = |x: &[f64], domain: Option<usize>| -> Result<Vector> {
        let x = match (mode, adapter) {
            (HeatmapMode::PostTraining, Some(a)) => forward_adapter(a, x, DEFAULT_EPS)?,
            (HeatmapMode::PostTraining, None) => {
                return Err(ShedError::InvalidConfig("post-training heatmap needs an adapter".into()))
            }
            _ => Vector::new(x.to_vec())?,
        };
        match mode {
            HeatmapMode::Raw => Ok(x),
            _ => {
                let d = domain.ok_or_else(|| ShedError::InvalidDataset("centering needs domain labels".into()))?;
                let mu = centroids.get(d).ok_or(ShedError::UnknownDomain(d))?;
                center_and_normalize(&x, mu, DEFAULT_EPS)
            }
        }
    };
    let texts = match mode {
        HeatmapMode::Raw => text_bank.prototypes(),
        _ => text_bank.homogenized(),
    };
    let mut values = Vec::with_capacity(c);
    for class in 0..c {
        let members = dataset
            .in_class(class)
            .map(|s| embed(&s.vec, s.domain_id))
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(ShedError::EmptyClass(class));
        }
        let centroid = mean_vector(members.iter().map(|v| &v[..]))?;
        let row = texts
            .iter()
            .map(|t| cosine_sim(&centroid, t))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(Heatmap {
        mode,
        classes: text_bank.class_names().to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pipeline::text_bank;
    use crate::homogenize::{compute_domain_centroids, TextCentering};
    use crate::synthgen::{generate_benchmark, GenConfig};

    #[test]
    fn dominance_of_identity_grid() {
        let h = Heatmap {
            mode: HeatmapMode::Raw,
            classes: vec!["a".into(), "b".into()],
            values: vec![vec![1.0, 0.2], vec![0.0, 0.8]],
        };
        assert!((h.diagonal_dominance() - 0.8).abs() < 1e-15);
        assert_eq!(h.to_csv(), "class,a,b\na,1,0.2\nb,0,0.8\n");
    }

    #[test]
    fn shapes_and_missing_class() {
        let b = generate_benchmark(&GenConfig {
            dim: 16,
            num_classes: 4,
            samples_per_domain_class: 3,
            num_source_templates: 3,
            num_additional_templates: 2,
            ..Default::default()
        })
        .unwrap();
        let tb = text_bank(&b.text, TextCentering::SourceTemplates).unwrap();
        let cents = compute_domain_centroids(&b.train).unwrap();
        for mode in [HeatmapMode::Raw, HeatmapMode::Homogenized] {
            let h = export_similarity_heatmap(&b.train, &tb, mode, &cents, None).unwrap();
            assert_eq!(h.values.len(), 4);
            assert!(h.values.iter().all(|r| r.len() == 4));
        }
        assert!(export_similarity_heatmap(&b.train, &tb, HeatmapMode::PostTraining, &cents, None).is_err());

        let kept: Vec<_> = b.train.samples().iter().filter(|s| s.class_id != 2).cloned().collect();
        let partial = EmbeddingDataset::new(
            b.train.dim(),
            b.train.class_names().to_vec(),
            b.train.domain_names().to_vec(),
            kept,
        )
        .unwrap();
        assert!(matches!(
            export_similarity_heatmap(&partial, &tb, HeatmapMode::Raw, &cents, None),
            Err(ShedError::EmptyClass(2))
        ));
    }

    #[test]
    fn homogenized_grid_of_noiseless_data_has_unit_diagonal() {
        let b = generate_benchmark(&GenConfig {
            sigma: 0.0,
            template_noise: 0.0,
            // a random gap direction would make text norms differ per class
            gamma: 0.0,
            orthogonal_styles: true,
            ..Default::default()
        })
        .unwrap();
        let tb = text_bank(&b.text, TextCentering::SourceTemplates).unwrap();
        let cents = compute_domain_centroids(&b.train).unwrap();
        let h = export_similarity_heatmap(&b.train, &tb, HeatmapMode::Homogenized, &cents, None).unwrap();
        for (i, row) in h.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i == j {
                    assert!((v - 1.0).abs() < 1e-9, "diagonal {v}");
                } else {
                    assert!(*v < 1.0 - 1e-3);
                }
            }
        }
    }

    #[test]
    fn homogenization_sharpens_the_diagonal() {
        for seed in 0..3 {
            let b = generate_benchmark(&GenConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let tb = text_bank(&b.text, TextCentering::SourceTemplates).unwrap();
            let cents = compute_domain_centroids(&b.train).unwrap();
            let raw = export_similarity_heatmap(&b.train, &tb, HeatmapMode::Raw, &cents, None).unwrap();
            let hom = export_similarity_heatmap(&b.train, &tb, HeatmapMode::Homogenized, &cents, None).unwrap();
            assert!(
                hom.diagonal_dominance() > raw.diagonal_dominance(),
                "seed {seed}: {} vs {}",
                hom.diagonal_dominance(),
                raw.diagonal_dominance()
            );
        }
    }

    #[test]
    fn parses_modes() {
        assert_eq!("post-training".parse::<HeatmapMode>().unwrap(), HeatmapMode::PostTraining);
        assert!("other".parse::<HeatmapMode>().is_err());
    }
}
