use serde::{Deserialize, Serialize};

use crate::error::{Result, ShedError};
use crate::vector::{l2_normalize, Vector, DEFAULT_EPS};

/// Unit-norm tolerance accepted by dataset validation.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Vectors this close to unit norm are stored verbatim on ingest, which keeps
/// save/load round trips bit-exact.
const INGEST_UNIT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub vec: Vector,
    pub class_id: usize,
    /// Source domain for training samples. Test files may carry their own
    /// (target) domain labels for per-domain reporting; predictors never read it.
    pub domain_id: Option<usize>,
}

impl LabeledEmbedding {
    /// Ingests a raw encoder output, normalizing it to unit length.
    pub fn ingest(raw: Vec<f64>, class_id: usize, domain_id: Option<usize>) -> Result<Self> {
        let raw = Vector::new(raw)?;
        let vec = if (raw.norm() - 1.0).abs() <= INGEST_UNIT_TOL {
            raw
        } else {
            l2_normalize(&raw, DEFAULT_EPS)?
        };
        Ok(LabeledEmbedding {
            vec,
            class_id,
            domain_id,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    dim: usize,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    samples: Vec<LabeledEmbedding>,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        class_names: Vec<String>,
        domain_names: Vec<String>,
        samples: Vec<LabeledEmbedding>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(ShedError::InvalidDataset("dimension must be positive".into()));
        }
        if class_names.is_empty() {
            return Err(ShedError::InvalidDataset("no classes declared".into()));
        }
        let mut per_domain = vec![0usize; domain_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.vec.dim() != dim {
                return Err(ShedError::InvalidDataset(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    s.vec.dim()
                )));
            }
            if s.class_id >= class_names.len() {
                return Err(ShedError::InvalidDataset(format!(
                    "sample {i} has class id {} out of range",
                    s.class_id
                )));
            }
            if let Some(d) = s.domain_id {
                if d >= domain_names.len() {
                    return Err(ShedError::InvalidDataset(format!(
                        "sample {i} has domain id {d} out of range"
                    )));
                }
                per_domain[d] += 1;
            }
            let n = s.vec.norm();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(ShedError::InvalidDataset(format!(
                    "sample {i} has norm {n}, expected unit norm"
                )));
            }
        }
        if let Some((domain, &count)) = per_domain.iter().enumerate().find(|(_, c)| **c < 2) {
            return Err(ShedError::EmptyDomain { domain, count });
        }
        Ok(EmbeddingDataset {
            dim,
            class_names,
            domain_names,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn samples(&self) -> &[LabeledEmbedding] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn in_domain(&self, domain: usize) -> impl Iterator<Item = &LabeledEmbedding> {
        self.samples
            .iter()
            .filter(move |s| s.domain_id == Some(domain))
    }

    pub fn in_class(&self, class: usize) -> impl Iterator<Item = &LabeledEmbedding> {
        self.samples.iter().filter(move |s| s.class_id == class)
    }
}
