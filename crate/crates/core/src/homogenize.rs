//! Domain centroids, style-homogenized embeddings and class text prototypes.
//!
//! A style-homogenized vector is an embedding with its style centroid removed
//! and the remainder rescaled to unit length. Image embeddings are centered by
//! the centroid of their source domain; class text prototypes (template
//! averages) are centered by the global text centroid. Centroids themselves
//! are plain means and are never normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};
use crate::vector::{check_dims, l2_normalize, mean_vector, sub, Vector};

/// Mean of the unit vectors belonging to one domain.
pub fn compute_domain_centroid(dataset: &EmbeddingDataset, domain_id: usize) -> Result<Vector> {
    if domain_id >= dataset.num_domains() {
        return Err(ShedError::UnknownDomain(domain_id));
    }
    let members: Vec<&[f64]> = dataset.in_domain(domain_id).map(|s| &s.vec[..]).collect();
    if members.len() < 2 {
        return Err(ShedError::EmptyDomain {
            domain: domain_id,
            count: members.len(),
        });
    }
    mean_vector(members)
}

/// Centroids of every declared domain, in domain-id order.
pub fn compute_domain_centroids(dataset: &EmbeddingDataset) -> Result<Vec<Vector>> {
    (0..dataset.num_domains())
        .map(|d| compute_domain_centroid(dataset, d))
        .collect()
}

/// `(v - centroid) / ||v - centroid||`.
pub fn center_and_normalize(v: &[f64], centroid: &[f64], eps: f64) -> Result<Vector> {
    check_dims(v.len(), centroid.len())?;
    l2_normalize(&sub(v, centroid), eps)
}

/// Per-(template, class) text vectors as exported from a text encoder, plus the
/// role each template plays.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub template_names: Vec<String>,
    /// Keyed by (template index, class index); vectors are unit norm.
    pub vectors: BTreeMap<(usize, usize), Vector>,
    pub source_templates: Vec<usize>,
    pub additional_templates: Vec<usize>,
    /// Plain "a photo of a {class}" style template, when the export has one.
    pub generic_template: Option<usize>,
}

impl TextEmbeddings {
    pub fn template_index(&self, name: &str) -> Result<usize> {
        self.template_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| ShedError::UnknownTemplate(name.to_string()))
    }

    fn missing(&self, template: usize, class: usize) -> ShedError {
        ShedError::MissingTemplateClassPair {
            template: self
                .template_names
                .get(template)
                .cloned()
                .unwrap_or_else(|| format!("#{template}")),
            class: self
                .class_names
                .get(class)
                .cloned()
                .unwrap_or_else(|| format!("#{class}")),
        }
    }
}

/// Which text vectors define the global text centroid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextCentering {
    /// Mean of the template-averaged class prototypes.
    #[default]
    SourceTemplates,
    /// Mean of the generic template's class vectors only.
    GenericTemplate,
}

/// Class text prototypes and their style-homogenized counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTextBank {
    raw: TextEmbeddings,
    source_templates: Vec<usize>,
    additional_templates: Vec<usize>,
    class_means: Vec<Vector>,
    text_centroid: Vector,
    homogenized: Vec<Vector>,
    prototypes: Vec<Vector>,
}

impl ClassTextBank {
    pub fn dim(&self) -> usize {
        self.raw.dim
    }

    pub fn num_classes(&self) -> usize {
        self.raw.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.raw.class_names
    }

    pub fn embeddings(&self) -> &TextEmbeddings {
        &self.raw
    }

    pub fn source_templates(&self) -> &[usize] {
        &self.source_templates
    }

    pub fn additional_templates(&self) -> &[usize] {
        &self.additional_templates
    }

    /// Template-averaged class vectors `T_c` (not normalized).
    pub fn class_means(&self) -> &[Vector] {
        &self.class_means
    }

    /// Global text centroid.
    pub fn text_centroid(&self) -> &Vector {
        &self.text_centroid
    }

    /// Style-homogenized class vectors, unit norm.
    pub fn homogenized(&self) -> &[Vector] {
        &self.homogenized
    }

    /// Unit-normalized class means, used as the single zero-shot prototype per class.
    pub fn prototypes(&self) -> &[Vector] {
        &self.prototypes
    }

    /// Unit class vectors of the generic template, if present.
    pub fn generic_prototypes(&self) -> Option<Vec<Vector>> {
        let t = self.raw.generic_template?;
        (0..self.num_classes())
            .map(|c| self.raw.vectors.get(&(t, c)).cloned())
            .collect()
    }

    pub fn vector(&self, template: usize, class: usize) -> Result<&Vector> {
        self.raw
            .vectors
            .get(&(template, class))
            .ok_or_else(|| self.raw.missing(template, class))
    }
}

/// Builds the class text bank with the default centering strategy.
pub fn build_text_bank(
    raw: &TextEmbeddings,
    source_templates: &[usize],
    additional_templates: &[usize],
) -> Result<ClassTextBank> {
    build_text_bank_with(
        raw,
        source_templates,
        additional_templates,
        TextCentering::SourceTemplates,
    )
}

pub fn build_text_bank_with(
    raw: &TextEmbeddings,
    source_templates: &[usize],
    additional_templates: &[usize],
    centering: TextCentering,
) -> Result<ClassTextBank> {
    let num_classes = raw.class_names.len();
    if num_classes == 0 {
        return Err(ShedError::InvalidDataset("text bank declares no classes".into()));
    }
    if source_templates.is_empty() {
        return Err(ShedError::InvalidDataset("no source templates".into()));
    }
    for &t in source_templates.iter().chain(additional_templates) {
        if t >= raw.template_names.len() {
            return Err(ShedError::UnknownTemplate(format!("#{t}")));
        }
    }
    for v in raw.vectors.values() {
        check_dims(raw.dim, v.dim())?;
    }

    let mut class_means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let members = source_templates
            .iter()
            .map(|&t| {
                raw.vectors
                    .get(&(t, c))
                    .map(|v| &v[..])
                    .ok_or_else(|| raw.missing(t, c))
            })
            .collect::<Result<Vec<_>>>()?;
        class_means.push(mean_vector(members)?);
    }

    let text_centroid = match centering {
        TextCentering::SourceTemplates => mean_vector(class_means.iter().map(|v| &v[..]))?,
        TextCentering::GenericTemplate => {
            let t = raw.generic_template.ok_or_else(|| {
                ShedError::InvalidConfig("generic-template centering needs a generic template".into())
            })?;
            let members = (0..num_classes)
                .map(|c| {
                    raw.vectors
                        .get(&(t, c))
                        .map(|v| &v[..])
                        .ok_or_else(|| raw.missing(t, c))
                })
                .collect::<Result<Vec<_>>>()?;
            mean_vector(members)?
        }
    };

    let eps = crate::vector::DEFAULT_EPS;
    let prototypes = class_means
        .iter()
        .map(|t| l2_normalize(t, eps))
        .collect::<Result<Vec<_>>>()?;
    // A lone class coincides with the text centroid; keep its prototype.
    let homogenized = if num_classes == 1 && centering == TextCentering::SourceTemplates {
        prototypes.clone()
    } else {
        class_means
            .iter()
            .map(|t| center_and_normalize(t, &text_centroid, eps))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(ClassTextBank {
        raw: raw.clone(),
        source_templates: source_templates.to_vec(),
        additional_templates: additional_templates.to_vec(),
        class_means,
        text_centroid,
        homogenized,
        prototypes,
    })
}

impl TryFrom<&TextEmbeddings> for ClassTextBank {
    type Error = ShedError;

    fn try_from(raw: &TextEmbeddings) -> Result<Self> {
        build_text_bank(raw, &raw.source_templates, &raw.additional_templates)
    }
}

/// Mean over classes of one template's text vectors.
pub fn compute_text_domain_centroid(bank: &ClassTextBank, template: usize) -> Result<Vector> {
    let members = (0..bank.num_classes())
        .map(|c| bank.vector(template, c).map(|v| &v[..]))
        .collect::<Result<Vec<_>>>()?;
    mean_vector(members)
}

/// Every centroid the inference stage may center a test embedding with.
///
/// `combined()` yields sources first, then the CPM block, then the SWM block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub dim: usize,
    /// Visual source-domain centroids, frozen before training.
    pub source: Vec<Vector>,
    /// Text centroids of the source templates.
    pub source_text: Vec<Vector>,
    /// Text centroids of the additional templates.
    pub additional_text: Vec<Vector>,
    pub cpm: Vec<Vector>,
    pub swm: Vec<Vector>,
    /// Indices into the training set of the visual sample pool used by SWM.
    pub pool_indices: Vec<usize>,
}

impl CentroidBank {
    pub fn combined(&self) -> impl Iterator<Item = &Vector> {
        self.source.iter().chain(&self.cpm).chain(&self.swm)
    }

    pub fn len(&self) -> usize {
        self.source.len() + self.cpm.len() + self.swm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
