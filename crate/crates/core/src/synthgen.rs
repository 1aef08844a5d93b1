//! Synthetic embedding benchmarks with known class directions, additive domain
//! styles and a text-modality gap.
//!
//! Image sample: `normalize(alpha * u_c + beta * delta_s + sigma * eps)`.
//! Text vector: `normalize(u_c + gamma * g + text_style_scale * beta * s_t +
//! template_noise * eps)` where `s_t` is the style carried by template `t`:
//! source template `i` describes source domain `i % S`; the first additional
//! templates describe the target domains, then the source domains, and the
//! rest carry fresh distractor styles. The generic template carries none.
//!
//! Randomness comes from ChaCha8 with one stream per purpose, and per
//! (domain, class) cell for samples, so adding classes or domains leaves
//! existing draws untouched.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dataset::{EmbeddingDataset, LabeledEmbedding};
use crate::error::{Result, ShedError};
use crate::homogenize::TextEmbeddings;
use crate::vector::{dot, l2_normalize, Vector, DEFAULT_EPS};

const STREAM_CLASS: u64 = 1 << 32;
const STREAM_DOMAIN: u64 = 2 << 32;
const STREAM_GAP: u64 = 3 << 32;
const STREAM_DISTRACTOR: u64 = 4 << 32;
const STREAM_TEXT: u64 = 5 << 32;
const STREAM_CELL: u64 = 6 << 32;

pub const GENERIC_TEMPLATE: &str = "generic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub num_source_domains: usize,
    pub num_target_domains: usize,
    pub samples_per_domain_class: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub template_noise: f64,
    pub text_style_scale: f64,
    pub num_source_templates: usize,
    pub num_additional_templates: usize,
    /// Sample style offsets in the orthogonal complement of the class span.
    pub orthogonal_styles: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dim: 64,
            num_classes: 10,
            num_source_domains: 3,
            num_target_domains: 1,
            samples_per_domain_class: 50,
            alpha: 1.0,
            beta: 1.5,
            sigma: 0.3,
            gamma: 0.5,
            template_noise: 0.3,
            text_style_scale: 1.0,
            num_source_templates: 9,
            num_additional_templates: 8,
            orthogonal_styles: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("template_noise", self.template_noise),
            ("text_style_scale", self.text_style_scale),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ShedError::InvalidConfig(format!("gen.{name} must be finite and >= 0, got {v}")));
            }
        }
        let counts = [
            ("dim", self.dim),
            ("num_classes", self.num_classes),
            ("num_source_domains", self.num_source_domains),
            ("num_target_domains", self.num_target_domains),
            ("num_source_templates", self.num_source_templates),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ShedError::InvalidConfig(format!("gen.{name} must be >= 1")));
            }
        }
        // centroids need two samples per domain
        if self.samples_per_domain_class * self.num_classes < 2 {
            return Err(ShedError::InvalidConfig(
                "gen: need at least 2 samples per domain".into(),
            ));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.sigma == 0.0 {
            return Err(ShedError::InvalidConfig("gen: alpha, beta and sigma are all 0".into()));
        }
        if self.dim < self.num_classes {
            warn!("dim {} < num_classes {}: class directions cannot be orthonormal", self.dim, self.num_classes);
        }
        Ok(())
    }
}

/// The domain style a template describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum TemplateStyle {
    Source(usize),
    Target(usize),
    Distractor(usize),
    None,
}

/// Ground truth behind a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub config: GenConfig,
    pub class_directions: Vec<Vector>,
    pub source_offsets: Vec<Vector>,
    pub target_offsets: Vec<Vector>,
    pub distractor_offsets: Vec<Vector>,
    pub gap: Vector,
    pub template_styles: Vec<(String, TemplateStyle)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub text: TextEmbeddings,
    pub metadata: SynthMetadata,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(r)).collect()
}

fn remove_components(v: &mut [f64], basis: &[Vector]) {
    for b in basis {
        let c = dot(v, b);
        for (x, y) in v.iter_mut().zip(b.iter()) {
            *x -= c * y;
        }
    }
}

/// Unit direction drawn from `stream`, optionally orthogonal to `basis`.
fn random_unit(seed: u64, stream: u64, dim: usize, basis: &[Vector]) -> Result<Vector> {
    let mut r = rng(seed, stream);
    let mut v = gaussian(&mut r, dim);
    remove_components(&mut v, basis);
    l2_normalize(&v, DEFAULT_EPS)
}

fn class_directions(cfg: &GenConfig) -> Result<Vec<Vector>> {
    let mut dirs: Vec<Vector> = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let basis = if c < cfg.dim { &dirs[..] } else { &[][..] };
        let u = random_unit(cfg.seed, STREAM_CLASS + c as u64, cfg.dim, basis)?;
        dirs.push(u);
    }
    Ok(dirs)
}

fn combine(terms: &[(f64, &[f64])], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in terms {
        if *w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

fn domain_cells(
    cfg: &GenConfig,
    domain_stream: u64,
    domain_id: usize,
    classes: &[Vector],
    offset: &Vector,
    out: &mut Vec<LabeledEmbedding>,
) -> Result<()> {
    for (c, u) in classes.iter().enumerate() {
        let mut r = rng(cfg.seed, STREAM_CELL + (domain_stream << 16) + c as u64);
        for _ in 0..cfg.samples_per_domain_class {
            let noise = gaussian(&mut r, cfg.dim);
            let raw = combine(&[(cfg.alpha, u), (cfg.beta, offset), (cfg.sigma, &noise)], cfg.dim);
            out.push(LabeledEmbedding::ingest(raw, c, Some(domain_id))?);
        }
    }
    Ok(())
}

pub fn generate_benchmark(cfg: &GenConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let dim = cfg.dim;
    let classes = class_directions(cfg)?;
    let style_basis: &[Vector] = if cfg.orthogonal_styles {
        if dim > cfg.num_classes {
            &classes
        } else {
            warn!("no room for orthogonal styles in dim {dim}; sampling unconstrained offsets");
            &[]
        }
    } else {
        &[]
    };

    let num_domains = cfg.num_source_domains + cfg.num_target_domains;
    let offsets = (0..num_domains)
        .map(|s| random_unit(cfg.seed, STREAM_DOMAIN + s as u64, dim, style_basis))
        .collect::<Result<Vec<_>>>()?;
    let (source_offsets, target_offsets) = offsets.split_at(cfg.num_source_domains);
    let gap = random_unit(cfg.seed, STREAM_GAP, dim, &[])?;

    let class_names: Vec<String> = (0..cfg.num_classes).map(|c| format!("class_{c:02}")).collect();
    let source_names: Vec<String> = (0..cfg.num_source_domains).map(|s| format!("source_{s}")).collect();
    let target_names: Vec<String> = (0..cfg.num_target_domains).map(|s| format!("target_{s}")).collect();

    let mut train = Vec::new();
    for (s, off) in source_offsets.iter().enumerate() {
        domain_cells(cfg, s as u64, s, &classes, off, &mut train)?;
    }
    let mut test = Vec::new();
    for (t, off) in target_offsets.iter().enumerate() {
        domain_cells(cfg, (cfg.num_source_domains + t) as u64, t, &classes, off, &mut test)?;
    }

    let mut template_styles: Vec<(String, TemplateStyle)> = (0..cfg.num_source_templates)
        .map(|i| (format!("src_{i}"), TemplateStyle::Source(i % cfg.num_source_domains)))
        .collect();
    let mut distractor_offsets = Vec::new();
    for j in 0..cfg.num_additional_templates {
        let style = if j < cfg.num_target_domains {
            TemplateStyle::Target(j)
        } else if j < num_domains {
            TemplateStyle::Source(j - cfg.num_target_domains)
        } else {
            let k = distractor_offsets.len();
            distractor_offsets.push(random_unit(cfg.seed, STREAM_DISTRACTOR + k as u64, dim, style_basis)?);
            TemplateStyle::Distractor(k)
        };
        template_styles.push((format!("add_{j:02}"), style));
    }
    template_styles.push((GENERIC_TEMPLATE.to_string(), TemplateStyle::None));

    let zero = Vector::zeros(dim);
    let mut vectors = BTreeMap::new();
    for (t, (_, style)) in template_styles.iter().enumerate() {
        let s_t = match *style {
            TemplateStyle::Source(i) => &source_offsets[i],
            TemplateStyle::Target(i) => &target_offsets[i],
            TemplateStyle::Distractor(i) => &distractor_offsets[i],
            TemplateStyle::None => &zero,
        };
        for (c, u) in classes.iter().enumerate() {
            let mut r = rng(cfg.seed, STREAM_TEXT + ((t as u64) << 16) + c as u64);
            let jitter = gaussian(&mut r, dim);
            let raw = combine(
                &[
                    (1.0, u),
                    (cfg.gamma, &gap),
                    (cfg.text_style_scale * cfg.beta, s_t),
                    (cfg.template_noise, &jitter),
                ],
                dim,
            );
            vectors.insert((t, c), l2_normalize(&raw, DEFAULT_EPS)?);
        }
    }
    let n_src = cfg.num_source_templates;
    let text = TextEmbeddings {
        dim,
        class_names: class_names.clone(),
        template_names: template_styles.iter().map(|(n, _)| n.clone()).collect(),
        vectors,
        source_templates: (0..n_src).collect(),
        additional_templates: (n_src..n_src + cfg.num_additional_templates).collect(),
        generic_template: Some(template_styles.len() - 1),
    };

    Ok(SyntheticBenchmark {
        train: EmbeddingDataset::new(dim, class_names.clone(), source_names, train)?,
        test: EmbeddingDataset::new(dim, class_names, target_names, test)?,
        text,
        metadata: SynthMetadata {
            config: cfg.clone(),
            class_directions: classes,
            source_offsets: source_offsets.to_vec(),
            target_offsets: target_offsets.to_vec(),
            distractor_offsets,
            gap,
            template_styles,
        },
    })
}
