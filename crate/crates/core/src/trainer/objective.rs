//! Alignment and regularization losses with their analytical gradients.
//!
//! Per sample, with base embedding `x`, frozen anchor `a = f_clip(x)` and
//! domain centroid `mu`:
//!
//! ```text
//! z  = A x + b          f  = z / |z|
//! u  = f - mu           fh = u / |u|
//! align = -log softmax(<fh, T_hat_c> / tau)[y]
//! reg   = sum_i |f_i - a_i| + sum_i |fh_i - ah_i|,   ah = normalize(a - mu)
//! ```
//!
//! The backward pass pushes the gradient through both normalizations using
//! `d(v/|v|) = (I - n n^T) / |v|`. The L1 subgradient at zero is 0.

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Result, ShedError};
use crate::homogenize::ClassTextBank;
use crate::trainer::adapter::{forward_adapter, AdapterParams};
use crate::vector::{dot, l2_normalize, sub, tempered_log_softmax, tempered_softmax, Vector};

/// Which text/image pair the alignment loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Centered image embedding against style-homogenized class texts.
    #[default]
    StyleHomogenized,
    /// Raw image embedding against normalized class prototypes.
    Direct,
}

/// A training sample with its frozen base-model anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchoredSample {
    pub base: Vector,
    /// Output of the identity adapter; equals the adapted embedding bit for
    /// bit at initialization.
    pub anchor: Vector,
    pub class_id: usize,
    pub domain_id: usize,
}

pub fn anchor_samples(dataset: &EmbeddingDataset, eps: f64) -> Result<Vec<AnchoredSample>> {
    let identity = AdapterParams::identity(dataset.dim());
    dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let domain_id = s.domain_id.ok_or_else(|| {
                ShedError::InvalidDataset(format!("training sample {i} has no domain"))
            })?;
            Ok(AnchoredSample {
                base: s.vec.clone(),
                anchor: forward_adapter(&identity, &s.vec, eps).map_err(|e| e.at_sample(i))?,
                class_id: s.class_id,
                domain_id,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub align: f64,
    pub reg: f64,
}

impl LossValue {
    pub fn total(&self, reg_weight: f64) -> f64 {
        self.align + reg_weight * self.reg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn zeros(dim: usize) -> Self {
        Gradient {
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }
}

/// Everything the losses need besides the batch and the parameters.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub centroids: &'a [Vector],
    pub bank: &'a ClassTextBank,
    pub tau: f64,
    pub reg_weight: f64,
    pub alignment: Alignment,
    pub eps: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Forward {
    z_norm: f64,
    f: Vector,
    u_norm: f64,
    fh: Vector,
}

impl<'a> Objective<'a> {
    fn centroid(&self, domain: usize) -> Result<&'a Vector> {
        self.centroids.get(domain).ok_or(ShedError::UnknownDomain(domain))
    }

    fn class_texts(&self) -> &'a [Vector] {
        match self.alignment {
            Alignment::StyleHomogenized => self.bank.homogenized(),
            Alignment::Direct => self.bank.prototypes(),
        }
    }

    fn forward(&self, params: &AdapterParams, s: &AnchoredSample) -> Result<Forward> {
        let z = params.affine(&s.base)?;
        let f = l2_normalize(&z, self.eps)?;
        let z_norm = crate::vector::norm(&z);
        let u = sub(&f, self.centroid(s.domain_id)?);
        let fh = l2_normalize(&u, self.eps)?;
        Ok(Forward {
            z_norm,
            f,
            u_norm: crate::vector::norm(&u),
            fh,
        })
    }

    fn logits(&self, fwd: &Forward) -> Vec<f64> {
        let query = match self.alignment {
            Alignment::StyleHomogenized => &fwd.fh,
            Alignment::Direct => &fwd.f,
        };
        self.class_texts().iter().map(|t| dot(query, t)).collect()
    }

    fn anchor_hat(&self, s: &AnchoredSample) -> Result<Vector> {
        l2_normalize(&sub(&s.anchor, self.centroid(s.domain_id)?), self.eps)
    }

    /// Mean cross-entropy of the alignment logits over the batch.
    pub fn loss_align(&self, batch: &[&AnchoredSample], params: &AdapterParams) -> Result<f64> {
        if batch.is_empty() {
            return Err(ShedError::EmptyInput);
        }
        let mut total = 0.0;
        for s in batch {
            let fwd = self.forward(params, s)?;
            let logp = tempered_log_softmax(&self.logits(&fwd), self.tau)?;
            total -= logp[s.class_id];
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean L1 distance to the frozen anchors, in raw and centered form.
    pub fn loss_reg(&self, batch: &[&AnchoredSample], params: &AdapterParams) -> Result<f64> {
        if batch.is_empty() {
            return Err(ShedError::EmptyInput);
        }
        let mut total = 0.0;
        for s in batch {
            let fwd = self.forward(params, s)?;
            let ah = self.anchor_hat(s)?;
            let raw: f64 = fwd.f.iter().zip(s.anchor.iter()).map(|(a, b)| (a - b).abs()).sum();
            let centered: f64 = fwd.fh.iter().zip(ah.iter()).map(|(a, b)| (a - b).abs()).sum();
            total += raw + centered;
        }
        Ok(total / batch.len() as f64)
    }

    /// Both losses and the gradient of `align + reg_weight * reg` with respect
    /// to the adapter weight and bias.
    pub fn grad_total(
        &self,
        batch: &[&AnchoredSample],
        params: &AdapterParams,
    ) -> Result<(LossValue, Gradient)> {
        if batch.is_empty() {
            return Err(ShedError::EmptyInput);
        }
        let d = params.dim;
        let w = self.reg_weight;
        let texts = self.class_texts();
        let mut loss = LossValue::default();
        let mut grad = Gradient::zeros(d);

        for s in batch {
            let fwd = self.forward(params, s)?;
            let ah = self.anchor_hat(s)?;
            let p = tempered_softmax(&self.logits(&fwd), self.tau)?;
            loss.align -= p[s.class_id].ln();
            loss.reg += fwd.f.iter().zip(s.anchor.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                + fwd.fh.iter().zip(ah.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();

            // d align / d query = sum_c (p_c - [c == y]) t_c / tau
            let mut g_query = vec![0.0; d];
            for (c, t) in texts.iter().enumerate() {
                let r = (p[c] - if c == s.class_id { 1.0 } else { 0.0 }) / self.tau;
                for (g, ti) in g_query.iter_mut().zip(t.iter()) {
                    *g += r * ti;
                }
            }

            let mut g_fh: Vec<f64> = fwd.fh.iter().zip(ah.iter()).map(|(a, b)| w * sign(a - b)).collect();
            let mut g_f: Vec<f64> = fwd.f.iter().zip(s.anchor.iter()).map(|(a, b)| w * sign(a - b)).collect();
            match self.alignment {
                Alignment::StyleHomogenized => g_fh.iter_mut().zip(&g_query).for_each(|(g, q)| *g += q),
                Alignment::Direct => g_f.iter_mut().zip(&g_query).for_each(|(g, q)| *g += q),
            }

            // through fh = u / |u|, u = f - mu
            let proj = dot(&fwd.fh, &g_fh);
            for ((gf, gh), n) in g_f.iter_mut().zip(&g_fh).zip(fwd.fh.iter()) {
                *gf += (gh - n * proj) / fwd.u_norm;
            }
            // through f = z / |z|
            let proj = dot(&fwd.f, &g_f);
            let g_z: Vec<f64> = g_f
                .iter()
                .zip(fwd.f.iter())
                .map(|(g, n)| (g - n * proj) / fwd.z_norm)
                .collect();

            for (i, gz) in g_z.iter().enumerate() {
                let row = &mut grad.weight[i * d..(i + 1) * d];
                for (gw, xj) in row.iter_mut().zip(s.base.iter()) {
                    *gw += gz * xj;
                }
                grad.bias[i] += gz;
            }
        }

        let n = batch.len() as f64;
        loss.align /= n;
        loss.reg /= n;
        grad.weight.iter_mut().for_each(|g| *g /= n);
        grad.bias.iter_mut().for_each(|g| *g /= n);
        Ok((loss, grad))
    }

    /// Adapted embeddings of a batch, used by centroid moving averages.
    pub(crate) fn adapted(&self, batch: &[&AnchoredSample], params: &AdapterParams) -> Result<Vec<Vector>> {
        batch
            .iter()
            .map(|s| forward_adapter(params, &s.base, self.eps))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenize::{build_text_bank, TextEmbeddings};
    use crate::vector::DEFAULT_EPS;

    fn unit(v: &[f64]) -> Vector {
        l2_normalize(v, DEFAULT_EPS).unwrap()
    }

    fn bank(classes: &[Vec<f64>]) -> ClassTextBank {
        let raw = TextEmbeddings {
            dim: classes[0].len(),
            class_names: (0..classes.len()).map(|c| format!("c{c}")).collect(),
            template_names: vec!["t".into()],
            vectors: classes.iter().enumerate().map(|(c, v)| ((0, c), unit(v))).collect(),
            source_templates: vec![0],
            additional_templates: vec![],
            generic_template: None,
        };
        build_text_bank(&raw, &[0], &[]).unwrap()
    }

    fn sample(x: &[f64], class_id: usize) -> AnchoredSample {
        let base = unit(x);
        AnchoredSample {
            anchor: forward_adapter(&AdapterParams::identity(base.dim()), &base, DEFAULT_EPS).unwrap(),
            base,
            class_id,
            domain_id: 0,
        }
    }

    #[test]
    fn single_class_loss_is_zero() {
        let b = bank(&[vec![1.0, 0.0]]);
        let centroids = vec![Vector::new(vec![0.1, 0.1]).unwrap()];
        for alignment in [Alignment::StyleHomogenized, Alignment::Direct] {
            let obj = Objective {
                centroids: &centroids,
                bank: &b,
                tau: 0.05,
                reg_weight: 1.0,
                alignment,
                eps: DEFAULT_EPS,
            };
            let s = sample(&[0.3, 0.9], 0);
            let loss = obj.loss_align(&[&s], &AdapterParams::identity(2)).unwrap();
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn orthogonal_query_gives_log_c() {
        // homogenized texts for classes along e0 and -e0; query along e1
        let b = bank(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        let centroids = vec![Vector::zeros(3)];
        let obj = Objective {
            centroids: &centroids,
            bank: &b,
            tau: 0.1,
            reg_weight: 1.0,
            alignment: Alignment::StyleHomogenized,
            eps: DEFAULT_EPS,
        };
        let s = sample(&[0.0, 1.0, 0.0], 1);
        let loss = obj.loss_align(&[&s], &AdapterParams::identity(3)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tiny_instance_matches_scalar_oracle() {
        // d=2, C=2, one sample, non-identity adapter
        let b = bank(&[vec![1.0, 0.2], vec![0.1, 1.0]]);
        let mu = Vector::new(vec![0.3, 0.25]).unwrap();
        let centroids = vec![mu.clone()];
        let tau = 0.2;
        let obj = Objective {
            centroids: &centroids,
            bank: &b,
            tau,
            reg_weight: 1.0,
            alignment: Alignment::StyleHomogenized,
            eps: DEFAULT_EPS,
        };
        let s = sample(&[0.8, 0.6], 0);
        let params = AdapterParams::from_parts(2, vec![1.1, 0.2, -0.1, 0.9], vec![0.05, -0.02]).unwrap();

        // scalar recomputation
        let (x0, x1) = (s.base[0], s.base[1]);
        let z0 = 1.1 * x0 + 0.2 * x1 + 0.05;
        let z1 = -0.1 * x0 + 0.9 * x1 - 0.02;
        let zn = (z0 * z0 + z1 * z1).sqrt();
        let (f0, f1) = (z0 / zn, z1 / zn);
        let (u0, u1) = (f0 - 0.3, f1 - 0.25);
        let un = (u0 * u0 + u1 * u1).sqrt();
        let (h0, h1) = (u0 / un, u1 / un);
        // T_c = raw unit vectors, mu_text = their mean, T_hat = normalized difference
        let n0 = (1.0f64 + 0.04).sqrt();
        let n1 = (0.01f64 + 1.0).sqrt();
        let (t00, t01, t10, t11) = (1.0 / n0, 0.2 / n0, 0.1 / n1, 1.0 / n1);
        let (m0, m1) = ((t00 + t10) / 2.0, (t01 + t11) / 2.0);
        let (d00, d01) = (t00 - m0, t01 - m1);
        let dn0 = (d00 * d00 + d01 * d01).sqrt();
        let (d10, d11) = (t10 - m0, t11 - m1);
        let dn1 = (d10 * d10 + d11 * d11).sqrt();
        let l0 = (h0 * d00 + h1 * d01) / dn0 / tau;
        let l1 = (h0 * d10 + h1 * d11) / dn1 / tau;
        let oracle_align = -(l0 - (l0.exp() + l1.exp()).ln());

        let (a0, a1) = (s.anchor[0], s.anchor[1]);
        let (v0, v1) = (a0 - 0.3, a1 - 0.25);
        let vn = (v0 * v0 + v1 * v1).sqrt();
        let oracle_reg = (f0 - a0).abs() + (f1 - a1).abs() + (h0 - v0 / vn).abs() + (h1 - v1 / vn).abs();

        let align = obj.loss_align(&[&s], &params).unwrap();
        let reg = obj.loss_reg(&[&s], &params).unwrap();
        assert!((align - oracle_align).abs() < 1e-10, "{align} vs {oracle_align}");
        assert!((reg - oracle_reg).abs() < 1e-10, "{reg} vs {oracle_reg}");
        let (lv, _) = obj.grad_total(&[&s], &params).unwrap();
        assert!((lv.align - align).abs() < 1e-12 && (lv.reg - reg).abs() < 1e-12);
    }

    #[test]
    fn reg_at_identity_is_exactly_zero_and_has_no_gradient() {
        let b = bank(&[vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![0.0, 0.1, 1.0]]);
        let centroids = vec![Vector::new(vec![0.2, 0.1, 0.3]).unwrap()];
        let samples: Vec<_> = [[0.5, 0.1, 0.2], [0.1, 0.9, -0.3], [-0.2, 0.4, 0.7]]
            .iter()
            .enumerate()
            .map(|(c, x)| sample(x, c))
            .collect();
        let batch: Vec<_> = samples.iter().collect();
        let id = AdapterParams::identity(3);
        let with_reg = Objective {
            centroids: &centroids,
            bank: &b,
            tau: 0.2,
            reg_weight: 1.0,
            alignment: Alignment::StyleHomogenized,
            eps: DEFAULT_EPS,
        };
        assert_eq!(with_reg.loss_reg(&batch, &id).unwrap(), 0.0);
        let no_reg = Objective { reg_weight: 0.0, ..with_reg };
        let (_, g1) = with_reg.grad_total(&batch, &id).unwrap();
        let (_, g0) = no_reg.grad_total(&batch, &id).unwrap();
        assert_eq!(g1, g0);
    }

    #[test]
    fn identical_samples_average_to_single() {
        let b = bank(&[vec![1.0, 0.2], vec![0.1, 1.0]]);
        let centroids = vec![Vector::new(vec![0.3, 0.25]).unwrap()];
        let obj = Objective {
            centroids: &centroids,
            bank: &b,
            tau: 0.2,
            reg_weight: 1.0,
            alignment: Alignment::StyleHomogenized,
            eps: DEFAULT_EPS,
        };
        let s = sample(&[0.8, 0.6], 1);
        let params = AdapterParams::from_parts(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.01, 0.0]).unwrap();
        let one = obj.loss_reg(&[&s], &params).unwrap();
        let many = obj.loss_reg(&[&s, &s, &s, &s], &params).unwrap();
        assert!((one - many).abs() < 1e-15);
        assert!(one > 0.0);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_one_hot() {
        // all homogenized texts orthogonal to the query: logits tie, so the
        // gradient w.r.t. logits is uniform minus one-hot. Check via the
        // gradient w.r.t. the query direction: sum_c (1/C - [c==y]) t_c / tau.
        let b = bank(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        let centroids = vec![Vector::zeros(3)];
        let obj = Objective {
            centroids: &centroids,
            bank: &b,
            tau: 0.5,
            reg_weight: 0.0,
            alignment: Alignment::StyleHomogenized,
            eps: DEFAULT_EPS,
        };
        let s = sample(&[0.0, 0.0, 1.0], 0);
        let (_, g) = obj.grad_total(&[&s], &AdapterParams::identity(3)).unwrap();
        // g_fh = (0.5 - 1) e0 / 0.5 + 0.5 (-e0) / 0.5 = -2 e0; f = fh = e2 so
        // both projections leave it unchanged; g_z = -2 e0, dA = g_z x^T.
        assert!((g.bias[0] + 2.0).abs() < 1e-12);
        assert!(g.bias[1].abs() < 1e-12 && g.bias[2].abs() < 1e-12);
        assert!((g.weight[2] + 2.0).abs() < 1e-12);
    }
}
