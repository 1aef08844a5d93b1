//! Training-free class probability models.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::homogenize::{center_and_normalize, ClassTextBank};
use crate::vector::{check_dims, dot, tempered_softmax, Vector, DEFAULT_EPS};

/// Which text vector stands in for a class in raw zero-shot scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotText {
    /// Normalized average over the source templates.
    #[default]
    Aggregated,
    /// The generic template alone.
    Generic,
}

/// Softmax over `<x, t_c> / tau` for unit vectors `x` and `t_c`.
pub fn clip_zeroshot_probs(x: &[f64], class_texts: &[Vector], tau: f64) -> Result<Vec<f64>> {
    let scores = class_texts
        .iter()
        .map(|t| {
            check_dims(x.len(), t.dim())?;
            Ok(dot(x, t))
        })
        .collect::<Result<Vec<_>>>()?;
    tempered_softmax(&scores, tau)
}

/// Raw zero-shot probabilities against the bank's class prototypes.
pub fn clip_zeroshot_bank(
    x: &[f64],
    bank: &ClassTextBank,
    text: ZeroShotText,
    tau: f64,
) -> Result<Vec<f64>> {
    match text {
        ZeroShotText::Aggregated => clip_zeroshot_probs(x, bank.prototypes(), tau),
        ZeroShotText::Generic => {
            let generic = bank.generic_prototypes().ok_or_else(|| {
                crate::error::ShedError::InvalidConfig("text bank has no generic template".into())
            })?;
            clip_zeroshot_probs(x, &generic, tau)
        }
    }
}

/// Zero-shot probabilities between the centered image embedding and the
/// style-homogenized class texts.
pub fn sh_zeroshot_probs(
    x: &[f64],
    domain_centroid: &[f64],
    bank: &ClassTextBank,
    tau: f64,
) -> Result<Vec<f64>> {
    let centered = center_and_normalize(x, domain_centroid, DEFAULT_EPS)?;
    clip_zeroshot_probs(&centered, bank.homogenized(), tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenize::{build_text_bank, TextEmbeddings};
    use crate::vector::l2_normalize;

    fn unit(v: &[f64]) -> Vector {
        l2_normalize(v, DEFAULT_EPS).unwrap()
    }

    fn bank_from(classes: &[Vec<f64>]) -> ClassTextBank {
        let raw = TextEmbeddings {
            dim: classes[0].len(),
            class_names: (0..classes.len()).map(|c| format!("c{c}")).collect(),
            template_names: vec!["t".into()],
            vectors: classes
                .iter()
                .enumerate()
                .map(|(c, v)| ((0, c), unit(v)))
                .collect(),
            source_templates: vec![0],
            additional_templates: vec![],
            generic_template: None,
        };
        build_text_bank(&raw, &[0], &[]).unwrap()
    }

    #[test]
    fn clip_sharpens_with_small_tau() {
        let texts = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let mut last = 0.0;
        for tau in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let p = clip_zeroshot_probs(&texts[0], &texts, tau).unwrap();
            assert!(p[0] > last);
            last = p[0];
        }
        assert!(last > 0.99);
    }

    #[test]
    fn clip_ties_and_oracle() {
        let t = unit(&[0.3, 0.4]);
        let p = clip_zeroshot_probs(&[1.0, 0.0], &[t.clone(), t.clone(), t], 0.05).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        // x chosen so the two cosines are exactly 0.9 and 0.1
        let x = [0.9, 0.1, (1.0f64 - 0.81 - 0.01).sqrt()];
        let texts = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let p = clip_zeroshot_probs(&x, &texts, 1.0).unwrap();
        let oracle = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((p[0] - oracle).abs() < 1e-12);
        assert!((p[0] - 0.69).abs() < 5e-5);
        assert!(clip_zeroshot_probs(&x, &texts, 0.0).is_err());
        assert!(clip_zeroshot_probs(&[1.0, 0.0], &texts, 1.0).is_err());
    }

    #[test]
    fn sh_reduces_to_clip_with_zero_centroid() {
        // two classes whose text centroid is zero, so homogenized == prototypes
        let bank = bank_from(&[vec![1.0, 0.2], vec![-1.0, -0.2]]);
        assert!(bank.text_centroid().iter().all(|x| x.abs() < 1e-15));
        let x = unit(&[0.3, -0.7]);
        let a = sh_zeroshot_probs(&x, &[0.0, 0.0], &bank, 0.1).unwrap();
        let b = clip_zeroshot_probs(&x, bank.homogenized(), 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_permutation_equivariance() {
        let classes = vec![vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.3], vec![0.2, 0.0, 1.0]];
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| classes[i].clone()).collect();
        let x = unit(&[0.5, 0.2, -0.4]);
        let centroid = [0.1, 0.1, 0.1];
        let bank = bank_from(&classes);
        let pbank = bank_from(&permuted);
        let p = sh_zeroshot_probs(&x, &centroid, &bank, 0.2).unwrap();
        let q = sh_zeroshot_probs(&x, &centroid, &pbank, 0.2).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((q[j] - p[i]).abs() < 1e-12);
        }
        let p = clip_zeroshot_probs(&x, bank.prototypes(), 0.2).unwrap();
        let q = clip_zeroshot_probs(&x, pbank.prototypes(), 0.2).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((q[j] - p[i]).abs() < 1e-12);
        }
    }
}
