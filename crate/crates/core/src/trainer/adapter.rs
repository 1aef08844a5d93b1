use serde::{Deserialize, Serialize};

use crate::error::{Result, ShedError};
use crate::vector::{check_dims, l2_normalize, Vector};

/// Affine map `x -> normalize(A x + b)` trained in place of the image encoder.
///
/// The weight is stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        AdapterParams {
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn from_parts(dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dims(dim * dim, weight.len())?;
        check_dims(dim, bias.len())?;
        if let Some(index) = weight.iter().chain(&bias).position(|x| !x.is_finite()) {
            return Err(ShedError::NonFinite { index });
        }
        Ok(AdapterParams { dim, weight, bias })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `A x + b` before normalization.
    pub fn affine(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim, x.len())?;
        Ok(self
            .weight
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect())
    }

    /// Flattened view: weight entries followed by bias entries.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        check_dims(dim * dim + dim, flat.len())?;
        let (w, b) = flat.split_at(dim * dim);
        AdapterParams::from_parts(dim, w.to_vec(), b.to_vec())
    }
}

/// Adapted embedding `normalize(A x + b)`.
pub fn forward_adapter(params: &AdapterParams, base: &[f64], eps: f64) -> Result<Vector> {
    l2_normalize(&params.affine(base)?, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::DEFAULT_EPS;

    #[test]
    fn forward_examples() {
        let x = [0.6, 0.0, 0.8];
        let id = AdapterParams::identity(3);
        assert_eq!(forward_adapter(&id, &x, DEFAULT_EPS).unwrap().as_slice(), &x);

        let mut twice = id.clone();
        twice.weight.iter_mut().for_each(|w| *w *= 2.0);
        let y = forward_adapter(&twice, &x, DEFAULT_EPS).unwrap();
        assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-15));

        // rows pick x[2], x[0], x[1]
        let perm = AdapterParams::from_parts(
            3,
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0; 3],
        )
        .unwrap();
        assert_eq!(forward_adapter(&perm, &x, DEFAULT_EPS).unwrap().as_slice(), &[0.8, 0.6, 0.0]);

        let zero = AdapterParams::from_parts(3, vec![0.0; 9], vec![0.0; 3]).unwrap();
        assert!(matches!(
            forward_adapter(&zero, &x, DEFAULT_EPS),
            Err(ShedError::DegenerateEmbedding { .. })
        ));
        assert!(forward_adapter(&id, &[1.0, 0.0], DEFAULT_EPS).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let p = AdapterParams::from_parts(2, vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0]).unwrap();
        assert_eq!(p.to_flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(AdapterParams::from_flat(2, &p.to_flat()).unwrap(), p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_is_unit_and_scale_invariant(
                flat in prop::collection::vec(-2.0f64..2.0, 20),
                x in prop::collection::vec(-1.0f64..1.0, 4),
                scale in 0.01f64..100.0,
            ) {
                let p = AdapterParams::from_flat(4, &flat).unwrap();
                prop_assume!(crate::vector::norm(&p.affine(&x).unwrap()) > 1e-6);
                let y = forward_adapter(&p, &x, DEFAULT_EPS).unwrap();
                prop_assert!((y.norm() - 1.0).abs() < 1e-12);
                let scaled: Vec<f64> = flat.iter().map(|v| v * scale).collect();
                let z = forward_adapter(&AdapterParams::from_flat(4, &scaled).unwrap(), &x, DEFAULT_EPS).unwrap();
                prop_assert!(y.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
            }
        }
    }
}
