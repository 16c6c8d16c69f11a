//! Per-image learnable content and style embeddings.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DismoError, Result};
use crate::nn::{sample_standard_normal, TensorData};
use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    Gaussian { std: f32 },
    Zeros,
}

/// The free codes {c_i} and {s_i}, one row per dataset image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub content: Array2<f32>,
    pub style: Array2<f32>,
}

impl EmbeddingTable {
    pub fn n(&self) -> usize {
        self.content.nrows()
    }

    pub fn d_content(&self) -> usize {
        self.content.ncols()
    }

    pub fn d_style(&self) -> usize {
        self.style.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.content.nrows() != self.style.nrows() {
            return Err(DismoError::Invalid(
                "content and style tables disagree on row count".into(),
            ));
        }
        if self.content.iter().chain(self.style.iter()).any(|v| !v.is_finite()) {
            return Err(DismoError::Invalid("non-finite embedding entry".into()));
        }
        Ok(())
    }

    /// Gather rows without a graph; training-side lookups go through
    /// [`crate::graph::Graph::gather_rows`] instead so gradients reach
    /// exactly the requested rows.
    pub fn lookup(&self, indices: &[usize]) -> Result<(Array2<f32>, Array2<f32>)> {
        let gather = |t: &Array2<f32>| -> Result<Array2<f32>> {
            let mut out = Array2::zeros((indices.len(), t.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                if i >= t.nrows() {
                    return Err(DismoError::Invalid(format!(
                        "embedding index {i} out of range for {} rows",
                        t.nrows()
                    )));
                }
                out.row_mut(r).assign(&t.row(i));
            }
            Ok(out)
        };
        Ok((gather(&self.content)?, gather(&self.style)?))
    }

    pub fn to_stored(&self) -> (TensorData, TensorData) {
        (
            TensorData::from(&self.content.clone().into_dyn()),
            TensorData::from(&self.style.clone().into_dyn()),
        )
    }

    pub fn from_stored(content: TensorData, style: TensorData) -> Result<Self> {
        let to2 = |t: TensorData| -> Result<Array2<f32>> {
            t.into_array()?
                .into_dimensionality()
                .map_err(|e| DismoError::Shape(format!("embedding table: {e}")))
        };
        Ok(EmbeddingTable {
            content: to2(content)?,
            style: to2(style)?,
        })
    }
}

pub fn init_embeddings(
    n: usize,
    d_c: usize,
    d_s: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<EmbeddingTable> {
    if n < 1 {
        return Err(DismoError::Invalid("need at least one row".into()));
    }
    if d_c < 1 || d_s < 1 {
        return Err(DismoError::Invalid(
            "embedding dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut fill = |rows: usize, cols: usize| -> Array2<f32> {
        match scheme {
            InitScheme::Zeros => Array2::zeros((rows, cols)),
            InitScheme::Gaussian { std } => {
                Array2::from_shape_fn((rows, cols), |_| sample_standard_normal(&mut rng) * std)
            }
        }
    };
    Ok(EmbeddingTable {
        content: fill(n, d_c),
        style: fill(n, d_s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme_gives_zero_tables() {
        let t = init_embeddings(4, 2, 3, InitScheme::Zeros, 0).unwrap();
        assert_eq!(t.content.shape(), &[4, 2]);
        assert_eq!(t.style.shape(), &[4, 3]);
        assert!(t.content.iter().all(|&v| v == 0.0));
        let (c, s) = t.lookup(&[0]).unwrap();
        assert!(c.iter().all(|&v| v == 0.0) && s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_scheme_is_deterministic() {
        let a = init_embeddings(8, 4, 4, InitScheme::Gaussian { std: 0.1 }, 5).unwrap();
        let b = init_embeddings(8, 4, 4, InitScheme::Gaussian { std: 0.1 }, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_std_matches_request() {
        let t = init_embeddings(10_000, 8, 1, InitScheme::Gaussian { std: 0.1 }, 2).unwrap();
        let n = t.content.len() as f32;
        let mean = t.content.sum() / n;
        let var = t.content.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.005, "std = {std}");
    }

    #[test]
    fn duplicate_indices_gather_identical_rows() {
        let t = init_embeddings(8, 3, 3, InitScheme::Gaussian { std: 1.0 }, 1).unwrap();
        let (c, _) = t.lookup(&[2, 2]).unwrap();
        assert_eq!(c.row(0), c.row(1));
    }

    #[test]
    fn bad_dimensions_rejected() {
        assert!(init_embeddings(0, 2, 2, InitScheme::Zeros, 0).is_err());
        assert!(init_embeddings(4, 0, 2, InitScheme::Zeros, 0).is_err());
    }

    #[test]
    fn stored_round_trip_is_bit_exact() {
        let t = init_embeddings(6, 4, 2, InitScheme::Gaussian { std: 0.3 }, 9).unwrap();
        let (c, s) = t.to_stored();
        let back = EmbeddingTable::from_stored(c, s).unwrap();
        assert_eq!(t, back);
    }
}
