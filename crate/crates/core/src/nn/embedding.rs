use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};

use super::{ForwardCache, Mlp, MlpSpec, OutputActivation};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Gaussian random Fourier features of a scalar time. The frequencies are
/// drawn once and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFeatures {
    freqs: Vec<f64>,
}

impl FourierFeatures {
    pub const DEFAULT_SCALE: f64 = 16.0;

    /// `dim` output features (`dim / 2` frequencies, sine and cosine each).
    pub fn new(dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::shape(format!("Fourier projection dim must be even and >= 2, got {dim}")));
        }
        let normal = Normal::new(0.0, scale).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = rng_from(seed, "fourier");
        let freqs = (0..dim / 2).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { freqs })
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Self {
        Self { freqs }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn features(&self, t: &[f64]) -> Array2<f64> {
        let half = self.freqs.len();
        Array2::from_shape_fn((t.len(), 2 * half), |(r, c)| {
            let arg = 2.0 * std::f64::consts::PI * self.freqs[c % half] * t[r];
            if c < half {
                arg.sin()
            } else {
                arg.cos()
            }
        })
    }
}

/// Fourier projection followed by one dense ReLU layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub projection: FourierFeatures,
    pub dense: Mlp,
}

pub struct TimeEmbeddingCache {
    dense: ForwardCache,
}

impl TimeEmbeddingCache {
    pub fn output(&self) -> &Array2<f64> {
        self.dense.output()
    }
}

impl TimeEmbedding {
    pub fn new(projection_dim: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        let projection = FourierFeatures::new(
            projection_dim,
            FourierFeatures::DEFAULT_SCALE,
            crate::rng::derive_seed(seed, "time/proj"),
        )?;
        let spec = MlpSpec::new(projection_dim, &[], embedding_dim).with_output(OutputActivation::Relu);
        let dense = Mlp::new(spec, crate::rng::derive_seed(seed, "time/dense"))?;
        Ok(Self { projection, dense })
    }

    pub fn embedding_dim(&self) -> usize {
        self.dense.output_dim()
    }

    pub fn forward(&self, t: &[f64]) -> Result<Array2<f64>> {
        self.dense.forward_batch(self.projection.features(t).view())
    }

    pub fn forward_cached(&self, t: &[f64]) -> Result<TimeEmbeddingCache> {
        let feats = self.projection.features(t);
        Ok(TimeEmbeddingCache {
            dense: self.dense.forward_cached(feats.view())?,
        })
    }

    /// Gradient of the dense layer parameters; the projection is fixed.
    pub fn backward(&self, cache: &TimeEmbeddingCache, upstream: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.dense.backward(&cache.dense, upstream)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_dims_and_fixed_frequencies() {
        let emb = TimeEmbedding::new(32, 64, 3).unwrap();
        assert_eq!(emb.projection.dim(), 32);
        let out = emb.forward(&[0.02, 0.5, 0.98]).unwrap();
        assert_eq!(out.dim(), (3, 64));
        let again = TimeEmbedding::new(32, 64, 3).unwrap();
        assert_eq!(emb.projection, again.projection);
        assert!(FourierFeatures::new(7, 16.0, 0).is_err());
    }
}
