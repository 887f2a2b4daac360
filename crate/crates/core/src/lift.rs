//! Random ReLU feature lifting: `H = relu(P X)` with a fixed Gaussian `P`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Name of the generator recorded in run manifests.
pub const EMBEDDING_GENERATOR: &str = "chacha20/ziggurat-standard-normal/column-major";

/// Fixed `E x d` embedding with i.i.d. `N(0, 1)` entries.
#[derive(Debug, Clone)]
pub struct RandomEmbedding {
    p: Matrix,
    seed: u64,
}

/// What is needed to regenerate an embedding bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl RandomEmbedding {
    /// Draws the embedding; requires `E >= d >= 1`.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        Self::generate(input_dim, output_dim, seed, false)
    }

    /// Like [`RandomEmbedding::new`] but also accepts `E < d` (ablations).
    pub fn new_unchecked_dims(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        Self::generate(input_dim, output_dim, seed, true)
    }

    fn generate(input_dim: usize, output_dim: usize, seed: u64, allow_narrow: bool) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid_arg("embedding dimensions must be positive"));
        }
        if output_dim < input_dim && !allow_narrow {
            return Err(Error::invalid_arg(format!(
                "embedding dimension E={output_dim} is below the input dimension d={input_dim}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // from_fn visits entries in column-major order
        let p = Matrix::from_fn(output_dim, input_dim, |_, _| StandardNormal.sample(&mut rng));
        Ok(Self { p, seed })
    }

    /// Wraps an explicit matrix (e.g. the identity for ablations).
    pub fn from_matrix(p: Matrix, seed: u64) -> Result<Self> {
        crate::linalg::check_finite(&p)?;
        Ok(Self { p, seed })
    }

    pub fn config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            seed: self.seed,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.p.nrows()
    }

    /// `relu(P x)` for a single sample.
    pub fn lift_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid_arg(format!(
                "sample has {} features, embedding expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut out = vec![0.0; self.output_dim()];
        self.lift_into(x, &mut out);
        Ok(out)
    }

    /// `relu(P X)` for a `d x m` block.
    ///
    /// Each column is computed independently with a fixed summation order,
    /// so lifting a block and lifting its columns one at a time agree bit for
    /// bit.
    pub fn lift(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.input_dim() {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, embedding expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let mut h = Matrix::zeros(self.output_dim(), x.ncols());
        for (src, mut dst) in x.column_iter().zip(h.column_iter_mut()) {
            let src: Vec<f64> = src.iter().copied().collect();
            self.lift_into(&src, dst.as_mut_slice());
        }
        Ok(h)
    }

    fn lift_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.p.column(k).iter()) {
                *o += p * xk;
            }
        }
        for o in out.iter_mut() {
            *o = o.max(0.0);
        }
    }
}

/// One task's worth of features: an `E x m` block with a class label per
/// column.
#[derive(Debug, Clone)]
pub struct FeatureBlock {
    pub h: Matrix,
    pub labels: Vec<u32>,
    pub task_id: usize,
}

impl FeatureBlock {
    pub fn new(h: Matrix, labels: Vec<u32>, task_id: usize) -> Result<Self> {
        if h.ncols() == 0 {
            return Err(Error::invalid_arg("feature block has no samples"));
        }
        if labels.len() != h.ncols() {
            return Err(Error::invalid_arg(format!(
                "{} labels for {} samples",
                labels.len(),
                h.ncols()
            )));
        }
        crate::linalg::check_finite(&h)?;
        Ok(Self { h, labels, task_id })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn len(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.h.ncols() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = RandomEmbedding::new(4, 8, 7).unwrap();
        let b = RandomEmbedding::new(4, 8, 7).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        let c = RandomEmbedding::new(4, 8, 8).unwrap();
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn moments() {
        let p = RandomEmbedding::new(100, 1000, 1).unwrap();
        let n = p.matrix().len() as f64;
        let mean = p.matrix().iter().sum::<f64>() / n;
        let var = p.matrix().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn rejects_narrow_embedding() {
        assert!(matches!(RandomEmbedding::new(4, 2, 0), Err(Error::InvalidArgument(_))));
        assert!(RandomEmbedding::new_unchecked_dims(4, 2, 0).is_ok());
    }

    #[test]
    fn zero_input_lifts_to_zero() {
        let p = RandomEmbedding::new(3, 6, 2).unwrap();
        let h = p.lift(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(h, Matrix::zeros(6, 4));
    }

    #[test]
    fn identity_embedding_is_relu() {
        let p = RandomEmbedding::from_matrix(Matrix::identity(3, 3), 0).unwrap();
        let x = Matrix::from_column_slice(3, 2, &[1.0, -2.0, 0.5, -1.0, 3.0, -0.25]);
        let h = p.lift(&x).unwrap();
        assert_eq!(h, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn columnwise_matches_block() {
        let p = RandomEmbedding::new(5, 40, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Matrix::from_fn(5, 9, |_, _| StandardNormal.sample(&mut rng));
        let block = p.lift(&x).unwrap();
        for j in 0..9 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let single = p.lift_vector(&col).unwrap();
            assert_eq!(block.column(j).as_slice(), single.as_slice());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = RandomEmbedding::new(3, 6, 2).unwrap();
        assert!(p.lift(&Matrix::zeros(4, 1)).is_err());
        assert!(p.lift_vector(&[1.0]).is_err());
    }

    #[test]
    fn block_validation() {
        assert!(FeatureBlock::new(Matrix::zeros(3, 0), vec![], 0).is_err());
        assert!(FeatureBlock::new(Matrix::zeros(3, 2), vec![1], 0).is_err());
        assert!(FeatureBlock::new(Matrix::zeros(3, 2), vec![1, 2], 0).is_ok());
    }
}
