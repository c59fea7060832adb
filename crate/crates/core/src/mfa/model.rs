use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::mesh::DataVector;
use crate::scalar::Real;

/// One mixture component: a rigid part seen through all shapes.
///
/// The loading matrix is `A = [R^1; ...; R^{n_s}] * diag(scale)` and the noise
/// covariance is `diag(noise[0] * I3, ..., noise[n_s - 1] * I3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorAnalyzer<T: Real> {
    /// Per-shape right-handed rotations.
    pub rotations: Vec<Matrix3<T>>,
    /// Diagonal of the latent scale, non-negative and descending.
    pub scale: Vector3<T>,
    /// Per-shape translation blocks of the component mean.
    pub mean: Vec<Vector3<T>>,
    /// Per-shape isotropic noise variances.
    pub noise: Vec<T>,
    /// Mixing proportion.
    pub weight: T,
}

impl<T: Real> FactorAnalyzer<T> {
    pub fn n_shapes(&self) -> usize {
        self.rotations.len()
    }

    /// Block `i` of the loading matrix, `R^i * diag(scale)`.
    #[inline]
    pub fn loading_block(&self, i: usize) -> Matrix3<T> {
        self.rotations[i] * Matrix3::from_diagonal(&self.scale)
    }

    /// Dense `3 n_s x 3` loading matrix.
    pub fn loading(&self) -> DMatrix<T> {
        let n = self.n_shapes();
        let mut a = DMatrix::zeros(3 * n, 3);
        for i in 0..n {
            a.fixed_view_mut::<3, 3>(3 * i, 0)
                .copy_from(&self.loading_block(i));
        }
        a
    }

    /// Stacked mean vector of length `3 n_s`.
    pub fn mean_vector(&self) -> DVector<T> {
        DataVector::from_blocks(&self.mean).0
    }

    /// Diagonal of the noise covariance, length `3 n_s`.
    pub fn noise_diagonal(&self) -> DVector<T> {
        DVector::from_iterator(
            3 * self.n_shapes(),
            self.noise.iter().flat_map(|&s| [s, s, s]),
        )
    }

    /// `trace(Phi) = 3 * sum_i s^i`.
    pub fn noise_trace(&self) -> T {
        self.noise.iter().fold(T::zero(), |acc, &s| acc + s) * T::lit(3.0)
    }

    /// Mean per-coordinate residual variance, `trace(Phi) / (3 n_s)`.
    pub fn mean_noise(&self) -> T {
        self.noise_trace() / T::from_usize_lossy(3 * self.n_shapes())
    }
}

/// First and second moments of the latent variable given one data vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoments<T: Real> {
    pub mean: Vector3<T>,
    /// `E[z z^T | h]`.
    pub second_moment: Matrix3<T>,
}

impl<T: Real> PosteriorMoments<T> {
    /// Posterior covariance, `E[z z^T] - E[z] E[z]^T`.
    pub fn covariance(&self) -> Matrix3<T> {
        self.second_moment - self.mean * self.mean.transpose()
    }
}

/// A fitted mixture together with its final responsibilities and labels.
#[derive(Debug, Clone)]
pub struct MixtureModel<T: Real> {
    pub components: Vec<FactorAnalyzer<T>>,
    /// `m x n_v`; column `j` is the posterior over components for vertex `j`.
    pub responsibilities: DMatrix<T>,
    pub labels: Vec<usize>,
    /// Log-likelihood of the starting parameters.
    pub initial_log_likelihood: T,
    /// Log-likelihood after each completed iteration.
    pub log_likelihood_trace: Vec<T>,
    pub converged: bool,
}

impl<T: Real> MixtureModel<T> {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn n_shapes(&self) -> usize {
        self.components.first().map_or(0, FactorAnalyzer::n_shapes)
    }

    pub fn iterations(&self) -> usize {
        self.log_likelihood_trace.len()
    }

    pub fn log_likelihood(&self) -> T {
        self.log_likelihood_trace
            .last()
            .copied()
            .unwrap_or(self.initial_log_likelihood)
    }
}
