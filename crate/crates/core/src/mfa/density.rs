//! Marginal densities, posteriors and responsibilities.
//!
//! The marginal covariance `A A^T + Phi` is never formed. With block-isotropic
//! `Phi` and orthogonal rotation blocks, `A^T Phi^{-1} A = diag(scale)^2 *
//! sum_i 1/s^i`, so the `3 x 3` latent-side matrix `M = I + A^T Phi^{-1} A` is
//! diagonal. The determinant lemma and Woodbury identity then reduce the
//! density and the posterior to per-shape `3`-vector operations.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use super::model::{FactorAnalyzer, PosteriorMoments};
use crate::error::{Error, Result};
use crate::mesh::DataVector;
use crate::scalar::Real;

/// Per-component quantities shared by every data vector.
#[derive(Debug, Clone)]
pub(crate) struct LatentSystem<T: Real> {
    inv_noise: Vec<T>,
    /// Diagonal of `M^{-1}`, the posterior covariance of `z`.
    posterior_var: Vector3<T>,
    /// `ln |A A^T + Phi|`.
    log_det: T,
}

impl<T: Real> LatentSystem<T> {
    pub(crate) fn new(fa: &FactorAnalyzer<T>, component: usize) -> Result<Self> {
        let singular = || Error::SingularCovariance { component };
        let mut log_det = T::zero();
        let mut precision_sum = T::zero();
        let mut inv_noise = Vec::with_capacity(fa.noise.len());
        for &s in &fa.noise {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(singular());
            }
            log_det += T::lit(3.0) * s.ln();
            precision_sum += T::one() / s;
            inv_noise.push(T::one() / s);
        }
        let mut posterior_var = Vector3::zeros();
        for l in 0..3 {
            let m = T::one() + fa.scale[l] * fa.scale[l] * precision_sum;
            if !m.is_finite() {
                return Err(singular());
            }
            log_det += m.ln();
            posterior_var[l] = T::one() / m;
        }
        if !log_det.is_finite() {
            return Err(singular());
        }
        Ok(Self {
            inv_noise,
            posterior_var,
            log_det,
        })
    }

    pub(crate) fn posterior_mean(&self, h: &DataVector<T>, fa: &FactorAnalyzer<T>) -> Vector3<T> {
        // u = A^T Phi^{-1} (h - b)
        let mut u = Vector3::zeros();
        for (i, (rot, mean)) in fa.rotations.iter().zip(&fa.mean).enumerate() {
            u += rot.tr_mul(&(h.block(i) - mean)) * self.inv_noise[i];
        }
        u.component_mul(&fa.scale).component_mul(&self.posterior_var)
    }

    pub(crate) fn moments(&self, h: &DataVector<T>, fa: &FactorAnalyzer<T>) -> PosteriorMoments<T> {
        let mean = self.posterior_mean(h, fa);
        PosteriorMoments {
            mean,
            second_moment: Matrix3::from_diagonal(&self.posterior_var) + mean * mean.transpose(),
        }
    }

    /// `ln N(h; b, A A^T + Phi)`, using
    /// `d^T (A A^T + Phi)^{-1} d = min_z |d - A z|^2_{Phi^{-1}} + |z|^2`
    /// evaluated at the posterior mean, which avoids cancellation when the
    /// noise is tiny.
    pub(crate) fn log_density(&self, h: &DataVector<T>, fa: &FactorAnalyzer<T>) -> T {
        let mean = self.posterior_mean(h, fa);
        let latent = mean.component_mul(&fa.scale);
        let mut quad = mean.norm_squared();
        for (i, (rot, b)) in fa.rotations.iter().zip(&fa.mean).enumerate() {
            let r = h.block(i) - b - rot * latent;
            quad += r.norm_squared() * self.inv_noise[i];
        }
        let dim = T::from_usize_lossy(3 * fa.n_shapes());
        -(dim * T::two_pi().ln() + self.log_det + quad) / T::lit(2.0)
    }
}

/// Log marginal density of `h` under one component.
pub fn component_log_density<T: Real>(h: &DataVector<T>, fa: &FactorAnalyzer<T>) -> Result<T> {
    check_dims(h, fa)?;
    Ok(LatentSystem::new(fa, 0)?.log_density(h, fa))
}

/// Posterior moments of the latent variable under one component.
pub fn posterior_moments<T: Real>(
    h: &DataVector<T>,
    fa: &FactorAnalyzer<T>,
) -> Result<PosteriorMoments<T>> {
    check_dims(h, fa)?;
    Ok(LatentSystem::new(fa, 0)?.moments(h, fa))
}

fn check_dims<T: Real>(h: &DataVector<T>, fa: &FactorAnalyzer<T>) -> Result<()> {
    if h.n_shapes() != fa.n_shapes() || fa.mean.len() != fa.n_shapes() || fa.noise.len() != fa.n_shapes() {
        return Err(Error::InvalidArgument(format!(
            "data vector has {} shapes, component has {}",
            h.n_shapes(),
            fa.n_shapes()
        )));
    }
    Ok(())
}

pub(crate) fn latent_systems<T: Real>(components: &[FactorAnalyzer<T>]) -> Result<Vec<LatentSystem<T>>> {
    components
        .iter()
        .enumerate()
        .map(|(k, fa)| LatentSystem::new(fa, k))
        .collect()
}

/// Responsibilities of every component for every vertex, plus the data
/// log-likelihood they were computed with.
#[derive(Debug, Clone)]
pub struct Responsibilities<T: Real> {
    /// `m x n_v`.
    pub gamma: DMatrix<T>,
    pub log_likelihood: T,
}

impl<T: Real> Responsibilities<T> {
    /// Responsibility mass `sum_j gamma_kj` of each component.
    pub fn masses(&self) -> Vec<T> {
        self.gamma.row_iter().map(|row| row.sum()).collect()
    }
}

/// E-step: `gamma_kj = pi_k p(h_j | k) / sum_l pi_l p(h_j | l)`, in log space.
pub fn responsibilities<T: Real>(
    data: &[DataVector<T>],
    components: &[FactorAnalyzer<T>],
) -> Result<Responsibilities<T>> {
    if components.is_empty() {
        return Err(Error::InvalidArgument("mixture has no components".into()));
    }
    for fa in components {
        if let Some(h) = data.first() {
            check_dims(h, fa)?;
        }
    }
    let systems = latent_systems(components)?;
    let log_weights: Vec<T> = components.iter().map(|fa| fa.weight.ln()).collect();
    let m = components.len();

    let columns: Vec<(Vec<T>, T)> = data
        .par_iter()
        .enumerate()
        .map(|(j, h)| {
            let logs: Vec<T> = components
                .iter()
                .zip(&systems)
                .zip(&log_weights)
                .map(|((fa, sys), &lw)| lw + sys.log_density(h, fa))
                .collect();
            let max = logs
                .iter()
                .copied()
                .fold(T::min_value().expect("bounded scalar"), |a, b| a.max(b));
            if !max.is_finite() {
                return Err(Error::AllZeroLikelihood { vertex: j });
            }
            let total = logs.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
            let log_norm = max + total.ln();
            Ok((logs.into_iter().map(|l| (l - log_norm).exp()).collect(), log_norm))
        })
        .collect::<Result<_>>()?;

    let mut gamma = DMatrix::zeros(m, data.len());
    let mut log_likelihood = T::zero();
    for (j, (col, log_norm)) in columns.into_iter().enumerate() {
        for (k, g) in col.into_iter().enumerate() {
            gamma[(k, j)] = g;
        }
        log_likelihood += log_norm;
    }
    Ok(Responsibilities {
        gamma,
        log_likelihood,
    })
}

/// Observed-data log-likelihood `sum_j ln sum_k pi_k p(h_j | k)`.
pub fn log_likelihood<T: Real>(data: &[DataVector<T>], components: &[FactorAnalyzer<T>]) -> Result<T> {
    responsibilities(data, components).map(|r| r.log_likelihood)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfa::test_support::{random_component, random_data_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_component(n_shapes: usize) -> FactorAnalyzer<f64> {
        FactorAnalyzer {
            rotations: vec![Matrix3::identity(); n_shapes],
            scale: Vector3::zeros(),
            mean: vec![Vector3::new(0.3, -0.2, 0.9); n_shapes],
            noise: vec![1.0; n_shapes],
            weight: 1.0,
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        for n in 1..4 {
            let fa = standard_component(n);
            let h = DataVector::from_blocks(&fa.mean);
            let expected = -(3.0 * n as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
            let got = component_log_density(&h, &fa).unwrap();
            assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        }
    }

    #[test]
    fn density_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fa = random_component(&mut rng, 3);
        let h = random_data_vector(&mut rng, &fa);
        let before = component_log_density(&h, &fa).unwrap();
        let shift = Vector3::new(0.7, -1.1, 2.5);
        let mut moved = fa.clone();
        moved.mean.iter_mut().for_each(|b| *b += shift);
        let blocks: Vec<_> = h.unstack().into_iter().map(|v| v + shift).collect();
        let after = component_log_density(&DataVector::from_blocks(&blocks), &moved).unwrap();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_is_singular() {
        let mut fa = standard_component(2);
        fa.noise[1] = 0.0;
        let h = DataVector::from_blocks(&fa.mean);
        assert!(matches!(
            component_log_density(&h, &fa),
            Err(Error::SingularCovariance { .. })
        ));
        assert!(posterior_moments(&h, &fa).is_err());
    }

    #[test]
    fn posterior_at_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fa = random_component(&mut rng, 2);
        let h = DataVector::from_blocks(&fa.mean);
        let mom = posterior_moments(&h, &fa).unwrap();
        assert_eq!(mom.mean, Vector3::zeros());
        // I - beta A, computed densely
        let a = fa.loading();
        let sigma = &a * a.transpose() + DMatrix::from_diagonal(&fa.noise_diagonal());
        let beta = a.transpose() * sigma.try_inverse().unwrap();
        let cov = DMatrix::<f64>::identity(3, 3) - beta * &a;
        for r in 0..3 {
            for c in 0..3 {
                assert!((cov[(r, c)] - mom.second_moment[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_approaches_least_squares_for_large_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut fa = random_component(&mut rng, 3);
        fa.scale = Vector3::new(1e3, 1e3, 1e3);
        fa.noise = vec![1.0; 3];
        let h = random_data_vector(&mut rng, &fa);
        let mom = posterior_moments(&h, &fa).unwrap();
        let a = fa.loading();
        let d = &h.0 - fa.mean_vector();
        let lsq = a.clone().pseudo_inverse(1e-12).unwrap() * &d;
        for l in 0..3 {
            assert!((mom.mean[l] - lsq[l]).abs() < 1e-6 * (1.0 + lsq[l].abs()));
        }
    }

    #[test]
    fn single_component_takes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fa = random_component(&mut rng, 2);
        let data: Vec<_> = (0..7).map(|_| random_data_vector(&mut rng, &fa)).collect();
        let r = responsibilities(&data, std::slice::from_ref(&fa)).unwrap();
        assert!(r.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn identical_components_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut fa = random_component(&mut rng, 2);
        fa.weight = 0.5;
        let data: Vec<_> = (0..5).map(|_| random_data_vector(&mut rng, &fa)).collect();
        let r = responsibilities(&data, &[fa.clone(), fa]).unwrap();
        assert!(r.gamma.iter().all(|&g| (g - 0.5).abs() < 1e-15));
    }

    #[test]
    fn responsibilities_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = random_component(&mut rng, 2);
        let mut b = random_component(&mut rng, 2);
        a.weight = 0.3;
        b.weight = 0.7;
        let data: Vec<_> = (0..6)
            .map(|j| random_data_vector(&mut rng, if j % 2 == 0 { &a } else { &b }))
            .collect();
        let r = responsibilities(&data, &[a.clone(), b.clone()]).unwrap();
        for (j, h) in data.iter().enumerate() {
            let pa = a.weight * component_log_density(h, &a).unwrap().exp();
            let pb = b.weight * component_log_density(h, &b).unwrap().exp();
            assert!((r.gamma[(0, j)] - pa / (pa + pb)).abs() < 1e-12);
            assert!((r.gamma[(1, j)] - pb / (pa + pb)).abs() < 1e-12);
        }
        let columns_ok = r
            .gamma
            .column_iter()
            .all(|c| (c.sum() - 1.0).abs() < 1e-12 && c.iter().all(|&g| (0.0..=1.0).contains(&g)));
        assert!(columns_ok);
    }
}
