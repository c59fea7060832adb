//! Rotation-constrained mixtures of factor analyzers.
//!
//! Every component models one rigid part: a vertex `h` (stacked over shapes)
//! is `A z + b + noise` with `z ~ N(0, I3)` and `A = [R^1; ...; R^{n_s}] Lambda`.

mod density;
mod fit;
mod init;
mod model;
mod update;

pub use density::{
    component_log_density, log_likelihood, posterior_moments, responsibilities, Responsibilities,
};
pub(crate) use density::latent_systems;
pub use fit::{aecm_fit, argmax_labels, AecmConfig, Init, ScaleUpdate};
pub use init::{compact_labels, components_from_responsibilities, kmeans, one_hot};
pub use model::{FactorAnalyzer, MixtureModel, PosteriorMoments};
pub use update::{
    constrained_rotation, mixture_covariance, update_lambda, update_lambda_marginal, update_phi, update_pi_b,
    update_rotations, EMPTY_COMPONENT_FRACTION, NEGATIVE_EIGEN_TOLERANCE, NOISE_FLOOR,
};

#[cfg(test)]
pub(crate) mod test_support {
    use nalgebra::{Matrix3, UnitQuaternion, Vector3, Quaternion};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::FactorAnalyzer;
    use crate::mesh::DataVector;

    pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let q = Quaternion::new(g(), g(), g(), g());
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    pub fn random_component<R: Rng>(rng: &mut R, n_shapes: usize) -> FactorAnalyzer<f64> {
        let mut scale = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        scale.sort_by(|a, b| b.partial_cmp(a).unwrap());
        FactorAnalyzer {
            rotations: (0..n_shapes).map(|_| random_rotation(rng)).collect(),
            scale: Vector3::from(scale),
            mean: (0..n_shapes)
                .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            noise: (0..n_shapes).map(|_| rng.random_range(0.01..0.2)).collect(),
            weight: 1.0,
        }
    }

    pub fn random_data_vector<R: Rng>(rng: &mut R, fa: &FactorAnalyzer<f64>) -> DataVector<f64> {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let blocks: Vec<_> = (0..fa.n_shapes())
            .map(|i| {
                let e = Vector3::from_fn(|_, _| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * fa.noise[i].sqrt()
                });
                fa.loading_block(i) * z + fa.mean[i] + e
            })
            .collect();
        DataVector::from_blocks(&blocks)
    }
}
