//! Starting parameters for the mixture fit.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::FactorAnalyzer;
use super::update::{constrained_rotation, mixture_covariance, principal_axes, update_lambda, update_pi_b};
use crate::error::{Error, Result};
use crate::mesh::DataVector;
use crate::scalar::Real;

const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's k-means with k-means++ seeding. Returns one cluster id per data
/// vector; deterministic for a given seed.
pub fn kmeans<T: Real>(data: &[DataVector<T>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &DataVector<T>, b: &nalgebra::DVector<T>| (&a.0 - b).norm_squared().as_f64();

    let mut centers = vec![data[rng.random_range(0..data.len())].0.clone()];
    let mut nearest: Vec<f64> = data.iter().map(|h| dist2(h, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(w) => w.sample(&mut rng),
            // every point coincides with a center already
            Err(_) => rng.random_range(0..data.len()),
        };
        centers.push(data[next].0.clone());
        for (d, h) in nearest.iter_mut().zip(data) {
            *d = d.min(dist2(h, centers.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; data.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (label, h) in labels.iter_mut().zip(data) {
            let best = (0..k)
                .map(|c| (c, dist2(h, &centers[c])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![nalgebra::DVector::<T>::zeros(data[0].0.len()); k];
        for (&l, h) in labels.iter().zip(data) {
            counts[l] += 1;
            sums[l] += &h.0;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / T::from_usize_lossy(counts[c]);
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..data.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&data[a], &centers[labels[a]]);
                        let db = dist2(&data[b], &centers[labels[b]]);
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap();
                centers[c] = data[far].0.clone();
                labels[far] = c;
            }
        }
    }
    Ok(labels)
}

/// Relabels to `0..n` in order of first appearance; returns the count.
pub fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// One-hot `m x n_v` responsibility matrix.
pub fn one_hot<T: Real>(labels: &[usize], m: usize) -> DMatrix<T> {
    let mut gamma = DMatrix::zeros(m, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        gamma[(l, j)] = T::one();
    }
    gamma
}

/// Parameters consistent with a given (typically one-hot) responsibility
/// matrix.
///
/// Weights and means come from the responsibilities and the scale from the
/// eigenvalues of the per-shape part covariances. Each part is expressed in
/// the principal frame of its first shape, the per-shape rotations are the
/// right-handed Procrustes fits of that frame onto every shape, and the noise
/// is the residual variance of those rigid fits.
pub fn components_from_responsibilities<T: Real>(
    data: &[DataVector<T>],
    gamma: &DMatrix<T>,
    noise_floor: T,
) -> Result<Vec<FactorAnalyzer<T>>> {
    let (weights, means) = update_pi_b(gamma, data)?;
    let n_s = data[0].n_shapes();
    let mut components = Vec::with_capacity(weights.len());
    for (k, (weight, mean)) in weights.into_iter().zip(means).enumerate() {
        let covs: Vec<Matrix3<T>> = (0..n_s)
            .map(|i| mixture_covariance(gamma, data, &mean[i], k, i))
            .collect();
        let scale = update_lambda(&covs)?;
        let frame = principal_axes(&covs[0]);
        let coords: Vec<Vector3<T>> = data
            .iter()
            .map(|h| frame.tr_mul(&(h.block(0) - mean[0])))
            .collect();
        let mass = gamma.row(k).sum();
        let mut rotations = Vec::with_capacity(n_s);
        let mut noise = Vec::with_capacity(n_s);
        for i in 0..n_s {
            let mut cross = Matrix3::zeros();
            for (j, (h, y)) in data.iter().zip(&coords).enumerate() {
                cross.ger(gamma[(k, j)], y, &(h.block(i) - mean[i]), T::one());
            }
            let rot = constrained_rotation(&cross);
            let sq = data
                .iter()
                .zip(&coords)
                .enumerate()
                .fold(T::zero(), |acc, (j, (h, y))| {
                    acc + gamma[(k, j)] * (h.block(i) - mean[i] - rot * y).norm_squared()
                });
            rotations.push(rot);
            noise.push((sq / (T::lit(3.0) * mass)).max(noise_floor));
        }
        components.push(FactorAnalyzer {
            rotations,
            scale,
            mean,
            noise,
            weight,
        });
    }
    Ok(components)
}
