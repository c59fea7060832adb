//! Conditional-maximization updates of the component parameters.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3, SVD};

use super::model::{FactorAnalyzer, PosteriorMoments};
use crate::error::{Error, Result};
use crate::mesh::DataVector;
use crate::scalar::Real;

/// A component whose responsibility mass falls below this fraction of `n_v`
/// is considered empty.
pub const EMPTY_COMPONENT_FRACTION: f64 = 1e-6;

/// Lower bound on every per-shape noise variance.
pub const NOISE_FLOOR: f64 = 1e-12;

/// Eigenvalues down to `-NEGATIVE_EIGEN_TOLERANCE` are clamped to zero.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-12;

fn component_mass<T: Real>(gamma: &DMatrix<T>, k: usize) -> T {
    gamma.row(k).sum()
}

fn check_mass<T: Real>(gamma: &DMatrix<T>, k: usize) -> Result<T> {
    let mass = component_mass(gamma, k);
    let n = gamma.ncols();
    if !(mass >= T::lit(EMPTY_COMPONENT_FRACTION) * T::from_usize_lossy(n)) || n == 0 {
        return Err(Error::EmptyComponent {
            component: k,
            mass: mass.as_f64(),
        });
    }
    Ok(mass)
}

/// Mixing proportions `pi_k = sum_j gamma_kj / n_v` and means
/// `b_k = sum_j gamma_kj h_j / sum_j gamma_kj` (per-shape blocks).
pub fn update_pi_b<T: Real>(
    gamma: &DMatrix<T>,
    data: &[DataVector<T>],
) -> Result<(Vec<T>, Vec<Vec<Vector3<T>>>)> {
    let n_v = T::from_usize_lossy(data.len());
    let n_s = data.first().map_or(0, DataVector::n_shapes);
    let mut weights = Vec::with_capacity(gamma.nrows());
    let mut means = Vec::with_capacity(gamma.nrows());
    for k in 0..gamma.nrows() {
        let mass = check_mass(gamma, k)?;
        let mut acc = nalgebra::DVector::zeros(3 * n_s);
        for (j, h) in data.iter().enumerate() {
            acc.axpy(gamma[(k, j)], &h.0, T::one());
        }
        acc /= mass;
        weights.push(mass / n_v);
        means.push(DataVector(acc).unstack());
    }
    Ok((weights, means))
}

/// Responsibility-weighted scatter of shape `i` around `mean_i`, normalized
/// by the component's responsibility mass.
pub fn mixture_covariance<T: Real>(
    gamma: &DMatrix<T>,
    data: &[DataVector<T>],
    mean_i: &Vector3<T>,
    k: usize,
    i: usize,
) -> Matrix3<T> {
    let mass = component_mass(gamma, k);
    let mut c = Matrix3::zeros();
    if !(mass > T::zero()) {
        return c;
    }
    for (j, h) in data.iter().enumerate() {
        let d = h.block(i) - mean_i;
        c.ger(gamma[(k, j)], &d, &d, T::one());
    }
    c /= mass;
    // exact symmetry regardless of accumulation order
    (c + c.transpose()) / T::lit(2.0)
}

fn sorted_eigenvalues<T: Real>(c: &Matrix3<T>) -> Result<Vector3<T>> {
    let eig = SymmetricEigen::new(*c);
    let mut vals = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let tol = T::lit(NEGATIVE_EIGEN_TOLERANCE) * T::one().max(vals[0]);
    for v in vals.iter_mut() {
        if *v < -tol || !v.is_finite() {
            return Err(Error::NegativeEigenvalue(v.as_f64()));
        }
        *v = v.max(T::zero());
    }
    Ok(Vector3::from(vals))
}

/// Eigenvectors of a symmetric matrix ordered by descending eigenvalue.
pub(crate) fn principal_axes<T: Real>(c: &Matrix3<T>) -> Matrix3<T> {
    let eig = SymmetricEigen::new(*c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Matrix3::from_columns(&order.map(|o| eig.eigenvectors.column(o).into_owned()))
}

/// Latent scale shared by all shapes: the element-wise square root of the
/// mean (over shapes) of each covariance's descending eigenvalues.
pub fn update_lambda<T: Real>(covariances: &[Matrix3<T>]) -> Result<Vector3<T>> {
    if covariances.is_empty() {
        return Err(Error::InvalidArgument("no covariance blocks".into()));
    }
    let mut sum = Vector3::zeros();
    for c in covariances {
        sum += sorted_eigenvalues(c)?;
    }
    Ok((sum / T::from_usize_lossy(covariances.len())).map(|v| v.sqrt()))
}

/// Latent scale maximizing `sum_j gamma_kj log N(h_j; b, A A^T + Phi)` with
/// the rotations and noise held fixed.
///
/// The whitened loading columns `Phi^{-1/2} R e_l` are orthogonal with common
/// squared norm `P = sum_i 1 / s_i`, so each axis decouples:
/// `lambda_l^2 = max(0, (q_l - 1) / P)` with `q_l` the weighted mean of
/// `(sum_i (R^i e_l)^T (v^i - b^i) / s_i)^2 / P`.
pub fn update_lambda_marginal<T: Real>(
    gamma: &DMatrix<T>,
    data: &[DataVector<T>],
    fa: &FactorAnalyzer<T>,
    k: usize,
) -> Vector3<T> {
    let mass = component_mass(gamma, k);
    let precision = fa.noise.iter().fold(T::zero(), |acc, &s| acc + T::one() / s);
    if !(mass > T::zero()) || !(precision > T::zero()) || !precision.is_finite() {
        return Vector3::zeros();
    }
    let mut q = Vector3::zeros();
    for (j, h) in data.iter().enumerate() {
        let mut proj = Vector3::zeros();
        for i in 0..fa.n_shapes() {
            proj += fa.rotations[i].tr_mul(&(h.block(i) - fa.mean[i])) / fa.noise[i];
        }
        q += proj.component_mul(&proj) * gamma[(k, j)];
    }
    q /= mass * precision;
    q.map(|v| ((v - T::one()) / precision).max(T::zero()).sqrt())
}

/// Right-handed rotation maximizing `trace(B R)`.
///
/// With `B = U D V^T` (descending singular values) the maximizer is `V U^T`
/// when that is a proper rotation; otherwise `V diag(1, 1, -1) U^T`, which
/// attains `d1 + d2 - d3`.
pub fn constrained_rotation<T: Real>(b: &Matrix3<T>) -> Matrix3<T> {
    let svd = SVD::new(*b, true, true);
    let u = svd.u.expect("U requested");
    let v = svd.v_t.expect("V^T requested").transpose();
    let r = v * u.transpose();
    if r.determinant() >= T::zero() {
        r
    } else {
        let flip = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), -T::one()));
        v * flip * u.transpose()
    }
}

/// Rotation update for every shape of component `k`:
/// `B_i = diag(scale) * sum_j gamma_kj E[z | h_j] (v_j^i - b^i)^T`.
pub fn update_rotations<T: Real>(
    gamma: &DMatrix<T>,
    moments: &[PosteriorMoments<T>],
    data: &[DataVector<T>],
    fa: &FactorAnalyzer<T>,
    k: usize,
) -> Vec<Matrix3<T>> {
    let lambda = Matrix3::from_diagonal(&fa.scale);
    (0..fa.n_shapes())
        .map(|i| {
            let mut cross = Matrix3::zeros();
            for (j, (h, mom)) in data.iter().zip(moments).enumerate() {
                let d = h.block(i) - fa.mean[i];
                cross.ger(gamma[(k, j)], &mom.mean, &d, T::one());
            }
            constrained_rotation(&(lambda * cross))
        })
        .collect()
}

/// Isotropic noise update. For shape `i` this is one third of the trace of
/// the shape's diagonal block of
/// `sum_j gamma_kj (d d^T - 2 d E[z]^T A^T + A E[zz^T] A^T) / sum_j gamma_kj`,
/// floored at `floor`.
pub fn update_phi<T: Real>(
    gamma: &DMatrix<T>,
    moments: &[PosteriorMoments<T>],
    data: &[DataVector<T>],
    fa: &FactorAnalyzer<T>,
    k: usize,
    floor: T,
) -> Vec<T> {
    let mass = component_mass(gamma, k);
    let lambda = Matrix3::from_diagonal(&fa.scale);
    // trace(Lambda E[zz^T] Lambda) does not depend on the shape
    let latent_term: T = data
        .iter()
        .zip(moments)
        .enumerate()
        .fold(T::zero(), |acc, (j, (_, mom))| {
            acc + gamma[(k, j)] * (lambda * mom.second_moment * lambda).trace()
        });
    (0..fa.n_shapes())
        .map(|i| {
            let a_i = fa.loading_block(i);
            let mut acc = latent_term;
            for (j, (h, mom)) in data.iter().zip(moments).enumerate() {
                let d = h.block(i) - fa.mean[i];
                let g = gamma[(k, j)];
                acc += g * (d.norm_squared() - T::lit(2.0) * d.dot(&(a_i * mom.mean)));
            }
            let s = acc / (T::lit(3.0) * mass);
            if s.is_finite() {
                s.max(floor)
            } else {
                floor
            }
        })
        .collect()
}
