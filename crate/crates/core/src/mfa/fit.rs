//! Two-cycle alternating expectation / conditional-maximization driver.

use log::debug;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::density::{latent_systems, responsibilities, Responsibilities};
use super::init::{compact_labels, components_from_responsibilities, kmeans, one_hot};
use super::model::{FactorAnalyzer, MixtureModel, PosteriorMoments};
use super::update::{
    mixture_covariance, update_lambda, update_lambda_marginal, update_phi, update_pi_b, update_rotations,
    EMPTY_COMPONENT_FRACTION, NOISE_FLOOR,
};
use crate::error::{Error, Result};
use crate::mesh::DataVector;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AecmConfig {
    pub max_iter: usize,
    /// Stop once `|L_new - L_old| <= tol * |L_new|`.
    pub tol: f64,
    pub noise_floor: f64,
    /// Components whose responsibility mass drops below this fraction of
    /// the vertex count are removed.
    pub empty_fraction: f64,
    pub scale_update: ScaleUpdate,
}

/// How the latent scale is re-estimated in the second cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleUpdate {
    /// Maximizer of the responsibility-weighted marginal likelihood with the
    /// rotations and noise held fixed, followed by a fresh E-step. Monotone,
    /// and does not stall when the noise is small.
    #[default]
    Marginal,
    /// Square roots of the shape-averaged sorted eigenvalues of the part
    /// covariances. Cheaper and closed-form, but not a conditional
    /// maximizer, so the likelihood can drop between iterations.
    Eigenvalue,
}

/// Reorders the latent axes so the scale is descending. Rotation columns
/// follow their axis; one column is negated when the permutation is odd so
/// every rotation stays proper. The density is unchanged.
fn sort_scale<T: Real>(fa: &mut FactorAnalyzer<T>) {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        fa.scale[b]
            .partial_cmp(&fa.scale[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order == [0, 1, 2] {
        return;
    }
    // odd permutations: exactly one fixed point
    let odd = (0..3).filter(|&l| order[l] == l).count() == 1;
    fa.scale = Vector3::from_fn(|l, _| fa.scale[order[l]]);
    for r in fa.rotations.iter_mut() {
        let mut cols = order.map(|o| r.column(o).into_owned());
        if odd {
            cols[2] = -cols[2];
        }
        *r = Matrix3::from_columns(&cols);
    }
}

impl Default for AecmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-7,
            noise_floor: NOISE_FLOOR,
            empty_fraction: EMPTY_COMPONENT_FRACTION,
            scale_update: ScaleUpdate::default(),
        }
    }
}

/// Where the fit starts from.
#[derive(Debug, Clone)]
pub enum Init<T: Real> {
    /// k-means++ partition of the data vectors into `components` clusters.
    KMeans { components: usize, seed: u64 },
    /// A hard partition, e.g. refined labels from the hierarchical search.
    Labels(Vec<usize>),
    /// An explicit `m x n_v` responsibility matrix.
    Responsibilities(DMatrix<T>),
}

impl<T: Real> Init<T> {
    fn responsibilities(&self, data: &[DataVector<T>]) -> Result<DMatrix<T>> {
        let gamma = match self {
            Init::KMeans { components, seed } => {
                let (labels, m) = compact_labels(&kmeans(data, *components, *seed)?);
                one_hot(&labels, m)
            }
            Init::Labels(labels) => {
                if labels.len() != data.len() {
                    return Err(Error::LabelCount {
                        expected: data.len(),
                        got: labels.len(),
                    });
                }
                let (labels, m) = compact_labels(labels);
                one_hot(&labels, m)
            }
            Init::Responsibilities(gamma) => {
                if gamma.ncols() != data.len() || gamma.nrows() == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "responsibility matrix is {}x{}, expected m x {}",
                        gamma.nrows(),
                        gamma.ncols(),
                        data.len()
                    )));
                }
                gamma.clone()
            }
        };
        Ok(gamma)
    }
}

/// Index of the largest responsibility in each column; ties go to the lower
/// component index.
pub fn argmax_labels<T: Real>(gamma: &DMatrix<T>) -> Vec<usize> {
    gamma
        .column_iter()
        .map(|col| {
            let mut best = 0;
            for k in 1..col.len() {
                if col[k] > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn drop_rows<T: Real>(gamma: &DMatrix<T>, keep: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(keep.len(), gamma.ncols(), |r, c| gamma[(keep[r], c)])
}

/// Removes components with too little responsibility mass and renormalizes
/// the weights of the rest. Returns `true` if anything was removed.
fn drop_empty<T: Real>(
    components: &mut Vec<FactorAnalyzer<T>>,
    resp: &Responsibilities<T>,
    fraction: f64,
) -> bool {
    let threshold = T::lit(fraction) * T::from_usize_lossy(resp.gamma.ncols());
    let masses = resp.masses();
    if masses.iter().all(|&m| m >= threshold) || components.len() <= 1 {
        return false;
    }
    let mut k = 0;
    components.retain(|_| {
        let keep = masses[k] >= threshold;
        if !keep {
            debug!("dropping component {k} (mass {})", masses[k]);
        }
        k += 1;
        keep
    });
    let total = components.iter().fold(T::zero(), |acc, fa| acc + fa.weight);
    for fa in components.iter_mut() {
        fa.weight /= total;
    }
    true
}

fn e_step<T: Real>(
    data: &[DataVector<T>],
    components: &mut Vec<FactorAnalyzer<T>>,
    config: &AecmConfig,
) -> Result<Responsibilities<T>> {
    let mut resp = responsibilities(data, components)?;
    while drop_empty(components, &resp, config.empty_fraction) {
        resp = responsibilities(data, components)?;
    }
    Ok(resp)
}

/// Fits the rotation-constrained mixture.
///
/// Each iteration runs cycle 1 (responsibilities under the current
/// parameters, then weights and means) and cycle 2 (responsibilities under
/// the new weights and means with the old loadings and noise, then scale,
/// rotations and noise). The log-likelihood after every iteration is
/// recorded in `log_likelihood_trace`.
pub fn aecm_fit<T: Real>(
    data: &[DataVector<T>],
    init: &Init<T>,
    config: &AecmConfig,
) -> Result<MixtureModel<T>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no data vectors".into()));
    }
    let floor = T::lit(config.noise_floor);
    let mut gamma0 = init.responsibilities(data)?;
    let threshold = T::lit(config.empty_fraction) * T::from_usize_lossy(data.len());
    let keep: Vec<usize> = (0..gamma0.nrows())
        .filter(|&k| gamma0.row(k).sum() >= threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyComponent {
            component: 0,
            mass: 0.0,
        });
    }
    if keep.len() < gamma0.nrows() {
        gamma0 = drop_rows(&gamma0, &keep);
    }
    let mut components = components_from_responsibilities(data, &gamma0, floor)?;

    let mut resp = e_step(data, &mut components, config)?;
    let initial_log_likelihood = resp.log_likelihood;
    let mut previous = initial_log_likelihood;
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 0..config.max_iter {
        // cycle 1: weights and means
        let (weights, means) = update_pi_b(&resp.gamma, data)?;
        for ((fa, w), b) in components.iter_mut().zip(weights).zip(means) {
            fa.weight = w;
            fa.mean = b;
        }

        // cycle 2: scale, rotations, noise
        let mut resp2 = e_step(data, &mut components, config)?;
        if config.scale_update == ScaleUpdate::Marginal {
            for (k, fa) in components.iter_mut().enumerate() {
                fa.scale = update_lambda_marginal(&resp2.gamma, data, fa, k);
                sort_scale(fa);
            }
            // the latent moments below must see the new scale
            resp2 = e_step(data, &mut components, config)?;
        }
        let systems = latent_systems(&components)?;
        for (k, (fa, sys)) in components.iter_mut().zip(&systems).enumerate() {
            let moments: Vec<PosteriorMoments<T>> =
                data.par_iter().map(|h| sys.moments(h, fa)).collect();
            match config.scale_update {
                ScaleUpdate::Marginal => {}
                ScaleUpdate::Eigenvalue => {
                    let covs: Vec<_> = (0..fa.n_shapes())
                        .map(|i| mixture_covariance(&resp2.gamma, data, &fa.mean[i], k, i))
                        .collect();
                    fa.scale = update_lambda(&covs)?;
                }
            }
            fa.rotations = update_rotations(&resp2.gamma, &moments, data, fa, k);
            fa.noise = update_phi(&resp2.gamma, &moments, data, fa, k, floor);
        }

        resp = e_step(data, &mut components, config)?;
        let ll = resp.log_likelihood;
        trace.push(ll);
        debug!(
            "aecm iteration {}: log-likelihood {ll} ({} components)",
            iteration + 1,
            components.len()
        );
        if (ll - previous).abs() <= T::lit(config.tol) * ll.abs() {
            converged = true;
            break;
        }
        previous = ll;
    }

    Ok(MixtureModel {
        labels: argmax_labels(&resp.gamma),
        responsibilities: resp.gamma,
        components,
        initial_log_likelihood,
        log_likelihood_trace: trace,
        converged,
    })
}
