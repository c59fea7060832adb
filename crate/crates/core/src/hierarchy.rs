//! Coarse-to-fine part discovery and the reference-shape representation.

use log::{debug, info, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{assemble_data, DataVector, Mesh, Normalization, TrainingSet};
use crate::mfa::{aecm_fit, argmax_labels, latent_systems, AecmConfig, FactorAnalyzer, Init, MixtureModel};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub aecm: AecmConfig,
    /// A part is fine enough once its mean noise variance drops below this.
    pub err_threshold: f64,
    /// Relative improvement below which adding a sub-part is not worth it.
    pub plateau: f64,
    /// Largest number of sub-parts tried per coarse part.
    pub max_split: usize,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            aecm: AecmConfig::default(),
            err_threshold: 1e-5,
            plateau: 1e-3,
            max_split: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The error fell below the threshold.
    Threshold,
    /// One more sub-part did not reduce the error enough; the previous
    /// split was kept.
    Plateau,
    /// `max_split` was reached, or there were no more vertices to split.
    Cap,
    /// Too few vertices to fit sub-parts; left as a single part.
    TooSmall,
    /// A sub-fit failed numerically; the previous split was kept.
    FitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRefinement {
    /// Index of the coarse part.
    pub part: usize,
    pub vertices: usize,
    /// `(m_k, err)` for every sub-fit tried, in order.
    pub history: Vec<(usize, f64)>,
    /// Number of sub-parts kept.
    pub chosen: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub initial_components: usize,
    pub final_components: usize,
    pub parts: Vec<PartRefinement>,
}

/// Per-vertex part ids (maximum responsibility, ties to the lower index).
pub fn assign_labels<T: Real>(model: &MixtureModel<T>) -> Vec<usize> {
    argmax_labels(&model.responsibilities)
}

/// Mean noise variance per coordinate over the components of a fit.
pub fn fit_error<T: Real>(model: &MixtureModel<T>) -> f64 {
    let m = model.n_components();
    let n_s = model.n_shapes();
    let total: f64 = model.components.iter().map(|fa| fa.noise_trace().as_f64()).sum();
    total / (3 * n_s * m) as f64
}

/// Smallest part, in vertices, that is split further.
pub fn min_split_size(n_shapes: usize) -> usize {
    3 * (3 * n_shapes + 1)
}

fn sub_seed(seed: u64, part: usize, m: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((part as u64) << 16)
        .wrapping_add(m as u64)
}

/// Splits one coarse part; returns local sub-labels and the record.
fn refine_part<T: Real>(
    data: &[DataVector<T>],
    part: usize,
    config: &HierarchyConfig,
) -> Result<(Vec<usize>, PartRefinement)> {
    let n = data.len();
    let n_s = data[0].n_shapes();
    let mut record = PartRefinement {
        part,
        vertices: n,
        history: Vec::new(),
        chosen: 1,
        stop: StopReason::TooSmall,
    };
    if n < min_split_size(n_s) {
        return Ok((vec![0; n], record));
    }

    let mut best: Option<(Vec<usize>, f64)> = None;
    let cap = config.max_split.max(1);
    for m in 1..=cap {
        if m > n {
            record.stop = StopReason::Cap;
            break;
        }
        let init = Init::KMeans {
            components: m,
            seed: sub_seed(config.seed, part, m),
        };
        let fit = match aecm_fit(data, &init, &config.aecm) {
            Ok(fit) => fit,
            Err(e) if m > 1 && e.is_numerical() => {
                warn!("part {part}: sub-fit with {m} components failed ({e}); keeping previous");
                record.stop = StopReason::FitFailed;
                break;
            }
            Err(e) => return Err(e),
        };
        let m_actual = fit.n_components();
        let err = fit_error(&fit);
        record.history.push((m_actual, err));
        debug!("part {part}: m = {m} ({m_actual} kept), err = {err:e}");

        if let Some((_, prev)) = &best {
            if err >= prev * (1.0 - config.plateau) {
                record.stop = StopReason::Plateau;
                break;
            }
        }
        record.chosen = m_actual;
        best = Some((fit.labels, err));
        if err < config.err_threshold {
            record.stop = StopReason::Threshold;
            break;
        }
        record.stop = StopReason::Cap;
    }
    let labels = best.map_or_else(|| vec![0; n], |(labels, _)| labels);
    Ok((labels, record))
}

/// Coarse fit, per-part refinement and a final global fit from the refined
/// labels.
pub fn hierarchical_fit<T: Real>(
    set: &TrainingSet<T>,
    m_init: usize,
    config: &HierarchyConfig,
) -> Result<(MixtureModel<T>, RefinementReport)> {
    if m_init == 0 {
        return Err(Error::InvalidArgument("m_init must be at least 1".into()));
    }
    let data = assemble_data(set);
    let coarse = aecm_fit(
        &data,
        &Init::KMeans {
            components: m_init,
            seed: config.seed,
        },
        &config.aecm,
    )?;
    info!(
        "coarse fit: {} components, log-likelihood {}",
        coarse.n_components(),
        coarse.log_likelihood()
    );

    let groups: Vec<Vec<usize>> = (0..coarse.n_components())
        .map(|k| (0..data.len()).filter(|&j| coarse.labels[j] == k).collect())
        .collect();
    let refined: Vec<(Vec<usize>, PartRefinement)> = groups
        .par_iter()
        .enumerate()
        .filter(|(_, members)| !members.is_empty())
        .map(|(k, members)| {
            let sub: Vec<DataVector<T>> = members.iter().map(|&j| data[j].clone()).collect();
            refine_part(&sub, k, config)
        })
        .collect::<Result<_>>()?;

    let mut labels = vec![0; data.len()];
    let mut offset = 0;
    let mut parts = Vec::with_capacity(refined.len());
    for (members, (local, record)) in groups.iter().filter(|g| !g.is_empty()).zip(refined) {
        let used = local.iter().max().map_or(0, |&l| l + 1);
        for (&j, &l) in members.iter().zip(&local) {
            labels[j] = offset + l;
        }
        offset += used;
        parts.push(record);
    }

    let model = aecm_fit(&data, &Init::Labels(labels), &config.aecm)?;
    info!(
        "final fit: {} components after {} iterations",
        model.n_components(),
        model.iterations()
    );
    let report = RefinementReport {
        initial_components: coarse.n_components(),
        final_components: model.n_components(),
        parts,
    };
    Ok((model, report))
}

/// Every vertex mapped into the shared reference frame of its part.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentShape<T: Real> {
    pub positions: Vec<Vector3<T>>,
    pub labels: Vec<usize>,
}

/// `v_j = Lambda_{I_j} E[z | h_j]` under the labelled component.
pub fn latent_shape<T: Real>(data: &[DataVector<T>], model: &MixtureModel<T>) -> Result<LatentShape<T>> {
    if model.labels.len() != data.len() {
        return Err(Error::LabelCount {
            expected: data.len(),
            got: model.labels.len(),
        });
    }
    let systems = latent_systems(&model.components)?;
    let positions = data
        .par_iter()
        .zip(&model.labels)
        .map(|(h, &k)| {
            let fa = &model.components[k];
            fa.scale.component_mul(&systems[k].posterior_mean(h, fa))
        })
        .collect();
    Ok(LatentShape {
        positions,
        labels: model.labels.clone(),
    })
}

/// Vertices of shape `i` rebuilt from the reference shape:
/// `R_{I_j}^i v_j + b_{I_j}^i`.
pub fn reconstruct_vertices<T: Real>(
    components: &[FactorAnalyzer<T>],
    latent: &LatentShape<T>,
    i: usize,
) -> Result<Vec<Vector3<T>>> {
    let n_s = components.first().map_or(0, FactorAnalyzer::n_shapes);
    if i >= n_s {
        return Err(Error::IndexOutOfRange {
            what: "shape",
            index: i,
            len: n_s,
        });
    }
    latent
        .positions
        .iter()
        .zip(&latent.labels)
        .map(|(v, &k)| {
            let fa = components.get(k).ok_or(Error::IndexOutOfRange {
                what: "part",
                index: k,
                len: components.len(),
            })?;
            Ok(fa.rotations[i] * v + fa.mean[i])
        })
        .collect()
}

/// `shape - reconstruction` per shape and vertex.
pub fn residuals<T: Real>(
    set: &TrainingSet<T>,
    components: &[FactorAnalyzer<T>],
    latent: &LatentShape<T>,
) -> Result<Vec<Vec<Vector3<T>>>> {
    (0..set.n_shapes())
        .map(|i| {
            let rebuilt = reconstruct_vertices(components, latent, i)?;
            Ok(set.shapes[i].iter().zip(rebuilt).map(|(v, r)| v - r).collect())
        })
        .collect()
}

/// Everything needed to reconstruct and interpolate poses without the
/// training data.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel<T: Real> {
    pub components: Vec<FactorAnalyzer<T>>,
    pub latent: LatentShape<T>,
    /// `residuals[shape][vertex]`, in normalized units.
    pub residuals: Vec<Vec<Vector3<T>>>,
    pub triangles: Vec<[usize; 3]>,
    /// Maps original mesh units to the normalized units the model lives in.
    pub normalization: Normalization<T>,
    pub log_likelihood_trace: Vec<T>,
}

impl<T: Real> PoseModel<T> {
    pub fn from_fit(set: &TrainingSet<T>, model: &MixtureModel<T>) -> Result<Self> {
        let data = assemble_data(set);
        let latent = latent_shape(&data, model)?;
        let residuals = residuals(set, &model.components, &latent)?;
        Ok(Self {
            components: model.components.clone(),
            latent,
            residuals,
            triangles: set.triangles.clone(),
            normalization: set.normalization,
            log_likelihood_trace: model.log_likelihood_trace.clone(),
        })
    }

    pub fn n_parts(&self) -> usize {
        self.components.len()
    }

    pub fn n_shapes(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.latent.positions.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.latent.labels
    }

    /// Shape `i` rebuilt without residuals, in normalized units.
    pub fn reconstruct(&self, i: usize) -> Result<Mesh<T>> {
        Ok(Mesh {
            vertices: reconstruct_vertices(&self.components, &self.latent, i)?,
            triangles: self.triangles.clone(),
        })
    }

    /// Maps a mesh in normalized units back to original units.
    pub fn denormalize(&self, mesh: &Mesh<T>) -> Mesh<T> {
        Mesh {
            vertices: mesh.vertices.iter().map(|v| self.normalization.invert(v)).collect(),
            triangles: mesh.triangles.clone(),
        }
    }

    /// The reference shape as a mesh.
    pub fn reference_mesh(&self) -> Mesh<T> {
        Mesh {
            vertices: self.latent.positions.clone(),
            triangles: self.triangles.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::normalize_unit_box;
    use crate::synthetic::{generate_chain, kabsch_oracle, ChainSpec, PartSpec};
    use nalgebra::{DMatrix, Matrix3};

    fn fitted(gamma: DMatrix<f64>) -> MixtureModel<f64> {
        let fa = FactorAnalyzer {
            rotations: vec![Matrix3::identity()],
            scale: Vector3::new(1.0, 1.0, 1.0),
            mean: vec![Vector3::zeros()],
            noise: vec![1.0],
            weight: 1.0,
        };
        MixtureModel {
            components: vec![fa; gamma.nrows()],
            labels: argmax_labels(&gamma),
            responsibilities: gamma,
            initial_log_likelihood: 0.0,
            log_likelihood_trace: vec![],
            converged: true,
        }
    }

    #[test]
    fn labels_follow_maximum_responsibility() {
        let gamma = DMatrix::from_column_slice(2, 3, &[0.2, 0.8, 0.5, 0.5, 0.9, 0.1]);
        assert_eq!(assign_labels(&fitted(gamma)), vec![1, 0, 0]);
        let single = DMatrix::from_element(1, 4, 1.0);
        assert_eq!(assign_labels(&fitted(single)), vec![0; 4]);
    }

    #[test]
    fn vertex_at_mean_maps_to_origin() {
        let model = fitted(DMatrix::from_element(1, 1, 1.0));
        let data = vec![DataVector::from_blocks(&[Vector3::zeros()])];
        let latent = latent_shape(&data, &model).unwrap();
        assert_eq!(latent.positions[0], Vector3::zeros());
    }

    #[test]
    fn zero_scale_collapses_reference_and_reconstructs_means() {
        let mut model = fitted(DMatrix::from_element(1, 2, 1.0));
        let b = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.0, 0.5)];
        model.components[0].scale = Vector3::zeros();
        model.components[0].mean = b.clone();
        model.components[0].rotations = vec![Matrix3::identity(); 2];
        model.components[0].noise = vec![1.0; 2];
        let data = vec![
            DataVector::from_blocks(&[Vector3::new(4.0, 0.0, 0.0), Vector3::zeros()]),
            DataVector::from_blocks(&[Vector3::new(0.0, 1.0, 0.0), Vector3::new(2.0, 2.0, 2.0)]),
        ];
        let latent = latent_shape(&data, &model).unwrap();
        assert!(latent.positions.iter().all(|v| *v == Vector3::zeros()));
        for i in 0..2 {
            let rebuilt = reconstruct_vertices(&model.components, &latent, i).unwrap();
            assert!(rebuilt.iter().all(|v| *v == b[i]));
        }
        assert!(matches!(
            reconstruct_vertices(&model.components, &latent, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    fn rigid_spec() -> ChainSpec {
        ChainSpec {
            parts: vec![PartSpec {
                size: [1.0, 0.5, 0.3],
                vertices: 64,
            }],
            joints: vec![],
            poses: 4,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn rigid_single_part_is_not_split() {
        let (set, _) = generate_chain::<f64>(&rigid_spec()).unwrap();
        let set = normalize_unit_box(&set).unwrap();
        let (model, report) = hierarchical_fit(&set, 1, &HierarchyConfig::default()).unwrap();
        assert_eq!(model.n_components(), 1);
        assert_eq!(report.final_components, 1);
        assert_eq!(report.parts[0].stop, StopReason::Threshold);
        assert_eq!(report.parts[0].history.len(), 1);
    }

    #[test]
    fn noiseless_reference_is_congruent_and_reconstruction_exact() {
        let spec = ChainSpec::three_part_chain().with_noise(0.0);
        let (raw, truth) = generate_chain::<f64>(&spec).unwrap();
        let set = normalize_unit_box(&raw).unwrap();
        let data = assemble_data(&set);
        let model = aecm_fit(&data, &Init::Labels(truth.labels.clone()), &AecmConfig::default()).unwrap();
        let pose = PoseModel::from_fit(&set, &model).unwrap();
        for p in 0..3 {
            let idx: Vec<usize> = (0..data.len()).filter(|&j| truth.labels[j] == p).collect();
            let latent: Vec<_> = idx.iter().map(|&j| pose.latent.positions[j]).collect();
            let rest: Vec<_> = idx.iter().map(|&j| set.normalization.apply(&truth.rest[j])).collect();
            let fit = kabsch_oracle(&latent, &rest).unwrap();
            assert!(fit.rms <= 1e-5, "part {p}: rms {}", fit.rms);
        }
        for i in 0..set.n_shapes() {
            let rebuilt = pose.reconstruct(i).unwrap();
            let sq: f64 = rebuilt
                .vertices
                .iter()
                .zip(&set.shapes[i])
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            assert!((sq / data.len() as f64).sqrt() <= 1e-5);
            // reconstruction + residual gives back the input
            for (j, v) in rebuilt.vertices.iter().enumerate() {
                assert!((v + pose.residuals[i][j] - set.shapes[i][j]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn min_split_size_matches_parameter_count() {
        assert_eq!(min_split_size(5), 48);
    }
}
