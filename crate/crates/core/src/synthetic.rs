//! Synthetic articulated chains with known parts and motions, plus
//! brute-force reference computations used to check the fitted model.
//!
//! Nothing here shares code with the block-structured routines in
//! [`crate::mfa`]: the Gaussian reference forms and factors the full
//! covariance, and the rigid alignment is the textbook SVD construction.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, TrainingSet};
use crate::scalar::Real;

/// One box-shaped part, laid out along +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    /// Length along the chain, height (y) and depth (z).
    pub size: [f64; 3],
    /// Number of vertices sampled on the part's lateral surface.
    pub vertices: usize,
}

/// Hinge between consecutive parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: [f64; 3],
    /// Hinge angle in radians for every pose.
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub parts: Vec<PartSpec>,
    /// `joints[p]` connects part `p` to part `p + 1`.
    pub joints: Vec<JointSpec>,
    pub poses: usize,
    /// Standard deviation of the per-coordinate vertex noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ChainSpec {
    /// Three 80-vertex parts, five poses, noise `1e-3`.
    pub fn three_part_chain() -> Self {
        let deg = |d: f64| d.to_radians();
        Self {
            parts: vec![
                PartSpec {
                    size: [1.0, 0.3, 0.2],
                    vertices: 80,
                };
                3
            ],
            joints: vec![
                JointSpec {
                    axis: [0.0, 0.0, 1.0],
                    angles: [0.0, 15.0, 30.0, 45.0, 60.0].map(deg).to_vec(),
                },
                JointSpec {
                    axis: [0.0, 1.0, 0.0],
                    angles: [0.0, -30.0, 20.0, 45.0, -15.0].map(deg).to_vec(),
                },
            ],
            poses: 5,
            noise_sigma: 1e-3,
            seed: 7,
        }
    }

    /// Two parts bending about z from `0` to `angle` over two poses.
    pub fn single_hinge(angle: f64) -> Self {
        Self {
            parts: vec![
                PartSpec {
                    size: [1.0, 0.3, 0.2],
                    vertices: 80,
                };
                2
            ],
            joints: vec![JointSpec {
                axis: [0.0, 0.0, 1.0],
                angles: vec![0.0, angle],
            }],
            poses: 2,
            noise_sigma: 0.0,
            seed: 1,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn ring_size(&self) -> Result<usize> {
        let counts: Vec<usize> = self.parts.iter().map(|p| p.vertices).collect();
        if counts.iter().all(|c| c % 8 == 0) {
            Ok(8)
        } else if counts.iter().all(|c| c % 4 == 0) {
            Ok(4)
        } else {
            Err(Error::InvalidArgument(
                "part vertex counts must all be multiples of 8 (or all multiples of 4)".into(),
            ))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.parts.is_empty() {
            return bad("chain needs at least one part".into());
        }
        if self.poses < 2 {
            return bad(format!("need at least 2 poses, got {}", self.poses));
        }
        if self.joints.len() + 1 != self.parts.len() {
            return bad(format!(
                "{} parts need {} joints, got {}",
                self.parts.len(),
                self.parts.len() - 1,
                self.joints.len()
            ));
        }
        for (p, part) in self.parts.iter().enumerate() {
            if part.vertices < 12 {
                return bad(format!("part {p} has {} vertices, need >= 12", part.vertices));
            }
            if part.size.iter().any(|&s| !(s > 0.0)) {
                return bad(format!("part {p} has a non-positive dimension"));
            }
        }
        for (q, joint) in self.joints.iter().enumerate() {
            if joint.angles.len() != self.poses {
                return bad(format!(
                    "joint {q} has {} angles for {} poses",
                    joint.angles.len(),
                    self.poses
                ));
            }
            if Vector3::from(joint.axis).norm() == 0.0 {
                return bad(format!("joint {q} has a zero axis"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        self.ring_size().map(|_| ())
    }
}

/// Generating parameters of a synthetic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T: Real> {
    pub labels: Vec<usize>,
    /// Noise-free rest geometry (pose of the unrotated chain).
    pub rest: Vec<Vector3<T>>,
    /// `rotations[part][shape]`.
    pub rotations: Vec<Vec<Matrix3<T>>>,
    /// `translations[part][shape]`; vertex = `R * rest + t`.
    pub translations: Vec<Vec<Vector3<T>>>,
}

fn ring_offsets(size: usize, h: f64, d: f64) -> Vec<(f64, f64)> {
    let (y, z) = (h / 2.0, d / 2.0);
    if size == 8 {
        vec![
            (y, 0.0),
            (y, z),
            (0.0, z),
            (-y, z),
            (-y, 0.0),
            (-y, -z),
            (0.0, -z),
            (y, -z),
        ]
    } else {
        vec![(y, z), (-y, z), (-y, -z), (y, -z)]
    }
}

/// Builds the chain and poses it.
///
/// Each part is a tube of rings around the box's lateral faces; consecutive
/// rings, including the last ring of one part and the first of the next, are
/// joined by triangle strips so the parts form one connected mesh. Pose `i`
/// applies the cumulative hinge rotations down the chain (part 0 stays put)
/// and adds isotropic Gaussian noise to every vertex.
pub fn generate_chain<T: Real>(spec: &ChainSpec) -> Result<(TrainingSet<T>, GroundTruth<T>)> {
    spec.validate()?;
    let ring = spec.ring_size()?;

    let mut rest = Vec::new();
    let mut labels = Vec::new();
    let mut rings: Vec<usize> = Vec::new(); // start vertex of each ring
    let mut joint_centers = Vec::new();
    let mut x0 = 0.0;
    for (p, part) in spec.parts.iter().enumerate() {
        let [len, h, d] = part.size;
        let n_rings = part.vertices / ring;
        for r in 0..n_rings {
            let x = x0 + (r as f64 + 0.5) * len / n_rings as f64;
            rings.push(rest.len());
            for (y, z) in ring_offsets(ring, h, d) {
                rest.push(Vector3::new(x, y, z));
                labels.push(p);
            }
        }
        x0 += len;
        joint_centers.push(Vector3::new(x0, 0.0, 0.0));
    }

    let mut triangles = Vec::new();
    for pair in rings.windows(2) {
        let (a0, b0) = (pair[0], pair[1]);
        for k in 0..ring {
            let k1 = (k + 1) % ring;
            let (a, b, c, d) = (a0 + k, a0 + k1, b0 + k, b0 + k1);
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }

    let n_parts = spec.parts.len();
    let mut rotations = vec![Vec::with_capacity(spec.poses); n_parts];
    let mut translations = vec![Vec::with_capacity(spec.poses); n_parts];
    for i in 0..spec.poses {
        let mut rot = Matrix3::<f64>::identity();
        let mut trans = Vector3::<f64>::zeros();
        rotations[0].push(rot);
        translations[0].push(trans);
        for (q, joint) in spec.joints.iter().enumerate() {
            let hinge = Rotation3::from_axis_angle(
                &Unit::new_normalize(Vector3::from(joint.axis)),
                joint.angles[i],
            )
            .into_inner();
            let c = joint_centers[q];
            trans += rot * (c - hinge * c);
            rot *= hinge;
            rotations[q + 1].push(rot);
            translations[q + 1].push(trans);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut meshes = Vec::with_capacity(spec.poses);
    for i in 0..spec.poses {
        let vertices = rest
            .iter()
            .zip(&labels)
            .map(|(x, &p)| {
                let e = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                (rotations[p][i] * x + translations[p][i] + e).map(T::lit)
            })
            .collect();
        meshes.push(Mesh::new(vertices, triangles.clone())?);
    }

    let convert_m = |m: &Matrix3<f64>| m.map(T::lit);
    let truth = GroundTruth {
        labels,
        rest: rest.iter().map(|v| v.map(T::lit)).collect(),
        rotations: rotations
            .iter()
            .map(|per| per.iter().map(convert_m).collect())
            .collect(),
        translations: translations
            .iter()
            .map(|per| per.iter().map(|t| t.map(T::lit)).collect())
            .collect(),
    };
    Ok((TrainingSet::new(meshes)?, truth))
}

/// Result of evaluating a Gaussian factor model with dense matrices.
#[derive(Debug, Clone)]
pub struct DenseGaussian<T: Real> {
    pub log_density: T,
    pub posterior_mean: DVector<T>,
    pub posterior_cov: DMatrix<T>,
}

/// Reference evaluation of `N(h; b, A A^T + diag(phi))` and of the latent
/// posterior, by forming and Cholesky-factoring the full covariance.
pub fn dense_gaussian_oracle<T: Real>(
    h: &DVector<T>,
    b: &DVector<T>,
    a: &DMatrix<T>,
    phi: &DVector<T>,
) -> Result<DenseGaussian<T>> {
    let n = h.len();
    if b.len() != n || a.nrows() != n || phi.len() != n {
        return Err(Error::InvalidArgument("dense oracle dimension mismatch".into()));
    }
    let sigma = a * a.transpose() + DMatrix::from_diagonal(phi);
    let chol = sigma
        .cholesky()
        .ok_or(Error::SingularCovariance { component: 0 })?;
    let log_det = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &d| acc + d.ln())
        * T::lit(2.0);
    let inv = chol.inverse();
    let d = h - b;
    let quad = d.dot(&(&inv * &d));
    let log_density =
        -(T::from_usize_lossy(n) * T::two_pi().ln() + log_det + quad) / T::lit(2.0);
    let beta = a.transpose() * &inv;
    let posterior_mean = &beta * d;
    let posterior_cov = DMatrix::identity(a.ncols(), a.ncols()) - beta * a;
    Ok(DenseGaussian {
        log_density,
        posterior_mean,
        posterior_cov,
    })
}

/// Best rigid motion `q ~ R p + t` in the least-squares sense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidFit<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub rms: T,
}

/// Kabsch alignment of `p` onto `q` with a proper rotation.
pub fn kabsch_oracle<T: Real>(p: &[Vector3<T>], q: &[Vector3<T>]) -> Result<RigidFit<T>> {
    if p.len() != q.len() || p.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need >= 3 paired points, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let n = T::from_usize_lossy(p.len());
    let pc = p.iter().fold(Vector3::zeros(), |a, x| a + x) / n;
    let qc = q.iter().fold(Vector3::zeros(), |a, x| a + x) / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (x, y) in p.iter().zip(q) {
        h += (x - pc) * (y - qc).transpose();
        spread += (x - pc) * (x - pc).transpose();
    }
    let sv = SVD::new(spread, false, false).singular_values;
    if !(sv[1] > T::lit(1e-12) * sv[0].max(T::lit(1e-300))) {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), sign)) * u.transpose();
    let translation = qc - rotation * pc;
    let sq = p
        .iter()
        .zip(q)
        .fold(T::zero(), |acc, (x, y)| acc + (rotation * x + translation - y).norm_squared());
    Ok(RigidFit {
        rotation,
        translation,
        rms: (sq / n).sqrt(),
    })
}
