//! Part adjacency, joint points and pose interpolation.
//!
//! Rotations of every part are interpolated on the rotation group; the
//! translations are then re-derived down a spanning tree of the part graph so
//! that adjacent parts keep meeting at their joint point.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::PoseModel;
use crate::mesh::{DataVector, Mesh};
use crate::mfa::{posterior_moments, FactorAnalyzer};
use crate::scalar::Real;

/// How the contact point between two parts is computed from the triangles
/// that straddle them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointPointMode {
    /// Mean of the distinct vertices of the straddling triangles.
    #[default]
    VertexMean,
    /// Mean of the straddling triangles' centroids.
    CentroidMean,
}

/// Two adjacent parts and their contact point.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEdge<T: Real> {
    /// Part ids, smaller first.
    pub parts: (usize, usize),
    /// Contact point on every training shape.
    pub points: Vec<Vector3<T>>,
    /// The contact point in the reference frame of each incident part
    /// (`Lambda E[z | J]`), in the order of `parts`.
    pub latents: [Vector3<T>; 2],
}

impl<T: Real> PartEdge<T> {
    /// Reference-frame contact point as seen from part `p`.
    pub fn latent_for(&self, p: usize) -> Vector3<T> {
        if p == self.parts.0 {
            self.latents[0]
        } else {
            self.latents[1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartGraph<T: Real> {
    pub n_parts: usize,
    pub edges: Vec<PartEdge<T>>,
}

impl<T: Real> PartGraph<T> {
    /// Neighbouring parts of `p` with the connecting edge index, ascending.
    pub fn neighbors(&self, p: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .edges
            .iter()
            .enumerate()
            .filter_map(|(e, edge)| match edge.parts {
                (a, b) if a == p => Some((b, e)),
                (a, b) if b == p => Some((a, e)),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&PartEdge<T>> {
        let key = (a.min(b), a.max(b));
        self.edges.iter().find(|e| e.parts == key)
    }

    /// Parts without any neighbour.
    pub fn isolated_parts(&self) -> Vec<usize> {
        (0..self.n_parts)
            .filter(|&p| !self.edges.iter().any(|e| e.parts.0 == p || e.parts.1 == p))
            .collect()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n_parts];
        let mut out = Vec::new();
        for start in 0..self.n_parts {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut members = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(p) = queue.pop_front() {
                for (q, _) in self.neighbors(p) {
                    if !seen[q] {
                        seen[q] = true;
                        members.push(q);
                        queue.push_back(q);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    /// Fails with [`Error::NoAdjacency`] naming the first isolated part when
    /// there is more than one part.
    pub fn require_connected(&self) -> Result<()> {
        if self.n_parts > 1 {
            if let Some(&p) = self.isolated_parts().first() {
                return Err(Error::NoAdjacency(p));
            }
        }
        Ok(())
    }
}

/// Finds adjacent parts and their contact points.
///
/// Two parts are adjacent when a triangle has vertices with both labels. The
/// contact point on shape `i` pools all such triangles (see
/// [`JointPointMode`]); its reference-frame image under each incident part
/// is the scaled posterior mean of the stacked contact points.
pub fn build_part_graph<T: Real>(
    shapes: &[Vec<Vector3<T>>],
    triangles: &[[usize; 3]],
    labels: &[usize],
    components: &[FactorAnalyzer<T>],
    mode: JointPointMode,
) -> Result<PartGraph<T>> {
    let n_v = labels.len();
    if shapes.iter().any(|s| s.len() != n_v) {
        return Err(Error::LabelCount {
            expected: shapes.first().map_or(0, Vec::len),
            got: n_v,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= components.len()) {
        return Err(Error::IndexOutOfRange {
            what: "part",
            index: bad,
            len: components.len(),
        });
    }

    let mut straddling: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (t, tri) in triangles.iter().enumerate() {
        let parts: BTreeSet<usize> = tri.iter().map(|&v| labels[v]).collect();
        let parts: Vec<usize> = parts.into_iter().collect();
        for a in 0..parts.len() {
            for b in a + 1..parts.len() {
                straddling.entry((parts[a], parts[b])).or_default().push(t);
            }
        }
    }

    let mut edges = Vec::with_capacity(straddling.len());
    for (parts, tris) in straddling {
        let points: Vec<Vector3<T>> = shapes
            .iter()
            .map(|shape| match mode {
                JointPointMode::VertexMean => {
                    let verts: BTreeSet<usize> = tris.iter().flat_map(|&t| triangles[t]).collect();
                    mean(verts.iter().map(|&v| shape[v]))
                }
                JointPointMode::CentroidMean => mean(tris.iter().map(|&t| {
                    let [a, b, c] = triangles[t];
                    (shape[a] + shape[b] + shape[c]) / T::lit(3.0)
                })),
            })
            .collect();
        let stacked = DataVector::from_blocks(&points);
        let latent = |p: usize| -> Result<Vector3<T>> {
            let fa = &components[p];
            Ok(fa.scale.component_mul(&posterior_moments(&stacked, fa)?.mean))
        };
        let latents = [latent(parts.0)?, latent(parts.1)?];
        edges.push(PartEdge {
            parts,
            points,
            latents,
        });
    }
    Ok(PartGraph {
        n_parts: components.len(),
        edges,
    })
}

fn mean<T: Real>(points: impl Iterator<Item = Vector3<T>>) -> Vector3<T> {
    let (sum, n) = points.fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    sum / T::from_usize_lossy(n.max(1))
}

fn to_quaternion<T: Real>(r: &Matrix3<T>) -> UnitQuaternion<T> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Geodesic angle between two rotations, i.e. the rotation angle of
/// `a * b^T`, in `[0, pi]`.
pub fn rotation_angle<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let q = to_quaternion(&(a * b.transpose()));
    let two = T::lit(2.0);
    two * q.imag().norm().atan2(q.scalar().abs())
}

/// Spherical linear interpolation along the shorter arc, with normalized
/// linear interpolation for nearly identical rotations.
pub fn slerp<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>, t: T) -> Matrix3<T> {
    let qa = to_quaternion(a).into_inner().coords;
    let mut qb = to_quaternion(b).into_inner().coords;
    let mut dot = qa.dot(&qb);
    if dot < T::zero() {
        qb = -qb;
        dot = -dot;
    }
    let theta = dot.min(T::one()).acos();
    let q = if theta < T::lit(1e-6) {
        qa * (T::one() - t) + qb * t
    } else {
        (qa * ((T::one() - t) * theta).sin() + qb * (t * theta).sin()) / theta.sin()
    };
    UnitQuaternion::new_normalize(Quaternion::from(q))
        .to_rotation_matrix()
        .into_inner()
}

/// One interpolated pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBlend<T: Real> {
    pub source: usize,
    pub target: usize,
    pub t: T,
    /// Root part of every connected component of the part graph.
    pub roots: Vec<usize>,
    /// Spanning-tree parent of every part (`None` for roots).
    pub parent: Vec<Option<usize>>,
    pub rotations: Vec<Matrix3<T>>,
    pub translations: Vec<Vector3<T>>,
    /// Blended residual of every vertex, normalized units.
    pub residuals: Vec<Vector3<T>>,
    /// Rotation angle between source and target pose of every part.
    pub part_angles: Vec<T>,
    /// Contact mismatch for every graph edge, in graph edge order.
    pub joint_residuals: Vec<T>,
}

impl<T: Real> PoseBlend<T> {
    /// Largest contact mismatch over the spanning-tree edges.
    pub fn max_tree_joint_residual(&self, graph: &PartGraph<T>) -> T {
        graph
            .edges
            .iter()
            .zip(&self.joint_residuals)
            .filter(|(e, _)| {
                let (a, b) = e.parts;
                self.parent[a] == Some(b) || self.parent[b] == Some(a)
            })
            .fold(T::zero(), |acc, (_, &r)| acc.max(r))
    }
}

/// Interpolates between training shapes `i` and `j` (0-based) at `t`.
///
/// Returns the blend and the resulting mesh in original mesh units.
pub fn interpolate_pose<T: Real>(
    model: &PoseModel<T>,
    graph: &PartGraph<T>,
    i: usize,
    j: usize,
    t: T,
) -> Result<(PoseBlend<T>, Mesh<T>)> {
    let n_s = model.n_shapes();
    for idx in [i, j] {
        if idx >= n_s {
            return Err(Error::IndexOutOfRange {
                what: "shape",
                index: idx,
                len: n_s,
            });
        }
    }
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::InvalidArgument(format!("t = {t} is outside [0, 1]")));
    }
    if graph.n_parts != model.n_parts() {
        return Err(Error::InvalidArgument(format!(
            "part graph has {} parts, model has {}",
            graph.n_parts,
            model.n_parts()
        )));
    }

    // the pose does not depend on t when both ends coincide; pinning the
    // weight makes the output bit-identical across t
    let requested = t;
    let t = if i == j { T::zero() } else { t };

    let parts = &model.components;
    let part_angles: Vec<T> = parts
        .iter()
        .map(|fa| rotation_angle(&fa.rotations[i], &fa.rotations[j]))
        .collect();
    let rotations: Vec<Matrix3<T>> = parts
        .iter()
        .map(|fa| slerp(&fa.rotations[i], &fa.rotations[j], t))
        .collect();

    let n = parts.len();
    let mut translations = vec![Vector3::zeros(); n];
    let mut parent = vec![None; n];
    let mut roots = Vec::new();
    for members in graph.connected_components() {
        // smallest relative rotation; ties go to the lower id
        let root = members
            .iter()
            .copied()
            .fold(members[0], |best, k| if part_angles[k] < part_angles[best] { k } else { best });
        roots.push(root);
        let fa = &parts[root];
        translations[root] = fa.mean[i] * (T::one() - t) + fa.mean[j] * t;
        let mut visited = vec![false; n];
        visited[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(p) = queue.pop_front() {
            for (c, e) in graph.neighbors(p) {
                if visited[c] {
                    continue;
                }
                visited[c] = true;
                parent[c] = Some(p);
                let edge = &graph.edges[e];
                translations[c] = rotations[p] * edge.latent_for(p) + translations[p]
                    - rotations[c] * edge.latent_for(c);
                queue.push_back(c);
            }
        }
    }

    let joint_residuals = graph
        .edges
        .iter()
        .map(|e| {
            let (a, b) = e.parts;
            let pa = rotations[a] * e.latent_for(a) + translations[a];
            let pb = rotations[b] * e.latent_for(b) + translations[b];
            (pa - pb).norm()
        })
        .collect();

    let one_minus = T::one() - t;
    let mut residuals = Vec::with_capacity(model.n_vertices());
    let mut vertices = Vec::with_capacity(model.n_vertices());
    for (v, (&k, (ei, ej))) in model.latent.positions.iter().zip(
        model
            .latent
            .labels
            .iter()
            .zip(model.residuals[i].iter().zip(&model.residuals[j])),
    ) {
        let fa = &parts[k];
        let local = fa.rotations[i].tr_mul(ei) * one_minus + fa.rotations[j].tr_mul(ej) * t;
        let eps = rotations[k] * local;
        let x = rotations[k] * v + translations[k] + eps;
        residuals.push(eps);
        vertices.push(model.normalization.invert(&x));
    }

    let blend = PoseBlend {
        source: i,
        target: j,
        t: requested,
        roots,
        parent,
        rotations,
        translations,
        residuals,
        part_angles,
        joint_residuals,
    };
    let mesh = Mesh {
        vertices,
        triangles: model.triangles.clone(),
    };
    Ok((blend, mesh))
}

impl<T: Real> PoseModel<T> {
    /// Training shape `i` as stored in the model (reconstruction plus
    /// residual), normalized units.
    pub fn training_shape(&self, i: usize) -> Result<Vec<Vector3<T>>> {
        let rebuilt = self.reconstruct(i)?.vertices;
        Ok(rebuilt.iter().zip(&self.residuals[i]).map(|(r, e)| r + e).collect())
    }

    pub fn part_graph(&self, mode: JointPointMode) -> Result<PartGraph<T>> {
        let shapes = (0..self.n_shapes())
            .map(|i| self.training_shape(i))
            .collect::<Result<Vec<_>>>()?;
        build_part_graph(&shapes, &self.triangles, self.labels(), &self.components, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfa::test_support::random_rotation;
    use nalgebra::Unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(angle: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    #[test]
    fn slerp_hits_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            assert!((slerp(&a, &b, 0.0) - a).norm() < 1e-12);
            assert!((slerp(&a, &b, 1.0) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn slerp_halfway_about_z() {
        let half = slerp(&Matrix3::identity(), &rot_z(std::f64::consts::FRAC_PI_2), 0.5);
        assert!((half - rot_z(std::f64::consts::FRAC_PI_4)).norm() < 1e-12);
    }

    #[test]
    fn slerp_angle_is_linear_in_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            // axis-angle oracle from the trace
            let total = ((((a * b.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
            for t in [0.25, 0.5, 0.75] {
                let r = slerp(&a, &b, t);
                let angle = ((((r * a.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
                assert!((angle - t * total).abs() < 1e-9, "{angle} vs {}", t * total);
                assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
                assert!((r.determinant() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slerp_takes_the_short_way_and_handles_tiny_arcs() {
        // 350 degrees about z is 10 degrees the other way
        let b = rot_z(350f64.to_radians());
        let half = slerp(&Matrix3::identity(), &b, 0.5);
        assert!((half - rot_z(-5f64.to_radians())).norm() < 1e-12);
        let tiny = rot_z(1e-9);
        let mid = slerp(&Matrix3::identity(), &tiny, 0.5);
        assert!((mid - rot_z(5e-10)).norm() < 1e-15);
    }

    #[test]
    fn rotation_angle_is_accurate_near_zero_and_pi() {
        assert!((rotation_angle(&rot_z(1e-8), &Matrix3::identity()) - 1e-8).abs() < 1e-20);
        let axis = Unit::new_normalize(Vector3::new(1.0, 2.0, 3.0));
        let r = Rotation3::from_axis_angle(&axis, std::f64::consts::PI - 1e-7).into_inner();
        let got = rotation_angle(&r, &Matrix3::identity());
        assert!((got - (std::f64::consts::PI - 1e-7)).abs() < 1e-12);
    }

    fn identity_components(n: usize, n_s: usize) -> Vec<FactorAnalyzer<f64>> {
        vec![
            FactorAnalyzer {
                rotations: vec![Matrix3::identity(); n_s],
                scale: Vector3::new(1.0, 1.0, 1.0),
                mean: vec![Vector3::zeros(); n_s],
                noise: vec![1.0; n_s],
                weight: 1.0 / n as f64,
            };
            n
        ]
    }

    #[test]
    fn two_part_strip_gives_one_edge_at_strip_center() {
        // two unit squares side by side: part 0 left, part 1 right
        let shape = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(2.0, 1.0, 0.0),
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let triangles = vec![[0, 2, 3], [0, 3, 1], [2, 4, 5], [2, 5, 3]];
        let comps = identity_components(2, 1);
        let g = build_part_graph(std::slice::from_ref(&shape), &triangles, &labels, &comps, JointPointMode::VertexMean)
            .unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].parts, (0, 1));
        // every triangle touches vertex 2 or 3 across the split
        let expected = shape.iter().sum::<Vector3<f64>>() / 6.0;
        assert!((g.edges[0].points[0] - expected).norm() < 1e-15);

        let g = build_part_graph(std::slice::from_ref(&shape), &triangles, &labels, &comps, JointPointMode::CentroidMean)
            .unwrap();
        let c = |t: [usize; 3]| (shape[t[0]] + shape[t[1]] + shape[t[2]]) / 3.0;
        let expected = (c([0, 2, 3]) + c([0, 3, 1]) + c([2, 4, 5]) + c([2, 5, 3])) / 4.0;
        assert!((g.edges[0].points[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn three_label_triangle_links_all_pairs() {
        let shape = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let g = build_part_graph(&[shape], &[[0, 1, 2]], &[0, 1, 2], &identity_components(3, 1), JointPointMode::VertexMean)
            .unwrap();
        let pairs: Vec<_> = g.edges.iter().map(|e| e.parts).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(g.require_connected().is_ok());
    }

    #[test]
    fn single_part_has_no_edges_and_isolated_parts_are_reported() {
        let shape = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let g = build_part_graph(std::slice::from_ref(&shape), &[[0, 1, 2]], &[0, 0, 0], &identity_components(1, 1), JointPointMode::VertexMean)
            .unwrap();
        assert!(g.edges.is_empty());
        assert!(g.require_connected().is_ok());
        let g = build_part_graph(&[shape], &[[0, 1, 2]], &[0, 0, 0], &identity_components(2, 1), JointPointMode::VertexMean)
            .unwrap();
        assert!(matches!(g.require_connected(), Err(Error::NoAdjacency(0))));
        assert_eq!(g.connected_components(), vec![vec![0], vec![1]]);
    }
}
