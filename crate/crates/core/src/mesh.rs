//! Corresponded triangle-mesh sequences: OBJ I/O, unit-box normalization and
//! the stacked per-vertex data vectors fed to the mixture model.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Vertex colors used when writing segmentations; part `k` gets entry `k % 23`.
pub const PART_PALETTE: [[f32; 3]; 23] = [
    [0.902, 0.098, 0.294],
    [0.235, 0.706, 0.294],
    [1.000, 0.882, 0.098],
    [0.263, 0.388, 0.847],
    [0.961, 0.510, 0.192],
    [0.569, 0.118, 0.706],
    [0.259, 0.831, 0.957],
    [0.941, 0.196, 0.902],
    [0.749, 0.937, 0.271],
    [0.980, 0.745, 0.831],
    [0.275, 0.600, 0.565],
    [0.863, 0.745, 1.000],
    [0.604, 0.388, 0.141],
    [1.000, 0.980, 0.784],
    [0.502, 0.000, 0.000],
    [0.667, 1.000, 0.765],
    [0.502, 0.502, 0.000],
    [1.000, 0.847, 0.694],
    [0.000, 0.000, 0.459],
    [0.663, 0.663, 0.663],
    [0.200, 0.200, 0.200],
    [0.000, 0.502, 0.502],
    [0.804, 0.522, 0.247],
];

/// A triangle mesh. Triangles index into `vertices` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub triangles: Vec<[usize; 3]>,
}

impl<T: Real> Mesh<T> {
    /// Builds a mesh, rejecting out-of-range and degenerate triangles.
    pub fn new(vertices: Vec<Vector3<T>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        validate_triangles(&triangles, vertices.len())?;
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }
}

fn validate_triangles(triangles: &[[usize; 3]], n_vertices: usize) -> Result<()> {
    for (t, tri) in triangles.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v >= n_vertices) {
            return Err(Error::InvalidMesh(format!(
                "triangle {t} references vertex {bad} but mesh has {n_vertices} vertices"
            )));
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(Error::InvalidMesh(format!(
                "triangle {t} is degenerate: {tri:?}"
            )));
        }
    }
    Ok(())
}

/// Affine map `normalized = (original - offset) / extent` applied uniformly
/// to every shape of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization<T: Real> {
    pub offset: Vector3<T>,
    pub extent: T,
}

impl<T: Real> Normalization<T> {
    pub fn identity() -> Self {
        Self {
            offset: Vector3::zeros(),
            extent: T::one(),
        }
    }

    /// Uniform scale factor applied to original coordinates.
    pub fn scale(&self) -> T {
        T::one() / self.extent
    }

    pub fn apply(&self, v: &Vector3<T>) -> Vector3<T> {
        (v - self.offset) / self.extent
    }

    pub fn invert(&self, v: &Vector3<T>) -> Vector3<T> {
        v * self.extent + self.offset
    }

    /// `self` followed by `next`.
    fn then(&self, next: &Self) -> Self {
        Self {
            offset: self.offset + next.offset * self.extent,
            extent: self.extent * next.extent,
        }
    }
}

/// `n_s` shapes in vertex correspondence sharing one connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T: Real> {
    /// `shapes[i][j]` is vertex `j` of shape `i`.
    pub shapes: Vec<Vec<Vector3<T>>>,
    pub triangles: Vec<[usize; 3]>,
    /// Maps the original (file) coordinates onto the stored ones.
    pub normalization: Normalization<T>,
}

impl<T: Real> TrainingSet<T> {
    pub fn new(meshes: Vec<Mesh<T>>) -> Result<Self> {
        if meshes.len() < 2 {
            return Err(Error::TooFewShapes(meshes.len()));
        }
        let reference = &meshes[0];
        for (i, mesh) in meshes.iter().enumerate().skip(1) {
            if mesh.n_vertices() != reference.n_vertices() {
                return Err(Error::Correspondence(format!(
                    "shape {i} has {} vertices, shape 0 has {}",
                    mesh.n_vertices(),
                    reference.n_vertices()
                )));
            }
            if mesh.triangles != reference.triangles {
                return Err(Error::Correspondence(format!(
                    "shape {i} has a different triangle list than shape 0"
                )));
            }
        }
        let triangles = reference.triangles.clone();
        validate_triangles(&triangles, reference.n_vertices())?;
        Ok(Self {
            shapes: meshes.into_iter().map(|m| m.vertices).collect(),
            triangles,
            normalization: Normalization::identity(),
        })
    }

    pub fn n_shapes(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.shapes.first().map_or(0, Vec::len)
    }

    pub fn vertex(&self, shape: usize, vertex: usize) -> Vector3<T> {
        self.shapes[shape][vertex]
    }

    pub fn mesh(&self, shape: usize) -> Mesh<T> {
        Mesh {
            vertices: self.shapes[shape].clone(),
            triangles: self.triangles.clone(),
        }
    }

    /// The sub-sequence made of the listed vertices, in the given order.
    /// Triangles are dropped; the result is only meant for fitting.
    pub fn subset(&self, vertices: &[usize]) -> Self {
        Self {
            shapes: self
                .shapes
                .iter()
                .map(|shape| vertices.iter().map(|&j| shape[j]).collect())
                .collect(),
            triangles: Vec::new(),
            normalization: self.normalization,
        }
    }

    /// Shape `i` mapped back to original units.
    pub fn denormalized_mesh(&self, shape: usize) -> Mesh<T> {
        Mesh {
            vertices: self.shapes[shape]
                .iter()
                .map(|v| self.normalization.invert(v))
                .collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// One vertex tracked through all shapes: `(v_j^1, ..., v_j^{n_s})` stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct DataVector<T: Real>(pub DVector<T>);

impl<T: Real> DataVector<T> {
    pub fn from_blocks(blocks: &[Vector3<T>]) -> Self {
        Self(DVector::from_iterator(
            blocks.len() * 3,
            blocks.iter().flat_map(|b| b.iter().copied()),
        ))
    }

    pub fn n_shapes(&self) -> usize {
        self.0.len() / 3
    }

    /// Coordinates of this vertex on shape `i`.
    #[inline]
    pub fn block(&self, i: usize) -> Vector3<T> {
        Vector3::new(self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2])
    }

    pub fn unstack(&self) -> Vec<Vector3<T>> {
        (0..self.n_shapes()).map(|i| self.block(i)).collect()
    }
}

/// Reads every file, validates correspondence and returns the raw sequence.
pub fn load_sequence<T: Real, P: AsRef<Path>>(paths: &[P]) -> Result<TrainingSet<T>> {
    if paths.len() < 2 {
        return Err(Error::TooFewShapes(paths.len()));
    }
    let meshes = paths
        .iter()
        .map(|p| read_obj(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(meshes)
}

/// Maps the whole sequence into `[0, 1]^3` with one uniform scale and one
/// translation taken from the joint bounding box of all shapes.
pub fn normalize_unit_box<T: Real>(set: &TrainingSet<T>) -> Result<TrainingSet<T>> {
    let mut lo = Vector3::repeat(T::max_value().expect("bounded scalar"));
    let mut hi = -lo;
    for v in set.shapes.iter().flatten() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    if set.n_vertices() == 0 {
        return Err(Error::DegenerateExtent);
    }
    let extent = (hi - lo).max();
    if !(extent > T::zero()) {
        return Err(Error::DegenerateExtent);
    }
    let step = Normalization { offset: lo, extent };
    Ok(TrainingSet {
        shapes: set
            .shapes
            .iter()
            .map(|shape| shape.iter().map(|v| step.apply(v)).collect())
            .collect(),
        triangles: set.triangles.clone(),
        normalization: set.normalization.then(&step),
    })
}

/// One data vector per vertex, stacked in shape order.
pub fn assemble_data<T: Real>(set: &TrainingSet<T>) -> Vec<DataVector<T>> {
    (0..set.n_vertices())
        .map(|j| {
            let blocks: Vec<_> = set.shapes.iter().map(|shape| shape[j]).collect();
            DataVector::from_blocks(&blocks)
        })
        .collect()
}

/// Parses the `v` and `f` records of a Wavefront OBJ file. Polygon faces,
/// texture and normal indices are accepted syntactically; faces must be
/// triangles.
pub fn read_obj<T: Real>(path: &Path) -> Result<Mesh<T>> {
    let text = fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn parse_obj<T: Real>(text: &str, path: &Path) -> Result<Mesh<T>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut coord = [T::zero(); 3];
                for c in coord.iter_mut() {
                    let field = fields
                        .next()
                        .ok_or_else(|| err(line_no, "vertex needs 3 coordinates".into()))?;
                    let value: f64 = field
                        .parse()
                        .map_err(|_| err(line_no, format!("bad coordinate `{field}`")))?;
                    if !value.is_finite() {
                        return Err(err(line_no, format!("non-finite coordinate `{field}`")));
                    }
                    *c = T::lit(value);
                }
                vertices.push(Vector3::from(coord));
            }
            Some("f") => {
                let corners = fields
                    .map(|f| parse_face_index(f, vertices.len()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err(line_no, format!("bad face record `{line}`")))?;
                if corners.len() != 3 {
                    return Err(err(
                        line_no,
                        format!("only triangles are supported, face has {} corners", corners.len()),
                    ));
                }
                triangles.push([corners[0], corners[1], corners[2]]);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| err(0, e.to_string()))
}

/// OBJ face corner `v`, `v/vt`, `v//vn` or `v/vt/vn`; negative indices are
/// relative to the vertices read so far.
fn parse_face_index(field: &str, n_read: usize) -> Option<usize> {
    let index: i64 = field.split('/').next()?.parse().ok()?;
    match index {
        0 => None,
        i if i > 0 => Some(i as usize - 1),
        i => n_read.checked_sub(i.unsigned_abs() as usize),
    }
}

/// Writes `v`/`f` records. Coordinates are printed with the shortest
/// representation that parses back to the same value.
pub fn write_obj<T: Real>(mesh: &Mesh<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()?;
    Ok(())
}

/// Triangles whose corners carry at least two distinct labels.
pub fn boundary_triangles(triangles: &[[usize; 3]], labels: &[usize]) -> Vec<usize> {
    triangles
        .iter()
        .enumerate()
        .filter(|(_, t)| labels[t[0]] != labels[t[1]] || labels[t[1]] != labels[t[2]])
        .map(|(i, _)| i)
        .collect()
}

/// Path of the label sidecar belonging to a mesh file (`x.obj` -> `x.labels`).
pub fn labels_path(mesh_path: &Path) -> PathBuf {
    mesh_path.with_extension("labels")
}

/// Writes the mesh with per-vertex palette colors plus a `.labels` sidecar.
///
/// Triangles inside a single part go to group `parts`; triangles spanning
/// two or more labels go to group `boundary`, so viewers can hide them to
/// show the gaps between parts.
pub fn write_labeled_mesh<T: Real>(mesh: &Mesh<T>, labels: &[usize], path: &Path) -> Result<()> {
    if labels.len() != mesh.n_vertices() {
        return Err(Error::LabelCount {
            expected: mesh.n_vertices(),
            got: labels.len(),
        });
    }
    let boundary = boundary_triangles(&mesh.triangles, labels);
    let mut is_boundary = vec![false; mesh.triangles.len()];
    for &t in &boundary {
        is_boundary[t] = true;
    }

    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(
        out,
        "# {} vertices, {} triangles, {} boundary triangles",
        mesh.n_vertices(),
        mesh.triangles.len(),
        boundary.len()
    )?;
    for (v, &label) in mesh.vertices.iter().zip(labels) {
        let [r, g, b] = PART_PALETTE[label % PART_PALETTE.len()];
        writeln!(out, "v {} {} {} {r} {g} {b}", v.x, v.y, v.z)?;
    }
    for (group, flag) in [("parts", false), ("boundary", true)] {
        writeln!(out, "g {group}")?;
        for (t, _) in is_boundary.iter().enumerate().filter(|(_, &b)| b == flag) {
            let tri = mesh.triangles[t];
            writeln!(out, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1)?;
        }
    }
    out.flush()?;
    write_labels(labels, &labels_path(path))
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(text, "{l}");
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("bad label `{}`", l.trim()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_mesh(offset: f64) -> Mesh<f64> {
        Mesh::new(
            vec![
                Vector3::new(offset, 0.0, 0.0),
                Vector3::new(1.0 + offset, 0.0, 0.0),
                Vector3::new(offset, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_degenerate_and_out_of_range_triangles() {
        let v = vec![Vector3::<f64>::zeros(); 3];
        assert!(matches!(
            Mesh::new(v.clone(), vec![[0, 0, 1]]),
            Err(Error::InvalidMesh(_))
        ));
        assert!(matches!(
            Mesh::new(v, vec![[0, 1, 3]]),
            Err(Error::InvalidMesh(_))
        ));
    }

    #[test]
    fn training_set_from_identical_triangles() {
        let set = TrainingSet::new(vec![tri_mesh(0.0), tri_mesh(0.0)]).unwrap();
        assert_eq!(set.n_shapes(), 2);
        assert_eq!(set.n_vertices(), 3);
    }

    #[test]
    fn vertex_count_mismatch_is_a_correspondence_error() {
        let mut other = tri_mesh(0.0);
        other.vertices.push(Vector3::new(5.0, 5.0, 5.0));
        let err = TrainingSet::new(vec![tri_mesh(0.0), other]).unwrap_err();
        assert!(matches!(err, Error::Correspondence(_)));
    }

    #[test]
    fn connectivity_mismatch_is_a_correspondence_error() {
        let mut other = tri_mesh(0.0);
        other.triangles = vec![[0, 2, 1]];
        let err = TrainingSet::new(vec![tri_mesh(0.0), other]).unwrap_err();
        assert!(matches!(err, Error::Correspondence(_)));
    }

    #[test]
    fn single_shape_is_rejected() {
        assert!(matches!(
            TrainingSet::new(vec![tri_mesh(0.0)]),
            Err(Error::TooFewShapes(1))
        ));
        assert!(matches!(
            load_sequence::<f64, &Path>(&[Path::new("a.obj")]),
            Err(Error::TooFewShapes(1))
        ));
    }

    #[test]
    fn normalization_of_symmetric_cube() {
        let corners: Vec<_> = (0..8)
            .map(|b| {
                let c = |bit: usize| if b & bit != 0 { 2.0 } else { -2.0 };
                Vector3::new(c(1), c(2), c(4))
            })
            .collect();
        let m = Mesh::new(corners, vec![[0, 1, 2]]).unwrap();
        let set = TrainingSet::new(vec![m.clone(), m]).unwrap();
        let n = normalize_unit_box(&set).unwrap();
        assert_eq!(n.normalization.scale(), 0.25);
        let lo = n.shapes.iter().flatten().fold(f64::MAX, |a, v| a.min(v.min()));
        let hi = n.shapes.iter().flatten().fold(f64::MIN, |a, v| a.max(v.max()));
        assert_eq!((lo, hi), (0.0, 1.0));
        let back = n.denormalized_mesh(0);
        assert_eq!(back.vertices, set.shapes[0]);
    }

    #[test]
    fn normalization_of_unit_data_is_identity() {
        let a = Mesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.5, 0.0),
                Vector3::new(0.0, 1.0, 1.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let set = TrainingSet::new(vec![a.clone(), a]).unwrap();
        let n = normalize_unit_box(&set).unwrap();
        assert_eq!(n.normalization.scale(), 1.0);
        assert_eq!(n.shapes, set.shapes);
    }

    #[test]
    fn normalization_rejects_single_point() {
        let p = Mesh::new(vec![Vector3::new(3.0, 3.0, 3.0); 3], vec![]).unwrap();
        let set = TrainingSet::new(vec![p.clone(), p]).unwrap();
        assert!(matches!(
            normalize_unit_box(&set),
            Err(Error::DegenerateExtent)
        ));
    }

    #[test]
    fn normalization_composes() {
        let set = TrainingSet::new(vec![tri_mesh(-3.0), tri_mesh(4.0)]).unwrap();
        let once = normalize_unit_box(&set).unwrap();
        let twice = normalize_unit_box(&once).unwrap();
        for (a, b) in twice.shapes[1].iter().zip(&set.shapes[1]) {
            assert!((twice.normalization.invert(a) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn data_vector_stacks_shapes() {
        let a = Mesh::new(vec![Vector3::zeros(); 1], vec![]).unwrap();
        let b = Mesh::new(vec![Vector3::new(1.0, 1.0, 1.0)], vec![]).unwrap();
        let set = TrainingSet::new(vec![a, b]).unwrap();
        let data = assemble_data(&set);
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].0.as_slice(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn obj_parsing_handles_variants() {
        let text = "# comment\nv 0 0 0\nv 1 0 0 0.5 0.5 0.5\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n";
        let m: Mesh<f64> = parse_obj(text, Path::new("x.obj")).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert_eq!(m.vertices[1], Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn obj_parse_errors_carry_line_numbers() {
        let err = parse_obj::<f64>("v 0 0 0\nv 1 x 0\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_obj::<f64>(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n",
            Path::new("quad.obj"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }));
    }

    #[test]
    fn labeled_mesh_flags_boundary_triangles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.obj");
        let mesh = Mesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let labels = [0, 0, 0, 1];
        write_labeled_mesh(&mesh, &labels, &path).unwrap();
        assert_eq!(read_labels(&labels_path(&path)).unwrap(), labels);
        let text = fs::read_to_string(&path).unwrap();
        let boundary_section = text.split("g boundary").nth(1).unwrap();
        assert!(boundary_section.contains("f 2 4 3"));
        let reread: Mesh<f64> = read_obj(&path).unwrap();
        assert_eq!(reread.vertices, mesh.vertices);
        assert_eq!(reread.triangles.len(), 2);
    }

    #[test]
    fn labeled_mesh_requires_one_label_per_vertex() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_labeled_mesh(&tri_mesh(0.0), &[0, 1], &dir.path().join("x.obj"))
            .unwrap_err();
        assert!(matches!(err, Error::LabelCount { expected: 3, got: 2 }));
    }

    #[test]
    fn three_label_triangle_is_boundary() {
        assert_eq!(boundary_triangles(&[[0, 1, 2], [2, 1, 0]], &[0, 1, 2]), vec![0, 1]);
        assert!(boundary_triangles(&[[0, 1, 2]], &[4, 4, 4]).is_empty());
    }
}
