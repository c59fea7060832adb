//! Reading and writing trained models.
//!
//! Two encodings carry the same content. The binary one is little-endian and
//! round-trips every value bit for bit:
//!
//! ```text
//! magic        4 bytes  "PMFA"
//! version      u32      1
//! m            u32      number of parts
//! n_s          u32      number of shapes
//! n_v          u32      number of vertices
//! n_t          u32      number of triangles
//! n_trace      u32      log-likelihood trace length
//! extent       f64      normalization: normalized = (v - offset) / extent
//! offset       3 x f64
//! per part k:
//!   weight     f64
//!   scale      3 x f64
//!   per shape i:
//!     rotation 9 x f64  row-major
//!     mean     3 x f64
//!     noise    f64
//! labels       n_v x u32
//! positions    n_v x 3 x f64   reference shape
//! triangles    n_t x 3 x u32
//! residuals    n_s x n_v x 3 x f64
//! trace        n_trace x f64
//! ```
//!
//! The JSON encoding is a plain record with the same fields, meant for
//! inspection. All values are stored as `f64`; `f32` models widen losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LatentShape, PoseModel};
use crate::mesh::Normalization;
use crate::mfa::FactorAnalyzer;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"PMFA";
pub const VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Artifact(format!("{v} does not fit in u32")))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64<T: Real>(&mut self, v: T) -> Result<()> {
        Ok(self.0.write_all(&v.as_f64().to_le_bytes())?)
    }

    fn vec3<T: Real>(&mut self, v: &Vector3<T>) -> Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Artifact(format!("reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }

    fn f64<T: Real>(&mut self, what: &str) -> Result<T> {
        Ok(T::lit(f64::from_le_bytes(self.bytes(what)?)))
    }

    fn vec3<T: Real>(&mut self, what: &str) -> Result<Vector3<T>> {
        Ok(Vector3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }
}

/// Writes the binary encoding.
pub fn write_binary<T: Real, W: Write>(model: &PoseModel<T>, out: W) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    w.u32(VERSION as usize)?;
    w.u32(model.n_parts())?;
    w.u32(model.n_shapes())?;
    w.u32(model.n_vertices())?;
    w.u32(model.triangles.len())?;
    w.u32(model.log_likelihood_trace.len())?;
    w.f64(model.normalization.extent)?;
    w.vec3(&model.normalization.offset)?;
    for fa in &model.components {
        w.f64(fa.weight)?;
        w.vec3(&fa.scale)?;
        for i in 0..model.n_shapes() {
            let r = &fa.rotations[i];
            for row in 0..3 {
                for col in 0..3 {
                    w.f64(r[(row, col)])?;
                }
            }
            w.vec3(&fa.mean[i])?;
            w.f64(fa.noise[i])?;
        }
    }
    for &l in &model.latent.labels {
        w.u32(l)?;
    }
    for v in &model.latent.positions {
        w.vec3(v)?;
    }
    for tri in &model.triangles {
        for &v in tri {
            w.u32(v)?;
        }
    }
    for shape in &model.residuals {
        for e in shape {
            w.vec3(e)?;
        }
    }
    for &l in &model.log_likelihood_trace {
        w.f64(l)?;
    }
    Ok(w.0.flush()?)
}

/// Reads the binary encoding.
pub fn read_binary<T: Real, R: Read>(input: R) -> Result<PoseModel<T>> {
    let mut r = Reader(input);
    if &r.bytes::<4>("magic")? != MAGIC {
        return Err(Error::Artifact("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(Error::Artifact(format!("unsupported version {version}")));
    }
    let m = r.u32("part count")?;
    let n_s = r.u32("shape count")?;
    let n_v = r.u32("vertex count")?;
    let n_t = r.u32("triangle count")?;
    let n_trace = r.u32("trace length")?;
    let extent = r.f64("extent")?;
    let offset = r.vec3("offset")?;

    let mut components = Vec::with_capacity(m);
    for _ in 0..m {
        let weight = r.f64("weight")?;
        let scale = r.vec3("scale")?;
        let mut rotations = Vec::with_capacity(n_s);
        let mut mean = Vec::with_capacity(n_s);
        let mut noise = Vec::with_capacity(n_s);
        for _ in 0..n_s {
            let mut rot = Matrix3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    rot[(row, col)] = r.f64("rotation")?;
                }
            }
            rotations.push(rot);
            mean.push(r.vec3("mean")?);
            noise.push(r.f64("noise")?);
        }
        components.push(FactorAnalyzer {
            rotations,
            scale,
            mean,
            noise,
            weight,
        });
    }
    let labels = (0..n_v).map(|_| r.u32("labels")).collect::<Result<Vec<_>>>()?;
    let positions = (0..n_v).map(|_| r.vec3("positions")).collect::<Result<Vec<_>>>()?;
    let triangles = (0..n_t)
        .map(|_| Ok([r.u32("triangles")?, r.u32("triangles")?, r.u32("triangles")?]))
        .collect::<Result<Vec<_>>>()?;
    let residuals = (0..n_s)
        .map(|_| (0..n_v).map(|_| r.vec3("residuals")).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let log_likelihood_trace = (0..n_trace).map(|_| r.f64("trace")).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(Error::Artifact("trailing bytes after model".into()));
    }

    let model = PoseModel {
        components,
        latent: LatentShape { positions, labels },
        residuals,
        triangles,
        normalization: Normalization { offset, extent },
        log_likelihood_trace,
    };
    validate(&model)?;
    Ok(model)
}

fn validate<T: Real>(model: &PoseModel<T>) -> Result<()> {
    let n_v = model.n_vertices();
    if model.latent.labels.len() != n_v {
        return Err(Error::Artifact("label count differs from vertex count".into()));
    }
    if let Some(&l) = model.latent.labels.iter().find(|&&l| l >= model.n_parts()) {
        return Err(Error::Artifact(format!("label {l} but only {} parts", model.n_parts())));
    }
    if model.triangles.iter().flatten().any(|&v| v >= n_v) {
        return Err(Error::Artifact("triangle references a missing vertex".into()));
    }
    let n_s = model.n_shapes();
    if model.residuals.iter().any(|s| s.len() != n_v)
        || model
            .components
            .iter()
            .any(|fa| fa.rotations.len() != n_s || fa.mean.len() != n_s || fa.noise.len() != n_s)
    {
        return Err(Error::Artifact("inconsistent shape count".into()));
    }
    if !(model.normalization.extent > T::zero()) {
        return Err(Error::Artifact("normalization extent must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartRecord {
    weight: f64,
    scale: [f64; 3],
    /// Row-major, one per shape.
    rotations: Vec<[[f64; 3]; 3]>,
    means: Vec<[f64; 3]>,
    noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u32,
    normalization_offset: [f64; 3],
    normalization_extent: f64,
    parts: Vec<PartRecord>,
    labels: Vec<usize>,
    reference: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    residuals: Vec<Vec<[f64; 3]>>,
    log_likelihood_trace: Vec<f64>,
}

fn arr<T: Real>(v: &Vector3<T>) -> [f64; 3] {
    [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()]
}

fn vec3<T: Real>(a: &[f64; 3]) -> Vector3<T> {
    Vector3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]))
}

pub fn to_json<T: Real>(model: &PoseModel<T>) -> Result<String> {
    let record = ModelRecord {
        format: "pose-mfa-model".into(),
        version: VERSION,
        normalization_offset: arr(&model.normalization.offset),
        normalization_extent: model.normalization.extent.as_f64(),
        parts: model
            .components
            .iter()
            .map(|fa| PartRecord {
                weight: fa.weight.as_f64(),
                scale: arr(&fa.scale),
                rotations: fa
                    .rotations
                    .iter()
                    .map(|r| std::array::from_fn(|row| std::array::from_fn(|col| r[(row, col)].as_f64())))
                    .collect(),
                means: fa.mean.iter().map(arr).collect(),
                noise: fa.noise.iter().map(|s| s.as_f64()).collect(),
            })
            .collect(),
        labels: model.latent.labels.clone(),
        reference: model.latent.positions.iter().map(arr).collect(),
        triangles: model.triangles.clone(),
        residuals: model
            .residuals
            .iter()
            .map(|s| s.iter().map(arr).collect())
            .collect(),
        log_likelihood_trace: model.log_likelihood_trace.iter().map(|l| l.as_f64()).collect(),
    };
    Ok(serde_json::to_string_pretty(&record)?)
}

pub fn from_json<T: Real>(text: &str) -> Result<PoseModel<T>> {
    let record: ModelRecord = serde_json::from_str(text)?;
    if record.version != VERSION {
        return Err(Error::Artifact(format!("unsupported version {}", record.version)));
    }
    let model = PoseModel {
        components: record
            .parts
            .iter()
            .map(|p| FactorAnalyzer {
                rotations: p
                    .rotations
                    .iter()
                    .map(|r| Matrix3::from_fn(|row, col| T::lit(r[row][col])))
                    .collect(),
                scale: vec3(&p.scale),
                mean: p.means.iter().map(vec3).collect(),
                noise: p.noise.iter().map(|&s| T::lit(s)).collect(),
                weight: T::lit(p.weight),
            })
            .collect(),
        latent: LatentShape {
            positions: record.reference.iter().map(vec3).collect(),
            labels: record.labels,
        },
        residuals: record
            .residuals
            .iter()
            .map(|s| s.iter().map(vec3).collect())
            .collect(),
        triangles: record.triangles,
        normalization: Normalization {
            offset: vec3(&record.normalization_offset),
            extent: T::lit(record.normalization_extent),
        },
        log_likelihood_trace: record.log_likelihood_trace.iter().map(|&l| T::lit(l)).collect(),
    };
    validate(&model)?;
    Ok(model)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Saves as JSON when the path ends in `.json`, binary otherwise.
pub fn save_model<T: Real>(model: &PoseModel<T>, path: &Path) -> Result<()> {
    if is_json(path) {
        std::fs::write(path, to_json(model)?)?;
        Ok(())
    } else {
        write_binary(model, BufWriter::new(File::create(path)?))
    }
}

pub fn load_model<T: Real>(path: &Path) -> Result<PoseModel<T>> {
    if is_json(path) {
        from_json(&std::fs::read_to_string(path)?)
    } else {
        read_binary(BufReader::new(File::open(path)?))
    }
}
