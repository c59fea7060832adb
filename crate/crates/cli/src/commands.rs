use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use nalgebra::{Matrix3, Vector3};
use pose_mfa::artifact::{load_model, save_model};
use pose_mfa::hierarchy::{hierarchical_fit, RefinementReport};
use pose_mfa::interpolation::interpolate_pose;
use pose_mfa::mesh::{load_sequence, normalize_unit_box, write_labeled_mesh, write_labels, write_obj};
use pose_mfa::synthetic::{generate_chain, ChainSpec};
use pose_mfa::{Mesh64, PoseModel64};
use serde::Serialize;
use serde_json::json;

use crate::config::{ArtifactFormat, Config};
use crate::manifest::Manifest;

const BINARY_MODEL: &str = "model.pmfa";
const JSON_MODEL: &str = "model.json";
const REFINEMENT: &str = "refinement.json";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn shape_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("shape_{:02}.obj", i + 1))
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
}

fn xyz(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Expands a single directory argument into its `.obj` files, sorted by name.
fn mesh_paths(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    if let [dir] = inputs {
        if dir.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
                .collect();
            paths.sort();
            return Ok(paths);
        }
    }
    Ok(inputs.to_vec())
}

fn model_path(config: &Config, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let binary = config.out.join(BINARY_MODEL);
    let json = config.out.join(JSON_MODEL);
    if !binary.exists() && json.exists() {
        json
    } else {
        binary
    }
}

fn open_model(path: &Path) -> anyhow::Result<PoseModel64> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn generate(
    config: &Config,
    mut spec: ChainSpec,
    noise: Option<f64>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    if let Some(sigma) = noise {
        spec = spec.with_noise(sigma);
    }
    if let Some(seed) = seed {
        spec = spec.with_seed(seed);
    }
    let mut manifest = Manifest::start("generate", config);
    let (set, truth) = manifest.time("generate", || generate_chain::<f64>(&spec))?;
    create_dir(&config.out)?;
    for i in 0..set.n_shapes() {
        let path = shape_file(&config.out, i);
        write_obj(&set.mesh(i), &path)?;
        manifest.output(&path);
    }
    let labels = config.out.join("truth.labels");
    write_labels(&truth.labels, &labels)?;
    manifest.output(&labels);

    let truth_json = json!({
        "spec": spec,
        "labels": truth.labels,
        "rest": truth.rest.iter().map(xyz).collect::<Vec<_>>(),
        "rotations": truth.rotations.iter()
            .map(|part| part.iter().map(rows).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "translations": truth.translations.iter()
            .map(|part| part.iter().map(xyz).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    });
    let path = config.out.join("ground_truth.json");
    write_json(&truth_json, &path)?;
    manifest.output(&path);
    info!("wrote {} shapes to {}", set.n_shapes(), config.out.display());
    manifest.write(&config.out)?;
    Ok(())
}

pub fn train(config: &Config, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let paths = mesh_paths(inputs)?;
    let mut manifest = Manifest::start("train", config);
    manifest.inputs = paths.clone();

    let raw = manifest.time("load", || load_sequence::<f64, _>(&paths))?;
    let set = normalize_unit_box(&raw)?;
    info!("{} shapes, {} vertices", set.n_shapes(), set.n_vertices());

    let (fit, report) = manifest
        .time("fit", || hierarchical_fit(&set, config.m_init, &config.hierarchy()))
        .context("fitting the mixture")?;
    let model = PoseModel64::from_fit(&set, &fit)?;
    info!(
        "{} coarse parts refined to {}",
        report.initial_components, report.final_components
    );

    create_dir(&config.out)?;
    let artifact = config.out.join(match config.artifact_format {
        ArtifactFormat::Binary => BINARY_MODEL,
        ArtifactFormat::Json => JSON_MODEL,
    });
    manifest.time("save", || save_model(&model, &artifact))?;
    manifest.output(&artifact);

    let reference = config.out.join("reference.obj");
    write_labeled_mesh(&model.reference_mesh(), model.labels(), &reference)?;
    manifest.output(&reference);

    let refinement = config.out.join(REFINEMENT);
    write_json(&report, &refinement)?;
    manifest.output(&refinement);

    let mut csv = String::from("iteration,log_likelihood\n");
    let _ = writeln!(csv, "0,{}", fit.initial_log_likelihood);
    for (k, l) in fit.log_likelihood_trace.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", k + 1);
    }
    let trace = config.out.join("loglik.csv");
    fs::write(&trace, csv)?;
    manifest.output(&trace);

    manifest.write(&config.out)?;
    Ok(())
}

pub fn segment(config: &Config, model: Option<&Path>) -> anyhow::Result<()> {
    let path = model_path(config, model);
    let mut manifest = Manifest::start("segment", config);
    manifest.inputs.push(path.clone());
    let model = open_model(&path)?;
    let dir = config.out.join("segment");
    create_dir(&dir)?;
    for i in 0..model.n_shapes() {
        let shape = Mesh64 {
            vertices: model.training_shape(i)?,
            triangles: model.triangles.clone(),
        };
        let file = shape_file(&dir, i);
        write_labeled_mesh(&model.denormalize(&shape), model.labels(), &file)?;
        manifest.output(&file);
    }
    manifest.write(&config.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ShapeError {
    shape: usize,
    file: PathBuf,
    rms: f64,
    max: f64,
    /// RMS error of each part's vertices.
    part_rms: Vec<f64>,
}

pub fn reconstruct(config: &Config, model: Option<&Path>) -> anyhow::Result<()> {
    let path = model_path(config, model);
    let mut manifest = Manifest::start("reconstruct", config);
    manifest.inputs.push(path.clone());
    let model = open_model(&path)?;
    let dir = config.out.join("reconstruct");
    create_dir(&dir)?;

    // errors are reported in original mesh units
    let extent = model.normalization.extent;
    let labels = model.labels();
    let mut shapes = Vec::with_capacity(model.n_shapes());
    for i in 0..model.n_shapes() {
        let rebuilt = model.reconstruct(i)?;
        let file = shape_file(&dir, i);
        write_obj(&model.denormalize(&rebuilt), &file)?;
        manifest.output(&file);

        let mut part_sq = vec![(0.0, 0usize); model.n_parts()];
        let (mut total, mut max) = (0.0, 0.0f64);
        for (e, &k) in model.residuals[i].iter().zip(labels) {
            let d2 = e.norm_squared() * extent * extent;
            total += d2;
            max = max.max(d2.sqrt());
            part_sq[k].0 += d2;
            part_sq[k].1 += 1;
        }
        shapes.push(ShapeError {
            shape: i + 1,
            file,
            rms: (total / labels.len() as f64).sqrt(),
            max,
            part_rms: part_sq
                .iter()
                .map(|&(s, n)| if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
                .collect(),
        });
    }
    let metrics = config.out.join("reconstruct_metrics.json");
    write_json(&json!({ "shapes": shapes }), &metrics)?;
    manifest.output(&metrics);
    manifest.write(&config.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct JointMetric {
    parts: (usize, usize),
    residual: f64,
    in_tree: bool,
}

#[derive(Debug, Serialize)]
struct BlendMetric {
    t: f64,
    file: PathBuf,
    roots: Vec<usize>,
    max_tree_joint_residual: f64,
    joints: Vec<JointMetric>,
    /// Rotation angle between the two endpoint poses of each part, degrees.
    part_angles_deg: Vec<f64>,
}

pub fn interpolate(
    config: &Config,
    model: Option<&Path>,
    (a, b): (usize, usize),
    ts: &[f64],
) -> anyhow::Result<()> {
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        bail!("t = {t} is outside [0, 1]");
    }
    let path = model_path(config, model);
    let model = open_model(&path)?;
    let n = model.n_shapes();
    for s in [a, b] {
        if s > n {
            bail!("shape {s} is out of range (the model has {n} shapes)");
        }
    }
    if ts.is_empty() {
        info!("no blend weights given, nothing to write");
        return Ok(());
    }

    let mut manifest = Manifest::start("interpolate", config);
    manifest.inputs.push(path);
    let graph = model.part_graph(config.joint_point_mode)?;
    if let Err(e) = graph.require_connected() {
        log::warn!("{e}; each connected group of parts is posed on its own");
    }
    let dir = config.out.join("interpolate");
    create_dir(&dir)?;
    let (i, j) = (a - 1, b - 1);
    let mut blends = Vec::with_capacity(ts.len());
    for (k, &t) in ts.iter().enumerate() {
        let (blend, mesh) = manifest.time("blend", || interpolate_pose(&model, &graph, i, j, t))?;
        let file = dir.join(format!("interp_{a}_{b}_{k:03}.obj"));
        write_obj(&mesh, &file)?;
        manifest.output(&file);
        let joints = graph
            .edges
            .iter()
            .zip(&blend.joint_residuals)
            .map(|(e, &r)| {
                let (p, c) = e.parts;
                JointMetric {
                    parts: e.parts,
                    residual: r,
                    in_tree: blend.parent[c] == Some(p) || blend.parent[p] == Some(c),
                }
            })
            .collect();
        blends.push(BlendMetric {
            t,
            file,
            roots: blend.roots.clone(),
            max_tree_joint_residual: blend.max_tree_joint_residual(&graph),
            joints,
            part_angles_deg: blend.part_angles.iter().map(|x| x.to_degrees()).collect(),
        });
    }
    let metrics = config.out.join("interpolate_metrics.json");
    write_json(
        &json!({ "source": a, "target": b, "joint_point_mode": config.joint_point_mode, "blends": blends }),
        &metrics,
    )?;
    manifest.output(&metrics);
    manifest.write(&config.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PartSummary {
    part: usize,
    vertices: usize,
    weight: f64,
    scale: [f64; 3],
    /// Mean per-coordinate residual variance, normalized units.
    mean_noise: f64,
}

pub fn report(config: &Config, model: Option<&Path>) -> anyhow::Result<()> {
    let path = model_path(config, model);
    let mut manifest = Manifest::start("report", config);
    manifest.inputs.push(path.clone());
    let model = open_model(&path)?;

    let mut sizes = vec![0usize; model.n_parts()];
    for &l in model.labels() {
        sizes[l] += 1;
    }
    let parts: Vec<PartSummary> = model
        .components
        .iter()
        .enumerate()
        .map(|(k, fa)| PartSummary {
            part: k,
            vertices: sizes[k],
            weight: fa.weight,
            scale: xyz(&fa.scale),
            mean_noise: fa.mean_noise(),
        })
        .collect();
    let graph = model.part_graph(config.joint_point_mode)?;

    // the refinement report sits next to the artifact when train wrote it
    let refinement_file = path.with_file_name(REFINEMENT);
    let refinement: Option<RefinementReport> = match fs::read_to_string(&refinement_file) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", refinement_file.display()))?,
        ),
        Err(_) => None,
    };

    let summary = json!({
        "model": path,
        "n_parts": model.n_parts(),
        "n_shapes": model.n_shapes(),
        "n_vertices": model.n_vertices(),
        "n_triangles": model.triangles.len(),
        "iterations": model.log_likelihood_trace.len(),
        "log_likelihood": model.log_likelihood_trace.last(),
        "adjacent_part_pairs": graph.edges.iter().map(|e| e.parts).collect::<Vec<_>>(),
        "isolated_parts": graph.isolated_parts(),
        "parts": parts,
        "refinement": refinement,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    create_dir(&config.out)?;
    let out = config.out.join("report.json");
    write_json(&summary, &out)?;
    manifest.output(&out);
    manifest.write(&config.out)?;
    Ok(())
}
