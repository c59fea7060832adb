use nalgebra::{Matrix3, Vector3};
use pose_mfa::mesh::{assemble_data, normalize_unit_box};
use pose_mfa::mfa::{
    aecm_fit, component_log_density, log_likelihood, AecmConfig, FactorAnalyzer, Init,
};
use pose_mfa::synthetic::{generate_chain, ChainSpec, PartSpec};
use pose_mfa::DataVector64;
use proptest::prelude::*;

fn chain_data(spec: &ChainSpec) -> (Vec<DataVector64>, Vec<usize>) {
    let (raw, truth) = generate_chain::<f64>(spec).unwrap();
    let set = normalize_unit_box(&raw).unwrap();
    (assemble_data(&set), truth.labels)
}

fn rigid_box() -> ChainSpec {
    ChainSpec {
        parts: vec![PartSpec {
            size: [1.0, 0.4, 0.25],
            vertices: 48,
        }],
        joints: vec![],
        poses: 4,
        noise_sigma: 0.0,
        seed: 3,
    }
}

/// Ground-truth labels give the same partition as `labels`, up to renaming.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut inv = std::collections::HashMap::new();
    a.iter().zip(b).all(|(x, y)| *map.entry(x).or_insert(y) == y && *inv.entry(y).or_insert(x) == x)
}

#[test]
fn single_rigid_part_converges_fast_with_vanishing_noise() {
    let (data, _) = chain_data(&rigid_box());
    let fit = aecm_fit(&data, &Init::KMeans { components: 1, seed: 0 }, &AecmConfig::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.iterations() <= 20, "{} iterations", fit.iterations());
    let fa = &fit.components[0];
    assert!(fa.noise_trace() / (3.0 * fa.n_shapes() as f64) < 1e-6);
    assert!(fit.labels.iter().all(|&l| l == 0));
}

#[test]
fn ground_truth_labels_are_a_fixed_point() {
    let (data, labels) = chain_data(&ChainSpec::three_part_chain());
    let fit = aecm_fit(&data, &Init::Labels(labels.clone()), &AecmConfig::default()).unwrap();
    assert_eq!(fit.n_components(), 3);
    assert_eq!(fit.labels, labels);
}

#[test]
fn one_iteration_when_capped() {
    let (data, labels) = chain_data(&ChainSpec::three_part_chain());
    let config = AecmConfig {
        max_iter: 1,
        tol: 0.0,
        ..AecmConfig::default()
    };
    let fit = aecm_fit(&data, &Init::Labels(labels), &config).unwrap();
    assert_eq!(fit.iterations(), 1);
    assert_eq!(fit.log_likelihood_trace.len(), 1);
    assert!(!fit.converged);
}

#[test]
fn fitted_rotations_are_proper() {
    let (data, _) = chain_data(&ChainSpec::three_part_chain());
    let fit = aecm_fit(&data, &Init::KMeans { components: 3, seed: 11 }, &AecmConfig::default()).unwrap();
    for fa in &fit.components {
        for r in &fa.rotations {
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
        assert!(fa.scale.iter().all(|&l| l >= 0.0));
        assert!(fa.noise.iter().all(|&s| s > 0.0));
    }
    let total: f64 = fit.components.iter().map(|fa| fa.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let reported = fit.log_likelihood();
    assert!((log_likelihood(&data, &fit.components).unwrap() - reported).abs() < 1e-9 * reported.abs());
}

#[test]
fn density_is_invariant_under_latent_sign_gauge() {
    let (data, labels) = chain_data(&ChainSpec::three_part_chain());
    let fit = aecm_fit(&data, &Init::Labels(labels), &AecmConfig::default()).unwrap();
    let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
    for fa in &fit.components {
        let flipped = FactorAnalyzer {
            rotations: fa.rotations.iter().map(|r| r * flip).collect(),
            ..fa.clone()
        };
        for h in data.iter().step_by(7) {
            let a = component_log_density(h, fa).unwrap();
            let b = component_log_density(h, &flipped).unwrap();
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }
}

#[test]
fn too_many_components_for_the_data_is_an_input_error() {
    let (data, _) = chain_data(&rigid_box());
    let err = aecm_fit(&data[..2], &Init::KMeans { components: 3, seed: 0 }, &AecmConfig::default());
    assert!(matches!(err, Err(pose_mfa::Error::InvalidArgument(_))));
}

#[test]
fn explicit_responsibilities_start_and_labels_agree() {
    let (data, labels) = chain_data(&ChainSpec::three_part_chain());
    let gamma = pose_mfa::mfa::one_hot::<f64>(&labels, 3);
    let a = aecm_fit(&data, &Init::Responsibilities(gamma), &AecmConfig::default()).unwrap();
    let b = aecm_fit(&data, &Init::Labels(labels), &AecmConfig::default()).unwrap();
    assert_eq!(a.log_likelihood_trace, b.log_likelihood_trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn log_likelihood_never_decreases(
        seed in 0u64..1000,
        m in 1usize..5,
        noise in 0.0005f64..0.02,
        bend in 0.2f64..1.2,
    ) {
        let mut spec = ChainSpec::three_part_chain().with_noise(noise).with_seed(seed);
        for angle in spec.joints[0].angles.iter_mut() {
            *angle *= bend;
        }
        let (data, _) = chain_data(&spec);
        let fit = aecm_fit(&data, &Init::KMeans { components: m, seed }, &AecmConfig::default()).unwrap();
        let mut prev = fit.initial_log_likelihood;
        for &l in &fit.log_likelihood_trace {
            prop_assert!(l >= prev - 1e-8 * prev.abs().max(1.0), "{} after {}", l, prev);
            prev = l;
        }
    }

    #[test]
    fn three_part_chain_is_recovered_from_kmeans(seed in 0u64..500) {
        let (data, labels) = chain_data(&ChainSpec::three_part_chain().with_seed(seed));
        let fit = aecm_fit(&data, &Init::KMeans { components: 3, seed }, &AecmConfig::default()).unwrap();
        prop_assert!(same_partition(&fit.labels, &labels));
    }
}
