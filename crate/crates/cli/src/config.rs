use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pose_mfa::hierarchy::HierarchyConfig;
use pose_mfa::interpolation::JointPointMode;
use pose_mfa::mfa::{AecmConfig, ScaleUpdate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactFormat {
    #[default]
    Binary,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AecmSection {
    pub max_iter: usize,
    pub tol: f64,
    pub noise_floor: f64,
    pub empty_fraction: f64,
    pub scale_update: ScaleUpdate,
}

impl Default for AecmSection {
    fn default() -> Self {
        let d = AecmConfig::default();
        Self {
            max_iter: d.max_iter,
            tol: d.tol,
            noise_floor: d.noise_floor,
            empty_fraction: d.empty_fraction,
            scale_update: d.scale_update,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSection {
    pub err_threshold: f64,
    pub plateau: f64,
    pub max_split: usize,
}

impl Default for RefinementSection {
    fn default() -> Self {
        let d = HierarchyConfig::default();
        Self {
            err_threshold: d.err_threshold,
            plateau: d.plateau,
            max_split: d.max_split,
        }
    }
}

/// Everything that influences a run. Loaded from TOML; command-line flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub m_init: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub joint_point_mode: JointPointMode,
    pub artifact_format: ArtifactFormat,
    pub aecm: AecmSection,
    pub refinement: RefinementSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            m_init: 1,
            seed: 0,
            out: PathBuf::from("out"),
            joint_point_mode: JointPointMode::default(),
            artifact_format: ArtifactFormat::default(),
            aecm: AecmSection::default(),
            refinement: RefinementSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let positive = [
            ("aecm.tol", self.aecm.tol),
            ("aecm.noise_floor", self.aecm.noise_floor),
            ("aecm.empty_fraction", self.aecm.empty_fraction),
            ("refinement.err_threshold", self.refinement.err_threshold),
            ("refinement.plateau", self.refinement.plateau),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                bail!("{name} must be a positive number, got {value}");
            }
        }
        if self.m_init == 0 {
            bail!("m_init must be at least 1");
        }
        if self.aecm.max_iter == 0 {
            bail!("aecm.max_iter must be at least 1");
        }
        if self.refinement.max_split == 0 {
            bail!("refinement.max_split must be at least 1");
        }
        Ok(())
    }

    pub fn aecm(&self) -> AecmConfig {
        AecmConfig {
            max_iter: self.aecm.max_iter,
            tol: self.aecm.tol,
            noise_floor: self.aecm.noise_floor,
            empty_fraction: self.aecm.empty_fraction,
            scale_update: self.aecm.scale_update,
        }
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            aecm: self.aecm(),
            err_threshold: self.refinement.err_threshold,
            plateau: self.refinement.plateau,
            max_split: self.refinement.max_split,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sections_and_enums_parse() {
        let c: Config = toml::from_str(
            r#"
            m_init = 11
            joint_point_mode = "centroid_mean"
            artifact_format = "json"
            [aecm]
            tol = 1e-6
            scale_update = "eigenvalue"
            [refinement]
            max_split = 4
            "#,
        )
        .unwrap();
        assert_eq!(c.m_init, 11);
        assert_eq!(c.joint_point_mode, JointPointMode::CentroidMean);
        assert_eq!(c.artifact_format, ArtifactFormat::Json);
        assert_eq!(c.aecm.scale_update, ScaleUpdate::Eigenvalue);
        assert_eq!(c.aecm.max_iter, 200);
        assert_eq!(c.hierarchy().max_split, 4);
        assert_eq!(c.aecm().tol, 1e-6);
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(toml::from_str::<Config>("m_int = 3").is_err());
        let c: Config = toml::from_str("[aecm]\ntol = 0.0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
