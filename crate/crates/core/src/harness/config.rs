use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datahub::{load_cifar10_limited, load_image_folder, make_splits, synth_dataset, ImageDataset, SplitSpec, Splits};
use crate::defenselosses::Perturbation;
use crate::error::{invalid, Error, Result};
use crate::infometrics::MineConfig;
use crate::inversion::{AttackJob, DecoderConfig};
use crate::splitmodels::{BackboneConfig, BackboneKind, DefenseSpec};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "SIFTFUNNEL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { n: usize, classes: usize, seed: u64 },
    Cifar10 { root: PathBuf, limit: Option<usize> },
    ImageFolder { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub resolution: (usize, usize),
    pub split: SplitSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic { n: 2000, classes: 10, seed: 0 },
            resolution: (32, 32),
            split: SplitSpec { train_frac: 0.666, test_frac: 0.167, attacker_frac: 0.167, seed: 0 },
        }
    }
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match &self.source {
            DataSource::Synthetic { n, .. } => format!("synthetic-{n}"),
            DataSource::Cifar10 { .. } => "cifar10".into(),
            DataSource::ImageFolder { root } => root.file_name().map_or("folder".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn load(&self) -> Result<ImageDataset> {
        match &self.source {
            DataSource::Synthetic { n, classes, seed } => synth_dataset(*n, self.resolution, *classes, *seed),
            DataSource::Cifar10 { root, limit } => load_cifar10_limited(root, self.resolution, *limit),
            DataSource::ImageFolder { root } => Ok(load_image_folder(root, self.resolution)?.0),
        }
    }
}

/// The defense applied to the target model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    /// Gaussian noise on transmitted features, at inference.
    Noise {
        sigma: f64,
    },
    /// Random feature dropout, at inference.
    Drop {
        rate: f64,
    },
    /// Training with negative label smoothing.
    Nls {
        alpha: f64,
    },
    Siftfunnel(DefenseSpec),
}

impl DefenseConfig {
    pub fn name(&self) -> String {
        match self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::Noise { sigma } => format!("noise_{sigma}"),
            DefenseConfig::Drop { rate } => format!("drop_{rate}"),
            DefenseConfig::Nls { alpha } => format!("nls_{alpha}"),
            DefenseConfig::Siftfunnel(_) => "siftfunnel".into(),
        }
    }

    pub fn perturbation(&self) -> Option<Perturbation> {
        match *self {
            DefenseConfig::Noise { sigma } => Some(Perturbation::Gaussian { sigma }),
            DefenseConfig::Drop { rate } => Some(Perturbation::Drop { rate }),
            _ => None,
        }
    }

    pub fn spec(&self) -> Option<&DefenseSpec> {
        match self {
            DefenseConfig::Siftfunnel(s) => Some(s),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseConfig::Noise { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => invalid("noise sigma must be ≥ 0"),
            DefenseConfig::Drop { rate } if !(0.0..=1.0).contains(rate) => invalid("drop rate must lie in [0, 1]"),
            DefenseConfig::Nls { alpha } if !(-1.0..1.0).contains(alpha) => invalid("nls alpha must lie in (-1, 1)"),
            DefenseConfig::Siftfunnel(s) => s.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, lr: 2e-4, beta1: 0.5, plateau_factor: 0.5, plateau_patience: 25 }
    }
}

/// One attack in the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AttackSpec {
    Mle(AttackJob),
    Gen(DecoderConfig),
}

impl AttackSpec {
    pub fn label(&self) -> String {
        match self {
            AttackSpec::Mle(j) => format!("mle-{}-{}", j.scenario.name(), tap_name(j.tap_point)),
            AttackSpec::Gen(d) => format!("gen-{}-{}", d.scenario.name(), tap_name(d.tap_point)),
        }
    }
}

pub(crate) fn tap_name(t: crate::splitmodels::TapPoint) -> &'static str {
    match t {
        crate::splitmodels::TapPoint::EdgeOutput => "edge_output",
        crate::splitmodels::TapPoint::PostCompensation => "post_compensation",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test images reconstructed by decoder attacks.
    pub gen_images: usize,
    /// Test images reconstructed by gradient attacks.
    pub mle_images: usize,
    /// Images in each PNG mosaic.
    pub mosaic_images: usize,
    /// Test images fed to MINE; 0 skips the estimate.
    pub mi_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gen_images: 256, mle_images: 32, mosaic_images: 8, mi_images: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub backbone: String,
    pub width: f64,
    /// Split point in the backbone; `None` uses the backbone default.
    pub split_point: Option<String>,
    pub defense: DefenseConfig,
    pub training: TrainingConfig,
    pub attacks: Vec<AttackSpec>,
    pub mine: MineConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: DatasetSpec::default(),
            backbone: "base_cnn".into(),
            width: 0.125,
            split_point: None,
            defense: DefenseConfig::None,
            training: TrainingConfig::default(),
            attacks: Vec::new(),
            mine: MineConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        BackboneKind::parse(&self.backbone)?;
        self.dataset.split.validate()?;
        self.defense.validate()?;
        self.mine.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
            return invalid("training needs epochs ≥ 1, batch size ≥ 1 and a positive learning rate");
        }
        for a in &self.attacks {
            match a {
                AttackSpec::Mle(j) => j.validate()?,
                AttackSpec::Gen(d) => d.validate()?,
            }
        }
        Ok(())
    }

    /// Output root, honouring [`OUTPUT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn backbone_config(&self, classes: usize, seed: u64) -> Result<BackboneConfig> {
        Ok(BackboneConfig::new(BackboneKind::parse(&self.backbone)?, classes, self.dataset.resolution)
            .with_width(self.width)
            .with_seed(seed))
    }

    pub fn split_point(&self) -> Result<String> {
        Ok(match &self.split_point {
            Some(s) => s.clone(),
            None => BackboneKind::parse(&self.backbone)?.default_split().into(),
        })
    }
}

/// A loaded dataset and its three splits.
pub struct PreparedData {
    pub name: String,
    pub splits: Splits,
}

pub fn prepare_data(spec: &DatasetSpec) -> Result<PreparedData> {
    let ds = spec.load()?;
    let splits = make_splits(&ds, &spec.split)?;
    Ok(PreparedData { name: spec.name(), splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let text = r#"
            name = "demo"
            backbone = "base_cnn"
            seeds = [1, 2]

            [defense]
            kind = "siftfunnel"
            lambda2 = 0.5

            [[attacks]]
            family = "gen"
            scenario = "gray_box"
            epochs = 3

            [[attacks]]
            family = "mle"
            steps = 10
            tv_weight = 0.05
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.training.epochs, 20);
        assert_eq!(cfg.defense.spec().unwrap().lambda2, 0.5);
        assert_eq!(cfg.defense.spec().unwrap().lambda1, DefenseSpec::default().lambda1);
        assert_eq!(cfg.attacks[0].label(), "gen-gray_box-edge_output");
        assert_eq!(cfg.attacks.len(), 2);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("backbone = \"vgg\"").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[defense]\nkind = \"drop\"\nrate = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("[[attacks]]\nfamily = \"mle\"\nsteps = 0").is_err());
    }
}
