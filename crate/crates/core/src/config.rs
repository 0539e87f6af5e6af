//! Experiment configuration: one JSON document describing data, model, loss and training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{BoundaryMode, ModelConfig};
use crate::trainer::{BoundarySource, TrainerConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    /// load images from here instead of generating them from `scene`
    pub data_dir: Option<PathBuf>,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: SceneConfig::default(),
            n_train: 320,
            n_val: 64,
            data_dir: None,
            label_fraction: 0.125,
            split_seed: 0,
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            output_dir: None,
        }
    }
}

/// Which boundary components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Components {
    pub bcrm: bool,
    pub bsf: bool,
    pub sgf: bool,
}

impl Components {
    /// Parse `bcrm,bsf,sgf`; the empty string means none.
    pub fn parse(list: &str) -> Result<Self> {
        let mut c = Components::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "bcrm" => c.bcrm = true,
                "bsf" => c.bsf = true,
                "sgf" => c.sgf = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown component '{other}'; valid components: bcrm, bsf, sgf"
                    )))
                }
            }
        }
        if (c.bsf || c.sgf) && !c.bcrm {
            return Err(Error::Config(
                "bsf and sgf fuse boundary predictions and need the boundary head: add bcrm".into(),
            ));
        }
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} differs from scene.num_classes {}",
                self.model.num_classes, self.scene.num_classes
            )));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        Ok(())
    }

    pub fn components(&self) -> Components {
        Components {
            bcrm: self.model.boundary_mode != BoundaryMode::None,
            bsf: self.model.use_bsf,
            sgf: self.model.use_sgf,
        }
    }

    /// Switch components; a head that was off comes back in semantic mode.
    pub fn set_components(&mut self, c: Components) {
        self.model.boundary_mode = match (c.bcrm, self.model.boundary_mode) {
            (false, _) => BoundaryMode::None,
            (true, BoundaryMode::None) => BoundaryMode::Semantic,
            (true, m) => m,
        };
        self.model.use_bsf = c.bsf;
        self.model.use_sgf = c.sgf;
    }

    /// Load `data_dir` or generate the synthetic dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(d) => Dataset::load(d),
            None => Dataset::generate(&self.scene, self.n_train, self.n_val),
        }
    }
}

/// One arm of an ablation: overrides applied to a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    /// comma separated subset of `bcrm,bsf,sgf`
    #[serde(default)]
    pub components: String,
    #[serde(default)]
    pub boundary: Option<BoundaryMode>,
    #[serde(default)]
    pub boundary_source: Option<BoundarySource>,
    #[serde(default)]
    pub hbn: Option<bool>,
    #[serde(default)]
    pub semi_supervised: Option<bool>,
}

impl Arm {
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.set_components(Components::parse(&self.components)?);
        if let Some(b) = self.boundary {
            if cfg.model.boundary_mode != BoundaryMode::None {
                cfg.model.boundary_mode = b;
            }
        }
        if let Some(s) = self.boundary_source {
            cfg.trainer.boundary_source = s;
        }
        if let Some(h) = self.hbn {
            cfg.trainer.hbn = h;
        }
        if let Some(s) = self.semi_supervised {
            cfg.trainer.semi_supervised = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The component grid: SAMTH, +BCRM, +BCRM+BSF, +BCRM+SGF and the full method.
    pub fn component_grid() -> Vec<Arm> {
        [
            ("samth", ""),
            ("bcrm", "bcrm"),
            ("bcrm_bsf", "bcrm,bsf"),
            ("bcrm_sgf", "bcrm,sgf"),
            ("boundmatch", "bcrm,bsf,sgf"),
        ]
        .into_iter()
        .map(|(name, c)| Arm {
            name: name.into(),
            components: c.into(),
            boundary: None,
            boundary_source: None,
            hbn: None,
            semi_supervised: None,
        })
        .collect()
    }
}
