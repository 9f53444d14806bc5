use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::datagen::{make_splits, DatasetBundle, DomainSpec, SplitPlan};
use crate::models::ModelConfig;
use crate::trainer::TrainConfig;
use crate::Error;

/// Name of the resolved-config snapshot inside a run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Overrides for one [`DomainSpec`]; omitted fields keep the domain's
/// built-in default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub palette: Option<Vec<[f64; 3]>>,
    pub palette_hue_shift: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub shape_scale_range: Option<(f64, f64)>,
    pub class_frequency: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl DomainSection {
    pub fn apply(&self, mut base: DomainSpec) -> DomainSpec {
        if let Some(p) = &self.palette {
            base.palette = p.clone();
        }
        if let Some(v) = self.palette_hue_shift {
            base.palette_hue_shift = v;
        }
        if let Some(v) = self.noise_sigma {
            base.noise_sigma = v;
        }
        if let Some(v) = self.shape_scale_range {
            base.shape_scale_range = v;
        }
        if let Some(v) = &self.class_frequency {
            base.class_frequency = v.clone();
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        base
    }

    fn full(spec: &DomainSpec) -> Self {
        DomainSection {
            palette: Some(spec.palette.clone()),
            palette_hue_shift: Some(spec.palette_hue_shift),
            noise_sigma: Some(spec.noise_sigma),
            shape_scale_range: Some(spec.shape_scale_range),
            class_frequency: Some(spec.class_frequency.clone()),
            seed: Some(spec.seed),
        }
    }
}

/// The benchmark: two domains, the split sizes and the image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Defaults to [`DomainSpec::toy_source`].
    pub source: DomainSection,
    /// Defaults to [`DomainSpec::toy_target`].
    pub target: DomainSection,
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    /// Labeled plus unlabeled target training images.
    pub n_target_train: usize,
    /// How many of the target training images keep their labels.
    pub labeled_budget: usize,
    pub n_target_val: usize,
    /// Seed of the target shuffle that picks the labeled subset.
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DomainSection::default(),
            target: DomainSection::default(),
            height: 48,
            width: 48,
            n_source: 400,
            n_target_train: 200,
            labeled_budget: 20,
            n_target_val: 100,
            split_seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn source_spec(&self) -> DomainSpec {
        self.source.apply(DomainSpec::toy_source())
    }

    pub fn target_spec(&self) -> DomainSpec {
        self.target.apply(DomainSpec::toy_target())
    }

    pub fn split_plan(&self) -> Result<SplitPlan> {
        if self.labeled_budget > self.n_target_train {
            return Err(Error::Config(format!(
                "labeled budget {} exceeds the {} target training images",
                self.labeled_budget, self.n_target_train
            ))
            .into());
        }
        Ok(SplitPlan {
            n_source: self.n_source,
            n_target_labeled: self.labeled_budget,
            n_target_unlabeled: self.n_target_train - self.labeled_budget,
            n_target_val: self.n_target_val,
            seed: self.split_seed,
        })
    }

    pub fn build(&self) -> Result<DatasetBundle> {
        let bundle = make_splits(&self.split_plan()?, &self.source_spec(), &self.target_spec(), (self.height, self.width))
            .map_err(config_error)?;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory of the run; defaults to `<run root>/<mode>-b<budget>-seed<seed>`.
    pub run_dir: Option<PathBuf>,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub output: OutputSection,
}

/// Invalid-argument style library errors count as configuration problems.
fn config_error(e: Error) -> anyhow::Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m).into(),
        other => other.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.source_spec().validate().map_err(config_error)?;
        self.dataset.target_spec().validate().map_err(config_error)?;
        self.dataset.split_plan()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.dataset.source_spec().classes() != self.model.classes {
            return Err(Error::Config(format!(
                "the palette defines {} classes but the model has {}",
                self.dataset.source_spec().classes(),
                self.model.classes
            ))
            .into());
        }
        let s = self.model.stride;
        if self.dataset.height % s != 0 || self.dataset.width % s != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by the stride {s}",
                self.dataset.height, self.dataset.width
            ))
            .into());
        }
        self.training.check_budget(self.dataset.labeled_budget)?;
        Ok(())
    }

    /// Copy with every default written out, suitable for a snapshot.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.source = DomainSection::full(&self.dataset.source_spec());
        c.dataset.target = DomainSection::full(&self.dataset.target_spec());
        c.training = self.training.resolved();
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
