use std::path::Path;

use anyhow::{bail, Context};
use metadiag::data::SyntheticWorldConfig;
use metadiag::eval::PipelineConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, as one TOML document. Unknown keys are rejected
/// at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides both `data.world.rng_seed` and `pipeline.meta.seed`.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub grid: GridConfig,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: SyntheticWorldConfig,
    /// Units in a generated family (meta-training pool plus held-out units).
    pub family_units: usize,
    /// Tasks in a generated drifting sequence.
    pub sequence_tasks: usize,
    /// Mastery flip probability between consecutive sequence tasks.
    pub sequence_drift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            world: SyntheticWorldConfig::default(),
            family_units: 21,
            sequence_tasks: 4,
            sequence_drift: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<u32>,
    /// Head training steps per grid point (reduced from `pipeline.heads.steps`).
    pub steps: usize,
    /// Fraction of the support set held out to score each grid point.
    pub validation_fraction: f64,
}

fn tenths() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            eta: tenths(),
            lambda: tenths(),
            mu: vec![2, 3, 4],
            steps: 50,
            validation_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Meta-iterations between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            checkpoint_every: 100,
        }
    }
}

/// Command-line overrides; flags win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_ppm: bool,
    pub no_perclass: bool,
    pub no_meta: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies overrides, propagates the seed and validates.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(seed) = self.seed {
            self.data.world.rng_seed = seed;
            self.pipeline.meta.seed = seed;
        }
        if o.no_ppm {
            self.pipeline.use_ppm = false;
        }
        if o.no_perclass {
            self.pipeline.use_perclass = false;
        }
        if o.no_meta {
            self.pipeline.use_meta = false;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pipeline.validate()?;
        self.data.world.validate()?;
        if !(0.0..=1.0).contains(&self.data.sequence_drift) {
            bail!("data.sequence_drift must lie in [0, 1]");
        }
        let g = &self.grid;
        if g.eta.is_empty() || g.lambda.is_empty() || g.mu.is_empty() {
            bail!("grid.eta, grid.lambda and grid.mu must be non-empty");
        }
        if g.eta.iter().chain(&g.lambda).any(|v| !(*v >= 0.0)) {
            bail!("grid.eta and grid.lambda values must be nonnegative");
        }
        if g.mu.iter().any(|&m| m < 1) {
            bail!("grid.mu values must be >= 1");
        }
        if !(g.validation_fraction > 0.0 && g.validation_fraction < 1.0) {
            bail!("grid.validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
