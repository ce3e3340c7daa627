//! Run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use jointdiff::data::PairSpec;
use jointdiff::rng::substream_seed;
use jointdiff::sampling::{Guidance, PlanDocument, Region, Side};
use jointdiff::{DenoiserConfig, Error, Result, ScheduleParams, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required for pretraining; when present for later stages it must
    /// match the base checkpoint.
    #[serde(default)]
    pub model: Option<DenoiserConfig>,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<PairSpec>,
    #[serde(default)]
    pub sample: Option<PlanDocument>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no train section".into()))
    }

    /// Training config with its seed resolved from the run seed.
    pub fn resolved_train(&self) -> Result<TrainConfig> {
        let mut t = self.train()?.clone();
        t.seed.get_or_insert(substream_seed(self.seed, "train"));
        Ok(t)
    }

    /// Data spec with its seed resolved from the run seed.
    pub fn data(&self) -> Result<PairSpec> {
        let mut d = self
            .data
            .clone()
            .ok_or_else(|| Error::Config("config has no data section".into()))?;
        d.seed.get_or_insert(substream_seed(self.seed, "data"));
        d.validate()?;
        Ok(d)
    }

    pub fn eval(&self) -> EvalConfig {
        self.eval.clone().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples (or seeds) per setting.
    pub n: usize,
    /// Plan level count `S`.
    pub levels: usize,
    pub rho: f64,
    pub y_star: f64,
    /// Start levels of the coarse condition as fractions of `S`.
    pub fractions: Vec<f64>,
    /// Known part of the condition for the guidance task.
    pub known: Region,
    /// Guidance for the guidance task; the reference settings when absent.
    pub guidance: Option<Guidance>,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 200,
            levels: 50,
            rho: 0.8,
            y_star: 1.0,
            fractions: vec![0.0, 0.2, 0.5, 0.8, 1.0],
            known: Region::Half { side: Side::Left },
            guidance: None,
            thresholds: Thresholds::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.levels == 0 {
            return Err(Error::Config("eval.n and eval.levels must be positive".into()));
        }
        self.thresholds.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub mean_err: f64,
    pub var_low: f64,
    pub var_high: f64,
    /// Largest allowed conditional / unconditional fidelity ratio.
    pub fidelity_ratio: f64,
    pub spearman_p: f64,
    /// Largest allowed guided / replacement-only error ratio.
    pub guidance_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mean_err: 0.1,
            var_low: 0.27,
            var_high: 0.45,
            fidelity_ratio: 0.5,
            spearman_p: 0.01,
            guidance_ratio: 0.7,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mean_err,
            self.var_low,
            self.var_high,
            self.fidelity_ratio,
            self.spearman_p,
            self.guidance_ratio,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("thresholds must be finite and non-negative".into()));
        }
        if self.var_low > self.var_high {
            return Err(Error::Config("thresholds.var_low exceeds var_high".into()));
        }
        if self.spearman_p > 1.0 {
            return Err(Error::Config("thresholds.spearman_p must be a probability".into()));
        }
        Ok(())
    }
}
