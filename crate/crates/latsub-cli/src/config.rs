//! TOML run configuration.

use std::path::{Path, PathBuf};

use latent_subspaces::evaluation::EvalConfig;
use latent_subspaces::persist::sha256_hex;
use latent_subspaces::{Error, Hyperparams, Result, WorldConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n: 2000, seed: 1001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub lambdas: Vec<f64>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub world: WorldConfig,
    pub dataset: DatasetSpec,
    pub train: Hyperparams,
    pub eval: EvalConfig,
    pub ablate: AblateSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            world: WorldConfig::default(),
            dataset: DatasetSpec::default(),
            train: Hyperparams::default(),
            eval: EvalConfig::default(),
            ablate: AblateSpec::default(),
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::BadConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_default();
            bad(if field.is_empty() { "config" } else { &field }, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world
            .schema
            .validate()
            .map_err(|e| bad("world.schema", e.to_string()))?;
        for (a, b, rho) in &self.world.corr {
            if !(rho.abs() < 1.0) {
                return Err(bad("world.corr", format!("|rho| must be below 1 for ({a}, {b}), got {rho}")));
            }
        }
        if self.dataset.n == 0 {
            return Err(bad("dataset.n", "must be at least 1"));
        }
        self.train.validate().map_err(|e| match e {
            Error::BadConfig { field, reason } => bad(&format!("train.{field}"), reason),
            other => other,
        })?;
        if self.eval.n_eval < 2 {
            return Err(bad("eval.n_eval", "must be at least 2"));
        }
        if !self.eval.alphas.contains(&0.0) {
            return Err(bad("eval.alphas", "grid must contain 0"));
        }
        if self.ablate.lambdas.is_empty() {
            return Err(bad("ablate.lambdas", "must be non-empty"));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration in TOML form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let cfg = RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        let text = toml::to_string(&cfg).expect("config serializes");
        sha256_hex(text.as_bytes())
    }
}
