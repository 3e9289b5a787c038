use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ball::BallGenConfig;
use crate::data::{generate_stream, ingest_csv, CsvSchema, Stream, StreamSpec};
use crate::error::{FlowerError, Result};
use crate::flat::{BaseTrainConfig, NoiseSpec};
use crate::pmas::PmasConfig;
use crate::protonet::ModelConfig;
use crate::session::{Method, RunnerConfig, SessionConfig};

/// Feature rows read from a CSV file instead of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub class_order: Option<PathBuf>,
}

fn default_test_fraction() -> f64 {
    CsvSchema::default().test_fraction
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { methods: vec![Method::Flower], seeds: vec![1, 2, 3, 4, 5] }
    }
}

/// Everything one experiment needs. Every section is optional in the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// The stream seed is `stream.seed + run seed`, so each run sees its own data.
    pub stream: StreamSpec,
    pub csv: Option<CsvSource>,
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub base: BaseTrainConfig,
    pub ball: BallGenConfig,
    pub pmas: PmasConfig,
    pub session: SessionConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FlowerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlowerError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(csv) = &mut cfg.csv {
            let dir = path.parent().unwrap_or(Path::new("."));
            csv.path = dir.join(&csv.path);
            csv.class_order = csv.class_order.as_ref().map(|p| dir.join(p));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: FlowerError| match e {
            FlowerError::Config(m) => FlowerError::Config(m),
            other => FlowerError::Config(other.to_string()),
        };
        if self.csv.is_none() {
            self.stream.validate().map_err(cfg)?;
            if self.stream.input_dim != self.model.input_dim {
                return Err(FlowerError::Config(format!(
                    "stream.input_dim = {} but model.input_dim = {}",
                    self.stream.input_dim, self.model.input_dim
                )));
            }
        }
        if self.run.methods.is_empty() {
            return Err(FlowerError::Config("run.methods is empty".into()));
        }
        for m in &self.run.methods {
            self.runner(*m).validate().map_err(cfg)?;
        }
        Ok(())
    }

    pub fn runner(&self, method: Method) -> RunnerConfig {
        RunnerConfig {
            method,
            model: self.model.clone(),
            noise: self.noise.clone(),
            base: self.base.clone(),
            ball: self.ball.clone(),
            pmas: self.pmas,
            session: self.session.clone(),
        }
    }

    pub fn stream_for(&self, seed: u64) -> Result<Stream> {
        match &self.csv {
            Some(csv) => {
                let schema = CsvSchema {
                    base_classes: csv.base_classes,
                    ways: csv.ways,
                    shots: csv.shots,
                    test_fraction: csv.test_fraction,
                    class_order: csv.class_order.clone(),
                    seed,
                };
                ingest_csv(&csv.path, &schema)
            }
            None => generate_stream(&StreamSpec { seed: self.stream.seed.wrapping_add(seed), ..self.stream.clone() }),
        }
    }
}
