use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use exnode::classifier::{ClassifierSpec, ClassifierTrainConfig};
use exnode::cnf::CnfTrainConfig;
use exnode::data::{Mixture, RotatingSeriesSpec, ShapeFamily};
use exnode::equivariant::NetSpec;
use exnode::ode::SolverConfig;
use exnode::tvae::{TvaeSpec, TvaeTrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Cnf,
    Tvae,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Cnf => "cnf",
            Task::Tvae => "tvae",
        }
    }
}

/// Existing JSON-lines files in place of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DataSection<G> {
    Files { files: DataFiles },
    Generate(G),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilesOnly {
    files: DataFiles,
}

impl<'de, G: DeserializeOwned> Deserialize<'de> for DataSection<G> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let r = if v.get("files").is_some() {
            serde_path_to_error::deserialize::<_, FilesOnly>(v).map(|f| DataSection::Files { files: f.files })
        } else {
            serde_path_to_error::deserialize::<_, G>(v).map(DataSection::Generate)
        };
        r.map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                serde::de::Error::custom(inner)
            } else {
                serde::de::Error::custom(format!("{path}: {inner}"))
            }
        })
    }
}

fn zero() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassData {
    pub families: Vec<ShapeFamily>,
    pub n: usize,
    pub train: usize,
    /// Validation sets, used for early stopping and final metrics.
    pub test: usize,
    #[serde(default = "zero")]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityData {
    pub mixture: Mixture,
    pub n: usize,
    pub train: usize,
    pub test: usize,
    #[serde(default = "zero")]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesData {
    pub series: RotatingSeriesSpec,
    pub train: usize,
    pub test: usize,
    #[serde(default = "zero")]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ClassifierSpec,
    pub data: DataSection<ClassData>,
    pub optim: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnfConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: NetSpec,
    /// Solver for evaluation and sampling; training unrolls RK4.
    pub solver: SolverConfig,
    pub data: DataSection<DensityData>,
    pub optim: CnfTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvaeConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: TvaeSpec,
    pub solver: SolverConfig,
    pub data: DataSection<SeriesData>,
    pub optim: TvaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum RunConfig {
    Classify(ClassifyConfig),
    Cnf(CnfConfig),
    Tvae(TvaeConfig),
}

fn parse_as<T: DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(format!("config error at `{path}`: {}", e.into_inner()))
    })
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let task = v
            .get("task")
            .ok_or_else(|| CliError::config("config error at `task`: missing field"))?;
        let task: Task = serde_json::from_value(task.clone())
            .map_err(|e| CliError::config(format!("config error at `task`: {e}")))?;
        let cfg = match task {
            Task::Classify => RunConfig::Classify(parse_as(v)?),
            Task::Cnf => RunConfig::Cnf(parse_as(v)?),
            Task::Tvae => RunConfig::Tvae(parse_as(v)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or the `config` member of a `run.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        match v.get("config") {
            Some(inner) if v.get("config_hash").is_some() => Self::from_value(inner.clone()),
            _ => Self::from_value(v),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let solver = match self {
            RunConfig::Classify(_) => None,
            RunConfig::Cnf(c) => Some(&c.solver),
            RunConfig::Tvae(c) => Some(&c.solver),
        };
        if let Some(s) = solver {
            s.validate().map_err(|e| CliError::config(format!("config error at `solver`: {e}")))?;
        }
        if let RunConfig::Tvae(c) = self {
            if !matches!(c.model.decoder.first(), Some(exnode::equivariant::LayerSpec::ConcatSquash { .. })) {
                return Err(CliError::config("config error at `model.decoder`: the first decoder layer must be concat_squash"));
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self {
            RunConfig::Classify(_) => Task::Classify,
            RunConfig::Cnf(_) => Task::Cnf,
            RunConfig::Tvae(_) => Task::Tvae,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Classify(c) => c.seed,
            RunConfig::Cnf(c) => c.seed,
            RunConfig::Tvae(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        match &mut c {
            RunConfig::Classify(x) => {
                x.seed = seed;
                x.optim.seed = seed;
            }
            RunConfig::Cnf(x) => {
                x.seed = seed;
                x.optim.seed = seed;
            }
            RunConfig::Tvae(x) => {
                x.seed = seed;
                x.optim.seed = seed;
            }
        }
        c
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            RunConfig::Classify(c) => c.out.as_deref(),
            RunConfig::Cnf(c) => c.out.as_deref(),
            RunConfig::Tvae(c) => c.out.as_deref(),
        }
    }

    pub fn without_out(&self) -> Self {
        let mut c = self.clone();
        match &mut c {
            RunConfig::Classify(x) => x.out = None,
            RunConfig::Cnf(x) => x.out = None,
            RunConfig::Tvae(x) => x.out = None,
        }
        c
    }
}
