use std::path::{Path, PathBuf};

use gcn_nas::ceim::CeimConfig;
use gcn_nas::data::{GeneratorConfig, TrainConfig};
use gcn_nas::search::{FitnessMetric, SearchMode};
use gcn_nas::supernet::{SupernetConfig, DEFAULT_THRESHOLD};
use gcn_nas::{NasError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name of the resolved configuration written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Data = 1,
    Search = 2,
    Train = 3,
}

/// Deterministic sub-seed for one consumer of randomness.
pub fn sub_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.random()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// Joint coordinates as generated.
    #[default]
    Joint,
    /// Parent-to-child bone vectors.
    Bone,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Ntu,
}

/// A complete pipeline run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub network: NetworkSection,
    pub search: SearchSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Dataset file; `<out>/data.skel` when absent.
    pub path: Option<PathBuf>,
    pub stream: Stream,
    #[serde(flatten)]
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: Preset,
    /// Overrides the preset's per-block output channels.
    pub channels: Option<Vec<usize>>,
    /// Overrides the preset's per-block temporal strides.
    pub strides: Option<Vec<usize>>,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub iterations: usize,
    pub warmup: usize,
    pub population: usize,
    pub init_mu: f64,
    pub init_sigma2: f64,
    pub epsilon: f64,
    pub importance_mixing: bool,
    pub mode: SearchMode,
    pub fitness: FitnessMetric,
    pub threshold: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adds a learnable complementary graph to every layer.
    pub complementary: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            data: DataSection::default(),
            network: NetworkSection::default(),
            search: SearchSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { path: None, stream: Stream::Joint, generator: GeneratorConfig::default() }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { preset: Preset::Desk, channels: None, strides: None, lambda_max: 2.0 }
    }
}

impl Default for SearchSection {
    fn default() -> Self {
        let ceim = CeimConfig::default();
        SearchSection {
            iterations: 30,
            warmup: 8,
            population: 16,
            init_mu: ceim.init_mu,
            init_sigma2: ceim.init_sigma2,
            epsilon: ceim.epsilon,
            importance_mixing: true,
            mode: SearchMode::Continuous,
            fitness: FitnessMetric::Accuracy,
            threshold: DEFAULT_THRESHOLD,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            complementary: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NasError::Config(format!("run config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// The configuration with every default filled in.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.data.path = Some(self.data_path());
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out.join("data.skel"))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(RESOLVED_CONFIG), self.resolved().to_toml())?;
        Ok(())
    }

    pub fn ceim(&self) -> CeimConfig {
        let s = &self.search;
        CeimConfig {
            iterations: s.iterations,
            warmup: s.warmup,
            population: s.population,
            init_mu: s.init_mu,
            init_sigma2: s.init_sigma2,
            epsilon: s.epsilon,
            importance_mixing: s.importance_mixing,
        }
    }

    /// Shared-weight optimizer recipe used during search.
    pub fn search_recipe(&self) -> TrainConfig {
        let s = &self.search;
        TrainConfig {
            epochs: s.iterations,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
        }
    }

    pub fn train_recipe(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, momentum: t.momentum, weight_decay: t.weight_decay }
    }

    /// Network shape for data with the given `[C, T, V, M]` and class count.
    pub fn network_config(&self, shape: [usize; 4], classes: usize) -> Result<SupernetConfig> {
        let [channels, frames, joints, bodies] = shape;
        let mut cfg = match self.network.preset {
            Preset::Desk => SupernetConfig::desk(channels, joints, classes),
            Preset::Ntu => SupernetConfig::ntu(classes),
        };
        cfg.in_channels = channels;
        cfg.joints = joints;
        cfg.frames = frames;
        cfg.bodies = bodies;
        if let Some(c) = &self.network.channels {
            cfg.channels = c.clone();
        }
        if let Some(s) = &self.network.strides {
            cfg.strides = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
