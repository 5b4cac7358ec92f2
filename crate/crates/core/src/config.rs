//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::supernet::{BitSpace, Supernet, Topology, TrainConfig};

/// A named reference network or an explicit layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(String),
    Custom(Topology),
}

impl TopologySpec {
    pub fn build(&self) -> Result<Topology> {
        match self {
            TopologySpec::Named(n) => match n.as_str() {
                "reference_cnn" => Ok(Topology::reference_cnn()),
                "mini_vgg" => Ok(Topology::mini_vgg()),
                other => Err(Error::Config(format!(
                    "unknown topology {other:?} (expected reference_cnn or mini_vgg)"
                ))),
            },
            TopologySpec::Custom(t) => Ok(t.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub topology: TopologySpec,
    pub weight_bits: Vec<u8>,
    pub activation_bits: Vec<u8>,
    /// Bit-width of the first and last layers.
    pub fixed_bits: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            topology: TopologySpec::Named("reference_cnn".into()),
            weight_bits: vec![2, 3, 4, 5, 6],
            activation_bits: vec![2, 3, 4, 5, 6],
            fixed_bits: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Mnist { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Samples held out (from the end) for validation and search.
    pub validation: usize,
    /// Cap on training samples; all remaining samples when unset.
    pub train_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist {
                images: "data/mnist/mnist-10k-images-idx3-ubyte.gz".into(),
                labels: "data/mnist/mnist-10k-labels-idx1-ubyte.gz".into(),
            },
            validation: 2000,
            train_limit: None,
        }
    }
}

/// Everything one run needs. The top-level `seed` overrides every nested seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs/default".into(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads, rebases relative paths onto the file's directory, seeds and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn rebase_paths(&mut self, base: &Path) {
        if let DataSource::Mnist { images, labels } = &mut self.data.source {
            *images = rebase(base, images);
            *labels = rebase(base, labels);
        }
        self.out_dir = rebase(base, &self.out_dir);
    }

    /// Propagates the top-level seed and validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.apply_seed();
        self.validate()
    }

    pub fn apply_seed(&mut self) {
        let s = self.seed;
        self.train.init_seed = s;
        self.train.data_seed = s.wrapping_add(1);
        self.train.sampler.seed = s.wrapping_add(2);
        if let DataSource::Synthetic(spec) = &mut self.data.source {
            spec.seed = s.wrapping_add(3);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[u8]| !v.is_empty() && v.windows(2).all(|p| p[0] < p[1]);
        if !sorted(&self.model.weight_bits) || !sorted(&self.model.activation_bits) {
            return Err(Error::Config("bit sets must be non-empty and strictly increasing".into()));
        }
        self.space()?;
        self.train.validate()?;
        self.search.validate()?;
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        self.model.topology.build()
    }

    pub fn space(&self) -> Result<BitSpace> {
        let topo = self.topology()?;
        topo.resolve()?;
        BitSpace::new(
            topo.layers.len(),
            &self.model.weight_bits,
            &self.model.activation_bits,
            self.model.fixed_bits,
        )
    }

    pub fn build_model(&self) -> Result<Supernet> {
        Supernet::new(self.topology()?, self.space()?, self.train.init_seed)
    }

    /// Training and validation splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        if let DataSource::Mnist { images, labels } = &self.data.source {
            for p in [images, labels] {
                if !p.exists() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        let all = match &self.data.source {
            DataSource::Mnist { images, labels } => data::load_mnist_idx(images, labels)?,
            DataSource::Synthetic(spec) => data::synthetic(spec)?,
        };
        if self.data.validation >= all.len() {
            return Err(Error::Config(format!(
                "validation size {} leaves no training data out of {}",
                self.data.validation,
                all.len()
            )));
        }
        let n_train = all.len() - self.data.validation;
        let (train, val) = all.split(n_train);
        let train = match self.data.train_limit {
            Some(n) => train.slice(0, n),
            None => train,
        };
        let topo = self.topology()?;
        if train.sample_shape() != topo.input || train.classes > topo.classes {
            return Err(Error::Config(format!(
                "data samples {:?} with {} classes do not fit topology input {:?} / {} classes",
                train.sample_shape(),
                train.classes,
                topo.input,
                topo.classes
            )));
        }
        Ok((train, val))
    }
}
