//! Run configuration: one JSON document describing the federation recipe,
//! the model architecture and every pipeline stage. Everything is validated
//! up front so a bad file fails before any work starts, with the offending
//! field named in the error.

use crate::clustering::ClusterParams;
use crate::error::{Error, Result};
use crate::fedtrain::{EngineConfig, InitMode, TrainParams};
use crate::lifecycle::LifecycleParams;
use crate::nnmodel::ArchSpec;
use crate::partitioner::{
    load_federation, partition_label_skew, partition_lda, split_test, synthetic_federation,
    synthetic_pool, Concept, Federation, SynthOptions,
};
use crate::similarity::SimilarityParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pooled synthetic source that the skew partitioners cut into clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub n_samples: usize,
    pub separation: f64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec { classes: 8, feature_dim: 16, n_samples: 4000, separation: 6.0 }
    }
}

/// Gaussian-blob federation with known cluster structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub clusters: usize,
    pub clients_per_cluster: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub n_per_client: usize,
    pub test_per_client: usize,
    pub separation: f64,
    pub noise: f64,
    pub classes_per_cluster: usize,
    pub concepts: Option<Vec<Concept>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 4,
            clients_per_cluster: 5,
            classes: 8,
            feature_dim: 16,
            n_per_client: 80,
            test_per_client: 20,
            separation: 6.0,
            noise: 1.0,
            classes_per_cluster: 2,
            concepts: None,
        }
    }
}

impl SynthSpec {
    fn options(&self, seed: u64) -> SynthOptions {
        SynthOptions {
            clusters: self.clusters,
            clients_per_cluster: self.clients_per_cluster,
            classes: self.classes,
            feature_dim: self.feature_dim,
            n_per_client: self.n_per_client,
            test_per_client: self.test_per_client,
            separation: self.separation,
            noise: self.noise,
            classes_per_cluster: self.classes_per_cluster,
            concepts: self.concepts.clone(),
            seed,
        }
    }
}

/// Label-block plus quantity-skew partition of a pooled source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkewSpec {
    pub pool: PoolSpec,
    pub clients: usize,
    pub rho: f64,
    pub alpha_q: f64,
    pub test_fraction: f64,
}

impl Default for SkewSpec {
    fn default() -> Self {
        SkewSpec { pool: PoolSpec::default(), clients: 20, rho: 0.25, alpha_q: 1.0, test_fraction: 0.2 }
    }
}

/// Per-class Dirichlet partition of a pooled source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaSpec {
    pub pool: PoolSpec,
    pub clients: usize,
    pub alpha: f64,
    pub test_fraction: f64,
}

impl Default for LdaSpec {
    fn default() -> Self {
        LdaSpec { pool: PoolSpec::default(), clients: 20, alpha: 0.5, test_fraction: 0.2 }
    }
}

/// Federation previously written to disk by the `partition` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub path: PathBuf,
}

/// How the client population is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FederationSpec {
    Synthetic(SynthSpec),
    LabelSkew(SkewSpec),
    Lda(LdaSpec),
    Load(LoadSpec),
}

impl Default for FederationSpec {
    fn default() -> Self {
        FederationSpec::Synthetic(SynthSpec::default())
    }
}

impl FederationSpec {
    /// Feature dimension and class count, when they are knowable without
    /// touching the filesystem.
    fn shape(&self) -> Option<(usize, usize)> {
        match self {
            FederationSpec::Synthetic(s) => Some((s.feature_dim, s.classes)),
            FederationSpec::LabelSkew(s) => Some((s.pool.feature_dim, s.pool.classes)),
            FederationSpec::Lda(s) => Some((s.pool.feature_dim, s.pool.classes)),
            FederationSpec::Load(_) => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            FederationSpec::Synthetic(s) => s.options(0).validate().map_err(in_field("federation")),
            FederationSpec::LabelSkew(s) => {
                if s.clients == 0 {
                    return Err(Error::config("federation.clients must be positive"));
                }
                if !(0.0 < s.rho && s.rho <= 1.0) {
                    return Err(Error::config(format!(
                        "federation.rho must be in (0, 1], got {}",
                        s.rho
                    )));
                }
                if s.alpha_q <= 0.0 {
                    return Err(Error::config("federation.alpha_q must be positive"));
                }
                check_fraction("federation.test_fraction", s.test_fraction)
            }
            FederationSpec::Lda(s) => {
                if s.clients == 0 {
                    return Err(Error::config("federation.clients must be positive"));
                }
                if s.alpha <= 0.0 {
                    return Err(Error::config("federation.alpha must be positive"));
                }
                check_fraction("federation.test_fraction", s.test_fraction)
            }
            FederationSpec::Load(l) => {
                if l.path.as_os_str().is_empty() {
                    return Err(Error::config("federation.path cannot be empty"));
                }
                Ok(())
            }
        }
    }
}

fn check_fraction(field: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{field} must be in [0, 1), got {v}")))
    }
}

/// Prefix an inner validation message with the config section it came from.
fn in_field(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::config(format!("{section}: {e}"))
}

/// The whole run in one document. Every section falls back to its default,
/// so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub federation: FederationSpec,
    pub arch: ArchSpec,
    pub similarity: SimilarityParams,
    pub clustering: ClusterParams,
    pub training: TrainParams,
    pub lifecycle: LifecycleParams,
    /// Pool everyone into one cluster (the federated-averaging baseline).
    pub force_single_cluster: bool,
    /// Where run artifacts go; the CLI's `--out` flag overrides this.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            federation: FederationSpec::default(),
            arch: ArchSpec { classes: 8, ..ArchSpec::default() },
            similarity: SimilarityParams::default(),
            clustering: ClusterParams::default(),
            training: TrainParams::default(),
            lifecycle: LifecycleParams::default(),
            force_single_cluster: false,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parse and validate a JSON config file. Missing file and malformed
    /// JSON are both config errors (exit code 2), with the path named.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.arch.validate().map_err(in_field("arch"))?;
        self.similarity.validate().map_err(in_field("similarity"))?;
        self.clustering.validate().map_err(in_field("clustering"))?;
        self.training.validate(&self.arch).map_err(in_field("training"))?;
        self.lifecycle.validate().map_err(in_field("lifecycle"))?;
        if let Some((f, c)) = self.federation.shape() {
            if f != self.arch.input_dim {
                return Err(Error::config(format!(
                    "arch.input_dim is {} but the federation produces {f} features",
                    self.arch.input_dim
                )));
            }
            if c != self.arch.classes {
                return Err(Error::config(format!(
                    "arch.classes is {} but the federation produces {c} classes",
                    self.arch.classes
                )));
            }
        }
        Ok(())
    }

    /// Materialize the client population this config describes.
    pub fn build_federation(&self) -> Result<Federation> {
        match &self.federation {
            FederationSpec::Synthetic(s) => synthetic_federation(&s.options(self.seed)),
            FederationSpec::LabelSkew(s) => {
                let pool = synthetic_pool(
                    s.pool.classes,
                    s.pool.feature_dim,
                    s.pool.n_samples,
                    s.pool.separation,
                    self.seed,
                )?;
                let parts = partition_label_skew(&pool, s.clients, s.rho, s.alpha_q, self.seed)?;
                let (trains, tests) = split_test(parts, s.test_fraction, self.seed)?;
                Federation::new(trains, tests, s.pool.classes, None)
            }
            FederationSpec::Lda(s) => {
                let pool = synthetic_pool(
                    s.pool.classes,
                    s.pool.feature_dim,
                    s.pool.n_samples,
                    s.pool.separation,
                    self.seed,
                )?;
                let parts = partition_lda(&pool, s.clients, s.alpha, self.seed)?;
                let (trains, tests) = split_test(parts, s.test_fraction, self.seed)?;
                Federation::new(trains, tests, s.pool.classes, None)
            }
            FederationSpec::Load(l) => load_federation(&l.path),
        }
    }

    /// Assemble the engine configuration. Random-init dual models get the
    /// feature-diversity regularizer by default; an explicit `lambda_div`
    /// always wins.
    pub fn engine_config(&self) -> EngineConfig {
        let mut train = self.training.clone();
        if train.lambda_div.is_none() && train.init == InitMode::Random && self.arch.dual {
            train.lambda_div = Some(0.1);
        }
        EngineConfig {
            arch: self.arch.clone(),
            sim: self.similarity.clone(),
            clust: self.clustering.clone(),
            train,
            lifecycle: self.lifecycle,
            seed: self.seed,
            force_single_cluster: self.force_single_cluster,
        }
    }

}
