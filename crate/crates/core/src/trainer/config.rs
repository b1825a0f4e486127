use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::data_pipeline::TabularConfig;
use crate::embedding_store::DEFAULT_DIM;
use crate::error::{Error, Result};
use crate::synthetic::SyntheticConfig;
use crate::uncertainty::{DistanceBackend, DEFAULT_EPSILON, DEFAULT_SINKHORN_ITERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[serde(rename = "movielens-1m")]
    MovieLens1m,
    Tabular,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-1m" => Ok(DatasetKind::MovieLens1m),
            "tabular" => Ok(DatasetKind::Tabular),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (expected movielens-1m, tabular or synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BackboneOnly,
    SingleCvae,
    EnsembleNoEu,
    Creu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BackboneOnly, Variant::SingleCvae, Variant::EnsembleNoEu, Variant::Creu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BackboneOnly => "backbone-only",
            Variant::SingleCvae => "single-cvae",
            Variant::EnsembleNoEu => "ensemble-no-eu",
            Variant::Creu => "creu",
        }
    }

    pub fn uses_warm_model(self) -> bool {
        self != Variant::BackboneOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected backbone-only, single-cvae, ensemble-no-eu or creu)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Column mapping for `tabular`; read from `tabular.json` in the data
    /// directory when absent.
    pub tabular: Option<TabularConfig>,
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub n_components: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub lr: f64,
    pub alpha: f64,
    pub lambda_eu: f64,
    pub embed_dim: usize,
    pub k_shot: usize,
    pub old_fraction: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub warm_epochs: usize,
    pub finetune_epochs: usize,
    /// Independent single-CVAE runs used to estimate its uncertainty.
    pub eu_repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::MovieLens1m,
            data_dir: None,
            tabular: None,
            synthetic: SyntheticConfig::default(),
            backbone: BackboneKind::DeepFm,
            variant: Variant::Creu,
            n_components: 3,
            epsilon: DEFAULT_EPSILON,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            lr: 0.001,
            alpha: 1.0,
            lambda_eu: 1.0,
            embed_dim: DEFAULT_DIM,
            k_shot: 20,
            old_fraction: 0.8,
            batch_size: 256,
            pretrain_epochs: 2,
            warm_epochs: 1,
            finetune_epochs: 1,
            eu_repeats: 5,
            seed: 42,
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Copy with the variant's forced settings applied: `single-cvae` runs
    /// one component without the uncertainty term, `ensemble-no-eu` drops
    /// the term.
    pub fn effective(&self) -> ExperimentConfig {
        let mut c = self.clone();
        match c.variant {
            Variant::SingleCvae => {
                c.n_components = 1;
                c.lambda_eu = 0.0;
            }
            Variant::EnsembleNoEu => c.lambda_eu = 0.0,
            Variant::BackboneOnly | Variant::Creu => {}
        }
        c
    }

    pub fn with_variant(&self, variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            variant,
            ..self.clone()
        }
        .effective()
    }

    pub fn distance_backend(&self) -> DistanceBackend {
        DistanceBackend::Sinkhorn {
            epsilon: self.epsilon,
            iters: self.sinkhorn_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n-components", self.n_components),
            ("sinkhorn-iters", self.sinkhorn_iters),
            ("embed-dim", self.embed_dim),
            ("k-shot", self.k_shot),
            ("batch-size", self.batch_size),
            ("eu-repeats", self.eu_repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let finite_positive = [("epsilon", self.epsilon), ("lr", self.lr)];
        for (name, v) in finite_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("lambda-eu", self.lambda_eu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.old_fraction > 0.0 && self.old_fraction < 1.0) {
            return Err(Error::Config(format!("old fraction must lie in (0, 1), got {}", self.old_fraction)));
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return Err(Error::Config("a data directory is required for this dataset".into()));
        }
        Ok(())
    }
}
