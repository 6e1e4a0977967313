//! Experiment configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CovarianceNorm;
use crate::probe::{BestHead, LabelPooling};
use crate::stats::{TrailingBin, DEFAULT_BIN_SIZE, DEFAULT_KRR_ALPHA};

/// How demonstrations are chosen for each test query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Selector {
    /// `k` pool examples uniformly without replacement.
    Random,
    /// Top-`k` pool examples by BM25 against the query text.
    Bm25,
    /// Top-`k` pool examples by cosine in an embedding table.
    Dense(PathBuf),
    /// The same pool indices for every query.
    Fixed(Vec<usize>),
    /// The query itself as the last demonstration, the rest random. For
    /// testing only.
    Leak,
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown selector `{s}`"));
        match s {
            "random" => Ok(Selector::Random),
            "bm25" => Ok(Selector::Bm25),
            "leak" => Ok(Selector::Leak),
            _ => match s.split_once(':') {
                Some(("dense", path)) if !path.is_empty() => Ok(Selector::Dense(path.into())),
                Some(("fixed", list)) => list
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()
                    .map(Selector::Fixed),
                _ => Err(bad()),
            },
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Random => f.write_str("random"),
            Selector::Bm25 => f.write_str("bm25"),
            Selector::Leak => f.write_str("leak"),
            Selector::Dense(p) => write!(f, "dense:{}", p.display()),
            Selector::Fixed(ids) => {
                let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
                write!(f, "fixed:{}", ids.join(","))
            }
        }
    }
}

impl TryFrom<String> for Selector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Selector> for String {
    fn from(s: Selector) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// Weights in the tensor container plus a JSON model config.
    Toy { weights: PathBuf, config: PathBuf },
    /// A capture manifest exported from a real model.
    Capture { manifest: PathBuf },
}

fn default_k() -> usize {
    4
}

fn default_n_test() -> usize {
    300
}

fn default_bin_size() -> usize {
    DEFAULT_BIN_SIZE
}

fn default_calibration() -> usize {
    64
}

fn default_alpha() -> f64 {
    DEFAULT_KRR_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task manifest path.
    pub task: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_selector")]
    pub selector: Selector,
    pub model_source: ModelSource,
    #[serde(default = "default_bin_size")]
    pub bin_size: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Skip head search and use this head.
    #[serde(default)]
    pub best_head: Option<BestHead>,
    /// Test prompts (with random demonstrations) used to pick the best head.
    #[serde(default = "default_calibration")]
    pub calibration_prompts: usize,
    #[serde(default)]
    pub label_pooling: LabelPooling,
    #[serde(default)]
    pub covariance: CovarianceNorm,
    #[serde(default)]
    pub trailing_bin: TrailingBin,
    /// Kernel width; the median heuristic when absent.
    #[serde(default)]
    pub krr_gamma: Option<f64>,
    #[serde(default = "default_alpha")]
    pub krr_alpha: f64,
    /// Embedding table for the dense-similarity baseline column.
    #[serde(default)]
    pub dense_baseline: Option<PathBuf>,
}

fn default_selector() -> Selector {
    Selector::Random
}

impl ExperimentConfig {
    pub fn new(task: impl Into<PathBuf>, model_source: ModelSource) -> Self {
        Self {
            task: task.into(),
            k: default_k(),
            n_test: default_n_test(),
            seed: 0,
            selector: Selector::Random,
            model_source,
            bin_size: DEFAULT_BIN_SIZE,
            output_dir: None,
            best_head: None,
            calibration_prompts: default_calibration(),
            label_pooling: LabelPooling::default(),
            covariance: CovarianceNorm::default(),
            trailing_bin: TrailingBin::default(),
            krr_gamma: None,
            krr_alpha: DEFAULT_KRR_ALPHA,
            dense_baseline: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Invalid("n_test must be at least 1".into()));
        }
        if self.bin_size == 0 {
            return Err(Error::Invalid("bin_size must be at least 1".into()));
        }
        if let Selector::Fixed(ids) = &self.selector {
            if ids.len() != self.k {
                return Err(Error::Invalid(format!(
                    "fixed selector lists {} indices but k is {}",
                    ids.len(),
                    self.k
                )));
            }
        }
        if !(self.krr_alpha >= 0.0) || self.krr_gamma.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::Invalid("krr_alpha must be ≥ 0 and krr_gamma > 0".into()));
        }
        Ok(())
    }
}
