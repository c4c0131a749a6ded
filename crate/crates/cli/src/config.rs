//! Run configuration: one JSON document, with command-line flags layered on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specdec::engine::{EngineConfig, Sampling, DEFAULT_K_CAP};
use specdec::metrics::CostModel;
use specdec::predictor::TrainConfig;

use crate::CliResult;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    /// One prompt per line, read as raw bytes (newline excluded).
    #[default]
    Bytes,
    /// One prompt per line, space-separated token ids.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub target: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub prompt_format: PromptFormat,
    /// Keep at most this many leading tokens of each prompt line.
    pub prompt_len: Option<usize>,
    /// Generations per policy; prompts are cycled. Defaults to one per prompt.
    pub generations: Option<usize>,
    pub max_len: usize,
    pub k_cap: usize,
    pub sampling: Sampling,
    pub policies: Vec<String>,
    pub t_draft: f64,
    pub t_target: f64,
    /// Per-token time of decoding with the target alone; defaults to `t_target`.
    pub standalone_t_target: Option<f64>,
    pub k_grid: Vec<usize>,
    pub h_grid: Vec<f64>,
    pub w_rej_grid: Vec<f64>,
    pub depth_grid: Vec<usize>,
    /// Head for adaptive sweeps when no dataset is given.
    pub head: Option<PathBuf>,
    /// Training data for sweeps over `w_rej_grid` × `depth_grid`.
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    /// Percentage of positions taken from the target response in gen-data.
    pub r_percent: f64,
    /// Also sweep the threshold rule driven by true acceptance probabilities.
    pub sweep_oracle: bool,
    /// Random instances in the oracle battery (a near-disjoint one is added).
    pub oracle_instances: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            target: None,
            draft: None,
            prompts: None,
            prompt_format: PromptFormat::Bytes,
            prompt_len: None,
            generations: None,
            max_len: 128,
            k_cap: DEFAULT_K_CAP,
            sampling: Sampling::default(),
            policies: Vec::new(),
            t_draft: 0.0234,
            t_target: 0.112,
            standalone_t_target: None,
            k_grid: vec![2, 4, 6, 8, 10, 12, 14],
            h_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            w_rej_grid: vec![1.0],
            depth_grid: vec![3],
            head: None,
            data: None,
            train: TrainConfig { epochs: 12, step_size: 0.05, batch_size: 128, ..TrainConfig::default() },
            r_percent: 15.0,
            sweep_oracle: false,
            oracle_instances: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("reading config {}: {e}", p.display()))?;
                Ok(serde_json::from_str(&text).map_err(|e| format!("parsing config {}: {e}", p.display()))?)
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn engine(&self) -> CliResult<EngineConfig> {
        let cfg = EngineConfig::new(self.max_len).with_k_cap(self.k_cap).with_sampling(self.sampling.clone());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn costs(&self) -> CliResult<CostModel> {
        Ok(CostModel::new(self.t_draft, self.t_target)?)
    }

    pub fn standalone(&self) -> f64 {
        self.standalone_t_target.unwrap_or(self.t_target)
    }

    /// Fails unless `field` is set and names an existing file.
    pub fn require_file<'a>(&self, field: &str, path: &'a Option<PathBuf>) -> CliResult<&'a Path> {
        let p = path.as_deref().ok_or_else(|| format!("`{field}` is required"))?;
        if !p.is_file() {
            return Err(format!("`{field}` file {} does not exist", p.display()).into());
        }
        Ok(p)
    }

    /// Every path set in the config must exist.
    pub fn check_paths(&self) -> CliResult<()> {
        let fields = [
            ("target", &self.target),
            ("draft", &self.draft),
            ("prompts", &self.prompts),
            ("head", &self.head),
            ("data", &self.data),
        ];
        for (name, path) in fields {
            if path.is_some() {
                self.require_file(name, path)?;
            }
        }
        Ok(())
    }
}
