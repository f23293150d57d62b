//! Experiment configuration and named profiles.

use std::path::Path;

use ibft_core::evaluation::EvalGrid;
use ibft_core::memorization::ScoreMode;
use ibft_core::trainer::{Method, TrainConfig};
use ibft_core::{vocab, Error, Result, TransformerConfig};
use serde::{Deserialize, Serialize};

/// Split sizes and expression size range for the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub background: usize,
    pub code: usize,
    pub fresh: usize,
    pub test: usize,
    pub min_ops: usize,
    pub max_ops: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { background: 8000, code: 1000, fresh: 1000, test: 500, min_ops: 1, max_ops: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorizationConfig {
    pub k: f64,
    pub mode: ScoreMode,
}

impl Default for MemorizationConfig {
    fn default() -> Self {
        Self { k: 20.0, mode: ScoreMode::Response }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub ratios: Vec<f64>,
    /// Sampling temperature for the Pass@k cells of the sweep.
    pub temperature: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self { ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4], temperature: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub n: usize,
    pub ks: Vec<usize>,
    /// Pass@k^(m) thresholds, reported at the largest k.
    pub ms: Vec<usize>,
    /// Additional `[k, m]` cells.
    pub extra: Vec<[usize; 2]>,
    pub temperatures: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { n: 10, ks: vec![1, 5, 10], ms: vec![2, 5, 10], extra: vec![[5, 5]], temperatures: vec![0.2, 0.6, 1.0] }
    }
}

impl EvaluationConfig {
    pub fn grid(&self) -> Result<EvalGrid> {
        let mut grid = EvalGrid::from_lists(&self.ks, &self.ms)?;
        for &[k, m] in &self.extra {
            if !grid.km.contains(&(k, m)) {
                grid.km.push((k, m));
            }
        }
        grid.validate(self.n)?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub fraction: f64,
    pub pairs: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { fraction: 0.25, pairs: 10_000 }
    }
}

/// Everything `run-experiment` needs. Stage seeds come from `seeds`; the
/// `seed` fields inside the two training sections are overridden per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub model: TransformerConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub memorization: MemorizationConfig,
    pub pruning: PruningConfig,
    pub evaluation: EvaluationConfig,
    pub geometry: GeometryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Longest prompt plus separator, and longest program plus END.
const LONGEST_CONTEXT: usize = 2 * ibft_core::stackcalc::MAX_OPS + 2;
const LONGEST_RESPONSE: usize = 2 * ibft_core::stackcalc::MAX_OPS + 2;

impl ExperimentConfig {
    /// The reference scale: 8000 background examples, 20 pretraining epochs.
    pub fn full() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            model: TransformerConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig { epochs: 20, base_lr: 1e-3, contamination_ratio: 0.5, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 3, base_lr: 3e-4, alpha: 0.1, beta: 0.02, ..TrainConfig::default() },
            memorization: MemorizationConfig::default(),
            pruning: PruningConfig::default(),
            evaluation: EvaluationConfig::default(),
            geometry: GeometryConfig::default(),
        }
    }

    /// A reduced model and corpus that runs three seeds in minutes on one core.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            model: TransformerConfig { d_model: 64, n_layers: 4, n_heads: 4, d_ff: 128, max_seq_len: 64, ..full.model },
            data: DataConfig { background: 2000, code: 400, fresh: 400, test: 200, ..full.data },
            pretrain: TrainConfig { epochs: 10, ..full.pretrain },
            ..full
        }
    }

    /// Seconds-scale settings for tests of the plumbing.
    pub fn smoke() -> Self {
        let full = Self::full();
        Self {
            seeds: vec![0],
            model: TransformerConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 64, tap_layer: 1, ..full.model },
            data: DataConfig { background: 60, code: 40, fresh: 20, test: 12, ..full.data },
            pretrain: TrainConfig { epochs: 2, ..full.pretrain },
            finetune: TrainConfig { epochs: 1, ..full.finetune },
            pruning: PruningConfig { ratios: vec![0.0, 0.1], temperature: 1.0 },
            evaluation: EvaluationConfig { n: 4, ks: vec![1, 2, 4], ms: vec![2, 4], extra: vec![[2, 2]], temperatures: vec![0.5, 1.0] },
            geometry: GeometryConfig { fraction: 0.25, pairs: 200 },
            ..full
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::config("profile", format!("unknown profile {other:?} (full, desk, smoke)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        self.model.validate()?;
        if self.model.vocab_size < vocab::USED {
            return Err(Error::config("model.vocab_size", format!("must be at least {}", vocab::USED)));
        }
        if self.model.max_seq_len < LONGEST_CONTEXT + LONGEST_RESPONSE {
            return Err(Error::config("model.max_seq_len", format!("must be at least {}", LONGEST_CONTEXT + LONGEST_RESPONSE)));
        }
        let d = &self.data;
        if d.background + d.code == 0 || d.code == 0 || d.fresh == 0 || d.test == 0 {
            return Err(Error::config("data", "code, fresh and test splits must be non-empty"));
        }
        ibft_core::stackcalc::TaskConfig { min_ops: d.min_ops, max_ops: d.max_ops }.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.finetune.method != Method::Ft {
            return Err(Error::config("finetune.method", "the experiment runs both methods; leave this as \"ft\""));
        }
        if !(self.memorization.k > 0.0 && self.memorization.k <= 100.0) {
            return Err(Error::config("memorization.k", "must lie in (0, 100]"));
        }
        if self.pruning.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("pruning.ratios", "each ratio must lie in [0, 1)"));
        }
        if !(self.pruning.temperature >= 0.0 && self.pruning.temperature.is_finite()) {
            return Err(Error::config("pruning.temperature", "must be finite and >= 0"));
        }
        if self.evaluation.n == 0 {
            return Err(Error::config("evaluation.n", "must be at least 1"));
        }
        if self.evaluation.temperatures.is_empty() || self.evaluation.temperatures.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::config("evaluation.temperatures", "need finite temperatures >= 0"));
        }
        self.evaluation.grid()?;
        let g = &self.geometry;
        if !(g.fraction > 0.0 && g.fraction <= 0.5) {
            return Err(Error::config("geometry.fraction", "must lie in (0, 0.5]"));
        }
        if (d.code as f64) < 2.0 / g.fraction {
            return Err(Error::config("geometry.fraction", "code split is smaller than 2/fraction"));
        }
        if g.pairs == 0 {
            return Err(Error::config("geometry.pairs", "must be at least 1"));
        }
        Ok(())
    }
}
