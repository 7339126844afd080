use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::analysis::Correlation;
use crate::model::{Interventions, ModelConfig};
use crate::taskgen::GenConfig;
use crate::training::TrainConfig;

pub const K_VECTOR_CHOICES: [usize; 3] = [2, 4, 8];

/// One experiment: model, optimizer, data, evaluation and ablation switches.
/// Every field has a default, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Used when no output directory is given on the command line.
    pub out_dir: Option<PathBuf>,
    /// Write `checkpoint_step<N>.ckpt` every N optimizer steps; 0 disables.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total problems; even ids train, odd ids are held out.
    pub n: usize,
    pub seed: u64,
    pub operand_max: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            seed: 0,
            operand_max: GenConfig::default().operand_max,
        }
    }
}

impl DataConfig {
    pub fn gen(&self) -> GenConfig {
        GenConfig {
            operand_max: self.operand_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSource {
    #[default]
    SelectionWeights,
    CombinedVectors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: EvalSplit,
    /// Keep only problems whose control depth is at most this.
    pub max_depth: Option<u8>,
    /// Keep only the first N problems by id after filtering.
    pub limit: Option<usize>,
    pub pca_source: PcaSource,
    pub pca_components: usize,
    pub correlation: Correlation,
    /// Worker threads for generation; 0 picks the machine's parallelism.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: EvalSplit::Test,
            max_depth: None,
            limit: None,
            pca_source: PcaSource::SelectionWeights,
            pca_components: 2,
            correlation: Correlation::Spearman,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Control code forced to zero.
    pub no_control: bool,
    /// Gates forced to zero.
    pub no_thought: bool,
    /// Selection weights replaced by uniform.
    pub full_thought: bool,
    pub k_vectors: Option<usize>,
    pub injection_layer: Option<usize>,
}

impl Ablation {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.no_thought && self.k_vectors.is_some() {
            return Err(HarnessError::Config(
                "no_thought cannot be combined with k_vectors".into(),
            ));
        }
        if let Some(k) = self.k_vectors {
            if !K_VECTOR_CHOICES.contains(&k) {
                return Err(HarnessError::Config(format!(
                    "k_vectors must be one of {K_VECTOR_CHOICES:?}, got {k}"
                )));
            }
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&super::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The model actually built once ablation overrides are applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(k) = self.ablation.k_vectors {
            m.k_thoughts = k;
        }
        if let Some(l) = self.ablation.injection_layer {
            m.injection_layer = l;
        }
        m
    }

    pub fn interventions(&self) -> Interventions {
        Interventions {
            no_control: self.ablation.no_control,
            force_gate_zero: self.ablation.no_thought,
            uniform_selection: self.ablation.full_thought,
            disable_injection: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.ablation.validate()?;
        self.effective_model().validate()?;
        self.train.validate()?;
        self.data.gen().validate()?;
        if self.data.n == 0 {
            return Err(HarnessError::Config("data.n must be positive".into()));
        }
        if self.eval.pca_components == 0 {
            return Err(HarnessError::Config(
                "eval.pca_components must be positive".into(),
            ));
        }
        Ok(())
    }
}
