//! Hierarchical cell-graph / tile-graph classifier, its baselines, and the
//! training and evaluation harness.

mod checkpoint;
mod eval;
mod net;
mod sample;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ad::Readout;
use crate::error::{Error, Result};
use crate::ingest::{PhenotypeScope, Stage, CELL_FEATURES};
use crate::metrics::N_METRICS;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use eval::{evaluate, predict, weighted_f1, Evaluation, Prediction, RegionScore, REPORT_ROWS};
pub use net::{argmax, softmax, ForwardOpts, Model};
pub use sample::{
    assemble_tile_features, augment, build_dataset, build_sample, make_test_graph, RoISample,
};
pub use train::{class_weights, split_patients, train, EpochLog, SplitPlan, TrainOutcome};

pub const CELL_FEATURE_DIM: usize = CELL_FEATURES.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Cell encoder trained end to end with the tile model.
    #[default]
    Joint,
    /// Cell encoder fixed at its random initialisation; tile embeddings are
    /// computed once.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// GraphConv tile model; the readout comes from the config.
    Gcn,
    MilAttention,
    MilMean,
    Mlp,
}

impl ModelKind {
    pub fn uses_tiles(self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }

    pub fn uses_edges(self) -> bool {
        matches!(self, ModelKind::Gcn)
    }
}

/// A named model choice, as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub readout: Readout,
}

impl ModelChoice {
    pub const NAMES: [&'static str; 6] = ["gcn-mean", "gcn-add", "gcn-max", "mil-att", "mil-mean", "mlp"];

    pub fn gcn(readout: Readout) -> Self {
        ModelChoice {
            kind: ModelKind::Gcn,
            readout,
        }
    }

    pub fn baseline(kind: ModelKind) -> Self {
        ModelChoice {
            kind,
            readout: Readout::Mean,
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModelKind::Gcn => write!(f, "gcn-{}", self.readout.name()),
            ModelKind::MilAttention => f.write_str("mil-att"),
            ModelKind::MilMean => f.write_str("mil-mean"),
            ModelKind::Mlp => f.write_str("mlp"),
        }
    }
}

impl FromStr for ModelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gcn-mean" => ModelChoice::gcn(Readout::Mean),
            "gcn-add" => ModelChoice::gcn(Readout::Add),
            "gcn-max" => ModelChoice::gcn(Readout::Max),
            "mil-att" => ModelChoice::baseline(ModelKind::MilAttention),
            "mil-mean" => ModelChoice::baseline(ModelKind::MilMean),
            "mlp" => ModelChoice::baseline(ModelKind::Mlp),
            other => {
                return Err(Error::Config(format!(
                    "unknown model `{other}`, expected one of {}",
                    ModelChoice::NAMES.join(", ")
                )))
            }
        })
    }
}

impl TryFrom<String> for ModelChoice {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelChoice> for String {
    fn from(m: ModelChoice) -> String {
        m.to_string()
    }
}

/// Model, graph-construction and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierModelConfig {
    pub cell_mp_steps: usize,
    pub cell_embed_dim: usize,
    pub tile_layers: usize,
    /// Units per hidden layer.
    pub hidden_dim: usize,
    pub readout_mode: Readout,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_classes: usize,
    /// Stage index to class index; lets stages be merged.
    pub class_map: Vec<usize>,
    pub cell_k: f64,
    pub tile_k_default: f64,
    pub tiles_per_roi: usize,
    pub tile_size: u32,
    pub encoder_mode: EncoderMode,
    pub phenotype_scope: PhenotypeScope,
    /// Augmented copies of each training RoI per epoch.
    pub augment_copies: usize,
    pub augment_keep: f64,
    pub augment_thresholds: Vec<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub pseudo_val_frac: f64,
    pub train_frac: f64,
    pub n_splits: usize,
}

impl Default for HierModelConfig {
    fn default() -> Self {
        HierModelConfig {
            cell_mp_steps: 3,
            cell_embed_dim: 16,
            tile_layers: 3,
            hidden_dim: 32,
            readout_mode: Readout::Mean,
            dropout: 0.5,
            lr: 1e-5,
            weight_decay: 1e-5,
            batch_size: 64,
            n_classes: 3,
            class_map: vec![0, 1, 2],
            cell_k: 30.0,
            tile_k_default: 200.0,
            tiles_per_roi: 200,
            tile_size: 256,
            encoder_mode: EncoderMode::Joint,
            phenotype_scope: PhenotypeScope::Cohort,
            augment_copies: 5,
            augment_keep: 0.8,
            augment_thresholds: vec![150.0, 175.0, 200.0, 225.0, 250.0],
            patience: 20,
            max_epochs: 500,
            pseudo_val_frac: 0.1,
            train_frac: 0.7,
            n_splits: 3,
        }
    }
}

impl HierModelConfig {
    pub fn tile_feature_dim(&self) -> usize {
        N_METRICS + self.cell_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.cell_mp_steps == 0 || self.tile_layers == 0 || self.hidden_dim == 0 || self.cell_embed_dim == 0 {
            return err("layer counts and widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return err("lr must be positive and weight_decay nonnegative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return err("batch_size and max_epochs must be positive".into());
        }
        if self.n_classes < 2 {
            return err("at least two classes required".into());
        }
        if self.class_map.len() != Stage::ALL.len() || self.class_map.iter().any(|&c| c >= self.n_classes) {
            return err(format!(
                "class_map must map each of {} stages to a class below {}",
                Stage::ALL.len(),
                self.n_classes
            ));
        }
        if !(self.cell_k > 0.0) || !(self.tile_k_default > 0.0) {
            return err("graph thresholds must be positive".into());
        }
        if self.tiles_per_roi == 0 || self.tile_size == 0 {
            return err("tiles_per_roi and tile_size must be positive".into());
        }
        if !(self.augment_keep > 0.0 && self.augment_keep <= 1.0) {
            return err("augment_keep must lie in (0, 1]".into());
        }
        if self.augment_thresholds.is_empty() || self.augment_thresholds.iter().any(|k| !(*k > 0.0)) {
            return err("augment_thresholds must be a nonempty list of positive values".into());
        }
        if !(0.0..1.0).contains(&self.pseudo_val_frac) {
            return err("pseudo_val_frac must lie in [0, 1)".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return err("train_frac must lie in (0, 1)".into());
        }
        if self.n_splits == 0 {
            return err("n_splits must be positive".into());
        }
        Ok(())
    }

    pub fn class_of(&self, stage: Stage) -> usize {
        self.class_map[stage.index()]
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_dimension_is_84() {
        assert_eq!(HierModelConfig::default().tile_feature_dim(), 84);
    }

    #[test]
    fn model_names_round_trip() {
        for name in ModelChoice::NAMES {
            let m: ModelChoice = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert!("gat".parse::<ModelChoice>().is_err());
    }

    #[test]
    fn config_validation() {
        HierModelConfig::default().validate().unwrap();
        let bad = HierModelConfig {
            class_map: vec![0, 1, 3],
            ..HierModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let merged = HierModelConfig {
            n_classes: 2,
            class_map: vec![0, 1, 1],
            ..HierModelConfig::default()
        };
        merged.validate().unwrap();
        assert_eq!(merged.class_of(Stage::PT3), 1);
    }
}
