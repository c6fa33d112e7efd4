//! Experiment plumbing: data collection, pretraining, closed-loop
//! evaluation, tension metrics and the method sweep.

mod collect;
mod evaluate;
mod metrics;
pub mod plot;
mod sweep;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{train_mae, Architecture, BodySchemaNet, Normalizer, SensorSample, TrainConfig};
use crate::retrain::SamplerRanges;
use crate::sim::PlantConfig;

pub use collect::{
    collect_post_growth, collect_pretraining, dataset_csv, parse_dataset_csv, post_growth_commands, read_dataset,
    write_dataset, CollectionConfig,
};
pub use evaluate::{
    default_targets, evaluate_control, evaluate_with, Controller, Evaluation, EvaluationConfig, NetworkController,
    OracleController, TargetRecord,
};
pub use metrics::{tension_similarity, tension_spread};
pub use sweep::{
    derive_seed, run_sweep, CellKey, RunOptions, SweepConfig, SweepMethod, SweepResult, SweepRow,
};

/// Reads a TOML config file; absent keys take their defaults.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub collection: CollectionConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
    /// Fraction of the collected samples held out for the quality report.
    pub holdout_fraction: f64,
    /// Network initialization seed.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            collection: CollectionConfig::default(),
            train: TrainConfig::default(),
            architecture: Architecture::default(),
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Held-out reconstruction errors of a pretrained network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelQuality {
    /// Mean |θ_est − θ| with mask `FL`, rad.
    pub theta_error: f64,
    /// Mean per-muscle |l_pred − l| with mask `ThetaF`, m.
    pub length_error: f64,
    /// Mean per-muscle |f_pred − f| with mask `LTheta`, N.
    pub tension_error: f64,
}

pub fn model_quality(net: &BodySchemaNet, data: &[SensorSample]) -> Result<ModelQuality> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric("model quality over no samples".into()));
    }
    let (mut th, mut len, mut ten) = (0.0, 0.0, 0.0);
    for s in data {
        let est = net.estimate_joint_angles(&s.tension, &s.length)?;
        th += est.iter().zip(&s.theta).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.theta.len() as f64;
        let l = net.predict_muscle_length(&s.theta, &s.tension)?;
        len += l.iter().zip(&s.length).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.length.len() as f64;
        let f = net.predict_tension(&s.theta, &s.length)?;
        ten += f.iter().zip(&s.tension).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.tension.len() as f64;
    }
    let n = data.len() as f64;
    Ok(ModelQuality {
        theta_error: th / n,
        length_error: len / n,
        tension_error: ten / n,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: BodySchemaNet,
    pub ranges: SamplerRanges,
    pub train: Vec<SensorSample>,
    pub holdout: Vec<SensorSample>,
    pub quality: Option<ModelQuality>,
    pub loss_history: Vec<f64>,
}

/// Babbling, normalizer fit and MAE training for the old network.
pub fn pretrain(plant: &PlantConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
    }
    let data = collect_pretraining(plant, &cfg.collection)?;
    let n_hold = ((data.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(data.len() - 1);
    let (train, holdout) = data.split_at(data.len() - n_hold);
    let normalizer = Normalizer::fit(train)?;
    let mut net = BodySchemaNet::new(1, plant.n_muscles(), cfg.architecture, normalizer, cfg.seed)?;
    let loss_history = train_mae(&mut net, train, &cfg.train)?;
    net.metadata.insert("seed".into(), cfg.seed.to_string());
    net.metadata.insert("collection_seed".into(), cfg.collection.seed.to_string());
    net.metadata.insert("train_seed".into(), cfg.train.seed.to_string());
    let quality = if holdout.is_empty() { None } else { Some(model_quality(&net, holdout)?) };
    Ok(PretrainOutcome {
        net,
        ranges: SamplerRanges::from_dataset(train)?,
        train: train.to_vec(),
        holdout: holdout.to_vec(),
        quality,
        loss_history,
    })
}
