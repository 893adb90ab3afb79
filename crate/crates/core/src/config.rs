//! Run configuration, config hashing and the train/evaluate pipeline shared
//! by the command line and the bindings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::{Ablation, AdapterKind, AUFormer, ModelConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossSettings;
use crate::moke::MoKEConfig;
use crate::trainer::{
    count_params, estimate_flops, evaluate_f1, subject_folds, train, EpochRecord, FlopReport, History, Metrics,
    ParamCount, TrainConfig,
};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub folds: usize,
    /// Fold held out for testing.
    pub test_fold: usize,
    pub fold_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            test_fold: 0,
            fold_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub moke: MoKEConfig,
    pub loss: LossSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: Ablation,
}

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted,
/// no whitespace).
pub fn canonical_hash<S: Serialize>(value: &S) -> String {
    let value = serde_json::to_value(value).expect("value serializes to JSON");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("ablation {key} expects on/off, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.moke.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.folds < 2 {
            return Err(Error::config("data.folds must be >= 2"));
        }
        if self.data.test_fold >= self.data.folds {
            return Err(Error::config("data.test_fold must be < data.folds"));
        }
        Ok(())
    }

    /// Applies one `key=value` ablation override, e.g. `collab=off` or
    /// `adapter=lora`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("ablation override must be key=value, got {spec:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let a = &mut self.ablation;
        match key {
            "petl" => a.petl = parse_switch(key, value)?,
            "collab" => a.collab = parse_switch(key, value)?,
            "mrf" => a.mrf = parse_switch(key, value)?,
            "ca" => a.ca = parse_switch(key, value)?,
            "gamma" => a.gamma = parse_switch(key, value)?,
            "margin" => a.margin = parse_switch(key, value)?,
            "adapter" => {
                a.adapter = match value {
                    "moke" => AdapterKind::Moke,
                    "bottleneck" => AdapterKind::Bottleneck,
                    "lora" => AdapterKind::Lora,
                    _ => return Err(Error::config(format!("unknown adapter {value:?}"))),
                }
            }
            _ => return Err(Error::config(format!("unknown ablation key {key:?}"))),
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn model_config(&self, num_aus: usize) -> ModelConfig {
        ModelConfig {
            vit: self.vit.clone(),
            moke: self.moke.clone(),
            num_aus,
            ablation: self.ablation.clone(),
        }
    }
}

/// Machine-readable summary of a run or an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub per_au_f1: Vec<f64>,
    pub avg_f1: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
    pub threshold: f64,
    pub loss_history: Vec<EpochRecord>,
    pub train_avg_f1: Option<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub learnable_params: usize,
    pub frozen_params: usize,
    pub learnable_ratio: f64,
    pub flops: FlopReport,
}

impl MetricsReport {
    pub fn new<T: crate::tensor::Scalar>(
        model: &AUFormer<T>,
        config_hash: String,
        test: &Metrics,
        threshold: f64,
        history: &History,
        train_metrics: Option<&Metrics>,
        sizes: (usize, usize),
    ) -> Self {
        let params: ParamCount = count_params(model);
        Self {
            config_hash,
            per_au_f1: test.per_au_f1.clone(),
            avg_f1: test.avg_f1,
            tp: test.tp.clone(),
            fp: test.fp.clone(),
            fn_: test.fn_.clone(),
            threshold,
            loss_history: history.epochs.clone(),
            train_avg_f1: train_metrics.map(|m| m.avg_f1),
            train_samples: sizes.0,
            test_samples: sizes.1,
            learnable_params: params.learnable,
            frozen_params: params.frozen,
            learnable_ratio: params.ratio,
            flops: estimate_flops(model),
        }
    }
}

pub struct RunOutcome {
    pub model: AUFormer<f32>,
    pub history: History,
    pub train_metrics: Metrics,
    pub test_metrics: Metrics,
    pub report: MetricsReport,
}

/// Subject-exclusive split of `data` according to `cfg.data`.
pub fn split_dataset(data: &Dataset, cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let subjects: Vec<u32> = data.samples.iter().map(|s| s.subject).collect();
    let folds = subject_folds(&subjects, cfg.folds, cfg.fold_seed)?;
    let (tr, te) = folds.split(&subjects, cfg.test_fold);
    Ok((data.subset(&tr), data.subset(&te)))
}

/// Splits, trains a freshly initialized model seeded by `train.seed`, and
/// evaluates on both sides of the split.
pub fn run_training(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (train_set, test_set) = split_dataset(data, &cfg.data)?;
    let mut model = AUFormer::<f32>::init(cfg.model_config(data.num_aus()), cfg.train.seed)?;
    let history = train(&mut model, &train_set, &cfg.train, &cfg.loss)?;
    let train_metrics = evaluate_f1(&model, &train_set, cfg.train.threshold)?;
    let test_metrics = evaluate_f1(&model, &test_set, cfg.train.threshold)?;
    let report = MetricsReport::new(
        &model,
        cfg.hash(),
        &test_metrics,
        cfg.train.threshold,
        &history,
        Some(&train_metrics),
        (train_set.samples.len(), test_set.samples.len()),
    );
    Ok(RunOutcome {
        model,
        history,
        train_metrics,
        test_metrics,
        report,
    })
}
