//! Training loop, evaluation, folds and accounting.

mod accounting;
mod folds;
mod metrics;
mod optim;

pub use accounting::{conv_macs, count_params, estimate_flops, FlopReport, ParamCount};
pub use folds::{subject_folds, FoldSpec};
pub use metrics::{f1_from_counts, Metrics};
pub use optim::{AdamW, Optimizer, ADAM_EPS, BETA1, BETA2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{AUFormer, Learnable, Prediction};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossSettings};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Prediction threshold for F1.
    pub threshold: f64,
    /// When set, the train set is evaluated after every epoch and training
    /// stops once its avg F1 reaches this value.
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            optimizer: Optimizer::Adamw,
            threshold: 0.5,
            target_train_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-epoch means over samples. `train_f1` is measured on the predictions
/// made during the epoch, before each step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mdwa: f64,
    pub wdi: f64,
    pub aux_mdwa: f64,
    pub train_f1: f64,
    /// End-of-epoch train avg F1, only computed when a target is set.
    pub eval_train_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,mdwa,wdi,aux_mdwa,train_f1,eval_train_f1\n");
        for e in &self.epochs {
            let eval = e.eval_train_f1.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{eval}\n",
                e.epoch, e.loss, e.mdwa, e.wdi, e.aux_mdwa, e.train_f1
            ));
        }
        s
    }
}

/// Use `AUFORMER_THREADS` workers when set, else hardware parallelism.
/// Returns the pool size in effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var("AUFORMER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("AUFORMER_THREADS must be a positive integer, got {v:?}")))?;
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

fn images<T: Scalar>(data: &Dataset) -> Vec<Tensor<T>> {
    data.samples.iter().map(|s| s.image.cast()).collect()
}

fn to_f64_rows<T: Scalar>(rows: &[&Tensor<T>]) -> Result<Tensor<f64>> {
    let n = rows[0].len();
    let data = rows.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).collect();
    Tensor::new(&[rows.len(), n], data)
}

fn labels_tensor(data: &Dataset, idx: &[usize]) -> Result<Tensor<f64>> {
    let n = data.num_aus();
    let vals = idx
        .iter()
        .flat_map(|&i| data.samples[i].labels.iter().map(|&l| l as f64))
        .collect();
    Tensor::new(&[idx.len(), n], vals)
}

/// Loss configuration for `model` with rates measured on `data`.
pub fn loss_config<T: Scalar>(model: &AUFormer<T>, data: &Dataset, settings: &LossSettings) -> Result<LossConfig> {
    let ab = &model.config.ablation;
    LossConfig::from_rates(&data.rates()?, settings, ab.gamma, ab.margin)
}

/// Trains the learnable set in place; the backbone is never written.
pub fn train<T: Scalar>(
    model: &mut AUFormer<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    settings: &LossSettings,
) -> Result<History> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.num_aus() != model.config.num_aus {
        return Err(Error::Data(format!(
            "dataset has {} labels, model predicts {}",
            data.num_aus(),
            model.config.num_aus
        )));
    }
    let loss_cfg = loss_config(model, data, settings)?;
    let imgs = images::<T>(data);
    let mut opt = AdamW::new(&model.learnable, cfg.learning_rate, cfg.weight_decay);
    let mut rng = Rng::derive(cfg.seed, 0x7a11);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut probs_seen = Vec::with_capacity(order.len());
        let mut labels_seen = Vec::with_capacity(order.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let fwd = batch
                .par_iter()
                .map(|&i| model.forward_cached(&imgs[i]))
                .collect::<Result<Vec<_>>>()?;
            let p = to_f64_rows(&fwd.iter().map(|(pr, _)| &pr.probs).collect::<Vec<_>>())?;
            let aux = if fwd[0].0.aux_probs.is_some() {
                let rows: Vec<&Tensor<T>> = fwd.iter().map(|(pr, _)| pr.aux_probs.as_ref().expect("aux")).collect();
                Some(to_f64_rows(&rows)?)
            } else {
                None
            };
            let y = labels_tensor(data, batch)?;
            let tl = total_loss(&p, aux.as_ref(), &y, &loss_cfg)?;
            if !tl.value.is_finite() || !tl.grad.all_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} step {step}: loss {} (mdwa {}, wdi {}, aux {})",
                    tl.value, tl.mdwa, tl.wdi, tl.aux_mdwa
                )));
            }
            let grads = batch_gradients(model, &fwd, &tl.grad, tl.aux_grad.as_ref());
            opt.update(&mut model.learnable, &grads);

            let b = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([tl.value, tl.mdwa, tl.wdi, tl.aux_mdwa]) {
                *s += v * b;
            }
            for (r, &i) in batch.iter().enumerate() {
                probs_seen.push(p.row(r).to_vec());
                labels_seen.push(data.samples[i].labels.clone());
            }
        }
        let n = order.len() as f64;
        let f1 = Metrics::from_predictions(&probs_seen, &labels_seen, cfg.threshold)?.avg_f1;
        let eval_train_f1 = match cfg.target_train_f1 {
            Some(_) => Some(evaluate_f1(model, data, cfg.threshold)?.avg_f1),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: sums[0] / n,
            mdwa: sums[1] / n,
            wdi: sums[2] / n,
            aux_mdwa: sums[3] / n,
            train_f1: f1,
            eval_train_f1,
        });
        if matches!((cfg.target_train_f1, eval_train_f1), (Some(t), Some(f)) if f >= t) {
            break;
        }
    }
    Ok(history)
}

/// Per-sample reverse passes, run in parallel and summed in sample order.
fn batch_gradients<T: Scalar>(
    model: &AUFormer<T>,
    fwd: &[(Prediction<T>, crate::collab::ModelCache<T>)],
    grad: &Tensor<f64>,
    aux_grad: Option<&Tensor<f64>>,
) -> Learnable<T> {
    let per_sample: Vec<Learnable<T>> = fwd
        .par_iter()
        .enumerate()
        .map(|(r, (_, cache))| {
            let gz: Vec<T> = grad.row(r).iter().map(|&v| T::of(v)).collect();
            let ga: Option<Vec<T>> = aux_grad.map(|a| a.row(r).iter().map(|&v| T::of(v)).collect());
            let mut g = model.learnable.zeros_like();
            model.backward(cache, &gz, ga.as_deref(), &mut g);
            g
        })
        .collect();
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().expect("nonempty batch");
    for g in iter {
        total.add_assign(&g);
    }
    total
}

/// Main-head probabilities per sample, in dataset order.
pub fn predict<T: Scalar>(model: &AUFormer<T>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let imgs = images::<T>(data);
    imgs.par_iter()
        .map(|img| Ok(model.forward(img)?.probs.data().iter().map(|v| v.as_f64()).collect()))
        .collect()
}

pub fn evaluate_f1<T: Scalar>(model: &AUFormer<T>, data: &Dataset, threshold: f64) -> Result<Metrics> {
    let probs = predict(model, data)?;
    let labels: Vec<Vec<u8>> = data.samples.iter().map(|s| s.labels.clone()).collect();
    Metrics::from_predictions(&probs, &labels, threshold)
}
