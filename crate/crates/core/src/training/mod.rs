//! Episode-based training with checkpoint selection on validation RMSE,
//! and evaluation of checkpoints on held-out listeners.

mod config;
mod optim;

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fixed_eval_episodes, EpisodeSampler, ListenerBatch, Sample};
use crate::error::{Result, SsipError};
use crate::fem::FeatureSource;
use crate::metrics::{MetricsReport, ScoredQuery};
use crate::model::{ModelMode, SsipModel};
use crate::spm::{forward_batch, Prediction};

pub use config::{BackboneConfig, TrainConfig};
pub use optim::{huber_grad, huber_loss, lr_at, Adam};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Content hashes and identities recorded with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_hash: Option<String>,
    pub curves_hash: Option<String>,
    pub backbone_checksum: Option<String>,
    pub fold_index: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: SsipModel,
    /// Epoch (0-based) whose weights were kept.
    pub epoch: usize,
    pub val_rmse: f64,
    pub val_ncc: Option<f64>,
    pub train_listeners: BTreeSet<String>,
    pub val_listeners: BTreeSet<String>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn param_checksum(&self) -> String {
        self.model.params.checksum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| SsipError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| SsipError::Format(format!("checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(SsipError::Format(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| SsipError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Listeners the checkpoint has seen during training or model selection.
    pub fn seen_listeners(&self) -> impl Iterator<Item = &String> {
        self.train_listeners.iter().chain(&self.val_listeners)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean unit-scale Huber loss over the epoch's episodes.
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_ncc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn listener_set(samples: &[Sample]) -> BTreeSet<String> {
    samples.iter().map(|s| s.listener_id.clone()).collect()
}

fn check_disjoint(a: &BTreeSet<String>, b: &BTreeSet<String>, what: &str) -> Result<()> {
    match a.intersection(b).next() {
        Some(l) => Err(SsipError::Leakage(format!("listener {l} appears in {what}"))),
        None => Ok(()),
    }
}

/// Train on `train`, select the epoch with the lowest RMSE on fixed
/// validation episodes from `val`.
///
/// `on_epoch` sees each epoch's log entry as soon as it is complete.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    features: &dyn FeatureSource,
    provenance: Provenance,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_listeners = listener_set(train);
    let val_listeners = listener_set(val);
    check_disjoint(&train_listeners, &val_listeners, "both training and validation data")?;

    let mut model = SsipModel::new(cfg.model.clone(), cfg.mode, cfg.seed)?;
    let mut sampler = EpisodeSampler::new(train, cfg.n_support, cfg.batch_size, cfg.seed)?;
    let val_episodes = fixed_eval_episodes(val, cfg.n_support, cfg.eval_seed)?;
    if val_episodes.is_empty() {
        return Err(SsipError::InsufficientSamples("no validation listeners".into()));
    }
    let n_train = train.iter().filter(|s| s.score.is_known()).count();
    let steps = (n_train / cfg.batch_size).max(1);
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d80f);

    let mut best: Option<(f64, Option<f64>, usize, crate::nn::ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut total = 0.0;
        for step in 0..steps {
            let batch = sampler.next_batch()?;
            let rng = (cfg.model.dropout > 0.0).then_some(&mut dropout_rng);
            let mut g = model.episode_gradient(&batch, features, cfg.huber_delta, rng)?;
            if !g.loss.is_finite() || !g.grads.all_finite() {
                return Err(SsipError::Divergence { epoch, step });
            }
            if cfg.clip_gradients {
                g.grads.clip_global_norm(cfg.grad_clip_norm);
            }
            adam.update(&mut model.params, &g.grads, lr);
            total += g.loss;
        }
        let val_eval = evaluate_episodes(&ModelPredictor::new(&model, features), &val_episodes, cfg.n_support, None)?;
        let entry = EpochLog {
            epoch,
            lr,
            steps,
            train_loss: total / steps as f64,
            val_rmse: val_eval.report.rmse,
            val_ncc: val_eval.report.ncc,
        };
        on_epoch(&entry);
        if best.as_ref().map_or(true, |b| entry.val_rmse < b.0) {
            best = Some((entry.val_rmse, entry.val_ncc, epoch, model.params.clone()));
        }
        log.push(entry);
    }
    let (val_rmse, val_ncc, epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: cfg.clone(),
            model,
            epoch,
            val_rmse,
            val_ncc,
            train_listeners,
            val_listeners,
            provenance,
        },
        log,
    })
}

/// Anything that scores the queries of an episode.
pub trait Predictor {
    fn predict(&self, batch: &ListenerBatch) -> Result<Vec<Prediction>>;
}

pub struct ModelPredictor<'a> {
    model: &'a SsipModel,
    features: &'a dyn FeatureSource,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a SsipModel, features: &'a dyn FeatureSource) -> Self {
        Self { model, features }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, batch: &ListenerBatch) -> Result<Vec<Prediction>> {
        forward_batch(batch, self.model, self.features)
    }
}

/// One line of a prediction output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub listener_id: String,
    pub n_support: usize,
    pub predicted_score: f64,
    pub reported_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<PredictionRecord>,
}

impl Evaluation {
    /// Scored queries (clamped predictions) for pooling across folds.
    pub fn scored_queries(&self) -> Vec<ScoredQuery> {
        scored_queries(&self.records)
    }
}

fn scored_queries(records: &[PredictionRecord]) -> Vec<ScoredQuery> {
    records
        .iter()
        .filter_map(|r| {
            r.target.map(|t| ScoredQuery {
                listener_id: r.listener_id.clone(),
                prediction: r.reported_score,
                target: t,
            })
        })
        .collect()
}

/// Score every episode and pool the clamped predictions.
pub fn evaluate_episodes(
    predictor: &dyn Predictor,
    episodes: &[ListenerBatch],
    n_support: usize,
    fold_index: Option<u8>,
) -> Result<Evaluation> {
    let mut records = Vec::new();
    for batch in episodes {
        let preds = predictor.predict(batch)?;
        if preds.len() != batch.queries.len() {
            return Err(SsipError::Shape(format!(
                "{} predictions for {} queries",
                preds.len(),
                batch.queries.len()
            )));
        }
        for (p, t) in preds.into_iter().zip(&batch.query_targets) {
            records.push(PredictionRecord {
                sample_id: p.sample_id,
                listener_id: p.listener_id,
                n_support,
                predicted_score: p.predicted_score,
                reported_score: p.reported_score,
                target: t.known(),
            });
        }
    }
    let report = MetricsReport::from_queries(&scored_queries(&records), n_support, true, fold_index)?;
    Ok(Evaluation { report, records })
}

/// Evaluate a checkpoint on test listeners with fixed episodes.
///
/// Baseline checkpoints ignore support, so with `n_support` of zero every
/// labeled test sample becomes a query.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &[Sample],
    n_support: usize,
    seed: u64,
    features: &dyn FeatureSource,
) -> Result<Evaluation> {
    let test_listeners = listener_set(test);
    let seen: BTreeSet<String> = ckpt.seen_listeners().cloned().collect();
    check_disjoint(&test_listeners, &seen, "both the checkpoint's training/validation data and the test set")?;
    if n_support == 0 && ckpt.model.mode == ModelMode::Ssip {
        return Err(SsipError::Config("support-conditioned evaluation needs n_support >= 1".into()));
    }
    let labeled: Vec<Sample> = test.iter().filter(|s| s.score.is_known()).cloned().collect();
    let episodes = fixed_eval_episodes(&labeled, n_support, seed)?;
    evaluate_episodes(
        &ModelPredictor::new(&ckpt.model, features),
        &episodes,
        n_support,
        ckpt.provenance.fold_index,
    )
}
