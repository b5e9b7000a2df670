//! The full network: feature extractor plus prediction head, with the
//! episode-level forward pass used for training.
//!
//! The head works on unit-scale scores (`score / 100`); predictions are
//! reported on the 0–100 scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::Score;
use crate::dataset::{ListenerBatch, Sample, SupportItem};
use crate::error::{Result, SsipError};
use crate::fem::{ConditionInput, ConditionMode, FeatureExtractor, FeatureSource, FemConfig};
use crate::nn::{Gradients, Linear, Matrix, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Support-conditioned prediction.
    #[default]
    Ssip,
    /// Audio plus audiogram, no support samples.
    AudiogramBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsipModel {
    pub mode: ModelMode,
    pub fem: FeatureExtractor,
    pub head: Linear,
    pub params: ParamStore,
}

/// Canonical support order: by sample id, then score.
pub(crate) fn canonical_support(support: &[SupportItem]) -> Vec<&SupportItem> {
    let mut items: Vec<&SupportItem> = support.iter().collect();
    items.sort_by(|a, b| {
        a.sample
            .sample_id
            .cmp(&b.sample.sample_id)
            .then(a.score.value().total_cmp(&b.score.value()))
    });
    items
}

/// Audiogram thresholds of `sample` at the model's frequencies.
pub(crate) fn audiogram_condition(sample: &Sample, mode: &ConditionMode) -> Result<ConditionInput> {
    let ConditionMode::Audiogram { frequencies } = mode else {
        return Err(SsipError::Config("model is not audiogram-conditioned".into()));
    };
    let audiogram = sample.audiogram.as_ref().ok_or_else(|| SsipError::IncompleteAudiogram {
        record: Some(sample.sample_id.clone()),
        missing: frequencies.first().copied().unwrap_or_default(),
    })?;
    let values = audiogram.vector(frequencies).map_err(|e| match e {
        SsipError::IncompleteAudiogram { missing, .. } => SsipError::IncompleteAudiogram {
            record: Some(sample.sample_id.clone()),
            missing,
        },
        other => other,
    })?;
    Ok(ConditionInput::Audiogram(values))
}

/// Result of one training episode.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    /// Mean Huber loss over the queries (unit scale).
    pub loss: f64,
    pub grads: Gradients,
    /// Unclamped head outputs on the 0–100 scale.
    pub predictions: Vec<f64>,
}

impl SsipModel {
    /// Deterministically initialized model. Baseline mode forces an
    /// audiogram condition token.
    pub fn new(mut config: FemConfig, mode: ModelMode, seed: u64) -> Result<Self> {
        match mode {
            ModelMode::Ssip => {
                if config.condition != ConditionMode::Score {
                    return Err(SsipError::Config("support-conditioned model needs a score condition".into()));
                }
            }
            ModelMode::AudiogramBaseline => {
                if config.condition == ConditionMode::Score {
                    config.condition = ConditionMode::baseline();
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fem = FeatureExtractor::new(&mut params, config, &mut rng)?;
        let d2 = fem.embed_dim();
        let head_in = match mode {
            ModelMode::Ssip => 2 * d2,
            ModelMode::AudiogramBaseline => d2,
        };
        let head = Linear::new(&mut params, "head", head_in, 1, &mut rng);
        // Start predictions mid-scale.
        params.get_mut(head.bias).set(0, 0, 0.5);
        Ok(Self {
            mode,
            fem,
            head,
            params,
        })
    }

    pub fn config(&self) -> &FemConfig {
        &self.fem.config
    }

    pub fn embed_dim(&self) -> usize {
        self.fem.embed_dim()
    }

    /// Head outputs (`queries × 1`, unit scale) for one episode.
    ///
    /// Support embeddings are summed in canonical order, so the result does
    /// not depend on how the support set is ordered.
    pub fn episode_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        batch: &ListenerBatch,
        features: &'a [std::sync::Arc<crate::fem::BackboneOutput>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.queries.is_empty() {
            return Err(SsipError::EmptyInput(format!("episode for {} has no queries", batch.listener_id)));
        }
        let support = canonical_support(&batch.support);
        let n_support = match self.mode {
            ModelMode::Ssip => support.len(),
            ModelMode::AudiogramBaseline => 0,
        };
        let mut queries = Vec::with_capacity(batch.queries.len());
        for (i, q) in batch.queries.iter().enumerate() {
            let condition = match self.mode {
                ModelMode::Ssip => ConditionInput::UnknownScore,
                ModelMode::AudiogramBaseline => audiogram_condition(q, &self.fem.config.condition)?,
            };
            let bo = &features[n_support + i];
            queries.push(self.fem.embed_on(tape, bo, &condition, rng.as_deref_mut())?);
        }
        let q = tape.concat_rows(&queries);
        let head_input = match self.mode {
            ModelMode::Ssip => {
                if support.is_empty() {
                    return Err(SsipError::EmptySupport);
                }
                let mut embedded = Vec::with_capacity(support.len());
                for (i, item) in support.iter().enumerate() {
                    let condition = ConditionInput::from_score(item.score);
                    if !item.score.is_known() {
                        return Err(SsipError::UnknownScore);
                    }
                    embedded.push(self.fem.embed_on(tape, &features[i], &condition, rng.as_deref_mut())?);
                }
                let stacked = tape.concat_rows(&embedded);
                let agg = tape.mean_rows(stacked);
                let repeated = tape.concat_rows(&vec![agg; queries.len()]);
                tape.concat_cols(&[repeated, q])
            }
            ModelMode::AudiogramBaseline => q,
        };
        Ok(self.head.forward(tape, head_input))
    }

    /// Backbone features in the order [`SsipModel::episode_on`] reads them:
    /// canonical support first (ssip mode only), then queries.
    pub fn episode_features(
        &self,
        batch: &ListenerBatch,
        source: &dyn FeatureSource,
    ) -> Result<Vec<std::sync::Arc<crate::fem::BackboneOutput>>> {
        let mut out = Vec::with_capacity(batch.len());
        if self.mode == ModelMode::Ssip {
            for item in canonical_support(&batch.support) {
                out.push(source.features(&item.sample)?);
            }
        }
        for q in &batch.queries {
            out.push(source.features(q)?);
        }
        Ok(out)
    }

    /// Mean Huber loss over the episode's queries and its parameter
    /// gradients. Targets are divided by 100; `rng` enables dropout.
    pub fn episode_gradient(
        &self,
        batch: &ListenerBatch,
        source: &dyn FeatureSource,
        huber_delta: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EpisodeGradient> {
        let targets = batch
            .query_targets
            .iter()
            .map(|t| t.known().map(|v| v / 100.0).ok_or(SsipError::UnknownScore))
            .collect::<Result<Vec<f64>>>()?;
        let features = self.episode_features(batch, source)?;
        let mut tape = Tape::new(&self.params);
        let out = self.episode_on(&mut tape, batch, &features, rng)?;
        let h = tape.value(out);
        let m = targets.len() as f64;
        let mut loss = 0.0;
        let mut seed = Matrix::zeros(h.rows, 1);
        for (i, t) in targets.iter().enumerate() {
            let e = h.get(i, 0) - t;
            loss += crate::training::huber_loss(e, 0.0, huber_delta);
            seed.set(i, 0, crate::training::huber_grad(e, huber_delta) / m);
        }
        let predictions = h.data.iter().map(|x| 100.0 * x).collect();
        let mut grads = self.params.zeros_like();
        tape.backward(&[(out, seed)], &mut grads);
        Ok(EpisodeGradient {
            loss: loss / m,
            grads,
            predictions,
        })
    }
}

/// Query condition used for a sample in each mode (support uses its score).
pub fn query_condition(model: &SsipModel, sample: &Sample) -> Result<ConditionInput> {
    match model.mode {
        ModelMode::Ssip => Ok(ConditionInput::from_score(Score::UNKNOWN)),
        ModelMode::AudiogramBaseline => audiogram_condition(sample, &model.fem.config.condition),
    }
}
