//! Support-based prediction: average the support embeddings, concatenate
//! with the query embedding and map to a score.

use serde::{Deserialize, Serialize};

use crate::dataset::ListenerBatch;
use crate::error::{Result, SsipError};
use crate::fem::{ConditionInput, Embedding, FeatureSource};
use crate::model::{canonical_support, query_condition, ModelMode, SsipModel};

/// Embeddings of one listener's support pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    embeddings: Vec<Embedding>,
}

impl SupportSet {
    pub fn new(embeddings: Vec<Embedding>) -> Result<Self> {
        let first = embeddings.first().ok_or(SsipError::EmptySupport)?;
        if let Some(e) = embeddings.iter().find(|e| e.listener_id != first.listener_id) {
            return Err(SsipError::Config(format!(
                "support mixes listeners {} and {}",
                first.listener_id, e.listener_id
            )));
        }
        if let Some(e) = embeddings.iter().find(|e| e.vector.len() != first.vector.len()) {
            return Err(SsipError::Shape(format!(
                "support embedding {} has length {}, expected {}",
                e.sample_id,
                e.vector.len(),
                first.vector.len()
            )));
        }
        Ok(Self { embeddings })
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Element-wise mean of the support embeddings.
///
/// Embeddings are summed in sorted (sample id, vector) order so any
/// permutation of the set gives bitwise-identical output.
pub fn aggregate_support(set: &SupportSet) -> Result<Vec<f64>> {
    let mut order: Vec<&Embedding> = set.embeddings.iter().collect();
    if order.is_empty() {
        return Err(SsipError::EmptySupport);
    }
    order.sort_by(|a, b| {
        a.sample_id.cmp(&b.sample_id).then_with(|| {
            a.vector
                .iter()
                .zip(&b.vector)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut sum = vec![0.0; order[0].vector.len()];
    for e in &order {
        for (s, x) in sum.iter_mut().zip(&e.vector) {
            *s += x;
        }
    }
    let scale = 1.0 / order.len() as f64;
    Ok(sum.into_iter().map(|s| s * scale).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub listener_id: String,
    /// Head output on the 0–100 scale, unclamped.
    pub predicted_score: f64,
    /// `predicted_score` clamped to [0, 100].
    pub reported_score: f64,
}

impl Prediction {
    pub fn from_unit(sample_id: &str, listener_id: &str, unit: f64) -> Self {
        let predicted_score = 100.0 * unit;
        Self {
            sample_id: sample_id.to_owned(),
            listener_id: listener_id.to_owned(),
            predicted_score,
            reported_score: predicted_score.clamp(0.0, 100.0),
        }
    }
}

/// Linear head weights: `2·d₂` for support-conditioned models, `d₂` for
/// the baseline. Output is on the unit scale.
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights<'a> {
    pub weight: &'a [f64],
    pub bias: f64,
}

impl<'a> HeadWeights<'a> {
    pub fn of(model: &'a SsipModel) -> Self {
        Self {
            weight: &model.params.get(model.head.weight).data,
            bias: model.params.get(model.head.bias).data[0],
        }
    }
}

/// Score a query from the support aggregate: `100 · (w · [agg; q] + b)`.
pub fn predict_query(agg: &[f64], query: &Embedding, head: HeadWeights) -> Result<Prediction> {
    if agg.len() != query.vector.len() || head.weight.len() != agg.len() + query.vector.len() {
        return Err(SsipError::Shape(format!(
            "aggregate {} + query {} does not match head input {}",
            agg.len(),
            query.vector.len(),
            head.weight.len()
        )));
    }
    let z = agg.iter().chain(&query.vector);
    let unit = z.zip(head.weight).fold(head.bias, |acc, (x, w)| acc + x * w);
    Ok(Prediction::from_unit(&query.sample_id, &query.listener_id, unit))
}

/// Baseline scoring directly from the (audiogram-conditioned) embedding.
pub fn predict_direct(query: &Embedding, head: HeadWeights) -> Result<Prediction> {
    if head.weight.len() != query.vector.len() {
        return Err(SsipError::Shape(format!(
            "query {} does not match head input {}",
            query.vector.len(),
            head.weight.len()
        )));
    }
    let unit = query.vector.iter().zip(head.weight).fold(head.bias, |acc, (x, w)| acc + x * w);
    Ok(Prediction::from_unit(&query.sample_id, &query.listener_id, unit))
}

/// Inference over one episode: one aggregate shared by every query.
///
/// Query samples enter with the unknown-score sentinel; their targets are
/// never read.
pub fn forward_batch(batch: &ListenerBatch, model: &SsipModel, features: &dyn FeatureSource) -> Result<Vec<Prediction>> {
    let head = HeadWeights::of(model);
    let embed_query = |q| -> Result<Embedding> {
        let condition = query_condition(model, q)?;
        model.fem.embed_sample(&model.params, features, q, &condition)
    };
    match model.mode {
        ModelMode::Ssip => {
            let support = canonical_support(&batch.support)
                .into_iter()
                .map(|item| {
                    if !item.score.is_known() {
                        return Err(SsipError::UnknownScore);
                    }
                    model
                        .fem
                        .embed_sample(&model.params, features, &item.sample, &ConditionInput::from_score(item.score))
                })
                .collect::<Result<Vec<_>>>()?;
            let agg = aggregate_support(&SupportSet::new(support)?)?;
            batch
                .queries
                .iter()
                .map(|q| predict_query(&agg, &embed_query(q)?, head))
                .collect()
        }
        ModelMode::AudiogramBaseline => batch
            .queries
            .iter()
            .map(|q| predict_direct(&embed_query(q)?, head))
            .collect(),
    }
}
