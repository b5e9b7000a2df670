//! Feature extraction: frozen backbone layers are squeezed over time, joined
//! by a condition token, fused across layers and pooled into one embedding.

mod backbone;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::Score;
use crate::dataset::Sample;
use crate::error::{Result, SsipError};
use crate::nn::{sinusoidal_positions, Dropout, Linear, Matrix, ParamStore, Tape, TransformerLayer, Var};
use crate::signal::{load_waveform, normalize_to_spl, LevelReference, TARGET_LEVEL_DB_SPL};

pub use backbone::{
    extract_backbone_features, BackboneExtractor, BackboneOutput, FeatureStoreBackbone, ToyBackbone,
    ToyBackboneConfig, BACKBONE_DIR_ENV,
};

/// Audiogram frequencies used by the baseline condition token.
pub const BASELINE_AUDIOGRAM_FREQUENCIES: [u32; 8] = [250, 500, 1000, 2000, 3000, 4000, 6000, 8000];

/// What the condition token is built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConditionMode {
    Score,
    Audiogram { frequencies: Vec<u32> },
}

impl ConditionMode {
    pub fn baseline() -> Self {
        ConditionMode::Audiogram {
            frequencies: BASELINE_AUDIOGRAM_FREQUENCIES.to_vec(),
        }
    }

    fn input_width(&self) -> usize {
        match self {
            ConditionMode::Score => 1,
            ConditionMode::Audiogram { frequencies } => frequencies.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FemConfig {
    pub backbone_layers: usize,
    pub backbone_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub temporal_layers: usize,
    pub fusion_layers: usize,
    pub condition: ConditionMode,
}

impl Default for FemConfig {
    fn default() -> Self {
        Self {
            backbone_layers: 32,
            backbone_dim: 1280,
            embed_dim: 384,
            heads: 8,
            ff_dim: 4 * 384,
            dropout: 0.1,
            temporal_layers: 1,
            fusion_layers: 1,
            condition: ConditionMode::Score,
        }
    }
}

impl FemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_layers == 0 || self.backbone_dim == 0 || self.embed_dim == 0 || self.ff_dim == 0 {
            return Err(SsipError::Config("feature extractor dimensions must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(SsipError::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SsipError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.condition.input_width() == 0 {
            return Err(SsipError::Config("audiogram condition needs at least one frequency".into()));
        }
        Ok(())
    }
}

/// Input to the condition projection.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionInput {
    KnownScore(Score),
    UnknownScore,
    /// Thresholds in dB HL at the configured frequencies.
    Audiogram(Vec<f64>),
}

impl ConditionInput {
    /// The condition a sample contributes in score mode.
    pub fn from_score(score: Score) -> Self {
        if score.is_known() {
            ConditionInput::KnownScore(score)
        } else {
            ConditionInput::UnknownScore
        }
    }

    /// Raw projection input: scores divided by 100, the sentinel kept at -1,
    /// audiograms divided by 100.
    fn encode(&self, mode: &ConditionMode) -> Result<Vec<f64>> {
        match (self, mode) {
            (ConditionInput::KnownScore(s), ConditionMode::Score) => match s.known() {
                Some(v) => Ok(vec![v / 100.0]),
                None => Ok(vec![Score::UNKNOWN.value()]),
            },
            (ConditionInput::UnknownScore, ConditionMode::Score) => Ok(vec![Score::UNKNOWN.value()]),
            (ConditionInput::Audiogram(v), ConditionMode::Audiogram { frequencies }) => {
                if v.len() != frequencies.len() {
                    return Err(SsipError::Shape(format!(
                        "audiogram has {} values, configured {} frequencies",
                        v.len(),
                        frequencies.len()
                    )));
                }
                Ok(v.iter().map(|x| x / 100.0).collect())
            }
            (ConditionInput::Audiogram(_), ConditionMode::Score) => Err(SsipError::Shape(
                "audiogram condition given to a score-conditioned model".into(),
            )),
            (_, ConditionMode::Audiogram { .. }) => Err(SsipError::Shape(
                "score condition given to an audiogram-conditioned model".into(),
            )),
        }
    }
}

/// A fixed-length embedding of one (audio, condition) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub listener_id: String,
    pub sample_id: String,
}

/// Trainable part of the feature extraction module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub config: FemConfig,
    pub projection: Linear,
    pub temporal: Vec<TransformerLayer>,
    pub condition: Linear,
    pub fusion: Vec<TransformerLayer>,
}

fn dropout<'r>(rate: f64, rng: &'r mut Option<&mut ChaCha8Rng>) -> Option<Dropout<'r>> {
    rng.as_deref_mut().map(|rng| Dropout { rate, rng })
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: FemConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d1, d2) = (config.backbone_dim, config.embed_dim);
        let projection = Linear::new(store, "fem.projection", d1, d2, rng);
        let temporal = (0..config.temporal_layers)
            .map(|i| TransformerLayer::new(store, &format!("fem.temporal{i}"), d2, config.heads, config.ff_dim, rng))
            .collect();
        let condition = Linear::new(store, "fem.condition", config.condition.input_width(), d2, rng);
        let fusion = (0..config.fusion_layers)
            .map(|i| TransformerLayer::new(store, &format!("fem.fusion{i}"), d2, config.heads, config.ff_dim, rng))
            .collect();
        Ok(Self {
            config,
            projection,
            temporal,
            condition,
            fusion,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_backbone(&self, bo: &BackboneOutput) -> Result<()> {
        if bo.n_layers() != self.config.backbone_layers || bo.dim() != self.config.backbone_dim {
            return Err(SsipError::Shape(format!(
                "backbone output is {} layers x {} channels, model expects {} x {}",
                bo.n_layers(),
                bo.dim(),
                self.config.backbone_layers,
                self.config.backbone_dim
            )));
        }
        Ok(())
    }

    /// One `1 × d₂` node per backbone layer. `rng` enables dropout.
    pub fn temporal_encode_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        bo: &'a BackboneOutput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        self.check_backbone(bo)?;
        let positions = tape.constant(sinusoidal_positions(bo.frames(), self.config.embed_dim));
        let mut out = Vec::with_capacity(bo.n_layers());
        for layer in bo.layers() {
            let x = tape.constant_ref(layer);
            let mut h = self.projection.forward(tape, x);
            h = tape.add(h, positions);
            for t in &self.temporal {
                h = t.forward(tape, h, dropout(self.config.dropout, &mut rng));
            }
            out.push(tape.mean_rows(h));
        }
        Ok(out)
    }

    pub fn project_condition_on(&self, tape: &mut Tape, c: &ConditionInput) -> Result<Var> {
        let raw = c.encode(&self.config.condition)?;
        let x = tape.constant(Matrix::row_vector(raw));
        Ok(self.condition.forward(tape, x))
    }

    /// Layer transformer and mean pooling over `L + 1` tokens.
    pub fn fuse_layers_on(&self, tape: &mut Tape, tokens: &[Var], mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let expected = self.config.backbone_layers + 1;
        if tokens.len() != expected {
            return Err(SsipError::Shape(format!(
                "layer fusion expects {expected} tokens, got {}",
                tokens.len()
            )));
        }
        let mut h = tape.concat_rows(tokens);
        for f in &self.fusion {
            h = f.forward(tape, h, dropout(self.config.dropout, &mut rng));
        }
        Ok(tape.mean_rows(h))
    }

    pub fn embed_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        bo: &'a BackboneOutput,
        c: &ConditionInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut tokens = self.temporal_encode_on(tape, bo, rng.as_deref_mut())?;
        tokens.push(self.project_condition_on(tape, c)?);
        self.fuse_layers_on(tape, &tokens, rng)
    }

    /// Inference-mode temporal encoding: `L` vectors of length `d₂`.
    pub fn temporal_encode(&self, params: &ParamStore, bo: &BackboneOutput) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(params);
        let vars = self.temporal_encode_on(&mut tape, bo, None)?;
        Ok(vars.into_iter().map(|v| tape.value(v).data.clone()).collect())
    }

    pub fn project_condition(&self, params: &ParamStore, c: &ConditionInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let v = self.project_condition_on(&mut tape, c)?;
        Ok(tape.value(v).data.clone())
    }

    pub fn fuse_layers(&self, params: &ParamStore, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d2 = self.config.embed_dim;
        if let Some(bad) = vectors.iter().find(|v| v.len() != d2) {
            return Err(SsipError::Shape(format!("token of length {} where {d2} expected", bad.len())));
        }
        let mut tape = Tape::new(params);
        let tokens: Vec<Var> = vectors
            .iter()
            .map(|v| tape.constant(Matrix::row_vector(v.clone())))
            .collect();
        let out = self.fuse_layers_on(&mut tape, &tokens, None)?;
        Ok(tape.value(out).data.clone())
    }

    pub fn embed(&self, params: &ParamStore, bo: &BackboneOutput, c: &ConditionInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let v = self.embed_on(&mut tape, bo, c, None)?;
        Ok(tape.value(v).data.clone())
    }

    pub fn embed_sample(
        &self,
        params: &ParamStore,
        features: &dyn FeatureSource,
        sample: &Sample,
        c: &ConditionInput,
    ) -> Result<Embedding> {
        let bo = features.features(sample)?;
        let vector = self.embed(params, &bo, c)?;
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(SsipError::Range(format!("non-finite embedding for {}", sample.sample_id)));
        }
        Ok(Embedding {
            vector,
            listener_id: sample.listener_id.clone(),
            sample_id: sample.sample_id.clone(),
        })
    }
}

/// Supplies backbone features for manifest samples.
pub trait FeatureSource: Send + Sync {
    fn features(&self, sample: &Sample) -> Result<Arc<BackboneOutput>>;
}

/// Loads audio, normalizes it to the target level, runs the backbone and
/// memoizes the result per sample id.
pub struct FeatureCache {
    backbone: Arc<dyn BackboneExtractor>,
    reference: LevelReference,
    target_db: f64,
    cache: Mutex<HashMap<String, Arc<BackboneOutput>>>,
}

impl FeatureCache {
    pub fn new(backbone: Arc<dyn BackboneExtractor>) -> Self {
        Self {
            backbone,
            reference: LevelReference::default(),
            target_db: TARGET_LEVEL_DB_SPL,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_reference(mut self, reference: LevelReference) -> Self {
        self.reference = reference;
        self
    }

    pub fn backbone(&self) -> &dyn BackboneExtractor {
        self.backbone.as_ref()
    }

    /// Register features directly, bypassing audio loading.
    pub fn insert(&self, sample_id: &str, features: BackboneOutput) {
        self.lock().insert(sample_id.to_owned(), Arc::new(features));
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<BackboneOutput>>> {
        self.cache.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl FeatureSource for FeatureCache {
    fn features(&self, sample: &Sample) -> Result<Arc<BackboneOutput>> {
        if let Some(hit) = self.lock().get(&sample.sample_id) {
            return Ok(Arc::clone(hit));
        }
        let raw = load_waveform(&sample.audio_path)?;
        let w = normalize_to_spl(&raw, self.target_db, self.reference)?;
        let out = Arc::new(extract_backbone_features(self.backbone.as_ref(), &sample.sample_id, &w)?);
        self.lock().insert(sample.sample_id.clone(), Arc::clone(&out));
        Ok(out)
    }
}
