//! End-to-end procedures: converting CPC-layout metadata into a calibrated
//! manifest with fold files, re-calibrating manifests, and the
//! support-count sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{average_hearing_loss, calibrate_score, Audiogram, CalibrationCurveSet, Score};
use crate::dataset::{
    group_by_listener, load_manifest, split_by_listener, three_fold_specs, write_manifest, RoleSizes, Sample, SplitSpec,
};
use crate::error::{Result, SsipError};
use crate::fem::FeatureSource;
use crate::fsutil::{create_dir_all, write_json_pretty};
use crate::metrics::{summarize_folds, MetricsReport};
use crate::model::ModelMode;
use crate::signal::{
    load_waveform_with_encoding, normalize_to_spl, rms_level_db, write_waveform, LevelReference, TARGET_LEVEL_DB_SPL,
};
use crate::training::{evaluate, train, Checkpoint, EpochLog, Evaluation, Provenance, TrainConfig};

#[derive(Debug, Deserialize)]
struct CpcListener {
    audiogram_cfs: Option<Vec<u32>>,
    audiogram_levels_l: Option<Vec<f64>>,
    audiogram_levels_r: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct CpcScore {
    signal: String,
    listener: String,
    #[serde(default)]
    system: String,
    correctness: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))
}

/// Both ears averaged per frequency.
fn listener_audiogram(listener: &CpcListener, record: &str) -> Result<Audiogram> {
    let incomplete = || SsipError::IncompleteAudiogram {
        record: Some(record.to_owned()),
        missing: crate::calibration::AVERAGE_HL_FREQUENCIES[0],
    };
    let (Some(cfs), Some(left), Some(right)) = (
        &listener.audiogram_cfs,
        &listener.audiogram_levels_l,
        &listener.audiogram_levels_r,
    ) else {
        return Err(incomplete());
    };
    if cfs.len() != left.len() || cfs.len() != right.len() {
        return Err(SsipError::Format(format!(
            "{record}: audiogram has {} frequencies but {}/{} ear levels",
            cfs.len(),
            left.len(),
            right.len()
        )));
    }
    let audiogram = Audiogram::new(cfs.iter().zip(left.iter().zip(right)).map(|(&f, (l, r))| (f, (l + r) / 2.0)))?;
    match average_hearing_loss(&audiogram) {
        Ok(_) => Ok(audiogram),
        Err(SsipError::IncompleteAudiogram { missing, .. }) => Err(SsipError::IncompleteAudiogram {
            record: Some(record.to_owned()),
            missing,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub curves: CalibrationCurveSet,
    pub reference: LevelReference,
    pub target_db: f64,
    /// Seed of the listener shuffle behind the fold windows.
    pub fold_seed: u64,
    /// Defaults to the 23/3/5 structure when the listener count allows it,
    /// otherwise to those proportions rescaled.
    pub role_sizes: Option<RoleSizes>,
    /// Signal directory; defaults to `<cpc_dir>/signals`.
    pub signals_dir: Option<PathBuf>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            curves: CalibrationCurveSet::builtin_default(),
            reference: LevelReference::default(),
            target_db: TARGET_LEVEL_DB_SPL,
            fold_seed: 0,
            role_sizes: None,
            signals_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest_path: PathBuf,
    pub fold_paths: Vec<PathBuf>,
    pub samples: Vec<Sample>,
    pub folds: Vec<SplitSpec>,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.jsonl")
}

pub fn fold_path(out_dir: &Path, fold_index: u8) -> PathBuf {
    out_dir.join("folds").join(format!("fold{fold_index}.json"))
}

/// Move every labeled sample's score to `target_db`.
///
/// Samples need an audiogram and a level; unlabeled samples pass through.
pub fn calibrate_samples(samples: &[Sample], curves: &CalibrationCurveSet, target_db: f64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            if !s.score.is_known() {
                return Ok(s.clone());
            }
            let l0 = s
                .effective_score_level()
                .ok_or_else(|| SsipError::Format(format!("sample {} has no level to calibrate from", s.sample_id)))?;
            let audiogram = s.audiogram.as_ref().ok_or_else(|| SsipError::IncompleteAudiogram {
                record: Some(s.sample_id.clone()),
                missing: crate::calibration::AVERAGE_HL_FREQUENCIES[0],
            })?;
            let hl = average_hearing_loss(audiogram).map_err(|e| match e {
                SsipError::IncompleteAudiogram { missing, .. } => SsipError::IncompleteAudiogram {
                    record: Some(s.sample_id.clone()),
                    missing,
                },
                other => other,
            })?;
            Ok(Sample {
                score: calibrate_score(s.score, l0, target_db, hl, curves)?,
                score_level: Some(target_db),
                ..s.clone()
            })
        })
        .collect()
}

fn default_role_sizes(n_listeners: usize) -> Result<RoleSizes> {
    if n_listeners == RoleSizes::REFERENCE.total() {
        Ok(RoleSizes::REFERENCE)
    } else {
        RoleSizes::scaled_for(n_listeners)
    }
}

/// Convert a CPC-layout directory into `out_dir`: level-normalized mono
/// audio under `audio/`, a calibrated `manifest.jsonl` and three fold files.
///
/// Output depends only on the inputs, so re-running is a no-op.
pub fn prepare(cpc_dir: &Path, out_dir: &Path, opts: &PrepareOptions) -> Result<Prepared> {
    let listeners: BTreeMap<String, CpcListener> = read_json(&cpc_dir.join("metadata").join("listeners.json"))?;
    let scores: Vec<CpcScore> = read_json(&cpc_dir.join("metadata").join("scores.json"))?;
    if scores.is_empty() {
        return Err(SsipError::EmptyInput("scores.json has no records".into()));
    }
    let signals_dir = opts.signals_dir.clone().unwrap_or_else(|| cpc_dir.join("signals"));
    let audio_dir = out_dir.join("audio");
    create_dir_all(&audio_dir)?;

    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(scores.len());
    for record in &scores {
        if !seen.insert(record.signal.clone()) {
            return Err(SsipError::DuplicateId(record.signal.clone()));
        }
        let listener = listeners.get(&record.listener).ok_or_else(|| {
            SsipError::Format(format!("{}: listener {} is not in listeners.json", record.signal, record.listener))
        })?;
        let audiogram = listener_audiogram(listener, &record.signal)?;
        let src = signals_dir.join(format!("{}.wav", record.signal));
        let (raw, encoding) = load_waveform_with_encoding(&src)?;
        let level = rms_level_db(&raw, opts.reference)?;
        let normalized = normalize_to_spl(&raw, opts.target_db, opts.reference)?;
        let rel = PathBuf::from("audio").join(format!("{}.wav", record.signal));
        write_waveform(out_dir.join(&rel), &normalized, encoding)?;

        let mut sample = Sample::new(&record.signal, &record.listener, Score::new(record.correctness)?);
        sample.system_id = record.system.clone();
        sample.audio_path = rel;
        sample.audiogram = Some(audiogram);
        sample.original_level = Some(level);
        samples.push(sample);
    }
    let mut samples = calibrate_samples(&samples, &opts.curves, opts.target_db)?;
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let listener_ids: Vec<String> = group_by_listener(&samples).into_keys().collect();
    let sizes = match opts.role_sizes {
        Some(s) => s,
        None => default_role_sizes(listener_ids.len())?,
    };
    let folds = three_fold_specs(&listener_ids, sizes, opts.fold_seed)?;
    for spec in &folds {
        let splits = split_by_listener(&samples, spec)?;
        let tag = |role: &str| format!("fold{}:{role}", spec.fold_index);
        let ids = |set: &[Sample]| set.iter().map(|s| s.sample_id.clone()).collect::<BTreeSet<_>>();
        let (train, val, test) = (ids(&splits.train), ids(&splits.val), ids(&splits.test));
        for s in &mut samples {
            if train.contains(&s.sample_id) {
                s.fold_tags.insert(tag("train"));
            } else if val.contains(&s.sample_id) {
                s.fold_tags.insert(tag("val"));
            } else if test.contains(&s.sample_id) {
                s.fold_tags.insert(tag("test"));
            }
        }
    }

    let manifest = manifest_path(out_dir);
    write_manifest(&manifest, &samples)?;
    create_dir_all(&out_dir.join("folds"))?;
    let mut fold_paths = Vec::new();
    for spec in &folds {
        let path = fold_path(out_dir, spec.fold_index);
        spec.save(&path)?;
        fold_paths.push(path);
    }
    Ok(Prepared {
        samples: load_manifest(&manifest)?,
        manifest_path: manifest,
        fold_paths,
        folds: folds.to_vec(),
    })
}

/// Metrics for one support count, over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_support: usize,
    pub mean_rmse: f64,
    pub mean_ncc: Option<f64>,
    pub pooled_rmse: f64,
    pub pooled_ncc: Option<f64>,
    pub folds: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Audiogram-conditioned reference (independent of the support count).
    pub baseline: Option<SweepRow>,
}

/// Powers of two from 1 to 64.
pub const DEFAULT_SUPPORT_COUNTS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub counts: Vec<usize>,
    pub eval_seed: u64,
    pub include_baseline: bool,
    /// Checkpoints are reused from here when present and saved otherwise.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            counts: DEFAULT_SUPPORT_COUNTS.to_vec(),
            eval_seed: 0,
            include_baseline: true,
            checkpoint_dir: None,
        }
    }
}

/// Progress notifications from long-running procedures.
#[derive(Debug)]
pub enum Progress<'a> {
    Training { fold: u8, n_support: usize, mode: ModelMode },
    Epoch(&'a EpochLog),
    Evaluated { fold: u8, n_support: usize, report: &'a MetricsReport },
}

fn fold_row(n_support: usize, evaluations: Vec<Evaluation>) -> Result<SweepRow> {
    let folds: Vec<_> = evaluations.into_iter().map(|e| {
        let q = e.scored_queries();
        (e.report, q)
    }).collect();
    let summary = summarize_folds(&folds)?;
    Ok(SweepRow {
        n_support,
        mean_rmse: summary.mean_rmse,
        mean_ncc: summary.mean_ncc,
        pooled_rmse: summary.pooled_rmse,
        pooled_ncc: summary.pooled_ncc,
        folds: folds.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Train (or reuse) a checkpoint for one fold and configuration.
pub fn train_fold(
    cfg: &TrainConfig,
    samples: &[Sample],
    spec: &SplitSpec,
    features: &dyn FeatureSource,
    provenance: Provenance,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(Progress),
) -> Result<Checkpoint> {
    if let Some(path) = checkpoint.filter(|p| p.exists()) {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.config == cfg && ckpt.provenance.fold_index == Some(spec.fold_index) {
            return Ok(ckpt);
        }
    }
    let splits = split_by_listener(samples, spec)?;
    progress(Progress::Training {
        fold: spec.fold_index,
        n_support: cfg.n_support,
        mode: cfg.mode,
    });
    let outcome = train(
        cfg,
        &splits.train,
        &splits.val,
        features,
        Provenance {
            fold_index: Some(spec.fold_index),
            ..provenance
        },
        |e| progress(Progress::Epoch(e)),
    )?;
    if let Some(path) = checkpoint {
        outcome.checkpoint.save(path)?;
    }
    Ok(outcome.checkpoint)
}

/// Train and evaluate one model per support count per fold, plus the
/// audiogram baseline once per fold.
pub fn sweep_support(
    base: &TrainConfig,
    samples: &[Sample],
    specs: &[SplitSpec],
    opts: &SweepOptions,
    features: &dyn FeatureSource,
    provenance: Provenance,
    mut progress: impl FnMut(Progress),
) -> Result<SweepResult> {
    if opts.counts.is_empty() || specs.is_empty() {
        return Err(SsipError::EmptyInput("sweep needs support counts and folds".into()));
    }
    if opts.counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SsipError::Config("support counts must be strictly increasing".into()));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        create_dir_all(dir)?;
    }
    let ckpt_path = |fold: u8, tag: &str| opts.checkpoint_dir.as_ref().map(|d| d.join(format!("fold{fold}_{tag}.json")));

    let mut rows = Vec::new();
    for &n in &opts.counts {
        let cfg = TrainConfig {
            n_support: n,
            mode: ModelMode::Ssip,
            ..base.clone()
        };
        let mut evaluations = Vec::new();
        for spec in specs {
            let path = ckpt_path(spec.fold_index, &format!("n{n}"));
            let ckpt = train_fold(&cfg, samples, spec, features, provenance.clone(), path.as_deref(), &mut progress)?;
            let test = split_by_listener(samples, spec)?.test;
            let eval = evaluate(&ckpt, &test, n, opts.eval_seed, features)?;
            progress(Progress::Evaluated {
                fold: spec.fold_index,
                n_support: n,
                report: &eval.report,
            });
            evaluations.push(eval);
        }
        rows.push(fold_row(n, evaluations)?);
    }

    let baseline = if opts.include_baseline {
        let cfg = TrainConfig {
            mode: ModelMode::AudiogramBaseline,
            n_support: base.n_support.min(opts.counts[0]),
            ..base.clone()
        };
        let mut evaluations = Vec::new();
        for spec in specs {
            let path = ckpt_path(spec.fold_index, "baseline");
            let ckpt = train_fold(&cfg, samples, spec, features, provenance.clone(), path.as_deref(), &mut progress)?;
            let test = split_by_listener(samples, spec)?.test;
            let eval = evaluate(&ckpt, &test, 0, opts.eval_seed, features)?;
            progress(Progress::Evaluated {
                fold: spec.fold_index,
                n_support: 0,
                report: &eval.report,
            });
            evaluations.push(eval);
        }
        Some(fold_row(0, evaluations)?)
    } else {
        None
    };
    Ok(SweepResult { rows, baseline })
}

/// Write any serializable result as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir_all(parent)?;
    }
    write_json_pretty(path, value)
}
