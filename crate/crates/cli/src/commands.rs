use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssip_core::calibration::{load_curves, CalibrationCurveSet};
use ssip_core::dataset::{load_manifest, manifest_hash, split_by_listener, write_manifest, ListenerBatch, Sample, SplitSpec};
use ssip_core::metrics::{listener_correlation_report, ListenerCorrelationReport};
use ssip_core::pipeline::{
    calibrate_samples, fold_path, prepare, sweep_support, train_fold, write_json, PrepareOptions, Progress, SweepOptions,
    SweepResult, SweepRow,
};
use ssip_core::signal::LevelReference;
use ssip_core::spm::forward_batch;
use ssip_core::synth::{generate, SynthConfig};
use ssip_core::training::{evaluate, PredictionRecord, Provenance};
use ssip_core::{Checkpoint, FeatureCache, ModelMode, SsipError, TrainConfig};

use crate::args::*;
use crate::error::CliError;
use crate::plot::{analysis_plots, sweep_plots};

type Result<T> = std::result::Result<T, CliError>;

/// Written next to a prepared manifest; later commands read the curve hash from it.
pub const PREPARE_SUMMARY: &str = "prepare.json";

#[derive(Debug, Serialize, Deserialize)]
struct FoldSizes {
    fold: u8,
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrepareSummary {
    records: usize,
    listeners: usize,
    manifest_hash: String,
    curves_hash: String,
    folds: Vec<FoldSizes>,
}

#[derive(Serialize)]
struct TrainSummary {
    epoch: usize,
    val_rmse: f64,
    val_ncc: Option<f64>,
    param_checksum: String,
}

/// Summaries go to standard output; a closed pipe is not an error.
fn print_json(value: &impl Serialize) {
    print_text(&(serde_json::to_string_pretty(value).expect("summary serializes") + "\n"));
}

fn print_text(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| SsipError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| SsipError::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SsipError::io(path, e).into())
}

fn curves(path: Option<&Path>) -> Result<CalibrationCurveSet> {
    Ok(match path {
        Some(p) => load_curves(p)?,
        None => CalibrationCurveSet::builtin_default(),
    })
}

fn train_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Preset::Full) => TrainConfig::default(),
        (None, Preset::Desk) => TrainConfig::desk_scale(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
        cfg.warmup_epochs = cfg.warmup_epochs.min(epochs);
    }
    cfg.deterministic |= args.deterministic;
    Ok(cfg)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn split_spec(manifest: &Path, args: &FoldArgs) -> Result<SplitSpec> {
    let spec = match (&args.split, args.fold) {
        (Some(path), _) => SplitSpec::load(path)?,
        (None, Some(k)) => SplitSpec::load(fold_path(&manifest_dir(manifest), k))?,
        (None, None) => return Err(CliError::Usage("one of --fold or --split is required".into())),
    };
    spec.validate()?;
    Ok(spec)
}

fn feature_cache(cfg: &TrainConfig) -> Result<FeatureCache> {
    Ok(FeatureCache::new(cfg.backbone.build()?))
}

fn provenance(manifest: &Path, samples: &[Sample], features: &FeatureCache) -> Provenance {
    let summary = std::fs::read_to_string(manifest_dir(manifest).join(PREPARE_SUMMARY))
        .ok()
        .and_then(|text| serde_json::from_str::<PrepareSummary>(&text).ok());
    Provenance {
        manifest_hash: Some(manifest_hash(samples)),
        curves_hash: summary.map(|s| s.curves_hash),
        backbone_checksum: Some(features.backbone().checksum()),
        fold_index: None,
    }
}

fn report_progress(p: Progress) {
    match p {
        Progress::Training { fold, n_support, mode } => {
            eprintln!("fold {fold}: training {mode:?} with {n_support} support pairs")
        }
        Progress::Epoch(e) => eprintln!(
            "  epoch {:>4}  lr {:.3e}  loss {:.5}  val rmse {:.3}",
            e.epoch, e.lr, e.train_loss, e.val_rmse
        ),
        Progress::Evaluated { fold, n_support, report } => {
            eprintln!("fold {fold}: n = {n_support}, test rmse {:.3}", report.rmse)
        }
    }
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let curves = curves(args.curves.as_deref())?;
    let opts = PrepareOptions {
        curves: curves.clone(),
        reference: LevelReference::default(),
        target_db: args.target_db,
        fold_seed: args.seed,
        role_sizes: None,
        signals_dir: args.signals.clone(),
    };
    let prepared = prepare(&args.cpc, &args.out, &opts)?;
    let summary = PrepareSummary {
        records: prepared.samples.len(),
        listeners: prepared
            .samples
            .iter()
            .map(|s| &s.listener_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        manifest_hash: manifest_hash(&prepared.samples),
        curves_hash: curves.checksum(),
        folds: prepared
            .folds
            .iter()
            .map(|f| FoldSizes {
                fold: f.fold_index,
                train: f.train_listeners.len(),
                val: f.val_listeners.len(),
                test: f.test_listeners.len(),
            })
            .collect(),
    };
    write_json(&args.out.join(PREPARE_SUMMARY), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let samples = load_manifest(&args.manifest)?;
    let calibrated = calibrate_samples(&samples, &curves(args.curves.as_deref())?, args.target_db)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_manifest(&args.out, &calibrated)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(&args.config)?;
    if let Some(n) = args.n_support {
        cfg.n_support = n;
    }
    if args.baseline {
        cfg.mode = ModelMode::AudiogramBaseline;
    }
    cfg.validate()?;
    let samples = load_manifest(&args.manifest)?;
    let spec = split_spec(&args.manifest, &args.fold)?;
    let features = feature_cache(&cfg)?;
    let provenance = provenance(&args.manifest, &samples, &features);

    create_dir(&args.out)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml()?)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = File::create(&log_path).map_err(|e| SsipError::io(&log_path, e))?;
    let mut log_error = None;
    let ckpt = train_fold(&cfg, &samples, &spec, &features, provenance, None, |p| {
        if let Progress::Epoch(e) = &p {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(log, "{line}") {
                log_error.get_or_insert(err);
            }
        }
        report_progress(p);
    })?;
    if let Some(err) = log_error {
        return Err(SsipError::io(&log_path, err).into());
    }
    ckpt.save(args.out.join("checkpoint.json"))?;
    print_json(&TrainSummary {
        epoch: ckpt.epoch,
        val_rmse: ckpt.val_rmse,
        val_ncc: ckpt.val_ncc,
        param_checksum: ckpt.param_checksum(),
    });
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let samples = load_manifest(&args.manifest)?;
    let spec = split_spec(&args.manifest, &args.fold)?;
    let test = split_by_listener(&samples, &spec)?.test;
    let n_support = args.n_support.unwrap_or(match ckpt.model.mode {
        ModelMode::Ssip => ckpt.config.n_support,
        ModelMode::AudiogramBaseline => 0,
    });
    let features = feature_cache(&ckpt.config)?;
    let eval = evaluate(&ckpt, &test, n_support, args.seed, &features)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &eval.report)?;
    write_text(&args.out.join("predictions.jsonl"), &jsonl(&eval.records))?;
    print_json(&eval.report);
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let queries = load_manifest(&args.queries)?;
    let support = match &args.support {
        Some(p) => load_manifest(p)?,
        None => Vec::new(),
    };
    let mut by_listener: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for q in &queries {
        by_listener.entry(&q.listener_id).or_default().push(q.clone());
    }
    let features = feature_cache(&ckpt.config)?;
    let mut records = Vec::new();
    for (listener, qs) in by_listener {
        let mut pool: Vec<Sample> = support
            .iter()
            .filter(|s| s.listener_id == listener && s.score.is_known())
            .cloned()
            .collect();
        if ckpt.model.mode == ModelMode::AudiogramBaseline {
            pool.clear();
        } else if let Some(n) = args.n_support {
            if pool.len() < n {
                return Err(SsipError::InsufficientSamples(format!(
                    "listener {listener} has {} support pairs, {n} requested",
                    pool.len()
                ))
                .into());
            }
            pool.truncate(n);
        }
        let batch = ListenerBatch::new(&pool, &qs)?;
        let preds = forward_batch(&batch, &ckpt.model, &features)?;
        for (p, t) in preds.into_iter().zip(&batch.query_targets) {
            records.push(PredictionRecord {
                sample_id: p.sample_id,
                listener_id: p.listener_id,
                n_support: pool.len(),
                predicted_score: p.predicted_score,
                reported_score: p.reported_score,
                target: t.known(),
            });
        }
    }
    let text = jsonl(&records);
    match &args.out {
        Some(path) => write_text(path, &text),
        None => {
            print_text(&text);
            Ok(())
        }
    }
}

fn sweep_csv(result: &SweepResult) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let row = |label: String, r: &SweepRow| {
        format!(
            "{label},{},{},{},{}\n",
            r.mean_rmse,
            opt(r.mean_ncc),
            r.pooled_rmse,
            opt(r.pooled_ncc)
        )
    };
    let mut out = String::from("n_support,mean_rmse,mean_ncc,pooled_rmse,pooled_ncc\n");
    for r in &result.rows {
        out.push_str(&row(r.n_support.to_string(), r));
    }
    if let Some(b) = &result.baseline {
        out.push_str(&row("baseline".into(), b));
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = train_config(&args.config)?;
    let samples = load_manifest(&args.manifest)?;
    let specs = args
        .folds
        .iter()
        .map(|&k| {
            split_spec(
                &args.manifest,
                &FoldArgs {
                    fold: Some(k),
                    split: None,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let features = feature_cache(&cfg)?;
    let provenance = provenance(&args.manifest, &samples, &features);
    let opts = SweepOptions {
        counts: args.counts.clone(),
        eval_seed: args.eval_seed,
        include_baseline: !args.no_baseline,
        checkpoint_dir: Some(args.out.join("checkpoints")),
    };
    let result = sweep_support(&cfg, &samples, &specs, &opts, &features, provenance, report_progress)?;
    write_json(&args.out.join("sweep.json"), &result)?;
    write_text(&args.out.join("sweep.csv"), &sweep_csv(&result))?;
    sweep_plots(&args.out, &result)?;
    print_text(&sweep_csv(&result));
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSummary {
    listeners: usize,
    r_hl_vs_intelligibility: Option<f64>,
    r_hl_vs_level: Option<f64>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let samples = load_manifest(&args.manifest)?;
    let report = listener_correlation_report(&samples)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("analysis.json"), &report)?;
    analysis_plots(&args.out, &report)?;
    print_json(&AnalyzeSummary {
        listeners: report.points.len(),
        r_hl_vs_intelligibility: report.r_hl_vs_intelligibility,
        r_hl_vs_level: report.r_hl_vs_level,
    });
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| SsipError::io(&args.input, e))?;
    create_dir(&args.out)?;
    if let Ok(sweep) = serde_json::from_str::<SweepResult>(&text) {
        return sweep_plots(&args.out, &sweep);
    }
    if let Ok(report) = serde_json::from_str::<ListenerCorrelationReport>(&text) {
        return analysis_plots(&args.out, &report);
    }
    Err(SsipError::Format(format!(
        "{} is neither a sweep result nor an analysis report",
        args.input.display()
    ))
    .into())
}

#[derive(Serialize)]
struct SynthSummary {
    listeners: usize,
    signals: usize,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        listeners: args.listeners,
        samples_per_listener: args.samples,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let truth = generate(&args.out, &cfg, &curves(args.curves.as_deref())?)?;
    print_json(&SynthSummary {
        listeners: truth.listeners.len(),
        signals: truth.signals.len(),
    });
    Ok(())
}
