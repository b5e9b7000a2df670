//! Manifest records, listener-disjoint fold construction and the
//! listener-structured support/query episode sampler.
//!
//! Manifests are JSON lines, one [`Sample`] per line:
//!
//! ```text
//! {"sample_id":"S1_L01_E01","listener_id":"L01","system_id":"E01","audio_path":"audio/S1_L01_E01.wav",
//!  "score":62.5,"audiogram":{"250":20,"500":25,"1000":30,"2000":40},"level":71.2,"score_level":65.0}
//! ```
//!
//! `score` is optional (absent or `-1` means unknown). `level` is the RMS
//! level of the original audio and `score_level` the presentation level the
//! score refers to; an absent `score_level` means the score was measured at
//! `level`. Relative audio paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{Audiogram, Score};
use crate::error::{Result, SsipError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub listener_id: String,
    #[serde(default)]
    pub system_id: String,
    pub audio_path: PathBuf,
    #[serde(default = "unknown_score")]
    pub score: Score,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audiogram: Option<Audiogram>,
    #[serde(default, rename = "level", skip_serializing_if = "Option::is_none")]
    pub original_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_level: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub fold_tags: BTreeSet<String>,
}

fn unknown_score() -> Score {
    Score::UNKNOWN
}

impl Sample {
    /// Minimal labeled sample, mostly for tests and synthetic data.
    pub fn new(sample_id: &str, listener_id: &str, score: Score) -> Self {
        Self {
            sample_id: sample_id.to_owned(),
            listener_id: listener_id.to_owned(),
            system_id: String::new(),
            audio_path: PathBuf::new(),
            score,
            audiogram: None,
            original_level: None,
            score_level: None,
            fold_tags: BTreeSet::new(),
        }
    }

    /// Level the score currently refers to.
    pub fn effective_score_level(&self) -> Option<f64> {
        self.score_level.or(self.original_level)
    }
}

pub fn parse_manifest(text: &str, base_dir: Option<&Path>) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut sample: Sample = serde_json::from_str(line)
            .map_err(|e| SsipError::Format(format!("manifest line {}: {e}", i + 1)))?;
        if sample.sample_id.is_empty() || sample.listener_id.is_empty() {
            return Err(SsipError::Format(format!(
                "manifest line {}: empty sample_id or listener_id",
                i + 1
            )));
        }
        if !seen.insert(sample.sample_id.clone()) {
            return Err(SsipError::DuplicateId(sample.sample_id));
        }
        if let Some(base) = base_dir {
            if sample.audio_path.is_relative() && !sample.audio_path.as_os_str().is_empty() {
                sample.audio_path = base.join(&sample.audio_path);
            }
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
    parse_manifest(&text, path.parent())
}

/// Serialize samples as manifest lines; paths are written as stored.
pub fn manifest_to_string(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| SsipError::io(path, e))?;
    f.write_all(manifest_to_string(samples).as_bytes())
        .map_err(|e| SsipError::io(path, e))
}

/// Content hash of a manifest's records, independent of where it was loaded from.
pub fn manifest_hash(samples: &[Sample]) -> String {
    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut h = Sha256::new();
    for s in sorted {
        let mut s = s.clone();
        s.audio_path = s.audio_path.file_name().map(PathBuf::from).unwrap_or_default();
        h.update(serde_json::to_vec(&s).expect("sample serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Group samples by listener, each group sorted by sample id.
pub fn group_by_listener(samples: &[Sample]) -> BTreeMap<String, Vec<Sample>> {
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.listener_id.clone()).or_default().push(s.clone());
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fold_index: u8,
    pub train_listeners: BTreeSet<String>,
    pub val_listeners: BTreeSet<String>,
    pub test_listeners: BTreeSet<String>,
}

impl SplitSpec {
    /// Checks the fold index and pairwise disjointness of the three roles.
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.fold_index) {
            return Err(SsipError::Config(format!(
                "fold index {} outside 1..=3",
                self.fold_index
            )));
        }
        let pairs = [
            ("train", &self.train_listeners, "val", &self.val_listeners),
            ("train", &self.train_listeners, "test", &self.test_listeners),
            ("val", &self.val_listeners, "test", &self.test_listeners),
        ];
        for (na, a, nb, b) in pairs {
            if let Some(l) = a.intersection(b).next() {
                return Err(SsipError::Leakage(format!(
                    "listener {l} appears in both {na} and {nb} sets of fold {}",
                    self.fold_index
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split spec serializes");
        std::fs::write(path, text + "\n").map_err(|e| SsipError::io(path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Partition samples by the role of their listener.
pub fn split_by_listener(samples: &[Sample], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut out = Splits::default();
    for s in samples {
        let l = &s.listener_id;
        let bucket = if spec.train_listeners.contains(l) {
            &mut out.train
        } else if spec.val_listeners.contains(l) {
            &mut out.val
        } else if spec.test_listeners.contains(l) {
            &mut out.test
        } else {
            return Err(SsipError::UnassignedListener(l.clone()));
        };
        bucket.push(s.clone());
    }
    Ok(out)
}

/// Listener counts per role in a fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl RoleSizes {
    /// The 23/3/5 listener structure of the reference restructuring.
    pub const REFERENCE: RoleSizes = RoleSizes {
        train: 23,
        val: 3,
        test: 5,
    };

    pub fn total(self) -> usize {
        self.train + self.val + self.test
    }

    /// Reference proportions rescaled to `n` listeners (at least one each).
    pub fn scaled_for(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(SsipError::Config(format!(
                "need at least 3 listeners for a train/val/test split, got {n}"
            )));
        }
        let r = Self::REFERENCE;
        let total = r.total() as f64;
        let val = ((n as f64 * r.val as f64 / total).round() as usize).max(1);
        let test = ((n as f64 * r.test as f64 / total).round() as usize).max(1);
        let train = n.checked_sub(val + test).filter(|&t| t >= 1).ok_or_else(|| {
            SsipError::Config(format!("cannot scale role sizes to {n} listeners"))
        })?;
        Ok(RoleSizes { train, val, test })
    }
}

/// Three listener-disjoint folds with rotating test and validation windows.
///
/// Listeners are sorted, shuffled with `seed`, and fold `k` takes its test
/// set from window `k`, the validation set from the window after it, and
/// trains on everyone else. Every listener must be assigned, so the role
/// sizes must sum to the listener count exactly.
pub fn three_fold_specs(listeners: &[String], sizes: RoleSizes, seed: u64) -> Result<[SplitSpec; 3]> {
    let mut ids: Vec<String> = listeners.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() != sizes.total() {
        return Err(SsipError::Config(format!(
            "role sizes {}/{}/{} need exactly {} distinct listeners, found {}",
            sizes.train,
            sizes.val,
            sizes.test,
            sizes.total(),
            ids.len()
        )));
    }
    if sizes.val == 0 || sizes.test == 0 || sizes.train == 0 {
        return Err(SsipError::Config("every role needs at least one listener".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let fold = |k: usize| {
        let start = (k * sizes.test) % n;
        let take = |offset: usize, len: usize| -> BTreeSet<String> {
            (0..len).map(|i| ids[(start + offset + i) % n].clone()).collect()
        };
        let test = take(0, sizes.test);
        let val = take(sizes.test, sizes.val);
        let train = ids
            .iter()
            .filter(|l| !test.contains(*l) && !val.contains(*l))
            .cloned()
            .collect();
        SplitSpec {
            fold_index: (k + 1) as u8,
            train_listeners: train,
            val_listeners: val,
            test_listeners: test,
        }
    };
    Ok([fold(0), fold(1), fold(2)])
}

/// A known (audio, score) pair offered to the model as evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub sample: Sample,
    pub score: Score,
}

/// One listener's support pairs plus query audios.
///
/// Query samples carry the unknown sentinel in `score`; their ground truth
/// lives only in `query_targets`, which the model never reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ListenerBatch {
    pub listener_id: String,
    pub support: Vec<SupportItem>,
    pub queries: Vec<Sample>,
    pub query_targets: Vec<Score>,
}

impl ListenerBatch {
    fn assemble(listener_id: &str, support: Vec<&Sample>, queries: Vec<&Sample>) -> Result<Self> {
        let support = support
            .into_iter()
            .map(|s| {
                if !s.score.is_known() {
                    return Err(SsipError::InsufficientSamples(format!(
                        "support sample {} has no known score",
                        s.sample_id
                    )));
                }
                Ok(SupportItem {
                    sample: s.clone(),
                    score: s.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let query_targets = queries.iter().map(|s| s.score).collect();
        let queries = queries
            .into_iter()
            .map(|s| Sample {
                score: Score::UNKNOWN,
                ..s.clone()
            })
            .collect();
        Ok(Self {
            listener_id: listener_id.to_owned(),
            support,
            queries,
            query_targets,
        })
    }

    /// Batch from explicit support and query samples of a single listener.
    /// Query scores, when present, become hidden targets.
    pub fn new(support: &[Sample], queries: &[Sample]) -> Result<Self> {
        let all: Vec<Sample> = support.iter().chain(queries).cloned().collect();
        let listener = single_listener(&all)?.to_owned();
        if queries.is_empty() {
            return Err(SsipError::EmptyInput(format!("listener {listener}: no query samples")));
        }
        Self::assemble(&listener, support.iter().collect(), queries.iter().collect())
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn single_listener(pool: &[Sample]) -> Result<&str> {
    let first = pool
        .first()
        .ok_or_else(|| SsipError::InsufficientSamples("empty listener pool".into()))?;
    if let Some(other) = pool.iter().find(|s| s.listener_id != first.listener_id) {
        return Err(SsipError::Config(format!(
            "pool mixes listeners {} and {}",
            first.listener_id, other.listener_id
        )));
    }
    Ok(&first.listener_id)
}

/// Draw `n_support` support pairs and `batch_size - n_support` queries
/// without replacement from one listener's pool.
pub fn sample_training_batch<R: rand::Rng + ?Sized>(
    pool: &[Sample],
    n_support: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<ListenerBatch> {
    if n_support == 0 || n_support >= batch_size {
        return Err(SsipError::Config(format!(
            "need 1 <= n_support ({n_support}) < batch_size ({batch_size})"
        )));
    }
    if pool.len() < batch_size {
        return Err(SsipError::InsufficientSamples(format!(
            "pool of {} samples cannot fill a batch of {batch_size}",
            pool.len()
        )));
    }
    let listener = single_listener(pool)?;
    let picked = rand::seq::index::sample(rng, pool.len(), batch_size).into_vec();
    let support = picked[..n_support].iter().map(|&i| &pool[i]).collect();
    let queries = picked[n_support..].iter().map(|&i| &pool[i]).collect();
    ListenerBatch::assemble(listener, support, queries)
}

fn listener_seed(seed: u64, listener_id: &str) -> u64 {
    let digest = Sha256::digest(listener_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(bytes)
}

/// Deterministic evaluation episode: the first `n_support` ids of a
/// seed-keyed shuffle of the sorted pool become support, the rest queries.
pub fn fixed_eval_episode(pool: &[Sample], n_support: usize, seed: u64) -> Result<ListenerBatch> {
    let listener = single_listener(pool)?;
    if pool.len() <= n_support {
        return Err(SsipError::InsufficientSamples(format!(
            "listener {listener}: {} samples leave no queries after {n_support} support",
            pool.len()
        )));
    }
    let mut order: Vec<&Sample> = pool.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(listener_seed(seed, listener)));
    let queries = order.split_off(n_support);
    ListenerBatch::assemble(listener, order, queries)
}

/// Fixed episodes for every listener in `samples`, ordered by listener id.
pub fn fixed_eval_episodes(samples: &[Sample], n_support: usize, seed: u64) -> Result<Vec<ListenerBatch>> {
    group_by_listener(samples)
        .values()
        .map(|pool| fixed_eval_episode(pool, n_support, seed))
        .collect()
}

/// Infinite stream of training episodes from a set of listener pools.
///
/// Each draw picks a listener uniformly, then samples a batch from it. A
/// pool smaller than the batch size yields a batch with fewer queries; the
/// support count never shrinks.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    pools: Vec<Vec<Sample>>,
    n_support: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(samples: &[Sample], n_support: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_support == 0 || n_support >= batch_size {
            return Err(SsipError::Config(format!(
                "need 1 <= n_support ({n_support}) < batch_size ({batch_size})"
            )));
        }
        let labeled: Vec<Sample> = samples.iter().filter(|s| s.score.is_known()).cloned().collect();
        let pools: Vec<Vec<Sample>> = group_by_listener(&labeled)
            .into_values()
            .filter(|p| p.len() > n_support)
            .collect();
        if pools.is_empty() {
            return Err(SsipError::InsufficientSamples(format!(
                "no listener has more than {n_support} labeled samples"
            )));
        }
        Ok(Self {
            pools,
            n_support,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn n_listeners(&self) -> usize {
        self.pools.len()
    }

    pub fn next_batch(&mut self) -> Result<ListenerBatch> {
        use rand::Rng;
        let pool = &self.pools[self.rng.gen_range(0..self.pools.len())];
        let batch = self.batch_size.min(pool.len());
        sample_training_batch(pool, self.n_support, batch, &mut self.rng)
    }
}
