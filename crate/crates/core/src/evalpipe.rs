//! Chunked document scoring, pool-level evaluation with per-attack and
//! per-generator breakdowns, report assembly, and the ablation experiment
//! that retrains every objective variant under an identical budget.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::ALL_KINDS;
use crate::corpus::{LabelSpace, MixtureSpec, Task, TextRecord, HUMAN};
use crate::metrics::{
    self, CiBounds, MetricValue, PairedDiff, PoolMetric, ScoredPool, ScoredRow,
};
use crate::model::{ai_score, encode_plain, featurize, head_logits, FeatureSeq, ModelParams};
use crate::trainer::{run_training, TrainConfig, Variant};
use crate::{fnv1a64, Error, Real, Result};

// ---------------------------------------------------------------------------
// Chunked scoring
// ---------------------------------------------------------------------------

/// Windowing used to score one document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkConfig {
    pub chunk_len: usize,
    /// Window step; the default is half the chunk, i.e. 50% overlap.
    pub stride: usize,
    /// Aggregate per-window scores by max instead of the default arithmetic
    /// mean. Off by default; exists only for sensitivity analysis.
    pub max_agg: bool,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig::with_chunk_len(2048)
    }
}

impl ChunkConfig {
    /// Mean aggregation with the default 50% overlap.
    pub fn with_chunk_len(chunk_len: usize) -> Self {
        ChunkConfig {
            chunk_len,
            stride: (chunk_len / 2).max(1),
            max_agg: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 {
            return Err(Error::InvalidArgument {
                op: "ChunkConfig",
                detail: "chunk_len must be >= 1".into(),
            });
        }
        if self.stride == 0 || self.stride > self.chunk_len {
            return Err(Error::InvalidArgument {
                op: "ChunkConfig",
                detail: format!(
                    "stride {} outside [1, chunk_len = {}]",
                    self.stride, self.chunk_len
                ),
            });
        }
        Ok(())
    }
}

/// Half-open windows `[k*stride, k*stride + chunk_len)` clipped to `n`,
/// stopping with the first window that reaches the end. With
/// `stride <= chunk_len` every position lands in at least one window.
pub fn chunk_windows(n: usize, chunk_len: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k * stride;
        let end = (start + chunk_len).min(n);
        out.push((start, end));
        if start + chunk_len >= n {
            break;
        }
        k += 1;
    }
    out
}

fn window_seq(seq: &FeatureSeq, start: usize, end: usize) -> FeatureSeq {
    FeatureSeq {
        ids: seq.ids[start..end].to_vec(),
        mask: seq.mask[start..end].to_vec(),
    }
}

/// Score one text and optionally its document embedding (the mean of the
/// per-window pooled representations). Embedding capture never touches the
/// score path.
fn score_text(
    params: &ModelParams,
    text: &str,
    chunk: &ChunkConfig,
    capture: bool,
) -> Result<(Real, Option<Vec<Real>>)> {
    chunk.validate()?;
    // Featurize once, untruncated; the windows slice into the id sequence.
    let seq = featurize(text, params.dims.vocab, usize::MAX)?;
    let windows = chunk_windows(seq.len(), chunk.chunk_len, chunk.stride);
    let mut scores = Vec::with_capacity(windows.len());
    let mut pooled_acc = if capture {
        Some(vec![0.0; params.dims.hidden])
    } else {
        None
    };
    for &(s, e) in &windows {
        let pooled = encode_plain(params, &window_seq(&seq, s, e))?;
        scores.push(ai_score(&head_logits(params, &pooled, Task::Main)));
        if let Some(acc) = pooled_acc.as_mut() {
            for (a, v) in acc.iter_mut().zip(&pooled) {
                *a += v;
            }
        }
    }
    let score = if chunk.max_agg {
        scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max)
    } else {
        scores.iter().sum::<Real>() / scores.len() as Real
    };
    if let Some(acc) = pooled_acc.as_mut() {
        let inv = 1.0 / windows.len() as Real;
        for v in acc.iter_mut() {
            *v *= inv;
        }
    }
    Ok((score, pooled_acc))
}

/// Detector score for one document: per-window AI probabilities aggregated
/// across overlapping windows of the hashed feature sequence.
pub fn chunk_score(params: &ModelParams, text: &str, chunk: &ChunkConfig) -> Result<Real> {
    Ok(score_text(params, text, chunk, false)?.0)
}

/// Scoring options for a whole pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub chunk: ChunkConfig,
    /// Attach each row's document embedding for geometry analysis.
    pub capture_embeddings: bool,
}

/// Score every record (in parallel, collected in input order) and carry the
/// labels through.
pub fn score_pool(
    params: &ModelParams,
    records: &[TextRecord],
    opts: &ScoreOptions,
) -> Result<ScoredPool> {
    let rows = records
        .par_iter()
        .map(|r| {
            let (score, embedding) = score_text(params, &r.text, &opts.chunk, opts.capture_embeddings)?;
            Ok(ScoredRow {
                id: r.id.clone(),
                score,
                main: r.main_label,
                gen: r.gen_label,
                atk: r.atk_label,
                dom: r.dom_label,
                embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoredPool::new(rows)
}

// ---------------------------------------------------------------------------
// Per-attack breakdown
// ---------------------------------------------------------------------------

/// One attack bucket: TPR under the pool-wide threshold, and its row count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBucket {
    pub tpr: Real,
    pub n: usize,
}

/// TPR per attack class, all under a single threshold computed once from the
/// pool's human rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerAttackReport {
    pub fpr: Real,
    pub threshold: Real,
    pub buckets: BTreeMap<String, AttackBucket>,
    /// Attack classes with zero rows, omitted from `buckets`.
    pub notes: Vec<String>,
}

fn attack_bucket_name(atk: Option<usize>) -> String {
    match atk {
        None => "none".into(),
        Some(i) => ALL_KINDS
            .get(i)
            .map(|k| k.name().to_string())
            .unwrap_or_else(|| format!("atk{i}")),
    }
}

pub fn per_attack_report(pool: &ScoredPool, fpr: Real) -> Result<PerAttackReport> {
    let humans = pool.human_scores();
    if humans.is_empty() {
        return Err(Error::Metric(
            "pool missing class: no human rows to set the threshold".into(),
        ));
    }
    let threshold = metrics::threshold_at_fpr(&humans, fpr)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for row in &pool.rows {
        if row.main == HUMAN {
            continue;
        }
        let (hits, n) = tally.entry(attack_bucket_name(row.atk)).or_insert((0, 0));
        if row.score > threshold {
            *hits += 1;
        }
        *n += 1;
    }
    let buckets: BTreeMap<String, AttackBucket> = tally
        .into_iter()
        .map(|(name, (hits, n))| {
            (
                name,
                AttackBucket {
                    tpr: hits as Real / n as Real,
                    n,
                },
            )
        })
        .collect();
    let mut notes = Vec::new();
    for name in ALL_KINDS
        .iter()
        .map(|k| k.name().to_string())
        .chain(std::iter::once("none".to_string()))
    {
        if !buckets.contains_key(&name) {
            notes.push(format!("no rows for attack class {name}"));
        }
    }
    Ok(PerAttackReport {
        fpr,
        threshold,
        buckets,
        notes,
    })
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// Evaluation report for one pool. `per_attack` and `per_generator` break
/// down TPR at the first requested FPR under that pool's shared threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pool: String,
    pub auroc: Real,
    pub ci: CiBounds,
    /// Keyed by the FPR rendered as text ("0.05"), for stable JSON.
    pub tpr: BTreeMap<String, MetricValue>,
    pub per_attack: BTreeMap<String, AttackBucket>,
    pub per_generator: BTreeMap<String, Real>,
    pub n_rows: usize,
}

/// Report knobs.
#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub pool_name: String,
    pub fprs: Vec<Real>,
    pub bootstrap_b: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            pool_name: "pool".into(),
            fprs: vec![0.05, 0.01],
            bootstrap_b: metrics::DEFAULT_BOOTSTRAP_B,
            seed: metrics::DEFAULT_BOOTSTRAP_SEED,
        }
    }
}

fn fpr_key(f: Real) -> String {
    format!("{f}")
}

fn gen_bucket_name(gen: Option<usize>) -> String {
    match gen {
        None => "unknown".into(),
        Some(i) => format!("gen{i}"),
    }
}

pub fn assemble_report(pool: &ScoredPool, cfg: &ReportConfig) -> Result<EvalReport> {
    if cfg.fprs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "assemble_report",
            detail: "at least one FPR is required".into(),
        });
    }
    let n_h = pool.rows.iter().filter(|r| r.main == HUMAN).count();
    let n_a = pool.len() - n_h;
    if n_h == 0 || n_a == 0 {
        return Err(Error::Metric(format!(
            "pool missing class: {n_h} human and {n_a} AI rows"
        )));
    }
    let auroc = metrics::auroc(pool)?;
    let ci = metrics::bootstrap_ci(pool, PoolMetric::Auroc, cfg.bootstrap_b, cfg.seed)?;
    let mut tpr = BTreeMap::new();
    for &f in &cfg.fprs {
        let value = metrics::tpr_at_fpr(pool, f)?;
        let fci = metrics::bootstrap_ci(pool, PoolMetric::TprAtFpr(f), cfg.bootstrap_b, cfg.seed)?;
        tpr.insert(
            fpr_key(f),
            MetricValue {
                value,
                ci: Some(fci),
            },
        );
    }
    let primary = cfg.fprs[0];
    let pa = per_attack_report(pool, primary)?;
    let mut gen_tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for row in &pool.rows {
        if row.main == HUMAN {
            continue;
        }
        let (hits, n) = gen_tally.entry(gen_bucket_name(row.gen)).or_insert((0, 0));
        if row.score > pa.threshold {
            *hits += 1;
        }
        *n += 1;
    }
    let per_generator = gen_tally
        .into_iter()
        .map(|(name, (hits, n))| (name, hits as Real / n as Real))
        .collect();
    Ok(EvalReport {
        pool: cfg.pool_name.clone(),
        auroc,
        ci,
        tpr,
        per_attack: pa.buckets,
        per_generator,
        n_rows: pool.len(),
    })
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Score CSV round-trip
// ---------------------------------------------------------------------------

fn opt_field(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt_field(s: &str, line: usize, col: &str) -> Result<Option<usize>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|e| Error::Metric(format!("scores csv line {line}: bad {col} {s:?}: {e}")))
}

/// Write `id,score,main,gen,atk,dom` rows; embeddings are not serialized.
/// Scores print in shortest round-trip form, so reading back is lossless.
pub fn write_scores_csv(pool: &ScoredPool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["id", "score", "main", "gen", "atk", "dom"])?;
    for r in &pool.rows {
        w.write_record([
            r.id.as_str(),
            &r.score.to_string(),
            &r.main.to_string(),
            &opt_field(r.gen),
            &opt_field(r.atk),
            &opt_field(r.dom),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoredPool> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2; // 1-based, after the header
        let field = |j: usize| rec.get(j).unwrap_or("");
        if rec.len() != 6 {
            return Err(Error::Metric(format!(
                "scores csv line {line}: expected 6 fields, got {}",
                rec.len()
            )));
        }
        rows.push(ScoredRow {
            id: field(0).to_string(),
            score: field(1)
                .parse()
                .map_err(|e| Error::Metric(format!("scores csv line {line}: bad score: {e}")))?,
            main: field(2)
                .parse()
                .map_err(|e| Error::Metric(format!("scores csv line {line}: bad main: {e}")))?,
            gen: parse_opt_field(field(3), line, "gen")?,
            atk: parse_opt_field(field(4), line, "atk")?,
            dom: parse_opt_field(field(5), line, "dom")?,
            embedding: None,
        });
    }
    ScoredPool::new(rows)
}

// ---------------------------------------------------------------------------
// Ablation experiment
// ---------------------------------------------------------------------------

/// Configuration of a five-variant ablation: the shared training recipe, the
/// seeds each variant retrains under, and how the held-out pool is scored.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub fprs: Vec<Real>,
    pub chunk: ChunkConfig,
    pub bootstrap_b: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            fprs: vec![0.01, 0.05],
            chunk: ChunkConfig::default(),
            bootstrap_b: 1000,
        }
    }
}

/// Results for one variant across all seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: String,
    /// FPR key -> per-seed TPR values, in `seeds` order.
    pub tpr: BTreeMap<String, Vec<Real>>,
    /// FPR key -> mean TPR over seeds.
    pub mean_tpr: BTreeMap<String, Real>,
    /// FPR key -> per-seed paired (full - variant) differences; empty for
    /// the full variant itself.
    pub diff_vs_full: BTreeMap<String, Vec<PairedDiff>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub fprs: Vec<Real>,
    /// One entry per variant, in [`Variant::ALL`] order (full first).
    pub variants: Vec<VariantOutcome>,
}

impl AblationReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn batch_stream_digest(hashes: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(hashes.len() * 8);
    for h in hashes {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    fnv1a64(&buf)
}

/// Retrain every variant from scratch under each seed with the same data
/// mixture, backbone, and budget, then score all of them on one held-out
/// (typically attacked) pool and compare each ablation to the full objective
/// with seed-paired bootstrap differences.
///
/// The runs are independent, so they execute in parallel; per-seed batch
/// streams are digest-checked across variants to prove every variant saw the
/// identical data order.
pub fn ablation_experiment(
    cfg: &AblationConfig,
    train_records: &[TextRecord],
    mixture: &MixtureSpec,
    val_records: &[TextRecord],
    eval_records: &[TextRecord],
    space: &LabelSpace,
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "ablation_experiment",
            detail: "at least one seed is required".into(),
        });
    }
    if cfg.fprs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "ablation_experiment",
            detail: "at least one FPR is required".into(),
        });
    }

    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<(ScoredPool, u64)> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mut c = cfg.base.clone();
            c.variant = variant;
            c.seed = seed;
            let out = run_training(&c, train_records, mixture, val_records, space)?;
            let hashes: Vec<u64> = out.diagnostics.iter().map(|d| d.batch_hash).collect();
            let pool = score_pool(
                &out.params,
                eval_records,
                &ScoreOptions {
                    chunk: cfg.chunk,
                    capture_embeddings: false,
                },
            )?;
            Ok((pool, batch_stream_digest(&hashes)))
        })
        .collect::<Result<_>>()?;

    let n_seeds = cfg.seeds.len();
    let run_of = |variant_idx: usize, seed_idx: usize| &runs[variant_idx * n_seeds + seed_idx];

    // Same seed must mean the same batch stream regardless of variant.
    for (si, seed) in cfg.seeds.iter().enumerate() {
        let expected = run_of(0, si).1;
        for (vi, v) in Variant::ALL.iter().enumerate().skip(1) {
            if run_of(vi, si).1 != expected {
                return Err(Error::Train(format!(
                    "variant {} saw a different batch stream than full at seed {seed}",
                    v.name()
                )));
            }
        }
    }

    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for (vi, v) in Variant::ALL.iter().enumerate() {
        let mut tpr: BTreeMap<String, Vec<Real>> = BTreeMap::new();
        let mut diff_vs_full: BTreeMap<String, Vec<PairedDiff>> = BTreeMap::new();
        for &f in &cfg.fprs {
            let key = fpr_key(f);
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                let pool = &run_of(vi, si).0;
                tpr.entry(key.clone())
                    .or_default()
                    .push(metrics::tpr_at_fpr(pool, f)?);
                if vi != 0 {
                    let diff_seed = cfg.base.seed
                        ^ fnv1a64(format!("ablate:{}:{seed}:{key}", v.name()).as_bytes());
                    let diff = metrics::paired_diff_ci(
                        &run_of(0, si).0,
                        pool,
                        PoolMetric::TprAtFpr(f),
                        cfg.bootstrap_b,
                        diff_seed,
                    )?;
                    diff_vs_full.entry(key.clone()).or_default().push(diff);
                }
            }
        }
        let mean_tpr = tpr
            .iter()
            .map(|(k, vals)| (k.clone(), vals.iter().sum::<Real>() / vals.len() as Real))
            .collect();
        variants.push(VariantOutcome {
            variant: v.name().to_string(),
            tpr,
            mean_tpr,
            diff_vs_full,
        });
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        fprs: cfg.fprs.clone(),
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{build_attacked_pool, AttackConfig, EVAL_KINDS};
    use crate::corpus::AI;
    use crate::model::ModelDims;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_params(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelDims {
                vocab: 512,
                hidden: 8,
                n_gen: 3,
                n_atk: 7,
                n_dom: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn direct_score(params: &ModelParams, seq: &FeatureSeq) -> Real {
        let pooled = encode_plain(params, seq).unwrap();
        ai_score(&head_logits(params, &pooled, Task::Main))
    }

    // ---- chunking ----

    #[test]
    fn short_text_is_a_single_window_equal_to_the_direct_score() {
        let params = test_params(1);
        let text = "a modest paragraph that stays well under the chunk size";
        let chunk = ChunkConfig::default();
        let got = chunk_score(&params, text, &chunk).unwrap();
        let seq = featurize(text, params.dims.vocab, usize::MAX).unwrap();
        assert!(seq.len() < chunk.chunk_len);
        assert_eq!(got.to_bits(), direct_score(&params, &seq).to_bits());
    }

    #[test]
    fn two_identical_windows_average_to_the_window_score() {
        // A run of one repeated byte makes every trigram identical, so any
        // two windows have the same content and the mean equals either one.
        let params = test_params(2);
        let text = "a".repeat(18); // 16 trigrams = two non-overlapping chunks of 8
        let chunk = ChunkConfig {
            chunk_len: 8,
            stride: 8,
            max_agg: false,
        };
        let seq = featurize(&text, params.dims.vocab, usize::MAX).unwrap();
        assert_eq!(chunk_windows(seq.len(), 8, 8), vec![(0, 8), (8, 16)]);
        let got = chunk_score(&params, &text, &chunk).unwrap();
        let one = direct_score(&params, &window_seq(&seq, 0, 8));
        assert!((got - one).abs() < 1e-15);
    }

    #[test]
    fn empty_text_is_rejected() {
        let params = test_params(3);
        assert!(chunk_score(&params, "", &ChunkConfig::default()).is_err());
    }

    #[test]
    fn bad_chunk_configs_are_rejected() {
        let params = test_params(3);
        for (c, s) in [(0usize, 1usize), (4, 0), (4, 5)] {
            let chunk = ChunkConfig {
                chunk_len: c,
                stride: s,
                max_agg: false,
            };
            assert!(chunk_score(&params, "text", &chunk).is_err(), "{c}/{s}");
        }
    }

    #[test]
    fn max_aggregation_upper_bounds_the_mean() {
        let params = test_params(4);
        let text = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu \
                    nu xi omicron pi rho sigma tau upsilon phi chi psi omega"
            .repeat(3);
        let mean_cfg = ChunkConfig {
            chunk_len: 32,
            stride: 16,
            max_agg: false,
        };
        let max_cfg = ChunkConfig {
            max_agg: true,
            ..mean_cfg
        };
        let mean = chunk_score(&params, &text, &mean_cfg).unwrap();
        let max = chunk_score(&params, &text, &max_cfg).unwrap();
        assert!(max >= mean);
    }

    proptest! {
        /// Window bookkeeping against an independent enumeration oracle:
        /// count from the closed form, every window on the stride grid and
        /// clipped to n, strictly increasing starts, full coverage.
        #[test]
        fn window_enumeration_matches_the_oracle(
            n in 1usize..400,
            chunk_len in 1usize..40,
            stride_off in 0usize..40,
        ) {
            let stride = (stride_off % chunk_len) + 1;
            let windows = chunk_windows(n, chunk_len, stride);
            let expected_count = if n <= chunk_len {
                1
            } else {
                (n - chunk_len).div_ceil(stride) + 1
            };
            prop_assert_eq!(windows.len(), expected_count);
            let mut covered = vec![false; n];
            for (k, &(s, e)) in windows.iter().enumerate() {
                prop_assert_eq!(s, k * stride);
                prop_assert_eq!(e, (s + chunk_len).min(n));
                prop_assert!(s < e && e <= n);
                for c in covered.iter_mut().take(e).skip(s) {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }

    // ---- pool scoring ----

    fn eval_records() -> Vec<TextRecord> {
        let mut rows = Vec::new();
        for i in 0..12 {
            rows.push(TextRecord {
                id: format!("h{i}"),
                text: format!("plain human paragraph number {i} with ordinary words"),
                main_label: HUMAN,
                gen_label: None,
                atk_label: None,
                dom_label: Some(i % 3),
                source: "human".into(),
            });
            rows.push(TextRecord {
                id: format!("a{i}"),
                text: format!("synthetic zqx vqk paragraph number {i} with junk"),
                main_label: AI,
                gen_label: Some(i % 2),
                atk_label: None,
                dom_label: Some(i % 3),
                source: "ai".into(),
            });
        }
        rows
    }

    #[test]
    fn score_pool_preserves_rows_labels_and_determinism() {
        let params = test_params(5);
        let records = eval_records();
        let opts = ScoreOptions {
            chunk: ChunkConfig::with_chunk_len(16),
            capture_embeddings: false,
        };
        let a = score_pool(&params, &records, &opts).unwrap();
        let b = score_pool(&params, &records, &opts).unwrap();
        assert_eq!(a.len(), records.len());
        for ((ra, rb), rec) in a.rows.iter().zip(&b.rows).zip(&records) {
            assert_eq!(ra.score.to_bits(), rb.score.to_bits());
            assert_eq!(ra.id, rec.id);
            assert_eq!(ra.main, rec.main_label);
            assert_eq!(ra.gen, rec.gen_label);
            assert_eq!(ra.dom, rec.dom_label);
        }
        assert!(score_pool(&params, &[], &opts).unwrap().is_empty());
    }

    #[test]
    fn embedding_capture_is_pure_observation() {
        let params = test_params(6);
        let records = eval_records();
        let base = ScoreOptions {
            chunk: ChunkConfig::with_chunk_len(16),
            capture_embeddings: false,
        };
        let with = ScoreOptions {
            capture_embeddings: true,
            ..base
        };
        let plain = score_pool(&params, &records, &base).unwrap();
        let captured = score_pool(&params, &records, &with).unwrap();
        for (p, c) in plain.rows.iter().zip(&captured.rows) {
            assert_eq!(p.score.to_bits(), c.score.to_bits());
            assert!(p.embedding.is_none());
            assert_eq!(c.embedding.as_ref().unwrap().len(), params.dims.hidden);
        }
    }

    // ---- per-attack report ----

    fn scored_row(id: &str, score: Real, main: usize, atk: Option<usize>) -> ScoredRow {
        ScoredRow {
            id: id.into(),
            score,
            main,
            gen: None,
            atk,
            dom: None,
            embedding: None,
        }
    }

    fn mixed_pool() -> ScoredPool {
        let mut rows = Vec::new();
        for i in 0..40 {
            rows.push(scored_row(&format!("h{i}"), i as Real / 40.0, HUMAN, None));
        }
        for i in 0..10 {
            rows.push(scored_row(&format!("c{i}"), 0.6 + i as Real / 50.0, AI, None));
            rows.push(scored_row(&format!("t{i}"), 0.4 + i as Real / 25.0, AI, Some(2)));
            rows.push(scored_row(&format!("s{i}"), 0.2 + i as Real / 12.0, AI, Some(3)));
        }
        ScoredPool::new(rows).unwrap()
    }

    #[test]
    fn single_attack_pool_matches_tpr_at_fpr_under_the_shared_threshold() {
        let mut rows: Vec<ScoredRow> = (0..50)
            .map(|i| scored_row(&format!("h{i}"), i as Real, HUMAN, None))
            .collect();
        for i in 0..20 {
            rows.push(scored_row(&format!("a{i}"), 30.0 + i as Real, AI, Some(1)));
        }
        let pool = ScoredPool::new(rows).unwrap();
        let report = per_attack_report(&pool, 0.1).unwrap();
        assert_eq!(report.buckets.len(), 1);
        let bucket = &report.buckets["whitespace"];
        assert_eq!(bucket.n, 20);
        let expected = metrics::tpr_at_fpr(&pool, 0.1).unwrap();
        assert_eq!(bucket.tpr, expected);
        assert_eq!(
            report.threshold,
            metrics::threshold_at_fpr(&pool.human_scores(), 0.1).unwrap()
        );
    }

    #[test]
    fn clean_only_pool_reports_just_the_none_bucket() {
        let mut rows: Vec<ScoredRow> = (0..20)
            .map(|i| scored_row(&format!("h{i}"), i as Real, HUMAN, None))
            .collect();
        rows.push(scored_row("a0", 50.0, AI, None));
        let pool = ScoredPool::new(rows).unwrap();
        let report = per_attack_report(&pool, 0.05).unwrap();
        assert_eq!(report.buckets.keys().collect::<Vec<_>>(), vec!["none"]);
        assert!(report.notes.iter().any(|n| n.contains("typo")));
        assert!(!report.notes.iter().any(|n| n.contains("none")));
    }

    #[test]
    fn bucket_tprs_recombine_to_the_overall_tpr_as_a_weighted_mean() {
        let pool = mixed_pool();
        let report = per_attack_report(&pool, 0.1).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for b in report.buckets.values() {
            num += b.tpr * b.n as Real;
            den += b.n as Real;
        }
        let overall = metrics::tpr_at_fpr(&pool, 0.1).unwrap();
        assert!((num / den - overall).abs() < 1e-12);
    }

    #[test]
    fn per_attack_report_needs_human_rows() {
        let pool = ScoredPool::new(vec![scored_row("a", 0.5, AI, None)]).unwrap();
        let err = per_attack_report(&pool, 0.05).unwrap_err();
        assert!(err.to_string().contains("pool missing class"), "{err}");
    }

    // ---- report assembly ----

    #[test]
    fn report_assembles_all_sections_and_round_trips_through_json() {
        let pool = mixed_pool();
        let cfg = ReportConfig {
            pool_name: "unit".into(),
            fprs: vec![0.05, 0.01],
            bootstrap_b: 200,
            seed: 7,
        };
        let report = assemble_report(&pool, &cfg).unwrap();
        assert_eq!(report.pool, "unit");
        assert_eq!(report.n_rows, pool.len());
        assert!(report.tpr.contains_key("0.05") && report.tpr.contains_key("0.01"));
        assert!(report.tpr["0.05"].ci.is_some());
        assert!(report.per_attack.contains_key("none"));
        assert!(report.per_attack.contains_key("typo"));
        assert!(report.per_generator.contains_key("unknown"));
        assert!(report.auroc > 0.5 && report.ci.lo <= report.auroc);

        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_rows, report.n_rows);
        assert_eq!(back.per_attack, report.per_attack);
    }

    #[test]
    fn report_on_a_one_class_pool_says_pool_missing_class() {
        let rows: Vec<ScoredRow> = (0..10)
            .map(|i| scored_row(&format!("h{i}"), i as Real, HUMAN, None))
            .collect();
        let pool = ScoredPool::new(rows).unwrap();
        let err = assemble_report(&pool, &ReportConfig::default()).unwrap_err();
        assert!(err.to_string().contains("pool missing class"), "{err}");
    }

    #[test]
    fn scores_csv_round_trips_losslessly() {
        let pool = mixed_pool();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_scores_csv(&pool, &path).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back.len(), pool.len());
        for (a, b) in pool.rows.iter().zip(&back.rows) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.main, b.main);
            assert_eq!(a.gen, b.gen);
            assert_eq!(a.atk, b.atk);
            assert_eq!(a.dom, b.dom);
        }
    }

    // ---- ablation ----

    #[test]
    fn ablation_runs_all_variants_with_paired_diffs_and_shared_streams() {
        let human_words = ["the", "quiet", "river", "bends", "north", "past", "stone"];
        let ai_words = ["zqx", "vqk", "xjz", "qqv", "zzk", "wxq", "jqz"];
        let mut train = Vec::new();
        for i in 0..24 {
            let pick = |words: &[&str]| {
                format!(
                    "{} {} {} row {i}",
                    words[i % words.len()],
                    words[(i + 2) % words.len()],
                    words[(i + 4) % words.len()],
                )
            };
            train.push(TextRecord {
                id: format!("h{i}"),
                text: pick(&human_words),
                main_label: HUMAN,
                gen_label: None,
                atk_label: None,
                dom_label: Some(i % 2),
                source: "human".into(),
            });
            train.push(TextRecord {
                id: format!("a{i}"),
                text: pick(&ai_words),
                main_label: AI,
                gen_label: Some(i % 2),
                atk_label: None,
                dom_label: Some(i % 2),
                source: "ai".into(),
            });
        }
        let mixture = MixtureSpec::proportional(&train).unwrap();
        let space = LabelSpace::new(
            vec!["g0".into(), "g1".into()],
            ALL_KINDS.iter().map(|k| k.name().to_string()).collect(),
            vec!["d0".into(), "d1".into()],
        )
        .unwrap();

        // Held-out pool: fresh rows plus attacked copies of the AI ones.
        let held: Vec<TextRecord> = train.iter().take(20).cloned().collect();
        let ai_rows: Vec<TextRecord> = held.iter().filter(|r| r.main_label == AI).cloned().collect();
        let attack_cfg = AttackConfig {
            rate: 0.2,
            seed: 11,
            ..AttackConfig::default().with_builtin_lexicon()
        };
        let mut eval_rows = held.clone();
        eval_rows.extend(build_attacked_pool(&ai_rows, &EVAL_KINDS[..2], &attack_cfg).unwrap());

        let cfg = AblationConfig {
            base: TrainConfig {
                total_steps: 24,
                warmup_steps: 4,
                eval_every: 8,
                swa_start: 8,
                batch_size: 8,
                vocab: 256,
                hidden: 4,
                max_seq_len: 32,
                seed: 3,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2],
            fprs: vec![0.5],
            chunk: ChunkConfig::with_chunk_len(32),
            bootstrap_b: 100,
        };
        let report =
            ablation_experiment(&cfg, &train, &mixture, &held, &eval_rows, &space).unwrap();

        assert_eq!(report.variants.len(), Variant::ALL.len());
        assert_eq!(report.variants[0].variant, "full");
        for (i, v) in report.variants.iter().enumerate() {
            assert_eq!(v.tpr["0.5"].len(), 2, "{}", v.variant);
            assert!(v.mean_tpr["0.5"].is_finite());
            if i == 0 {
                assert!(v.diff_vs_full.is_empty());
            } else {
                let diffs = &v.diff_vs_full["0.5"];
                assert_eq!(diffs.len(), 2);
                for d in diffs {
                    assert!(d.lo <= d.point && d.point <= d.hi);
                }
            }
        }
    }
}
