//! Detection metrics and statistics: AUROC, pool-calibrated TPR at low FPR,
//! percentile-bootstrap confidence intervals, paired detector comparisons,
//! standardized margins and representation-geometry summaries.
//!
//! Conventions that matter at low FPR: AUROC gives exact ties 0.5 credit,
//! thresholds are order statistics of the pool's own human scores, and
//! positives require a strictly greater score so the realized FPR never
//! exceeds the requested one.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AI, HUMAN};
use crate::{ceil_with_snap, Error, Real, Result};

/// Default bootstrap resample count.
pub const DEFAULT_BOOTSTRAP_B: usize = 5000;
/// Default bootstrap RNG seed.
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 2026;

/// One scored row of an evaluation pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRow {
    pub id: String,
    /// Detector score; larger means "more likely AI".
    pub score: Real,
    /// Binary main label (0 human, 1 AI).
    pub main: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub atk: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dom: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<Vec<Real>>,
}

/// A pool of scored rows. Construction checks the row-level invariants;
/// class-presence requirements are checked by the individual metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPool {
    pub rows: Vec<ScoredRow>,
}

impl ScoredPool {
    pub fn new(rows: Vec<ScoredRow>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if !row.score.is_finite() {
                return Err(Error::Metric(format!(
                    "row {i} ({:?}) has non-finite score {}",
                    row.id, row.score
                )));
            }
            if row.main != HUMAN && row.main != AI {
                return Err(Error::Metric(format!(
                    "row {i} ({:?}) has non-binary main label {}",
                    row.id, row.main
                )));
            }
        }
        Ok(ScoredPool { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scores(&self) -> Vec<Real> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.main).collect()
    }

    pub fn human_scores(&self) -> Vec<Real> {
        self.rows
            .iter()
            .filter(|r| r.main == HUMAN)
            .map(|r| r.score)
            .collect()
    }
}

fn check_scores_labels(scores: &[Real], labels: &[usize], op: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{op}: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("{op}: non-finite score {s}")));
    }
    let mut n_h = 0;
    let mut n_a = 0;
    for &l in labels {
        match l {
            HUMAN => n_h += 1,
            AI => n_a += 1,
            other => {
                return Err(Error::Metric(format!("{op}: non-binary label {other}")));
            }
        }
    }
    Ok((n_h, n_a))
}

/// Mann-Whitney AUROC: the fraction of (AI, human) pairs where the AI row
/// scores strictly higher, with 0.5 credit for exact ties. Computed by
/// rank-sum with mid-ranks in O(n log n); numerically identical to the
/// brute-force pairwise count.
pub fn auroc_scores(scores: &[Real], labels: &[usize]) -> Result<Real> {
    let (n_h, n_a) = check_scores_labels(scores, labels, "auroc")?;
    if n_h == 0 || n_a == 0 {
        return Err(Error::Metric(format!(
            "auroc needs both classes, got {n_h} human and {n_a} AI rows"
        )));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // mid-ranks over tie groups, 1-indexed
    let mut rank_sum_ai = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as Real / 2.0;
        for &row in &order[i..=j] {
            if labels[row] == AI {
                rank_sum_ai += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_ai - (n_a * (n_a + 1)) as Real / 2.0;
    Ok(u / (n_a as Real * n_h as Real))
}

/// AUROC of a pool.
pub fn auroc(pool: &ScoredPool) -> Result<Real> {
    auroc_scores(&pool.scores(), &pool.labels())
}

/// Smallest threshold such that the fraction of calibration humans strictly
/// above it is at most `fpr`: the `ceil((1-fpr)*N)`-th ascending order
/// statistic of the human scores.
pub fn threshold_at_fpr(human_scores: &[Real], fpr: Real) -> Result<Real> {
    if human_scores.is_empty() {
        return Err(Error::Metric("threshold_at_fpr: no human scores".into()));
    }
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::Metric(format!(
            "threshold_at_fpr: fpr {fpr} outside (0, 1)"
        )));
    }
    if let Some(s) = human_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!(
            "threshold_at_fpr: non-finite score {s}"
        )));
    }
    let mut sorted = human_scores.to_vec();
    sorted.sort_by(Real::total_cmp);
    let n = sorted.len();
    let k = ceil_with_snap((1.0 - fpr) * n as f64).clamp(1, n);
    Ok(sorted[k - 1])
}

/// Fraction of AI rows scoring strictly above the pool-calibrated threshold.
pub fn tpr_at_fpr_scores(scores: &[Real], labels: &[usize], fpr: Real) -> Result<Real> {
    let (n_h, n_a) = check_scores_labels(scores, labels, "tpr_at_fpr")?;
    if n_h == 0 || n_a == 0 {
        return Err(Error::Metric(format!(
            "tpr_at_fpr needs both classes, got {n_h} human and {n_a} AI rows"
        )));
    }
    let humans: Vec<Real> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == HUMAN)
        .map(|(&s, _)| s)
        .collect();
    let theta = threshold_at_fpr(&humans, fpr)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == AI && s > theta)
        .count();
    Ok(hits as Real / n_a as Real)
}

/// TPR at the given FPR for a pool.
pub fn tpr_at_fpr(pool: &ScoredPool, fpr: Real) -> Result<Real> {
    tpr_at_fpr_scores(&pool.scores(), &pool.labels(), fpr)
}

/// Which metric a bootstrap routine recomputes per resample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolMetric {
    Auroc,
    TprAtFpr(Real),
}

impl PoolMetric {
    fn eval(&self, scores: &[Real], labels: &[usize]) -> Result<Real> {
        match *self {
            PoolMetric::Auroc => auroc_scores(scores, labels),
            PoolMetric::TprAtFpr(f) => tpr_at_fpr_scores(scores, labels, f),
        }
    }
}

/// 95% percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CiBounds {
    pub lo: Real,
    pub hi: Real,
    pub half_width: Real,
}

/// Point estimate with an optional interval, as reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Real,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci: Option<CiBounds>,
}

/// Aggregate metric block for one evaluation pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: MetricValue,
    /// Keyed by the FPR rendered as text ("0.05"), for stable JSON.
    pub tpr_at: BTreeMap<String, MetricValue>,
    pub per_attack: BTreeMap<String, Real>,
    pub per_generator: BTreeMap<String, Real>,
}

/// Draws the metric's bootstrap distribution: `b` whole-row resamples with
/// replacement; a resample that loses a class is redrawn (at most 100 extra
/// tries each).
fn bootstrap_samples(
    scores: &[Real],
    labels: &[usize],
    metric: PoolMetric,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Real>> {
    let n = scores.len();
    let mut out = Vec::with_capacity(b);
    let mut s_buf = vec![0.0; n];
    let mut l_buf = vec![0usize; n];
    for _ in 0..b {
        let mut tries = 0;
        loop {
            let mut has_h = false;
            let mut has_a = false;
            for k in 0..n {
                let pick = rng.gen_range(0..n);
                s_buf[k] = scores[pick];
                l_buf[k] = labels[pick];
                has_h |= labels[pick] == HUMAN;
                has_a |= labels[pick] == AI;
            }
            if has_h && has_a {
                out.push(metric.eval(&s_buf, &l_buf)?);
                break;
            }
            tries += 1;
            if tries > 100 {
                return Err(Error::Metric(
                    "bootstrap: a class was missing in 100 consecutive resamples".into(),
                ));
            }
        }
    }
    Ok(out)
}

/// Nearest-rank percentile endpoints of a sample vector.
fn percentile_bounds(samples: &mut [Real]) -> CiBounds {
    samples.sort_by(Real::total_cmp);
    let b = samples.len();
    let lo = samples[ceil_with_snap(0.025 * b as f64).clamp(1, b) - 1];
    let hi = samples[ceil_with_snap(0.975 * b as f64).clamp(1, b) - 1];
    CiBounds {
        lo,
        hi,
        half_width: (hi - lo) / 2.0,
    }
}

/// The raw bootstrap distribution behind [`bootstrap_ci`] (same seed, same
/// draws); exposed so the interval endpoints can be audited against the
/// sorted replicates.
pub fn bootstrap_replicates(
    pool: &ScoredPool,
    metric: PoolMetric,
    b: usize,
    seed: u64,
) -> Result<Vec<Real>> {
    if b < 100 {
        return Err(Error::Metric(format!("bootstrap: B = {b} is below 100")));
    }
    let scores = pool.scores();
    let labels = pool.labels();
    // fail fast (and with a clearer message) if the full pool is unusable
    metric.eval(&scores, &labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bootstrap_samples(&scores, &labels, metric, b, &mut rng)
}

/// 95% percentile bootstrap over whole-row resamples of the pool.
pub fn bootstrap_ci(
    pool: &ScoredPool,
    metric: PoolMetric,
    b: usize,
    seed: u64,
) -> Result<CiBounds> {
    let mut samples = bootstrap_replicates(pool, metric, b, seed)?;
    Ok(percentile_bounds(&mut samples))
}

/// Paired detector comparison on identical rows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairedDiff {
    /// metric(A) - metric(B) on the full pool.
    pub point: Real,
    pub lo: Real,
    pub hi: Real,
    /// True when the 95% CI excludes zero.
    pub significant: bool,
}

/// Percentile bootstrap of metric(A) - metric(B) with jointly resampled row
/// indices, so per-row pairing is preserved.
pub fn paired_diff_ci(
    pool_a: &ScoredPool,
    pool_b: &ScoredPool,
    metric: PoolMetric,
    b: usize,
    seed: u64,
) -> Result<PairedDiff> {
    if b < 100 {
        return Err(Error::Metric(format!("bootstrap: B = {b} is below 100")));
    }
    if pool_a.len() != pool_b.len() {
        return Err(Error::Metric(format!(
            "paired_diff_ci: pools have {} vs {} rows",
            pool_a.len(),
            pool_b.len()
        )));
    }
    for (i, (ra, rb)) in pool_a.rows.iter().zip(&pool_b.rows).enumerate() {
        if ra.id != rb.id {
            return Err(Error::Metric(format!(
                "paired_diff_ci: row {i} id {:?} vs {:?}",
                ra.id, rb.id
            )));
        }
        if ra.main != rb.main {
            return Err(Error::Metric(format!(
                "paired_diff_ci: row {i} ({:?}) label {} vs {}",
                ra.id, ra.main, rb.main
            )));
        }
    }
    let sa = pool_a.scores();
    let sb = pool_b.scores();
    let labels = pool_a.labels();
    let point = metric.eval(&sa, &labels)? - metric.eval(&sb, &labels)?;

    let n = sa.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(b);
    let mut ra = vec![0.0; n];
    let mut rb = vec![0.0; n];
    let mut rl = vec![0usize; n];
    for _ in 0..b {
        let mut tries = 0;
        loop {
            let mut has_h = false;
            let mut has_a = false;
            for k in 0..n {
                let pick = rng.gen_range(0..n);
                ra[k] = sa[pick];
                rb[k] = sb[pick];
                rl[k] = labels[pick];
                has_h |= labels[pick] == HUMAN;
                has_a |= labels[pick] == AI;
            }
            if has_h && has_a {
                deltas.push(metric.eval(&ra, &rl)? - metric.eval(&rb, &rl)?);
                break;
            }
            tries += 1;
            if tries > 100 {
                return Err(Error::Metric(
                    "bootstrap: a class was missing in 100 consecutive resamples".into(),
                ));
            }
        }
    }
    let bounds = percentile_bounds(&mut deltas);
    Ok(PairedDiff {
        point,
        lo: bounds.lo,
        hi: bounds.hi,
        significant: bounds.lo > 0.0 || bounds.hi < 0.0,
    })
}

/// Inverse standard-normal CDF via Acklam's rational approximation
/// (absolute error below 1e-8 across [1e-6, 1-1e-6]).
pub fn inv_normal_cdf(p: Real) -> Result<Real> {
    if !(p > 0.0 && p < 1.0) || !p.is_finite() {
        return Err(Error::Metric(format!(
            "inv_normal_cdf: p {p} outside (0, 1)"
        )));
    }
    const A: [Real; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [Real; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [Real; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [Real; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: Real = 0.02425;

    let tail = |q: Real| -> Real {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let z = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        q * (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5])
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    Ok(z)
}

/// Standardized margin of a score against a pool's human score distribution:
/// `inv_normal_cdf(percentile-in-humans) - inv_normal_cdf(0.99)`, with a
/// mid-rank percentile clamped to [1/(N+1), N/(N+1)] so scores outside the
/// human range stay finite. Positive means the score clears the pool's
/// 1%-FPR operating point.
pub fn standardized_margin(score: Real, human_scores: &[Real]) -> Result<Real> {
    let n = human_scores.len();
    if n < 2 {
        return Err(Error::Metric(format!(
            "standardized_margin: need at least 2 human scores, got {n}"
        )));
    }
    if !score.is_finite() {
        return Err(Error::Metric(format!(
            "standardized_margin: non-finite score {score}"
        )));
    }
    if let Some(s) = human_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!(
            "standardized_margin: non-finite human score {s}"
        )));
    }
    let below = human_scores.iter().filter(|&&h| h < score).count();
    let tied = human_scores.iter().filter(|&&h| h == score).count();
    let nf = n as Real;
    let pct = ((below as Real + 0.5 * tied as Real) / nf).clamp(1.0 / (nf + 1.0), nf / (nf + 1.0));
    Ok(inv_normal_cdf(pct)? - inv_normal_cdf(0.99)?)
}

/// Representation-geometry summary over L2-normalized embeddings.
#[derive(Debug, Clone)]
pub struct GeometryStats {
    /// Cosine distances between rows sharing a source id.
    pub within: Vec<Real>,
    /// Cosine distances across source ids.
    pub between: Vec<Real>,
    pub within_mean: Real,
    pub between_mean: Real,
    /// (mean between - mean within) / pooled std; `None` when degenerate.
    pub cohens_d: Option<Real>,
    /// Mean inter-centroid distance over mean member-to-centroid dispersion,
    /// grouped by `group_ids`.
    pub bw_ratio: Option<Real>,
    /// Mean member-to-centroid distance over mean inter-centroid distance,
    /// grouped by `source_ids` (spoke layout: how far variants sit from
    /// their source hub relative to hub spacing).
    pub spoke_wb: Option<Real>,
    pub warnings: Vec<String>,
}

fn cos_dist(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

fn sample_var(xs: &[Real], mean: Real) -> Real {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / (xs.len() - 1) as Real
}

/// Mean member-to-centroid dispersion and mean inter-centroid distance for a
/// grouping; groups with fewer than 2 members are excluded with a warning.
fn centroid_spread(
    rows: &[Vec<Real>],
    ids: &[usize],
    what: &str,
    warnings: &mut Vec<String>,
) -> Option<(Real, Real)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut centroids = Vec::new();
    let mut dispersion = Vec::new();
    for (g, members) in &groups {
        if members.len() < 2 {
            warnings.push(format!("{what} group {g} has {} member(s), excluded", members.len()));
            continue;
        }
        let dim = rows[members[0]].len();
        let mut c = vec![0.0; dim];
        for &m in members {
            for (ci, v) in c.iter_mut().zip(&rows[m]) {
                *ci += v;
            }
        }
        for ci in c.iter_mut() {
            *ci /= members.len() as Real;
        }
        let norm = c.iter().map(|v| v * v).sum::<Real>().sqrt();
        if norm == 0.0 {
            warnings.push(format!("{what} group {g} centroid is zero, excluded"));
            continue;
        }
        let unit: Vec<Real> = c.iter().map(|v| v / norm).collect();
        for &m in members {
            dispersion.push(cos_dist(&unit, &rows[m]));
        }
        centroids.push(unit);
    }
    if centroids.len() < 2 {
        warnings.push(format!(
            "{what}: fewer than 2 usable groups, centroid ratio undefined"
        ));
        return None;
    }
    let mut inter = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter.push(cos_dist(&centroids[i], &centroids[j]));
        }
    }
    let within = dispersion.iter().sum::<Real>() / dispersion.len() as Real;
    let between = inter.iter().sum::<Real>() / inter.len() as Real;
    Some((within, between))
}

/// Within-source vs between-source cosine-distance statistics plus the two
/// centroid ratios. `source_ids` group rows derived from the same seed text
/// (clean plus attacked variants); `group_ids` group rows by generator.
pub fn geometry_stats(
    embeddings: &[Vec<Real>],
    source_ids: &[usize],
    group_ids: &[usize],
) -> Result<GeometryStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Metric(format!(
            "geometry_stats: need at least 2 embeddings, got {n}"
        )));
    }
    if source_ids.len() != n || group_ids.len() != n {
        return Err(Error::Metric(format!(
            "geometry_stats: {n} embeddings vs {} source ids, {} group ids",
            source_ids.len(),
            group_ids.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut unit = Vec::with_capacity(n);
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::Metric(format!(
                "geometry_stats: row {i} has dim {} vs {dim}",
                e.len()
            )));
        }
        let norm = e.iter().map(|v| v * v).sum::<Real>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Metric(format!(
                "geometry_stats: row {i} has unusable norm {norm}"
            )));
        }
        unit.push(e.iter().map(|v| v / norm).collect::<Vec<Real>>());
    }

    let mut within = Vec::new();
    let mut between = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = cos_dist(&unit[i], &unit[j]);
            if source_ids[i] == source_ids[j] {
                within.push(d);
            } else {
                between.push(d);
            }
        }
    }

    let mut warnings = Vec::new();
    let mean = |v: &[Real]| -> Real {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<Real>() / v.len() as Real
        }
    };
    let within_mean = mean(&within);
    let between_mean = mean(&between);

    let cohens_d = if within.is_empty() || between.is_empty() {
        warnings.push("cohens_d undefined: a distance sample is empty".into());
        None
    } else {
        let (n1, n2) = (within.len(), between.len());
        let dof = n1 + n2 - 2;
        if dof == 0 {
            warnings.push("cohens_d undefined: too few pairs".into());
            None
        } else {
            let pooled = (((n1 - 1) as Real * sample_var(&within, within_mean)
                + (n2 - 1) as Real * sample_var(&between, between_mean))
                / dof as Real)
                .sqrt();
            if pooled > 0.0 {
                Some((between_mean - within_mean) / pooled)
            } else {
                warnings.push("cohens_d undefined: zero pooled standard deviation".into());
                None
            }
        }
    };

    let bw_ratio = centroid_spread(&unit, group_ids, "generator", &mut warnings).and_then(
        |(w, b)| {
            if w > 0.0 {
                Some(b / w)
            } else {
                warnings.push("bw_ratio undefined: zero within-group dispersion".into());
                None
            }
        },
    );
    let spoke_wb =
        centroid_spread(&unit, source_ids, "source", &mut warnings).and_then(|(w, b)| {
            if b > 0.0 {
                Some(w / b)
            } else {
                warnings.push("spoke_wb undefined: zero inter-centroid distance".into());
                None
            }
        });

    Ok(GeometryStats {
        within,
        between,
        within_mean,
        between_mean,
        cohens_d,
        bw_ratio,
        spoke_wb,
        warnings,
    })
}
