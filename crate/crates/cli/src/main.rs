//! `meld` command line: corpus synthesis, training, attack pools, low-FPR
//! evaluation, objective ablations, and paired score comparisons.
//!
//! Every subcommand is a thin orchestrator over the library crate; all
//! parallelism lives there. `MELD_THREADS` caps the worker count (default:
//! machine parallelism). Errors print as a single `error: ...` line on
//! stderr with a nonzero exit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use meld_core::attacks::{AttackConfig, AttackKind, ALL_KINDS, EVAL_KINDS, TRAIN_KINDS};
use meld_core::corpus::{self, LabelSpace, MixtureSpec, TextRecord, AI};
use meld_core::evalpipe::{
    ablation_experiment, assemble_report, read_scores_csv, save_report, score_pool,
    write_scores_csv, AblationConfig, ChunkConfig, ReportConfig, ScoreOptions,
};
use meld_core::metrics::{paired_diff_ci, PoolMetric, DEFAULT_BOOTSTRAP_B, DEFAULT_BOOTSTRAP_SEED};
use meld_core::model::{load_checkpoint, save_checkpoint};
use meld_core::synth::{self, SynthSpec};
use meld_core::trainer::{run_training, StepDiagnostics, TrainConfig};
use meld_core::{fnv1a64, Real};

#[derive(Parser)]
#[command(
    name = "meld",
    version,
    about = "Multi-task AI-text detector: synthesis, training, and low-FPR evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic synthetic corpus described by a spec file.
    Synth {
        /// JSON spec; `{}` selects all defaults.
        #[arg(long)]
        spec: PathBuf,
        /// Output corpus (JSONL). A `<stem>.labels.json` sibling is written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write the averaged checkpoint plus diagnostics.
    Train {
        /// `key = value` config; must set train_corpus, val_corpus, labels.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; diagnostics go to `<out>.diagnostics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross a pool with attack kinds to build an attacked pool.
    Attack {
        #[arg(long = "in")]
        input: PathBuf,
        /// Label-space JSON used to parse and re-emit the pool.
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated kind names, or one of: train, eval, all.
        #[arg(long, default_value = "eval")]
        kinds: String,
        /// Per-character/word edit rate.
        #[arg(long, default_value_t = 0.05)]
        rate: Real,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a pool with a checkpoint and write the evaluation report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Label-space JSON used to parse the pool.
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated FPR operating points; the first one anchors the
        /// per-attack and per-generator breakdowns.
        #[arg(long, default_value = "0.05,0.01")]
        fpr: String,
        /// Report JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-row scores CSV (input to `report`).
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        chunk_len: usize,
        /// Window step; defaults to half the chunk length.
        #[arg(long)]
        stride: Option<usize>,
        /// Aggregate window scores by max instead of mean.
        #[arg(long)]
        max_agg: bool,
        /// Bootstrap replicates for the confidence intervals.
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_B)]
        bootstrap: usize,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SEED)]
        boot_seed: u64,
    },
    /// Retrain every objective variant and compare them on a held-out pool.
    Ablate {
        /// Base training config (shared by all variants).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `ablation.json`.
        #[arg(long)]
        out: PathBuf,
        /// Held-out attacked pool; when omitted, one is derived from the
        /// validation corpus by crossing its AI rows with the eval attacks.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value = "0.01,0.05")]
        fpr: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Paired bootstrap comparison of two score files over the same rows.
    Report {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.05,0.01")]
        fpr: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SEED)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|()| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MELD_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("MELD_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to size the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, out } => cmd_synth(&spec, &out),
        Cmd::Train { config, out } => cmd_train(&config, &out),
        Cmd::Attack {
            input,
            labels,
            kinds,
            rate,
            seed,
            out,
        } => cmd_attack(&input, &labels, &kinds, rate, seed, &out),
        Cmd::Eval {
            ckpt,
            pool,
            labels,
            fpr,
            out,
            scores,
            chunk_len,
            stride,
            max_agg,
            bootstrap,
            boot_seed,
        } => {
            let chunk = ChunkConfig {
                chunk_len,
                stride: stride.unwrap_or_else(|| (chunk_len / 2).max(1)),
                max_agg,
            };
            cmd_eval(
                &ckpt,
                &pool,
                &labels,
                &fpr,
                &out,
                scores.as_deref(),
                chunk,
                bootstrap,
                boot_seed,
            )
        }
        Cmd::Ablate {
            config,
            out,
            pool,
            seeds,
            fpr,
            bootstrap,
        } => cmd_ablate(&config, &out, pool.as_deref(), &seeds, &fpr, bootstrap),
        Cmd::Report {
            a,
            b,
            out,
            fpr,
            bootstrap,
            seed,
        } => cmd_report(&a, &b, &out, &fpr, bootstrap, seed),
    }
}

// ---------------------------------------------------------------------------
// Shared parsing helpers
// ---------------------------------------------------------------------------

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} {:?}: {e}", p.trim()))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("expected at least one {what} in {s:?}");
    }
    Ok(items)
}

fn parse_kinds(s: &str) -> Result<Vec<AttackKind>> {
    match s.trim() {
        "train" => Ok(TRAIN_KINDS.to_vec()),
        "eval" => Ok(EVAL_KINDS.to_vec()),
        "all" => Ok(ALL_KINDS.to_vec()),
        list => list
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| AttackKind::from_name(p.trim()).map_err(Into::into))
            .collect(),
    }
}

fn labels_sibling(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    out.with_file_name(format!("{stem}.labels.json"))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pool".into())
}

/// Load the corpora a training config points at.
struct TrainingData {
    space: LabelSpace,
    train: Vec<TextRecord>,
    val: Vec<TextRecord>,
    mixture: MixtureSpec,
}

fn load_training_data(cfg: &TrainConfig) -> Result<TrainingData> {
    let labels = cfg
        .labels
        .as_ref()
        .context("config must set `labels = <path>`")?;
    let train_path = cfg
        .train_corpus
        .as_ref()
        .context("config must set `train_corpus = <path>`")?;
    let val_path = cfg
        .val_corpus
        .as_ref()
        .context("config must set `val_corpus = <path>`")?;
    let space = LabelSpace::load(labels)?;
    let train = corpus::load_jsonl(train_path, &space)?;
    let val = corpus::load_jsonl(val_path, &space)?;
    let mixture = match &cfg.mixture {
        Some(p) => MixtureSpec::load(p)?,
        None => MixtureSpec::proportional(&train)?,
    };
    Ok(TrainingData {
        space,
        train,
        val,
        mixture,
    })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::load(spec_path)?;
    let rows = synth::generate(&spec)?;
    let space = synth::label_space(&spec)?;
    corpus::save_jsonl(out, &rows, &space)?;
    let labels = labels_sibling(out);
    space.save(&labels)?;
    let attacked = rows.iter().filter(|r| r.atk_label.is_some()).count();
    println!(
        "wrote {} rows ({} attacked) to {}; labels: {}",
        rows.len(),
        attacked,
        out.display(),
        labels.display()
    );
    Ok(())
}

/// Fixed diagnostics layout; optional values render as empty cells.
const DIAGNOSTICS_HEADER: &str = "step,lr,L_main,L_gen,L_atk,L_dom,L_cls,L_ema,L_rank,L_total,\
                                  s_main,s_gen,s_atk,s_dom,val_auroc";

fn write_diagnostics_csv(path: &Path, rows: &[StepDiagnostics]) -> Result<()> {
    let mut out = String::new();
    out.push_str(DIAGNOSTICS_HEADER);
    out.push('\n');
    let opt = |v: Option<Real>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            d.step,
            d.lr,
            opt(d.loss_main),
            opt(d.loss_gen),
            opt(d.loss_atk),
            opt(d.loss_dom),
            d.loss_cls,
            opt(d.loss_ema),
            opt(d.loss_rank),
            d.loss_total,
            d.s[0],
            d.s[1],
            d.s[2],
            d.s[3],
            opt(d.val_auroc),
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = load_training_data(&cfg)?;
    let outcome = run_training(&cfg, &data.train, &data.mixture, &data.val, &data.space)?;
    save_checkpoint(&outcome.params, out)?;
    let csv_path = PathBuf::from(format!("{}.diagnostics.csv", out.display()));
    write_diagnostics_csv(&csv_path, &outcome.diagnostics)?;
    let last_auroc = outcome
        .diagnostics
        .iter()
        .rev()
        .find_map(|d| d.val_auroc)
        .unwrap_or(Real::NAN);
    println!(
        "checkpoint: {} (averaged over steps {:?})",
        out.display(),
        outcome.swa_steps
    );
    println!("diagnostics: {}", csv_path.display());
    println!("final val AUROC: {last_auroc:.4}");
    Ok(())
}

fn cmd_attack(
    input: &Path,
    labels: &Path,
    kinds: &str,
    rate: Real,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let space = LabelSpace::load(labels)?;
    let rows = corpus::load_jsonl(input, &space)?;
    let kinds = parse_kinds(kinds)?;
    let cfg = AttackConfig {
        rate,
        seed,
        ..AttackConfig::default().with_builtin_lexicon()
    };
    let attacked = meld_core::attacks::build_attacked_pool(&rows, &kinds, &cfg)?;
    corpus::save_jsonl(out, &attacked, &space)?;
    println!(
        "wrote {} attacked rows ({} input rows x {} kinds) to {}",
        attacked.len(),
        rows.len(),
        kinds.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    pool_path: &Path,
    labels: &Path,
    fpr: &str,
    out: &Path,
    scores: Option<&Path>,
    chunk: ChunkConfig,
    bootstrap: usize,
    boot_seed: u64,
) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let space = LabelSpace::load(labels)?;
    let records = corpus::load_jsonl(pool_path, &space)?;
    let fprs: Vec<Real> = parse_list(fpr, "fpr")?;
    let pool = score_pool(
        &params,
        &records,
        &ScoreOptions {
            chunk,
            capture_embeddings: false,
        },
    )?;
    if let Some(path) = scores {
        write_scores_csv(&pool, path)?;
        println!("scores: {}", path.display());
    }
    let report = assemble_report(
        &pool,
        &ReportConfig {
            pool_name: file_stem(pool_path),
            fprs: fprs.clone(),
            bootstrap_b: bootstrap,
            seed: boot_seed,
        },
    )?;
    save_report(&report, out)?;
    let mut line = format!(
        "pool={} n={} auroc={:.4} ci=[{:.4},{:.4}]",
        report.pool, report.n_rows, report.auroc, report.ci.lo, report.ci.hi
    );
    for f in &fprs {
        let key = format!("{f}");
        if let Some(m) = report.tpr.get(&key) {
            line.push_str(&format!(" tpr@{key}={:.4}", m.value));
        }
    }
    println!("{line}");
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    out_dir: &Path,
    pool: Option<&Path>,
    seeds: &str,
    fpr: &str,
    bootstrap: usize,
) -> Result<()> {
    let base = TrainConfig::load(config)?;
    let data = load_training_data(&base)?;
    let eval_rows = match pool {
        Some(p) => corpus::load_jsonl(p, &data.space)?,
        None => {
            // Derive a held-out attacked pool from the validation corpus:
            // keep every row and add eval-attacked copies of the AI rows.
            let ai_rows: Vec<TextRecord> = data
                .val
                .iter()
                .filter(|r| r.main_label == AI)
                .cloned()
                .collect();
            let rate = if base.attack_rate > 0.0 {
                base.attack_rate
            } else {
                0.05
            };
            let attack_cfg = AttackConfig {
                rate,
                seed: base.seed ^ fnv1a64(b"ablate:pool"),
                ..AttackConfig::default().with_builtin_lexicon()
            };
            let mut rows = data.val.clone();
            rows.extend(meld_core::attacks::build_attacked_pool(
                &ai_rows,
                &EVAL_KINDS,
                &attack_cfg,
            )?);
            rows
        }
    };
    let cfg = AblationConfig {
        base,
        seeds: parse_list(seeds, "seed")?,
        fprs: parse_list(fpr, "fpr")?,
        chunk: ChunkConfig::default(),
        bootstrap_b: bootstrap,
    };
    let report = ablation_experiment(
        &cfg,
        &data.train,
        &data.mixture,
        &data.val,
        &eval_rows,
        &data.space,
    )?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join("ablation.json");
    report.save(&path)?;
    for v in &report.variants {
        let mut line = format!("variant={}", v.variant);
        for (key, mean) in &v.mean_tpr {
            line.push_str(&format!(" tpr@{key}={mean:.4}"));
        }
        println!("{line}");
    }
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_report(
    a: &Path,
    b: &Path,
    out: &Path,
    fpr: &str,
    bootstrap: usize,
    seed: u64,
) -> Result<()> {
    let pool_a = read_scores_csv(a)?;
    let pool_b = read_scores_csv(b)?;
    let fprs: Vec<Real> = parse_list(fpr, "fpr")?;
    let auroc = paired_diff_ci(&pool_a, &pool_b, PoolMetric::Auroc, bootstrap, seed)?;
    let mut tpr = BTreeMap::new();
    for &f in &fprs {
        let d = paired_diff_ci(&pool_a, &pool_b, PoolMetric::TprAtFpr(f), bootstrap, seed)?;
        tpr.insert(format!("{f}"), d);
    }
    let report = serde_json::json!({
        "a": a.display().to_string(),
        "b": b.display().to_string(),
        "auroc": auroc,
        "tpr": tpr,
    });
    let mut file = std::fs::File::create(out)
        .with_context(|| format!("creating {}", out.display()))?;
    file.write_all(serde_json::to_string_pretty(&report)?.as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "auroc diff={:.4} ci=[{:.4},{:.4}] significant={}",
        auroc.point, auroc.lo, auroc.hi, auroc.significant
    );
    for (key, d) in &tpr {
        println!(
            "tpr@{key} diff={:.4} ci=[{:.4},{:.4}] significant={}",
            d.point, d.lo, d.hi, d.significant
        );
    }
    println!("report: {}", out.display());
    Ok(())
}
