//! Training loop: the composite-objective step, AdamW with warmup/cosine
//! schedule, EMA teacher maintenance, and SWA checkpoint selection.
//!
//! One logical thread owns [`TrainState`]; only validation scoring fans out
//! across rows (collected back in input order so AUROC stays deterministic).
//! All randomness derives from the single `seed` config key through four
//! domain-separated streams: parameter init, batch sampling, augmentation
//! coin flips, and dropout masks. Keeping the streams separate means every
//! ablation variant consumes them identically and therefore sees the same
//! data order — verifiable through [`StepDiagnostics::batch_hash`].

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{augment_view, AttackConfig};
use crate::corpus::{Batch, LabelSpace, MixtureSampler, MixtureSpec, Task, TextRecord, TASKS};
use crate::losses::{self, LossWeights, TaskLosses};
use crate::metrics;
use crate::model::{
    ai_score, ema_update, encode, encode_plain, featurize, head_logits, head_logits_on_tape,
    swa_average, FeatureSeq, ModelDims, ModelParams, TapeParams, TeacherState,
};
use crate::numcore::{Gradients, ValueId};
use crate::{fnv1a64, Error, Real, Result, Tape, Tensor};

/// How many top checkpoints the SWA average draws from.
pub const SWA_TOP_K: usize = 10;

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// Which objective the run optimizes: the full composite or one ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Composite objective with all terms.
    Full,
    /// Main head only: auxiliary losses off, fixed unit weights.
    Dense,
    /// No hard-negative ranking term.
    NoRank,
    /// No teacher distillation term.
    NoEma,
    /// Fixed unit task weights; the four s_t stay frozen.
    NoKendall,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Dense,
        Variant::NoRank,
        Variant::NoEma,
        Variant::NoKendall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dense => "dense",
            Variant::NoRank => "no_rank",
            Variant::NoEma => "no_ema",
            Variant::NoKendall => "no_kendall",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        let canon = name.trim().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == canon)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}`")))
    }

    /// Supervise the generator/attack/domain heads?
    pub fn use_aux(self) -> bool {
        self != Variant::Dense
    }

    /// Learned uncertainty weighting? Otherwise losses sum with unit weights
    /// and the log-variance scalars receive no gradient.
    pub fn use_kendall(self) -> bool {
        !matches!(self, Variant::Dense | Variant::NoKendall)
    }

    pub fn use_ema(self) -> bool {
        self != Variant::NoEma
    }

    pub fn use_rank(self) -> bool {
        self != Variant::NoRank
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Every knob of a training run, parsed from a flat `key = value` text file.
///
/// Defaults are the desk-scale settings (3000 steps, 150 warmup, eval every
/// 100, SWA window from step 500, batch 64); the reference-scale schedule
/// (1500 warmup, batch 384, SWA from step 2000) stays reachable by config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub eval_every: usize,
    /// First step eligible for checkpoint recording.
    pub swa_start: usize,
    pub batch_size: usize,
    pub lr_peak: Real,
    pub weight_decay: Real,
    pub dropout: Real,
    /// Probability that a row's student view is augmented.
    pub p_augment: Real,
    /// Edit rate handed to the augmentation attacks.
    pub attack_rate: Real,
    pub beta_ema: Real,
    pub seed: u64,
    pub max_seq_len: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub weights: LossWeights,
    pub variant: Variant,
    pub train_corpus: Option<PathBuf>,
    pub val_corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub mixture: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 3000,
            warmup_steps: 150,
            eval_every: 100,
            swa_start: 500,
            batch_size: 64,
            lr_peak: 4e-5,
            weight_decay: 0.01,
            dropout: 0.1,
            p_augment: 0.5,
            attack_rate: 0.05,
            beta_ema: 0.999,
            seed: 2026,
            max_seq_len: 256,
            vocab: 32768,
            hidden: 64,
            weights: LossWeights::default(),
            variant: Variant::Full,
            train_corpus: None,
            val_corpus: None,
            labels: None,
            mixture: None,
            out_dir: None,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))
}

impl TrainConfig {
    /// Apply one `key = value` assignment (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "total_steps" => self.total_steps = parse_field(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_field(key, value)?,
            "eval_every" => self.eval_every = parse_field(key, value)?,
            "swa_start" => self.swa_start = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "lr_peak" => self.lr_peak = parse_field(key, value)?,
            "weight_decay" => self.weight_decay = parse_field(key, value)?,
            "dropout" => self.dropout = parse_field(key, value)?,
            "p_augment" => self.p_augment = parse_field(key, value)?,
            "attack_rate" => self.attack_rate = parse_field(key, value)?,
            "beta_ema" => self.beta_ema = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_field(key, value)?,
            "vocab" => self.vocab = parse_field(key, value)?,
            "hidden" => self.hidden = parse_field(key, value)?,
            "lambda_ema" => self.weights.lambda_ema = parse_field(key, value)?,
            "lambda_rank" => self.weights.lambda_rank = parse_field(key, value)?,
            "tau_tea" => self.weights.tau_tea = parse_field(key, value)?,
            "tau_stu" => self.weights.tau_stu = parse_field(key, value)?,
            "tau_r" => self.weights.tau_r = parse_field(key, value)?,
            "alpha" => self.weights.alpha = parse_field(key, value)?,
            "smoothing" => self.weights.smoothing = parse_field(key, value)?,
            "variant" => self.variant = Variant::from_name(value)?,
            "train_corpus" => self.train_corpus = Some(PathBuf::from(value)),
            "val_corpus" => self.val_corpus = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "mixture" => self.mixture = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file. Blank lines and `#` comments are
    /// ignored; every other line must be an assignment of a known key.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        TrainConfig::parse(&text)
    }

    /// Render back to the flat file format; `parse` round-trips it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        for (k, v) in [
            ("total_steps", self.total_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("swa_start", self.swa_start.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("p_augment", self.p_augment.to_string()),
            ("attack_rate", self.attack_rate.to_string()),
            ("beta_ema", self.beta_ema.to_string()),
            ("seed", self.seed.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("vocab", self.vocab.to_string()),
            ("hidden", self.hidden.to_string()),
            ("lambda_ema", w.lambda_ema.to_string()),
            ("lambda_rank", w.lambda_rank.to_string()),
            ("tau_tea", w.tau_tea.to_string()),
            ("tau_stu", w.tau_stu.to_string()),
            ("tau_r", w.tau_r.to_string()),
            ("alpha", w.alpha.to_string()),
            ("smoothing", w.smoothing.to_string()),
            ("variant", self.variant.name().to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in [
            ("train_corpus", &self.train_corpus),
            ("val_corpus", &self.val_corpus),
            ("labels", &self.labels),
            ("mixture", &self.mixture),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = v {
                s.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 {
            return err("total_steps must be >= 1".into());
        }
        if self.warmup_steps > self.total_steps {
            return err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.swa_start > self.total_steps {
            return err(format!(
                "swa_start {} is past total_steps {}; no checkpoint would ever be recorded",
                self.swa_start, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return err(format!("lr_peak {} must be positive", self.lr_peak));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.p_augment) {
            return err(format!("p_augment {} outside [0, 1]", self.p_augment));
        }
        if !(0.0..=1.0).contains(&self.attack_rate) {
            return err(format!("attack_rate {} outside [0, 1]", self.attack_rate));
        }
        if !(0.0..1.0).contains(&self.beta_ema) {
            return err(format!("beta_ema {} outside [0, 1)", self.beta_ema));
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be >= 1".into());
        }
        if self.vocab < 2 {
            return err("vocab must be >= 2".into());
        }
        if self.hidden == 0 {
            return err("hidden must be >= 1".into());
        }
        self.weights.validate()
    }

    /// Model dimensions for a label space; every head needs at least two
    /// classes for its softmax to be meaningful.
    pub fn dims(&self, space: &LabelSpace) -> ModelDims {
        ModelDims {
            vocab: self.vocab,
            hidden: self.hidden,
            n_gen: space.n_gen().max(2),
            n_atk: space.n_atk().max(2),
            n_dom: space.n_dom().max(2),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW state: one first/second-moment pair per parameter block, laid out in
/// [`BLOCK_NAMES`] order.
#[derive(Debug, Clone)]
pub struct OptimState {
    /// Completed optimizer steps.
    pub step: usize,
    pub lr_peak: Real,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: Real,
    pub betas: (Real, Real),
    pub eps: Real,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl OptimState {
    pub fn new(
        params: &ModelParams,
        lr_peak: Real,
        warmup_steps: usize,
        total_steps: usize,
        weight_decay: Real,
    ) -> OptimState {
        let zeros: Vec<Vec<Real>> = params
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        OptimState {
            step: 0,
            lr_peak,
            warmup_steps,
            total_steps,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`; any step beyond the schedule clamps to 0.
pub fn lr_at(step: usize, optim: &OptimState) -> Real {
    if step > optim.total_steps {
        return 0.0;
    }
    if optim.warmup_steps > 0 && step < optim.warmup_steps {
        return optim.lr_peak * step as Real / optim.warmup_steps as Real;
    }
    let span = (optim.total_steps - optim.warmup_steps) as Real;
    if span == 0.0 {
        return 0.0;
    }
    let frac = (step - optim.warmup_steps) as Real / span;
    optim.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-block gradients in [`BLOCK_NAMES`] order; `None` marks a block the
/// loss graph never touched (treated as zero gradient, but still decayed).
pub type BlockGrads = Vec<Option<Vec<Real>>>;

/// Gather tape gradients into [`BLOCK_NAMES`] order. The four log-variance
/// scalars fold back into the single trailing `log_vars` block.
pub fn collect_block_grads(tp: &TapeParams, grads: &Gradients<Real>) -> BlockGrads {
    let tensor_ids = [
        tp.embedding,
        tp.trunk_w1,
        tp.trunk_b1,
        tp.trunk_w2,
        tp.trunk_b2,
        tp.main_w1,
        tp.main_b1,
        tp.main_w2,
        tp.main_b2,
        tp.gen_w,
        tp.gen_b,
        tp.atk_w,
        tp.atk_b,
        tp.dom_w,
        tp.dom_b,
    ];
    let mut out: BlockGrads = tensor_ids
        .iter()
        .map(|&id| grads.wrt(id).map(|t| t.data().to_vec()))
        .collect();
    let lv: Vec<Option<Real>> = tp
        .log_vars
        .iter()
        .map(|&id| grads.wrt(id).map(|t| t.get(0, 0)))
        .collect();
    if lv.iter().any(Option::is_some) {
        out.push(Some(lv.into_iter().map(|g| g.unwrap_or(0.0)).collect()));
    } else {
        out.push(None);
    }
    out
}

/// One bias-corrected AdamW update with decoupled weight decay
/// (`p -= lr * (m̂/(√v̂+eps) + wd·p)`). The log-variance block is exempt from
/// decay: decaying it would drag the learned task weights toward uniform.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BlockGrads,
    optim: &mut OptimState,
    lr: Real,
) -> Result<()> {
    let mut blocks = params.blocks_mut();
    if grads.len() != blocks.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            detail: format!("{} grad blocks for {} param blocks", grads.len(), blocks.len()),
        });
    }
    optim.step += 1;
    let (b1, b2) = optim.betas;
    let bc1 = 1.0 - b1.powi(optim.step as i32);
    let bc2 = 1.0 - b2.powi(optim.step as i32);
    for (bi, (name, block)) in blocks.iter_mut().enumerate() {
        if let Some(g) = &grads[bi] {
            if g.len() != block.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!(
                        "grad for block {name} has {} entries, expected {}",
                        g.len(),
                        block.len()
                    ),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient in block {name}"
                )));
            }
        }
        let m = &mut optim.m[bi];
        let v = &mut optim.v[bi];
        let decay = if *name == "log_vars" {
            0.0
        } else {
            optim.weight_decay
        };
        for i in 0..block.len() {
            let g = grads[bi].as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            block[i] -= lr * (mhat / (vhat.sqrt() + optim.eps) + decay * block[i]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Step construction
// ---------------------------------------------------------------------------

/// Precomputed per-batch inputs to the loss graph: the attacked student view
/// of every row, the teacher's main logits on the clean view (a plain tensor,
/// so no gradient can reach the teacher), and the task labels/masks.
pub struct StepInputs {
    pub attacked: Vec<FeatureSeq>,
    pub teacher_logits: Tensor,
    pub labels: [Vec<usize>; 4],
    pub masks: [Vec<bool>; 4],
    pub n_augmented: usize,
}

/// Build both views of a batch and run the teacher on the clean one (main
/// head only, never on a tape, never with dropout).
///
/// The attack head's targets stay the rows' original labels from the corpus;
/// the on-the-fly augmentation never relabels anything.
pub fn prepare_step_inputs<R: Rng>(
    teacher: &TeacherState,
    batch: &Batch,
    p_augment: Real,
    attack_cfg: &AttackConfig,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<StepInputs> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let vocab = teacher.params.dims.vocab;
    let n = batch.len();
    let mut attacked = Vec::with_capacity(n);
    let mut teacher_rows = Vec::with_capacity(n * 2);
    let mut n_augmented = 0;
    for rec in &batch.records {
        let view = augment_view(&rec.text, p_augment, attack_cfg, rng)?;
        if view.applied.is_some() {
            n_augmented += 1;
        }
        let seq_clean = featurize(&view.clean, vocab, max_seq_len)?;
        let pooled = encode_plain(&teacher.params, &seq_clean)?;
        teacher_rows.extend(head_logits(&teacher.params, &pooled, Task::Main));
        attacked.push(featurize(&view.attacked, vocab, max_seq_len)?);
    }
    Ok(StepInputs {
        attacked,
        teacher_logits: Tensor::from_vec(n, 2, teacher_rows)?,
        labels: batch.labels.clone(),
        masks: batch.task_masks.clone(),
        n_augmented,
    })
}

/// Handles into the loss graph one step builds.
pub struct StepLossIds {
    pub task: TaskLosses,
    pub cls: ValueId,
    pub ema: Option<ValueId>,
    pub rank: Option<ValueId>,
    pub total: ValueId,
}

/// Record one training step's full loss graph on `tape`.
///
/// The sequence: student forward on the attacked view (all four heads,
/// dropout active), masked cross-entropy per task on the student view, the
/// uncertainty-weighted combination, distillation against the fixed teacher
/// logits, and the hard-negative ranking term on the student's main-head
/// margins. Kept separate from [`train_step`] so tests can rebuild the exact
/// same graph at perturbed parameters for finite-difference checks.
pub fn build_step_loss<R: Rng>(
    tape: &mut Tape,
    tp: &TapeParams,
    inputs: &StepInputs,
    weights: &LossWeights,
    variant: Variant,
    dropout: Real,
    rng: &mut R,
) -> Result<StepLossIds> {
    let mut rows = Vec::with_capacity(inputs.attacked.len());
    for seq in &inputs.attacked {
        rows.push(encode(tape, tp, seq, dropout, rng)?);
    }
    let pooled = tape.concat_rows(&rows)?;
    let main_logits = head_logits_on_tape(tape, tp, pooled, Task::Main)?;

    let mut task = TaskLosses::default();
    task.set(
        Task::Main,
        losses::masked_ce(
            tape,
            main_logits,
            &inputs.labels[Task::Main as usize],
            &inputs.masks[Task::Main as usize],
            weights.smoothing,
        )?,
    );
    if variant.use_aux() {
        for t in [Task::Gen, Task::Atk, Task::Dom] {
            let logits = head_logits_on_tape(tape, tp, pooled, t)?;
            // Label smoothing applies to the binary main head only.
            task.set(
                t,
                losses::masked_ce(tape, logits, &inputs.labels[t as usize], &inputs.masks[t as usize], 0.0)?,
            );
        }
    }

    let cls = if variant.use_kendall() {
        losses::kendall_combine(tape, &task, tp.log_vars)?
    } else {
        let present: Vec<ValueId> = TASKS.iter().filter_map(|&t| task.get(t)).collect();
        let mut acc = *present.first().ok_or_else(|| {
            Error::Train("no task produced a loss (is the batch unlabeled?)".into())
        })?;
        for &id in &present[1..] {
            acc = tape.add(acc, id)?;
        }
        acc
    };

    let ema = if variant.use_ema() {
        Some(losses::distill_kl(
            tape,
            &inputs.teacher_logits,
            main_logits,
            weights.tau_tea,
            weights.tau_stu,
        )?)
    } else {
        None
    };

    let rank = if variant.use_rank() {
        let diff = tape.input(Tensor::from_vec(2, 1, vec![-1.0, 1.0])?);
        let margins = tape.matmul(main_logits, diff)?;
        losses::rank_loss(
            tape,
            margins,
            &inputs.labels[Task::Main as usize],
            weights.alpha,
            weights.tau_r,
        )?
    } else {
        None
    };

    let total = losses::total_loss(tape, cls, ema, rank, weights)?;
    Ok(StepLossIds {
        task,
        cls,
        ema,
        rank,
        total,
    })
}

// ---------------------------------------------------------------------------
// Train state and step
// ---------------------------------------------------------------------------

/// A checkpoint the SWA selection may average.
#[derive(Debug, Clone)]
pub struct RingEntry {
    pub step: usize,
    pub params: ModelParams,
    pub val_auroc: Real,
}

/// Everything a training run owns.
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub optim: OptimState,
    pub weights: LossWeights,
    pub variant: Variant,
    pub dropout: Real,
    pub p_augment: Real,
    pub max_seq_len: usize,
    pub attack_cfg: AttackConfig,
    /// Bounded ring of the best checkpoints seen so far, ordered by
    /// validation AUROC (descending, earlier step on ties).
    pub ring: Vec<RingEntry>,
    pub aug_rng: ChaCha8Rng,
    pub model_rng: ChaCha8Rng,
}

impl TrainState {
    /// The teacher starts as an exact copy of the freshly initialized student.
    pub fn new(cfg: &TrainConfig, space: &LabelSpace) -> Result<TrainState> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(b"init"));
        let student = ModelParams::init(cfg.dims(space), &mut init_rng);
        let teacher = TeacherState::new(student.clone(), cfg.beta_ema)?;
        let optim = OptimState::new(
            &student,
            cfg.lr_peak,
            cfg.warmup_steps,
            cfg.total_steps,
            cfg.weight_decay,
        );
        Ok(TrainState {
            student,
            teacher,
            optim,
            weights: cfg.weights,
            variant: cfg.variant,
            dropout: cfg.dropout,
            p_augment: cfg.p_augment,
            max_seq_len: cfg.max_seq_len,
            attack_cfg: AttackConfig {
                rate: cfg.attack_rate,
                seed: cfg.seed,
                ..AttackConfig::default().with_builtin_lexicon()
            },
            ring: Vec::new(),
            aug_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(b"augment")),
            model_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(b"model")),
        })
    }
}

/// Loss components of one completed step; `s` is the post-update log-variance
/// trajectory and `val_auroc` is filled only on evaluation steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub lr: Real,
    pub loss_main: Option<Real>,
    pub loss_gen: Option<Real>,
    pub loss_atk: Option<Real>,
    pub loss_dom: Option<Real>,
    pub loss_cls: Real,
    pub loss_ema: Option<Real>,
    pub loss_rank: Option<Real>,
    pub loss_total: Real,
    pub s: [Real; 4],
    pub val_auroc: Option<Real>,
    pub n_augmented: usize,
    pub batch_hash: u64,
}

/// One full training step: build views, student forward on the attacked view,
/// teacher forward on the clean view, composite loss, backward, AdamW update,
/// then the EMA teacher update (in that order).
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepDiagnostics> {
    let inputs = prepare_step_inputs(
        &state.teacher,
        batch,
        state.p_augment,
        &state.attack_cfg,
        state.max_seq_len,
        &mut state.aug_rng,
    )?;

    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &state.student);
    let ids = build_step_loss(
        &mut tape,
        &tp,
        &inputs,
        &state.weights,
        state.variant,
        state.dropout,
        &mut state.model_rng,
    )?;

    let task_vals = ids.task.values(&tape);
    let cls = tape.value(ids.cls).item()?;
    let ema = ids.ema.map(|id| tape.value(id).item()).transpose()?;
    let rank = ids.rank.map(|id| tape.value(id).item()).transpose()?;
    let total = tape.value(ids.total).item()?;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let grads = tape.backward(ids.total)?;
    let block_grads = collect_block_grads(&tp, &grads);
    let lr = lr_at(state.optim.step, &state.optim);
    adamw_step(&mut state.student, &block_grads, &mut state.optim, lr)?;
    ema_update(&mut state.teacher, &state.student)?;

    Ok(StepDiagnostics {
        step: state.optim.step,
        lr,
        loss_main: task_vals[0],
        loss_gen: task_vals[1],
        loss_atk: task_vals[2],
        loss_dom: task_vals[3],
        loss_cls: cls,
        loss_ema: ema,
        loss_rank: rank,
        loss_total: total,
        s: state.student.log_vars,
        val_auroc: None,
        n_augmented: inputs.n_augmented,
        batch_hash: batch.content_hash(),
    })
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

/// AUROC of `params` on a featurized pool. Rows score in parallel but are
/// collected in input order, so the reduction is deterministic.
pub fn validation_auroc(
    params: &ModelParams,
    seqs: &[FeatureSeq],
    labels: &[usize],
) -> Result<Real> {
    let scores = seqs
        .par_iter()
        .map(|seq| {
            let pooled = encode_plain(params, seq)?;
            Ok(ai_score(&head_logits(params, &pooled, Task::Main)))
        })
        .collect::<Result<Vec<Real>>>()?;
    metrics::auroc_scores(&scores, labels)
}

fn ring_order(a: &(usize, Real), b: &(usize, Real)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Brute-force reference for the checkpoint ring: indices of the top `k`
/// recorded `(step, val_auroc)` pairs, best AUROC first, earlier step on ties.
pub fn swa_selection(recorded: &[(usize, Real)], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..recorded.len()).collect();
    idx.sort_by(|&a, &b| ring_order(&recorded[a], &recorded[b]));
    idx.truncate(k);
    idx
}

/// What [`run_training`] hands back: the SWA-averaged parameters, per-step
/// diagnostics, and which checkpoint steps the average drew from.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub diagnostics: Vec<StepDiagnostics>,
    pub swa_steps: Vec<usize>,
}

/// Train for `total_steps`, score validation every `eval_every` steps (and at
/// the final step), and return the stochastic-weight average of the top
/// `min(10, recorded)` checkpoints by validation AUROC recorded at or after
/// `swa_start`.
pub fn run_training(
    cfg: &TrainConfig,
    train_records: &[TextRecord],
    mixture: &MixtureSpec,
    val_records: &[TextRecord],
    space: &LabelSpace,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_records.is_empty() {
        return Err(Error::Train("empty validation pool".into()));
    }
    let mut state = TrainState::new(cfg, space)?;
    let vocab = state.student.dims.vocab;
    let val_seqs: Vec<FeatureSeq> = val_records
        .iter()
        .map(|r| featurize(&r.text, vocab, cfg.max_seq_len))
        .collect::<Result<_>>()?;
    let val_labels: Vec<usize> = val_records.iter().map(|r| r.main_label).collect();

    let mut sampler = MixtureSampler::new(train_records.to_vec(), mixture.clone())?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(b"data"));
    let mut diagnostics = Vec::with_capacity(cfg.total_steps);

    for s in 0..cfg.total_steps {
        let batch = sampler.sample_batch(cfg.batch_size, &mut data_rng)?;
        let mut diag = train_step(&mut state, &batch)?;
        let done = s + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let auroc = validation_auroc(&state.student, &val_seqs, &val_labels)?;
            diag.val_auroc = Some(auroc);
            if done >= cfg.swa_start {
                state.ring.push(RingEntry {
                    step: done,
                    params: state.student.clone(),
                    val_auroc: auroc,
                });
                state
                    .ring
                    .sort_by(|a, b| ring_order(&(a.step, a.val_auroc), &(b.step, b.val_auroc)));
                state.ring.truncate(SWA_TOP_K);
            }
        }
        diagnostics.push(diag);
    }

    if state.ring.is_empty() {
        return Err(Error::Train(format!(
            "no checkpoints recorded at or after swa_start {}",
            cfg.swa_start
        )));
    }
    let selected: Vec<ModelParams> = state.ring.iter().map(|e| e.params.clone()).collect();
    let params = swa_average(&selected)?;
    let swa_steps = state.ring.iter().map(|e| e.step).collect();
    Ok(TrainOutcome {
        params,
        diagnostics,
        swa_steps,
    })
}
