//! The four loss components of the training objective and their combination.
//!
//! Every loss is assembled on the reverse-mode tape, so one `backward` call on
//! the combined scalar yields gradients for all parameters. The `*_value`
//! wrappers run the same construction on a throwaway tape and return plain
//! numbers; they exist for diagnostics and for tests that want values without
//! a graph.

use crate::attacks;
use crate::corpus::{Task, AI, HUMAN, TASKS};
use crate::numcore::{log_softmax_raw, softmax_raw, ValueId};
use crate::{Error, Real, Result, Tape, Tensor};

/// Scalar knobs of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the teacher-distillation term.
    pub lambda_ema: Real,
    /// Weight of the hard-negative ranking term.
    pub lambda_rank: Real,
    /// Teacher softmax temperature (sharper than the student's).
    pub tau_tea: Real,
    /// Student softmax temperature.
    pub tau_stu: Real,
    /// Ranking logistic temperature.
    pub tau_r: Real,
    /// Fraction of humans mined as hard negatives.
    pub alpha: Real,
    /// Label smoothing on the binary main head.
    pub smoothing: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ema: 1.0,
            lambda_rank: 0.5,
            tau_tea: 0.04,
            tau_stu: 0.10,
            tau_r: 0.5,
            alpha: 0.05,
            smoothing: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(Error::InvalidArgument {
                op: "LossWeights::validate",
                detail,
            })
        };
        if self.tau_tea <= 0.0 || self.tau_stu <= 0.0 || self.tau_r <= 0.0 {
            return bad(format!(
                "temperatures must be positive (tau_tea {}, tau_stu {}, tau_r {})",
                self.tau_tea, self.tau_stu, self.tau_r
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 0.5)", self.smoothing));
        }
        if self.lambda_ema < 0.0 || self.lambda_rank < 0.0 {
            return bad("negative loss weight".into());
        }
        Ok(())
    }
}

/// Per-task classification losses for one batch, in task order
/// (main, gen, atk, dom). A slot is `None` when the batch carries no labeled
/// rows for that task, in which case the task contributes nothing this step.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskLosses {
    terms: [Option<ValueId>; 4],
}

impl TaskLosses {
    pub fn set(&mut self, task: Task, term: Option<ValueId>) {
        self.terms[task as usize] = term;
    }

    pub fn get(&self, task: Task) -> Option<ValueId> {
        self.terms[task as usize]
    }

    pub fn present(&self, task: Task) -> bool {
        self.terms[task as usize].is_some()
    }

    /// Plain per-task values for logging.
    pub fn values(&self, tape: &Tape) -> [Option<Real>; 4] {
        let mut out = [None; 4];
        for t in TASKS {
            if let Some(id) = self.get(t) {
                out[t as usize] = tape.value(id).item().ok();
            }
        }
        out
    }
}

/// Mean cross-entropy over the masked rows against smoothed one-hot targets:
/// the true class gets `1 - smoothing`, every other class
/// `smoothing / (C - 1)`. Returns `None` when the mask selects no rows, which
/// callers treat as "task absent this batch".
pub fn masked_ce(
    tape: &mut Tape,
    logits: ValueId,
    labels: &[usize],
    mask: &[bool],
    smoothing: Real,
) -> Result<Option<ValueId>> {
    let (n, c) = tape.value(logits).shape();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "masked_ce",
            detail: format!(
                "logits have {n} rows, {} labels, {} mask bits",
                labels.len(),
                mask.len()
            ),
        });
    }
    if c < 2 {
        return Err(Error::InvalidArgument {
            op: "masked_ce",
            detail: format!("need at least 2 classes, got {c}"),
        });
    }
    if !(0.0..0.5).contains(&smoothing) {
        return Err(Error::InvalidArgument {
            op: "masked_ce",
            detail: format!("smoothing {smoothing} outside [0, 0.5)"),
        });
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Ok(None);
    }
    for (r, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m && y >= c {
            return Err(Error::InvalidArgument {
                op: "masked_ce",
                detail: format!("row {r} label {y} out of range for {c} classes"),
            });
        }
    }

    // Loss = -(1/|B|) * sum over masked rows of <q_row, log_softmax(z_row)>,
    // expressed as one inner product against a constant target matrix whose
    // unmasked rows are zero.
    let off = smoothing / (c - 1) as Real;
    let mut targets = Tensor::zeros(n, c);
    for r in 0..n {
        if mask[r] {
            for col in 0..c {
                let q = if col == labels[r] { 1.0 - smoothing } else { off };
                targets.set(r, col, q);
            }
        }
    }
    let lp = tape.log_softmax_rows(logits);
    let dot = tape.dot_const(lp, targets)?;
    Ok(Some(tape.scale(dot, -1.0 / n_masked as Real)))
}

/// Homoscedastic-uncertainty combination: sum over present tasks of
/// `e^{-s_t} * L_t + s_t / 2`, with learnable per-task log-variances `s_t`.
/// Absent tasks contribute neither the weighted loss nor the penalty, so
/// their `s_t` receives no gradient from batches that lack the task.
pub fn kendall_combine(
    tape: &mut Tape,
    losses: &TaskLosses,
    log_vars: [ValueId; 4],
) -> Result<ValueId> {
    if !losses.present(Task::Main) {
        return Err(Error::InvalidArgument {
            op: "kendall_combine",
            detail: "main task loss is absent".into(),
        });
    }
    let mut total: Option<ValueId> = None;
    for t in TASKS {
        let Some(l) = losses.get(t) else { continue };
        let s = log_vars[t as usize];
        if tape.value(s).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "kendall_combine",
                detail: format!("log_var for {} is not a 1x1 scalar", t.name()),
            });
        }
        let neg_s = tape.scale(s, -1.0);
        let precision = tape.exp(neg_s);
        let weighted = tape.mul(precision, l)?;
        let penalty = tape.scale(s, 0.5);
        let term = tape.add(weighted, penalty)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("main task checked present"))
}

/// KL(softmax(z_T / tau_tea) || softmax(z_S / tau_stu)), mean over rows.
///
/// The teacher logits enter as a plain tensor, never as a tape value, so the
/// stop-gradient is structural: backward cannot reach them. Computed in
/// log-space; at `tau_tea = 0.04` the cold teacher class drops to ~1e-11 and
/// naive probability arithmetic would underflow the cross term.
pub fn distill_kl(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: ValueId,
    tau_tea: Real,
    tau_stu: Real,
) -> Result<ValueId> {
    if tau_tea <= 0.0 || tau_stu <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "distill_kl",
            detail: format!("temperatures must be positive, got {tau_tea} and {tau_stu}"),
        });
    }
    let (n, c) = teacher_logits.shape();
    let student_shape = tape.value(student_logits).shape();
    if (n, c) != student_shape {
        return Err(Error::Shape {
            op: "distill_kl",
            detail: format!("teacher {n}x{c} vs student {student_shape:?}"),
        });
    }
    if n == 0 || c < 2 {
        return Err(Error::InvalidArgument {
            op: "distill_kl",
            detail: format!("need n >= 1 rows and c >= 2 classes, got {n}x{c}"),
        });
    }

    let mut tempered = teacher_logits.clone();
    for v in tempered.data_mut() {
        *v /= tau_tea;
    }
    let p_t = softmax_raw(&tempered);
    let lp_t = log_softmax_raw(&tempered);
    // Teacher entropy side of the KL is a constant offset.
    let mut teacher_term = 0.0;
    for (p, lp) in p_t.data().iter().zip(lp_t.data()) {
        teacher_term += p * lp;
    }
    teacher_term /= n as Real;

    let scaled = tape.scale(student_logits, 1.0 / tau_stu);
    let lp_s = tape.log_softmax_rows(scaled);
    let cross = tape.dot_const(lp_s, p_t)?;
    let neg_cross = tape.scale(cross, -1.0 / n as Real);
    Ok(tape.add_const(neg_cross, teacher_term))
}

/// Indices of the `k` largest margins among `rows`, ties broken toward the
/// lower row index.
fn top_k_hard_humans(rows: &[usize], margins: &Tensor, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by(|&a, &b| {
        margins
            .get(b, 0)
            .total_cmp(&margins.get(a, 0))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Hard-negative ranking loss over per-row main-head margins
/// `m_i = z_AI - z_Human`.
///
/// Mines `K = ceil(alpha * N_human)` hardest humans (largest margins, ties to
/// the lower index) and averages `log(1 + e^{(m_j - m_i)/tau_r})` over all
/// (AI row i, hard human j) pairs. Returns `None` ("skipped") when the batch
/// has no humans or no AI rows. The top-K choice is made from current values
/// and enters the graph as constant row selection.
pub fn rank_loss(
    tape: &mut Tape,
    margins: ValueId,
    main_labels: &[usize],
    alpha: Real,
    tau_r: Real,
) -> Result<Option<ValueId>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument {
            op: "rank_loss",
            detail: format!("alpha {alpha} outside (0, 1]"),
        });
    }
    if tau_r <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "rank_loss",
            detail: format!("tau_r {tau_r} must be positive"),
        });
    }
    let (n, c) = tape.value(margins).shape();
    if c != 1 || n != main_labels.len() {
        return Err(Error::Shape {
            op: "rank_loss",
            detail: format!("margins {n}x{c} vs {} labels", main_labels.len()),
        });
    }
    if let Some(&bad) = main_labels.iter().find(|&&l| l != HUMAN && l != AI) {
        return Err(Error::InvalidArgument {
            op: "rank_loss",
            detail: format!("main label {bad} is not binary"),
        });
    }

    let humans: Vec<usize> = (0..n).filter(|&i| main_labels[i] == HUMAN).collect();
    let ais: Vec<usize> = (0..n).filter(|&i| main_labels[i] == AI).collect();
    if humans.is_empty() || ais.is_empty() {
        return Ok(None);
    }
    let k = attacks::budget(alpha, humans.len()).max(1);
    let current = tape.value(margins).clone();
    let hard = top_k_hard_humans(&humans, &current, k);

    // Pairwise gap matrix via rank-one replication: row i column j holds
    // m_j - m_i for AI row i and hard human j.
    let ai_col = tape.gather_rows(margins, &ais)?;
    let hard_col = tape.gather_rows(margins, &hard)?;
    let ones_row = tape.input(Tensor::from_vec(1, k, vec![1.0; k])?);
    let ones_col = tape.input(Tensor::from_vec(ais.len(), 1, vec![1.0; ais.len()])?);
    let ai_rep = tape.matmul(ai_col, ones_row)?;
    let hard_row = tape.transpose(hard_col);
    let hard_rep = tape.matmul(ones_col, hard_row)?;
    let gap = tape.sub(hard_rep, ai_rep)?;
    let scaled = tape.scale(gap, 1.0 / tau_r);
    let soft = tape.softplus(scaled);
    let total = tape.sum_all(soft);
    Ok(Some(
        tape.scale(total, 1.0 / (ais.len() * k) as Real),
    ))
}

/// Weighted sum `cls + lambda_ema * ema + lambda_rank * rank` on the tape.
/// `None` terms (skipped rank, distillation disabled) are simply omitted.
pub fn total_loss(
    tape: &mut Tape,
    cls: ValueId,
    ema: Option<ValueId>,
    rank: Option<ValueId>,
    weights: &LossWeights,
) -> Result<ValueId> {
    weights.validate()?;
    let mut acc = cls;
    if let Some(e) = ema {
        let scaled = tape.scale(e, weights.lambda_ema);
        acc = tape.add(acc, scaled)?;
    }
    if let Some(r) = rank {
        let scaled = tape.scale(r, weights.lambda_rank);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Plain-number `masked_ce`.
pub fn masked_ce_value(
    logits: &Tensor,
    labels: &[usize],
    mask: &[bool],
    smoothing: Real,
) -> Result<Option<Real>> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone());
    match masked_ce(&mut tape, l, labels, mask, smoothing)? {
        Some(id) => Ok(Some(tape.value(id).item()?)),
        None => Ok(None),
    }
}

/// Plain-number `kendall_combine` over per-task values.
pub fn kendall_combine_value(losses: &[Option<Real>; 4], log_vars: &[Real; 4]) -> Result<Real> {
    if losses[Task::Main as usize].is_none() {
        return Err(Error::InvalidArgument {
            op: "kendall_combine",
            detail: "main task loss is absent".into(),
        });
    }
    let mut total = 0.0;
    for t in TASKS {
        if let Some(l) = losses[t as usize] {
            let s = log_vars[t as usize];
            total += (-s).exp() * l + 0.5 * s;
        }
    }
    Ok(total)
}

/// Plain-number `distill_kl`.
pub fn distill_kl_value(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    tau_tea: Real,
    tau_stu: Real,
) -> Result<Real> {
    let mut tape = Tape::new();
    let s = tape.input(student_logits.clone());
    let id = distill_kl(&mut tape, teacher_logits, s, tau_tea, tau_stu)?;
    tape.value(id).item()
}

/// Plain-number `rank_loss`; the boolean is the "skipped" flag.
pub fn rank_loss_value(
    margins: &[Real],
    main_labels: &[usize],
    alpha: Real,
    tau_r: Real,
) -> Result<(Real, bool)> {
    let mut tape = Tape::new();
    let m = tape.input(Tensor::from_vec(margins.len(), 1, margins.to_vec())?);
    match rank_loss(&mut tape, m, main_labels, alpha, tau_r)? {
        Some(id) => Ok((tape.value(id).item()?, false)),
        None => Ok((0.0, true)),
    }
}

/// Plain-number `total_loss`.
pub fn total_loss_value(cls: Real, ema: Real, rank: Real, weights: &LossWeights) -> Real {
    cls + weights.lambda_ema * ema + weights.lambda_rank * rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: Real = 0.693147180559945309;

    fn logits(rows: Vec<Vec<Real>>) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::from_vec(r, c, rows.into_iter().flatten().collect()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let z = logits(vec![vec![0.0, 0.0]]);
        let v = masked_ce_value(&z, &[0], &[true], 0.0).unwrap().unwrap();
        assert!((v - LN2).abs() < 1e-15);
    }

    #[test]
    fn smoothed_ce_fixture() {
        // logits (10, -10), label 0, smoothing 0.05, two classes:
        // 0.95*log1p(e^-20) + 0.05*(20 + log1p(e^-20)) = 1 + log1p(e^-20).
        let z = logits(vec![vec![10.0, -10.0]]);
        let v = masked_ce_value(&z, &[0], &[true], 0.05).unwrap().unwrap();
        assert!((v - 1.0000000020611536).abs() < 1e-12, "{v}");
    }

    #[test]
    fn empty_mask_reports_task_absent() {
        let z = logits(vec![vec![1.0, 2.0], vec![0.5, 0.5]]);
        let v = masked_ce_value(&z, &[0, 1], &[false, false], 0.0).unwrap();
        assert!(v.is_none());
    }

    #[test]
    fn out_of_range_label_is_rejected_only_when_masked() {
        let z = logits(vec![vec![1.0, 2.0], vec![0.5, 0.5]]);
        assert!(masked_ce_value(&z, &[0, 7], &[true, true], 0.0).is_err());
        // the same bad label is ignored when its row is masked out
        let ok = masked_ce_value(&z, &[0, 7], &[true, false], 0.0).unwrap();
        assert!(ok.is_some());
    }

    #[test]
    fn smoothing_zero_equals_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let c = 5;
        let data: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = Tensor::from_vec(n, c, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mask = vec![true; n];
        let v = masked_ce_value(&z, &labels, &mask, 0.0).unwrap().unwrap();

        // independent plain CE: mean over rows of log-sum-exp(z) - z[label]
        let mut expect = 0.0;
        for r in 0..n {
            let row: Vec<Real> = (0..c).map(|j| z.get(r, j)).collect();
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
            expect += lse - row[labels[r]];
        }
        expect /= n as Real;
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn unmasked_rows_cannot_move_the_loss() {
        let a = logits(vec![vec![1.0, -1.0], vec![3.0, 2.0]]);
        let b = logits(vec![vec![1.0, -1.0], vec![-50.0, 99.0]]);
        let mask = [true, false];
        let va = masked_ce_value(&a, &[0, 1], &mask, 0.05).unwrap().unwrap();
        let vb = masked_ce_value(&b, &[0, 1], &mask, 0.05).unwrap().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn masked_ce_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Real> = (0..4 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = Tensor::from_vec(4, 3, data).unwrap();
        let labels = vec![0, 2, 1, 1];
        let mask = vec![true, false, true, true];
        let f = move |t: &mut Tape, vs: &[ValueId]| {
            Ok(masked_ce(t, vs[0], &labels, &mask, 0.05)?.expect("mask nonempty"))
        };
        let worst = grad_check(&f, &[z], 1e-5).unwrap();
        assert!(worst < 1e-7, "max rel err {worst}");
    }

    fn plain_losses(vals: [Option<Real>; 4]) -> [Option<Real>; 4] {
        vals
    }

    #[test]
    fn kendall_unit_precisions() {
        let l = plain_losses([Some(1.0), Some(2.0), Some(0.5), Some(1.5)]);
        let v = kendall_combine_value(&l, &[0.0; 4]).unwrap();
        assert!((v - 5.0).abs() < 1e-15);
    }

    #[test]
    fn kendall_direct_fixture() {
        let l = plain_losses([Some(2.0), None, None, None]);
        let s = (4.0 as Real).ln();
        let v = kendall_combine_value(&l, &[s, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 1.1931471805599453).abs() < 1e-15, "{v}");
    }

    #[test]
    fn kendall_stationary_point_is_log_2l() {
        // Oracle: ternary search the 1-task objective e^{-s}L + s/2 over s.
        for l in [0.25, 0.5, 2.0, 7.0] {
            let f = |s: Real| (-s).exp() * l + 0.5 * s;
            let (mut lo, mut hi) = (-8.0, 8.0);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let s_star = 0.5 * (lo + hi);
            assert!((s_star - (2.0 * l).ln()).abs() < 1e-6, "L={l}: {s_star}");
            let v = kendall_combine_value(&[Some(l), None, None, None], &[s_star, 0.0, 0.0, 0.0])
                .unwrap();
            assert!((v - f((2.0 * l).ln())).abs() < 1e-9);
        }
        // the worked case: L = 0.5 gives s* = 0 and value 0.5
        let v = kendall_combine_value(&[Some(0.5), None, None, None], &[0.0; 4]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kendall_gradient_wrt_log_var() {
        // d/ds [e^{-s}L + s/2] = -e^{-s}L + 1/2, checked both against the
        // closed form and against finite differences.
        let task_loss = 1.7;
        let s0 = 0.3;
        let f = move |t: &mut Tape, vs: &[ValueId]| {
            let l = t.input(Tensor::scalar(task_loss));
            let mut losses = TaskLosses::default();
            losses.set(Task::Main, Some(l));
            let pad = t.input(Tensor::scalar(0.0));
            kendall_combine(t, &losses, [vs[0], pad, pad, pad])
        };
        let worst = grad_check(&f, &[Tensor::scalar(s0)], 1e-5).unwrap();
        assert!(worst < 1e-9, "max rel err {worst}");

        let mut tape = Tape::new();
        let s = tape.input(Tensor::scalar(s0));
        let l = tape.input(Tensor::scalar(task_loss));
        let pad = tape.input(Tensor::scalar(0.0));
        let mut losses = TaskLosses::default();
        losses.set(Task::Main, Some(l));
        let out = kendall_combine(&mut tape, &losses, [s, pad, pad, pad]).unwrap();
        let grads = tape.backward(out).unwrap();
        let got = grads.wrt(s).unwrap().get(0, 0);
        let expect = -(-s0 as Real).exp() * task_loss + 0.5;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn kendall_absent_task_touches_nothing() {
        // With gen absent, s_gen must receive no gradient at all.
        let mut tape = Tape::new();
        let s_main = tape.input(Tensor::scalar(0.1));
        let s_gen = tape.input(Tensor::scalar(-0.4));
        let pad = tape.input(Tensor::scalar(0.0));
        let l_main = tape.input(Tensor::scalar(1.0));
        let mut losses = TaskLosses::default();
        losses.set(Task::Main, Some(l_main));
        let out = kendall_combine(&mut tape, &losses, [s_main, s_gen, pad, pad]).unwrap();
        let grads = tape.backward(out).unwrap();
        assert!(grads.wrt(s_main).is_some());
        assert!(grads.wrt(s_gen).is_none());

        // and the absent task drops both loss and penalty terms
        let with =
            kendall_combine_value(&[Some(1.0), Some(2.0), None, None], &[0.0, 1.0, 0.0, 0.0])
                .unwrap();
        let without = kendall_combine_value(&[Some(1.0), None, None, None], &[0.0; 4]).unwrap();
        let dropped = (-1.0 as Real).exp() * 2.0 + 0.5;
        assert!((with - without - dropped).abs() < 1e-15);
    }

    #[test]
    fn kendall_requires_main() {
        let r = kendall_combine_value(&[None, Some(1.0), None, None], &[0.0; 4]);
        assert!(r.is_err());
    }

    #[test]
    fn distill_uniform_rows_give_zero() {
        let t = logits(vec![vec![3.0, 3.0], vec![-1.0, -1.0]]);
        let s = logits(vec![vec![0.2, 0.2], vec![7.0, 7.0]]);
        let v = distill_kl_value(&t, &s, 0.04, 0.10).unwrap();
        assert!(v.abs() < 1e-15, "{v}");
    }

    #[test]
    fn distill_fixture_cold_teacher() {
        let t = logits(vec![vec![1.0, 0.0]]);
        let s = logits(vec![vec![1.0, 0.0]]);
        let v = distill_kl_value(&t, &s, 0.04, 0.10).unwrap();
        let expect = 4.5398677009762810e-5;
        assert!((v - expect).abs() < 1e-17 * 1e5, "{v} vs {expect}");
        assert!(((v - expect) / expect).abs() < 1e-10);
    }

    #[test]
    fn distill_zero_iff_tempered_match() {
        // student logits equal teacher logits rescaled by tau_stu/tau_tea
        // produce identical tempered distributions, hence exactly zero KL.
        let t = logits(vec![vec![0.8, -0.3], vec![-2.0, 0.4]]);
        let mut s = t.clone();
        for v in s.data_mut() {
            *v *= 0.10 / 0.04;
        }
        let v = distill_kl_value(&t, &s, 0.04, 0.10).unwrap();
        assert!(v.abs() < 1e-14, "{v}");
    }

    proptest! {
        #[test]
        fn distill_is_nonnegative(
            seed in 0u64..500,
            n in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let td: Vec<Real> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sd: Vec<Real> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = Tensor::from_vec(n, 2, td).unwrap();
            let s = Tensor::from_vec(n, 2, sd).unwrap();
            let v = distill_kl_value(&t, &s, 0.04, 0.10).unwrap();
            prop_assert!(v >= -1e-12, "negative KL {v}");
        }
    }

    #[test]
    fn distill_gradient_reaches_only_the_student() {
        // teacher logits near zero keep the tempered distribution soft enough
        // to be sensitive to perturbation even at tau_tea = 0.04
        let teacher = logits(vec![vec![0.02, -0.02], vec![-0.03, 0.01]]);
        let student = logits(vec![vec![0.3, 0.1], vec![0.0, 1.0]]);
        let tch = teacher.clone();
        let f = move |t: &mut Tape, vs: &[ValueId]| distill_kl(t, &tch, vs[0], 0.04, 0.10);
        let worst = grad_check(&f, &[student.clone()], 1e-5).unwrap();
        assert!(worst < 1e-6, "max rel err {worst}");

        // moving the teacher moves the value (it is not ignored), but the
        // tape holds no teacher leaf, so no gradient can exist for it.
        let mut warmer = teacher.clone();
        warmer.set(0, 0, 0.06);
        let a = distill_kl_value(&teacher, &student, 0.04, 0.10).unwrap();
        let b = distill_kl_value(&warmer, &student, 0.04, 0.10).unwrap();
        assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    }

    #[test]
    fn rank_single_pair_fixture() {
        let (v, skipped) = rank_loss_value(&[0.0, 2.0], &[HUMAN, AI], 0.05, 0.5).unwrap();
        assert!(!skipped);
        assert!((v - 0.01814992791780974).abs() < 1e-16, "{v}");
    }

    #[test]
    fn rank_equal_margins_cost_ln2() {
        let (v, _) = rank_loss_value(&[1.3, 1.3], &[HUMAN, AI], 1.0, 0.5).unwrap();
        assert!((v - LN2).abs() < 1e-15);
    }

    #[test]
    fn rank_saturates_below_bound() {
        // every AI margin beats every human margin by >= 20 * tau_r
        let margins = [0.0, -0.5, 10.0, 11.0, 12.0];
        let labels = [HUMAN, HUMAN, AI, AI, AI];
        let (v, skipped) = rank_loss_value(&margins, &labels, 1.0, 0.5).unwrap();
        assert!(!skipped);
        assert!(v < 2.1e-9, "{v}");
    }

    #[test]
    fn rank_skips_one_class_batches() {
        let (v, skipped) = rank_loss_value(&[1.0, 2.0], &[AI, AI], 0.05, 0.5).unwrap();
        assert_eq!((v, skipped), (0.0, true));
        let (v, skipped) = rank_loss_value(&[1.0, 2.0], &[HUMAN, HUMAN], 0.05, 0.5).unwrap();
        assert_eq!((v, skipped), (0.0, true));
    }

    /// O(n^2) selection oracle: row r is in the top-K iff fewer than K rows
    /// rank ahead of it (strictly larger margin, or equal margin at a lower
    /// index).
    fn top_k_oracle(rows: &[usize], margins: &Tensor, k: usize) -> Vec<usize> {
        let mut picked: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| {
                let ahead = rows
                    .iter()
                    .filter(|&&o| {
                        margins.get(o, 0) > margins.get(r, 0)
                            || (margins.get(o, 0) == margins.get(r, 0) && o < r)
                    })
                    .count();
                ahead < k
            })
            .collect();
        picked.sort_unstable();
        picked
    }

    proptest! {
        #[test]
        fn top_k_matches_counting_oracle(
            seed in 0u64..1000,
            n in 1usize..64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse grid of values to force plenty of ties
            let data: Vec<Real> = (0..n).map(|_| rng.gen_range(-2i32..3) as Real).collect();
            let m = Tensor::from_vec(n, 1, data).unwrap();
            let rows: Vec<usize> = (0..n).collect();
            let k = rng.gen_range(1..=n);
            let mut got = top_k_hard_humans(&rows, &m, k);
            got.sort_unstable();
            prop_assert_eq!(got, top_k_oracle(&rows, &m, k));
        }

        #[test]
        fn rank_is_monotone_in_margins(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4usize..32);
            let margins: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let labels: Vec<usize> =
                (0..n).map(|i| if i < 2 { HUMAN + (i % 2) } else { rng.gen_range(0..2) }).collect();
            // first two rows pin one human and one AI so nothing is skipped
            let labels = {
                let mut l = labels;
                l[0] = HUMAN;
                l[1] = AI;
                l
            };
            let (base, skipped) = rank_loss_value(&margins, &labels, 0.25, 0.5).unwrap();
            prop_assert!(!skipped);

            // raising any AI margin never increases the loss
            let ai_row = labels.iter().position(|&l| l == AI).unwrap();
            let mut up = margins.clone();
            up[ai_row] += 0.7;
            let (after, _) = rank_loss_value(&up, &labels, 0.25, 0.5).unwrap();
            prop_assert!(after <= base + 1e-12, "{after} > {base}");

            // raising a mined hard human never decreases it
            let humans: Vec<usize> =
                (0..n).filter(|&i| labels[i] == HUMAN).collect();
            let m = Tensor::from_vec(n, 1, margins.clone()).unwrap();
            let k = attacks::budget(0.25, humans.len()).max(1);
            let hard = top_k_hard_humans(&humans, &m, k);
            let mut up = margins.clone();
            up[hard[0]] += 0.7;
            let (after, _) = rank_loss_value(&up, &labels, 0.25, 0.5).unwrap();
            prop_assert!(after >= base - 1e-12, "{after} < {base}");
        }
    }

    #[test]
    fn rank_gradients_match_fd() {
        // margins spaced well apart so the top-K set is stable under the
        // finite-difference probes
        let margins = vec![0.9, -1.2, 0.1, 1.6, -0.6, 0.4];
        let labels = vec![HUMAN, HUMAN, HUMAN, AI, AI, AI];
        let f = move |t: &mut Tape, vs: &[ValueId]| {
            Ok(rank_loss(t, vs[0], &labels, 0.4, 0.5)?.expect("both classes present"))
        };
        let m = Tensor::from_vec(6, 1, margins).unwrap();
        let worst = grad_check(&f, &[m], 1e-5).unwrap();
        assert!(worst < 1e-7, "max rel err {worst}");
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        let v = total_loss_value(1.0, 0.2, 0.4, &w);
        assert!((v - 1.4).abs() < 1e-15);
        assert_eq!(total_loss_value(0.7, 0.0, 0.0, &w), 0.7);
        let no_rank = LossWeights {
            lambda_rank: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(
            total_loss_value(1.0, 0.2, 123.0, &no_rank),
            total_loss_value(1.0, 0.2, 0.0, &no_rank)
        );
    }

    #[test]
    fn total_loss_on_tape_matches_value_and_skips_none() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let cls = tape.input(Tensor::scalar(1.0));
        let ema = tape.input(Tensor::scalar(0.2));
        let rank = tape.input(Tensor::scalar(0.4));
        let full = total_loss(&mut tape, cls, Some(ema), Some(rank), &w).unwrap();
        assert!((tape.value(full).item().unwrap() - 1.4).abs() < 1e-15);
        let cls_only = total_loss(&mut tape, cls, None, None, &w).unwrap();
        assert_eq!(tape.value(cls_only).item().unwrap(), 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        for bad in [
            LossWeights {
                tau_tea: 0.0,
                ..LossWeights::default()
            },
            LossWeights {
                alpha: 0.0,
                ..LossWeights::default()
            },
            LossWeights {
                alpha: 1.5,
                ..LossWeights::default()
            },
            LossWeights {
                smoothing: 0.5,
                ..LossWeights::default()
            },
            LossWeights {
                lambda_rank: -0.1,
                ..LossWeights::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn masked_ce_is_nonnegative(
            seed in 0u64..300,
            smoothing in 0.0..0.49f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..8);
            let c = rng.gen_range(2usize..6);
            let data: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let z = Tensor::from_vec(n, c, data).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let v = masked_ce_value(&z, &labels, &vec![true; n], smoothing)
                .unwrap()
                .unwrap();
            prop_assert!(v >= 0.0, "negative CE {v}");
        }
    }
}
