//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends one entry describing how its output value was
//! produced. [`Tape::backward`] walks the entries in exact reverse order and
//! accumulates adjoints additively, so values consumed by several downstream
//! ops receive the sum of their contributions.

use rand::Rng;

use super::Tensor2;
use crate::{Error, Result, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tape value was produced. `entries[i]` describes `values[i]`.
enum Entry<S> {
    Leaf,
    Matmul(ValueId, ValueId),
    AddBias(ValueId, ValueId),
    Relu(ValueId),
    /// Saved mask already folded with the `1/(1-rate)` scale: kept entries
    /// hold the scale, dropped entries hold zero.
    Dropout(ValueId, Vec<S>),
    MaskedMeanRows(ValueId, Vec<bool>, usize),
    SoftmaxRows(ValueId),
    LogSoftmaxRows(ValueId),
    Scale(ValueId, S),
    AddConst(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Exp(ValueId),
    Softplus(ValueId),
    SumAll(ValueId),
    /// Inner product with a constant matrix of the same shape; the constant
    /// receives no gradient.
    DotConst(ValueId, Tensor2<S>),
    Transpose(ValueId),
    GatherRows(ValueId, Vec<usize>),
    ConcatRows(Vec<ValueId>),
}

pub struct Tape<S: Scalar> {
    values: Vec<Tensor2<S>>,
    entries: Vec<Entry<S>>,
}

/// Adjoints produced by [`Tape::backward`]. Values the loss does not depend on
/// have no entry.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor2<S>> {
        self.grads[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record a leaf value (parameter or constant input).
    pub fn input(&mut self, t: Tensor2<S>) -> ValueId {
        self.push(t, Entry::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor2<S> {
        &self.values[id.0]
    }

    fn push(&mut self, t: Tensor2<S>, e: Entry<S>) -> ValueId {
        debug_assert!(t.is_finite(), "non-finite tape value");
        self.values.push(t);
        self.entries.push(e);
        ValueId(self.values.len() - 1)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    /// `a (n x k) * b (k x m) -> n x m`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, ka) = self.values[a.0].shape();
        let (kb, m) = self.values[b.0].shape();
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("{n}x{ka} * {kb}x{m}"),
            ));
        }
        let out = matmul_raw(&self.values[a.0], &self.values[b.0]);
        Ok(self.push(out, Entry::Matmul(a, b)))
    }

    /// Add a `1 x m` bias row to every row of `x (n x m)`.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, m) = self.values[x.0].shape();
        let (br, bm) = self.values[b.0].shape();
        if br != 1 || bm != m {
            return Err(Self::shape_err(
                "add_bias",
                format!("bias {br}x{bm} against {n}x{m}"),
            ));
        }
        let mut out = self.values[x.0].clone();
        for r in 0..n {
            for c in 0..m {
                let v = out.get(r, c) + self.values[b.0].get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Entry::AddBias(x, b)))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        self.push(out, Entry::Relu(x))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
    /// expectation is unchanged. `rate == 0` is an identity that draws nothing
    /// from `rng`.
    pub fn dropout<R: Rng>(&mut self, x: ValueId, rate: S, rng: &mut R) -> Result<ValueId> {
        let rate_f = rate.to_f64().unwrap_or(f64::NAN);
        if !(0.0..1.0).contains(&rate_f) {
            return Err(Error::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate_f == 0.0 {
            let out = self.values[x.0].clone();
            let mask = vec![S::one(); out.data().len()];
            return Ok(self.push(out, Entry::Dropout(x, mask)));
        }
        let scale = S::one() / (S::one() - rate);
        let src = self.values[x.0].clone();
        let mut out = src.clone();
        let mut mask = vec![S::zero(); src.data().len()];
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if rng.gen::<f64>() < rate_f {
                *v = S::zero();
            } else {
                *v = *v * scale;
                mask[i] = scale;
            }
        }
        Ok(self.push(out, Entry::Dropout(x, mask)))
    }

    /// Mean of the rows of `x (L x H)` whose mask bit is set, as `1 x H`.
    pub fn masked_mean_rows(&mut self, x: ValueId, mask: &[bool]) -> Result<ValueId> {
        let (l, h) = self.values[x.0].shape();
        if mask.len() != l {
            return Err(Self::shape_err(
                "masked_mean_rows",
                format!("mask length {} for {} rows", mask.len(), l),
            ));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Error::InvalidArgument {
                op: "masked_mean_rows",
                detail: "mask selects no rows".into(),
            });
        }
        let inv = S::one() / S::from_usize(kept).unwrap();
        let mut out = Tensor2::zeros(1, h);
        for r in 0..l {
            if mask[r] {
                for c in 0..h {
                    let v = out.get(0, c) + self.values[x.0].get(r, c) * inv;
                    out.set(0, c, v);
                }
            }
        }
        Ok(self.push(out, Entry::MaskedMeanRows(x, mask.to_vec(), kept)))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let out = softmax_raw(&self.values[x.0]);
        self.push(out, Entry::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: ValueId) -> ValueId {
        let out = log_softmax_raw(&self.values[x.0]);
        self.push(out, Entry::LogSoftmaxRows(x))
    }

    /// Multiply every entry by the constant `k`.
    pub fn scale(&mut self, x: ValueId, k: S) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = *v * k;
        }
        self.push(out, Entry::Scale(x, k))
    }

    /// Add the constant `k` to every entry.
    pub fn add_const(&mut self, x: ValueId, k: S) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = *v + k;
        }
        self.push(out, Entry::AddConst(x))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_op("add", a, b, |x, y| x + y, Entry::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_op("sub", a, b, |x, y| x - y, Entry::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_op("mul", a, b, |x, y| x * y, Entry::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(S, S) -> S,
        entry: Entry<S>,
    ) -> Result<ValueId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Self::shape_err(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let (r, c) = self.values[a.0].shape();
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor2::from_vec(r, c, data)?;
        Ok(self.push(out, entry))
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        self.push(out, Entry::Exp(x))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: ValueId) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = softplus_raw(*v);
        }
        self.push(out, Entry::Softplus(x))
    }

    /// Sum of all entries as `1 x 1`.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let mut s = S::zero();
        for &v in self.values[x.0].data() {
            s += v;
        }
        self.push(Tensor2::scalar(s), Entry::SumAll(x))
    }

    /// `sum(x .* w)` with a constant weight matrix, as `1 x 1`.
    pub fn dot_const(&mut self, x: ValueId, w: Tensor2<S>) -> Result<ValueId> {
        if self.values[x.0].shape() != w.shape() {
            return Err(Self::shape_err(
                "dot_const",
                format!("{:?} vs {:?}", self.values[x.0].shape(), w.shape()),
            ));
        }
        let mut s = S::zero();
        for (&a, &b) in self.values[x.0].data().iter().zip(w.data()) {
            s += a * b;
        }
        Ok(self.push(Tensor2::scalar(s), Entry::DotConst(x, w)))
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.values[x.0].shape();
        let mut out = Tensor2::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, self.values[x.0].get(i, j));
            }
        }
        self.push(out, Entry::Transpose(x))
    }

    /// Select rows of `table` by index; the same row may appear many times and
    /// its adjoint accumulates once per occurrence.
    pub fn gather_rows(&mut self, table: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (v, h) = self.values[table.0].shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {v} rows"),
            });
        }
        let mut out = Tensor2::zeros(idx.len(), h);
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..h {
                out.set(r, c, self.values[table.0].get(i, c));
            }
        }
        Ok(self.push(out, Entry::GatherRows(table, idx.to_vec())))
    }

    /// Stack values vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let cols = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.values[p.0];
            if t.cols() != cols {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("column counts {} vs {}", t.cols(), cols),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Entry::ConcatRows(parts.to_vec())))
    }

    /// Reverse pass from a `1 x 1` loss. Returns one adjoint per value the
    /// loss depends on.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.values[loss.0].shape()),
            });
        }
        let mut grads: Vec<Option<Tensor2<S>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor2::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.entries[i] {
                Entry::Leaf => {}
                Entry::Matmul(a, b) => {
                    // dA += G * B^T ; dB += A^T * G
                    let da = matmul_nt(&g, &self.values[b.0]);
                    let db = matmul_tn(&self.values[a.0], &g);
                    accumulate(&mut grads, *a, da, &self.values);
                    accumulate(&mut grads, *b, db, &self.values);
                }
                Entry::AddBias(x, b) => {
                    let (n, m) = g.shape();
                    let mut db = Tensor2::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            let v = db.get(0, c) + g.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, g.clone(), &self.values);
                    accumulate(&mut grads, *b, db, &self.values);
                }
                Entry::Relu(x) => {
                    let mut dx = g.clone();
                    for (dv, &xv) in dx.data_mut().iter_mut().zip(self.values[x.0].data()) {
                        if xv <= S::zero() {
                            *dv = S::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::Dropout(x, mask) => {
                    let mut dx = g.clone();
                    for (dv, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *dv = *dv * m;
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::MaskedMeanRows(x, mask, kept) => {
                    let (l, h) = self.values[x.0].shape();
                    let inv = S::one() / S::from_usize(*kept).unwrap();
                    let mut dx = Tensor2::zeros(l, h);
                    for r in 0..l {
                        if mask[r] {
                            for c in 0..h {
                                dx.set(r, c, g.get(0, c) * inv);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::SoftmaxRows(x) => {
                    // dX_r = s_r .* (G_r - <G_r, s_r>)
                    let s = &self.values[i];
                    let (n, c) = s.shape();
                    let mut dx = Tensor2::zeros(n, c);
                    for r in 0..n {
                        let mut dot = S::zero();
                        for k in 0..c {
                            dot += g.get(r, k) * s.get(r, k);
                        }
                        for k in 0..c {
                            dx.set(r, k, s.get(r, k) * (g.get(r, k) - dot));
                        }
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::LogSoftmaxRows(x) => {
                    // dX_r = G_r - softmax(x_r) * sum(G_r)
                    let sm = softmax_raw(&self.values[x.0]);
                    let (n, c) = sm.shape();
                    let mut dx = Tensor2::zeros(n, c);
                    for r in 0..n {
                        let mut rowsum = S::zero();
                        for k in 0..c {
                            rowsum += g.get(r, k);
                        }
                        for k in 0..c {
                            dx.set(r, k, g.get(r, k) - sm.get(r, k) * rowsum);
                        }
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::Scale(x, k) => {
                    let mut dx = g.clone();
                    for v in dx.data_mut() {
                        *v = *v * *k;
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::AddConst(x) => {
                    accumulate(&mut grads, *x, g.clone(), &self.values);
                }
                Entry::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), &self.values);
                    accumulate(&mut grads, *b, g.clone(), &self.values);
                }
                Entry::Sub(a, b) => {
                    let mut db = g.clone();
                    for v in db.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *a, g.clone(), &self.values);
                    accumulate(&mut grads, *b, db, &self.values);
                }
                Entry::Mul(a, b) => {
                    let mut da = g.clone();
                    for (v, &bv) in da.data_mut().iter_mut().zip(self.values[b.0].data()) {
                        *v = *v * bv;
                    }
                    let mut db = g.clone();
                    for (v, &av) in db.data_mut().iter_mut().zip(self.values[a.0].data()) {
                        *v = *v * av;
                    }
                    accumulate(&mut grads, *a, da, &self.values);
                    accumulate(&mut grads, *b, db, &self.values);
                }
                Entry::Exp(x) => {
                    let mut dx = g.clone();
                    for (v, &yv) in dx.data_mut().iter_mut().zip(self.values[i].data()) {
                        *v = *v * yv;
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::Softplus(x) => {
                    let mut dx = g.clone();
                    for (v, &xv) in dx.data_mut().iter_mut().zip(self.values[x.0].data()) {
                        *v = *v * sigmoid_raw(xv);
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::SumAll(x) => {
                    let (r, c) = self.values[x.0].shape();
                    let gv = g.get(0, 0);
                    let dx = Tensor2::from_vec(r, c, vec![gv; r * c])?;
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::DotConst(x, w) => {
                    let gv = g.get(0, 0);
                    let mut dx = w.clone();
                    for v in dx.data_mut() {
                        *v = *v * gv;
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::Transpose(x) => {
                    let (r, c) = g.shape();
                    let mut dx = Tensor2::zeros(c, r);
                    for i2 in 0..r {
                        for j in 0..c {
                            dx.set(j, i2, g.get(i2, j));
                        }
                    }
                    accumulate(&mut grads, *x, dx, &self.values);
                }
                Entry::GatherRows(table, idx) => {
                    let (v, h) = self.values[table.0].shape();
                    let mut dt = Tensor2::zeros(v, h);
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..h {
                            let acc = dt.get(src, c) + g.get(r, c);
                            dt.set(src, c, acc);
                        }
                    }
                    accumulate(&mut grads, *table, dt, &self.values);
                }
                Entry::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.values[p.0].rows();
                        let mut dp = Tensor2::zeros(pr, cols);
                        for r in 0..pr {
                            for c in 0..cols {
                                dp.set(r, c, g.get(offset + r, c));
                            }
                        }
                        accumulate(&mut grads, p, dp, &self.values);
                        offset += pr;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor2<S>>],
    id: ValueId,
    delta: Tensor2<S>,
    values: &[Tensor2<S>],
) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot @ None => {
            debug_assert_eq!(values[id.0].shape(), delta.shape());
            *slot = Some(delta);
        }
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor2<S>, b: &Tensor2<S>) -> Tensor2<S> {
    let (n, k) = a.shape();
    let (_, m) = b.shape();
    let mut out = Tensor2::zeros(n, m);
    for i in 0..n {
        for p in 0..k {
            let av = a.get(i, p);
            if av == S::zero() {
                continue;
            }
            for j in 0..m {
                let v = out.get(i, j) + av * b.get(p, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

/// `a * b^T` without materialising the transpose.
fn matmul_nt<S: Scalar>(a: &Tensor2<S>, b: &Tensor2<S>) -> Tensor2<S> {
    let (n, k) = a.shape();
    let (m, _) = b.shape();
    let mut out = Tensor2::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = S::zero();
            for p in 0..k {
                s += a.get(i, p) * b.get(j, p);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// `a^T * b` without materialising the transpose.
fn matmul_tn<S: Scalar>(a: &Tensor2<S>, b: &Tensor2<S>) -> Tensor2<S> {
    let (k, n) = a.shape();
    let (_, m) = b.shape();
    let mut out = Tensor2::zeros(n, m);
    for p in 0..k {
        for i in 0..n {
            let av = a.get(p, i);
            if av == S::zero() {
                continue;
            }
            for j in 0..m {
                let v = out.get(i, j) + av * b.get(p, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

pub(crate) fn softmax_raw<S: Scalar>(x: &Tensor2<S>) -> Tensor2<S> {
    let (n, c) = x.shape();
    let mut out = Tensor2::zeros(n, c);
    for r in 0..n {
        let mut mx = x.get(r, 0);
        for k in 1..c {
            if x.get(r, k) > mx {
                mx = x.get(r, k);
            }
        }
        let mut denom = S::zero();
        for k in 0..c {
            let e = (x.get(r, k) - mx).exp();
            out.set(r, k, e);
            denom += e;
        }
        for k in 0..c {
            out.set(r, k, out.get(r, k) / denom);
        }
    }
    out
}

pub(crate) fn log_softmax_raw<S: Scalar>(x: &Tensor2<S>) -> Tensor2<S> {
    let (n, c) = x.shape();
    let mut out = Tensor2::zeros(n, c);
    for r in 0..n {
        let mut mx = x.get(r, 0);
        for k in 1..c {
            if x.get(r, k) > mx {
                mx = x.get(r, k);
            }
        }
        let mut denom = S::zero();
        for k in 0..c {
            denom += (x.get(r, k) - mx).exp();
        }
        let lse = mx + denom.ln();
        for k in 0..c {
            out.set(r, k, x.get(r, k) - lse);
        }
    }
    out
}

pub(crate) fn softplus_raw<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|})
    let z = if x > S::zero() { x } else { S::zero() };
    z + (S::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn sigmoid_raw<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
