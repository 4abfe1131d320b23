//! Student encoder with four heads, EMA teacher, SWA averaging and
//! checkpoint I/O.
//!
//! The encoder is a hashed byte-trigram embedding bag: each 3-byte window is
//! hashed into one of `V` buckets, embeddings are masked-mean pooled and fed
//! through a two-layer ReLU trunk. The main AI/Human head is a two-layer MLP;
//! the generator / attack / domain heads are linear. Only the main head is
//! evaluated at inference.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::corpus::Task;
use crate::numcore::{softmax_raw, ValueId};
use crate::{fnv1a64, Error, Real, Result, Tape, Tensor};

/// Hashed feature sequence for one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl FeatureSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte trigrams hashed FNV-1a modulo `vocab`, truncated to `max_seq_len`.
/// Texts shorter than 3 bytes are zero-padded to a single trigram.
pub fn featurize(text: &str, vocab: usize, max_seq_len: usize) -> Result<FeatureSeq> {
    if text.is_empty() {
        return Err(Error::InvalidArgument {
            op: "featurize",
            detail: "empty text".into(),
        });
    }
    let bytes = text.as_bytes();
    let mut ids = Vec::new();
    if bytes.len() < 3 {
        let mut padded = [0u8; 3];
        padded[..bytes.len()].copy_from_slice(bytes);
        ids.push((fnv1a64(&padded) % vocab as u64) as usize);
    } else {
        let n = (bytes.len() - 2).min(max_seq_len);
        ids.reserve(n);
        for w in bytes.windows(3).take(n) {
            ids.push((fnv1a64(w) % vocab as u64) as usize);
        }
    }
    let mask = vec![true; ids.len()];
    Ok(FeatureSeq { ids, mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub n_gen: usize,
    pub n_atk: usize,
    pub n_dom: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab: 32768,
            hidden: 64,
            n_gen: 104,
            n_atk: 17,
            n_dom: 59,
        }
    }
}

/// All learnable state. `log_vars` holds the four per-task uncertainty
/// scalars s_t in order (main, gen, atk, dom); keeping them here means EMA,
/// SWA and checkpoints treat them like any other parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embedding: Tensor,
    pub trunk_w1: Tensor,
    pub trunk_b1: Tensor,
    pub trunk_w2: Tensor,
    pub trunk_b2: Tensor,
    pub main_w1: Tensor,
    pub main_b1: Tensor,
    pub main_w2: Tensor,
    pub main_b2: Tensor,
    pub gen_w: Tensor,
    pub gen_b: Tensor,
    pub atk_w: Tensor,
    pub atk_b: Tensor,
    pub dom_w: Tensor,
    pub dom_b: Tensor,
    pub log_vars: [Real; 4],
}

/// Declared parameter-block order; checkpoints and the optimizer both key off
/// this list.
pub const BLOCK_NAMES: [&str; 16] = [
    "embedding",
    "trunk_w1",
    "trunk_b1",
    "trunk_w2",
    "trunk_b2",
    "main_w1",
    "main_b1",
    "main_w2",
    "main_b2",
    "gen_w",
    "gen_b",
    "atk_w",
    "atk_b",
    "dom_w",
    "dom_b",
    "log_vars",
];

impl ModelParams {
    /// Xavier-uniform weights, zero biases, zero log-vars.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let (v, h) = (dims.vocab, dims.hidden);
        let mut xavier = |rows: usize, cols: usize| -> Tensor {
            let limit = (6.0 / (rows + cols) as Real).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            Tensor::from_vec(rows, cols, data).unwrap()
        };
        let embedding = xavier(v, h);
        let trunk_w1 = xavier(h, h);
        let trunk_w2 = xavier(h, h);
        let main_w1 = xavier(h, h);
        let main_w2 = xavier(h, 2);
        let gen_w = xavier(h, dims.n_gen);
        let atk_w = xavier(h, dims.n_atk);
        let dom_w = xavier(h, dims.n_dom);
        ModelParams {
            dims,
            embedding,
            trunk_w1,
            trunk_b1: Tensor::zeros(1, h),
            trunk_w2,
            trunk_b2: Tensor::zeros(1, h),
            main_w1,
            main_b1: Tensor::zeros(1, h),
            main_w2,
            main_b2: Tensor::zeros(1, 2),
            gen_w,
            gen_b: Tensor::zeros(1, dims.n_gen),
            atk_w,
            atk_b: Tensor::zeros(1, dims.n_atk),
            dom_w,
            dom_b: Tensor::zeros(1, dims.n_dom),
            log_vars: [0.0; 4],
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[Real])> {
        vec![
            ("embedding", self.embedding.data()),
            ("trunk_w1", self.trunk_w1.data()),
            ("trunk_b1", self.trunk_b1.data()),
            ("trunk_w2", self.trunk_w2.data()),
            ("trunk_b2", self.trunk_b2.data()),
            ("main_w1", self.main_w1.data()),
            ("main_b1", self.main_b1.data()),
            ("main_w2", self.main_w2.data()),
            ("main_b2", self.main_b2.data()),
            ("gen_w", self.gen_w.data()),
            ("gen_b", self.gen_b.data()),
            ("atk_w", self.atk_w.data()),
            ("atk_b", self.atk_b.data()),
            ("dom_w", self.dom_w.data()),
            ("dom_b", self.dom_b.data()),
            ("log_vars", &self.log_vars),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [Real])> {
        vec![
            ("embedding", self.embedding.data_mut()),
            ("trunk_w1", self.trunk_w1.data_mut()),
            ("trunk_b1", self.trunk_b1.data_mut()),
            ("trunk_w2", self.trunk_w2.data_mut()),
            ("trunk_b2", self.trunk_b2.data_mut()),
            ("main_w1", self.main_w1.data_mut()),
            ("main_b1", self.main_b1.data_mut()),
            ("main_w2", self.main_w2.data_mut()),
            ("main_b2", self.main_b2.data_mut()),
            ("gen_w", self.gen_w.data_mut()),
            ("gen_b", self.gen_b.data_mut()),
            ("atk_w", self.atk_w.data_mut()),
            ("atk_b", self.atk_b.data_mut()),
            ("dom_w", self.dom_w.data_mut()),
            ("dom_b", self.dom_b.data_mut()),
            ("log_vars", &mut self.log_vars),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Order-sensitive digest of every parameter byte; used by tests to prove
    /// two runs produced identical models.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::with_capacity(self.n_params() * 8);
        for (_, block) in self.blocks() {
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&buf)
    }

    /// Parameter tensors in [`BLOCK_NAMES`] order, log-var scalars last as
    /// 1x1 tensors — the exact layout [`TapeParams::register`] puts on a
    /// tape, for callers that re-register perturbed copies themselves.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.embedding.clone(),
            self.trunk_w1.clone(),
            self.trunk_b1.clone(),
            self.trunk_w2.clone(),
            self.trunk_b2.clone(),
            self.main_w1.clone(),
            self.main_b1.clone(),
            self.main_w2.clone(),
            self.main_b2.clone(),
            self.gen_w.clone(),
            self.gen_b.clone(),
            self.atk_w.clone(),
            self.atk_b.clone(),
            self.dom_w.clone(),
            self.dom_b.clone(),
        ];
        out.extend(self.log_vars.iter().map(|&s| Tensor::scalar(s)));
        out
    }
}

/// Tape handles for every parameter block, so a whole training step shares a
/// single registration of the model.
pub struct TapeParams {
    pub embedding: ValueId,
    pub trunk_w1: ValueId,
    pub trunk_b1: ValueId,
    pub trunk_w2: ValueId,
    pub trunk_b2: ValueId,
    pub main_w1: ValueId,
    pub main_b1: ValueId,
    pub main_w2: ValueId,
    pub main_b2: ValueId,
    pub gen_w: ValueId,
    pub gen_b: ValueId,
    pub atk_w: ValueId,
    pub atk_b: ValueId,
    pub dom_w: ValueId,
    pub dom_b: ValueId,
    pub log_vars: [ValueId; 4],
}

impl TapeParams {
    pub fn register(tape: &mut Tape, p: &ModelParams) -> TapeParams {
        TapeParams {
            embedding: tape.input(p.embedding.clone()),
            trunk_w1: tape.input(p.trunk_w1.clone()),
            trunk_b1: tape.input(p.trunk_b1.clone()),
            trunk_w2: tape.input(p.trunk_w2.clone()),
            trunk_b2: tape.input(p.trunk_b2.clone()),
            main_w1: tape.input(p.main_w1.clone()),
            main_b1: tape.input(p.main_b1.clone()),
            main_w2: tape.input(p.main_w2.clone()),
            main_b2: tape.input(p.main_b2.clone()),
            gen_w: tape.input(p.gen_w.clone()),
            gen_b: tape.input(p.gen_b.clone()),
            atk_w: tape.input(p.atk_w.clone()),
            atk_b: tape.input(p.atk_b.clone()),
            dom_w: tape.input(p.dom_w.clone()),
            dom_b: tape.input(p.dom_b.clone()),
            log_vars: [
                tape.input(Tensor::scalar(p.log_vars[0])),
                tape.input(Tensor::scalar(p.log_vars[1])),
                tape.input(Tensor::scalar(p.log_vars[2])),
                tape.input(Tensor::scalar(p.log_vars[3])),
            ],
        }
    }

    /// Inverse of [`TapeParams::block_ids`]: rebuild the handle set from ids
    /// registered in [`BLOCK_NAMES`] order with the four log-var scalars last.
    pub fn from_ids(ids: &[ValueId]) -> Result<TapeParams> {
        if ids.len() != BLOCK_NAMES.len() + 3 {
            return Err(Error::Shape {
                op: "TapeParams::from_ids",
                detail: format!("expected {} ids, got {}", BLOCK_NAMES.len() + 3, ids.len()),
            });
        }
        Ok(TapeParams {
            embedding: ids[0],
            trunk_w1: ids[1],
            trunk_b1: ids[2],
            trunk_w2: ids[3],
            trunk_b2: ids[4],
            main_w1: ids[5],
            main_b1: ids[6],
            main_w2: ids[7],
            main_b2: ids[8],
            gen_w: ids[9],
            gen_b: ids[10],
            atk_w: ids[11],
            atk_b: ids[12],
            dom_w: ids[13],
            dom_b: ids[14],
            log_vars: [ids[15], ids[16], ids[17], ids[18]],
        })
    }

    /// Ids in [`BLOCK_NAMES`] order, log-var scalars last.
    pub fn block_ids(&self) -> Vec<ValueId> {
        let mut ids = vec![
            self.embedding,
            self.trunk_w1,
            self.trunk_b1,
            self.trunk_w2,
            self.trunk_b2,
            self.main_w1,
            self.main_b1,
            self.main_w2,
            self.main_b2,
            self.gen_w,
            self.gen_b,
            self.atk_w,
            self.atk_b,
            self.dom_w,
            self.dom_b,
        ];
        ids.extend(self.log_vars);
        ids
    }
}

/// Tape-recorded encoder: gather embeddings, masked-mean pool, two trunk
/// layers (ReLU then dropout). Returns the `1 x H` pooled representation fed
/// to every head.
pub fn encode<R: Rng>(
    tape: &mut Tape,
    tp: &TapeParams,
    seq: &FeatureSeq,
    dropout_rate: Real,
    rng: &mut R,
) -> Result<ValueId> {
    let gathered = tape.gather_rows(tp.embedding, &seq.ids)?;
    let pooled = tape.masked_mean_rows(gathered, &seq.mask)?;
    let h1 = tape.matmul(pooled, tp.trunk_w1)?;
    let h1 = tape.add_bias(h1, tp.trunk_b1)?;
    let h1 = tape.relu(h1);
    let h1 = tape.dropout(h1, dropout_rate, rng)?;
    let h2 = tape.matmul(h1, tp.trunk_w2)?;
    let h2 = tape.add_bias(h2, tp.trunk_b2)?;
    let h2 = tape.relu(h2);
    tape.dropout(h2, dropout_rate, rng)
}

/// Head logits for a (possibly batched) pooled matrix already on the tape.
pub fn head_logits_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    pooled: ValueId,
    task: Task,
) -> Result<ValueId> {
    match task {
        Task::Main => {
            let h = tape.matmul(pooled, tp.main_w1)?;
            let h = tape.add_bias(h, tp.main_b1)?;
            let h = tape.relu(h);
            let z = tape.matmul(h, tp.main_w2)?;
            tape.add_bias(z, tp.main_b2)
        }
        Task::Gen => {
            let z = tape.matmul(pooled, tp.gen_w)?;
            tape.add_bias(z, tp.gen_b)
        }
        Task::Atk => {
            let z = tape.matmul(pooled, tp.atk_w)?;
            tape.add_bias(z, tp.atk_b)
        }
        Task::Dom => {
            let z = tape.matmul(pooled, tp.dom_w)?;
            tape.add_bias(z, tp.dom_b)
        }
    }
}

// ---- tape-free forward path (teacher and inference) ----

fn affine_plain(x: &[Real], w: &Tensor, b: &Tensor) -> Vec<Real> {
    let (rows, cols) = w.shape();
    debug_assert_eq!(x.len(), rows);
    let mut out: Vec<Real> = b.data().to_vec();
    debug_assert_eq!(out.len(), cols);
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = w.row(i);
        for c in 0..cols {
            out[c] += xv * wrow[c];
        }
    }
    out
}

/// Dropout-free encoder without a tape; exactly the forward of [`encode`] at
/// dropout 0.
pub fn encode_plain(params: &ModelParams, seq: &FeatureSeq) -> Result<Vec<Real>> {
    let h = params.dims.hidden;
    let kept = seq.mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::InvalidArgument {
            op: "encode_plain",
            detail: "mask selects no rows".into(),
        });
    }
    let mut pooled = vec![0.0; h];
    for (i, &id) in seq.ids.iter().enumerate() {
        if seq.mask[i] {
            let row = params.embedding.row(id);
            for c in 0..h {
                pooled[c] += row[c];
            }
        }
    }
    let inv = 1.0 / kept as Real;
    for v in &mut pooled {
        *v *= inv;
    }
    let mut h1 = affine_plain(&pooled, &params.trunk_w1, &params.trunk_b1);
    for v in &mut h1 {
        *v = v.max(0.0);
    }
    let mut h2 = affine_plain(&h1, &params.trunk_w2, &params.trunk_b2);
    for v in &mut h2 {
        *v = v.max(0.0);
    }
    Ok(h2)
}

/// Inference head logits from a pooled vector. Only `Task::Main` is used by
/// the detector score; the others exist for diagnostics.
pub fn head_logits(params: &ModelParams, pooled: &[Real], task: Task) -> Vec<Real> {
    match task {
        Task::Main => {
            let mut h = affine_plain(pooled, &params.main_w1, &params.main_b1);
            for v in &mut h {
                *v = v.max(0.0);
            }
            affine_plain(&h, &params.main_w2, &params.main_b2)
        }
        Task::Gen => affine_plain(pooled, &params.gen_w, &params.gen_b),
        Task::Atk => affine_plain(pooled, &params.atk_w, &params.atk_b),
        Task::Dom => affine_plain(pooled, &params.dom_w, &params.dom_b),
    }
}

/// Detector score: softmax over the main logits, probability of the AI class.
pub fn ai_score(main_logits: &[Real]) -> Real {
    debug_assert_eq!(main_logits.len(), 2);
    let t = Tensor::from_vec(1, 2, main_logits.to_vec()).unwrap();
    softmax_raw(&t).get(0, 1)
}

/// EMA teacher. Follows the student as `θ̄ ← β·θ̄ + (1−β)·θ` after each
/// optimizer step; no gradient ever flows through it (its forward passes are
/// tape-free by construction).
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ModelParams,
    pub beta: Real,
}

impl TeacherState {
    /// `beta` in [0, 1); 0 makes the teacher track the student exactly.
    pub fn new(params: ModelParams, beta: Real) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument {
                op: "TeacherState",
                detail: format!("beta {beta} outside [0, 1)"),
            });
        }
        Ok(TeacherState { params, beta })
    }
}

pub fn ema_update(teacher: &mut TeacherState, student: &ModelParams) -> Result<()> {
    if teacher.params.dims != student.dims {
        return Err(Error::Shape {
            op: "ema_update",
            detail: "teacher/student dims differ".into(),
        });
    }
    let beta = teacher.beta;
    for ((_, t), (_, s)) in teacher.params.blocks_mut().into_iter().zip(student.blocks()) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}

/// Elementwise mean of the checkpoints, log-vars included.
pub fn swa_average(checkpoints: &[ModelParams]) -> Result<ModelParams> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::InvalidArgument {
            op: "swa_average",
            detail: "no checkpoints".into(),
        });
    };
    if checkpoints.iter().any(|c| c.dims != first.dims) {
        return Err(Error::Shape {
            op: "swa_average",
            detail: "checkpoint dims differ".into(),
        });
    }
    let mut out = first.clone();
    let inv = 1.0 / checkpoints.len() as Real;
    let mut acc: Vec<Vec<Real>> = first
        .blocks()
        .iter()
        .map(|(_, b)| vec![0.0; b.len()])
        .collect();
    for ckpt in checkpoints {
        for (dst, (_, src)) in acc.iter_mut().zip(ckpt.blocks()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for ((_, dst), src) in out.blocks_mut().into_iter().zip(&acc) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s * inv;
        }
    }
    Ok(out)
}

// ---- checkpoint I/O ----

const MAGIC: &[u8; 4] = b"MELD";
const VERSION: u8 = 1;

/// Binary layout: `"MELD"`, version byte, five little-endian u32 dims
/// (V, H, G, A, D), then every parameter block as little-endian f64 in
/// [`BLOCK_NAMES`] order. Round-trips bit-exactly.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&[VERSION]).map_err(werr)?;
    let d = &params.dims;
    for dim in [d.vocab, d.hidden, d.n_gen, d.n_atk, d.n_dom] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(werr)?;
    }
    for (_, block) in params.blocks() {
        for v in block {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    if raw.len() < 25 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    if &raw[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    if raw[4] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", raw[4])));
    }
    let mut dims_raw = [0u32; 5];
    for (i, d) in dims_raw.iter_mut().enumerate() {
        let off = 5 + i * 4;
        *d = u32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
    }
    let dims = ModelDims {
        vocab: dims_raw[0] as usize,
        hidden: dims_raw[1] as usize,
        n_gen: dims_raw[2] as usize,
        n_atk: dims_raw[3] as usize,
        n_dom: dims_raw[4] as usize,
    };
    if dims.vocab == 0 || dims.hidden == 0 || dims.n_gen == 0 || dims.n_atk == 0 || dims.n_dom == 0
    {
        return Err(Error::Checkpoint(format!("bad dims {dims_raw:?}")));
    }

    // Shape skeleton with the declared dims; block sizes follow from it.
    let mut params = zeroed(dims);
    let mut off = 25;
    for (name, block) in params.blocks_mut() {
        let need = block.len() * 8;
        if raw.len() < off + need {
            return Err(Error::Checkpoint(format!("truncated in block {name}")));
        }
        for v in block.iter_mut() {
            *v = Real::from_le_bytes(raw[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    if off != raw.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            raw.len() - off
        )));
    }
    Ok(params)
}

fn zeroed(dims: ModelDims) -> ModelParams {
    let (v, h) = (dims.vocab, dims.hidden);
    ModelParams {
        dims,
        embedding: Tensor::zeros(v, h),
        trunk_w1: Tensor::zeros(h, h),
        trunk_b1: Tensor::zeros(1, h),
        trunk_w2: Tensor::zeros(h, h),
        trunk_b2: Tensor::zeros(1, h),
        main_w1: Tensor::zeros(h, h),
        main_b1: Tensor::zeros(1, h),
        main_w2: Tensor::zeros(h, 2),
        main_b2: Tensor::zeros(1, 2),
        gen_w: Tensor::zeros(h, dims.n_gen),
        gen_b: Tensor::zeros(1, dims.n_gen),
        atk_w: Tensor::zeros(h, dims.n_atk),
        atk_b: Tensor::zeros(1, dims.n_atk),
        dom_w: Tensor::zeros(h, dims.n_dom),
        dom_b: Tensor::zeros(1, dims.n_dom),
        log_vars: [0.0; 4],
    }
}
