//! Corpus ingestion, label-space bookkeeping, dedup, and fixed-ratio mixture
//! batch sampling with per-task masks.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{fnv1a64, Error, Result};

/// The four supervised tasks, in their canonical diagnostic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Main = 0,
    Gen = 1,
    Atk = 2,
    Dom = 3,
}

pub const TASKS: [Task; 4] = [Task::Main, Task::Gen, Task::Atk, Task::Dom];

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Main => "main",
            Task::Gen => "gen",
            Task::Atk => "atk",
            Task::Dom => "dom",
        }
    }
}

pub const HUMAN: usize = 0;
pub const AI: usize = 1;

/// One labeled text row. `main_label` is 0 = human, 1 = AI; the auxiliary
/// labels are class indices into a [`LabelSpace`] and may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub main_label: usize,
    pub gen_label: Option<usize>,
    pub atk_label: Option<usize>,
    pub dom_label: Option<usize>,
    pub source: String,
}

impl TextRecord {
    pub fn label_for(&self, task: Task) -> Option<usize> {
        match task {
            Task::Main => Some(self.main_label),
            Task::Gen => self.gen_label,
            Task::Atk => self.atk_label,
            Task::Dom => self.dom_label,
        }
    }
}

/// Class-name lists for the three auxiliary heads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelSpace {
    pub generator_names: Vec<String>,
    pub attack_names: Vec<String>,
    pub domain_names: Vec<String>,
}

impl LabelSpace {
    pub fn new(
        generator_names: Vec<String>,
        attack_names: Vec<String>,
        domain_names: Vec<String>,
    ) -> Result<Self> {
        let space = LabelSpace {
            generator_names,
            attack_names,
            domain_names,
        };
        space.validate()?;
        Ok(space)
    }

    /// Default shape for externally prepared corpora: 104 generator classes,
    /// 17 attack classes, 59 domain classes, with positional placeholder
    /// names.
    pub fn corpus_default() -> Self {
        fn numbered(prefix: &str, n: usize) -> Vec<String> {
            (0..n).map(|i| format!("{prefix}{i:03}")).collect()
        }
        LabelSpace {
            generator_names: numbered("gen", 104),
            attack_names: numbered("atk", 17),
            domain_names: numbered("dom", 59),
        }
    }

    fn validate(&self) -> Result<()> {
        for (kind, names) in [
            ("generator", &self.generator_names),
            ("attack", &self.attack_names),
            ("domain", &self.domain_names),
        ] {
            let mut seen = HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    return Err(Error::InvalidArgument {
                        op: "LabelSpace",
                        detail: format!("duplicate {kind} name {n:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_gen(&self) -> usize {
        self.generator_names.len()
    }

    pub fn n_atk(&self) -> usize {
        self.attack_names.len()
    }

    pub fn n_dom(&self) -> usize {
        self.domain_names.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let space: LabelSpace = serde_json::from_str(&raw)?;
        space.validate()?;
        Ok(space)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = serde_json::to_string_pretty(self)?;
        std::fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn index_of(kind: &'static str, names: &[String], name: &str) -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or(Error::UnknownLabel {
                kind,
                label: name.to_string(),
            })
    }
}

#[derive(Serialize, Deserialize)]
struct RawRow<'a> {
    id: String,
    text: String,
    main: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atk: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dom: Option<String>,
    source: String,
    #[serde(skip)]
    _marker: std::marker::PhantomData<&'a ()>,
}

/// Load a JSONL corpus, mapping label names to indices in `space`.
pub fn load_jsonl(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Vec<TextRecord>> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRow = serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
            path: path.display().to_string(),
            line: lineno,
            detail: e.to_string(),
        })?;
        let rec = record_from_raw(raw, space).map_err(|e| Error::CorpusParse {
            path: path.display().to_string(),
            line: lineno,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn record_from_raw(raw: RawRow, space: &LabelSpace) -> Result<TextRecord> {
    if raw.text.is_empty() {
        return Err(Error::InvalidArgument {
            op: "load_jsonl",
            detail: format!("record {:?} has empty text", raw.id),
        });
    }
    let main_label = match raw.main.as_str() {
        "human" => HUMAN,
        "ai" => AI,
        other => {
            return Err(Error::UnknownLabel {
                kind: "main",
                label: other.to_string(),
            })
        }
    };
    let gen_label = raw
        .gen
        .as_deref()
        .map(|n| LabelSpace::index_of("gen", &space.generator_names, n))
        .transpose()?;
    let atk_label = raw
        .atk
        .as_deref()
        .map(|n| LabelSpace::index_of("atk", &space.attack_names, n))
        .transpose()?;
    let dom_label = raw
        .dom
        .as_deref()
        .map(|n| LabelSpace::index_of("dom", &space.domain_names, n))
        .transpose()?;
    Ok(TextRecord {
        id: raw.id,
        text: raw.text,
        main_label,
        gen_label,
        atk_label,
        dom_label,
        source: raw.source,
    })
}

/// Write records back out as JSONL, mapping label indices to names.
pub fn save_jsonl(
    path: impl AsRef<Path>,
    records: &[TextRecord],
    space: &LabelSpace,
) -> Result<()> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let raw = RawRow {
            id: rec.id.clone(),
            text: rec.text.clone(),
            main: if rec.main_label == HUMAN { "human" } else { "ai" }.to_string(),
            gen: rec.gen_label.map(|i| space.generator_names[i].clone()),
            atk: rec.atk_label.map(|i| space.attack_names[i].clone()),
            dom: rec.dom_label.map(|i| space.domain_names[i].clone()),
            source: rec.source.clone(),
            _marker: std::marker::PhantomData,
        };
        let line = serde_json::to_string(&raw)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Stable dedup key for a record's text.
pub fn text_hash(text: &str) -> u64 {
    fnv1a64(text.as_bytes())
}

/// Drop records whose text hash appears in `eval_texts`, then drop exact
/// duplicates within the remainder (first occurrence wins). Order preserved.
pub fn dedup_against(records: Vec<TextRecord>, eval_texts: &HashSet<u64>) -> Vec<TextRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| {
            let h = text_hash(&r.text);
            !eval_texts.contains(&h) && seen.insert(h)
        })
        .collect()
}

/// Sampling ratios per source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub source: String,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn new(entries: Vec<MixtureEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Mixture("no sources".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !(e.ratio > 0.0 && e.ratio <= 1.0) {
                return Err(Error::Mixture(format!(
                    "ratio {} for source {:?} outside (0, 1]",
                    e.ratio, e.source
                )));
            }
            if !seen.insert(e.source.as_str()) {
                return Err(Error::Mixture(format!("duplicate source {:?}", e.source)));
            }
        }
        let sum: f64 = entries.iter().map(|e| e.ratio).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Mixture(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(MixtureSpec { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let entries: Vec<MixtureEntry> = serde_json::from_str(&raw)?;
        MixtureSpec::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Uniform mixture proportional to per-source row counts: the fallback
    /// when no mixture file is given.
    pub fn proportional(records: &[TextRecord]) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for r in records {
            match names.iter().position(|n| n == &r.source) {
                Some(i) => counts[i] += 1,
                None => {
                    names.push(r.source.clone());
                    counts.push(1);
                }
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Mixture("empty corpus".into()));
        }
        // Make the ratios sum to exactly 1.0 by assigning the residual to the
        // largest source, so validation never trips on rounding.
        let mut entries: Vec<MixtureEntry> = names
            .iter()
            .zip(&counts)
            .map(|(n, &c)| MixtureEntry {
                source: n.clone(),
                ratio: c as f64 / total as f64,
            })
            .collect();
        let sum: f64 = entries.iter().map(|e| e.ratio).sum();
        let imax = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
        entries[imax].ratio += 1.0 - sum;
        MixtureSpec::new(entries)
    }
}

/// One sampled batch. Rows are owned copies of the corpus records;
/// `task_masks[t][i]` says whether row `i` carries a label for task `t`, and
/// `labels[t][i]` is meaningful only where the mask is set.
#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<TextRecord>,
    pub task_masks: [Vec<bool>; 4],
    pub labels: [Vec<usize>; 4],
}

impl Batch {
    pub fn from_records(records: Vec<TextRecord>) -> Self {
        let n = records.len();
        let mut task_masks = [vec![false; n], vec![false; n], vec![false; n], vec![false; n]];
        let mut labels = [vec![0; n], vec![0; n], vec![0; n], vec![0; n]];
        for (i, r) in records.iter().enumerate() {
            for t in TASKS {
                if let Some(l) = r.label_for(t) {
                    task_masks[t as usize][i] = true;
                    labels[t as usize][i] = l;
                }
            }
        }
        Batch {
            records,
            task_masks,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Order-sensitive digest of the row ids; used to verify that two
    /// training variants see identical data streams.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for r in &self.records {
            buf.extend_from_slice(r.id.as_bytes());
            buf.push(0x1f);
        }
        fnv1a64(&buf)
    }
}

/// Largest-remainder apportionment of `batch_size` slots over `ratios`.
/// Ties in the fractional remainders are broken by list order.
pub fn apportion(batch_size: usize, ratios: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(ratios.len());
    let mut assigned = 0usize;
    for (i, &r) in ratios.iter().enumerate() {
        let exact = batch_size as f64 * r;
        let base = exact.floor() as usize;
        counts.push(base);
        assigned += base;
        remainders.push((i, exact - base as f64));
    }
    // Sort by remainder descending; stable sort keeps list order on ties.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut left = batch_size.saturating_sub(assigned);
    for (i, _) in remainders {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

struct SourceState {
    /// Indices into the sampler's record store.
    rows: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

/// Stateful mixture sampler. Each source cycles independently: a full pass is
/// drawn without replacement, then the source reshuffles and starts over.
pub struct MixtureSampler {
    records: Vec<TextRecord>,
    mixture: MixtureSpec,
    sources: Vec<SourceState>,
}

impl MixtureSampler {
    pub fn new(records: Vec<TextRecord>, mixture: MixtureSpec) -> Result<Self> {
        let mut sources = Vec::with_capacity(mixture.entries.len());
        for e in &mixture.entries {
            let rows: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.source == e.source)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                return Err(Error::Mixture(format!(
                    "source {:?} has no records",
                    e.source
                )));
            }
            sources.push(SourceState {
                rows,
                order: Vec::new(),
                cursor: 0,
            });
        }
        Ok(MixtureSampler {
            records,
            mixture,
            sources,
        })
    }

    pub fn records(&self) -> &[TextRecord] {
        &self.records
    }

    pub fn sample_batch<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let nonzero = self.mixture.entries.iter().filter(|e| e.ratio > 0.0).count();
        if batch_size < nonzero {
            return Err(Error::Mixture(format!(
                "batch size {batch_size} smaller than {nonzero} active sources"
            )));
        }
        let ratios: Vec<f64> = self.mixture.entries.iter().map(|e| e.ratio).collect();
        let counts = apportion(batch_size, &ratios);
        let mut picked = Vec::with_capacity(batch_size);
        for (si, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                picked.push(self.next_from(si, rng));
            }
        }
        let records = picked
            .into_iter()
            .map(|i| self.records[i].clone())
            .collect();
        Ok(Batch::from_records(records))
    }

    fn next_from<R: Rng>(&mut self, si: usize, rng: &mut R) -> usize {
        let s = &mut self.sources[si];
        if s.cursor >= s.order.len() {
            s.order = s.rows.clone();
            s.order.shuffle(rng);
            s.cursor = 0;
        }
        let idx = s.order[s.cursor];
        s.cursor += 1;
        idx
    }
}
