//! Deterministic synthetic corpus generator. Human text comes from order-2
//! character-level Markov chains trained on embedded public-domain seed
//! paragraphs (one per domain); each "generator" resamples the same chains
//! under its own style knobs (temperature, character bias, forced sentence
//! length), which makes the human/AI split separable but noisy and gives the
//! generator head real structure to learn.

use std::collections::HashMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{build_attacked_pool, AttackConfig, ALL_KINDS, TRAIN_KINDS};
use crate::corpus::{LabelSpace, TextRecord, AI, HUMAN};
use crate::{fnv1a64, Error, Real, Result};

/// Domain seed paragraphs: well-known public-domain prose (Melville 1851,
/// Dickens 1859, Lincoln 1863). Each trains one human chain.
const DOMAIN_SEEDS: [(&str, &str); 3] = [
    (
        "fiction",
        "Call me Ishmael. Some years ago, never mind how long precisely, having little \
         or no money in my purse, and nothing particular to interest me on shore, I \
         thought I would sail about a little and see the watery part of the world. It \
         is a way I have of driving off the spleen and regulating the circulation. \
         Whenever I find myself growing grim about the mouth; whenever it is a damp, \
         drizzly November in my soul; whenever I find myself involuntarily pausing \
         before coffin warehouses, and bringing up the rear of every funeral I meet; \
         and especially whenever my hypos get such an upper hand of me, that it \
         requires a strong moral principle to prevent me from deliberately stepping \
         into the street, and methodically knocking people's hats off, then I account \
         it high time to get to sea as soon as I can.",
    ),
    (
        "essay",
        "It was the best of times, it was the worst of times, it was the age of \
         wisdom, it was the age of foolishness, it was the epoch of belief, it was \
         the epoch of incredulity, it was the season of light, it was the season of \
         darkness, it was the spring of hope, it was the winter of despair, we had \
         everything before us, we had nothing before us, we were all going direct to \
         heaven, we were all going direct the other way, in short, the period was so \
         far like the present period, that some of its noisiest authorities insisted \
         on its being received, for good or for evil, in the superlative degree of \
         comparison only. There were a king with a large jaw and a queen with a plain \
         face, on the throne of England; there were a king with a large jaw and a \
         queen with a fair face, on the throne of France.",
    ),
    (
        "speech",
        "Four score and seven years ago our fathers brought forth on this continent a \
         new nation, conceived in liberty, and dedicated to the proposition that all \
         men are created equal. Now we are engaged in a great civil war, testing \
         whether that nation, or any nation so conceived and so dedicated, can long \
         endure. We are met on a great battlefield of that war. We have come to \
         dedicate a portion of that field, as a final resting place for those who \
         here gave their lives that that nation might live. It is altogether fitting \
         and proper that we should do this. But, in a larger sense, we can not \
         dedicate, we can not consecrate, we can not hallow this ground. The brave \
         men, living and dead, who struggled here, have consecrated it, far above \
         our poor power to add or detract.",
    ),
];

/// Sampling style for one generator family. The neutral knobs (temperature 1,
/// no bias, no forced sentence length) reproduce the human chain exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleKnobs {
    /// Softens (>1) or sharpens (<1) the transition distribution.
    pub temperature: Real,
    /// Characters whose transition weight is multiplied by `bias_strength`.
    pub bias_chars: String,
    pub bias_strength: Real,
    /// Mean forced sentence length in characters; 0 disables forcing.
    pub sentence_mean: usize,
}

impl StyleKnobs {
    fn human() -> Self {
        StyleKnobs {
            temperature: 1.0,
            bias_chars: String::new(),
            bias_strength: 1.0,
            sentence_mean: 0,
        }
    }
}

fn default_knobs() -> Vec<StyleKnobs> {
    vec![
        StyleKnobs {
            temperature: 0.75,
            bias_chars: "lnrst".into(),
            bias_strength: 2.2,
            sentence_mean: 70,
        },
        StyleKnobs {
            temperature: 1.28,
            bias_chars: "adegh".into(),
            bias_strength: 2.2,
            sentence_mean: 130,
        },
        StyleKnobs {
            temperature: 0.88,
            bias_chars: "cmopu".into(),
            bias_strength: 2.4,
            sentence_mean: 95,
        },
        StyleKnobs {
            temperature: 1.14,
            bias_chars: "bfivw".into(),
            bias_strength: 2.4,
            sentence_mean: 115,
        },
    ]
}

/// Shape of the synthetic corpus. Serde defaults keep spec files minimal:
/// `{}` is a valid spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_generators: usize,
    pub n_domains: usize,
    /// AI rows per (generator, domain) cell; humans get the same count per
    /// domain.
    pub rows_per_cell: usize,
    pub seed: u64,
    /// Style knobs, one per generator (extras ignored).
    pub knobs: Vec<StyleKnobs>,
    /// Target characters per row.
    pub text_len: usize,
    /// Fraction of AI rows that additionally appear in attacked form.
    pub attacked_fraction: Real,
    /// Edit rate for those attacked rows.
    pub attack_rate: Real,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_generators: 4,
            n_domains: 3,
            rows_per_cell: 100,
            seed: 2026,
            knobs: default_knobs(),
            text_len: 380,
            attacked_fraction: 0.25,
            attack_rate: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::InvalidArgument {
                op: "SynthSpec",
                detail,
            })
        };
        if self.n_generators < 2 {
            return fail(format!(
                "need at least 2 generators to exercise the generator head, got {}",
                self.n_generators
            ));
        }
        if self.n_domains == 0 || self.n_domains > DOMAIN_SEEDS.len() {
            return fail(format!(
                "n_domains must be in 1..={}, got {}",
                DOMAIN_SEEDS.len(),
                self.n_domains
            ));
        }
        if self.knobs.len() < self.n_generators {
            return fail(format!(
                "{} generators but only {} style knobs",
                self.n_generators,
                self.knobs.len()
            ));
        }
        for (i, k) in self.knobs.iter().take(self.n_generators).enumerate() {
            if !(k.temperature > 0.0 && k.temperature.is_finite()) {
                return fail(format!("generator {i}: temperature must be positive"));
            }
            if !(k.bias_strength > 0.0 && k.bias_strength.is_finite()) {
                return fail(format!("generator {i}: bias_strength must be positive"));
            }
            for j in 0..i {
                if self.knobs[j] == *k {
                    return fail(format!("generators {j} and {i} share identical knobs"));
                }
            }
        }
        if self.rows_per_cell == 0 {
            return fail("rows_per_cell must be >= 1".into());
        }
        if self.text_len < 50 {
            return fail(format!("text_len must be >= 50, got {}", self.text_len));
        }
        if !(0.0..=1.0).contains(&self.attacked_fraction) {
            return fail(format!(
                "attacked_fraction {} outside [0, 1]",
                self.attacked_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.attack_rate) {
            return fail(format!("attack_rate {} outside [0, 1]", self.attack_rate));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let spec: SynthSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Label space matching [`generate`]'s output: `gen{i}` generator names, the
/// canonical attack-kind names, and the seed-paragraph domain names.
pub fn label_space(spec: &SynthSpec) -> Result<LabelSpace> {
    spec.validate()?;
    LabelSpace::new(
        (0..spec.n_generators).map(|i| format!("gen{i}")).collect(),
        ALL_KINDS.iter().map(|k| k.name().to_string()).collect(),
        DOMAIN_SEEDS[..spec.n_domains]
            .iter()
            .map(|(name, _)| name.to_string())
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Order-2 character chain
// ---------------------------------------------------------------------------

/// Transition options are sorted by character so sampling order never depends
/// on hash-map iteration.
struct Markov2 {
    table: HashMap<[char; 2], Vec<(char, u32)>>,
    /// States that open a sentence in the seed text, sorted.
    starts: Vec<[char; 2]>,
}

fn canonicalize(seed: &str) -> Vec<char> {
    let mut out = Vec::with_capacity(seed.len());
    let mut last_space = true;
    for c in seed.chars() {
        let c = c.to_ascii_lowercase();
        let keep = c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | ',' | '\'');
        if keep {
            out.push(c);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.last() == Some(&' ') {
        out.pop();
    }
    out
}

impl Markov2 {
    fn train(seed: &str) -> Markov2 {
        let chars = canonicalize(seed);
        assert!(chars.len() >= 8, "seed paragraph too short");
        let mut counts: HashMap<[char; 2], HashMap<char, u32>> = HashMap::new();
        let mut starts = vec![[chars[0], chars[1]]];
        for w in chars.windows(3) {
            *counts
                .entry([w[0], w[1]])
                .or_default()
                .entry(w[2])
                .or_insert(0) += 1;
        }
        for w in chars.windows(4) {
            if w[0] == '.' && w[1] == ' ' {
                starts.push([w[2], w[3]]);
            }
        }
        starts.sort_unstable();
        starts.dedup();
        let table = counts
            .into_iter()
            .map(|(state, next)| {
                let mut opts: Vec<(char, u32)> = next.into_iter().collect();
                opts.sort_unstable_by_key(|&(c, _)| c);
                (state, opts)
            })
            .collect();
        Markov2 { table, starts }
    }

    fn fresh_start<R: Rng>(&self, rng: &mut R) -> [char; 2] {
        self.starts[rng.gen_range(0..self.starts.len())]
    }

    fn sample_next<R: Rng>(&self, state: [char; 2], knobs: &StyleKnobs, rng: &mut R) -> Option<char> {
        let opts = self.table.get(&state)?;
        let weights: Vec<Real> = opts
            .iter()
            .map(|&(c, n)| {
                let mut w = (n as Real).powf(1.0 / knobs.temperature);
                if knobs.bias_chars.contains(c) {
                    w *= knobs.bias_strength;
                }
                w
            })
            .collect();
        let dist = WeightedIndex::new(&weights).ok()?;
        Some(opts[dist.sample(rng)].0)
    }
}

fn sentence_target<R: Rng>(knobs: &StyleKnobs, rng: &mut R) -> usize {
    if knobs.sentence_mean == 0 {
        usize::MAX
    } else {
        let m = knobs.sentence_mean;
        rng.gen_range(m / 2..=m + m / 2)
    }
}

fn generate_text<R: Rng>(
    chain: &Markov2,
    knobs: &StyleKnobs,
    target_len: usize,
    rng: &mut R,
) -> String {
    let mut state = chain.fresh_start(rng);
    let mut out = String::with_capacity(target_len + 16);
    out.push(state[0]);
    out.push(state[1]);
    let mut since_period = 2usize;
    let mut target = sentence_target(knobs, rng);
    // Run to the target length, then finish the sentence (bounded overshoot).
    while out.len() < target_len + 80 {
        let forced_stop = since_period >= target;
        let next = if forced_stop {
            Some('.')
        } else {
            chain.sample_next(state, knobs, rng)
        };
        match next {
            Some('.') => {
                out.push('.');
                if out.len() >= target_len {
                    break;
                }
                out.push(' ');
                state = chain.fresh_start(rng);
                out.push(state[0]);
                out.push(state[1]);
                since_period = 2;
                target = sentence_target(knobs, rng);
            }
            Some(c) => {
                out.push(c);
                state = [state[1], c];
                since_period += 1;
            }
            // Dead-end state (only the seed's final bigram): start fresh.
            None => {
                out.push(' ');
                state = chain.fresh_start(rng);
                out.push(state[0]);
                out.push(state[1]);
                since_period += 3;
            }
        }
    }
    if !out.ends_with('.') {
        out.push('.');
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus assembly
// ---------------------------------------------------------------------------

fn row_rng(seed: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(id.as_bytes()))
}

/// Generate the full corpus: `rows_per_cell` humans per domain, one AI cell
/// per (generator, domain), plus attacked copies of a hash-selected fraction
/// of the AI rows. Every row's text depends only on `spec.seed` and its own
/// id, so output is byte-identical across runs and thread counts.
pub fn generate(spec: &SynthSpec) -> Result<Vec<TextRecord>> {
    spec.validate()?;
    let chains: Vec<Markov2> = DOMAIN_SEEDS[..spec.n_domains]
        .iter()
        .map(|(_, seed)| Markov2::train(seed))
        .collect();

    struct RowPlan {
        id: String,
        dom: usize,
        gen: Option<usize>,
    }
    let mut plan = Vec::new();
    for d in 0..spec.n_domains {
        for r in 0..spec.rows_per_cell {
            plan.push(RowPlan {
                id: format!("syn-h-d{d}-r{r}"),
                dom: d,
                gen: None,
            });
        }
    }
    for g in 0..spec.n_generators {
        for d in 0..spec.n_domains {
            for r in 0..spec.rows_per_cell {
                plan.push(RowPlan {
                    id: format!("syn-g{g}-d{d}-r{r}"),
                    dom: d,
                    gen: Some(g),
                });
            }
        }
    }

    let human_knobs = StyleKnobs::human();
    let mut rows: Vec<TextRecord> = plan
        .par_iter()
        .map(|p| {
            let knobs = match p.gen {
                None => &human_knobs,
                Some(g) => &spec.knobs[g],
            };
            let mut rng = row_rng(spec.seed, &p.id);
            let text = generate_text(&chains[p.dom], knobs, spec.text_len, &mut rng);
            TextRecord {
                id: p.id.clone(),
                text,
                main_label: if p.gen.is_some() { AI } else { HUMAN },
                gen_label: p.gen,
                atk_label: None,
                dom_label: Some(p.dom),
                source: match p.gen {
                    None => "synth:human".to_string(),
                    Some(g) => format!("synth:gen{g}"),
                },
            }
        })
        .collect();

    if spec.attacked_fraction > 0.0 {
        let cut = (spec.attacked_fraction * u64::MAX as Real) as u64;
        let selected: Vec<TextRecord> = rows
            .iter()
            .filter(|r| {
                r.main_label == AI
                    && fnv1a64(format!("{}:attacked", r.id).as_bytes()) <= cut
            })
            .cloned()
            .collect();
        let attack_cfg = AttackConfig {
            rate: spec.attack_rate,
            seed: spec.seed ^ fnv1a64(b"synth:attacks"),
            ..AttackConfig::default().with_builtin_lexicon()
        };
        rows.extend(build_attacked_pool(&selected, &TRAIN_KINDS, &attack_cfg)?);
    }
    Ok(rows)
}
