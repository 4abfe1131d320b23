//! Surface-level text perturbations and the label-blind two-view augmentation.
//!
//! Every attack edits an exact budget of `ceil(rate * eligible)` positions:
//! the budget is deterministic, only the placement and the per-position
//! choices are random. All randomness flows through the caller's seeded
//! generator, and pool construction derives an independent per-row seed so
//! row order never matters.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::TextRecord;
use crate::{fnv1a64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Homoglyph = 0,
    Whitespace = 1,
    Typo = 2,
    Synonym = 3,
    ZeroWidth = 4,
    CaseFlip = 5,
    DigitPerturb = 6,
}

/// Kinds the trainer may draw for the augmented view.
pub const TRAIN_KINDS: [AttackKind; 4] = [
    AttackKind::Homoglyph,
    AttackKind::Whitespace,
    AttackKind::Typo,
    AttackKind::Synonym,
];

/// The six-attack evaluation suite; three of these never appear in training
/// augmentation.
pub const EVAL_KINDS: [AttackKind; 6] = [
    AttackKind::Homoglyph,
    AttackKind::Whitespace,
    AttackKind::Synonym,
    AttackKind::ZeroWidth,
    AttackKind::CaseFlip,
    AttackKind::DigitPerturb,
];

pub const ALL_KINDS: [AttackKind; 7] = [
    AttackKind::Homoglyph,
    AttackKind::Whitespace,
    AttackKind::Typo,
    AttackKind::Synonym,
    AttackKind::ZeroWidth,
    AttackKind::CaseFlip,
    AttackKind::DigitPerturb,
];

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Homoglyph => "homoglyph",
            AttackKind::Whitespace => "whitespace",
            AttackKind::Typo => "typo",
            AttackKind::Synonym => "synonym",
            AttackKind::ZeroWidth => "zero_width",
            AttackKind::CaseFlip => "case_flip",
            AttackKind::DigitPerturb => "digit_perturb",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or(Error::UnknownLabel {
                kind: "attack",
                label: name.to_string(),
            })
    }
}

pub type SynonymLexicon = HashMap<String, Vec<String>>;
pub type HomoglyphMap = HashMap<char, Vec<char>>;

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Fraction of eligible positions perturbed, in [0, 1].
    pub rate: f64,
    /// Required for [`AttackKind::Synonym`]; keys and values lowercase.
    pub synonym_lexicon: Option<SynonymLexicon>,
    pub seed: u64,
    /// Extra confusable entries merged over the built-in table.
    pub homoglyph_extra: Option<HomoglyphMap>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            rate: 0.05,
            synonym_lexicon: None,
            seed: 0,
            homoglyph_extra: None,
        }
    }
}

impl AttackConfig {
    pub fn with_builtin_lexicon(mut self) -> Self {
        self.synonym_lexicon = Some(builtin_lexicon());
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument {
                op: "AttackConfig",
                detail: format!("rate {} outside [0, 1]", self.rate),
            });
        }
        Ok(())
    }
}

/// Exact perturbation budget: `ceil(rate x eligible)` with float-artifact
/// snapping. The ranking loss reuses the same arithmetic for its hard-negative
/// count.
pub(crate) fn budget(rate: f64, eligible: usize) -> usize {
    crate::ceil_with_snap(rate * eligible as f64)
}

/// Draw `n` distinct positions, returned sorted ascending so later per-position
/// random choices consume the generator in a canonical order.
fn pick_positions<R: Rng>(eligible: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = eligible.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, n);
    let mut out = chosen.to_vec();
    out.sort_unstable();
    out
}

/// Apply one attack kind. The input is untouched; the returned string differs
/// from it in exactly `ceil(rate * eligible)` eligible positions.
pub fn apply<R: Rng>(
    kind: AttackKind,
    text: &str,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<String> {
    cfg.validate()?;
    match kind {
        AttackKind::Homoglyph => Ok(homoglyph_attack(text, cfg, rng)),
        AttackKind::Whitespace => Ok(whitespace_attack(text, cfg.rate, rng)),
        AttackKind::Typo => Ok(typo_attack(text, cfg.rate, rng)),
        AttackKind::Synonym => synonym_attack(text, cfg, rng),
        AttackKind::ZeroWidth => Ok(zero_width_attack(text, cfg.rate, rng)),
        AttackKind::CaseFlip => Ok(case_flip_attack(text, cfg.rate, rng)),
        AttackKind::DigitPerturb => Ok(digit_perturb_attack(text, cfg.rate, rng)),
    }
}

fn homoglyph_attack<R: Rng>(text: &str, cfg: &AttackConfig, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let lookup = |c: char| -> Option<Vec<char>> {
        if let Some(extra) = &cfg.homoglyph_extra {
            if let Some(alts) = extra.get(&c) {
                return Some(alts.clone());
            }
        }
        let builtin = homoglyph_alternatives(c);
        if builtin.is_empty() {
            None
        } else {
            Some(builtin.to_vec())
        }
    };
    let eligible: Vec<usize> = (0..chars.len())
        .filter(|&i| lookup(chars[i]).is_some())
        .collect();
    let selected = pick_positions(&eligible, budget(cfg.rate, eligible.len()), rng);
    let mut out = chars;
    for &i in &selected {
        let alts = lookup(out[i]).unwrap();
        out[i] = alts[rng.gen_range(0..alts.len())];
    }
    out.into_iter().collect()
}

fn whitespace_attack<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] == ' ').collect();
    let selected = pick_positions(&eligible, budget(rate, eligible.len()), rng);
    // Decide double-vs-drop in ascending order, then edit from the end so
    // earlier indices stay valid.
    let doubled: Vec<bool> = selected.iter().map(|_| rng.gen_bool(0.5)).collect();
    let mut out = chars;
    for (&i, &dbl) in selected.iter().zip(&doubled).rev() {
        if dbl {
            out.insert(i, ' ');
        } else {
            out.remove(i);
        }
    }
    out.into_iter().collect()
}

fn typo_attack<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len())
        .filter(|&i| chars[i].is_ascii_alphabetic())
        .collect();
    let selected = pick_positions(&eligible, budget(rate, eligible.len()), rng);
    let taken: std::collections::HashSet<usize> = selected.iter().copied().collect();

    enum Edit {
        Sub(char),
        Del,
        Swap,
    }
    let mut edits: Vec<(usize, Edit)> = Vec::with_capacity(selected.len());
    for &i in &selected {
        let op = rng.gen_range(0..3u8);
        let edit = match op {
            0 => Edit::Sub(random_neighbor(chars[i], rng)),
            1 => Edit::Del,
            _ => {
                // Transposition needs a distinct, unselected right neighbor;
                // otherwise it could be a no-op or collide with another edit.
                if i + 1 < chars.len() && chars[i + 1] != chars[i] && !taken.contains(&(i + 1)) {
                    Edit::Swap
                } else {
                    Edit::Sub(random_neighbor(chars[i], rng))
                }
            }
        };
        edits.push((i, edit));
    }
    let mut out = chars;
    for (i, edit) in edits.into_iter().rev() {
        match edit {
            Edit::Sub(c) => out[i] = c,
            Edit::Del => {
                out.remove(i);
            }
            Edit::Swap => out.swap(i, i + 1),
        }
    }
    out.into_iter().collect()
}

/// Adjacent-QWERTY-key substitute for an ASCII letter, case preserved.
/// Always differs from the input (no key neighbors itself).
fn random_neighbor<R: Rng>(c: char, rng: &mut R) -> char {
    let lower = c.to_ascii_lowercase();
    let neighbors = qwerty_neighbors(lower);
    debug_assert!(!neighbors.is_empty());
    let pick = neighbors[rng.gen_range(0..neighbors.len())] as char;
    if c.is_ascii_uppercase() {
        pick.to_ascii_uppercase()
    } else {
        pick
    }
}

fn synonym_attack<R: Rng>(text: &str, cfg: &AttackConfig, rng: &mut R) -> Result<String> {
    let lexicon = cfg.synonym_lexicon.as_ref().ok_or(Error::MissingLexicon)?;

    // Segment into alternating word / non-word spans, words being maximal
    // alphabetic runs.
    #[derive(Debug)]
    enum Span {
        Word(String),
        Gap(String),
    }
    let mut spans: Vec<Span> = Vec::new();
    for ch in text.chars() {
        let is_word = ch.is_alphabetic();
        match spans.last_mut() {
            Some(Span::Word(w)) if is_word => w.push(ch),
            Some(Span::Gap(g)) if !is_word => g.push(ch),
            _ => spans.push(if is_word {
                Span::Word(ch.to_string())
            } else {
                Span::Gap(ch.to_string())
            }),
        }
    }

    let word_indices: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Span::Word(w) => lexicon
                .get(&w.to_lowercase())
                .filter(|alts| !alts.is_empty())
                .map(|_| i),
            Span::Gap(_) => None,
        })
        .collect();
    let selected = pick_positions(&word_indices, budget(cfg.rate, word_indices.len()), rng);
    for &i in &selected {
        let Span::Word(w) = &spans[i] else { unreachable!() };
        let alts = &lexicon[&w.to_lowercase()];
        let mut replacement = alts[rng.gen_range(0..alts.len())].clone();
        if w.chars().next().is_some_and(|c| c.is_uppercase()) {
            let mut cs = replacement.chars();
            if let Some(first) = cs.next() {
                replacement = first.to_uppercase().collect::<String>() + cs.as_str();
            }
        }
        spans[i] = Span::Word(replacement);
    }

    Ok(spans
        .into_iter()
        .map(|s| match s {
            Span::Word(w) => w,
            Span::Gap(g) => g,
        })
        .collect())
}

const ZWSP: char = '\u{200B}';

fn zero_width_attack<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    // Gap i sits between chars[i] and chars[i+1].
    let eligible: Vec<usize> = if chars.len() >= 2 {
        (0..chars.len() - 1).collect()
    } else {
        Vec::new()
    };
    let selected = pick_positions(&eligible, budget(rate, eligible.len()), rng);
    let mut out = chars;
    for &i in selected.iter().rev() {
        out.insert(i + 1, ZWSP);
    }
    out.into_iter().collect()
}

fn flip_case(c: char) -> Option<char> {
    let flipped: Vec<char> = if c.is_lowercase() {
        c.to_uppercase().collect()
    } else if c.is_uppercase() {
        c.to_lowercase().collect()
    } else {
        return None;
    };
    match flipped.as_slice() {
        [f] if *f != c => Some(*f),
        _ => None,
    }
}

fn case_flip_attack<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len())
        .filter(|&i| flip_case(chars[i]).is_some())
        .collect();
    let selected = pick_positions(&eligible, budget(rate, eligible.len()), rng);
    let mut out = chars;
    for &i in &selected {
        out[i] = flip_case(out[i]).unwrap();
    }
    out.into_iter().collect()
}

fn digit_perturb_attack<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len())
        .filter(|&i| chars[i].is_ascii_digit())
        .collect();
    let selected = pick_positions(&eligible, budget(rate, eligible.len()), rng);
    let mut out = chars;
    for &i in &selected {
        let d = out[i].to_digit(10).unwrap() as i32;
        // Offsets whose clamped result actually changes the digit; every
        // digit keeps at least two choices.
        let valid: Vec<i32> = [-2, -1, 1, 2]
            .into_iter()
            .filter(|off| (d + off).clamp(0, 9) != d)
            .collect();
        let off = valid[rng.gen_range(0..valid.len())];
        let nd = (d + off).clamp(0, 9) as u32;
        out[i] = char::from_digit(nd, 10).unwrap();
    }
    out.into_iter().collect()
}

/// The two training views of a row.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub clean: String,
    pub attacked: String,
    pub applied: Option<AttackKind>,
}

/// With probability `p`, perturb with one of the four train-time kinds chosen
/// uniformly; otherwise the attacked view equals the clean one. The draw never
/// looks at the row's labels.
pub fn augment_view<R: Rng>(
    text: &str,
    p: f64,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AugmentedView> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument {
            op: "augment_view",
            detail: format!("p {p} outside [0, 1]"),
        });
    }
    let augment = rng.gen::<f64>() < p;
    if !augment {
        return Ok(AugmentedView {
            clean: text.to_string(),
            attacked: text.to_string(),
            applied: None,
        });
    }
    let kind = TRAIN_KINDS[rng.gen_range(0..TRAIN_KINDS.len())];
    let attacked = apply(kind, text, cfg, rng)?;
    Ok(AugmentedView {
        clean: text.to_string(),
        attacked,
        applied: Some(kind),
    })
}

/// Cross every row with every kind. Output ids are `"<row id>::<kind name>"`
/// and `atk_label` is set to the kind's class index. Rows are processed in
/// parallel with per-row seeds derived as
/// `cfg.seed XOR hash(row id) XOR hash(kind name)`, so output is identical
/// regardless of scheduling.
pub fn build_attacked_pool(
    rows: &[TextRecord],
    kinds: &[AttackKind],
    cfg: &AttackConfig,
) -> Result<Vec<TextRecord>> {
    cfg.validate()?;
    let per_row: Vec<Vec<TextRecord>> = rows
        .par_iter()
        .map(|row| {
            kinds
                .iter()
                .map(|&kind| {
                    let seed =
                        cfg.seed ^ fnv1a64(row.id.as_bytes()) ^ fnv1a64(kind.name().as_bytes());
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let attacked = apply(kind, &row.text, cfg, &mut rng)?;
                    Ok(TextRecord {
                        id: format!("{}::{}", row.id, kind.name()),
                        text: attacked,
                        main_label: row.main_label,
                        gen_label: row.gen_label,
                        atk_label: Some(kind as usize),
                        dom_label: row.dom_label,
                        source: row.source.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_row.into_iter().flatten().collect())
}

/// Load a synonym lexicon from TSV lines `word<TAB>syn1,syn2,...`.
/// Keys and synonyms are lowercased; self-references are dropped.
pub fn load_lexicon_tsv(path: impl AsRef<Path>) -> Result<SynonymLexicon> {
    let path = path.as_ref();
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_lexicon_tsv(&raw)
}

pub fn parse_lexicon_tsv(raw: &str) -> Result<SynonymLexicon> {
    let mut out = SynonymLexicon::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((word, rest)) = line.split_once('\t') else {
            return Err(Error::InvalidArgument {
                op: "lexicon",
                detail: format!("line {}: expected word<TAB>synonyms", i + 1),
            });
        };
        let word = word.trim().to_lowercase();
        let syns: Vec<String> = rest
            .split(',')
            .map(|s| s.trim().to_lowercase())
            .filter(|s| !s.is_empty() && *s != word)
            .collect();
        if word.is_empty() || syns.is_empty() {
            return Err(Error::InvalidArgument {
                op: "lexicon",
                detail: format!("line {}: no usable synonyms", i + 1),
            });
        }
        out.insert(word, syns);
    }
    Ok(out)
}

/// Load extra homoglyph entries from JSON `{"a": ["а", "α"], ...}`.
pub fn load_homoglyph_json(path: impl AsRef<Path>) -> Result<HomoglyphMap> {
    let path = path.as_ref();
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parsed: HashMap<String, Vec<String>> = serde_json::from_str(&raw)?;
    let mut out = HomoglyphMap::new();
    for (k, vals) in parsed {
        let mut kc = k.chars();
        let (Some(key), None) = (kc.next(), kc.next()) else {
            return Err(Error::InvalidArgument {
                op: "homoglyph_map",
                detail: format!("key {k:?} is not a single character"),
            });
        };
        let mut alts = Vec::new();
        for v in vals {
            let mut vc = v.chars();
            let (Some(alt), None) = (vc.next(), vc.next()) else {
                return Err(Error::InvalidArgument {
                    op: "homoglyph_map",
                    detail: format!("value {v:?} is not a single character"),
                });
            };
            if alt != key {
                alts.push(alt);
            }
        }
        if alts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "homoglyph_map",
                detail: format!("key {k:?} has no distinct alternatives"),
            });
        }
        out.insert(key, alts);
    }
    Ok(out)
}

/// Built-in Latin → Cyrillic/Greek confusables.
#[rustfmt::skip]
pub fn homoglyph_alternatives(c: char) -> &'static [char] {
    match c {
        // lowercase Latin -> Cyrillic (and Greek omicron for 'o')
        'a' => &['\u{0430}'],                 // а
        'c' => &['\u{0441}'],                 // с
        'e' => &['\u{0435}'],                 // е
        'i' => &['\u{0456}'],                 // і
        'j' => &['\u{0458}'],                 // ј
        'o' => &['\u{043E}', '\u{03BF}'],     // о, ο
        'p' => &['\u{0440}'],                 // р
        's' => &['\u{0455}'],                 // ѕ
        'x' => &['\u{0445}'],                 // х
        'y' => &['\u{0443}'],                 // у
        'v' => &['\u{03BD}'],                 // ν
        // uppercase Latin -> Cyrillic or Greek capitals
        'A' => &['\u{0410}', '\u{0391}'],     // А, Α
        'B' => &['\u{0412}', '\u{0392}'],     // В, Β
        'C' => &['\u{0421}'],                 // С
        'E' => &['\u{0415}', '\u{0395}'],     // Е, Ε
        'H' => &['\u{041D}', '\u{0397}'],     // Н, Η
        'I' => &['\u{0406}', '\u{0399}'],     // І, Ι
        'K' => &['\u{041A}', '\u{039A}'],     // К, Κ
        'M' => &['\u{041C}', '\u{039C}'],     // М, Μ
        'N' => &['\u{039D}'],                 // Ν
        'O' => &['\u{041E}', '\u{039F}'],     // О, Ο
        'P' => &['\u{0420}', '\u{03A1}'],     // Р, Ρ
        'S' => &['\u{0405}'],                 // Ѕ
        'T' => &['\u{0422}', '\u{03A4}'],     // Т, Τ
        'X' => &['\u{0425}', '\u{03A7}'],     // Х, Χ
        'Y' => &['\u{03A5}'],                 // Υ
        'Z' => &['\u{0396}'],                 // Ζ
        _ => &[],
    }
}

/// Letter neighbors on a QWERTY layout (letters only, lowercase).
#[rustfmt::skip]
fn qwerty_neighbors(c: char) -> &'static [u8] {
    match c {
        'q' => b"wa",    'w' => b"qeas",  'e' => b"wrsd",  'r' => b"etdf",
        't' => b"ryfg",  'y' => b"tugh",  'u' => b"yihj",  'i' => b"uojk",
        'o' => b"ipkl",  'p' => b"ol",
        'a' => b"qwsz",  's' => b"awedzx",'d' => b"serfxc",'f' => b"drtgcv",
        'g' => b"ftyhvb",'h' => b"gyujbn",'j' => b"huiknm",'k' => b"jiolm",
        'l' => b"kop",
        'z' => b"asx",   'x' => b"zsdc",  'c' => b"xdfv",  'v' => b"cfgb",
        'b' => b"vghn",  'n' => b"bhjm",  'm' => b"njk",
        _ => b"",
    }
}

/// Small built-in lexicon so tests and the synthetic pipeline need no files.
pub fn builtin_lexicon() -> SynonymLexicon {
    const ENTRIES: &[(&str, &str)] = &[
        ("big", "large,huge"),
        ("small", "little,tiny"),
        ("quick", "fast,rapid"),
        ("slow", "sluggish,unhurried"),
        ("happy", "glad,joyful"),
        ("sad", "unhappy,sorrowful"),
        ("begin", "start,commence"),
        ("end", "finish,conclude"),
        ("old", "ancient,aged"),
        ("new", "fresh,recent"),
        ("good", "fine,decent"),
        ("bad", "poor,awful"),
        ("smart", "clever,bright"),
        ("hard", "difficult,tough"),
        ("easy", "simple,effortless"),
        ("many", "numerous,several"),
        ("few", "scant,sparse"),
        ("important", "vital,crucial"),
        ("strange", "odd,peculiar"),
        ("common", "usual,ordinary"),
        ("beautiful", "lovely,pretty"),
        ("strong", "sturdy,powerful"),
        ("weak", "feeble,frail"),
        ("rich", "wealthy,affluent"),
        ("poor", "needy,impoverished"),
        ("cold", "chilly,frigid"),
        ("hot", "warm,scorching"),
        ("bright", "luminous,radiant"),
        ("dark", "dim,gloomy"),
        ("loud", "noisy,booming"),
        ("quiet", "silent,hushed"),
        ("true", "accurate,correct"),
        ("wrong", "incorrect,mistaken"),
        ("walk", "stroll,amble"),
        ("run", "dash,sprint"),
        ("say", "state,remark"),
        ("look", "glance,gaze"),
        ("make", "build,create"),
        ("think", "ponder,reckon"),
        ("know", "understand,grasp"),
        ("want", "desire,wish"),
        ("give", "provide,grant"),
        ("take", "grab,seize"),
        ("find", "locate,discover"),
        ("help", "assist,aid"),
        ("show", "display,reveal"),
        ("keep", "retain,hold"),
        ("turn", "rotate,pivot"),
        ("move", "shift,relocate"),
        ("place", "spot,location"),
    ];
    ENTRIES
        .iter()
        .map(|(w, syns)| {
            (
                w.to_string(),
                syns.split(',').map(str::to_string).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AI;

    const PARAGRAPH: &str = "The quick brown fox jumps over the lazy dog while 42 geese \
watch from a cold dark field and 7 old friends walk past the quiet gate to find a good \
place near the bright river where many small boats turn slowly in the warm evening light";

    fn cfg(rate: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            rate,
            seed,
            ..AttackConfig::default()
        }
        .with_builtin_lexicon()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // -- alignment oracles used by the budget tests --

    /// Optimal string alignment distance (substitution / insertion / deletion
    /// / adjacent transposition, all cost 1).
    fn osa_distance(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let (n, m) = (a.len(), b.len());
        let mut d = vec![vec![0usize; m + 1]; n + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=m {
            d[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                let mut best = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
                if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] && a[i - 1] != a[i - 2]
                {
                    best = best.min(d[i - 2][j - 2] + 1);
                }
                d[i][j] = best;
            }
        }
        d[n][m]
    }

    fn positional_char_diffs(a: &str, b: &str) -> usize {
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        assert_eq!(ac.len(), bc.len(), "length must be preserved");
        ac.iter().zip(&bc).filter(|(x, y)| x != y).count()
    }

    fn word_diffs(a: &str, b: &str) -> usize {
        let words = |s: &str| -> Vec<String> {
            let mut out = Vec::new();
            let mut cur = String::new();
            for ch in s.chars() {
                if ch.is_alphabetic() {
                    cur.push(ch);
                } else if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
            out
        };
        let (wa, wb) = (words(a), words(b));
        assert_eq!(wa.len(), wb.len(), "word count must be preserved");
        wa.iter().zip(&wb).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn case_flip_full_rate_uppercases() {
        let out = apply(AttackKind::CaseFlip, "abc", &cfg(1.0, 0), &mut rng(0)).unwrap();
        assert_eq!(out, "ABC");
    }

    #[test]
    fn digit_perturb_without_digits_is_identity() {
        let out = apply(AttackKind::DigitPerturb, "no digits here", &cfg(1.0, 0), &mut rng(0))
            .unwrap();
        assert_eq!(out, "no digits here");
    }

    #[test]
    fn homoglyph_single_char() {
        let out = apply(AttackKind::Homoglyph, "a", &cfg(1.0, 0), &mut rng(0)).unwrap();
        assert_eq!(out, "\u{0430}");
    }

    #[test]
    fn digit_perturb_never_leaves_a_digit_unchanged() {
        for seed in 0..50 {
            let out =
                apply(AttackKind::DigitPerturb, "0123456789", &cfg(1.0, 0), &mut rng(seed))
                    .unwrap();
            assert_eq!(positional_char_diffs("0123456789", &out), 10, "{out}");
            assert!(out.chars().all(|c| c.is_ascii_digit()));
        }
    }

    #[test]
    fn typo_budget_matches_alignment_distance() {
        let txt = PARAGRAPH;
        let eligible = txt.chars().filter(|c| c.is_ascii_alphabetic()).count();
        let want = (0.05f64 * eligible as f64).ceil() as usize;
        for seed in [7u64, 8, 9, 100, 2026] {
            let out = apply(AttackKind::Typo, txt, &cfg(0.05, 0), &mut rng(seed)).unwrap();
            assert_eq!(osa_distance(txt, &out), want, "seed {seed}");
        }
    }

    #[test]
    fn all_kinds_hit_exact_budgets_on_the_paragraph() {
        let c = cfg(0.08, 0);
        for seed in 0..10u64 {
            // same-length kinds: positional diff count
            for kind in [AttackKind::Homoglyph, AttackKind::CaseFlip, AttackKind::DigitPerturb] {
                let eligible = match kind {
                    AttackKind::Homoglyph => PARAGRAPH
                        .chars()
                        .filter(|&ch| !homoglyph_alternatives(ch).is_empty())
                        .count(),
                    AttackKind::CaseFlip => {
                        PARAGRAPH.chars().filter(|&ch| flip_case(ch).is_some()).count()
                    }
                    _ => PARAGRAPH.chars().filter(|ch| ch.is_ascii_digit()).count(),
                };
                let want = (0.08f64 * eligible as f64).ceil() as usize;
                let out = apply(kind, PARAGRAPH, &c, &mut rng(seed)).unwrap();
                assert_eq!(positional_char_diffs(PARAGRAPH, &out), want, "{kind:?}");
            }
            // length-changing kinds: alignment distance
            for kind in [AttackKind::Whitespace, AttackKind::Typo] {
                let eligible = match kind {
                    AttackKind::Whitespace => PARAGRAPH.chars().filter(|&ch| ch == ' ').count(),
                    _ => PARAGRAPH.chars().filter(|ch| ch.is_ascii_alphabetic()).count(),
                };
                let want = (0.08f64 * eligible as f64).ceil() as usize;
                let out = apply(kind, PARAGRAPH, &c, &mut rng(seed)).unwrap();
                assert_eq!(osa_distance(PARAGRAPH, &out), want, "{kind:?} seed {seed}");
            }
            // zero-width: count insertions, text otherwise intact
            {
                let gaps = PARAGRAPH.chars().count() - 1;
                let want = (0.08f64 * gaps as f64).ceil() as usize;
                let out = apply(AttackKind::ZeroWidth, PARAGRAPH, &c, &mut rng(seed)).unwrap();
                let zw = out.chars().filter(|&ch| ch == ZWSP).count();
                assert_eq!(zw, want);
                let stripped: String = out.chars().filter(|&ch| ch != ZWSP).collect();
                assert_eq!(stripped, PARAGRAPH);
            }
            // synonym: word-position diffs
            {
                let lex = builtin_lexicon();
                let eligible = PARAGRAPH
                    .split_whitespace()
                    .map(|w| w.trim_matches(|ch: char| !ch.is_alphabetic()))
                    .filter(|w| lex.contains_key(&w.to_lowercase()))
                    .count();
                let want = (0.08f64 * eligible as f64).ceil() as usize;
                let out = apply(AttackKind::Synonym, PARAGRAPH, &c, &mut rng(seed)).unwrap();
                assert_eq!(word_diffs(PARAGRAPH, &out), want, "seed {seed}");
            }
        }
    }

    #[test]
    fn snapped_budget_avoids_float_ceil_artifacts() {
        // 0.05 * 20 is 1.0000000000000002 in f64; the budget must be 1.
        assert_eq!(budget(0.05, 20), 1);
        assert_eq!(budget(0.05, 21), 2);
        assert_eq!(budget(0.0, 100), 0);
        assert_eq!(budget(1.0, 3), 3);
    }

    #[test]
    fn synonym_without_lexicon_errors() {
        let c = AttackConfig::default();
        let err = apply(AttackKind::Synonym, "big dog", &c, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::MissingLexicon));
    }

    #[test]
    fn synonym_preserves_leading_capitalization() {
        let mut lex = SynonymLexicon::new();
        lex.insert("big".into(), vec!["large".into()]);
        let c = AttackConfig {
            rate: 1.0,
            synonym_lexicon: Some(lex),
            ..AttackConfig::default()
        };
        let out = apply(AttackKind::Synonym, "Big dogs bark big", &c, &mut rng(0)).unwrap();
        assert_eq!(out, "Large dogs bark large");
    }

    #[test]
    fn augment_view_p_zero_is_identity() {
        let v = augment_view(PARAGRAPH, 0.0, &cfg(0.05, 0), &mut rng(0)).unwrap();
        assert_eq!(v.clean, PARAGRAPH);
        assert_eq!(v.attacked, PARAGRAPH);
        assert!(v.applied.is_none());
    }

    #[test]
    fn augment_view_forced_always_perturbs() {
        for seed in 0..20 {
            let v = augment_view(PARAGRAPH, 1.0, &cfg(0.05, 0), &mut rng(seed)).unwrap();
            assert_eq!(v.clean, PARAGRAPH);
            assert_ne!(v.attacked, v.clean, "seed {seed}");
            assert!(TRAIN_KINDS.contains(&v.applied.unwrap()));
        }
    }

    #[test]
    fn apply_is_deterministic_per_seed() {
        let c = cfg(0.1, 0);
        for kind in ALL_KINDS {
            let a = apply(kind, PARAGRAPH, &c, &mut rng(42)).unwrap();
            let b = apply(kind, PARAGRAPH, &c, &mut rng(42)).unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
    }

    fn ai_row(id: &str, text: &str) -> TextRecord {
        TextRecord {
            id: id.into(),
            text: text.into(),
            main_label: AI,
            gen_label: Some(0),
            atk_label: None,
            dom_label: Some(0),
            source: "synth".into(),
        }
    }

    #[test]
    fn pool_crosses_rows_with_kinds() {
        let rows = vec![ai_row("r1", PARAGRAPH), ai_row("r2", PARAGRAPH)];
        let pool = build_attacked_pool(&rows, &EVAL_KINDS, &cfg(0.05, 1)).unwrap();
        assert_eq!(pool.len(), 12);
        assert_eq!(pool[0].id, "r1::homoglyph");
        assert_eq!(pool[0].atk_label, Some(AttackKind::Homoglyph as usize));
        assert_eq!(pool[7].id, "r2::whitespace");
        // provenance: gen/dom labels carried over
        assert_eq!(pool[0].gen_label, Some(0));
    }

    #[test]
    fn pool_single_row_single_kind() {
        let rows = vec![ai_row("only", "42 fish")];
        let pool =
            build_attacked_pool(&rows, &[AttackKind::DigitPerturb], &cfg(1.0, 5)).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool[0].id, "only::digit_perturb");
        assert_ne!(pool[0].text, "42 fish");
    }

    #[test]
    fn pool_empty_kinds_is_empty() {
        let rows = vec![ai_row("r", PARAGRAPH)];
        let pool = build_attacked_pool(&rows, &[], &cfg(0.05, 0)).unwrap();
        assert!(pool.is_empty());
    }

    #[test]
    fn pool_output_is_order_independent() {
        let rows: Vec<TextRecord> = (0..8)
            .map(|i| ai_row(&format!("row{i}"), PARAGRAPH))
            .collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let c = cfg(0.07, 99);
        let a = build_attacked_pool(&rows, &EVAL_KINDS, &c).unwrap();
        let b = build_attacked_pool(&reversed, &EVAL_KINDS, &c).unwrap();
        // same (id -> text) mapping regardless of input order
        let map_a: HashMap<&str, &str> =
            a.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
        for r in &b {
            assert_eq!(map_a[r.id.as_str()], r.text.as_str());
        }
    }

    #[test]
    fn lexicon_tsv_parses_and_sanitizes() {
        let lex = parse_lexicon_tsv("big\tlarge, huge\nodd\tODD,strange\n").unwrap();
        assert_eq!(lex["big"], vec!["large", "huge"]);
        // self-reference dropped, remainder lowercased
        assert_eq!(lex["odd"], vec!["strange"]);
        assert!(parse_lexicon_tsv("broken line no tab\n").is_err());
        assert!(parse_lexicon_tsv("word\tword\n").is_err());
    }

    #[test]
    fn homoglyph_json_extends_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        std::fs::write(&p, "{\"q\": [\"\\u0051\"]}").unwrap();
        let extra = load_homoglyph_json(&p).unwrap();
        let c = AttackConfig {
            rate: 1.0,
            homoglyph_extra: Some(extra),
            ..AttackConfig::default()
        };
        let out = apply(AttackKind::Homoglyph, "q", &c, &mut rng(0)).unwrap();
        assert_eq!(out, "Q");
    }
}
