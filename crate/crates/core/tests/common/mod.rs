//! Helpers shared by the integration tests: bundled data, a from-scratch
//! SQuAD scorer, rule predicates written against raw strings, and random
//! fixtures.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;

use mrcpref::corpus::{load_corpus, Answer, Corpus, QaRecord, Split};
use mrcpref::pairs::{PreferencePair, Rule, Source};
use mrcpref::pipeline::PipelineConfig;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub struct Bundled {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

pub fn bundled() -> Bundled {
    let dir = workspace_root().join("data/synthetic");
    Bundled {
        train: load_corpus(&dir.join("train.json")).unwrap(),
        dev: load_corpus(&dir.join("dev.json")).unwrap(),
        test: load_corpus(&dir.join("test.json")).unwrap(),
    }
}

/// The shipped toy config with absolute corpus paths and the given seed and workdir.
pub fn toy_config(seed: u64, workdir: &Path) -> PipelineConfig {
    let root = workspace_root();
    let mut cfg = PipelineConfig::load(&root.join("configs/toy.toml")).unwrap();
    cfg.seed = seed;
    cfg.paths.train = root.join(&cfg.paths.train);
    cfg.paths.dev = root.join(&cfg.paths.dev);
    cfg.paths.test = root.join(&cfg.paths.test);
    cfg.paths.workdir = workdir.to_path_buf();
    cfg
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---- reference scorer ----

/// Every punctuation character the fixtures below can emit.
pub const PUNCT_CHARS: &[char] = &[
    '!', '"', '#', '%', '&', '\'', '(', ')', '*', ',', '-', '.', '/', ':', ';', '?', '@', '[', '\\', ']', '_', '{',
    '}', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}', '\u{2013}', '\u{2014}', '\u{2026}', '\u{00AB}', '\u{00BB}',
    '\u{00BF}', '\u{00A1}',
];

/// Symbols that are not punctuation and must survive normalization.
pub const SYMBOL_CHARS: &[char] = &['$', '+', '<', '=', '>', '^', '|', '~', '\u{00B0}'];

pub fn ref_tokens(s: &str) -> Vec<String> {
    let lowered: String = s.chars().flat_map(char::to_lowercase).collect();
    let kept: String = lowered.chars().filter(|c| !PUNCT_CHARS.contains(c)).collect();
    kept.split(char::is_whitespace)
        .filter(|t| !t.is_empty())
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

pub fn ref_em(pred: &str, gold: &str) -> bool {
    ref_tokens(pred) == ref_tokens(gold)
}

pub fn ref_f1(pred: &str, gold: &str) -> f64 {
    let mut p = ref_tokens(pred);
    let mut g = ref_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    p.sort();
    g.sort();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

const WORDS: &[&str] = &[
    "the", "The", "THE", "a", "A", "an", "An", "theme", "another", "left", "Left", "lobe", "nodule", "cm", "2.3",
    "Pleural", "effusion", "no", "x", "caf\u{00E9}", "\u{00C9}TAT", "lobe's", "well-defined", "apple",
];

fn random_text(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str([" ", "  ", "\t", " \u{00A0}"].choose(rng).unwrap());
        }
        if rng.random_bool(0.15) {
            out.push(*PUNCT_CHARS.choose(rng).unwrap());
        }
        out.push_str(WORDS.choose(rng).unwrap());
        if rng.random_bool(0.2) {
            out.push(*PUNCT_CHARS.choose(rng).unwrap());
        }
        if rng.random_bool(0.05) {
            out.push(*SYMBOL_CHARS.choose(rng).unwrap());
        }
    }
    out
}

/// `n` records with 0..=3 golds each, and predictions biased toward
/// near-misses of the golds.
pub fn random_scoring_case(rng: &mut impl Rng, n: usize) -> (Corpus, HashMap<String, String>) {
    let mut records = Vec::with_capacity(n);
    let mut predictions = HashMap::new();
    for i in 0..n {
        let id = format!("q{i:03}");
        let n_golds = [0, 1, 1, 2, 3].choose(rng).copied().unwrap();
        let mut golds = Vec::new();
        while golds.len() < n_golds {
            let g = random_text(rng, 5);
            if !g.is_empty() {
                golds.push(g);
            }
        }
        let mut context = random_text(rng, 6);
        let mut answers = Vec::new();
        for g in &golds {
            context.push_str(" | ");
            answers.push(Answer {
                text: g.clone(),
                answer_start: context.chars().count(),
            });
            context.push_str(g);
        }
        let prediction = match rng.random_range(0..5) {
            0 => String::new(),
            1 if !golds.is_empty() => golds.choose(rng).unwrap().to_uppercase(),
            2 if !golds.is_empty() => {
                let g = golds.choose(rng).unwrap();
                let words: Vec<&str> = g.split_whitespace().collect();
                let k = rng.random_range(0..=words.len());
                format!("{} {}", words[..k].join(" "), random_text(rng, 2))
            }
            _ => random_text(rng, 5),
        };
        predictions.insert(id.clone(), prediction);
        records.push(QaRecord {
            id,
            context,
            question: random_text(rng, 4),
            is_answerable: !answers.is_empty(),
            gold_answers: answers,
        });
    }
    (Corpus::new(records, Split::Dev).unwrap(), predictions)
}

/// Corpus-level EM and F1 (percent) plus per-question scores, in id order.
pub fn ref_evaluate(corpus: &Corpus, predictions: &HashMap<String, String>) -> (f64, f64, Vec<(String, bool, f64)>) {
    let mut rows: Vec<(String, bool, f64)> = corpus
        .records
        .iter()
        .map(|r| {
            let pred = &predictions[&r.id];
            let golds: Vec<&str> = if r.gold_answers.is_empty() {
                vec![""]
            } else {
                r.gold_answers.iter().map(|a| a.text.as_str()).collect()
            };
            let em = golds.iter().any(|g| ref_em(pred, g));
            let f1 = golds.iter().map(|g| ref_f1(pred, g)).fold(0.0, f64::max);
            (r.id.clone(), em, f1)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let n = rows.len() as f64;
    let em = rows.iter().filter(|r| r.1).count() as f64 / n * 100.0;
    let f1 = rows.iter().map(|r| r.2).sum::<f64>() / n * 100.0;
    (em, f1, rows)
}

// ---- rule predicates ----

fn occurrences(context: &str, text: &str) -> Vec<(usize, usize)> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = context[from..].find(text) {
        let s = from + i;
        out.push((s, s + text.len()));
        from = s + context[s..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

fn gold_ranges(r: &QaRecord) -> Vec<(usize, usize)> {
    r.gold_answers
        .iter()
        .filter_map(|a| r.answer_bytes(a))
        .map(|b| (b.start, b.end))
        .collect()
}

fn words(s: &str) -> Vec<String> {
    ref_tokens(s)
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Check a rule-forged pair against the defining predicate of its rule.
/// `siblings` are the other records sharing the pair's context.
pub fn rule_predicate(record: &QaRecord, siblings: &[&QaRecord], pair: &PreferencePair) -> Result<(), String> {
    let Source::Rule(rule) = &pair.source else {
        return Err("not rule-forged".into());
    };
    let fail = |why: &str| Err(format!("{}: {why} (rejected {:?}, gold {:?})", rule.name(), pair.rejected, pair.chosen));
    if ref_em(&pair.rejected, &pair.chosen) {
        return fail("rejected equals chosen after normalization");
    }
    let golds = gold_ranges(record);
    let occ = occurrences(&record.context, &pair.rejected);
    let first = golds.first().copied();
    match rule {
        Rule::RandomSpan => {
            let disjoint = occ.iter().any(|&(s, e)| golds.iter().all(|&(gs, ge)| e <= gs || s >= ge));
            if !disjoint {
                return fail("no occurrence disjoint from every gold");
            }
        }
        Rule::PartialOverlapLeft => {
            let Some((gs, ge)) = first else { return fail("no gold") };
            if !occ.iter().any(|&(s, e)| s < gs && e > gs && e < ge) {
                return fail("no occurrence entering the gold from the left");
            }
        }
        Rule::PartialOverlapRight => {
            let Some((gs, ge)) = first else { return fail("no gold") };
            if !occ.iter().any(|&(s, e)| s > gs && s < ge && e > ge) {
                return fail("no occurrence leaving the gold on the right");
            }
        }
        Rule::LongerAnswer => {
            let Some((gs, ge)) = first else { return fail("no gold") };
            if !(pair.rejected.contains(&pair.chosen) && pair.rejected.len() > pair.chosen.len()) {
                return fail("does not strictly contain the gold");
            }
            if !occ.iter().any(|&(s, e)| s <= gs && e >= ge) {
                return fail("no occurrence covering the gold");
            }
        }
        Rule::PartialAnswer => {
            if pair.rejected.is_empty() || pair.rejected == pair.chosen || !pair.chosen.contains(&pair.rejected) {
                return fail("not a strict sub-span of the gold");
            }
        }
        Rule::OtherQuestionAnswer => {
            let from_sibling = siblings
                .iter()
                .any(|s| s.id != record.id && s.gold_answers.iter().any(|a| a.text == pair.rejected));
            if !from_sibling {
                return fail("not a sibling answer");
            }
            let (c, g) = (words(&pair.rejected), words(&pair.chosen));
            if c.is_empty() || contains_seq(&g, &c) || contains_seq(&c, &g) {
                return fail("overlaps the gold");
            }
        }
        Rule::NoAnswer => {
            if record.is_answerable {
                if !pair.rejected.is_empty() {
                    return fail("answerable record must reject the empty string");
                }
            } else if pair.rejected.is_empty() || occ.is_empty() {
                return fail("unanswerable record must reject a context span");
            }
        }
    }
    Ok(())
}

/// Records grouped by context, for sibling lookups.
pub fn siblings_by_context(corpus: &Corpus) -> HashMap<&str, Vec<&QaRecord>> {
    let mut map: HashMap<&str, Vec<&QaRecord>> = HashMap::new();
    for r in &corpus.records {
        map.entry(r.context.as_str()).or_default().push(r);
    }
    map
}

// ---- random corpora ----

const REPORT_WORDS: &[&str] = &[
    "small", "left", "right", "lower", "lobe", "nodule", "effusion", "no", "is", "seen", "the", "a", "stable", "mass",
    "2.1", "cm", "liver", "kidney", "normal", "finding:", "with", "and", ".", ",",
];

fn report_text(rng: &mut impl Rng, words: usize) -> String {
    (0..words)
        .map(|_| *REPORT_WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A corpus of `contexts` random reports with 1..=3 questions each; about a
/// quarter unanswerable, the rest answered by a random token span.
pub fn random_corpus(rng: &mut impl Rng, contexts: usize) -> Corpus {
    let mut records = Vec::new();
    for c in 0..contexts {
        let n_words = rng.random_range(4..16);
        let context = report_text(rng, n_words);
        let tokens: Vec<(usize, &str)> = context
            .split(' ')
            .scan(0, |pos, w| {
                let start = *pos;
                *pos += w.len() + 1;
                Some((start, w))
            })
            .collect();
        for q in 0..rng.random_range(1..=3) {
            let answerable = rng.random_bool(0.75);
            let gold_answers = if answerable {
                let a = rng.random_range(0..tokens.len());
                let b = rng.random_range(a..tokens.len().min(a + 4));
                let start = tokens[a].0;
                let end = tokens[b].0 + tokens[b].1.len();
                vec![Answer {
                    text: context[start..end].to_string(),
                    answer_start: start,
                }]
            } else {
                Vec::new()
            };
            records.push(QaRecord {
                id: format!("c{c:02}q{q}"),
                context: context.clone(),
                question: format!("what {} ?", report_text(rng, 2)),
                is_answerable: answerable,
                gold_answers,
            });
        }
    }
    Corpus::new(records, Split::Train).unwrap()
}
