//! Rule-based negatives: corrupt each gold tuple into plausible wrong answers.
//!
//! Every span-producing rule works on whitespace tokens of the raw context,
//! so a rejected answer is always a reproducible substring of the context.
//! Rules whose preconditions fail for a record are skipped; the record then
//! contributes fewer candidates.

use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, Corpus, QaRecord};
use crate::hashing::sub_seed;
use crate::metrics::{normalize, token_f1};
use crate::pairs::{dedup_pairs, sort_pairs, PreferencePair, Rule, Source};
use crate::text::{covering_tokens, span_text, whitespace_tokens, Token};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("rule {} not applicable: {reason}", rule.name())]
pub struct RuleError {
    pub rule: Rule,
    pub reason: &'static str,
}

fn inapplicable(rule: Rule, reason: &'static str) -> RuleError {
    RuleError { rule, reason }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub negatives_per_tuple: usize,
    pub max_random_span_tokens: usize,
    pub max_extension_tokens: usize,
    pub global_cap: usize,
    pub seed: u64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            negatives_per_tuple: 2,
            max_random_span_tokens: 12,
            max_extension_tokens: 5,
            global_cap: 4000,
            seed: 0,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.negatives_per_tuple == 0
            || self.max_random_span_tokens == 0
            || self.max_extension_tokens == 0
            || self.global_cap == 0
        {
            return Err("rule forge bounds must all be positive".into());
        }
        Ok(())
    }
}

/// Token geometry of a record: context tokens and where the first gold sits.
struct Layout<'a> {
    record: &'a QaRecord,
    tokens: Vec<Token>,
    gold_bytes: Vec<Range<usize>>,
    /// Inclusive token range covering the first gold answer.
    gold_tokens: Option<(usize, usize)>,
}

impl<'a> Layout<'a> {
    fn new(record: &'a QaRecord) -> Self {
        let tokens = whitespace_tokens(&record.context);
        let gold_bytes: Vec<_> = record
            .gold_answers
            .iter()
            .filter_map(|a| record.answer_bytes(a))
            .collect();
        let gold_tokens = gold_bytes.first().and_then(|b| covering_tokens(&tokens, b));
        Layout {
            record,
            tokens,
            gold_bytes,
            gold_tokens,
        }
    }

    fn span(&self, first: usize, last: usize) -> String {
        span_text(&self.record.context, &self.tokens, first, last).to_string()
    }

    fn outside_gold(&self, i: usize) -> bool {
        !self.gold_bytes.iter().any(|g| self.tokens[i].overlaps(g))
    }

    /// Token-aligned occurrences `(first, last)` of `text` in the context.
    fn occurrences(&self, text: &str) -> Vec<(usize, usize)> {
        let ctx = &self.record.context;
        let mut out = Vec::new();
        for (a, tok) in self.tokens.iter().enumerate() {
            if !ctx[tok.start..].starts_with(text) || text.is_empty() {
                continue;
            }
            let end = tok.start + text.len();
            if let Some(b) = self.tokens[a..].iter().position(|t| t.end == end) {
                out.push((a, a + b));
            }
        }
        out
    }
}

fn random_span_in(layout: &Layout, max_tokens: usize, rng: &mut impl Rng, eligible: impl Fn(usize) -> bool) -> Option<String> {
    let starts: Vec<usize> = (0..layout.tokens.len()).filter(|&i| eligible(i)).collect();
    if starts.is_empty() {
        return None;
    }
    let start = starts[rng.random_range(0..starts.len())];
    let mut run = 0;
    while start + run < layout.tokens.len() && run < max_tokens && eligible(start + run) {
        run += 1;
    }
    let len = rng.random_range(1..=run);
    Some(layout.span(start, start + len - 1))
}

/// A context span of 1..=max tokens that touches no gold answer.
pub fn rule_random_span(record: &QaRecord, config: &RuleConfig, rng: &mut impl Rng) -> Result<String, RuleError> {
    let layout = Layout::new(record);
    random_span_in(&layout, config.max_random_span_tokens, rng, |i| layout.outside_gold(i))
        .ok_or_else(|| inapplicable(Rule::RandomSpan, "context fully covered by gold"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// A span that crosses one gold boundary: some context words outside the
/// gold on `side`, plus a strict part of the gold.
pub fn rule_partial_overlap(record: &QaRecord, side: Side, config: &RuleConfig, rng: &mut impl Rng) -> Result<String, RuleError> {
    let rule = match side {
        Side::Left => Rule::PartialOverlapLeft,
        Side::Right => Rule::PartialOverlapRight,
    };
    let layout = Layout::new(record);
    let (gs, ge) = layout.gold_tokens.ok_or_else(|| inapplicable(rule, "no gold answer"))?;
    let gold_len = ge - gs + 1;
    if gold_len < 2 {
        return Err(inapplicable(rule, "single-token gold"));
    }
    let inside = rng.random_range(1..gold_len);
    match side {
        Side::Left => {
            if gs == 0 {
                return Err(inapplicable(rule, "gold starts the context"));
            }
            let ext = rng.random_range(1..=config.max_extension_tokens.min(gs));
            Ok(layout.span(gs - ext, gs + inside - 1))
        }
        Side::Right => {
            let after = layout.tokens.len() - 1 - ge;
            if after == 0 {
                return Err(inapplicable(rule, "gold ends the context"));
            }
            let ext = rng.random_range(1..=config.max_extension_tokens.min(after));
            Ok(layout.span(ge + 1 - inside, ge + ext))
        }
    }
}

/// The whole gold plus 1..=max extra context tokens on the left, right, or both.
pub fn rule_longer_answer(record: &QaRecord, config: &RuleConfig, rng: &mut impl Rng) -> Result<String, RuleError> {
    let layout = Layout::new(record);
    let (gs, ge) = layout
        .gold_tokens
        .ok_or_else(|| inapplicable(Rule::LongerAnswer, "no gold answer"))?;
    let before = gs;
    let after = layout.tokens.len() - 1 - ge;
    let mut modes = Vec::with_capacity(3);
    if before > 0 {
        modes.push(Side::Left);
    }
    if after > 0 {
        modes.push(Side::Right);
    }
    if modes.is_empty() {
        return Err(inapplicable(Rule::LongerAnswer, "gold spans the entire context"));
    }
    let both = modes.len() == 2;
    let pick = rng.random_range(0..modes.len() + usize::from(both));
    let max = config.max_extension_tokens;
    let (left, right) = match modes.get(pick) {
        Some(Side::Left) => (rng.random_range(1..=max.min(before)), 0),
        Some(Side::Right) => (0, rng.random_range(1..=max.min(after))),
        None => (
            rng.random_range(1..=max.min(before)),
            rng.random_range(1..=max.min(after)),
        ),
    };
    Ok(layout.span(gs - left, ge + right))
}

/// A strict contiguous token sub-span of the gold text.
pub fn rule_partial_answer(record: &QaRecord, rng: &mut impl Rng) -> Result<String, RuleError> {
    let gold = record.chosen();
    let toks = whitespace_tokens(gold);
    if toks.len() < 2 {
        return Err(inapplicable(Rule::PartialAnswer, "gold has fewer than 2 tokens"));
    }
    let gold_norm = normalize(gold);
    let n = toks.len();
    let options: Vec<String> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .filter(|&(i, j)| (i, j) != (0, n - 1))
        .map(|(i, j)| span_text(gold, &toks, i, j).to_string())
        .filter(|s| normalize(s) != gold_norm)
        .collect();
    if options.is_empty() {
        return Err(inapplicable(Rule::PartialAnswer, "every sub-span normalizes to the gold"));
    }
    Ok(options[rng.random_range(0..options.len())].clone())
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Whether `candidate` may stand as another question's answer: it must not
/// equal, sit inside, or contain the gold (compared on normalized tokens).
pub fn is_foreign_answer(candidate: &str, gold: &str) -> bool {
    let c = normalize(candidate);
    let g = normalize(gold);
    let ct: Vec<&str> = c.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    !ct.is_empty() && !contains_run(&gt, &ct) && !contains_run(&ct, &gt)
}

/// First answer of a sibling question that is unrelated to this record's gold.
pub fn rule_other_question_answer(record: &QaRecord, siblings: &[&QaRecord]) -> Option<String> {
    if !record.is_answerable {
        return None;
    }
    siblings
        .iter()
        .filter(|s| s.id != record.id)
        .flat_map(|s| s.gold_answers.iter())
        .map(|a| a.text.as_str())
        .find(|t| is_foreign_answer(t, record.chosen()))
        .map(str::to_string)
}

/// Empty string for answerable records; otherwise a sibling's answer, or a
/// random context span when no sibling has one.
pub fn rule_no_answer(record: &QaRecord, siblings: &[&QaRecord], config: &RuleConfig, rng: &mut impl Rng) -> Result<String, RuleError> {
    if record.is_answerable {
        return Ok(String::new());
    }
    let answers: Vec<&str> = siblings
        .iter()
        .filter(|s| s.id != record.id)
        .flat_map(|s| s.gold_answers.iter())
        .map(|a| a.text.as_str())
        .filter(|t| !normalize(t).is_empty())
        .collect();
    if !answers.is_empty() {
        return Ok(answers[rng.random_range(0..answers.len())].to_string());
    }
    let layout = Layout::new(record);
    random_span_in(&layout, config.max_random_span_tokens, rng, |_| true)
        .ok_or_else(|| inapplicable(Rule::NoAnswer, "context has no tokens"))
}

/// All applicable rule outputs for one record, first rule wins on text collisions.
pub fn rule_pool(record: &QaRecord, siblings: &[&QaRecord], config: &RuleConfig, rng: &mut impl Rng) -> Vec<(Rule, String)> {
    let mut pool: Vec<(Rule, String)> = Vec::new();
    let outputs = [
        (Rule::RandomSpan, rule_random_span(record, config, rng).ok()),
        (Rule::PartialOverlapLeft, rule_partial_overlap(record, Side::Left, config, rng).ok()),
        (Rule::PartialOverlapRight, rule_partial_overlap(record, Side::Right, config, rng).ok()),
        (Rule::LongerAnswer, rule_longer_answer(record, config, rng).ok()),
        (Rule::PartialAnswer, rule_partial_answer(record, rng).ok()),
        (Rule::OtherQuestionAnswer, rule_other_question_answer(record, siblings)),
        (Rule::NoAnswer, rule_no_answer(record, siblings, config, rng).ok()),
    ];
    let chosen = normalize(record.chosen());
    for (rule, text) in outputs {
        let Some(text) = text else { continue };
        if normalize(&text) == chosen || pool.iter().any(|(_, t)| *t == text) {
            continue;
        }
        pool.push((rule, text));
    }
    pool
}

fn forge_record(record: &QaRecord, siblings: &[&QaRecord], config: &RuleConfig) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &record.id));
    let pool = rule_pool(record, siblings, config, &mut rng);
    let take = config.negatives_per_tuple.min(pool.len());
    let prompt = render_prompt(record);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let (rule, rejected) = &pool[i];
            PreferencePair::new(&record.id, prompt.as_str(), record.chosen(), rejected, Source::Rule(*rule))
        })
        .collect()
}

/// Forge rule-based preference pairs for a whole corpus.
///
/// Output depends only on the corpus and config: per-record work uses a
/// sub-seed derived from the record id, and the dedup/cap/sort reduction is
/// sequential.
pub fn forge_rules(corpus: &Corpus, config: &RuleConfig) -> Vec<PreferencePair> {
    let siblings = corpus.siblings();
    let per_record: Vec<Vec<PreferencePair>> = corpus
        .records
        .par_iter()
        .zip(siblings.par_iter())
        .map(|(r, s)| forge_record(r, s, config))
        .collect();
    let mut pairs = dedup_pairs(per_record.into_iter().flatten().collect());
    if pairs.len() > config.global_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "global-cap"));
        let mut keep = index::sample(&mut rng, pairs.len(), config.global_cap).into_vec();
        keep.sort_unstable();
        let mut slots: Vec<Option<PreferencePair>> = pairs.into_iter().map(Some).collect();
        pairs = keep.into_iter().map(|i| slots[i].take().unwrap()).collect();
    }
    sort_pairs(&mut pairs);
    pairs
}

/// Re-check a rule-forged pair against its rule's defining predicate.
pub fn check_rule_pair(record: &QaRecord, siblings: &[&QaRecord], pair: &PreferencePair, config: &RuleConfig) -> Result<(), String> {
    let Source::Rule(rule) = pair.source else {
        return Err("not a rule-forged pair".into());
    };
    if pair.chosen != record.chosen() {
        return Err("chosen is not the first gold answer".into());
    }
    if pair.prompt != render_prompt(record).as_str() {
        return Err("prompt does not match record".into());
    }
    if normalize(&pair.rejected) == normalize(&pair.chosen) {
        return Err("rejected normalizes to chosen".into());
    }
    if (pair.f1_rejected_vs_gold - token_f1(&pair.rejected, &pair.chosen)).abs() > 0.0 {
        return Err("stored f1 disagrees with recomputed token f1".into());
    }
    let layout = Layout::new(record);
    let occ = layout.occurrences(&pair.rejected);
    let max_ext = config.max_extension_tokens;
    let gold = layout.gold_tokens;
    let ok = match rule {
        Rule::RandomSpan => occ.iter().any(|&(a, b)| {
            b - a < config.max_random_span_tokens && (a..=b).all(|i| layout.outside_gold(i))
        }),
        Rule::PartialOverlapLeft => gold.is_some_and(|(gs, ge)| {
            occ.iter().any(|&(a, b)| a < gs && gs - a <= max_ext && b >= gs && b < ge)
        }),
        Rule::PartialOverlapRight => gold.is_some_and(|(gs, ge)| {
            occ.iter().any(|&(a, b)| a > gs && a <= ge && b > ge && b - ge <= max_ext)
        }),
        Rule::LongerAnswer => {
            pair.rejected.contains(&pair.chosen)
                && gold.is_some_and(|(gs, ge)| {
                    occ.iter().any(|&(a, b)| {
                        a <= gs && b >= ge && (a < gs || b > ge) && gs - a <= max_ext && b - ge <= max_ext
                    })
                })
        }
        Rule::PartialAnswer => {
            let toks = whitespace_tokens(&pair.chosen);
            let n = toks.len();
            (0..n).any(|i| {
                (i..n).any(|j| (i, j) != (0, n - 1) && span_text(&pair.chosen, &toks, i, j) == pair.rejected)
            })
        }
        Rule::OtherQuestionAnswer => {
            is_foreign_answer(&pair.rejected, &pair.chosen)
                && siblings
                    .iter()
                    .any(|s| s.id != record.id && s.gold_answers.iter().any(|a| a.text == pair.rejected))
        }
        Rule::NoAnswer => {
            if record.is_answerable {
                pair.rejected.is_empty()
            } else {
                let sibling_answers: Vec<&str> = siblings
                    .iter()
                    .filter(|s| s.id != record.id)
                    .flat_map(|s| s.gold_answers.iter().map(|a| a.text.as_str()))
                    .filter(|t| !normalize(t).is_empty())
                    .collect();
                if sibling_answers.is_empty() {
                    occ.iter().any(|&(a, b)| b - a < config.max_random_span_tokens)
                } else {
                    sibling_answers.contains(&pair.rejected.as_str())
                }
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{} predicate violated by {:?}", rule.name(), pair.rejected))
    }
}
