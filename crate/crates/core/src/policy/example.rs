//! A prompt prepared for scoring: tokenized context, the enumerated answer
//! candidates, and the feature map over (prompt, candidate).
//!
//! Candidates are every contiguous context span of at most `l_max` tokens,
//! deduplicated by text (earliest, shortest occurrence kept), followed by any
//! injected targets, followed by the no-answer candidate `""`.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::corpus::{Prompt, QaRecord};
use crate::hashing::{combine, fnv1a};
use crate::metrics::normalize;
use crate::text::{covering_tokens, whitespace_tokens, Token};

/// Version tag persisted with parameters; bump when features change.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

/// Dense slots at the front of the weight vector.
pub mod slot {
    pub const NO_ANSWER: u32 = 0;
    pub const QUESTION_OVERLAP: u32 = 1;
    pub const WINDOW_OVERLAP: u32 = 2;
    pub const LENGTH: u32 = 3;
    pub const LOG_LENGTH: u32 = 4;
    pub const START: u32 = 5;
    pub const OVERLAP_FRACTION: u32 = 6;
    pub const CROSSES_SENTENCE: u32 = 7;
    pub const QUESTION_COVERAGE: u32 = 8;
    pub const SENTENCE_COVERAGE: u32 = 9;
    pub const BEST_SENTENCE_COVERAGE: u32 = 10;
    pub const DENSE: u32 = 16;
}

const WINDOW: usize = 3;

// Namespaces for hashed features.
const NS_CROSS: u64 = 1;
const NS_FIRST: u64 = 2;
const NS_LAST: u64 = 3;
const NS_LEFT: u64 = 4;
const NS_RIGHT: u64 = 5;
const NS_QUESTION_LEFT: u64 = 6;
const NS_LENGTH: u64 = 7;
const NS_NO_ANSWER_QUESTION: u64 = 8;
const NS_SENTENCE: u64 = 9;

const STOPWORDS: [&str; 22] = [
    "is", "are", "was", "were", "there", "any", "what", "which", "where", "how", "in", "of", "on", "to",
    "with", "for", "and", "or", "does", "do", "be", "by",
];

/// Shape of the feature space and the candidate enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    pub l_max: usize,
    pub max_prompt_tokens: usize,
    pub max_target_tokens: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            dim: 1 << 18,
            l_max: 20,
            max_prompt_tokens: 768,
            max_target_tokens: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Sorted by index, no repeated indices.
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    fn from_raw(mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (i, v) in raw {
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => entries.push((i, v)),
            }
        }
        FeatureVector { entries }
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |k| self.entries[k].1)
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| weights[i as usize] * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Candidate {
    /// Inclusive token range; `None` for the no-answer candidate.
    tokens: Option<(u32, u32)>,
    bytes: (usize, usize),
}

impl Candidate {
    const NO_ANSWER: Candidate = Candidate {
        tokens: None,
        bytes: (0, 0),
    };
}

#[derive(Debug, Clone)]
pub struct Example {
    spec: FeatureSpec,
    context: String,
    tokens: Vec<Token>,
    token_keys: Vec<u64>,
    /// Prefix counts of tokens that appear among question content words.
    in_question_prefix: Vec<u32>,
    /// Prefix counts of sentence-ending tokens.
    sentence_end_prefix: Vec<u32>,
    question_keys: Vec<u64>,
    question_coverage: f64,
    sentence_of: Vec<u32>,
    /// Share of question content words present in each sentence.
    sentence_coverage: Vec<f64>,
    /// Question words present in each sentence.
    sentence_keys: Vec<Vec<u64>>,
    candidates: Vec<Candidate>,
}

fn token_key(raw: &str) -> String {
    let n = normalize(raw);
    if n.is_empty() {
        raw.to_lowercase()
    } else {
        n
    }
}

fn key_hash(key: &str) -> u64 {
    fnv1a(key.as_bytes())
}

fn is_sentence_end(raw: &str) -> bool {
    matches!(raw, "." | ";" | "!" | "?") || raw.ends_with('.') && raw.len() > 1 && !raw[..raw.len() - 1].contains('.')
}

impl Example {
    /// Prepare a prompt for scoring. `targets` are answer texts that must be
    /// candidates; ones outside the enumerated spans are located in the
    /// context and injected.
    pub fn from_prompt(prompt: &Prompt, spec: FeatureSpec, targets: &[&str]) -> Result<Self, PolicyError> {
        let (context, question) = prompt.parts().ok_or(PolicyError::MalformedPrompt)?;
        let mut ex = Example::build(context, question, spec);
        for t in targets {
            ex.inject(t, None)?;
        }
        Ok(ex)
    }

    /// Prepare a corpus record; with `inject_gold`, gold answers are injected
    /// at their annotated offsets when not already candidates.
    pub fn from_record(record: &QaRecord, spec: FeatureSpec, inject_gold: bool) -> Result<Self, PolicyError> {
        let mut ex = Example::build(&record.context, &record.question, spec);
        if inject_gold {
            for answer in &record.gold_answers {
                let bytes = record.answer_bytes(answer);
                ex.inject(&answer.text, bytes)?;
            }
        }
        Ok(ex)
    }

    fn build(context: &str, question: &str, spec: FeatureSpec) -> Self {
        let question_tokens = whitespace_tokens(question);
        let mut tokens = whitespace_tokens(context);
        // "context:", "<SEP>" and "question:" count against the prompt budget.
        let budget = spec.max_prompt_tokens.saturating_sub(3 + question_tokens.len());
        if tokens.len() > budget {
            log::warn!(
                "prompt exceeds {} tokens; truncating context from {} to {} tokens",
                spec.max_prompt_tokens,
                tokens.len(),
                budget
            );
            tokens.truncate(budget);
        }

        let mut question_keys: Vec<u64> = Vec::new();
        let mut content: HashSet<u64> = HashSet::new();
        for t in &question_tokens {
            let key = token_key(t.text(question));
            let h = key_hash(&key);
            if !question_keys.contains(&h) {
                question_keys.push(h);
            }
            let is_content = !normalize(&key).is_empty() && !STOPWORDS.contains(&key.as_str());
            if is_content {
                content.insert(h);
            }
        }

        let token_keys: Vec<u64> = tokens.iter().map(|t| key_hash(&token_key(t.text(context)))).collect();
        let mut in_question_prefix = vec![0u32; tokens.len() + 1];
        let mut sentence_end_prefix = vec![0u32; tokens.len() + 1];
        for (i, t) in tokens.iter().enumerate() {
            in_question_prefix[i + 1] = in_question_prefix[i] + u32::from(content.contains(&token_keys[i]));
            sentence_end_prefix[i + 1] = sentence_end_prefix[i] + u32::from(is_sentence_end(t.text(context)));
        }
        let coverage = |keys: &[u64]| {
            if content.is_empty() {
                return 0.0;
            }
            let keys: HashSet<u64> = keys.iter().copied().collect();
            content.iter().filter(|k| keys.contains(k)).count() as f64 / content.len() as f64
        };
        let question_coverage = coverage(&token_keys);
        let sentence_of: Vec<u32> = sentence_end_prefix[..tokens.len()].to_vec();
        let mut sentence_coverage = Vec::new();
        let mut sentence_keys = Vec::new();
        let mut start = 0;
        for i in 0..tokens.len() {
            if i + 1 == tokens.len() || sentence_of[i + 1] != sentence_of[i] {
                let keys = &token_keys[start..=i];
                sentence_coverage.push(coverage(keys));
                sentence_keys.push(question_keys.iter().copied().filter(|q| keys.contains(q)).collect());
                start = i + 1;
            }
        }

        let mut candidates = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for a in 0..tokens.len() {
            for b in a..tokens.len().min(a + spec.l_max) {
                let bytes = (tokens[a].start, tokens[b].end);
                if seen.insert(&context[bytes.0..bytes.1]) {
                    candidates.push(Candidate {
                        tokens: Some((a as u32, b as u32)),
                        bytes,
                    });
                }
            }
        }
        candidates.push(Candidate::NO_ANSWER);

        Example {
            spec,
            context: context.to_string(),
            tokens,
            token_keys,
            in_question_prefix,
            sentence_end_prefix,
            question_keys,
            question_coverage,
            sentence_of,
            sentence_coverage,
            sentence_keys,
            candidates,
        }
    }

    fn inject(&mut self, text: &str, bytes: Option<Range<usize>>) -> Result<usize, PolicyError> {
        if let Some(i) = self.find(text) {
            return Ok(i);
        }
        let bytes = bytes
            .filter(|b| self.context.get(b.clone()) == Some(text))
            .or_else(|| self.context.find(text).map(|s| s..s + text.len()))
            .ok_or_else(|| PolicyError::CandidateNotFound(text.to_string()))?;
        let (first, mut last) = covering_tokens(&self.tokens, &bytes)
            .ok_or_else(|| PolicyError::CandidateNotFound(text.to_string()))?;
        if last + 1 - first > self.spec.max_target_tokens {
            log::warn!("target exceeds {} tokens; features use its prefix", self.spec.max_target_tokens);
            last = first + self.spec.max_target_tokens - 1;
        }
        let at = self.candidates.len() - 1;
        self.candidates.insert(
            at,
            Candidate {
                tokens: Some((first as u32, last as u32)),
                bytes: (bytes.start, bytes.end),
            },
        );
        Ok(at)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn spec(&self) -> FeatureSpec {
        self.spec
    }

    pub fn no_answer_index(&self) -> usize {
        self.candidates.len() - 1
    }

    pub fn candidate_text(&self, i: usize) -> &str {
        let c = self.candidates[i];
        &self.context[c.bytes.0..c.bytes.1]
    }

    pub fn candidate_texts(&self) -> impl Iterator<Item = &str> {
        (0..self.len()).map(|i| self.candidate_text(i))
    }

    pub fn find(&self, text: &str) -> Option<usize> {
        if text.is_empty() {
            return Some(self.no_answer_index());
        }
        (0..self.candidates.len() - 1).find(|&i| self.candidate_text(i) == text)
    }

    pub fn index_of(&self, text: &str) -> Result<usize, PolicyError> {
        self.find(text)
            .ok_or_else(|| PolicyError::CandidateNotFound(text.to_string()))
    }

    fn hashed(&self, h: u64) -> u32 {
        let span = self.spec.dim as u64 - slot::DENSE as u64;
        slot::DENSE + (h % span) as u32
    }

    /// Visit every `(index, value)` feature of candidate `i`. Hashed
    /// collisions show up as repeated indices and add.
    pub fn for_each_feature(&self, i: usize, mut f: impl FnMut(u32, f64)) {
        let c = self.candidates[i];
        let Some((a, b)) = c.tokens else {
            f(slot::NO_ANSWER, 1.0);
            f(slot::QUESTION_COVERAGE, self.question_coverage);
            let best = self.sentence_coverage.iter().copied().fold(0.0, f64::max);
            if best > 0.0 {
                f(slot::BEST_SENTENCE_COVERAGE, best);
            }
            for &q in &self.question_keys {
                f(self.hashed(combine(NS_NO_ANSWER_QUESTION, q)), 1.0);
            }
            return;
        };
        let (a, b) = (a as usize, b as usize);
        let n = self.tokens.len();
        let len = b - a + 1;
        let overlap = self.in_question_prefix[b + 1] - self.in_question_prefix[a];
        let lo = a.saturating_sub(WINDOW);
        let hi = (b + 1 + WINDOW).min(n);
        let window = (self.in_question_prefix[a] - self.in_question_prefix[lo])
            + (self.in_question_prefix[hi] - self.in_question_prefix[b + 1]);
        // sentence ends strictly before the last token
        let crosses = self.sentence_end_prefix[b] - self.sentence_end_prefix[a];

        if overlap > 0 {
            f(slot::QUESTION_OVERLAP, overlap as f64);
            f(slot::OVERLAP_FRACTION, overlap as f64 / len as f64);
        }
        if window > 0 {
            f(slot::WINDOW_OVERLAP, window as f64);
        }
        f(slot::LENGTH, len as f64);
        f(slot::LOG_LENGTH, (len as f64).ln());
        f(slot::START, a as f64 / n as f64);
        if crosses > 0 {
            f(slot::CROSSES_SENTENCE, crosses as f64);
        }
        let sentence = self.sentence_of[a] as usize;
        if self.sentence_coverage[sentence] > 0.0 {
            f(slot::SENTENCE_COVERAGE, self.sentence_coverage[sentence]);
        }
        for &q in &self.sentence_keys[sentence] {
            f(self.hashed(combine(NS_SENTENCE, q)), 1.0);
        }

        let left = if a == 0 { 0 } else { self.token_keys[a - 1] };
        let right = if b + 1 >= n { 1 } else { self.token_keys[b + 1] };
        f(self.hashed(combine(NS_FIRST, self.token_keys[a])), 1.0);
        f(self.hashed(combine(NS_LAST, self.token_keys[b])), 1.0);
        f(self.hashed(combine(NS_LEFT, left)), 1.0);
        f(self.hashed(combine(NS_RIGHT, right)), 1.0);
        f(self.hashed(combine(NS_LENGTH, len.min(12) as u64)), 1.0);
        for &q in &self.question_keys {
            let qh = combine(NS_CROSS, q);
            for &s in &self.token_keys[a..=b] {
                f(self.hashed(combine(qh, s)), 1.0);
            }
            f(self.hashed(combine(combine(NS_QUESTION_LEFT, q), left)), 1.0);
        }
    }

    pub fn features(&self, i: usize) -> FeatureVector {
        let mut raw = Vec::new();
        self.for_each_feature(i, |j, v| raw.push((j, v)));
        FeatureVector::from_raw(raw)
    }

    pub fn score(&self, weights: &[f64], i: usize) -> f64 {
        let mut s = 0.0;
        self.for_each_feature(i, |j, v| s += weights[j as usize] * v);
        s
    }

    pub fn scores(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.score(weights, i)).collect()
    }

    /// Log-softmax over all candidate scores.
    pub fn log_probs(&self, weights: &[f64]) -> Vec<f64> {
        log_softmax(&self.scores(weights))
    }

    /// Highest-probability candidate; ties go to the earlier candidate,
    /// i.e. earlier start, then shorter span, with no-answer last.
    pub fn argmax(&self, weights: &[f64]) -> usize {
        let scores = self.scores(weights);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Add `scale * phi(candidate i)` into a dense vector.
    pub fn add_features(&self, i: usize, scale: f64, into: &mut [f64]) {
        self.for_each_feature(i, |j, v| into[j as usize] += scale * v);
    }

    /// Add `scale * grad log pi(target)` given precomputed probabilities.
    pub fn add_log_prob_grad(&self, target: usize, probs: &[f64], scale: f64, into: &mut [f64]) {
        self.add_features(target, scale, into);
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                self.add_features(i, -scale * p, into);
            }
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}
