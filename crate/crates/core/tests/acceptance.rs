//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

mod common;

use std::collections::HashSet;
use std::f64::consts::LN_2;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrcpref::corpus::render_prompt;
use mrcpref::metrics::evaluate;
use mrcpref::model_forge::{filter_by_f1, FilterConfig};
use mrcpref::pairs::{read_pairs, PreferencePair};
use mrcpref::pipeline::{run_pipeline, PipelineOutcome};
use mrcpref::policy::{sft_loss_and_grad, Example, FeatureSpec, PolicyParams};
use mrcpref::pref_opt::{
    bt_preference_prob, dpo_loss, dpo_train, kl_shaped_reward, prepare_pairs, preference_loss,
    preference_loss_and_grad, reward_model_loss, LossKind, PairLogps, RewardParams,
};
use mrcpref::rule_forge::{forge_rules, RuleConfig};

use common::{bundled, median, random_scoring_case, ref_evaluate, rule_predicate, siblings_by_context, toy_config};

type Check = Result<String, String>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<String, String> {
    if (got - want).abs() <= tol {
        Ok(format!("{name}={got:.12}"))
    } else {
        Err(format!("{name}={got:.12}, expected {want} within {tol:e}"))
    }
}

fn loss_values() -> Check {
    let at = |h: f64| PairLogps::new(h, 0.0, 0.0, 0.0);
    let pairs = vec![mrcpref::pairs::PreferencePair::new(
        "x",
        "context: left lobe nodule <SEP> question: where?",
        "left lobe",
        "nodule",
        mrcpref::pairs::Source::Model("A".into()),
    )];
    let checks = [
        close("dpo_loss(h=0)", dpo_loss(&at(0.0), 0.1), LN_2, 1e-12),
        close("dpo_loss(0.1,1.5)", dpo_loss(&at(1.5), 0.1), 0.6208809869, 1e-9),
        close("bt(2,1)", bt_preference_prob(2.0, 1.0), 0.7310585786, 1e-9),
        reward_model_loss(&RewardParams::zeros(FeatureSpec::default()), &pairs)
            .map_err(|e| e.to_string())
            .and_then(|l| if l == LN_2 { Ok(format!("rm_loss(0)={l}")) } else { Err(format!("rm_loss(0)={l}, expected ln 2 exactly")) }),
        close("kl_reward", kl_shaped_reward(1.0, 0.1, -2.0, -2.5), 0.95, 1e-12),
    ];
    let (ok, bad): (Vec<_>, Vec<_>) = checks.into_iter().partition(Result::is_ok);
    let ok: Vec<String> = ok.into_iter().map(Result::unwrap).collect();
    let bad: Vec<String> = bad.into_iter().map(|r| r.unwrap_err()).collect();
    if bad.is_empty() {
        Ok(ok.join(", "))
    } else {
        Err(format!("{} | passing: {}", bad.join("; "), ok.join(", ")))
    }
}

fn random_weights(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

fn central_difference(f: impl Fn(&[f64]) -> f64, w: &mut [f64], k: usize, eps: f64) -> f64 {
    let orig = w[k];
    w[k] = orig + eps;
    let up = f(w);
    w[k] = orig - eps;
    let down = f(w);
    w[k] = orig;
    (up - down) / (2.0 * eps)
}

/// Probe coordinates the analytic gradient touches, compare with central differences.
fn gradients() -> Check {
    const EPS: f64 = 1e-5;
    const PER_LOSS: usize = 200;
    let data = bundled();
    let spec = FeatureSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut w = random_weights(&mut rng, spec.dim, 0.3);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut record = |a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
        probes += 1;
    };

    let examples: Vec<(Example, usize)> = data.dev.records[..40]
        .iter()
        .map(|r| {
            let ex = Example::from_record(r, spec, true).unwrap();
            let t = ex.index_of(r.chosen()).unwrap();
            (ex, t)
        })
        .collect();
    let mut done = 0;
    'sft: for (ex, t) in &examples {
        let batch = [(ex, *t)];
        let mut grad = vec![0.0; spec.dim];
        sft_loss_and_grad(&w, &batch, &mut grad);
        let f = |w: &[f64]| sft_loss_and_grad(w, &batch, &mut vec![0.0; spec.dim]);
        let active: Vec<u32> = ex.features(*t).entries.iter().map(|e| e.0).collect();
        for &k in active.iter().take(8) {
            let a = grad[k as usize];
            if a.abs() < 1e-6 {
                continue;
            }
            let n = central_difference(f, &mut w, k as usize, EPS);
            record(a, n);
            done += 1;
            if done == PER_LOSS {
                break 'sft;
            }
        }
    }

    let forged = forge_rules(&data.dev, &RuleConfig::default());
    let mut reference = PolicyParams::zeros(spec, 0);
    reference.weights = random_weights(&mut rng, spec.dim, 0.3);
    let prepared = prepare_pairs(&forged[..120], &reference).map_err(|e| e.to_string())?;
    let beta = 0.5;
    for kind in [LossKind::Dpo, LossKind::Ipo, LossKind::RsoHinge] {
        let mut done = 0;
        'pairs: for p in &prepared {
            let h = p.logps(&w).margin();
            if kind == LossKind::RsoHinge && (1.0 - beta * h).abs() < 1e-3 {
                continue;
            }
            let batch = [p];
            let mut grad = vec![0.0; spec.dim];
            preference_loss_and_grad(&w, &batch, kind, beta, 1.0, &mut grad);
            let f = |w: &[f64]| preference_loss(w, &batch, kind, beta);
            let mut coords: Vec<u32> = p.example.features(p.chosen).entries.iter().map(|e| e.0).collect();
            coords.extend(p.example.features(p.rejected).entries.iter().map(|e| e.0));
            for &k in coords.iter().step_by(3).take(6) {
                let a = grad[k as usize];
                if a.abs() < 1e-6 {
                    continue;
                }
                let n = central_difference(f, &mut w, k as usize, EPS);
                record(a, n);
                done += 1;
                if done == PER_LOSS {
                    break 'pairs;
                }
            }
        }
        if done < PER_LOSS {
            return Err(format!("only {done} usable probes for {kind}"));
        }
    }
    let detail = format!("{probes} probes over sft/dpo/ipo/rso, worst relative error {worst:.2e}");
    if probes >= 4 * PER_LOSS && worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metrics_parity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (corpus, predictions) = random_scoring_case(&mut rng, 100);
    let report = evaluate(&predictions, &corpus).map_err(|e| e.to_string())?;
    let (em, f1, rows) = ref_evaluate(&corpus, &predictions);
    for (id, r_em, r_f1) in &rows {
        let got = report.per_question[id];
        if got.em != *r_em || got.f1 != *r_f1 {
            return Err(format!("{id}: got ({}, {}), reference ({r_em}, {r_f1})", got.em, got.f1));
        }
    }
    if report.em != em || report.f1 != f1 {
        return Err(format!("corpus EM/F1 {}/{} vs reference {em}/{f1}", report.em, report.f1));
    }
    let multi = corpus.records.iter().filter(|r| r.gold_answers.len() > 1).count();
    let empty_gold = corpus.records.iter().filter(|r| r.gold_answers.is_empty()).count();
    let empty_pred = predictions.values().filter(|p| p.is_empty()).count();
    Ok(format!(
        "100 questions ({multi} multi-gold, {empty_gold} unanswerable, {empty_pred} empty predictions), EM {em:.2} F1 {f1:.4} identical"
    ))
}

fn rule_predicates() -> Check {
    let data = bundled();
    let corpus = &data.dev;
    let siblings = siblings_by_context(corpus);
    let mut pairs_checked = 0;
    let mut violations = Vec::new();
    for seed in 0..1000u64 {
        let cfg = RuleConfig { seed, ..RuleConfig::default() };
        for pair in forge_rules(corpus, &cfg) {
            let record = corpus.get(&pair.id).ok_or("pair for unknown record")?;
            if pair.prompt != render_prompt(record).as_str() {
                violations.push(format!("{}: prompt mismatch", pair.id));
            }
            if let Err(e) = rule_predicate(record, &siblings[record.context.as_str()], &pair) {
                violations.push(format!("seed {seed} {}: {e}", pair.id));
            }
            pairs_checked += 1;
        }
    }
    if violations.is_empty() {
        Ok(format!("1000 seeded forge runs, {pairs_checked} pairs, 0 violations"))
    } else {
        Err(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

fn key(p: &PreferencePair) -> (String, String) {
    (p.id.clone(), p.rejected.clone())
}

fn monotone(pairs: &[PreferencePair]) -> Result<[usize; 3], String> {
    let f = |t| filter_by_f1(pairs, FilterConfig::new(t).unwrap());
    let (a, b, c) = (f(0.5), f(0.7), f(0.9));
    let sa: HashSet<_> = a.iter().map(key).collect();
    let sb: HashSet<_> = b.iter().map(key).collect();
    let sc: HashSet<_> = c.iter().map(key).collect();
    if !(a.len() <= b.len() && b.len() <= c.len()) {
        return Err(format!("counts {} {} {}", a.len(), b.len(), c.len()));
    }
    if !(sa.is_subset(&sb) && sb.is_subset(&sc)) {
        return Err("filter(0.5) or filter(0.7) is not nested".into());
    }
    Ok([a.len(), b.len(), c.len()])
}

struct SeedRun {
    seed: u64,
    outcome: PipelineOutcome,
    rule_pairs: Vec<PreferencePair>,
    model_pairs: Vec<PreferencePair>,
}

fn run_seed(seed: u64, root: &std::path::Path) -> Result<SeedRun, String> {
    let workdir = root.join(format!("seed{seed}"));
    let cfg = toy_config(seed, &workdir);
    let outcome = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let rule_pairs = read_pairs(&workdir.join("pairs_rule.jsonl")).map_err(|e| e.to_string())?;
    let model_pairs = read_pairs(&workdir.join("pairs_model.jsonl")).map_err(|e| e.to_string())?;
    Ok(SeedRun {
        seed,
        outcome,
        rule_pairs,
        model_pairs,
    })
}

fn paper_trend(runs: &[SeedRun], data: &common::Bundled) -> Check {
    let (train, dev, test) = (&data.train, &data.dev, &data.test);
    let unans = train.unanswerable_fraction();
    if train.len() < 500 || dev.len() < 100 || test.len() < 100 || unans < 0.15 {
        return Err(format!(
            "corpus too small: {}/{}/{} questions, {:.2} unanswerable",
            train.len(),
            dev.len(),
            test.len(),
            unans
        ));
    }
    let mut gains = Vec::new();
    let mut sft_f1 = Vec::new();
    let mut per_seed = Vec::new();
    for r in runs {
        let sft = r.outcome.row("sft").ok_or("no sft row")?;
        let dpo = r.outcome.row("dpo-model").ok_or("no dpo-model row")?;
        gains.push(dpo.test_f1 - sft.test_f1);
        sft_f1.push(sft.test_f1);
        per_seed.push(format!("s{} {:.2}->{:.2} (ep {})", r.seed, sft.test_f1, dpo.test_f1, dpo.best_epoch));
    }
    let gain = median(gains);
    let sft = median(sft_f1);
    let detail = format!(
        "median DPO-minus-SFT test F1 {gain:+.2} (need >= +1.00), median SFT F1 {sft:.2}; {}",
        per_seed.join(", ")
    );
    if sft >= 90.0 {
        return Err(format!("SFT does not plateau below 90: {detail}"));
    }
    if gain >= 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn threshold_monotonicity(runs: &[SeedRun]) -> Check {
    let mut lines = Vec::new();
    for r in runs {
        let rule = monotone(&r.rule_pairs).map_err(|e| format!("seed {} rule: {e}", r.seed))?;
        let model = monotone(&r.model_pairs).map_err(|e| format!("seed {} model: {e}", r.seed))?;
        for c in &r.outcome.counts {
            let expected = if c.dataset == "rule" { rule } else { model };
            let idx = [0.5, 0.7, 0.9].iter().position(|&t| t == c.threshold).ok_or("unexpected threshold")?;
            if expected[idx] != c.pairs {
                return Err(format!("seed {} counts table disagrees for {} at {}", r.seed, c.dataset, c.threshold));
            }
        }
        lines.push(format!("s{} rule {:?} model {:?}", r.seed, rule, model));
    }
    Ok(format!("counts at (0.5, 0.7, 0.9): {}", lines.join("; ")))
}

fn threshold_diversity(runs: &[SeedRun]) -> Check {
    let mut diffs = Vec::new();
    let mut per_seed = Vec::new();
    for r in runs {
        let sweep = r.outcome.sweep.as_ref().ok_or("no sweep in config")?;
        let hi = sweep.final_f1(0.9).ok_or("no 0.9 row")?;
        let lo = sweep.final_f1(0.5).ok_or("no 0.5 row")?;
        diffs.push(hi - lo);
        per_seed.push(format!("s{} {hi:.2} vs {lo:.2}", r.seed));
    }
    let d = median(diffs);
    let detail = format!("median final F1(0.9) - F1(0.5) = {d:+.2}; {}", per_seed.join(", "));
    if d >= 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frozen_and_deterministic(runs: &[SeedRun], root: &std::path::Path, data: &common::Bundled) -> Check {
    let first = &runs[0];
    let workdir = root.join(format!("seed{}", first.seed));
    let sft = PolicyParams::load(&workdir.join("sft.params")).map_err(|e| e.to_string())?;
    let snapshot = sft.to_bytes();
    let cfg = toy_config(first.seed, &workdir);
    for kind in [LossKind::Dpo, LossKind::Ipo, LossKind::RsoHinge] {
        let loss = mrcpref::pref_opt::LossConfig { loss: kind, max_epochs: 3, ..cfg.dpo.clone() };
        let out = dpo_train(&sft, &first.model_pairs, &data.dev, &loss, 1).map_err(|e| e.to_string())?;
        if !out.reference.bit_identical(&sft) || sft.to_bytes() != snapshot {
            return Err(format!("{kind}: reference drifted from the SFT parameters"));
        }
    }
    let before = first.outcome.manifest.outputs.clone();
    fs::remove_dir_all(&workdir).map_err(|e| e.to_string())?;
    let again = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    if again.manifest.outputs != before {
        let differing: Vec<&String> = before
            .iter()
            .filter(|(k, v)| again.manifest.outputs.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(format!("rerun digests differ for {differing:?}"));
    }
    for (name, digest) in &again.manifest.outputs {
        let actual = mrcpref::io::file_digest(&workdir.join(name)).map_err(|e| e.to_string())?;
        if &actual != digest {
            return Err(format!("{name}: manifest digest is not recomputable"));
        }
    }
    Ok(format!(
        "reference bit-identical after dpo/ipo/rso runs; rerun reproduced all {} artifact digests",
        before.len()
    ))
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn check(&mut self, n: usize, name: &str, f: impl FnOnce() -> Check) {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("criterion {n} [{name}]: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let data = bundled();
    let mut suite = Suite { failed: 0 };
    suite.check(1, "loss values", loss_values);
    suite.check(2, "gradients", gradients);

    let tmp = tempfile::tempdir().expect("tempdir");
    let started = Instant::now();
    let runs: Result<Vec<SeedRun>, String> = (1..=5).map(|s| run_seed(s, tmp.path())).collect();
    let runs = runs.unwrap_or_else(|e| {
        println!("pipeline runs failed: {e}");
        Vec::new()
    });
    let runs_ok = runs.len() == 5;
    let need_runs = |f: &dyn Fn() -> Check| if runs_ok { f() } else { Err("pipeline runs failed".into()) };
    println!("five seeded pipeline runs took {:.1}s", started.elapsed().as_secs_f64());

    suite.check(3, "DPO over SFT on synthetic corpus", || need_runs(&|| paper_trend(&runs, &data)));
    suite.check(4, "threshold monotonicity", || need_runs(&|| threshold_monotonicity(&runs)));
    suite.check(5, "threshold 0.9 vs 0.5 at largest size", || need_runs(&|| threshold_diversity(&runs)));
    suite.check(6, "metrics parity", metrics_parity);
    suite.check(7, "rule predicates", rule_predicates);
    suite.check(8, "frozen reference and determinism", || {
        need_runs(&|| frozen_and_deterministic(&runs, tmp.path(), &data))
    });

    println!("acceptance: {} of 8 criteria passed", 8 - suite.failed);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
