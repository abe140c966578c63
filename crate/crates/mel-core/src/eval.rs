//! Held-out evaluation: Pass@1, Avg@k, Pass@k, and run comparison.
//!
//! Pass@1 scores one greedy completion per task. The k-sample metrics draw
//! k tempered completions per task, each from its own counter-derived
//! stream, so a report is reproducible from (params, tasks, settings)
//! alone.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EvalSettings;
use crate::error::{MelError, Result};
use crate::policy::{self, DecodingConfig, PolicyParams};
use crate::rng::{self, stream};
use crate::taskenv::{self, Query, Vocabulary};

/// Aggregates over one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub tasks: usize,
    pub pass_at_1: f64,
    pub avg_at_k: f64,
    pub pass_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub k: usize,
    pub pass_at_1: f64,
    pub avg_at_k: f64,
    pub pass_at_k: f64,
    /// Greedy completions whose answer could not be extracted.
    pub extraction_failures: u64,
    pub per_family: BTreeMap<String, FamilyMetrics>,
    /// Greedy reward per task, parallel to the task list.
    pub greedy_rewards: Vec<u8>,
    /// k tempered rewards per task.
    pub sample_rewards: Vec<Vec<u8>>,
}

/// Mean of a greedy reward column.
pub fn pass_at_1_from(greedy: &[u8]) -> f64 {
    if greedy.is_empty() {
        return 0.0;
    }
    greedy.iter().map(|&r| r as f64).sum::<f64>() / greedy.len() as f64
}

/// Mean reward over every sampled completion.
pub fn avg_at_k_from(samples: &[Vec<u8>]) -> f64 {
    let total: usize = samples.iter().map(|row| row.len()).sum();
    if total == 0 {
        return 0.0;
    }
    samples
        .iter()
        .flat_map(|row| row.iter())
        .map(|&r| r as f64)
        .sum::<f64>()
        / total as f64
}

/// Fraction of tasks with at least one rewarded sample.
pub fn pass_at_k_from(samples: &[Vec<u8>]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|row| row.iter().any(|&r| r == 1)).count() as f64
        / samples.len() as f64
}

/// Score `params` on `tasks`.
pub fn evaluate(
    vocab: &Vocabulary,
    params: &PolicyParams,
    tasks: &[Query],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(MelError::Contract("evaluation task set is empty".into()));
    }
    if settings.k == 0 {
        return Err(MelError::Config("eval.k must be at least 1".into()));
    }
    let mut greedy_rewards = Vec::with_capacity(tasks.len());
    let mut sample_rewards = Vec::with_capacity(tasks.len());
    let mut extraction_failures = 0u64;
    let mut family_rows: BTreeMap<String, (Vec<u8>, Vec<Vec<u8>>)> = BTreeMap::new();
    for (j, q) in tasks.iter().enumerate() {
        let greedy_cfg = DecodingConfig {
            temperature: settings.temperature_pass1,
            max_tokens: settings.max_tokens,
            seed: rng::derive_seed(settings.seed, &[stream::EVAL, j as u64, 0]),
        };
        let traj = policy::sample(vocab, params, &q.prompt_tokens, &greedy_cfg);
        let verdict = taskenv::verify(&traj, q.ground_truth);
        if verdict.extraction_failed {
            extraction_failures += 1;
        }
        greedy_rewards.push(verdict.reward);

        let mut row = Vec::with_capacity(settings.k);
        for i in 0..settings.k {
            let cfg = DecodingConfig {
                temperature: settings.temperature_k,
                max_tokens: settings.max_tokens,
                seed: rng::derive_seed(settings.seed, &[stream::EVAL, j as u64, i as u64 + 1]),
            };
            let traj = policy::sample(vocab, params, &q.prompt_tokens, &cfg);
            row.push(taskenv::verify(&traj, q.ground_truth).reward);
        }
        let fam = family_rows.entry(q.family.clone()).or_default();
        fam.0.push(verdict.reward);
        fam.1.push(row.clone());
        sample_rewards.push(row);
    }
    let per_family = family_rows
        .into_iter()
        .map(|(family, (greedy, samples))| {
            (
                family,
                FamilyMetrics {
                    tasks: greedy.len(),
                    pass_at_1: pass_at_1_from(&greedy),
                    avg_at_k: avg_at_k_from(&samples),
                    pass_at_k: pass_at_k_from(&samples),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        tasks: tasks.len(),
        k: settings.k,
        pass_at_1: pass_at_1_from(&greedy_rewards),
        avg_at_k: avg_at_k_from(&sample_rewards),
        pass_at_k: pass_at_k_from(&sample_rewards),
        extraction_failures,
        per_family,
        greedy_rewards,
        sample_rewards,
    })
}

/// One run's scores within a comparison arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub run_dir: String,
    pub checkpoint: String,
    pub pass_at_1: f64,
    pub avg_at_k: f64,
    pub pass_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub runs: Vec<RunEval>,
    pub median_pass_at_1: f64,
    pub mean_pass_at_1: f64,
}

/// Pass@1 of the runs at one seed index in each arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub index: usize,
    pub pass_at_1_a: f64,
    pub pass_at_1_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub arm_a: ArmSummary,
    pub arm_b: ArmSummary,
    /// Median(arm a) − median(arm b), one per metric.
    pub delta_pass_at_1: f64,
    pub delta_avg_at_k: f64,
    pub delta_pass_at_k: f64,
    /// Positional pairing; empty when the arms have different run counts.
    pub per_seed: Vec<SeedComparison>,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

/// Percent row in the conventional `Pass@1 / Avg@k / Pass@k` layout, e.g.
/// `30.00 / 25.42 / 60.00`.
pub fn format_metrics_row(pass_at_1: f64, avg_at_k: f64, pass_at_k: f64) -> String {
    format!(
        "{:.2} / {:.2} / {:.2}",
        pass_at_1 * 100.0,
        avg_at_k * 100.0,
        pass_at_k * 100.0
    )
}

/// Median of a non-empty sample (mean of the middle pair when even).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Evaluate the final checkpoint of every run directory in an arm.
pub fn evaluate_runs(
    vocab: &Vocabulary,
    run_dirs: &[impl AsRef<Path>],
    tasks: &[Query],
    settings: &EvalSettings,
) -> Result<ArmSummary> {
    if run_dirs.is_empty() {
        return Err(MelError::Config("comparison arm has no runs".into()));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let dir = dir.as_ref();
        let ck = crate::trainer::latest_checkpoint(dir)?;
        let state = crate::trainer::load_checkpoint(&ck)?;
        let report = evaluate(vocab, &state.params, tasks, settings)?;
        runs.push(RunEval {
            run_dir: dir.display().to_string(),
            checkpoint: ck.display().to_string(),
            pass_at_1: report.pass_at_1,
            avg_at_k: report.avg_at_k,
            pass_at_k: report.pass_at_k,
        });
    }
    let pass1: Vec<f64> = runs.iter().map(|r| r.pass_at_1).collect();
    Ok(ArmSummary {
        median_pass_at_1: median(&pass1),
        mean_pass_at_1: pass1.iter().sum::<f64>() / pass1.len() as f64,
        runs,
    })
}

fn median_of<F: Fn(&RunEval) -> f64>(runs: &[RunEval], f: F) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>())
}

/// Compare two arms of trained runs on a shared task set. When the arms
/// have equal run counts, runs are paired positionally (seed index i vs
/// seed index i) and per-seed wins are tallied on Pass@1.
pub fn compare_runs(
    vocab: &Vocabulary,
    arm_a: &[impl AsRef<Path>],
    arm_b: &[impl AsRef<Path>],
    tasks: &[Query],
    settings: &EvalSettings,
) -> Result<CompareReport> {
    let a = evaluate_runs(vocab, arm_a, tasks, settings)?;
    let b = evaluate_runs(vocab, arm_b, tasks, settings)?;
    let mut per_seed = Vec::new();
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    if a.runs.len() == b.runs.len() {
        for (i, (ra, rb)) in a.runs.iter().zip(&b.runs).enumerate() {
            per_seed.push(SeedComparison {
                index: i,
                pass_at_1_a: ra.pass_at_1,
                pass_at_1_b: rb.pass_at_1,
                delta: ra.pass_at_1 - rb.pass_at_1,
            });
            if ra.pass_at_1 > rb.pass_at_1 {
                wins_a += 1;
            } else if rb.pass_at_1 > ra.pass_at_1 {
                wins_b += 1;
            } else {
                ties += 1;
            }
        }
    }
    Ok(CompareReport {
        delta_pass_at_1: a.median_pass_at_1 - b.median_pass_at_1,
        delta_avg_at_k: median_of(&a.runs, |r| r.avg_at_k) - median_of(&b.runs, |r| r.avg_at_k),
        delta_pass_at_k: median_of(&a.runs, |r| r.pass_at_k)
            - median_of(&b.runs, |r| r.pass_at_k),
        arm_a: a,
        arm_b: b,
        per_seed,
        wins_a,
        wins_b,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureSpec;
    use crate::taskenv::{generate_tasks, GenSpec};

    fn setup(count: usize) -> (Vocabulary, PolicyParams, Vec<Query>) {
        let vocab = Vocabulary::modchain();
        let params = PolicyParams::new(&vocab, FeatureSpec::default());
        let tasks = generate_tasks(&vocab, &GenSpec { count, seed: 5, ..GenSpec::default() })
            .unwrap();
        (vocab, params, tasks)
    }

    #[test]
    fn metric_helpers_match_hand_counts() {
        let greedy = vec![1, 0, 1, 1];
        assert!((pass_at_1_from(&greedy) - 0.75).abs() < 1e-12);
        let samples = vec![vec![0, 0], vec![1, 0], vec![1, 1]];
        assert!((avg_at_k_from(&samples) - 0.5).abs() < 1e-12);
        assert!((pass_at_k_from(&samples) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pass_at_1_from(&[]), 0.0);
        assert_eq!(pass_at_k_from(&[]), 0.0);
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn metrics_row_uses_percent_columns() {
        assert_eq!(format_metrics_row(0.30, 0.2542, 0.60), "30.00 / 25.42 / 60.00");
        assert_eq!(format_metrics_row(0.0, 0.0, 0.0), "0.00 / 0.00 / 0.00");
        assert_eq!(format_metrics_row(1.0, 1.0, 1.0), "100.00 / 100.00 / 100.00");
    }

    #[test]
    fn reports_are_reproducible_and_internally_consistent() {
        let (vocab, params, tasks) = setup(6);
        let settings = EvalSettings { k: 3, max_tokens: 24, ..EvalSettings::default() };
        let a = evaluate(&vocab, &params, &tasks, &settings).unwrap();
        let b = evaluate(&vocab, &params, &tasks, &settings).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks, 6);
        assert_eq!(a.greedy_rewards.len(), 6);
        assert!(a.sample_rewards.iter().all(|row| row.len() == 3));
        assert!((a.pass_at_1 - pass_at_1_from(&a.greedy_rewards)).abs() < 1e-15);
        assert!((a.avg_at_k - avg_at_k_from(&a.sample_rewards)).abs() < 1e-15);
        assert!((a.pass_at_k - pass_at_k_from(&a.sample_rewards)).abs() < 1e-15);
        assert!(a.pass_at_k >= a.avg_at_k - 1e-15, "any-correct dominates mean");
        let fam = &a.per_family["modchain"];
        assert_eq!(fam.tasks, 6);
        assert!((fam.pass_at_1 - a.pass_at_1).abs() < 1e-15);
    }

    #[test]
    fn different_eval_seeds_change_samples_not_greedy() {
        let (vocab, params, tasks) = setup(4);
        let a = evaluate(
            &vocab,
            &params,
            &tasks,
            &EvalSettings { k: 4, seed: 0, max_tokens: 24, ..EvalSettings::default() },
        )
        .unwrap();
        let b = evaluate(
            &vocab,
            &params,
            &tasks,
            &EvalSettings { k: 4, seed: 1, max_tokens: 24, ..EvalSettings::default() },
        )
        .unwrap();
        assert_eq!(a.greedy_rewards, b.greedy_rewards, "greedy column ignores the seed");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (vocab, params, tasks) = setup(2);
        assert!(evaluate(&vocab, &params, &[], &EvalSettings::default()).is_err());
        let bad = EvalSettings { k: 0, ..EvalSettings::default() };
        assert!(evaluate(&vocab, &params, &tasks, &bad).is_err());
    }

    #[test]
    fn comparison_reads_final_checkpoints_and_fails_on_missing_runs() {
        use crate::config::TrainSettings;
        use crate::trainer::Trainer;
        let vocab = Vocabulary::modchain();
        let tasks = generate_tasks(&vocab, &GenSpec { count: 6, seed: 2, ..GenSpec::default() })
            .unwrap();
        let settings = TrainSettings {
            group_size: 4,
            queries_per_step: 4,
            update_mini_batch: 4,
            total_steps: 2,
            checkpoint_interval: 2,
            max_tokens: 24,
            lambda_mel: 0.0,
            ..TrainSettings::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run-0");
        let trainer = Trainer::new(vocab.clone(), settings, &run).unwrap();
        let mut state = trainer.init_state();
        trainer.run(&mut state, &tasks).unwrap();
        let eval_settings = EvalSettings { k: 2, max_tokens: 24, ..EvalSettings::default() };
        let report =
            compare_runs(&vocab, &[run.clone()], &[run.clone()], &tasks, &eval_settings).unwrap();
        assert_eq!(report.arm_a, report.arm_b);
        assert_eq!(report.arm_a.runs.len(), 1);
        assert!(report.arm_a.runs[0].checkpoint.ends_with("step-2"));
        // Self-comparison: deltas exactly zero, the single seed ties.
        assert_eq!(report.delta_pass_at_1, 0.0);
        assert_eq!(report.delta_avg_at_k, 0.0);
        assert_eq!(report.delta_pass_at_k, 0.0);
        assert_eq!((report.wins_a, report.wins_b, report.ties), (0, 0, 1));
        assert_eq!(report.per_seed.len(), 1);
        assert_eq!(report.per_seed[0].delta, 0.0);
        let missing = dir.path().join("no-such-run");
        let err = compare_runs(&vocab, &[missing.clone()], &[run], &tasks, &eval_settings)
            .unwrap_err();
        assert!(err.to_string().contains("no-such-run"), "error names the missing run: {err}");
    }
}
