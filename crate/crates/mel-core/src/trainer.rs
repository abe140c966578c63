//! Training loop: rollouts, meta-experience pipeline, joint update.
//!
//! Each step freezes a snapshot, samples a group per query, and optimizes
//! `J = J_group + lambda * J_meta`, where the first term is the clipped
//! group-relative surrogate and the second the meta-experience return over
//! this step's replay-validated records. With `lambda = 0` the pipeline is
//! skipped entirely and the run is vanilla group-relative optimization —
//! bit-for-bit, because every random stream is derived from (run seed,
//! purpose, step, query, sample) counters rather than shared state.
//!
//! A run directory accumulates `config.resolved`, `events.jsonl` (one
//! record per step), `checkpoints/step-<k>/`, `pool.jsonl`, and
//! `metrics.csv`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AnalystChoice, TrainSettings};
use crate::error::{MelError, Result};
use crate::grpo::{self, RolloutGroup};
use crate::internalize::{self, InternalizationBatch};
use crate::metaexp::{
    remote::RemoteAnalyst, Analyst, MeStatus, MetaExperiencePool, ReplayConfig, ScriptedAnalyst,
};
use crate::policy::{DecodingConfig, FeatureSpec, PolicyParams, PolicySnapshot};
use crate::rng::{self, stream};
use crate::taskenv::{Query, TokenId, Vocabulary};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// 1-based count of completed steps.
    pub step: u64,
    pub mean_reward: f64,
    /// Fraction of this step's groups whose rewards were all equal.
    pub degenerate_fraction: f64,
    /// Contrastive pairs built this step.
    pub pairs_built: u64,
    /// Cumulative pool counters.
    pub candidates: u64,
    pub validated: u64,
    pub rejected: u64,
    pub retention_ratio: f64,
    /// Pre-update internalization loss over this step's validated batch;
    /// absent when the batch was empty.
    pub nll_loss: Option<f64>,
    pub meta_return: Option<f64>,
    /// Norms from the first sub-update of the step.
    pub grad_norm_grpo: f64,
    pub grad_norm_mel: f64,
    pub grad_norm_joint: f64,
    /// Tokens hit by the clip across all sub-updates of the step.
    pub clipped_tokens: u64,
    /// 0 in deterministic mode so logs replay exactly.
    pub wall_clock_ms: u64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub params: PolicyParams,
    pub snapshot: PolicySnapshot,
    pub pool: MetaExperiencePool,
    /// Root of every derived random stream.
    pub run_seed: u64,
    pub queries_seen: u64,
    pub trajectories_sampled: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    step: u64,
    run_seed: u64,
    queries_seen: u64,
    trajectories_sampled: u64,
}

/// Owns the immutable pieces of a run: vocabulary, settings, analyst
/// backend, run directory.
pub struct Trainer {
    vocab: Vocabulary,
    settings: TrainSettings,
    analyst: Box<dyn Analyst>,
    run_dir: PathBuf,
    instruction: Vec<TokenId>,
}

impl Trainer {
    /// Prepare a run directory (creating it and `checkpoints/`) and write
    /// `config.resolved`.
    pub fn new(vocab: Vocabulary, settings: TrainSettings, run_dir: &Path) -> Result<Self> {
        settings.validate()?;
        std::fs::create_dir_all(run_dir.join("checkpoints"))?;
        std::fs::write(run_dir.join("config.resolved"), settings.to_map().render())?;
        let analyst: Box<dyn Analyst> = match &settings.analyst {
            AnalystChoice::Scripted => Box::new(ScriptedAnalyst::new(settings.moduli.clone())),
            AnalystChoice::Remote(rc) => Box::new(RemoteAnalyst::new(rc.clone())?),
        };
        let instruction = vocab.id("<analyze>").map(|t| vec![t]).unwrap_or_default();
        Ok(Trainer { vocab, settings, analyst, run_dir: run_dir.to_path_buf(), instruction })
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    /// Fresh state at step 0.
    pub fn init_state(&self) -> TrainState {
        let params = PolicyParams::new(&self.vocab, FeatureSpec::default());
        let snapshot = PolicySnapshot::freeze(&params);
        TrainState {
            step: 0,
            params,
            snapshot,
            pool: MetaExperiencePool::new(),
            run_seed: self.settings.seed,
            queries_seen: 0,
            trajectories_sampled: 0,
        }
    }

    /// Deterministic distinct task indices for one step.
    fn select_queries<'t>(&self, tasks: &'t [Query], step: u64) -> Vec<&'t Query> {
        let n = self.settings.queries_per_step;
        if n >= tasks.len() {
            return tasks.iter().collect();
        }
        let mut rng = rng::stream_rng(rng::derive_seed(
            self.run_seed_of(step),
            &[stream::TASK_ORDER],
        ));
        rand::seq::index::sample(&mut rng, tasks.len(), n)
            .into_iter()
            .map(|i| &tasks[i])
            .collect()
    }

    fn run_seed_of(&self, step: u64) -> u64 {
        rng::derive_seed(self.settings.seed, &[step])
    }

    /// Execute one optimization step.
    pub fn train_step(&self, state: &mut TrainState, tasks: &[Query]) -> Result<EventRecord> {
        if tasks.is_empty() {
            return Err(MelError::Contract("task set is empty".into()));
        }
        let t0 = Instant::now();
        let s = &self.settings;
        let step = state.step;
        let step_seed = self.run_seed_of(step);

        state.snapshot = PolicySnapshot::freeze(&state.params);
        let queries = self.select_queries(tasks, step);

        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            let cfg = DecodingConfig {
                temperature: s.rollout_temperature,
                max_tokens: s.max_tokens,
                seed: rng::derive_seed(step_seed, &[stream::ROLLOUT, qi as u64]),
            };
            groups.push(grpo::rollout_group(&self.vocab, &state.snapshot, q, s.group_size, &cfg));
        }

        let total: usize = groups.iter().map(|g| g.rewards.len()).sum();
        let mean_reward = if total == 0 {
            0.0
        } else {
            groups
                .iter()
                .flat_map(|g| g.rewards.iter())
                .map(|&r| r as f64)
                .sum::<f64>()
                / total as f64
        };
        let degenerate_fraction =
            groups.iter().filter(|g| g.is_degenerate()).count() as f64 / groups.len() as f64;

        // Meta-experience pipeline; entirely absent when the term's weight
        // is zero.
        let mut pairs_built = 0u64;
        let mut entries = Vec::new();
        if s.lambda_mel > 0.0 {
            for (qi, (q, group)) in queries.iter().zip(&groups).enumerate() {
                let pair_seed = rng::derive_seed(step_seed, &[stream::PAIRING, qi as u64]);
                let pairs = crate::metaexp::build_pairs(group, s.pair_cap, pair_seed);
                pairs_built += pairs.len() as u64;
                for (pi, pair) in pairs.iter().enumerate() {
                    let positive = &group.trajectories[pair.positive];
                    let negative = &group.trajectories[pair.negative];
                    let mut me = match self.analyst.analyze(
                        &self.vocab,
                        q,
                        pair,
                        positive,
                        negative,
                        step,
                    ) {
                        Ok(me) => me,
                        Err(MelError::Remote(why)) => {
                            // Unreachable backend: degrade to fewer
                            // candidates, keep training.
                            eprintln!("step {step}: analyst unavailable for {}: {why}", q.id);
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    if me.status == MeStatus::Candidate {
                        let replay = ReplayConfig {
                            attempts: s.replay_attempts,
                            temperature: s.replay_temperature,
                            max_tokens: s.replay_max_tokens,
                            seed: rng::derive_seed(
                                step_seed,
                                &[stream::REPLAY, qi as u64, pi as u64],
                            ),
                        };
                        match self.analyst.validate(&self.vocab, &mut me, q, &state.params, &replay)
                        {
                            Ok(_) => {}
                            Err(MelError::Remote(why)) => {
                                me.status = MeStatus::Rejected;
                                me.diagnostics =
                                    Some(format!("replay transport failure: {why}"));
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    if me.status == MeStatus::Validated {
                        entries.push(internalize::build_entry(
                            &self.vocab,
                            &self.instruction,
                            &me,
                            q,
                            positive,
                            negative,
                            s.internalize_mode,
                        )?);
                    }
                    state.pool.record(me);
                }
            }
        }
        let batch = InternalizationBatch::new(entries);
        let (nll, ret) = if batch.is_empty() {
            (None, None)
        } else {
            let loss = internalize::nll_loss(&state.params, &batch)?;
            (Some(loss), Some(-loss))
        };

        // Joint ascent updates.
        let mut grad_norm_grpo = 0.0;
        let mut grad_norm_mel = 0.0;
        let mut grad_norm_joint = 0.0;
        let mut clipped_tokens = 0u64;
        let mut first_update = true;
        for _epoch in 0..s.inner_epochs {
            for chunk in groups.chunks(s.update_mini_batch) {
                let (grpo_grad, stats) =
                    grpo::grpo_gradient(&state.params, &state.snapshot, chunk, s.clip_epsilon)?;
                clipped_tokens += stats.clipped_tokens as u64;
                let grpo_norm = grpo_grad.l2_norm();
                let mut joint = grpo_grad;
                let mut mel_norm = 0.0;
                if s.lambda_mel > 0.0 && !batch.is_empty() {
                    let mel = internalize::meta_gradient(&state.params, &batch)?;
                    mel_norm = mel.l2_norm();
                    joint.add_scaled(&mel, s.lambda_mel);
                }
                if first_update {
                    grad_norm_grpo = grpo_norm;
                    grad_norm_mel = mel_norm;
                    grad_norm_joint = joint.l2_norm();
                    first_update = false;
                }
                state.params.apply_gradient(&joint, s.learning_rate);
            }
        }

        state.step += 1;
        state.queries_seen += queries.len() as u64;
        state.trajectories_sampled += total as u64;
        Ok(EventRecord {
            step: state.step,
            mean_reward,
            degenerate_fraction,
            pairs_built,
            candidates: state.pool.candidates(),
            validated: state.pool.validated(),
            rejected: state.pool.rejected(),
            retention_ratio: state.pool.retention_ratio(),
            nll_loss: nll,
            meta_return: ret,
            grad_norm_grpo,
            grad_norm_mel,
            grad_norm_joint,
            clipped_tokens,
            wall_clock_ms: if s.deterministic {
                0
            } else {
                t0.elapsed().as_millis() as u64
            },
        })
    }

    /// Run (or resume) until `total_steps`, appending events and writing
    /// periodic checkpoints plus the rolling pool file.
    pub fn run(&self, state: &mut TrainState, tasks: &[Query]) -> Result<()> {
        let events_path = self.run_dir.join("events.jsonl");
        let mut events = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)?;
        while state.step < self.settings.total_steps {
            let record = self.train_step(state, tasks)?;
            let line = serde_json::to_string(&record).map_err(|e| MelError::Data(e.to_string()))?;
            writeln!(events, "{line}")?;
            events.flush()?;
            if record.step % self.settings.checkpoint_interval == 0
                || record.step == self.settings.total_steps
            {
                let dir = self.checkpoint_dir(record.step);
                save_checkpoint(state, &dir)?;
                state.pool.save(&self.run_dir.join("pool.jsonl"))?;
            }
        }
        state.pool.save(&self.run_dir.join("pool.jsonl"))?;
        crate::export::write_metrics_csv(&self.run_dir)?;
        Ok(())
    }

    pub fn checkpoint_dir(&self, step: u64) -> PathBuf {
        self.run_dir.join("checkpoints").join(format!("step-{step}"))
    }
}

/// Write a checkpoint directory: `meta.json`, `params.txt`, `snapshot.txt`,
/// `pool.jsonl`. Every writer is canonical, so save -> load -> save is
/// byte-identical.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step: state.step,
        run_seed: state.run_seed,
        queries_seen: state.queries_seen,
        trajectories_sampled: state.trajectories_sampled,
    };
    let mut meta_text =
        serde_json::to_string_pretty(&meta).map_err(|e| MelError::Data(e.to_string()))?;
    meta_text.push('\n');
    std::fs::write(dir.join("meta.json"), meta_text)?;
    state.params.save(&dir.join("params.txt"))?;
    state.snapshot.params().save(&dir.join("snapshot.txt"))?;
    state.pool.save(&dir.join("pool.jsonl"))?;
    Ok(())
}

/// Load a checkpoint. Unknown versions fail with a version mismatch and a
/// corrupted file leaves the caller's state untouched (nothing is mutated
/// until every piece parsed).
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| MelError::Data(format!("{}: bad checkpoint meta: {e}", dir.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(MelError::Version { found: meta.version, expected: CHECKPOINT_VERSION });
    }
    let params = PolicyParams::load(&dir.join("params.txt"))?;
    let snapshot_params = PolicyParams::load(&dir.join("snapshot.txt"))?;
    let pool = MetaExperiencePool::load(&dir.join("pool.jsonl"))?;
    Ok(TrainState {
        step: meta.step,
        params,
        snapshot: PolicySnapshot::freeze(&snapshot_params),
        pool,
        run_seed: meta.run_seed,
        queries_seen: meta.queries_seen,
        trajectories_sampled: meta.trajectories_sampled,
    })
}

/// Locate the highest-numbered checkpoint of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = std::fs::read_dir(&dir)
        .map_err(|_| MelError::Data(format!("{}: no checkpoints directory", run_dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(num) = name.strip_prefix("step-").and_then(|n| n.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| num > *b) {
                best = Some((num, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| MelError::Data(format!("{}: no checkpoints found", run_dir.display())))
}
