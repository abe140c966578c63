//! Flat `key = value` configuration.
//!
//! One schema feeds training, evaluation, and backend settings; the CLI
//! layers `--set key=value` overrides on top and the trainer writes the
//! fully resolved map (defaults included) into the run directory as
//! `config.resolved`. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::metaexp::remote::RemoteConfig;
use crate::metaexp::SerializeMode;
use crate::taskenv::GenSpec;

/// Recognized configuration keys.
pub const KNOWN_KEYS: [&str; 30] = [
    "train.group_size",
    "train.queries_per_step",
    "train.update_mini_batch",
    "train.learning_rate",
    "train.clip_epsilon",
    "train.inner_epochs",
    "train.lambda_mel",
    "train.pair_cap",
    "train.replay_attempts",
    "train.replay_temperature",
    "train.replay_max_tokens",
    "train.rollout_temperature",
    "train.max_tokens",
    "train.internalize_mode",
    "train.seed",
    "train.total_steps",
    "train.checkpoint_interval",
    "train.deterministic",
    "task.moduli",
    "eval.k",
    "eval.temperature_pass1",
    "eval.temperature_k",
    "eval.seed",
    "eval.max_tokens",
    "analyst.backend",
    "analyst.endpoint",
    "analyst.token",
    "analyst.timeout_ms",
    "analyst.retries",
    "analyst.max_tokens",
];

/// Raw parsed key/value pairs, ordered for deterministic rendering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, later assignments win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MelError::Data(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    ln + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(MelError::Data(format!("config line {}: empty key", ln + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(ConfigMap { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MelError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Apply `key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(MelError::Config(format!("override `{o}` is not key=value")));
            };
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    /// Error on any key outside the schema.
    pub fn reject_unknown_keys(&self) -> Result<()> {
        for key in self.map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) && key != "analyst.temperature" {
                return Err(MelError::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                MelError::Config(format!("config key `{key}` has unusable value `{raw}`"))
            }),
        }
    }
}

/// Which analyst backend drives the meta-experience pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalystChoice {
    Scripted,
    Remote(RemoteConfig),
}

/// Fully resolved training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub group_size: usize,
    pub queries_per_step: usize,
    /// Groups per sub-update; equals `queries_per_step` unless configured.
    pub update_mini_batch: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub inner_epochs: usize,
    /// Weight of the meta-experience term; 0 disables the whole pipeline.
    pub lambda_mel: f64,
    pub pair_cap: usize,
    pub replay_attempts: usize,
    pub replay_temperature: f64,
    pub replay_max_tokens: usize,
    pub rollout_temperature: f64,
    pub max_tokens: usize,
    pub internalize_mode: SerializeMode,
    pub seed: u64,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    /// Deterministic runs log wall-clock as 0 so event logs replay
    /// bit-for-bit.
    pub deterministic: bool,
    /// Modulus set the scripted analyst uses to recognize wrong-modulus
    /// slips.
    pub moduli: Vec<i64>,
    pub analyst: AnalystChoice,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            group_size: 8,
            queries_per_step: 32,
            update_mini_batch: 32,
            learning_rate: 1e-2,
            clip_epsilon: 0.2,
            inner_epochs: 1,
            lambda_mel: 1.0,
            pair_cap: 2,
            replay_attempts: 1,
            replay_temperature: 0.0,
            replay_max_tokens: 48,
            rollout_temperature: 1.0,
            max_tokens: 48,
            internalize_mode: SerializeMode::NaturalLanguage,
            seed: 0,
            total_steps: 200,
            checkpoint_interval: 50,
            deterministic: true,
            moduli: vec![5, 7],
            analyst: AnalystChoice::Scripted,
        }
    }
}

fn parse_moduli(raw: &str) -> Result<Vec<i64>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<i64>()
                .map_err(|_| MelError::Config(format!("bad modulus `{p}` in task.moduli")))
        })
        .collect()
}

impl TrainSettings {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.reject_unknown_keys()?;
        let d = TrainSettings::default();
        let queries_per_step = map.typed("train.queries_per_step", d.queries_per_step)?;
        let internalize_mode = match map.get("train.internalize_mode").unwrap_or("natural") {
            "natural" => SerializeMode::NaturalLanguage,
            "hint" => SerializeMode::HintTokens,
            other => {
                return Err(MelError::Config(format!(
                    "train.internalize_mode must be `natural` or `hint`, got `{other}`"
                )))
            }
        };
        let analyst = match map.get("analyst.backend").unwrap_or("scripted") {
            "scripted" => AnalystChoice::Scripted,
            "remote" => {
                let rd = RemoteConfig::default();
                let endpoint = map
                    .get("analyst.endpoint")
                    .ok_or_else(|| {
                        MelError::Config("analyst.backend = remote requires analyst.endpoint".into())
                    })?
                    .to_string();
                AnalystChoice::Remote(RemoteConfig {
                    endpoint,
                    token: map.get("analyst.token").map(str::to_string),
                    timeout_ms: map.typed("analyst.timeout_ms", rd.timeout_ms)?,
                    retries: map.typed("analyst.retries", rd.retries)?,
                    max_tokens: map.typed("analyst.max_tokens", rd.max_tokens)?,
                    temperature: map.typed("analyst.temperature", rd.temperature)?,
                })
            }
            other => {
                return Err(MelError::Config(format!(
                    "analyst.backend must be `scripted` or `remote`, got `{other}`"
                )))
            }
        };
        let settings = TrainSettings {
            group_size: map.typed("train.group_size", d.group_size)?,
            queries_per_step,
            update_mini_batch: map.typed("train.update_mini_batch", queries_per_step)?,
            learning_rate: map.typed("train.learning_rate", d.learning_rate)?,
            clip_epsilon: map.typed("train.clip_epsilon", d.clip_epsilon)?,
            inner_epochs: map.typed("train.inner_epochs", d.inner_epochs)?,
            lambda_mel: map.typed("train.lambda_mel", d.lambda_mel)?,
            pair_cap: map.typed("train.pair_cap", d.pair_cap)?,
            replay_attempts: map.typed("train.replay_attempts", d.replay_attempts)?,
            replay_temperature: map.typed("train.replay_temperature", d.replay_temperature)?,
            replay_max_tokens: map.typed("train.replay_max_tokens", d.replay_max_tokens)?,
            rollout_temperature: map.typed("train.rollout_temperature", d.rollout_temperature)?,
            max_tokens: map.typed("train.max_tokens", d.max_tokens)?,
            internalize_mode,
            seed: map.typed("train.seed", d.seed)?,
            total_steps: map.typed("train.total_steps", d.total_steps)?,
            checkpoint_interval: map.typed("train.checkpoint_interval", d.checkpoint_interval)?,
            deterministic: map.typed("train.deterministic", d.deterministic)?,
            moduli: match map.get("task.moduli") {
                Some(raw) => parse_moduli(raw)?,
                None => d.moduli,
            },
            analyst,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MelError::Config(msg));
        if self.group_size < 1 {
            return bad("train.group_size must be at least 1".into());
        }
        if self.queries_per_step < 1 {
            return bad("train.queries_per_step must be at least 1".into());
        }
        if self.update_mini_batch < 1 || self.update_mini_batch > self.queries_per_step {
            return bad(format!(
                "train.update_mini_batch must be in 1..={}",
                self.queries_per_step
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive".into());
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("train.clip_epsilon must lie in (0, 1)".into());
        }
        if self.inner_epochs < 1 {
            return bad("train.inner_epochs must be at least 1".into());
        }
        if !(self.lambda_mel >= 0.0) {
            return bad("train.lambda_mel must be non-negative".into());
        }
        if self.replay_attempts < 1 {
            return bad("train.replay_attempts must be at least 1".into());
        }
        if self.replay_temperature < 0.0 || self.rollout_temperature < 0.0 {
            return bad("temperatures must be non-negative".into());
        }
        if self.max_tokens < 4 || self.replay_max_tokens < 4 {
            return bad("token budgets must be at least 4".into());
        }
        if self.total_steps < 1 {
            return bad("train.total_steps must be at least 1".into());
        }
        if self.checkpoint_interval < 1 {
            return bad("train.checkpoint_interval must be at least 1".into());
        }
        if self.moduli.is_empty() {
            return bad("task.moduli must be non-empty".into());
        }
        Ok(())
    }

    /// Materialize every effective setting (for `config.resolved`).
    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("train.group_size", self.group_size);
        m.set("train.queries_per_step", self.queries_per_step);
        m.set("train.update_mini_batch", self.update_mini_batch);
        m.set("train.learning_rate", self.learning_rate);
        m.set("train.clip_epsilon", self.clip_epsilon);
        m.set("train.inner_epochs", self.inner_epochs);
        m.set("train.lambda_mel", self.lambda_mel);
        m.set("train.pair_cap", self.pair_cap);
        m.set("train.replay_attempts", self.replay_attempts);
        m.set("train.replay_temperature", self.replay_temperature);
        m.set("train.replay_max_tokens", self.replay_max_tokens);
        m.set("train.rollout_temperature", self.rollout_temperature);
        m.set("train.max_tokens", self.max_tokens);
        m.set(
            "train.internalize_mode",
            match self.internalize_mode {
                SerializeMode::NaturalLanguage => "natural",
                SerializeMode::HintTokens => "hint",
            },
        );
        m.set("train.seed", self.seed);
        m.set("train.total_steps", self.total_steps);
        m.set("train.checkpoint_interval", self.checkpoint_interval);
        m.set("train.deterministic", self.deterministic);
        let moduli: Vec<String> = self.moduli.iter().map(|v| v.to_string()).collect();
        m.set("task.moduli", moduli.join(","));
        match &self.analyst {
            AnalystChoice::Scripted => m.set("analyst.backend", "scripted"),
            AnalystChoice::Remote(rc) => {
                m.set("analyst.backend", "remote");
                m.set("analyst.endpoint", &rc.endpoint);
                if let Some(t) = &rc.token {
                    m.set("analyst.token", t);
                }
                m.set("analyst.timeout_ms", rc.timeout_ms);
                m.set("analyst.retries", rc.retries);
                m.set("analyst.max_tokens", rc.max_tokens);
                m.set("analyst.temperature", rc.temperature);
            }
        }
        m
    }
}

/// Evaluation settings; the temperature split mirrors standard protocol
/// (greedy for single-sample accuracy, 0.6 for multi-sample metrics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub temperature_pass1: f64,
    pub temperature_k: f64,
    pub seed: u64,
    pub max_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { k: 8, temperature_pass1: 0.0, temperature_k: 0.6, seed: 0, max_tokens: 48 }
    }
}

impl EvalSettings {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.reject_unknown_keys()?;
        let d = EvalSettings::default();
        let s = EvalSettings {
            k: map.typed("eval.k", d.k)?,
            temperature_pass1: map.typed("eval.temperature_pass1", d.temperature_pass1)?,
            temperature_k: map.typed("eval.temperature_k", d.temperature_k)?,
            seed: map.typed("eval.seed", d.seed)?,
            max_tokens: map.typed("eval.max_tokens", d.max_tokens)?,
        };
        if s.k < 1 {
            return Err(MelError::Config("eval.k must be at least 1".into()));
        }
        if s.temperature_pass1 < 0.0 || s.temperature_k < 0.0 {
            return Err(MelError::Config("eval temperatures must be non-negative".into()));
        }
        if s.max_tokens < 4 {
            return Err(MelError::Config("eval.max_tokens must be at least 4".into()));
        }
        Ok(s)
    }
}

/// Parse an inline generation spec:
/// `family=modchain,count=100,seed=7,difficulty=2..3,moduli=5|7`.
pub fn parse_gen_spec(raw: &str) -> Result<GenSpec> {
    let mut spec = GenSpec::default();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let Some((k, v)) = part.split_once('=') else {
            return Err(MelError::Config(format!("gen spec field `{part}` is not key=value")));
        };
        match k.trim() {
            "family" => spec.family = v.trim().to_string(),
            "count" => {
                spec.count = v.trim().parse().map_err(|_| {
                    MelError::Config(format!("gen spec count `{v}` is not a number"))
                })?
            }
            "seed" => {
                spec.seed = v.trim().parse().map_err(|_| {
                    MelError::Config(format!("gen spec seed `{v}` is not a number"))
                })?
            }
            "difficulty" => {
                let Some((lo, hi)) = v.trim().split_once("..") else {
                    return Err(MelError::Config(format!(
                        "gen spec difficulty `{v}` must look like 2..3"
                    )));
                };
                let lo = lo.parse().map_err(|_| {
                    MelError::Config(format!("bad difficulty lower bound `{lo}`"))
                })?;
                let hi = hi.parse().map_err(|_| {
                    MelError::Config(format!("bad difficulty upper bound `{hi}`"))
                })?;
                spec.difficulty = (lo, hi);
            }
            "moduli" => {
                spec.moduli = v
                    .split('|')
                    .map(|p| {
                        p.trim().parse::<i64>().map_err(|_| {
                            MelError::Config(format!("bad modulus `{p}` in gen spec"))
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            other => {
                return Err(MelError::Config(format!("unknown gen spec field `{other}`")));
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_trims() {
        let m = ConfigMap::parse("# top\ntrain.seed = 7 # inline\n\n  train.group_size=4\n").unwrap();
        assert_eq!(m.get("train.seed"), Some("7"));
        assert_eq!(m.get("train.group_size"), Some("4"));
    }

    #[test]
    fn malformed_line_is_a_data_error() {
        assert!(matches!(ConfigMap::parse("just words"), Err(MelError::Data(_))));
    }

    #[test]
    fn defaults_survive_an_empty_map() {
        let s = TrainSettings::from_map(&ConfigMap::new()).unwrap();
        assert_eq!(s, TrainSettings::default());
        assert_eq!(s.group_size, 8);
        assert_eq!(s.queries_per_step, 32);
        assert!((s.learning_rate - 1e-2).abs() < 1e-15);
        assert_eq!(s.total_steps, 200);
        assert_eq!(s.pair_cap, 2);
        assert_eq!(s.replay_attempts, 1);
        assert!((s.lambda_mel - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut m = ConfigMap::new();
        m.set("train.group_sizee", 8);
        assert!(matches!(TrainSettings::from_map(&m), Err(MelError::Config(_))));
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut m = ConfigMap::new();
        m.set("train.group_size", "eight");
        match TrainSettings::from_map(&m) {
            Err(MelError::Config(msg)) => assert!(msg.contains("train.group_size")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_win() {
        let mut m = ConfigMap::parse("train.seed = 1").unwrap();
        m.apply_overrides(&["train.seed=9".into()]).unwrap();
        let s = TrainSettings::from_map(&m).unwrap();
        assert_eq!(s.seed, 9);
        assert!(m.apply_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn remote_backend_requires_endpoint() {
        let mut m = ConfigMap::new();
        m.set("analyst.backend", "remote");
        assert!(matches!(TrainSettings::from_map(&m), Err(MelError::Config(_))));
        m.set("analyst.endpoint", "http://127.0.0.1:9000/gen");
        m.set("analyst.token", "sekrit");
        let s = TrainSettings::from_map(&m).unwrap();
        match s.analyst {
            AnalystChoice::Remote(rc) => {
                assert_eq!(rc.endpoint, "http://127.0.0.1:9000/gen");
                assert_eq!(rc.token.as_deref(), Some("sekrit"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolved_map_round_trips() {
        let mut m = ConfigMap::new();
        m.set("train.seed", 5);
        m.set("train.lambda_mel", "0");
        m.set("task.moduli", "5,7,11");
        let s = TrainSettings::from_map(&m).unwrap();
        let rendered = s.to_map().render();
        let reparsed = TrainSettings::from_map(&ConfigMap::parse(&rendered).unwrap()).unwrap();
        assert_eq!(reparsed, s);
        assert_eq!(reparsed.moduli, vec![5, 7, 11]);
        // Render is stable.
        assert_eq!(reparsed.to_map().render(), rendered);
    }

    #[test]
    fn mini_batch_cannot_exceed_rollout_batch() {
        let mut m = ConfigMap::new();
        m.set("train.queries_per_step", 8);
        m.set("train.update_mini_batch", 16);
        assert!(matches!(TrainSettings::from_map(&m), Err(MelError::Config(_))));
    }

    #[test]
    fn eval_defaults_match_protocol() {
        let e = EvalSettings::default();
        assert_eq!(e.k, 8);
        assert_eq!(e.temperature_pass1, 0.0);
        assert!((e.temperature_k - 0.6).abs() < 1e-15);
    }

    #[test]
    fn gen_spec_parsing() {
        let g = parse_gen_spec("family=modchain,count=40,seed=3,difficulty=2..3,moduli=5|7").unwrap();
        assert_eq!(g.count, 40);
        assert_eq!(g.seed, 3);
        assert_eq!(g.difficulty, (2, 3));
        assert_eq!(g.moduli, vec![5, 7]);
        assert!(parse_gen_spec("count=0").is_err());
        assert!(parse_gen_spec("difficulty=3").is_err());
        assert!(parse_gen_spec("mystery=1").is_err());
    }
}
