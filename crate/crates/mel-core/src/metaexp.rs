//! Contrastive meta-experience pipeline.
//!
//! From each rollout group the trainer pairs successful trajectories with
//! failed ones, asks an analyst backend for a structured post-mortem —
//! bifurcation point (where the failed path first left the correct one),
//! critique (what kind of error it was, with the corrected local context),
//! and heuristic (a hint constrained to a fixed grammar) — and then tests
//! the record by replaying the query with the hint attached. Only records
//! that actually rescue the failure are kept for internalization.
//!
//! Two backends exist: a deterministic scripted analyst driven by the exact
//! step oracle, and a remote HTTP analyst (see [`remote`]).

pub mod remote;

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::grpo::RolloutGroup;
use crate::policy::{self, DecodingConfig, PolicyParams};
use crate::rng;
use crate::taskenv::{self, Op, Query, TokenId, Trajectory, Vocabulary};

/// Error taxonomy for critiques. Serialized with the exact token spelling
/// used by the toy vocabulary and the hint grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    #[serde(rename = "wrong-operation")]
    WrongOperation,
    #[serde(rename = "arithmetic-slip")]
    ArithmeticSlip,
    #[serde(rename = "wrong-modulus")]
    WrongModulus,
    #[serde(rename = "format-violation")]
    FormatViolation,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] = [
        ErrorKind::WrongOperation,
        ErrorKind::ArithmeticSlip,
        ErrorKind::WrongModulus,
        ErrorKind::FormatViolation,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ErrorKind::WrongOperation => "wrong-operation",
            ErrorKind::ArithmeticSlip => "arithmetic-slip",
            ErrorKind::WrongModulus => "wrong-modulus",
            ErrorKind::FormatViolation => "format-violation",
        }
    }

    /// Corrective action advertised by the hint grammar for this kind.
    pub fn corrective(self) -> &'static str {
        match self {
            ErrorKind::WrongOperation => "use-correct-op",
            ErrorKind::ArithmeticSlip => "recheck-arithmetic",
            ErrorKind::WrongModulus => "apply-modulus",
            ErrorKind::FormatViolation => "follow-format",
        }
    }

    pub fn from_token(s: &str) -> Option<ErrorKind> {
        ErrorKind::ALL.into_iter().find(|k| k.token() == s)
    }
}

/// Lifecycle of a meta-experience record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeStatus {
    Candidate,
    Validated,
    Rejected,
}

/// Where the failed trajectory first left the correct computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    /// 1-based step index; `chain length + 1` addresses the answer line.
    pub index: usize,
    /// Verbatim text of the offending region (empty if it was absent).
    pub step_text: String,
}

/// Error attribution plus the corrected local context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub kind: ErrorKind,
    pub text: String,
}

/// Hint constrained to `[HINT] <error-kind> <step-family> <corrective-op>
/// [/HINT]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heuristic {
    pub kind: ErrorKind,
    pub family: String,
    pub corrective: String,
    /// Rendered hint text in the grammar above.
    pub text: String,
}

impl Heuristic {
    pub fn new(kind: ErrorKind, family: &str) -> Self {
        let corrective = kind.corrective().to_string();
        let text = format!("[HINT] {} {} {} [/HINT]", kind.token(), family, corrective);
        Heuristic { kind, family: family.to_string(), corrective, text }
    }
}

/// Fixed corrective-action vocabulary of the hint grammar.
pub const CORRECTIVES: [&str; 4] =
    ["use-correct-op", "recheck-arithmetic", "apply-modulus", "follow-format"];

/// Parse and validate hint text against the grammar. Returns
/// (error kind, step family, corrective op).
pub fn parse_hint(text: &str) -> Result<(ErrorKind, String, String)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = |why: &str| MelError::Data(format!("hint `{text}` violates the grammar: {why}"));
    if words.len() != 5 || words[0] != "[HINT]" || words[4] != "[/HINT]" {
        return Err(bad("expected `[HINT] <kind> <family> <corrective> [/HINT]`"));
    }
    let kind = ErrorKind::from_token(words[1]).ok_or_else(|| bad("unknown error kind"))?;
    if !CORRECTIVES.contains(&words[3]) {
        return Err(bad("unknown corrective op"));
    }
    Ok((kind, words[2].to_string(), words[3].to_string()))
}

/// Which rollouts a record came from and who produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_id: String,
    /// Index of the successful trajectory within its rollout group.
    pub positive: usize,
    /// Index of the failed trajectory within its rollout group.
    pub negative: usize,
    pub backend: String,
    pub step: u64,
}

/// Replay parameters recorded when a candidate was judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub seed: u64,
    pub attempts: usize,
    pub temperature: f64,
}

/// One structured post-mortem of a contrastive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaExperience {
    pub id: String,
    pub bifurcation: Bifurcation,
    pub critique: Critique,
    pub heuristic: Heuristic,
    pub provenance: Provenance,
    pub status: MeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Validation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

/// A (successful, failed) trajectory pairing within one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub query_id: String,
    pub positive: usize,
    pub negative: usize,
}

/// Build up to `cap` contrastive pairs from a group.
///
/// Degenerate groups (either side empty) produce nothing. When the cap
/// covers the full cross product, every pair is emitted in index order.
/// Otherwise pairs are drawn from seeded shuffles without replacement on
/// each side, re-using the shorter side only once the cap exceeds its size.
pub fn build_pairs(group: &RolloutGroup, cap: usize, seed: u64) -> Vec<ContrastivePair> {
    use rand::seq::SliceRandom;
    let positives = group.positives();
    let negatives = group.negatives();
    if positives.is_empty() || negatives.is_empty() || cap == 0 {
        return Vec::new();
    }
    let product = positives.len() * negatives.len();
    let pair = |p: usize, n: usize| ContrastivePair {
        query_id: group.query_id.clone(),
        positive: p,
        negative: n,
    };
    if cap >= product {
        let mut out = Vec::with_capacity(product);
        for &p in &positives {
            for &n in &negatives {
                out.push(pair(p, n));
            }
        }
        return out;
    }
    let mut rng = rng::stream_rng(seed);
    let mut pos = positives.clone();
    let mut neg = negatives.clone();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let (short_len, long_len) = (pos.len().min(neg.len()), pos.len().max(neg.len()));
    if cap <= short_len {
        (0..cap).map(|i| pair(pos[i], neg[i])).collect()
    } else if cap <= long_len {
        // The longer side stays duplicate-free; the shorter one cycles.
        (0..cap)
            .map(|i| {
                if pos.len() >= neg.len() {
                    pair(pos[i], neg[i % neg.len()])
                } else {
                    pair(pos[i % pos.len()], neg[i])
                }
            })
            .collect()
    } else {
        let mut cross: Vec<(usize, usize)> = positives
            .iter()
            .flat_map(|&p| negatives.iter().map(move |&n| (p, n)))
            .collect();
        cross.shuffle(&mut rng);
        cross.truncate(cap);
        cross.into_iter().map(|(p, n)| pair(p, n)).collect()
    }
}

// ---------------------------------------------------------------------------
// Serialization into policy tokens
// ---------------------------------------------------------------------------

/// How a record is turned into tokens for replay or internalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SerializeMode {
    /// Just the five hint-grammar tokens.
    HintTokens,
    /// Tokenized critique, a separator, the hint tokens, then end-of-text.
    /// The critique leads so most record positions are conditioned on
    /// ordinary task tokens rather than on an injected hint block. Fails
    /// with an unknown-symbol error if the critique uses words outside the
    /// vocabulary (e.g. English text from the remote analyst).
    NaturalLanguage,
}

/// Serialize a record into vocabulary tokens. Deterministic; never panics.
pub fn serialize_meta_experience(
    vocab: &Vocabulary,
    me: &MetaExperience,
    mode: SerializeMode,
) -> Result<Vec<TokenId>> {
    match mode {
        SerializeMode::HintTokens => vocab.tokenize(&me.heuristic.text),
        SerializeMode::NaturalLanguage => {
            let mut out = vocab.tokenize(&me.critique.text)?;
            out.push(
                vocab
                    .sep()
                    .ok_or_else(|| MelError::UnknownSymbol("<sep>".into()))?,
            );
            out.extend(vocab.tokenize(&me.heuristic.text)?);
            if let Some(e) = vocab.eos() {
                out.push(e);
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Analyst backends
// ---------------------------------------------------------------------------

/// Replay-validation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub attempts: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

/// An analyst turns a contrastive pair into a meta-experience candidate and
/// judges candidates by replaying their query with the hint attached.
pub trait Analyst {
    fn backend_name(&self) -> &'static str;

    /// Post-mortem of one pair. The pair must satisfy the contrastive
    /// invariant (reward 1 positive, reward 0 negative, same query).
    fn analyze(
        &self,
        vocab: &Vocabulary,
        query: &Query,
        pair: &ContrastivePair,
        positive: &Trajectory,
        negative: &Trajectory,
        step: u64,
    ) -> Result<MetaExperience>;

    /// Replay the query with the hint and settle the candidate's status.
    fn validate(
        &self,
        vocab: &Vocabulary,
        me: &mut MetaExperience,
        query: &Query,
        params: &PolicyParams,
        cfg: &ReplayConfig,
    ) -> Result<MeStatus>;
}

/// Deterministic analyst driven by the exact step oracle. Its critiques are
/// written in the toy vocabulary itself: `<kind> <v_{t-1}>\n<t> : <v_t>`
/// for a deviating step t, or `<kind> <v_L>\n#### <answer>` when only the
/// final answer went wrong, so internalization sees corrected context in
/// the same token space the policy generates.
#[derive(Debug, Clone)]
pub struct ScriptedAnalyst {
    /// Modulus set used to recognize wrong-modulus slips.
    pub moduli: Vec<i64>,
}

impl ScriptedAnalyst {
    pub fn new(moduli: Vec<i64>) -> Self {
        ScriptedAnalyst { moduli }
    }

    /// Attribute a wrong step value to an error kind. `prev` is the correct
    /// value entering step t.
    fn classify(&self, wrong: i64, prev: i64, op: Op, operand: i64, modulus: i64) -> ErrorKind {
        for other in Op::ALL {
            if other != op && wrong == other.apply(prev, operand).rem_euclid(modulus) {
                return ErrorKind::WrongOperation;
            }
        }
        let raw = op.apply(prev, operand);
        if wrong == raw && raw != raw.rem_euclid(modulus) {
            return ErrorKind::WrongModulus;
        }
        for &m2 in &self.moduli {
            if m2 != modulus && wrong == raw.rem_euclid(m2) {
                return ErrorKind::WrongModulus;
            }
        }
        ErrorKind::ArithmeticSlip
    }
}

fn answer_region_text(vocab: &Vocabulary, trajectory: &Trajectory) -> String {
    match vocab
        .answer_marker()
        .and_then(|m| trajectory.tokens.iter().rposition(|&t| t == m))
    {
        Some(p) => vocab.render(&trajectory.tokens[p..]),
        None => String::new(),
    }
}

impl Analyst for ScriptedAnalyst {
    fn backend_name(&self) -> &'static str {
        "scripted"
    }

    fn analyze(
        &self,
        vocab: &Vocabulary,
        query: &Query,
        pair: &ContrastivePair,
        _positive: &Trajectory,
        negative: &Trajectory,
        step: u64,
    ) -> Result<MetaExperience> {
        let report = taskenv::step_oracle(query, negative);
        let values = &report.correct_values;
        let chain_len = values.len();
        let value_before = |t: usize| {
            if t >= 2 {
                values[t - 2]
            } else {
                query.operands[0].rem_euclid(query.modulus)
            }
        };
        let (bifurcation, kind, critique_text) = match report.first_deviation {
            Some(t) if t <= chain_len => {
                let record = negative.steps.get(t - 1);
                let kind = match record.and_then(|s| s.value) {
                    Some(w) => self.classify(
                        w,
                        value_before(t),
                        query.ops[t - 1],
                        query.operands[t],
                        query.modulus,
                    ),
                    // Missing or unparseable step line.
                    None => ErrorKind::FormatViolation,
                };
                let text = format!(
                    "{} {}\n{} : {}",
                    kind.token(),
                    value_before(t),
                    t,
                    values[t - 1]
                );
                let step_text = record.map(|s| s.text.clone()).unwrap_or_default();
                (Bifurcation { index: t, step_text }, kind, text)
            }
            Some(t) => {
                // Extra step lines past the end of the chain.
                let kind = ErrorKind::FormatViolation;
                let text = format!(
                    "{} {}\n#### {}",
                    kind.token(),
                    values[chain_len - 1],
                    query.ground_truth
                );
                let step_text = negative.steps.get(t - 1).map(|s| s.text.clone()).unwrap_or_default();
                (Bifurcation { index: t, step_text }, kind, text)
            }
            None if negative.steps.is_empty() => {
                // No step structure at all.
                let kind = ErrorKind::FormatViolation;
                let text = format!("{} {}\n1 : {}", kind.token(), value_before(1), values[0]);
                (Bifurcation { index: 1, step_text: String::new() }, kind, text)
            }
            None => {
                // Every step correct; the answer line itself failed.
                let failed = taskenv::verify(negative, query.ground_truth).extraction_failed;
                let kind = if failed { ErrorKind::FormatViolation } else { ErrorKind::ArithmeticSlip };
                let text = format!(
                    "{} {}\n#### {}",
                    kind.token(),
                    values[chain_len - 1],
                    query.ground_truth
                );
                let step_text = answer_region_text(vocab, negative);
                (Bifurcation { index: chain_len + 1, step_text }, kind, text)
            }
        };
        Ok(MetaExperience {
            id: format!("me-{}-p{}n{}-t{}", query.id, pair.positive, pair.negative, step),
            bifurcation,
            critique: Critique { kind, text: critique_text },
            heuristic: Heuristic::new(kind, &query.family),
            provenance: Provenance {
                query_id: query.id.clone(),
                positive: pair.positive,
                negative: pair.negative,
                backend: self.backend_name().into(),
                step,
            },
            status: MeStatus::Candidate,
            validation: None,
            diagnostics: None,
        })
    }

    fn validate(
        &self,
        vocab: &Vocabulary,
        me: &mut MetaExperience,
        query: &Query,
        params: &PolicyParams,
        cfg: &ReplayConfig,
    ) -> Result<MeStatus> {
        if me.status != MeStatus::Candidate {
            return Err(MelError::Contract(format!(
                "record `{}` was already judged",
                me.id
            )));
        }
        let hint = serialize_meta_experience(vocab, me, SerializeMode::HintTokens)?;
        let mut prompt = hint;
        prompt.extend(&query.prompt_tokens);
        let attempts = cfg.attempts.max(1);
        let mut status = MeStatus::Rejected;
        for attempt in 0..attempts {
            let dc = DecodingConfig {
                temperature: cfg.temperature,
                max_tokens: cfg.max_tokens,
                seed: rng::derive_seed(cfg.seed, &[attempt as u64]),
            };
            let replay = policy::sample(vocab, params, &prompt, &dc);
            if taskenv::verify(&replay, query.ground_truth).reward == 1 {
                status = MeStatus::Validated;
                break;
            }
        }
        me.status = status;
        me.validation = Some(Validation {
            seed: cfg.seed,
            attempts,
            temperature: cfg.temperature,
        });
        Ok(status)
    }
}

// ---------------------------------------------------------------------------
// Pool
// ---------------------------------------------------------------------------

/// Append-only store of every record the analyst produced, judged or not.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetaExperiencePool {
    pub entries: Vec<MetaExperience>,
}

impl MetaExperiencePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, me: MetaExperience) {
        self.entries.push(me);
    }

    pub fn candidates(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn validated(&self) -> u64 {
        self.entries.iter().filter(|e| e.status == MeStatus::Validated).count() as u64
    }

    pub fn rejected(&self) -> u64 {
        self.entries.iter().filter(|e| e.status == MeStatus::Rejected).count() as u64
    }

    /// `validated / max(1, validated + rejected)`; in [0, 1] by
    /// construction.
    pub fn retention_ratio(&self) -> f64 {
        let v = self.validated();
        let j = v + self.rejected();
        v as f64 / (j.max(1)) as f64
    }

    pub fn validated_entries(&self) -> impl Iterator<Item = &MetaExperience> {
        self.entries.iter().filter(|e| e.status == MeStatus::Validated)
    }

    /// One JSON record per line, in insertion order.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = String::new();
        for e in &self.entries {
            buf.push_str(&serde_json::to_string(e).map_err(|e| MelError::Data(e.to_string()))?);
            buf.push('\n');
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let me: MetaExperience = serde_json::from_str(line).map_err(|e| {
                MelError::Data(format!("{}:{}: bad pool record: {e}", path.display(), ln + 1))
            })?;
            entries.push(me);
        }
        Ok(MetaExperiencePool { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskenv::parse_trajectory;

    fn vocab() -> Vocabulary {
        Vocabulary::modchain()
    }

    fn query() -> Query {
        // 3 - 4 mod 5 -> 4; 4 * 3 mod 5 -> 2.
        let v = vocab();
        let operands = vec![3, 4, 3];
        let ops = vec![Op::Sub, Op::Mul];
        let tokens = taskenv::prompt_tokens(&v, &operands, &ops, 5);
        Query {
            id: "q0".into(),
            family: "modchain".into(),
            operands,
            ops,
            modulus: 5,
            ground_truth: 2,
            prompt: v.render(&tokens),
            prompt_tokens: tokens,
        }
    }

    fn traj(text: &str) -> Trajectory {
        let v = vocab();
        let tokens = v.tokenize(text).unwrap();
        let lps = vec![0.0; tokens.len()];
        parse_trajectory(&v, tokens, lps)
    }

    fn group_with(rewards: Vec<u8>) -> RolloutGroup {
        let n = rewards.len();
        RolloutGroup {
            query_id: "q0".into(),
            prompt_tokens: vec![0],
            trajectories: vec![traj("#### 0"); n],
            rewards,
        }
    }

    fn analyze(negative_text: &str) -> MetaExperience {
        let a = ScriptedAnalyst::new(vec![5, 7]);
        let q = query();
        let pair = ContrastivePair { query_id: q.id.clone(), positive: 0, negative: 1 };
        let pos = traj("1 : 4\n2 : 2\n#### 2");
        a.analyze(&vocab(), &q, &pair, &pos, &traj(negative_text), 3).unwrap()
    }

    #[test]
    fn pair_cap_two_gives_distinct_sides() {
        let g = group_with(vec![1, 0, 1, 0, 0, 1, 0, 0]);
        let pairs = build_pairs(&g, 2, 9);
        assert_eq!(pairs.len(), 2);
        assert_ne!(pairs[0].positive, pairs[1].positive);
        assert_ne!(pairs[0].negative, pairs[1].negative);
        for p in &pairs {
            assert_eq!(g.rewards[p.positive], 1);
            assert_eq!(g.rewards[p.negative], 0);
        }
    }

    #[test]
    fn pair_cap_above_product_gives_full_cross() {
        let g = group_with(vec![1, 1, 1, 0, 0, 0, 0, 0]);
        let pairs = build_pairs(&g, 100, 9);
        assert_eq!(pairs.len(), 15);
        let set: std::collections::HashSet<_> =
            pairs.iter().map(|p| (p.positive, p.negative)).collect();
        assert_eq!(set.len(), 15);
    }

    #[test]
    fn pair_cap_between_sides_keeps_long_side_distinct() {
        let g = group_with(vec![1, 1, 0, 0, 0, 0, 0, 1]);
        // 3 positives, 5 negatives, cap 4: negatives stay duplicate-free.
        let pairs = build_pairs(&g, 4, 9);
        assert_eq!(pairs.len(), 4);
        let negs: std::collections::HashSet<_> = pairs.iter().map(|p| p.negative).collect();
        assert_eq!(negs.len(), 4);
        let all: std::collections::HashSet<_> =
            pairs.iter().map(|p| (p.positive, p.negative)).collect();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn degenerate_groups_pair_to_nothing() {
        assert!(build_pairs(&group_with(vec![1; 4]), 2, 9).is_empty());
        assert!(build_pairs(&group_with(vec![0; 4]), 2, 9).is_empty());
        assert!(build_pairs(&group_with(vec![1, 0]), 0, 9).is_empty());
    }

    #[test]
    fn pairing_is_seed_deterministic() {
        let g = group_with(vec![1, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(build_pairs(&g, 2, 9), build_pairs(&g, 2, 9));
        assert_ne!(build_pairs(&g, 2, 9), build_pairs(&g, 2, 10));
    }

    #[test]
    fn wrong_operation_detected_at_bifurcation() {
        // Step 1 computed 3 + 4 = 7 mod 5 = 2 instead of 3 - 4 -> 4.
        let me = analyze("1 : 2\n2 : 2\n#### 2");
        assert_eq!(me.bifurcation.index, 1);
        assert_eq!(me.bifurcation.step_text, "1 : 2");
        assert_eq!(me.critique.kind, ErrorKind::WrongOperation);
        assert_eq!(me.critique.text, "wrong-operation 3\n1 : 4");
        assert_eq!(me.heuristic.text, "[HINT] wrong-operation modchain use-correct-op [/HINT]");
        assert_eq!(me.status, MeStatus::Candidate);
    }

    #[test]
    fn wrong_modulus_detected_on_unreduced_value() {
        // Step 2 left 4 * 3 = 12 unreduced.
        let me = analyze("1 : 4\n2 : 12\n#### 12");
        assert_eq!(me.bifurcation.index, 2);
        assert_eq!(me.critique.kind, ErrorKind::WrongModulus);
        assert_eq!(me.critique.text, "wrong-modulus 4\n2 : 2");
    }

    #[test]
    fn wrong_modulus_detected_on_foreign_prime() {
        // Step 2 reduced 12 mod 7 = 5 instead of mod 5.
        let me = analyze("1 : 4\n2 : 5\n#### 5");
        assert_eq!(me.critique.kind, ErrorKind::WrongModulus);
    }

    #[test]
    fn arithmetic_slip_is_the_fallback_kind() {
        // Step 2 value 3 matches no wrong-op result (4+3=2, 4-3=1) and no
        // modulus confusion (12, 5).
        let me = analyze("1 : 4\n2 : 3\n#### 3");
        assert_eq!(me.critique.kind, ErrorKind::ArithmeticSlip);
        assert_eq!(me.heuristic.corrective, "recheck-arithmetic");
    }

    #[test]
    fn unparseable_step_is_a_format_violation() {
        let me = analyze("1 : 4\nmod mod mod\n#### 2");
        // The answer is right but step 2 is garbage; reward for this
        // negative would be 1, yet the oracle still flags step 2 -- the
        // analyzer only sees failed trajectories in practice.
        assert_eq!(me.bifurcation.index, 2);
        assert_eq!(me.critique.kind, ErrorKind::FormatViolation);
    }

    #[test]
    fn answer_only_failure_points_past_last_step() {
        let me = analyze("1 : 4\n2 : 2\n#### 4");
        assert_eq!(me.bifurcation.index, 3);
        assert_eq!(me.bifurcation.step_text, "#### 4");
        assert_eq!(me.critique.kind, ErrorKind::ArithmeticSlip);
        assert_eq!(me.critique.text, "arithmetic-slip 2\n#### 2");
    }

    #[test]
    fn stepless_output_is_a_format_violation_at_step_one() {
        let me = analyze("#### 4");
        assert_eq!(me.bifurcation.index, 1);
        assert_eq!(me.bifurcation.step_text, "");
        assert_eq!(me.critique.kind, ErrorKind::FormatViolation);
        assert_eq!(me.critique.text, "format-violation 3\n1 : 4");
    }

    #[test]
    fn hint_serialization_round_trips() {
        let v = vocab();
        let me = analyze("1 : 2\n2 : 2\n#### 2");
        let tokens = serialize_meta_experience(&v, &me, SerializeMode::HintTokens).unwrap();
        assert_eq!(v.render(&tokens), me.heuristic.text);
        let (kind, family, corrective) = parse_hint(&v.render(&tokens)).unwrap();
        assert_eq!(kind, me.heuristic.kind);
        assert_eq!(family, "modchain");
        assert_eq!(corrective, "use-correct-op");
    }

    #[test]
    fn natural_serialization_embeds_critique_and_hint() {
        let v = vocab();
        let me = analyze("1 : 2\n2 : 2\n#### 2");
        let tokens = serialize_meta_experience(&v, &me, SerializeMode::NaturalLanguage).unwrap();
        let text = v.render(&tokens);
        assert!(text.starts_with("wrong-operation 3\n1 : 4"));
        assert!(text.contains("<sep>"));
        assert!(text.ends_with("[/HINT] <eos>"));
    }

    #[test]
    fn english_critique_fails_serialization_with_symbol_name() {
        let v = vocab();
        let mut me = analyze("1 : 2\n2 : 2\n#### 2");
        me.critique.text = "the operation was subtraction".into();
        match serialize_meta_experience(&v, &me, SerializeMode::NaturalLanguage) {
            Err(MelError::UnknownSymbol(s)) => assert_eq!(s, "the"),
            other => panic!("expected unknown symbol, got {other:?}"),
        }
        // Hint-token serialization still succeeds for the same record.
        assert!(serialize_meta_experience(&v, &me, SerializeMode::HintTokens).is_ok());
    }

    #[test]
    fn hint_grammar_rejects_malformed_text() {
        assert!(parse_hint("[HINT] wrong-operation modchain use-correct-op [/HINT]").is_ok());
        assert!(parse_hint("[HINT] nonsense modchain use-correct-op [/HINT]").is_err());
        assert!(parse_hint("[HINT] wrong-operation modchain [/HINT]").is_err());
        assert!(parse_hint("wrong-operation modchain use-correct-op").is_err());
    }

    #[test]
    fn double_judgement_is_a_contract_violation() {
        let v = vocab();
        let q = query();
        let mut me = analyze("1 : 2\n2 : 2\n#### 2");
        let params = PolicyParams::new(&v, crate::policy::FeatureSpec::default());
        let cfg = ReplayConfig { attempts: 1, temperature: 0.0, max_tokens: 24, seed: 5 };
        let a = ScriptedAnalyst::new(vec![5, 7]);
        a.validate(&v, &mut me, &q, &params, &cfg).unwrap();
        assert_ne!(me.status, MeStatus::Candidate);
        assert!(me.validation.is_some());
        assert!(matches!(
            a.validate(&v, &mut me, &q, &params, &cfg),
            Err(MelError::Contract(_))
        ));
    }

    #[test]
    fn pool_counts_and_retention() {
        let mut pool = MetaExperiencePool::new();
        assert_eq!(pool.retention_ratio(), 0.0);
        let mut a = analyze("1 : 2\n2 : 2\n#### 2");
        a.status = MeStatus::Validated;
        let mut b = analyze("1 : 4\n2 : 3\n#### 3");
        b.status = MeStatus::Rejected;
        pool.record(a);
        pool.record(b.clone());
        pool.record(b);
        assert_eq!(pool.candidates(), 3);
        assert_eq!(pool.validated(), 1);
        assert_eq!(pool.rejected(), 2);
        assert!((pool.retention_ratio() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pool_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let mut pool = MetaExperiencePool::new();
        let mut me = analyze("1 : 2\n2 : 2\n#### 2");
        me.status = MeStatus::Validated;
        pool.record(me);
        pool.save(&path).unwrap();
        let loaded = MetaExperiencePool::load(&path).unwrap();
        assert_eq!(loaded.entries, pool.entries);
        // Saving the loaded pool is byte-identical.
        let path2 = dir.path().join("pool2.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
