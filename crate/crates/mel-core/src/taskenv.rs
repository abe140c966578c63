//! Synthetic verifiable task environment: modular arithmetic chains.
//!
//! A `modchain` query renders as `a0 op1 a1 op2 a2 ... mod m` and asks for
//! the left-to-right value of the chain reduced into `[0, m)`. The expected
//! response lists one intermediate value per line (`t : v_t`) and finishes
//! with `#### <answer>`. Rewards are binary and computed by exact
//! re-evaluation, so there is no reward model anywhere in the loop.
//!
//! The module also owns the token vocabulary, trajectory parsing, the
//! verifier, and the per-step oracle used by the scripted analyst.

use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::rng::{self, stream};

pub type TokenId = u32;

/// Largest modulus the generator accepts. Keeps every number in a query or
/// response at most two digit tokens wide.
pub const MAX_MODULUS: i64 = 97;

/// Answer digits longer than this fail extraction outright (they could not
/// be a reduced chain value and would overflow naive parsing).
const MAX_ANSWER_DIGITS: usize = 12;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Immutable id <-> text bijection over the token set.
///
/// Tokens are whitespace-free strings except the literal newline token
/// `"\n"`, which separates reasoning steps. Numbers are not tokens: they
/// tokenize as digit runs and render by joining adjacent digit tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(MelError::Config("vocabulary must be non-empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(MelError::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// The 32-token vocabulary of the modchain environment.
    pub fn modchain() -> Self {
        let raw: Vec<&str> = vec![
            "<bos>", "<eos>", "<sep>", "<analyze>", "0", "1", "2", "3", "4", "5", "6", "7",
            "8", "9", "+", "-", "*", "mod", ":", "\n", "####", "[HINT]", "[/HINT]",
            "wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation",
            "use-correct-op", "recheck-arithmetic", "apply-modulus", "follow-format",
            "modchain",
        ];
        Vocabulary::new(raw.into_iter().map(String::from).collect())
            .expect("built-in vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    /// Panics on out-of-range ids; ids originate from this vocabulary.
    pub fn text(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.id("<bos>")
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.id("<eos>")
    }

    pub fn sep(&self) -> Option<TokenId> {
        self.id("<sep>")
    }

    pub fn newline(&self) -> Option<TokenId> {
        self.id("\n")
    }

    pub fn answer_marker(&self) -> Option<TokenId> {
        self.id("####")
    }

    /// Tokens whose presence in the context window activates the hint
    /// feature: the hint delimiters and the corrective actions. Error-kind
    /// tokens are deliberately absent so critique text does not flip it.
    pub fn hint_alphabet(&self) -> Vec<TokenId> {
        ["[HINT]", "[/HINT]", "use-correct-op", "recheck-arithmetic", "apply-modulus",
            "follow-format"]
        .iter()
        .filter_map(|t| self.id(t))
        .collect()
    }

    fn is_digit(&self, id: TokenId) -> bool {
        let t = self.text(id);
        t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
    }

    /// Split text into token ids. Words separate on whitespace, `\n` is its
    /// own token, and digit runs decompose into one token per digit.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (li, line) in text.split('\n').enumerate() {
            if li > 0 {
                match self.id("\n") {
                    Some(id) => out.push(id),
                    None => return Err(MelError::UnknownSymbol("\\n".into())),
                }
            }
            for word in line.split_whitespace() {
                if word.chars().all(|c| c.is_ascii_digit()) {
                    for c in word.chars() {
                        let d = self
                            .id(&c.to_string())
                            .ok_or_else(|| MelError::UnknownSymbol(c.to_string()))?;
                        out.push(d);
                    }
                } else {
                    let id = self
                        .id(word)
                        .ok_or_else(|| MelError::UnknownSymbol(word.to_string()))?;
                    out.push(id);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of `tokenize` up to whitespace: adjacent digit tokens join
    /// without a space, the newline token emits a literal newline, and every
    /// other boundary gets a single space.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev: Option<TokenId> = None;
        for &id in tokens {
            let text = self.text(id);
            if text == "\n" {
                out.push('\n');
                prev = Some(id);
                continue;
            }
            if let Some(p) = prev {
                let joined = self.is_digit(p) && self.is_digit(id);
                if self.text(p) != "\n" && !joined {
                    out.push(' ');
                }
            }
            out.push_str(text);
            prev = Some(id);
        }
        out
    }

    fn parse_digit_run(&self, tokens: &[TokenId]) -> Option<i64> {
        if tokens.is_empty() || tokens.len() > MAX_ANSWER_DIGITS {
            return None;
        }
        let mut value: i64 = 0;
        for &id in tokens {
            let t = self.text(id);
            if t.len() != 1 || !t.as_bytes()[0].is_ascii_digit() {
                return None;
            }
            value = value * 10 + (t.as_bytes()[0] - b'0') as i64;
        }
        Some(value)
    }
}

/// Rebuild the text index after deserialization.
pub fn rebuild_vocabulary(mut v: Vocabulary) -> Result<Vocabulary> {
    let tokens = std::mem::take(&mut v.tokens);
    Vocabulary::new(tokens)
}

// ---------------------------------------------------------------------------
// Queries and generation
// ---------------------------------------------------------------------------

/// Chain operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A single verifiable task instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub family: String,
    pub operands: Vec<i64>,
    pub ops: Vec<Op>,
    pub modulus: i64,
    pub ground_truth: i64,
    /// Rendered prompt text (`<bos> a0 op1 a1 ... mod m \n` without markup).
    pub prompt: String,
    #[serde(skip)]
    pub prompt_tokens: Vec<TokenId>,
}

impl Query {
    pub fn chain_len(&self) -> usize {
        self.ops.len()
    }
}

/// Exact left-to-right evaluation: `v_1 = (a0 op1 a1) mod m`, then
/// `v_t = (v_{t-1} op_t a_t) mod m`, each reduced into `[0, m)`.
pub fn chain_values(operands: &[i64], ops: &[Op], modulus: i64) -> Vec<i64> {
    assert_eq!(operands.len(), ops.len() + 1, "chain shape");
    let mut acc = operands[0].rem_euclid(modulus);
    let mut values = Vec::with_capacity(ops.len());
    for (op, &a) in ops.iter().zip(&operands[1..]) {
        acc = op.apply(acc, a).rem_euclid(modulus);
        values.push(acc);
    }
    values
}

fn push_number(vocab: &Vocabulary, out: &mut Vec<TokenId>, n: i64) {
    assert!(n >= 0, "numbers in the environment are non-negative");
    for c in n.to_string().chars() {
        out.push(vocab.id(&c.to_string()).expect("digit token"));
    }
}

/// Canonical prompt tokens for a chain:
/// `<bos> a0 op1 a1 ... op_L a_L mod m \n`.
pub fn prompt_tokens(vocab: &Vocabulary, operands: &[i64], ops: &[Op], modulus: i64) -> Vec<TokenId> {
    let mut out = Vec::new();
    if let Some(b) = vocab.bos() {
        out.push(b);
    }
    push_number(vocab, &mut out, operands[0]);
    for (op, &a) in ops.iter().zip(&operands[1..]) {
        out.push(vocab.id(op.symbol()).expect("op token"));
        push_number(vocab, &mut out, a);
    }
    out.push(vocab.id("mod").expect("mod token"));
    push_number(vocab, &mut out, modulus);
    if let Some(nl) = vocab.newline() {
        out.push(nl);
    }
    out
}

/// The reference response: every step line, the answer marker line, `<eos>`.
pub fn canonical_response(vocab: &Vocabulary, query: &Query) -> Vec<TokenId> {
    let values = chain_values(&query.operands, &query.ops, query.modulus);
    let nl = vocab.newline().expect("newline token");
    let mut out = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        push_number(vocab, &mut out, (i + 1) as i64);
        out.push(vocab.id(":").expect("colon token"));
        push_number(vocab, &mut out, v);
        out.push(nl);
    }
    out.push(vocab.answer_marker().expect("answer marker"));
    push_number(vocab, &mut out, query.ground_truth);
    if let Some(e) = vocab.eos() {
        out.push(e);
    }
    out
}

fn is_prime(n: i64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Generation parameters for a task batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub family: String,
    pub count: usize,
    pub seed: u64,
    /// Inclusive range of chain lengths (number of operations).
    pub difficulty: (usize, usize),
    /// Candidate moduli; each must be prime and at most `MAX_MODULUS`.
    pub moduli: Vec<i64>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            family: "modchain".into(),
            count: 100,
            seed: 0,
            difficulty: (2, 3),
            moduli: vec![5, 7],
        }
    }
}

impl GenSpec {
    pub fn difficulty_range(&self) -> RangeInclusive<usize> {
        self.difficulty.0..=self.difficulty.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.family != "modchain" {
            return Err(MelError::Config(format!("unknown task family `{}`", self.family)));
        }
        if self.count == 0 {
            return Err(MelError::Config("task count must be at least 1".into()));
        }
        let (lo, hi) = self.difficulty;
        if lo == 0 || lo > hi {
            return Err(MelError::Config(format!(
                "difficulty range {lo}..={hi} must satisfy 1 <= lo <= hi"
            )));
        }
        if self.moduli.is_empty() {
            return Err(MelError::Config("modulus set must be non-empty".into()));
        }
        for &m in &self.moduli {
            if !is_prime(m) || m > MAX_MODULUS {
                return Err(MelError::Config(format!(
                    "modulus {m} must be a prime at most {MAX_MODULUS}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministically generate `spec.count` queries. Equal specs produce
/// byte-equal batches; ids are unique and embed the seed so batches from
/// different seeds never collide.
pub fn generate_tasks(vocab: &Vocabulary, spec: &GenSpec) -> Result<Vec<Query>> {
    spec.validate()?;
    let mut rng = rng::stream_rng(rng::derive_seed(spec.seed, &[stream::TASK_GEN]));
    let (lo, hi) = spec.difficulty;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let len = rng.random_range(lo..=hi);
        let modulus = spec.moduli[rng.random_range(0..spec.moduli.len())];
        let operands: Vec<i64> = (0..=len).map(|_| rng.random_range(0..modulus)).collect();
        let ops: Vec<Op> = (0..len)
            .map(|_| Op::ALL[rng.random_range(0..Op::ALL.len())])
            .collect();
        let values = chain_values(&operands, &ops, modulus);
        let ground_truth = *values.last().expect("len >= 1");
        let tokens = prompt_tokens(vocab, &operands, &ops, modulus);
        out.push(Query {
            id: format!("{}-s{}-q{:05}", spec.family, spec.seed, i),
            family: spec.family.clone(),
            operands,
            ops,
            modulus,
            ground_truth,
            prompt: vocab.render(&tokens),
            prompt_tokens: tokens,
        });
    }
    Ok(out)
}

/// Write queries as line-delimited JSON.
pub fn save_tasks(path: &Path, tasks: &[Query]) -> Result<()> {
    let mut buf = String::new();
    for t in tasks {
        buf.push_str(&serde_json::to_string(t).map_err(|e| MelError::Data(e.to_string()))?);
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a task file, re-deriving prompt tokens and checking each record's
/// ground truth against re-evaluation.
pub fn load_tasks(vocab: &Vocabulary, path: &Path) -> Result<Vec<Query>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut q: Query = serde_json::from_str(line).map_err(|e| {
            MelError::Data(format!("{}:{}: bad task record: {e}", path.display(), ln + 1))
        })?;
        if q.operands.len() != q.ops.len() + 1 || q.ops.is_empty() {
            return Err(MelError::Data(format!(
                "{}:{}: task `{}` has a malformed chain",
                path.display(),
                ln + 1,
                q.id
            )));
        }
        let values = chain_values(&q.operands, &q.ops, q.modulus);
        let expect = *values.last().unwrap();
        if expect != q.ground_truth {
            return Err(MelError::Data(format!(
                "{}:{}: task `{}` ground truth {} disagrees with re-evaluation {}",
                path.display(),
                ln + 1,
                q.id,
                q.ground_truth,
                expect
            )));
        }
        q.prompt_tokens = prompt_tokens(vocab, &q.operands, &q.ops, q.modulus);
        out.push(q);
    }
    if out.is_empty() {
        return Err(MelError::Data(format!("{}: no tasks", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories, parsing, verification
// ---------------------------------------------------------------------------

/// One parsed reasoning step (`t : v`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based position of the step line in the response.
    pub index: usize,
    /// Verbatim rendered text of the step line.
    pub text: String,
    /// Parsed step value, if the line matches `<digits> : <digits>`.
    pub value: Option<i64>,
}

/// A sampled response: generated tokens (prompt excluded), their log
/// probabilities under the temperature-1 policy, and the parsed structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub token_log_probs: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<i64>,
}

fn parse_step_segment(vocab: &Vocabulary, seg: &[TokenId]) -> Option<i64> {
    // Exactly `<digits> : <digits>`.
    let colon = vocab.id(":")?;
    let pos = seg.iter().position(|&t| t == colon)?;
    let (label, rest) = seg.split_at(pos);
    let value = &rest[1..];
    if rest[1..].iter().any(|&t| t == colon) {
        return None;
    }
    vocab.parse_digit_run(label)?;
    vocab.parse_digit_run(value)
}

/// Extract the final answer from the tokens after the last `####` marker:
/// surrounding newline tokens and one trailing `<eos>` are ignored, and the
/// remainder must be a single digit run.
fn extract_answer(vocab: &Vocabulary, after: &[TokenId]) -> Option<i64> {
    let mut slice = after;
    if let Some(e) = vocab.eos() {
        if slice.last() == Some(&e) {
            slice = &slice[..slice.len() - 1];
        }
    }
    if let Some(nl) = vocab.newline() {
        while slice.last() == Some(&nl) {
            slice = &slice[..slice.len() - 1];
        }
        while slice.first() == Some(&nl) {
            slice = &slice[1..];
        }
    }
    vocab.parse_digit_run(slice)
}

/// Structure generated tokens into step records and a final answer.
///
/// The step region is everything before the last `####` marker, split on
/// newline tokens, with a single trailing empty segment (from a terminating
/// newline) dropped. Tokens after the last marker go through answer
/// extraction. Without any marker the whole output is step region and the
/// final answer is absent.
pub fn parse_trajectory(
    vocab: &Vocabulary,
    tokens: Vec<TokenId>,
    token_log_probs: Vec<f64>,
) -> Trajectory {
    assert_eq!(tokens.len(), token_log_probs.len(), "one log prob per token");
    let marker = vocab.answer_marker();
    let marker_pos = marker.and_then(|m| tokens.iter().rposition(|&t| t == m));
    let (mut step_region, answer_region): (&[TokenId], Option<&[TokenId]>) = match marker_pos {
        Some(p) => (&tokens[..p], Some(&tokens[p + 1..])),
        None => (&tokens[..], None),
    };
    // A trailing <eos> in the step region is structure, not content.
    if let Some(e) = vocab.eos() {
        if step_region.last() == Some(&e) {
            step_region = &step_region[..step_region.len() - 1];
        }
    }

    let mut segments: Vec<&[TokenId]> = Vec::new();
    if let Some(nl) = vocab.newline() {
        let mut start = 0;
        for (i, &t) in step_region.iter().enumerate() {
            if t == nl {
                segments.push(&step_region[start..i]);
                start = i + 1;
            }
        }
        segments.push(&step_region[start..]);
    } else {
        segments.push(step_region);
    }
    if segments.len() > 1 && segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    if segments.len() == 1 && segments[0].is_empty() {
        segments.clear();
    }

    let steps = segments
        .iter()
        .enumerate()
        .map(|(i, seg)| StepRecord {
            index: i + 1,
            text: vocab.render(seg),
            value: parse_step_segment(vocab, seg),
        })
        .collect();

    let final_answer = answer_region.and_then(|a| extract_answer(vocab, a));
    Trajectory { tokens, token_log_probs, steps, final_answer }
}

/// Outcome of binary verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub reward: u8,
    /// True when no well-formed answer followed the last marker (or no
    /// marker existed at all).
    pub extraction_failed: bool,
}

/// Verify a parsed trajectory against the ground truth. Total: any token
/// sequence yields reward 0 or 1.
pub fn verify(trajectory: &Trajectory, ground_truth: i64) -> VerificationResult {
    match trajectory.final_answer {
        Some(v) => VerificationResult { reward: (v == ground_truth) as u8, extraction_failed: false },
        None => VerificationResult { reward: 0, extraction_failed: true },
    }
}

/// Text-level verification for responses produced outside the toy
/// vocabulary (e.g. a remote analyst's replay). Takes the substring after
/// the last `####`, trims whitespace, and requires a single decimal integer
/// (leading zeros allowed).
pub fn verify_text(text: &str, ground_truth: i64) -> VerificationResult {
    let failed = VerificationResult { reward: 0, extraction_failed: true };
    let Some(pos) = text.rfind("####") else {
        return failed;
    };
    let tail = text[pos + 4..].trim();
    if tail.is_empty() || tail.len() > MAX_ANSWER_DIGITS + 1 {
        return failed;
    }
    let (sign, digits) = match tail.strip_prefix('-') {
        Some(rest) => (-1i64, rest),
        None => (1i64, tail.strip_prefix('+').unwrap_or(tail)),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return failed;
    }
    match digits.parse::<i64>() {
        Ok(v) => VerificationResult {
            reward: (sign * v == ground_truth) as u8,
            extraction_failed: false,
        },
        Err(_) => failed,
    }
}

// ---------------------------------------------------------------------------
// Step oracle
// ---------------------------------------------------------------------------

/// Per-step comparison of a trajectory against exact re-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOracleReport {
    /// Correct chain values `v_1 ... v_L`.
    pub correct_values: Vec<i64>,
    /// Correctness per 1-based step index up to `max(L, parsed steps)`.
    /// Missing, unparseable, and extra steps all count as incorrect.
    pub per_step_correct: Vec<bool>,
    /// Smallest incorrect index, or `None` when every step matches or the
    /// trajectory has no step records at all.
    pub first_deviation: Option<usize>,
}

pub fn step_oracle(query: &Query, trajectory: &Trajectory) -> StepOracleReport {
    let correct_values = chain_values(&query.operands, &query.ops, query.modulus);
    let span = correct_values.len().max(trajectory.steps.len());
    let mut per_step_correct = Vec::with_capacity(span);
    for t in 1..=span {
        let ok = t <= correct_values.len()
            && trajectory
                .steps
                .get(t - 1)
                .and_then(|s| s.value)
                .is_some_and(|v| v == correct_values[t - 1]);
        per_step_correct.push(ok);
    }
    let first_deviation = if trajectory.steps.is_empty() {
        None
    } else {
        per_step_correct.iter().position(|&ok| !ok).map(|i| i + 1)
    };
    StepOracleReport { correct_values, per_step_correct, first_deviation }
}
