//! Differentiable log-linear token policy.
//!
//! The policy scores the next token as a sum of feature weights over a
//! sliding window of the last `W` context tokens and softmaxes the result.
//! Features are the window's suffix n-grams (up to `max_ngram`), a phase
//! bucket (tokens since the last newline inside the window), and a flag
//! raised when the context *opens* with a hint token — the one non-local
//! feature, so a hint block prepended to the prompt stays visible after it
//! leaves the window, while hint tokens that merely occur mid-sequence
//! (quoted inside a study text, say) do not masquerade as injected advice.
//! Log probabilities have the exact gradient
//!
//! `d log pi(u | ctx) / d w[f][v] = phi_f(ctx) * (1{v == u} - pi(v | ctx))`
//!
//! which the training loop consumes directly; there is no autodiff.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::rng;
use crate::taskenv::{parse_trajectory, TokenId, Trajectory, Vocabulary};

/// Context feature. `Ngram` holds the window suffix it matches, most recent
/// token last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    Ngram(Vec<TokenId>),
    Phase(u8),
    HintPresent,
}

impl Feature {
    /// Stable text key used in checkpoint files.
    pub fn key(&self) -> String {
        match self {
            Feature::Ngram(ts) => {
                let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                format!("ngram:{}", parts.join("."))
            }
            Feature::Phase(p) => format!("phase:{p}"),
            Feature::HintPresent => "hint".into(),
        }
    }

    pub fn parse_key(s: &str) -> Result<Feature> {
        if s == "hint" {
            return Ok(Feature::HintPresent);
        }
        if let Some(rest) = s.strip_prefix("phase:") {
            let p: u8 = rest
                .parse()
                .map_err(|_| MelError::Data(format!("bad phase feature key `{s}`")))?;
            return Ok(Feature::Phase(p));
        }
        if let Some(rest) = s.strip_prefix("ngram:") {
            let ts: Result<Vec<TokenId>> = rest
                .split('.')
                .map(|p| {
                    p.parse::<TokenId>()
                        .map_err(|_| MelError::Data(format!("bad ngram feature key `{s}`")))
                })
                .collect();
            let ts = ts?;
            if ts.is_empty() {
                return Err(MelError::Data(format!("empty ngram feature key `{s}`")));
            }
            return Ok(Feature::Ngram(ts));
        }
        Err(MelError::Data(format!("unknown feature key `{s}`")))
    }
}

/// Which features the policy extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Context window length W.
    pub window: usize,
    /// Longest suffix n-gram.
    pub max_ngram: usize,
    /// Enable the phase bucket feature.
    pub phase: bool,
    /// Enable the hint-presence feature.
    pub hint: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { window: 6, max_ngram: 4, phase: true, hint: true }
    }
}

/// Mutable policy parameters: one weight row per observed feature. Absent
/// rows are zero, so a fresh policy is uniform over the vocabulary.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    vocab_size: usize,
    spec: FeatureSpec,
    eos: Option<TokenId>,
    newline: Option<TokenId>,
    hint_tokens: Vec<TokenId>,
    weights: HashMap<Feature, Vec<f64>>,
}

/// Immutable copy of the parameters taken at the start of an optimization
/// step; rollouts and importance ratios are computed against it.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
}

impl PolicySnapshot {
    pub fn freeze(params: &PolicyParams) -> Self {
        PolicySnapshot { params: params.clone() }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

/// Decoding controls for one sampling call.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodingConfig {
    /// 0 means greedy argmax with ties broken toward the lowest token id.
    pub temperature: f64,
    /// Hard cap on generated tokens; generation also stops at `<eos>`.
    pub max_tokens: usize,
    pub seed: u64,
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - max - log_sum).collect()
}

impl PolicyParams {
    /// Fresh zero-weight policy bound to a vocabulary's structural tokens.
    pub fn new(vocab: &Vocabulary, spec: FeatureSpec) -> Self {
        let mut hint_tokens = vocab.hint_alphabet();
        hint_tokens.sort_unstable();
        PolicyParams {
            vocab_size: vocab.size(),
            spec,
            eos: vocab.eos(),
            newline: vocab.newline(),
            hint_tokens,
            weights: HashMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn weight(&self, f: &Feature, token: TokenId) -> f64 {
        self.weights.get(f).map_or(0.0, |row| row[token as usize])
    }

    pub fn set_weight(&mut self, f: Feature, token: TokenId, value: f64) {
        let row = self.weights.entry(f).or_insert_with(|| vec![0.0; self.vocab_size]);
        row[token as usize] = value;
    }

    pub fn feature_count(&self) -> usize {
        self.weights.len()
    }

    /// Features active for a context. N-grams and phase depend on the last
    /// `W` tokens only; hint presence looks at the first token, which opens
    /// a hint block exactly when replay prepends one.
    pub fn active_features(&self, context: &[TokenId]) -> Vec<Feature> {
        let w = context.len().min(self.spec.window);
        let win = &context[context.len() - w..];
        let mut feats = Vec::with_capacity(self.spec.max_ngram + 2);
        for k in 1..=self.spec.max_ngram.min(win.len()) {
            feats.push(Feature::Ngram(win[win.len() - k..].to_vec()));
        }
        if self.spec.phase {
            let since_newline = match self.newline {
                Some(nl) => win
                    .iter()
                    .rposition(|&t| t == nl)
                    .map(|p| win.len() - 1 - p)
                    .unwrap_or(win.len()),
                None => win.len(),
            };
            feats.push(Feature::Phase(since_newline.min(u8::MAX as usize) as u8));
        }
        if self.spec.hint
            && context.first().is_some_and(|t| self.hint_tokens.binary_search(t).is_ok())
        {
            feats.push(Feature::HintPresent);
        }
        feats
    }

    /// Sum of active feature rows; the temperature-1 softmax input.
    pub fn logits(&self, context: &[TokenId]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for f in self.active_features(context) {
            if let Some(row) = self.weights.get(&f) {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w;
                }
            }
        }
        out
    }

    /// Temperature-1 next-token distribution. Sums to 1 up to float
    /// rounding for every context.
    pub fn token_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        log_softmax(&self.logits(context)).iter().map(|lp| lp.exp()).collect()
    }

    /// Per-token log probabilities of `target` continued from `context`,
    /// all at temperature 1.
    pub fn sequence_log_prob(&self, context: &[TokenId], target: &[TokenId]) -> Vec<f64> {
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(target.len());
        for &tok in target {
            let lp = log_softmax(&self.logits(&ctx));
            out.push(lp[tok as usize]);
            ctx.push(tok);
        }
        out
    }

    /// Exact gradient of the summed log probability of `target` given
    /// `context` with respect to every weight.
    pub fn log_prob_grad(&self, context: &[TokenId], target: &[TokenId]) -> GradMap {
        let mut grad = GradMap::new(self.vocab_size);
        let mut ctx = context.to_vec();
        for &tok in target {
            let feats = self.active_features(&ctx);
            let dist = self.token_distribution(&ctx);
            for f in feats {
                let row = grad.row_mut(f);
                for (r, p) in row.iter_mut().zip(&dist) {
                    *r -= p;
                }
                row[tok as usize] += 1.0;
            }
            ctx.push(tok);
        }
        grad
    }

    /// Gradient-ascent update: `w += lr * g`.
    pub fn apply_gradient(&mut self, grad: &GradMap, lr: f64) {
        for (f, row) in grad.rows() {
            let target = self
                .weights
                .entry(f.clone())
                .or_insert_with(|| vec![0.0; self.vocab_size]);
            for (t, g) in target.iter_mut().zip(row) {
                *t += lr * g;
            }
        }
    }

    /// Canonical text serialization: header, then one `key token weight`
    /// line per nonzero weight, sorted. Serializing, reloading, and
    /// serializing again is byte-identical.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("melpolicy 1\n");
        let _ = writeln!(out, "vocab_size {}", self.vocab_size);
        let _ = writeln!(out, "window {}", self.spec.window);
        let _ = writeln!(out, "max_ngram {}", self.spec.max_ngram);
        let _ = writeln!(out, "phase {}", self.spec.phase);
        let _ = writeln!(out, "hint {}", self.spec.hint);
        let _ = writeln!(out, "eos {}", opt_id(self.eos));
        let _ = writeln!(out, "newline {}", opt_id(self.newline));
        let hints: Vec<String> = self.hint_tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            out,
            "hint_tokens {}",
            if hints.is_empty() { "none".into() } else { hints.join(",") }
        );
        let mut entries: Vec<(&Feature, usize, f64)> = Vec::new();
        for (f, row) in &self.weights {
            for (tok, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    entries.push((f, tok, w));
                }
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let _ = writeln!(out, "weights {}", entries.len());
        for (f, tok, w) in entries {
            let _ = writeln!(out, "{} {} {}", f.key(), tok, w);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "melpolicy 1" {
            return Err(MelError::Data(format!("bad policy header `{header}`")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| MelError::Data(format!("policy file truncated before `{name}`")))?;
            line.strip_prefix(&format!("{name} "))
                .map(str::to_string)
                .ok_or_else(|| MelError::Data(format!("expected `{name}` line, got `{line}`")))
        };
        let vocab_size: usize = parse_field(&field("vocab_size")?, "vocab_size")?;
        let window: usize = parse_field(&field("window")?, "window")?;
        let max_ngram: usize = parse_field(&field("max_ngram")?, "max_ngram")?;
        let phase: bool = parse_field(&field("phase")?, "phase")?;
        let hint: bool = parse_field(&field("hint")?, "hint")?;
        let eos = parse_opt_id(&field("eos")?)?;
        let newline = parse_opt_id(&field("newline")?)?;
        let hints_raw = field("hint_tokens")?;
        let hint_tokens: Vec<TokenId> = if hints_raw == "none" {
            Vec::new()
        } else {
            hints_raw
                .split(',')
                .map(|p| parse_field::<TokenId>(p, "hint_tokens"))
                .collect::<Result<_>>()?
        };
        let count: usize = parse_field(&field("weights")?, "weights")?;
        let mut params = PolicyParams {
            vocab_size,
            spec: FeatureSpec { window, max_ngram, phase, hint },
            eos,
            newline,
            hint_tokens,
            weights: HashMap::new(),
        };
        let mut seen = 0usize;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(key), Some(tok), Some(w), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(MelError::Data(format!("bad weight line `{line}`")));
            };
            let f = Feature::parse_key(key)?;
            let tok: usize = parse_field(tok, "weight token")?;
            if tok >= vocab_size {
                return Err(MelError::Data(format!("weight token {tok} out of range")));
            }
            let w: f64 = parse_field(w, "weight value")?;
            params.set_weight(f, tok as TokenId, w);
            seen += 1;
        }
        if seen != count {
            return Err(MelError::Data(format!(
                "policy file declared {count} weights but carried {seen}"
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn opt_id(v: Option<TokenId>) -> String {
    v.map_or_else(|| "none".into(), |t| t.to_string())
}

fn parse_opt_id(s: &str) -> Result<Option<TokenId>> {
    if s == "none" {
        Ok(None)
    } else {
        Ok(Some(parse_field(s, "token id")?))
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse()
        .map_err(|_| MelError::Data(format!("bad {name} value `{s}` in policy file")))
}

/// Sparse gradient with the same row layout as the policy weights.
#[derive(Debug, Clone)]
pub struct GradMap {
    vocab_size: usize,
    rows: HashMap<Feature, Vec<f64>>,
}

impl GradMap {
    pub fn new(vocab_size: usize) -> Self {
        GradMap { vocab_size, rows: HashMap::new() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row_mut(&mut self, f: Feature) -> &mut Vec<f64> {
        self.rows.entry(f).or_insert_with(|| vec![0.0; self.vocab_size])
    }

    pub fn get(&self, f: &Feature, token: TokenId) -> f64 {
        self.rows.get(f).map_or(0.0, |r| r[token as usize])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Feature, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradMap, scale: f64) {
        assert_eq!(self.vocab_size, other.vocab_size, "gradient shapes");
        for (f, row) in &other.rows {
            let target = self.row_mut(f.clone());
            for (t, v) in target.iter_mut().zip(row) {
                *t += scale * v;
            }
        }
    }

    /// Euclidean norm, accumulated in sorted feature order so the result is
    /// bit-stable across runs (HashMap iteration order is not).
    pub fn l2_norm(&self) -> f64 {
        let mut keys: Vec<&Feature> = self.rows.keys().collect();
        keys.sort();
        keys.iter()
            .flat_map(|k| self.rows[*k].iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sample one trajectory. Draws come from a ChaCha stream seeded with
/// `cfg.seed` only, so a (params, prompt, config) triple fully determines
/// the result. Token log probabilities are recorded at temperature 1
/// regardless of the sampling temperature.
pub fn sample(
    vocab: &Vocabulary,
    params: &PolicyParams,
    prompt: &[TokenId],
    cfg: &DecodingConfig,
) -> Trajectory {
    let mut rng = rng::stream_rng(cfg.seed);
    let mut ctx = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    for _ in 0..cfg.max_tokens {
        let logits = params.logits(&ctx);
        let base_lp = log_softmax(&logits);
        let tok = if cfg.temperature <= 0.0 {
            greedy_pick(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|x| x / cfg.temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick as TokenId
        };
        tokens.push(tok);
        lps.push(base_lp[tok as usize]);
        ctx.push(tok);
        if params.eos == Some(tok) {
            break;
        }
    }
    parse_trajectory(vocab, tokens, lps)
}

fn greedy_pick(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}
