//! Shared oracles for the integration suites: a central finite-difference
//! gradient checker, an exact big-integer chain evaluator, and
//! independently coded policy-gradient references.

#![allow(dead_code)] // each integration binary uses its own subset

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use mel_core::metaexp::remote::{RemoteAnalyst, RemoteConfig, SECTION_HEADINGS};
use mel_core::policy::{Feature, FeatureSpec, GradMap, PolicyParams};
use mel_core::rng;
use mel_core::taskenv::{self, Op, Query, TokenId, Trajectory, Vocabulary};
use num_bigint::BigInt;
use rand::Rng;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct FdReport {
    pub coords: usize,
    pub max_rel_err: f64,
}

/// Central finite-difference check of `analytic` against the scalar `f` at
/// `params`, over the given weight coordinates. The relative error uses a
/// floor so exactly-zero coordinates are still compared meaningfully.
pub fn check_gradient<F>(
    params: &PolicyParams,
    analytic: &GradMap,
    coords: &[(Feature, TokenId)],
    mut f: F,
) -> FdReport
where
    F: FnMut(&PolicyParams) -> f64,
{
    assert!(!coords.is_empty(), "nothing to check");
    let mut max_rel_err: f64 = 0.0;
    for (feat, tok) in coords {
        let w0 = params.weight(feat, *tok);
        let mut plus = params.clone();
        plus.set_weight(feat.clone(), *tok, w0 + FD_H);
        let mut minus = params.clone();
        minus.set_weight(feat.clone(), *tok, w0 - FD_H);
        let fd = (f(&plus) - f(&minus)) / (2.0 * FD_H);
        let g = analytic.get(feat, *tok);
        let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
        max_rel_err = max_rel_err.max(err);
    }
    FdReport { coords: coords.len(), max_rel_err }
}

/// Every weight coordinate the gradient touches, capped by deterministic
/// subsampling so instance runtimes stay bounded.
pub fn grad_coords(grad: &GradMap, cap: usize, seed: u64) -> Vec<(Feature, TokenId)> {
    let mut coords: Vec<(Feature, TokenId)> = Vec::new();
    let mut feats: Vec<&Feature> = grad.rows().map(|(f, _)| f).collect();
    feats.sort();
    for f in feats {
        for t in 0..grad.vocab_size() {
            coords.push((f.clone(), t as TokenId));
        }
    }
    if coords.len() > cap {
        let mut rng = rng::stream_rng(seed);
        let picked = rand::seq::index::sample(&mut rng, coords.len(), cap);
        coords = picked.into_iter().map(|i| coords[i].clone()).collect();
    }
    coords
}

/// Give every feature active anywhere along (context, continuation) a
/// small random weight, keeping softmaxes well away from saturation.
pub fn randomize_along(
    params: &mut PolicyParams,
    context: &[TokenId],
    continuation: &[TokenId],
    scale: f64,
    seed: u64,
) {
    let mut rng = rng::stream_rng(seed);
    let mut ctx = context.to_vec();
    for &tok in continuation {
        for f in params.active_features(&ctx) {
            for t in 0..params.vocab_size() {
                let w: f64 = rng.random_range(-scale..scale);
                params.set_weight(f.clone(), t as TokenId, w);
            }
        }
        ctx.push(tok);
    }
}

/// Exact left-to-right chain evaluation in arbitrary precision:
/// `(((a0 mod m) op1 a1) mod m ...)`, the non-negative remainder after
/// each operation (one value per op, initial residue not included).
pub fn bigint_chain(operands: &[i64], ops: &[Op], modulus: i64) -> Vec<i64> {
    let m = BigInt::from(modulus);
    let rem_euclid = |x: &BigInt| ((x % &m) + &m) % &m;
    let mut acc = rem_euclid(&BigInt::from(operands[0]));
    let mut values = Vec::with_capacity(ops.len());
    for (op, &a) in ops.iter().zip(&operands[1..]) {
        let rhs = BigInt::from(a);
        let raw = match op {
            Op::Add => &acc + &rhs,
            Op::Sub => &acc - &rhs,
            Op::Mul => &acc * &rhs,
        };
        acc = rem_euclid(&raw);
        values.push(big_to_i64(&acc));
    }
    values
}

fn big_to_i64(x: &BigInt) -> i64 {
    let (sign, digits) = x.to_u64_digits();
    let mag = match digits.len() {
        0 => 0u64,
        1 => digits[0],
        _ => panic!("chain value out of i64 range"),
    };
    match sign {
        num_bigint::Sign::Minus => -(mag as i64),
        _ => mag as i64,
    }
}

/// d/dw of `sum_t log pi(target_t | prefix)` computed straight from the
/// softmax identity `phi_f(ctx) * (1[u = y] - pi(u | ctx))`, independent of
/// the library's gradient code.
pub fn log_prob_grad_oracle(
    params: &PolicyParams,
    prompt: &[TokenId],
    target: &[TokenId],
) -> GradMap {
    let mut grad = GradMap::new(params.vocab_size());
    let mut ctx = prompt.to_vec();
    for &y in target {
        let probs = params.token_distribution(&ctx);
        for f in params.active_features(&ctx) {
            let row = grad.row_mut(f);
            for (u, p) in probs.iter().enumerate() {
                let indicator = if u == y as usize { 1.0 } else { 0.0 };
                row[u] += indicator - p;
            }
        }
        ctx.push(y);
    }
    grad
}

/// Group-standardized advantages recomputed from first principles.
pub fn advantage_oracle(rewards: &[u8]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|&r| (r as f64 - mean) / std.max(1e-6)).collect()
}

/// Plain REINFORCE over a batch of groups: token-mean advantage-weighted
/// log-prob gradients, averaged over the group and over groups. Equals the
/// clipped-surrogate gradient when the live params sit at the snapshot.
pub fn reinforce_oracle(
    params: &PolicyParams,
    groups: &[(Vec<TokenId>, Vec<Trajectory>, Vec<u8>)],
) -> GradMap {
    let mut grad = GradMap::new(params.vocab_size());
    let group_scale = 1.0 / groups.len() as f64;
    for (prompt, trajectories, rewards) in groups {
        let adv = advantage_oracle(rewards);
        let traj_scale = group_scale / trajectories.len() as f64;
        for (traj, &a) in trajectories.iter().zip(&adv) {
            if a == 0.0 || traj.tokens.is_empty() {
                continue;
            }
            let g = log_prob_grad_oracle(params, prompt, &traj.tokens);
            grad.add_scaled(&g, traj_scale * a / traj.tokens.len() as f64);
        }
    }
    grad
}

/// Constant-reward-1 policy gradient over (context, target) pairs: the
/// mean of token-averaged log-prob gradients.
pub fn constant_reward_oracle(
    params: &PolicyParams,
    entries: &[(Vec<TokenId>, Vec<TokenId>)],
) -> GradMap {
    let mut grad = GradMap::new(params.vocab_size());
    let scale = 1.0 / entries.len() as f64;
    for (context, target) in entries {
        let g = log_prob_grad_oracle(params, context, target);
        grad.add_scaled(&g, scale / target.len() as f64);
    }
    grad
}

/// Parse raw response text into a trajectory with dummy log probs (every
/// consumer under test recomputes probabilities from parameters).
pub fn traj_from_text(vocab: &mel_core::taskenv::Vocabulary, text: &str) -> Trajectory {
    let tokens = vocab.tokenize(text).expect("response text stays in-vocabulary");
    let lp = vec![-0.5; tokens.len()];
    mel_core::taskenv::parse_trajectory(vocab, tokens, lp)
}

/// The canonical solution as response text: step lines, marker, answer,
/// eos.
pub fn canonical_text(q: &mel_core::taskenv::Query) -> String {
    let values = mel_core::taskenv::chain_values(&q.operands, &q.ops, q.modulus);
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{} : {}\n", i + 1, v));
    }
    out.push_str(&format!("#### {} <eos>", q.ground_truth));
    out
}

/// Ways a synthetic negative trajectory can go wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// One step value bumped by one; later steps and the answer also
    /// reflect failure.
    ValueSlip { step: usize },
    /// Steps all correct, final answer off by one.
    AnswerOnly,
    /// Marker line missing entirely.
    NoMarker,
    /// No steps at all, just a wrong marker line.
    BareWrongAnswer,
}

/// Render a failing response of the requested shape.
pub fn corrupted_text(q: &mel_core::taskenv::Query, corruption: Corruption) -> String {
    let values = mel_core::taskenv::chain_values(&q.operands, &q.ops, q.modulus);
    let wrong = (q.ground_truth + 1).rem_euclid(q.modulus);
    match corruption {
        Corruption::ValueSlip { step } => {
            let mut out = String::new();
            for (i, v) in values.iter().enumerate() {
                let shown =
                    if i + 1 == step { (v + 1).rem_euclid(q.modulus) } else { *v };
                out.push_str(&format!("{} : {}\n", i + 1, shown));
            }
            out.push_str(&format!("#### {wrong} <eos>"));
            out
        }
        Corruption::AnswerOnly => {
            let mut out = String::new();
            for (i, v) in values.iter().enumerate() {
                out.push_str(&format!("{} : {}\n", i + 1, v));
            }
            out.push_str(&format!("#### {wrong} <eos>"));
            out
        }
        Corruption::NoMarker => {
            let mut out = String::new();
            for (i, v) in values.iter().enumerate() {
                out.push_str(&format!("{} : {}\n", i + 1, v));
            }
            out.push_str("<eos>");
            out
        }
        Corruption::BareWrongAnswer => format!("#### {wrong} <eos>"),
    }
}

/// A reward-mixed rollout group built from the canonical solution and
/// synthetic failures, bypassing sampling.
pub fn synthetic_group(
    vocab: &mel_core::taskenv::Vocabulary,
    q: &mel_core::taskenv::Query,
    corruptions: &[Corruption],
    positives: usize,
) -> mel_core::grpo::RolloutGroup {
    let mut trajectories = Vec::new();
    for _ in 0..positives {
        trajectories.push(traj_from_text(vocab, &canonical_text(q)));
    }
    for c in corruptions {
        trajectories.push(traj_from_text(vocab, &corrupted_text(q, *c)));
    }
    let rewards: Vec<u8> = trajectories
        .iter()
        .map(|t| mel_core::taskenv::verify(t, q.ground_truth).reward)
        .collect();
    mel_core::grpo::RolloutGroup {
        query_id: q.id.clone(),
        prompt_tokens: q.prompt_tokens.clone(),
        trajectories,
        rewards,
    }
}

/// Tiny sequential HTTP/1.1 stub: serves one canned (status, text) reply
/// per connection and records every request it saw.
pub struct StubServer {
    pub endpoint: String,
    requests: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let endpoint = format!("http://{}/generate", listener.local_addr().unwrap());
        let requests: Arc<Mutex<Vec<String>>> = Arc::default();
        let seen = requests.clone();
        let handle = std::thread::spawn(move || {
            let mut queue: VecDeque<(u16, String)> = replies.into();
            while let Some((status, text)) = queue.pop_front() {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                while let Ok(n) = stream.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    if request_complete(&buf) {
                        break;
                    }
                }
                seen.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
                let body = serde_json::json!({ "text": text }).to_string();
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        StubServer { endpoint, requests, handle: Some(handle) }
    }

    pub fn analyst(&self) -> RemoteAnalyst {
        RemoteAnalyst::new(RemoteConfig {
            endpoint: self.endpoint.clone(),
            timeout_ms: 2_000,
            retries: 2,
            ..RemoteConfig::default()
        })
        .unwrap()
    }

    pub fn request_bodies(&self) -> Vec<serde_json::Value> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|raw| {
                let body = raw.split("\r\n\r\n").nth(1).expect("request has a body");
                serde_json::from_str(body).expect("request body is JSON")
            })
            .collect()
    }

    pub fn raw_requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }

    pub fn finish(mut self) {
        if let Some(h) = self.handle.take() {
            h.join().expect("stub thread");
        }
    }
}

fn request_complete(buf: &[u8]) -> bool {
    let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") else {
        return false;
    };
    let head = String::from_utf8_lossy(&buf[..pos]);
    for line in head.lines() {
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                if let Ok(n) = value.trim().parse::<usize>() {
                    return buf.len() >= pos + 4 + n;
                }
            }
        }
    }
    true
}

/// A well-formed four-section analysis naming a wrong operation at step 2.
pub fn good_analysis() -> String {
    format!(
        "{}\nAt step 2 the failing attempt used the wrong operation, adding \
         instead of multiplying.\n\n{}\nThe successful attempt applied each \
         operation left to right and reduced after every step.\n\n{}\nI \
         rushed the operator and must slow down at each symbol.\n\n{}\nBefore \
         writing a step, re-read the operator between the operands.\n",
        SECTION_HEADINGS[0], SECTION_HEADINGS[1], SECTION_HEADINGS[2], SECTION_HEADINGS[3]
    )
}

/// A single fixed task plus weights that follow its canonical response at
/// roughly even odds per trajectory, so sampled groups mix successes and
/// failures and contrastive pairs form.
pub fn mostly_solved_task(vocab: &Vocabulary) -> (Query, PolicyParams) {
    let operands = vec![3i64, 4];
    let ops = vec![Op::Add];
    let modulus = 5;
    let prompt_tokens = taskenv::prompt_tokens(vocab, &operands, &ops, modulus);
    let q = Query {
        id: "constructed-q".into(),
        family: "modchain".into(),
        operands,
        ops,
        modulus,
        ground_truth: 2, // (3 + 4) mod 5
        prompt: vocab.render(&prompt_tokens),
        prompt_tokens,
    };
    let nl = vocab.newline().unwrap();
    let marker = vocab.answer_marker().unwrap();
    let eos = vocab.eos().unwrap();
    let d = |s: &str| vocab.id(s).unwrap();
    let (one, two, five, colon) = (d("1"), d("2"), d("5"), d(":"));
    // Teacher-force "1 : 2\n#### 2 <eos>" along the greedy path, keyed on
    // suffix n-grams that are unambiguous at each position.
    let mut p = PolicyParams::new(vocab, FeatureSpec::default());
    let w = 6.0;
    p.set_weight(Feature::Ngram(vec![five, nl]), one, w);
    p.set_weight(Feature::Ngram(vec![one]), colon, w);
    p.set_weight(Feature::Ngram(vec![colon]), two, w);
    p.set_weight(Feature::Ngram(vec![colon, two]), nl, w);
    p.set_weight(Feature::Ngram(vec![two, nl]), marker, w);
    p.set_weight(Feature::Ngram(vec![marker]), two, w);
    p.set_weight(Feature::Ngram(vec![marker, two]), eos, w);
    (q, p)
}

/// Largest elementwise difference between two gradient maps, over the
/// union of their rows.
pub fn max_abs_diff(a: &GradMap, b: &GradMap) -> f64 {
    let mut worst: f64 = 0.0;
    for (f, row) in a.rows() {
        for (t, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(f, t as TokenId)).abs());
        }
    }
    for (f, row) in b.rows() {
        for (t, &v) in row.iter().enumerate() {
            worst = worst.max((v - a.get(f, t as TokenId)).abs());
        }
    }
    worst
}
