//! Remote analyst backend.
//!
//! Speaks a minimal text-generation protocol over plain HTTP/1.1: a POST of
//! `{"prompt": ..., "max_tokens": ..., "temperature": ...}` answered by
//! `{"text": ...}`. Analysis prompts instruct the remote model to compare a
//! failed and a successful trajectory and answer in four fixed sections;
//! replay validation sends the recorded experience back with the question
//! and verifies the model's answer exactly like any other trajectory.
//!
//! Transport failures (connect errors, timeouts, 5xx) are retried up to the
//! configured budget and then surface as [`MelError::Remote`]; the trainer
//! degrades to fewer candidates instead of aborting. A reply that arrives
//! but lacks one of the mandatory sections becomes a rejected-on-arrival
//! record instead.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::metaexp::{
    Analyst, Bifurcation, ContrastivePair, Critique, ErrorKind, Heuristic, MeStatus,
    MetaExperience, Provenance, ReplayConfig, Validation,
};
use crate::policy::PolicyParams;
use crate::taskenv::{self, Query, Trajectory, Vocabulary};

/// Analysis prompt; placeholders `{question}`, `{error_ans}`,
/// `{correct_ans}`.
pub const META_EXPERIENCE_TEMPLATE: &str =
    include_str!("../../assets/meta_experience_prompt.txt");

/// Replay prompt; placeholders `{experience}`, `{question}`.
pub const EMPIRICAL_VALIDATION_TEMPLATE: &str =
    include_str!("../../assets/empirical_validation_prompt.txt");

/// Mandatory section headings of a well-formed analysis, in order.
pub const SECTION_HEADINGS: [&str; 4] = [
    "Failure Resolution Path & Error Pattern Recognition",
    "Analysis of Success Factors",
    "First-Person Reflective Summary",
    "Subject Heuristics (Internalized Experience)",
];

pub fn fill_meta_prompt(question: &str, error_ans: &str, correct_ans: &str) -> String {
    META_EXPERIENCE_TEMPLATE
        .replace("{question}", question)
        .replace("{error_ans}", error_ans)
        .replace("{correct_ans}", correct_ans)
}

pub fn fill_validation_prompt(experience: &str, question: &str) -> String {
    EMPIRICAL_VALIDATION_TEMPLATE
        .replace("{experience}", experience)
        .replace("{question}", question)
}

/// The four section bodies of a parsed analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSections {
    pub failure: String,
    pub success: String,
    pub summary: String,
    pub heuristics: String,
}

/// Split an analysis into its mandatory sections. Headings must appear in
/// order and every body must be non-empty; anything else is a parse error
/// (the caller records the pair as rejected-on-arrival).
pub fn parse_sections(text: &str) -> Result<AnalysisSections> {
    // (line start, line end) of each heading; the whole line is boundary,
    // so numbering prefixes and "(Mandatory)" suffixes stay out of bodies.
    let mut bounds = Vec::with_capacity(SECTION_HEADINGS.len());
    let mut cursor = 0usize;
    for heading in SECTION_HEADINGS {
        match text[cursor..].find(heading) {
            Some(rel) => {
                let at = cursor + rel;
                let line_start = text[..at].rfind('\n').map_or(0, |p| p + 1);
                let line_end = text[at..].find('\n').map_or(text.len(), |p| at + p);
                bounds.push((line_start, line_end));
                cursor = line_end;
            }
            None => {
                return Err(MelError::Data(format!(
                    "analysis is missing the `{heading}` section"
                )))
            }
        }
    }
    let mut bodies = Vec::with_capacity(4);
    for i in 0..4 {
        let body_start = bounds[i].1;
        let body_end = if i + 1 < 4 { bounds[i + 1].0 } else { text.len() };
        let body = text[body_start..body_end].trim();
        if body.is_empty() {
            return Err(MelError::Data(format!(
                "analysis section `{}` is empty",
                SECTION_HEADINGS[i]
            )));
        }
        bodies.push(body.to_string());
    }
    let heuristics = bodies.pop().unwrap();
    let summary = bodies.pop().unwrap();
    let success = bodies.pop().unwrap();
    let failure = bodies.pop().unwrap();
    Ok(AnalysisSections { failure, success, summary, heuristics })
}

/// Map free-form failure text onto the hint grammar's error kinds.
pub fn classify_text(text: &str) -> ErrorKind {
    let lower = text.to_lowercase();
    if lower.contains("operation") || lower.contains("operator") {
        ErrorKind::WrongOperation
    } else if lower.contains("modulus") || lower.contains("modulo") || lower.contains("reduction")
    {
        ErrorKind::WrongModulus
    } else if lower.contains("format") || lower.contains("marker") || lower.contains("structure") {
        ErrorKind::FormatViolation
    } else {
        ErrorKind::ArithmeticSlip
    }
}

/// First `step <n>` mention in the failure text, if any; 0 means the
/// analysis did not localize the failure.
pub fn extract_step_index(text: &str) -> usize {
    let lower = text.to_lowercase();
    let mut search = lower.as_str();
    let mut offset = 0usize;
    while let Some(pos) = search.find("step") {
        let after = &lower[offset + pos + 4..];
        let digits: String = after
            .trim_start()
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if let Ok(n) = digits.parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
        offset += pos + 4;
        search = &lower[offset..];
    }
    0
}

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

/// Connection settings for the remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// `http://host[:port][/path]`.
    pub endpoint: String,
    /// Sent as `Authorization: Bearer <token>` when present.
    pub token: Option<String>,
    pub timeout_ms: u64,
    /// Additional attempts after the first on retriable failures.
    pub retries: u32,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            token: None,
            timeout_ms: 10_000,
            retries: 2,
            max_tokens: 768,
            temperature: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
struct ParsedEndpoint {
    host: String,
    port: u16,
    path: String,
}

fn parse_endpoint(endpoint: &str) -> Result<ParsedEndpoint> {
    let rest = endpoint.strip_prefix("http://").ok_or_else(|| {
        MelError::Config(format!("endpoint `{endpoint}` must use the http:// scheme"))
    })?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].to_string()),
        None => (rest, "/".to_string()),
    };
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => {
            let port: u16 = p
                .parse()
                .map_err(|_| MelError::Config(format!("bad port in endpoint `{endpoint}`")))?;
            (h.to_string(), port)
        }
        None => (authority.to_string(), 80),
    };
    if host.is_empty() {
        return Err(MelError::Config(format!("endpoint `{endpoint}` has no host")));
    }
    Ok(ParsedEndpoint { host, port, path })
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    text: String,
}

enum Attempt {
    Ok(String),
    Retriable(String),
    Fatal(MelError),
}

/// HTTP analyst client.
#[derive(Debug, Clone)]
pub struct RemoteAnalyst {
    cfg: RemoteConfig,
    endpoint: ParsedEndpoint,
}

impl RemoteAnalyst {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let endpoint = parse_endpoint(&cfg.endpoint)?;
        Ok(RemoteAnalyst { cfg, endpoint })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    /// One generation round trip with retries on transport failures.
    pub fn generate(&self, prompt: &str) -> Result<String> {
        let body = serde_json::to_string(&GenerateRequest {
            prompt,
            max_tokens: self.cfg.max_tokens,
            temperature: self.cfg.temperature,
        })
        .expect("request serializes");
        let attempts = self.cfg.retries as u64 + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.try_once(&body) {
                Attempt::Ok(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retriable(why) => {
                    last = why;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(25 * (attempt + 1)));
                    }
                }
            }
        }
        Err(MelError::Remote(format!(
            "`{}` unreachable after {attempts} attempt(s): {last}",
            self.cfg.endpoint
        )))
    }

    fn try_once(&self, body: &str) -> Attempt {
        let timeout = Duration::from_millis(self.cfg.timeout_ms.max(1));
        let addr = format!("{}:{}", self.endpoint.host, self.endpoint.port);
        let sockets = match std::net::ToSocketAddrs::to_socket_addrs(&addr) {
            Ok(s) => s.collect::<Vec<_>>(),
            Err(e) => return Attempt::Retriable(format!("resolve {addr}: {e}")),
        };
        let Some(first) = sockets.first() else {
            return Attempt::Retriable(format!("no address for {addr}"));
        };
        let stream = match TcpStream::connect_timeout(first, timeout) {
            Ok(s) => s,
            Err(e) => return Attempt::Retriable(format!("connect {addr}: {e}")),
        };
        let _ = stream.set_read_timeout(Some(timeout));
        let _ = stream.set_write_timeout(Some(timeout));
        match self.round_trip(stream, body) {
            Ok(a) => a,
            Err(e) => Attempt::Retriable(e),
        }
    }

    fn round_trip(&self, mut stream: TcpStream, body: &str) -> std::result::Result<Attempt, String> {
        let auth = match &self.cfg.token {
            Some(t) => format!("Authorization: Bearer {t}\r\n"),
            None => String::new(),
        };
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n{}Connection: close\r\n\r\n{}",
            self.endpoint.path,
            self.endpoint.host,
            body.len(),
            auth,
            body
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| format!("write: {e}"))?;
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if response_complete(&buf) {
                        break;
                    }
                }
                Err(e) => return Err(format!("read: {e}")),
            }
        }
        let text = String::from_utf8_lossy(&buf);
        let Some(header_end) = text.find("\r\n\r\n") else {
            return Err("truncated response (no header terminator)".into());
        };
        let head = &text[..header_end];
        let body_text = &text[header_end + 4..];
        let status: u32 = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("unparseable status line in `{}`", head.lines().next().unwrap_or("")))?;
        match status {
            200 => match serde_json::from_str::<GenerateResponse>(body_text.trim_end_matches('\0')) {
                Ok(r) => Ok(Attempt::Ok(r.text)),
                Err(e) => Err(format!("bad response body: {e}")),
            },
            500..=599 => Err(format!("server status {status}")),
            _ => Ok(Attempt::Fatal(MelError::Remote(format!(
                "`{}` answered status {status}",
                self.cfg.endpoint
            )))),
        }
    }
}

fn response_complete(buf: &[u8]) -> bool {
    let Some(header_end) = find_subsequence(buf, b"\r\n\r\n") else {
        return false;
    };
    let head = String::from_utf8_lossy(&buf[..header_end]);
    for line in head.lines() {
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                if let Ok(n) = value.trim().parse::<usize>() {
                    return buf.len() >= header_end + 4 + n;
                }
            }
        }
    }
    false
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn truncate_for_record(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

impl Analyst for RemoteAnalyst {
    fn backend_name(&self) -> &'static str {
        "remote"
    }

    fn analyze(
        &self,
        vocab: &Vocabulary,
        query: &Query,
        pair: &ContrastivePair,
        positive: &Trajectory,
        negative: &Trajectory,
        step: u64,
    ) -> Result<MetaExperience> {
        let prompt = fill_meta_prompt(
            &query.prompt,
            &vocab.render(&negative.tokens),
            &vocab.render(&positive.tokens),
        );
        let answer = self.generate(&prompt)?;
        let id = format!("me-{}-p{}n{}-t{}", query.id, pair.positive, pair.negative, step);
        let provenance = Provenance {
            query_id: query.id.clone(),
            positive: pair.positive,
            negative: pair.negative,
            backend: self.backend_name().into(),
            step,
        };
        match parse_sections(&answer) {
            Ok(sections) => {
                let kind = classify_text(&sections.failure);
                let step_text = sections
                    .failure
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .unwrap_or("")
                    .trim()
                    .to_string();
                Ok(MetaExperience {
                    id,
                    bifurcation: Bifurcation {
                        index: extract_step_index(&sections.failure),
                        step_text: truncate_for_record(&step_text, 200),
                    },
                    critique: Critique {
                        kind,
                        text: format!("{}\n\n{}", sections.failure, sections.heuristics),
                    },
                    heuristic: Heuristic::new(kind, &query.family),
                    provenance,
                    status: MeStatus::Candidate,
                    validation: None,
                    diagnostics: None,
                })
            }
            Err(e) => Ok(MetaExperience {
                id,
                bifurcation: Bifurcation { index: 0, step_text: String::new() },
                critique: Critique {
                    kind: ErrorKind::ArithmeticSlip,
                    text: truncate_for_record(&answer, 400),
                },
                heuristic: Heuristic::new(ErrorKind::ArithmeticSlip, &query.family),
                provenance,
                status: MeStatus::Rejected,
                validation: None,
                diagnostics: Some(format!("rejected on arrival: {e}")),
            }),
        }
    }

    fn validate(
        &self,
        _vocab: &Vocabulary,
        me: &mut MetaExperience,
        query: &Query,
        _params: &PolicyParams,
        cfg: &ReplayConfig,
    ) -> Result<MeStatus> {
        if me.status != MeStatus::Candidate {
            return Err(MelError::Contract(format!("record `{}` was already judged", me.id)));
        }
        let experience = format!("{}\n{}", me.critique.text, me.heuristic.text);
        let prompt = fill_validation_prompt(&experience, &query.prompt);
        let answer = self.generate(&prompt)?;
        let verdict = taskenv::verify_text(&answer, query.ground_truth);
        let status = if verdict.reward == 1 { MeStatus::Validated } else { MeStatus::Rejected };
        me.status = status;
        me.validation = Some(Validation {
            seed: cfg.seed,
            attempts: 1,
            temperature: self.cfg.temperature,
        });
        if status == MeStatus::Rejected {
            me.diagnostics = Some(format!(
                "replay answer did not verify: {}",
                truncate_for_record(&answer, 200)
            ));
        }
        Ok(status)
    }
}
