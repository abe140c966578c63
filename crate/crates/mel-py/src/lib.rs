//! Python bindings for the mel training engine.
//!
//! The module mirrors the CLI surface at library granularity: build a
//! vocabulary, generate or load task files, train into a run directory,
//! evaluate checkpoints, and inspect experience pools. Structured results
//! (task lists, evaluation reports, pool summaries) cross the boundary as
//! plain dicts and lists so callers need no Rust-side types.

use std::path::PathBuf;

use pyo3::exceptions::{PyConnectionError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};

use serde::Serialize;

use mel_core::config::{self, ConfigMap, EvalSettings, TrainSettings};
use mel_core::policy::{self, DecodingConfig, FeatureSpec, PolicyParams};
use mel_core::taskenv::{self, TokenId, Vocabulary};
use mel_core::{eval, export, metaexp, trainer, MelError};

fn to_py_err(e: MelError) -> PyErr {
    match &e {
        MelError::Remote(_) => PyConnectionError::new_err(e.to_string()),
        MelError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Convert a JSON value into the matching Python object tree.
fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, json_to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serde_to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// The modular-chain token vocabulary.
#[pyclass(frozen)]
struct Vocab {
    inner: Vocabulary,
}

#[pymethods]
impl Vocab {
    #[new]
    fn new() -> Self {
        Vocab { inner: Vocabulary::modchain() }
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    /// Whitespace-split a string into token ids; unknown symbols raise.
    fn tokenize(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.inner.tokenize(text).map_err(to_py_err)
    }

    /// Space-joined text of a token id sequence.
    fn render(&self, tokens: Vec<TokenId>) -> String {
        self.inner.render(&tokens)
    }

    /// Id of a token string, or None.
    fn id(&self, text: &str) -> Option<TokenId> {
        self.inner.id(text)
    }

    /// Token string of an id.
    fn text(&self, id: TokenId) -> PyResult<String> {
        if (id as usize) < self.inner.size() {
            Ok(self.inner.text(id).to_string())
        } else {
            Err(PyValueError::new_err(format!("token id {id} out of range")))
        }
    }
}

/// A log-linear policy; freshly initialized or loaded from checkpoint
/// parameter files.
#[pyclass]
struct Policy {
    params: PolicyParams,
}

#[pymethods]
impl Policy {
    #[new]
    fn new(vocab: &Vocab) -> Self {
        Policy { params: PolicyParams::new(&vocab.inner, FeatureSpec::default()) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Policy { params: PolicyParams::load(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(to_py_err)
    }

    fn feature_count(&self) -> usize {
        self.params.feature_count()
    }

    /// Sample one completion for a prompt; returns `(text, final_answer)`
    /// where the answer is the parsed value after the last `####` marker,
    /// or None.
    #[pyo3(signature = (vocab, prompt, temperature=1.0, max_tokens=48, seed=0))]
    fn sample(
        &self,
        vocab: &Vocab,
        prompt: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> PyResult<(String, Option<i64>)> {
        let prompt_tokens = vocab.inner.tokenize(prompt).map_err(to_py_err)?;
        let cfg = DecodingConfig { temperature, max_tokens, seed };
        let traj = policy::sample(&vocab.inner, &self.params, &prompt_tokens, &cfg);
        Ok((vocab.inner.render(&traj.tokens), traj.final_answer))
    }
}

/// Generate tasks from a spec string like
/// `"family=modchain,count=100,seed=7,difficulty=2..3,moduli=5|7"`.
/// Returns the tasks as dicts and optionally writes them as JSONL.
#[pyfunction]
#[pyo3(signature = (spec, path=None))]
fn gen_tasks<'py>(py: Python<'py>, spec: &str, path: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let vocab = Vocabulary::modchain();
    let gs = config::parse_gen_spec(spec).map_err(to_py_err)?;
    let tasks = taskenv::generate_tasks(&vocab, &gs).map_err(to_py_err)?;
    if let Some(p) = path {
        taskenv::save_tasks(&p, &tasks).map_err(to_py_err)?;
    }
    serde_to_py(py, &tasks)
}

/// Binary verification of a completion against a ground truth. Returns a
/// dict with `reward` and `extraction_failed`.
#[pyfunction]
fn verify<'py>(py: Python<'py>, text: &str, ground_truth: i64) -> PyResult<Bound<'py, PyAny>> {
    serde_to_py(py, &taskenv::verify_text(text, ground_truth))
}

/// Train a policy on a JSONL task file, writing events and checkpoints into
/// `run_dir`. `overrides` are `key=value` pairs over the same keys the
/// config file accepts. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (tasks, run_dir, overrides=Vec::new(), resume=false))]
fn train<'py>(
    py: Python<'py>,
    tasks: PathBuf,
    run_dir: PathBuf,
    overrides: Vec<String>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let vocab = Vocabulary::modchain();
    let mut map = ConfigMap::new();
    map.apply_overrides(&overrides).map_err(to_py_err)?;
    let settings = TrainSettings::from_map(&map).map_err(to_py_err)?;
    let task_list = taskenv::load_tasks(&vocab, &tasks).map_err(to_py_err)?;
    let t = trainer::Trainer::new(vocab, settings, &run_dir).map_err(to_py_err)?;
    let mut state = if resume {
        let ck = trainer::latest_checkpoint(&run_dir).map_err(to_py_err)?;
        trainer::load_checkpoint(&ck).map_err(to_py_err)?
    } else {
        t.init_state()
    };
    t.run(&mut state, &task_list).map_err(to_py_err)?;
    let events = export::read_events(&run_dir).map_err(to_py_err)?;
    let pool = export::pool_summary(&state.pool);
    let summary = serde_json::json!({
        "run_dir": run_dir.display().to_string(),
        "steps": state.step,
        "final_mean_reward": events.last().map(|e| e.mean_reward),
        "pool": pool,
    });
    json_to_py(py, &summary)
}

/// Evaluate the latest checkpoint of a run on a JSONL task file. Returns
/// the full report as a dict.
#[pyfunction]
#[pyo3(signature = (run_dir, tasks, overrides=Vec::new()))]
fn evaluate_run<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    tasks: PathBuf,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let vocab = Vocabulary::modchain();
    let mut map = ConfigMap::new();
    map.apply_overrides(&overrides).map_err(to_py_err)?;
    let settings = EvalSettings::from_map(&map).map_err(to_py_err)?;
    let task_list = taskenv::load_tasks(&vocab, &tasks).map_err(to_py_err)?;
    let ck = trainer::latest_checkpoint(&run_dir).map_err(to_py_err)?;
    let state = trainer::load_checkpoint(&ck).map_err(to_py_err)?;
    let report =
        eval::evaluate(&vocab, &state.params, &task_list, &settings).map_err(to_py_err)?;
    serde_to_py(py, &report)
}

/// Status and error-kind breakdown of a pool file (or the `pool.jsonl` of a
/// run directory).
#[pyfunction]
fn pool_summary<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let file = if path.is_dir() { path.join("pool.jsonl") } else { path };
    let pool = metaexp::MetaExperiencePool::load(&file).map_err(to_py_err)?;
    serde_to_py(py, &export::pool_summary(&pool))
}

#[pymodule]
fn mel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocab>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(gen_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_function(wrap_pyfunction!(pool_summary, m)?)?;
    Ok(())
}
