//! Pluggable model backends. The engine talks to one `ModelBackend` for both
//! patch generation and judging; implementations are the live HTTP client, a
//! scripted fixture-driven backend for tests and batch replays, and a
//! usage-counting wrapper for per-run accounting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::llm::{estimate_tokens, ChatClient, ChatRequest, LlmError, Usage};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl From<LlmError> for BackendError {
    fn from(error: LlmError) -> Self {
        match error {
            LlmError::BackendUnavailable { .. } => BackendError::Unavailable(error.to_string()),
            LlmError::MalformedResponse(m) => BackendError::Malformed(m),
        }
    }
}

/// One completion: text, token usage and the time it took. Scripted backends
/// report zero wall time so replays stay byte-identical.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    pub wall_time_ms: u64,
}

/// What a completion is for. Live backends ignore this; scripted backends
/// use it to route the call to the right fixture entry.
#[derive(Debug, Clone)]
pub enum CallKind<'a> {
    /// Chain-of-thought plus draft patch for one candidate.
    Repair {
        bug_id: &'a str,
        parent_node_id: usize,
        expansion_index: u32,
        parent_patch: &'a str,
    },
    /// Self-reflection round on a draft.
    Reflect {
        bug_id: &'a str,
        parent_node_id: usize,
        expansion_index: u32,
        parent_patch: &'a str,
        draft: &'a str,
    },
    /// One judge sample for a candidate.
    Judge {
        bug_id: &'a str,
        parent_node_id: usize,
        expansion_index: u32,
        candidate_patch: &'a str,
        sample_index: usize,
        retry: bool,
    },
}

impl CallKind<'_> {
    pub fn is_judge(&self) -> bool {
        matches!(self, CallKind::Judge { .. })
    }
}

/// The model capability behind generation and judging.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, kind: &CallKind<'_>, request: &ChatRequest)
        -> Result<Completion, BackendError>;
}

/// Live backend: forwards every completion to the chat client.
pub struct LiveBackend {
    client: ChatClient,
}

impl LiveBackend {
    pub fn new(client: ChatClient) -> Self {
        LiveBackend { client }
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }
}

impl ModelBackend for LiveBackend {
    fn complete(
        &self,
        _kind: &CallKind<'_>,
        request: &ChatRequest,
    ) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let (text, usage) = self.client.chat(request)?;
        Ok(Completion {
            text,
            usage,
            wall_time_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// A judge sample value in a fixture: either a numeric score or raw text
/// (raw text exercises the unparseable-score path).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedScore {
    Number(f64),
    Text(String),
}

impl ScriptedScore {
    fn render(&self) -> String {
        match self {
            ScriptedScore::Number(n) => {
                if n.fract() == 0.0 {
                    format!("{}", *n as i64)
                } else {
                    format!("{n}")
                }
            }
            ScriptedScore::Text(t) => t.clone(),
        }
    }
}

/// One scripted generation slot. An empty `draft` yields a completion with no
/// fenced block (an unparseable candidate); an empty `final` makes the
/// reflection round emit critique prose only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FixtureEntry {
    #[serde(default)]
    pub cot: String,
    #[serde(default)]
    pub draft: String,
    #[serde(default)]
    pub reflection: String,
    #[serde(default, rename = "final")]
    pub final_patch: String,
    /// Judge samples for the candidate generated from this slot; cycled when
    /// fewer than n_judge_samples, defaulting to 50 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_scores: Option<Vec<ScriptedScore>>,
}

/// Scripted-backend fixture: generation slots keyed by
/// `"<bug_id>|<parent_node_id>|<expansion_index>"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScriptedFixture {
    pub entries: BTreeMap<String, FixtureEntry>,
}

impl ScriptedFixture {
    pub fn key(bug_id: &str, parent_node_id: usize, expansion_index: u32) -> String {
        format!("{bug_id}|{parent_node_id}|{expansion_index}")
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Unavailable(format!("cannot read fixture {path:?}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed(format!("fixture {path:?}: {e}")))
    }
}

/// A record of one scripted call, for ledger assertions in tests.
#[derive(Debug, Clone)]
pub struct ScriptedCall {
    pub key: String,
    pub judge: bool,
    pub usage: Usage,
}

/// Deterministic backend that replays fixture entries. Missing slots fall
/// back to a "dud" candidate restating the parent patch, so exhausted
/// fixtures keep the search running without inventing new behavior.
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    ledger: Mutex<Vec<ScriptedCall>>,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        ScriptedBackend { fixture, ledger: Mutex::new(Vec::new()) }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        Ok(ScriptedBackend::new(ScriptedFixture::from_path(path)?))
    }

    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.ledger.lock().unwrap().clone()
    }

    pub fn judge_call_count(&self) -> usize {
        self.ledger.lock().unwrap().iter().filter(|c| c.judge).count()
    }

    fn entry(&self, bug_id: &str, parent: usize, index: u32) -> Option<&FixtureEntry> {
        self.fixture
            .entries
            .get(&ScriptedFixture::key(bug_id, parent, index))
    }

    fn fenced(body: &str) -> String {
        format!("\n```\n{body}\n```")
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(
        &self,
        kind: &CallKind<'_>,
        request: &ChatRequest,
    ) -> Result<Completion, BackendError> {
        let (key, judge, text) = match kind {
            CallKind::Repair { bug_id, parent_node_id, expansion_index, parent_patch } => {
                let key = ScriptedFixture::key(bug_id, *parent_node_id, *expansion_index);
                let text = match self.entry(bug_id, *parent_node_id, *expansion_index) {
                    Some(entry) if entry.draft.is_empty() => entry.cot.clone(),
                    Some(entry) => format!("{}{}", entry.cot, Self::fenced(&entry.draft)),
                    None => format!(
                        "No further repair ideas for this node; restating the current patch.{}",
                        Self::fenced(parent_patch)
                    ),
                };
                (key, false, text)
            }
            CallKind::Reflect { bug_id, parent_node_id, expansion_index, draft, .. } => {
                let key = ScriptedFixture::key(bug_id, *parent_node_id, *expansion_index);
                let text = match self.entry(bug_id, *parent_node_id, *expansion_index) {
                    Some(entry) if entry.final_patch.is_empty() => entry.reflection.clone(),
                    Some(entry) => {
                        format!("{}{}", entry.reflection, Self::fenced(&entry.final_patch))
                    }
                    None => format!("The draft is unchanged from the parent.{}", Self::fenced(draft)),
                };
                (key, false, text)
            }
            CallKind::Judge { bug_id, parent_node_id, expansion_index, sample_index, .. } => {
                let key = ScriptedFixture::key(bug_id, *parent_node_id, *expansion_index);
                // A scripted entry without judge_scores is judged neutrally;
                // a dud candidate from a missing entry is judged poorly, as a
                // restated patch deserves.
                let text = match self.entry(bug_id, *parent_node_id, *expansion_index) {
                    Some(entry) => match &entry.judge_scores {
                        Some(scores) if !scores.is_empty() => {
                            scores[*sample_index % scores.len()].render()
                        }
                        _ => "50".to_string(),
                    },
                    None => "5".to_string(),
                };
                (key, true, text)
            }
        };
        let prompt_tokens = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        let usage = Usage::new(prompt_tokens, estimate_tokens(&text));
        self.ledger
            .lock()
            .unwrap()
            .push(ScriptedCall { key, judge, usage });
        Ok(Completion { text, usage, wall_time_ms: 0 })
    }
}

/// Wraps a shared backend and tallies usage for one repair run, so parallel
/// runs against the same backend account their own tokens.
pub struct CountingBackend<'a> {
    inner: &'a dyn ModelBackend,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    calls: AtomicU64,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn ModelBackend) -> Self {
        CountingBackend {
            inner,
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens.load(Ordering::Relaxed) + self.completion_tokens.load(Ordering::Relaxed)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ModelBackend for CountingBackend<'_> {
    fn complete(
        &self,
        kind: &CallKind<'_>,
        request: &ChatRequest,
    ) -> Result<Completion, BackendError> {
        let completion = self.inner.complete(kind, request)?;
        self.prompt_tokens.fetch_add(completion.usage.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(completion.usage.completion_tokens, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> ChatRequest {
        ChatRequest {
            model: String::new(),
            messages: vec![crate::llm::ChatMessage::user("prompt text")],
            temperature: 0.9,
            max_tokens: 8000,
            seed: None,
        }
    }

    fn fixture_with(key: &str, entry: FixtureEntry) -> ScriptedFixture {
        let mut entries = BTreeMap::new();
        entries.insert(key.to_string(), entry);
        ScriptedFixture { entries }
    }

    #[test]
    fn scripted_repair_replays_fixture_text() {
        let backend = ScriptedBackend::new(fixture_with(
            "toy1|0|0",
            FixtureEntry {
                cot: "The comparison is inverted.".to_string(),
                draft: "return a < b;".to_string(),
                ..FixtureEntry::default()
            },
        ));
        let kind = CallKind::Repair {
            bug_id: "toy1",
            parent_node_id: 0,
            expansion_index: 0,
            parent_patch: "return a > b;",
        };
        let completion = backend.complete(&kind, &request()).unwrap();
        assert!(completion.text.contains("The comparison is inverted."));
        assert!(completion.text.contains("return a < b;"));
        assert_eq!(completion.wall_time_ms, 0);
    }

    #[test]
    fn scripted_missing_slot_restates_parent() {
        let backend = ScriptedBackend::new(ScriptedFixture::default());
        let kind = CallKind::Repair {
            bug_id: "toy1",
            parent_node_id: 3,
            expansion_index: 1,
            parent_patch: "original code",
        };
        let completion = backend.complete(&kind, &request()).unwrap();
        assert!(completion.text.contains("original code"));
    }

    #[test]
    fn scripted_judge_cycles_scores_and_defaults_to_fifty() {
        let backend = ScriptedBackend::new(fixture_with(
            "toy1|0|0",
            FixtureEntry {
                judge_scores: Some(vec![
                    ScriptedScore::Number(40.0),
                    ScriptedScore::Number(60.0),
                ]),
                ..FixtureEntry::default()
            },
        ));
        let mut seen = Vec::new();
        for sample_index in 0..3 {
            let kind = CallKind::Judge {
                bug_id: "toy1",
                parent_node_id: 0,
                expansion_index: 0,
                candidate_patch: "x",
                sample_index,
                retry: false,
            };
            seen.push(backend.complete(&kind, &request()).unwrap().text);
        }
        assert_eq!(seen, vec!["40", "60", "40"]);

        // Missing slots are dud candidates; their judge score is poor.
        let other = CallKind::Judge {
            bug_id: "toy1",
            parent_node_id: 5,
            expansion_index: 0,
            candidate_patch: "x",
            sample_index: 0,
            retry: false,
        };
        assert_eq!(backend.complete(&other, &request()).unwrap().text, "5");
    }

    #[test]
    fn counting_backend_tallies_usage() {
        let scripted = ScriptedBackend::new(ScriptedFixture::default());
        let counting = CountingBackend::new(&scripted);
        let kind = CallKind::Repair {
            bug_id: "toy1",
            parent_node_id: 0,
            expansion_index: 0,
            parent_patch: "p",
        };
        let a = counting.complete(&kind, &request()).unwrap();
        let b = counting.complete(&kind, &request()).unwrap();
        assert_eq!(counting.calls(), 2);
        assert_eq!(counting.total_tokens(), a.usage.total_tokens + b.usage.total_tokens);
    }

    #[test]
    fn fixture_round_trips_through_json() {
        let fixture = fixture_with(
            "bug|0|0",
            FixtureEntry {
                cot: "c".to_string(),
                draft: "d".to_string(),
                reflection: "r".to_string(),
                final_patch: "f".to_string(),
                judge_scores: Some(vec![
                    ScriptedScore::Number(70.0),
                    ScriptedScore::Text("not a score".to_string()),
                ]),
            },
        );
        let json = serde_json::to_string(&fixture).unwrap();
        let back: ScriptedFixture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fixture);
        assert!(json.contains("\"final\""));
    }
}
