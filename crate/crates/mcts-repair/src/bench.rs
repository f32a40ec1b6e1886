//! Desk-scale benchmark harness: a corpus of toy buggy programs with
//! scripted generator fixtures, and synthetic search landscapes for
//! LLM-free behavioral tests (including the MCTS-versus-chain comparison).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, CallKind, Completion, ModelBackend, ScriptedFixture};
use crate::engine::{repair_with_policy, EngineError, SelectionPolicy};
use crate::llm::{estimate_tokens, ChatRequest, Usage};
use crate::model::{
    BugSpec, CommandSpec, JudgeStrategy, LineRange, NodeStatus, RepairReport, SearchConfig,
    TestCase,
};
use crate::validation::validate_patch;

/// Expected outcome of running one corpus entry with its fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    /// Whether the entry reaches a plausible patch within `budget`.
    pub plausible_within_budget: bool,
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub em_expected: bool,
}

fn default_budget() -> usize {
    16
}

/// One corpus entry: bug spec directory, generator fixture and expectation.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub dir: PathBuf,
    pub bug: BugSpec,
    pub fixture: ScriptedFixture,
    pub expected: ExpectedOutcome,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed corpus entry {path}: {message}")]
    MalformedEntry { path: PathBuf, message: String },
    #[error("cannot read corpus directory {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn malformed(path: &Path, message: impl Into<String>) -> CorpusError {
    CorpusError::MalformedEntry { path: path.to_path_buf(), message: message.into() }
}

/// Loads every entry under `dir` (layout: `<entry>/bugspec.json`,
/// `<entry>/workspace/...`, `<entry>/fixture.json`, `<entry>/expected.json`),
/// validating bug invariants and rejecting entries whose unpatched program
/// already passes its tests.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let mut entry_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entry_dirs.sort();
    let mut entries = Vec::with_capacity(entry_dirs.len());
    for entry_dir in entry_dirs {
        entries.push(load_entry(&entry_dir)?);
    }
    Ok(entries)
}

fn load_entry(dir: &Path) -> Result<CorpusEntry, CorpusError> {
    let bugspec_path = dir.join("bugspec.json");
    let bug = BugSpec::load(&bugspec_path).map_err(|e| malformed(&bugspec_path, e.to_string()))?;
    bug.validate().map_err(|e| malformed(&bugspec_path, e.to_string()))?;

    let fixture_path = dir.join("fixture.json");
    let fixture = ScriptedFixture::from_path(&fixture_path)
        .map_err(|e| malformed(&fixture_path, e.to_string()))?;

    let expected_path = dir.join("expected.json");
    let expected_text = std::fs::read_to_string(&expected_path)
        .map_err(|e| malformed(&expected_path, e.to_string()))?;
    let expected: ExpectedOutcome = serde_json::from_str(&expected_text)
        .map_err(|e| malformed(&expected_path, e.to_string()))?;

    let root_validation = validate_patch(&bug, &crate::model::Patch::root(&bug.buggy_code))
        .map_err(|e| malformed(dir, format!("cannot validate root patch: {e}")))?;
    if root_validation.all_passed() {
        return Err(malformed(dir, "root patch already passes all tests"));
    }

    Ok(CorpusEntry { dir: dir.to_path_buf(), bug, fixture, expected })
}

/// An abstract patch state in a synthetic landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeNode {
    /// Scripted judge score in [0, 100].
    pub judge_score: f64,
    /// Labels reachable from this state, in generation order.
    #[serde(default)]
    pub edges: Vec<String>,
}

/// A finite rooted digraph of abstract patches with scripted judge scores
/// and a designated goal set. Runs through the production engine: states
/// materialize as one-line workspace files and goals as the passing test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub name: String,
    pub root: String,
    pub nodes: BTreeMap<String, LandscapeNode>,
    pub goals: BTreeSet<String>,
}

impl SyntheticLandscape {
    /// Checks score ranges and that some goal is reachable from the root.
    pub fn validate(&self) -> Result<(), String> {
        if !self.nodes.contains_key(&self.root) {
            return Err(format!("root state {} is not declared", self.root));
        }
        for (label, node) in &self.nodes {
            if !(0.0..=100.0).contains(&node.judge_score) {
                return Err(format!("state {label}: score {} outside [0, 100]", node.judge_score));
            }
        }
        if self.goals.is_empty() {
            return Ok(());
        }
        let mut frontier = vec![self.root.as_str()];
        let mut seen = BTreeSet::from([self.root.as_str()]);
        while let Some(label) = frontier.pop() {
            if self.goals.contains(label) {
                return Ok(());
            }
            if let Some(node) = self.nodes.get(label) {
                for edge in &node.edges {
                    if seen.insert(edge.as_str()) {
                        frontier.push(edge.as_str());
                    }
                }
            }
        }
        Err("no goal is reachable from the root".to_string())
    }

    /// Writes the landscape as a real workspace: `state.txt` holds the
    /// current label and the single test passes exactly on goal labels.
    pub fn materialize(&self, dir: &Path) -> std::io::Result<BugSpec> {
        let workspace = dir.join("workspace");
        std::fs::create_dir_all(&workspace)?;
        std::fs::write(workspace.join("state.txt"), format!("{}\n", self.root))?;
        let test_command = if self.goals.is_empty() {
            "false".to_string()
        } else {
            let patterns = self
                .goals
                .iter()
                .map(|g| format!("-e {}", shell_quote(g)))
                .collect::<Vec<_>>()
                .join(" ");
            format!("grep -qxF {patterns} state.txt")
        };
        Ok(BugSpec {
            bug_id: format!("landscape-{}", self.name),
            workspace_root: workspace,
            buggy_file: "state.txt".into(),
            buggy_region: LineRange { start: 1, end: 1 },
            buggy_code: self.root.clone(),
            context_code: String::new(),
            build_command: CommandSpec { command: "true".to_string(), timeout_secs: 10.0 },
            test_command: CommandSpec { command: test_command, timeout_secs: 10.0 },
            test_cases: vec![TestCase {
                test_id: "goal-check".to_string(),
                invocation: String::new(),
            }],
            reference_patch: None,
        })
    }
}

fn shell_quote(text: &str) -> String {
    format!("'{}'", text.replace('\'', "'\\''"))
}

/// Backend that answers from a landscape: repairs follow the edges of the
/// selected state (restating it once they run out), and judge scores come
/// from the candidate's own state. Routed purely by patch text, so it is
/// independent of node numbering.
pub struct LandscapeBackend<'a> {
    landscape: &'a SyntheticLandscape,
}

impl<'a> LandscapeBackend<'a> {
    pub fn new(landscape: &'a SyntheticLandscape) -> Self {
        LandscapeBackend { landscape }
    }
}

impl ModelBackend for LandscapeBackend<'_> {
    fn complete(
        &self,
        kind: &CallKind<'_>,
        request: &ChatRequest,
    ) -> Result<Completion, BackendError> {
        let text = match kind {
            CallKind::Repair { expansion_index, parent_patch, .. } => {
                let next = self
                    .landscape
                    .nodes
                    .get(*parent_patch)
                    .and_then(|n| n.edges.get(*expansion_index as usize));
                match next {
                    Some(label) => format!("Moving to state {label}.\n```\n{label}\n```"),
                    None => format!(
                        "No outgoing edges remain; restating the state.\n```\n{parent_patch}\n```"
                    ),
                }
            }
            CallKind::Reflect { draft, .. } => {
                format!("The move stands.\n```\n{draft}\n```")
            }
            CallKind::Judge { candidate_patch, .. } => {
                let score =
                    self.landscape.nodes.get(*candidate_patch).map(|n| n.judge_score).unwrap_or(0.0);
                if score.fract() == 0.0 {
                    format!("{}", score as i64)
                } else {
                    format!("{score}")
                }
            }
        };
        let prompt_tokens = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        Ok(Completion {
            usage: Usage::new(prompt_tokens, estimate_tokens(&text)),
            text,
            wall_time_ms: 0,
        })
    }
}

/// Trace of one landscape run.
#[derive(Debug, Clone)]
pub struct LandscapeTrace {
    /// Candidates generated up to and including the first goal node, when
    /// one was reached within budget.
    pub expansions_to_goal: Option<usize>,
    /// Selected node id per candidate, in order.
    pub selections: Vec<usize>,
    pub report: RepairReport,
}

/// Runs the engine loop over a synthetic landscape with the scripted
/// generator/judge derived from its edges; the judge strategy is forced to
/// the model judge so scores flow through the production evaluate pipeline.
pub fn run_landscape(
    landscape: &SyntheticLandscape,
    config: &SearchConfig,
    policy: SelectionPolicy,
) -> Result<LandscapeTrace, EngineError> {
    landscape
        .validate()
        .map_err(crate::model::ConfigError)
        .map_err(EngineError::InvalidConfig)?;
    let dir = tempfile::Builder::new()
        .prefix("landscape-")
        .tempdir()
        .map_err(crate::validation::ValidationError::Io)?;
    let bug = landscape.materialize(dir.path()).map_err(crate::validation::ValidationError::Io)?;
    let config = SearchConfig {
        strategy_override: Some(JudgeStrategy::LlmJudge),
        ..config.clone()
    };
    let backend = LandscapeBackend::new(landscape);
    let report = repair_with_policy(&bug, &backend, &config, policy)?;
    let selections = report.per_iteration_log.iter().map(|e| e.selected).collect();
    let expansions_to_goal = report
        .per_iteration_log
        .iter()
        .position(|e| e.status == NodeStatus::Plausible)
        .map(|i| i + 1);
    Ok(LandscapeTrace { expansions_to_goal, selections, report })
}

/// Degenerate landscape: one edge from the root straight to the goal.
pub fn single_edge_landscape() -> SyntheticLandscape {
    SyntheticLandscape {
        name: "single-edge".to_string(),
        root: "start".to_string(),
        nodes: BTreeMap::from([
            (
                "start".to_string(),
                LandscapeNode { judge_score: 10.0, edges: vec!["goal".to_string()] },
            ),
            ("goal".to_string(), LandscapeNode { judge_score: 95.0, edges: vec![] }),
        ]),
        goals: BTreeSet::from(["goal".to_string()]),
    }
}

/// Deceptive corridor: the root offers a high-scoring dead-end chain (three
/// tempting levels, then junk) and a modest exit that leads to the goal.
/// Latest-first serial search burrows into the corridor and never returns;
/// UCT selection abandons it once the scores crash and takes the exit.
pub fn deceptive_corridor_landscape() -> SyntheticLandscape {
    let mut nodes = BTreeMap::new();
    nodes.insert(
        "start".to_string(),
        LandscapeNode {
            judge_score: 10.0,
            edges: vec!["lure-1".to_string(), "exit".to_string()],
        },
    );
    let corridor_scores = [90.0, 85.0, 80.0];
    for (i, score) in corridor_scores.iter().enumerate() {
        let next = if i + 1 < corridor_scores.len() {
            format!("lure-{}", i + 2)
        } else {
            "junk-1".to_string()
        };
        nodes.insert(
            format!("lure-{}", i + 1),
            LandscapeNode { judge_score: *score, edges: vec![next] },
        );
    }
    // Long junk tail so a serial searcher keeps digging past any budget.
    let junk_len = 20;
    for i in 1..=junk_len {
        let edges = if i < junk_len { vec![format!("junk-{}", i + 1)] } else { vec![] };
        nodes.insert(format!("junk-{i}"), LandscapeNode { judge_score: 2.0, edges });
    }
    nodes.insert(
        "exit".to_string(),
        LandscapeNode { judge_score: 40.0, edges: vec!["goal".to_string()] },
    );
    nodes.insert("goal".to_string(), LandscapeNode { judge_score: 95.0, edges: vec![] });
    SyntheticLandscape {
        name: "deceptive-corridor".to_string(),
        root: "start".to_string(),
        nodes,
        goals: BTreeSet::from(["goal".to_string()]),
    }
}

/// Landscape with no goal at all; every run ends by budget exhaustion.
pub fn goal_free_landscape() -> SyntheticLandscape {
    SyntheticLandscape {
        name: "goal-free".to_string(),
        root: "start".to_string(),
        nodes: BTreeMap::from([
            (
                "start".to_string(),
                LandscapeNode {
                    judge_score: 50.0,
                    edges: vec!["a".to_string(), "b".to_string()],
                },
            ),
            ("a".to_string(), LandscapeNode { judge_score: 60.0, edges: vec!["b".to_string()] }),
            ("b".to_string(), LandscapeNode { judge_score: 40.0, edges: vec![] }),
        ]),
        goals: BTreeSet::new(),
    }
}
