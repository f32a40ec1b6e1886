//! Domain types shared by every stage of the patch search: bug descriptions,
//! patches, tree nodes, generation/evaluation records, search configuration
//! and the final per-bug report.
//!
//! All types serialize to a stable JSON schema; field names are part of the
//! on-disk contract.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tree::PatchTree;

/// A shell command plus the wall-clock budget it may consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub command: String,
    pub timeout_secs: f64,
}

/// One test case of a bug's suite. `invocation` is substituted into the
/// `{test}` placeholder of the bug's test command; an empty invocation means
/// the suite runs as a whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub test_id: String,
    #[serde(default)]
    pub invocation: String,
}

/// 1-based inclusive line range inside the buggy file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

impl LineRange {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// One repairable bug: where the defect lives, how to build and test the
/// program, and (optionally) the developer patch used for exact-match checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugSpec {
    pub bug_id: String,
    pub workspace_root: PathBuf,
    /// Path of the buggy file, relative to `workspace_root`.
    pub buggy_file: PathBuf,
    pub buggy_region: LineRange,
    /// Original content of `buggy_region`, newline-joined without a trailing
    /// newline.
    pub buggy_code: String,
    /// Surrounding function/class shown to the generator.
    #[serde(default)]
    pub context_code: String,
    pub build_command: CommandSpec,
    pub test_command: CommandSpec,
    pub test_cases: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_patch: Option<String>,
}

/// Violations of the `BugSpec` invariants.
#[derive(Debug, thiserror::Error)]
pub enum BugSpecError {
    #[error("bug {bug_id}: workspace root {path} does not exist")]
    MissingWorkspace { bug_id: String, path: PathBuf },
    #[error("bug {bug_id}: buggy file {path} does not exist")]
    MissingBuggyFile { bug_id: String, path: PathBuf },
    #[error("bug {bug_id}: buggy_region {start}-{end} out of range for a {line_count}-line file")]
    RegionOutOfRange {
        bug_id: String,
        start: usize,
        end: usize,
        line_count: usize,
    },
    #[error("bug {bug_id}: buggy_code does not match the file content at buggy_region")]
    RegionMismatch { bug_id: String },
    #[error("bug {bug_id}: test_cases is empty")]
    NoTestCases { bug_id: String },
    #[error("bug {bug_id}: duplicate test_id {test_id}")]
    DuplicateTestId { bug_id: String, test_id: String },
    #[error("bug {bug_id}: timeout must be positive")]
    NonPositiveTimeout { bug_id: String },
    #[error("bug {bug_id}: cannot read {path}: {source}")]
    Io {
        bug_id: String,
        path: PathBuf,
        source: std::io::Error,
    },
}

impl BugSpec {
    /// Reads a bug spec from JSON. A relative `workspace_root` is resolved
    /// against the spec file's directory, so corpora stay relocatable.
    pub fn load(path: &Path) -> Result<Self, BugSpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| BugSpecError::Io {
            bug_id: path.display().to_string(),
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec: BugSpec = serde_json::from_str(&text).map_err(|e| BugSpecError::Io {
            bug_id: path.display().to_string(),
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        if spec.workspace_root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            spec.workspace_root = base.join(&spec.workspace_root);
        }
        Ok(spec)
    }

    /// Checks every declared invariant against the workspace on disk.
    pub fn validate(&self) -> Result<(), BugSpecError> {
        let id = || self.bug_id.clone();
        if !self.workspace_root.is_dir() {
            return Err(BugSpecError::MissingWorkspace {
                bug_id: id(),
                path: self.workspace_root.clone(),
            });
        }
        let file = self.workspace_root.join(&self.buggy_file);
        if !file.is_file() {
            return Err(BugSpecError::MissingBuggyFile {
                bug_id: id(),
                path: file,
            });
        }
        let content = std::fs::read_to_string(&file).map_err(|source| BugSpecError::Io {
            bug_id: id(),
            path: file.clone(),
            source,
        })?;
        let (lines, _) = split_lines(&content);
        let region = self.buggy_region;
        if region.is_empty() || region.start < 1 || region.end > lines.len() {
            return Err(BugSpecError::RegionOutOfRange {
                bug_id: id(),
                start: region.start,
                end: region.end,
                line_count: lines.len(),
            });
        }
        let actual = lines[region.start - 1..region.end].join("\n");
        if actual != self.buggy_code {
            return Err(BugSpecError::RegionMismatch { bug_id: id() });
        }
        if self.test_cases.is_empty() {
            return Err(BugSpecError::NoTestCases { bug_id: id() });
        }
        let mut seen = BTreeSet::new();
        for case in &self.test_cases {
            if !seen.insert(case.test_id.as_str()) {
                return Err(BugSpecError::DuplicateTestId {
                    bug_id: id(),
                    test_id: case.test_id.clone(),
                });
            }
        }
        if self.build_command.timeout_secs <= 0.0 || self.test_command.timeout_secs <= 0.0 {
            return Err(BugSpecError::NonPositiveTimeout { bug_id: id() });
        }
        Ok(())
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOrigin {
    Root,
    Generated,
}

/// A candidate patch: a full replacement of the bug's declared region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub patch_id: String,
    pub replacement_text: String,
    pub origin: PatchOrigin,
}

impl Patch {
    /// The original buggy code, treated as a special form of patch.
    pub fn root(buggy_code: &str) -> Self {
        Patch {
            patch_id: "root".to_string(),
            replacement_text: buggy_code.to_string(),
            origin: PatchOrigin::Root,
        }
    }
}

/// Search-level state of a patch node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Root,
    Partial,
    Plausible,
    CompileFailed,
}

impl NodeStatus {
    /// Plausible and compile-failed nodes are terminal: they are never
    /// selected for further expansion.
    pub fn is_terminal(&self) -> bool {
        matches!(self, NodeStatus::Plausible | NodeStatus::CompileFailed)
    }
}

/// One explored patch inside the tree, with its bandit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchNode {
    /// Insertion order; 0 is the root. Doubles as the deterministic
    /// tie-breaker everywhere.
    pub node_id: usize,
    pub patch: Patch,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Immediate reward from evaluation, in [-1, 1].
    #[serde(rename = "reward_R")]
    pub reward_r: f64,
    /// Long-horizon quality maintained by back-propagation, in [-1, 1].
    #[serde(rename = "quality_Q")]
    pub quality_q: f64,
    #[serde(rename = "visits_N")]
    pub visits_n: u64,
    pub expansions: u32,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationRecord>,
}

/// Transcript of one generator call: chain-of-thought, draft, reflection and
/// the final patch text, plus token accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GenerationRecord {
    pub cot_trace: String,
    pub draft_patch: String,
    pub reflection: String,
    pub final_patch: String,
    /// True when no fenced patch could be extracted from the model output;
    /// such candidates are treated as compile failures downstream.
    #[serde(default)]
    pub unparseable: bool,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_ms: u64,
}

/// Which reward strategy scored a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeStrategy {
    LlmJudge,
    TestJudge,
}

/// Edge-case adjustments applied on top of the base reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    CompileFailure,
    IdenticalToParent,
}

/// Outcome of one test case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Timeout,
    Error,
}

impl TestStatus {
    pub fn passed(&self) -> bool {
        matches!(self, TestStatus::Pass)
    }
}

/// A test outcome together with the captured failure output, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub status: TestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_text: Option<String>,
}

/// How a candidate was scored: strategy, raw judge samples, adjustments and
/// the resulting expected reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub strategy: JudgeStrategy,
    /// Raw 0-100 scores as returned by the judge (empty for test_judge and
    /// for compile failures).
    pub raw_scores: Vec<f64>,
    /// Clamped per-sample rewards in [0, 1], before adjustments.
    pub per_sample_rewards: Vec<f64>,
    pub adjustments: BTreeSet<Adjustment>,
    /// Final expected reward in {-1} ∪ [0, 1].
    pub expected_reward: f64,
    pub test_outcomes: BTreeMap<String, TestOutcome>,
}

impl EvaluationRecord {
    /// Node status implied by this evaluation: compile failures are terminal
    /// failures, full test passes are plausible, everything else is partial.
    pub fn node_status(&self) -> NodeStatus {
        if self.adjustments.contains(&Adjustment::CompileFailure) {
            return NodeStatus::CompileFailed;
        }
        if !self.test_outcomes.is_empty() && self.test_outcomes.values().all(|o| o.status.passed())
        {
            return NodeStatus::Plausible;
        }
        NodeStatus::Partial
    }

    /// Re-derives `expected_reward` from the other fields and checks it
    /// matches, within floating-point noise.
    pub fn check_consistency(&self) -> Result<(), String> {
        if self.adjustments.contains(&Adjustment::CompileFailure) {
            if self.expected_reward != -1.0 {
                return Err(format!(
                    "compile failure must carry reward -1, found {}",
                    self.expected_reward
                ));
            }
            return Ok(());
        }
        if self.per_sample_rewards.is_empty() {
            return Err("missing per-sample rewards".to_string());
        }
        if self.strategy == JudgeStrategy::TestJudge && self.per_sample_rewards.len() != 1 {
            return Err(format!(
                "test_judge must record exactly one sample, found {}",
                self.per_sample_rewards.len()
            ));
        }
        for r in &self.per_sample_rewards {
            if !(0.0..=1.0).contains(r) {
                return Err(format!("per-sample reward {r} outside [0, 1]"));
            }
        }
        let mut expected =
            self.per_sample_rewards.iter().sum::<f64>() / self.per_sample_rewards.len() as f64;
        if self.adjustments.contains(&Adjustment::IdenticalToParent) {
            expected *= 0.5;
        }
        if (expected - self.expected_reward).abs() > 1e-12 {
            return Err(format!(
                "expected_reward {} does not re-derive from samples (got {expected})",
                self.expected_reward
            ));
        }
        Ok(())
    }
}

/// All tunables of one search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// UCT exploration constant C.
    pub exploration_c: f64,
    /// Forgetting factor for back-propagation, in [0, 1].
    pub beta: f64,
    /// Number of judge samples averaged per candidate.
    pub n_judge_samples: usize,
    /// Candidates generated per iteration.
    pub branch: usize,
    /// Maximum expansions of any single node.
    pub max_expansion: u32,
    /// Total candidate patches allowed per bug.
    pub patch_budget: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Test count at or above which the test suite itself becomes the judge.
    pub test_sufficiency_threshold: usize,
    pub early_stop_on_plausible: bool,
    pub rng_seed: u64,
    pub price_per_1k_tokens: f64,
    /// Forces a judge strategy regardless of test count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy_override: Option<JudgeStrategy>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            exploration_c: 0.7,
            beta: 0.8,
            n_judge_samples: 5,
            branch: 1,
            max_expansion: 3,
            patch_budget: 16,
            temperature: 0.9,
            max_tokens: 8000,
            test_sufficiency_threshold: 10,
            early_stop_on_plausible: false,
            rng_seed: 0,
            price_per_1k_tokens: 0.0015,
            strategy_override: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid search config: {0}")]
pub struct ConfigError(pub String);

impl SearchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.exploration_c < 0.0 {
            return Err(ConfigError("exploration_c must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ConfigError("beta must be in [0, 1]".into()));
        }
        if self.n_judge_samples == 0 {
            return Err(ConfigError("n_judge_samples must be >= 1".into()));
        }
        if self.branch == 0 {
            return Err(ConfigError("branch must be >= 1".into()));
        }
        if self.max_expansion == 0 {
            return Err(ConfigError("max_expansion must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(ConfigError("temperature must be >= 0".into()));
        }
        if self.price_per_1k_tokens < 0.0 {
            return Err(ConfigError("price_per_1k_tokens must be >= 0".into()));
        }
        Ok(())
    }
}

/// A plausible patch surfaced by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausiblePatch {
    pub node_id: usize,
    pub replacement_text: String,
    /// True when the normalized patch equals the normalized developer patch.
    pub exact_match: bool,
}

/// One line of the engine's per-candidate log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLogEntry {
    pub selected: usize,
    pub generated: usize,
    pub reward: f64,
    pub status: NodeStatus,
}

/// Outcome of one repair run: plausible patches, totals and the full tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub bug_id: String,
    pub plausible_patches: Vec<PlausiblePatch>,
    pub total_patches_generated: usize,
    pub iterations: usize,
    pub tokens_total: u64,
    pub wall_time_ms: u64,
    pub estimated_cost: f64,
    pub tree_snapshot: PatchTree,
    pub per_iteration_log: Vec<IterationLogEntry>,
    /// Set when the run stopped early on a backend failure; the tree holds
    /// everything explored up to that point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Canonicalizes source text for comparisons: normalizes line endings,
/// strips trailing whitespace per line, collapses runs of blank lines to a
/// single one and drops blank lines at either end. Idempotent.
pub fn normalize_code(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut out: Vec<&str> = Vec::new();
    let mut prev_blank = false;
    for line in unified.split('\n') {
        let line = line.trim_end();
        let blank = line.is_empty();
        if blank && prev_blank {
            continue;
        }
        out.push(line);
        prev_blank = blank;
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    while out.first().is_some_and(|l| l.is_empty()) {
        out.remove(0);
    }
    out.join("\n")
}

/// True when the two texts are equal after normalization.
pub fn patches_match(a: &str, b: &str) -> bool {
    normalize_code(a) == normalize_code(b)
}

/// Splits text into lines without terminators, reporting whether the text
/// ended with a newline so callers can splice and rejoin byte-exactly.
pub(crate) fn split_lines(text: &str) -> (Vec<&str>, bool) {
    let trailing_newline = text.ends_with('\n');
    let body = if trailing_newline {
        &text[..text.len() - 1]
    } else {
        text
    };
    if body.is_empty() && !trailing_newline {
        return (vec![], false);
    }
    (body.split('\n').collect(), trailing_newline)
}

pub(crate) fn join_lines(lines: &[&str], trailing_newline: bool) -> String {
    let mut joined = lines.join("\n");
    if trailing_newline {
        joined.push('\n');
    }
    joined
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_blank_runs_and_line_endings() {
        assert_eq!(normalize_code("a;\r\n\r\n\r\nb;"), "a;\n\nb;");
    }

    #[test]
    fn normalize_empty_is_empty() {
        assert_eq!(normalize_code(""), "");
    }

    #[test]
    fn normalize_strips_trailing_whitespace() {
        assert_eq!(normalize_code("x = 1;   \ny\t"), "x = 1;\ny");
    }

    #[test]
    fn normalize_is_idempotent_on_random_snippets() {
        // Cheap deterministic generator; proptest would be overkill for a
        // pure string property with this little structure.
        let fragments = [
            "int x = 1;", "", "  ", "\t", "\r\n", "\r", "\n", "fn f() {", "}", "a", "// c",
        ];
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..200 {
            let mut snippet = String::new();
            for _ in 0..16 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let idx = (state >> 33) as usize % fragments.len();
                snippet.push_str(fragments[idx]);
                if state & 1 == 1 {
                    snippet.push('\n');
                }
            }
            let once = normalize_code(&snippet);
            assert_eq!(normalize_code(&once), once, "not idempotent on {snippet:?}");
        }
    }

    #[test]
    fn split_join_round_trips() {
        for text in ["", "a", "a\n", "a\nb", "a\nb\n", "\n", "a\n\nb\n"] {
            let (lines, nl) = split_lines(text);
            assert_eq!(join_lines(&lines, nl), text);
        }
    }

    #[test]
    fn evaluation_consistency_accepts_penalized_record() {
        let record = EvaluationRecord {
            strategy: JudgeStrategy::LlmJudge,
            raw_scores: vec![80.0, 80.0],
            per_sample_rewards: vec![0.8, 0.8],
            adjustments: [Adjustment::IdenticalToParent].into_iter().collect(),
            expected_reward: 0.4,
            test_outcomes: BTreeMap::new(),
        };
        assert!(record.check_consistency().is_ok());
    }

    #[test]
    fn evaluation_consistency_rejects_wrong_expectation() {
        let record = EvaluationRecord {
            strategy: JudgeStrategy::LlmJudge,
            raw_scores: vec![80.0],
            per_sample_rewards: vec![0.8],
            adjustments: BTreeSet::new(),
            expected_reward: 0.5,
            test_outcomes: BTreeMap::new(),
        };
        assert!(record.check_consistency().is_err());
    }

    #[test]
    fn node_status_rules() {
        let mut record = EvaluationRecord {
            strategy: JudgeStrategy::TestJudge,
            raw_scores: vec![],
            per_sample_rewards: vec![1.0],
            adjustments: BTreeSet::new(),
            expected_reward: 1.0,
            test_outcomes: BTreeMap::from([(
                "t1".to_string(),
                TestOutcome {
                    status: TestStatus::Pass,
                    failure_text: None,
                },
            )]),
        };
        assert_eq!(record.node_status(), NodeStatus::Plausible);

        record.test_outcomes.insert(
            "t2".to_string(),
            TestOutcome {
                status: TestStatus::Timeout,
                failure_text: Some("timed out".to_string()),
            },
        );
        assert_eq!(record.node_status(), NodeStatus::Partial);

        record.adjustments.insert(Adjustment::CompileFailure);
        assert_eq!(record.node_status(), NodeStatus::CompileFailed);
    }

    #[test]
    fn default_config_matches_published_settings() {
        let config = SearchConfig::default();
        assert_eq!(config.exploration_c, 0.7);
        assert_eq!(config.beta, 0.8);
        assert_eq!(config.n_judge_samples, 5);
        assert_eq!(config.branch, 1);
        assert_eq!(config.max_expansion, 3);
        assert_eq!(config.patch_budget, 16);
        assert_eq!(config.temperature, 0.9);
        assert_eq!(config.max_tokens, 8000);
        assert_eq!(config.price_per_1k_tokens, 0.0015);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn config_rejects_out_of_range_beta() {
        let config = SearchConfig {
            beta: 1.5,
            ..SearchConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
