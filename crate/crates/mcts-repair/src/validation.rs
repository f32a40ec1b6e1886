//! Patch validation: apply a candidate to an isolated copy of the workspace,
//! compile it, run the declared tests under timeouts and capture structured
//! outcomes. The original workspace is never touched.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::model::{join_lines, split_lines, BugSpec, Patch, TestStatus};

/// Captured failure output is capped at 8 KiB per test to bound prompt size.
pub const FAILURE_TEXT_CAP: usize = 8 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error("region {start}-{end} out of range for a {line_count}-line file")]
    RegionOutOfRange { start: usize, end: usize, line_count: usize },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Structured outcome of validating one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationResult {
    pub compiled: bool,
    pub outcomes: BTreeMap<String, TestStatus>,
    pub failure_text: BTreeMap<String, String>,
    pub test_wall_time_ms: BTreeMap<String, u64>,
    pub wall_time_ms: u64,
}

impl ValidationResult {
    /// Result standing in for a candidate that never reached the build
    /// (empty or unparseable patch text).
    pub fn not_compiled() -> Self {
        ValidationResult {
            compiled: false,
            outcomes: BTreeMap::new(),
            failure_text: BTreeMap::new(),
            test_wall_time_ms: BTreeMap::new(),
            wall_time_ms: 0,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.compiled && !self.outcomes.is_empty() && self.outcomes.values().all(|s| s.passed())
    }

    pub fn passed_count(&self) -> usize {
        self.outcomes.values().filter(|s| s.passed()).count()
    }

    /// Failing test names and their captured output, formatted for prompts.
    pub fn failure_feedback(&self) -> String {
        let mut out = String::new();
        for (test_id, status) in &self.outcomes {
            if status.passed() {
                continue;
            }
            let label = match status {
                TestStatus::Pass => unreachable!(),
                TestStatus::Fail => "fail",
                TestStatus::Timeout => "timeout",
                TestStatus::Error => "error",
            };
            out.push_str(&format!("test {test_id}: {label}\n"));
            if let Some(text) = self.failure_text.get(test_id) {
                if !text.is_empty() {
                    out.push_str(text);
                    if !text.ends_with('\n') {
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

/// A disposable copy of the bug's workspace. Dropped directories are cleaned
/// up by the OS temp dir handling in `tempfile`.
pub struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    /// Copies the whole workspace into a fresh temporary directory.
    pub fn create(workspace_root: &Path) -> Result<Self, ValidationError> {
        let dir = tempfile::Builder::new().prefix("mcts-repair-").tempdir()?;
        copy_tree(workspace_root, dir.path())?;
        Ok(Sandbox { dir })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(from).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let relative = entry
            .path()
            .strip_prefix(from)
            .map_err(std::io::Error::other)?;
        if relative.as_os_str().is_empty() {
            continue;
        }
        let target = to.join(relative);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Replaces the bug's declared region inside the sandbox copy of the buggy
/// file with the patch text; the rest of the file stays byte-identical.
pub fn apply_patch(bug: &BugSpec, patch: &Patch, sandbox_dir: &Path) -> Result<(), ValidationError> {
    let file = sandbox_dir.join(&bug.buggy_file);
    let content = std::fs::read_to_string(&file)?;
    let (lines, trailing_newline) = split_lines(&content);
    let region = bug.buggy_region;
    if region.is_empty() || region.start < 1 || region.end > lines.len() {
        return Err(ValidationError::RegionOutOfRange {
            start: region.start,
            end: region.end,
            line_count: lines.len(),
        });
    }
    let replacement = patch.replacement_text.strip_suffix('\n').unwrap_or(&patch.replacement_text);
    let mut spliced: Vec<&str> = Vec::with_capacity(lines.len());
    spliced.extend_from_slice(&lines[..region.start - 1]);
    spliced.extend(replacement.split('\n'));
    spliced.extend_from_slice(&lines[region.end..]);
    std::fs::write(&file, join_lines(&spliced, trailing_newline))?;
    Ok(())
}

#[derive(Debug)]
struct ExecOutcome {
    exit_code: Option<i32>,
    timed_out: bool,
    output: String,
}

/// Runs a command line through the platform shell in `dir`, killing it when
/// the timeout elapses. Output goes to temp files so large writes cannot
/// deadlock the child.
fn run_shell(command: &str, dir: &Path, timeout: Duration) -> std::io::Result<ExecOutcome> {
    let stdout_file = tempfile::tempfile()?;
    let stderr_file = tempfile::tempfile()?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::from(stdout_file.try_clone()?))
        .stderr(Stdio::from(stderr_file.try_clone()?))
        .spawn()?;
    let deadline = Instant::now() + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            let _ = child.kill();
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let mut output = String::new();
    for mut file in [stdout_file, stderr_file] {
        use std::io::Seek;
        file.seek(std::io::SeekFrom::Start(0))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        output.push_str(&String::from_utf8_lossy(&buf));
    }
    Ok(ExecOutcome { exit_code: status.code(), timed_out, output: tail(&output, FAILURE_TEXT_CAP) })
}

/// Last `cap` bytes of `text`, aligned to a character boundary.
fn tail(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut start = text.len() - cap;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

/// Runs the build command in the sandbox; true iff it exits 0 within its
/// timeout.
pub fn compile(bug: &BugSpec, sandbox_dir: &Path) -> Result<bool, ValidationError> {
    let outcome = run_shell(
        &bug.build_command.command,
        sandbox_dir,
        Duration::from_secs_f64(bug.build_command.timeout_secs),
    )?;
    if outcome.timed_out {
        log::debug!("build timed out for {}", bug.bug_id);
        return Ok(false);
    }
    Ok(outcome.exit_code == Some(0))
}

/// Runs every declared test case, substituting its invocation into the
/// `{test}` placeholder of the test command. Exit 0 is a pass; anything else
/// is a fail with the output tail captured; overruns are timeouts.
pub fn run_tests(bug: &BugSpec, sandbox_dir: &Path) -> Result<ValidationResult, ValidationError> {
    let started = Instant::now();
    let mut outcomes = BTreeMap::new();
    let mut failure_text = BTreeMap::new();
    let mut test_wall_time_ms = BTreeMap::new();
    let timeout = Duration::from_secs_f64(bug.test_command.timeout_secs);
    for case in &bug.test_cases {
        let command = bug.test_command.command.replace("{test}", &case.invocation);
        let test_started = Instant::now();
        let outcome = run_shell(&command, sandbox_dir, timeout)?;
        test_wall_time_ms.insert(case.test_id.clone(), test_started.elapsed().as_millis() as u64);
        let status = if outcome.timed_out {
            TestStatus::Timeout
        } else {
            match outcome.exit_code {
                Some(0) => TestStatus::Pass,
                Some(_) => TestStatus::Fail,
                None => TestStatus::Error,
            }
        };
        if status != TestStatus::Pass {
            failure_text.insert(case.test_id.clone(), outcome.output);
        }
        outcomes.insert(case.test_id.clone(), status);
    }
    Ok(ValidationResult {
        compiled: true,
        outcomes,
        failure_text,
        test_wall_time_ms,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

/// Full pipeline for one candidate: sandbox copy, apply, compile, test.
pub fn validate_patch(bug: &BugSpec, patch: &Patch) -> Result<ValidationResult, ValidationError> {
    let started = Instant::now();
    let sandbox = Sandbox::create(&bug.workspace_root)?;
    apply_patch(bug, patch, sandbox.path())?;
    if !compile(bug, sandbox.path())? {
        return Ok(ValidationResult {
            compiled: false,
            outcomes: BTreeMap::new(),
            failure_text: BTreeMap::new(),
            test_wall_time_ms: BTreeMap::new(),
            wall_time_ms: started.elapsed().as_millis() as u64,
        });
    }
    let mut result = run_tests(bug, sandbox.path())?;
    result.wall_time_ms = started.elapsed().as_millis() as u64;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CommandSpec, LineRange, PatchOrigin, TestCase};
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn ten_line_file() -> String {
        (1..=10).map(|i| format!("line {i}")).collect::<Vec<_>>().join("\n") + "\n"
    }

    fn write_workspace(dir: &Path, file_content: &str) {
        std::fs::create_dir_all(dir.join("src")).unwrap();
        std::fs::write(dir.join("src/main.txt"), file_content).unwrap();
    }

    fn bug_in(dir: &Path) -> BugSpec {
        BugSpec {
            bug_id: "toy".to_string(),
            workspace_root: dir.to_path_buf(),
            buggy_file: "src/main.txt".into(),
            buggy_region: LineRange { start: 3, end: 5 },
            buggy_code: "line 3\nline 4\nline 5".to_string(),
            context_code: String::new(),
            build_command: CommandSpec { command: "true".to_string(), timeout_secs: 5.0 },
            test_command: CommandSpec { command: "true".to_string(), timeout_secs: 5.0 },
            test_cases: vec![TestCase { test_id: "t1".to_string(), invocation: String::new() }],
            reference_patch: None,
        }
    }

    fn generated(text: &str) -> Patch {
        Patch {
            patch_id: "p1".to_string(),
            replacement_text: text.to_string(),
            origin: PatchOrigin::Generated,
        }
    }

    fn hash_tree(dir: &Path) -> u64 {
        let mut hasher = DefaultHasher::new();
        let mut entries: Vec<_> = walkdir::WalkDir::new(dir)
            .into_iter()
            .map(|e| e.unwrap())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.path().to_path_buf())
            .collect();
        entries.sort();
        for path in entries {
            path.strip_prefix(dir).unwrap().hash(&mut hasher);
            std::fs::read(&path).unwrap().hash(&mut hasher);
        }
        hasher.finish()
    }

    #[test]
    fn apply_identity_patch_leaves_file_byte_identical() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let bug = bug_in(workspace.path());
        let sandbox = Sandbox::create(workspace.path()).unwrap();
        apply_patch(&bug, &Patch::root(&bug.buggy_code), sandbox.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(sandbox.path().join("src/main.txt")).unwrap(),
            ten_line_file()
        );
    }

    #[test]
    fn apply_patch_splices_region() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let bug = bug_in(workspace.path());
        let sandbox = Sandbox::create(workspace.path()).unwrap();
        apply_patch(&bug, &generated("new a\nnew b"), sandbox.path()).unwrap();
        let patched = std::fs::read_to_string(sandbox.path().join("src/main.txt")).unwrap();
        let lines: Vec<&str> = patched.trim_end().split('\n').collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[1], "line 2");
        assert_eq!(lines[2], "new a");
        assert_eq!(lines[3], "new b");
        assert_eq!(lines[4], "line 6");
        assert_eq!(lines[8], "line 10");
    }

    #[test]
    fn apply_patch_rejects_out_of_range_region() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let mut bug = bug_in(workspace.path());
        bug.buggy_region = LineRange { start: 50, end: 60 };
        let sandbox = Sandbox::create(workspace.path()).unwrap();
        let err = apply_patch(&bug, &generated("x"), sandbox.path()).unwrap_err();
        assert!(matches!(err, ValidationError::RegionOutOfRange { .. }));
    }

    #[test]
    fn compile_reflects_exit_status_and_timeout() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let mut bug = bug_in(workspace.path());

        assert!(compile(&bug, workspace.path()).unwrap());

        bug.build_command.command = "false".to_string();
        assert!(!compile(&bug, workspace.path()).unwrap());

        bug.build_command = CommandSpec { command: "sleep 5".to_string(), timeout_secs: 0.2 };
        let started = Instant::now();
        assert!(!compile(&bug, workspace.path()).unwrap());
        assert!(started.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn run_tests_classifies_pass_fail_timeout() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let mut bug = bug_in(workspace.path());
        bug.test_command = CommandSpec { command: "{test}".to_string(), timeout_secs: 0.5 };
        bug.test_cases = vec![
            TestCase { test_id: "pass".to_string(), invocation: "true".to_string() },
            TestCase {
                test_id: "fail".to_string(),
                invocation: "echo 'expected 4 got 5' >&2; exit 1".to_string(),
            },
            TestCase { test_id: "slow".to_string(), invocation: "sleep 5".to_string() },
        ];
        let result = run_tests(&bug, workspace.path()).unwrap();
        assert_eq!(result.outcomes["pass"], TestStatus::Pass);
        assert_eq!(result.outcomes["fail"], TestStatus::Fail);
        assert_eq!(result.outcomes["slow"], TestStatus::Timeout);
        assert!(result.failure_text["fail"].contains("expected 4 got 5"));
        assert!(!result.failure_text.contains_key("pass"));
        assert!(!result.all_passed());
        assert_eq!(result.passed_count(), 1);
    }

    #[test]
    fn green_suite_has_no_failure_text() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let mut bug = bug_in(workspace.path());
        bug.test_cases = (0..3)
            .map(|i| TestCase { test_id: format!("t{i}"), invocation: String::new() })
            .collect();
        let result = run_tests(&bug, workspace.path()).unwrap();
        assert!(result.all_passed());
        assert!(result.failure_text.is_empty());
        assert!(result.failure_feedback().is_empty());
    }

    #[test]
    fn validation_never_mutates_the_original_workspace() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let bug = bug_in(workspace.path());
        let before = hash_tree(workspace.path());
        let result = validate_patch(&bug, &generated("changed\nlines")).unwrap();
        assert!(result.compiled);
        assert_eq!(hash_tree(workspace.path()), before);
    }

    #[test]
    fn validation_is_deterministic_for_deterministic_tests() {
        let workspace = tempfile::tempdir().unwrap();
        write_workspace(workspace.path(), &ten_line_file());
        let mut bug = bug_in(workspace.path());
        bug.test_command = CommandSpec { command: "{test}".to_string(), timeout_secs: 2.0 };
        bug.test_cases = vec![
            TestCase { test_id: "a".to_string(), invocation: "true".to_string() },
            TestCase { test_id: "b".to_string(), invocation: "echo nope; exit 3".to_string() },
        ];
        let first = validate_patch(&bug, &generated("x")).unwrap();
        let second = validate_patch(&bug, &generated("x")).unwrap();
        assert_eq!(first.outcomes, second.outcomes);
        assert_eq!(first.failure_text, second.failure_text);
    }

    #[test]
    fn tail_truncates_to_cap() {
        let long = "x".repeat(FAILURE_TEXT_CAP + 100);
        assert_eq!(tail(&long, FAILURE_TEXT_CAP).len(), FAILURE_TEXT_CAP);
        assert_eq!(tail("short", FAILURE_TEXT_CAP), "short");
    }
}
