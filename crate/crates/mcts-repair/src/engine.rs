//! The iteration loop: select a node, generate candidates, validate and
//! evaluate each one, insert it into the tree and back-propagate, under a
//! per-bug candidate budget.

use std::time::Instant;

use crate::backend::{BackendError, CountingBackend, ModelBackend};
use crate::evaluation::{evaluate, JudgeContext};
use crate::generation::{generate_candidates, GenerationContext};
use crate::llm::cost;
use crate::model::{
    patches_match, BugSpec, BugSpecError, ConfigError, IterationLogEntry, NodeStatus, Patch,
    PatchOrigin, PlausiblePatch, RepairReport, SearchConfig, TestOutcome,
};
use crate::tree::{eligible, PatchTree, TreeError};
use crate::validation::{validate_patch, ValidationError, ValidationResult};

/// How the next node to expand is chosen. `Chain` is the serial
/// trial-and-error baseline: always extend the most recently added
/// non-terminal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    Mcts,
    Chain,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid bug spec: {0}")]
    InvalidBugSpec(#[from] BugSpecError),
    #[error("invalid config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("validation failed: {0}")]
    Validation(#[from] ValidationError),
    #[error("tree operation failed: {0}")]
    Tree(#[from] TreeError),
}

fn select_with_policy(
    tree: &PatchTree,
    config: &SearchConfig,
    policy: SelectionPolicy,
) -> Result<usize, TreeError> {
    match policy {
        SelectionPolicy::Mcts => tree.select(config),
        SelectionPolicy::Chain => tree
            .nodes
            .iter()
            .rev()
            .find(|node| eligible(node, config))
            .map(|node| node.node_id)
            .ok_or(TreeError::NoEligibleNode),
    }
}

fn failing_output(outcomes: &std::collections::BTreeMap<String, TestOutcome>) -> String {
    let mut out = String::new();
    for (test_id, outcome) in outcomes {
        if outcome.status.passed() {
            continue;
        }
        out.push_str(&format!("test {test_id}: {:?}\n", outcome.status));
        if let Some(text) = &outcome.failure_text {
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

/// Runs the full search for one bug with UCT selection.
pub fn repair(
    bug: &BugSpec,
    backend: &dyn ModelBackend,
    config: &SearchConfig,
) -> Result<RepairReport, EngineError> {
    repair_with_policy(bug, backend, config, SelectionPolicy::Mcts)
}

/// Runs the full search for one bug under the given selection policy.
///
/// A backend outage does not lose the tree: the run stops and the report
/// comes back marked `aborted` with everything explored so far.
pub fn repair_with_policy(
    bug: &BugSpec,
    backend: &dyn ModelBackend,
    config: &SearchConfig,
    policy: SelectionPolicy,
) -> Result<RepairReport, EngineError> {
    config.validate()?;
    bug.validate()?;
    let started = Instant::now();
    let counting = CountingBackend::new(backend);

    let mut tree = PatchTree::new(Patch::root(&bug.buggy_code));
    let mut root_feedback = String::new();
    if config.patch_budget > 0 {
        let root_validation = validate_patch(bug, &tree.nodes[0].patch)?;
        root_feedback = if root_validation.compiled {
            root_validation.failure_feedback()
        } else {
            "(the original program does not build)".to_string()
        };
    }

    let mut plausible_patches: Vec<PlausiblePatch> = Vec::new();
    let mut per_iteration_log: Vec<IterationLogEntry> = Vec::new();
    let mut total_patches_generated = 0usize;
    let mut iterations = 0usize;
    let mut aborted = None;

    'run: while total_patches_generated < config.patch_budget {
        let selected = match select_with_policy(&tree, config, policy) {
            Ok(id) => id,
            Err(TreeError::NoEligibleNode) => break,
            Err(e) => return Err(e.into()),
        };
        let snapshot = tree.nodes[selected].clone();
        let failure_feedback = if selected == 0 {
            root_feedback.clone()
        } else {
            snapshot
                .evaluation
                .as_ref()
                .map(|e| failing_output(&e.test_outcomes))
                .unwrap_or_default()
        };
        let remaining_budget = config.patch_budget - total_patches_generated;
        let remaining_expansions = (config.max_expansion - snapshot.expansions) as usize;
        let count = config.branch.min(remaining_budget).min(remaining_expansions);

        let ctx = GenerationContext {
            bug,
            selected_node: &snapshot,
            failure_feedback,
            config,
        };
        let records = match generate_candidates(&counting, &ctx, count) {
            Ok(records) => records,
            Err(BackendError::Unavailable(m)) | Err(BackendError::Malformed(m)) => {
                aborted = Some(m);
                break;
            }
        };

        for (offset, record) in records.into_iter().enumerate() {
            let patch = Patch {
                patch_id: format!("p{:04}", tree.next_id),
                replacement_text: record.final_patch.clone(),
                origin: PatchOrigin::Generated,
            };
            let validation = if record.unparseable || record.final_patch.is_empty() {
                ValidationResult::not_compiled()
            } else {
                validate_patch(bug, &patch)?
            };
            let judge_ctx = JudgeContext {
                bug,
                candidate: &patch,
                parent: &snapshot.patch,
                parent_node_id: selected,
                expansion_index: snapshot.expansions + offset as u32,
                generation: &record,
                validation: &validation,
            };
            let evaluation = match evaluate(&counting, &judge_ctx, config) {
                Ok(evaluation) => evaluation,
                Err(BackendError::Unavailable(m)) | Err(BackendError::Malformed(m)) => {
                    aborted = Some(m);
                    break 'run;
                }
            };
            let reward = evaluation.expected_reward;
            let node_id = tree.add_child(selected, patch, record, evaluation, config)?;
            tree.backpropagate(node_id, config.beta)?;
            total_patches_generated += 1;

            let status = tree.nodes[node_id].status;
            per_iteration_log.push(IterationLogEntry {
                selected,
                generated: node_id,
                reward,
                status,
            });
            if status == NodeStatus::Plausible {
                let text = &tree.nodes[node_id].patch.replacement_text;
                let exact_match = bug
                    .reference_patch
                    .as_deref()
                    .map(|reference| patches_match(text, reference))
                    .unwrap_or(false);
                plausible_patches.push(PlausiblePatch {
                    node_id,
                    replacement_text: text.clone(),
                    exact_match,
                });
            }
        }
        iterations += 1;
        if config.early_stop_on_plausible && !plausible_patches.is_empty() {
            break;
        }
    }

    let tokens_total = counting.total_tokens();
    Ok(RepairReport {
        bug_id: bug.bug_id.clone(),
        plausible_patches,
        total_patches_generated,
        iterations,
        tokens_total,
        wall_time_ms: started.elapsed().as_millis() as u64,
        estimated_cost: cost(tokens_total, config.price_per_1k_tokens),
        tree_snapshot: tree,
        per_iteration_log,
        aborted,
    })
}
