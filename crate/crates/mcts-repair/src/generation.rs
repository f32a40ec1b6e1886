//! Patch generation: turns a selected partial patch into new candidates via
//! chain-of-thought prompting plus one self-reflection round.
//!
//! Prompt templates are versioned text assets under `assets/prompts/` so
//! tests can pin their content.

use crate::backend::{BackendError, CallKind, ModelBackend};
use crate::llm::{ChatMessage, ChatRequest};
use crate::model::{BugSpec, GenerationRecord, PatchNode, SearchConfig};

pub const REPAIR_SYSTEM_TEMPLATE: &str = include_str!("../assets/prompts/repair_system.txt");
pub const REPAIR_USER_TEMPLATE: &str = include_str!("../assets/prompts/repair_user.txt");
pub const CURRENT_PATCH_SECTION_TEMPLATE: &str =
    include_str!("../assets/prompts/current_patch_section.txt");
pub const REFLECT_USER_TEMPLATE: &str = include_str!("../assets/prompts/reflect_user.txt");

/// Everything the generator needs to extend one selected node.
pub struct GenerationContext<'a> {
    pub bug: &'a BugSpec,
    pub selected_node: &'a PatchNode,
    /// Captured failing-test output of the selected node (the bug's original
    /// failing output when the root is selected).
    pub failure_feedback: String,
    pub config: &'a SearchConfig,
}

/// Single-pass placeholder substitution; substituted values are never
/// re-scanned, so patch text containing braces cannot corrupt the prompt.
pub(crate) fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos..];
        for (key, value) in values {
            let marker_len = key.len() + 2;
            if after.len() >= marker_len
                && after.as_bytes()[marker_len - 1] == b'}'
                && &after[1..1 + key.len()] == *key
            {
                out.push_str(value);
                rest = &after[marker_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}

/// Builds the deterministic repair conversation for a selected node: role
/// preamble, buggy code and context, region marker, failing-test feedback,
/// and the node's own patch when it differs from the original code.
pub fn build_repair_prompt(ctx: &GenerationContext<'_>) -> Vec<ChatMessage> {
    let current = &ctx.selected_node.patch.replacement_text;
    let current_section = if current != &ctx.bug.buggy_code {
        fill_template(CURRENT_PATCH_SECTION_TEMPLATE, &[("current_patch", current)])
    } else {
        String::new()
    };
    let context_code = if ctx.bug.context_code.is_empty() {
        "(none provided)"
    } else {
        ctx.bug.context_code.as_str()
    };
    let feedback = if ctx.failure_feedback.is_empty() {
        "(no failing output captured)"
    } else {
        ctx.failure_feedback.as_str()
    };
    let user = fill_template(
        REPAIR_USER_TEMPLATE,
        &[
            ("bug_id", ctx.bug.bug_id.as_str()),
            ("buggy_file", &ctx.bug.buggy_file.display().to_string()),
            ("region_start", &ctx.bug.buggy_region.start.to_string()),
            ("region_end", &ctx.bug.buggy_region.end.to_string()),
            ("buggy_code", &ctx.bug.buggy_code),
            ("context_code", context_code),
            ("failure_feedback", feedback),
            ("current_patch_section", &current_section),
        ],
    );
    vec![
        ChatMessage::system(REPAIR_SYSTEM_TEMPLATE.trim_end()),
        ChatMessage::user(user),
    ]
}

fn chat_request(config: &SearchConfig, messages: Vec<ChatMessage>) -> ChatRequest {
    ChatRequest {
        model: String::new(),
        messages,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        seed: Some(config.rng_seed),
    }
}

/// Splits model output into (text before the last fenced block, block
/// content). Returns `None` when no complete fenced block exists.
pub(crate) fn split_final_fence(text: &str) -> Option<(String, String)> {
    let mut blocks: Vec<(usize, usize, usize)> = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().starts_with("```") {
            match open.take() {
                None => open = Some((line_start, offset)),
                Some((open_start, content_start)) => {
                    blocks.push((open_start, content_start, line_start));
                }
            }
        }
    }
    let (open_start, content_start, content_end) = *blocks.last()?;
    let content = text[content_start..content_end]
        .trim_end_matches('\n')
        .to_string();
    let before = text[..open_start].trim_end().to_string();
    Some((before, content))
}

/// Content of the last fenced code block in `model_text`; the fence's
/// language tag is ignored.
pub fn extract_patch(model_text: &str) -> Option<String> {
    split_final_fence(model_text).map(|(_, content)| content)
}

/// One critique-and-revise round on a draft patch. The revision falls back to
/// the draft when the reflection emits no usable fenced block.
pub fn reflect(
    backend: &dyn ModelBackend,
    ctx: &GenerationContext<'_>,
    expansion_index: u32,
    repair_messages: &[ChatMessage],
    repair_reply: &str,
    draft: &str,
) -> Result<(String, String, crate::llm::Usage, u64), BackendError> {
    let mut messages = repair_messages.to_vec();
    messages.push(ChatMessage { role: "assistant".to_string(), content: repair_reply.to_string() });
    messages.push(ChatMessage::user(fill_template(
        REFLECT_USER_TEMPLATE,
        &[("draft", draft)],
    )));
    let request = chat_request(ctx.config, messages);
    let kind = CallKind::Reflect {
        bug_id: &ctx.bug.bug_id,
        parent_node_id: ctx.selected_node.node_id,
        expansion_index,
        parent_patch: &ctx.selected_node.patch.replacement_text,
        draft,
    };
    let completion = backend.complete(&kind, &request)?;
    let (reflection, revised) = match split_final_fence(&completion.text) {
        Some((before, content)) if !content.is_empty() => (before, content),
        _ => (completion.text.trim_end().to_string(), draft.to_string()),
    };
    Ok((reflection, revised, completion.usage, completion.wall_time_ms))
}

/// Generates `count` candidate patches from the selected node: one
/// chain-of-thought completion each, followed by one reflection round when
/// the draft is parseable. Never touches the tree or the workspace.
pub fn generate_candidates(
    backend: &dyn ModelBackend,
    ctx: &GenerationContext<'_>,
    count: usize,
) -> Result<Vec<GenerationRecord>, BackendError> {
    let mut records = Vec::with_capacity(count);
    for j in 0..count {
        let expansion_index = ctx.selected_node.expansions + j as u32;
        let messages = build_repair_prompt(ctx);
        let request = chat_request(ctx.config, messages.clone());
        let kind = CallKind::Repair {
            bug_id: &ctx.bug.bug_id,
            parent_node_id: ctx.selected_node.node_id,
            expansion_index,
            parent_patch: &ctx.selected_node.patch.replacement_text,
        };
        let completion = backend.complete(&kind, &request)?;
        let mut prompt_tokens = completion.usage.prompt_tokens;
        let mut completion_tokens = completion.usage.completion_tokens;
        let mut wall_time_ms = completion.wall_time_ms;

        let record = match split_final_fence(&completion.text) {
            Some((cot, draft)) if !draft.is_empty() => {
                let (reflection, revised, usage, reflect_ms) = reflect(
                    backend,
                    ctx,
                    expansion_index,
                    &messages,
                    &completion.text,
                    &draft,
                )?;
                prompt_tokens += usage.prompt_tokens;
                completion_tokens += usage.completion_tokens;
                wall_time_ms += reflect_ms;
                GenerationRecord {
                    cot_trace: cot,
                    draft_patch: draft,
                    reflection,
                    final_patch: revised,
                    unparseable: false,
                    prompt_tokens,
                    completion_tokens,
                    wall_time_ms,
                }
            }
            _ => GenerationRecord {
                cot_trace: completion.text.trim_end().to_string(),
                draft_patch: String::new(),
                reflection: String::new(),
                final_patch: String::new(),
                unparseable: true,
                prompt_tokens,
                completion_tokens,
                wall_time_ms,
            },
        };
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureEntry, ScriptedBackend, ScriptedFixture};
    use crate::model::{CommandSpec, LineRange, NodeStatus, Patch, PatchOrigin, TestCase};
    use std::collections::BTreeMap;

    fn bug() -> BugSpec {
        BugSpec {
            bug_id: "toy1".to_string(),
            workspace_root: "/nonexistent".into(),
            buggy_file: "src/gcd.py".into(),
            buggy_region: LineRange { start: 3, end: 4 },
            buggy_code: "    if b == 0:\n        return gcd(a % b, b)".to_string(),
            context_code: "def gcd(a, b):".to_string(),
            build_command: CommandSpec { command: "true".to_string(), timeout_secs: 5.0 },
            test_command: CommandSpec { command: "true".to_string(), timeout_secs: 5.0 },
            test_cases: vec![TestCase { test_id: "t1".to_string(), invocation: String::new() }],
            reference_patch: None,
        }
    }

    fn node(id: usize, text: &str, expansions: u32) -> PatchNode {
        PatchNode {
            node_id: id,
            patch: Patch {
                patch_id: format!("p{id}"),
                replacement_text: text.to_string(),
                origin: if id == 0 { PatchOrigin::Root } else { PatchOrigin::Generated },
            },
            parent: if id == 0 { None } else { Some(0) },
            children: vec![],
            reward_r: 0.0,
            quality_q: 0.0,
            visits_n: 1,
            expansions,
            status: if id == 0 { NodeStatus::Root } else { NodeStatus::Partial },
            generation: None,
            evaluation: None,
        }
    }

    fn context<'a>(
        bug: &'a BugSpec,
        selected: &'a PatchNode,
        config: &'a SearchConfig,
    ) -> GenerationContext<'a> {
        GenerationContext {
            bug,
            selected_node: selected,
            failure_feedback: "test t1: fail\nexpected 7 got 0".to_string(),
            config,
        }
    }

    #[test]
    fn extract_patch_single_fence() {
        assert_eq!(
            extract_patch("reasoning...\n```java\nint x=1;\n```"),
            Some("int x=1;".to_string())
        );
    }

    #[test]
    fn extract_patch_takes_last_fence() {
        let text = "draft:\n```\nfirst\n```\nbetter:\n```python\nsecond\n```\n";
        assert_eq!(extract_patch(text), Some("second".to_string()));
    }

    #[test]
    fn extract_patch_absent_without_fence() {
        assert_eq!(extract_patch("no code here, just prose"), None);
        assert_eq!(extract_patch("unclosed\n```python\nx = 1"), None);
    }

    #[test]
    fn repair_prompt_is_deterministic_and_complete() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let first = build_repair_prompt(&ctx);
        let second = build_repair_prompt(&ctx);
        assert_eq!(first, second);
        let user = &first[1].content;
        assert!(user.contains(&bug.buggy_code));
        assert!(user.contains("expected 7 got 0"));
        assert!(user.contains("lines 3-4"));
        assert!(!user.contains("CURRENT PATCH"));
    }

    #[test]
    fn repair_prompt_includes_partial_patch_when_it_differs() {
        let bug = bug();
        let config = SearchConfig::default();
        let partial = node(2, "    if b == 0:\n        return a", 1);
        let ctx = context(&bug, &partial, &config);
        let user = &build_repair_prompt(&ctx)[1].content;
        assert!(user.contains(&bug.buggy_code));
        assert!(user.contains("        return a"));
        assert!(user.contains("CURRENT PATCH"));
    }

    #[test]
    fn scripted_generation_passes_patch_through() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let mut entries = BTreeMap::new();
        entries.insert(
            "toy1|0|0".to_string(),
            FixtureEntry {
                cot: "The recursion swaps its arguments.".to_string(),
                draft: "    if b == 0:\n        return a".to_string(),
                reflection: "The draft handles the base case; keep it.".to_string(),
                final_patch: "    if b == 0:\n        return a".to_string(),
                judge_scores: None,
            },
        );
        let backend = ScriptedBackend::new(ScriptedFixture { entries });
        let records = generate_candidates(&backend, &ctx, 1).unwrap();
        assert_eq!(records.len(), 1);
        let record = &records[0];
        assert_eq!(record.final_patch, "    if b == 0:\n        return a");
        assert_eq!(record.cot_trace, "The recursion swaps its arguments.");
        assert_eq!(record.reflection, "The draft handles the base case; keep it.");
        assert!(!record.unparseable);
    }

    #[test]
    fn prose_only_output_yields_unparseable_candidate() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let mut entries = BTreeMap::new();
        entries.insert(
            "toy1|0|0".to_string(),
            FixtureEntry {
                cot: "I cannot decide on a fix.".to_string(),
                draft: String::new(),
                ..FixtureEntry::default()
            },
        );
        let backend = ScriptedBackend::new(ScriptedFixture { entries });
        let records = generate_candidates(&backend, &ctx, 1).unwrap();
        assert!(records[0].unparseable);
        assert!(records[0].final_patch.is_empty());
        // No reflection round is spent on an unusable draft.
        assert_eq!(backend.calls().len(), 1);
    }

    #[test]
    fn reflection_without_fence_keeps_draft() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let mut entries = BTreeMap::new();
        entries.insert(
            "toy1|0|0".to_string(),
            FixtureEntry {
                cot: "Swap the recursion arguments.".to_string(),
                draft: "        return gcd(b, a % b)".to_string(),
                reflection: "Critique only, no revised code.".to_string(),
                final_patch: String::new(),
                judge_scores: None,
            },
        );
        let backend = ScriptedBackend::new(ScriptedFixture { entries });
        let records = generate_candidates(&backend, &ctx, 1).unwrap();
        assert_eq!(records[0].final_patch, "        return gcd(b, a % b)");
        assert_eq!(records[0].reflection, "Critique only, no revised code.");
        assert!(!records[0].unparseable);
    }

    #[test]
    fn reflection_with_improved_fence_replaces_draft() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let mut entries = BTreeMap::new();
        entries.insert(
            "toy1|0|0".to_string(),
            FixtureEntry {
                cot: "c".to_string(),
                draft: "draft body".to_string(),
                reflection: "The draft misses the base case.".to_string(),
                final_patch: "improved body".to_string(),
                judge_scores: None,
            },
        );
        let backend = ScriptedBackend::new(ScriptedFixture { entries });
        let records = generate_candidates(&backend, &ctx, 1).unwrap();
        assert_eq!(records[0].draft_patch, "draft body");
        assert_eq!(records[0].final_patch, "improved body");
    }

    #[test]
    fn token_usage_sums_across_completions() {
        let bug = bug();
        let config = SearchConfig::default();
        let root = node(0, &bug.buggy_code, 0);
        let ctx = context(&bug, &root, &config);
        let mut entries = BTreeMap::new();
        entries.insert(
            "toy1|0|0".to_string(),
            FixtureEntry {
                cot: "analysis".to_string(),
                draft: "fixed".to_string(),
                reflection: "fine".to_string(),
                final_patch: "fixed".to_string(),
                judge_scores: None,
            },
        );
        let backend = ScriptedBackend::new(ScriptedFixture { entries });
        let records = generate_candidates(&backend, &ctx, 1).unwrap();
        let calls = backend.calls();
        assert_eq!(calls.len(), 2);
        let prompt_sum: u64 = calls.iter().map(|c| c.usage.prompt_tokens).sum();
        let completion_sum: u64 = calls.iter().map(|c| c.usage.completion_tokens).sum();
        assert_eq!(records[0].prompt_tokens, prompt_sum);
        assert_eq!(records[0].completion_tokens, completion_sum);
    }

    #[test]
    fn fill_template_is_single_pass() {
        let out = fill_template(
            "a={a} b={b} missing={missing}",
            &[("a", "{b}"), ("b", "2")],
        );
        assert_eq!(out, "a={b} b=2 missing={missing}");
    }
}
