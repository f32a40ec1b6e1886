//! Candidate scoring: pass-rate rewards when tests are plentiful, clamped
//! LLM-judge score expectations when they are sparse, plus the edge-case
//! adjustments for compile failures and identical-to-parent candidates.

use std::collections::{BTreeMap, BTreeSet};

use crate::backend::{BackendError, CallKind, ModelBackend};
use crate::generation::fill_template;
use crate::llm::{ChatMessage, ChatRequest};
use crate::model::{
    patches_match, Adjustment, BugSpec, EvaluationRecord, GenerationRecord, JudgeStrategy, Patch,
    SearchConfig, TestOutcome,
};
use crate::validation::ValidationResult;

pub const JUDGE_SYSTEM_TEMPLATE: &str = include_str!("../assets/prompts/judge_system.txt");
pub const JUDGE_USER_TEMPLATE: &str = include_str!("../assets/prompts/judge_user.txt");

/// Everything a judge may look at when scoring one candidate.
pub struct JudgeContext<'a> {
    pub bug: &'a BugSpec,
    pub candidate: &'a Patch,
    pub parent: &'a Patch,
    /// Tree position of the candidate (used for scripted-backend routing and
    /// logs, not by the live judge).
    pub parent_node_id: usize,
    pub expansion_index: u32,
    pub generation: &'a GenerationRecord,
    pub validation: &'a ValidationResult,
}

/// Picks the reward strategy: the test suite judges itself once a bug has
/// enough tests, otherwise the model does. An explicit override wins.
pub fn choose_strategy(bug: &BugSpec, config: &SearchConfig) -> JudgeStrategy {
    if let Some(strategy) = config.strategy_override {
        return strategy;
    }
    if bug.test_cases.len() >= config.test_sufficiency_threshold {
        JudgeStrategy::TestJudge
    } else {
        JudgeStrategy::LlmJudge
    }
}

/// Normalizes a raw 0-100 judge score into a reward in [0, 1].
pub fn clamp_score(score: f64) -> f64 {
    if score <= 0.0 {
        0.0
    } else if score >= 100.0 {
        1.0
    } else {
        score / 100.0
    }
}

/// Parses the judge's score: the last non-empty line must be a bare number.
pub(crate) fn parse_score(text: &str) -> Option<f64> {
    text.lines()
        .rev()
        .map(str::trim)
        .find(|line| !line.is_empty())
        .and_then(|line| line.parse::<f64>().ok())
        .filter(|score| score.is_finite())
}

fn format_test_results(validation: &ValidationResult) -> String {
    if !validation.compiled {
        return "(candidate did not compile)".to_string();
    }
    let mut out = String::new();
    for (test_id, status) in &validation.outcomes {
        out.push_str(&format!("{test_id}: {status:?}\n"));
        if let Some(text) = validation.failure_text.get(test_id) {
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

/// Builds the deterministic judging conversation from every context field.
pub fn build_judge_prompt(ctx: &JudgeContext<'_>) -> Vec<ChatMessage> {
    let test_ids = ctx
        .bug
        .test_cases
        .iter()
        .map(|t| t.test_id.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let context_code = if ctx.bug.context_code.is_empty() {
        "(none provided)"
    } else {
        ctx.bug.context_code.as_str()
    };
    let user = fill_template(
        JUDGE_USER_TEMPLATE,
        &[
            ("bug_id", ctx.bug.bug_id.as_str()),
            ("buggy_file", &ctx.bug.buggy_file.display().to_string()),
            ("buggy_code", &ctx.bug.buggy_code),
            ("context_code", context_code),
            ("candidate_patch", &ctx.candidate.replacement_text),
            ("test_ids", &test_ids),
            ("test_results", &format_test_results(ctx.validation)),
            ("cot_trace", &ctx.generation.cot_trace),
            ("reflection", &ctx.generation.reflection),
        ],
    );
    vec![
        ChatMessage::system(JUDGE_SYSTEM_TEMPLATE.trim_end()),
        ChatMessage::user(user),
    ]
}

fn outcome_records(validation: &ValidationResult) -> BTreeMap<String, TestOutcome> {
    validation
        .outcomes
        .iter()
        .map(|(test_id, status)| {
            (
                test_id.clone(),
                TestOutcome {
                    status: *status,
                    failure_text: validation.failure_text.get(test_id).cloned(),
                },
            )
        })
        .collect()
}

/// Scores a compiled candidate by sampling the judge `n_judge_samples` times,
/// clamping each raw score and averaging. An unparseable sample is re-asked
/// once and then recorded as zero.
pub fn llm_judge(
    backend: &dyn ModelBackend,
    ctx: &JudgeContext<'_>,
    config: &SearchConfig,
) -> Result<EvaluationRecord, BackendError> {
    let messages = build_judge_prompt(ctx);
    let request = ChatRequest {
        model: String::new(),
        messages,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        seed: Some(config.rng_seed),
    };
    let mut raw_scores = Vec::with_capacity(config.n_judge_samples);
    for sample_index in 0..config.n_judge_samples {
        let mut score = None;
        for retry in [false, true] {
            let kind = CallKind::Judge {
                bug_id: &ctx.bug.bug_id,
                parent_node_id: ctx.parent_node_id,
                expansion_index: ctx.expansion_index,
                candidate_patch: &ctx.candidate.replacement_text,
                sample_index,
                retry,
            };
            let completion = backend.complete(&kind, &request)?;
            score = parse_score(&completion.text);
            if score.is_some() {
                break;
            }
        }
        raw_scores.push(score.unwrap_or(0.0));
    }
    let per_sample_rewards: Vec<f64> = raw_scores.iter().copied().map(clamp_score).collect();
    let expected_reward =
        per_sample_rewards.iter().sum::<f64>() / per_sample_rewards.len() as f64;
    Ok(EvaluationRecord {
        strategy: JudgeStrategy::LlmJudge,
        raw_scores,
        per_sample_rewards,
        adjustments: BTreeSet::new(),
        expected_reward,
        test_outcomes: outcome_records(ctx.validation),
    })
}

/// Scores a compiled candidate as the fraction of declared tests it passes;
/// timeouts and errors count as not-passed. The single sample is its own
/// expectation.
pub fn test_judge(ctx: &JudgeContext<'_>) -> EvaluationRecord {
    let total = ctx.bug.test_cases.len();
    let passed = ctx.validation.passed_count();
    let reward = passed as f64 / total as f64;
    EvaluationRecord {
        strategy: JudgeStrategy::TestJudge,
        raw_scores: vec![],
        per_sample_rewards: vec![reward],
        adjustments: BTreeSet::new(),
        expected_reward: reward,
        test_outcomes: outcome_records(ctx.validation),
    }
}

/// Full evaluation pipeline. Compile failures (including empty or
/// unparseable patch text) short-circuit to reward -1 without any judge
/// call; identical-to-parent candidates keep half their reward.
pub fn evaluate(
    backend: &dyn ModelBackend,
    ctx: &JudgeContext<'_>,
    config: &SearchConfig,
) -> Result<EvaluationRecord, BackendError> {
    let strategy = choose_strategy(ctx.bug, config);
    if ctx.generation.unparseable
        || ctx.candidate.replacement_text.is_empty()
        || !ctx.validation.compiled
    {
        return Ok(EvaluationRecord {
            strategy,
            raw_scores: vec![],
            per_sample_rewards: vec![],
            adjustments: [Adjustment::CompileFailure].into_iter().collect(),
            expected_reward: -1.0,
            test_outcomes: BTreeMap::new(),
        });
    }
    let mut record = match strategy {
        JudgeStrategy::LlmJudge => llm_judge(backend, ctx, config)?,
        JudgeStrategy::TestJudge => test_judge(ctx),
    };
    if patches_match(&ctx.candidate.replacement_text, &ctx.parent.replacement_text) {
        record.adjustments.insert(Adjustment::IdenticalToParent);
        record.expected_reward *= 0.5;
    }
    Ok(record)
}
