use mcts_repair::backend::ScriptedBackend;
use mcts_repair::bench::load_corpus;
use mcts_repair::engine::repair;
use mcts_repair::model::SearchConfig;
use std::path::Path;

fn main() {
    let corpus_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    let entries = load_corpus(&corpus_dir).unwrap();
    println!("loaded {} entries", entries.len());
    for entry in &entries {
        let backend = ScriptedBackend::new(entry.fixture.clone());
        let config = SearchConfig { patch_budget: entry.expected.budget, ..SearchConfig::default() };
        let start = std::time::Instant::now();
        let report = repair(&entry.bug, &backend, &config).unwrap();
        let em = report.plausible_patches.iter().any(|p| p.exact_match);
        println!(
            "{:<22} plausible={} (expected {}) em={} (expected {}) candidates={} iters={} first_plausible={:?} elapsed={:?}",
            entry.bug.bug_id,
            !report.plausible_patches.is_empty(),
            entry.expected.plausible_within_budget,
            em,
            entry.expected.em_expected,
            report.total_patches_generated,
            report.iterations,
            report.per_iteration_log.iter().position(|e| matches!(e.status, mcts_repair::model::NodeStatus::Plausible)).map(|i| i + 1),
            start.elapsed(),
        );
    }
}
