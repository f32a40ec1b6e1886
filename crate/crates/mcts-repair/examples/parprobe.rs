use mcts_repair::backend::ScriptedBackend;
use mcts_repair::bench::load_corpus;
use mcts_repair::engine::repair;
use mcts_repair::model::SearchConfig;
use std::path::Path;
use std::time::Instant;

fn main() {
    let corpus_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    let t = Instant::now();
    let entries = load_corpus(&corpus_dir).unwrap();
    println!("load_corpus: {:?}", t.elapsed());
    let t = Instant::now();
    std::thread::scope(|scope| {
        for entry in &entries {
            scope.spawn(move || {
                let backend = ScriptedBackend::new(entry.fixture.clone());
                let config = SearchConfig { patch_budget: entry.expected.budget, ..SearchConfig::default() };
                let started = Instant::now();
                let report = repair(&entry.bug, &backend, &config).unwrap();
                println!("  {:<20} {:>2} candidates plausible={} in {:?}",
                    entry.bug.bug_id, report.total_patches_generated,
                    !report.plausible_patches.is_empty(), started.elapsed());
            });
        }
    });
    println!("parallel corpus wall time: {:?}", t.elapsed());
}
