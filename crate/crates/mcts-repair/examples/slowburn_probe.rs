use mcts_repair::backend::ScriptedBackend;
use mcts_repair::engine::repair;
use mcts_repair::model::{BugSpec, SearchConfig};
use std::path::Path;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus/quix-sublist-sum");
    let bug = BugSpec::load(&dir.join("bugspec.json")).unwrap();
    let backend = ScriptedBackend::from_path(&dir.join("fixture.json")).unwrap();
    let config = SearchConfig { patch_budget: 32, ..SearchConfig::default() };
    let report = repair(&bug, &backend, &config).unwrap();
    for (i, e) in report.per_iteration_log.iter().enumerate() {
        let parent_exp_idx = {
            // expansion index used for this candidate: position among parent's children
            let parent = &report.tree_snapshot.nodes[e.selected];
            parent.children.iter().position(|&c| c == e.generated).unwrap()
        };
        println!(
            "cand {:>2}: selected {:>2} expansion {} -> node {:>2} R={:+.3} {:?}",
            i + 1, e.selected, parent_exp_idx, e.generated, e.reward, e.status
        );
    }
}
