use mcts_repair::bench::*;
use mcts_repair::engine::SelectionPolicy;
use mcts_repair::model::SearchConfig;

fn main() {
    let landscape = deceptive_corridor_landscape();
    let config = SearchConfig::default();
    for policy in [SelectionPolicy::Mcts, SelectionPolicy::Chain] {
        let trace = run_landscape(&landscape, &config, policy).unwrap();
        println!("{policy:?}: goal at {:?}, selections {:?}", trace.expansions_to_goal, trace.selections);
        for e in &trace.report.per_iteration_log {
            let n = &trace.report.tree_snapshot.nodes[e.generated];
            println!("  sel {} -> node {} [{}] R={:.3} {:?}", e.selected, e.generated, n.patch.replacement_text, e.reward, e.status);
        }
    }
}
