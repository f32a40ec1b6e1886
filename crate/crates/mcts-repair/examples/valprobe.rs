use mcts_repair::model::{BugSpec, Patch};
use mcts_repair::validation::validate_patch;
use std::path::Path;
use std::time::Instant;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus/quix-sublist-sum");
    let bug = BugSpec::load(&dir.join("bugspec.json")).unwrap();
    for _ in 0..3 {
        let t = Instant::now();
        let result = validate_patch(&bug, &Patch::root(&bug.buggy_code)).unwrap();
        println!("validate: {:?} compiled={} outcomes={:?}", t.elapsed(), result.compiled, result.outcomes);
    }
    // Break down: compile vs tests
    let sandbox = mcts_repair::validation::Sandbox::create(&bug.workspace_root).unwrap();
    let t = Instant::now();
    let ok = mcts_repair::validation::compile(&bug, sandbox.path()).unwrap();
    println!("compile alone: {:?} ok={ok}", t.elapsed());
    let t = Instant::now();
    mcts_repair::validation::run_tests(&bug, sandbox.path()).unwrap();
    println!("tests alone: {:?}", t.elapsed());
}
