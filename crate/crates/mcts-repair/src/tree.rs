//! The Monte-Carlo patch tree: UCT scoring, eligible-node selection, child
//! insertion and forgetting-factor back-propagation.
//!
//! The tree is append-only; `node_id` is the insertion counter and the
//! deterministic tie-breaker for selection.

use serde::{Deserialize, Serialize};

use crate::model::{
    EvaluationRecord, GenerationRecord, NodeStatus, Patch, PatchNode, SearchConfig,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("no eligible node remains in the tree")]
    NoEligibleNode,
    #[error("unknown parent node {0}")]
    UnknownParent(usize),
    #[error("parent node {0} is not eligible for expansion")]
    IneligibleParent(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

/// The rooted tree of all explored patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTree {
    pub nodes: Vec<PatchNode>,
    pub root_id: usize,
    pub next_id: usize,
}

/// UCT value of a node: quality plus an exploration bonus that grows with the
/// parent's visits and shrinks with the node's own. Unvisited nodes score
/// positive infinity so they are always preferred.
pub fn uct(quality_q: f64, visits_n: u64, parent_visits: u64, c: f64) -> f64 {
    if visits_n == 0 || parent_visits == 0 {
        return f64::INFINITY;
    }
    quality_q + c * (2.0 * (parent_visits as f64).ln() / visits_n as f64).sqrt()
}

/// A node may be expanded while it is non-terminal and under the expansion cap.
pub fn eligible(node: &PatchNode, config: &SearchConfig) -> bool {
    matches!(node.status, NodeStatus::Root | NodeStatus::Partial)
        && node.expansions < config.max_expansion
}

impl PatchTree {
    /// Creates a tree holding only the root patch (the original buggy code),
    /// with quality 0 and one visit.
    pub fn new(root_patch: Patch) -> Self {
        let root = PatchNode {
            node_id: 0,
            patch: root_patch,
            parent: None,
            children: vec![],
            reward_r: 0.0,
            quality_q: 0.0,
            visits_n: 1,
            expansions: 0,
            status: NodeStatus::Root,
            generation: None,
            evaluation: None,
        };
        PatchTree {
            nodes: vec![root],
            root_id: 0,
            next_id: 1,
        }
    }

    pub fn get(&self, id: usize) -> Option<&PatchNode> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// UCT score of a node within this tree. The root, having no parent,
    /// uses its own visit count as the parent term.
    pub fn uct_of(&self, id: usize, config: &SearchConfig) -> f64 {
        let node = &self.nodes[id];
        let parent_visits = match node.parent {
            Some(p) => self.nodes[p].visits_n,
            None => node.visits_n,
        };
        uct(node.quality_q, node.visits_n, parent_visits, config.exploration_c)
    }

    /// Returns the eligible node with the highest UCT value; ties break
    /// toward the smallest node id.
    pub fn select(&self, config: &SearchConfig) -> Result<usize, TreeError> {
        let mut best: Option<(usize, f64)> = None;
        for node in &self.nodes {
            if !eligible(node, config) {
                continue;
            }
            let score = self.uct_of(node.node_id, config);
            let better = match best {
                None => true,
                Some((_, best_score)) => score > best_score,
            };
            if better {
                best = Some((node.node_id, score));
            }
        }
        best.map(|(id, _)| id).ok_or(TreeError::NoEligibleNode)
    }

    /// Appends an evaluated candidate under `parent_id`. The new node starts
    /// with quality equal to its reward and a single visit; the parent's
    /// expansion count goes up by one.
    pub fn add_child(
        &mut self,
        parent_id: usize,
        patch: Patch,
        generation: GenerationRecord,
        evaluation: EvaluationRecord,
        config: &SearchConfig,
    ) -> Result<usize, TreeError> {
        let parent = self
            .nodes
            .get(parent_id)
            .ok_or(TreeError::UnknownParent(parent_id))?;
        if !eligible(parent, config) {
            return Err(TreeError::IneligibleParent(parent_id));
        }
        let node_id = self.next_id;
        let reward = evaluation.expected_reward.clamp(-1.0, 1.0);
        let status = evaluation.node_status();
        self.nodes.push(PatchNode {
            node_id,
            patch,
            parent: Some(parent_id),
            children: vec![],
            reward_r: reward,
            quality_q: reward,
            visits_n: 1,
            expansions: 0,
            status,
            generation: Some(generation),
            evaluation: Some(evaluation),
        });
        self.nodes[parent_id].children.push(node_id);
        self.nodes[parent_id].expansions += 1;
        self.next_id += 1;
        Ok(node_id)
    }

    /// Walks from the parent of `from_id` up to the root, refreshing each
    /// ancestor's quality as a beta-weighted blend of the visit-weighted mean
    /// of its children's qualities and its own previous value, then adds one
    /// visit to every ancestor. The node itself was already counted when it
    /// was inserted.
    pub fn backpropagate(&mut self, from_id: usize, beta: f64) -> Result<(), TreeError> {
        if from_id >= self.nodes.len() {
            return Err(TreeError::UnknownNode(from_id));
        }
        let mut ancestors = Vec::new();
        let mut cursor = self.nodes[from_id].parent;
        while let Some(id) = cursor {
            ancestors.push(id);
            cursor = self.nodes[id].parent;
        }
        for &id in &ancestors {
            let (weighted_sum, visit_sum) = self.nodes[id]
                .children
                .iter()
                .map(|&c| (&self.nodes[c].quality_q, self.nodes[c].visits_n))
                .fold((0.0, 0u64), |(ws, vs), (q, n)| (ws + q * n as f64, vs + n));
            if visit_sum == 0 {
                continue;
            }
            let child_mean = weighted_sum / visit_sum as f64;
            let node = &mut self.nodes[id];
            node.quality_q = beta * child_mean + (1.0 - beta) * node.quality_q;
        }
        for &id in &ancestors {
            self.nodes[id].visits_n += 1;
        }
        Ok(())
    }

    /// Checks every structural and statistical invariant, returning one
    /// message per violation.
    pub fn verify(&self, config: &SearchConfig) -> Vec<String> {
        let mut violations = Vec::new();
        if self.nodes.is_empty() {
            return vec!["tree has no nodes".to_string()];
        }
        if self.root_id != 0 {
            violations.push(format!("root_id is {}, expected 0", self.root_id));
        }
        if self.next_id != self.nodes.len() {
            violations.push(format!(
                "next_id {} does not match node count {}",
                self.next_id,
                self.nodes.len()
            ));
        }
        let root = &self.nodes[0];
        if root.status != NodeStatus::Root {
            violations.push("node 0 does not have root status".to_string());
        }
        if root.parent.is_some() {
            violations.push("root node has a parent".to_string());
        }
        for (index, node) in self.nodes.iter().enumerate() {
            let id = node.node_id;
            if id != index {
                violations.push(format!("node at index {index} carries node_id {id}"));
            }
            if index > 0 {
                match node.parent {
                    None => violations.push(format!("node {id}: missing parent")),
                    Some(p) if p >= index => violations.push(format!(
                        "node {id}: parent {p} does not precede it (cycle risk)"
                    )),
                    Some(p) => {
                        let listed =
                            self.nodes[p].children.iter().filter(|&&c| c == id).count();
                        if listed != 1 {
                            violations.push(format!(
                                "node {id}: listed {listed} times among children of parent {p}"
                            ));
                        }
                        if node.status == NodeStatus::Root {
                            violations.push(format!("node {id}: non-root node with root status"));
                        }
                    }
                }
            }
            for &child in &node.children {
                match self.nodes.get(child) {
                    Some(c) if c.parent == Some(id) => {}
                    Some(_) => violations
                        .push(format!("node {id}: child {child} does not point back to it")),
                    None => violations.push(format!("node {id}: unknown child {child}")),
                }
            }
            if !(-1.0..=1.0).contains(&node.reward_r) {
                violations.push(format!("node {id}: reward_R {} outside [-1, 1]", node.reward_r));
            }
            if !(-1.0..=1.0).contains(&node.quality_q) {
                violations.push(format!("node {id}: quality_Q {} outside [-1, 1]", node.quality_q));
            }
            let child_visits: u64 = node.children.iter().map(|&c| self.nodes[c].visits_n).sum();
            if node.visits_n < child_visits {
                violations.push(format!(
                    "node {id}: visits_N {} below children sum {child_visits}",
                    node.visits_n
                ));
            }
            if (node.status == NodeStatus::CompileFailed) != (node.reward_r == -1.0) {
                violations.push(format!(
                    "node {id}: reward_R {} inconsistent with status {:?}",
                    node.reward_r, node.status
                ));
            }
            if node.expansions > config.max_expansion {
                violations.push(format!(
                    "node {id}: expansions {} exceed max_expansion {}",
                    node.expansions, config.max_expansion
                ));
            }
            if node.status.is_terminal() && node.expansions != 0 {
                violations.push(format!("node {id}: terminal node with expansions"));
            }
            if let Some(eval) = &node.evaluation {
                if let Err(message) = eval.check_consistency() {
                    violations.push(format!("node {id}: {message}"));
                }
                if eval.node_status() != node.status {
                    violations.push(format!(
                        "node {id}: status {:?} does not match its evaluation",
                        node.status
                    ));
                }
            }
        }
        violations
    }

    /// Replays the recorded search: rebuilds the tree candidate by candidate,
    /// re-running selection at every recorded state and re-applying
    /// back-propagation. Fails if any selection disagrees with the recorded
    /// parent or if the rebuilt statistics differ from the snapshot.
    pub fn replay_check(&self, config: &SearchConfig) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.nodes.is_empty() {
            return Err(vec!["tree has no nodes".to_string()]);
        }
        let mut rebuilt = PatchTree::new(self.nodes[0].patch.clone());
        let mut next = 1;
        while next < self.nodes.len() {
            let selected = match rebuilt.select(config) {
                Ok(id) => id,
                Err(e) => {
                    problems.push(format!("replay stalled before node {next}: {e}"));
                    return Err(problems);
                }
            };
            let mut consumed = 0;
            while next < self.nodes.len()
                && consumed < config.branch
                && self.nodes[next].parent == Some(selected)
            {
                let recorded = &self.nodes[next];
                let evaluation = match &recorded.evaluation {
                    Some(e) => e.clone(),
                    None => {
                        problems.push(format!("node {next}: missing evaluation record"));
                        return Err(problems);
                    }
                };
                let added = rebuilt
                    .add_child(
                        selected,
                        recorded.patch.clone(),
                        recorded.generation.clone().unwrap_or_default(),
                        evaluation,
                        config,
                    )
                    .map_err(|e| vec![format!("replay add_child failed at node {next}: {e}")])?;
                rebuilt
                    .backpropagate(added, config.beta)
                    .map_err(|e| vec![format!("replay backpropagate failed at {next}: {e}")])?;
                consumed += 1;
                next += 1;
            }
            if consumed == 0 {
                problems.push(format!(
                    "replay selected node {selected} but node {next} records parent {:?}",
                    self.nodes[next].parent
                ));
                return Err(problems);
            }
        }
        for (replayed, recorded) in rebuilt.nodes.iter().zip(&self.nodes) {
            let id = recorded.node_id;
            if replayed.quality_q != recorded.quality_q {
                problems.push(format!(
                    "node {id}: replayed quality_Q {} differs from snapshot {}",
                    replayed.quality_q, recorded.quality_q
                ));
            }
            if replayed.visits_n != recorded.visits_n {
                problems.push(format!(
                    "node {id}: replayed visits_N {} differs from snapshot {}",
                    replayed.visits_n, recorded.visits_n
                ));
            }
            if replayed.expansions != recorded.expansions {
                problems.push(format!("node {id}: replayed expansions differ"));
            }
            if replayed.status != recorded.status {
                problems.push(format!("node {id}: replayed status differs"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Graphviz export; one node per patch, labeled id/status/Q/N.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph patch_tree {\n  node [shape=box];\n");
        for node in &self.nodes {
            let status = match node.status {
                NodeStatus::Root => "root",
                NodeStatus::Partial => "partial",
                NodeStatus::Plausible => "plausible",
                NodeStatus::CompileFailed => "compile_failed",
            };
            out.push_str(&format!(
                "  n{} [label=\"#{} {}\\nQ={:.3} N={}\"];\n",
                node.node_id, node.node_id, status, node.quality_q, node.visits_n
            ));
        }
        for node in &self.nodes {
            for &child in &node.children {
                out.push_str(&format!("  n{} -> n{};\n", node.node_id, child));
            }
        }
        out.push_str("}\n");
        out
    }
}
