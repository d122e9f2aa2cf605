//! Switch-side fallback classifier: a small threshold decision tree over the
//! per-packet features.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ClassId, FeatureVector};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tree json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node {node}: {child} index {index} out of range")]
    Dangling { node: usize, child: &'static str, index: usize },
    #[error("root index {0} out of range")]
    BadRoot(usize),
    #[error("node {0} is reachable twice (cycle or shared subtree)")]
    Cycle(usize),
    #[error("path of depth {depth} exceeds max_depth {max}")]
    TooDeep { depth: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeFeature {
    PktLen,
    IpdNs,
}

impl TreeFeature {
    fn value(self, fv: &FeatureVector) -> u64 {
        match self {
            TreeFeature::PktLen => fv.pkt_len as u64,
            TreeFeature::IpdNs => fv.ipd_ns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Child {
    Node(usize),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: TreeFeature,
    pub threshold: u64,
    pub left: Child,
    pub right: Child,
}

fn default_max_depth() -> usize {
    32
}

/// Binary tree; `feature <= threshold` descends left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<ClassId>,
    pub root: Child,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
}

impl DecisionTree {
    /// Tree with no internal nodes.
    pub fn constant(class: ClassId) -> Self {
        Self { nodes: Vec::new(), leaves: vec![class], root: Child::Leaf(0), max_depth: 0 }
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TreeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks index ranges, that the reachable structure is a tree, and the
    /// depth bound.
    pub fn validate(&self) -> Result<(), TreeError> {
        let check = |c: Child, node: usize, which: &'static str| -> Result<(), TreeError> {
            match c {
                Child::Node(i) if i >= self.nodes.len() => Err(TreeError::Dangling { node, child: which, index: i }),
                Child::Leaf(i) if i >= self.leaves.len() => Err(TreeError::Dangling { node, child: which, index: i }),
                _ => Ok(()),
            }
        };
        for (i, n) in self.nodes.iter().enumerate() {
            check(n.left, i, "left")?;
            check(n.right, i, "right")?;
        }
        match self.root {
            Child::Node(i) if i >= self.nodes.len() => return Err(TreeError::BadRoot(i)),
            Child::Leaf(i) if i >= self.leaves.len() => return Err(TreeError::BadRoot(i)),
            _ => {}
        }
        let mut visited = vec![false; self.nodes.len()];
        let mut stack = vec![(self.root, 0usize)];
        while let Some((c, depth)) = stack.pop() {
            if depth > self.max_depth {
                return Err(TreeError::TooDeep { depth, max: self.max_depth });
            }
            if let Child::Node(i) = c {
                if visited[i] {
                    return Err(TreeError::Cycle(i));
                }
                visited[i] = true;
                let n = &self.nodes[i];
                stack.push((n.right, depth + 1));
                stack.push((n.left, depth + 1));
            }
        }
        Ok(())
    }

    pub fn classify(&self, fv: &FeatureVector) -> ClassId {
        let mut at = self.root;
        loop {
            match at {
                Child::Leaf(i) => return self.leaves[i],
                Child::Node(i) => {
                    let n = &self.nodes[i];
                    at = if n.feature.value(fv) <= n.threshold { n.left } else { n.right };
                }
            }
        }
    }
}
