//! Hierarchical count data: a rooted, complete-depth tree of regions.
//!
//! Nodes are stored in level order and, within a level, in node-id order.
//! Every traversal in the crate inherits that ordering, so results do not
//! depend on input row order.

mod csv_io;
mod synth;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use csv_io::write_rows as csv_io_write_rows;
pub use csv_io::{parse_hierarchy, CSV_HEADER};
pub use synth::{synth_hierarchy, Fanout, LeafDistribution, SynthSpec};

/// Errors raised while building or reading a [`Hierarchy`].
///
/// Row numbers are 1-based and count data rows (the header is not a row).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("no root row (a row with an empty parent_id)")]
    MissingRoot,
    #[error("row {row}: second root `{id}`; exactly one root is allowed")]
    MultipleRoots { row: usize, id: String },
    #[error("row {row}: duplicate node id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: node `{id}` references unknown parent `{parent}`")]
    OrphanNode {
        row: usize,
        id: String,
        parent: String,
    },
    #[error("row {row}: node `{id}` has level {level}, expected {expected}")]
    LevelMismatch {
        row: usize,
        id: String,
        level: usize,
        expected: usize,
    },
    #[error("row {row}: node `{id}` has negative count {count}")]
    NegativeCount { row: usize, id: String, count: f64 },
    #[error("row {row}: cannot parse {field} from `{value}`")]
    BadField {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("bad header `{0}`, expected `node_id,parent_id,level,count`")]
    BadHeader(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// One region of the hierarchy with its population count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierNode {
    pub id: String,
    pub parent_id: Option<String>,
    pub level: usize,
    pub count: f64,
}

impl HierNode {
    pub fn new(id: impl Into<String>, parent_id: Option<&str>, level: usize, count: f64) -> Self {
        Self {
            id: id.into(),
            parent_id: parent_id.map(str::to_owned),
            level,
            count,
        }
    }
}

/// Validated, immutable hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    nodes: Vec<HierNode>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    levels: Vec<Range<usize>>,
}

impl Hierarchy {
    /// Validates `nodes` (given in input row order) and builds the tree.
    pub fn from_nodes(nodes: Vec<HierNode>) -> Result<Self, HierarchyError> {
        let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(nodes.len());
        let mut root: Option<usize> = None;
        for (row, node) in nodes.iter().enumerate() {
            if node.count < 0.0 {
                return Err(HierarchyError::NegativeCount {
                    row: row + 1,
                    id: node.id.clone(),
                    count: node.count,
                });
            }
            if !node.count.is_finite() {
                return Err(HierarchyError::BadField {
                    row: row + 1,
                    field: "count",
                    value: node.count.to_string(),
                });
            }
            if by_id.insert(node.id.as_str(), row).is_some() {
                return Err(HierarchyError::DuplicateId {
                    row: row + 1,
                    id: node.id.clone(),
                });
            }
            if node.parent_id.is_none() {
                if root.is_some() {
                    return Err(HierarchyError::MultipleRoots {
                        row: row + 1,
                        id: node.id.clone(),
                    });
                }
                root = Some(row);
            }
        }
        let root = root.ok_or(HierarchyError::MissingRoot)?;
        if nodes[root].level != 1 {
            return Err(HierarchyError::LevelMismatch {
                row: root + 1,
                id: nodes[root].id.clone(),
                level: nodes[root].level,
                expected: 1,
            });
        }

        let mut has_child = vec![false; nodes.len()];
        for (row, node) in nodes.iter().enumerate() {
            let Some(parent_id) = node.parent_id.as_deref() else {
                continue;
            };
            let Some(&p) = by_id.get(parent_id) else {
                return Err(HierarchyError::OrphanNode {
                    row: row + 1,
                    id: node.id.clone(),
                    parent: parent_id.to_owned(),
                });
            };
            let expected = nodes[p].level + 1;
            if node.level != expected {
                return Err(HierarchyError::LevelMismatch {
                    row: row + 1,
                    id: node.id.clone(),
                    level: node.level,
                    expected,
                });
            }
            has_child[p] = true;
        }

        // Levels chain down from the single level-1 root, so the tree is
        // connected and acyclic. Only ragged leaves remain to be rejected.
        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(1);
        for (row, node) in nodes.iter().enumerate() {
            if node.level < depth && !has_child[row] {
                return Err(HierarchyError::LevelMismatch {
                    row: row + 1,
                    id: node.id.clone(),
                    level: node.level,
                    expected: depth,
                });
            }
        }
        drop(by_id);

        let mut nodes = nodes;
        nodes.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.id.cmp(&b.id)));
        let index: HashMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let parent: Vec<Option<usize>> = nodes
            .iter()
            .map(|n| n.parent_id.as_deref().map(|p| index[p]))
            .collect();
        drop(index);
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                // i increases in id order within a level, so children stay sorted.
                children[p].push(i);
            }
        }
        let mut levels = Vec::with_capacity(depth);
        let mut start = 0;
        for level in 1..=depth {
            let end = start
                + nodes[start..]
                    .iter()
                    .take_while(|n| n.level == level)
                    .count();
            levels.push(start..end);
            start = end;
        }

        Ok(Self {
            nodes,
            parent,
            children,
            levels,
        })
    }

    /// Number of levels `L`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All nodes, level order then id order.
    pub fn nodes(&self) -> &[HierNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &HierNode {
        &self.nodes[index]
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, index: usize) -> Option<usize> {
        self.parent[index]
    }

    pub fn children(&self, index: usize) -> &[usize] {
        &self.children[index]
    }

    /// Indices of the nodes at 1-based `level`.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.levels[level - 1].clone()
    }

    /// Level (1-based) of the node at `index`.
    pub fn level_of(&self, index: usize) -> usize {
        self.nodes[index].level
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn total(&self) -> f64 {
        self.nodes[0].count
    }

    /// The subtree rooted at `index`, re-levelled so that node becomes the root.
    pub fn subtree(&self, index: usize) -> Hierarchy {
        let base = self.nodes[index].level - 1;
        let mut out = Vec::new();
        let mut stack = vec![index];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            out.push(HierNode {
                id: n.id.clone(),
                parent_id: if i == index {
                    None
                } else {
                    n.parent_id.clone()
                },
                level: n.level - base,
                count: n.count,
            });
            stack.extend(self.children[i].iter().rev());
        }
        Hierarchy::from_nodes(out).expect("subtree of a valid hierarchy is valid")
    }
}

/// Per-parent consistency residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParentResidual {
    pub node_id: String,
    pub count: f64,
    pub children_sum: f64,
    /// `count - children_sum`
    pub residual: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub tol: f64,
    pub residuals: Vec<ParentResidual>,
}

impl ConsistencyReport {
    pub fn flagged(&self) -> impl Iterator<Item = &ParentResidual> {
        self.residuals.iter().filter(|r| r.flagged)
    }

    pub fn is_consistent(&self) -> bool {
        self.flagged().next().is_none()
    }
}

/// Residual `count - Σ children` for every internal node, flagging those
/// whose magnitude exceeds `tol`.
pub fn check_consistency(h: &Hierarchy, tol: f64) -> ConsistencyReport {
    let residuals = (0..h.len())
        .filter(|&i| !h.children(i).is_empty())
        .map(|i| {
            let count = h.node(i).count;
            let children_sum: f64 = h.children(i).iter().map(|&c| h.node(c).count).sum();
            let residual = count - children_sum;
            ParentResidual {
                node_id: h.node(i).id.clone(),
                count,
                children_sum,
                residual,
                flagged: residual.abs() > tol,
            }
        })
        .collect();
    ConsistencyReport { tol, residuals }
}

/// Counts grouped by level: `levels()[l - 1]` holds `{N_j : j in R_l}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    levels: Vec<Vec<f64>>,
}

impl LevelStats {
    pub fn new(levels: Vec<Vec<f64>>) -> Result<Self, HierarchyError> {
        if levels.is_empty() {
            return Err(HierarchyError::MissingRoot);
        }
        for (l, counts) in levels.iter().enumerate() {
            if counts.is_empty() {
                return Err(HierarchyError::InvalidSpec(format!(
                    "level {} is empty",
                    l + 1
                )));
            }
            if let Some(&c) = counts.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
                return Err(HierarchyError::NegativeCount {
                    row: 0,
                    id: format!("level {}", l + 1),
                    count: c,
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// Counts at 1-based `level`.
    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level - 1]
    }

    pub fn level_totals(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.iter().sum()).collect()
    }
}

pub fn level_stats(h: &Hierarchy) -> LevelStats {
    let levels = (1..=h.depth())
        .map(|l| h.level_range(l).map(|i| h.node(i).count).collect())
        .collect();
    LevelStats { levels }
}
