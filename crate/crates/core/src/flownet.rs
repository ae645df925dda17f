//! Prefix-tree flow network over tokenized titles.
//!
//! Every title gets an END token appended, so items are exactly the leaves.
//! A leaf's flow is the item's outcome reward; an internal node's flow is the
//! sum of its children's flows, and the root flow is the normalizer `Z`.
//! The process reward of an edge is `F(child) / F(parent)`, which telescopes
//! along any root-to-leaf path to `R(y) / Z`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::catalog::Catalog;
use crate::error::{Error, Result};

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

/// A title token or the end-of-title marker. END orders before every word.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    End,
    Word(String),
}

impl Token {
    pub fn as_word(&self) -> Option<&str> {
        match self {
            Token::End => None,
            Token::Word(w) => Some(w),
        }
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::End => f.write_str("<END>"),
            Token::Word(w) => write!(f, "{w:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNode {
    pub token: Option<Token>,
    pub parent: Option<NodeId>,
    /// Sorted by token.
    pub children: Vec<NodeId>,
    pub flow: f64,
    /// Index into [`FlowTree::items`]; present iff this is an END leaf.
    pub item: Option<usize>,
    pub depth: usize,
}

impl FlowNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    /// Reward given to items whose outcome reward is zero. Zero (the default)
    /// leaves those items out of the tree entirely.
    pub frequency_floor: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            frequency_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTree {
    nodes: Vec<FlowNode>,
    items: Vec<String>,
    leaf_of: HashMap<String, NodeId>,
    z: f64,
}

/// How the per-edge log process reward is personalized with a preference
/// score `p_ui`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardVariant {
    /// `log R_p`
    Plain,
    /// `log R_p / p_ui`
    #[default]
    DivPref,
    /// `log(R_p * p_ui)`
    MulPref,
}

impl RewardVariant {
    pub fn needs_preference(self) -> bool {
        !matches!(self, RewardVariant::Plain)
    }
}

impl std::str::FromStr for RewardVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(RewardVariant::Plain),
            "div" => Ok(RewardVariant::DivPref),
            "mul" => Ok(RewardVariant::MulPref),
            other => Err(Error::Config(format!(
                "unknown reward variant {other:?} (expected plain, div or mul)"
            ))),
        }
    }
}

impl std::fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardVariant::Plain => "plain",
            RewardVariant::DivPref => "div",
            RewardVariant::MulPref => "mul",
        })
    }
}

pub fn personalized_log_reward(variant: RewardVariant, log_rp: f64, p_ui: f64) -> Result<f64> {
    if variant.needs_preference() && !(p_ui > 0.0 && p_ui <= 1.0) {
        return Err(Error::Domain {
            what: "preference score (0, 1]",
            value: p_ui,
        });
    }
    Ok(match variant {
        RewardVariant::Plain => log_rp,
        RewardVariant::DivPref => log_rp / p_ui,
        RewardVariant::MulPref => log_rp + p_ui.ln(),
    })
}

#[derive(Serialize)]
struct DumpLine<'a> {
    path: Vec<Option<&'a str>>,
    flow: f64,
}

impl FlowTree {
    /// Builds the tree with flows from `rewards`, which must cover every
    /// catalog item.
    pub fn build(
        catalog: &Catalog,
        rewards: &BTreeMap<String, f64>,
        options: FlowOptions,
    ) -> Result<Self> {
        let mut leaves: Vec<(&String, f64)> = Vec::with_capacity(catalog.len());
        for id in catalog.items.keys() {
            let r = *rewards
                .get(id)
                .ok_or_else(|| Error::MissingReward(id.clone()))?;
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidReward {
                    item: id.clone(),
                    value: r,
                });
            }
            let r = if r > 0.0 { r } else { options.frequency_floor };
            if r > 0.0 {
                leaves.push((id, r));
            }
        }
        if leaves.is_empty() {
            return Err(Error::DegenerateFlow);
        }

        let mut nodes = vec![FlowNode {
            token: None,
            parent: None,
            children: Vec::new(),
            flow: 0.0,
            item: None,
            depth: 0,
        }];
        let mut child_maps: Vec<BTreeMap<Token, NodeId>> = vec![BTreeMap::new()];
        let mut items = Vec::with_capacity(leaves.len());
        let mut leaf_of = HashMap::with_capacity(leaves.len());

        for (id, reward) in leaves {
            let tokens = &catalog.items[id].tokens;
            let mut cur = ROOT;
            let path = tokens
                .iter()
                .map(|t| Token::Word(t.clone()))
                .chain(std::iter::once(Token::End));
            for tok in path {
                cur = match child_maps[cur].get(&tok) {
                    Some(&next) => next,
                    None => {
                        let next = nodes.len();
                        let depth = nodes[cur].depth + 1;
                        nodes.push(FlowNode {
                            token: Some(tok.clone()),
                            parent: Some(cur),
                            children: Vec::new(),
                            flow: 0.0,
                            item: None,
                            depth,
                        });
                        child_maps.push(BTreeMap::new());
                        child_maps[cur].insert(tok, next);
                        next
                    }
                };
            }
            // Distinct token sequences are guaranteed by the catalog, so the
            // END leaf reached here is fresh.
            debug_assert!(nodes[cur].item.is_none());
            nodes[cur].item = Some(items.len());
            nodes[cur].flow = reward;
            leaf_of.insert(id.clone(), cur);
            items.push(id.clone());
        }

        for (node, map) in nodes.iter_mut().zip(&child_maps) {
            node.children = map.values().copied().collect();
        }
        // Children always have larger ids than their parent.
        for n in (0..nodes.len()).rev() {
            if !nodes[n].children.is_empty() {
                let flow = nodes[n].children.iter().map(|&c| nodes[c].flow).sum();
                nodes[n].flow = flow;
            }
        }
        let z = nodes[ROOT].flow;
        Ok(FlowTree {
            nodes,
            items,
            leaf_of,
            z,
        })
    }

    /// Outcome rewards are the catalog's training frequencies.
    pub fn from_frequencies(catalog: &Catalog, options: FlowOptions) -> Result<Self> {
        Self::build(catalog, &catalog.frequencies(), options)
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn node(&self, id: NodeId) -> &FlowNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[FlowNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Item ids with a leaf in the tree, sorted.
    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn contains(&self, item: &str) -> bool {
        self.leaf_of.contains_key(item)
    }

    pub fn leaf(&self, item: &str) -> Result<NodeId> {
        self.leaf_of
            .get(item)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn item_of_leaf(&self, leaf: NodeId) -> Option<&str> {
        self.nodes[leaf].item.map(|i| self.items[i].as_str())
    }

    /// Nodes from the root to the item's END leaf, inclusive.
    pub fn path(&self, item: &str) -> Result<Vec<NodeId>> {
        let leaf = self.leaf(item)?;
        Ok(self.path_to(leaf))
    }

    pub fn path_to(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = Vec::with_capacity(self.nodes[node].depth + 1);
        let mut cur = Some(node);
        while let Some(n) = cur {
            path.push(n);
            cur = self.nodes[n].parent;
        }
        path.reverse();
        path
    }

    /// Tokens along the path to `node`, END included.
    pub fn tokens_to(&self, node: NodeId) -> Vec<Token> {
        self.path_to(node)
            .into_iter()
            .filter_map(|n| self.nodes[n].token.clone())
            .collect()
    }

    /// Leaf reward `F(y) = R(y)` as stored in the tree.
    pub fn reward(&self, item: &str) -> Result<f64> {
        Ok(self.nodes[self.leaf(item)?].flow)
    }

    pub fn child(&self, node: NodeId, token: &Token) -> Result<NodeId> {
        self.nodes[node]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].token.as_ref() == Some(token))
            .ok_or_else(|| Error::InvalidAction {
                node,
                token: token.to_string(),
            })
    }

    /// `F(child) / F(parent)` for the edge `state -> action`.
    pub fn process_reward(&self, state: NodeId, action: &Token) -> Result<f64> {
        let child = self.child(state, action)?;
        self.edge_reward(child)
    }

    /// Process reward of the edge that enters `child`.
    pub fn edge_reward(&self, child: NodeId) -> Result<f64> {
        let parent = self.nodes[child]
            .parent
            .ok_or(Error::InvalidState(child))?;
        let pf = self.nodes[parent].flow;
        if pf <= 0.0 {
            return Err(Error::ZeroFlow(parent));
        }
        Ok(self.nodes[child].flow / pf)
    }

    pub fn edge_log_reward(&self, child: NodeId) -> Result<f64> {
        let r = self.edge_reward(child)?;
        if r <= 0.0 {
            return Err(Error::ZeroFlow(child));
        }
        Ok(r.ln())
    }

    /// Sum of log process rewards along the item's path; equals
    /// `log(R(y) / Z)` up to rounding.
    pub fn path_log_reward(&self, item: &str) -> Result<f64> {
        let leaf = self.leaf(item)?;
        if self.nodes[leaf].flow <= 0.0 {
            return Err(Error::ZeroRewardItem(item.to_string()));
        }
        self.path_to(leaf)[1..]
            .iter()
            .map(|&c| self.edge_log_reward(c))
            .sum()
    }

    /// JSONL of `(path tokens, flow)` for every non-root node, sorted by path.
    /// END is written as `null`.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut rows: Vec<(Vec<Token>, f64)> = (1..self.nodes.len())
            .map(|n| (self.tokens_to(n), self.nodes[n].flow))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for (tokens, flow) in &rows {
            let line = DumpLine {
                path: tokens.iter().map(Token::as_word).collect(),
                flow: *flow,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
