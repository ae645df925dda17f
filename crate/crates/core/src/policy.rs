//! Per-edge log-linear policy over the prefix tree.
//!
//! At an internal node the logit of the edge into child `e` is `b_e` in
//! tabular mode and `b_e + u_e · c` in contextual mode, where `c` is the mean
//! embedding of the user's history. The next-token distribution is the
//! softmax over the node's children, so every parameter setting is a valid
//! tree policy and only catalog titles can be generated.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::{FlowTree, NodeId, Token, ROOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    #[default]
    Tabular,
    Contextual,
}

impl std::str::FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(PolicyMode::Tabular),
            "contextual" => Ok(PolicyMode::Contextual),
            other => Err(Error::Config(format!("unknown policy mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyMode::Tabular => "tabular",
            PolicyMode::Contextual => "contextual",
        })
    }
}

/// Encoded user history. Empty in tabular mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Context {
    pub values: Vec<f64>,
    /// History items without an embedding row; they are ignored.
    pub skipped: usize,
}

impl Context {
    pub fn empty() -> Self {
        Context::default()
    }
}

/// Parameters indexed by tree node: the edge into node `n` owns `bias[n]`
/// and `weights[n*dim..(n+1)*dim]`. The root slot is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mode: PolicyMode,
    pub dim: usize,
    pub bias: Vec<f64>,
    pub weights: Vec<f64>,
    pub embeddings: Vec<f64>,
    embed_items: Vec<String>,
    item_row: HashMap<String, usize>,
}

impl PolicyParams {
    /// Biases start at zero (uniform policy at every node); weights and
    /// embeddings are i.i.d. uniform in [-0.01, 0.01].
    pub fn init(
        tree: &FlowTree,
        embed_items: &[String],
        mode: PolicyMode,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let dim = match mode {
            PolicyMode::Tabular => 0,
            PolicyMode::Contextual if dim == 0 => {
                return Err(Error::Config(
                    "contextual policy needs an embedding dimension of at least 1".into(),
                ))
            }
            PolicyMode::Contextual => dim,
        };
        let mut rng = crate::seeded_rng(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.01..=0.01)).collect()
        };
        // The root is not the head of any edge, so its slot stays zero.
        let mut weights = vec![0.0; dim];
        weights.extend(draw((tree.len() - 1) * dim));
        let embeddings = draw(embed_items.len() * dim);
        Ok(Self::from_parts(
            mode,
            dim,
            vec![0.0; tree.len()],
            weights,
            embeddings,
            embed_items.to_vec(),
        ))
    }

    pub fn from_parts(
        mode: PolicyMode,
        dim: usize,
        bias: Vec<f64>,
        weights: Vec<f64>,
        embeddings: Vec<f64>,
        embed_items: Vec<String>,
    ) -> Self {
        let item_row = embed_items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        PolicyParams {
            mode,
            dim,
            bias,
            weights,
            embeddings,
            embed_items,
            item_row,
        }
    }

    /// Tabular parameters with `b_e = log(F(child) / F(parent))`: the policy
    /// that samples each item with probability `R(y) / Z`.
    pub fn flow_optimal(tree: &FlowTree) -> Result<Self> {
        let mut bias = vec![0.0; tree.len()];
        for (n, b) in bias.iter_mut().enumerate().skip(1) {
            *b = tree.edge_log_reward(n)?;
        }
        Ok(Self::from_parts(
            PolicyMode::Tabular,
            0,
            bias,
            Vec::new(),
            Vec::new(),
            Vec::new(),
        ))
    }

    pub fn embed_items(&self) -> &[String] {
        &self.embed_items
    }

    pub fn embedding_row(&self, item: &str) -> Option<usize> {
        self.item_row.get(item).copied()
    }

    pub fn num_params(&self) -> usize {
        self.bias.len() + self.weights.len() + self.embeddings.len()
    }

    /// Mean of the history's embedding rows; unknown items are skipped and
    /// counted. Tabular policies ignore history.
    pub fn encode_context(&self, history: &[String]) -> Context {
        if self.mode == PolicyMode::Tabular {
            return Context::empty();
        }
        let mut values = vec![0.0; self.dim];
        let mut known = 0usize;
        let mut skipped = 0usize;
        for item in history {
            match self.item_row.get(item) {
                Some(&row) => {
                    known += 1;
                    let e = &self.embeddings[row * self.dim..(row + 1) * self.dim];
                    for (v, x) in values.iter_mut().zip(e) {
                        *v += x;
                    }
                }
                None => skipped += 1,
            }
        }
        if known > 0 {
            let n = known as f64;
            for v in &mut values {
                *v /= n;
            }
        }
        Context { values, skipped }
    }

    /// History-free context of the right shape.
    pub fn zero_context(&self) -> Context {
        Context {
            values: vec![0.0; self.dim],
            skipped: 0,
        }
    }

    fn edge_logit(&self, child: NodeId, ctx: &Context) -> f64 {
        let b = self.bias[child];
        if self.mode == PolicyMode::Contextual && !ctx.values.is_empty() {
            let u = &self.weights[child * self.dim..(child + 1) * self.dim];
            b + u.iter().zip(&ctx.values).map(|(a, c)| a * c).sum::<f64>()
        } else {
            b
        }
    }

    pub fn logits(&self, tree: &FlowTree, node: NodeId, ctx: &Context) -> Result<Vec<f64>> {
        let n = tree.node(node);
        if n.is_leaf() {
            return Err(Error::InvalidState(node));
        }
        Ok(n.children.iter().map(|&c| self.edge_logit(c, ctx)).collect())
    }

    /// Softmax over the children of `node`, in child order.
    pub fn next_token_dist(&self, tree: &FlowTree, node: NodeId, ctx: &Context) -> Result<Vec<f64>> {
        self.dist_with_temperature(tree, node, ctx, 1.0)
    }

    pub fn dist_with_temperature(
        &self,
        tree: &FlowTree,
        node: NodeId,
        ctx: &Context,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let logits = self.logits(tree, node, ctx)?;
        Ok(softmax(&logits, temperature))
    }

    /// Log-softmax over the children of `node`.
    pub fn log_dist(
        &self,
        tree: &FlowTree,
        node: NodeId,
        ctx: &Context,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let logits = self.logits(tree, node, ctx)?;
        Ok(log_softmax(&logits, temperature))
    }

    /// Log-probabilities of each edge along `path` (one per consecutive pair).
    pub fn path_log_probs(&self, tree: &FlowTree, path: &[NodeId], ctx: &Context) -> Result<Vec<f64>> {
        path.windows(2)
            .map(|w| {
                let (parent, child) = (w[0], w[1]);
                let pos = child_position(tree, parent, child)?;
                Ok(self.log_dist(tree, parent, ctx, 1.0)?[pos])
            })
            .collect()
    }

    /// `log P_F(y | x)`: sum of log next-token probabilities along the item's
    /// path, END edge included.
    pub fn seq_log_prob(&self, tree: &FlowTree, item: &str, ctx: &Context) -> Result<f64> {
        self.seq_log_prob_with_temperature(tree, item, ctx, 1.0)
    }

    pub fn seq_log_prob_with_temperature(
        &self,
        tree: &FlowTree,
        item: &str,
        ctx: &Context,
        temperature: f64,
    ) -> Result<f64> {
        let path = tree.path(item)?;
        let mut total = 0.0;
        for w in path.windows(2) {
            let pos = child_position(tree, w[0], w[1])?;
            total += self.log_dist(tree, w[0], ctx, temperature)?[pos];
        }
        Ok(total)
    }

    /// Exact probability of every tree item (in [`FlowTree::items`] order).
    pub fn item_distribution(&self, tree: &FlowTree, ctx: &Context) -> Result<Vec<f64>> {
        let mut probs = vec![0.0; tree.items().len()];
        let mut stack = vec![(ROOT, 0.0f64)];
        while let Some((node, logp)) = stack.pop() {
            let n = tree.node(node);
            if let Some(i) = n.item {
                probs[i] = logp.exp();
                continue;
            }
            let ld = self.log_dist(tree, node, ctx, 1.0)?;
            for (&c, lp) in n.children.iter().zip(ld) {
                stack.push((c, logp + lp));
            }
        }
        Ok(probs)
    }

    /// Descends from the root sampling each child from the
    /// temperature-scaled softmax until an END leaf is reached.
    pub fn sample_title<R: rand::Rng + ?Sized>(
        &self,
        tree: &FlowTree,
        ctx: &Context,
        temperature: f64,
        rng: &mut R,
    ) -> Result<String> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Domain {
                what: "temperature (0, inf)",
                value: temperature,
            });
        }
        let mut node = ROOT;
        loop {
            let n = tree.node(node);
            if let Some(item) = tree.item_of_leaf(node) {
                return Ok(item.to_string());
            }
            if n.children.len() == 1 {
                node = n.children[0];
                continue;
            }
            let dist = self.dist_with_temperature(tree, node, ctx, temperature)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = n.children.len() - 1;
            for (i, p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            node = n.children[pick];
        }
    }

    pub fn write_checkpoint(&self, tree: &FlowTree, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.to_checkpoint(tree))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(tree: &FlowTree, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        Self::from_checkpoint(tree, ckpt)
    }

    pub fn to_checkpoint(&self, tree: &FlowTree) -> Checkpoint {
        let edges = (1..tree.len())
            .map(|n| EdgeParams {
                path: tree
                    .tokens_to(n)
                    .iter()
                    .map(|t| t.as_word().map(str::to_string))
                    .collect(),
                b: self.bias[n],
                u: self.weights[n * self.dim..(n + 1) * self.dim].to_vec(),
            })
            .collect();
        let embeddings = self
            .embed_items
            .iter()
            .enumerate()
            .map(|(row, item)| EmbeddingRow {
                item: item.clone(),
                vec: self.embeddings[row * self.dim..(row + 1) * self.dim].to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            mode: self.mode,
            dim: self.dim,
            edges,
            embeddings,
        }
    }

    pub fn from_checkpoint(tree: &FlowTree, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let dim = ckpt.dim;
        let mut by_path: HashMap<Vec<Token>, NodeId> = HashMap::with_capacity(tree.len());
        for n in 1..tree.len() {
            by_path.insert(tree.tokens_to(n), n);
        }
        let mut bias = vec![0.0; tree.len()];
        let mut weights = vec![0.0; tree.len() * dim];
        let mut seen = vec![false; tree.len()];
        for edge in ckpt.edges {
            let tokens: Vec<Token> = edge
                .path
                .into_iter()
                .map(|t| t.map_or(Token::End, Token::Word))
                .collect();
            let n = *by_path
                .get(&tokens)
                .ok_or_else(|| Error::Checkpoint(format!("edge {tokens:?} not in tree")))?;
            if edge.u.len() != dim {
                return Err(Error::Checkpoint(format!(
                    "edge weight has length {}, expected {dim}",
                    edge.u.len()
                )));
            }
            bias[n] = edge.b;
            weights[n * dim..(n + 1) * dim].copy_from_slice(&edge.u);
            seen[n] = true;
        }
        if let Some(missing) = (1..tree.len()).find(|&n| !seen[n]) {
            return Err(Error::Checkpoint(format!(
                "no parameters for edge {:?}",
                tree.tokens_to(missing)
            )));
        }
        let mut embed_items = Vec::with_capacity(ckpt.embeddings.len());
        let mut embeddings = Vec::with_capacity(ckpt.embeddings.len() * dim);
        for row in ckpt.embeddings {
            if row.vec.len() != dim {
                return Err(Error::Checkpoint(format!(
                    "embedding for {:?} has length {}, expected {dim}",
                    row.item,
                    row.vec.len()
                )));
            }
            embed_items.push(row.item);
            embeddings.extend(row.vec);
        }
        Ok(Self::from_parts(
            ckpt.mode,
            dim,
            bias,
            weights,
            embeddings,
            embed_items,
        ))
    }
}

const CHECKPOINT_FORMAT: &str = "flowrec-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeParams {
    /// Tokens from the root to the edge's child; `null` is END.
    pub path: Vec<Option<String>>,
    pub b: f64,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub item: String,
    pub vec: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: PolicyMode,
    pub dim: usize,
    pub edges: Vec<EdgeParams>,
    pub embeddings: Vec<EmbeddingRow>,
}

pub(crate) fn child_position(tree: &FlowTree, parent: NodeId, child: NodeId) -> Result<usize> {
    tree.node(parent)
        .children
        .iter()
        .position(|&c| c == child)
        .ok_or(Error::InvalidState(child))
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}
