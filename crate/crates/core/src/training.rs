//! Losses, analytic gradients and the optimization loop.
//!
//! The combined objective for a batch is
//!
//! ```text
//! L = w_sft * mean_x[ -(1/T_y) log P(y | x) ]
//!   + lambda * sum_{sampled titles} sum_{(m, n) boundary pairs}
//!       ( sum_{t=m}^{n-1} log pi(edge t) - sum_{t=m}^{n-1} term(edge t) )^2
//! ```
//!
//! where `term` is the (optionally personalized) log process reward. Sampled
//! titles are drawn on-policy and treated as constants when differentiating.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::catalog::{Dataset, Example};
use crate::decode::generate_topk;
use crate::error::{Error, Result};
use crate::eval::hr_ndcg;
use crate::flownet::{personalized_log_reward, FlowTree, NodeId, RewardVariant};
use crate::policy::{Context, PolicyMode, PolicyParams};
use crate::prefs::PreferenceScorer;

/// Where subtrajectory boundaries fall along a title's path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// A boundary every `k` edges (plus the final state).
    Every(usize),
    /// Only the root and the END leaf.
    Whole,
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity::Every(1)
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("whole") {
            return Ok(Granularity::Whole);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Granularity::Every(k)),
            _ => Err(Error::Config(format!(
                "granularity must be a positive integer or \"whole\", got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Every(k) => write!(f, "{k}"),
            Granularity::Whole => f.write_str("whole"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtrajectorySet {
    pub boundaries: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

/// Boundaries `{0, k, 2k, ...} ∪ {len}` over a path of `len` edges (title
/// tokens plus END) and every ordered pair of them.
pub fn enumerate_subtrajectories(len: usize, granularity: Granularity) -> Result<SubtrajectorySet> {
    if len == 0 {
        return Err(Error::Config("a title path has at least one edge".into()));
    }
    let mut boundaries: Vec<usize> = match granularity {
        Granularity::Every(0) => {
            return Err(Error::Config("granularity must be at least 1".into()))
        }
        Granularity::Every(k) => (0..len).step_by(k).collect(),
        Granularity::Whole => vec![0],
    };
    boundaries.push(len);
    let mut pairs = Vec::with_capacity(boundaries.len() * (boundaries.len() - 1) / 2);
    for (i, &a) in boundaries.iter().enumerate() {
        for &b in &boundaries[i + 1..] {
            pairs.push((a, b));
        }
    }
    Ok(SubtrajectorySet { boundaries, pairs })
}

/// Squared residual of one subtrajectory `[a, b)`: summed log-policy minus
/// summed reward terms.
pub fn subtb_pair_term(log_pi: &[f64], terms: &[f64], a: usize, b: usize) -> f64 {
    let r = pair_residual(log_pi, terms, a, b);
    r * r
}

fn pair_residual(log_pi: &[f64], terms: &[f64], a: usize, b: usize) -> f64 {
    let mut lp = 0.0;
    let mut rw = 0.0;
    for t in a..b {
        lp += log_pi[t];
        rw += terms[t];
    }
    lp - rw
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub reward_variant: RewardVariant,
    pub granularity: Granularity,
    pub learning_rate: f64,
    /// 0 is plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optional hard cap on optimizer steps across epochs.
    pub max_steps: Option<usize>,
    /// On-policy titles sampled per batch example for the SubTB term.
    pub samples_per_example: usize,
    pub seed: u64,
    /// Weight of the SFT term; 0 disables it (distribution-fitting runs).
    pub sft_weight: f64,
    /// Train with the plain SFT gradient only.
    pub sft_only: bool,
    /// Ignore user histories (every context is empty).
    pub history_free: bool,
    /// Divide the SubTB sum by the number of sampled titles.
    pub subtb_mean: bool,
    /// Cutoff for the validation NDCG used in early stopping.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.005,
            reward_variant: RewardVariant::DivPref,
            granularity: Granularity::Every(1),
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 32,
            max_epochs: 7,
            patience: 2,
            max_steps: None,
            samples_per_example: 1,
            seed: 0,
            sft_weight: 1.0,
            sft_only: false,
            history_free: false,
            subtb_mean: false,
            eval_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda must be a finite non-negative number");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if self.samples_per_example == 0 {
            return bad("samples per example must be at least 1");
        }
        if let Granularity::Every(0) = self.granularity {
            return bad("granularity must be at least 1");
        }
        if !self.sft_weight.is_finite() || self.sft_weight < 0.0 {
            return bad("sft weight must be non-negative");
        }
        if self.sft_only && self.sft_weight == 0.0 {
            return bad("sft-only training with the SFT term disabled has no objective");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be at least 1");
        }
        Ok(())
    }

    fn uses_subtb(&self) -> bool {
        !self.sft_only && self.lambda > 0.0
    }
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub bias: Vec<f64>,
    pub weights: Vec<f64>,
    pub embeddings: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            bias: vec![0.0; params.bias.len()],
            weights: vec![0.0; params.weights.len()],
            embeddings: vec![0.0; params.embeddings.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.bias.len() + self.weights.len() + self.embeddings.len());
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.weights);
        v.extend_from_slice(&self.embeddings);
        v
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub sft: f64,
    /// Unweighted SubTB value (after optional per-title averaging).
    pub subtb: f64,
    pub total: f64,
}

/// A title drawn from the current policy for batch example `example`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnPolicySample {
    pub example: usize,
    pub item: String,
}

struct EncodedExample {
    ctx: Context,
    rows: Vec<usize>,
}

fn encode(params: &PolicyParams, example: &Example, history_free: bool) -> EncodedExample {
    if history_free || params.mode == PolicyMode::Tabular {
        let ctx = if history_free {
            params.zero_context()
        } else {
            Context::empty()
        };
        return EncodedExample {
            ctx,
            rows: Vec::new(),
        };
    }
    let ctx = params.encode_context(&example.history);
    let rows = example
        .history
        .iter()
        .filter_map(|h| params.embedding_row(h))
        .collect();
    EncodedExample { ctx, rows }
}

/// Per-edge data along one title path.
struct PathTerms {
    path: Vec<NodeId>,
    log_pi: Vec<f64>,
}

fn path_terms(tree: &FlowTree, params: &PolicyParams, item: &str, ctx: &Context) -> Result<PathTerms> {
    let path = tree.path(item)?;
    let log_pi = params.path_log_probs(tree, &path, ctx)?;
    Ok(PathTerms { path, log_pi })
}

/// Adds `coeffs[t] * d log pi(edge t) / d theta` for every edge of `path`.
/// Context gradients are accumulated into `ctx_grad`.
fn backprop_path(
    tree: &FlowTree,
    params: &PolicyParams,
    path: &[NodeId],
    coeffs: &[f64],
    ctx: &Context,
    grad: &mut Gradient,
    ctx_grad: &mut [f64],
) -> Result<()> {
    let dim = params.dim;
    let contextual = params.mode == PolicyMode::Contextual && !ctx.values.is_empty();
    for (t, w) in path.windows(2).enumerate() {
        let g = coeffs[t];
        if g == 0.0 {
            continue;
        }
        let (parent, child) = (w[0], w[1]);
        let children = &tree.node(parent).children;
        let probs = params.next_token_dist(tree, parent, ctx)?;
        for (&c, p) in children.iter().zip(probs) {
            let indicator = if c == child { 1.0 } else { 0.0 };
            let dl = g * (indicator - p);
            grad.bias[c] += dl;
            if contextual {
                let u = &params.weights[c * dim..(c + 1) * dim];
                let gw = &mut grad.weights[c * dim..(c + 1) * dim];
                for k in 0..dim {
                    gw[k] += dl * ctx.values[k];
                    ctx_grad[k] += dl * u[k];
                }
            }
        }
    }
    Ok(())
}

fn backprop_context(params: &PolicyParams, enc: &EncodedExample, ctx_grad: &[f64], grad: &mut Gradient) {
    if enc.rows.is_empty() || ctx_grad.iter().all(|&g| g == 0.0) {
        return;
    }
    let dim = params.dim;
    let n = enc.rows.len() as f64;
    for &row in &enc.rows {
        let ge = &mut grad.embeddings[row * dim..(row + 1) * dim];
        for k in 0..dim {
            ge[k] += ctx_grad[k] / n;
        }
    }
}

/// Mean over the batch of `-(1/T_y) log P(target | context)`.
pub fn sft_loss(
    batch: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    history_free: bool,
) -> Result<f64> {
    sft_accumulate(batch, params, tree, history_free, 1.0, None)
}

/// Gradient of [`sft_loss`].
pub fn sft_gradients(
    batch: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    history_free: bool,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros_like(params);
    let loss = sft_accumulate(batch, params, tree, history_free, 1.0, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Returns the (unweighted) SFT loss; when `grad` is given, adds
/// `weight * dL_sft/dtheta` into it.
fn sft_accumulate(
    batch: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    history_free: bool,
    weight: f64,
    mut grad: Option<&mut Gradient>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = weight / batch.len() as f64;
    let mut total = 0.0;
    for example in batch {
        let enc = encode(params, example, history_free);
        let terms = path_terms(tree, params, &example.target, &enc.ctx)?;
        let len = terms.log_pi.len() as f64;
        let lp: f64 = terms.log_pi.iter().sum();
        total += -lp / len;
        if let Some(g) = grad.as_deref_mut() {
            let coeffs = vec![-scale / len; terms.log_pi.len()];
            let mut ctx_grad = vec![0.0; params.dim];
            backprop_path(tree, params, &terms.path, &coeffs, &enc.ctx, g, &mut ctx_grad)?;
            backprop_context(params, &enc, &ctx_grad, g);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Personalized log process reward of every edge on `path`.
fn reward_terms(tree: &FlowTree, path: &[NodeId], variant: RewardVariant, p_ui: f64) -> Result<Vec<f64>> {
    path[1..]
        .iter()
        .map(|&c| personalized_log_reward(variant, tree.edge_log_reward(c)?, p_ui))
        .collect()
}

/// SubTB loss of one title and `d loss / d log pi(edge t)` for each edge.
fn subtb_with_coeffs(
    log_pi: &[f64],
    terms: &[f64],
    granularity: Granularity,
) -> Result<(f64, Vec<f64>)> {
    let set = enumerate_subtrajectories(log_pi.len(), granularity)?;
    let mut loss = 0.0;
    let mut coeffs = vec![0.0; log_pi.len()];
    for &(a, b) in &set.pairs {
        let r = pair_residual(log_pi, terms, a, b);
        loss += r * r;
        for c in &mut coeffs[a..b] {
            *c += 2.0 * r;
        }
    }
    Ok((loss, coeffs))
}

/// Subtrajectory-balance loss of one title with a unit backward policy.
/// `p_ui` is ignored by the plain variant.
pub fn subtb_loss(
    tree: &FlowTree,
    params: &PolicyParams,
    item: &str,
    ctx: &Context,
    variant: RewardVariant,
    granularity: Granularity,
    p_ui: f64,
) -> Result<f64> {
    let terms = path_terms(tree, params, item, ctx)?;
    let rewards = reward_terms(tree, &terms.path, variant, p_ui)?;
    Ok(subtb_with_coeffs(&terms.log_pi, &rewards, granularity)?.0)
}

/// Draws `samples_per_example` titles per batch example from the current
/// policy at temperature 1. Returns nothing (and leaves `rng` untouched) when
/// the SubTB term is off.
pub fn sample_on_policy(
    batch: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    config: &TrainConfig,
    rng: &mut crate::Rng,
) -> Result<Vec<OnPolicySample>> {
    if !config.uses_subtb() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(batch.len() * config.samples_per_example);
    for (i, example) in batch.iter().enumerate() {
        let enc = encode(params, example, config.history_free);
        for _ in 0..config.samples_per_example {
            let item = params.sample_title(tree, &enc.ctx, 1.0, rng)?;
            out.push(OnPolicySample { example: i, item });
        }
    }
    Ok(out)
}

/// Combined loss for a fixed set of on-policy samples.
pub fn flower_loss(
    batch: &[Example],
    samples: &[OnPolicySample],
    params: &PolicyParams,
    tree: &FlowTree,
    config: &TrainConfig,
    prefs: Option<&dyn PreferenceScorer>,
) -> Result<LossBreakdown> {
    flower_accumulate(batch, samples, params, tree, config, prefs, None)
}

/// Samples on-policy titles with `rng`, then evaluates [`flower_loss`].
pub fn flower_loss_sampled(
    batch: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    config: &TrainConfig,
    prefs: Option<&dyn PreferenceScorer>,
    rng: &mut crate::Rng,
) -> Result<LossBreakdown> {
    let samples = sample_on_policy(batch, params, tree, config, rng)?;
    flower_loss(batch, &samples, params, tree, config, prefs)
}

/// Analytic gradient of [`flower_loss`] with the samples held fixed.
pub fn gradients(
    batch: &[Example],
    samples: &[OnPolicySample],
    params: &PolicyParams,
    tree: &FlowTree,
    config: &TrainConfig,
    prefs: Option<&dyn PreferenceScorer>,
) -> Result<(LossBreakdown, Gradient)> {
    let mut grad = Gradient::zeros_like(params);
    let loss = flower_accumulate(batch, samples, params, tree, config, prefs, Some(&mut grad))?;
    Ok((loss, grad))
}

fn flower_accumulate(
    batch: &[Example],
    samples: &[OnPolicySample],
    params: &PolicyParams,
    tree: &FlowTree,
    config: &TrainConfig,
    prefs: Option<&dyn PreferenceScorer>,
    mut grad: Option<&mut Gradient>,
) -> Result<LossBreakdown> {
    // With the SFT term disabled its value is still reported.
    let sft_grad = if config.sft_weight > 0.0 {
        grad.as_deref_mut()
    } else {
        None
    };
    let sft = sft_accumulate(
        batch,
        params,
        tree,
        config.history_free,
        config.sft_weight,
        sft_grad,
    )?;
    let weighted_sft = config.sft_weight * sft;
    if !config.uses_subtb() || samples.is_empty() {
        return Ok(LossBreakdown {
            sft,
            subtb: 0.0,
            total: weighted_sft,
        });
    }

    let variant = config.reward_variant;
    if variant.needs_preference() && prefs.is_none() {
        return Err(Error::Config(format!(
            "reward variant {variant} needs a preference scorer"
        )));
    }
    let norm = if config.subtb_mean {
        1.0 / samples.len() as f64
    } else {
        1.0
    };
    let scale = config.lambda * norm;

    let mut encoded: HashMap<usize, EncodedExample> = HashMap::new();
    let mut pref_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut subtb = 0.0;
    for sample in samples {
        let example = batch
            .get(sample.example)
            .ok_or_else(|| Error::Config(format!("sample refers to example {}", sample.example)))?;
        let enc = encoded
            .entry(sample.example)
            .or_insert_with(|| encode(params, example, config.history_free));
        let p_ui = match prefs {
            Some(scorer) if variant.needs_preference() => {
                let scores = pref_cache.entry(sample.example).or_insert_with(|| {
                    let history: &[String] = if config.history_free { &[] } else { &example.history };
                    scorer.score_all(&example.user, history)
                });
                let idx = scorer
                    .item_index(&sample.item)
                    .ok_or_else(|| Error::UnknownItem(sample.item.clone()))?;
                scores[idx]
            }
            _ => 1.0,
        };
        let terms = path_terms(tree, params, &sample.item, &enc.ctx)?;
        let rewards = reward_terms(tree, &terms.path, variant, p_ui)?;
        let (loss, mut coeffs) = subtb_with_coeffs(&terms.log_pi, &rewards, config.granularity)?;
        subtb += loss;
        if let Some(g) = grad.as_deref_mut() {
            for c in &mut coeffs {
                *c *= scale;
            }
            let mut ctx_grad = vec![0.0; params.dim];
            backprop_path(tree, params, &terms.path, &coeffs, &enc.ctx, g, &mut ctx_grad)?;
            backprop_context(params, enc, &ctx_grad, g);
        }
    }
    let subtb = subtb * norm;
    Ok(LossBreakdown {
        sft,
        subtb,
        total: weighted_sft + config.lambda * subtb,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub sft_loss: f64,
    pub subtb_loss: f64,
    pub total: f64,
    pub valid_ndcg: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,sft_loss,subtb_loss,total,valid_ndcg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.sft_loss,
            self.subtb_loss,
            self.total,
            self.valid_ndcg.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best parameters on validation NDCG, or the final ones without a
    /// validation split.
    pub params: PolicyParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn apply_update(params: &mut PolicyParams, grad: &Gradient, velocity: Option<&mut Gradient>, config: &TrainConfig) {
    let lr = config.learning_rate;
    match velocity {
        None => {
            for (p, g) in params.bias.iter_mut().zip(&grad.bias) {
                *p -= lr * g;
            }
            for (p, g) in params.weights.iter_mut().zip(&grad.weights) {
                *p -= lr * g;
            }
            for (p, g) in params.embeddings.iter_mut().zip(&grad.embeddings) {
                *p -= lr * g;
            }
        }
        Some(v) => {
            let m = config.momentum;
            let groups = [
                (&mut params.bias, &mut v.bias, &grad.bias),
                (&mut params.weights, &mut v.weights, &grad.weights),
                (&mut params.embeddings, &mut v.embeddings, &grad.embeddings),
            ];
            for (ps, vs, gs) in groups {
                for ((p, vel), g) in ps.iter_mut().zip(vs.iter_mut()).zip(gs) {
                    *vel = m * *vel + g;
                    *p -= lr * *vel;
                }
            }
        }
    }
}

/// Mean NDCG@k of exact top-k lists over `examples`.
pub fn validation_ndcg(
    examples: &[Example],
    params: &PolicyParams,
    tree: &FlowTree,
    k: usize,
    history_free: bool,
) -> Result<f64> {
    let mut lists = Vec::with_capacity(examples.len());
    for example in examples {
        let enc = encode(params, example, history_free);
        lists.push(generate_topk(tree, &enc.ctx, params, k, 1.0)?);
    }
    let targets: Vec<&str> = examples.iter().map(|e| e.target.as_str()).collect();
    Ok(hr_ndcg(&lists, &targets, k)?.1)
}

fn non_finite(step: usize, what: &str, value: f64) -> Error {
    Error::Diverged {
        step,
        detail: format!("{what} became {value}"),
    }
}

/// Mini-batch gradient descent with early stopping on validation NDCG.
/// `on_epoch` sees every epoch's log row and the parameters after it.
pub fn train(
    dataset: &Dataset,
    tree: &FlowTree,
    init: PolicyParams,
    prefs: Option<&dyn PreferenceScorer>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &PolicyParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // Training examples must be reachable in the tree.
    let examples: Vec<&Example> = dataset
        .train
        .iter()
        .filter(|e| tree.contains(&e.target))
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let valid: Vec<Example> = dataset
        .valid
        .iter()
        .filter(|e| tree.contains(&e.target))
        .cloned()
        .collect();

    let mut rng = crate::seeded_rng(config.seed);
    let mut params = init;
    let mut velocity = (config.momentum > 0.0).then(|| Gradient::zeros_like(&params));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, PolicyParams)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let budget = config.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=config.max_epochs {
        if step >= budget {
            break;
        }
        order.shuffle(&mut rng);
        let (mut sum_sft, mut sum_subtb, mut sum_total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if step >= budget {
                break;
            }
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = if config.sft_only {
                let (sft, grad) = sft_gradients(&batch, &params, tree, config.history_free)?;
                (
                    LossBreakdown {
                        sft,
                        subtb: 0.0,
                        total: sft,
                    },
                    grad,
                )
            } else {
                let samples = sample_on_policy(&batch, &params, tree, config, &mut rng)?;
                gradients(&batch, &samples, &params, tree, config, prefs)?
            };
            step += 1;
            if !loss.total.is_finite() {
                return Err(non_finite(step, "loss", loss.total));
            }
            apply_update(&mut params, &grad, velocity.as_mut(), config);
            if let Some(bad) = params.bias.iter().find(|p| !p.is_finite()) {
                return Err(non_finite(step, "a parameter", *bad));
            }
            sum_sft += loss.sft;
            sum_subtb += loss.subtb;
            sum_total += loss.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let valid_ndcg = if valid.is_empty() {
            None
        } else {
            Some(validation_ndcg(&valid, &params, tree, config.eval_k, config.history_free)?)
        };
        let row = EpochLog {
            epoch,
            step,
            sft_loss: sum_sft / n,
            subtb_loss: sum_subtb / n,
            total: sum_total / n,
            valid_ndcg,
        };
        on_epoch(&row, &params)?;
        log.push(row);

        if let Some(score) = valid_ndcg {
            match &best {
                Some((b, _, _)) if score <= *b => {
                    since_best += 1;
                    if since_best >= config.patience.max(1) {
                        break;
                    }
                }
                _ => {
                    best = Some((score, epoch, params.clone()));
                    since_best = 0;
                }
            }
        }
    }

    let last_epoch = log.last().map_or(0, |r| r.epoch);
    Ok(match best {
        Some((_, epoch, p)) => TrainOutcome {
            params: p,
            log,
            best_epoch: epoch,
        },
        None => TrainOutcome {
            params,
            log,
            best_epoch: last_epoch,
        },
    })
}
