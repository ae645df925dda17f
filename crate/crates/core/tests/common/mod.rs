#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use flowrec::catalog::{Catalog, Tokenizer};
use flowrec::flownet::{FlowOptions, FlowTree};
use flowrec::policy::{PolicyMode, PolicyParams};
use rand::Rng;

const WORDS: [&str; 10] = ["ab", "cd", "ef", "gh", "ij", "kl", "mn", "op", "qr", "st"];

/// Random catalog of `1..=max_items` items with titles of 1 to 5 words drawn
/// from a small vocabulary and integer rewards in `1..=max_reward`.
pub fn random_catalog(rng: &mut flowrec::Rng, max_items: usize, max_reward: u64) -> Catalog {
    let n = rng.gen_range(1..=max_items);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(n);
    while items.len() < n {
        let len = rng.gen_range(1..=5);
        let title: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
        let title = title.join(" ");
        if seen.insert(title.clone()) {
            let id = format!("it{:04}", items.len());
            items.push((id, title, rng.gen_range(1..=max_reward)));
        }
    }
    Catalog::from_items(items, Tokenizer::Word).unwrap()
}

pub fn tree_of(catalog: &Catalog) -> FlowTree {
    FlowTree::from_frequencies(catalog, FlowOptions::default()).unwrap()
}

pub fn rewards_of(catalog: &Catalog) -> BTreeMap<String, f64> {
    catalog.frequencies()
}

/// Parameters with i.i.d. entries in [-scale, scale].
pub fn random_params(
    rng: &mut flowrec::Rng,
    tree: &FlowTree,
    embed_items: &[String],
    mode: PolicyMode,
    dim: usize,
    scale: f64,
) -> PolicyParams {
    let mut p = PolicyParams::init(tree, embed_items, mode, dim, rng.gen()).unwrap();
    for v in p.bias.iter_mut().chain(&mut p.weights).chain(&mut p.embeddings) {
        *v = rng.gen_range(-scale..=scale);
    }
    p
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
