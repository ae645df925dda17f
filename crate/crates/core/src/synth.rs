//! Seeded synthetic fixtures: Zipf-popularity catalogs and interaction logs,
//! and a two-cluster log for personalization checks.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;

use crate::catalog::{Catalog, InteractionRecord, Tokenizer};
use crate::error::{Error, Result};

const VOCAB: [&str; 16] = [
    "amber", "blue", "cedar", "delta", "echo", "fern", "gold", "harbor", "iris", "jade", "kite",
    "lunar", "maple", "north", "opal", "pine",
];

/// `n` distinct titles of 1 to 4 words over a 16-word vocabulary, so many
/// titles share prefixes.
pub fn titles(n: usize, seed: u64) -> Vec<String> {
    let mut rng = crate::seeded_rng(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(1..=4);
        let words: Vec<&str> = (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
        let title = words.join(" ");
        if seen.insert(title.clone()) {
            out.push(title);
        }
    }
    out
}

pub fn item_id(rank: usize) -> String {
    format!("i{rank:04}")
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

fn check_zipf(n: usize, exponent: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("zipf catalog needs at least one item".into()));
    }
    if !exponent.is_finite() || exponent < 0.0 {
        return Err(Error::Domain {
            what: "zipf exponent [0, inf)",
            value: exponent,
        });
    }
    Ok(())
}

/// Catalog whose item of rank `r` (1-based) has frequency
/// `round(scale * r^-exponent)`, at least 1.
pub fn zipf_catalog(n: usize, exponent: f64, scale: f64, seed: u64) -> Result<Catalog> {
    check_zipf(n, exponent)?;
    let titles = titles(n, seed);
    let weights = zipf_weights(n, exponent);
    Catalog::from_items(
        titles.into_iter().zip(weights).enumerate().map(|(i, (title, w))| {
            (item_id(i + 1), title, ((scale * w).round() as u64).max(1))
        }),
        Tokenizer::Word,
    )
}

/// Interaction log whose item draws follow a Zipf law over `n` items.
/// Users are drawn uniformly; timestamps increase by one per interaction.
pub fn zipf_log(
    n: usize,
    exponent: f64,
    interactions: usize,
    users: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    check_zipf(n, exponent)?;
    if users == 0 {
        return Err(Error::Config("zipf log needs at least one user".into()));
    }
    let titles = titles(n, seed);
    let dist = WeightedIndex::new(zipf_weights(n, exponent)).expect("zipf weights are positive");
    let mut rng = crate::seeded_rng(seed.wrapping_add(1));
    Ok((0..interactions)
        .map(|t| {
            let idx = dist.sample(&mut rng);
            let user = rng.gen_range(0..users);
            InteractionRecord {
                user_id: format!("u{user:04}"),
                item_id: item_id(idx + 1),
                title: titles[idx].clone(),
                timestamp: t as i64,
            }
        })
        .collect())
}

/// Two disjoint user/item clusters. Users `a*` only interact with items
/// titled `north ...` and users `b*` only with items titled `pine ...`;
/// within a cluster items are drawn with Zipf(1) popularity.
pub fn two_cluster_log(
    users_per_cluster: usize,
    items_per_cluster: usize,
    interactions_per_user: usize,
    seed: u64,
) -> Vec<InteractionRecord> {
    let suffixes = titles(items_per_cluster, seed);
    let dist = WeightedIndex::new(zipf_weights(items_per_cluster, 1.0)).expect("positive weights");
    let mut rng = crate::seeded_rng(seed.wrapping_add(1));
    let mut records = Vec::new();
    let mut ts = 0i64;
    for _ in 0..interactions_per_user {
        for (cluster, head) in [("a", "north"), ("b", "pine")] {
            for u in 0..users_per_cluster {
                let idx = dist.sample(&mut rng);
                records.push(InteractionRecord {
                    user_id: format!("{cluster}{u:03}"),
                    item_id: format!("{cluster}{:03}", idx + 1),
                    title: format!("{head} {}", suffixes[idx]),
                    timestamp: ts,
                });
                ts += 1;
            }
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn titles_are_distinct_and_seeded() {
        let a = titles(100, 7);
        assert_eq!(a, titles(100, 7));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 100);
    }

    #[test]
    fn zipf_catalog_frequencies() {
        let cat = zipf_catalog(100, 1.0, 1000.0, 7).unwrap();
        assert_eq!(cat.len(), 100);
        assert_eq!(cat.get("i0001").unwrap().frequency, 1000);
        assert_eq!(cat.get("i0002").unwrap().frequency, 500);
        assert_eq!(cat.get("i0100").unwrap().frequency, 10);
    }

    #[test]
    fn zipf_log_is_reproducible() {
        let a = zipf_log(20, 1.0, 500, 10, 3).unwrap();
        assert_eq!(a, zipf_log(20, 1.0, 500, 10, 3).unwrap());
        let top = a.iter().filter(|r| r.item_id == "i0001").count();
        let last = a.iter().filter(|r| r.item_id == "i0020").count();
        assert!(top > last);
    }

    #[test]
    fn clusters_do_not_mix() {
        let log = two_cluster_log(5, 8, 4, 1);
        assert_eq!(log.len(), 40);
        for r in &log {
            assert_eq!(r.user_id[..1], r.item_id[..1]);
        }
    }
}
