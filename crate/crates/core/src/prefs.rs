//! Auxiliary preference scores `p_ui` from first-order item co-occurrence.
//!
//! `raw(u, i) = alpha + count(last -> i)` where `last` is the final item of
//! the user's history; with an empty history it backs off to
//! `alpha + prior(i)`. Raw scores are normalized over the catalog, floored at
//! [`PREF_FLOOR`] and renormalized, so every score is strictly positive.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const PREF_FLOOR: f64 = 1e-6;

/// Anything that can produce a preference score for a user/item pair.
pub trait PreferenceScorer {
    /// Scores for every catalog item, in catalog order.
    fn score_all(&self, user: &str, history: &[String]) -> Vec<f64>;

    /// Position of `item` in the order used by [`score_all`](Self::score_all).
    fn item_index(&self, item: &str) -> Option<usize>;

    fn num_items(&self) -> usize;

    fn score(&self, user: &str, history: &[String], item: &str) -> Result<f64> {
        let idx = self
            .item_index(item)
            .ok_or_else(|| Error::UnknownItem(item.to_string()))?;
        Ok(self.score_all(user, history)[idx])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefModel {
    items: Vec<String>,
    index: HashMap<String, usize>,
    /// `cooccurrence[a]` maps successor index to the number of times it
    /// directly followed `a`.
    cooccurrence: Vec<BTreeMap<usize, u64>>,
    item_prior: Vec<u64>,
    alpha: f64,
}

impl PrefModel {
    /// Counts adjacent ordered pairs in each sequence. `catalog_items` fixes
    /// the scoring order; sequence items outside it are ignored.
    pub fn fit<'a, I>(catalog_items: &[String], sequences: I, alpha: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Domain {
                what: "smoothing alpha (0, inf)",
                value: alpha,
            });
        }
        let items = catalog_items.to_vec();
        let index: HashMap<String, usize> =
            items.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut cooccurrence = vec![BTreeMap::new(); items.len()];
        let mut item_prior = vec![0u64; items.len()];
        let mut any = false;
        for seq in sequences {
            any = true;
            let ids: Vec<Option<usize>> = seq.iter().map(|s| index.get(s).copied()).collect();
            for id in ids.iter().flatten() {
                item_prior[*id] += 1;
            }
            for pair in ids.windows(2) {
                if let (Some(a), Some(b)) = (pair[0], pair[1]) {
                    *cooccurrence[a].entry(b).or_insert(0) += 1;
                }
            }
        }
        if !any {
            return Err(Error::EmptyDataset);
        }
        Ok(PrefModel {
            items,
            index,
            cooccurrence,
            item_prior,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn pair_count(&self, from: &str, to: &str) -> u64 {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.cooccurrence[a].get(&b).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn prior(&self, item: &str) -> u64 {
        self.index.get(item).map_or(0, |&i| self.item_prior[i])
    }

    fn raw_scores(&self, history: &[String]) -> Vec<f64> {
        // The last history item that the model knows anchors the transition.
        let last = history.iter().rev().find_map(|h| self.index.get(h).copied());
        match last {
            Some(l) => {
                let mut raw = vec![self.alpha; self.items.len()];
                for (&j, &c) in &self.cooccurrence[l] {
                    raw[j] += c as f64;
                }
                raw
            }
            None => self
                .item_prior
                .iter()
                .map(|&c| self.alpha + c as f64)
                .collect(),
        }
    }
}

impl PreferenceScorer for PrefModel {
    fn score_all(&self, _user: &str, history: &[String]) -> Vec<f64> {
        floor_and_normalize(self.raw_scores(history))
    }

    fn item_index(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    fn num_items(&self) -> usize {
        self.items.len()
    }
}

/// Normalizes to a distribution, floors at [`PREF_FLOOR`], renormalizes.
pub fn floor_and_normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let floored: Vec<f64> = raw
        .into_iter()
        .map(|r| (r / total).max(PREF_FLOOR))
        .collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|p| p / total).collect()
}

#[derive(Deserialize)]
struct OverrideLine {
    user: String,
    item: String,
    p: f64,
}

/// Externally computed scores keyed by `(user, item)`. Users present in the
/// file get their listed scores renormalized over the catalog (unlisted items
/// count as 0 before flooring); other users fall back to `fallback`.
#[derive(Debug, Clone)]
pub struct OverrideScores<S> {
    per_user: HashMap<String, Vec<f64>>,
    fallback: S,
}

impl<S: PreferenceScorer> OverrideScores<S> {
    pub fn read(path: &Path, fallback: S) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw: HashMap<String, BTreeMap<String, f64>> = HashMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: OverrideLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                row: idx + 1,
                message: e.to_string(),
            })?;
            if !parsed.p.is_finite() || parsed.p < 0.0 {
                return Err(Error::Parse {
                    row: idx + 1,
                    message: format!("score {} is not a non-negative number", parsed.p),
                });
            }
            raw.entry(parsed.user).or_default().insert(parsed.item, parsed.p);
        }
        Ok(Self::from_map(raw, fallback))
    }

    pub fn from_map(raw: HashMap<String, BTreeMap<String, f64>>, fallback: S) -> Self {
        let n = fallback.num_items();
        let per_user = raw
            .into_iter()
            .filter_map(|(user, scores)| {
                let mut v = vec![0.0; n];
                for (item, p) in scores {
                    if let Some(i) = fallback.item_index(&item) {
                        v[i] = p;
                    }
                }
                (v.iter().sum::<f64>() > 0.0).then(|| (user, floor_and_normalize(v)))
            })
            .collect();
        OverrideScores { per_user, fallback }
    }
}

impl<S: PreferenceScorer> PreferenceScorer for OverrideScores<S> {
    fn score_all(&self, user: &str, history: &[String]) -> Vec<f64> {
        match self.per_user.get(user) {
            Some(scores) => scores.clone(),
            None => self.fallback.score_all(user, history),
        }
    }

    fn item_index(&self, item: &str) -> Option<usize> {
        self.fallback.item_index(item)
    }

    fn num_items(&self) -> usize {
        self.fallback.num_items()
    }
}
