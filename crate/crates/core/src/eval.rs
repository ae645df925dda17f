//! Accuracy, popularity fairness, lexical diversity and distribution
//! mismatch of recommendation lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::catalog::{tokenize, Catalog, GroupAssignment, Tokenizer};
use crate::decode::RankedList;
use crate::error::{Error, Result};

/// Mean hit ratio and NDCG at `k` with one relevant item per list.
pub fn hr_ndcg(lists: &[RankedList], targets: &[&str], k: usize) -> Result<(f64, f64)> {
    if lists.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} lists but {} targets",
            lists.len(),
            targets.len()
        )));
    }
    if lists.is_empty() {
        return Err(Error::UndefinedMetric("HR/NDCG over zero lists"));
    }
    let mut hits = 0.0;
    let mut gain = 0.0;
    for (list, target) in lists.iter().zip(targets) {
        if let Some(rank) = list.rank_of(target, k) {
            hits += 1.0;
            gain += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let n = lists.len() as f64;
    Ok((hits / n, gain / n))
}

/// Recommended vs. historical popularity-group shares.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHistogram {
    /// `r_g`: share of all top-K slots (pooled over lists) in group `g`.
    pub recommended: Vec<f64>,
    /// `h_g`: share of training interactions in group `g`.
    pub history: Vec<f64>,
}

impl GroupHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,h_g,r_g\n");
        for (g, (h, r)) in self.history.iter().zip(&self.recommended).enumerate() {
            let _ = writeln!(out, "{g},{h},{r}");
        }
        out
    }
}

pub fn group_histogram(lists: &[RankedList], groups: &GroupAssignment, k: usize) -> Result<GroupHistogram> {
    let mut counts = vec![0usize; groups.groups];
    let mut total = 0usize;
    for list in lists {
        for item in list.items().take(k) {
            let g = groups
                .group(item)
                .ok_or_else(|| Error::UnknownItem(item.to_string()))?;
            counts[g] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("group shares of zero recommendations"));
    }
    Ok(GroupHistogram {
        recommended: counts.into_iter().map(|c| c as f64 / total as f64).collect(),
        history: groups.history_share.clone(),
    })
}

/// Aggregates per-group deviations `|r_g - h_g|` into (max, mean).
pub fn deviation_summary(recommended: &[f64], history: &[f64]) -> (f64, f64) {
    let devs: Vec<f64> = recommended
        .iter()
        .zip(history)
        .map(|(r, h)| (r - h).abs())
        .collect();
    let max = devs.iter().copied().fold(0.0, f64::max);
    let mean = devs.iter().sum::<f64>() / devs.len().max(1) as f64;
    (max, mean)
}

/// (DGU@k, MGU@k): max and mean absolute deviation between recommended and
/// historical group shares.
pub fn dgu_mgu(lists: &[RankedList], groups: &GroupAssignment, k: usize) -> Result<(f64, f64)> {
    let hist = group_histogram(lists, groups, k)?;
    Ok(deviation_summary(&hist.recommended, &hist.history))
}

/// Word entropy (bits) and type-token ratio over every word of every title in
/// the first `k` slots of each list, with multiplicity.
pub fn diversity(lists: &[RankedList], catalog: &Catalog, k: usize) -> Result<(f64, f64)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for list in lists {
        for item in list.items().take(k) {
            let title = &catalog
                .get(item)
                .ok_or_else(|| Error::UnknownItem(item.to_string()))?
                .title;
            for word in tokenize(title, Tokenizer::Word) {
                *counts.entry(word).or_default() += 1;
            }
        }
    }
    word_diversity(&counts)
}

pub fn word_diversity<K>(counts: &BTreeMap<K, usize>) -> Result<(f64, f64)> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("diversity of an empty word pool"));
    }
    let n = total as f64;
    let entropy = counts
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    let types = counts.values().filter(|&&c| c > 0).count();
    Ok((entropy.max(0.0), types as f64 / n))
}

/// KL in both directions (nats, additively smoothed) and JS (bits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    /// KL(T || R)
    pub kl_tr: f64,
    /// KL(R || T)
    pub kl_rt: f64,
    pub js: f64,
}

pub const KL_SMOOTHING: f64 = 1e-9;

fn normalized<K: Ord + Clone>(counts: &BTreeMap<K, f64>, what: &'static str) -> Result<BTreeMap<K, f64>> {
    let mut total = 0.0;
    for &c in counts.values() {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::Domain { what, value: c });
        }
        total += c;
    }
    if total <= 0.0 {
        return Err(Error::Domain { what, value: total });
    }
    Ok(counts.iter().map(|(k, &c)| (k.clone(), c / total)).collect())
}

/// Compares a target distribution `T` against generated counts `R`; both
/// sides may be raw counts or probabilities.
pub fn distribution_mismatch<K: Ord + Clone>(
    target: &BTreeMap<K, f64>,
    generated: &BTreeMap<K, f64>,
) -> Result<Mismatch> {
    let t = normalized(target, "target total")?;
    let r = normalized(generated, "generated total")?;
    let support: BTreeSet<&K> = t.keys().chain(r.keys()).collect();
    let n = support.len() as f64;
    let smooth = |p: f64| (p + KL_SMOOTHING) / (1.0 + n * KL_SMOOTHING);

    let mut kl_tr = 0.0;
    let mut kl_rt = 0.0;
    let mut js = 0.0;
    for key in support {
        let p = t.get(key).copied().unwrap_or(0.0);
        let q = r.get(key).copied().unwrap_or(0.0);
        let (ps, qs) = (smooth(p), smooth(q));
        kl_tr += ps * (ps / qs).ln();
        kl_rt += qs * (qs / ps).ln();
        // Summing both halves before accumulating keeps JS exactly symmetric.
        let m = 0.5 * (p + q);
        let half = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        js += 0.5 * (half(p) + half(q));
    }
    Ok(Mismatch {
        kl_tr: kl_tr.max(0.0),
        kl_rt: kl_rt.max(0.0),
        js: js.clamp(0.0, 1.0),
    })
}

/// Token mass implied by a title distribution: each item's weight is added to
/// every token of its title (END excluded).
pub fn token_distribution(catalog: &Catalog, title_weights: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (item, &w) in title_weights {
        let entry = catalog
            .get(item)
            .ok_or_else(|| Error::UnknownItem(item.clone()))?;
        for tok in &entry.tokens {
            *out.entry(tok.clone()).or_default() += w;
        }
    }
    Ok(out)
}

/// Counts of each item across the first `k` slots of every list.
pub fn title_counts(lists: &[RankedList], k: usize) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for list in lists {
        for item in list.items().take(k) {
            *out.entry(item.to_string()).or_default() += 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub k: usize,
    pub hr_k: f64,
    pub ndcg_k: f64,
    pub fair_k: usize,
    pub dgu_k: f64,
    pub mgu_k: f64,
    pub entropy_h: f64,
    pub ttr: f64,
    pub title: Mismatch,
    pub token: Mismatch,
    pub group_hist: GroupHistogram,
}

impl MetricsReport {
    /// Accuracy at `k`, fairness at `fair_k`, diversity over the
    /// first `fair_k` slots, and title/token mismatch between the training
    /// frequency distribution and the pooled top-`fair_k` recommendations.
    pub fn compute(
        lists: &[RankedList],
        targets: &[&str],
        catalog: &Catalog,
        groups: &GroupAssignment,
        k: usize,
        fair_k: usize,
    ) -> Result<Self> {
        let (hr_k, ndcg_k) = hr_ndcg(lists, targets, k)?;
        let group_hist = group_histogram(lists, groups, fair_k)?;
        let (dgu_k, mgu_k) = deviation_summary(&group_hist.recommended, &group_hist.history);
        let (entropy_h, ttr) = diversity(lists, catalog, fair_k)?;
        let target_titles: BTreeMap<String, f64> = catalog
            .items
            .iter()
            .filter(|(_, it)| it.frequency > 0)
            .map(|(id, it)| (id.clone(), it.frequency as f64))
            .collect();
        let generated = title_counts(lists, fair_k);
        let title = distribution_mismatch(&target_titles, &generated)?;
        let token = distribution_mismatch(
            &token_distribution(catalog, &target_titles)?,
            &token_distribution(catalog, &generated)?,
        )?;
        Ok(MetricsReport {
            k,
            hr_k,
            ndcg_k,
            fair_k,
            dgu_k,
            mgu_k,
            entropy_h,
            ttr,
            title,
            token,
            group_hist,
        })
    }

    pub fn csv_header(&self) -> String {
        format!(
            "ndcg@{k},hr@{k},dgu@{f},mgu@{f},entropy_h,ttr,title_kl_tr,title_kl_rt,title_js,token_kl_tr,token_kl_rt,token_js",
            k = self.k,
            f = self.fair_k
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.ndcg_k,
            self.hr_k,
            self.dgu_k,
            self.mgu_k,
            self.entropy_h,
            self.ttr,
            self.title.kl_tr,
            self.title.kl_rt,
            self.title.js,
            self.token.kl_tr,
            self.token.kl_rt,
            self.token.js
        )
    }

    pub fn table(&self) -> String {
        let rows = [
            (format!("NDCG@{}", self.k), self.ndcg_k),
            (format!("HR@{}", self.k), self.hr_k),
            (format!("DGU@{}", self.fair_k), self.dgu_k),
            (format!("MGU@{}", self.fair_k), self.mgu_k),
            ("H (bits)".to_string(), self.entropy_h),
            ("TTR".to_string(), self.ttr),
            ("Title KL(T||R)".to_string(), self.title.kl_tr),
            ("Title KL(R||T)".to_string(), self.title.kl_rt),
            ("Title JS".to_string(), self.title.js),
            ("Token KL(T||R)".to_string(), self.token.kl_tr),
            ("Token KL(R||T)".to_string(), self.token.kl_rt),
            ("Token JS".to_string(), self.token.js),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            let _ = writeln!(out, "{name:<16} {v:>10.4}");
        }
        out
    }
}
