use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn rank_of<S: AsRef<str>>(ranked: &[S], truth: &str) -> Option<usize> {
    ranked.iter().position(|r| r.as_ref() == truth).map(|i| i + 1)
}

/// 1 when `truth` is among the first `k` items.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], truth: &str, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Cutoff);
    }
    Ok(match rank_of(ranked, truth) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// `1 / log2(rank + 1)` for a single relevant item within the cutoff.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], truth: &str, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Cutoff);
    }
    Ok(match rank_of(ranked, truth) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

/// Ranked list produced for one evaluated user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: String,
    pub truth: String,
    pub ranked: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    pub n_users: usize,
}

impl EvalReport {
    /// Averages over users in the given order.
    pub fn from_rankings(rankings: &[UserRanking]) -> Result<Self> {
        if rankings.is_empty() {
            return Err(Error::Empty("evaluation"));
        }
        let mut sums = [0.0f64; 4];
        for r in rankings {
            sums[0] += recall_at_k(&r.ranked, &r.truth, 5)?;
            sums[1] += recall_at_k(&r.ranked, &r.truth, 10)?;
            sums[2] += ndcg_at_k(&r.ranked, &r.truth, 5)?;
            sums[3] += ndcg_at_k(&r.ranked, &r.truth, 10)?;
        }
        let n = rankings.len() as f64;
        Ok(EvalReport {
            recall_5: sums[0] / n,
            recall_10: sums[1] / n,
            ndcg_5: sums[2] / n,
            ndcg_10: sums[3] / n,
            n_users: rankings.len(),
        })
    }
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two constant labelings count as identical (NMI 1).
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("nmi", format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("nmi"));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cb: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *joint.entry((x, y)).or_default() += 1.0;
    }
    let entropy = |c: &BTreeMap<usize, f64>| -c.values().map(|&v| (v / n) * (v / n).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &v)| (v / n) * ((v * n) / (ca[&x] * cb[&y])).ln())
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}
