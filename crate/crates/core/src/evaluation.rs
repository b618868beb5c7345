//! AUC, Logloss and NDCG@k, plus the embedding similarity / node matching
//! grids used for case studies.

use std::collections::HashMap;
use std::fmt;

use crate::autodiff::bce;
use crate::data::{DataSample, EmbeddingTable, Vocabulary};
use crate::error::{GmcfError, Result};
use crate::model::{predict, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub user: usize,
    /// Raw score `y'`.
    pub score: f64,
    pub label: f64,
}

impl ScoredSample {
    pub fn probability(&self) -> f64 {
        crate::autodiff::sigmoid(self.score)
    }
}

pub fn score_samples(params: &ModelParams, samples: &[DataSample]) -> Result<Vec<ScoredSample>> {
    samples
        .iter()
        .map(|s| {
            let r = predict(s, params)?;
            if !r.score.is_finite() {
                return Err(GmcfError::Numeric("score is not finite".into()));
            }
            Ok(ScoredSample {
                user: s.user_key(),
                score: r.score,
                label: s.label,
            })
        })
        .collect()
}

/// Pooled AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auc(scored: &[ScoredSample]) -> Result<f64> {
    let mut sorted: Vec<&ScoredSample> = scored.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let positives = scored.iter().filter(|s| s.label > 0.5).count() as u64;
    let negatives = scored.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(GmcfError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let (mut correct, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut k = 0;
    while k < sorted.len() {
        let mut end = k;
        while end < sorted.len() && sorted[end].score == sorted[k].score {
            end += 1;
        }
        let pos = sorted[k..end].iter().filter(|s| s.label > 0.5).count() as u64;
        let neg = (end - k) as u64 - pos;
        correct += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        k = end;
    }
    Ok((2 * correct + ties) as f64 / (2 * positives * negatives) as f64)
}

/// Mean BCE of `σ(score)` against the labels.
pub fn logloss(scored: &[ScoredSample]) -> f64 {
    logloss_of_probabilities(scored.iter().map(|s| (s.probability(), s.label)))
}

pub fn logloss_of_probabilities(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, y) in pairs {
        sum += bce(p, y);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// NDCG@k of one ranked list of binary relevances, `None` if nothing is relevant.
pub fn ndcg_of_ranking(relevance: &[f64], k: usize) -> Option<f64> {
    let discount = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = relevance
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &rel)| rel * discount(r + 1))
        .sum();
    let relevant = relevance.iter().filter(|&&r| r > 0.0).count();
    if relevant == 0 {
        return None;
    }
    let ideal: f64 = (1..=relevant.min(k)).map(discount).sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserNdcg {
    pub user: usize,
    pub items: usize,
    pub ndcg: f64,
}

/// Per-user NDCG@k over each user's own samples, ranked by score
/// descending with ties in input order. Users with nothing relevant are
/// left out.
pub fn ndcg_per_user(scored: &[ScoredSample], k: usize) -> Result<Vec<UserNdcg>> {
    if k == 0 {
        return Err(GmcfError::InvalidConfig("k must be >= 1".into()));
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut lists: Vec<(usize, Vec<&ScoredSample>)> = Vec::new();
    for s in scored {
        let g = *slot.entry(s.user).or_insert_with(|| {
            lists.push((s.user, Vec::new()));
            lists.len() - 1
        });
        lists[g].1.push(s);
    }
    Ok(lists
        .into_iter()
        .filter_map(|(user, mut list)| {
            list.sort_by(|a, b| b.score.total_cmp(&a.score));
            let rel: Vec<f64> = list.iter().map(|s| s.label).collect();
            ndcg_of_ranking(&rel, k).map(|ndcg| UserNdcg {
                user,
                items: list.len(),
                ndcg,
            })
        })
        .collect())
}

pub fn ndcg_at_k(scored: &[ScoredSample], k: usize) -> Result<f64> {
    let users = ndcg_per_user(scored, k)?;
    if users.is_empty() {
        return Err(GmcfError::UndefinedMetric("no user has a relevant item".into()));
    }
    Ok(users.iter().map(|u| u.ndcg).sum::<f64>() / users.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub logloss: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "auc={:.6} logloss={:.6} ndcg@5={:.6} ndcg@10={:.6}",
            self.auc, self.logloss, self.ndcg5, self.ndcg10
        )
    }
}

pub fn metric_report(scored: &[ScoredSample]) -> Result<MetricReport> {
    if scored.is_empty() {
        return Err(GmcfError::UndefinedMetric("no samples to evaluate".into()));
    }
    Ok(MetricReport {
        auc: auc(scored)?,
        logloss: logloss(scored),
        ndcg5: ndcg_at_k(scored, 5)?,
        ndcg10: ndcg_at_k(scored, 10)?,
    })
}

pub fn evaluate(params: &ModelParams, samples: &[DataSample]) -> Result<MetricReport> {
    metric_report(&score_samples(params, samples)?)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyMatrices {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `cosine(v_a, v_a')` over rows x rows.
    pub similarity: Vec<Vec<f64>>,
    /// `sum(v_a ⊙ v_b)` over rows x cols.
    pub matching: Vec<Vec<f64>>,
}

pub fn export_matrices(table: &EmbeddingTable, group_a: &[usize], group_b: &[usize]) -> Result<CaseStudyMatrices> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(GmcfError::InvalidConfig("attribute groups must be nonempty".into()));
    }
    let a = group_a.iter().map(|&id| table.vector(id)).collect::<Result<Vec<_>>>()?;
    let b = group_b.iter().map(|&id| table.vector(id)).collect::<Result<Vec<_>>>()?;
    let similarity = a.iter().map(|x| a.iter().map(|y| cosine(x, y)).collect()).collect();
    let matching = a
        .iter()
        .map(|x| b.iter().map(|y| x.iter().zip(*y).map(|(p, q)| p * q).sum()).collect())
        .collect();
    Ok(CaseStudyMatrices {
        rows: group_a.to_vec(),
        cols: group_b.to_vec(),
        similarity,
        matching,
    })
}

impl CaseStudyMatrices {
    /// Tab-separated grids with attribute names as row and column labels.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let grid = |title: &str, cols: &[usize], m: &[Vec<f64>]| {
            let mut out = format!("# {title}\n");
            out.push('-');
            for &c in cols {
                out.push('\t');
                out.push_str(vocab.name(c));
            }
            out.push('\n');
            for (&r, row) in self.rows.iter().zip(m) {
                out.push_str(vocab.name(r));
                for x in row {
                    out.push_str(&format!("\t{x:.6}"));
                }
                out.push('\n');
            }
            out
        };
        let mut text = grid("similarity", &self.rows, &self.similarity);
        text.push('\n');
        text.push_str(&grid("matching", &self.cols, &self.matching));
        text
    }
}
