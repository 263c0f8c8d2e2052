//! Retrieval evaluation (recall@K on main-branch embeddings) and the
//! memory/compute cost report for the proxy bank.

use std::collections::BTreeMap;

use crate::dataset::EvalSplit;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{dot, Matrix};
use crate::sampler::{MemoryBank, PlaceId};

/// Recall@K for a fixed set of cutoffs. Recall is non-decreasing in K.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_references: usize,
}

impl RecallReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

/// Fraction of queries whose top-K references (by embedding similarity,
/// ties broken toward the smaller reference index) include an image of the
/// query's own place.
pub fn recall_at_k(
    query_emb: &Matrix,
    query_labels: &[PlaceId],
    ref_emb: &Matrix,
    ref_labels: &[PlaceId],
    ks: &[usize],
) -> Result<RecallReport> {
    if query_emb.rows() == 0 {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    if ref_emb.rows() == 0 {
        return Err(Error::Empty("no references to retrieve from".into()));
    }
    if query_emb.rows() != query_labels.len() || ref_emb.rows() != ref_labels.len() {
        return Err(Error::Shape(
            "embedding row counts do not match label counts".into(),
        ));
    }
    if query_emb.cols() != ref_emb.cols() {
        return Err(Error::Shape(format!(
            "query dim {} vs reference dim {}",
            query_emb.cols(),
            ref_emb.cols()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("recall cutoffs must be positive".into()));
    }

    let max_k = ks.iter().copied().max().unwrap().min(ref_emb.rows());
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();

    for (q, &query_label) in query_labels.iter().enumerate() {
        let qrow = query_emb.row(q);
        let mut scored: Vec<(f64, usize)> = (0..ref_emb.rows())
            .map(|r| (dot(qrow, ref_emb.row(r)), r))
            .collect();
        // descending similarity, then ascending reference index
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
        };
        if max_k < scored.len() {
            scored.select_nth_unstable_by(max_k - 1, by_rank);
            scored.truncate(max_k);
        }
        scored.sort_by(by_rank);

        // first rank at which the true place appears
        let first_hit = scored
            .iter()
            .position(|(_, r)| ref_labels[*r] == query_label);
        if let Some(rank) = first_hit {
            for (&k, count) in hits.iter_mut() {
                if rank < k {
                    *count += 1;
                }
            }
        }
    }

    let n_queries = query_emb.rows();
    Ok(RecallReport {
        recall_at: hits
            .into_iter()
            .map(|(k, h)| (k, h as f64 / n_queries as f64))
            .collect(),
        n_queries,
        n_references: ref_emb.rows(),
    })
}

/// Embeds a split's queries and references with the model's main branch
/// and evaluates recall. The proxy branch plays no part at test time.
pub fn evaluate_model(model: &Model, split: &EvalSplit, ks: &[usize]) -> Result<RecallReport> {
    if split.queries.is_empty() {
        return Err(Error::Empty("evaluation split has no queries".into()));
    }
    let embed = |items: &[(Vec<f64>, PlaceId)]| -> Result<(Matrix, Vec<PlaceId>)> {
        let rows: Vec<Vec<f64>> = items.iter().map(|(f, _)| f.clone()).collect();
        let labels: Vec<PlaceId> = items.iter().map(|(_, id)| *id).collect();
        let emb = model.encode_forward(&Matrix::from_rows(&rows)?)?;
        Ok((emb, labels))
    };
    let (q_emb, q_labels) = embed(&split.queries)?;
    let (r_emb, r_labels) = embed(&split.references)?;
    recall_at_k(&q_emb, &q_labels, &r_emb, &r_labels, ks)
}

/// Default recall cutoffs.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Memory and wall-clock accounting for the proxy cache.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub proxy_dim: usize,
    pub n_places: usize,
    pub bank_bytes: u64,
    pub plan_build_seconds: f64,
    pub epoch_seconds: f64,
}

/// Exact cache size: one proxy of `proxy_dim` floats per place.
pub fn bank_bytes(n_places: usize, proxy_dim: usize, bytes_per_float: usize) -> u64 {
    n_places as u64 * proxy_dim as u64 * bytes_per_float as u64
}

/// Builds the cost report from a populated bank and measured timings.
/// `bytes_per_float` parameterizes the accounting (this implementation
/// stores f64; single-precision caches use 4).
pub fn cost_report(
    bank: &MemoryBank,
    bytes_per_float: usize,
    plan_build_seconds: f64,
    epoch_seconds: f64,
) -> CostReport {
    CostReport {
        proxy_dim: bank.proxy_dim(),
        n_places: bank.len(),
        bank_bytes: bank_bytes(bank.len(), bank.proxy_dim(), bytes_per_float),
        plan_build_seconds,
        epoch_seconds,
    }
}
