//! Exact cosine top-K retrieval over the memory bank, dispatched per
//! missing-modality pattern.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, MissingPattern, Modality};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::Tensor;

/// Which query produced a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Text,
    Vision,
}

/// How queries are matched against the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMode {
    /// Text queries search text embeddings, image queries search image embeddings.
    Within,
    /// Queries search the other modality's embeddings.
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedEntry {
    /// Position in the bank.
    pub index: usize,
    pub source_id: u64,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedContext {
    pub channel: Channel,
    /// Descending score, ties by ascending source id.
    pub entries: Vec<RetrievedEntry>,
    /// Set when the query had zero norm and the lowest-id fallback was used.
    pub degraded: bool,
}

impl RetrievedContext {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.label)
    }

    /// The retrieved token matrices of `modality`, one per entry.
    pub fn token_matrices(&self, bank: &MemoryBank, modality: Modality) -> Vec<Tensor> {
        self.entries.iter().map(|e| bank.tokens(e.index, modality)).collect()
    }

    /// All retrieved token matrices stacked along the sequence axis,
    /// `(K·len)×d`.
    pub fn stacked_tokens(&self, bank: &MemoryBank, modality: Modality) -> Tensor {
        let mats = self.token_matrices(bank, modality);
        let refs: Vec<&Tensor> = mats.iter().collect();
        Tensor::concat_rows(&refs).expect("bank matrices share width")
    }
}

/// Cosine similarity; a zero-norm side scores 0.
pub fn cosine(query: &[f64], key: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut qq = 0.0;
    let mut kk = 0.0;
    for (&q, &k) in query.iter().zip(key) {
        let k = k as f64;
        dot += q * k;
        qq += q * q;
        kk += k * k;
    }
    if qq == 0.0 || kk == 0.0 {
        0.0
    } else {
        dot / (qq.sqrt() * kk.sqrt())
    }
}

fn rank(a: &RetrievedEntry, b: &RetrievedEntry) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.source_id.cmp(&b.source_id))
}

/// Exact top-`k` entries whose `index_modality` global embedding is most
/// cosine-similar to `query`, never returning `exclude_id`.
pub fn cosine_topk(
    query: &[f64],
    bank: &MemoryBank,
    index_modality: Modality,
    channel: Channel,
    k: usize,
    exclude_id: Option<u64>,
) -> Result<RetrievedContext> {
    if query.len() != bank.dims().d {
        return Err(Error::Precondition(format!(
            "query width {} does not match bank width {}",
            query.len(),
            bank.dims().d
        )));
    }
    if !query.iter().all(|v| v.is_finite()) {
        return Err(Error::Precondition("query is not finite".into()));
    }
    let available = bank.source_ids().filter(|&id| Some(id) != exclude_id).count();
    if k == 0 || k > available {
        return Err(Error::InsufficientCorpus {
            requested: k,
            available,
        });
    }
    if query.iter().all(|&v| v == 0.0) {
        return Err(Error::NonRetrievable);
    }
    let mut best: Vec<RetrievedEntry> = Vec::with_capacity(k + 1);
    for (index, entry) in bank.entries().iter().enumerate() {
        if Some(entry.source_id) == exclude_id {
            continue;
        }
        let cand = RetrievedEntry {
            index,
            source_id: entry.source_id,
            label: entry.label as usize,
            score: cosine(query, bank.global(index, index_modality)),
        };
        if best.len() == k && rank(&cand, &best[k - 1]) != Ordering::Less {
            continue;
        }
        let pos = best.partition_point(|e| rank(e, &cand) == Ordering::Less);
        best.insert(pos, cand);
        best.truncate(k);
    }
    Ok(RetrievedContext {
        channel,
        entries: best,
        degraded: false,
    })
}

/// Lowest-id fallback for queries that cannot be ranked.
fn lowest_ids(bank: &MemoryBank, channel: Channel, k: usize, exclude_id: Option<u64>) -> Result<RetrievedContext> {
    let entries: Vec<RetrievedEntry> = bank
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| Some(e.source_id) != exclude_id)
        .take(k)
        .map(|(index, e)| RetrievedEntry {
            index,
            source_id: e.source_id,
            label: e.label as usize,
            score: 0.0,
        })
        .collect();
    if entries.len() < k || k == 0 {
        return Err(Error::InsufficientCorpus {
            requested: k,
            available: entries.len(),
        });
    }
    Ok(RetrievedContext {
        channel,
        entries,
        degraded: true,
    })
}

fn search(
    query: &[f64],
    bank: &MemoryBank,
    index_modality: Modality,
    channel: Channel,
    k: usize,
    exclude_id: Option<u64>,
) -> Result<RetrievedContext> {
    match cosine_topk(query, bank, index_modality, channel, k, exclude_id) {
        Err(Error::NonRetrievable) => lowest_ids(bank, channel, k, exclude_id),
        other => other,
    }
}

/// Text and vision contexts for one instance. For a single-modality instance
/// both contexts are the same search result.
pub fn retrieve_context(
    enc: &FrozenEncoders,
    bank: &MemoryBank,
    instance: &Instance,
    k: usize,
    mode: RetrievalMode,
    exclude_id: Option<u64>,
) -> Result<(RetrievedContext, RetrievedContext)> {
    let index_for = |query_modality: Modality| match (mode, query_modality) {
        (RetrievalMode::Within, m) => m,
        (RetrievalMode::Cross, Modality::Text) => Modality::Image,
        (RetrievalMode::Cross, Modality::Image) => Modality::Text,
    };
    let query = |modality: Modality| -> Result<Vec<f64>> {
        let tokens = enc.embed_modality(instance, modality)?;
        Ok(enc.encode_global(&tokens, modality)?.vector)
    };
    match instance.mask() {
        MissingPattern::TextMissing => {
            let q = query(Modality::Image)?;
            let ctx = search(&q, bank, index_for(Modality::Image), Channel::Vision, k, exclude_id)?;
            Ok((ctx.clone(), ctx))
        }
        MissingPattern::ImageMissing => {
            let q = query(Modality::Text)?;
            let ctx = search(&q, bank, index_for(Modality::Text), Channel::Text, k, exclude_id)?;
            Ok((ctx.clone(), ctx))
        }
        MissingPattern::Full => {
            let qt = query(Modality::Text)?;
            let qv = query(Modality::Image)?;
            let text_ctx = search(&qt, bank, index_for(Modality::Text), Channel::Text, k, exclude_id)?;
            let vision_ctx = search(&qv, bank, index_for(Modality::Image), Channel::Vision, k, exclude_id)?;
            Ok((text_ctx, vision_ctx))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{BankDims, MemoryEntry};

    fn bank_from(globals: &[[f32; 2]]) -> MemoryBank {
        let dims = BankDims {
            n: 1,
            m: 1,
            d: 2,
            classes: 3,
        };
        let entries = globals
            .iter()
            .enumerate()
            .map(|(i, g)| MemoryEntry {
                text_global: g.to_vec(),
                image_global: vec![g[1], g[0]],
                text_tokens: g.to_vec(),
                image_tokens: g.to_vec(),
                label: (i % 3) as u32,
                source_id: i as u64 + 1,
            })
            .collect();
        MemoryBank::from_entries(dims, entries).unwrap()
    }

    #[test]
    fn self_alignment() {
        let bank = bank_from(&[[1.0, 0.0], [0.0, 1.0]]);
        let ctx = cosine_topk(&[1.0, 0.0], &bank, Modality::Text, Channel::Text, 1, None).unwrap();
        assert_eq!(ctx.entries[0].source_id, 1);
        assert_eq!(ctx.entries[0].score, 1.0);
    }

    #[test]
    fn exclusion_returns_next_best() {
        let bank = bank_from(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]);
        let ctx = cosine_topk(&[1.0, 0.0], &bank, Modality::Text, Channel::Text, 2, Some(1)).unwrap();
        let ids: Vec<u64> = ctx.entries.iter().map(|e| e.source_id).collect();
        assert_eq!(ids, vec![2, 3]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let bank = bank_from(&[[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]]);
        let ctx = cosine_topk(&[3.0, 0.0], &bank, Modality::Text, Channel::Text, 3, None).unwrap();
        let ids: Vec<u64> = ctx.entries.iter().map(|e| e.source_id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }

    #[test]
    fn insufficient_corpus_and_zero_query() {
        let bank = bank_from(&[[1.0, 0.0]]);
        assert!(matches!(
            cosine_topk(&[1.0, 0.0], &bank, Modality::Text, Channel::Text, 1, Some(1)),
            Err(Error::InsufficientCorpus {
                requested: 1,
                available: 0
            })
        ));
        assert!(matches!(
            cosine_topk(&[0.0, 0.0], &bank, Modality::Text, Channel::Text, 1, None),
            Err(Error::NonRetrievable)
        ));
        let bank = bank_from(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let ctx = search(&[0.0, 0.0], &bank, Modality::Text, Channel::Text, 2, Some(1)).unwrap();
        assert!(ctx.degraded);
        assert_eq!(ctx.entries.iter().map(|e| e.source_id).collect::<Vec<_>>(), vec![2, 3]);
    }
}
