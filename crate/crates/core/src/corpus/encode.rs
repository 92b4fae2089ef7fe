use serde::{Deserialize, Serialize};

use super::{Bag, BagKey, Instance, RelationId, Vocabulary, PAD_ID};
use crate::error::{GbreError, Result};

/// Instantiates the relation query for an entity pair: the lowercased
/// template split on whitespace, with `?` as its own final token.
pub fn generate_query(head: &str, tail: &str) -> Result<Vec<String>> {
    if head.trim().is_empty() || tail.trim().is_empty() {
        return Err(GbreError::Data("query entities must be nonempty".into()));
    }
    let text = format!("what is the relation between head-entity {head} and tail-entity {tail} ?");
    Ok(text.split_whitespace().map(str::to_lowercase).collect())
}

/// A sentence ready for the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInstance {
    /// Word ids padded with PAD up to `max_len`.
    pub word_ids: Vec<usize>,
    /// Number of real tokens (`<= max_len`).
    pub len: usize,
    /// Shifted relative offsets to the head end position, one per slot.
    pub head_offsets: Vec<usize>,
    /// Shifted relative offsets to the tail end position, one per slot.
    pub tail_offsets: Vec<usize>,
    /// Last token index of the head entity after truncation.
    pub head_end: usize,
    /// Last token index of the tail entity after truncation.
    pub tail_end: usize,
    pub query_ids: Vec<usize>,
}

impl EncodedInstance {
    /// Entity positions in text order, for segmenting the sentence.
    pub fn segment_bounds(&self) -> (usize, usize) {
        (
            self.head_end.min(self.tail_end),
            self.head_end.max(self.tail_end),
        )
    }
}

/// Number of rows a position table needs for offsets clipped to
/// `[-max_len, max_len]`.
pub fn position_table_rows(max_len: usize) -> usize {
    2 * max_len + 1
}

/// Offset `pos - anchor`, clipped to `[-max_len, max_len]`, shifted by
/// `max_len` into a nonnegative row index.
pub fn relative_position(pos: usize, anchor: usize, max_len: usize) -> usize {
    let m = max_len as i64;
    let d = (pos as i64 - anchor as i64).clamp(-m, m);
    (d + m) as usize
}

/// Maps one instance onto ids and position features. Returns `Ok(None)`
/// when truncation to `max_len` removes an entity entirely.
pub fn encode_instance(
    instance: &Instance,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Option<EncodedInstance>> {
    if max_len < 3 {
        return Err(GbreError::Config(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    if instance.head.span.start >= max_len || instance.tail.span.start >= max_len {
        return Ok(None);
    }
    let len = instance.tokens.len().min(max_len);
    let mut word_ids: Vec<usize> = instance.tokens[..len]
        .iter()
        .map(|t| vocab.lookup(t))
        .collect();
    word_ids.resize(max_len, PAD_ID);

    let head_end = (instance.head.span.end - 1).min(max_len - 1);
    let tail_end = (instance.tail.span.end - 1).min(max_len - 1);
    let head_offsets = (0..max_len)
        .map(|l| relative_position(l, head_end, max_len))
        .collect();
    let tail_offsets = (0..max_len)
        .map(|l| relative_position(l, tail_end, max_len))
        .collect();

    let query = generate_query(&instance.head.name, &instance.tail.name)?;
    let query_ids = query.iter().map(|t| vocab.lookup(t)).collect();

    Ok(Some(EncodedInstance {
        word_ids,
        len,
        head_offsets,
        tail_offsets,
        head_end,
        tail_end,
        query_ids,
    }))
}

/// Model-ready bag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedBag {
    pub key: BagKey,
    pub label: RelationId,
    pub gold: Vec<RelationId>,
    pub instances: Vec<EncodedInstance>,
}

/// Encodes every bag, dropping instances whose entities fall outside
/// `max_len` and bags left empty by that.
pub fn encode_bags(bags: &[Bag], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedBag>> {
    let mut out = Vec::with_capacity(bags.len());
    let mut dropped = 0usize;
    for bag in bags {
        let mut instances = Vec::with_capacity(bag.instances.len());
        for inst in &bag.instances {
            match encode_instance(inst, vocab, max_len)? {
                Some(e) => instances.push(e),
                None => dropped += 1,
            }
        }
        if instances.is_empty() {
            log::warn!("bag {} has no encodable instance; skipped", bag.key);
            continue;
        }
        out.push(EncodedBag {
            key: bag.key.clone(),
            label: bag.label,
            gold: bag.gold.clone(),
            instances,
        });
    }
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} instance(s) whose entity was truncated away (max_len={max_len})"
        );
    }
    Ok(out)
}
