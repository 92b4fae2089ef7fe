use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Instance, RelationId, RelationSchema};
use crate::error::{GbreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagMode {
    /// Group by (head, tail, relation).
    Train,
    /// Group by (head, tail); the bag keeps the set of gold relations.
    Eval,
}

/// Identity of a bag. `relation` is set only for training bags.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BagKey {
    pub head: String,
    pub tail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl std::fmt::Display for BagKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.relation {
            Some(r) => write!(f, "{}\t{}\t{}", self.head, self.tail, r),
            None => write!(f, "{}\t{}", self.head, self.tail),
        }
    }
}

/// Sentences sharing an entity pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub key: BagKey,
    pub instances: Vec<Instance>,
    /// Training target. For evaluation bags, the first non-NA gold relation
    /// (or NA when there is none).
    pub label: RelationId,
    /// Distinct relations of the member instances, in first-seen order.
    pub gold: Vec<RelationId>,
}

/// Groups instances into bags, preserving input order both across bags
/// (first appearance) and within a bag. Bags longer than `max_bag_size`
/// keep their earliest instances.
pub fn build_bags(
    instances: &[Instance],
    schema: &RelationSchema,
    mode: BagMode,
    max_bag_size: usize,
) -> Result<Vec<Bag>> {
    if max_bag_size == 0 {
        return Err(GbreError::Config("max_bag_size must be at least 1".into()));
    }
    let mut order: Vec<Bag> = Vec::new();
    let mut index: HashMap<BagKey, usize> = HashMap::new();
    let mut truncated = 0usize;
    for inst in instances {
        let rel = schema
            .id(&inst.relation)
            .ok_or_else(|| GbreError::Data(format!("unknown relation {:?}", inst.relation)))?;
        let key = BagKey {
            head: inst.head.name.clone(),
            tail: inst.tail.name.clone(),
            relation: (mode == BagMode::Train).then(|| inst.relation.clone()),
        };
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            order.push(Bag {
                key,
                instances: Vec::new(),
                label: rel,
                gold: Vec::new(),
            });
            order.len() - 1
        });
        let bag = &mut order[slot];
        if !bag.gold.contains(&rel) {
            bag.gold.push(rel);
        }
        if bag.instances.len() < max_bag_size {
            bag.instances.push(inst.clone());
        } else {
            truncated += 1;
        }
    }
    if truncated > 0 {
        log::info!("dropped {truncated} instance(s) beyond max_bag_size={max_bag_size}");
    }
    let na = schema.na();
    for bag in &mut order {
        bag.label = bag.gold.iter().copied().find(|&r| r != na).unwrap_or(na);
    }
    Ok(order)
}
