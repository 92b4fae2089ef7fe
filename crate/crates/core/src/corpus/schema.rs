use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{GbreError, Result};

pub type RelationId = usize;

/// Name of the "no relation" label.
pub const NA: &str = "NA";

/// Dense relation-name to id mapping with a designated NA label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSchema {
    names: Vec<String>,
    index: HashMap<String, RelationId>,
    na: RelationId,
}

impl RelationSchema {
    /// Builds a schema from names in id order. `NA` must appear exactly once.
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(GbreError::Data(format!("relation {name:?} listed twice")));
            }
        }
        let na = *index
            .get(NA)
            .ok_or_else(|| GbreError::Data(format!("relation schema has no {NA:?} label")))?;
        Ok(RelationSchema { names, index, na })
    }

    /// Schema containing `NA` (id 0) followed by the other names in first
    /// appearance order.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all = vec![NA.to_string()];
        for n in names {
            if !all.iter().any(|x| x == n) {
                all.push(n.to_string());
            }
        }
        RelationSchema::new(all).expect("NA inserted once")
    }

    /// Reads `name<TAB>id` lines. Ids must be dense from 0.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GbreError::io(path, e))?;
        Self::parse(&text).map_err(|e| GbreError::Data(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, id) = line.rsplit_once('\t').ok_or_else(|| {
                GbreError::Data(format!("line {}: expected name<TAB>id", lineno + 1))
            })?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| GbreError::Data(format!("line {}: bad id {id:?}", lineno + 1)))?;
            pairs.push((id, name.to_string()));
        }
        pairs.sort();
        for (expected, (id, _)) in pairs.iter().enumerate() {
            if *id != expected {
                return Err(GbreError::Data(format!(
                    "relation ids must be dense from 0; missing or duplicate id near {expected}"
                )));
            }
        }
        RelationSchema::new(pairs.into_iter().map(|(_, n)| n).collect())
    }

    pub fn to_tsv(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(id, n)| format!("{n}\t{id}\n"))
            .collect()
    }

    pub fn id(&self, name: &str) -> Option<RelationId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: RelationId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn na(&self) -> RelationId {
        self.na
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
