use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RelationSchema;
use crate::error::{GbreError, Result};

/// A named entity mention covering a half-open token range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub name: String,
    pub span: Range<usize>,
}

/// One sentence mentioning a head/tail entity pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head: Entity,
    pub tail: Entity,
    pub relation: String,
}

impl Instance {
    /// Entity-pair identity shared by all sentences of a bag.
    pub fn pair_key(&self) -> (String, String) {
        (self.head.name.clone(), self.tail.name.clone())
    }

    pub fn validate(&self, schema: Option<&RelationSchema>) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("sentence has no tokens".into());
        }
        for (role, e) in [("head", &self.head), ("tail", &self.tail)] {
            if e.name.trim().is_empty() {
                return Err(format!("{role} entity has an empty name"));
            }
            if e.span.start >= e.span.end || e.span.end > n {
                return Err(format!(
                    "{role} span {:?} outside sentence of {n} tokens",
                    e.span
                ));
            }
        }
        let (h, t) = (&self.head.span, &self.tail.span);
        if h.start < t.end && t.start < h.end {
            return Err(format!("head span {h:?} overlaps tail span {t:?}"));
        }
        if let Some(schema) = schema {
            if schema.id(&self.relation).is_none() {
                return Err(format!("unknown relation {:?}", self.relation));
            }
        }
        Ok(())
    }

    /// Serializes into the line-delimited record layout accepted by
    /// [`parse_instances`] (token form, token-index spans).
    pub fn to_record(&self) -> Record {
        Record {
            tokens: Some(self.tokens.clone()),
            text: None,
            h: RawEntity {
                name: self.head.name.clone(),
                pos: Some([self.head.span.start, self.head.span.end]),
            },
            t: RawEntity {
                name: self.tail.name.clone(),
                pos: Some([self.tail.span.start, self.tail.span.end]),
            },
            relation: Some(self.relation.clone()),
        }
    }
}

/// On-disk record. `pos` is a half-open token range when `tokens` is
/// given and a half-open character range into `text` otherwise; without
/// `pos` the entity name is located in the tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    #[serde(alias = "token", skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(alias = "sentence", skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub h: RawEntity,
    pub t: RawEntity,
    pub relation: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawEntity {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos: Option<[usize; 2]>,
}

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn locate(tokens: &[String], name: &str) -> Option<Range<usize>> {
    let needle: Vec<String> = name.split_whitespace().map(str::to_lowercase).collect();
    if needle.is_empty() || needle.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - needle.len())
        .find(|&s| {
            tokens[s..s + needle.len()]
                .iter()
                .zip(&needle)
                .all(|(t, n)| t.to_lowercase() == *n)
        })
        .map(|s| s..s + needle.len())
}

fn char_span_to_tokens(text: &str, span: [usize; 2]) -> Option<Range<usize>> {
    let mut offsets = Vec::new();
    let mut start = None;
    let chars = text.chars().chain(std::iter::once(' '));
    for (ci, c) in chars.enumerate() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                offsets.push((s, ci));
            }
        } else if start.is_none() {
            start = Some(ci);
        }
    }
    let mut hits = offsets
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < span[1] && span[0] < e)
        .map(|(i, _)| i);
    let first = hits.next()?;
    let last = hits.next_back().unwrap_or(first);
    Some(first..last + 1)
}

fn record_to_instance(rec: Record) -> std::result::Result<Instance, String> {
    let relation = rec.relation.ok_or("missing field `relation`")?;
    let (tokens, head_span, tail_span) = match (rec.tokens, rec.text) {
        (Some(tokens), _) => {
            let span = |e: &RawEntity| -> std::result::Result<Range<usize>, String> {
                match e.pos {
                    Some([s, t]) => Ok(s..t),
                    None => locate(&tokens, &e.name)
                        .ok_or_else(|| format!("entity {:?} not found in tokens", e.name)),
                }
            };
            let (h, t) = (span(&rec.h)?, span(&rec.t)?);
            (tokens, h, t)
        }
        (None, Some(text)) => {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            let span = |e: &RawEntity| -> std::result::Result<Range<usize>, String> {
                match e.pos {
                    Some(p) => char_span_to_tokens(&text, p).ok_or_else(|| {
                        format!("character span {p:?} of {:?} covers no token", e.name)
                    }),
                    None => locate(&tokens, &e.name)
                        .ok_or_else(|| format!("entity {:?} not found in text", e.name)),
                }
            };
            let (h, t) = (span(&rec.h)?, span(&rec.t)?);
            (tokens, h, t)
        }
        (None, None) => return Err("record needs `tokens` or `text`".into()),
    };
    Ok(Instance {
        tokens,
        head: Entity {
            name: rec.h.name,
            span: head_span,
        },
        tail: Entity {
            name: rec.t.name,
            span: tail_span,
        },
        relation,
    })
}

/// Parses line-delimited JSON records. Returns every valid instance and one
/// diagnostic per rejected line (1-based line numbers). Blank lines are
/// ignored.
pub fn parse_instances<R: BufRead>(
    reader: R,
    schema: Option<&RelationSchema>,
) -> Result<(Vec<Instance>, Vec<Diagnostic>)> {
    parse_lines(reader, schema, None)
}

fn parse_lines<R: BufRead>(
    reader: R,
    schema: Option<&RelationSchema>,
    default_relation: Option<&str>,
) -> Result<(Vec<Instance>, Vec<Diagnostic>)> {
    let mut instances = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line =
            line.map_err(|e| GbreError::Data(format!("read failure at line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Record>(&line)
            .map_err(|e| e.to_string())
            .map(|mut rec| {
                if rec.relation.is_none() {
                    rec.relation = default_relation.map(str::to_string);
                }
                rec
            })
            .and_then(record_to_instance)
            .and_then(|inst| inst.validate(schema).map(|_| inst));
        match parsed {
            Ok(inst) => instances.push(inst),
            Err(message) => diagnostics.push(Diagnostic {
                line: i + 1,
                message,
            }),
        }
    }
    Ok((instances, diagnostics))
}

fn load(
    path: &Path,
    schema: Option<&RelationSchema>,
    default_relation: Option<&str>,
) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| GbreError::io(path, e))?;
    let (instances, diagnostics) = parse_lines(BufReader::new(file), schema, default_relation)?;
    for d in &diagnostics {
        log::error!("{}: {d}", path.display());
    }
    if let Some(first) = diagnostics.first() {
        return Err(GbreError::Records {
            path: path.display().to_string(),
            count: diagnostics.len(),
            first: first.to_string(),
        });
    }
    if instances.is_empty() {
        log::warn!("{}: no instances", path.display());
    }
    Ok(instances)
}

/// Loads an instances file, failing if any line is malformed.
pub fn load_instances(
    path: impl AsRef<Path>,
    schema: Option<&RelationSchema>,
) -> Result<Vec<Instance>> {
    load(path.as_ref(), schema, None)
}

/// As [`load_instances`], but records without a relation are read as NA.
pub fn load_unlabelled_instances(
    path: impl AsRef<Path>,
    schema: Option<&RelationSchema>,
) -> Result<Vec<Instance>> {
    load(path.as_ref(), schema, Some(super::NA))
}
