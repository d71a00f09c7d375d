//! Assignment of parameter names to residual-block depths.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_PLACEHOLDER: &str = "{d}";

/// What to do with parameters that live outside every residual block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBlockPolicy {
    /// Scale by the schedule's intercept.
    #[default]
    Alpha,
    One,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    /// Literal text around a single `{d}` placeholder, e.g. `.layer{d}.`.
    pub block_pattern: String,
    pub num_blocks: usize,
    /// Restrict scaling to keys with one of these prefixes. Empty means all keys.
    #[serde(default)]
    pub include_prefixes: Vec<String>,
    #[serde(default)]
    pub out_of_block_policy: OutOfBlockPolicy,
}

impl TopologyConfig {
    pub fn new(block_pattern: impl Into<String>, num_blocks: usize) -> Self {
        TopologyConfig {
            block_pattern: block_pattern.into(),
            num_blocks,
            include_prefixes: Vec::new(),
            out_of_block_policy: OutOfBlockPolicy::Alpha,
        }
    }

    pub fn with_prefixes(mut self, prefixes: &[&str]) -> Self {
        self.include_prefixes = prefixes.iter().map(|p| p.to_string()).collect();
        self
    }

    pub fn with_policy(mut self, policy: OutOfBlockPolicy) -> Self {
        self.out_of_block_policy = policy;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TopologyConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.block_pattern.matches(DEPTH_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::InvalidConfig(format!(
                "block_pattern {:?} must contain {DEPTH_PLACEHOLDER} exactly once",
                self.block_pattern
            )));
        }
        if self.num_blocks < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_blocks must be at least 2, got {}",
                self.num_blocks
            )));
        }
        Ok(())
    }

    fn split_pattern(&self) -> (&str, &str) {
        self.block_pattern
            .split_once(DEPTH_PLACEHOLDER)
            .expect("validated pattern")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    /// 0-based block depth.
    Block(usize),
    OutOfBlock,
    /// Left untouched by every scaling operation.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    assignment: BTreeMap<String, Assignment>,
    num_blocks: usize,
    out_of_block_policy: OutOfBlockPolicy,
}

impl DepthMap {
    /// Build directly from assignments. Every `Block(d)` must satisfy `d < num_blocks`.
    pub fn from_assignments(
        assignment: BTreeMap<String, Assignment>,
        num_blocks: usize,
        out_of_block_policy: OutOfBlockPolicy,
    ) -> Result<Self> {
        if num_blocks < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_blocks must be at least 2, got {num_blocks}"
            )));
        }
        for (key, a) in &assignment {
            if let Assignment::Block(d) = a {
                if *d >= num_blocks {
                    return Err(Error::DepthOutOfRange {
                        key: key.clone(),
                        depth: d.to_string(),
                        num_blocks,
                    });
                }
            }
        }
        Ok(DepthMap {
            assignment,
            num_blocks,
            out_of_block_policy,
        })
    }

    pub fn get(&self, key: &str) -> Option<Assignment> {
        self.assignment.get(key).copied()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn out_of_block_policy(&self) -> OutOfBlockPolicy {
        self.out_of_block_policy
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Assignment)> {
        self.assignment.iter().map(|(k, a)| (k.as_str(), *a))
    }
}

/// Classify every key by the block pattern and prefix filter.
pub fn infer_depths<S: AsRef<str>>(keys: &[S], config: &TopologyConfig) -> Result<DepthMap> {
    config.validate()?;
    if keys.is_empty() {
        return Err(Error::Empty("no parameter names to classify"));
    }
    let (before, after) = config.split_pattern();
    let mut assignment = BTreeMap::new();
    for key in keys {
        let key = key.as_ref();
        let included = config.include_prefixes.is_empty()
            || config.include_prefixes.iter().any(|p| key.starts_with(p.as_str()));
        let a = if !included {
            Assignment::Excluded
        } else {
            match find_depth(key, before, after)? {
                None => Assignment::OutOfBlock,
                Some(digits) => {
                    let depth = digits
                        .parse::<usize>()
                        .ok()
                        .filter(|d| *d < config.num_blocks)
                        .ok_or_else(|| Error::DepthOutOfRange {
                            key: key.to_string(),
                            depth: digits.to_string(),
                            num_blocks: config.num_blocks,
                        })?;
                    Assignment::Block(depth)
                }
            }
        };
        assignment.insert(key.to_string(), a);
    }
    DepthMap::from_assignments(assignment, config.num_blocks, config.out_of_block_policy)
}

/// Digits matched by `before{d}after` in `key`, if the pattern occurs exactly once.
fn find_depth<'k>(key: &'k str, before: &str, after: &str) -> Result<Option<&'k str>> {
    let mut found = None;
    // Candidate starts may overlap, so scan every position rather than using match_indices.
    let starts = (0..=key.len().saturating_sub(before.len()))
        .filter(|&i| key.is_char_boundary(i) && key[i..].starts_with(before));
    for start in starts {
        let rest = &key[start + before.len()..];
        let n = rest.bytes().take_while(u8::is_ascii_digit).count();
        if n == 0 || !rest[n..].starts_with(after) {
            continue;
        }
        if found.is_some() {
            return Err(Error::AmbiguousDepth {
                key: key.to_string(),
            });
        }
        found = Some(&rest[..n]);
    }
    Ok(found)
}
