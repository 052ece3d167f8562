use rand::Rng;
use serde::{Deserialize, Serialize};

use super::case::{CaseRecord, Split};
use crate::error::{Error, Result};

/// Split-local set of reference cases, normally all free of findings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePool {
    pub split: Split,
    pub members: Vec<String>,
    pub contamination_ratio: f64,
    /// Ids of abnormal members mixed in by [`contaminate_pool`].
    #[serde(default)]
    pub contaminants: Vec<String>,
}

impl ReferencePool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Uniform draw of a member id.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> Result<&'a str> {
        if self.members.is_empty() {
            return Err(Error::EmptyPool(self.split.to_string()));
        }
        Ok(&self.members[rng.gen_range(0..self.members.len())])
    }

    /// First `n` members (the pool-size study truncation).
    pub fn truncated(&self, n: usize) -> Result<ReferencePool> {
        if n == 0 {
            return Err(Error::Invalid("pool size must be at least 1".into()));
        }
        let members: Vec<String> = self.members.iter().take(n).cloned().collect();
        let contaminants = self.contaminants.iter().filter(|c| members.contains(c)).cloned().collect();
        Ok(ReferencePool {
            split: self.split,
            members,
            contamination_ratio: self.contamination_ratio,
            contaminants,
        })
    }
}

/// Up to `max_size` normal cases of `split`, ordered by id.
pub fn build_reference_pool(cases: &[CaseRecord], split: Split, max_size: usize) -> Result<ReferencePool> {
    let mut ids: Vec<&str> = cases
        .iter()
        .filter(|c| c.split == split && c.is_normal())
        .map(|c| c.id.as_str())
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyPool(split.to_string()));
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ReferencePool {
        split,
        members: ids.into_iter().take(max_size).map(String::from).collect(),
        contamination_ratio: 0.0,
        contaminants: Vec::new(),
    })
}

/// Replaces the last `⌈ratio·N⌉` members with abnormal cases of the same
/// split, taken in id order.
pub fn contaminate_pool(pool: &ReferencePool, abnormal: &[CaseRecord], ratio: f64) -> Result<ReferencePool> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("contamination ratio {ratio} outside [0, 1)")));
    }
    let n = pool.members.len();
    let k = (ratio * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut candidates: Vec<&str> = abnormal
        .iter()
        .filter(|c| c.split == pool.split && !c.is_normal())
        .map(|c| c.id.as_str())
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.len() < k {
        return Err(Error::Invalid(format!(
            "contamination needs {k} abnormal {} cases, only {} available",
            pool.split,
            candidates.len()
        )));
    }
    let mut members = pool.members[..n - k].to_vec();
    let contaminants: Vec<String> = candidates[..k].iter().map(|s| s.to_string()).collect();
    members.extend(contaminants.iter().cloned());
    Ok(ReferencePool {
        split: pool.split,
        members,
        contamination_ratio: ratio,
        contaminants,
    })
}
