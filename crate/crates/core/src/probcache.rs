//! Classifier probabilities stored ahead of VAEX training.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::model::{recenter_vector, ConditionVector, RECENTER_TIMES};

const HEADER_PREFIX: &str = "#vaex-probcache v1 C=";

/// Rounds to the printed precision so that writing and re-reading is exact.
fn quantize(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbCacheEntry {
    pub sample_id: String,
    pub raw_probs: Vec<f64>,
    pub recentered_probs: Vec<f64>,
}

impl ProbCacheEntry {
    /// Recenters the raw probabilities, then rounds both vectors to six
    /// decimals.
    pub fn from_raw(sample_id: &str, raw: &[f64]) -> Result<Self> {
        if sample_id.is_empty() || sample_id.contains(['\t', '\n']) {
            return Err(contract(format!("invalid sample id {sample_id:?}")));
        }
        let cv = ConditionVector::from_raw(raw.to_vec())?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            raw_probs: cv.raw.iter().map(|&v| quantize(v)).collect(),
            recentered_probs: cv.recentered.iter().map(|&v| quantize(v)).collect(),
        })
    }

    pub fn condition(&self) -> Result<ConditionVector> {
        ConditionVector::from_parts(self.raw_probs.clone(), self.recentered_probs.clone())
    }
}

/// Entries sorted by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbCache {
    class_count: usize,
    entries: Vec<ProbCacheEntry>,
    index: HashMap<String, usize>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

impl ProbCache {
    pub fn new(class_count: usize, mut entries: Vec<ProbCacheEntry>) -> Result<Self> {
        if class_count < 2 {
            return Err(contract("class count must be at least 2"));
        }
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.raw_probs.len() != class_count || e.recentered_probs.len() != class_count {
                return Err(contract(format!("entry {} does not have {class_count} classes", e.sample_id)));
            }
            if index.insert(e.sample_id.clone(), i).is_some() {
                return Err(contract(format!("duplicate sample id {}", e.sample_id)));
            }
        }
        Ok(Self { class_count, entries, index })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ProbCacheEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&ProbCacheEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER_PREFIX}{}\n", self.class_count);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.sample_id, join(&e.raw_probs), join(&e.recentered_probs)));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty probability cache".into()))?;
        let class_count: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad probability cache header {header:?}")))?;
        let parse_vec = |field: &str, line: usize| -> Result<Vec<f64>> {
            field
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Format(format!("cache line {line}: bad probability {v:?}"))))
                .collect()
        };
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!("cache line {}: expected three fields", i + 2)));
            }
            entries.push(ProbCacheEntry {
                sample_id: fields[0].to_string(),
                raw_probs: parse_vec(fields[1], i + 2)?,
                recentered_probs: parse_vec(fields[2], i + 2)?,
            });
        }
        Self::new(class_count, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Recentered column as a function of the raw one (for auditing a cache).
pub fn expected_recentered(raw: &[f64]) -> Result<Vec<f64>> {
    recenter_vector(raw, RECENTER_TIMES)
}
