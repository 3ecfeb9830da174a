use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub const HEADER: &'static str = "#vaex-split v1";

    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(contract(format!("unknown split `{other}`"))),
        }
    }

    /// `id<TAB>part` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&str, &str)> = Vec::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            rows.extend(ids.iter().map(|id| (id.as_str(), name)));
        }
        rows.sort();
        let mut s = format!("{}\n", Self::HEADER);
        for (id, name) in rows {
            s.push_str(&format!("{id}\t{name}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(Error::Format(format!("split file lacks the `{}` header", Self::HEADER)));
        }
        let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, part) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("split line {}: expected `id<TAB>part`", i + 2)))?;
            match part.trim() {
                "train" => split.train.push(id.to_string()),
                "val" => split.val.push(id.to_string()),
                "test" => split.test.push(id.to_string()),
                other => return Err(Error::Format(format!("split line {}: unknown part `{other}`", i + 2))),
            }
        }
        Ok(split)
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified train/val/test split. Each label's ids are shuffled with a
/// seeded generator and apportioned separately; each list is sorted.
pub fn split_dataset(ids: &[String], labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if ids.len() != labels.len() {
        return Err(contract("ids and labels differ in length"));
    }
    if fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(contract("split fractions must be nonnegative"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract("split fractions must sum to 1"));
    }
    let mut by_label: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, &l) in ids.iter().zip(labels) {
        by_label.entry(l).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<String>; 3] = Default::default();
    for (_, mut group) in by_label {
        group.sort();
        group.shuffle(&mut rng);
        let counts = apportion(group.len(), &fractions);
        let mut it = group.into_iter();
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(c));
        }
    }
    for p in &mut parts {
        p.sort();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}
