use crate::error::{contract, Result};
use crate::stochastic::recenter_probability;

/// How many times the recentering map is applied to classifier outputs.
pub const RECENTER_TIMES: u32 = 2;

const SUM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionSource {
    Classifier,
    Intervention,
}

/// Class probabilities the model is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    /// Softmax output of the investigated classifier (or the intervention).
    pub raw: Vec<f64>,
    /// `raw` recentered twice and renormalized; this is what the model sees.
    pub recentered: Vec<f64>,
    pub source: ConditionSource,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.len() < 2 {
        return Err(contract(format!("{what} needs at least two classes")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(contract(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Applies the recentering map per component, then renormalizes.
pub fn recenter_vector(raw: &[f64], times: u32) -> Result<Vec<f64>> {
    let mapped = raw
        .iter()
        .map(|&p| recenter_probability(p.clamp(0.0, 1.0), times))
        .collect::<Result<Vec<_>>>()?;
    let z: f64 = mapped.iter().sum();
    if z <= 0.0 {
        return Err(contract("recentered probabilities vanish"));
    }
    Ok(mapped.into_iter().map(|v| v / z).collect())
}

impl ConditionVector {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        check_distribution(&raw, "raw probabilities")?;
        let recentered = recenter_vector(&raw, RECENTER_TIMES)?;
        Ok(Self { raw, recentered, source: ConditionSource::Classifier })
    }

    /// Both vectors as stored in a probability cache.
    pub fn from_parts(raw: Vec<f64>, recentered: Vec<f64>) -> Result<Self> {
        check_distribution(&raw, "raw probabilities")?;
        check_distribution(&recentered, "recentered probabilities")?;
        if raw.len() != recentered.len() {
            return Err(contract("raw and recentered vectors differ in length"));
        }
        Ok(Self { raw, recentered, source: ConditionSource::Classifier })
    }

    /// Conditioning given directly in recentered space (raw mirrors it).
    pub fn from_recentered(recentered: Vec<f64>) -> Result<Self> {
        check_distribution(&recentered, "recentered probabilities")?;
        Ok(Self { raw: recentered.clone(), recentered, source: ConditionSource::Classifier })
    }

    /// `do(ξ_c = δ_{c,target})`.
    pub fn intervention(target: usize, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(contract("class count must be at least 2"));
        }
        if target >= class_count {
            return Err(contract(format!("target class {target} out of range for {class_count} classes")));
        }
        let one_hot: Vec<f64> = (0..class_count).map(|c| if c == target { 1.0 } else { 0.0 }).collect();
        let recentered = recenter_vector(&one_hot, RECENTER_TIMES)?;
        Ok(Self { raw: one_hot, recentered, source: ConditionSource::Intervention })
    }

    pub fn class_count(&self) -> usize {
        self.raw.len()
    }

    /// Index of the most probable class under the raw probabilities.
    pub fn argmax(&self) -> usize {
        argmax(&self.raw)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interventions_are_fixed_points() {
        let a = ConditionVector::intervention(1, 2).unwrap();
        assert_eq!(a.raw, vec![0.0, 1.0]);
        assert_eq!(a.recentered, a.raw);
        assert_eq!(a.source, ConditionSource::Intervention);
        let b = ConditionVector::intervention(0, 2).unwrap();
        assert_eq!(b.raw, vec![1.0, 0.0]);
        assert_eq!(b.recentered, b.raw);
        assert!(ConditionVector::intervention(2, 2).is_err());
    }

    #[test]
    fn binary_recentering_needs_no_renormalization() {
        // f(p) + f(1 - p) = 1 for the recentering map
        for &p in &[0.01, 0.2, 0.5, 0.93, 0.999] {
            let v = ConditionVector::from_raw(vec![p, 1.0 - p]).unwrap();
            let direct = recenter_probability(p, 2).unwrap();
            assert!((v.recentered[0] - direct).abs() < 1e-12);
            assert_eq!(v.argmax(), if p >= 0.5 { 0 } else { 1 });
        }
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(ConditionVector::from_raw(vec![0.5, 0.6]).is_err());
        assert!(ConditionVector::from_raw(vec![1.0]).is_err());
        assert!(ConditionVector::from_raw(vec![-0.1, 1.1]).is_err());
    }
}
