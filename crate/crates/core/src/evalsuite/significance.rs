//! Paired significance testing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::metrics::ScoredPrediction;
use super::{EvalError, Result};

/// Largest discordant count answered with the exact binomial test.
pub const EXACT_LIMIT: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: u64,
    /// A wrong, B right.
    pub c: u64,
    /// Continuity-corrected chi-square statistic, `0` when `b + c = 0`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Two-sided McNemar test from discordant counts.
pub fn mcnemar_counts(b: u64, c: u64) -> McNemar {
    let n = b + c;
    if n == 0 {
        return McNemar { b, c, statistic: 0.0, p_value: 1.0, exact: true };
    }
    let statistic = ((b as f64 - c as f64).abs() - 1.0).powi(2) / n as f64;
    if n <= EXACT_LIMIT {
        let tail: f64 = (0..=b.min(c)).map(|k| binomial(n, k)).sum::<f64>() / 2f64.powi(n as i32);
        McNemar { b, c, statistic, p_value: (2.0 * tail).min(1.0), exact: true }
    } else {
        let chi = ChiSquared::new(1.0).expect("one degree of freedom");
        McNemar { b, c, statistic, p_value: chi.sf(statistic), exact: false }
    }
}

/// Pairs predictions by id; both sets must cover the same ids with the same truths.
pub fn mcnemar(a: &[ScoredPrediction], b: &[ScoredPrediction]) -> Result<McNemar> {
    if a.len() != b.len() {
        return Err(EvalError::InvalidInput(format!("prediction sets differ in size ({} vs {})", a.len(), b.len())));
    }
    let by_id: HashMap<&str, &ScoredPrediction> = b.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != b.len() {
        return Err(EvalError::InvalidInput("duplicate ids in the second prediction set".into()));
    }
    let (mut nb, mut nc) = (0, 0);
    for pa in a {
        let pb = by_id
            .get(pa.id.as_str())
            .ok_or_else(|| EvalError::InvalidInput(format!("id {} missing from the second prediction set", pa.id)))?;
        if pa.truth != pb.truth {
            return Err(EvalError::InvalidInput(format!("id {} has different truths", pa.id)));
        }
        match (pa.is_correct(), pb.is_correct()) {
            (true, false) => nb += 1,
            (false, true) => nc += 1,
            _ => {}
        }
    }
    Ok(mcnemar_counts(nb, nc))
}
