//! Accuracy and equal error rate.

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::dataio::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub id: String,
    /// Probability of Fake.
    pub score: f64,
    pub decision: Label,
    pub truth: Label,
}

impl ScoredPrediction {
    pub fn is_correct(&self) -> bool {
        self.decision == self.truth
    }
}

/// Decision implied by a score alone; a score of exactly 0.5 is Real.
pub fn decision_from_score(score: f64) -> Label {
    if score > 0.5 {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Percentage of correct decisions.
pub fn accuracy(preds: &[ScoredPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(EvalError::InvalidInput("no predictions".into()));
    }
    Ok(100.0 * preds.iter().filter(|p| p.is_correct()).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate of Fake-probability scores.
///
/// Thresholds sweep every distinct score plus ±∞. At threshold `t`, a Real
/// scored `≥ t` is a false accept and a Fake scored `< t` a false reject.
/// The EER is read off the first sweep interval where FAR − FRR changes
/// sign, interpolating linearly inside it.
pub fn compute_eer(scores: &[(f64, Label)]) -> Result<Eer> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(EvalError::InvalidInput(format!("non-finite score {s}")));
    }
    let mut real: Vec<f64> = scores.iter().filter(|(_, l)| *l == Label::Real).map(|(s, _)| *s).collect();
    let mut fake: Vec<f64> = scores.iter().filter(|(_, l)| *l == Label::Fake).map(|(s, _)| *s).collect();
    if real.is_empty() || fake.is_empty() {
        return Err(EvalError::InvalidInput("EER needs at least one Real and one Fake score".into()));
    }
    real.sort_by(f64::total_cmp);
    fake.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = real.iter().chain(&fake).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    // running counts of Real and Fake scores strictly below the threshold
    let (mut ri, mut fi) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        while ri < real.len() && real[ri] < t {
            ri += 1;
        }
        while fi < fake.len() && fake[fi] < t {
            fi += 1;
        }
        let far = (real.len() - ri) as f64 / nr;
        let frr = fi as f64 / nf;
        let diff = far - frr;
        if diff <= 0.0 {
            return Ok(match prev {
                Some((pt, pfar, pfrr)) if diff < 0.0 => {
                    let pdiff = pfar - pfrr;
                    let a = pdiff / (pdiff - diff);
                    let threshold = match (pt.is_finite(), t.is_finite()) {
                        (true, true) => pt + a * (t - pt),
                        (true, false) => pt,
                        _ => t,
                    };
                    Eer { eer: 100.0 * (pfar + a * (far - pfar)), threshold }
                }
                _ => Eer { eer: 100.0 * far, threshold: t },
            });
        }
        prev = Some((t, far, frr));
    }
    unreachable!("FAR − FRR is −1 at +∞")
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, Real};

    #[test]
    fn perfect_and_inverted() {
        let e = compute_eer(&[(0.1, Real), (0.2, Real), (0.8, Fake), (0.9, Fake)]).unwrap();
        assert_eq!(e.eer, 0.0);
        assert_eq!(compute_eer(&[(0.9, Real), (0.1, Fake)]).unwrap().eer, 100.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(compute_eer(&[(0.3, Real), (0.4, Real)]).is_err());
    }

    #[test]
    fn exact_and_interpolated_crossings() {
        let e = compute_eer(&[(0.2, Real), (0.6, Real), (0.4, Fake), (0.8, Fake)]).unwrap();
        assert_eq!((e.eer, e.threshold), (50.0, 0.6));
        // (FAR, FRR) is (1/3, 0) at 0.6 and (1/3, 1) at 0.7
        let e = compute_eer(&[(0.3, Real), (0.5, Real), (0.7, Real), (0.6, Fake)]).unwrap();
        assert!((e.eer - 100.0 / 3.0).abs() < 1e-12);
        assert!((e.threshold - (0.6 + 0.1 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn tie_rule_for_decisions() {
        assert_eq!(decision_from_score(0.5), Real);
        assert_eq!(decision_from_score(0.5000001), Fake);
    }
}
