//! Relevant-action extraction and the F1-based consistency reward between
//! programs of utterances that share a phrase.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{ActionId, Program};

/// Default attention-mass threshold for an action to count as relevant.
pub const DEFAULT_TAU: f64 = 0.6;

/// Tolerance on the neighbor weights summing to one.
pub const WEIGHT_TOLERANCE: f64 = 1e-6;

/// Inclusive token span `[start, end]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
}

impl PhraseSpan {
    pub fn new(start: usize, end: usize) -> PhraseSpan {
        PhraseSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check(&self, n_tokens: usize) -> Result<()> {
        if self.start > self.end || self.end >= n_tokens {
            return Err(Error::SpanOutOfRange { start: self.start, end: self.end, len: n_tokens });
        }
        Ok(())
    }
}

impl From<[usize; 2]> for PhraseSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        PhraseSpan { start, end }
    }
}

impl From<PhraseSpan> for [usize; 2] {
    fn from(s: PhraseSpan) -> Self {
        [s.start, s.end]
    }
}

pub type RelevantActionSet = BTreeSet<ActionId>;

/// Distinct actions of `program` whose attention mass inside `span` is at
/// least `tau`. `attention` holds one row per program step.
pub fn relevant_actions(
    attention: &[Vec<f64>],
    program: &Program,
    span: PhraseSpan,
    tau: f64,
) -> Result<RelevantActionSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    if attention.len() != program.len() {
        return Err(Error::InvalidArgument(format!(
            "{} attention rows for a {}-action program",
            attention.len(),
            program.len()
        )));
    }
    let mut out = RelevantActionSet::new();
    for (row, &a) in attention.iter().zip(program.actions()) {
        span.check(row.len())?;
        let mass: f64 = row[span.start..=span.end].iter().sum();
        if mass >= tau {
            out.insert(a);
        }
    }
    Ok(out)
}

/// F1 of `a` against `b`. Two empty sets score 0: an ungrounded phrase
/// earns nothing.
pub fn pair_consistency(a: &RelevantActionSet, b: &RelevantActionSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let common = a.intersection(b).count() as f64;
    2.0 * common / (a.len() + b.len()) as f64
}

/// One correct neighbor program with its renormalized weight and attention.
#[derive(Clone, Debug)]
pub struct Neighbor<'a> {
    pub program: &'a Program,
    pub attention: &'a [Vec<f64>],
    pub weight: f64,
}

/// Weighted F1 of `z`'s relevant actions for `span` against each neighbor's
/// relevant actions for `neighbor_span`. An empty neighbor list yields 0.
pub fn consistency_reward(
    program: &Program,
    attention: &[Vec<f64>],
    span: PhraseSpan,
    neighbors: &[Neighbor<'_>],
    neighbor_span: PhraseSpan,
    tau: f64,
) -> Result<f64> {
    if neighbors.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = neighbors.iter().map(|n| n.weight).sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE || neighbors.iter().any(|n| n.weight < 0.0) {
        return Err(Error::InvalidArgument(format!("neighbor weights must be a distribution, they sum to {total}")));
    }
    let own = relevant_actions(attention, program, span, tau)?;
    let mut c = 0.0;
    for n in neighbors {
        let theirs = relevant_actions(n.attention, n.program, neighbor_span, tau)?;
        c += n.weight * pair_consistency(&own, &theirs);
    }
    Ok(c.clamp(0.0, 1.0))
}

/// Weighted mean of per-phrase rewards given as `(reward, weight)`.
pub fn multi_phrase_reward(parts: &[(f64, f64)]) -> Result<f64> {
    if parts.iter().any(|&(_, w)| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("phrase weights must be non-negative".into()));
    }
    let total: f64 = parts.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("phrase weights are all zero".into()));
    }
    Ok(parts.iter().map(|&(r, w)| r * w).sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{parse_text, Grammar, Variant};

    fn set(ids: &[u16]) -> RelevantActionSet {
        ids.iter().map(|&i| ActionId(i)).collect()
    }

    #[test]
    fn f1_examples() {
        let yab = set(&[15, 3, 5]);
        assert_eq!(pair_consistency(&yab, &yab), 1.0);
        assert!((pair_consistency(&yab, &set(&[15, 5])) - 0.8).abs() < 1e-12);
        assert_eq!(pair_consistency(&yab, &set(&[1, 2])), 0.0);
        assert_eq!(pair_consistency(&set(&[]), &set(&[])), 0.0);
        assert_eq!(pair_consistency(&set(&[]), &yab), 0.0);
    }

    #[test]
    fn relevance_threshold() {
        let g = Grammar::build(Variant::New);
        let p = parse_text(&g, "boxExists(allBoxes)").unwrap();
        let row = vec![0.1, 0.2, 0.5, 0.2];
        let att = vec![row.clone(), row.clone(), row];
        let got = relevant_actions(&att, &p, PhraseSpan::new(2, 3), DEFAULT_TAU).unwrap();
        assert_eq!(got.len(), 3);
        assert!(relevant_actions(&att, &p, PhraseSpan::new(0, 1), DEFAULT_TAU).unwrap().is_empty());
        let all = relevant_actions(&att, &p, PhraseSpan::new(0, 3), 1.0).unwrap();
        assert_eq!(all, p.actions().iter().copied().collect());

        let uniform = vec![vec![0.1; 10]; 3];
        assert!(relevant_actions(&uniform, &p, PhraseSpan::new(4, 6), DEFAULT_TAU).unwrap().is_empty());
        assert!(matches!(
            relevant_actions(&att, &p, PhraseSpan::new(2, 4), DEFAULT_TAU),
            Err(Error::SpanOutOfRange { start: 2, end: 4, len: 4 })
        ));
        assert!(relevant_actions(&att, &p, PhraseSpan::new(3, 2), DEFAULT_TAU).is_err());
    }

    #[test]
    fn reward_examples() {
        let g = Grammar::build(Variant::New);
        let z = parse_text(&g, "objExists(yellow(allObjs))").unwrap();
        let same = z.clone();
        let half = parse_text(&g, "objExists(blue(allObjs))").unwrap();
        // z attends to token 0 everywhere; every action is relevant
        let focus = vec![vec![1.0, 0.0]; z.len()];
        let span = PhraseSpan::new(0, 0);
        let n1 = Neighbor { program: &same, attention: &focus, weight: 0.6 };
        // blue program: only the actions it shares with z are relevant
        let mixed: Vec<Vec<f64>> = half
            .actions()
            .iter()
            .map(|a| if z.actions().contains(a) { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let n2 = Neighbor { program: &half, attention: &mixed, weight: 0.4 };
        let shared = half.actions().iter().filter(|a| z.actions().contains(a)).count() as f64;
        assert_eq!(shared, 4.0);
        let s2 = 2.0 * shared / (z.len() as f64 + shared);
        let c = consistency_reward(&z, &focus, span, &[n1.clone(), n2.clone()], span, DEFAULT_TAU).unwrap();
        assert!((c - (0.6 + 0.4 * s2)).abs() < 1e-12);
        let c_rev = consistency_reward(&z, &focus, span, &[n2.clone(), n1.clone()], span, DEFAULT_TAU).unwrap();
        assert!((c - c_rev).abs() < 1e-12);
        assert_eq!(consistency_reward(&z, &focus, span, &[], span, DEFAULT_TAU).unwrap(), 0.0);
        let bad = Neighbor { weight: 0.5, ..n1 };
        assert!(consistency_reward(&z, &focus, span, &[bad], span, DEFAULT_TAU).is_err());
    }

    #[test]
    fn multi_phrase_examples() {
        assert_eq!(multi_phrase_reward(&[(0.3, 2.0)]).unwrap(), 0.3);
        assert_eq!(multi_phrase_reward(&[(0.2, 1.0), (0.8, 1.0)]).unwrap(), 0.5);
        assert_eq!(multi_phrase_reward(&[(0.7, 1.0), (0.1, 0.0)]).unwrap(), 0.7);
        assert!(multi_phrase_reward(&[(0.7, 0.0)]).is_err());
        assert!(multi_phrase_reward(&[]).is_err());
    }
}
