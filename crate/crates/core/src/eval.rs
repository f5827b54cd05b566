//! Accuracy and consistency of top-1 predictions, and a probe comparing how
//! the two languages interpret shared phrases in gold programs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{pair_consistency, RelevantActionSet};
use crate::error::{Error, Result};
use crate::executor::execute_indexed;
use crate::language::{parse_text, Grammar, Program, Variant};
use crate::model::{ScorerParams, UtteranceScores};
use crate::scene::Example;
use crate::search::{beam_search_with, index_scenes, BeamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// `None` when the beam came back empty.
    pub program: Option<String>,
    pub predictions: Vec<bool>,
    pub correct: Vec<bool>,
}

impl UtteranceRecord {
    pub fn all_correct(&self) -> bool {
        self.correct.iter().all(|&c| c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub consistency: f64,
    pub n_utterances: usize,
    pub n_scenes: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub records: Vec<UtteranceRecord>,
}

impl EvalReport {
    /// Aggregates per-utterance records.
    pub fn from_records(records: Vec<UtteranceRecord>) -> EvalReport {
        let n_scenes: usize = records.iter().map(|r| r.correct.len()).sum();
        let hits = records.iter().flat_map(|r| &r.correct).filter(|&&c| c).count();
        let all = records.iter().filter(|r| r.all_correct()).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        EvalReport {
            accuracy: ratio(hits, n_scenes),
            consistency: ratio(all, records.len()),
            n_utterances: records.len(),
            n_scenes,
            records,
        }
    }

    pub fn without_records(mut self) -> EvalReport {
        self.records.clear();
        self
    }
}

/// Predictions of `program` on every scene of `ex`, with correctness.
pub fn record_for(ex: &Example, program: Option<&Program>) -> UtteranceRecord {
    let scenes = index_scenes(&ex.scenes);
    let predictions: Vec<bool> = scenes.iter().map(|(s, _)| program.is_some_and(|p| execute_indexed(p, s))).collect();
    let correct = predictions.iter().zip(&scenes).map(|(p, (_, d))| p == d).collect();
    UtteranceRecord { id: ex.id.clone(), program: program.map(|p| p.to_string()), predictions, correct }
}

/// Decodes the top-1 program for every utterance and scores it.
pub fn evaluate(params: &ScorerParams, corpus: &[Example], grammar: &Grammar, beam: BeamConfig) -> EvalReport {
    let records = corpus
        .par_iter()
        .map(|ex| {
            let scores = UtteranceScores::new(params, &ex.tokens);
            let b = beam_search_with(params, grammar, &scores, beam);
            record_for(ex, b.best().map(|c| &c.program))
        })
        .collect();
    EvalReport::from_records(records)
}

/// One side of a probe pair: a gold program and the terminals annotated as
/// expressing the shared phrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldReading {
    pub program: String,
    pub relevant: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCase {
    pub name: String,
    pub phrase: String,
    pub x: String,
    pub x_prime: String,
    pub new: (GoldReading, GoldReading),
    pub old: (GoldReading, GoldReading),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub f1_new: f64,
    pub f1_old: f64,
}

fn reading(x: &str, relevant: &[&str]) -> GoldReading {
    GoldReading { program: x.to_string(), relevant: relevant.iter().map(|s| s.to_string()).collect() }
}

/// The two utterance pairs used to motivate the NEW language.
pub fn builtin_probe_cases() -> Vec<ProbeCase> {
    vec![
        ProbeCase {
            name: "x1/x2".into(),
            phrase: "items of at least two different colors".into(),
            x: "There are items of at least two different colors".into(),
            x_prime: "There is a box with items of at least two different colors".into(),
            new: (
                reading("objColorCountGrtEq(2, allObjs)", &["objColorCountGrtEq", "2"]),
                reading("boxCountEq(1, boxFilter(allBoxes, objColorCountGrtEq(2)))", &["objColorCountGrtEq", "2"]),
            ),
            old: (
                reading("objColorCountGrtEq(2, allObjs)", &["objColorCountGrtEq", "2"]),
                reading("boxExists(memberColorCountGrtEq(2, allBoxes))", &["memberColorCountGrtEq", "2"]),
            ),
        },
        ProbeCase {
            name: "x3/x4".into(),
            phrase: "there is a tower".into(),
            x: "There is a tower with exactly one block".into(),
            x_prime: "There is a tower with a black item on the top".into(),
            new: (
                reading("boxExists(boxFilter(allBoxes, objectCountEq(1)))", &["boxExists"]),
                reading("boxExists(boxFilter(allBoxes, black(top)))", &["boxExists"]),
            ),
            old: (
                reading("boxExists(memberObjCountEq(1, allBoxes))", &["boxExists"]),
                reading("objExists(black(top(allObjs)))", &["objExists"]),
            ),
        },
    ]
}

/// Actions of the parsed program whose terminal is one of the annotated names.
fn annotated_actions(grammar: &Grammar, r: &GoldReading) -> Result<RelevantActionSet> {
    let program = parse_text(grammar, &r.program)?;
    let mut out = RelevantActionSet::new();
    for name in &r.relevant {
        let hit = program
            .actions()
            .iter()
            .find(|&&a| grammar.action(a).terminal().is_some_and(|s| s.name() == *name))
            .ok_or_else(|| Error::InvalidArgument(format!("`{name}` does not occur in `{}`", r.program)))?;
        out.insert(*hit);
    }
    Ok(out)
}

fn probe_f1(variant: Variant, pair: &(GoldReading, GoldReading)) -> Result<f64> {
    let g = Grammar::build(variant);
    Ok(pair_consistency(&annotated_actions(&g, &pair.0)?, &annotated_actions(&g, &pair.1)?))
}

pub fn language_consistency_probe(cases: &[ProbeCase]) -> Result<Vec<ProbeResult>> {
    cases
        .iter()
        .map(|c| {
            Ok(ProbeResult {
                name: c.name.clone(),
                f1_new: probe_f1(Variant::New, &c.new)?,
                f1_old: probe_f1(Variant::Old, &c.old)?,
            })
        })
        .collect()
}
