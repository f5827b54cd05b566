//! Related-utterance pairs from hand-picked sets of equivalent phrases.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::PhraseSpan;
use crate::error::{Error, Result};
use crate::generator::mix_seed;
use crate::scene::{Color, Example, Shape};

pub const NUMBERS: std::ops::RangeInclusive<u8> = 1..=9;

/// One phrase pattern belonging to an equivalence set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseTemplate {
    pub set: u8,
    pub pattern: &'static str,
}

/// The eleven sets of equivalent phrases, one entry per pattern.
pub fn builtin_templates() -> Vec<PhraseTemplate> {
    let sets: [&[&'static str]; 11] = [
        &["COLOR block at the base", "the base is COLOR"],
        &["COLOR block at the top", "the top is COLOR"],
        &["COLOR1 object above a COLOR2 object"],
        &["COLOR1 block on a COLOR2 block", "COLOR1 block over a COLOR2 block"],
        &["a COLOR tower"],
        &["there is one tower", "there is only one tower", "there is one box", "there is only one box"],
        &["there are exactly NUMBER towers", "there are exactly NUMBER boxes"],
        &["NUMBER different colors"],
        &["with NUMBER COLOR items", "with NUMBER COLOR blocks", "with NUMBER COLOR objects"],
        &["at least NUMBER COLOR items", "at least NUMBER COLOR blocks", "at least NUMBER COLOR objects"],
        &[
            "with NUMBER COLOR SHAPE",
            "are NUMBER COLOR SHAPE",
            "with only NUMBER COLOR SHAPE",
            "are only NUMBER COLOR SHAPE",
        ],
    ];
    sets.iter()
        .enumerate()
        .flat_map(|(i, pats)| pats.iter().map(move |&pattern| PhraseTemplate { set: i as u8 + 1, pattern }))
        .collect()
}

/// A phrase with every placeholder replaced. Phrases with the same `set` and
/// `bindings` are interchangeable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundedPhrase {
    pub set: u8,
    pub tokens: Vec<String>,
    pub bindings: BTreeMap<String, String>,
}

impl GroundedPhrase {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn group(&self) -> GroupKey {
        GroupKey { set: self.set, bindings: self.bindings.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub set: u8,
    pub bindings: BTreeMap<String, String>,
}

impl GroupKey {
    fn describe(&self) -> String {
        let b: Vec<String> = self.bindings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("set {} [{}]", self.set, b.join(","))
    }

    /// Stable across runs and platforms.
    fn salt(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Surface forms of a shape: canonical name plus its plural.
fn shape_forms(s: Shape) -> [String; 2] {
    [s.name().to_string(), format!("{}s", s.name())]
}

/// Cartesian instantiation of every placeholder, grouped by set and binding.
pub fn ground_templates(templates: &[PhraseTemplate]) -> BTreeMap<GroupKey, Vec<GroundedPhrase>> {
    let mut groups: BTreeMap<GroupKey, Vec<GroundedPhrase>> = BTreeMap::new();
    for t in templates {
        for g in ground_one(t) {
            groups.entry(g.group()).or_default().push(g);
        }
    }
    groups
}

fn ground_one(t: &PhraseTemplate) -> Vec<GroundedPhrase> {
    // each partial: (tokens, bindings)
    let mut partial: Vec<(Vec<String>, BTreeMap<String, String>)> = vec![(vec![], BTreeMap::new())];
    for word in t.pattern.split_whitespace() {
        let options: Vec<(String, Option<(&str, String)>)> = match word {
            "COLOR" | "COLOR1" | "COLOR2" => {
                Color::ALL.iter().map(|c| (c.name().to_string(), Some((word, c.name().to_string())))).collect()
            }
            "NUMBER" => NUMBERS.map(|n| (n.to_string(), Some((word, n.to_string())))).collect(),
            "SHAPE" => Shape::ALL
                .iter()
                .flat_map(|&s| shape_forms(s).map(|f| (f, Some((word, s.name().to_string())))))
                .collect(),
            w => vec![(w.to_string(), None)],
        };
        let mut next = Vec::with_capacity(partial.len() * options.len());
        for (toks, binds) in &partial {
            for (surface, binding) in &options {
                let mut toks = toks.clone();
                toks.push(surface.clone());
                let mut binds = binds.clone();
                if let Some((k, v)) = binding {
                    binds.insert(k.to_string(), v.clone());
                }
                next.push((toks, binds));
            }
        }
        partial = next;
    }
    partial.into_iter().map(|(tokens, bindings)| GroundedPhrase { set: t.set, tokens, bindings }).collect()
}

/// Two related utterances and where the shared phrase sits in each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtterancePair {
    pub x: String,
    pub x_prime: String,
    pub phrase: String,
    pub span_x: PhraseSpan,
    pub span_x_prime: PhraseSpan,
    pub set: u8,
}

fn find(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// For every group, the utterances containing one of its phrases, with the
/// earliest occurrence of any member.
pub fn match_utterances(
    corpus: &[Example],
    templates: &[PhraseTemplate],
) -> BTreeMap<GroupKey, Vec<(usize, PhraseSpan, String)>> {
    let mut out = BTreeMap::new();
    for (key, phrases) in ground_templates(templates) {
        let mut hits = Vec::new();
        for (i, ex) in corpus.iter().enumerate() {
            let best =
                phrases.iter().filter_map(|p| find(&ex.tokens, &p.tokens).map(|at| (at, p))).min_by_key(|(at, _)| *at);
            if let Some((at, p)) = best {
                hits.push((i, PhraseSpan::new(at, at + p.tokens.len() - 1), p.text()));
            }
        }
        if !hits.is_empty() {
            out.insert(key, hits);
        }
    }
    out
}

/// Pairs each matched utterance with one other, uniformly at random, from
/// its group. Groups with a single utterance produce nothing.
pub fn build_pairs(corpus: &[Example], templates: &[PhraseTemplate], seed: u64) -> Vec<UtterancePair> {
    let mut pairs = Vec::new();
    for (key, hits) in match_utterances(corpus, templates) {
        if hits.len() < 2 {
            log::debug!("{}: only {} matches, no pair", key.describe(), corpus[hits[0].0].id);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, key.salt()));
        for (k, (i, span, phrase)) in hits.iter().enumerate() {
            let mut j = rng.gen_range(0..hits.len() - 1);
            if j >= k {
                j += 1;
            }
            let (other, other_span, _) = &hits[j];
            pairs.push(UtterancePair {
                x: corpus[*i].id.clone(),
                x_prime: corpus[*other].id.clone(),
                phrase: phrase.clone(),
                span_x: *span,
                span_x_prime: *other_span,
                set: key.set,
            });
        }
    }
    pairs
}

/// Checks that a pair refers to known utterances and that its spans slice
/// to phrases of one group.
pub fn validate_pair(pair: &UtterancePair, corpus: &[Example], templates: &[PhraseTemplate]) -> Result<()> {
    let lookup = |id: &str| {
        corpus.iter().find(|e| e.id == id).ok_or_else(|| Error::Invariant {
            id: id.to_string(),
            message: "pair refers to an unknown utterance".into(),
        })
    };
    let (a, b) = (lookup(&pair.x)?, lookup(&pair.x_prime)?);
    if a.id == b.id {
        return Err(Error::Invariant { id: a.id.clone(), message: "utterance paired with itself".into() });
    }
    let groups = ground_templates(templates);
    let group_of = |ex: &Example, span: PhraseSpan| -> Result<GroupKey> {
        span.check(ex.tokens.len())?;
        let slice = &ex.tokens[span.start..=span.end];
        groups
            .iter()
            .find(|(k, ps)| k.set == pair.set && ps.iter().any(|p| p.tokens == slice))
            .map(|(k, _)| k.clone())
            .ok_or_else(|| Error::Invariant {
                id: ex.id.clone(),
                message: format!("`{}` is not a phrase of set {}", slice.join(" "), pair.set),
            })
    };
    if group_of(a, pair.span_x)? != group_of(b, pair.span_x_prime)? {
        return Err(Error::Invariant {
            id: a.id.clone(),
            message: format!("phrases of {} and {} bind differently", a.id, b.id),
        });
    }
    Ok(())
}

pub fn pairs_to_json(pairs: &[UtterancePair]) -> String {
    serde_json::to_string_pretty(pairs).expect("pairs serialize")
}

pub fn parse_pairs(text: &str) -> Result<Vec<UtterancePair>> {
    let text = text.trim_start_matches('\u{feff}');
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), column: e.column(), message: e.to_string() })
}

pub fn load_pairs(path: &Path) -> Result<Vec<UtterancePair>> {
    let text =
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_pairs(&text)
}

pub fn save_pairs(path: &Path, pairs: &[UtterancePair]) -> Result<()> {
    std::fs::write(path, pairs_to_json(pairs) + "\n")
        .map_err(|source| Error::Io { path: path.display().to_string(), source })
}
