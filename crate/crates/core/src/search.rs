//! Grammar-constrained program search: exhaustive enumeration in shortlex
//! order, beam search under a [`ScorerParams`] model, denotation filtering
//! and beam renormalization.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::executor::{execute_indexed, SceneIndex};
use crate::language::{
    parse_actions, shift_sum, variant_symbols, ActionId, Cmp, Grammar, NtId, ObjFilter, Program, Sym, Variant, MAX_INT,
    MIN_INT,
};
use crate::model::{log_sum_exp, step_log_probs, ScorerParams, UtteranceScores};
use crate::scene::{Color, Scene, Shape, Size};

/// Longest program the enumerator supports (length sets are `u64` masks).
pub const MAX_ENUMERATION_LEN: usize = 63;

struct Frame {
    pending: Vec<NtId>,
    choices: Vec<ActionId>,
    next: usize,
}

/// Yields every program of at most `max_actions` actions exactly once,
/// shortest first and lexicographically by action id within a length.
pub struct Enumerator<'g> {
    grammar: &'g Grammar,
    masks: Vec<u64>,
    max_actions: usize,
    target: usize,
    frames: Vec<Frame>,
    actions: Vec<ActionId>,
}

impl<'g> Enumerator<'g> {
    pub fn new(grammar: &'g Grammar, max_actions: usize) -> Enumerator<'g> {
        let max_actions = max_actions.min(MAX_ENUMERATION_LEN);
        let masks = grammar.length_masks(max_actions);
        Enumerator { grammar, masks, max_actions, target: 0, frames: Vec::new(), actions: Vec::new() }
    }

    /// Whether the nonterminals in `pending` can expand to exactly `len` actions.
    fn fits(&self, pending: &[NtId], len: usize) -> bool {
        let mut m = 1u64;
        for nt in pending {
            m = shift_sum(m, self.masks[nt.index()]);
            if m == 0 {
                return false;
            }
        }
        len < 64 && m & (1u64 << len) != 0
    }

    fn frame(&self, pending: Vec<NtId>, remaining: usize) -> Frame {
        let top = *pending.last().expect("non-empty pending stack");
        let rest = &pending[..pending.len() - 1];
        let choices = self
            .grammar
            .valid_actions(top)
            .iter()
            .copied()
            .filter(|&a| {
                let mut after = rest.to_vec();
                after.extend(self.grammar.action(a).children().iter().rev());
                self.fits(&after, remaining - 1)
            })
            .collect();
        Frame { pending, choices, next: 0 }
    }
}

impl Iterator for Enumerator<'_> {
    type Item = Program;

    fn next(&mut self) -> Option<Program> {
        loop {
            if self.frames.is_empty() {
                if self.target >= self.max_actions {
                    return None;
                }
                self.target += 1;
                self.actions.clear();
                let root = vec![self.grammar.root()];
                if self.fits(&root, self.target) {
                    let f = self.frame(root, self.target);
                    self.frames.push(f);
                }
                continue;
            }
            let depth = self.frames.len() - 1;
            let top = self.frames.last_mut().expect("checked above");
            if top.next >= top.choices.len() {
                self.frames.pop();
                continue;
            }
            let a = top.choices[top.next];
            top.next += 1;
            let mut pending = top.pending.clone();
            pending.pop();
            pending.extend(self.grammar.action(a).children().iter().rev());
            self.actions.truncate(depth);
            self.actions.push(a);
            if pending.is_empty() {
                debug_assert_eq!(self.actions.len(), self.target);
                let p = parse_actions(self.grammar, &self.actions).expect("enumerated sequences are complete");
                return Some(p);
            }
            let remaining = self.target - self.actions.len();
            let f = self.frame(pending, remaining);
            self.frames.push(f);
        }
    }
}

pub fn enumerate(grammar: &Grammar, max_actions: usize) -> Enumerator<'_> {
    Enumerator::new(grammar, max_actions)
}

/// Terminals an utterance token points at: colors, shapes, sizes, numbers,
/// spatial relations and connectives.
pub fn triggered_symbols(tokens: &[String]) -> BTreeSet<Sym> {
    let mut out = BTreeSet::new();
    for t in tokens {
        let t = t.as_str();
        let singular = t.strip_suffix('s').unwrap_or(t);
        for c in Color::ALL {
            if t == c.name() {
                out.insert(Sym::Filter(ObjFilter::Color(c)));
            }
        }
        for sh in Shape::ALL {
            if t == sh.name() || singular == sh.name() {
                out.insert(Sym::Filter(ObjFilter::Shape(sh)));
            }
        }
        let size = match t {
            "small" | "tiny" => Some(Size::Small),
            "medium" => Some(Size::Medium),
            "large" | "big" => Some(Size::Large),
            _ => None,
        };
        if let Some(sz) = size {
            out.insert(Sym::Filter(ObjFilter::Size(sz)));
        }
        const WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
        let number = t.parse::<u8>().ok().or_else(|| WORDS.iter().position(|w| *w == t).map(|i| i as u8 + 1));
        if let Some(n) = number.filter(|n| (MIN_INT..=MAX_INT).contains(n)) {
            out.insert(Sym::Int(n));
        }
        let word = match t {
            "top" => Some(Sym::Filter(ObjFilter::Top)),
            "base" | "bottom" => Some(Sym::Filter(ObjFilter::Bottom)),
            "above" | "on" | "over" => Some(Sym::Filter(ObjFilter::Above)),
            "below" | "under" | "beneath" => Some(Sym::Filter(ObjFilter::Below)),
            "no" | "not" | "none" => Some(Sym::Not),
            "or" => Some(Sym::Or),
            "and" => Some(Sym::And),
            _ => None,
        };
        out.extend(word);
    }
    out
}

/// Terminals available to the initial program search for an utterance: the
/// triggered ones plus a core of sets, quantifiers and counters.
pub fn search_symbols(variant: Variant, tokens: &[String]) -> Vec<Sym> {
    let mut syms: BTreeSet<Sym> = triggered_symbols(tokens);
    syms.extend([Sym::AllObjs, Sym::AllBoxes, Sym::Int(1), Sym::ObjExists, Sym::BoxExists]);
    syms.extend([Cmp::Eq, Cmp::GtEq, Cmp::LtEq].map(Sym::ObjectCount));
    syms.extend([Cmp::Eq, Cmp::GtEq].map(Sym::ColorCount));
    syms.extend([Cmp::Eq, Cmp::GtEq].map(Sym::ShapeCount));
    syms.extend([Cmp::Eq, Cmp::GtEq, Cmp::LtEq].map(Sym::BoxCount));
    let full = variant_symbols(variant);
    syms.extend(
        full.iter().filter(|s| matches!(s, Sym::BoxFilter | Sym::MemberColorCountGrtEq | Sym::MemberObjCountEq)),
    );
    syms.into_iter().filter(|s| full.contains(s)).collect()
}

#[derive(Clone, Debug)]
pub struct BeamCandidate {
    pub program: Program,
    pub log_prob: f64,
    /// One row per action; each row is a distribution over utterance tokens.
    pub attention: Vec<Vec<f64>>,
}

/// Candidates sorted by descending log-probability, ties by action sequence.
#[derive(Clone, Debug, Default)]
pub struct Beam {
    pub candidates: Vec<BeamCandidate>,
}

impl Beam {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn best(&self) -> Option<&BeamCandidate> {
        self.candidates.first()
    }

    pub fn programs(&self) -> impl Iterator<Item = &Program> {
        self.candidates.iter().map(|c| &c.program)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

pub const DEFAULT_BEAM_SIZE: usize = 10;
pub const DEFAULT_MAX_PROGRAM_LEN: usize = 40;

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: DEFAULT_BEAM_SIZE, max_len: DEFAULT_MAX_PROGRAM_LEN }
    }
}

#[derive(Clone)]
struct Hyp {
    actions: Vec<ActionId>,
    pending: Vec<NtId>,
    log_prob: f64,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal).then_with(|| a.actions.cmp(&b.actions))
}

/// Standard per-step beam search. At every step all expansions of the live
/// hypotheses are ranked together and the best `beam_size` survive; finished
/// programs leave the beam. Ties break toward the smaller action sequence.
pub fn beam_search(params: &ScorerParams, grammar: &Grammar, tokens: &[String], config: BeamConfig) -> Beam {
    let scores = UtteranceScores::new(params, tokens);
    beam_search_with(params, grammar, &scores, config)
}

pub(crate) fn beam_search_with(
    params: &ScorerParams,
    grammar: &Grammar,
    scores: &UtteranceScores,
    config: BeamConfig,
) -> Beam {
    assert!(config.beam_size >= 1, "beam size must be positive");
    let k = config.beam_size;
    let mut live = vec![Hyp { actions: Vec::new(), pending: vec![grammar.root()], log_prob: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut buf = Vec::new();

    while !live.is_empty() {
        let mut expansions = Vec::new();
        for h in &live {
            let top = *h.pending.last().expect("live hypotheses have pending work");
            let valid = grammar.valid_actions(top);
            step_log_probs(params, scores, valid, h.actions.last().copied(), &mut buf);
            let committed: usize = h.pending[..h.pending.len() - 1].iter().map(|nt| grammar.min_len(*nt)).sum();
            for (i, &a) in valid.iter().enumerate() {
                let children = grammar.action(a).children();
                let needed =
                    h.actions.len() + 1 + committed + children.iter().map(|c| grammar.min_len(*c)).sum::<usize>();
                if needed > config.max_len {
                    continue;
                }
                let mut pending = h.pending.clone();
                pending.pop();
                pending.extend(children.iter().rev());
                let mut actions = h.actions.clone();
                actions.push(a);
                expansions.push(Hyp { actions, pending, log_prob: h.log_prob + buf[i] });
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(k);
        live.clear();
        for h in expansions {
            if h.pending.is_empty() {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
        finished.sort_by(rank);
        finished.truncate(k);
        // Log-probabilities only fall, so once k finished programs beat every
        // live hypothesis nothing can displace them.
        if finished.len() == k {
            let worst = finished[k - 1].log_prob;
            if live.iter().all(|h| h.log_prob < worst) {
                break;
            }
        }
    }

    let candidates = finished
        .into_iter()
        .map(|h| {
            let attention = h.actions.iter().map(|&a| scores.attention(a).to_vec()).collect();
            BeamCandidate {
                program: parse_actions(grammar, &h.actions).expect("beam emits complete programs"),
                log_prob: h.log_prob,
                attention,
            }
        })
        .collect();
    Beam { candidates }
}

/// `R = 1` iff the program reproduces every labelled denotation.
pub fn is_correct(program: &Program, scenes: &[(SceneIndex, bool)]) -> bool {
    scenes.iter().all(|(s, d)| execute_indexed(program, s) == *d)
}

pub fn index_scenes(scenes: &[(Scene, bool)]) -> Vec<(SceneIndex, bool)> {
    scenes.iter().map(|(s, d)| (SceneIndex::new(s), *d)).collect()
}

/// Keeps the candidates that are correct on all scenes, preserving order.
pub fn filter_correct(beam: &Beam, scenes: &[(Scene, bool)]) -> Beam {
    filter_correct_indexed(beam, &index_scenes(scenes))
}

pub fn filter_correct_indexed(beam: &Beam, scenes: &[(SceneIndex, bool)]) -> Beam {
    Beam { candidates: beam.candidates.iter().filter(|c| is_correct(&c.program, scenes)).cloned().collect() }
}

/// Softmax of the candidates' log-probabilities over the beam.
pub fn renormalize_log_probs(log_probs: &[f64]) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::EmptySupport);
    }
    let z = log_sum_exp(log_probs);
    Ok(log_probs.iter().map(|l| (l - z).exp()).collect())
}

pub fn renormalize(beam: &Beam) -> Result<Vec<(Program, f64)>> {
    let lps: Vec<f64> = beam.candidates.iter().map(|c| c.log_prob).collect();
    let weights = renormalize_log_probs(&lps)?;
    Ok(beam.candidates.iter().zip(weights).map(|(c, w)| (c.program.clone(), w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::NtId;
    use crate::language::{parse_text, Variant};
    use crate::model::program_log_prob;
    use crate::scene::tokenize;

    #[test]
    fn short_enumeration() {
        let g = Grammar::build(Variant::New);
        let progs: Vec<String> = enumerate(&g, 3).map(|p| p.to_string()).collect();
        assert!(progs.contains(&"objExists(allObjs)".to_string()));
        assert!(progs.contains(&"boxExists(allBoxes)".to_string()));
        assert!(progs.iter().all(|p| !p.contains("boxFilter")));
        assert_eq!(enumerate(&g, 0).count(), 0);
        // boxFilter needs bool-app, boxExists, Set[Box]-app, boxFilter, allBoxes, objExists
        let first_bf = enumerate(&g, 6).find(|p| p.to_string().contains("boxFilter")).unwrap();
        assert_eq!(first_bf.len(), 6);
    }

    #[test]
    fn enumeration_is_shortlex() {
        let g = Grammar::build(Variant::New);
        let progs: Vec<Program> = enumerate(&g, 6).collect();
        for w in progs.windows(2) {
            let (a, b) = (w[0].actions(), w[1].actions());
            assert!(a.len() < b.len() || (a.len() == b.len() && a < b));
        }
    }

    #[test]
    fn renormalize_examples() {
        let half = renormalize_log_probs(&[-3.0, -3.0]).unwrap();
        assert!(half.iter().all(|w| (w - 0.5).abs() < 1e-12));
        assert!((renormalize_log_probs(&[-7.0]).unwrap()[0] - 1.0).abs() < 1e-12);
        let p = renormalize_log_probs(&[-1.0, -2.0]).unwrap();
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
        let big = renormalize_log_probs(&[-1000.0, -1001.0]).unwrap();
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(renormalize_log_probs(&[]), Err(Error::EmptySupport)));
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        for (i, w) in p.rule.iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) / 4.0;
        }
        let toks = tokenize("there is a yellow block");
        let beam = beam_search(&p, &g, &toks, BeamConfig { beam_size: 1, max_len: 40 });
        assert_eq!(beam.len(), 1);

        // greedy: take the argmax (smallest id on ties) at every step
        let scores = UtteranceScores::new(&p, &toks);
        let mut pending = vec![g.root()];
        let mut actions: Vec<ActionId> = Vec::new();
        let mut buf = Vec::new();
        while let Some(nt) = pending.pop() {
            let valid = g.valid_actions(nt);
            step_log_probs(&p, &scores, valid, actions.last().copied(), &mut buf);
            let mut best = 0;
            for i in 1..valid.len() {
                if buf[i] > buf[best] {
                    best = i;
                }
            }
            actions.push(valid[best]);
            pending.extend(g.action(valid[best]).children().iter().rev());
        }
        assert_eq!(beam.candidates[0].program.actions(), actions.as_slice());
    }

    #[test]
    fn beam_candidates_are_sorted_typed_and_scored() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let toks = tokenize("there is a box with a black item on the top");
        let beam = beam_search(&p, &g, &toks, BeamConfig::default());
        assert_eq!(beam.len(), DEFAULT_BEAM_SIZE);
        for w in beam.candidates.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for c in &beam.candidates {
            let again = parse_actions(&g, c.program.actions()).unwrap();
            assert_eq!(again, c.program);
            let (lp, att) = program_log_prob(&p, &g, &toks, &c.program);
            assert!((lp - c.log_prob).abs() < 1e-9);
            assert_eq!(att, c.attention);
            for row in &c.attention {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    /// Plain per-step beam: keep the K best prefixes each step (ties by the
    /// smaller prefix), retire finished ones, run until nothing is live.
    fn naive_beam(p: &ScorerParams, g: &Grammar, toks: &[String], k: usize, max_len: usize) -> Vec<Vec<ActionId>> {
        use crate::model::step_scores;
        let mut live: Vec<(f64, Vec<ActionId>, Vec<NtId>)> = vec![(0.0, vec![], vec![g.root()])];
        let mut done: Vec<(f64, Vec<ActionId>)> = vec![];
        while !live.is_empty() {
            let mut next = vec![];
            for (lp, prefix, stack) in &live {
                let nt = *stack.last().unwrap();
                let dist = step_scores(p, g, toks, nt, prefix.last().copied()).unwrap();
                for (a, l) in dist.actions.iter().zip(&dist.log_probs) {
                    let mut st = stack.clone();
                    st.pop();
                    st.extend(g.action(*a).children().iter().rev());
                    let floor: usize = st.iter().map(|n| g.min_len(*n)).sum();
                    if prefix.len() + 1 + floor > max_len {
                        continue;
                    }
                    let mut pre = prefix.clone();
                    pre.push(*a);
                    next.push((lp + l, pre, st));
                }
            }
            next.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            next.truncate(k);
            live.clear();
            for (lp, pre, st) in next {
                if st.is_empty() {
                    done.push((lp, pre));
                } else {
                    live.push((lp, pre, st));
                }
            }
        }
        done.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        done.into_iter().take(k).map(|d| d.1).collect()
    }

    #[test]
    fn zero_weight_beam_matches_naive_simulation() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let toks = tokenize("anything at all");
        let beam = beam_search(&p, &g, &toks, BeamConfig { beam_size: 5, max_len: 40 });
        let got: Vec<Vec<ActionId>> = beam.programs().map(|p| p.actions().to_vec()).collect();
        assert_eq!(got, naive_beam(&p, &g, &toks, 5, 40));
        // the shortest program survives: boxExists(allBoxes)
        assert_eq!(beam.best().unwrap().program.to_string(), "boxExists(allBoxes)");
    }

    #[test]
    fn trained_like_beam_matches_naive_simulation() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        for (i, w) in p.rule.iter_mut().enumerate() {
            *w = ((i * 17 % 13) as f64 - 6.0) / 5.0;
        }
        let yellow = g.lookup("<Set[Object]:Set[Object]> -> yellow").unwrap();
        *p.align_weight_mut("yellow", yellow) = 2.0;
        let toks = tokenize("there is a yellow item");
        for k in [1, 3, 10] {
            for max_len in [6, 12, 40] {
                let beam = beam_search(&p, &g, &toks, BeamConfig { beam_size: k, max_len });
                let got: Vec<Vec<ActionId>> = beam.programs().map(|p| p.actions().to_vec()).collect();
                assert_eq!(got, naive_beam(&p, &g, &toks, k, max_len), "k={k} max_len={max_len}");
            }
        }
    }

    #[test]
    fn max_len_bounds_beam_programs() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        // push hard toward ever-longer filter chains
        let app = g.lookup("Set[Object] -> [<Set[Object]:Set[Object]>, Set[Object]]").unwrap();
        p.rule[app.index()] = 10.0;
        let toks = tokenize("x");
        let beam = beam_search(&p, &g, &toks, BeamConfig { beam_size: 3, max_len: 9 });
        assert!(!beam.is_empty());
        assert!(beam.programs().all(|q| q.len() <= 9));
    }

    #[test]
    fn filter_keeps_only_fully_correct() {
        use crate::scene::{Color, Obj, SceneBox, Shape, Size};
        let g = Grammar::build(Variant::New);
        let mk = |color| Scene {
            id: "s".into(),
            boxes: vec![
                SceneBox { objects: vec![Obj { x: 1, y: 1, color, shape: Shape::Circle, size: Size::Small }] };
                3
            ],
        };
        let scenes = vec![
            (mk(Color::Yellow), true),
            (mk(Color::Yellow), true),
            (mk(Color::Black), false),
            (mk(Color::Black), true),
        ];
        let yellow = parse_text(&g, "objExists(yellow(allObjs))").unwrap();
        let any = parse_text(&g, "objExists(allObjs)").unwrap();
        let beam = Beam {
            candidates: vec![
                BeamCandidate { program: yellow, log_prob: -1.0, attention: vec![] },
                BeamCandidate { program: any.clone(), log_prob: -2.0, attention: vec![] },
            ],
        };
        // yellow is right on 3 of 4 scenes, allObjs on 3 of 4
        assert!(filter_correct(&beam, &scenes).is_empty());
        let all_true: Vec<_> = scenes.iter().map(|(s, _)| (s.clone(), true)).collect();
        let kept = filter_correct(&beam, &all_true);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.candidates[0].program, any);
        assert!(filter_correct(&Beam::default(), &scenes).is_empty());
        let both = Beam { candidates: vec![beam.candidates[1].clone()] };
        assert_eq!(filter_correct(&both, &all_true).len(), 1);
    }
}
