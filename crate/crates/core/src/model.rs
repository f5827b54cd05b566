//! Locally normalized log-linear scorer over grammar actions.
//!
//! For a candidate action `a` and utterance tokens `t_1..t_N`:
//!
//! ```text
//! e_i      = align[t_i][a]
//! att_a    = softmax_i(e)
//! score(a) = rule[a] + prev[p][a] + sum_i att_a(i) * e_i
//! p(a)     = softmax over the actions valid for the current nonterminal
//! ```
//!
//! where `p` is the previously emitted action (or the start marker). The
//! attention row for an action depends only on the utterance, so it is
//! computed once per utterance in [`UtteranceScores`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{ActionId, Grammar, NtId, Program, Variant};

/// Model weights. Unknown tokens read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    n_actions: usize,
    pub rule: Vec<f64>,
    /// Row-major `(n_actions + 1) x n_actions`; the last row is the start state.
    pub prev: Vec<f64>,
    pub align: BTreeMap<String, Vec<f64>>,
}

impl ScorerParams {
    pub fn zeros(n_actions: usize) -> ScorerParams {
        ScorerParams {
            n_actions,
            rule: vec![0.0; n_actions],
            prev: vec![0.0; (n_actions + 1) * n_actions],
            align: BTreeMap::new(),
        }
    }

    pub fn for_grammar(grammar: &Grammar) -> ScorerParams {
        ScorerParams::zeros(grammar.num_actions())
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn prev_row(prev: Option<ActionId>, n: usize) -> usize {
        prev.map_or(n, |p| p.index())
    }

    pub fn prev_weight(&self, prev: Option<ActionId>, a: ActionId) -> f64 {
        self.prev[Self::prev_row(prev, self.n_actions) * self.n_actions + a.index()]
    }

    pub fn prev_weight_mut(&mut self, prev: Option<ActionId>, a: ActionId) -> &mut f64 {
        let n = self.n_actions;
        &mut self.prev[Self::prev_row(prev, n) * n + a.index()]
    }

    pub fn align_weight(&self, token: &str, a: ActionId) -> f64 {
        self.align.get(token).map_or(0.0, |row| row[a.index()])
    }

    pub fn align_weight_mut(&mut self, token: &str, a: ActionId) -> &mut f64 {
        let n = self.n_actions;
        &mut self.align.entry(token.to_string()).or_insert_with(|| vec![0.0; n])[a.index()]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ScorerParams, scale: f64) {
        assert_eq!(self.n_actions, other.n_actions);
        for (x, y) in self.rule.iter_mut().zip(&other.rule) {
            *x += scale * y;
        }
        for (x, y) in self.prev.iter_mut().zip(&other.prev) {
            *x += scale * y;
        }
        for (tok, row) in &other.align {
            let n = self.n_actions;
            let mine = self.align.entry(tok.clone()).or_insert_with(|| vec![0.0; n]);
            for (x, y) in mine.iter_mut().zip(row) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.rule.iter_mut().for_each(|x| *x *= s);
        self.prev.iter_mut().for_each(|x| *x *= s);
        self.align.values_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.rule.iter().chain(&self.prev).chain(self.align.values().flatten()).all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.rule.iter().chain(&self.prev).chain(self.align.values().flatten()).fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Every weight slot, in a fixed order, as a mutable reference.
    pub fn slots_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = self.rule.iter_mut().collect();
        out.extend(self.prev.iter_mut());
        out.extend(self.align.values_mut().flatten());
        out
    }

    pub fn slots(&self) -> Vec<f64> {
        self.rule.iter().chain(&self.prev).chain(self.align.values().flatten()).copied().collect()
    }
}

/// Attention rows and lexical scores of every action for one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceScores {
    n_tokens: usize,
    /// `n_actions x n_tokens`
    attention: Vec<f64>,
    /// `n_actions x n_tokens`, the raw alignment scores `e`.
    energy: Vec<f64>,
    lexical: Vec<f64>,
}

impl UtteranceScores {
    pub fn new(params: &ScorerParams, tokens: &[String]) -> UtteranceScores {
        let n = tokens.len();
        let na = params.n_actions;
        let mut attention = vec![0.0; na * n];
        let mut energy = vec![0.0; na * n];
        let mut lexical = vec![0.0; na];
        let rows: Vec<Option<&Vec<f64>>> = tokens.iter().map(|t| params.align.get(t)).collect();
        for a in 0..na {
            let e = &mut energy[a * n..(a + 1) * n];
            for (i, row) in rows.iter().enumerate() {
                e[i] = row.map_or(0.0, |r| r[a]);
            }
            let att = &mut attention[a * n..(a + 1) * n];
            softmax_into(e, att);
            lexical[a] = att.iter().zip(e.iter()).map(|(p, x)| p * x).sum();
        }
        UtteranceScores { n_tokens: n, attention, energy, lexical }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn attention(&self, a: ActionId) -> &[f64] {
        &self.attention[a.index() * self.n_tokens..(a.index() + 1) * self.n_tokens]
    }

    fn energy(&self, a: ActionId) -> &[f64] {
        &self.energy[a.index() * self.n_tokens..(a.index() + 1) * self.n_tokens]
    }

    pub fn lexical(&self, a: ActionId) -> f64 {
        self.lexical[a.index()]
    }
}

/// Distribution over the actions valid at one decoding step.
#[derive(Clone, Debug)]
pub struct StepDistribution {
    pub actions: Vec<ActionId>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `log sum exp`, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probabilities of each action in `valid` after `prev`.
pub(crate) fn step_log_probs(
    params: &ScorerParams,
    scores: &UtteranceScores,
    valid: &[ActionId],
    prev: Option<ActionId>,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(valid.iter().map(|&a| params.rule[a.index()] + params.prev_weight(prev, a) + scores.lexical(a)));
    let lz = log_sum_exp(out);
    for x in out.iter_mut() {
        *x -= lz;
    }
}

/// The distribution at a decoder state whose next nonterminal is `nt`.
pub fn step_scores(
    params: &ScorerParams,
    grammar: &Grammar,
    tokens: &[String],
    nt: NtId,
    prev: Option<ActionId>,
) -> Result<StepDistribution> {
    let valid = grammar.valid_actions(nt);
    if valid.is_empty() {
        return Err(Error::Stuck);
    }
    let scores = UtteranceScores::new(params, tokens);
    let mut log_probs = Vec::new();
    step_log_probs(params, &scores, valid, prev, &mut log_probs);
    Ok(StepDistribution {
        actions: valid.to_vec(),
        probs: log_probs.iter().map(|l| l.exp()).collect(),
        log_probs,
        attention: valid.iter().map(|&a| scores.attention(a).to_vec()).collect(),
    })
}

/// `log p(program | tokens)` and the attention row of each chosen action.
pub fn program_log_prob(
    params: &ScorerParams,
    grammar: &Grammar,
    tokens: &[String],
    program: &Program,
) -> (f64, Vec<Vec<f64>>) {
    let scores = UtteranceScores::new(params, tokens);
    let lp = log_prob_with(params, grammar, &scores, program.actions());
    let att = program.actions().iter().map(|&a| scores.attention(a).to_vec()).collect();
    (lp, att)
}

pub(crate) fn log_prob_with(
    params: &ScorerParams,
    grammar: &Grammar,
    scores: &UtteranceScores,
    actions: &[ActionId],
) -> f64 {
    let mut buf = Vec::new();
    let mut total = 0.0;
    let mut prev = None;
    for &a in actions {
        let valid = grammar.valid_actions(grammar.action(a).lhs_nt());
        if valid.len() > 1 {
            step_log_probs(params, scores, valid, prev, &mut buf);
            let k = valid.binary_search(&a).expect("action valid for its own lhs");
            total += buf[k];
        }
        prev = Some(a);
    }
    total
}

/// Gradient of `log p(program | tokens)`, accumulated into `grad` with weight `scale`.
pub fn accumulate_grad_log_prob(
    params: &ScorerParams,
    grammar: &Grammar,
    tokens: &[String],
    scores: &UtteranceScores,
    actions: &[ActionId],
    scale: f64,
    grad: &mut ScorerParams,
) {
    if scale == 0.0 {
        return;
    }
    let mut buf = Vec::new();
    let mut prev = None;
    for &chosen in actions {
        let valid = grammar.valid_actions(grammar.action(chosen).lhs_nt());
        if valid.len() > 1 {
            step_log_probs(params, scores, valid, prev, &mut buf);
            for (k, &a) in valid.iter().enumerate() {
                let indicator = if a == chosen { 1.0 } else { 0.0 };
                let coef = scale * (indicator - buf[k].exp());
                grad.rule[a.index()] += coef;
                *grad.prev_weight_mut(prev, a) += coef;
                let att = scores.attention(a);
                let e = scores.energy(a);
                let s = scores.lexical(a);
                for (j, tok) in tokens.iter().enumerate() {
                    let d = coef * att[j] * (1.0 + e[j] - s);
                    *grad.align_weight_mut(tok, a) += d;
                }
            }
        }
        prev = Some(chosen);
    }
}

pub fn grad_log_prob(params: &ScorerParams, grammar: &Grammar, tokens: &[String], program: &Program) -> ScorerParams {
    let scores = UtteranceScores::new(params, tokens);
    let mut grad = ScorerParams::zeros(params.n_actions);
    accumulate_grad_log_prob(params, grammar, tokens, &scores, program.actions(), 1.0, &mut grad);
    grad
}

// ---- checkpoints -------------------------------------------------------

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    grammar: Variant,
    rule: BTreeMap<String, f64>,
    prev: BTreeMap<String, BTreeMap<String, f64>>,
    align: BTreeMap<String, BTreeMap<String, f64>>,
}

const START: &str = "<start>";

pub fn params_to_json(params: &ScorerParams, grammar: &Grammar) -> String {
    let name = |a: usize| grammar.action(ActionId(a as u16)).text().to_string();
    let sparse = |row: &[f64]| -> BTreeMap<String, f64> {
        row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(a, v)| (name(a), *v)).collect()
    };
    let n = params.n_actions;
    let mut prev = BTreeMap::new();
    for p in 0..=n {
        let row = sparse(&params.prev[p * n..(p + 1) * n]);
        if !row.is_empty() {
            prev.insert(if p == n { START.to_string() } else { name(p) }, row);
        }
    }
    let align =
        params.align.iter().map(|(t, row)| (t.clone(), sparse(row))).filter(|(_, row)| !row.is_empty()).collect();
    let ckpt =
        Checkpoint { format: CHECKPOINT_FORMAT, grammar: grammar.variant(), rule: sparse(&params.rule), prev, align };
    let mut s = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
    s.push('\n');
    s
}

/// Reads a checkpoint and returns the grammar variant it was trained with.
pub fn params_from_json(text: &str) -> Result<(Variant, ScorerParams)> {
    let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            ckpt.format
        )));
    }
    let grammar = Grammar::build(ckpt.grammar);
    let id = |name: &str| grammar.lookup(name).ok_or_else(|| Error::UnknownAction(name.to_string()));
    let mut params = ScorerParams::for_grammar(&grammar);
    for (a, v) in &ckpt.rule {
        params.rule[id(a)?.index()] = *v;
    }
    for (p, row) in &ckpt.prev {
        let prev = if p == START { None } else { Some(id(p)?) };
        for (a, v) in row {
            *params.prev_weight_mut(prev, id(a)?) = *v;
        }
    }
    for (tok, row) in &ckpt.align {
        for (a, v) in row {
            *params.align_weight_mut(tok, id(a)?) = *v;
        }
    }
    if !params.is_finite() {
        return Err(Error::InvalidArgument("checkpoint holds non-finite weights".into()));
    }
    Ok((ckpt.grammar, params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Variant, ScorerParams)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    params_from_json(&text)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ScorerParams, grammar: &Grammar) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_json(params, grammar))
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{parse_text, Variant};
    use crate::scene::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn zero_params_give_uniform_distributions() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let t = toks("there is a yellow object");
        let d = step_scores(&p, &g, &t, g.root(), None).unwrap();
        let k = d.actions.len() as f64;
        for (pr, att) in d.probs.iter().zip(&d.attention) {
            assert!((pr - 1.0 / k).abs() < 1e-12);
            for x in att {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_rule_weight_raises_its_probability() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        let t = toks("there is a box");
        let before = step_scores(&p, &g, &t, g.root(), None).unwrap();
        let target = before.actions[1];
        p.rule[target.index()] += 0.5;
        let after = step_scores(&p, &g, &t, g.root(), None).unwrap();
        for (k, a) in after.actions.iter().enumerate() {
            if *a == target {
                assert!(after.probs[k] > before.probs[k]);
            } else {
                assert!(after.probs[k] < before.probs[k]);
            }
        }
    }

    #[test]
    fn attention_row_from_known_energies() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        let t: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let a = g.lookup("<Set[Object]:Set[Object]> -> yellow").unwrap();
        for (tok, e) in t.iter().zip([0.1, 0.2, 0.5, 0.2]) {
            *p.align_weight_mut(tok, a) = e;
        }
        let s = UtteranceScores::new(&p, &t);
        let row = s.attention(a);
        let z: f64 = [0.1f64, 0.2, 0.5, 0.2].iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = [0.1f64, 0.2, 0.5, 0.2].iter().map(|x| x.exp() / z).collect();
        for (x, y) in row.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lex: f64 = expected.iter().zip([0.1, 0.2, 0.5, 0.2]).map(|(p, e)| p * e).sum();
        assert!((s.lexical(a) - lex).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_hand_rolled_softmaxes() {
        let g = Grammar::build(Variant::New);
        let mut p = ScorerParams::for_grammar(&g);
        let t = toks("there is an object");
        let prog = parse_text(&g, "objExists(allObjs)").unwrap();
        let acts = prog.actions().to_vec();
        p.rule[acts[0].index()] = 0.7;
        *p.prev_weight_mut(Some(acts[0]), acts[1]) = -0.3;
        *p.align_weight_mut("object", acts[1]) = 1.2;

        // step 1: root choice
        let root_valid = g.valid_actions(g.root());
        let s1: Vec<f64> = root_valid.iter().map(|a| if *a == acts[0] { 0.7 } else { 0.0 }).collect();
        let lp1 = s1[root_valid.iter().position(|a| *a == acts[0]).unwrap()] - log_sum_exp(&s1);
        // step 2: predicate choice; only acts[1] has energies
        let e = [0.0, 0.0, 0.0, 1.2f64];
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let lex: f64 = e.iter().map(|x| x.exp() / z * x).sum();
        let pred_valid = g.valid_actions(g.action(acts[1]).lhs_nt());
        let s2: Vec<f64> = pred_valid.iter().map(|a| if *a == acts[1] { -0.3 + lex } else { 0.0 }).collect();
        let lp2 = s2[pred_valid.iter().position(|a| *a == acts[1]).unwrap()] - log_sum_exp(&s2);
        // step 3: allObjs is the only Set[Object] terminal besides the filter application
        let obj_valid = g.valid_actions(g.action(acts[2]).lhs_nt());
        let lp3 = -(obj_valid.len() as f64).ln();

        let (lp, att) = program_log_prob(&p, &g, &t, &prog);
        assert!((lp - (lp1 + lp2 + lp3)).abs() < 1e-12, "{lp} vs {}", lp1 + lp2 + lp3);
        assert_eq!(att.len(), 3);
        assert!(lp <= 0.0);
    }

    #[test]
    fn forced_steps_contribute_nothing() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let prog = parse_text(&g, "boxExists(boxFilter(allBoxes, objExists))").unwrap();
        let forced: Vec<_> =
            prog.actions().iter().filter(|a| g.valid_actions(g.action(**a).lhs_nt()).len() == 1).collect();
        assert!(!forced.is_empty());
        let (lp, _) = program_log_prob(&p, &g, &toks("x"), &prog);
        let expected: f64 =
            prog.actions().iter().map(|a| -(g.valid_actions(g.action(*a).lhs_nt()).len() as f64).ln()).sum();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_param_rule_gradient_is_one_minus_uniform() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let prog = parse_text(&g, "objExists(yellow(above(black(allObjs))))").unwrap();
        let grad = grad_log_prob(&p, &g, &toks("a yellow thing"), &prog);
        let filter = g.lookup("<Set[Object]:Set[Object]> -> yellow").unwrap();
        let k = g.valid_actions(g.action(filter).lhs_nt()).len() as f64;
        // yellow is taken once; the other two filter steps each push it down by 1/k
        assert!((grad.rule[filter.index()] - (1.0 - 3.0 / k)).abs() < 1e-12);
        // the Set[Object] -> [filter, Set[Object]] action is taken three times
        let app = prog.actions()[2];
        let kk = g.valid_actions(g.action(app).lhs_nt()).len() as f64;
        let steps = prog.actions().iter().filter(|a| **a == app).count() as f64;
        let lhs_steps =
            prog.actions().iter().filter(|a| g.action(**a).lhs_nt() == g.action(app).lhs_nt()).count() as f64;
        assert!((grad.rule[app.index()] - (steps - lhs_steps / kk)).abs() < 1e-12);
    }

    #[test]
    fn untouched_weights_have_zero_gradient() {
        let g = Grammar::build(Variant::New);
        let p = ScorerParams::for_grammar(&g);
        let prog = parse_text(&g, "objExists(allObjs)").unwrap();
        let grad = grad_log_prob(&p, &g, &toks("hello world"), &prog);
        let unrelated = g.lookup("<int,Set[Box]:bool> -> boxCountEq").unwrap();
        assert_eq!(grad.rule[unrelated.index()], 0.0);
        assert!(grad.align.keys().all(|t| t == "hello" || t == "world"));
        let bf = g.lookup("<Set[Box],<Set[Object]:bool>:Set[Box]> -> boxFilter").unwrap();
        assert_eq!(grad.prev_weight(Some(bf), unrelated), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = Grammar::build(Variant::Old);
        let mut p = ScorerParams::for_grammar(&g);
        p.rule[3] = 0.25;
        *p.prev_weight_mut(None, ActionId(4)) = -1.5;
        *p.prev_weight_mut(Some(ActionId(2)), ActionId(4)) = 2.0;
        *p.align_weight_mut("box", ActionId(7)) = 0.125;
        let text = params_to_json(&p, &g);
        assert!(text.contains("\"format\": 1"));
        let (v, back) = params_from_json(&text).unwrap();
        assert_eq!(v, Variant::Old);
        assert_eq!(back, p);
        assert!(params_from_json(&text.replace("\"format\": 1", "\"format\": 2")).is_err());
    }
}
