//! Fixtures and finite-difference checks shared by the gradient tests and
//! the acceptance suite.
#![allow(dead_code)]

use conspar::consistency::PhraseSpan;
use conspar::generator::{builtin_utterance_templates, generate_corpus};
use conspar::language::{Grammar, Program, Variant};
use conspar::model::{program_log_prob, ScorerParams};
use conspar::scene::Example;
use conspar::search::{beam_search, enumerate, renormalize_log_probs, BeamCandidate, BeamConfig};
use conspar::training::NeighborBeam;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 100;

pub fn random_params(rng: &mut ChaCha8Rng, grammar: &Grammar, tokens: &[String]) -> ScorerParams {
    let mut p = ScorerParams::for_grammar(grammar);
    for tok in tokens {
        *p.align_weight_mut(tok, conspar::language::ActionId(0)) = 0.0;
    }
    for x in p.slots_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    p
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `grad` with central differences of `f` on a sample of slots:
/// every slot with a non-zero analytic gradient (up to 40) plus 10 others.
/// Returns the worst relative error.
pub fn try_check<F: Fn(&ScorerParams) -> f64>(
    rng: &mut ChaCha8Rng,
    params: &ScorerParams,
    grad: &ScorerParams,
    f: F,
) -> Result<f64, String> {
    let g = grad.slots();
    let mut hot: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
    hot.shuffle(rng);
    hot.truncate(40);
    for _ in 0..10 {
        hot.push(rng.gen_range(0..g.len()));
    }
    let mut worst = 0.0f64;
    for i in hot {
        let mut plus = params.clone();
        *plus.slots_mut()[i] += H;
        let mut minus = params.clone();
        *minus.slots_mut()[i] -= H;
        let fd = (f(&plus) - f(&minus)) / (2.0 * H);
        let err = rel_err(fd, g[i]);
        if err >= REL_TOL {
            return Err(format!("slot {i}: finite difference {fd} vs analytic {}", g[i]));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn check<F: Fn(&ScorerParams) -> f64>(rng: &mut ChaCha8Rng, params: &ScorerParams, grad: &ScorerParams, f: F) {
    if let Err(e) = try_check(rng, params, grad, f) {
        panic!("{e}");
    }
}

pub struct Fixture {
    pub grammar: Grammar,
    pub corpus: Vec<Example>,
    pub programs: Vec<Program>,
}

pub fn fixture() -> Fixture {
    let grammar = Grammar::build(Variant::New);
    let corpus = generate_corpus(11, 40, &builtin_utterance_templates()).unwrap();
    let programs: Vec<Program> = enumerate(&grammar, 8).filter(|p| p.len() >= 3).take(20_000).collect();
    Fixture { grammar, corpus, programs }
}

pub fn pick(rng: &mut ChaCha8Rng, programs: &[Program], n: usize) -> Vec<Program> {
    programs.choose_multiple(rng, n).cloned().collect()
}

/// A beam with at least one correct and one incorrect program, so the
/// denotation reward is not constant.
pub fn mixed_beam(rng: &mut ChaCha8Rng, fx: &Fixture, ex: &Example) -> Vec<Program> {
    let scenes = conspar::search::index_scenes(&ex.scenes);
    let (right, wrong): (Vec<&Program>, Vec<&Program>) =
        fx.programs.choose_multiple(rng, 400).partition(|p| conspar::search::is_correct(p, &scenes));
    let mut beam: Vec<Program> = right.into_iter().take(2).cloned().collect();
    beam.extend(wrong.into_iter().take(4).cloned());
    beam.shuffle(rng);
    beam
}

pub fn candidates(params: &ScorerParams, grammar: &Grammar, ex: &Example, programs: &[Program]) -> Vec<BeamCandidate> {
    programs
        .iter()
        .map(|p| {
            let (log_prob, attention) = program_log_prob(params, grammar, &ex.tokens, p);
            BeamCandidate { program: p.clone(), log_prob, attention }
        })
        .collect()
}

/// Neighbor beam without the denotation filter, so consistency rewards are
/// rarely all zero.
pub fn neighbor(params: &ScorerParams, grammar: &Grammar, x: &Example, xp: &Example) -> NeighborBeam {
    let cands = beam_search(params, grammar, &xp.tokens, BeamConfig { beam_size: 5, max_len: 12 }).candidates;
    let lps: Vec<f64> = cands.iter().map(|c| c.log_prob).collect();
    let weights = renormalize_log_probs(&lps).unwrap();
    let span = |n: usize| PhraseSpan::new(n / 3, n - 1);
    NeighborBeam { candidates: cands, weights, span_x: span(x.tokens.len()), span_x_prime: span(xp.tokens.len()) }
}
