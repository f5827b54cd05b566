//! Training objectives and the alternating MML / reward-based loop.
//!
//! Every objective is maximized or minimized over a fixed candidate set, so
//! gradients are exact for that set. Consistency rewards are computed from
//! attention recorded at decoding time and are constants as far as the
//! gradient is concerned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{consistency_reward, Neighbor, PhraseSpan, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::executor::SceneIndex;
use crate::generator::mix_seed;
use crate::language::{parse_actions, ActionId, Grammar, Program, Sym, Variant};
use crate::model::{accumulate_grad_log_prob, log_prob_with, log_sum_exp, ScorerParams, UtteranceScores};
use crate::pairing::UtterancePair;
use crate::scene::Example;
use crate::search::{
    beam_search_with, enumerate, index_scenes, is_correct, renormalize_log_probs, search_symbols, triggered_symbols,
    BeamCandidate, BeamConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grammar: Variant,
    pub beam_size: usize,
    pub max_program_len: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub mml_epochs: usize,
    pub rbm_epochs: usize,
    pub iterations: usize,
    /// Longest program the initial exhaustive search considers.
    pub search_budget: usize,
    /// Correct programs kept per utterance by the initial search.
    pub max_correct: usize,
    pub batch_size: usize,
    pub consistency_reward: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grammar: Variant::New,
            beam_size: 10,
            max_program_len: 40,
            tau: DEFAULT_TAU,
            learning_rate: 0.1,
            mml_epochs: 3,
            rbm_epochs: 3,
            iterations: 3,
            search_budget: 14,
            max_correct: 20,
            batch_size: 8,
            consistency_reward: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive")));
        if self.beam_size == 0 {
            return bad("beam_size");
        }
        if self.max_program_len == 0 {
            return bad("max_program_len");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument("tau must lie in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.iterations == 0 {
            return bad("iterations");
        }
        if self.search_budget == 0 {
            return bad("search_budget");
        }
        if self.max_correct == 0 {
            return bad("max_correct");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        Ok(())
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam_size, max_len: self.max_program_len }
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Negative log marginal likelihood of `z` and its gradient.
pub fn mml_loss_and_grad(
    params: &ScorerParams,
    grammar: &Grammar,
    tokens: &[String],
    z: &[Program],
) -> Result<(f64, ScorerParams)> {
    if z.is_empty() {
        return Err(Error::EmptySupport);
    }
    let scores = UtteranceScores::new(params, tokens);
    let lps: Vec<f64> = z.iter().map(|p| log_prob_with(params, grammar, &scores, p.actions())).collect();
    let total = log_sum_exp(&lps);
    let mut grad = ScorerParams::zeros(params.n_actions());
    for (p, lp) in z.iter().zip(&lps) {
        let q = (lp - total).exp();
        accumulate_grad_log_prob(params, grammar, tokens, &scores, p.actions(), -q, &mut grad);
    }
    Ok((-total, grad))
}

/// `sum_z p~(z) r(z)` over a fixed candidate set, where `p~` renormalizes
/// the model over the set, and its exact gradient
/// `sum_z p~(z) (r(z) - r_bar) grad log p(z)`.
pub fn expected_reward_and_grad(
    params: &ScorerParams,
    grammar: &Grammar,
    tokens: &[String],
    programs: &[Program],
    rewards: &[f64],
) -> (f64, ScorerParams) {
    assert_eq!(programs.len(), rewards.len(), "one reward per program");
    let mut grad = ScorerParams::zeros(params.n_actions());
    if programs.is_empty() {
        return (0.0, grad);
    }
    let scores = UtteranceScores::new(params, tokens);
    let lps: Vec<f64> = programs.iter().map(|p| log_prob_with(params, grammar, &scores, p.actions())).collect();
    let weights = renormalize_log_probs(&lps).expect("non-empty");
    let mean: f64 = weights.iter().zip(rewards).map(|(w, r)| w * r).sum();
    for ((p, w), r) in programs.iter().zip(&weights).zip(rewards) {
        let coef = w * (r - mean);
        accumulate_grad_log_prob(params, grammar, tokens, &scores, p.actions(), coef, &mut grad);
    }
    (mean, grad)
}

/// Binary denotation reward for every program.
pub fn denotation_rewards(programs: &[Program], scenes: &[(SceneIndex, bool)]) -> Vec<f64> {
    programs.iter().map(|p| if is_correct(p, scenes) { 1.0 } else { 0.0 }).collect()
}

/// Expected denotation reward over the beam.
pub fn rbm_objective_and_grad(
    params: &ScorerParams,
    grammar: &Grammar,
    example: &Example,
    beam: &[Program],
) -> (f64, ScorerParams) {
    let rewards = denotation_rewards(beam, &index_scenes(&example.scenes));
    expected_reward_and_grad(params, grammar, &example.tokens, beam, &rewards)
}

/// A related utterance's denotation-correct beam, renormalized, with the
/// shared phrase located in both utterances.
#[derive(Clone, Debug)]
pub struct NeighborBeam {
    pub candidates: Vec<BeamCandidate>,
    pub weights: Vec<f64>,
    pub span_x: PhraseSpan,
    pub span_x_prime: PhraseSpan,
}

impl NeighborBeam {
    /// Filters `beam` to the candidates correct on `scenes` and renormalizes.
    pub fn from_beam(
        beam: &[BeamCandidate],
        scenes: &[(SceneIndex, bool)],
        span_x: PhraseSpan,
        span_x_prime: PhraseSpan,
    ) -> NeighborBeam {
        let candidates: Vec<BeamCandidate> = beam.iter().filter(|c| is_correct(&c.program, scenes)).cloned().collect();
        let lps: Vec<f64> = candidates.iter().map(|c| c.log_prob).collect();
        let weights = renormalize_log_probs(&lps).unwrap_or_default();
        NeighborBeam { candidates, weights, span_x, span_x_prime }
    }
}

/// Mean of the per-neighbor rewards.
pub fn multi_neighbor_reward(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("no neighbor rewards to combine".into()));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Consistency reward of one candidate against every neighbor, averaged.
/// No neighbors means no reward.
pub fn candidate_consistency(candidate: &BeamCandidate, neighbors: &[NeighborBeam], tau: f64) -> Result<f64> {
    if neighbors.is_empty() {
        return Ok(0.0);
    }
    let per: Vec<f64> = neighbors
        .iter()
        .map(|n| {
            let ns: Vec<Neighbor<'_>> = n
                .candidates
                .iter()
                .zip(&n.weights)
                .map(|(c, &w)| Neighbor { program: &c.program, attention: &c.attention, weight: w })
                .collect();
            consistency_reward(&candidate.program, &candidate.attention, n.span_x, &ns, n.span_x_prime, tau)
        })
        .collect::<Result<_>>()?;
    multi_neighbor_reward(&per)
}

/// Expected `R + C` over `beam`. Returns the objective, its gradient and the
/// consistency reward of every candidate.
pub fn consistency_objective_and_grad(
    params: &ScorerParams,
    grammar: &Grammar,
    example: &Example,
    beam: &[BeamCandidate],
    neighbors: &[NeighborBeam],
    tau: f64,
) -> Result<(f64, ScorerParams, Vec<f64>)> {
    for n in neighbors {
        n.span_x.check(example.tokens.len())?;
    }
    let programs: Vec<Program> = beam.iter().map(|c| c.program.clone()).collect();
    let r = denotation_rewards(&programs, &index_scenes(&example.scenes));
    let c: Vec<f64> = beam.iter().map(|cand| candidate_consistency(cand, neighbors, tau)).collect::<Result<_>>()?;
    let total: Vec<f64> = r.iter().zip(&c).map(|(a, b)| a + b).collect();
    let (obj, grad) = expected_reward_and_grad(params, grammar, &example.tokens, &programs, &total);
    Ok((obj, grad, c))
}

/// Upper bound on correct programs collected per utterance before ranking.
const SEARCH_POOL: usize = 2000;

/// Initial program sets. For every utterance the search enumerates, up to
/// `budget` actions, the programs built from the utterance's search symbols,
/// keeps those correct on all its scenes and returns the `cap` best ranked
/// by how many triggered terminals they use, then shortest first.
pub fn heuristic_search(grammar: &Grammar, corpus: &[Example], budget: usize, cap: usize) -> Vec<Vec<Program>> {
    const CHUNK: usize = 8192;
    let variant = grammar.variant();
    let mut groups: BTreeMap<Vec<Sym>, Vec<usize>> = BTreeMap::new();
    for (i, ex) in corpus.iter().enumerate() {
        groups.entry(search_symbols(variant, &ex.tokens)).or_default().push(i);
    }
    let mut found: Vec<Vec<Program>> = vec![Vec::new(); corpus.len()];
    for (syms, members) in groups {
        let small = Grammar::from_symbols(variant, &syms);
        let map: Vec<ActionId> = small
            .actions()
            .iter()
            .map(|a| grammar.lookup(a.text()).expect("restricted grammar is a sub-grammar"))
            .collect();
        let scenes: Vec<Vec<(SceneIndex, bool)>> = members.iter().map(|&i| index_scenes(&corpus[i].scenes)).collect();
        let mut pools: Vec<Vec<Program>> = vec![Vec::new(); members.len()];
        let mut programs = enumerate(&small, budget);
        loop {
            let chunk: Vec<Program> = programs.by_ref().take(CHUNK).collect();
            if chunk.is_empty() {
                break;
            }
            pools.par_iter_mut().zip(&scenes).for_each(|(pool, sc)| {
                for p in &chunk {
                    if pool.len() >= SEARCH_POOL {
                        break;
                    }
                    if is_correct(p, sc) {
                        pool.push(p.clone());
                    }
                }
            });
            if pools.iter().all(|p| p.len() >= SEARCH_POOL) {
                break;
            }
        }
        for (pool, &i) in pools.into_iter().zip(&members) {
            let agenda = triggered_symbols(&corpus[i].tokens);
            let mut ranked: Vec<(usize, Program)> = pool
                .into_iter()
                .map(|p| {
                    let actions: Vec<ActionId> = p.actions().iter().map(|a| map[a.index()]).collect();
                    let full = parse_actions(grammar, &actions).expect("mapped programs stay well-typed");
                    let used: BTreeSet<Sym> =
                        full.actions().iter().filter_map(|&a| grammar.action(a).terminal()).collect();
                    (agenda.intersection(&used).count(), full)
                })
                .collect();
            // stable: enumeration order breaks ties within a coverage level
            ranked.sort_by_key(|r| std::cmp::Reverse(r.0));
            found[i] = ranked.into_iter().take(cap).map(|(_, p)| p).collect();
        }
    }
    found
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub iteration: usize,
    pub phase: String,
    pub epoch: usize,
    pub accuracy: f64,
    pub consistency: f64,
    /// MML: mean probability mass on the program sets. RBM: mean expected reward.
    pub mean_reward: f64,
    pub trained_utterances: usize,
}

#[derive(Clone, Debug)]
pub struct PhaseCheckpoint {
    pub label: String,
    pub params: ScorerParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PhaseCheckpoint>,
}

/// Sums per-example gradients in input order and takes one ascent step.
fn apply_batch(params: &mut ScorerParams, grads: Vec<ScorerParams>, lr: f64) {
    let mut total = ScorerParams::zeros(params.n_actions());
    for g in &grads {
        total.add_scaled(g, 1.0);
    }
    params.add_scaled(&total, lr);
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn epoch_metrics(
    params: &ScorerParams,
    grammar: &Grammar,
    corpus: &[Example],
    config: &TrainConfig,
    (iteration, phase, epoch): (usize, &str, usize),
    mean_reward: f64,
    trained: usize,
) -> EpochMetrics {
    let report: EvalReport = evaluate(params, corpus, grammar, config.beam());
    EpochMetrics {
        iteration,
        phase: phase.to_string(),
        epoch,
        accuracy: report.accuracy,
        consistency: report.consistency,
        mean_reward,
        trained_utterances: trained,
    }
}

/// Neighbor lists keyed by the index of `x` in the corpus.
/// Partner index with the spans in the utterance and in the partner.
type NeighborLinks = BTreeMap<usize, Vec<(usize, PhraseSpan, PhraseSpan)>>;

fn neighbor_index(corpus: &[Example], pairs: &[UtterancePair]) -> Result<NeighborLinks> {
    let ids: BTreeMap<&str, usize> = corpus.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut out: BTreeMap<usize, Vec<(usize, PhraseSpan, PhraseSpan)>> = BTreeMap::new();
    for p in pairs {
        let find = |id: &str| {
            ids.get(id).copied().ok_or_else(|| Error::Invariant {
                id: id.to_string(),
                message: "pair refers to an utterance missing from the corpus".into(),
            })
        };
        let (x, xp) = (find(&p.x)?, find(&p.x_prime)?);
        p.span_x.check(corpus[x].tokens.len())?;
        p.span_x_prime.check(corpus[xp].tokens.len())?;
        out.entry(x).or_default().push((xp, p.span_x, p.span_x_prime));
    }
    Ok(out)
}

/// Alternates MML on program sets with reward-based epochs on decoded beams.
/// `pairs` only matter when the configuration enables the consistency reward.
pub fn iterative_train(config: &TrainConfig, corpus: &[Example], pairs: &[UtterancePair]) -> Result<TrainOutcome> {
    config.validate()?;
    let grammar = Grammar::build(config.grammar);
    let scenes: Vec<Vec<(SceneIndex, bool)>> = corpus.iter().map(|e| index_scenes(&e.scenes)).collect();
    let neighbors = if config.consistency_reward { neighbor_index(corpus, pairs)? } else { BTreeMap::new() };
    let mut params = ScorerParams::for_grammar(&grammar);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step_seed = 0u64;
    let mut next_seed = || {
        step_seed += 1;
        mix_seed(config.seed, step_seed)
    };

    let mut z_sets = heuristic_search(&grammar, corpus, config.search_budget, config.max_correct);
    if z_sets.iter().all(|z| z.is_empty()) {
        return Err(Error::NothingToTrain(format!(
            "no program of at most {} actions is correct for any of the {} utterances",
            config.search_budget,
            corpus.len()
        )));
    }

    for iteration in 0..config.iterations {
        if iteration > 0 {
            let decoded: Vec<Vec<Program>> = corpus
                .par_iter()
                .zip(&scenes)
                .map(|(ex, sc)| {
                    let scores = UtteranceScores::new(&params, &ex.tokens);
                    beam_search_with(&params, &grammar, &scores, config.beam())
                        .candidates
                        .into_iter()
                        .map(|c| c.program)
                        .filter(|p| is_correct(p, sc))
                        .collect()
                })
                .collect();
            for (z, fresh) in z_sets.iter_mut().zip(decoded) {
                if !fresh.is_empty() {
                    *z = fresh;
                }
            }
        }
        let trainable: Vec<usize> = (0..corpus.len()).filter(|&i| !z_sets[i].is_empty()).collect();

        // phase A: maximum marginal likelihood on the program sets
        for epoch in 0..config.mml_epochs {
            let order = shuffled(trainable.len(), next_seed());
            let mut mass = 0.0;
            for batch in order.chunks(config.batch_size) {
                let results: Vec<(f64, ScorerParams)> = batch
                    .par_iter()
                    .map(|&k| {
                        let i = trainable[k];
                        let (loss, g) = mml_loss_and_grad(&params, &grammar, &corpus[i].tokens, &z_sets[i])
                            .expect("trainable utterances have programs");
                        (loss, g)
                    })
                    .collect();
                let mut grads = Vec::with_capacity(results.len());
                for (loss, mut g) in results {
                    mass += (-loss).exp();
                    // descend on the loss
                    g.scale(-1.0);
                    grads.push(g);
                }
                apply_batch(&mut params, grads, config.learning_rate);
            }
            let mean = if trainable.is_empty() { 0.0 } else { mass / trainable.len() as f64 };
            metrics.push(epoch_metrics(
                &params,
                &grammar,
                corpus,
                config,
                (iteration, "mml", epoch),
                mean,
                trainable.len(),
            ));
        }
        checkpoints.push(PhaseCheckpoint { label: format!("iter{iteration}-mml"), params: params.clone() });

        // phase B: expected reward over decoded beams, optionally with the
        // consistency reward from related utterances
        for epoch in 0..config.rbm_epochs {
            let beams: Vec<Vec<BeamCandidate>> = corpus
                .par_iter()
                .map(|ex| {
                    let scores = UtteranceScores::new(&params, &ex.tokens);
                    beam_search_with(&params, &grammar, &scores, config.beam()).candidates
                })
                .collect();
            let neighbor_beams: Vec<Vec<NeighborBeam>> = (0..corpus.len())
                .map(|i| {
                    neighbors
                        .get(&i)
                        .map(|list| {
                            list.iter()
                                .map(|&(j, sx, sxp)| NeighborBeam::from_beam(&beams[j], &scenes[j], sx, sxp))
                                .collect()
                        })
                        .unwrap_or_default()
                })
                .collect();
            let order = shuffled(corpus.len(), next_seed());
            let mut reward = 0.0;
            for batch in order.chunks(config.batch_size) {
                let results: Vec<Result<(f64, ScorerParams)>> = batch
                    .par_iter()
                    .map(|&i| {
                        let (obj, g, _) = consistency_objective_and_grad(
                            &params,
                            &grammar,
                            &corpus[i],
                            &beams[i],
                            &neighbor_beams[i],
                            config.tau,
                        )?;
                        Ok((obj, g))
                    })
                    .collect();
                let mut grads = Vec::with_capacity(results.len());
                for r in results {
                    let (obj, g) = r?;
                    reward += obj;
                    grads.push(g);
                }
                apply_batch(&mut params, grads, config.learning_rate);
            }
            let mean = if corpus.is_empty() { 0.0 } else { reward / corpus.len() as f64 };
            metrics.push(epoch_metrics(
                &params,
                &grammar,
                corpus,
                config,
                (iteration, "rbm", epoch),
                mean,
                corpus.len(),
            ));
        }
        checkpoints.push(PhaseCheckpoint { label: format!("iter{iteration}-rbm"), params: params.clone() });
    }
    Ok(TrainOutcome { params, metrics, checkpoints })
}

/// Writes every phase checkpoint, the final weights and `metrics.jsonl`.
pub fn write_outcome(dir: &Path, grammar: &Grammar, outcome: &TrainOutcome) -> Result<()> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for c in &outcome.checkpoints {
        let p = dir.join(format!("{}.json", c.label));
        std::fs::write(&p, crate::model::params_to_json(&c.params, grammar)).map_err(io(&p))?;
    }
    let p = dir.join("final.json");
    std::fs::write(&p, crate::model::params_to_json(&outcome.params, grammar)).map_err(io(&p))?;
    let mut lines = String::new();
    for m in &outcome.metrics {
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
    }
    let p = dir.join("metrics.jsonl");
    std::fs::write(&p, lines).map_err(io(&p))?;
    Ok(())
}
