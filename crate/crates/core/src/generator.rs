//! Deterministic synthetic corpus generation. Utterances come from templates
//! that carry a gold program; scene labels are computed by executing it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::executor::execute;
use crate::language::{parse_actions, parse_text, Grammar, Program, Variant};
use crate::scene::{Color, Example, Obj, Scene, SceneBox, Shape, Size, SCENES_PER_EXAMPLE};

/// Attempts per scene slot before settling for the other denotation.
pub const RETRY_BUDGET: usize = 400;

pub const MAX_OBJECTS_PER_BOX: usize = 8;

/// An utterance pattern and its gold program in the NEW language.
///
/// Placeholders: `{C}`, `{C1}`, `{C2}` colors, `{N}` a number, `{S}` a shape
/// (singular noun) and `{SP}` the same shape as a plural noun. In the program
/// `{S}` names the shape filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceTemplate {
    pub pattern: String,
    pub program: String,
    /// Inclusive range for `{N}`.
    pub numbers: (u8, u8),
    /// Relative sampling weight.
    pub weight: u32,
}

impl UtteranceTemplate {
    pub fn new(pattern: &str, program: &str) -> UtteranceTemplate {
        UtteranceTemplate { pattern: pattern.to_string(), program: program.to_string(), numbers: (1, 3), weight: 1 }
    }

    pub fn numbers(mut self, lo: u8, hi: u8) -> UtteranceTemplate {
        self.numbers = (lo, hi);
        self
    }

    pub fn weight(mut self, w: u32) -> UtteranceTemplate {
        self.weight = w;
        self
    }

    fn slots(&self) -> Vec<&'static str> {
        ["{C1}", "{C2}", "{C}", "{N}", "{SP}", "{S}"]
            .into_iter()
            .filter(|s| self.pattern.contains(s) || self.program.contains(s))
            .collect()
    }

    /// Substitutes `bindings` into the pattern and program.
    pub fn instantiate(&self, bindings: &BTreeMap<&'static str, String>) -> (String, String) {
        let mut text = self.pattern.clone();
        let mut prog = self.program.clone();
        for (k, v) in bindings {
            text = text.replace(k, v);
            prog = prog.replace(k, v);
        }
        if let Some(s) = bindings.get("{S}") {
            text = text.replace("{SP}", &format!("{s}s"));
            prog = prog.replace("{SP}", s);
        }
        (text, prog)
    }

    fn sample_bindings(&self, rng: &mut ChaCha8Rng) -> BTreeMap<&'static str, String> {
        let mut out = BTreeMap::new();
        let slots = self.slots();
        let pick_color = |rng: &mut ChaCha8Rng| Color::ALL[rng.gen_range(0..Color::ALL.len())];
        if slots.contains(&"{C}") {
            out.insert("{C}", pick_color(rng).name().to_string());
        }
        if slots.contains(&"{C1}") {
            let c1 = pick_color(rng);
            let mut c2 = pick_color(rng);
            while c2 == c1 {
                c2 = pick_color(rng);
            }
            out.insert("{C1}", c1.name().to_string());
            out.insert("{C2}", c2.name().to_string());
        }
        if slots.contains(&"{N}") {
            out.insert("{N}", rng.gen_range(self.numbers.0..=self.numbers.1).to_string());
        }
        if slots.contains(&"{S}") || slots.contains(&"{SP}") {
            let s = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            out.insert("{S}", s.name().to_string());
        }
        out
    }

    /// Checks that every binding yields a program valid in the NEW grammar.
    pub fn validate(&self, grammar: &Grammar) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..32 {
            let (_, prog) = self.instantiate(&self.sample_bindings(&mut rng));
            parse_text(grammar, &prog)
                .map_err(|e| Error::InvalidArgument(format!("template `{}`: program `{prog}`: {e}", self.pattern)))?;
        }
        Ok(())
    }
}

/// The default template inventory. Each equivalent-phrase set appears in
/// several sentence contexts; the remaining templates share no such phrase.
pub fn builtin_utterance_templates() -> Vec<UtteranceTemplate> {
    let t = UtteranceTemplate::new;
    vec![
        // COLOR block at the base / the base is COLOR
        t("there is a box with a {C} block at the base", "boxExists(boxFilter(allBoxes, {C}(bottom)))"),
        t("there is a tower where the base is {C}", "boxExists(boxFilter(allBoxes, {C}(bottom)))"),
        t("there is no tower with a {C} block at the base", "notBool(boxExists(boxFilter(allBoxes, {C}(bottom))))"),
        t("there are at least {N} towers where the base is {C}", "boxCountGtEq({N}, boxFilter(allBoxes, {C}(bottom)))")
            .numbers(2, 2),
        // COLOR block at the top / the top is COLOR
        t("there is a box with a {C} block at the top", "boxExists(boxFilter(allBoxes, {C}(top)))"),
        t("there is a tower where the top is {C}", "boxExists(boxFilter(allBoxes, {C}(top)))"),
        t("there is no tower with a {C} block at the top", "notBool(boxExists(boxFilter(allBoxes, {C}(top))))"),
        t(
            "there are at least {N} towers with a {C} block at the top",
            "boxCountGtEq({N}, boxFilter(allBoxes, {C}(top)))",
        )
        .numbers(2, 2),
        // COLOR1 object above a COLOR2 object
        t("there is a {C1} object above a {C2} object", "objExists({C1}(above({C2}(allObjs))))"),
        t("there is a box with a {C1} object above a {C2} object", "boxExists(boxFilter(allBoxes, {C1}(above({C2}))))"),
        t("there is no {C1} object above a {C2} object", "notBool(objExists({C1}(above({C2}(allObjs)))))"),
        // COLOR1 block on / over a COLOR2 block
        t("there is a {C1} block on a {C2} block", "objExists({C1}(above({C2}(allObjs))))"),
        t("there is a tower with a {C1} block over a {C2} block", "boxExists(boxFilter(allBoxes, {C1}(above({C2}))))"),
        t("there is no {C1} block on a {C2} block", "notBool(objExists({C1}(above({C2}(allObjs)))))"),
        // a COLOR tower
        t("there is a {C} tower", "boxExists(boxFilter(boxFilter(allBoxes, objColorCountEq(1)), {C}))"),
        t("there is not a {C} tower", "notBool(boxExists(boxFilter(boxFilter(allBoxes, objColorCountEq(1)), {C})))"),
        t(
            "there is a {C} tower with {N} blocks",
            "boxExists(boxFilter(boxFilter(boxFilter(allBoxes, objColorCountEq(1)), {C}), objectCountEq({N})))",
        )
        .numbers(2, 2),
        // there is (only) one tower / box
        t("there is one tower with exactly {N} blocks", "boxCountEq(1, boxFilter(allBoxes, objectCountEq({N})))")
            .numbers(2, 3),
        t("there is only one box with a {C} item", "boxCountEq(1, boxFilter(allBoxes, {C}))"),
        t("there is one box with a {S}", "boxCountEq(1, boxFilter(allBoxes, {S}))"),
        t("there is only one tower with a {C} block at the top", "boxCountEq(1, boxFilter(allBoxes, {C}(top)))"),
        // there are exactly NUMBER towers / boxes
        t("there are exactly {N} boxes with a {C} item", "boxCountEq({N}, boxFilter(allBoxes, {C}))").numbers(2, 2),
        t("there are exactly {N} towers with a {S}", "boxCountEq({N}, boxFilter(allBoxes, {S}))").numbers(2, 2),
        t(
            "there are exactly {N} towers with a {C} block at the base",
            "boxCountEq({N}, boxFilter(allBoxes, {C}(bottom)))",
        )
        .numbers(2, 2),
        // NUMBER different colors
        t("there are items of {N} different colors", "objColorCountEq({N}, allObjs)").numbers(2, 2),
        t("there is a box with items of {N} different colors", "boxExists(boxFilter(allBoxes, objColorCountEq({N})))")
            .numbers(2, 2),
        t(
            "there is no box with items of {N} different colors",
            "notBool(boxExists(boxFilter(allBoxes, objColorCountEq({N}))))",
        )
        .numbers(2, 2),
        // with NUMBER COLOR items / blocks / objects
        t("there is a box with {N} {C} items", "boxExists(boxFilter(allBoxes, objectCountEq({N})({C})))").numbers(2, 2),
        t("there is a tower with {N} {C} blocks", "boxExists(boxFilter(allBoxes, objectCountEq({N})({C})))")
            .numbers(2, 2),
        t("there is one box with {N} {C} objects", "boxCountEq(1, boxFilter(allBoxes, objectCountEq({N})({C})))")
            .numbers(2, 2),
        // at least NUMBER COLOR items / blocks / objects
        t("there are at least {N} {C} objects", "objectCountGtEq({N}, {C}(allObjs))").numbers(3, 3),
        t("there is a box with at least {N} {C} items", "boxExists(boxFilter(allBoxes, objectCountGtEq({N})({C})))")
            .numbers(3, 3),
        t(
            "there is no tower with at least {N} {C} blocks",
            "notBool(boxExists(boxFilter(allBoxes, objectCountGtEq({N})({C}))))",
        )
        .numbers(3, 3),
        // with / are (only) NUMBER COLOR SHAPE
        t("there is a box with {N} {C} {SP}", "boxExists(boxFilter(allBoxes, objectCountEq({N})({C}({SP}))))")
            .numbers(2, 2),
        t("there are {N} {C} {SP}", "objectCountEq({N}, {C}({SP}(allObjs)))").numbers(2, 2),
        t("there are only {N} {C} {SP}", "objectCountEq({N}, {C}({SP}(allObjs)))").numbers(2, 2),
        // no shared phrase
        t("there is a {C} {S}", "objExists({C}({S}(allObjs)))").weight(6),
        t("there is no {C} {S}", "notBool(objExists({C}({S}(allObjs))))").weight(6),
        t("there are exactly {N} {SP}", "objectCountEq({N}, {S}(allObjs))").numbers(2, 6).weight(6),
        t("there are at most {N} {C} objects", "objectCountLtEq({N}, {C}(allObjs))").numbers(1, 4).weight(6),
        t("every box has a {C} object", "boxCountEq(3, boxFilter(allBoxes, {C}))").weight(6),
        t("there is a {C} object touching the top", "objExists({C}(top(allObjs)))").weight(6),
        t("there are exactly {N} shapes in the image", "objShapeCountEq({N}, allObjs)").numbers(2, 3).weight(6),
        t("there is a box with only {S} objects", "boxExists(boxFilter(boxFilter(allBoxes, objShapeCountEq(1)), {S}))")
            .weight(6),
        t("there is a large {C} object", "objExists(large({C}(allObjs)))").weight(6),
        t("there is a small {S} or a {C} object", "orBool(objExists(small({S}(allObjs))), objExists({C}(allObjs)))")
            .weight(6),
        t("there are at least {N} boxes with a {S}", "boxCountGtEq({N}, boxFilter(allBoxes, {S}))")
            .numbers(2, 3)
            .weight(6),
        t("there is a {S} below a {C} object", "objExists({S}(below({C}(allObjs))))").weight(6),
    ]
}

/// A small deterministic mixer for deriving independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random valid scene: 3 boxes of 1 to 8 objects at distinct positions.
pub fn random_scene(rng: &mut ChaCha8Rng, id: String) -> Scene {
    let boxes = (0..3)
        .map(|_| {
            // favour small boxes so counts and stacking phrases stay informative
            let n = if rng.gen_bool(0.75) { rng.gen_range(1..=4) } else { rng.gen_range(5..=MAX_OBJECTS_PER_BOX) };
            let mut used = std::collections::HashSet::new();
            let mut objects = Vec::with_capacity(n);
            while objects.len() < n {
                let (x, y) = (rng.gen_range(0..100u8), rng.gen_range(0..100u8));
                if !used.insert((x, y)) {
                    continue;
                }
                objects.push(Obj {
                    x,
                    y,
                    color: *Color::ALL.choose(rng).expect("non-empty"),
                    shape: *Shape::ALL.choose(rng).expect("non-empty"),
                    size: *Size::ALL.choose(rng).expect("non-empty"),
                });
            }
            SceneBox { objects }
        })
        .collect();
    Scene { id, boxes }
}

/// A uniformly-stepped random program of at most `max_actions` actions: at
/// every step one action is drawn among those that still leave room to
/// complete every open nonterminal.
pub fn random_program(grammar: &Grammar, rng: &mut ChaCha8Rng, max_actions: usize) -> Result<Program> {
    let root = grammar.root();
    if grammar.min_len(root) > max_actions {
        return Err(Error::InvalidArgument(format!(
            "no program fits in {max_actions} actions; the shortest has {}",
            grammar.min_len(root)
        )));
    }
    let mut actions = Vec::new();
    // open nonterminals, next to expand last
    let mut stack = vec![root];
    let mut reserved = grammar.min_len(root);
    while let Some(nt) = stack.pop() {
        reserved -= grammar.min_len(nt);
        let room = max_actions - actions.len() - reserved;
        let fits: Vec<_> = grammar
            .valid_actions(nt)
            .iter()
            .copied()
            .filter(|&a| grammar.action(a).children().iter().map(|&c| grammar.min_len(c)).sum::<usize>() < room)
            .collect();
        let a = *fits.choose(rng).expect("the shortest expansion always fits");
        actions.push(a);
        for &c in grammar.action(a).children().iter().rev() {
            reserved += grammar.min_len(c);
            stack.push(c);
        }
    }
    parse_actions(grammar, &actions)
}

/// Four scenes, two labelled true and two false when the budget allows.
fn labelled_scenes(program: &Program, id: &str, rng: &mut ChaCha8Rng) -> Vec<(Scene, bool)> {
    let mut wanted = vec![true, true, false, false];
    wanted.truncate(SCENES_PER_EXAMPLE);
    wanted.shuffle(rng);
    let mut out = Vec::with_capacity(SCENES_PER_EXAMPLE);
    let mut unmet = 0;
    for (k, want) in wanted.into_iter().enumerate() {
        let name = format!("{id}-{k}");
        let mut scene = random_scene(rng, name.clone());
        let mut got = execute(program, &scene);
        let mut tries = 1;
        while got != want && tries < RETRY_BUDGET {
            scene = random_scene(rng, name.clone());
            got = execute(program, &scene);
            tries += 1;
        }
        if got != want {
            unmet += 1;
        }
        out.push((scene, got));
    }
    if unmet > 0 {
        log::warn!("{id}: {unmet} scene(s) could not reach the requested denotation; keeping the achieved mix");
    }
    out
}

/// Generates `n` examples. Each example draws from its own sub-seed, so the
/// output is independent of thread scheduling.
pub fn generate_corpus(seed: u64, n: usize, templates: &[UtteranceTemplate]) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::InvalidArgument("the number of utterances must be positive".into()));
    }
    if templates.is_empty() || templates.iter().all(|t| t.weight == 0) {
        return Err(Error::InvalidArgument("the template set is empty".into()));
    }
    let grammar = Grammar::build(Variant::New);
    for t in templates {
        t.validate(&grammar)?;
    }
    let total: u32 = templates.iter().map(|t| t.weight).sum();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let mut r = rng.gen_range(0..total);
            let template = templates
                .iter()
                .find(|t| {
                    if r < t.weight {
                        true
                    } else {
                        r -= t.weight;
                        false
                    }
                })
                .expect("weights cover the draw");
            let (text, prog) = template.instantiate(&template.sample_bindings(&mut rng));
            let program = parse_text(&grammar, &prog)?;
            let id = format!("u{i:04}");
            let scenes = labelled_scenes(&program, &id, &mut rng);
            Ok(Example::new(id, text, scenes))
        })
        .collect()
}
