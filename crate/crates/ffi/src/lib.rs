//! C ABI over the conspar toolkit.
//!
//! Every fallible call returns a [`ConsparStatus`]; on failure a message is
//! kept per thread and can be read with [`conspar_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_load` calls and released by the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use conspar::consistency::{pair_consistency, RelevantActionSet};
use conspar::eval::evaluate;
use conspar::executor::execute;
use conspar::generator::{builtin_utterance_templates, generate_corpus};
use conspar::language::{parse_text, ActionId, Grammar, Program, Variant};
use conspar::model::{load_checkpoint, ScorerParams};
use conspar::scene::{load_corpus, tokenize, Example};
use conspar::search::{beam_search, BeamConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsparStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Data = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    NoResult = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsparVariant {
    Old = 0,
    New = 1,
}

impl From<ConsparVariant> for Variant {
    fn from(v: ConsparVariant) -> Self {
        match v {
            ConsparVariant::Old => Variant::Old,
            ConsparVariant::New => Variant::New,
        }
    }
}

/// A typed grammar over one of the two languages.
pub struct ConsparGrammar(Grammar);

/// Utterances with their labelled scenes.
pub struct ConsparCorpus(Vec<Example>);

/// Trained scorer weights and the language they belong to.
pub struct ConsparModel {
    grammar: Grammar,
    params: ScorerParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ConsparStatus, String);

impl From<conspar::Error> for Failure {
    fn from(e: conspar::Error) -> Self {
        use conspar::Error as E;
        let status = match &e {
            E::Io { .. } => ConsparStatus::Io,
            E::Parse { .. }
            | E::Syntax { .. }
            | E::UnknownAction(_)
            | E::IllTyped { .. }
            | E::Truncated { .. }
            | E::Trailing { .. } => ConsparStatus::Parse,
            E::InvalidArgument(_) | E::SpanOutOfRange { .. } => ConsparStatus::InvalidArgument,
            _ => ConsparStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: ConsparStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConsparStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ConsparStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ConsparStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(ConsparStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ConsparStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(ConsparStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(ConsparStatus::NullPointer, format!("{name} is null")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn conspar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn conspar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out_grammar` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn conspar_grammar_new(
    variant: ConsparVariant,
    out_grammar: *mut *mut ConsparGrammar,
) -> ConsparStatus {
    guard(|| {
        let slot = out(out_grammar, "out_grammar")?;
        *slot = Box::into_raw(Box::new(ConsparGrammar(Grammar::build(variant.into()))));
        Ok(())
    })
}

/// # Safety
/// `grammar` must come from `conspar_grammar_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn conspar_grammar_free(grammar: *mut ConsparGrammar) {
    if !grammar.is_null() {
        drop(Box::from_raw(grammar));
    }
}

/// Number of production rules.
///
/// # Safety
/// `grammar` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn conspar_grammar_num_actions(
    grammar: *const ConsparGrammar,
    out_n: *mut usize,
) -> ConsparStatus {
    guard(|| {
        let g = handle(grammar, "grammar")?;
        *out(out_n, "out_n")? = g.0.num_actions();
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out_corpus` writable.
#[no_mangle]
pub unsafe extern "C" fn conspar_corpus_load(
    path: *const c_char,
    out_corpus: *mut *mut ConsparCorpus,
) -> ConsparStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_corpus, "out_corpus")?;
        let corpus = load_corpus(path)?;
        *slot = Box::into_raw(Box::new(ConsparCorpus(corpus)));
        Ok(())
    })
}

/// Synthetic corpus of `n` utterances drawn from `seed`.
///
/// # Safety
/// `out_corpus` must be writable.
#[no_mangle]
pub unsafe extern "C" fn conspar_corpus_generate(
    seed: u64,
    n: usize,
    out_corpus: *mut *mut ConsparCorpus,
) -> ConsparStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        let corpus = generate_corpus(seed, n, &builtin_utterance_templates())?;
        *slot = Box::into_raw(Box::new(ConsparCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn conspar_corpus_free(corpus: *mut ConsparCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn conspar_corpus_len(corpus: *const ConsparCorpus, out_len: *mut usize) -> ConsparStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        *out(out_len, "out_len")? = c.0.len();
        Ok(())
    })
}

fn parse_program(g: &Grammar, text: &str) -> Result<Program, Failure> {
    Ok(parse_text(g, text)?)
}

/// Evaluates `program` on every scene of utterance `index`. Writes up to
/// `cap` results into `out_values` and the scene count into `out_len`;
/// fails with `BufferTooSmall` when `cap` is short.
///
/// # Safety
/// Handles must be live; `out_values` must hold `cap` bools.
#[no_mangle]
pub unsafe extern "C" fn conspar_execute(
    grammar: *const ConsparGrammar,
    program: *const c_char,
    corpus: *const ConsparCorpus,
    index: usize,
    out_values: *mut bool,
    cap: usize,
    out_len: *mut usize,
) -> ConsparStatus {
    guard(|| {
        let g = handle(grammar, "grammar")?;
        let c = handle(corpus, "corpus")?;
        let text = str_arg(program, "program")?;
        let len = out(out_len, "out_len")?;
        let p = parse_program(&g.0, text)?;
        let ex =
            c.0.get(index)
                .ok_or_else(|| fail(ConsparStatus::OutOfRange, format!("utterance {index} of {}", c.0.len())))?;
        *len = ex.scenes.len();
        if cap < ex.scenes.len() {
            return Err(fail(ConsparStatus::BufferTooSmall, format!("{} scenes, room for {cap}", ex.scenes.len())));
        }
        if out_values.is_null() {
            return Err(fail(ConsparStatus::NullPointer, "out_values is null"));
        }
        let dst = std::slice::from_raw_parts_mut(out_values, cap);
        for (d, (scene, _)) in dst.iter_mut().zip(&ex.scenes) {
            *d = execute(&p, scene);
        }
        Ok(())
    })
}

/// F1 between two sets of action ids. Duplicates are ignored.
///
/// # Safety
/// `a` and `b` must point to `a_len` and `b_len` ids (either may be null when its length is 0).
#[no_mangle]
pub unsafe extern "C" fn conspar_pair_consistency(
    a: *const u16,
    a_len: usize,
    b: *const u16,
    b_len: usize,
    out_f1: *mut f64,
) -> ConsparStatus {
    guard(|| {
        let set = |p: *const u16, n: usize, name: &str| -> Result<RelevantActionSet, Failure> {
            if n == 0 {
                return Ok(RelevantActionSet::new());
            }
            if p.is_null() {
                return Err(fail(ConsparStatus::NullPointer, format!("{name} is null")));
            }
            Ok(std::slice::from_raw_parts(p, n).iter().map(|&i| ActionId(i)).collect())
        };
        let (sa, sb) = (set(a, a_len, "a")?, set(b, b_len, "b")?);
        *out(out_f1, "out_f1")? = pair_consistency(&sa, &sb);
        Ok(())
    })
}

/// Loads a checkpoint written by `conspar train`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn conspar_model_load(path: *const c_char, out_model: *mut *mut ConsparModel) -> ConsparStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_model, "out_model")?;
        let (variant, params) = load_checkpoint(path)?;
        *slot = Box::into_raw(Box::new(ConsparModel { grammar: Grammar::build(variant), params }));
        Ok(())
    })
}

/// An untrained model (all weights zero).
///
/// # Safety
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn conspar_model_new(
    variant: ConsparVariant,
    out_model: *mut *mut ConsparModel,
) -> ConsparStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let grammar = Grammar::build(variant.into());
        let params = ScorerParams::for_grammar(&grammar);
        *slot = Box::into_raw(Box::new(ConsparModel { grammar, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn conspar_model_free(model: *mut ConsparModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Top-1 program for `utterance`, nul-terminated in `buf`. `out_needed`
/// receives the size including the terminator, also when `cap` is short.
///
/// # Safety
/// `model` must be live; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn conspar_model_parse(
    model: *const ConsparModel,
    utterance: *const c_char,
    beam_size: usize,
    max_len: usize,
    buf: *mut c_char,
    cap: usize,
    out_needed: *mut usize,
) -> ConsparStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let text = str_arg(utterance, "utterance")?;
        let needed = out(out_needed, "out_needed")?;
        if beam_size == 0 || max_len == 0 {
            return Err(fail(ConsparStatus::InvalidArgument, "beam_size and max_len must be positive"));
        }
        let beam = beam_search(&m.params, &m.grammar, &tokenize(text), BeamConfig { beam_size, max_len });
        let best = beam.best().ok_or_else(|| fail(ConsparStatus::NoResult, "no complete program within max_len"))?;
        let s = best.program.to_string();
        *needed = s.len() + 1;
        if cap < s.len() + 1 {
            return Err(fail(ConsparStatus::BufferTooSmall, format!("need {} bytes, have {cap}", s.len() + 1)));
        }
        if buf.is_null() {
            return Err(fail(ConsparStatus::NullPointer, "buf is null"));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// Accuracy over scenes and consistency over utterances of the model's
/// top-1 programs on `corpus`.
///
/// # Safety
/// Handles must be live; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn conspar_model_evaluate(
    model: *const ConsparModel,
    corpus: *const ConsparCorpus,
    beam_size: usize,
    max_len: usize,
    out_accuracy: *mut f64,
    out_consistency: *mut f64,
) -> ConsparStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        let acc = out(out_accuracy, "out_accuracy")?;
        let cons = out(out_consistency, "out_consistency")?;
        if beam_size == 0 || max_len == 0 {
            return Err(fail(ConsparStatus::InvalidArgument, "beam_size and max_len must be positive"));
        }
        let r = evaluate(&m.params, &c.0, &m.grammar, BeamConfig { beam_size, max_len });
        *acc = r.accuracy;
        *cons = r.consistency;
        Ok(())
    })
}
