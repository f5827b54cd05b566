use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use conspar_ffi::*;

fn last_error() -> String {
    let p = conspar_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn grammar_and_execution() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(conspar_grammar_new(ConsparVariant::New, &mut g), ConsparStatus::Ok);
        let mut n = 0;
        assert_eq!(conspar_grammar_num_actions(g, &mut n), ConsparStatus::Ok);
        assert_eq!(n, 51);

        let mut c = ptr::null_mut();
        assert_eq!(conspar_corpus_generate(2, 5, &mut c), ConsparStatus::Ok);
        let mut len = 0;
        assert_eq!(conspar_corpus_len(c, &mut len), ConsparStatus::Ok);
        assert_eq!(len, 5);

        let prog = CString::new("boxExists(allBoxes)").unwrap();
        let mut vals = [false; 4];
        let st = conspar_execute(g, prog.as_ptr(), c, 0, vals.as_mut_ptr(), 4, &mut len);
        assert_eq!(st, ConsparStatus::Ok);
        assert_eq!((len, vals), (4, [true; 4]));
        assert!(conspar_last_error().is_null());

        let st = conspar_execute(g, prog.as_ptr(), c, 0, vals.as_mut_ptr(), 2, &mut len);
        assert_eq!((st, len), (ConsparStatus::BufferTooSmall, 4));
        let st = conspar_execute(g, prog.as_ptr(), c, 9, vals.as_mut_ptr(), 4, &mut len);
        assert_eq!(st, ConsparStatus::OutOfRange);
        let bad = CString::new("boxExists(").unwrap();
        assert_eq!(conspar_execute(g, bad.as_ptr(), c, 0, vals.as_mut_ptr(), 4, &mut len), ConsparStatus::Parse);
        assert!(!last_error().is_empty());
        assert_eq!(
            conspar_execute(ptr::null(), prog.as_ptr(), c, 0, vals.as_mut_ptr(), 4, &mut len),
            ConsparStatus::NullPointer
        );
        assert!(last_error().contains("grammar"));

        conspar_corpus_free(c);
        conspar_grammar_free(g);
        conspar_grammar_free(ptr::null_mut());
    }
}

#[test]
fn consistency_f1() {
    let a = [15u16, 3, 5];
    let b = [15u16, 5];
    let mut f = 0.0;
    unsafe {
        assert_eq!(conspar_pair_consistency(a.as_ptr(), 3, b.as_ptr(), 2, &mut f), ConsparStatus::Ok);
        assert!((f - 0.8).abs() < 1e-12);
        assert_eq!(conspar_pair_consistency(ptr::null(), 0, ptr::null(), 0, &mut f), ConsparStatus::Ok);
        assert_eq!(f, 0.0);
        assert_eq!(conspar_pair_consistency(ptr::null(), 2, b.as_ptr(), 2, &mut f), ConsparStatus::NullPointer);
    }
}

#[test]
fn model_parse_evaluate_and_errors() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(conspar_model_new(ConsparVariant::Old, &mut m), ConsparStatus::Ok);
        let utt = CString::new("there is a box").unwrap();
        let mut needed = 0;
        let st = conspar_model_parse(m, utt.as_ptr(), 5, 20, ptr::null_mut(), 0, &mut needed);
        assert_eq!(st, ConsparStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(
            conspar_model_parse(m, utt.as_ptr(), 5, 20, buf.as_mut_ptr(), needed, &mut needed),
            ConsparStatus::Ok
        );
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(text.len() + 1, needed);

        let mut c = ptr::null_mut();
        assert_eq!(conspar_corpus_generate(1, 6, &mut c), ConsparStatus::Ok);
        let (mut acc, mut cons) = (0.0, 0.0);
        assert_eq!(conspar_model_evaluate(m, c, 5, 20, &mut acc, &mut cons), ConsparStatus::Ok);
        assert!((0.0..=1.0).contains(&acc) && cons <= acc);
        assert_eq!(conspar_model_evaluate(m, c, 0, 20, &mut acc, &mut cons), ConsparStatus::InvalidArgument);

        let missing = CString::new("/nonexistent/model.json").unwrap();
        let mut m2 = ptr::null_mut();
        assert_eq!(conspar_model_load(missing.as_ptr(), &mut m2), ConsparStatus::Io);
        assert!(m2.is_null());
        assert_eq!(conspar_corpus_load(missing.as_ptr(), &mut c as *mut _), ConsparStatus::Io);

        conspar_corpus_free(c);
        conspar_model_free(m);
        assert!(!CStr::from_ptr(conspar_version()).to_str().unwrap().is_empty());
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("conspar.h")
}

#[test]
fn header_declares_the_whole_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for f in [
        "conspar_last_error",
        "conspar_version",
        "conspar_grammar_new",
        "conspar_grammar_free",
        "conspar_corpus_load",
        "conspar_corpus_generate",
        "conspar_execute",
        "conspar_pair_consistency",
        "conspar_model_load",
        "conspar_model_parse",
        "conspar_model_evaluate",
        "CONSPAR_STATUS_BUFFER_TOO_SMALL",
        "typedef struct ConsparModel ConsparModel",
    ] {
        assert!(h.contains(f), "{f} missing from the header");
    }
}

/// Compiles and runs a C program against the static library when a C
/// compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libconspar_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let bin = tmp.join("conspar_smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("smoke.c");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(env!("CARGO_PKG_VERSION")));
}
