use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use fofe_ner::cli::{build_model, load_dataset};
use fofe_ner::config::RunConfig;
use fofe_ner::model_io::save_model;
use fofe_ner::trainer;
use fofe_ner_ffi::*;

/// Trains the bundled toy corpus briefly and saves the model.
fn toy_model_file(dir: &Path) -> PathBuf {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/toy");
    let mut config = RunConfig::load(&toy.join("toy.cfg"), &[]).unwrap();
    config.training.max_epochs = 15;
    let train = load_dataset(config.train_file.as_ref().unwrap(), config.tokenization).unwrap();
    let dev = load_dataset(config.dev_file.as_ref().unwrap(), config.tokenization).unwrap();
    let model = build_model(&config, &train).unwrap();
    let outcome = trainer::train(model, &train, &dev, &config.training).unwrap();
    let path = dir.join("model.bin");
    save_model(&outcome.model, &path).unwrap();
    path
}

fn last_error() -> String {
    let p = fner_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn encode_and_decode() {
    let mut code = [0.0; 3];
    let status = unsafe { fner_fofe_encode(0.5, 3, [0usize, 1, 0].as_ptr(), 3, false, code.as_mut_ptr()) };
    assert_eq!(status, FnerStatus::Ok);
    assert_eq!(code, [1.25, 0.5, 0.0]);

    let mut reversed = [0.0; 3];
    let status = unsafe { fner_fofe_encode(0.5, 3, [0usize, 1, 1].as_ptr(), 3, true, reversed.as_mut_ptr()) };
    assert_eq!(status, FnerStatus::Ok);
    assert_eq!(reversed, [1.0, 0.75, 0.0]);

    let (mut out, mut len) = ([usize::MAX; 4], 0usize);
    let status = unsafe { fner_fofe_decode(0.5, code.as_ptr(), 3, out.as_mut_ptr(), 4, &mut len) };
    assert_eq!(status, FnerStatus::Ok);
    assert_eq!(&out[..len], &[0, 1, 0]);

    let status = unsafe { fner_fofe_decode(0.5, code.as_ptr(), 3, out.as_mut_ptr(), 2, &mut len) };
    assert_eq!(status, FnerStatus::BufferTooSmall);
    assert_eq!(len, 3);
}

#[test]
fn errors_set_status_and_message() {
    let mut code = [0.0; 2];
    let status = unsafe { fner_fofe_encode(1.5, 2, [0usize].as_ptr(), 1, false, code.as_mut_ptr()) };
    assert_eq!(status, FnerStatus::InvalidArgument);
    assert!(last_error().contains("forgetting factor"));

    let status = unsafe { fner_fofe_encode(0.5, 2, [5usize].as_ptr(), 1, false, code.as_mut_ptr()) };
    assert_ne!(status, FnerStatus::Ok);

    let (mut out, mut len) = ([0usize; 4], 0usize);
    let status = unsafe { fner_fofe_decode(0.5, [0.5, 0.0].as_ptr(), 2, out.as_mut_ptr(), 4, &mut len) };
    assert_eq!(status, FnerStatus::MalformedCode);

    let mut model: *mut FnerModel = ptr::null_mut();
    let path = CString::new("/no/such/model.bin").unwrap();
    assert_eq!(unsafe { fner_model_load(path.as_ptr(), &mut model) }, FnerStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/no/such/model.bin"));
    assert_eq!(unsafe { fner_model_load(ptr::null(), &mut model) }, FnerStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fner_model_load(junk.as_ptr(), &mut model) }, FnerStatus::ModelFormat);

    let mut spans: *mut FnerSpans = ptr::null_mut();
    assert_eq!(unsafe { fner_tag(ptr::null(), ptr::null(), 0, &mut spans) }, FnerStatus::NullPointer);
    unsafe {
        fner_model_free(ptr::null_mut());
        fner_spans_free(ptr::null_mut());
    }
}

#[test]
fn tag_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(toy_model_file(dir.path()).to_str().unwrap()).unwrap();
    let mut model: *mut FnerModel = ptr::null_mut();
    assert_eq!(unsafe { fner_model_load(path.as_ptr(), &mut model) }, FnerStatus::Ok);

    let labels: Vec<String> = (0..unsafe { fner_model_label_count(model) })
        .map(|i| unsafe { CStr::from_ptr(fner_model_label_name(model, i)) }.to_string_lossy().into_owned())
        .collect();
    assert_eq!(labels.last().map(String::as_str), Some("NONE"));
    assert!(unsafe { fner_model_label_name(model, labels.len()) }.is_null());
    assert_eq!(unsafe { fner_model_threshold(model) }, 0.5);

    let words = ["Alice", "went", "to", "Paris", "."];
    let owned: Vec<CString> = words.iter().map(|w| CString::new(*w).unwrap()).collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
    let mut spans: *mut FnerSpans = ptr::null_mut();
    assert_eq!(unsafe { fner_tag(model, ptrs.as_ptr(), ptrs.len(), &mut spans) }, FnerStatus::Ok);

    let n = unsafe { fner_spans_len(spans) };
    let mut found = Vec::new();
    for i in 0..n {
        let mut s = FnerSpan { start: 0, end: 0, label: 0, probability: 0.0 };
        assert_eq!(unsafe { fner_spans_get(spans, i, &mut s) }, FnerStatus::Ok);
        assert!(s.start < s.end && s.end <= words.len());
        assert!((0.5..=1.0).contains(&s.probability));
        found.push((words[s.start..s.end].join(" "), labels[s.label].clone()));
    }
    let mut s = FnerSpan { start: 0, end: 0, label: 0, probability: 0.0 };
    assert_eq!(unsafe { fner_spans_get(spans, n, &mut s) }, FnerStatus::InvalidArgument);

    // The handle tags exactly as the library does.
    let reference = fofe_ner::model_io::load_model(Path::new(path.to_str().unwrap())).unwrap();
    let expected: Vec<(String, String)> = reference
        .tag(&[fofe_ner::features::Sentence::new(words)])
        .unwrap()
        .into_iter()
        .map(|e| (words[e.span.start..e.span.end].join(" "), e.span.class))
        .collect();
    assert_eq!(found, expected);

    assert_eq!(unsafe { fner_model_set_threshold(model, 2.0) }, FnerStatus::InvalidArgument);
    assert_eq!(unsafe { fner_model_set_threshold(model, 1.0) }, FnerStatus::Ok);
    unsafe {
        fner_spans_free(spans);
        fner_model_free(model);
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "fofe_ner.h"

int main(void) {
    size_t seq[3] = {0, 1, 0};
    double code[3];
    if (fner_fofe_encode(0.5, 3, seq, 3, false, code) != FNER_STATUS_OK) return 1;
    size_t back[8], len = 0;
    if (fner_fofe_decode(0.5, code, 3, back, 8, &len) != FNER_STATUS_OK) return 2;
    if (fner_fofe_encode(2.0, 3, seq, 3, false, code) != FNER_STATUS_INVALID_ARGUMENT) return 3;
    printf("%g %g %g | %zu %zu %zu | %s\n", code[0], code[1], code[2], back[0], back[1], back[2],
           fner_last_error() ? "error set" : "no error");
    return 0;
}
"#;

/// Compiles a C program against the generated header and the shared library.
#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !lib_dir.join("libfofe_ner_ffi.so").exists() {
        eprintln!("shared library not built in {}; skipping", lib_dir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg(format!("-I{}", include.display()))
        .arg(format!("-L{}", lib_dir.display()))
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lfofe_ner_ffi", "-Wall", "-Werror"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1.25 0.5 0 | 0 1 0 | error set\n");
}
