//! The generated header must compile as C and C++ and link against the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include "hardboost.h"
#include <stdio.h>

int main(void) {
    double v = 0.0;
    if (hb_margin_logit(0.0, 1.0, 0.0, 0.35, 30.0, true, &v) != HB_STATUS_OK) return 1;
    if (v < 29.64 || v > 29.66) return 2;
    HbDataset *ds = NULL;
    if (hb_dataset_load("/nonexistent", &ds) != HB_STATUS_DATA) return 3;
    if (hb_last_error() == NULL) return 4;
    uint64_t ids[2] = {1, 2};
    HbWeightTable *t = NULL;
    if (hb_weight_table_new(ids, 2, 0.1, &t) != HB_STATUS_OK) return 5;
    if (hb_weight_table_len(t) != 2) return 6;
    hb_weight_table_free(t);
    printf("%s\n", hb_version());
    return 0;
}
"#;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

/// Directory holding `libhardboost_ffi.a` for the current profile.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = tempfile::tempdir().unwrap();
    for (compiler, file) in [("cc", "t.c"), ("c++", "t.cpp")] {
        let src = dir.path().join(file);
        std::fs::write(&src, PROGRAM).unwrap();
        let status = Command::new(compiler)
            .arg("-fsyntax-only")
            .arg("-Wall")
            .arg("-Werror")
            .arg("-I")
            .arg(header_dir())
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "{compiler} rejected the header");
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = lib_dir().join("libhardboost_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    let exe = dir.path().join("t");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
