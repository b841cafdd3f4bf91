//! The generated header must stand alone as C and C++.

use std::path::PathBuf;
use std::process::Command;

fn header_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/smcguard.h")
}

fn syntax_check(compiler: &str, lang: &str) -> Option<bool> {
    let probe = Command::new(compiler).arg("--version").output().ok()?;
    if !probe.status.success() {
        return None;
    }
    let out = Command::new(compiler)
        .args(["-x", lang, "-fsyntax-only", "-Wall", "-Werror"])
        .arg(header_path())
        .output()
        .ok()?;
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    Some(out.status.success())
}

#[test]
fn header_exists_and_declares_the_surface() {
    let text = std::fs::read_to_string(header_path()).expect("header generated");
    for symbol in [
        "smcg_version",
        "smcg_checksum",
        "smcg_reachable_ops",
        "smcg_guard_new",
        "smcg_guard_free",
        "smcg_guard_register_static",
        "smcg_guard_precompute",
        "smcg_guard_verify",
        "smcg_guard_reset",
        "SMCG_STATUS_OK",
        "smcg_verdict",
    ] {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    match syntax_check("cc", "c") {
        Some(ok) => assert!(ok, "header failed C syntax check"),
        None => eprintln!("no C compiler on PATH, skipping"),
    }
    match syntax_check("c++", "c++") {
        Some(ok) => assert!(ok, "header failed C++ syntax check"),
        None => eprintln!("no C++ compiler on PATH, skipping"),
    }
}
