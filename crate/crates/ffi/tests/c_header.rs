use std::path::PathBuf;
use std::process::Command;

// Compiles tests/smoke.c against the generated header and the shared library.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let libdir = deps.parent().unwrap().to_path_buf();
    assert!(libdir.join("libgcdlab_ffi.so").exists(), "shared library not built in {}", libdir.display());
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&libdir)
        .arg(format!("-Wl,-rpath,{}", libdir.display()))
        .args(["-lgcdlab_ffi", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let line = String::from_utf8(run.stdout).unwrap();
    assert!(line.starts_with(env!("CARGO_PKG_VERSION")));
}
