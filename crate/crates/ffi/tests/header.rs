use std::path::Path;
use std::process::Command;

const EXPORTS: [&str; 17] = [
    "ldm_version",
    "ldm_last_error",
    "ldm_entropy_knn",
    "ldm_entropy_kde",
    "ldm_entropy_logdet",
    "ldm_source_recovery_score",
    "ldm_affine_probe_r2",
    "ldm_kalman_new",
    "ldm_kalman_loglik",
    "ldm_kalman_free",
    "ldm_config_parse",
    "ldm_config_validate",
    "ldm_config_override",
    "ldm_run",
    "ldm_report_metric",
    "ldm_report_config_hash",
    "ldm_report_free",
];

fn header() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ldm.h");
    std::fs::read_to_string(path).expect("build.rs writes include/ldm.h")
}

#[test]
fn header_declares_every_export() {
    let h = header();
    for name in EXPORTS.iter().chain(&["ldm_config_free"]) {
        assert!(h.contains(&format!("{name}(")), "{name} missing from ldm.h");
    }
    assert!(h.contains("LDM_STATUS_OK = 0"));
    assert!(h.contains("typedef struct LdmKalman LdmKalman;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    let calls: String = EXPORTS.iter().map(|n| format!("  (void)&{n};\n")).collect();
    std::fs::write(&src, format!("#include \"ldm.h\"\nint main(void) {{\n{calls}  return LDM_STATUS_OK;\n}}\n")).unwrap();
    let inc = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
