use std::ffi::{CStr, CString};
use std::ptr;

use ldm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ldm_last_error()) }.to_string_lossy().into_owned()
}

fn gaussian_sample(n: usize, d: usize, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(ldm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn entropy_estimators_match_the_gaussian_entropy() {
    let (n, d) = (4000, 2);
    let x = gaussian_sample(n, d, 3);
    let analytic = d as f64 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let mut h = f64::NAN;
    unsafe {
        assert_eq!(ldm_entropy_logdet(x.as_ptr(), n, d, &mut h), LdmStatus::Ok);
        assert!((h - analytic).abs() < 0.06, "logdet {h}");
        assert_eq!(ldm_entropy_knn(x.as_ptr(), n, d, 3, 2.0, 0.0, &mut h), LdmStatus::Ok);
        assert!((h - analytic).abs() < 0.15, "knn {h}");
        assert_eq!(ldm_entropy_kde(x.as_ptr(), 1000, d, 0.25, &mut h), LdmStatus::Ok);
        assert!(h.is_finite());
    }
}

#[test]
fn null_and_bad_arguments_map_to_status_codes() {
    let mut h = 0.0;
    unsafe {
        assert_eq!(ldm_entropy_knn(ptr::null(), 10, 2, 3, 2.0, 0.0, &mut h), LdmStatus::NullPointer);
        assert!(last_error().contains("data"));
        let x = gaussian_sample(10, 2, 0);
        assert_eq!(ldm_entropy_knn(x.as_ptr(), 10, 2, 3, 2.0, 0.0, ptr::null_mut()), LdmStatus::NullPointer);
        assert_eq!(ldm_entropy_knn(x.as_ptr(), 10, 0, 3, 2.0, 0.0, &mut h), LdmStatus::InvalidArgument);
        assert_eq!(ldm_entropy_knn(x.as_ptr(), 10, 2, 3, 2.0, 1.5, &mut h), LdmStatus::InvalidArgument);
    }
}

#[test]
fn recovery_score_and_probe() {
    let n = 500;
    let s = gaussian_sample(n, 2, 9);
    let swapped: Vec<f64> = s.chunks(2).flat_map(|r| [-2.0 * r[1], r[0] + 1.0]).collect();
    let (mut score, mut r2) = (0.0, 0.0);
    unsafe {
        assert_eq!(ldm_source_recovery_score(swapped.as_ptr(), s.as_ptr(), n, 2, &mut score), LdmStatus::Ok);
        assert_eq!(ldm_affine_probe_r2(swapped.as_ptr(), s.as_ptr(), n, 2, 2, 0, &mut r2), LdmStatus::Ok);
    }
    assert!((score - 1.0).abs() < 1e-9);
    assert!((r2 - 1.0).abs() < 1e-9);
}

#[test]
fn kalman_handle_lifecycle() {
    let f = [0.9, 0.0, 0.0, 0.9];
    let q = [0.1, 0.0, 0.0, 0.1];
    let a = [1.0, 0.0, 0.0, 1.0];
    let r = [0.05, 0.0, 0.0, 0.05];
    let h0 = [0.0, 0.0];
    let p0 = [1.0, 0.0, 0.0, 1.0];
    let mut model: *mut LdmKalman = ptr::null_mut();
    unsafe {
        let st = ldm_kalman_new(2, 2, f.as_ptr(), q.as_ptr(), a.as_ptr(), r.as_ptr(), h0.as_ptr(), p0.as_ptr(), &mut model);
        assert_eq!(st, LdmStatus::Ok);
        assert!(!model.is_null());
        let z = [0.1, -0.2, 0.3, 0.0, 0.2, 0.1];
        let (mut total, mut per) = (0.0, [0.0; 3]);
        assert_eq!(ldm_kalman_loglik(model, z.as_ptr(), 3, &mut total, per.as_mut_ptr()), LdmStatus::Ok);
        assert!((total - per.iter().sum::<f64>()).abs() < 1e-12);
        // first step: z_0 ~ N(0, F P0 Fᵀ + Q + R) = N(0, 0.96 I)
        let v: f64 = 0.81 + 0.1 + 0.05;
        let want = -0.5 * (0.1f64.powi(2) + 0.2f64.powi(2)) / v - v.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((per[0] - want).abs() < 1e-12);
        assert_eq!(ldm_kalman_loglik(model, z.as_ptr(), 3, &mut total, ptr::null_mut()), LdmStatus::Ok);
        ldm_kalman_free(model);
        ldm_kalman_free(ptr::null_mut());

        let bad_q = [-1.0, 0.0, 0.0, 0.1];
        let mut m2: *mut LdmKalman = ptr::null_mut();
        let st = ldm_kalman_new(2, 2, f.as_ptr(), bad_q.as_ptr(), a.as_ptr(), r.as_ptr(), h0.as_ptr(), p0.as_ptr(), &mut m2);
        if st == LdmStatus::Ok {
            let z = [0.0; 2];
            let mut t = 0.0;
            let st = ldm_kalman_loglik(m2, z.as_ptr(), 1, &mut t, ptr::null_mut());
            assert_ne!(st, LdmStatus::Internal);
            ldm_kalman_free(m2);
        } else {
            assert!(m2.is_null());
        }
    }
}

const ICA: &str = r#"
experiment = "ica"
seed = 1

[data]
n_sources = 2
n_samples = 2000
source_family = { kind = "laplace" }

[model]
flavor = "linear_ica"
source = "laplace"
encoder = { kind = "linear" }

[optim]
lr = 0.02
batch = 256
steps = 300
"#;

#[test]
fn config_parse_validate_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = CString::new(ICA).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut cfg: *mut LdmConfig = ptr::null_mut();
    let mut report: *mut LdmReport = ptr::null_mut();
    unsafe {
        assert_eq!(ldm_config_parse(text.as_ptr(), &mut cfg), LdmStatus::Ok, "{}", last_error());
        let mut count = usize::MAX;
        assert_eq!(ldm_config_validate(cfg, &mut count), LdmStatus::Ok);
        assert_eq!(count, 0);
        assert_eq!(ldm_config_override(cfg, 2, -1), LdmStatus::Ok);
        assert_eq!(ldm_run(cfg, out.as_ptr(), &mut report), LdmStatus::Ok, "{}", last_error());
        let name = CString::new("recovery_score").unwrap();
        let mut score = 0.0;
        assert_eq!(ldm_report_metric(report, name.as_ptr(), &mut score), LdmStatus::Ok);
        assert!(score > 0.9, "{score}");
        let missing = CString::new("nope").unwrap();
        assert_eq!(ldm_report_metric(report, missing.as_ptr(), &mut score), LdmStatus::InvalidArgument);
        let hash = CStr::from_ptr(ldm_report_config_hash(report)).to_str().unwrap();
        assert_eq!(hash.len(), 64);
        ldm_report_free(report);
        ldm_config_free(cfg);
    }
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn invalid_config_reports_field() {
    let text = CString::new("experiment = \"nope\"").unwrap();
    let mut cfg: *mut LdmConfig = ptr::null_mut();
    unsafe {
        assert_eq!(ldm_config_parse(text.as_ptr(), &mut cfg), LdmStatus::ConfigInvalid);
        assert!(cfg.is_null());
    }
    assert!(!last_error().is_empty());

    let bad = CString::new(ICA.replace("lr = 0.02", "lr = -1.0")).unwrap();
    unsafe {
        assert_eq!(ldm_config_parse(bad.as_ptr(), &mut cfg), LdmStatus::Ok);
        let mut count = 0;
        assert_eq!(ldm_config_validate(cfg, &mut count), LdmStatus::Ok);
        assert!(count >= 1);
        assert!(last_error().contains("optim.lr"));
        let out = CString::new("/nonexistent/never").unwrap();
        let mut report: *mut LdmReport = ptr::null_mut();
        assert_eq!(ldm_run(cfg, out.as_ptr(), &mut report), LdmStatus::ConfigInvalid);
        assert!(report.is_null());
        ldm_config_free(cfg);
    }
}
