use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_meso-rmt"));
    c.env_remove("MESO_RMT_THREADS");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn density_wigner_is_semicircle_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["density", "--check", "--set", "n=200", "--set", "density.n_points=301"];
    let o = run(&args, &a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS semicircle_bulk"));
    assert_eq!(code(&run(&args, &b)), 0);
    for f in ["density.csv", "density.json", "density.svg", "manifest.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let csv = std::fs::read_to_string(a.join("density.csv")).unwrap();
    assert!(csv.starts_with("energy,rho,in_bulk\n"));
    assert_eq!(csv.lines().count(), 302);
    let side = json(&a.join("density.json"));
    // rho_sc crosses the 0.05 threshold at sqrt(4 - (0.1 pi)^2), then kappa = 0.1 is removed
    let edge = (4.0 - (0.1 * std::f64::consts::PI).powi(2)).sqrt() - 0.1;
    let bulk = side["density"]["bulk_intervals"][0].as_array().unwrap().clone();
    assert!((bulk[0].as_f64().unwrap() + edge).abs() < 0.02);
    assert!((bulk[1].as_f64().unwrap() - edge).abs() < 0.02);
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "density");
    assert_eq!(m["config"]["n"], 200);
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(files.contains(&"density.csv") && files.contains(&"density.svg"));
    assert!(m["files"][0]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["stability", "--set", "n=40", "--set", "stability.re_z.points=3", "--set", "stability.re_zeta.points=3"];
    let one = bin().args(args).arg("--out").arg(dir.path().join("one")).env("MESO_RMT_THREADS", "1").output().unwrap();
    assert_eq!(code(&one), 0, "{}", String::from_utf8_lossy(&one.stderr));
    let two = run(&args, &dir.path().join("two"));
    assert_eq!(code(&two), 0);
    let f = "stability.json";
    assert_eq!(std::fs::read(dir.path().join("one").join(f)).unwrap(), std::fs::read(dir.path().join("two").join(f)).unwrap());
}

#[test]
fn invalid_profile_document_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let prof = dir.path().join("profile.json");
    std::fs::write(&prof, "{\"kind\": \"constant\", \"n\": ").unwrap();
    let o = run(&["density", "--set", &format!("profile_file=\"{}\"", prof.display())], &dir.path().join("o"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile.json"));

    std::fs::write(&prof, "{\"kind\": \"constant\", \"n\": 50, \"c_sup\": 0.5}").unwrap();
    assert_eq!(code(&run(&["density", "--set", &format!("profile_file=\"{}\"", prof.display())], &dir.path().join("o"))), 2);

    std::fs::write(&prof, "{\"kind\": \"constant\", \"n\": 50}").unwrap();
    let o = run(&["density", "--set", &format!("profile_file=\"{}\"", prof.display())], &dir.path().join("ok"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&dir.path().join("ok/manifest.json"))["config"]["n"], 50);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"density\": {\"points\": 3}}").unwrap();
    assert_eq!(code(&run(&["density", "-c", cfg.to_str().unwrap()], &dir.path().join("o"))), 2);
    std::fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&run(&["density", "-c", cfg.to_str().unwrap()], &dir.path().join("o"))), 2);
    assert_eq!(code(&run(&["density", "--set", "density.n_points"], &dir.path().join("o"))), 2);
    assert_eq!(code(&run(&["density", "--set", "density.e_min=5"], &dir.path().join("o"))), 2);
    assert_eq!(code(&run(&["density", "--set", "law.beta=3"], &dir.path().join("o"))), 2);
    let o = bin().args(["density", "--out"]).arg(dir.path().join("o")).env("MESO_RMT_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&bin().arg("no-such-command").output().unwrap()), 2);
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"n\": 64, \"profile\": {\"kind\": \"smooth-kernel\"}, \"density\": {\"n_points\": 101}}").unwrap();
    let o = run(&["density", "-c", cfg.to_str().unwrap(), "--set", "density.e_max=2.5"], &dir.path().join("o"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("o/manifest.json"));
    assert_eq!(m["config"]["n"], 64);
    assert_eq!(m["config"]["profile"]["kind"], "smooth-kernel");
    assert_eq!(m["config"]["density"]["n_points"], 101);
    assert_eq!(m["config"]["density"]["e_max"], 2.5);
    assert_eq!(m["config"]["density"]["e_min"], -3.0);
}

#[test]
fn stability_grid_records_failures_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let args = [
        "stability",
        "--set",
        "n=64",
        "--set",
        "stability.re_z={\"min\": -2.5, \"max\": 0.0, \"points\": 2}",
        "--set",
        "stability.re_zeta={\"min\": 0.0, \"max\": 0.0, \"points\": 1}",
    ];
    let o = run(&args, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&out.join("stability.json"));
    let cells = rep["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0]["in_bulk"], false);
    assert_eq!(cells[0]["status"], "separation_failure");
    assert!(cells[0]["error"].as_str().unwrap().contains("annulus"));
    assert!(cells[0]["gap"].as_f64().unwrap() >= 0.05);
    assert_eq!(cells[1]["status"], "ok");
    assert!(cells[1]["report"]["quadrature_nodes"].as_u64().unwrap() > 0);
    // the failing cell lies outside the bulk, so the gates still pass
    let mut with_check = args.to_vec();
    with_check.push("--check");
    assert_eq!(code(&run(&with_check, &dir.path().join("c"))), 0);
}

#[test]
fn stability_wigner_grid_passes_gates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        &[
            "stability",
            "--check",
            "--set",
            "n=64",
            "--set",
            "stability.re_z={\"min\": -3.0, \"max\": 1.0, \"points\": 5}",
            "--set",
            "stability.re_zeta={\"min\": -1.0, \"max\": 1.0, \"points\": 3}",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let rep = json(&out.join("stability.json"));
    for c in rep["cells"].as_array().unwrap() {
        if c["status"] == "ok" {
            let r = &c["report"];
            for key in ["z", "zeta", "lambda1", "gap", "r", "delta", "smallest_eig", "restricted_inverse_norm", "pi_one_ratio"] {
                assert!(!r[key].is_null(), "missing {key}");
            }
            assert!(r["quadrature_nodes"].as_u64().unwrap() > 0);
            if c["in_bulk"] == true {
                assert!(r["gap"].as_f64().unwrap() >= 0.05);
            }
        }
    }
    assert!(rep["cells"].as_array().unwrap().iter().any(|c| c["in_bulk"] == false));
    for f in ["gap.svg", "restricted_norm.svg", "checks.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn variance_of_zero_function_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["variance", "--set", "n=200", "--set", "variance.test_function.base={\"family\": \"zero\"}"], &dir.path().join("o"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("v_kernel = 0.0000000000e0"), "{s}");
    assert!(s.contains("v_hhalf  = 0.0000000000e0"), "{s}");
    assert!(s.contains("relative discrepancy"));
    let r = json(&dir.path().join("o/variance.json"));
    assert_eq!(r["report"]["v_kernel"], 0.0);
    assert_eq!(r["report"]["v_hhalf"], 0.0);

    let o = run(
        &[
            "variance",
            "--check",
            "--set",
            "n=200",
            "--set",
            "variance.test_function.base={\"family\": \"zero\"}",
            "--set",
            "variance.max_discrepancy=-1",
        ],
        &dir.path().join("o"),
    );
    assert_eq!(code(&o), 4);
}

#[test]
fn clt_beta_two_halves_the_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["clt", "--set", "n=120", "--set", "clt.n_samples=200", "--set", "clt.test_function.eta0=0.2"];
    let mut v = Vec::new();
    for beta in [1, 2] {
        let out = dir.path().join(format!("b{beta}"));
        let o = bin().args(common).args(["--set", &format!("law.beta={beta}"), "--out"]).arg(&out).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r = json(&out.join("clt.json"));
        for key in [
            "config",
            "sample_variance",
            "stderr",
            "predicted_variance_kernel",
            "predicted_variance_hhalf",
            "ks_stat",
            "ks_p",
            "skewness",
            "kurtosis",
        ] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        let csv = std::fs::read_to_string(out.join("clt_statistics.csv")).unwrap();
        assert!(csv.starts_with("sample,trace,centered\n"));
        assert_eq!(csv.lines().count(), 201);
        assert!(std::fs::read_to_string(out.join("clt_histogram.svg")).unwrap().contains("<polyline"));
        v.push(r["predicted_variance_hhalf"].as_f64().unwrap());
    }
    assert!((v[0] / v[1] - 2.0).abs() < 1e-12);
}

#[test]
fn local_law_writes_slope_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        &[
            "local-law",
            "--set",
            "local_law.n_values=[32, 48, 64, 96]",
            "--set",
            "local_law.samples_per_n=3",
            "--set",
            "local_law.random_probes=8",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("local_law.csv")).unwrap();
    assert!(csv.starts_with("n,err_entrywise,err_averaged,err_T,psi,theta\n"));
    assert_eq!(csv.lines().count(), 5);
    let fit = json(&out.join("local_law_fit.json"));
    assert!(fit["fitted_slopes"]["entrywise"]["slope"].is_number());
    assert!(out.join("local_law.svg").exists());
}

#[test]
fn check_all_collects_every_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
  "n": 120,
  "density": {"n_points": 201},
  "stability": {"re_z": {"min": -0.5, "max": 0.5, "points": 2}, "re_zeta": {"min": -0.5, "max": 0.5, "points": 2}},
  "local_law": {"n_values": [32, 48, 64, 96], "samples_per_n": 3, "random_probes": 8},
  "variance": {"test_function": {"base": {"family": "zero"}}},
  "clt": {"n_samples": 200, "test_function": {"base": {"family": "bump"}, "eta0": 0.2}}
}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&["check-all", "-c", cfg.to_str().unwrap()], &out);
    let code = code(&o);
    assert!(code == 0 || code == 4, "{}", String::from_utf8_lossy(&o.stderr));
    let checks = json(&out.join("checks.json"));
    let names: Vec<&str> = checks.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for prefix in ["density.", "stability.", "local-law.", "variance.", "clt."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "no {prefix} gate in {names:?}");
    }
    let all_pass = checks.as_array().unwrap().iter().all(|c| c["passed"] == true);
    assert_eq!(code == 0, all_pass);
    for f in ["density/density.csv", "stability/gap.svg", "local-law/local_law.csv", "variance/variance.json", "clt/clt.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "check-all");
    assert!(m["files"].as_array().unwrap().len() >= 10);
}
