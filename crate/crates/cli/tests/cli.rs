use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnflow::fields::{read_dump, Field, VectorField};
use nnflow_cli::commands::read_diagnostics;
use nnflow_cli::output::RunManifest;
use nnflow_cli::RunConfig;

fn nnflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnflow"))
        .args(args)
        .env("NNFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn trivial_config(out: &Path) -> serde_json::Value {
    serde_json::json!({
        "problem": {
            "d": 2, "extents": [1.0, 1.0], "n": 12, "mass": 1.0, "gamma": 1.5,
            "r": 2.0, "mu0": 1.0, "q": 3.0,
            "f": { "constant": [0.0, 0.0] },
            "g": { "constant": [0.0, 0.0] }
        },
        "ladder": { "kind": "explicit", "rungs": [
            { "alpha": 1e-3, "delta": 0.1, "eps": 0.1, "eta": 0.1 }
        ]},
        "output": { "dir": out }
    })
}

fn forced_config(out: &Path) -> serde_json::Value {
    let mut v = trivial_config(out);
    v["problem"]["f"] = serde_json::json!({ "preset": "vortex-forcing", "amplitude": 1.0 });
    v["problem"]["g"] = serde_json::json!({ "preset": "shear", "amplitude": 0.5 });
    v["ladder"]["rungs"] = serde_json::json!([
        { "alpha": 1e-3, "delta": 0.2, "eps": 0.1, "eta": 0.1 },
        { "alpha": 1e-4, "delta": 0.2, "eps": 0.05, "eta": 0.05 }
    ]);
    v
}

fn write_config(dir: &Path, name: &str, v: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn shipped_configs_round_trip_and_validate() {
    let mut seen = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = RunConfig::load(&path).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{}", path.display());
            assert_eq!(back.hash(), cfg.hash());
            cfg.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn hash_tracks_content() {
    let a: RunConfig = serde_json::from_value(trivial_config(Path::new("x"))).unwrap();
    let mut b = a.clone();
    b.problem.gamma = 1.6;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn admissible_exit_codes() {
    let o = nnflow(&["admissible", "-d", "3", "-r", "2", "--gamma", "3.5"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("gamma_lower = 3\n"));
    assert_eq!(code(&nnflow(&["admissible", "-d", "3", "-r", "2", "--gamma", "3"])), 1);
    assert_eq!(code(&nnflow(&["admissible", "-d", "2", "-r", "2", "--gamma", "1.01"])), 0);
    assert_eq!(code(&nnflow(&["admissible", "-d", "4", "-r", "2", "--gamma", "3"])), 2);
}

#[test]
fn verify_suites() {
    assert_eq!(code(&nnflow(&["verify", "no-such-suite"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("hb.json");
    let o = nnflow(&["verify", "hb-bounds", "--json", json.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("hb-bounds: PASS"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 1);
}

#[test]
fn trivial_solve_writes_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "trivial.json", &trivial_config(&out));
    let o = nnflow(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m.exit_status, "ok");
    assert_eq!(m.rungs.len(), 1);
    assert_eq!(m.config_hash, RunConfig::load(&cfg).unwrap().hash());
    assert!(m.missing(&out).is_empty());
    let u: VectorField =
        read_dump(&mut BufReader::new(fs::File::open(out.join("rung_00/u.bin")).unwrap())).unwrap();
    assert!(u.data().iter().all(|&x| x == 0.0));
    assert_eq!(code(&nnflow(&["report", out.to_str().unwrap()])), 0);
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    let mut fields = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let cfg = write_config(dir.path(), &format!("{name}.json"), &forced_config(&out));
        assert_eq!(code(&nnflow(&["solve", cfg.to_str().unwrap()])), 0);
        csv.push(fs::read(out.join("diagnostics.csv")).unwrap());
        fields.push(fs::read(out.join("rung_01/u.bin")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);
    assert_eq!(fields[0], fields[1]);
    let table = read_diagnostics(&String::from_utf8(csv[0].clone()).unwrap()).unwrap();
    assert_eq!(table.len(), 2);
    assert_eq!(table[&1].values["converged"], 1.0);
}

#[test]
fn report_wide_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", &forced_config(&out));
    assert_eq!(code(&nnflow(&["solve", cfg.to_str().unwrap()])), 0);
    let wide = dir.path().join("wide.csv");
    let o = nnflow(&["report", out.to_str().unwrap(), "--wide", wide.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(wide).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("rung_id,eps,alpha,delta,eta,"));
    assert!(lines[0].contains("weak_residual"));
    fs::remove_file(out.join("rung_00/rho.bin")).unwrap();
    assert_eq!(code(&nnflow(&["report", out.to_str().unwrap()])), 1);
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut bad = trivial_config(&out);
    bad["problem"]["d"] = serde_json::json!(3);
    bad["problem"]["extents"] = serde_json::json!([1.0, 1.0, 1.0]);
    bad["problem"]["f"] = serde_json::json!({ "constant": [0.0, 0.0, 0.0] });
    bad["problem"]["g"] = serde_json::json!({ "constant": [0.0, 0.0, 0.0] });
    let p = write_config(dir.path(), "inadmissible.json", &bad);
    assert_eq!(code(&nnflow(&["solve", p.to_str().unwrap()])), 2);
    assert!(!out.exists());

    let mut unknown = trivial_config(&out);
    unknown["problem"]["viscosity"] = serde_json::json!(1.0);
    let p = write_config(dir.path(), "unknown.json", &unknown);
    assert_eq!(code(&nnflow(&["solve", p.to_str().unwrap()])), 2);

    let p = dir.path().join("broken.json");
    fs::write(&p, "{ not json").unwrap();
    assert_eq!(code(&nnflow(&["solve", p.to_str().unwrap()])), 2);
    assert_eq!(code(&nnflow(&["solve", "/nonexistent/config.json"])), 2);

    let mut rising = trivial_config(&out);
    rising["ladder"]["rungs"] = serde_json::json!([
        { "alpha": 1e-3, "delta": 0.1, "eps": 0.1, "eta": 0.1 },
        { "alpha": 1e-2, "delta": 0.1, "eps": 0.1, "eta": 0.1 }
    ]);
    let p = write_config(dir.path(), "rising.json", &rising);
    assert_eq!(code(&nnflow(&["solve", p.to_str().unwrap()])), 2);
    assert_eq!(code(&nnflow(&["stability-study", p.to_str().unwrap()])), 2);
}

#[test]
fn solver_failure_exit_3_with_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut v = forced_config(&out);
    v["solver"] = serde_json::json!({ "max_iter": 2 });
    let p = write_config(dir.path(), "short.json", &v);
    let o = nnflow(&["solve", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let m = manifest(&out);
    assert_eq!(m.exit_status, "solver-failure");
    assert!(m.failure.is_some());
    assert_eq!(m.rungs.len(), 1);
    assert!(m.missing(&out).is_empty());
    assert_eq!(code(&nnflow(&["report", out.to_str().unwrap()])), 1);
}

#[test]
fn stability_study_constant_family_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    let mut v = forced_config(&out);
    v["study"] = serde_json::json!({ "wavenumbers": [2, 4], "amplitude": 0.0 });
    let p = write_config(dir.path(), "study.json", &v);
    let o = nnflow(&["stability-study", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("stability.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        for x in &f[1..8] {
            assert_eq!(x.parse::<f64>().unwrap(), 0.0, "{r}");
        }
        assert_eq!(f[9], "true");
    }

    let mut v = forced_config(&out);
    v["study"] = serde_json::json!({ "wavenumbers": [1, 2], "amplitude": 0.5 });
    let p = write_config(dir.path(), "study2.json", &v);
    assert_eq!(code(&nnflow(&["stability-study", p.to_str().unwrap()])), 0);
    let text = fs::read_to_string(out.join("stability.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap() > 0.0));

    let p = write_config(dir.path(), "nostudy.json", &forced_config(&out));
    assert_eq!(code(&nnflow(&["stability-study", p.to_str().unwrap()])), 2);
}

#[test]
fn hb_solve_writes_stress_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hb");
    let mut v = forced_config(&out);
    v["ladder"]["rungs"] = serde_json::json!([{ "alpha": 1e-3, "delta": 0.2, "eps": 0.1, "eta": 0.1 }]);
    v["hb"] = serde_json::json!({
        "tau_star": 0.5, "nu": 1.0, "eps_reg": [0.1, 0.01],
        "alpha_hb": 1.0, "rho_check": 1.0
    });
    let p = write_config(dir.path(), "hb.json", &v);
    let o = nnflow(&["solve", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert!(m.rungs[0].paths.iter().any(|p| p.ends_with("plastic.bin")));
    let table = read_diagnostics(&fs::read_to_string(out.join("diagnostics.csv")).unwrap()).unwrap();
    assert!(table[&0].values["hb_max_plastic_ratio"] <= 1.0);
    assert!(table[&0].values["hb_mass_error"] <= 1e-10);

    v["problem"]["gamma"] = serde_json::json!(2.5);
    let p = write_config(dir.path(), "hb_bad.json", &v);
    assert_eq!(code(&nnflow(&["solve", p.to_str().unwrap()])), 2);
}
