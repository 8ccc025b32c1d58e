use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"{
    "metric": {"preset": "conical"},
    "r_grid": [50],
    "seeds_per_dim": 4,
    "T": 10000
}"#;

const PERTURBED: &str = r#"{
    "metric": {"preset": "conical", "perturbation": {"tau": 1.5, "nu": 1.25, "mu": 2.5, "amplitude": 0.1, "seed": 1}},
    "seeds_per_dim": 4
}"#;

fn radialform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radialform"))
        .args(args)
        .env("RADIALFORM_THREADS", "2")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out = dir.path().join("nested").join("out");
    let res = radialform(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["manifest.json", "normalform.json", "decay.csv", "estimates.csv", "expansion.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let mut rdr = csv::Reader::from_path(out.join("decay.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "fitted_exponent").expect("fitted_exponent column");
    for r in rdr.records() {
        let r = r.unwrap();
        assert!(r[col].is_empty() || r[col].parse::<f64>().is_ok());
    }

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], serde_json::Value::Bool(true));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let again = dir.path().join("again");
    assert_eq!(radialform(&["run", &cfg, "--out", again.to_str().unwrap()]).status.code(), Some(0));
    let cmp = radialform(&["compare", out.join("manifest.json").to_str().unwrap(), again.join("manifest.json").to_str().unwrap()]);
    assert_eq!(cmp.status.code(), Some(0), "{}", String::from_utf8_lossy(&cmp.stdout));
}

#[test]
fn nonpositive_tau_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &PERTURBED.replace("\"tau\": 1.5", "\"tau\": 0"));
    let out = dir.path().join("out");
    let res = radialform(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("metric.perturbation.tau"), "{err}");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn perturbed_decay_has_fitted_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PERTURBED);
    let out = dir.path().join("out");
    let res = radialform(&["run", &cfg, "--out", out.to_str().unwrap(), "--pipelines", "normal_form"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let mut rdr = csv::Reader::from_path(out.join("decay.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "fitted_exponent").unwrap();
    let fitted: f64 = rdr.records().next().unwrap().unwrap()[col].parse().unwrap();
    assert!(fitted >= 0.85, "{fitted}");
}

#[test]
fn unknown_pipeline_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let res = radialform(&["run", &cfg, "--pipelines", "normal_form,bogus"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn list_presets_names_families() {
    let res = radialform(&["list-presets"]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    for name in ["conical", "hyperbolic", "intermediate"] {
        assert!(text.contains(name), "{text}");
    }
}
