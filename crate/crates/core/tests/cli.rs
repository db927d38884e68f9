use std::process::Command;

fn qsde() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qsde"));
    c.env_remove("QSDE_SEED");
    c
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = qsde().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn validate_bounds_passes_on_ou() {
    let (code, out, _) = run(&["validate-bounds", "--model", "ou"]);
    assert_eq!(code, 0);
    assert!(out.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn khintchine_table() {
    let (code, out, _) = run(&["check-khintchine", "--kmax", "3", "--lmax", "5"]);
    assert_eq!(code, 0);
    let mut rd = csv::Reader::from_reader(out.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 15);
    let k2l2 = rows.iter().find(|r| &r[0] == "2" && &r[1] == "2").unwrap();
    assert_eq!((&k2l2[2], &k2l2[4], &k2l2[5]), ("8", "12", "true"));
}

#[test]
fn degenerate_model_gating() {
    let (code, out, _) = run(&["estimate", "--algorithm", "em", "--model", "ou-degenerate", "--eps-rel", "0.9", "--c-st", "0.3"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["mu_hat"].as_f64().unwrap().is_finite());
    let (code, _, err) = run(&["estimate", "--algorithm", "multi", "--model", "ou-degenerate", "--eps-rel", "0.9"]);
    assert_eq!(code, 2);
    assert!(err.contains("full rank"), "{err}");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model":"ou","unexpected":true}"#).unwrap();
    let (code, _, err) = run(&["--config", cfg.to_str().unwrap(), "validate-bounds"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = run(&["validate-bounds", "--model", "no-such-model"]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["estimate", "--eps-rel", "1.5"]);
    assert_eq!(code, 1);
}

#[test]
fn config_values_and_seed_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model":"ou","r_list":[8,16,32],"paths":20,"seed":3}"#).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(run(&["--config", cfg_s, "--out", a.to_str().unwrap(), "em-convergence"]).0, 0);
    assert_eq!(run(&["--config", cfg_s, "--seed", "3", "--out", b.to_str().unwrap(), "em-convergence"]).0, 0);
    let st = qsde().env("QSDE_SEED", "4").args(["--config", cfg_s, "--out", c.to_str().unwrap(), "em-convergence"]).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn model_document_and_observable_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("scalar.json");
    std::fs::write(
        &model,
        r#"{"N":1,"m":1,"T":1.0,"x0":[1.0],"model":{"kind":"constant","params":{"A":[[-1.0]],"B":[[1.0]]}},
            "bounds":{"alpha_A":1.0,"eta":1.0,"sigma":1.0,"kappa_BBT":1.0,"alpha_dA":0.0,"alpha_dBBT":0.0}}"#,
    )
    .unwrap();
    let obs = dir.path().join("obs.json");
    std::fs::write(&obs, r#"{"d":1,"entries":[{"idx":[0],"val":2.0}]}"#).unwrap();
    let (code, out, err) = run(&[
        "estimate",
        "--algorithm",
        "terminal",
        "--model",
        model.to_str().unwrap(),
        "--observable",
        obs.to_str().unwrap(),
        "--eps-rel",
        "0.9",
        "--overlap-mode",
        "exact",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // No closed form is attached to a custom model.
    assert!(v["truth"].is_null());
    let rescaled = v["plan"]["rescale"].as_f64().unwrap() * v["overlap"]["exact"].as_f64().unwrap();
    assert!((rescaled - v["y_hat"].as_f64().unwrap()).abs() < 1e-10);
}

#[test]
fn understated_bounds_exit_two() {
    // sigma below the true diffusion scale fails the bound validation.
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.json");
    std::fs::write(
        &model,
        r#"{"N":1,"m":1,"T":1.0,"x0":[1.0],"model":{"kind":"constant","params":{"A":[[-1.0]],"B":[[1.0]]}},
            "bounds":{"alpha_A":1.0,"eta":1.0,"sigma":0.5,"kappa_BBT":1.0,"alpha_dA":0.0,"alpha_dBBT":0.0}}"#,
    )
    .unwrap();
    let (code, _, err) = run(&["validate-bounds", "--model", model.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn report_passes_on_builtins() {
    for m in ["ou", "rotating", "time-dependent", "ou-degenerate"] {
        let (code, out, err) = run(&["report", "--model", m]);
        assert_eq!(code, 0, "{m}: {err}");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["pass"], true);
    }
}
