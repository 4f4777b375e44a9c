use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MODEL: &str = "\
model.sigma0.family = constant
model.sigma0.value = 0.2
model.f.family = constant
model.f.value = 0.1
";

const SMALL: &str = "\
grid.x_min = -0.5
grid.x_max = 2.5
grid.nx = 161
grid.nt = 512
dp.nx = 161
dp.nt = 64
dp.n_fine = 101
dp.n_tail = 40
sim.paths = 2000
sim.steps = 64
sim.seed = 11
functional.paths = 40
functional.steps = 256
outputs.thin = 2
outputs.layers = 5
";

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn impakt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impakt")).args(args).output().unwrap()
}

fn run_cmd(cmd: &str, config: &Path, out: &Path, strict: bool) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    if strict {
        args.push("--strict");
    }
    impakt(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_payoff_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{MODEL}payoff.family = lookback(1)\nsim.seed = 1\n"));
    let out = dir.path().join("out");
    let o = run_cmd("facelift", &cfg, &out, false);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("payoff.family"));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["status"], "config-error");
    assert_eq!(m["exit_code"], 2);
    assert!(m["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn missing_config_and_bad_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_cmd("facelift", &dir.path().join("absent.cfg"), &out, false);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("manifest.json").exists());
    assert_eq!(impakt(&["explode", "--config", "x"]).status.code(), Some(2));
}

#[test]
fn precondition_violations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad_model = MODEL.replace("0.1", "-0.1") + "payoff.family = call(1)\nsim.seed = 1\n";
    let cfg = write_config(dir.path(), "m.cfg", &bad_model);
    assert_eq!(run_cmd("facelift", &cfg, &dir.path().join("a"), false).status.code(), Some(3));
    let asian = format!("{MODEL}payoff.family = asian-average\nsim.seed = 1\n");
    let cfg = write_config(dir.path(), "a.cfg", &asian);
    let out = dir.path().join("b");
    assert_eq!(run_cmd("solve-hjb", &cfg, &out, false).status.code(), Some(3));
    assert_eq!(json(&out.join("manifest.json"))["status"], "precondition-violation");
}

/// Brute-force upper hull: the largest chord value over all pairs bracketing each node.
fn chord_hull(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|k| {
            let mut best = ys[k];
            for i in 0..=k {
                for j in k..xs.len() {
                    if i < j {
                        let w = (xs[k] - xs[i]) / (xs[j] - xs[i]);
                        best = best.max(ys[i] + w * (ys[j] - ys[i]));
                    }
                }
            }
            best
        })
        .collect()
}

#[test]
fn facelift_digital_matches_hull_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{MODEL}model.c_upper = 5\nmodel.shift = c0\npayoff.family = digital(0)\ngrid.x_min = -1\ngrid.x_max = 1\ngrid.x0 = 0\ngrid.nx = 41\nsim.seed = 1\n"
    );
    let cfg = write_config(dir.path(), "d.cfg", &body);
    let out = dir.path().join("out");
    let o = run_cmd("facelift", &cfg, &out, false);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("facelift.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["x", "phi", "gamma", "phi_hat"]);
    let rows: Vec<Vec<f64>> = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let shifted: Vec<f64> = xs.iter().map(|&x| if x >= 0.0 { 1.0 } else { 0.0 } - 5.0 * x * x).collect();
    let oracle = chord_hull(&xs, &shifted);
    for (r, h) in rows.iter().zip(&oracle) {
        assert!((r[2] - 5.0 * r[0] * r[0]).abs() < 1e-12);
        assert!((r[3] - (h + 5.0 * r[0] * r[0])).abs() < 1e-12, "{r:?}");
    }
    // the jump at 0 is bridged from the left
    assert!(rows[19][3] > rows[19][1]);
}

#[test]
fn duality_check_on_benchmark_call() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{MODEL}payoff.family = call(1)\n{SMALL}"));
    let out = dir.path().join("out");
    let o = run_cmd("duality-check", &cfg, &out, true);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = json(&out.join("duality.json"));
    assert!(d["abs_diff"].as_f64().unwrap() <= 1e-2);
    assert_eq!(d["passes"], true);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["artifacts"], serde_json::json!(["duality.json", "manifest.json"]));
    assert!(m["wall_times"]["duality-check"].as_f64().unwrap() >= 0.0);
}

#[test]
fn strict_mode_escalates_health_failures() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{MODEL}payoff.family = call(1)\n{SMALL}duality.threshold = 1e-12\n");
    let cfg = write_config(dir.path(), "c.cfg", &body);
    let lax = run_cmd("duality-check", &cfg, &dir.path().join("lax"), false);
    assert_eq!(lax.status.code(), Some(0));
    let m = json(&dir.path().join("lax/manifest.json"));
    assert_eq!(m["health_failures"].as_array().unwrap().len(), 1);
    let strict = run_cmd("duality-check", &cfg, &dir.path().join("strict"), true);
    assert_eq!(strict.status.code(), Some(4));
    assert_eq!(json(&dir.path().join("strict/manifest.json"))["status"], "health-failure");
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn all_pipeline_is_deterministic_and_matches_single_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{MODEL}payoff.family = call(1)\n{SMALL}"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run_cmd("all", &cfg, out, false);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = read_dir_files(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "diagnostics.json",
            "dp_value.csv",
            "dpp_residual.json",
            "duality.json",
            "facelift.csv",
            "functional_checks.json",
            "hedge_paths.csv",
            "hedge_summary.json",
            "value_surface.csv"
        ]
    );
    assert_eq!(files, read_dir_files(&b));
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["summary"], mb["summary"]);
    assert_eq!(ma["seeds"]["sim"], 11);

    let single = dir.path().join("single");
    for cmd in ["facelift", "solve-hjb", "solve-dp", "duality-check", "hedge", "functional-check"] {
        assert!(run_cmd(cmd, &cfg, &single, false).status.success(), "{cmd}");
    }
    assert_eq!(read_dir_files(&single), files);

    let header = fs::read_to_string(a.join("value_surface.csv")).unwrap();
    assert!(header.starts_with("t,x,v,dv,d2v,a_star,gamma_hat\n"));
    let paths = fs::read_to_string(a.join("hedge_paths.csv")).unwrap();
    assert!(paths.starts_with("path_id,t,x,v_rollout,v_surface,y,gamma,b_resid\n"));
    assert_eq!(paths.lines().count(), 1 + 2 * 65);
}

#[test]
fn asian_all_runs_the_dp_stages() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{MODEL}payoff.family = asian-call(1)\npayoff.terminal_weight = 0.5\ngrid.x_min = -1\ngrid.x_max = 3\ngrid.nx = 41\ndp.nt = 16\ndp.n_fine = 41\ndp.n_tail = 20\ndp.n_avg = 21\ndp.max = 1\nsim.seed = 2\n"
    );
    let cfg = write_config(dir.path(), "a.cfg", &body);
    // stray key
    assert_eq!(run_cmd("all", &cfg, &dir.path().join("x"), false).status.code(), Some(2));
    let cfg = write_config(dir.path(), "a.cfg", &body.replace("dp.max = 1\n", "functional.steps = 64\n"));
    let out = dir.path().join("out");
    let o = run_cmd("all", &cfg, &out, false);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["skipped"], serde_json::json!(["facelift", "solve-hjb", "duality-check", "hedge"]));
    let dp = fs::read_to_string(out.join("dp_value.csv")).unwrap();
    assert!(dp.starts_with("t,x,m,v,a_star\n"));
    assert!(json(&out.join("functional_checks.json"))["gradient_identity"].is_null());
}
