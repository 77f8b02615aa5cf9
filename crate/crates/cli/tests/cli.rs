use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lowdose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowdose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path) -> String {
    let cfg = r#"{
        "frame": {"kind": "gaussian", "n": 8, "m": 64},
        "doses": [300, 1200],
        "repetitions": 3,
        "losses": [
            {"kind": "poisson_reg", "eps": 0.25},
            {"kind": "zero_adapted", "c1": 0.12, "c2": 0.27},
            {"kind": "gaussian_lsq", "sigma2": 0.25, "step": {"mode": "backtracking", "shrink": 0.5, "growth": 2.0, "initial": 1.0}}
        ],
        "solver": {"max_iters": 200},
        "seed": 5
    }"#;
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = lowdose(&["simulate", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let names = listing(&a);
    let instances: Vec<&String> = names.iter().filter(|n| n.starts_with("instance_")).collect();
    assert_eq!(instances.len(), 6);
    assert!(names.contains(&"instance_d01_r002.json".to_string()));
    assert_eq!(names, listing(&b));
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    lowdose(&["simulate", "--config", &cfg, "--seed", "6", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(a.join(instances[0])).unwrap(), fs::read(c.join(instances[0])).unwrap());
}

#[test]
fn solve_writes_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let inst_dir = tmp.path().join("inst");
    lowdose(&["simulate", "--config", &cfg, "--out", inst_dir.to_str().unwrap()]);
    let inst = inst_dir.join("instance_d01_r000.json");
    let loss = r#"{"kind":"poisson_reg","eps":0.25}"#;
    let mut printed = Vec::new();
    for run in ["r1", "r2"] {
        let dir = tmp.path().join(run);
        let out = lowdose(&["solve", inst.to_str().unwrap(), "--loss", loss, "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(["grad_tol", "max_iters"].contains(&summary["stop_reason"].as_str().unwrap()));
        assert!(summary["relative_error"].as_f64().unwrap() < 1.0);
        let trace = fs::read_to_string(dir.join("instance_d01_r000_poisson_reg_trace.csv")).unwrap();
        assert!(trace.starts_with("iteration,loss,grad_norm,step\n"));
        assert!(dir.join("instance_d01_r000_poisson_reg_run.json").exists());
        printed.push(out.stdout);
    }
    assert_eq!(printed[0], printed[1]);

    // an instance that saw no photons
    let mut file: serde_json::Value = serde_json::from_str(&fs::read_to_string(&inst).unwrap()).unwrap();
    for y in file["counts"].as_array_mut().unwrap() {
        *y = 0.into();
    }
    let dark = tmp.path().join("dark.json");
    fs::write(&dark, file.to_string()).unwrap();
    let out = lowdose(&["solve", dark.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(tmp.path().join("d/dark_zero_adapted_trace.csv")).unwrap();
    let losses: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs()));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let inst_dir = tmp.path().join("inst");
    lowdose(&["simulate", "--config", &cfg, "--out", inst_dir.to_str().unwrap()]);
    let inst = inst_dir.join("instance_d00_r000.json");
    let out_arg = tmp.path().join("o");
    let out_arg = out_arg.to_str().unwrap();

    let lsq = r#"{"kind":"gaussian_lsq","sigma2":0.25}"#;
    let out = lowdose(&["solve", inst.to_str().unwrap(), "--loss", lsq, "--out", out_arg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("backtracking"));
    let with_step = r#"{"kind":"gaussian_lsq","sigma2":0.25,"step":{"mode":"backtracking","shrink":0.5,"growth":2.0,"initial":1.0}}"#;
    assert_eq!(code(&lowdose(&["solve", inst.to_str().unwrap(), "--loss", with_step, "--out", out_arg])), 0);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"doses": [], "repetitions": 1, "losses": []}"#).unwrap();
    assert_eq!(code(&lowdose(&["benchmark", "--config", bad.to_str().unwrap(), "--out", out_arg])), 1);
    assert_eq!(code(&lowdose(&["simulate", "--config", "/nonexistent.json"])), 1);
    assert_eq!(code(&lowdose(&["solve", "/nonexistent.json"])), 1);
    assert_eq!(code(&lowdose(&["vst-analyze", "--grid", "1,-2", "--out", out_arg])), 1);

    // output location is a regular file
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let out = lowdose(&["simulate", "--config", &cfg, "--out", blocker.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn vst_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    let out = lowdose(&["vst-analyze", "--grid", "1,2,10", "--transforms", "anscombe,averaging:0.12:0.27", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.join("vst.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["transform", "λ", "mean", "variance", "truncation_k"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[2][0], "anscombe");
    let v: f64 = rows[2][3].parse().unwrap();
    assert!((0.24..=0.26).contains(&v));
    assert!(dir.join("vst_meta.json").exists());
}

#[test]
fn benchmark_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut outputs = Vec::new();
    for (name, jobs) in [("one", "1"), ("two", "2")] {
        let dir = tmp.path().join(name);
        let out = lowdose(&["benchmark", "--config", &cfg, "--jobs", jobs, "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((
            fs::read_to_string(dir.join("summary.csv")).unwrap(),
            fs::read_to_string(dir.join("runs.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let summary = &outputs[0].0;
    assert!(summary.starts_with("loss,params,dose,mean_rel_err,std_rel_err,n_runs\n"));
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
    assert_eq!(outputs[0].1.lines().count(), 1 + 3 * 2 * 3);
}
