use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twostage::engines::{ChainConfig, MethodKind};
use twostage::experiments::SimulationDesign;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_twostage"));
    c.env_remove("TWOSTAGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_class(o: &Output, code: &str, status: i32) {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(status), "{err}");
    assert!(err.starts_with(&format!("{code}: ")), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_design(dir: &Path) -> PathBuf {
    let d = SimulationDesign {
        name: "small".into(),
        n: 25,
        n_test: 30,
        reps: 3,
        draws: 60,
        is_pool: 80,
        ais_r: 40,
        methods: vec![MethodKind::OracleGibbs, MethodKind::PluginZ, MethodKind::Iis, MethodKind::Ais],
        chain: ChainConfig {
            total_sweeps: 300,
            burn_in: 100,
            thin: 1,
            store_zeta: false,
        },
        ..SimulationDesign::example1()
    };
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string(&d).unwrap()).unwrap();
    path
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn study_outputs_are_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let design = small_design(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = run(&["study", "--design", p(&design), "--out", p(&a), "--parallel", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["study", "--design", p(&design), "--out", p(&b), "--parallel", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = dir_contents(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["design.json", "replications.csv", "result.json", "summary.json", "weight_traces.csv"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert_eq!(files, dir_contents(&b));

    let rows = fs::read_to_string(a.join("replications.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 3 * 4 * 2);

    let o = run(&["report", "--in", p(&a), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(a.join("table1.csv")).unwrap();
    assert!(table.starts_with("method,w2_theta_zeta,w2_sigma_eps_sq"));
    assert_eq!(table.lines().count(), 1 + 4);
    let o = run(&["report", "--in", p(&a), "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(a.join("table1.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn reps_flag_overrides_the_design() {
    let tmp = tempfile::tempdir().unwrap();
    let design = small_design(tmp.path());
    let out = tmp.path().join("o");
    let o = run(&["study", "--design", p(&design), "--out", p(&out), "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("replications.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 4 * 2);
}

struct Simulated {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn simulated() -> Simulated {
    let tmp = tempfile::tempdir().unwrap();
    let design = small_design(tmp.path());
    let dir = tmp.path().join("sim");
    let o = run(&["simulate", "--design", p(&design), "--out", p(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    Simulated { _tmp: tmp, dir }
}

#[test]
fn simulate_then_fit_each_method() {
    let s = simulated();
    let d = &s.dir;
    for m in MethodKind::ALL {
        let out = d.join(format!("fit-{m}"));
        let o = run(&[
            "fit", "--method", m.as_str(), "--draws", p(&d.join("draws.csv")), "--data", p(&d.join("data.csv")),
            "--config", p(&d.join("config.json")), "--out", p(&out),
        ]);
        assert!(o.status.success(), "{m}: {}", stderr(&o));
        let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fit_summary.json")).unwrap()).unwrap();
        assert_eq!(summary["retained"], 200);
        assert_eq!(fs::read_to_string(out.join("samples.csv")).unwrap().lines().count(), 201);
    }
}

#[test]
fn seed_override_is_reproducible() {
    let s = simulated();
    let d = &s.dir;
    let fit = |seed: &str, out: &str| {
        let out = d.join(out);
        let o = bin()
            .env("TWOSTAGE_SEED", seed)
            .args([
                "fit", "--method", "iis", "--draws", p(&d.join("draws.csv")), "--data", p(&d.join("data.csv")),
                "--config", p(&d.join("config.json")), "--out", p(&out),
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("samples.csv")).unwrap()
    };
    assert_eq!(fit("7", "a"), fit("7", "b"));
    assert_ne!(fit("7", "a"), fit("8", "c"));
}

#[test]
fn hybrid_from_a_fit_with_stored_exposures() {
    let s = simulated();
    let d = &s.dir;
    let mut config: serde_json::Value = serde_json::from_slice(&fs::read(d.join("config.json")).unwrap()).unwrap();
    config["chain"]["store_zeta"] = true.into();
    let cfg = d.join("store.json");
    fs::write(&cfg, config.to_string()).unwrap();
    let fit = d.join("fit");
    let o = run(&[
        "fit", "--method", "ais", "--draws", p(&d.join("draws.csv")), "--data", p(&d.join("data.csv")), "--config",
        p(&cfg), "--out", p(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fit.join("zeta_draws.csv").exists());
    let out = d.join("hybrid");
    let o = run(&["hybrid", "--source", p(&fit), "--theta-star", "0.5", "--num-datasets", "4", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 1..=4 {
        assert!(out.join(format!("hybrid_{k:03}.csv")).exists());
    }
    assert!(out.join("hybrid_mean.csv").exists());
    let o = run(&["hybrid", "--source", p(&fit), "--theta-star", "0.5", "--num-datasets", "500", "--out", p(&out)]);
    assert_class(&o, "E_CONFIG", 5);
}

#[test]
fn malformed_inputs_map_to_error_classes() {
    let s = simulated();
    let d = &s.dir;
    let draws = d.join("draws.csv");
    let data = d.join("data.csv");
    let out = d.join("out");

    // Plug-in on raw z without a z column.
    let text = fs::read_to_string(&data).unwrap();
    let y_only: String = text.lines().map(|l| l.split(',').next().unwrap().to_string() + "\n").collect();
    let noz = d.join("noz.csv");
    fs::write(&noz, y_only).unwrap();
    let o = run(&["fit", "--method", "plugin-z", "--draws", p(&draws), "--data", p(&noz), "--out", p(&out)]);
    assert_class(&o, "E_METHOD_INPUT", 4);

    // Oracle without a stage-one model.
    let o = run(&["fit", "--method", "oracle-gibbs", "--draws", p(&draws), "--data", p(&data), "--out", p(&out)]);
    assert_class(&o, "E_METHOD_INPUT", 4);

    // AIS with known moments but no stage-one model.
    let known = d.join("known.json");
    fs::write(&known, "{\"ais_moments\": \"known\"}").unwrap();
    let o = run(&["fit", "--method", "ais", "--draws", p(&draws), "--data", p(&data), "--config", p(&known), "--out", p(&out)]);
    assert_class(&o, "E_METHOD_INPUT", 4);

    // Ragged draws row.
    let mut lines: Vec<String> = fs::read_to_string(&draws).unwrap().lines().map(String::from).collect();
    lines[3] = lines[3].rsplit_once(',').unwrap().0.to_string();
    let ragged = d.join("ragged.csv");
    fs::write(&ragged, lines.join("\n")).unwrap();
    let o = run(&["fit", "--method", "ais", "--draws", p(&ragged), "--data", p(&data), "--out", p(&out)]);
    assert_class(&o, "E_PARSE", 2);
    assert!(stderr(&o).contains("row 4"), "{}", stderr(&o));

    // Non-numeric cell.
    let mut lines: Vec<String> = fs::read_to_string(&draws).unwrap().lines().map(String::from).collect();
    lines[2] = lines[2].replacen(|c: char| c.is_ascii_digit(), "x", 1);
    let bad = d.join("bad.csv");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = run(&["fit", "--method", "ais", "--draws", p(&bad), "--data", p(&data), "--out", p(&out)]);
    assert_class(&o, "E_PARSE", 2);

    // Draw columns disagree with dataset rows.
    let short: String = text.lines().take(10).map(|l| l.to_string() + "\n").collect();
    let short_path = d.join("short.csv");
    fs::write(&short_path, short).unwrap();
    let o = run(&["fit", "--method", "ais", "--draws", p(&draws), "--data", p(&short_path), "--out", p(&out)]);
    assert_class(&o, "E_DIM_MISMATCH", 3);

    // Unknown method, unknown design, bad config.
    let o = run(&["fit", "--method", "bogus", "--draws", p(&draws), "--data", p(&data), "--out", p(&out)]);
    assert_class(&o, "E_CONFIG", 5);
    let o = run(&["study", "--design", "example9", "--out", p(&out)]);
    assert_class(&o, "E_CONFIG", 5);
    let cfg = d.join("bad.json");
    fs::write(&cfg, "{\"chain\": {\"total_sweeps\": 10, \"burn_in\": 5}}").unwrap();
    let o = run(&["fit", "--method", "ais", "--draws", p(&draws), "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_class(&o, "E_CONFIG", 5);
    let o = bin()
        .env("TWOSTAGE_SEED", "-1")
        .args(["fit", "--method", "ais", "--draws", p(&draws), "--data", p(&data), "--out", p(&out)])
        .output()
        .unwrap();
    assert_class(&o, "E_CONFIG", 5);

    // Missing files.
    let o = run(&["fit", "--method", "ais", "--draws", p(&d.join("nope.csv")), "--data", p(&data), "--out", p(&out)]);
    assert_class(&o, "E_IO", 7);
    let o = run(&["report", "--in", p(&d.join("nowhere"))]);
    assert_class(&o, "E_IO", 7);
}
