use std::fs;
use std::path::Path;
use std::process::Command;

use bgmd::gm::{brute_force_gm_zoom, gm_objective};
use bgmd::{GradMatrix, ParamVector};
use bgmd_cli::commands::{bench_csv, gm_from_csv, run_into, sweep, SweepParam};
use bgmd_cli::config::set_dotted;
use bgmd_cli::ExperimentConfig;

const SMALL: &str = r#"
[task]
kind = "least_squares"
dim = 8
samples = 60

[oracle]
workers = 5
minibatch = 4

[aggregator]
kind = "bgmd"
k = 3

[corruption]
psi = 0.2
attack = { kind = "additive_gaussian", std = 10.0 }

[engine]
iterations = 40
seed = 3
"#;

#[test]
fn resolved_config_round_trips() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let echo = cfg.resolved_toml();
    let again = ExperimentConfig::parse(&echo).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(echo, again.resolved_toml());

    let mut full = cfg.clone();
    full.oracle.minibatch = None;
    full.engine.mode = bgmd_cli::config::EngineMode::Fed;
    full.engine.fed.local_steps = 4;
    full.engine.fed.quantizer = Some(bgmd::compress::QuantConfig::new(2, bgmd::compress::QsgdScaling::Unbiased).unwrap());
    assert_eq!(ExperimentConfig::parse(&full.resolved_toml()).unwrap(), full);
}

#[test]
fn empty_config_takes_every_default() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert!(!cfg.engine.timings);
}

#[test]
fn unknown_keys_are_rejected() {
    for bad in [
        "[task]\ndimension = 3\n",
        "[oracle]\nbatch = 3\n",
        "[aggregator]\nblock = 3\n",
        "[corruption]\nfraction = 0.1\n",
        "[engine]\nsteps = 3\n",
        "[engine.fed]\nrounds = 3\n",
        "[output]\nfolder = \"x\"\n",
        "[extra]\n",
        "[oracle]\nminibatch = \"half\"\n",
    ] {
        assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
    }
    assert!(ExperimentConfig::parse("[corruption]\npsi = 0.5\n").is_err());
    assert!(ExperimentConfig::parse("[engine]\niterations = 0\n").is_err());
}

#[test]
fn dotted_keys_set_nested_values() {
    let mut t: toml::Table = toml::from_str(SMALL).unwrap();
    set_dotted(&mut t, "aggregator.kind", "gm").unwrap();
    set_dotted(&mut t, "engine.fed.local_steps", "7").unwrap();
    set_dotted(&mut t, "corruption.psi", "0.3").unwrap();
    let cfg = ExperimentConfig::parse(&toml::to_string(&t).unwrap()).unwrap();
    assert_eq!(cfg.aggregator.kind, bgmd::aggregate::AggregatorKind::Gm);
    assert_eq!(cfg.engine.fed.local_steps, 7);
    assert_eq!(cfg.corruption.psi, 0.3);
    assert!("novalue".parse::<SweepParam>().is_err());
    assert!("a.b=1,,2".parse::<SweepParam>().is_err());
}

#[test]
fn runs_are_byte_identical_per_seed() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = run_into(&cfg, &dir.path().join("a")).unwrap();
    let (outcome, b) = run_into(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(fs::read(&a.metrics).unwrap(), fs::read(&b.metrics).unwrap());
    let lines = fs::read_to_string(&a.metrics).unwrap();
    assert_eq!(lines.lines().count(), outcome.records.len());
    let echoed = ExperimentConfig::parse(&fs::read_to_string(&a.resolved_config).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn gm_examples() {
    let one = gm_from_csv("1.0,2.0\n".as_bytes(), 1e-8, 1000).unwrap();
    assert_eq!(one.point, vec![1.0, 2.0]);
    assert_eq!(one.objective, 0.0);

    let twin = gm_from_csv("3, -1\n3, -1\n".as_bytes(), 1e-8, 1000).unwrap();
    assert_eq!(twin.point, vec![3.0, -1.0]);
    assert_eq!(twin.objective, 0.0);

    let tri = gm_from_csv("0,0\n1,0\n0,1\n".as_bytes(), 1e-10, 1000).unwrap();
    let pts = GradMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    let grid = brute_force_gm_zoom(&pts, &[(0.0, 1.0), (0.0, 1.0)], 100, 5).unwrap();
    let ours = gm_objective(&ParamVector::new(tri.point.clone()).unwrap(), &pts).unwrap();
    assert!(ours <= grid.objective * (1.0 + 1e-6));
    // The Fermat point lies on the diagonal at (3 - sqrt 3)/6; the objective is
    // flat there, so the point is only accurate to about sqrt(tol).
    let exact = (3.0 - 3f64.sqrt()) / 6.0;
    assert!((tri.point[0] - exact).abs() < 1e-4 && (tri.point[1] - exact).abs() < 1e-4, "{:?}", tri.point);

    assert!(gm_from_csv("".as_bytes(), 1e-8, 10).is_err());
    assert!(gm_from_csv("1,2\n3\n".as_bytes(), 1e-8, 10).is_err());
    assert!(gm_from_csv("1,x\n".as_bytes(), 1e-8, 10).is_err());
}

#[test]
fn bench_prints_one_row_per_k() {
    let mut out = Vec::new();
    bench_csv(&mut out, 200, 4, &[2, 20, 200], 2, 0).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,gm_ns,bgmd_ns,speedup");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("200,"));
}

#[test]
fn sweep_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let params = vec![
        "aggregator.kind=mean,gm".parse::<SweepParam>().unwrap(),
        "corruption.psi=0.0,0.2".parse::<SweepParam>().unwrap(),
    ];
    let cells = sweep(SMALL, None, &params, 2, dir.path()).unwrap();
    assert_eq!(cells.len(), 8);
    for c in &cells {
        assert!(dir.path().join(&c.name).join("metrics.jsonl").exists());
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "cell,aggregator.kind,corruption.psi,seed,final_loss,final_dist_sq,final_residual_ratio,diverged"
    );
    assert_eq!(lines.count(), 8);
    assert_eq!(cells[0].seed, 3);
    assert_eq!(cells[1].seed, 4);
}

fn bgmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bgmd"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn binary_uses_env_out_dir_and_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", SMALL);
    let out_dir = dir.path().join("from_env");
    let status = bgmd()
        .args(["run", cfg.to_str().unwrap(), "--seed", "9"])
        .env("BGMD_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let echoed = fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 9"));

    let bad = write(dir.path(), "bad.toml", "[engine]\nsteps = 3\n");
    let out = bgmd().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn divergence_is_a_result_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("kind = \"bgmd\"", "kind = \"mean\"")
        .replace("psi = 0.2", "psi = 0.4")
        .replace(
            "attack = { kind = \"additive_gaussian\", std = 10.0 }",
            "attack = { kind = \"scaled_bit_flip\", scale = -100.0 }",
        );
    let cfg = write(dir.path(), "div.toml", &text);
    let out = bgmd()
        .args(["run", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("diverged=true"));
}

#[test]
fn binary_gm_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let pts = write(dir.path(), "p.csv", "1,5\n2,4\n3,3\n");
    let out = bgmd().args(["gm", pts.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["point"].as_array().unwrap().len(), 2);
    assert!(v["objective"].as_f64().unwrap() > 0.0);
    assert!(v["iterations"].as_u64().is_some());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.to_run_config().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
