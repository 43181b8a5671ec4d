use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gplsiam::sim::{Scenario, ScenarioKind};
use gplsiam_cli::archive::Archive;
use gplsiam_cli::commands;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gplsiam"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_csv(path: &Path, header: &[&str], cols: &[Vec<String>]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(header).unwrap();
    for i in 0..cols[0].len() {
        w.write_record(cols.iter().map(|c| c[i].as_str())).unwrap();
    }
    w.flush().unwrap();
}

/// Poisson I data at n = 300 plus a three-level factor.
fn poisson_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let sc = Scenario::new(ScenarioKind::Poisson1, 300, 5);
    let frame = sc.generate(5, 0);
    let names = ["y", "x", "z1_1", "z1_2", "z2_1", "z2_2", "z2_3"];
    let mut cols: Vec<Vec<String>> = names
        .iter()
        .map(|n| frame.get(n).unwrap().iter().map(|v| v.to_string()).collect())
        .collect();
    cols.push((0..300).map(|i| ["lo", "mid", "hi"][i % 3].to_string()).collect());
    let mut header = names.to_vec();
    header.push("grade");
    let data = dir.join("data.csv");
    write_csv(&data, &header, &cols);
    let config = dir.join("model.toml");
    fs::write(
        &config,
        r#"seed = 11
[model]
family = "poisson"
response = "y"
linear = ["x", "grade"]

[categorical]
grade = ["lo", "mid", "hi"]

[[term]]
name = "f1"
covariates = ["z1_1", "z1_2"]
q = 9

[[term]]
name = "f2"
covariates = ["z2_1", "z2_2", "z2_3"]
q = 9
"#,
    )
    .unwrap();
    (config, data)
}

fn read_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].parse().unwrap()).collect()
}

fn strip_created(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("created");
    v
}

#[test]
fn fit_predict_round_trip() {
    let dir = TempDir::new().unwrap();
    let (config, data) = poisson_fixture(dir.path());
    let archive = dir.path().join("model.json");
    let report = dir.path().join("report.txt");
    let out = run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&archive), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("grade=mid") && text.contains("f2.alpha2") && text.contains("converged: true"));

    let loaded = Archive::load(&archive).unwrap();
    assert_eq!(loaded.model.layout.dim, 25);
    let again = Archive::from_json(&loaded.to_json().unwrap()).unwrap();
    assert_eq!(again, loaded);

    let pred = dir.path().join("pred.csv");
    let out = run(&["predict", "--model", s(&archive), "--data", s(&data), "--out", s(&pred)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mu = read_column(&pred, "mu");
    for (a, b) in mu.iter().zip(loaded.model.fitted_mu.iter()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
    let f1 = read_column(&pred, "f1");
    assert!(f1.iter().sum::<f64>().abs() / 300.0 < 1e-6);

    let pred2 = dir.path().join("pred2.csv");
    run(&["predict", "--model", s(&archive), "--data", s(&data), "--out", s(&pred2)]);
    assert_eq!(fs::read(&pred).unwrap(), fs::read(&pred2).unwrap());
}

#[test]
fn refit_with_same_seed_is_identical() {
    let dir = TempDir::new().unwrap();
    let (config, data) = poisson_fixture(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        assert_eq!(run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(p)]).status.code(), Some(0));
    }
    let (ta, tb) = (fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    assert_eq!(strip_created(&ta), strip_created(&tb));
    let c = dir.path().join("c.json");
    run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&c), "--seed", "99"]);
    let tc = Archive::load(&c).unwrap();
    assert_eq!(tc.seed, 99);
}

#[test]
fn missing_response_exits_one() {
    let dir = TempDir::new().unwrap();
    let (config, data) = poisson_fixture(dir.path());
    let text = fs::read_to_string(&config).unwrap().replace("response = \"y\"", "response = \"count\"");
    fs::write(&config, text).unwrap();
    let out = run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("count"));
}

#[test]
fn non_convergence_exits_two_and_keeps_archive() {
    let dir = TempDir::new().unwrap();
    let (config, data) = poisson_fixture(dir.path());
    let mut text = fs::read_to_string(&config).unwrap();
    text.push_str("\n[fit]\nmax_total_iter = 3\n");
    fs::write(&config, text).unwrap();
    let archive = dir.path().join("m.json");
    let out = run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&archive)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!Archive::load(&archive).unwrap().model.converged);
}

#[test]
fn archive_versions_are_checked() {
    let dir = TempDir::new().unwrap();
    let (config, data) = poisson_fixture(dir.path());
    let archive = dir.path().join("m.json");
    run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&archive)]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&archive).unwrap()).unwrap();
    v["version"] = serde_json::json!(7);
    fs::write(&archive, v.to_string()).unwrap();
    let out = run(&["predict", "--model", s(&archive), "--data", s(&data), "--out", s(&dir.path().join("p.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

#[test]
fn diagnose_gaussian_and_bernoulli() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 300;
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let z1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let z2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let g: Vec<f64> = (0..n)
        .map(|i| 1.0 + x[i] + (3.0 * (0.6 * z1[i] + 0.8 * z2[i])).sin() + 0.3 * (rng.random::<f64>() - 0.5))
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|i| {
            let eta = -0.5 + x[i] + 2.0 * (0.6 * z1[i] - 0.8 * z2[i]);
            f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())))
        })
        .collect();
    let to_s = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>();
    let data = dir.path().join("d.csv");
    write_csv(&data, &["g", "b", "x", "z1", "z2"], &[to_s(&g), to_s(&b), to_s(&x), to_s(&z1), to_s(&z2)]);
    for (fam, resp) in [("gaussian", "g"), ("bernoulli", "b")] {
        let config = dir.path().join(format!("{fam}.toml"));
        fs::write(
            &config,
            format!(
                "seed = 2\n[model]\nfamily = \"{fam}\"\nresponse = \"{resp}\"\nlinear = [\"x\"]\n\n[[term]]\nname = \"f\"\ncovariates = [\"z1\", \"z2\"]\nq = 8\n"
            ),
        )
        .unwrap();
        let archive = dir.path().join(format!("{fam}.json"));
        let out = run(&["fit", "--config", s(&config), "--data", s(&data), "--out", s(&archive)]);
        assert!(matches!(out.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&out.stderr));
        let res = dir.path().join(format!("{fam}.res.csv"));
        let out = run(&["diagnose", "--model", s(&archive), "--data", s(&data), "--out", s(&res), "--replicates", "5"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let r = read_column(&res, "residual");
        assert_eq!(r.len(), n * 5);
        assert!(r.iter().all(|v| v.is_finite()));
        let first: Vec<f64> = r.chunks(5).map(|c| c[0]).collect();
        let same = r.chunks(5).all(|c| c.iter().all(|v| *v == c[0]));
        if fam == "gaussian" {
            assert!(same);
        } else {
            assert!(!same);
            let pred = dir.path().join("b.pred.csv");
            let out = run(&["predict", "--model", s(&archive), "--data", s(&data), "--out", s(&pred), "--threshold", "0.5"]);
            let text = String::from_utf8_lossy(&out.stdout);
            assert!(text.contains("auc:") && text.contains("sensitivity:"), "{text}");
            assert!(read_column(&pred, "mu").iter().all(|m| *m > 0.0 && *m < 1.0));
        }
        assert!(first.len() == n);
    }
}

#[test]
fn simulate_outputs_and_job_independence() {
    let dir = TempDir::new().unwrap();
    let strip = |p: &Path| -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(p).unwrap();
        let h: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
        r.records()
            .map(|rec| {
                rec.unwrap()
                    .iter()
                    .zip(&h)
                    .filter(|(_, h)| !h.contains("seconds"))
                    .map(|(v, _)| v.to_string())
                    .collect()
            })
            .collect()
    };
    let mut outs = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let o = run(&["simulate", "poisson1", "--n", "200", "--reps", "3", "--seed", "7", "--jobs", jobs, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("unstable"));
        outs.push(out);
    }
    for f in ["summary.csv", "replicates.csv", "grid.csv"] {
        assert_eq!(strip(&outs[0].join(f)), strip(&outs[1].join(f)), "{f}");
    }
    let h = fs::read_to_string(outs[0].join("summary.csv")).unwrap();
    assert!(h.lines().next().unwrap().contains("instability_rate"));

    let o = run(&["simulate", "poisson9", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("poisson1") && err.contains("gamma1") && err.contains("poisson2"));
}

#[test]
fn bike_config_has_expected_dimension() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let raw = dir.path().join("hour.csv");
    let mut w = csv::Writer::from_path(&raw).unwrap();
    w.write_record(["instant", "dteday", "yr", "hr", "holiday", "weekday", "hum", "windspeed", "cnt"]).unwrap();
    for i in 0..400 {
        let day = i / 24;
        let yr = u8::from(i >= 200);
        let date = format!("{}-{:02}-{:02}", 2011 + u32::from(yr), 1 + (day % 12), 1 + (day % 28));
        w.write_record([
            (i + 1).to_string(),
            date,
            yr.to_string(),
            (i % 24).to_string(),
            u8::from(i % 37 == 0).to_string(),
            (day % 7).to_string(),
            rng.random::<f64>().to_string(),
            (0.5 * rng.random::<f64>()).to_string(),
            rng.random_range(0..400).to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    let prepped = dir.path().join("bike.csv");
    let o = run(&["prep-bike", "--input", s(&raw), "--out", s(&prepped)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bike.toml");
    assert_eq!(commands::dimension(&cfg, &prepped).unwrap(), 83);
    let yday = read_column(&prepped, "yday");
    assert_eq!(yday[0], 1.0);
    assert!(yday.iter().all(|d| (1.0..=366.0).contains(d)));
}
