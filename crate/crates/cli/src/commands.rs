use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gplsiam::family::quantile_residuals;
use gplsiam::inference::{auc, coef_table};
use gplsiam::sim::{run_study, ScenarioKind, Study};
use gplsiam::{fit, predict, Design, FitConfig, FittedModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::config::Config;
use crate::data::Table;

pub struct FitOutcome {
    pub archive: Archive,
    pub report: String,
}

pub fn fit_files(config: &Path, data: &Path, seed: Option<u64>) -> Result<FitOutcome> {
    let mut config = Config::load(config)?;
    if let Some(s) = seed {
        config.seed = s;
        config.fit.seed = s;
    }
    let table = Table::read(data)?;
    let columns = config.columns();
    table.check_complete(&columns)?;
    let categorical = table.categorical(&config.categorical)?;
    let frame = table.frame(&columns, &categorical)?;
    let spec = config.spec(&categorical)?;
    let model = fit(&spec, &frame, &config.fit)?;
    let report = report(&model);
    Ok(FitOutcome {
        archive: Archive::new(config.seed, columns, categorical, model),
        report,
    })
}

pub fn report(model: &FittedModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "family: {}", model.spec.family);
    let _ = writeln!(s, "observations: {}  coefficients: {}", model.n, model.layout.dim);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28} {:>12} {:>12} {:>9} {:>10}", "coefficient", "estimate", "std.error", "z", "p-value");
    for r in coef_table(model) {
        let p = if r.p < 0.001 { "< 0.001".to_string() } else { format!("{:.3}", r.p) };
        let _ = writeln!(s, "{:<28} {:>12.4} {:>12.4} {:>9.2} {:>10}", r.name, r.estimate, r.se, r.z, p);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28} {:>12} {:>10} {:>10}  direction", "term", "lambda", "edf", "edf.index");
    for (j, t) in model.terms.iter().enumerate() {
        let e = &model.edf.terms[j];
        let dir: Vec<String> = t.alpha.iter().map(|a| format!("{a:.3}")).collect();
        let _ = writeln!(
            s,
            "{:<28} {:>12.4} {:>10.3} {:>10.3}  ({})",
            t.name,
            model.lambdas[j],
            e.gamma,
            e.alpha,
            dir.join(", ")
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "edf: {:.3}  phi: {:.5}  log-likelihood: {:.4}", model.edf.total, model.phi, model.loglik);
    let _ = writeln!(
        s,
        "converged: {}  metric: {:.3e}  iterations: {}  restarts: {}  saved iteration: {}",
        model.converged, model.met, model.iterations, model.restarts, model.saved_iteration
    );
    s
}

pub struct PredictOutcome {
    pub summary: Option<String>,
}

pub fn predict_files(archive: &Archive, data: &Path, out: &Path, threshold: Option<f64>) -> Result<PredictOutcome> {
    let table = Table::read(data)?;
    let response = &archive.columns[0];
    let has_response = table.column(response).is_ok();
    let mut cols = archive.predictors().to_vec();
    if has_response {
        cols.insert(0, response.clone());
    }
    table.check_complete(&cols)?;
    let frame = table.frame(&cols, &archive.categorical)?;
    let p = predict(&archive.model, &frame)?;
    if p.clamped > 0 {
        log::warn!("{} index values fell outside the fitted knot span and were clamped", p.clamped);
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    let mut header = vec!["row".to_string(), "eta".into(), "mu".into()];
    header.extend(archive.model.terms.iter().map(|t| t.name.clone()));
    w.write_record(&header)?;
    for i in 0..frame.nrows() {
        let mut rec = vec![i.to_string(), p.eta[i].to_string(), p.mu[i].to_string()];
        rec.extend(p.terms.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let summary = match (has_response, threshold) {
        (true, t) if archive.model.spec.family.distribution == gplsiam::Distribution::Bernoulli => {
            let y = frame.get(response)?;
            let mut s = format!("auc: {:.4}\n", auc(y.view(), p.mu.view()));
            if let Some(t) = t {
                let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
                for (&yi, &m) in y.iter().zip(p.mu.iter()) {
                    match (yi > 0.5, m > t) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (false, false) => tn += 1,
                        (true, false) => fneg += 1,
                    }
                }
                let _ = writeln!(s, "threshold: {t}  tp: {tp}  fp: {fp}  tn: {tn}  fn: {fneg}");
                let _ = writeln!(
                    s,
                    "sensitivity: {:.4}  specificity: {:.4}",
                    tp as f64 / (tp + fneg) as f64,
                    tn as f64 / (tn + fp) as f64
                );
            }
            Some(s)
        }
        (false, Some(_)) => bail!("a threshold needs the response column `{response}`"),
        _ => None,
    };
    Ok(PredictOutcome { summary })
}

pub fn diagnose_files(archive: &Archive, data: &Path, replicates: usize, seed: u64, out: &Path) -> Result<()> {
    if replicates == 0 {
        bail!("at least one replicate is required");
    }
    let table = Table::read(data)?;
    table.check_complete(&archive.columns)?;
    let frame = table.frame(&archive.columns, &archive.categorical)?;
    let model = &archive.model;
    let p = predict(model, &frame)?;
    let y = frame.get(&archive.columns[0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = quantile_residuals(y.view(), p.mu.view(), model.phi, &model.spec.family, &mut rng, replicates);
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["row", "replicate", "residual", "fitted", "index"])?;
    for i in 0..r.nrows() {
        for k in 0..replicates {
            w.write_record([
                i.to_string(),
                k.to_string(),
                r[[i, k]].to_string(),
                p.mu[i].to_string(),
                (i + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(
    scenario: &str,
    sizes: &[usize],
    replicates: usize,
    jobs: usize,
    seed: u64,
    config: &FitConfig,
    out: &Path,
) -> Result<Study> {
    let kind: ScenarioKind = scenario.parse()?;
    let study = run_study(kind, sizes, replicates, jobs, seed, config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_study(&study, out)?;
    Ok(study)
}

fn write_study(study: &Study, out: &Path) -> Result<()> {
    let terms = study.replicates.first().map_or(0, |r| r.rel_errors.len());
    let mut w = csv::Writer::from_path(out.join("replicates.csv"))?;
    let mut header: Vec<String> = ["scenario", "n", "replicate"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=terms).map(|j| format!("rel_error_{j}")));
    header.extend(
        ["unstable", "failed", "converged", "restarts", "iterations", "fs_violations", "phi", "seconds"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in &study.replicates {
        let mut rec = vec![r.scenario.to_string(), r.n.to_string(), r.replicate.to_string()];
        rec.extend(r.rel_errors.iter().map(f64::to_string));
        rec.extend([
            r.unstable.to_string(),
            r.failed.to_string(),
            r.converged.to_string(),
            r.restarts.to_string(),
            r.iterations.to_string(),
            r.fs_violations.to_string(),
            r.phi.to_string(),
            format!("{:.6}", r.seconds),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record([
        "scenario",
        "n",
        "replicates",
        "unstable",
        "failed",
        "instability_rate",
        "mean_rel_error",
        "median_rel_error",
        "mean_phi",
        "converged",
        "fs_violations",
        "coverage",
        "p90_seconds",
        "total_seconds",
    ])?;
    for s in &study.summaries {
        w.write_record([
            s.scenario.to_string(),
            s.n.to_string(),
            s.replicates.to_string(),
            s.unstable.to_string(),
            s.failed.to_string(),
            s.instability_rate.to_string(),
            s.mean_rel_error.to_string(),
            s.median_rel_error.to_string(),
            s.mean_phi.to_string(),
            s.converged.to_string(),
            s.fs_violations.to_string(),
            s.coverage.to_string(),
            format!("{:.6}", s.p90_seconds),
            format!("{:.6}", s.total_seconds),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
    w.write_record(["scenario", "n", "replicate", "term", "u", "fhat", "lower", "upper", "truth", "unstable"])?;
    for r in &study.replicates {
        for g in &r.grid {
            w.write_record([
                r.scenario.to_string(),
                r.n.to_string(),
                r.replicate.to_string(),
                (g.term + 1).to_string(),
                g.u.to_string(),
                g.fhat.to_string(),
                g.lower.to_string(),
                g.upper.to_string(),
                g.truth.to_string(),
                r.unstable.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const WEEKDAYS: [&str; 7] = ["sun", "mon", "tue", "wed", "thu", "fri", "sat"];

/// Converts the hourly bike-sharing file into the columns the example
/// configuration reads.
pub fn prep_bike(input: &Path, out: &Path, threshold: f64) -> Result<usize> {
    let table = Table::read(input)?;
    let col = |n: &str| table.column(n);
    let (date, yr, hr, holiday, weekday, hum, wind, cnt) = (
        col("dteday")?,
        col("yr")?,
        col("hr")?,
        col("holiday")?,
        col("weekday")?,
        col("hum")?,
        col("windspeed")?,
        col("cnt")?,
    );
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["hdemand", "hum", "windspeed", "hr", "yday", "yr", "holiday", "weekday"])?;
    for (i, r) in table.rows.iter().enumerate() {
        let ctx = || format!("row {}", i + 1);
        let d = chrono::NaiveDate::parse_from_str(r[date].trim(), "%Y-%m-%d").with_context(ctx)?;
        let count: f64 = r[cnt].trim().parse().with_context(ctx)?;
        let year = match r[yr].trim() {
            "0" => "2011",
            "1" => "2012",
            v => bail!("row {}: unexpected yr `{v}`", i + 1),
        };
        let hol = match r[holiday].trim() {
            "0" => "no",
            "1" => "yes",
            v => bail!("row {}: unexpected holiday `{v}`", i + 1),
        };
        let wd: usize = r[weekday].trim().parse().with_context(ctx)?;
        let wd = *WEEKDAYS.get(wd).with_context(|| format!("row {}: weekday {wd}", i + 1))?;
        use chrono::Datelike;
        w.write_record([
            u8::from(count > threshold).to_string(),
            r[hum].trim().to_string(),
            r[wind].trim().to_string(),
            r[hr].trim().to_string(),
            d.ordinal().to_string(),
            year.to_string(),
            hol.to_string(),
            wd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(table.nrows())
}

/// Design dimension of a configuration against a data file.
pub fn dimension(config: &Path, data: &Path) -> Result<usize> {
    let config = Config::load(config)?;
    let table = Table::read(data)?;
    let categorical = table.categorical(&config.categorical)?;
    let frame = table.frame(&config.columns(), &categorical)?;
    let spec = config.spec(&categorical)?;
    Ok(Design::from_frame(&spec, &frame)?.layout().dim)
}
