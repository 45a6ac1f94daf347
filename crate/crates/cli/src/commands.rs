//! Subcommand implementations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};

use chstab::actuators::{build_layout, ActuatorLayout};
use chstab::analysis::{control_energy, fit_decay, monotone_after};
use chstab::cache::GainsCache;
use chstab::dynamics::InitialKind;
use chstab::grid::{assemble, DaConvention};
use chstab::presets::{preset, Profile};
use chstab::run::{
    fmt17, run, run_ensemble_on, ControlConfig, EnsembleConfig, Mode, RunConfig, RunRecord,
};
use chstab::verify::{run_suite, Fault, Level};

use crate::config::{load, output_dir, to_toml};
use crate::svg::{layout_svg, log_plot, Series};
use crate::Source;

/// Fit window as a fraction of the horizon; the first tenth is transient.
const FIT_WINDOW: (f64, f64) = (0.1, 1.0);

fn fit_window(record: &RunRecord) -> (f64, f64) {
    let t = record.times.last().copied().unwrap_or(0.0);
    (FIT_WINDOW.0 * t, FIT_WINDOW.1 * t)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), fmt17)
}

pub fn summary(record: &RunRecord) -> String {
    let mut s = String::new();
    let z = record.norm_z();
    let _ = writeln!(s, "label = {}", record.label);
    let _ = writeln!(s, "steps = {}", record.times.len().saturating_sub(1));
    let _ = writeln!(s, "dt = {}", fmt17(record.dt));
    let _ = writeln!(s, "t_final = {}", opt(record.times.last().copied()));
    let _ = writeln!(s, "initial_error = {}", opt(z.first().copied()));
    let _ = writeln!(s, "final_error = {}", fmt17(record.final_error()));
    match fit_decay(&record.times, &z, fit_window(record)) {
        Ok(f) => {
            let _ = writeln!(s, "mu_hat = {}", fmt17(f.mu));
            let _ = writeln!(
                s,
                "fit_window = [{}, {}]",
                fmt17(f.window.0),
                fmt17(f.window.1)
            );
            let _ = writeln!(s, "fit_residual = {}", fmt17(f.residual));
        }
        Err(e) => {
            let _ = writeln!(s, "mu_hat = n/a ({e})");
        }
    }
    let _ = writeln!(
        s,
        "monotone_after = {}",
        opt(monotone_after(&record.times, &z, 0.0))
    );
    if let Ok(e) = control_energy(record) {
        let _ = writeln!(s, "control_energy = {}", fmt17(e));
    }
    let _ = writeln!(
        s,
        "final_free_energy = {}",
        opt(record.energy.last().copied())
    );
    if let (Some(a), Some(b)) = (record.mass.first(), record.mass.last()) {
        let _ = writeln!(s, "mass_drift = {}", fmt17(b - a));
    }
    s
}

fn error_series(record: &RunRecord) -> Vec<Series> {
    let t = record.times.clone();
    vec![
        Series {
            label: "|z|".into(),
            t: t.clone(),
            y: record.norm_z(),
        },
        Series {
            label: "|z1|".into(),
            t: t.clone(),
            y: record.norm_z1.clone(),
        },
        Series {
            label: "|z2|".into(),
            t,
            y: record.norm_z2.clone(),
        },
    ]
}

fn write_layout(dir: &Path, layout: &ActuatorLayout) -> anyhow::Result<()> {
    fs::write(dir.join("layout.txt"), layout.to_text())?;
    fs::write(dir.join("layout.svg"), layout_svg(layout))?;
    Ok(())
}

pub fn simulate(source: &Source) -> anyhow::Result<bool> {
    let loaded = load(
        source.config.as_deref(),
        source.preset.as_deref(),
        source.paper_scale,
    )?;
    let dir = output_dir(source.out.as_deref(), &loaded);
    let cache = GainsCache::from_env();
    info!("simulating {} into {}", loaded.name, dir.display());
    let (ops, record) = run(&loaded.config, cache.as_ref())?;
    record.write(&dir, &loaded.text, &ops)?;
    fs::write(dir.join("summary.txt"), summary(&record))?;
    if let (Mode::Controlled, Some(c)) = (loaded.config.mode, &loaded.config.control) {
        write_layout(&dir, &build_layout(c.level, &loaded.config.grid)?)?;
    }
    match log_plot(&record.label, "H norm of the error", &error_series(&record)) {
        Ok(svg) => fs::write(dir.join("errors.svg"), svg)?,
        Err(e) => warn!("no error plot: {e}"),
    }
    info!(
        "final error {:e} after {} steps",
        record.final_error(),
        record.times.len() - 1
    );
    Ok(true)
}

fn member_dir(c: &ControlConfig) -> String {
    format!("M{}_lambda{}", c.level, c.lambda1)
}

fn member_config(base: &RunConfig, c: &ControlConfig) -> RunConfig {
    RunConfig {
        mode: Mode::Controlled,
        control: Some(c.clone()),
        output: None,
        ..base.clone()
    }
}

pub fn sweep(
    source: &Source,
    levels: &[usize],
    lambdas: &[f64],
    jobs: usize,
) -> anyhow::Result<bool> {
    let loaded = load(
        source.config.as_deref(),
        source.preset.as_deref(),
        source.paper_scale,
    )?;
    let mut dir = output_dir(source.out.as_deref(), &loaded);
    if source.out.is_none() && loaded.config.output.is_none() {
        dir = PathBuf::from("runs").join(format!("sweep-{}", loaded.name));
    }
    let base = loaded.config.clone();
    let convention = base
        .control
        .as_ref()
        .map_or(DaConvention::Paper, |c| c.convention);
    let members: Vec<ControlConfig> = levels
        .iter()
        .flat_map(|&level| {
            lambdas.iter().map(move |&l| ControlConfig {
                level,
                lambda1: l,
                lambda2: l,
                convention,
            })
        })
        .collect();
    let ops = assemble(&base.grid)?;
    let cache = GainsCache::from_env();
    let jobs = jobs.min(members.len()).max(1);
    info!(
        "sweeping {} members on {} thread(s) into {}",
        members.len(),
        jobs,
        dir.display()
    );

    // round-robin groups; each group co-simulates its own copy of the reference
    let groups: Vec<Vec<usize>> = (0..jobs)
        .map(|j| (j..members.len()).step_by(jobs).collect())
        .collect();
    let ensemble = |idx: &Vec<usize>| {
        let cfg = EnsembleConfig {
            grid: base.grid.clone(),
            physics: base.physics.clone(),
            scheme: base.scheme.clone(),
            rho: base.rho,
            members: idx.iter().map(|&i| Some(members[i].clone())).collect(),
        };
        run_ensemble_on(&ops, &cfg, cache.as_ref())
    };
    let outputs = std::thread::scope(|s| {
        let handles: Vec<_> = groups.iter().map(|g| s.spawn(|| ensemble(g))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Vec<_>>()
    });

    let mut results: Vec<Option<Result<RunRecord, String>>> = vec![None; members.len()];
    let mut reference = None;
    for (g, out) in groups.iter().zip(outputs) {
        match out {
            Ok(rec) => {
                reference.get_or_insert(rec.reference);
                for (&i, r) in g.iter().zip(rec.members) {
                    results[i] = Some(r);
                }
            }
            Err(e) => {
                for &i in g {
                    results[i] = Some(Err(e.to_string()));
                }
            }
        }
    }

    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.copy"), &loaded.text)?;
    if let Some(r) = &reference {
        r.write(
            &dir.join("reference"),
            &to_toml(&RunConfig {
                mode: Mode::Free,
                initial: InitialKind::Reference,
                control: None,
                output: None,
                ..base.clone()
            }),
            &ops,
        )?;
    }
    let mut table = csv::Writer::from_path(dir.join("sweep.csv"))?;
    table.write_record([
        "M",
        "lambda",
        "final_error",
        "mu_hat",
        "monotone_after",
        "status",
    ])?;
    let mut series = Vec::new();
    let mut all_ok = true;
    for (c, r) in members.iter().zip(results) {
        let r = r.expect("every member has a result");
        let (final_error, mu, mono, status) = match &r {
            Ok(rec) => {
                let sub = dir.join(member_dir(c));
                rec.write(&sub, &to_toml(&member_config(&base, c)), &ops)?;
                fs::write(sub.join("summary.txt"), summary(rec))?;
                let z = rec.norm_z();
                let mu = fit_decay(&rec.times, &z, fit_window(rec))
                    .ok()
                    .map(|f| f.mu);
                series.push(Series {
                    label: format!("M={} lambda={}", c.level, c.lambda1),
                    t: rec.times.clone(),
                    y: z.clone(),
                });
                (
                    Some(rec.final_error()),
                    mu,
                    monotone_after(&rec.times, &z, 0.0),
                    "ok".to_string(),
                )
            }
            Err(e) => {
                warn!("M={} lambda={} failed: {e}", c.level, c.lambda1);
                all_ok = false;
                (None, None, None, format!("failed: {e}"))
            }
        };
        table.write_record([
            c.level.to_string(),
            c.lambda1.to_string(),
            opt(final_error),
            opt(mu),
            opt(mono),
            status,
        ])?;
    }
    table.flush()?;
    if !series.is_empty() {
        fs::write(
            dir.join("sweep.svg"),
            log_plot(
                "error by actuator level and gain",
                "H norm of the error",
                &series,
            )?,
        )?;
    }
    Ok(all_ok)
}

pub fn verify(level: Level, fault: Option<Fault>) -> anyhow::Result<bool> {
    let outcomes = run_suite(level, fault);
    let mut ok = true;
    for o in &outcomes {
        ok &= o.passed;
        println!(
            "{} {} ({:.1} s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {} failed", outcomes.len(), failed);
    Ok(ok)
}

pub fn print_preset(name: &str, paper_scale: bool) -> anyhow::Result<bool> {
    let profile = if paper_scale {
        Profile::PaperScale
    } else {
        Profile::Desk
    };
    print!("{}", to_toml(&preset(name, profile)?));
    Ok(true)
}

/// Header order and values of a headed numeric CSV file.
type Columns = (Vec<String>, HashMap<String, Vec<f64>>);

pub fn read_columns(path: &Path) -> anyhow::Result<Columns> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers: Vec<String> = rdr
        .headers()
        .with_context(|| format!("{}: malformed header", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols: HashMap<String, Vec<f64>> =
        headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| anyhow::anyhow!("{}: malformed CSV: {e}", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (h, field) in headers.iter().zip(rec.iter()) {
            let v = match field {
                "n/a" => f64::NAN,
                f => f.parse::<f64>().map_err(|_| {
                    anyhow::anyhow!(
                        "{}:{line}: malformed CSV: column {h} has non-numeric value {f:?}",
                        path.display()
                    )
                })?,
            };
            cols.get_mut(h).expect("known header").push(v);
        }
    }
    Ok((headers, cols))
}

fn column<'a>(
    cols: &'a HashMap<String, Vec<f64>>,
    name: &str,
    path: &Path,
) -> anyhow::Result<&'a Vec<f64>> {
    cols.get(name)
        .ok_or_else(|| anyhow::anyhow!("{}: malformed CSV: missing column {name}", path.display()))
}

fn run_series(csv_path: &Path) -> anyhow::Result<Vec<Series>> {
    let (_, cols) = read_columns(csv_path)?;
    let t = column(&cols, "t", csv_path)?;
    ["norm_H_z", "norm_H_z1", "norm_H_z2"]
        .iter()
        .zip(["|z|", "|z1|", "|z2|"])
        .map(|(c, label)| {
            Ok(Series {
                label: label.into(),
                t: t.clone(),
                y: column(&cols, c, csv_path)?.clone(),
            })
        })
        .collect()
}

fn sweep_series(dir: &Path) -> anyhow::Result<Vec<Series>> {
    let path = dir.join("sweep.csv");
    let mut rdr =
        csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut series = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| anyhow::anyhow!("{}: malformed CSV: {e}", path.display()))?;
        let (Some(m), Some(l), Some(status)) = (rec.get(0), rec.get(1), rec.get(5)) else {
            bail!("{}: malformed CSV: short row {:?}", path.display(), rec);
        };
        if status != "ok" {
            continue;
        }
        let ts = dir.join(format!("M{m}_lambda{l}")).join("timeseries.csv");
        let (_, cols) = read_columns(&ts)?;
        series.push(Series {
            label: format!("M={m} lambda={l}"),
            t: column(&cols, "t", &ts)?.clone(),
            y: column(&cols, "norm_H_z", &ts)?.clone(),
        });
    }
    Ok(series)
}

/// Writes SVGs next to `input` (or into `out`) and returns the paths.
pub fn plot_files(input: &Path, out: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    if !input.exists() {
        bail!("{} does not exist", input.display());
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None if input.is_dir() => input.to_path_buf(),
        None => input
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> anyhow::Result<()> {
        let p = dir.join(name);
        fs::write(&p, svg)?;
        written.push(p);
        Ok(())
    };
    let layout_file = |p: &Path| -> anyhow::Result<ActuatorLayout> {
        let text = fs::read_to_string(p)?;
        ActuatorLayout::from_text(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
    };
    if input.is_dir() {
        if input.join("sweep.csv").exists() {
            let s = sweep_series(input)?;
            if s.is_empty() {
                bail!("{}: no successful members to plot", input.display());
            }
            emit(
                "sweep.svg",
                log_plot(
                    "error by actuator level and gain",
                    "H norm of the error",
                    &s,
                )?,
            )?;
        } else if input.join("timeseries.csv").exists() {
            let s = run_series(&input.join("timeseries.csv"))?;
            emit("errors.svg", log_plot("error", "H norm of the error", &s)?)?;
        } else if !input.join("layout.txt").exists() {
            bail!(
                "{}: no sweep.csv, timeseries.csv or layout.txt",
                input.display()
            );
        }
        if input.join("layout.txt").exists() {
            emit(
                "layout.svg",
                layout_svg(&layout_file(&input.join("layout.txt"))?),
            )?;
        }
    } else if input.extension().is_some_and(|e| e == "csv") {
        let name = input.file_name().unwrap_or_default().to_string_lossy();
        if name == "sweep.csv" {
            let parent = input.parent().unwrap_or(Path::new("."));
            emit(
                "sweep.svg",
                log_plot(
                    "error by actuator level and gain",
                    "H norm of the error",
                    &sweep_series(parent)?,
                )?,
            )?;
        } else {
            emit(
                "errors.svg",
                log_plot("error", "H norm of the error", &run_series(input)?)?,
            )?;
        }
    } else {
        emit("layout.svg", layout_svg(&layout_file(input)?))?;
    }
    Ok(written)
}

pub fn plot(input: &Path, out: Option<&Path>) -> anyhow::Result<bool> {
    for p in plot_files(input, out)? {
        println!("{}", p.display());
    }
    Ok(true)
}
