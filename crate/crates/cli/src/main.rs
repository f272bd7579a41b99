//! ctdlab: compute the energy transition density of a driven Hamiltonian
//! system along its independent pathways (semiclassical compound-orbit sum,
//! eigenbasis double sum, double Fourier transform of the compound trace)
//! and compare them.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run finished with
//! per-point failures.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::{Config, PathwaySelection};
use ctd_core::orbits::{compound_orbits, OrbitParams, OrbitRecord};
use ctd_core::quantum::{
    double_ft_density, drive_unitary, eigen_density, eigensolve, transition_matrix, FtVariant,
    Grid1, Spectrum, TimeGrid, TransitionMatrix,
};
use ctd_core::semiclassics::{
    classical_background, sc_density, BackgroundParams, SCParams,
};
use ctd_core::{SmoothingWindow, SystemSpec, TransitionQuery};

#[derive(Parser)]
#[command(name = "ctdlab", version, about = "transition-density laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected pathways over the configured sweep grid.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated pathway override: semiclassical,eigen,double_ft,all.
        #[arg(long)]
        pathways: Option<String>,
        /// Worker threads; 1 by default for reproducible timing.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Winding cutoff override for the orbit catalogue.
        #[arg(long)]
        jmax: Option<i64>,
    },
    /// Write the compound-orbit catalogue for each grid point.
    Orbits {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        jmax: Option<i64>,
    },
    /// Compare two result files point by point.
    Compare {
        file_a: PathBuf,
        file_b: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// One output row of a simulate run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DensityRecord {
    version: u32,
    e: f64,
    e_prime: f64,
    tau: f64,
    epsilon: f64,
    hbar: f64,
    pathway: String,
    value: f64,
    n_orbits: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FailureRecord {
    version: u32,
    e: f64,
    e_prime: f64,
    tau: f64,
    pathway: String,
    error: String,
}

const RECORD_VERSION: u32 = 1;

fn main() {
    std::process::exit(match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    });
}

fn run() -> Result<i32> {
    match Cli::parse().command {
        Command::Simulate { config, out, pathways, jobs, jmax } => {
            let mut cfg = Config::load(&config)?;
            if let Some(j) = jmax {
                cfg.numerics.j_max = Some(j);
            }
            let selection = match pathways {
                Some(list) => PathwaySelection::parse(
                    &list.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>(),
                )?,
                None => PathwaySelection::parse(&cfg.sweep.pathways)?,
            };
            simulate(&cfg, &out, selection, jobs)
        }
        Command::Orbits { config, out, jobs, jmax } => {
            let mut cfg = Config::load(&config)?;
            if let Some(j) = jmax {
                cfg.numerics.j_max = Some(j);
            }
            orbits_run(&cfg, &out, jobs)
        }
        Command::Compare { file_a, file_b, out } => compare(&file_a, &file_b, &out),
    }
}

struct QuantumContext {
    spectrum: Spectrum,
    /// One transition matrix per τ value, keyed by position in the sweep list.
    tms: BTreeMap<u64, TransitionMatrix>,
}

fn tau_key(tau: f64) -> u64 {
    tau.to_bits()
}

fn build_quantum(cfg: &Config, spec: &SystemSpec) -> Result<QuantumContext> {
    if cfg.system.dof != 1 {
        bail!("quantum pathways require dof = 1 (separable grid eigensolve)");
    }
    let grid = Grid1::new(cfg.numerics.grid_n, cfg.numerics.box_min, cfg.numerics.box_max)
        .map_err(|e| anyhow!("{e}"))?;
    let spectrum = eigensolve(spec, &grid).map_err(|e| anyhow!("eigensolve failed: {e}"))?;
    let mut tms = BTreeMap::new();
    let mut taus: Vec<f64> = cfg.sweep.tau.clone();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();
    for tau in taus {
        let u = drive_unitary(spec, tau, &grid).map_err(|e| anyhow!("drive unitary: {e}"))?;
        let tm = transition_matrix(&spectrum, &u, tau).map_err(|e| anyhow!("{e}"))?;
        tms.insert(tau_key(tau), tm);
    }
    Ok(QuantumContext { spectrum, tms })
}

fn query_of(cfg: &Config, e: f64, ep: f64, tau: f64) -> Result<TransitionQuery> {
    Ok(TransitionQuery {
        e,
        e_prime: ep,
        tau,
        window: SmoothingWindow::new(cfg.sweep.epsilon).map_err(|e| anyhow!("{e}"))?,
    })
}

fn point_records(
    cfg: &Config,
    spec: &SystemSpec,
    quantum: Option<&QuantumContext>,
    selection: PathwaySelection,
    point: (f64, f64, f64),
) -> (Vec<DensityRecord>, Vec<FailureRecord>) {
    let (e, ep, tau) = point;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let query = match query_of(cfg, e, ep, tau) {
        Ok(q) => q,
        Err(err) => {
            failures.push(FailureRecord {
                version: RECORD_VERSION,
                e,
                e_prime: ep,
                tau,
                pathway: "all".into(),
                error: err.to_string(),
            });
            return (records, failures);
        }
    };
    let mut emit = |pathway: &str, value: f64, n_orbits: usize, warnings: Vec<String>| {
        records.push(DensityRecord {
            version: RECORD_VERSION,
            e,
            e_prime: ep,
            tau,
            epsilon: cfg.sweep.epsilon,
            hbar: cfg.system.hbar,
            pathway: pathway.into(),
            value,
            n_orbits,
            warnings,
        });
    };
    let fail = |failures: &mut Vec<FailureRecord>, pathway: &str, err: String| {
        failures.push(FailureRecord {
            version: RECORD_VERSION,
            e,
            e_prime: ep,
            tau,
            pathway: pathway.into(),
            error: err,
        });
    };

    if selection.semiclassical {
        let bg_params = BackgroundParams {
            half_width: cfg.numerics.background_half_width,
            base_resolution: cfg.numerics.background_base_resolution,
            ..Default::default()
        };
        let orbit_params = OrbitParams { j_max: cfg.numerics.j_max, ..Default::default() };
        let sc_params = SCParams { sigma_offset: cfg.numerics.sigma_offset, ..Default::default() };
        match classical_background(spec, &query, &bg_params) {
            Ok(bg) => {
                match compound_orbits(&query, spec, &orbit_params) {
                    Ok(catalogue) => {
                        match sc_density(spec, &query, &catalogue, bg.value, &sc_params) {
                            Ok(r) => {
                                emit("semiclassical", r.value, catalogue.len(), r.warnings.clone());
                            }
                            Err(err) => fail(&mut failures, "semiclassical", err.to_string()),
                        }
                    }
                    Err(err) => fail(&mut failures, "semiclassical", err.to_string()),
                }
                emit("classical_background", bg.value, 0, bg.warnings);
            }
            Err(err) => fail(&mut failures, "semiclassical", err.to_string()),
        }
    }
    if let Some(q) = quantum {
        let tm = &q.tms[&tau_key(tau)];
        if selection.eigen {
            match eigen_density(&query, &q.spectrum, tm) {
                Ok(r) => emit("eigen_sum", r.value, 0, r.warnings),
                Err(err) => fail(&mut failures, "eigen_sum", err.to_string()),
            }
        }
        if selection.double_ft {
            let tg = TimeGrid {
                t_max: cfg.system.hbar * (1e8f64).ln() / cfg.sweep.epsilon,
                n_steps: cfg.numerics.quadrature_steps,
            };
            match double_ft_density(&query, &q.spectrum, tm, &tg, FtVariant::Quadrature) {
                Ok(r) => emit("double_ft", r.value, 0, r.warnings),
                Err(err) => fail(&mut failures, "double_ft", err.to_string()),
            }
        }
    }
    (records, failures)
}

fn with_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("cannot build worker pool")?;
    Ok(pool.install(work))
}

fn simulate(cfg: &Config, out: &Path, selection: PathwaySelection, jobs: usize) -> Result<i32> {
    let spec = cfg.system_spec()?;
    let quantum = if selection.needs_quantum() { Some(build_quantum(cfg, &spec)?) } else { None };
    if selection.semiclassical && cfg.system.dof != 1 {
        bail!("semiclassical pathway requires dof = 1 grid geometry");
    }
    let points = cfg.grid_points();
    let results: Vec<(Vec<DensityRecord>, Vec<FailureRecord>)> = with_pool(jobs, || {
        points
            .par_iter()
            .map(|&point| point_records(cfg, &spec, quantum.as_ref(), selection, point))
            .collect()
    })?;

    std::fs::create_dir_all(out)?;
    let mut csv = String::from("E,Eprime,tau,epsilon,hbar,pathway,value,n_orbits,n_warnings\n");
    let mut jsonl = String::new();
    let mut n_failures = 0usize;
    for (records, failures) in &results {
        for r in records {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.e,
                r.e_prime,
                r.tau,
                r.epsilon,
                r.hbar,
                r.pathway,
                r.value,
                r.n_orbits,
                r.warnings.len()
            ));
            jsonl.push_str(&serde_json::to_string(r)?);
            jsonl.push('\n');
        }
        for f in failures {
            n_failures += 1;
            eprintln!("point (E={}, E'={}, tau={}) {}: {}", f.e, f.e_prime, f.tau, f.pathway, f.error);
            jsonl.push_str(&serde_json::to_string(f)?);
            jsonl.push('\n');
        }
    }
    write_atomic(&out.join(&cfg.output.csv), csv.as_bytes())?;
    write_atomic(&out.join(&cfg.output.records), jsonl.as_bytes())?;
    let n_records: usize = results.iter().map(|(r, _)| r.len()).sum();
    println!("wrote {n_records} records, {n_failures} failed points to {}", out.display());
    Ok(if n_failures > 0 { 2 } else { 0 })
}

fn orbits_run(cfg: &Config, out: &Path, jobs: usize) -> Result<i32> {
    let spec = cfg.system_spec()?;
    if cfg.system.dof != 1 {
        bail!("orbit catalogues require dof = 1");
    }
    let params = OrbitParams { j_max: cfg.numerics.j_max, ..Default::default() };
    let points = cfg.grid_points();
    let results: Vec<std::result::Result<Vec<OrbitRecord>, String>> = with_pool(jobs, || {
        points
            .par_iter()
            .map(|&(e, ep, tau)| {
                let query = query_of(cfg, e, ep, tau).map_err(|e| e.to_string())?;
                compound_orbits(&query, &spec, &params)
                    .map(|orbits| orbits.iter().map(OrbitRecord::from_orbit).collect())
                    .map_err(|e| e.to_string())
            })
            .collect()
    })?;

    std::fs::create_dir_all(out)?;
    let mut jsonl = String::new();
    let mut n_failures = 0usize;
    let mut n_orbits = 0usize;
    let mut n_caustic = 0usize;
    for (point, result) in points.iter().zip(&results) {
        match result {
            Ok(records) => {
                if records.is_empty() {
                    println!(
                        "point (E={}, E'={}, tau={}): no classical transition (0 orbits)",
                        point.0, point.1, point.2
                    );
                }
                for (orbit_id, r) in records.iter().enumerate() {
                    n_orbits += 1;
                    n_caustic += r.near_caustic as usize;
                    let mut value = serde_json::to_value(r)?;
                    let map = value.as_object_mut().unwrap();
                    map.insert("version".into(), RECORD_VERSION.into());
                    map.insert("orbit_id".into(), orbit_id.into());
                    jsonl.push_str(&serde_json::to_string(&value)?);
                    jsonl.push('\n');
                }
            }
            Err(err) => {
                n_failures += 1;
                eprintln!("point (E={}, E'={}, tau={}): {err}", point.0, point.1, point.2);
            }
        }
    }
    write_atomic(&out.join(&cfg.output.orbit_records), jsonl.as_bytes())?;
    println!(
        "wrote {n_orbits} orbit records ({n_caustic} near-caustic) for {} points, {n_failures} failed",
        points.len()
    );
    Ok(if n_failures > 0 { 2 } else { 0 })
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Serialize)]
struct PointComparison {
    e: f64,
    e_prime: f64,
    tau: f64,
    value_a: f64,
    value_b: f64,
    absolute_deviation: f64,
    relative_deviation: f64,
}

#[derive(Debug, Serialize)]
struct SliceExtrema {
    /// Fixed coordinates (e, tau) of an E'-slice.
    fixed: (f64, f64),
    positions_a: Vec<f64>,
    positions_b: Vec<f64>,
    /// |Δposition| / local period for matched extrema.
    matched_offsets_in_periods: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ComparisonReport {
    version: u32,
    points: Vec<PointComparison>,
    slices: Vec<SliceExtrema>,
    excluded_points: usize,
    max_absolute_deviation: f64,
    max_relative_deviation: f64,
}

fn read_densities(path: &Path) -> Result<BTreeMap<(u64, u64, u64), (f64, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("error").is_some() || value.get("value").is_none() {
            continue;
        }
        let record: DensityRecord = serde_json::from_value(value)?;
        out.insert(
            (record.e.to_bits(), record.e_prime.to_bits(), record.tau.to_bits()),
            (record.e, record.e_prime, record.tau, record.value),
        );
    }
    Ok(out)
}

/// Interior extrema by 3-point parabolic interpolation along a sorted slice.
fn slice_extrema(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..ys.len() - 1 {
        let (a, b, c) = (ys[i - 1], ys[i], ys[i + 1]);
        if (b - a) * (c - b) < 0.0 {
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-300 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            let dx = 0.5 * (xs[i + 1] - xs[i - 1]);
            out.push(xs[i] + shift * dx);
        }
    }
    out
}

fn compare(file_a: &Path, file_b: &Path, out: &Path) -> Result<i32> {
    let a = read_densities(file_a)?;
    let b = read_densities(file_b)?;
    let shared: Vec<_> = a.keys().filter(|k| b.contains_key(*k)).cloned().collect();
    if shared.is_empty() {
        bail!("grid mismatch: the two files share no (E, E', tau) points");
    }
    let excluded = (a.len() + b.len()).saturating_sub(2 * shared.len());

    let mut points = Vec::new();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for key in &shared {
        let (e, ep, tau, va) = a[key];
        let vb = b[key].3;
        let abs = (va - vb).abs();
        let rel = abs / va.abs().max(vb.abs()).max(1e-300);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
        points.push(PointComparison {
            e,
            e_prime: ep,
            tau,
            value_a: va,
            value_b: vb,
            absolute_deviation: abs,
            relative_deviation: rel,
        });
    }

    // E'-slices at fixed (E, τ) with at least 5 points get extremum analysis
    let mut slices = Vec::new();
    let mut by_slice: BTreeMap<(u64, u64), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for key in &shared {
        let (_e, ep, _tau, va) = a[key];
        by_slice
            .entry((key.0, key.2))
            .or_default()
            .push((ep, va, b[key].3));
    }
    for ((ebits, taubits), mut rows) in by_slice {
        if rows.len() < 5 {
            continue;
        }
        rows.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let ya: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let yb: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let pa = slice_extrema(&xs, &ya);
        let pb = slice_extrema(&xs, &yb);
        // local period from consecutive extremum spacing (two per period)
        let period = if pa.len() >= 2 {
            2.0 * (pa.last().unwrap() - pa[0]) / (pa.len() - 1) as f64
        } else {
            xs[xs.len() - 1] - xs[0]
        };
        let matched: Vec<f64> = pa
            .iter()
            .map(|p| {
                pb.iter()
                    .map(|q| (q - p).abs())
                    .fold(f64::INFINITY, f64::min)
                    / period.abs().max(1e-300)
            })
            .filter(|d| d.is_finite())
            .collect();
        slices.push(SliceExtrema {
            fixed: (f64::from_bits(ebits), f64::from_bits(taubits)),
            positions_a: pa,
            positions_b: pb,
            matched_offsets_in_periods: matched,
        });
    }

    let report = ComparisonReport {
        version: RECORD_VERSION,
        points,
        slices,
        excluded_points: excluded,
        max_absolute_deviation: max_abs,
        max_relative_deviation: max_rel,
    };
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "compared {} points ({} excluded): max abs {:.3e}, max rel {:.3e}",
        report.points.len(),
        excluded,
        max_abs,
        max_rel
    );
    Ok(if excluded > 0 { 2 } else { 0 })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .with_context(|| format!("cannot write {}", tmp.display()))?;
        f.write_all(bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
