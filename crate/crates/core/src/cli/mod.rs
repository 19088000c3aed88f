//! Command-line front end.

pub mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::formation;
use crate::monitor;
use crate::simkit;
use scenario::{Overrides, Scenario};

#[derive(Debug, Parser)]
#[command(name = "formation-fdi", version, about = "UAV formation flight with attack detection, isolation and removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write the trace, manifest and summary.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        no_removal: bool,
    },
    /// Print connectivity, spectra and observer existence without simulating.
    Check { scenario: PathBuf },
    /// Turn a trace CSV into plot-ready data files.
    ExportPlots {
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, out, seed, dt, no_removal } => {
            let summary = cmd_run(&scenario, &out, &Overrides { seed, dt, no_removal })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Check { scenario } => {
            print!("{}", cmd_check(&scenario)?);
            Ok(())
        }
        Command::ExportPlots { trace, out } => {
            for f in cmd_export_plots(&trace, &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool_version: &'a str,
    scenario_file: String,
    scenario: &'a Scenario,
    resolved: ResolvedEcho<'a>,
    trace_columns: Vec<String>,
    files: Vec<&'a str>,
    digest: String,
}

#[derive(Debug, Serialize)]
struct ResolvedEcho<'a> {
    node_ids: &'a [usize],
    gain: formation::Gain,
    offsets: &'a [Vec<f64>],
    config: &'a simkit::SimConfig,
    monitors: &'a monitor::MonitorConfig,
    attack: Option<&'a crate::attack::AttackScenario>,
}

#[derive(Debug, Serialize)]
struct DesignExport {
    host: usize,
    target: usize,
    design: crate::uio::UioDesign,
}

/// Runs a scenario file and writes `trace.csv`, `events.csv`,
/// `manifest.json`, `summary.json` and `designs.json` into `out`.
pub fn cmd_run(path: &Path, out: &Path, overrides: &Overrides) -> Result<simkit::RunSummary> {
    let scenario = Scenario::from_path(path)?;
    let setup = scenario.resolve(overrides)?;
    let trace = simkit::run(&setup)?;
    let summary = simkit::summarize(&trace);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("trace.csv"), trace.to_csv())?;
    fs::write(out.join("events.csv"), trace.events_csv())?;
    let banks = crate::recovery::rebuild_banks(&setup.fleet, &setup.monitors)?;
    let designs: Vec<DesignExport> = banks
        .into_iter()
        .flat_map(|b| {
            let host = b.host;
            b.targets.into_iter().zip(b.designs).map(move |(target, design)| DesignExport { host, target, design })
        })
        .collect();
    fs::write(out.join("designs.json"), serde_json::to_string(&designs)?)?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        scenario_file: path.display().to_string(),
        scenario: &scenario,
        resolved: ResolvedEcho {
            node_ids: setup.fleet.graph.node_ids(),
            gain: setup.fleet.gain,
            offsets: &setup.fleet.formation.offsets,
            config: &setup.config,
            monitors: &setup.monitors,
            attack: setup.attack.as_ref(),
        },
        trace_columns: trace.csv_columns(),
        files: vec!["trace.csv", "events.csv", "summary.json", "designs.json"],
        digest: summary.digest.clone(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.6}", x + 0.0)).collect::<Vec<_>>().join(", ")
}

/// Pre-flight report for a scenario.
pub fn cmd_check(path: &Path) -> Result<String> {
    let scenario = Scenario::from_path(path)?;
    let setup = scenario.resolve(&Overrides::default())?;
    let fleet = &setup.fleet;
    let g = &fleet.graph;
    let mut r = String::new();
    writeln!(r, "nodes: {:?}", g.node_ids())?;
    writeln!(r, "connected: {}", g.is_connected())?;
    writeln!(r, "2-connected: {}", g.is_two_connected())?;
    writeln!(r, "laplacian spectrum: [{}]", fmt_list(&g.laplacian_spectrum()))?;
    writeln!(r, "normalized spectrum: [{}]", fmt_list(&g.normalized_spectrum()))?;
    let cert = fleet.certificate();
    writeln!(
        r,
        "gain: k_pos = {}, k_vel = {}; max real part {:.6} at lambda {:.6}; stable: {}",
        cert.gain.k_pos, cert.gain.k_vel, cert.max_real_part, cert.worst_lambda, cert.stable
    )?;
    let mut all_ok = cert.stable;
    for &host in g.node_ids() {
        match monitor::bank_certificates(fleet, host, &setup.monitors) {
            Ok(certs) => {
                for (target, c) in certs {
                    all_ok &= c.is_valid();
                    writeln!(
                        r,
                        "host {host} target {target}: rank CE {} rank E {} detectable {} rosenbrock {} valid {}",
                        c.rank_ce,
                        c.rank_e,
                        c.detectable,
                        c.transmission_rank_ok,
                        c.is_valid()
                    )?;
                }
            }
            Err(e) => {
                all_ok = false;
                writeln!(r, "host {host}: {e}")?;
            }
        }
    }
    writeln!(r, "all certificates valid: {all_ok}")?;
    Ok(r)
}

struct TraceTable {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl TraceTable {
    fn read(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        let rows = rd.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(TraceTable { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        match self.header.iter().position(|h| h == name) {
            Some(i) => Ok(i),
            None => bail!("trace is missing column `{name}`"),
        }
    }
}

/// Writes `trajectories.csv`, `position_error.csv` and one
/// `residuals_host_<i>.csv` per host from a trace CSV.
pub fn cmd_export_plots(trace: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let table = TraceTable::read(trace)?;
    let (t, node, x, y, ex) = (table.col("t")?, table.col("node")?, table.col("x")?, table.col("y")?, table.col("ex")?);
    let residual_cols: Vec<(usize, String)> = table
        .header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("r_").map(|k| (i, k.to_string())))
        .collect();
    if residual_cols.is_empty() {
        bail!("trace has no residual columns `r_<node>`");
    }
    fs::create_dir_all(out)?;
    let mut traj = String::from("t,node,x,y\n");
    let mut err = String::from("t,node,ex\n");
    let mut per_host: BTreeMap<String, String> = BTreeMap::new();
    for row in &table.rows {
        writeln!(traj, "{},{},{},{}", &row[t], &row[node], &row[x], &row[y])?;
        writeln!(err, "{},{},{}", &row[t], &row[node], &row[ex])?;
        let buf = per_host.entry(row[node].to_string()).or_insert_with(|| {
            let mut h = String::from("t");
            for (_, k) in &residual_cols {
                h.push_str(&format!(",r_{k}"));
            }
            h.push('\n');
            h
        });
        buf.push_str(&row[t]);
        for (i, _) in &residual_cols {
            buf.push(',');
            buf.push_str(&row[*i]);
        }
        buf.push('\n');
    }
    let mut written = vec![out.join("trajectories.csv"), out.join("position_error.csv")];
    fs::write(&written[0], traj)?;
    fs::write(&written[1], err)?;
    for (host, body) in per_host {
        let p = out.join(format!("residuals_host_{host}.csv"));
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
