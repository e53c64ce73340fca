use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use squaring_cli::pipeline::{build_window, discrepancy_stage, flow_stage, toast_stage};
use squaring_cli::report::verify_report;
use squaring_cli::{output_dir, render, write_artifacts, AssignmentArtifact, CliError, CliResult, ExperimentConfig};
use squaring_core::equi::{verify_equidecomposition, PieceAssignment};

#[derive(Parser)]
#[command(name = "squaring", version, about = "Lattice-orbit equidecomposition experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the window point budget.
    #[arg(long)]
    budget: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.budget.max_points = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline; writes report.json, assignment.json and pieces.svg.
    Run(Common),
    /// Discrepancy sweep only.
    Discrepancy(Common),
    /// Toast construction and validation only.
    Toast(Common),
    /// Flow stages only.
    Flows(Common),
    /// Re-check a report, and optionally its assignment, from disk.
    Verify {
        report: PathBuf,
        #[arg(long)]
        assignment: Option<PathBuf>,
    },
    /// Draw the pieces of a stored assignment.
    Render {
        assignment: PathBuf,
        #[arg(long, default_value = "pieces.svg")]
        out: PathBuf,
    },
}

enum Outcome {
    Pass,
    Violation,
}

fn emit<T: Serialize>(common: &Common, cfg: &ExperimentConfig, name: &str, v: &T) -> CliResult<()> {
    let dir = output_dir(common.out.as_deref(), cfg);
    let path = dir.join(name);
    squaring_core::io::write_json(&path, v).map_err(|e| CliError::Stage { stage: "write", source: e })?;
    println!("{}", path.display());
    Ok(())
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_artifact(path: &Path) -> CliResult<(AssignmentArtifact, PieceAssignment)> {
    let art: AssignmentArtifact = serde_json::from_value(read_json(path)?)?;
    let pa = PieceAssignment::from_doc(&art.assignment).map_err(|e| CliError::Stage { stage: "from_doc", source: e })?;
    Ok((art, pa))
}

fn exec(cmd: Cmd) -> CliResult<Outcome> {
    match cmd {
        Cmd::Run(c) => {
            let cfg = c.load()?;
            let out = squaring_cli::run(&cfg)?;
            let dir = output_dir(c.out.as_deref(), &cfg);
            for p in write_artifacts(&out, &dir)? {
                println!("{}", p.display());
            }
            for a in &out.report.assertions {
                println!("{} {}: {}", if a.pass { "ok  " } else { "FAIL" }, a.name, a.detail);
            }
            Ok(if out.report.passed() { Outcome::Pass } else { Outcome::Violation })
        }
        Cmd::Discrepancy(c) => {
            let mut cfg = c.load()?;
            cfg.discrepancy.get_or_insert_with(Default::default);
            cfg.validate()?;
            let w = build_window(&cfg)?;
            let rep = discrepancy_stage(&cfg, &w)?;
            emit(&c, &cfg, "discrepancy.json", &rep)?;
            Ok(Outcome::Pass)
        }
        Cmd::Toast(c) => {
            let cfg = c.load()?;
            let w = build_window(&cfg)?;
            let t = toast_stage(&cfg, &w)?;
            emit(&c, &cfg, "toast.json", &t.report)?;
            Ok(if t.report.validation.ok() { Outcome::Pass } else { Outcome::Violation })
        }
        Cmd::Flows(c) => {
            let mut cfg = c.load()?;
            cfg.flows.check_identity = true;
            let w = build_window(&cfg)?;
            let (_, reps) = flow_stage(&cfg, &w)?;
            emit(&c, &cfg, "flows.json", &reps)?;
            let ok = reps.iter().all(|r| r.dyadic_integral && r.identity.as_ref().is_some_and(|i| i.ok));
            Ok(if ok { Outcome::Pass } else { Outcome::Violation })
        }
        Cmd::Verify { report, assignment } => {
            let v = read_json(&report)?;
            let mut failures = verify_report(&v)?.failures;
            if let Some(p) = assignment {
                let (art, pa) = load_artifact(&p)?;
                let w = build_window(&art.config)?;
                let ver = verify_equidecomposition(&pa, &w).map_err(|e| CliError::Stage { stage: "verify_equidecomposition", source: e })?;
                failures.extend(ver.violations.iter().cloned());
                if !ver.ok() && ver.violations.is_empty() {
                    failures.push("assignment does not verify".into());
                }
            }
            for f in &failures {
                println!("FAIL {f}");
            }
            if failures.is_empty() {
                println!("ok");
                Ok(Outcome::Pass)
            } else {
                Ok(Outcome::Violation)
            }
        }
        Cmd::Render { assignment, out } => {
            let (art, pa) = load_artifact(&assignment)?;
            let w = build_window(&art.config)?;
            let s = render::render_svg(&pa, &w, &out)?;
            println!("{} ({} pieces)", out.display(), s.pieces);
            Ok(Outcome::Pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
