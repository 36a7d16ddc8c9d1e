use std::path::PathBuf;
use std::process::ExitCode;

use altfl::archive::{read_rows, Archive, Failure, RecordRow, ARCHIVE_ENV};
use altfl::experiment::{run_levels, run_matrices, run_selection, run_training_sweep, success_rate_par, StageSummary, Workspace};
use altfl::report::{bench_he, render};
use altfl::spec::ExperimentSpec;
use altfl_core::attack::AttackKind;
use altfl_core::{InterleaveRatio, Method, ProtectionConfig};
use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

/// Federated-learning protection simulator.
#[derive(Parser, Debug)]
#[command(name = "altfl", version, about)]
struct Cli {
    /// Experiment spec (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Archive root; the experiment writes to <root>/<spec name>.
    #[arg(long, global = true, env = ARCHIVE_ENV, default_value = "archive")]
    archive: PathBuf,
    /// Override a spec field, e.g. `--set rounds=20 --set local.lr=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configuration × α × r × seed and write records.csv.
    Train,
    /// Success rate of one attack against one protection setting.
    Attack {
        #[arg(long)]
        attack: String,
        #[arg(long, default_value = "MP")]
        method: String,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value = "0")]
        ratio: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure success-rate matrices over the (σ, η) grid.
    Matrix,
    /// Derive privacy levels from the stored matrices.
    Levels,
    /// Run threshold-based selection for both research questions.
    Select {
        /// Records CSV to select from instead of the archive's.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Write report.md.
    Report,
    /// Time the HE backend and print its cost coefficients.
    BenchHe {
        #[arg(long, default_value_t = 100_000)]
        coords: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// matrix, levels, train, select and report in sequence.
    Run,
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let spec = match &cli.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    let spec = spec.with_overrides(&cli.overrides)?;
    spec.validate()?;
    Ok(spec)
}

fn note(stage: &str, s: &StageSummary) {
    eprintln!("{stage}: {} tasks, {} already done, {} run, {} failed", s.total, s.skipped, s.ran, s.failures.len());
}

fn report(spec: &ExperimentSpec, archive: &Archive) -> Result<()> {
    let _ = spec;
    let records = archive.read_records()?;
    let levels = archive.read_levels()?;
    archive.write_text(&archive.report_path(), &render(&records, levels.as_deref()))
}

fn run(cli: &Cli) -> Result<Vec<Failure>> {
    let spec = load_spec(cli)?;
    let archive = Archive::new(&cli.archive, &spec.name);
    let mut failures = Vec::new();
    match &cli.command {
        Command::BenchHe { coords, repeats } => {
            println!("{}", serde_json::to_string_pretty(&bench_he(spec.cost, *coords, *repeats)?)?);
            return Ok(failures);
        }
        Command::Attack { attack, method, sigma, eta, ratio, trials, seed } => {
            let kind = AttackKind::from_name(attack).ok_or_else(|| anyhow!("unknown attack `{attack}`"))?;
            let method = Method::from_name(method).ok_or_else(|| anyhow!("unknown method `{method}`"))?;
            let ratio: InterleaveRatio = ratio.parse().map_err(|e| anyhow!("bad ratio `{ratio}`: {e}"))?;
            let prot = ProtectionConfig::new(method, *sigma, *eta, ratio);
            prot.validate()?;
            let ws = Workspace::load(&spec)?;
            let env = ws.attack_env(&spec, prot.clip_norm);
            let rate = success_rate_par(&env, &spec.attack.config(kind), &prot, *trials, *seed)?;
            let out = serde_json::json!({ "attack": kind, "config": prot, "trials": trials, "seed": seed, "success_rate": rate });
            println!("{}", serde_json::to_string_pretty(&out)?);
            return Ok(failures);
        }
        _ => {}
    }
    archive.create()?;
    archive.write_json(&archive.spec_path(), &spec)?;
    let needs_ws = matches!(cli.command, Command::Train | Command::Matrix | Command::Run);
    let ws = if needs_ws { Some(Workspace::load(&spec)?) } else { None };
    let ws = || ws.as_ref().expect("loaded for this command");
    match &cli.command {
        Command::Train => {
            let s = run_training_sweep(&spec, ws(), &archive)?;
            note("train", &s);
            failures.extend(s.failures);
        }
        Command::Matrix => {
            let s = run_matrices(&spec, ws(), &archive)?;
            note("matrix", &s);
            failures.extend(s.failures);
        }
        Command::Levels => {
            let levels = run_levels(&spec, &archive)?;
            eprintln!("levels: {} written to {}", levels.len(), archive.levels_path().display());
        }
        Command::Select { records } => {
            let rows: Vec<RecordRow> = match records {
                Some(p) => read_rows(p).with_context(|| format!("reading {}", p.display()))?,
                None => archive.read_records()?,
            };
            for r in run_selection(&spec, &archive, &rows)? {
                println!("{}\n{}", r.rq.to_uppercase(), r.table);
            }
        }
        Command::Report => report(&spec, &archive)?,
        Command::Run => {
            let s = run_matrices(&spec, ws(), &archive)?;
            note("matrix", &s);
            failures.extend(s.failures);
            if failures.is_empty() {
                run_levels(&spec, &archive)?;
            }
            let s = run_training_sweep(&spec, ws(), &archive)?;
            note("train", &s);
            failures.extend(s.failures);
            match run_selection(&spec, &archive, &archive.read_records()?) {
                Ok(_) => {}
                Err(e) => failures.push(Failure { key: "selection".into(), stage: "select".into(), error: format!("{e:#}") }),
            }
            report(&spec, &archive)?;
        }
        Command::Attack { .. } | Command::BenchHe { .. } => unreachable!("handled above"),
    }
    if matches!(cli.command, Command::Train | Command::Matrix | Command::Run) {
        archive.write_failures(&failures)?;
    }
    Ok(failures)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(f) if f.is_empty() => ExitCode::SUCCESS,
        Ok(f) => {
            eprintln!("{} task(s) failed; see failures.json", f.len());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
