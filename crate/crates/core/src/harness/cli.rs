//! The `entangle` command line. Exit codes: 0 success, 1 invariant or
//! runtime failure, 2 bad usage or configuration.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::check::{run_checks, CheckOptions};
use super::config::{ExperimentConfig, Task};
use super::data::gen_dataset_sized;
use super::model::Model;
use super::train::{sweep_with, train_full, write_run, TRACE_SAMPLES};
use crate::blocks::Checkpoint;
use crate::entangle::{format_kernel_file, materialize, spectrum_report, EntanglementKind, EntanglementSpec};
use crate::error::{Error, Result};
use crate::refine::{trace_csv, trace_refinement};

#[derive(Debug, Parser)]
#[command(name = "entangle", version, about = "Entangled residual mappings: operators, training runs and checks")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the kernel (or matrix) file for an entanglement spec.
    MakeKernel {
        /// e.g. "kind=spatial gamma=0.5 k=3 c=4"
        #[arg(long)]
        spec: Option<String>,
        /// Take the spec from a config's [entanglement] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for kernel.txt; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the spectrum of an entanglement operator.
    Spectrum {
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every sweep spec for every seed and write summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refinement CSV for a checkpoint written by `train`.
    RefineTrace {
        checkpoint: PathBuf,
        /// Data seed; defaults to the seed recorded in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for refinement.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; exits 1 on any violation.
    Check {
        /// Add 1e-6 to the first entry of every operator of this kind.
        #[arg(long)]
        perturb: Option<EntanglementKind>,
    },
}

/// Parses `args` (including the program name) and runs, writing to the
/// process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse(_)
        | Error::InvalidSpec(_)
        | Error::InvalidGamma(_)
        | Error::InvalidKernelSize(_)
        | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn resolve_spec(spec: Option<String>, config: Option<PathBuf>, seed: Option<u64>) -> Result<EntanglementSpec> {
    let spec = match (spec, config) {
        (Some(s), None) => s.parse()?,
        (None, Some(p)) => ExperimentConfig::load(&p)?.entanglement,
        _ => return Err(Error::InvalidArgument("give exactly one of --spec or --config".into())),
    };
    Ok(match seed {
        Some(s) => spec.with_seed(s),
        None => spec,
    })
}

/// Shortest decimal that rounds to `v` at 12 digits, keeping one fractional
/// digit: 0.6000000000000001 prints as `0.6`, 1 as `1.0`.
fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    let s = if s.ends_with('.') { format!("{s}0") } else { s.to_string() };
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", ")
}

fn json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    writeln!(out, "{s}").map_err(io)
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let json = cli.json;
    match cli.command {
        Command::MakeKernel { spec, config, seed, out: dir } => {
            let spec = resolve_spec(spec, config, seed)?;
            let text = format_kernel_file(&spec, &materialize(&spec)?);
            match dir {
                Some(d) => {
                    fs::create_dir_all(&d)?;
                    let path = d.join("kernel.txt");
                    fs::write(&path, &text)?;
                    if json {
                        json_line(out, &serde_json::json!({ "spec": spec.to_string(), "path": path }))?;
                    } else {
                        writeln!(out, "wrote {}", path.display()).map_err(io)?;
                    }
                }
                None => out.write_all(text.as_bytes()).map_err(io)?,
            }
        }
        Command::Spectrum { spec, config, seed } => {
            let r = spectrum_report(&resolve_spec(spec, config, seed)?)?;
            if json {
                json_line(out, &r)?;
            } else {
                writeln!(out, "spec: {}", r.spec).map_err(io)?;
                if let Some(e) = &r.eigenvalues {
                    writeln!(out, "eigenvalues: {}", fmt_list(e)).map_err(io)?;
                }
                if !r.singular_values.is_empty() {
                    writeln!(out, "singular_values: {}", fmt_list(&r.singular_values)).map_err(io)?;
                }
                writeln!(out, "spectral_norm: {}", fmt_num(r.spectral_norm)).map_err(io)?;
                writeln!(out, "is_orthogonal: {}", r.is_orthogonal).map_err(io)?;
                if let (Some(l1), Some(l2)) = (r.tap_l1, r.tap_l2) {
                    writeln!(out, "tap_l1: {}\ntap_l2: {}", fmt_num(l1), fmt_num(l2)).map_err(io)?;
                }
            }
        }
        Command::Train { config, seed, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let run = train_full(&cfg, seed)?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            write_run(&dir, &cfg, &run)?;
            let m = &run.metrics;
            if json {
                json_line(out, m)?;
            } else {
                writeln!(
                    out,
                    "seed {} {}: best test_acc {:.4}, status {:?}, {} epochs in {:.1}s -> {}",
                    m.seed,
                    m.entanglement,
                    m.best_test_acc,
                    m.status,
                    m.epochs.len().saturating_sub(1),
                    m.wall_time_secs,
                    dir.display()
                )
                .map_err(io)?;
            }
        }
        Command::Sweep { config, seed, out: dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let result = sweep_with(&cfg, |c| {
                let _ = writeln!(
                    err,
                    "[{}] {} seed {}: best test_acc {:.4} ({:?})",
                    c.index, c.spec, c.seed, c.metrics.best_test_acc, c.metrics.status
                );
            })?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            result.write(&dir)?;
            if json {
                json_line(out, &result)?;
            } else {
                out.write_all(result.summary_csv().as_bytes()).map_err(io)?;
            }
        }
        Command::RefineTrace { checkpoint, seed, out: dir } => {
            let csv_or_rows = refine_trace(&checkpoint, seed)?;
            match dir {
                Some(d) => {
                    fs::create_dir_all(&d)?;
                    fs::write(d.join("refinement.csv"), trace_csv(&csv_or_rows))?;
                }
                None if json => json_line(out, &csv_or_rows)?,
                None => out.write_all(trace_csv(&csv_or_rows).as_bytes()).map_err(io)?,
            }
        }
        Command::Check { perturb } => {
            let results = run_checks(&CheckOptions { perturb });
            let ok = results.iter().all(|r| r.passed);
            if json {
                json_line(out, &results)?;
            } else {
                for r in &results {
                    writeln!(
                        out,
                        "{} criterion {} {}: {} ({:.2}s)",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.id,
                        r.name,
                        r.detail,
                        r.seconds
                    )
                    .map_err(io)?;
                }
            }
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Rebuilds the test inputs a checkpoint was traced on and traces them again.
fn refine_trace(path: &Path, seed: Option<u64>) -> Result<Vec<crate::refine::RefinementTrace>> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let task: Task = ckpt.require_meta("task")?.parse()?;
    let seed = match seed {
        Some(s) => s,
        None => ckpt
            .require_meta("seed")?
            .parse()
            .map_err(|_| Error::Parse("bad checkpoint seed".into()))?,
    };
    let test_size: usize = match ckpt.meta("test_size") {
        Some(s) => s.parse().map_err(|_| Error::Parse("bad checkpoint test_size".into()))?,
        None => TRACE_SAMPLES,
    };
    let n = test_size.min(TRACE_SAMPLES);
    let (_, test) = gen_dataset_sized(task, seed, 1, n)?;
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = test.batch(&idx);
    trace_refinement(&model.blocks, &model.block_input(&x)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_with(std::iter::once("entangle").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn numbers_print_cleanly() {
        assert_eq!(fmt_num(1.0), "1.0");
        assert_eq!(fmt_num(0.6000000000000001), "0.6");
        assert_eq!(fmt_num(0.5999999999999999), "0.6");
        assert_eq!(fmt_num(-1e-17), "0.0");
        assert_eq!(fmt_num(0.125), "0.125");
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_capture(&["bogus"]).0, 2);
        assert_eq!(run_capture(&["spectrum"]).0, 2);
        assert_eq!(run_capture(&["spectrum", "--spec", "kind=dense gamma=2 n=3"]).0, 2);
        assert_eq!(run_capture(&["train", "--config", "/nonexistent/cfg.txt"]).0, 2);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn spectrum_of_dense_three() {
        let (code, out, _) = run_capture(&["spectrum", "--spec", "kind=dense gamma=0.4 n=3"]);
        assert_eq!(code, 0);
        assert!(out.contains("eigenvalues: 1.0, 0.6, 0.6"), "{out}");
    }
}
