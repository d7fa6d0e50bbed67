use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hoigraph::commands::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_synth_gen, cmd_train, GradcheckHooks, Manifest};
use hoigraph::config::{parse_protocol, parse_thresholds, parse_topology, Overrides, RunConfig};
use hoigraph::model::Variant;
use hoigraph::segeval::{F1Report, Task};

#[derive(Parser)]
#[command(name = "hoigraph", version, about = "Geometric graph networks for human-object interaction segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into --out.
    SynthGen(Common),
    /// Train on every video and write a checkpoint.
    Train(Common),
    /// Score a checkpoint, or cross-validate when none is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validate the full model and every ablation variant.
    Ablate(Common),
    /// Finite-difference check of every parameter group on a tiny video.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, no-skeletons, no-objects, no-embedding, no-similarity,
    /// no-human-object, no-object-object or with-human-geometry.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated enabled edge classes, e.g. human-human,human-object.
    #[arg(long)]
    topology: Option<String>,
    /// leave-one-subject or leave-pair.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated IoU thresholds, e.g. 0.1,0.25,0.5.
    #[arg(long)]
    k_thresholds: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            variant: self.variant.as_deref().map(str::parse::<Variant>).transpose()?,
            topology: self.topology.as_deref().map(parse_topology).transpose()?,
            protocol: self.protocol.as_deref().map(parse_protocol).transpose()?,
            k_thresholds: self.k_thresholds.as_deref().map(parse_thresholds).transpose()?,
        };
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

fn print_manifest(m: &Manifest) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(m)?);
    Ok(())
}

fn print_report(label: &str, report: &F1Report) {
    for (task, rep) in &report.tasks {
        let cells: Vec<String> = report
            .ks
            .iter()
            .zip(rep.mean_f1.iter().zip(&rep.std_f1))
            .map(|(k, (m, s))| format!("F1@{:.0} {:.3} ± {:.3}", k * 100.0, m, s))
            .collect();
        println!("{label} {:<12} {}", task.as_str(), cells.join("  "));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(c) => {
            let cfg = c.resolve()?;
            let m = cmd_synth_gen(&cfg).context("synth-gen failed")?;
            print_manifest(&m)?;
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let run = cmd_train(&cfg).context("training failed")?;
            if let Some(l) = run.log.final_loss() {
                println!("final loss {l:.6} after {} epochs", run.log.epoch_loss.len());
            }
            println!("checkpoint {}", run.checkpoint.display());
            println!("digest {}", run.manifest.digest);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let res = cmd_eval(&cfg, checkpoint.as_deref()).context("evaluation failed")?;
            print_report("joined", &res.outcome.joined);
            print_report("given ", &res.outcome.given);
            for w in &res.manifest.notes {
                eprintln!("warning: {w}");
            }
            println!("digest {}", res.manifest.digest);
        }
        Command::Ablate(c) => {
            let cfg = c.resolve()?;
            let res = cmd_ablate(&cfg).context("ablation failed")?;
            for row in &res.rows {
                match (&row.outcome, &row.note) {
                    (Some(o), _) => {
                        let f = o.joined_f1(Task::SubActivity, cfg.eval.k_thresholds[0]).unwrap_or(f64::NAN);
                        println!("{:<22} F1@{:.0} {f:.3}", row.variant.name(), cfg.eval.k_thresholds[0] * 100.0);
                    }
                    (None, note) => println!("{:<22} skipped: {}", row.variant.name(), note.as_deref().unwrap_or("")),
                }
            }
            println!("digest {}", res.manifest.digest);
        }
        Command::Gradcheck(c) => {
            let cfg = c.resolve()?;
            let res = cmd_gradcheck(&cfg, GradcheckHooks::default()).context("gradient check failed to run")?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            for (group, err) in res.report.by_group() {
                let mark = if err <= res.report.tolerance { "ok  " } else { "FAIL" };
                println!("{mark} {group:<24} {err:.3e}");
            }
            if !res.report.passed {
                bail!("gradient check failed: worst relative error {:.3e} > {:.1e}", res.report.worst(), res.report.tolerance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
