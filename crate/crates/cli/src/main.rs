use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use robustfed::data::inspect_idx_header;
use robustfed::harness::{run_experiment, ExperimentConfig, RunOptions, RunRecord};

const OUTPUT_ROOT_VAR: &str = "ROBUSTFED_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "robustfed", version, about = "Robust federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write metrics, summaries and a manifest.
    Run(RunArgs),
    /// Run the sweep with diagnostics enabled and print the gap analysis.
    Diagnose(RunArgs),
    /// Print the header of an IDX file.
    InspectIdx {
        path: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for data generation, subsampling, partitioning and initialization.
    #[arg(long)]
    seed: u64,
    /// Output directory. Relative paths resolve against $ROBUSTFED_OUTPUT_ROOT when set.
    #[arg(long)]
    out: PathBuf,
    /// Override a config value, e.g. `--set federation.rounds=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Maximum number of grid cells run concurrently (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Keep this fraction of the training samples.
    #[arg(long)]
    subsample: Option<f64>,
    /// Root for relative output paths.
    #[arg(long, env = OUTPUT_ROOT_VAR, hide_env_values = true)]
    output_root: Option<PathBuf>,
}

impl RunArgs {
    fn output_dir(&self) -> PathBuf {
        match &self.output_root {
            Some(root) if self.out.is_relative() => root.join(&self.out),
            _ => self.out.clone(),
        }
    }

    fn load(&self, diagnostics: bool) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        overrides.push(format!("seed={}", self.seed));
        if let Some(f) = self.subsample {
            overrides.push(format!("dataset.subsample={f:?}"));
        }
        if diagnostics {
            overrides.push("diagnostics.enabled=true".into());
        }
        ExperimentConfig::load(&self.config, &overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

fn report(records: &[RunRecord], out: &Path) {
    for r in records {
        let last = r.metrics.last();
        let status = match &r.error {
            Some(e) => format!("FAILED: {e}"),
            None => "ok".into(),
        };
        println!(
            "{:<28} rounds={:<4} cost={:<12} accuracy={:<8} {}",
            r.id,
            last.map_or(0, |m| m.round),
            last.map_or("-".into(), |m| format!("{:.6}", m.global_cost)),
            r.final_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            status
        );
    }
    println!("outputs written to {}", out.display());
}

fn diagnostics_summary(records: &[RunRecord]) {
    for r in records {
        if let Some(e) = &r.diagnostics_error {
            println!("{:<28} diagnostics failed: {e}", r.id);
        }
        let Some(d) = &r.diagnostics else { continue };
        let p_matrix = d.p_matrix.map_or("n/a".to_string(), |b| b.to_string());
        print!(
            "{:<28} P-matrix={p_matrix} c_sm={:.6}{} perturbation={:.6}",
            r.id,
            d.c_sm.value,
            if d.c_sm.sampled { " (sampled)" } else { "" },
            d.perturbation_bound
        );
        if let Some(g) = &d.gap {
            print!(" delta={:.6} bound={:.6} holds={}", g.delta, g.bound, g.bound_holds);
        }
        println!();
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.load(false)?;
            let out = args.output_dir();
            let records = run_experiment(&config, &out, RunOptions { jobs: args.jobs })?;
            report(&records, &out);
        }
        Command::Diagnose(args) => {
            let config = args.load(true)?;
            let out = args.output_dir();
            let records = run_experiment(&config, &out, RunOptions { jobs: args.jobs })?;
            diagnostics_summary(&records);
            let path = out.join("diagnostics.json");
            let reports: Vec<_> = records
                .iter()
                .filter(|r| r.diagnostics.is_some() || r.diagnostics_error.is_some())
                .map(|r| {
                    serde_json::json!({
                        "id": r.id,
                        "report": r.diagnostics,
                        "error": r.diagnostics_error,
                    })
                })
                .collect();
            std::fs::write(&path, serde_json::to_string_pretty(&reports)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("diagnostics written to {}", path.display());
        }
        Command::InspectIdx { path } => {
            let h = inspect_idx_header(&path)?;
            println!("magic      0x{:08x} ({})", h.magic, h.magic);
            println!("type code  0x{:02x}", h.type_code);
            println!("dims       {:?}", h.dims);
            println!("header     {} bytes", h.header_bytes);
            println!("payload    {} bytes declared", h.payload_bytes);
            println!("file       {} bytes", h.file_bytes);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
