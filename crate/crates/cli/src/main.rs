use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lga_core::config::{SimConfig, Variant};
use lga_core::coordinator::{parse_metrics_jsonl, run_simulation_with, write_outputs, Summary};
use lga_core::demo::privacy_triplets;
use lga_core::gradcheck::{run_suite, CheckedLoss, SuiteOptions};
use lga_core::proxy::write_flat_image;

/// Environment variable naming the default output directory.
const OUTPUT_ENV: &str = "LGA_OUTPUT_DIR";
const FALLBACK_OUTPUT: &str = "lga-output";

#[derive(Parser)]
#[command(name = "lga", version, about = "Federated class-incremental learning simulator")]
struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory; overrides output.dir and LGA_OUTPUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Suppress per-round progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of one analytic gradient (checks the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write source, perturbed and reconstructed prototype images.
    ReconDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config supplying data, model and encoder settings (desk preset otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        train_epochs: usize,
    },
    /// Summarize a metrics.jsonl file as a per-task accuracy table.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Lga,
    NoSdl,
    NoCbl,
    FedavgCe,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Lga => Variant::Lga,
            VariantArg::NoSdl => Variant::NoSdl,
            VariantArg::NoCbl => Variant::NoCbl,
            VariantArg::FedavgCe => Variant::FedavgCe,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config, out, seed, variant, quiet } => run(&config, out, seed, variant, quiet),
        Command::Gradcheck { tol, configs, seed, inject_fault } => gradcheck(tol, configs, seed, inject_fault),
        Command::ReconDemo { seed, count, out, config, train_epochs } => recon_demo(seed, count, out, config, train_epochs),
        Command::Report { metrics, json } => report(&metrics, json),
    }
}

fn resolve_out(flag: Option<PathBuf>, config: Option<&Path>) -> PathBuf {
    flag.or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT))
}

fn run(path: &Path, out: Option<PathBuf>, seed: Option<u64>, variant: Option<VariantArg>, quiet: bool) -> Result<ExitCode> {
    let mut config = SimConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(v) = variant {
        config.variant = v.into();
    }
    let dir = resolve_out(out, config.output.dir.as_deref());
    let outcome = run_simulation_with(&config, |r| {
        if !quiet {
            eprintln!(
                "task {} round {:>2}  acc {:.3}  f1 {:.3}  transitions {}  prototypes {}",
                r.task,
                r.round,
                r.accuracy_seen,
                r.macro_f1,
                r.transitions.len(),
                r.prototypes_reconstructed
            );
        }
    })?;
    write_outputs(&outcome, &dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    print!("{}", outcome.summary.table());
    println!("prototype/model traffic {:.3}%", 100.0 * outcome.summary.prototype_share());
    println!("outputs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(tol: f64, configs: usize, seed: u64, inject: Option<String>) -> Result<ExitCode> {
    if !(tol > 0.0) {
        bail!("--tol must be positive");
    }
    let fault = match inject {
        None => None,
        Some(name) => Some(
            CheckedLoss::ALL
                .into_iter()
                .find(|l| l.name() == name || l.symbol() == name)
                .with_context(|| format!("unknown loss {name:?}"))?,
        ),
    };
    let start = std::time::Instant::now();
    let reports = run_suite(&SuiteOptions { configs, seed, fault })?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(tol);
        println!(
            "{:<22} {:<5} configs {:>3}  max rel err {:.3e}  {}",
            r.loss.name(),
            r.loss.symbol(),
            r.configs,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(format!("{} ({})", r.loss.name(), r.loss.symbol()));
        }
    }
    println!("tolerance {tol:e}, {:.2?}", start.elapsed());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn recon_demo(seed: u64, count: usize, out: Option<PathBuf>, config: Option<PathBuf>, epochs: usize) -> Result<ExitCode> {
    let config = match config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::desk(seed),
    };
    let dir = resolve_out(out, config.output.dir.as_deref()).join("recon");
    std::fs::create_dir_all(&dir)?;
    let side = (config.data.dim as f64).sqrt().round() as usize;
    let triplets = privacy_triplets(&config, seed, count, epochs)?;
    let mut csv = String::from("index,label,inferred_label,initial_loss,final_loss,loss_ratio,steps,cos_to_perturbed,cos_to_source\n");
    println!("idx label  L_IR ratio   cos(rec,pert) cos(rec,src)");
    for t in &triplets {
        for (kind, img) in [("source", &t.source), ("perturbed", &t.perturbed), ("reconstructed", &t.reconstructed)] {
            write_flat_image(dir.join(format!("{:03}_{kind}.lgai", t.index)), img, side, side, t.label)?;
        }
        csv.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{},{},{}\n",
            t.index,
            t.label,
            t.inferred_label,
            t.initial_loss,
            t.final_loss,
            t.loss_ratio(),
            t.steps_taken,
            t.cos_to_perturbed,
            t.cos_to_source
        ));
        println!("{:>3} {:>5}  {:.2e}   {:.4}        {:.4}", t.index, t.label, t.loss_ratio(), t.cos_to_perturbed, t.cos_to_source);
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    println!("wrote {} triplets to {}", triplets.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn report(path: &Path, json: bool) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let reports = parse_metrics_jsonl(&text)?;
    let summary = Summary::from_reports(&reports)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.table());
        println!(
            "final acc {:.3}  macro-F1 {:.3}  macro-recall {:.3}",
            summary.final_accuracy, summary.final_macro_f1, summary.final_macro_recall
        );
        println!(
            "traffic: models {} B, prototype gradients {} B ({:.3}%)",
            summary.bytes_models,
            summary.bytes_prototype_grads,
            100.0 * summary.prototype_share()
        );
    }
    Ok(ExitCode::SUCCESS)
}
