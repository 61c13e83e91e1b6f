//! Command-line interface for architecture search runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! The seed precedence is: CSNAS_SEED environment variable, then --seed, then
//! the config file.

use clap::{Parser, Subcommand, ValueEnum};
use csnas_core::search::{
    self, loss_quantiles, read_trials, RunConfig, RunOptions, Strategy, TrialRow,
};
use csnas_core::space::{
    cell_cardinality, encoding_length, export_genotype, import_genotype, space_cardinality,
    ExportFormat,
};
use csnas_core::tpe::TrialStatus;
use csnas_core::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (build ",
    env!("CSNAS_BUILD_HASH"),
    ")"
);

#[derive(Parser)]
#[command(name = "csnas", version = VERSION, about = "Cell-based architecture search with a contrastive score and a Parzen-estimator optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Tpe,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write the run directory.
    Search {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Suggestion strategy.
        #[arg(long, value_enum, default_value = "tpe")]
        strategy: StrategyArg,
        /// Continue a checkpointed run in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Print encoding length and exact search-space size.
    SpaceStats {
        /// Intermediate nodes per cell.
        #[arg(long)]
        n: usize,
        /// Operation vocabulary size.
        #[arg(long, default_value_t = 8)]
        vocab: usize,
    },
    /// Score one genotype with the configured evaluator.
    Eval {
        /// Genotype JSON file.
        #[arg(long)]
        genotype: PathBuf,
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Evaluation seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a genotype file to JSON or DOT.
    Export {
        /// Genotype JSON file.
        #[arg(long)]
        genotype: PathBuf,
        /// Output format: json or dot.
        #[arg(long)]
        format: String,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the best-so-far curve and summary quantiles for a run directory.
    History {
        /// Run directory holding trials.csv.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the curve CSV (default: <run>/curve.csv).
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidSpace(_) => 2,
        _ => 1,
    }
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("CSNAS_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config("CSNAS_SEED", format!("not a valid seed: {text:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Error> {
    Ok(env_seed()?.or(flag))
}

fn cmd_search(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    strategy: StrategyArg,
    resume: bool,
) -> Result<(), Error> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::Config {
        key: "config".into(),
        reason: format!("cannot read {}: {e}", config_path.display()),
    })?;
    let config = RunConfig::from_toml(&text)?;
    let options = RunOptions {
        seed_override: resolve_seed(seed)?,
        strategy: match strategy {
            StrategyArg::Tpe => Strategy::Tpe,
            StrategyArg::Random => Strategy::Random,
        },
        resume,
    };
    let outcome = search::run_search(&config, &text, out, &options)?;
    match &outcome.best {
        Some(best) => {
            println!(
                "best loss {} at trial {} (seed {})",
                best.loss, best.index, best.seed
            );
            println!("genotype: {}", out.join("best_genotype.json").display());
        }
        None => println!("no successful trial"),
    }
    println!("trials: {}", out.join("trials.csv").display());
    Ok(())
}

fn cmd_space_stats(n: usize, vocab: usize) -> Result<(), Error> {
    let len = encoding_length(n)?;
    let per_cell = cell_cardinality(n, vocab)?;
    let total = space_cardinality(n, vocab)?;
    println!("intermediate nodes: {n}");
    println!("vocabulary size: {vocab}");
    println!("encoding length per cell: {len}");
    println!("genotype length: {}", 2 * len);
    println!("cell cardinality: {vocab}^{len} = {per_cell}");
    println!(
        "space cardinality: ({vocab}^{len})^2 = {total} ({} digits)",
        total.to_string().len()
    );
    if n > 1 {
        let prev = cell_cardinality(n - 1, vocab)?;
        println!(
            "growth per cell vs n = {}: {vocab}^{} = {}",
            n - 1,
            len - encoding_length(n - 1)?,
            &per_cell / &prev
        );
    }
    Ok(())
}

fn cmd_eval(genotype_path: &Path, config_path: &Path, seed: Option<u64>) -> Result<(), Error> {
    let config = RunConfig::load(config_path)?;
    let text = std::fs::read_to_string(genotype_path).map_err(|e| Error::Config {
        key: "genotype".into(),
        reason: format!("cannot read {}: {e}", genotype_path.display()),
    })?;
    let genotype = import_genotype(&text)?;
    let seed = resolve_seed(seed)?.unwrap_or(config.run.seed);
    let loss = search::evaluate_genotype(&config, &genotype, seed)?;
    println!("loss {loss} (seed {seed})");
    Ok(())
}

fn cmd_export(genotype_path: &Path, format: &str, out: Option<&Path>) -> Result<(), Error> {
    let format: ExportFormat = format.parse()?;
    let text = std::fs::read_to_string(genotype_path).map_err(|e| Error::Config {
        key: "genotype".into(),
        reason: format!("cannot read {}: {e}", genotype_path.display()),
    })?;
    let genotype = import_genotype(&text)?;
    let rendered = export_genotype(&genotype, format);
    match out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_history(run: &Path, curve_out: Option<&Path>) -> Result<(), Error> {
    let rows: Vec<TrialRow> = read_trials(&run.join("trials.csv"))?;
    if rows.is_empty() {
        return Err(Error::format(
            run.display().to_string(),
            "run holds no trials",
        ));
    }
    let mut curve = String::from("trial,loss,best_so_far\n");
    let mut best: Option<f64> = None;
    let mut best_row: Option<&TrialRow> = None;
    for row in &rows {
        if let Some(loss) = row.loss {
            if best.map_or(true, |b| loss < b) {
                best = Some(loss);
                best_row = Some(row);
            }
        }
        let loss_text = row.loss.map(|l| l.to_string()).unwrap_or_default();
        let best_text = best.map(|b| b.to_string()).unwrap_or_default();
        curve.push_str(&format!("{},{},{}\n", row.index, loss_text, best_text));
    }
    let curve_path = curve_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("curve.csv"));
    std::fs::write(&curve_path, curve)?;

    let ok: Vec<f64> = rows.iter().filter_map(|r| r.loss).collect();
    let failed = rows
        .iter()
        .filter(|r| r.status == TrialStatus::Failed)
        .count();
    let summary = serde_json::json!({
        "trials": rows.len(),
        "ok": ok.len(),
        "failed": failed,
        "best": best_row.map(|r| serde_json::json!({
            "trial": r.index,
            "loss": r.loss,
            "seed": r.seed,
        })),
        "loss_quantiles": loss_quantiles(&ok),
        "wall_seconds_total": rows.iter().map(|r| r.wall_seconds).sum::<f64>(),
        "curve": curve_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Search {
            config,
            out,
            seed,
            strategy,
            resume,
        } => cmd_search(config, out, *seed, *strategy, *resume),
        Command::SpaceStats { n, vocab } => cmd_space_stats(*n, *vocab),
        Command::Eval {
            genotype,
            config,
            seed,
        } => cmd_eval(genotype, config, *seed),
        Command::Export {
            genotype,
            format,
            out,
        } => cmd_export(genotype, format, out.as_deref()),
        Command::History { run, curve_out } => cmd_history(run, curve_out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
