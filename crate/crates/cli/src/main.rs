use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conjoint_cli::config::RunConfig;
use conjoint_cli::exit_code;
use conjoint_cli::pipeline::{self, Stage};
use conjoint_core::infer::PosteriorDraws;
use conjoint_core::revenue::BundleScenario;
use conjoint_core::{output, Error, Result};

#[derive(Parser)]
#[command(name = "conjoint-wtp", version, about = "Simulate conjoint surveys, fit a hierarchical logit, and price feature bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a survey from the configured ground truth.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit the hierarchical logit to a choices CSV.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Choices CSV (default: <out>/choices.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Summarize willingness to pay from a posterior file.
    Wtp {
        #[command(flatten)]
        io: PosteriorArgs,
        /// Ground truth, either a provenance.json or a bare truth document.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Revenue curve of a feature bundle over a price grid.
    Revenue {
        #[command(flatten)]
        io: PosteriorArgs,
        /// Scenario JSON (default: the config's scenario, else the built-in bundle).
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run simulate, fit, wtp and revenue and write report.json.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// First stage to run; earlier stages are read back from the output directory.
        #[arg(long, value_enum, default_value = "simulate")]
        from: Stage,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Args)]
struct PosteriorArgs {
    /// Posterior file (default: <out>/posterior.jsonl).
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's output_dir, else the posterior's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_run(args: &RunArgs, sampler: Option<&SamplerArgs>) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(s) = sampler {
        if let Some(c) = s.chains {
            config.model.chains = c;
        }
        if let Some(d) = s.draws {
            config.model.draws_per_chain = d;
        }
        if let Some(w) = s.warmup {
            config.model.warmup_per_chain = w;
        }
    }
    config.propagate_seed();
    Ok(config)
}

/// Resolve (posterior path, output directory, optional config).
fn resolve_posterior(io: &PosteriorArgs) -> Result<(PathBuf, PathBuf, Option<RunConfig>)> {
    let config = io.config.as_deref().map(RunConfig::load).transpose()?;
    let out = io
        .out
        .clone()
        .or_else(|| config.as_ref().map(|c| c.output_dir.clone()))
        .or_else(|| io.posterior.as_ref().map(|p| p.parent().unwrap_or(Path::new(".")).to_path_buf()))
        .ok_or_else(|| Error::Contract("give --posterior, --out or --config".into()))?;
    let posterior = io.posterior.clone().unwrap_or_else(|| out.join(pipeline::POSTERIOR));
    Ok((posterior, out, config))
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("CONJOINT_WTP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Contract(format!("CONJOINT_WTP_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Simulate { run } => {
            let config = load_run(&run, None)?;
            config.validate(true)?;
            std::fs::create_dir_all(&config.output_dir)?;
            let ds = pipeline::simulate(&config, &config.output_dir)?;
            println!("wrote {} choice records to {}", ds.len(), config.output_dir.join(pipeline::CHOICES).display());
        }
        Command::Fit { run, sampler, data } => {
            let config = load_run(&run, Some(&sampler))?;
            config.validate(false)?;
            let out = &config.output_dir;
            std::fs::create_dir_all(out)?;
            let data = data.unwrap_or_else(|| out.join(pipeline::CHOICES));
            let ds = pipeline::load_dataset(&config.scheme, &data)?;
            let (draws, diag) = pipeline::fit(&ds, &config.model, out)?;
            println!(
                "{} draws from {} chains; max population R-hat {:.4}; {} divergent",
                draws.n_draws,
                draws.n_chains(),
                diag.max_population_r_hat(),
                diag.divergence_count
            );
            for w in &diag.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Wtp { io, truth } => {
            let (posterior, out, _) = resolve_posterior(&io)?;
            let truth = truth.as_deref().map(pipeline::load_truth).transpose()?;
            let draws = PosteriorDraws::load_jsonl(&posterior)?;
            std::fs::create_dir_all(&out)?;
            let result = pipeline::wtp(&draws, truth.as_ref(), &out)?;
            for s in &result.summaries {
                println!("{:<20} mean {:>9.2}  95% HDI [{:.2}, {:.2}]", s.feature, s.mean, s.hdi_low, s.hdi_high);
            }
            match &result.recovery {
                Some(r) => println!("recovery: {}", if r.overall_pass { "all features covered" } else { "NOT all covered" }),
                None => println!("no ground truth given; recovery report skipped"),
            }
            pipeline::update_report(&out, "wtp", &result)?;
        }
        Command::Revenue { io, scenario, seed } => {
            let (posterior, out, config) = resolve_posterior(&io)?;
            let draws = PosteriorDraws::load_jsonl(&posterior)?;
            let mut scenario = match scenario {
                Some(path) => output::read_json::<BundleScenario>(&path)
                    .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?,
                None => config.as_ref().and_then(|c| c.scenario.clone()).unwrap_or_else(BundleScenario::smartphone),
            };
            scenario.seed = seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(draws.config.seed);
            std::fs::create_dir_all(&out)?;
            let summary = pipeline::revenue(&draws, &scenario, &out)?;
            println!(
                "revenue-maximizing price {} (per-draw argmax 95% HDI [{}, {}])",
                summary.argmax_price, summary.argmax_hdi.0, summary.argmax_hdi.1
            );
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            pipeline::update_report(&out, "revenue", &summary)?;
        }
        Command::Pipeline { run, sampler, from } => {
            let config = load_run(&run, Some(&sampler))?;
            let report = pipeline::run(&config, from)?;
            for s in &report.wtp {
                println!("{:<20} mean {:>9.2}  95% HDI [{:.2}, {:.2}]", s.feature, s.mean, s.hdi_low, s.hdi_high);
            }
            println!("max population R-hat {:.4}", report.diagnostics.max_population_r_hat);
            if let Some(r) = &report.revenue {
                println!("revenue-maximizing price {}", r.argmax_price);
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
            }
            for w in &report.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            if !report.overall_pass {
                eprintln!("quality gates failed: {:?}", report.quality_gates);
                return Ok(ExitCode::from(1));
            }
            println!("all quality gates passed");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
