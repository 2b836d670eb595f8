use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stylequant::harness::{self, HarnessError, TrainConfig};
use stylequant::sinkhorn;

#[derive(Parser)]
#[command(name = "stylequant", about = "Style-space quantization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run only the codebook-initialization phase and save a checkpoint.
    InitCodebook {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and append one metrics row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Optional config supplying the dataset and eval settings;
        /// defaults are used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve one entropic OT problem from a cost-matrix file.
    Sinkhorn {
        /// Text file: first line `n m`, then n rows of m costs.
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        tol: f64,
    },
    /// Generate a synthetic dataset as CSV.
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with a zero-ish intent
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config } => {
            let config = TrainConfig::load(&config)?;
            let outcome = harness::train(&config)?;
            if let Some(report) = &outcome.cbi_report {
                println!(
                    "cbi: {} steps, final usage {:.4}",
                    report.ot_trace.len(),
                    report.final_usage
                );
            }
            if let Some(row) = outcome.rows.last() {
                println!(
                    "step {}: adv_g {:.4} adv_d {:.4} usage {:.4} coverage {:.4} mmd {:.6}",
                    row.step, row.adv_g, row.adv_d, row.usage, row.mode_coverage, row.kernel_mmd
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(())
        }
        Command::InitCodebook { config, out } => {
            let config = TrainConfig::load(&config)?;
            if config.cbi.is_none() {
                return Err(HarnessError::Config(
                    "init-codebook requires a [cbi] section in the config".into(),
                ));
            }
            let dataset = harness::make_dataset(&config.dataset)?;
            let mut model = harness::train::build_model(&config);
            let report = harness::train::cbi_phase(&mut model, &config, &dataset.samples)?;
            harness::save_checkpoint(&model, &out)
                .map_err(|source| HarnessError::Checkpoint { path: out.clone(), source })?;
            println!(
                "cbi: {} steps, final usage {:.4}, checkpoint {}",
                report.ot_trace.len(),
                report.final_usage,
                out.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, metrics, config } => {
            let config = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let model = harness::load_checkpoint(&ckpt)
                .map_err(|source| HarnessError::Checkpoint { path: ckpt.clone(), source })?;
            let dataset = harness::make_dataset(&config.dataset)?;
            let row = harness::train::evaluate_checkpoint(&model, &config, &dataset)?;
            let mut writer = harness::MetricsWriter::create(&metrics)?;
            writer.append(&row)?;
            println!(
                "usage {:.4} coverage {:.4} mmd {:.6} mean_cos_sim {:.4}",
                row.usage, row.mode_coverage, row.kernel_mmd, row.mean_cos_sim
            );
            Ok(())
        }
        Command::Sinkhorn { cost, eta, tol } => {
            let cost_matrix = read_cost_file(&cost)?;
            let (n, m) = cost_matrix.values.dims2().expect("rank-2 cost");
            let p = vec![1.0 / n as f64; n];
            let q = vec![1.0 / m as f64; m];
            let state = sinkhorn::log_domain_sinkhorn(&cost_matrix, &p, &q, eta, tol, 10_000)?;
            println!("iterations: {}", state.iterations);
            println!("converged: {}", state.converged);
            println!("marginal_error: {:e}", state.marginal_error);
            println!("transport_cost: {}", state.transport_cost(&cost_matrix));
            Ok(())
        }
        Command::GenData { kind, size, seed, out } => {
            let kind: harness::DatasetKind =
                kind.parse().map_err(HarnessError::Config)?;
            let spec = harness::DatasetSpec { kind, size, seed, ..Default::default() };
            let dataset = harness::make_dataset(&spec)?;
            let dim = spec.data_dim();
            let mut text = String::new();
            for i in 0..size {
                let row: Vec<String> = dataset.samples.data[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|v| v.to_string())
                    .collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            println!("wrote {} samples to {}", size, out.display());
            Ok(())
        }
    }
}

fn read_cost_file(path: &std::path::Path) -> Result<sinkhorn::CostMatrix, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut tokens = text.split_whitespace();
    let bad = |msg: &str| HarnessError::Config(format!("{}: {msg}", path.display()));
    let n: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("first line must be `n m`"))?;
    let m: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("first line must be `n m`"))?;
    let mut values = Vec::with_capacity(n * m);
    for t in tokens {
        values.push(
            t.parse::<f64>()
                .map_err(|_| bad(&format!("bad cost value `{t}`")))?,
        );
    }
    if values.len() != n * m {
        return Err(bad(&format!("expected {} cost values, found {}", n * m, values.len())));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(bad("costs must be finite and nonnegative"));
    }
    Ok(sinkhorn::CostMatrix {
        values: stylequant::Tensor::matrix(n, m, values),
        metric: sinkhorn::Metric::Euclidean,
    })
}
