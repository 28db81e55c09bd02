use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mprnet::blocks::io::load_weights;
use mprnet::blocks::{ablation, build_model, count_params, ComplexityReport, ModelConfig};
use mprnet::degrade::{degrade_dir, list_pngs, DegradationSpec};
use mprnet::imaging::{load_image, save_image};
use mprnet::metrics::evaluate;
use mprnet::training::{fit, gradient_flow, training_set_psnr, RunConfig, TrainSet};
use mprnet::Error;

#[derive(Parser)]
#[command(name = "mprnet", version, about = "Lightweight single-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Produce LR images from a directory of HR PNGs.
    Degrade {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        scale: usize,
        #[arg(long = "in")]
        input: PathBuf,
        /// Parent directory; images go to OUT/X2, X3, X4, BD or DN.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from DATA/HR (with DATA/X<scale> if present), resuming from the
    /// latest checkpoint in OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve every PNG in a directory.
    Sr {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Y-channel PSNR/SSIM of SR images against same-named HR images.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Pixels shaved from each side; defaults to the scale.
        #[arg(long)]
        border: Option<usize>,
        /// Also write the per-image CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print parameter and multiply-accumulate counts per layer.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build every row of an ablation table and check its invariants.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Bi,
    Bd,
    Dn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Arb,
    Connections,
}

/// Failures carry their exit code: 1 for usage and configuration, 2 for data.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn data_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MPR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| Failure {
        code: 1,
        message: format!("MPR_THREADS must be a non-negative integer, got `{raw}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| data_error(format!("cannot configure thread pool: {e}")))
}

fn degrade_cmd(model: Model, scale: usize, input: &Path, out: &Path, seed: u64) -> Result<(), Failure> {
    let name = match model {
        Model::Bi => "bi",
        Model::Bd => "bd",
        Model::Dn => "dn",
    };
    let spec = DegradationSpec::parse(name, scale, seed)?;
    let written = degrade_dir(input, out, &spec)?;
    println!(
        "{}: wrote {} images to {}",
        spec,
        written.len(),
        out.join(spec.dir_name()).display()
    );
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let rc = RunConfig::load(config)?;
    let set = TrainSet::load(data, rc.model.scale, rc.train.patch_lr)?;
    for name in &set.skipped {
        eprintln!(
            "warning: skipping {name}: unpaired or smaller than a {}px LR patch",
            rc.train.patch_lr
        );
    }
    if set.pairs.is_empty() {
        return Err(data_error(format!(
            "no usable training images under {}",
            data.display()
        )));
    }
    let init = build_model(&rc.model, rc.train.seed)?;
    let trainer = fit(&rc.model, &rc.train, init, &set, Some(out))?;
    let (net, bicubic) = training_set_psnr(&trainer.store, &rc.model, &set)?;
    println!(
        "trained {} steps; training-set PSNR {net:.2} dB (bicubic {bicubic:.2} dB); weights in {}",
        trainer.step,
        out.join("weights.mprw").display()
    );
    Ok(())
}

fn sr_cmd(weights: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let (store, cfg) = load_weights(weights)?;
    let files = list_pngs(input)?;
    if files.is_empty() {
        return Err(data_error(format!("no PNG files in {}", input.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| data_error(format!("cannot create {}: {e}", out.display())))?;
    files.iter().try_for_each(|f| -> Result<(), Failure> {
        let lr = load_image(f)?;
        let sr = mprnet::training::super_resolve(&store, &cfg, &lr)?;
        save_image(&sr, out.join(f.file_name().unwrap()))?;
        Ok(())
    })?;
    println!("x{}: wrote {} images to {}", cfg.scale, files.len(), out.display());
    Ok(())
}

fn eval_cmd(sr: &Path, hr: &Path, scale: usize, border: Option<usize>, csv: Option<&Path>) -> Result<(), Failure> {
    if !(1..=8).contains(&scale) {
        return Err(Failure {
            code: 1,
            message: format!("--scale must be between 1 and 8, got {scale}"),
        });
    }
    let report = evaluate(sr, hr, scale, border.unwrap_or(scale))?;
    print!("{}", report.table());
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv())
            .map_err(|e| data_error(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn count_cmd(config: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?.model;
    let report = ComplexityReport::for_config(&cfg);
    print!("{}", report.table());
    println!("params: {}", report.params);
    println!("MACs: {} ({:.2} G)", report.macs, report.macs as f64 / 1e9);
    Ok(())
}

fn ablate_cmd(suite: Suite, config: &Path) -> Result<(), Failure> {
    let base = RunConfig::load(config)?.model;
    let rows: Vec<(String, ModelConfig)> = match suite {
        Suite::Arb => ablation::arb_rows()
            .into_iter()
            .map(|(n, paths)| (n.to_string(), ModelConfig { paths, ..base.clone() }))
            .collect(),
        Suite::Connections => ablation::connection_rows()
            .into_iter()
            .map(|(n, connections)| {
                (
                    n,
                    ModelConfig {
                        connections,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    };
    let results: Vec<(String, u64, Result<Vec<String>, Error>)> = rows
        .par_iter()
        .map(|(name, cfg)| (name.clone(), count_params(cfg), gradient_flow(cfg, 0, 12, 12)))
        .collect();
    println!("{:<16} {:>10}  gradient flow", "row", "params");
    let mut failed = false;
    for (name, params, flow) in &results {
        let status = match flow {
            Ok(dead) if dead.is_empty() => "ok".to_string(),
            Ok(dead) => {
                failed = true;
                format!("FAIL: no gradient in {}", dead.join(", "))
            }
            Err(e) => {
                failed = true;
                format!("FAIL: {e}")
            }
        };
        println!("{name:<16} {params:>10}  {status}");
    }
    if let Suite::Arb = suite {
        let p: Vec<u64> = results.iter().map(|r| r.1).collect();
        // ARB_B, ARB_BA, ARB_R, ARB
        let monotone = p[0] < p[1] && p[0] < p[2] && p[1] < p[3] && p[2] < p[3];
        println!("path monotonicity: {}", if monotone { "ok" } else { "FAIL" });
        failed |= !monotone;
    }
    if failed {
        return Err(data_error("ablation invariants failed".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Degrade {
            model,
            scale,
            input,
            out,
            seed,
        } => degrade_cmd(model, scale, &input, &out, seed),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Sr { weights, input, out } => sr_cmd(&weights, &input, &out),
        Command::Eval {
            sr,
            hr,
            scale,
            border,
            csv,
        } => eval_cmd(&sr, &hr, scale, border, csv.as_deref()),
        Command::Count { config } => count_cmd(&config),
        Command::Ablate { suite, config } => ablate_cmd(suite, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
