use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use bittrace_cli::error::{CliError, Result};
use bittrace_cli::idx::Dataset;
use bittrace_cli::mask::mask_digits;
use bittrace_cli::mnist::{self, MnistConfig};
use bittrace_cli::trace::write_file;
use bittrace_cli::{checkpoint, fluct, pwl};
use bittrace_core::Precision;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bittrace", version, about = "Exact-mantissa-bit tracking experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a random piecewise-linear function and trace loss precision.
    Pwl(PwlArgs),
    /// Train the small conv-net with masked-digit batch logs.
    Mnist(MnistArgs),
    /// Read `value bits` pairs from stdin and print masked renderings.
    Fmt,
}

#[derive(Args, Debug)]
struct PwlArgs {
    #[arg(long, default_value_t = 3)]
    breaks: usize,
    #[arg(long, default_value_t = 7)]
    neurons: usize,
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Skip updates whose loss or gradients have no exact bits.
    #[arg(long)]
    guard: bool,
    /// TOML file with `breaks`, `slopes` and `left_value` instead of a random function.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MnistArgs {
    #[arg(long, required_unless_present = "synthetic")]
    images: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    labels: Option<PathBuf>,
    /// Use the seeded 8x8 three-class blob dataset.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    synthetic: bool,
    #[arg(long, default_value_t = 600)]
    subset: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 60)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Apply updates even when the loss or a gradient element has no exact bits.
    #[arg(long)]
    no_guard: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn precision_from_env() -> Result<Precision> {
    match std::env::var("BITTRACE_PRECISION") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("BITTRACE_PRECISION must be single or double, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(Precision::Single),
        Err(e) => Err(CliError::Usage(format!("BITTRACE_PRECISION: {e}"))),
    }
}

fn run_pwl(a: PwlArgs, p: Precision) -> Result<()> {
    let cfg = pwl::PwlConfig {
        breaks: a.breaks,
        neurons: a.neurons,
        grid_n: a.grid,
        seed: a.seed,
        steps: a.steps,
        lr: a.lr,
        guard: a.guard,
        precision: p,
    };
    let (_, data) = match &a.spec {
        Some(path) => {
            cfg.validate()?;
            let spec = pwl::load_spec(path)?;
            let data = pwl::sample(&spec, cfg.grid_n, p)?;
            (spec, data)
        }
        None => pwl::gen_pwl(&cfg)?,
    };
    let mut tr = pwl::trainer(&cfg)?;
    let mut trace = bittrace_cli::trace::TrainTrace::default();
    for _ in 0..cfg.steps {
        let out = tr.step(data.x.clone(), data.y.clone())?;
        trace.push(out.record);
    }
    if let Some(path) = &a.csv {
        write_file(path, &trace.to_csv())?;
    }
    if let Some(path) = &a.svg {
        write_file(path, &trace.to_svg())?;
    }
    if let Some(dir) = &a.checkpoint {
        checkpoint::save(
            &tr,
            dir,
            &[("seed", cfg.seed.to_string()), ("experiment", "pwl".into())],
        )?;
    }
    let report = fluct::analyze(&trace.losses(), &trace.loss_bits());
    let last = trace.records.last();
    println!(
        "steps={} final_loss={} final_loss_bits={} skipped={} explosions={} with_precursor={}",
        trace.len(),
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(0, |r| r.loss_bits),
        trace.skipped_steps(),
        report.onsets.len(),
        report.with_precursor
    );
    Ok(())
}

fn run_mnist(a: MnistArgs, p: Precision) -> Result<()> {
    let data = if a.synthetic {
        mnist::synthetic(a.subset, a.seed)
    } else {
        let (images, labels) = (a.images.expect("required by clap"), a.labels.expect("required by clap"));
        Dataset::load(&images, &labels)?
    };
    let cfg = MnistConfig {
        subset: a.subset,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        precision: p,
        guard: !a.no_guard,
    };
    let stdout = io::stdout();
    let mut log = stdout.lock();
    let out = mnist::run_mnist(&cfg, &data, &mut log)?;
    writeln!(
        log,
        "batches={} skipped={} accuracy={}/{}",
        out.trace.len(),
        out.trace.skipped_steps(),
        out.correct,
        out.seen
    )
    .map_err(|e| CliError::io("<stdout>", e))?;
    if let Some(path) = &a.csv {
        write_file(path, &out.trace.to_csv())?;
    }
    if let Some(dir) = &a.checkpoint {
        checkpoint::save(
            &out.trainer,
            dir,
            &[("seed", cfg.seed.to_string()), ("experiment", "mnist".into())],
        )?;
    }
    Ok(())
}

fn run_fmt(p: Precision) -> Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(|e| CliError::io("<stdin>", e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parsed = match fields.as_slice() {
            [v, e] => v.parse::<f64>().ok().zip(e.parse::<u8>().ok()),
            _ => None,
        };
        let (v, e) = parsed.ok_or_else(|| CliError::Usage(format!("line {}: expected `value bits`", n + 1)))?;
        if e > p.max_bits() {
            return Err(CliError::Usage(format!(
                "line {}: {e} bits exceed {} for {p}",
                n + 1,
                p.max_bits()
            )));
        }
        writeln!(out, "{}", mask_digits(v, e, p)).map_err(|e| CliError::io("<stdout>", e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = precision_from_env().and_then(|p| match cli.cmd {
        Command::Pwl(a) => run_pwl(a, p),
        Command::Mnist(a) => run_mnist(a, p),
        Command::Fmt => run_fmt(p),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bittrace: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
