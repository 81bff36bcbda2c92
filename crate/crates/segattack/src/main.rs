//! Thin command-line front end over the library pipeline.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use segattack::experiment::{
    cmd_attack, cmd_check, cmd_generate, cmd_report, cmd_train, ExperimentConfig, ExperimentError,
};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
segattack - train small U-Net family models, attack them with FGSM, report the damage

USAGE:
    segattack <generate|train|attack|report|check> --config <file> [--model <name>] [--seed <int>] [--out <dir>]

COMMANDS:
    generate   build the phantom dataset and the scan-grouped train/test split
    train      train configured models on the generated data
    attack     run FGSM at every configured attack loss, plus epsilon sweeps
    report     assemble the attack-comparison tables (CSV + Markdown)
    check      verify every emitted adversarial image respects its epsilon

OPTIONS:
    --config <file>   experiment JSON (required)
    --model <name>    restrict train/attack to one configured model
    --seed <int>      override the global seed (re-derives all sub-seeds)
    --out <dir>       override the configured output directory
    -h, --help        print this help

EXIT CODES:
    0 success, 1 usage or config error, 2 runtime failure
";

struct Cli {
    command: String,
    config: PathBuf,
    model: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.iter().any(|a| a == "-h" || a == "--help") {
        return Err(String::new()); // handled as help by the caller
    }
    let mut it = args.iter();
    let command = it.next().ok_or("missing command")?.clone();
    if !["generate", "train", "attack", "report", "check"].contains(&command.as_str()) {
        return Err(format!("unknown command {command:?}"));
    }
    let mut config = None;
    let mut model = None;
    let mut seed = None;
    let mut out = None;
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{flag} expects a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value()?)),
            "--model" => model = Some(value()?),
            "--seed" => {
                seed = Some(
                    value()?
                        .parse()
                        .map_err(|_| "--seed expects an unsigned integer".to_string())?,
                )
            }
            "--out" => out = Some(PathBuf::from(value()?)),
            other => return Err(format!("unknown option {other:?}")),
        }
    }
    if model.is_some() && !["train", "attack"].contains(&command.as_str()) {
        return Err("--model only applies to train and attack".into());
    }
    Ok(Cli {
        command,
        config: config.ok_or("--config is required")?,
        model,
        seed,
        out,
    })
}

/// Route the dice empty-channel warnings (and anything else at warn level)
/// to stderr without pulling in a logger dependency.
struct StderrLog;

impl log::Log for StderrLog {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn
    }
    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level(), record.args());
        }
    }
    fn flush(&self) {}
}

static LOGGER: StderrLog = StderrLog;

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(&cli.config)?
        .apply_overrides(cli.seed, cli.out.as_deref());
    match cli.command.as_str() {
        "generate" => {
            let s = cmd_generate(&cfg)?;
            println!(
                "generated {} scans: {} train slices, {} test slices -> {}",
                s.scans,
                s.train_slices,
                s.test_slices,
                cfg.data_dir().display()
            );
        }
        "train" => {
            for s in cmd_train(&cfg, cli.model.as_deref())? {
                println!(
                    "trained {}: {} epochs, best epoch {} (val DSC {:.4})",
                    s.model_name, s.epochs_run, s.best_epoch, s.best_val_dsc
                );
            }
        }
        "attack" => {
            for s in cmd_attack(&cfg, cli.model.as_deref())? {
                println!(
                    "attacked {} with {}: DSC {:.4} -> {:.4} (attack success {:.4})",
                    s.model_name, s.loss, s.mean_dsc_clean, s.mean_dsc_attacked, s.attack_success
                );
            }
        }
        "report" => {
            let rows = cmd_report(&cfg)?;
            println!(
                "report over {} model(s) -> {}",
                rows.len(),
                cfg.output_dir.join("report.md").display()
            );
            for row in rows {
                println!(
                    "  {}: best attack {}",
                    row.model_name,
                    row.best_attack().unwrap_or("-")
                );
            }
        }
        "check" => {
            let s = cmd_check(&cfg)?;
            println!("checked {} adversarial image(s): all within bounds", s.images_checked);
        }
        _ => unreachable!("validated in parse_args"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER).map(|_| log::set_max_level(log::LevelFilter::Warn));
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) if msg.is_empty() => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Err(msg) => {
            eprintln!("error: {msg}\n");
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (ExperimentError::Config(_) | ExperimentError::Json(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
