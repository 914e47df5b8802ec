use clap::{Args, Parser, Subcommand};
use reserve_cli::{cmd_eval, cmd_powerflow, cmd_reproduce, cmd_train, CliError, ExitKind, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "der-reserve",
    version,
    about = "Train and evaluate DER reserve allocators on a radial feeder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the base-case power flow and write node voltages.
    Powerflow(Common),
    /// Train the DDPG allocator and write the reward log and checkpoints.
    Train(Common),
    /// Compare a trained checkpoint against the baseline allocators.
    Eval(Common),
    /// Train, evaluate and check every acceptance criterion.
    Reproduce(Common),
}

#[derive(Args)]
struct Common {
    /// Feeder file, or builtin:ieee34-modified.
    #[arg(long)]
    feeder: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// I, II, both or custom.
    #[arg(long)]
    case: Option<String>,
    /// Worker threads for evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(f) = self.feeder {
            cfg.feeder = f;
        }
        if let Some(s) = self.seed {
            cfg.agent.seed = s;
        }
        if let Some(e) = self.episodes {
            cfg.agent.episodes = e;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint;
        }
        if let Some(c) = self.case {
            cfg.case = c;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Powerflow(c) => {
            let s = cmd_powerflow(&c.resolve()?)?;
            println!(
                "converged in {} iterations (mismatch {:.2e} kVA); loss {:.3} kW; AVD {:.3}%",
                s.iterations,
                s.max_mismatch_kva,
                s.total_loss_kw,
                s.avd * 100.0
            );
            println!("voltages written to {}", s.voltages_csv.display());
        }
        Command::Train(c) => {
            let s = cmd_train(&c.resolve()?)?;
            let k = s.episodes.min(100);
            println!(
                "{} episodes in {:.1}s; mean reward first {k} {:.3}, last {k} {:.3}",
                s.episodes,
                s.elapsed.as_secs_f64(),
                s.first_100_mean,
                s.last_100_mean
            );
            println!(
                "reward log {}; checkpoint {}",
                s.reward_log_csv.display(),
                s.checkpoint_dir.display()
            );
        }
        Command::Eval(c) => print!("{}", cmd_eval(&c.resolve()?)?.to_text()),
        Command::Reproduce(c) => {
            let report = cmd_reproduce(&c.resolve()?)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError {
                    kind: ExitKind::Acceptance,
                    message: format!("failed criteria: {}", report.failures().join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
