//! Library side of the `der-reserve` tool: run configuration, the four
//! subcommands, and CSV/report output.

pub mod criteria;

use reserve_core::allocator::{compare, Allocator, CapacityBased, Comparison, GreedyCost, PolicyAllocator};
use reserve_core::ddpg::AgentConfig;
use reserve_core::ddpg::{train, Agent, EpisodeLog, TrainError, TrainOutcome};
use reserve_core::environment::{deployment_injections, EnvConfig, ReserveAction, ReserveState};
use reserve_core::feeder::{load_feeder, FeederModel, BUILTIN_IEEE34};
use reserve_core::powerflow::{average_voltage_deviation, Network, PowerFlowSolution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Window of the running-mean reward curve.
pub const RUNNING_MEAN_WINDOW: usize = 50;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Numerical = 2,
    Acceptance = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Numerical,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("cannot write {}: {e}", path.display()))
}

/// A user-supplied reserve request for `eval --case custom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomCase {
    pub r_max: Vec<f64>,
    pub prices: Vec<f64>,
    pub r_tot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Feeder file path or `builtin:ieee34-modified`.
    pub feeder: String,
    pub out: PathBuf,
    /// Checkpoint directory for `eval`; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// `I`, `II` or `custom`.
    pub case: String,
    pub jobs: usize,
    pub custom: Option<CustomCase>,
    pub env: EnvConfig,
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feeder: BUILTIN_IEEE34.into(),
            out: PathBuf::from("out"),
            checkpoint: None,
            case: "I".into(),
            jobs: 1,
            custom: None,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

/// Fields that determine results; output locations are excluded so runs
/// writing to different directories share a hash.
#[derive(Serialize)]
struct HashedFields<'a> {
    feeder: &'a str,
    env: &'a EnvConfig,
    agent: &'a AgentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env.validate().map_err(|e| CliError::usage(format!("env config: {e}")))?;
        self.agent
            .validate()
            .map_err(|e| CliError::usage(format!("agent config: {e}")))?;
        if self.jobs == 0 {
            return Err(CliError::usage("jobs must be at least 1"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the result-relevant settings.
    pub fn config_hash(&self) -> String {
        let fields = HashedFields {
            feeder: &self.feeder,
            env: &self.env,
            agent: &self.agent,
        };
        let text = toml::to_string(&fields).expect("hashed fields serialize");
        Sha256::digest(text.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    fn csv_preamble(&self) -> String {
        format!("# seed={} config_hash={}\n", self.agent.seed, self.config_hash())
    }

    fn write_output(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Writes `<out>/<name>` with the seed/hash comment line first.
    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        self.write_output(name, &format!("{}{body}", self.csv_preamble()))
    }
}

pub fn case_i() -> ReserveState {
    ReserveState::new(vec![200.0, 200.0, 150.0, 200.0], vec![10.0, 12.0, 11.0, 14.0], 600.0).expect("valid case")
}

pub fn case_ii() -> ReserveState {
    ReserveState::new(vec![100.0, 80.0, 100.0, 100.0], vec![12.0, 10.0, 10.0, 12.0], 350.0).expect("valid case")
}

pub fn resolve_feeder(cfg: &RunConfig) -> Result<(FeederModel, Network<f64>), CliError> {
    let model = load_feeder(&cfg.feeder).map_err(|e| CliError::usage(e.to_string()))?;
    let network = Network::new(&model).map_err(|e| CliError::usage(format!("feeder {}: {e}", cfg.feeder)))?;
    Ok((model, network))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerflowSummary {
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch_kva: f64,
    pub total_loss_kw: f64,
    pub avd: f64,
    pub voltages_csv: PathBuf,
}

/// Solves the base case (DERs at their base output, no reserve deployed)
/// and writes `voltages.csv` and `powerflow_summary.csv`.
pub fn cmd_powerflow(cfg: &RunConfig) -> Result<PowerflowSummary, CliError> {
    let (_, network) = resolve_feeder(cfg)?;
    let idle = ReserveAction {
        r: vec![0.0; network.der_count()],
    };
    let sol: PowerFlowSolution<f64> = network
        .solve(&deployment_injections(&idle, &cfg.env), &cfg.env.solver)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    if !sol.converged {
        return Err(CliError::numerical(format!(
            "power flow did not converge after {} iterations (max mismatch {:.3e} kVA)",
            sol.iterations, sol.max_mismatch_kva
        )));
    }
    let avd = average_voltage_deviation(&sol, cfg.env.band.v_ref);
    let voltages_csv = cfg.write_csv("voltages.csv", &sol.voltage_csv())?;
    let summary = format!(
        "quantity,value\nconverged,{}\niterations,{}\nmax_mismatch_kva,{:e}\ntotal_loss_kw,{:.6}\navd_pct,{:.6}\n",
        sol.converged,
        sol.iterations,
        sol.max_mismatch_kva,
        sol.total_loss_kw,
        avd * 100.0
    );
    cfg.write_csv("powerflow_summary.csv", &summary)?;
    Ok(PowerflowSummary {
        converged: sol.converged,
        iterations: sol.iterations,
        max_mismatch_kva: sol.max_mismatch_kva,
        total_loss_kw: sol.total_loss_kw,
        avd,
        voltages_csv,
    })
}

pub fn reward_log_csv(log: &[EpisodeLog]) -> String {
    let mut s = String::from("episode,total_reward,cost_term,violation_term,loss_term,voltage_term,noise_std,updates\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.episode, e.total_reward, e.cost_term, e.violation_term, e.loss_term, e.voltage_term, e.noise_std, e.updates
        ));
    }
    s
}

/// Trailing mean over up to `window` episodes ending at each episode.
pub fn running_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean reward of the first and last `k` episodes.
pub fn window_means(log: &[EpisodeLog], k: usize) -> (f64, f64) {
    let k = k.min(log.len()).max(1);
    let mean = |xs: &[EpisodeLog]| xs.iter().map(|e| e.total_reward).sum::<f64>() / xs.len().max(1) as f64;
    if log.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean(&log[..k]), mean(&log[log.len() - k..]))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub episodes: usize,
    pub first_100_mean: f64,
    pub last_100_mean: f64,
    pub elapsed: Duration,
    pub reward_log_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
}

fn write_checkpoint(cfg: &RunConfig, agent: &Agent<f64>) -> Result<PathBuf, CliError> {
    let dir = cfg.out.join("checkpoint");
    agent
        .save(&dir)
        .map_err(|e| CliError::usage(format!("cannot write checkpoint {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Trains and writes the reward log, running-mean curve, checkpoints and a
/// manifest. Returns the trained agent as well.
pub fn run_training(cfg: &RunConfig) -> Result<(TrainOutcome<f64>, TrainSummary), CliError> {
    cfg.validate()?;
    let (model, _) = resolve_feeder(cfg)?;
    let start = Instant::now();
    let outcome = match train::<f64>(&cfg.env, &cfg.agent, &model) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            episode,
            source,
            last_good,
        }) => {
            let dir = write_checkpoint(cfg, &last_good)?;
            return Err(CliError::numerical(format!(
                "training diverged in episode {episode}: {source}; last good checkpoint kept in {}",
                dir.display()
            )));
        }
        Err(TrainError::Config(m)) => return Err(CliError::usage(m)),
        Err(e) => return Err(CliError::numerical(e.to_string())),
    };
    let elapsed = start.elapsed();
    let reward_log_csv = cfg.write_csv("reward_log.csv", &reward_log_csv(&outcome.log))?;
    let totals: Vec<f64> = outcome.log.iter().map(|e| e.total_reward).collect();
    let mut curve = String::from("episode,running_mean_reward\n");
    for (i, m) in running_mean(&totals, RUNNING_MEAN_WINDOW).iter().enumerate() {
        curve.push_str(&format!("{},{m}\n", i + 1));
    }
    cfg.write_csv("reward_running_mean.csv", &curve)?;
    let checkpoint_dir = write_checkpoint(cfg, &outcome.agent)?;
    let manifest = format!(
        "# training manifest\nseed = {}\nconfig_hash = \"{}\"\nepisodes_run = {}\n\n{}",
        cfg.agent.seed,
        cfg.config_hash(),
        outcome.log.len(),
        cfg.to_toml()
    );
    cfg.write_output("manifest.toml", &manifest)?;
    let (first, last) = window_means(&outcome.log, 100);
    let summary = TrainSummary {
        episodes: outcome.log.len(),
        first_100_mean: first,
        last_100_mean: last,
        elapsed,
        reward_log_csv,
        checkpoint_dir,
    };
    Ok((outcome, summary))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    run_training(cfg).map(|(_, s)| s)
}

/// Named states for an evaluation case.
pub fn case_states(cfg: &RunConfig, case: &str) -> Result<Vec<(String, ReserveState)>, CliError> {
    match case {
        "I" | "i" | "1" => Ok(vec![("I".into(), case_i())]),
        "II" | "ii" | "2" => Ok(vec![("II".into(), case_ii())]),
        "both" => Ok(vec![("I".into(), case_i()), ("II".into(), case_ii())]),
        "custom" => {
            let c = cfg
                .custom
                .as_ref()
                .ok_or_else(|| CliError::usage("case custom needs a [custom] section with r_max, prices and r_tot"))?;
            let state = ReserveState::new(c.r_max.clone(), c.prices.clone(), c.r_tot)
                .map_err(|e| CliError::usage(format!("custom case: {e}")))?;
            Ok(vec![("custom".into(), state)])
        }
        other => Err(CliError::usage(format!(
            "unknown case '{other}' (expected I, II, both or custom)"
        ))),
    }
}

/// Compares a trained policy with the capacity-based and greedy allocators.
pub fn compare_policy(
    cfg: &RunConfig,
    actor: &reserve_core::Mlp64,
    network: &Network<f64>,
    states: &[(String, ReserveState)],
) -> Comparison {
    let policy = PolicyAllocator::new(actor.clone(), &cfg.env, &cfg.agent);
    let allocators: [&dyn Allocator; 3] = [&policy, &CapacityBased, &GreedyCost];
    compare(&allocators, states, network, &cfg.env, cfg.jobs)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Comparison, CliError> {
    cfg.validate()?;
    let states = case_states(cfg, &cfg.case)?;
    let (_, network) = resolve_feeder(cfg)?;
    let dir = cfg.checkpoint_dir();
    let agent = Agent::<f64>::load(&dir, &cfg.agent)
        .map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", dir.display())))?;
    if agent.der_count() != network.der_count() {
        return Err(CliError::usage(format!(
            "checkpoint controls {} DERs but the feeder has {}",
            agent.der_count(),
            network.der_count()
        )));
    }
    if let Some((name, s)) = states.iter().find(|(_, s)| s.len() != network.der_count()) {
        return Err(CliError::usage(format!(
            "case {name} lists {} DERs but the feeder has {}",
            s.len(),
            network.der_count()
        )));
    }
    let comparison = compare_policy(cfg, &agent.actor, &network, &states);
    cfg.write_csv(&format!("comparison_{}.csv", cfg.case), &comparison.to_csv())?;
    Ok(comparison)
}

/// Trains, evaluates Cases I and II and checks every acceptance
/// criterion. The report is written to `<out>/reproduce_report.txt`.
pub fn cmd_reproduce(cfg: &RunConfig) -> Result<criteria::Report, CliError> {
    let report = criteria::run_all(cfg)?;
    cfg.write_output("reproduce_report.txt", &report.render())?;
    Ok(report)
}
