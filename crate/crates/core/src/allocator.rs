//! Baseline allocators, schedule evaluation and side-by-side comparison.

use crate::ddpg::{infer, normalization_ranges, AgentConfig};
use crate::environment::{deployment_injections, EnvConfig, ReserveAction, ReserveState, SamplingRanges};
use crate::neural::Mlp;
use crate::powerflow::{average_voltage_deviation, Network};
use std::fmt::Write as _;

pub trait Allocator: Sync {
    fn name(&self) -> &str;
    fn allocate(&self, state: &ReserveState) -> ReserveAction;
}

/// Reserve proportional to available capacity.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapacityBased;

impl Allocator for CapacityBased {
    fn name(&self) -> &str {
        "capacity_based"
    }

    fn allocate(&self, state: &ReserveState) -> ReserveAction {
        capacity_based(state)
    }
}

/// Merit order: cheapest DERs filled to their caps first.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyCost;

impl Allocator for GreedyCost {
    fn name(&self) -> &str {
        "greedy_cost_oracle"
    }

    fn allocate(&self, state: &ReserveState) -> ReserveAction {
        greedy_cost_oracle(state)
    }
}

/// A trained actor, run without exploration noise.
#[derive(Debug, Clone)]
pub struct PolicyAllocator {
    pub name: String,
    pub actor: Mlp<f64>,
    pub ranges: SamplingRanges,
}

impl PolicyAllocator {
    pub fn new(actor: Mlp<f64>, env_cfg: &EnvConfig, agent_cfg: &AgentConfig) -> Self {
        Self {
            name: "ddpg".into(),
            actor,
            ranges: normalization_ranges(env_cfg, agent_cfg),
        }
    }
}

impl Allocator for PolicyAllocator {
    fn name(&self) -> &str {
        &self.name
    }

    fn allocate(&self, state: &ReserveState) -> ReserveAction {
        infer(&self.actor, state, &self.ranges)
            .expect("actor dimensions match the state and ranges are non-degenerate")
            .action
    }
}

pub fn capacity_based(state: &ReserveState) -> ReserveAction {
    let cap = state.total_capacity();
    ReserveAction {
        r: state.r_max.iter().map(|m| state.r_tot * m / cap).collect(),
    }
}

/// Exact minimizer of total reserve cost subject to the request and caps.
/// Equal prices are filled in DER index order.
pub fn greedy_cost_oracle(state: &ReserveState) -> ReserveAction {
    let mut order: Vec<usize> = (0..state.len()).collect();
    order.sort_by(|&a, &b| state.prices[a].total_cmp(&state.prices[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; state.len()];
    let mut left = state.r_tot;
    for i in order {
        let take = left.min(state.r_max[i]);
        r[i] = take;
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    ReserveAction { r }
}

/// Total reserve cost in $/h for prices in cents/kWh.
pub fn total_reserve_cost(state: &ReserveState, action: &ReserveAction) -> f64 {
    state.prices.iter().zip(&action.r).map(|(p, r)| p * r).sum::<f64>() / 100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationReport {
    pub reserves: Vec<f64>,
    pub trc_dollars_per_hour: f64,
    pub total_loss_kw: f64,
    /// Fraction, not percent.
    pub avd: f64,
    pub converged: bool,
}

/// Cost of the schedule plus loss and average voltage deviation with every
/// DER delivering its full reserve. Non-converged flows report NaN metrics.
pub fn evaluate(action: &ReserveAction, state: &ReserveState, network: &Network<f64>, config: &EnvConfig) -> AllocationReport {
    let trc = total_reserve_cost(state, action);
    let solved = network
        .solve(&deployment_injections(action, config), &config.solver)
        .ok()
        .filter(|s| s.converged);
    let (loss, avd, converged) = match solved {
        Some(sol) => (sol.total_loss_kw, average_voltage_deviation(&sol, config.band.v_ref), true),
        None => (f64::NAN, f64::NAN, false),
    };
    AllocationReport {
        reserves: action.r.clone(),
        trc_dollars_per_hour: trc,
        total_loss_kw: loss,
        avd,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub allocator: String,
    pub case: String,
    pub report: AllocationReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn find(&self, allocator: &str, case: &str) -> Option<&AllocationReport> {
        self.rows
            .iter()
            .find(|r| r.allocator == allocator && r.case == case)
            .map(|r| &r.report)
    }

    fn der_count(&self) -> usize {
        self.rows.iter().map(|r| r.report.reserves.len()).max().unwrap_or(0)
    }

    /// CSV body with header; one row per (allocator, case).
    pub fn to_csv(&self) -> String {
        let n = self.der_count();
        let mut s = String::from("allocator,case");
        for i in 1..=n {
            let _ = write!(s, ",der{i}_kw");
        }
        s.push_str(",trc_usd_per_h,loss_kw,avd_pct,converged\n");
        for row in &self.rows {
            let _ = write!(s, "{},{}", row.allocator, row.case);
            for r in &row.report.reserves {
                let _ = write!(s, ",{r:.4}");
            }
            let rep = &row.report;
            let _ = writeln!(
                s,
                ",{:.4},{:.4},{:.4},{}",
                rep.trc_dollars_per_hour,
                rep.total_loss_kw,
                rep.avd * 100.0,
                rep.converged
            );
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let n = self.der_count();
        let mut header = vec!["allocator".to_string(), "case".to_string()];
        header.extend((1..=n).map(|i| format!("DER{i} (kW)")));
        header.extend(["TRC ($/h)", "loss (kW)", "AVD (%)", "converged"].map(String::from));
        let mut table = vec![header];
        for row in &self.rows {
            let rep = &row.report;
            let mut cells = vec![row.allocator.clone(), row.case.clone()];
            cells.extend(rep.reserves.iter().map(|r| format!("{r:.2}")));
            cells.push(format!("{:.2}", rep.trc_dollars_per_hour));
            cells.push(format!("{:.2}", rep.total_loss_kw));
            cells.push(format!("{:.2}", rep.avd * 100.0));
            cells.push(if rep.converged { "yes" } else { "no" }.into());
            table.push(cells);
        }
        let cols = table.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c < 2 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Evaluates every allocator on every named state, using up to `jobs`
/// threads. Row order is allocator-major and independent of `jobs`.
pub fn compare(
    allocators: &[&dyn Allocator],
    states: &[(String, ReserveState)],
    network: &Network<f64>,
    config: &EnvConfig,
    jobs: usize,
) -> Comparison {
    let tasks: Vec<(usize, usize)> = (0..allocators.len())
        .flat_map(|a| (0..states.len()).map(move |s| (a, s)))
        .collect();
    let run = |&(a, s): &(usize, usize)| {
        let (case, state) = &states[s];
        let action = allocators[a].allocate(state);
        ComparisonRow {
            allocator: allocators[a].name().to_string(),
            case: case.clone(),
            report: evaluate(&action, state, network, config),
        }
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    let rows = if jobs == 1 {
        tasks.iter().map(run).collect()
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    };
    Comparison { rows }
}
