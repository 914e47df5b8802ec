//! Reserve-allocation environment.
//!
//! An observation is a [`ReserveState`]: per-DER available reserve, per-DER
//! bid price and the total reserve requested by the system operator. The
//! agent emits a raw vector in `[0, 1]^n`, which [`project_action`] turns
//! into a schedule that sums to the request and respects every cap. The
//! reward combines reserve cost, cap violations, network loss and a voltage
//! score, with loss and voltages taken from a power flow in which every DER
//! delivers its base output plus its full scheduled reserve.

use crate::powerflow::{DerInjection, Network, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack used when checking that a schedule meets the request.
pub const SUM_TOLERANCE_KW: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("empty sampling range for {field}: [{lo}, {hi}]")]
    EmptyRange { field: &'static str, lo: f64, hi: f64 },
    #[error("infeasible reserve state: {0}")]
    InfeasibleState(String),
    #[error("dimension mismatch: expected {expected} DERs, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("raw action contains non-finite values")]
    NonFiniteAction,
}

/// What the system operator and the DERs report for one scheduling period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveState {
    /// Maximum reserve per DER, kW.
    pub r_max: Vec<f64>,
    /// Reserve bid price per DER, cents/kWh.
    pub prices: Vec<f64>,
    /// Requested total reserve, kW.
    pub r_tot: f64,
}

impl ReserveState {
    /// Builds a state, rejecting non-positive caps, negative prices and
    /// requests outside `(0, sum(r_max)]`.
    pub fn new(r_max: Vec<f64>, prices: Vec<f64>, r_tot: f64) -> Result<Self, EnvError> {
        if r_max.len() != prices.len() {
            return Err(EnvError::Dimension {
                expected: r_max.len(),
                got: prices.len(),
            });
        }
        if r_max.is_empty() {
            return Err(EnvError::InfeasibleState("no DERs".into()));
        }
        if let Some(i) = r_max.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(EnvError::InfeasibleState(format!(
                "DER {} has non-positive reserve cap {}",
                i + 1,
                r_max[i]
            )));
        }
        if let Some(i) = prices.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(EnvError::InfeasibleState(format!(
                "DER {} has invalid price {}",
                i + 1,
                prices[i]
            )));
        }
        let cap: f64 = r_max.iter().sum();
        if !(r_tot > 0.0 && r_tot <= cap + SUM_TOLERANCE_KW) {
            return Err(EnvError::InfeasibleState(format!(
                "requested {r_tot} kW but total available reserve is {cap} kW"
            )));
        }
        Ok(Self { r_max, prices, r_tot })
    }

    pub fn len(&self) -> usize {
        self.r_max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_max.is_empty()
    }

    pub fn total_capacity(&self) -> f64 {
        self.r_max.iter().sum()
    }
}

/// Scheduled reserve per DER, kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveAction {
    pub r: Vec<f64>,
}

impl ReserveAction {
    pub fn total(&self) -> f64 {
        self.r.iter().sum()
    }

    /// True if the schedule meets the request and every cap.
    pub fn is_feasible(&self, state: &ReserveState) -> bool {
        self.r.len() == state.len()
            && (self.total() - state.r_tot).abs() <= SUM_TOLERANCE_KW
            && self
                .r
                .iter()
                .zip(&state.r_max)
                .all(|(r, m)| *r >= 0.0 && *r <= m + SUM_TOLERANCE_KW)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Average reserve price paid, cents/kWh.
    pub cost_term: f64,
    /// Weighted count of cap overshoot, kW.
    pub violation_term: f64,
    /// Network loss, kW.
    pub loss_term: f64,
    /// Mean per-node-phase voltage score.
    pub voltage_term: f64,
    pub total: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub violation: f64,
    pub loss: f64,
    pub voltage: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            violation: 1.0,
            loss: 0.01,
            voltage: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoltageBand {
    pub v_ref: f64,
    pub v_lb: f64,
    pub v_ub: f64,
    /// Score of a node-phase outside `[v_lb, v_ub]`.
    pub out_of_band_penalty: f64,
}

impl Default for VoltageBand {
    fn default() -> Self {
        Self {
            v_ref: 1.0,
            v_lb: 0.95,
            v_ub: 1.05,
            out_of_band_penalty: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    fn check(&self, field: &'static str) -> Result<(), EnvError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(EnvError::EmptyRange {
                field,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    /// Uniform draw from `(lo, hi]`; exactly `hi` when collapsed.
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.hi - u * (self.hi - self.lo)
    }

    /// Min-max scaling into `[0, 1]`.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }
}

/// One range shared by every DER, or one range per DER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DerRanges {
    Shared(Range),
    PerDer(Vec<Range>),
}

impl DerRanges {
    pub fn get(&self, der: usize) -> Range {
        match self {
            DerRanges::Shared(r) => *r,
            DerRanges::PerDer(v) => v[der],
        }
    }

    fn check(&self, field: &'static str, n: Option<usize>) -> Result<(), EnvError> {
        match self {
            DerRanges::Shared(r) => r.check(field),
            DerRanges::PerDer(v) => {
                if let Some(n) = n {
                    if v.len() != n {
                        return Err(EnvError::Dimension {
                            expected: n,
                            got: v.len(),
                        });
                    }
                }
                v.iter().try_for_each(|r| r.check(field))
            }
        }
    }

    fn min_lo(&self) -> f64 {
        match self {
            DerRanges::Shared(r) => r.lo,
            DerRanges::PerDer(v) => v.iter().map(|r| r.lo).fold(f64::INFINITY, f64::min),
        }
    }
}

impl From<Range> for DerRanges {
    fn from(r: Range) -> Self {
        DerRanges::Shared(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingRanges {
    pub r_max: DerRanges,
    pub price: DerRanges,
    /// Request range; draws are also capped at the sampled total capacity.
    pub r_tot: Range,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            r_max: Range::new(50.0, 200.0).into(),
            price: Range::new(8.0, 16.0).into(),
            r_tot: Range::new(0.0, 800.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub weights: RewardWeights,
    pub band: VoltageBand,
    /// Replaces the voltage score when the power flow fails to converge.
    pub nonconvergence_penalty: f64,
    pub sampling: SamplingRanges,
    /// Steps per episode.
    pub episode_len: usize,
    /// Pre-reserve real output per DER, kW. Missing entries are zero.
    pub base_injections_kw: Vec<f64>,
    /// When false, raw actions are only rescaled to the request and caps are
    /// enforced through the violation penalty alone.
    pub project_actions: bool,
    pub solver: SolverOptions,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            band: VoltageBand::default(),
            nonconvergence_penalty: -10.0,
            sampling: SamplingRanges::default(),
            episode_len: 1,
            base_injections_kw: Vec::new(),
            project_actions: true,
            solver: SolverOptions::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let b = &self.band;
        if !(b.v_lb < b.v_ref && b.v_ref < b.v_ub) {
            return Err(EnvError::Config(format!(
                "voltage band must satisfy v_lb < v_ref < v_ub, got {} / {} / {}",
                b.v_lb, b.v_ref, b.v_ub
            )));
        }
        let w = &self.weights;
        if !(w.violation >= 0.0 && w.loss >= 0.0 && w.voltage >= 0.0) {
            return Err(EnvError::Config("reward weights must be non-negative".into()));
        }
        if self.episode_len == 0 {
            return Err(EnvError::Config("episode_len must be at least 1".into()));
        }
        self.sampling.r_max.check("r_max", None)?;
        self.sampling.price.check("price", None)?;
        self.sampling.r_tot.check("r_tot")?;
        if self.sampling.r_max.min_lo() < 0.0 || self.sampling.price.min_lo() < 0.0 || self.sampling.r_tot.lo < 0.0 {
            return Err(EnvError::Config("sampling ranges must be non-negative".into()));
        }
        Ok(())
    }

    fn base_injection(&self, der: usize) -> f64 {
        self.base_injections_kw.get(der).copied().unwrap_or(0.0)
    }
}

/// Draws a state: caps and prices uniformly from their ranges, the request
/// uniformly from `(r_tot.lo, min(r_tot.hi, sum(r_max))]`.
pub fn sample_state_with<R: Rng>(rng: &mut R, config: &EnvConfig, n: usize) -> Result<ReserveState, EnvError> {
    let s = &config.sampling;
    s.r_max.check("r_max", Some(n))?;
    s.price.check("price", Some(n))?;
    s.r_tot.check("r_tot")?;
    let r_max: Vec<f64> = (0..n).map(|i| s.r_max.get(i).draw(rng)).collect();
    let prices: Vec<f64> = (0..n).map(|i| s.price.get(i).draw(rng)).collect();
    let cap: f64 = r_max.iter().sum();
    let request = Range::new(s.r_tot.lo, s.r_tot.hi.min(cap));
    request.check("r_tot")?;
    let r_tot = request.draw(rng);
    ReserveState::new(r_max, prices, r_tot)
}

/// Seeded variant of [`sample_state_with`].
pub fn sample_state(seed: u64, config: &EnvConfig, n: usize) -> Result<ReserveState, EnvError> {
    sample_state_with(&mut ChaCha8Rng::seed_from_u64(seed), config, n)
}

/// Maps a raw action in `[0, 1]^n` onto `{ r : sum r = r_tot, 0 <= r <= r_max }`.
///
/// The raw action is read as a fraction of each cap, rescaled to the
/// request, and any entry above its cap is pinned there with the deficit
/// shared among the remaining entries in proportion to their candidates.
pub fn project_action(raw: &[f64], state: &ReserveState) -> ReserveAction {
    let n = state.len();
    assert_eq!(raw.len(), n, "raw action length must match DER count");
    let mut cand: Vec<f64> = raw.iter().zip(&state.r_max).map(|(a, m)| a.clamp(0.0, 1.0) * m).collect();
    if cand.iter().sum::<f64>() <= 0.0 {
        cand = state.r_max.clone();
    }
    let mut pinned = vec![false; n];
    let mut r = vec![0.0; n];
    loop {
        let fixed: f64 = (0..n).filter(|&i| pinned[i]).map(|i| state.r_max[i]).sum();
        let remaining = (state.r_tot - fixed).max(0.0);
        let free: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| cand[i]).sum();
        let weights: Vec<f64> = if free > 0.0 { cand.clone() } else { state.r_max.clone() };
        let denom: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| weights[i]).sum();
        for i in 0..n {
            r[i] = if pinned[i] {
                state.r_max[i]
            } else if denom > 0.0 {
                weights[i] * remaining / denom
            } else {
                0.0
            };
        }
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && r[i] > state.r_max[i] {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (ri, m) in r.iter_mut().zip(&state.r_max) {
        *ri = ri.min(*m);
    }
    ReserveAction { r }
}

/// Rescales a raw action to the request without enforcing caps.
pub fn unprojected_candidate(raw: &[f64], state: &ReserveState) -> ReserveAction {
    let clamped: Vec<f64> = raw.iter().map(|a| a.clamp(0.0, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let r = if sum > 0.0 {
        clamped.iter().map(|a| a * state.r_tot / sum).collect()
    } else {
        vec![state.r_tot / state.len() as f64; state.len()]
    };
    ReserveAction { r }
}

/// Average price paid for the request, cents/kWh.
pub fn reserve_cost_component(state: &ReserveState, action: &ReserveAction) -> f64 {
    let paid: f64 = state.prices.iter().zip(&action.r).map(|(p, r)| p * r).sum();
    paid / state.r_tot
}

/// Number of violated caps times the summed overshoot.
pub fn reserve_violation_component(state: &ReserveState, candidate: &[f64]) -> f64 {
    let (count, excess) = candidate
        .iter()
        .zip(&state.r_max)
        .filter(|(r, m)| r > m)
        .fold((0usize, 0.0), |(c, e), (r, m)| (c + 1, e + (r - m)));
    count as f64 * excess
}

/// Score of a single node-phase voltage: 1 at `v_ref`, falling linearly to 0
/// at either band edge, and the configured penalty outside the band.
pub fn voltage_node_reward(v: f64, band: &VoltageBand) -> f64 {
    if v >= band.v_ref && v <= band.v_ub {
        (band.v_ub - v) / (band.v_ub - band.v_ref)
    } else if v >= band.v_lb && v < band.v_ref {
        (v - band.v_lb) / (band.v_ref - band.v_lb)
    } else {
        band.out_of_band_penalty
    }
}

/// DER outputs at full deployment of the schedule.
pub fn deployment_injections(action: &ReserveAction, config: &EnvConfig) -> Vec<DerInjection> {
    action
        .r
        .iter()
        .enumerate()
        .map(|(i, r)| DerInjection {
            der_id: i + 1,
            kw: config.base_injection(i) + r,
            kvar: 0.0,
        })
        .collect()
}

/// Evaluates the composite reward of a schedule.
pub fn reward(state: &ReserveState, action: &ReserveAction, config: &EnvConfig, network: &Network<f64>) -> RewardBreakdown {
    let cost_term = reserve_cost_component(state, action);
    let violation_term = reserve_violation_component(state, &action.r);
    let solved = network
        .solve(&deployment_injections(action, config), &config.solver)
        .ok()
        .filter(|s| s.converged);
    let (loss_term, voltage_term, converged) = match solved {
        Some(sol) => {
            let (sum, count) = sol
                .magnitudes()
                .fold((0.0, 0usize), |(s, n), v| (s + voltage_node_reward(v, &config.band), n + 1));
            (sol.total_loss_kw, sum / count.max(1) as f64, true)
        }
        None => (0.0, config.nonconvergence_penalty, false),
    };
    let w = &config.weights;
    let total = -cost_term - w.violation * violation_term - w.loss * loss_term + w.voltage * voltage_term;
    RewardBreakdown {
        cost_term,
        violation_term,
        loss_term,
        voltage_term,
        total,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: ReserveState,
    pub action: ReserveAction,
    pub reward: RewardBreakdown,
    pub done: bool,
}

/// Episodic wrapper owning a seeded random stream. The state is fixed for
/// the whole episode; only the reward depends on the action.
#[derive(Debug, Clone)]
pub struct ReserveEnv {
    network: Network<f64>,
    config: EnvConfig,
    rng: ChaCha8Rng,
    state: Option<ReserveState>,
    t: usize,
}

impl ReserveEnv {
    pub fn new(network: Network<f64>, config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            network,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: None,
            t: 0,
        })
    }

    pub fn der_count(&self) -> usize {
        self.network.der_count()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f64> {
        &self.network
    }

    /// Starts an episode with a freshly sampled state.
    pub fn reset(&mut self) -> Result<ReserveState, EnvError> {
        let n = self.der_count();
        let state = sample_state_with(&mut self.rng, &self.config, n)?;
        self.reset_to(state.clone())?;
        Ok(state)
    }

    /// Starts an episode from a given state.
    pub fn reset_to(&mut self, state: ReserveState) -> Result<(), EnvError> {
        if state.len() != self.der_count() {
            return Err(EnvError::Dimension {
                expected: self.der_count(),
                got: state.len(),
            });
        }
        self.state = Some(state);
        self.t = 0;
        Ok(())
    }

    pub fn state(&self) -> Option<&ReserveState> {
        self.state.as_ref()
    }

    /// Applies a raw action. Panics if called before [`reset`](Self::reset).
    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome, EnvError> {
        let state = self.state.clone().expect("step called before reset");
        if raw.len() != state.len() {
            return Err(EnvError::Dimension {
                expected: state.len(),
                got: raw.len(),
            });
        }
        if raw.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let action = if self.config.project_actions {
            project_action(raw, &state)
        } else {
            unprojected_candidate(raw, &state)
        };
        let reward = reward(&state, &action, &self.config, &self.network);
        self.t += 1;
        Ok(StepOutcome {
            next_state: state,
            action,
            reward,
            done: self.t >= self.config.episode_len,
        })
    }
}
