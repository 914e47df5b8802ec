//! Unbalanced three-phase power flow for radial feeders.
//!
//! The solver runs a forward-backward sweep in per-unit on phase (not
//! sequence) quantities. Each node carries a 3-vector of line-to-neutral
//! voltages; absent phases stay at zero. Regulators are ideal per-phase
//! ratio changers at the sending end of their branch followed by the branch
//! line; the in-line transformer is a series impedance between two per-unit
//! bases. Line charging is lumped half at each end node.
//!
//! Load currents are re-evaluated from the latest voltages on every sweep,
//! which is what makes constant-current and constant-impedance loads
//! voltage dependent. Convergence is declared when the nodal complex power
//! mismatch, i.e. the change in injected current between two sweeps times
//! the node voltage, falls below the tolerance in kVA.

use crate::feeder::{validate_radial, Connection, FeederError, FeederModel, LoadModel, LoadSite, PhaseSet, Topology};
use crate::scalar::Real;
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

type C<T> = Complex<T>;
type Vec3<T> = [C<T>; 3];
type Mat3<T> = [[C<T>; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("injection references unknown DER {0}")]
    UnknownDer(usize),
    #[error("transformer {id}: {reason}")]
    Transformer { id: String, reason: String },
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch_kva:.3e} kVA)")]
    NotConverged { iterations: usize, mismatch_kva: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Largest admissible nodal complex-power mismatch.
    pub tolerance_kva: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance_kva: 1e-4,
            max_iterations: 100,
        }
    }
}

/// Real and reactive output of one DER, split equally over its phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerInjection {
    pub der_id: usize,
    pub kw: f64,
    pub kvar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution<T> {
    pub node_ids: Vec<String>,
    pub phases: Vec<PhaseSet>,
    /// Line-to-neutral voltage per node (model order) and phase, per unit.
    pub voltages: Vec<Vec3<T>>,
    /// Series current per branch (model order) and phase, per unit.
    pub branch_currents: Vec<Vec3<T>>,
    /// Sending-end complex power per branch and phase, kVA.
    pub branch_flows: Vec<Vec3<T>>,
    /// Real loss per branch, kW.
    pub branch_losses: Vec<T>,
    pub total_loss_kw: T,
    pub iterations: usize,
    pub converged: bool,
    pub max_mismatch_kva: T,
    /// Injections the solution was computed with.
    pub injections: Vec<DerInjection>,
}

impl<T: Real> PowerFlowSolution<T> {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    /// Voltage magnitude at a node-phase, if the phase exists.
    pub fn magnitude(&self, node: &str, phase: usize) -> Option<T> {
        let i = self.node_index(node)?;
        self.phases[i].has(phase).then(|| self.voltages[i][phase].norm())
    }

    /// All present node-phase voltage magnitudes, in node order.
    pub fn magnitudes(&self) -> impl Iterator<Item = T> + '_ {
        self.voltages
            .iter()
            .zip(&self.phases)
            .flat_map(|(v, ph)| ph.iter().map(move |p| v[p.index()].norm()))
    }

    /// `node,phase,vmag_pu,angle_deg` rows, one per present node-phase.
    pub fn voltage_csv(&self) -> String {
        let mut s = String::from("node,phase,vmag_pu,angle_deg\n");
        for (i, id) in self.node_ids.iter().enumerate() {
            for p in self.phases[i].iter() {
                let v = self.voltages[i][p.index()];
                let _ = writeln!(
                    s,
                    "{id},{},{:.6},{:.4}",
                    p.letter(),
                    v.norm().as_f64(),
                    v.arg().as_f64().to_degrees()
                );
            }
        }
        s
    }
}

/// Sum of branch losses. Rejects non-converged solutions.
pub fn total_loss<T: Real>(sol: &PowerFlowSolution<T>) -> Result<T, PowerFlowError> {
    if !sol.converged {
        return Err(PowerFlowError::NotConverged {
            iterations: sol.iterations,
            mismatch_kva: sol.max_mismatch_kva.as_f64(),
        });
    }
    Ok(sol.branch_losses.iter().fold(T::zero(), |a, &b| a + b))
}

/// Mean of `| |V| - v_ref |` over every present node-phase.
pub fn average_voltage_deviation<T: Real>(sol: &PowerFlowSolution<T>, v_ref: T) -> T {
    let (sum, count) = sol
        .magnitudes()
        .fold((T::zero(), 0usize), |(s, n), m| (s + (m - v_ref).abs(), n + 1));
    if count == 0 {
        T::zero()
    } else {
        sum / T::lit(count as f64)
    }
}

#[derive(Debug, Clone)]
struct PreparedBranch<T> {
    from: usize,
    to: usize,
    phases: PhaseSet,
    ratio: [T; 3],
    z: Mat3<T>,
}

#[derive(Debug, Clone)]
struct NodeLoad<T> {
    node: usize,
    connection: Connection,
    model: LoadModel,
    s: Vec3<T>,
}

/// A feeder converted to per-unit arrays, ready for repeated solves.
#[derive(Debug, Clone)]
pub struct Network<T> {
    topo: Topology,
    node_ids: Vec<String>,
    phases: Vec<PhaseSet>,
    branches: Vec<PreparedBranch<T>>,
    loads: Vec<NodeLoad<T>>,
    shunts: Vec<Mat3<T>>,
    ders: Vec<(usize, PhaseSet)>,
    /// Per-phase power base, kVA.
    base_phase_kva: T,
    source: Vec3<T>,
}

fn cx<T: Real>(re: f64, im: f64) -> C<T> {
    C::new(T::lit(re), T::lit(im))
}

fn zero3<T: Real>() -> Vec3<T> {
    [C::new(T::zero(), T::zero()); 3]
}

fn zero33<T: Real>() -> Mat3<T> {
    [zero3(); 3]
}

fn matvec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    let mut out = zero3();
    for i in 0..3 {
        for j in 0..3 {
            out[i] = out[i] + m[i][j] * v[j];
        }
    }
    out
}

fn mask<T: Real>(mut v: Vec3<T>, phases: PhaseSet) -> Vec3<T> {
    for (k, x) in v.iter_mut().enumerate() {
        if !phases.has(k) {
            *x = C::new(T::zero(), T::zero());
        }
    }
    v
}

/// Inverts the principal submatrix on `phases`; `None` if (near) singular.
fn invert_on<T: Real>(m: &Mat3<T>, phases: PhaseSet) -> Option<Mat3<T>> {
    let idx: Vec<usize> = phases.iter().map(|p| p.index()).collect();
    let n = idx.len();
    let scale = idx.iter().map(|&i| m[i][i].norm()).fold(T::zero(), |a, b| a.max(b));
    if n == 0 || scale == T::zero() {
        return None;
    }
    let mut a = vec![vec![C::new(T::zero(), T::zero()); 2 * n]; n];
    for r in 0..n {
        for c in 0..n {
            a[r][c] = m[idx[r]][idx[c]];
        }
        a[r][n + r] = C::new(T::one(), T::zero());
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].norm().partial_cmp(&a[y][col].norm()).unwrap())
            .unwrap();
        if a[pivot][col].norm() <= scale * T::lit(1e-12) {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v = *v / p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f.norm() > T::zero() {
                    for c in 0..2 * n {
                        let sub = f * a[col][c];
                        a[r][c] = a[r][c] - sub;
                    }
                }
            }
        }
    }
    let mut out = zero33();
    for r in 0..n {
        for c in 0..n {
            out[idx[r]][idx[c]] = a[r][n + c];
        }
    }
    Some(out)
}

impl<T: Real> Network<T> {
    pub fn new(model: &FeederModel) -> Result<Self, PowerFlowError> {
        model.validate()?;
        let topo = validate_radial(model)?;
        let n = model.nodes.len();
        let base_kva = model.base_kva;
        // ohm -> per unit at a node's base: Z_base = kV_LL^2 * 1000 / kVA_3ph
        let z_base = |node: usize| model.nodes[node].kv_ll.powi(2) * 1000.0 / base_kva;
        let phase_pu = |kw: f64, kvar: f64| cx::<T>(kw * 3.0 / base_kva, kvar * 3.0 / base_kva);

        let mut shunts = vec![zero33::<T>(); n];
        let mut branches = Vec::with_capacity(model.branches.len());
        for b in &model.branches {
            let from = model.node_index(&b.from).expect("validated");
            let to = model.node_index(&b.to).expect("validated");
            let phases = model.nodes[to].phases;
            let mut z = zero33::<T>();
            let mut ratio = [T::one(); 3];
            if let Some(cfg) = model.line_config(&b.config) {
                let zb = z_base(to);
                for i in 0..3 {
                    for j in 0..3 {
                        if phases.has(i) && phases.has(j) {
                            let zi = cfg.z[i][j] * b.length_mi / zb;
                            z[i][j] = cx(zi.re, zi.im);
                            let yi = cfg.y[i][j] * (1e-6 * b.length_mi * zb * 0.5);
                            let half = cx::<T>(yi.re, yi.im);
                            shunts[from][i][j] = shunts[from][i][j] + half;
                            shunts[to][i][j] = shunts[to][i][j] + half;
                        }
                    }
                }
                if let Some(reg) = model.regulator_on(&b.from, &b.to) {
                    ratio = reg.ratios().map(T::lit);
                }
            } else {
                let t = model.transformer(&b.config).expect("validated");
                let (kv_from, kv_to) = (model.nodes[from].kv_ll, model.nodes[to].kv_ll);
                if (kv_from - t.kv_primary).abs() > 1e-9 || (kv_to - t.kv_secondary).abs() > 1e-9 {
                    return Err(PowerFlowError::Transformer {
                        id: t.id.clone(),
                        reason: format!(
                            "rated {}/{} kV but connects {kv_from}/{kv_to} kV nodes",
                            t.kv_primary, t.kv_secondary
                        ),
                    });
                }
                if t.r_pct == 0.0 && t.x_pct == 0.0 {
                    return Err(PowerFlowError::Transformer {
                        id: t.id.clone(),
                        reason: "zero series impedance makes the model singular".into(),
                    });
                }
                let scale = base_kva / t.kva / 100.0;
                for i in phases.iter().map(|p| p.index()) {
                    z[i][i] = cx(t.r_pct * scale, t.x_pct * scale);
                }
            }
            branches.push(PreparedBranch {
                from,
                to,
                phases,
                ratio,
                z,
            });
        }

        for c in &model.capacitors {
            let node = model.node_index(&c.node).expect("validated");
            for k in 0..3 {
                let b = phase_pu(0.0, c.kvar[k]);
                // drawn current j*B*V supplies vars
                shunts[node][k][k] = shunts[node][k][k] + C::new(T::zero(), b.im);
            }
        }

        let mut loads = Vec::new();
        for l in &model.loads {
            let s: Vec3<T> = [0, 1, 2].map(|k| phase_pu(l.kw[k], l.kvar[k]));
            match &l.site {
                LoadSite::Spot(node) => loads.push(NodeLoad {
                    node: model.node_index(node).expect("validated"),
                    connection: l.connection,
                    model: l.model,
                    s,
                }),
                LoadSite::Distributed { from, to } => {
                    let half = s.map(|x| x * T::lit(0.5));
                    for end in [from, to] {
                        loads.push(NodeLoad {
                            node: model.node_index(end).expect("validated"),
                            connection: l.connection,
                            model: l.model,
                            s: half,
                        });
                    }
                }
            }
        }

        let ders = model
            .ders
            .iter()
            .map(|d| (model.node_index(&d.node).expect("validated"), d.phases))
            .collect();
        let vs = model.source_pu;
        let source = [0.0f64, -120.0, 120.0].map(|deg: f64| {
            let r = deg.to_radians();
            cx(vs * r.cos(), vs * r.sin())
        });

        Ok(Network {
            topo,
            node_ids: model.nodes.iter().map(|n| n.id.clone()).collect(),
            phases: model.nodes.iter().map(|n| n.phases).collect(),
            branches,
            loads,
            shunts,
            ders,
            base_phase_kva: T::lit(base_kva / 3.0),
            source,
        })
    }

    pub fn der_count(&self) -> usize {
        self.ders.len()
    }

    fn der_power(&self, injections: &[DerInjection]) -> Result<Vec<Vec3<T>>, PowerFlowError> {
        let mut p = vec![zero3::<T>(); self.node_ids.len()];
        for inj in injections {
            let &(node, phases) = inj
                .der_id
                .checked_sub(1)
                .and_then(|i| self.ders.get(i))
                .ok_or(PowerFlowError::UnknownDer(inj.der_id))?;
            let share = 1.0 / phases.len() as f64;
            let per_phase = C::new(T::lit(inj.kw * share), T::lit(inj.kvar * share)) / self.base_phase_kva;
            for ph in phases.iter() {
                p[node][ph.index()] = p[node][ph.index()] + per_phase;
            }
        }
        Ok(p)
    }

    /// Current drawn from every node by loads and shunts, minus DER output.
    fn node_currents(&self, v: &[Vec3<T>], der: &[Vec3<T>]) -> Vec<Vec3<T>> {
        let n = v.len();
        let mut out = vec![zero3::<T>(); n];
        let sqrt3 = T::lit(3f64.sqrt());
        let three = T::lit(3.0);
        for l in &self.loads {
            let vn = &v[l.node];
            let acc = &mut out[l.node];
            match l.connection {
                Connection::Wye => {
                    for k in 0..3 {
                        let s = l.s[k];
                        if s.norm() == T::zero() {
                            continue;
                        }
                        acc[k] = acc[k]
                            + match l.model {
                                LoadModel::ConstantPower => (s / vn[k]).conj(),
                                LoadModel::ConstantCurrent => s.conj() * vn[k] / vn[k].norm(),
                                LoadModel::ConstantImpedance => vn[k] * s.conj(),
                            };
                    }
                }
                Connection::Delta => {
                    for k in 0..3 {
                        let s = l.s[k];
                        if s.norm() == T::zero() {
                            continue;
                        }
                        let k1 = (k + 1) % 3;
                        let vd = vn[k] - vn[k1];
                        let id = match l.model {
                            LoadModel::ConstantPower => (s / vd).conj(),
                            LoadModel::ConstantCurrent => s.conj() * vd / (vd.norm() * sqrt3),
                            LoadModel::ConstantImpedance => vd * s.conj() / three,
                        };
                        acc[k] = acc[k] + id;
                        acc[k1] = acc[k1] - id;
                    }
                }
            }
        }
        for i in 0..n {
            let shunt = matvec(&self.shunts[i], &v[i]);
            for k in 0..3 {
                if self.phases[i].has(k) {
                    let mut x = out[i][k] + shunt[k];
                    if der[i][k].norm() > T::zero() {
                        x = x - (der[i][k] / v[i][k]).conj();
                    }
                    out[i][k] = x;
                }
            }
        }
        out
    }

    fn sending_current(&self, b: usize, line: &Vec3<T>) -> Vec3<T> {
        let r = self.branches[b].ratio;
        [line[0] * r[0], line[1] * r[1], line[2] * r[2]]
    }

    fn backward(&self, node_i: &[Vec3<T>], line: &mut [Vec3<T>]) {
        for &n in self.topo.order.iter().rev() {
            let Some(b) = self.topo.parent_branch[n] else { continue };
            let mut acc = node_i[n];
            for &c in &self.topo.children[n] {
                let send = self.sending_current(c, &line[c]);
                for k in 0..3 {
                    acc[k] = acc[k] + send[k];
                }
            }
            line[b] = mask(acc, self.branches[b].phases);
        }
    }

    fn forward(&self, v: &mut [Vec3<T>], line: &[Vec3<T>]) {
        for &n in &self.topo.order {
            let Some(b) = self.topo.parent_branch[n] else {
                v[n] = mask(self.source, self.phases[n]);
                continue;
            };
            let br = &self.branches[b];
            let up = v[br.from];
            let drop = matvec(&br.z, &line[b]);
            let mut out = zero3();
            for k in 0..3 {
                out[k] = up[k] * br.ratio[k] - drop[k];
            }
            v[n] = mask(out, self.phases[n]);
        }
    }

    /// Solves the feeder with the given DER outputs.
    pub fn solve(&self, injections: &[DerInjection], options: &SolverOptions) -> Result<PowerFlowSolution<T>, PowerFlowError> {
        let der = self.der_power(injections)?;
        let n = self.node_ids.len();
        let mut v = vec![zero3::<T>(); n];
        let mut line = vec![zero3::<T>(); self.branches.len()];
        // flat start that already includes regulator boosts
        self.forward(&mut v, &line);

        let tol = T::lit(options.tolerance_kva);
        let mut currents = self.node_currents(&v, &der);
        let mut mismatch = T::infinity();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < options.max_iterations {
            iterations += 1;
            self.backward(&currents, &mut line);
            self.forward(&mut v, &line);
            let fresh = self.node_currents(&v, &der);
            mismatch = T::zero();
            for i in 0..n {
                if i == self.topo.root() {
                    continue;
                }
                for k in 0..3 {
                    let m = (v[i][k] * (fresh[i][k] - currents[i][k]).conj()).norm() * self.base_phase_kva;
                    if !(m <= mismatch) {
                        mismatch = m;
                    }
                }
            }
            currents = fresh;
            if mismatch <= tol {
                converged = true;
                break;
            }
            if !mismatch.is_finite() {
                break;
            }
        }
        self.backward(&currents, &mut line);

        let base = self.base_phase_kva;
        let mut branch_losses = Vec::with_capacity(self.branches.len());
        let mut branch_flows = Vec::with_capacity(self.branches.len());
        for (b, br) in self.branches.iter().enumerate() {
            let zi = matvec(&br.z, &line[b]);
            let loss = (0..3).fold(T::zero(), |acc, k| acc + (line[b][k].conj() * zi[k]).re) * base;
            branch_losses.push(loss);
            let send = self.sending_current(b, &line[b]);
            branch_flows.push([0, 1, 2].map(|k| v[br.from][k] * send[k].conj() * base));
        }
        let total_loss_kw = branch_losses.iter().fold(T::zero(), |a, &b| a + b);
        Ok(PowerFlowSolution {
            node_ids: self.node_ids.clone(),
            phases: self.phases.clone(),
            voltages: v,
            branch_currents: line,
            branch_flows,
            branch_losses,
            total_loss_kw,
            iterations,
            converged,
            max_mismatch_kva: mismatch,
            injections: injections.to_vec(),
        })
    }

    /// Nodal complex-power residual recomputed from voltages alone.
    pub fn power_balance(&self, sol: &PowerFlowSolution<T>) -> Result<BalanceReport<T>, PowerFlowError> {
        let der = self.der_power(&sol.injections)?;
        let v = &sol.voltages;
        let mut line = Vec::with_capacity(self.branches.len());
        for (b, br) in self.branches.iter().enumerate() {
            let current = match invert_on(&br.z, br.phases) {
                Some(inv) => {
                    let mut dv = zero3();
                    for k in 0..3 {
                        dv[k] = v[br.from][k] * br.ratio[k] - v[br.to][k];
                    }
                    mask(matvec(&inv, &dv), br.phases)
                }
                None => sol.branch_currents[b],
            };
            line.push(current);
        }
        let drawn = self.node_currents(v, &der);
        let n = v.len();
        let mut residuals = vec![[T::zero(); 3]; n];
        let mut max = T::zero();
        for i in 0..n {
            let Some(b) = self.topo.parent_branch[i] else { continue };
            let mut res = line[b];
            for &c in &self.topo.children[i] {
                let send = self.sending_current(c, &line[c]);
                for k in 0..3 {
                    res[k] = res[k] - send[k];
                }
            }
            for k in 0..3 {
                if self.phases[i].has(k) {
                    let r = (v[i][k] * (res[k] - drawn[i][k]).conj()).norm() * self.base_phase_kva;
                    residuals[i][k] = r;
                    max = max.max(r);
                }
            }
        }
        Ok(BalanceReport { residuals, max })
    }
}

/// Per node-phase power-balance residuals, kVA. The substation (slack) row is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport<T> {
    pub residuals: Vec<[T; 3]>,
    pub max: T,
}

/// Solves a feeder once. Use [`Network`] directly for repeated solves.
pub fn solve<T: Real>(
    model: &FeederModel,
    injections: &[DerInjection],
    options: &SolverOptions,
) -> Result<PowerFlowSolution<T>, PowerFlowError> {
    Network::<T>::new(model)?.solve(injections, options)
}

/// Residual of generation + inflow - load at every node.
pub fn check_power_balance<T: Real>(sol: &PowerFlowSolution<T>, model: &FeederModel) -> Result<BalanceReport<T>, PowerFlowError> {
    Network::<T>::new(model)?.power_balance(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{builtin_modified_ieee34, parse_feeder};

    fn two_bus(load: &str) -> FeederModel {
        parse_feeder(&format!(
            "[system]\nbase_kva 1000\nsubstation s\nsource_pu 1.0\n\
             [nodes]\ns 12.47 abc\nr 12.47 abc\n\
             [configs]\nL z a 0.3+0.6j 0.1+0.2j 0.1+0.2j\nL z b 0.1+0.2j 0.3+0.6j 0.1+0.2j\nL z c 0.1+0.2j 0.1+0.2j 0.3+0.6j\n\
             [branches]\ns r 1 L\n[loads]\n{load}"
        ))
        .unwrap()
    }

    #[test]
    fn no_flow_case() {
        let m = two_bus("");
        let sol = solve::<f64>(&m, &[], &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(total_loss(&sol).unwrap(), 0.0);
        for v in &sol.voltages {
            assert!((v[0].norm() - 1.0).abs() < 1e-15);
        }
        assert!(average_voltage_deviation(&sol, 1.0) < 1e-15);
        let bal = check_power_balance(&sol, &m).unwrap();
        assert_eq!(bal.max, 0.0);
    }

    #[test]
    fn avd_hand_arithmetic() {
        let m = two_bus("");
        let mut sol = solve::<f64>(&m, &[], &SolverOptions::default()).unwrap();
        sol.phases = vec![PhaseSet::single(crate::feeder::Phase::A); 2];
        sol.voltages[0][0] = C::new(0.98, 0.0);
        sol.voltages[1][0] = C::new(0.0, 1.04);
        assert!((average_voltage_deviation(&sol, 1.0) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn losses_sum_and_nonnegative() {
        let m = builtin_modified_ieee34();
        let sol = solve::<f64>(&m, &[], &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        let sum: f64 = sol.branch_losses.iter().sum();
        assert!((sum - total_loss(&sol).unwrap()).abs() < 1e-6);
        assert!(sol.branch_losses.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn balance_detects_perturbation() {
        let m = two_bus("spot r Y-PQ 100 50 100 50 100 50\n");
        let mut sol = solve::<f64>(&m, &[], &SolverOptions::default()).unwrap();
        let bal = check_power_balance(&sol, &m).unwrap();
        assert!(bal.max <= 1e-4, "{}", bal.max);
        sol.voltages[1][0] = sol.voltages[1][0] * 1.001;
        let bal = check_power_balance(&sol, &m).unwrap();
        assert!(bal.residuals[1][0] > 1e-4);
    }

    #[test]
    fn rejects_unknown_der() {
        let m = two_bus("");
        let inj = [DerInjection {
            der_id: 3,
            kw: 1.0,
            kvar: 0.0,
        }];
        assert_eq!(
            solve::<f64>(&m, &inj, &SolverOptions::default()),
            Err(PowerFlowError::UnknownDer(3))
        );
    }

    #[test]
    fn non_convergence_is_flagged() {
        let m = two_bus("spot r Y-PQ 100 50 100 50 100 50\n");
        let opts = SolverOptions {
            tolerance_kva: 1e-4,
            max_iterations: 1,
        };
        let sol = solve::<f64>(&m, &[], &opts).unwrap();
        assert!(!sol.converged);
        assert!(total_loss(&sol).is_err());
    }

    #[test]
    fn single_precision_solve() {
        let m = builtin_modified_ieee34();
        let opts = SolverOptions {
            tolerance_kva: 0.5,
            max_iterations: 100,
        };
        let lo = solve::<f32>(&m, &[], &opts).unwrap();
        let hi = solve::<f64>(&m, &[], &SolverOptions::default()).unwrap();
        assert!(lo.converged);
        for (a, b) in lo.magnitudes().zip(hi.magnitudes()) {
            assert!((a as f64 - b).abs() < 1e-3);
        }
    }

    #[test]
    fn invert_submatrix() {
        let mut m = zero33::<f64>();
        m[1][1] = C::new(2.0, 0.0);
        m[1][2] = C::new(0.0, 1.0);
        m[2][1] = C::new(0.0, 1.0);
        m[2][2] = C::new(3.0, 0.0);
        let inv = invert_on(&m, PhaseSet::parse("bc").unwrap()).unwrap();
        // (m * inv) restricted to bc is the identity
        for i in 1..3 {
            for j in 1..3 {
                let mut s = C::new(0.0, 0.0);
                for k in 1..3 {
                    s += m[i][k] * inv[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - C::new(expect, 0.0)).norm() < 1e-12);
            }
        }
        assert!(invert_on(&zero33::<f64>(), PhaseSet::ABC).is_none());
    }
}
