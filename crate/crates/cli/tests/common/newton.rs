//! Newton-Raphson load flow on a bus admittance matrix. Independent of the
//! sweep solver: it never walks the tree and solves all node voltages at
//! once. Handles line sections, capacitors, wye loads, delta constant-power
//! loads and constant-power DERs; regulators and transformers are out of
//! scope.

use num_complex::Complex64 as C;
use reserve_core::feeder::{Connection, FeederModel, LoadModel, LoadSite};
use std::collections::HashMap;

fn invert(m: &[Vec<C>]) -> Vec<Vec<C>> {
    let n = m.len();
    let mut a: Vec<Vec<C>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { C::new(1.0, 0.0) } else { C::default() }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].norm().total_cmp(&a[y][col].norm()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in 0..2 * n {
                    let delta = f * a[col][c];
                    a[r][c] -= delta;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn solve_real(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

struct SpotLoad {
    node: usize,
    connection: Connection,
    model: LoadModel,
    s: [C; 3],
}

/// Solves the feeder and returns complex phase voltages (p.u.) keyed by
/// node id and phase index. `der_kw` gives the real output of each DER, in
/// id order.
pub fn newton_raphson(model: &FeederModel, der_kw: &[f64]) -> HashMap<(String, usize), C> {
    let n = model.nodes.len();
    let dim = 3 * n;
    let phase_base = model.base_kva / 3.0;
    let idx = |id: &str| model.node_index(id).expect("known node");
    let mut y = vec![vec![C::default(); dim]; dim];

    for br in &model.branches {
        let cfg = model.line_config(&br.config).expect("oracle handles line sections only");
        let (f, t) = (idx(&br.from), idx(&br.to));
        let kv = model.nodes[f].kv_ll;
        let zbase = kv * kv * 1000.0 / model.base_kva;
        let ph: Vec<usize> = (0..3).filter(|&k| cfg.z[k][k].norm() > 0.0).collect();
        let z: Vec<Vec<C>> = ph
            .iter()
            .map(|&i| ph.iter().map(|&j| cfg.z[i][j] * br.length_mi / zbase).collect())
            .collect();
        let yb = invert(&z);
        for (a, &i) in ph.iter().enumerate() {
            for (b, &j) in ph.iter().enumerate() {
                let half_shunt = cfg.y[i][j] * 1e-6 * br.length_mi * zbase / 2.0;
                y[3 * f + i][3 * f + j] += yb[a][b] + half_shunt;
                y[3 * t + i][3 * t + j] += yb[a][b] + half_shunt;
                y[3 * f + i][3 * t + j] -= yb[a][b];
                y[3 * t + i][3 * f + j] -= yb[a][b];
            }
        }
    }
    for cap in &model.capacitors {
        let i = idx(&cap.node);
        for k in 0..3 {
            y[3 * i + k][3 * i + k] += C::new(0.0, cap.kvar[k] / phase_base);
        }
    }

    let mut loads = Vec::new();
    for l in &model.loads {
        let s = [0, 1, 2].map(|k| C::new(l.kw[k], l.kvar[k]) / phase_base);
        let sites: Vec<(usize, f64)> = match &l.site {
            LoadSite::Spot(node) => vec![(idx(node), 1.0)],
            LoadSite::Distributed { from, to } => vec![(idx(from), 0.5), (idx(to), 0.5)],
        };
        for (node, share) in sites {
            loads.push(SpotLoad {
                node,
                connection: l.connection,
                model: l.model,
                s: s.map(|v| v * share),
            });
        }
    }
    let mut der = vec![C::default(); dim];
    for (d, kw) in model.ders.iter().zip(der_kw) {
        let i = idx(&d.node);
        let phases: Vec<usize> = (0..3).filter(|&k| d.phases.has(k)).collect();
        for &k in &phases {
            der[3 * i + k] += C::new(kw / phases.len() as f64 / phase_base, 0.0);
        }
    }

    let slack = idx(&model.substation);
    let present = |i: usize, k: usize| model.nodes[i].phases.has(k);
    let unknowns: Vec<usize> = (0..dim).filter(|&s| s / 3 != slack && present(s / 3, s % 3)).collect();
    let angles = [0.0f64, -120.0, 120.0];
    let mut v: Vec<C> = (0..dim)
        .map(|s| {
            if present(s / 3, s % 3) {
                C::from_polar(model.source_pu, angles[s % 3].to_radians())
            } else {
                C::default()
            }
        })
        .collect();

    let residual = |v: &[C]| -> Vec<C> {
        let mut r: Vec<C> = (0..dim).map(|i| (0..dim).map(|j| y[i][j] * v[j]).sum::<C>()).collect();
        for l in &loads {
            for k in 0..3 {
                if l.s[k].norm() == 0.0 {
                    continue;
                }
                let a = 3 * l.node + k;
                match l.connection {
                    Connection::Wye => {
                        r[a] += match l.model {
                            LoadModel::ConstantPower => (l.s[k] / v[a]).conj(),
                            LoadModel::ConstantCurrent => l.s[k].conj() * v[a] / v[a].norm(),
                            LoadModel::ConstantImpedance => l.s[k].conj() * v[a],
                        }
                    }
                    Connection::Delta => {
                        assert_eq!(l.model, LoadModel::ConstantPower, "oracle handles delta constant power only");
                        let b = 3 * l.node + (k + 1) % 3;
                        let i = (l.s[k] / (v[a] - v[b])).conj();
                        r[a] += i;
                        r[b] -= i;
                    }
                }
            }
        }
        for s in 0..dim {
            if der[s].norm() > 0.0 {
                r[s] -= (der[s] / v[s]).conj();
            }
        }
        unknowns.iter().map(|&s| r[s]).collect()
    };
    let flatten = |r: &[C]| -> Vec<f64> { r.iter().flat_map(|c| [c.re, c.im]).collect() };

    let m = 2 * unknowns.len();
    for _ in 0..50 {
        let f = flatten(&residual(&v));
        if f.iter().all(|x| x.abs() < 1e-13) {
            break;
        }
        let h = 1e-7;
        let mut jac = vec![vec![0.0; m]; m];
        for (u, &s) in unknowns.iter().enumerate() {
            for part in 0..2 {
                let step = if part == 0 { C::new(h, 0.0) } else { C::new(0.0, h) };
                let orig = v[s];
                v[s] = orig + step;
                let plus = flatten(&residual(&v));
                v[s] = orig - step;
                let minus = flatten(&residual(&v));
                v[s] = orig;
                for row in 0..m {
                    jac[row][2 * u + part] = (plus[row] - minus[row]) / (2.0 * h);
                }
            }
        }
        let dx = solve_real(jac, f.iter().map(|x| -x).collect());
        for (u, &s) in unknowns.iter().enumerate() {
            v[s] += C::new(dx[2 * u], dx[2 * u + 1]);
        }
    }
    let f = flatten(&residual(&v));
    assert!(f.iter().all(|x| x.abs() < 1e-10), "Newton-Raphson oracle did not converge");

    (0..dim)
        .filter(|&s| present(s / 3, s % 3))
        .map(|s| ((model.nodes[s / 3].id.clone(), s % 3), v[s]))
        .collect()
}
