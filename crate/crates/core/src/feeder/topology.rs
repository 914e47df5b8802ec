use super::*;
use std::collections::{HashMap, VecDeque};

/// Breadth-first view of a radial feeder rooted at the substation.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Node indices in breadth-first order; `order[0]` is the substation.
    pub order: Vec<usize>,
    /// Parent node of each node (by node index); `None` for the root.
    pub parent: Vec<Option<usize>>,
    /// Branch feeding each node; `None` for the root.
    pub parent_branch: Vec<Option<usize>>,
    /// Downstream branches of each node.
    pub children: Vec<Vec<usize>>,
}

impl Topology {
    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Position of every node in `order`.
    pub fn rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (pos, &n) in self.order.iter().enumerate() {
            rank[n] = pos;
        }
        rank
    }

    pub fn parent_count(&self) -> usize {
        self.parent.iter().filter(|p| p.is_some()).count()
    }
}

fn node_map(model: &FeederModel) -> HashMap<&str, usize> {
    model.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
}

/// Computes the breadth-first ordering and parent map. Branches must point
/// away from the substation.
pub fn validate_radial(model: &FeederModel) -> Result<Topology, FeederError> {
    let ids = node_map(model);
    let n = model.nodes.len();
    let root = *ids.get(model.substation.as_str()).ok_or_else(|| FeederError::UnknownNode {
        element: "system.substation".into(),
        node: model.substation.clone(),
    })?;

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (bi, b) in model.branches.iter().enumerate() {
        let lookup = |id: &str| {
            ids.get(id).copied().ok_or_else(|| FeederError::UnknownNode {
                element: format!("branch {}", b.label()),
                node: id.to_string(),
            })
        };
        let (f, t) = (lookup(&b.from)?, lookup(&b.to)?);
        if f == t {
            return Err(FeederError::NonRadial {
                element: format!("branch {}", b.label()),
                reason: "self loop".into(),
            });
        }
        adjacency[f].push(bi);
        adjacency[t].push(bi);
    }

    let mut parent = vec![None; n];
    let mut parent_branch = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    let mut used = vec![false; model.branches.len()];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([root]);
    seen[root] = true;

    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &bi in &adjacency[u] {
            if used[bi] {
                continue;
            }
            used[bi] = true;
            let b = &model.branches[bi];
            let (f, t) = (ids[b.from.as_str()], ids[b.to.as_str()]);
            let v = if f == u { t } else { f };
            if seen[v] {
                return Err(FeederError::NonRadial {
                    element: format!("branch {}", b.label()),
                    reason: format!("node {} is reachable by more than one path", model.nodes[v].id),
                });
            }
            if t != v {
                return Err(FeederError::NonRadial {
                    element: format!("branch {}", b.label()),
                    reason: "branch points toward the substation".into(),
                });
            }
            seen[v] = true;
            parent[v] = Some(u);
            parent_branch[v] = Some(bi);
            children[u].push(bi);
            queue.push_back(v);
        }
    }
    if let Some(orphan) = seen.iter().position(|s| !s) {
        return Err(FeederError::Disconnected {
            node: model.nodes[orphan].id.clone(),
        });
    }
    if let Some(bi) = used.iter().position(|u| !u) {
        return Err(FeederError::NonRadial {
            element: format!("branch {}", model.branches[bi].label()),
            reason: "branch is not part of the tree".into(),
        });
    }
    Ok(Topology {
        order,
        parent,
        parent_branch,
        children,
    })
}

fn symmetric(m: &Matrix3) -> bool {
    (0..3).all(|i| {
        (0..3).all(|j| {
            let scale = m[i][j].norm().max(m[j][i].norm());
            (m[i][j] - m[j][i]).norm() <= 1e-9 * scale
        })
    })
}

/// Checks ids, config references and numeric sanity.
pub(super) fn check_references(model: &FeederModel) -> Result<(), FeederError> {
    let ids = node_map(model);
    if ids.len() != model.nodes.len() {
        let mut seen = std::collections::HashSet::new();
        let dup = model.nodes.iter().find(|n| !seen.insert(n.id.as_str())).unwrap();
        return Err(FeederError::Invalid {
            element: format!("node {}", dup.id),
            message: "duplicate node id".into(),
        });
    }
    if !(model.base_kva > 0.0) || !(model.source_pu > 0.0) {
        return Err(FeederError::Invalid {
            element: "system".into(),
            message: "base_kva and source_pu must be positive".into(),
        });
    }
    for n in &model.nodes {
        if !(n.kv_ll > 0.0) {
            return Err(FeederError::Invalid {
                element: format!("node {}", n.id),
                message: "base kV must be positive".into(),
            });
        }
    }
    for c in &model.line_configs {
        if !symmetric(&c.z) || !symmetric(&c.y) {
            return Err(FeederError::Invalid {
                element: format!("config {}", c.id),
                message: "impedance or admittance matrix is not symmetric".into(),
            });
        }
    }
    for t in &model.transformers {
        if !(t.kva > 0.0 && t.kv_primary > 0.0 && t.kv_secondary > 0.0) {
            return Err(FeederError::Invalid {
                element: format!("transformer {}", t.id),
                message: "rating and voltages must be positive".into(),
            });
        }
    }
    for b in &model.branches {
        if model.line_config(&b.config).is_none() && model.transformer(&b.config).is_none() {
            return Err(FeederError::UnknownConfig {
                branch: b.label(),
                config: b.config.clone(),
            });
        }
    }
    let require = |element: String, id: &str| {
        if ids.contains_key(id) {
            Ok(())
        } else {
            Err(FeederError::UnknownNode {
                element,
                node: id.to_string(),
            })
        }
    };
    for r in &model.regulators {
        if !model.branches.iter().any(|b| b.from == r.from && b.to == r.to) {
            return Err(FeederError::Invalid {
                element: format!("regulator {}", r.id),
                message: format!("no branch {}-{}", r.from, r.to),
            });
        }
    }
    for c in &model.capacitors {
        require(format!("capacitor at {}", c.node), &c.node)?;
    }
    for l in &model.loads {
        match &l.site {
            LoadSite::Spot(node) => require(format!("load at {node}"), node)?,
            LoadSite::Distributed { from, to } => {
                if !model.branches.iter().any(|b| b.from == *from && b.to == *to) {
                    return Err(FeederError::Invalid {
                        element: format!("distributed load {from}-{to}"),
                        message: "no such branch".into(),
                    });
                }
            }
        }
    }
    for (k, d) in model.ders.iter().enumerate() {
        require(format!("DER {}", d.id), &d.node)?;
        if d.id != k + 1 {
            return Err(FeederError::Invalid {
                element: format!("DER {}", d.id),
                message: format!("DER ids must run 1..n in order; expected {}", k + 1),
            });
        }
    }
    Ok(())
}

/// Checks that every element only touches phases present at its node(s).
pub(super) fn check_phases(model: &FeederModel, topo: &Topology) -> Result<(), FeederError> {
    let phases_of = |id: &str| model.node(id).map(|n| n.phases).unwrap_or(PhaseSet::EMPTY);
    for (v, pb) in topo.parent_branch.iter().enumerate() {
        let Some(bi) = *pb else { continue };
        let b = &model.branches[bi];
        let from = phases_of(&b.from);
        let to = model.nodes[v].phases;
        if !to.is_subset(from) {
            return Err(FeederError::PhaseMismatch {
                element: format!("branch {}", b.label()),
                detail: format!("node {} has phases {to} but upstream node has {from}", b.to),
            });
        }
        if let Some(cfg) = model.line_config(&b.config) {
            let cp = cfg.phases();
            if b.length_mi > 0.0 && cp != to {
                return Err(FeederError::PhaseMismatch {
                    element: format!("branch {}", b.label()),
                    detail: format!("config {} carries phases {cp} but node {} has {to}", cfg.id, b.to),
                });
            }
        }
    }
    for c in &model.capacitors {
        let present = PhaseSet::from_mask(c.kvar.map(|q| q != 0.0));
        if !present.is_subset(phases_of(&c.node)) {
            return Err(FeederError::PhaseMismatch {
                element: format!("capacitor at {}", c.node),
                detail: format!("phases {present} not all present at node"),
            });
        }
    }
    for l in &model.loads {
        let (label, avail) = match &l.site {
            LoadSite::Spot(n) => (format!("load at {n}"), phases_of(n)),
            LoadSite::Distributed { from, to } => (
                format!("distributed load {from}-{to}"),
                PhaseSet::from_mask([0, 1, 2].map(|i| phases_of(from).has(i) && phases_of(to).has(i))),
            ),
        };
        if !l.phases().is_subset(avail) {
            return Err(FeederError::PhaseMismatch {
                element: label,
                detail: format!("load uses phases {} but only {avail} are present", l.phases()),
            });
        }
    }
    for d in &model.ders {
        if !d.phases.is_subset(phases_of(&d.node)) {
            return Err(FeederError::PhaseMismatch {
                element: format!("DER {}", d.id),
                detail: format!("phases {} not all present at node {}", d.phases, d.node),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(ids: &[&str], edges: &[(&str, &str)]) -> FeederModel {
        FeederModel {
            name: String::new(),
            base_kva: 1000.0,
            substation: ids[0].into(),
            source_pu: 1.0,
            nodes: ids
                .iter()
                .map(|i| Node {
                    id: i.to_string(),
                    kv_ll: 12.47,
                    phases: PhaseSet::ABC,
                })
                .collect(),
            branches: edges
                .iter()
                .map(|(a, b)| Branch {
                    from: a.to_string(),
                    to: b.to_string(),
                    length_mi: 1.0,
                    config: "L".into(),
                })
                .collect(),
            line_configs: vec![],
            regulators: vec![],
            transformers: vec![],
            capacitors: vec![],
            loads: vec![],
            ders: vec![],
        }
    }

    #[test]
    fn two_node_order() {
        let m = chain(&["s", "x"], &[("s", "x")]);
        let t = validate_radial(&m).unwrap();
        assert_eq!(t.order, vec![0, 1]);
        assert_eq!(t.parent, vec![None, Some(0)]);
    }

    #[test]
    fn orphan_node() {
        let m = chain(&["s", "x", "orphan"], &[("s", "x")]);
        assert_eq!(validate_radial(&m), Err(FeederError::Disconnected { node: "orphan".into() }));
    }

    #[test]
    fn cycle_detected() {
        let m = chain(&["s", "x", "y"], &[("s", "x"), ("x", "y"), ("s", "y")]);
        assert!(matches!(validate_radial(&m), Err(FeederError::NonRadial { .. })));
    }

    #[test]
    fn ieee34_parent_map() {
        let m = builtin_modified_ieee34();
        let t = validate_radial(&m).unwrap();
        assert_eq!(t.parent_count(), 33);
        assert_eq!(m.nodes[t.root()].id, "800");
        let rank = t.rank();
        for b in &m.branches {
            let f = m.node_index(&b.from).unwrap();
            let to = m.node_index(&b.to).unwrap();
            assert!(rank[f] < rank[to], "{}", b.label());
        }
    }
}
