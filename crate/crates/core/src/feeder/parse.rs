//! Line-oriented feeder text format.
//!
//! ```text
//! [system]        key value
//! [nodes]         id kv_ll phases
//! [configs]       id z|y row(a|b|c) col_a col_b col_c
//! [branches]      from to length[ft|mi] config
//! [regulators]    id from to tap_a tap_b tap_c
//! [transformers]  id kva kv_primary kv_secondary r_pct x_pct connection
//! [capacitors]    node kvar_a kvar_b kvar_c
//! [loads]         spot node MODEL kw_a kvar_a kw_b kvar_b kw_c kvar_c
//!                 dist from to MODEL kw_a kvar_a kw_b kvar_b kw_c kvar_c
//! [ders]          id node phases
//! ```
//!
//! Complex entries are written `re+imj`; `#` starts a comment.

use super::*;
use num_complex::Complex64;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    System,
    Nodes,
    Configs,
    Branches,
    Regulators,
    Transformers,
    Capacitors,
    Loads,
    Ders,
}

impl Section {
    fn from_name(name: &str) -> Option<Section> {
        Some(match name {
            "system" => Section::System,
            "nodes" => Section::Nodes,
            "configs" => Section::Configs,
            "branches" => Section::Branches,
            "regulators" => Section::Regulators,
            "transformers" => Section::Transformers,
            "capacitors" => Section::Capacitors,
            "loads" => Section::Loads,
            "ders" => Section::Ders,
            _ => return None,
        })
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

struct Record<'a> {
    line: usize,
    tokens: Vec<Token<'a>>,
}

impl<'a> Record<'a> {
    fn err(&self, idx: usize, message: impl Into<String>) -> FeederError {
        let column = self
            .tokens
            .get(idx)
            .map(|t| t.column)
            .unwrap_or_else(|| self.tokens.last().map_or(1, |t| t.column + t.text.len()));
        FeederError::Syntax {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn expect_len(&self, n: usize, what: &str) -> Result<(), FeederError> {
        if self.tokens.len() != n {
            return Err(self.err(
                self.tokens.len().min(n),
                format!("{what} record needs {n} fields, found {}", self.tokens.len()),
            ));
        }
        Ok(())
    }

    fn str(&self, idx: usize) -> &'a str {
        self.tokens[idx].text
    }

    fn f64(&self, idx: usize) -> Result<f64, FeederError> {
        let t = self.str(idx);
        t.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(idx, format!("expected a number, found `{t}`")))
    }

    fn i32(&self, idx: usize) -> Result<i32, FeederError> {
        let t = self.str(idx);
        t.parse::<i32>()
            .map_err(|_| self.err(idx, format!("expected an integer, found `{t}`")))
    }

    fn length_mi(&self, idx: usize) -> Result<f64, FeederError> {
        let t = self.str(idx);
        let (num, scale) = if let Some(v) = t.strip_suffix("ft") {
            (v, 1.0 / FEET_PER_MILE)
        } else if let Some(v) = t.strip_suffix("mi") {
            (v, 1.0)
        } else {
            (t, 1.0)
        };
        num.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(|v| v * scale)
            .ok_or_else(|| self.err(idx, format!("expected a non-negative length, found `{t}`")))
    }

    fn complex(&self, idx: usize) -> Result<Complex64, FeederError> {
        let t = self.str(idx);
        parse_complex(t).ok_or_else(|| self.err(idx, format!("expected a complex number, found `{t}`")))
    }

    fn phases(&self, idx: usize) -> Result<PhaseSet, FeederError> {
        let t = self.str(idx);
        PhaseSet::parse(t).ok_or_else(|| self.err(idx, format!("expected a phase set, found `{t}`")))
    }
}

/// Parses `re`, `imj`, `re+imj` or `re-imj`.
pub(crate) fn parse_complex(text: &str) -> Option<Complex64> {
    let Some(body) = text.strip_suffix('j') else {
        return text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|re| Complex64::new(re, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&i| (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E'));
    let (re, im) = match split {
        Some(i) => (body[..i].parse::<f64>().ok()?, parse_imag(&body[i..])?),
        None => (0.0, parse_imag(body)?),
    };
    (re.is_finite() && im.is_finite()).then(|| Complex64::new(re, im))
}

fn parse_imag(text: &str) -> Option<f64> {
    match text {
        "" | "+" => Some(1.0),
        "-" => Some(-1.0),
        _ => text.parse().ok(),
    }
}

fn tokenize(text: &str) -> Vec<Record<'_>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = Vec::new();
        let mut start: Option<usize> = None;
        for (pos, ch) in content.char_indices().chain(std::iter::once((content.len(), ' '))) {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(Token {
                        text: &content[s..pos],
                        column: s + 1,
                    });
                }
            } else if start.is_none() {
                start = Some(pos);
            }
        }
        if !tokens.is_empty() {
            out.push(Record { line: i + 1, tokens });
        }
    }
    out
}

#[derive(Default)]
struct PendingConfig {
    z: [Option<[Complex64; 3]>; 3],
    y: [Option<[Complex64; 3]>; 3],
    line: usize,
}

/// Parses and validates a feeder document.
pub fn parse_feeder(text: &str) -> Result<FeederModel, FeederError> {
    let mut model = FeederModel {
        name: String::new(),
        base_kva: 1000.0,
        substation: String::new(),
        source_pu: 1.0,
        nodes: Vec::new(),
        branches: Vec::new(),
        line_configs: Vec::new(),
        regulators: Vec::new(),
        transformers: Vec::new(),
        capacitors: Vec::new(),
        loads: Vec::new(),
        ders: Vec::new(),
    };
    let mut configs: Vec<(String, PendingConfig)> = Vec::new();
    let mut section: Option<Section> = None;

    for rec in tokenize(text) {
        let first = rec.str(0);
        if first.starts_with('[') {
            let name = first
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| rec.err(0, "malformed section header"))?;
            if rec.tokens.len() != 1 {
                return Err(rec.err(1, "unexpected text after section header"));
            }
            section = Some(
                Section::from_name(&name.to_ascii_lowercase()).ok_or_else(|| rec.err(0, format!("unknown section `{name}`")))?,
            );
            continue;
        }
        let Some(sec) = section else {
            return Err(rec.err(0, "record before any section header"));
        };
        match sec {
            Section::System => {
                rec.expect_len(2, "system")?;
                match rec.str(0) {
                    "name" => model.name = rec.str(1).to_string(),
                    "base_kva" => model.base_kva = rec.f64(1)?,
                    "substation" => model.substation = rec.str(1).to_string(),
                    "source_pu" => model.source_pu = rec.f64(1)?,
                    other => return Err(rec.err(0, format!("unknown system key `{other}`"))),
                }
            }
            Section::Nodes => {
                rec.expect_len(3, "node")?;
                model.nodes.push(Node {
                    id: rec.str(0).to_string(),
                    kv_ll: rec.f64(1)?,
                    phases: rec.phases(2)?,
                });
            }
            Section::Configs => {
                rec.expect_len(6, "config")?;
                let id = rec.str(0).to_string();
                let row = match rec.str(2) {
                    "a" => 0,
                    "b" => 1,
                    "c" => 2,
                    other => return Err(rec.err(2, format!("expected row a|b|c, found `{other}`"))),
                };
                let values = [rec.complex(3)?, rec.complex(4)?, rec.complex(5)?];
                let idx = match configs.iter().position(|(c, _)| *c == id) {
                    Some(i) => i,
                    None => {
                        configs.push((
                            id.clone(),
                            PendingConfig {
                                line: rec.line,
                                ..Default::default()
                            },
                        ));
                        configs.len() - 1
                    }
                };
                let pending = &mut configs[idx].1;
                let slot = match rec.str(1) {
                    "z" => &mut pending.z[row],
                    "y" => &mut pending.y[row],
                    other => return Err(rec.err(1, format!("expected z or y, found `{other}`"))),
                };
                if slot.is_some() {
                    return Err(rec.err(2, format!("duplicate row for config {id}")));
                }
                *slot = Some(values);
            }
            Section::Branches => {
                rec.expect_len(4, "branch")?;
                model.branches.push(Branch {
                    from: rec.str(0).to_string(),
                    to: rec.str(1).to_string(),
                    length_mi: rec.length_mi(2)?,
                    config: rec.str(3).to_string(),
                });
            }
            Section::Regulators => {
                rec.expect_len(6, "regulator")?;
                let mut taps = [0; 3];
                for (k, tap) in taps.iter_mut().enumerate() {
                    *tap = rec.i32(3 + k)?;
                    if tap.abs() > 16 {
                        return Err(rec.err(3 + k, "tap position outside -16..=16"));
                    }
                }
                model.regulators.push(Regulator {
                    id: rec.str(0).to_string(),
                    from: rec.str(1).to_string(),
                    to: rec.str(2).to_string(),
                    taps,
                });
            }
            Section::Transformers => {
                rec.expect_len(7, "transformer")?;
                model.transformers.push(Transformer {
                    id: rec.str(0).to_string(),
                    kva: rec.f64(1)?,
                    kv_primary: rec.f64(2)?,
                    kv_secondary: rec.f64(3)?,
                    r_pct: rec.f64(4)?,
                    x_pct: rec.f64(5)?,
                    connection: rec.str(6).to_string(),
                });
            }
            Section::Capacitors => {
                rec.expect_len(4, "capacitor")?;
                model.capacitors.push(Capacitor {
                    node: rec.str(0).to_string(),
                    kvar: [rec.f64(1)?, rec.f64(2)?, rec.f64(3)?],
                });
            }
            Section::Loads => {
                let (site, offset) = match rec.str(0) {
                    "spot" => {
                        rec.expect_len(9, "spot load")?;
                        (LoadSite::Spot(rec.str(1).to_string()), 2)
                    }
                    "dist" => {
                        rec.expect_len(10, "distributed load")?;
                        (
                            LoadSite::Distributed {
                                from: rec.str(1).to_string(),
                                to: rec.str(2).to_string(),
                            },
                            3,
                        )
                    }
                    other => return Err(rec.err(0, format!("expected spot or dist, found `{other}`"))),
                };
                let (connection, model_kind) = Load::parse_model_code(rec.str(offset))
                    .ok_or_else(|| rec.err(offset, format!("unknown load model `{}`", rec.str(offset))))?;
                let mut kw = [0.0; 3];
                let mut kvar = [0.0; 3];
                for k in 0..3 {
                    kw[k] = rec.f64(offset + 1 + 2 * k)?;
                    kvar[k] = rec.f64(offset + 2 + 2 * k)?;
                }
                model.loads.push(Load {
                    site,
                    connection,
                    model: model_kind,
                    kw,
                    kvar,
                });
            }
            Section::Ders => {
                rec.expect_len(3, "der")?;
                let id = rec.i32(0)?;
                if id < 1 {
                    return Err(rec.err(0, "DER ids start at 1"));
                }
                model.ders.push(Der {
                    id: id as usize,
                    node: rec.str(1).to_string(),
                    phases: rec.phases(2)?,
                });
            }
        }
    }

    for (id, pending) in configs {
        let mut z = [[Complex64::default(); 3]; 3];
        let mut y = [[Complex64::default(); 3]; 3];
        for r in 0..3 {
            z[r] = pending.z[r].ok_or_else(|| FeederError::Syntax {
                line: pending.line,
                column: 1,
                message: format!("config {id} is missing impedance row {}", Phase::from_index(r).letter()),
            })?;
            if let Some(row) = pending.y[r] {
                y[r] = row;
            }
        }
        model.line_configs.push(LineConfig { id, z, y });
    }
    if model.substation.is_empty() {
        if let Some(first) = model.nodes.first() {
            model.substation = first.id.clone();
        }
    }
    model.validate()?;
    Ok(model)
}

fn fmt_complex(c: Complex64) -> String {
    if c.im == 0.0 {
        format!("{}", c.re)
    } else {
        format!("{}{:+}j", c.re, c.im)
    }
}

/// Writes a model back to the text format; `parse_feeder` of the result
/// yields an equal model.
pub fn serialize_feeder(model: &FeederModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[system]");
    if !model.name.is_empty() {
        let _ = writeln!(s, "name {}", model.name);
    }
    let _ = writeln!(s, "base_kva {}", model.base_kva);
    let _ = writeln!(s, "substation {}", model.substation);
    let _ = writeln!(s, "source_pu {}", model.source_pu);

    let _ = writeln!(s, "\n[nodes]");
    for n in &model.nodes {
        let _ = writeln!(s, "{} {} {}", n.id, n.kv_ll, n.phases);
    }
    let _ = writeln!(s, "\n[configs]");
    for c in &model.line_configs {
        for (kind, m) in [("z", &c.z), ("y", &c.y)] {
            for (r, row) in m.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{} {} {} {} {} {}",
                    c.id,
                    kind,
                    Phase::from_index(r).letter(),
                    fmt_complex(row[0]),
                    fmt_complex(row[1]),
                    fmt_complex(row[2])
                );
            }
        }
    }
    let _ = writeln!(s, "\n[branches]");
    for b in &model.branches {
        let _ = writeln!(s, "{} {} {} {}", b.from, b.to, b.length_mi, b.config);
    }
    let _ = writeln!(s, "\n[regulators]");
    for r in &model.regulators {
        let _ = writeln!(s, "{} {} {} {} {} {}", r.id, r.from, r.to, r.taps[0], r.taps[1], r.taps[2]);
    }
    let _ = writeln!(s, "\n[transformers]");
    for t in &model.transformers {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            t.id, t.kva, t.kv_primary, t.kv_secondary, t.r_pct, t.x_pct, t.connection
        );
    }
    let _ = writeln!(s, "\n[capacitors]");
    for c in &model.capacitors {
        let _ = writeln!(s, "{} {} {} {}", c.node, c.kvar[0], c.kvar[1], c.kvar[2]);
    }
    let _ = writeln!(s, "\n[loads]");
    for l in &model.loads {
        match &l.site {
            LoadSite::Spot(n) => {
                let _ = write!(s, "spot {n}");
            }
            LoadSite::Distributed { from, to } => {
                let _ = write!(s, "dist {from} {to}");
            }
        }
        let _ = write!(s, " {}", l.model_code());
        for k in 0..3 {
            let _ = write!(s, " {} {}", l.kw[k], l.kvar[k]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\n[ders]");
    for d in &model.ders {
        let _ = writeln!(s, "{} {} {}", d.id, d.node, d.phases);
    }
    s
}
