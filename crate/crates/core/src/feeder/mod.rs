//! Feeder descriptions: data model, text format, topology checks and the
//! built-in modified IEEE 34-node fixture.
//!
//! A [`FeederModel`] is produced by [`parse_feeder`] (or
//! [`builtin_modified_ieee34`]) and is never mutated by the rest of the
//! crate; solvers and environments borrow it.

mod parse;
mod topology;

pub use parse::{parse_feeder, serialize_feeder};
pub use topology::{validate_radial, Topology};

use num_complex::Complex64;
use std::fmt;
use thiserror::Error;

/// Feet per mile, used when lengths are given with an `ft` suffix.
pub const FEET_PER_MILE: f64 = 5280.0;

/// Per-step voltage change of a 32-step (±10%) regulator.
pub const REGULATOR_STEP: f64 = 0.00625;

/// Identifier accepted wherever a feeder path is expected.
pub const BUILTIN_IEEE34: &str = "builtin:ieee34-modified";

const IEEE34_TEXT: &str = include_str!("../../data/ieee34_modified.feeder");
const IEEE34_PUBLISHED: &str = include_str!("../../data/ieee34_published_voltages.csv");

pub type Matrix3 = [[Complex64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("branch {branch}: unknown config-id `{config}`")]
    UnknownConfig { branch: String, config: String },
    #[error("{element}: unknown node `{node}`")]
    UnknownNode { element: String, node: String },
    #[error("non-radial topology at {element}: {reason}")]
    NonRadial { element: String, reason: String },
    #[error("disconnected component: node {node} is not reachable from the substation")]
    Disconnected { node: String },
    #[error("phase mismatch at {element}: {detail}")]
    PhaseMismatch { element: String, detail: String },
    #[error("invalid {element}: {message}")]
    Invalid { element: String, message: String },
}

/// One of the three phase conductors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }

    pub fn letter(self) -> char {
        ['a', 'b', 'c'][self.index()]
    }
}

/// Subset of {a, b, c} stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn single(p: Phase) -> Self {
        PhaseSet(1 << p.index())
    }

    pub fn from_mask(mask: [bool; 3]) -> Self {
        let mut bits = 0;
        for (i, on) in mask.iter().enumerate() {
            if *on {
                bits |= 1 << i;
            }
        }
        PhaseSet(bits)
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn has(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 | other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Parses `abc`, `a`, `bc`, ... Letters may appear in any order but not twice.
    pub fn parse(text: &str) -> Option<PhaseSet> {
        let mut bits = 0u8;
        for ch in text.chars() {
            let bit = match ch.to_ascii_lowercase() {
                'a' => 1,
                'b' => 2,
                'c' => 4,
                _ => return None,
            };
            if bits & bit != 0 {
                return None;
            }
            bits |= bit;
        }
        (bits != 0).then_some(PhaseSet(bits))
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    /// Line-to-line base voltage.
    pub kv_ll: f64,
    pub phases: PhaseSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: String,
    pub to: String,
    pub length_mi: f64,
    /// Resolves to a line configuration or a transformer id.
    pub config: String,
}

impl Branch {
    pub fn label(&self) -> String {
        format!("{}-{}", self.from, self.to)
    }
}

/// Phase impedance (ohm/mile) and shunt admittance (uS/mile) of a line type.
/// Absent phases carry zero rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LineConfig {
    pub id: String,
    pub z: Matrix3,
    pub y: Matrix3,
}

impl LineConfig {
    /// Phases with a non-zero self impedance.
    pub fn phases(&self) -> PhaseSet {
        PhaseSet::from_mask([0, 1, 2].map(|i| self.z[i][i].norm() > 0.0))
    }
}

/// Step-voltage regulator with frozen taps, located at the from-node of its branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Regulator {
    pub id: String,
    pub from: String,
    pub to: String,
    pub taps: [i32; 3],
}

impl Regulator {
    pub fn ratios(&self) -> [f64; 3] {
        self.taps.map(|t| 1.0 + REGULATOR_STEP * t as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub id: String,
    pub kva: f64,
    pub kv_primary: f64,
    pub kv_secondary: f64,
    pub r_pct: f64,
    pub x_pct: f64,
    pub connection: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capacitor {
    pub node: String,
    pub kvar: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    Wye,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadModel {
    ConstantPower,
    ConstantCurrent,
    ConstantImpedance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadSite {
    Spot(String),
    /// Uniformly distributed along a branch; split half to each end node.
    Distributed {
        from: String,
        to: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub site: LoadSite,
    pub connection: Connection,
    pub model: LoadModel,
    /// Per phase (wye) or per delta branch ab/bc/ca (delta).
    pub kw: [f64; 3],
    pub kvar: [f64; 3],
}

impl Load {
    pub fn model_code(&self) -> &'static str {
        match (self.connection, self.model) {
            (Connection::Wye, LoadModel::ConstantPower) => "Y-PQ",
            (Connection::Wye, LoadModel::ConstantCurrent) => "Y-I",
            (Connection::Wye, LoadModel::ConstantImpedance) => "Y-Z",
            (Connection::Delta, LoadModel::ConstantPower) => "D-PQ",
            (Connection::Delta, LoadModel::ConstantCurrent) => "D-I",
            (Connection::Delta, LoadModel::ConstantImpedance) => "D-Z",
        }
    }

    pub fn parse_model_code(code: &str) -> Option<(Connection, LoadModel)> {
        let (conn, model) = code.split_once('-')?;
        let conn = match conn.to_ascii_uppercase().as_str() {
            "Y" => Connection::Wye,
            "D" => Connection::Delta,
            _ => return None,
        };
        let model = match model.to_ascii_uppercase().as_str() {
            "PQ" => LoadModel::ConstantPower,
            "I" => LoadModel::ConstantCurrent,
            "Z" => LoadModel::ConstantImpedance,
            _ => return None,
        };
        Some((conn, model))
    }

    /// Phases the load actually touches (a delta entry touches both of its phases).
    pub fn phases(&self) -> PhaseSet {
        let mut mask = [false; 3];
        for k in 0..3 {
            if self.kw[k] != 0.0 || self.kvar[k] != 0.0 {
                match self.connection {
                    Connection::Wye => mask[k] = true,
                    Connection::Delta => {
                        mask[k] = true;
                        mask[(k + 1) % 3] = true;
                    }
                }
            }
        }
        PhaseSet::from_mask(mask)
    }

    pub fn total_kw(&self) -> f64 {
        self.kw.iter().sum()
    }
}

/// A DER site. Ids run 1..=n in allocation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Der {
    pub id: usize,
    pub node: String,
    pub phases: PhaseSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub name: String,
    /// System base (three-phase kVA) for per-unit conversion.
    pub base_kva: f64,
    pub substation: String,
    /// Source voltage magnitude at the substation, per unit.
    pub source_pu: f64,
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    pub line_configs: Vec<LineConfig>,
    pub regulators: Vec<Regulator>,
    pub transformers: Vec<Transformer>,
    pub capacitors: Vec<Capacitor>,
    pub loads: Vec<Load>,
    pub ders: Vec<Der>,
}

impl FeederModel {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn line_config(&self, id: &str) -> Option<&LineConfig> {
        self.line_configs.iter().find(|c| c.id == id)
    }

    pub fn transformer(&self, id: &str) -> Option<&Transformer> {
        self.transformers.iter().find(|t| t.id == id)
    }

    pub fn regulator_on(&self, from: &str, to: &str) -> Option<&Regulator> {
        self.regulators.iter().find(|r| r.from == from && r.to == to)
    }

    pub fn der_count(&self) -> usize {
        self.ders.len()
    }

    /// Same feeder with every load removed.
    pub fn without_loads(&self) -> FeederModel {
        FeederModel {
            loads: Vec::new(),
            ..self.clone()
        }
    }

    /// Runs every structural check and returns the radial ordering.
    pub fn validate(&self) -> Result<Topology, FeederError> {
        topology::check_references(self)?;
        let topo = validate_radial(self)?;
        topology::check_phases(self, &topo)?;
        Ok(topo)
    }
}

/// The IEEE 34-node feeder with DERs 1-3 (three-phase) at 844, 890, 834 and
/// DER 4 on phase a of 822.
pub fn builtin_modified_ieee34() -> FeederModel {
    parse_feeder(IEEE34_TEXT).expect("embedded IEEE 34-node fixture is valid")
}

pub fn builtin_ieee34_text() -> &'static str {
    IEEE34_TEXT
}

/// A published node-phase voltage for the IEEE 34-node base case.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedVoltage {
    pub node: String,
    pub phase: Phase,
    pub magnitude_pu: f64,
    pub angle_deg: f64,
}

/// Published base-case solution for the unmodified IEEE 34-node feeder.
pub fn ieee34_published_voltages() -> Vec<PublishedVoltage> {
    IEEE34_PUBLISHED
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let phase = match f[1] {
                "a" => Phase::A,
                "b" => Phase::B,
                _ => Phase::C,
            };
            PublishedVoltage {
                node: f[0].to_string(),
                phase,
                magnitude_pu: f[2].parse().expect("published magnitude"),
                angle_deg: f[3].parse().expect("published angle"),
            }
        })
        .collect()
}

/// Loads a feeder from a path, or the built-in fixture for [`BUILTIN_IEEE34`].
pub fn load_feeder(path_or_builtin: &str) -> Result<FeederModel, LoadFeederError> {
    if path_or_builtin == BUILTIN_IEEE34 {
        return Ok(builtin_modified_ieee34());
    }
    let text = std::fs::read_to_string(path_or_builtin).map_err(|source| LoadFeederError::Io {
        path: path_or_builtin.to_string(),
        source,
    })?;
    Ok(parse_feeder(&text)?)
}

#[derive(Debug, Error)]
pub enum LoadFeederError {
    #[error("cannot read feeder file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] FeederError),
}
