//! Bundled desk-scale circuit corpus, Task-1 labels, and netlist directory
//! loading.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, CircuitGraph, GraphError};
use crate::netlist::{parse_netlist, NetlistError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Netlist { path: String, source: NetlistError },
    #[error("{path}: {source}")]
    Graph { path: String, source: GraphError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed label file: {0}")]
    Labels(String),
    #[error("circuit `{0}` has an empty label set")]
    EmptyLabels(String),
    #[error("no netlists found in {0}")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Analog,
    Digital,
    DelayLine,
    Amplifier,
    LogicGate,
    Oscillator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledCircuit {
    pub name: String,
    pub netlist: String,
    pub labels: BTreeSet<Label>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub circuits: Vec<LabeledCircuit>,
}

impl LabelFile {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: LabelFile = serde_json::from_str(text).map_err(|e| CorpusError::Labels(e.to_string()))?;
        if let Some(c) = file.circuits.iter().find(|c| c.labels.is_empty()) {
            return Err(CorpusError::EmptyLabels(c.name.clone()));
        }
        Ok(file)
    }
}

const BUNDLED: [(&str, &str); 12] = [
    ("inverter", include_str!("../corpus/inverter.sp")),
    ("nand2", include_str!("../corpus/nand2.sp")),
    ("nor2", include_str!("../corpus/nor2.sp")),
    ("ring_osc3", include_str!("../corpus/ring_osc3.sp")),
    ("delay_chain", include_str!("../corpus/delay_chain.sp")),
    ("rc_lowpass", include_str!("../corpus/rc_lowpass.sp")),
    ("rl_highpass", include_str!("../corpus/rl_highpass.sp")),
    ("rlc_tank", include_str!("../corpus/rlc_tank.sp")),
    ("divider", include_str!("../corpus/divider.sp")),
    ("current_mirror", include_str!("../corpus/current_mirror.sp")),
    ("diff_pair", include_str!("../corpus/diff_pair.sp")),
    ("opamp2", include_str!("../corpus/opamp2.sp")),
];

const BUNDLED_LABELS: &str = include_str!("../corpus/task1.json");

/// Origins used for the relation-separation experiment.
pub const PRETRAIN_ORIGINS: [&str; 8] =
    ["inverter", "nand2", "ring_osc3", "delay_chain", "rc_lowpass", "rlc_tank", "current_mirror", "opamp2"];

fn graph_from_text(name: &str, text: &str) -> Result<CircuitGraph, CorpusError> {
    let netlist = parse_netlist(text).map_err(|source| CorpusError::Netlist { path: name.into(), source })?;
    build_graph(&netlist.with_name(name)).map_err(|source| CorpusError::Graph { path: name.into(), source })
}

/// Names and netlist text of the bundled circuits.
pub fn bundled_netlists() -> &'static [(&'static str, &'static str)] {
    &BUNDLED
}

/// Graph of one bundled circuit.
pub fn bundled_graph(name: &str) -> Option<CircuitGraph> {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name)?;
    Some(graph_from_text(name, text).expect("bundled netlists are valid"))
}

/// Graphs of all bundled circuits, in a fixed order.
pub fn bundled_graphs() -> Vec<CircuitGraph> {
    BUNDLED.iter().map(|(n, t)| graph_from_text(n, t).expect("bundled netlists are valid")).collect()
}

/// Task-1 labels and split of the bundled circuits.
pub fn bundled_labels() -> LabelFile {
    LabelFile::from_json(BUNDLED_LABELS).expect("bundled label file is valid")
}

fn io(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

/// Every `*.sp` netlist under `dir`, sorted by file name; graphs are named by
/// file stem.
pub fn load_netlist_dir(dir: &Path) -> Result<Vec<CircuitGraph>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir).map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "sp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CorpusError::Empty(dir.display().to_string()));
    }
    paths.iter().map(|p| load_netlist(p)).collect()
}

/// One netlist file as a graph named by its file stem.
pub fn load_netlist(path: &Path) -> Result<CircuitGraph, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let netlist =
        parse_netlist(&text).map_err(|source| CorpusError::Netlist { path: path.display().to_string(), source })?;
    build_graph(&netlist.with_name(name)).map_err(|source| CorpusError::Graph { path: path.display().to_string(), source })
}

/// A label file plus the graphs it names, resolved relative to the file.
pub fn load_labeled(path: &Path) -> Result<(LabelFile, Vec<CircuitGraph>), CorpusError> {
    let file = LabelFile::from_json(&fs::read_to_string(path).map_err(|e| io(path, e))?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let graphs = file
        .circuits
        .iter()
        .map(|c| {
            let mut g = load_netlist(&base.join(&c.netlist))?;
            g.name = c.name.clone();
            g.origin = c.name.clone();
            Ok(g)
        })
        .collect::<Result<_, CorpusError>>()?;
    Ok((file, graphs))
}
