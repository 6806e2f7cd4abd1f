//! Flat SPICE-subset netlists.
//!
//! Supported cards (one per line, case-insensitive):
//!
//! ```text
//! * comment
//! R1 a b 1k          resistor, capacitor (C), inductor (L), current source (I)
//! M1 d g s b NMOS 1u MOS transistor with a single width-like parameter
//! Vdd vdd 0 1.0      voltage supply; marks `vdd` as a power net
//! ```
//!
//! Values take the suffixes `f p n u m k meg g`. Subcircuits, models and
//! control cards are rejected.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

/// Canonical name of the ground net. `gnd` is accepted as an alias.
pub const GROUND: &str = "0";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetlistError {
    #[error("line {line}: {reason}")]
    SyntaxError { line: usize, reason: String },
    #[error("duplicate device name `{0}`")]
    DuplicateDevice(String),
    #[error("device `{0}` has a non-positive parameter")]
    NonPositiveParam(String),
    #[error("unknown transistor model `{0}` (expected NMOS or PMOS)")]
    UnknownModel(String),
    #[error("supply `{0}`: the minus terminal must be ground")]
    SupplyNotGrounded(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    Resistor,
    Capacitor,
    Inductor,
    CurrentSource,
    Nmos,
    Pmos,
    VoltageSupply,
}

impl DeviceKind {
    pub fn is_mos(self) -> bool {
        matches!(self, DeviceKind::Nmos | DeviceKind::Pmos)
    }
}

/// Role-tagged terminal nets, as indices into [`Netlist::nets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminals {
    Two { a: usize, b: usize },
    Mos { drain: usize, gate: usize, source: usize, bulk: usize },
    Supply { plus: usize, minus: usize },
}

impl Terminals {
    pub fn nets(&self) -> Vec<usize> {
        match *self {
            Terminals::Two { a, b } => vec![a, b],
            Terminals::Mos { drain, gate, source, bulk } => vec![drain, gate, source, bulk],
            Terminals::Supply { plus, minus } => vec![plus, minus],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub name: String,
    pub kind: DeviceKind,
    pub terminals: Terminals,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    pub name: String,
    /// Net names in first-appearance order.
    pub nets: Vec<String>,
    pub devices: Vec<Device>,
}

impl Netlist {
    pub fn net_index(&self, name: &str) -> Option<usize> {
        self.nets.iter().position(|n| n == name)
    }

    pub fn ground(&self) -> Option<usize> {
        self.net_index(GROUND)
    }

    /// Nets driven by the plus terminal of a supply with a positive voltage.
    pub fn power_nets(&self) -> BTreeSet<usize> {
        self.devices
            .iter()
            .filter_map(|d| match d.terminals {
                Terminals::Supply { plus, .. } if d.param > 0.0 => Some(plus),
                _ => None,
            })
            .collect()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Parses a netlist. The netlist name defaults to `netlist`; use
/// [`Netlist::with_name`] to set it.
pub fn parse_netlist(text: &str) -> Result<Netlist, NetlistError> {
    let mut nets: Vec<String> = Vec::new();
    let mut net_ids: HashMap<String, usize> = HashMap::new();
    let mut devices: Vec<Device> = Vec::new();
    let mut seen = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('*') {
            continue;
        }
        let syntax = |reason: &str| NetlistError::SyntaxError {
            line: line_no,
            reason: reason.to_string(),
        };
        let tokens: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        let name = tokens[0].clone();
        if name.starts_with('.') {
            return Err(syntax(&format!("control card `{name}` is not supported")));
        }
        let kind = match name.as_bytes()[0] {
            b'r' => DeviceKind::Resistor,
            b'c' => DeviceKind::Capacitor,
            b'l' => DeviceKind::Inductor,
            b'i' => DeviceKind::CurrentSource,
            b'm' => DeviceKind::Nmos,
            b'v' => DeviceKind::VoltageSupply,
            b'x' => return Err(syntax("subcircuit instances are not supported")),
            _ => return Err(syntax(&format!("unknown card `{name}`"))),
        };

        let mut net = |token: &str| -> usize {
            let token = if token == "gnd" { GROUND } else { token };
            *net_ids.entry(token.to_string()).or_insert_with(|| {
                nets.push(token.to_string());
                nets.len() - 1
            })
        };

        let (terminals, kind, value_token) = if kind == DeviceKind::Nmos {
            if tokens.len() != 7 {
                return Err(syntax("transistor card expects `Mname nd ng ns nb NMOS|PMOS value`"));
            }
            let kind = match tokens[5].as_str() {
                "nmos" => DeviceKind::Nmos,
                "pmos" => DeviceKind::Pmos,
                other => return Err(NetlistError::UnknownModel(other.to_string())),
            };
            let terminals = Terminals::Mos {
                drain: net(&tokens[1]),
                gate: net(&tokens[2]),
                source: net(&tokens[3]),
                bulk: net(&tokens[4]),
            };
            (terminals, kind, &tokens[6])
        } else {
            if tokens.len() != 4 {
                return Err(syntax("two-terminal card expects `name n1 n2 value`"));
            }
            let (first, second) = (net(&tokens[1]), net(&tokens[2]));
            let terminals = if kind == DeviceKind::VoltageSupply {
                Terminals::Supply { plus: first, minus: second }
            } else {
                Terminals::Two { a: first, b: second }
            };
            (terminals, kind, &tokens[3])
        };

        let param = parse_value(value_token)
            .ok_or_else(|| syntax(&format!("malformed value `{value_token}`")))?;
        let valid = match kind {
            DeviceKind::VoltageSupply => param >= 0.0,
            _ => param > 0.0,
        };
        if !valid || !param.is_finite() {
            return Err(NetlistError::NonPositiveParam(name));
        }
        if !seen.insert(name.clone()) {
            return Err(NetlistError::DuplicateDevice(name));
        }
        devices.push(Device { name, kind, terminals, param });
    }

    for d in &devices {
        if let Terminals::Supply { minus, .. } = d.terminals {
            if nets[minus] != GROUND {
                return Err(NetlistError::SupplyNotGrounded(d.name.clone()));
            }
        }
    }

    Ok(Netlist { name: "netlist".to_string(), nets, devices })
}

const SUFFIXES: [(&str, i32); 8] = [
    ("meg", 6),
    ("f", -15),
    ("p", -12),
    ("n", -9),
    ("u", -6),
    ("m", -3),
    ("k", 3),
    ("g", 9),
];

/// Parses a numeric value with an optional SI suffix. Expects lower case.
pub fn parse_value(token: &str) -> Option<f64> {
    for (suffix, exponent) in SUFFIXES {
        if let Some(mantissa) = token.strip_suffix(suffix) {
            mantissa.parse::<f64>().ok()?;
            if mantissa.contains('e') {
                return mantissa.parse::<f64>().ok().map(|v| v * 10f64.powi(exponent));
            }
            // Re-reading as one decimal keeps `3n` exactly equal to `3e-9`.
            return format!("{mantissa}e{exponent}").parse().ok();
        }
    }
    token.parse::<f64>().ok()
}

/// Canonical serialization: one card per line, lower case, base-unit values.
impl fmt::Display for Netlist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.devices {
            let n = |i: usize| self.nets[i].as_str();
            match d.terminals {
                Terminals::Two { a, b } | Terminals::Supply { plus: a, minus: b } => {
                    writeln!(f, "{} {} {} {:?}", d.name, n(a), n(b), d.param)?
                }
                Terminals::Mos { drain, gate, source, bulk } => {
                    let model = if d.kind == DeviceKind::Nmos { "nmos" } else { "pmos" };
                    writeln!(
                        f,
                        "{} {} {} {} {} {} {:?}",
                        d.name,
                        n(drain),
                        n(gate),
                        n(source),
                        n(bulk),
                        model,
                        d.param
                    )?
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_resistor_with_suffix() {
        let n = parse_netlist("R1 a 0 1k").unwrap();
        assert_eq!(n.nets, vec!["a", "0"]);
        assert_eq!(n.devices.len(), 1);
        assert_eq!(n.devices[0].kind, DeviceKind::Resistor);
        assert_eq!(n.devices[0].param, 1000.0);
    }

    #[test]
    fn nmos_and_supply() {
        let n = parse_netlist("M1 out in 0 0 NMOS 1u\nVdd vdd 0 1.0").unwrap();
        assert_eq!(n.devices.len(), 2);
        let m = &n.devices[0];
        assert_eq!(m.kind, DeviceKind::Nmos);
        assert_eq!(m.param, 1e-6);
        let Terminals::Mos { drain, gate, source, bulk } = m.terminals else {
            panic!("expected MOS terminals");
        };
        assert_eq!(
            [drain, gate, source, bulk].map(|i| n.nets[i].as_str()),
            ["out", "in", "0", "0"]
        );
        assert_eq!(n.devices[1].kind, DeviceKind::VoltageSupply);
        assert_eq!(n.power_nets().len(), 1);
    }

    #[test]
    fn negative_param_is_rejected() {
        assert_eq!(
            parse_netlist("R1 a 0 -5"),
            Err(NetlistError::NonPositiveParam("r1".into()))
        );
    }

    #[test]
    fn zero_volt_supply_is_allowed() {
        let n = parse_netlist("R1 a 0 1\nV1 a 0 0").unwrap();
        assert!(n.power_nets().is_empty());
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            parse_netlist("R1 a 0 1\nr1 b 0 1"),
            Err(NetlistError::DuplicateDevice(n)) if n == "r1"
        ));
        assert!(matches!(
            parse_netlist("M1 d g s b NFET 1u"),
            Err(NetlistError::UnknownModel(m)) if m == "nfet"
        ));
        assert!(matches!(
            parse_netlist("* c\nR1 a 0"),
            Err(NetlistError::SyntaxError { line: 2, .. })
        ));
        assert!(matches!(
            parse_netlist(".subckt foo a b"),
            Err(NetlistError::SyntaxError { line: 1, .. })
        ));
        assert!(matches!(
            parse_netlist("X1 a b foo"),
            Err(NetlistError::SyntaxError { .. })
        ));
        assert!(matches!(
            parse_netlist("R1 a 0 1kohm"),
            Err(NetlistError::SyntaxError { .. })
        ));
        assert!(matches!(
            parse_netlist("V1 a b 1"),
            Err(NetlistError::SupplyNotGrounded(_))
        ));
    }

    #[test]
    fn suffix_table() {
        let cases = [
            ("1f", 1e-15),
            ("2p", 2e-12),
            ("3n", 3e-9),
            ("4u", 4e-6),
            ("5m", 5e-3),
            ("6k", 6e3),
            ("7meg", 7e6),
            ("8g", 8e9),
            ("2.5", 2.5),
            ("1e-3", 1e-3),
        ];
        for (token, expected) in cases {
            assert_eq!(parse_value(token), Some(expected), "{token}");
        }
    }

    #[test]
    fn case_gnd_and_crlf_normalization() {
        let n = parse_netlist("RLOAD OUT GND 10K\r\nC1 out 0 1p\r\n").unwrap();
        assert_eq!(n.nets, vec!["out", "0"]);
        assert_eq!(n.devices[0].name, "rload");
        assert_eq!(n.devices[1].terminals, Terminals::Two { a: 0, b: 1 });
    }

    #[test]
    fn canonical_form_reparses() {
        let text = "Vdd VDD 0 1.2\nM1 out in 0 0 nmos 90n\nM2 out in vdd vdd PMOS 180n\nC1 out 0 10f\n";
        let n = parse_netlist(text).unwrap();
        let again = parse_netlist(&n.to_string()).unwrap();
        assert_eq!(n, again);
    }
}
