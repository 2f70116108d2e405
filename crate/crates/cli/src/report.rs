//! Run reports and node dumps.

use std::io::Write;

use rabsde_core::{Scenario, Solution};
use serde_json::{Map, Value};

use crate::json::{float_text, num};

/// A numerical check with the tolerance it was held to.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// `"<="` when `value` must not exceed `tolerance`, `">="` for a lower bound.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, relation: "<=", pass: value <= tolerance }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, relation: ">=", pass: value >= tolerance }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            relation: ">=",
            pass: ok,
        }
    }

    fn to_json(&self) -> Value {
        crate::json::obj([
            ("name", Value::from(self.name.clone())),
            ("value", num(self.value)),
            ("tolerance", num(self.tolerance)),
            ("relation", Value::from(self.relation)),
            ("pass", Value::from(self.pass)),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub command: String,
    pub sections: Map<String, Value>,
    pub checks: Vec<Check>,
    /// Wall-clock seconds per phase; only filled on request since it breaks
    /// byte-for-byte reproducibility.
    pub timing: Vec<(String, f64)>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Self::default() }
    }

    pub fn section(&mut self, name: &str, value: Value) {
        self.sections.insert(name.into(), value);
    }

    pub fn check(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Value {
        let mut m = self.sections.clone();
        m.insert("command".into(), Value::from(self.command.clone()));
        m.insert("checks".into(), Value::Array(self.checks.iter().map(Check::to_json).collect()));
        m.insert("passed".into(), Value::from(self.passed()));
        if !self.timing.is_empty() {
            let t: Map<String, Value> = self.timing.iter().map(|(k, v)| (k.clone(), num(*v))).collect();
            m.insert("timing".into(), Value::Object(t));
        }
        Value::Object(m)
    }

    pub fn to_text(&self) -> String {
        crate::json::to_string(&self.to_json())
    }
}

pub const CSV_HEADER: [&str; 9] = ["step", "up_count", "default_step", "Y", "Z", "U", "K", "psi", "S"];

/// One row per lattice node, in step then index order. `K` holds the
/// increment `ΔK` at the node, `default_step` is `-1` for alive nodes.
pub fn write_nodes<W: Write>(solution: &Solution, scenario: &Scenario, out: W) -> csv::Result<()> {
    let lat = &scenario.lattice;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for k in 0..=lat.n_steps() {
        let fields = [&solution.y, &solution.z, &solution.u, &solution.dk, &solution.psi, &solution.obstacle];
        let cols: Vec<&[f64]> = fields.iter().map(|f| f.step(k).unwrap_or(&[])).collect();
        for (i, node) in lat.nodes(k).enumerate() {
            let mut row = vec![
                k.to_string(),
                node.up.to_string(),
                node.default_step.map_or("-1".to_string(), |d| d.to_string()),
            ];
            row.extend(cols.iter().map(|c| c.get(i).map_or("NaN".to_string(), |&x| float_text(x))));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
