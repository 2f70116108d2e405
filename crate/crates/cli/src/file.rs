//! Scenario files: JSON documents describing one scenario.
//!
//! ```json
//! {
//!   "horizon": 1.0,
//!   "steps": 8,
//!   "delta_steps": 2,
//!   "lambda": 0.5,
//!   "driver": "0.2*y + 0.1*ey - 0.3*u",
//!   "form": "h",
//!   "obstacle": "0.1 - 0.5*w",
//!   "terminal": "max(0.1 - 0.5*w, w*(1 - h))",
//!   "scheme": "explicit"
//! }
//! ```
//!
//! Every problem found is reported, each with the JSON pointer of the
//! offending value.

use std::fmt;
use std::path::Path;

use rabsde_core::driver::{parse_expr, DriverForm, VarSet};
use rabsde_core::{Scenario, ScenarioError, Scheme};
use serde_json::{Map, Value};

use crate::json::{num, nums};

const KEYS: &[&str] = &[
    "horizon",
    "steps",
    "delta_steps",
    "lambda",
    "lambda_max",
    "driver",
    "form",
    "obstacle",
    "terminal",
    "scheme",
    "implicit_tol",
    "implicit_max_iter",
    "seed",
    "outputs",
    "oracle",
];

/// Report sections a file may request.
pub const OUTPUTS: &[&str] = &["summary", "validation", "stopping", "picard"];

#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

/// Parameters for the binomial put cross-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub rate: f64,
    pub strike: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub oracle: Option<OracleSpec>,
}

#[derive(Debug)]
pub enum LoadError {
    Io(std::io::Error),
    Invalid(Vec<FieldError>),
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Io(e) => write!(f, "{e}"),
            LoadError::Invalid(errors) => {
                write!(f, "invalid scenario:")?;
                for e in errors {
                    write!(f, "\n  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for LoadError {}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile, LoadError> {
    let bytes = std::fs::read(path).map_err(LoadError::Io)?;
    let text = String::from_utf8(bytes).map_err(|_| {
        LoadError::Invalid(vec![FieldError { pointer: String::new(), message: "file is not valid UTF-8".into() }])
    })?;
    parse_scenario(&text)
}

struct Collector {
    errors: Vec<FieldError>,
}

impl Collector {
    fn push(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(FieldError { pointer: format!("/{key}"), message: message.into() });
    }

    fn number(&mut self, doc: &Map<String, Value>, key: &str) -> Option<f64> {
        match doc.get(key) {
            None => None,
            Some(Value::Number(n)) => n.as_f64(),
            Some(_) => {
                self.push(key, "expected a number");
                None
            }
        }
    }

    fn integer(&mut self, doc: &Map<String, Value>, key: &str) -> Option<u64> {
        match doc.get(key) {
            None => None,
            Some(Value::Number(n)) => match n.as_u64() {
                Some(v) => Some(v),
                None => {
                    self.push(key, format!("expected a non-negative integer, found {n}"));
                    None
                }
            },
            Some(_) => {
                self.push(key, "expected a non-negative integer");
                None
            }
        }
    }

    fn string<'a>(&mut self, doc: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
        match doc.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.push(key, "expected a string");
                None
            }
        }
    }
}

/// Parse and validate a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, LoadError> {
    let invalid = |pointer: &str, message: String| {
        LoadError::Invalid(vec![FieldError { pointer: pointer.into(), message }])
    };
    let value: Value = serde_json::from_str(text).map_err(|e| invalid("", format!("not valid JSON: {e}")))?;
    let Value::Object(doc) = value else {
        return Err(invalid("", "expected a JSON object".into()));
    };
    let mut c = Collector { errors: Vec::new() };

    let mut unknown: Vec<&String> = doc.keys().filter(|k| !KEYS.contains(&k.as_str())).collect();
    unknown.sort();
    for k in unknown {
        c.push(k, "unknown key");
    }

    let horizon = c.number(&doc, "horizon");
    match horizon {
        None if !doc.contains_key("horizon") => c.push("horizon", "required"),
        Some(h) if !(h > 0.0 && h.is_finite()) => c.push("horizon", "must be positive and finite"),
        _ => {}
    }
    let steps = c.integer(&doc, "steps");
    match steps {
        None if !doc.contains_key("steps") => c.push("steps", "required"),
        Some(0) => c.push("steps", "must be at least 1"),
        _ => {}
    }
    let delta_steps = c.integer(&doc, "delta_steps").unwrap_or(0);

    let lambdas: Option<Vec<f64>> = match doc.get("lambda") {
        None => steps.map(|n| vec![0.0; n as usize]),
        Some(Value::Number(n)) => match (n.as_f64(), steps) {
            (Some(l), Some(n)) => Some(vec![l; n as usize]),
            _ => None,
        },
        Some(Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                match item.as_f64() {
                    Some(v) => out.push(v),
                    None => c.errors.push(FieldError { pointer: format!("/lambda/{i}"), message: "expected a number".into() }),
                }
            }
            if let Some(n) = steps {
                if items.len() != n as usize {
                    c.push("lambda", format!("expected {n} values, one per step, found {}", items.len()));
                }
            }
            Some(out)
        }
        Some(_) => {
            c.push("lambda", "expected a number or an array of numbers");
            None
        }
    };
    if let Some(ls) = &lambdas {
        if ls.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            c.push("lambda", "intensities must be finite and non-negative");
        }
    }
    let lambda_max = c.number(&doc, "lambda_max");

    let form = match c.string(&doc, "form") {
        None | Some("h") | Some("H") => DriverForm::H,
        Some("m") | Some("M") => DriverForm::M,
        Some(other) => {
            c.push("form", format!("expected \"h\" or \"m\", found {other:?}"));
            DriverForm::H
        }
    };
    let scheme = match c.string(&doc, "scheme") {
        None | Some("explicit") => Scheme::Explicit,
        Some("implicit") => Scheme::Implicit,
        Some(other) => {
            c.push("scheme", format!("expected \"explicit\" or \"implicit\", found {other:?}"));
            Scheme::Explicit
        }
    };
    let implicit_tol = c.number(&doc, "implicit_tol");
    let implicit_max_iter = c.integer(&doc, "implicit_max_iter");

    let mut exprs = Vec::new();
    for (key, default, vars) in [
        ("driver", Some("0"), VarSet::DRIVER),
        ("obstacle", Some("-1e9"), VarSet::OBSTACLE),
        ("terminal", None, VarSet::TERMINAL),
    ] {
        let text = match (c.string(&doc, key), default) {
            (Some(t), _) => t.to_string(),
            (None, Some(d)) if !doc.contains_key(key) => d.to_string(),
            (None, None) if !doc.contains_key(key) => {
                c.push(key, "required");
                continue;
            }
            _ => continue,
        };
        if let Err(e) = parse_expr(&text, vars) {
            c.push(key, e.to_string());
        }
        exprs.push((key, text));
    }

    let seed = c.integer(&doc, "seed");
    let mut outputs = Vec::new();
    match doc.get("outputs") {
        None => outputs.extend(["summary".to_string(), "validation".to_string()]),
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                match item.as_str() {
                    Some(s) if OUTPUTS.contains(&s) => outputs.push(s.to_string()),
                    _ => c.errors.push(FieldError {
                        pointer: format!("/outputs/{i}"),
                        message: format!("expected one of {OUTPUTS:?}"),
                    }),
                }
            }
        }
        Some(_) => c.push("outputs", "expected an array of strings"),
    }

    let oracle = match doc.get("oracle") {
        None => None,
        Some(Value::Object(o)) => {
            let field = |k: &str, c: &mut Collector| match o.get(k).and_then(Value::as_f64) {
                Some(v) => Some(v),
                None => {
                    c.errors.push(FieldError { pointer: format!("/oracle/{k}"), message: "expected a number".into() });
                    None
                }
            };
            match o.get("kind").and_then(Value::as_str) {
                Some("put") => {}
                _ => c.errors.push(FieldError { pointer: "/oracle/kind".into(), message: "expected \"put\"".into() }),
            }
            match (field("rate", &mut c), field("strike", &mut c)) {
                (Some(rate), Some(strike)) => Some(OracleSpec { rate, strike }),
                _ => None,
            }
        }
        Some(_) => {
            c.push("oracle", "expected an object");
            None
        }
    };

    if !c.errors.is_empty() {
        return Err(LoadError::Invalid(c.errors));
    }

    let (Some(horizon), Some(steps), Some(lambdas)) = (horizon, steps, lambdas) else {
        unreachable!("missing fields are reported above");
    };
    let mut builder = Scenario::builder(horizon, steps as usize)
        .lambdas(lambdas)
        .delta_steps(delta_steps as usize)
        .form(form)
        .scheme(scheme);
    if let Some(m) = lambda_max {
        builder = builder.lambda_max(m);
    }
    if implicit_tol.is_some() || implicit_max_iter.is_some() {
        builder = builder
            .implicit(implicit_tol.unwrap_or(1e-14), implicit_max_iter.map_or(200, |m| m as usize))
            .scheme(scheme);
    }
    for (key, text) in exprs {
        builder = match key {
            "driver" => builder.driver(text),
            "obstacle" => builder.obstacle(text),
            _ => builder.terminal(text),
        };
    }
    let scenario = builder.build().map_err(|e| {
        let pointer = match &e {
            ScenarioError::Lattice(_) => "/lambda",
            ScenarioError::Parse { field, .. } | ScenarioError::Eval { field, .. } => match *field {
                "driver" => "/driver",
                "obstacle" => "/obstacle",
                _ => "/terminal",
            },
            ScenarioError::TerminalBelowObstacle { .. } => "/terminal",
            ScenarioError::LagNotOnGrid { .. } => "/delta_steps",
            ScenarioError::BadImplicitOptions => "/implicit_tol",
        };
        invalid(pointer, e.to_string())
    })?;
    Ok(ScenarioFile { scenario, seed, outputs, oracle })
}

/// The document [`parse_scenario`] reads back into the same scenario.
pub fn scenario_to_json(file: &ScenarioFile) -> Value {
    let sc = &file.scenario;
    let lat = &sc.lattice;
    let mut m = Map::new();
    m.insert("horizon".into(), num(lat.horizon()));
    m.insert("steps".into(), Value::from(lat.n_steps() as u64));
    m.insert("delta_steps".into(), Value::from(sc.delta_steps as u64));
    m.insert("lambda".into(), nums(lat.intensity().values()));
    m.insert("lambda_max".into(), num(lat.intensity().lambda_max()));
    m.insert("driver".into(), Value::from(sc.driver.expr.source()));
    m.insert(
        "form".into(),
        Value::from(match sc.driver.form {
            DriverForm::H => "h",
            DriverForm::M => "m",
        }),
    );
    m.insert("obstacle".into(), Value::from(sc.obstacle.source()));
    m.insert("terminal".into(), Value::from(sc.terminal.source()));
    m.insert(
        "scheme".into(),
        Value::from(match sc.scheme {
            Scheme::Explicit => "explicit",
            Scheme::Implicit => "implicit",
        }),
    );
    m.insert("implicit_tol".into(), num(sc.implicit_tol));
    m.insert("implicit_max_iter".into(), Value::from(sc.implicit_max_iter as u64));
    if let Some(seed) = file.seed {
        m.insert("seed".into(), Value::from(seed));
    }
    m.insert("outputs".into(), Value::from(file.outputs.clone()));
    if let Some(o) = file.oracle {
        let mut om = Map::new();
        om.insert("kind".into(), Value::from("put"));
        om.insert("rate".into(), num(o.rate));
        om.insert("strike".into(), num(o.strike));
        m.insert("oracle".into(), Value::Object(om));
    }
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<FieldError> {
        match parse_scenario(text) {
            Err(LoadError::Invalid(e)) => e,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file() {
        let f = parse_scenario(r#"{"horizon": 1, "steps": 4, "driver": "0", "obstacle": "-1e9", "terminal": "w"}"#).unwrap();
        assert_eq!(f.scenario.driver.expr.source(), "0");
        assert_eq!(f.outputs, ["summary", "validation"]);
    }

    #[test]
    fn fractional_lag_is_a_schema_error() {
        let e = errors(r#"{"horizon": 1, "steps": 4, "delta_steps": 1.5, "terminal": "w"}"#);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].pointer, "/delta_steps");
    }

    #[test]
    fn terminal_below_obstacle() {
        let e = errors(r#"{"horizon": 1, "steps": 4, "obstacle": "w+1", "terminal": "w"}"#);
        assert_eq!(e[0].pointer, "/terminal");
    }

    #[test]
    fn all_errors_reported_together() {
        let e = errors(r#"{"steps": 0, "driver": "y +", "obstacle": "z", "lambda": [1, "x"], "colour": 3}"#);
        let pointers: Vec<&str> = e.iter().map(|e| e.pointer.as_str()).collect();
        for p in ["/colour", "/horizon", "/steps", "/driver", "/obstacle", "/terminal", "/lambda/1"] {
            assert!(pointers.contains(&p), "{p} missing from {pointers:?}");
        }
    }

    #[test]
    fn round_trip() {
        let text = r#"{"horizon": 2, "steps": 4, "delta_steps": 1, "lambda": [0.1, 0.2, 0.3, 0.4],
            "lambda_max": 1, "driver": "0.2*y - u", "form": "m", "obstacle": "-w", "terminal": "max(w, -w)",
            "scheme": "implicit", "implicit_tol": 1e-13, "seed": 9, "outputs": ["stopping"],
            "oracle": {"kind": "put", "rate": 0.1, "strike": 1}}"#;
        let f = parse_scenario(text).unwrap();
        let again = parse_scenario(&crate::json::to_string(&scenario_to_json(&f))).unwrap();
        assert_eq!(f, again);
    }
}
