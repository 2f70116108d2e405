//! Driver expressions: a small arithmetic language over the solution
//! variables, evaluated in IEEE double precision.
//!
//! Variables: `t`, `w`, `h`, `y`, `z`, `ey` (anticipated `E[Y_{t+δ}|G_t]`),
//! `ez` (anticipated `E[Z_{t+δ}|G_t]`), `u`, and `tau` (`τ ∧ T`, terminal
//! payoffs only). Functions: `min`, `max` (two or more arguments), `exp`,
//! `abs`. See `docs/grammar.md` for the grammar.

mod lipschitz;
mod parse;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use lipschitz::{
    check_m_form_lipschitz, estimate_lipschitz, LipschitzError, LipschitzEstimate, MFormBound, SampleGrid,
};
pub use parse::ParseError;
pub(crate) use lipschitz::{describe, eval_checked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Var {
    T,
    W,
    H,
    Y,
    Z,
    Ey,
    Ez,
    U,
    Tau,
}

impl Var {
    pub const ALL: [Var; 9] = [Var::T, Var::W, Var::H, Var::Y, Var::Z, Var::Ey, Var::Ez, Var::U, Var::Tau];

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::W => "w",
            Var::H => "h",
            Var::Y => "y",
            Var::Z => "z",
            Var::Ey => "ey",
            Var::Ez => "ez",
            Var::U => "u",
            Var::Tau => "tau",
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        Var::ALL.into_iter().find(|v| v.name() == name)
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

/// Set of variables, as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct VarSet(u16);

impl VarSet {
    pub const EMPTY: VarSet = VarSet(0);

    /// Drivers: time, state and the solution variables.
    pub const DRIVER: VarSet = VarSet::of(&[Var::T, Var::W, Var::H, Var::Y, Var::Z, Var::Ey, Var::Ez, Var::U]);
    /// Obstacles: functions of `(t, w, h)`.
    pub const OBSTACLE: VarSet = VarSet::of(&[Var::T, Var::W, Var::H]);
    /// Terminal payoffs: `(t, w, h, tau)` with `t = T`.
    pub const TERMINAL: VarSet = VarSet::of(&[Var::T, Var::W, Var::H, Var::Tau]);

    pub const fn of(vars: &[Var]) -> VarSet {
        let mut bits = 0u16;
        let mut i = 0;
        while i < vars.len() {
            bits |= 1 << (vars[i] as u16);
            i += 1;
        }
        VarSet(bits)
    }

    pub fn contains(self, v: Var) -> bool {
        self.0 & v.bit() != 0
    }

    pub fn insert(&mut self, v: Var) {
        self.0 |= v.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = Var> {
        Var::ALL.into_iter().filter(move |v| self.contains(*v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Exp,
    Abs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("variable `{0}` is not bound")]
    Unbound(&'static str),
    #[error("division by zero")]
    DivisionByZero,
}

/// Variable assignment for evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    vals: [Option<f64>; 9],
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.vals[var as usize] = Some(value);
        self
    }

    pub fn set(&mut self, var: Var, value: f64) {
        self.vals[var as usize] = Some(value);
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.vals[var as usize]
    }
}

impl Expr {
    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => env.get(*v).ok_or(EvalError::Unbound(v.name()))?,
            Expr::Neg(e) => -e.eval(env)?,
            Expr::Bin(op, a, b) => {
                let x = a.eval(env)?;
                let y = b.eval(env)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        x / y
                    }
                }
            }
            Expr::Call(f, args) => match f {
                Func::Exp => args[0].eval(env)?.exp(),
                Func::Abs => args[0].eval(env)?.abs(),
                Func::Min | Func::Max => {
                    let mut acc = args[0].eval(env)?;
                    for a in &args[1..] {
                        let v = a.eval(env)?;
                        acc = if *f == Func::Min { acc.min(v) } else { acc.max(v) };
                    }
                    acc
                }
            },
        })
    }
}

/// Canonical, fully parenthesized form; re-parses to an equivalent tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => write!(f, "(-{:?})", -c),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({a} {sym} {b})")
            }
            Expr::Call(func, args) => {
                let name = match func {
                    Func::Min => "min",
                    Func::Max => "max",
                    Func::Exp => "exp",
                    Func::Abs => "abs",
                };
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// A parsed expression together with its source text and free variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverExpr {
    ast: Expr,
    source: String,
    vars: VarSet,
}

impl DriverExpr {
    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn vars(&self) -> VarSet {
        self.vars
    }

    pub fn uses(&self, var: Var) -> bool {
        self.vars.contains(var)
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        self.ast.eval(env)
    }

    pub fn canonical(&self) -> String {
        self.ast.to_string()
    }
}

impl fmt::Display for DriverExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Parse a driver expression over the driver variable set.
pub fn parse_driver(text: &str) -> Result<DriverExpr, ParseError> {
    parse_expr(text, VarSet::DRIVER)
}

/// Parse an expression restricted to `allowed` variables.
pub fn parse_expr(text: &str, allowed: VarSet) -> Result<DriverExpr, ParseError> {
    let (ast, vars) = parse::parse(text, allowed)?;
    Ok(DriverExpr { ast, source: text.to_string(), vars })
}

/// Which backward equation the expression is the driver of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum DriverForm {
    /// `f` of the equation driven by `dH`.
    #[default]
    H,
    /// `F` of the equation driven by the compensated martingale `dM`.
    M,
}

/// Correction turning an `H`-form driver into the `M`-form one:
/// `F = f - lambda (1 - h) u`.
pub fn m_form_correction(lambda: f64, h: f64, u: f64) -> f64 {
    lambda * (1.0 - h) * u
}

/// Evaluation rule `F(args) = f(args) - lambda (1 - h) u` for fixed
/// `lambda` and `h`.
pub fn to_m_form(f: &DriverExpr, lambda: f64, h: f64) -> impl Fn(&Env) -> Result<f64, EvalError> + '_ {
    move |env| {
        let u = env.get(Var::U).unwrap_or(0.0);
        Ok(f.eval(env)? - m_form_correction(lambda, h, u))
    }
}

/// A driver with its declared form.
#[derive(Debug, Clone, PartialEq)]
pub struct Driver {
    pub expr: DriverExpr,
    pub form: DriverForm,
}

impl Driver {
    pub fn new(expr: DriverExpr, form: DriverForm) -> Self {
        Self { expr, form }
    }

    pub fn parse(text: &str, form: DriverForm) -> Result<Self, ParseError> {
        Ok(Self::new(parse_driver(text)?, form))
    }

    /// `F`, the driver of the `dM` equation, at intensity `lambda`.
    pub fn m_form(&self, env: &Env, lambda: f64) -> Result<f64, EvalError> {
        let raw = self.expr.eval(env)?;
        Ok(match self.form {
            DriverForm::M => raw,
            DriverForm::H => raw - self.correction(env, lambda),
        })
    }

    /// `f`, the driver of the `dH` equation, at intensity `lambda`.
    pub fn h_form(&self, env: &Env, lambda: f64) -> Result<f64, EvalError> {
        let raw = self.expr.eval(env)?;
        Ok(match self.form {
            DriverForm::H => raw,
            DriverForm::M => raw + self.correction(env, lambda),
        })
    }

    fn correction(&self, env: &Env, lambda: f64) -> f64 {
        let h = env.get(Var::H).unwrap_or(0.0);
        let u = env.get(Var::U).unwrap_or(0.0);
        m_form_correction(lambda, h, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_env(vals: [f64; 9]) -> Env {
        let mut env = Env::new();
        for (v, x) in Var::ALL.into_iter().zip(vals) {
            env.set(v, x);
        }
        env
    }

    #[test]
    fn parse_examples() {
        let zero = parse_driver("0").unwrap();
        assert_eq!(zero.ast(), &Expr::Const(0.0));
        assert_eq!(zero.vars(), VarSet::EMPTY);

        let e = parse_driver("-0.05*y + max(z, 0)").unwrap();
        assert_eq!(e.vars(), VarSet::of(&[Var::Y, Var::Z]));

        let err = parse_driver("y + ").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 4, .. }), "{err:?}");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_driver("y + q"),
            Err(ParseError::UnknownVariable { ref name, offset: 4 }) if name == "q"
        ));
        assert!(matches!(parse_driver("tau"), Err(ParseError::DisallowedVariable { .. })));
        assert!(matches!(parse_driver("foo(y)"), Err(ParseError::UnknownVariable { .. })));
        assert!(matches!(parse_driver("min(y)"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_driver("(y"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_driver("y y"), Err(ParseError::Syntax { offset: 2, .. })));
        assert!(matches!(parse_driver("y $ 2"), Err(ParseError::Syntax { offset: 2, .. })));
        assert!(parse_expr("w + tau", VarSet::TERMINAL).is_ok());
        assert!(parse_expr("y", VarSet::OBSTACLE).is_err());
    }

    #[test]
    fn precedence_and_associativity() {
        let env = Env::new().with(Var::Y, 3.0).with(Var::U, 2.0);
        let v = |s: &str| parse_driver(s).unwrap().eval(&env).unwrap();
        assert_eq!(v("1 - 2 - 3"), -4.0);
        assert_eq!(v("8 / 4 / 2"), 1.0);
        assert_eq!(v("1 + 2 * 3"), 7.0);
        assert_eq!(v("-2*u"), -4.0);
        assert_eq!(v("-y*-u"), 6.0);
        assert_eq!(v("2 * (1 + y)"), 8.0);
        assert_eq!(v("1e-1 * 10"), 1.0);
        assert_eq!(v("max(1, y, u)"), 3.0);
        assert_eq!(v("abs(-y) + exp(0)"), 4.0);
    }

    #[test]
    fn eval_examples() {
        let e = parse_driver("-0.05*y").unwrap();
        assert_eq!(e.eval(&Env::new().with(Var::Y, 100.0)).unwrap(), -5.0);

        let e = parse_driver("min(ey, y)").unwrap();
        assert_eq!(e.eval(&Env::new().with(Var::Ey, 2.0).with(Var::Y, 3.0)).unwrap(), 2.0);

        let e = parse_driver("u/(1-h)").unwrap();
        let env = Env::new().with(Var::U, 1.0).with(Var::H, 1.0);
        assert_eq!(e.eval(&env), Err(EvalError::DivisionByZero));

        let e = parse_driver("y + z").unwrap();
        assert_eq!(e.eval(&Env::new().with(Var::Y, 1.0)), Err(EvalError::Unbound("z")));
    }

    #[test]
    fn m_form_examples() {
        let f = parse_driver("0.3*y + u").unwrap();
        let env = Env::new().with(Var::Y, 2.0).with(Var::U, 0.0);
        assert_eq!(to_m_form(&f, 0.5, 0.0)(&env).unwrap(), f.eval(&env).unwrap());

        let env = Env::new().with(Var::Y, 2.0).with(Var::U, 4.0);
        assert_eq!(to_m_form(&f, 0.5, 1.0)(&env).unwrap(), f.eval(&env).unwrap());

        let zero = parse_driver("0").unwrap();
        let env = Env::new().with(Var::U, 2.0);
        assert_eq!(to_m_form(&zero, 0.5, 0.0)(&env).unwrap(), -1.0);
    }

    #[test]
    fn driver_forms_are_inverse() {
        let env = Env::new().with(Var::Y, 1.5).with(Var::U, 2.0).with(Var::H, 0.0);
        let h = Driver::parse("0.2*y - u", DriverForm::H).unwrap();
        let m = Driver::parse("0.2*y - u", DriverForm::M).unwrap();
        assert_eq!(h.h_form(&env, 0.4).unwrap(), m.m_form(&env, 0.4).unwrap());
        assert_eq!(h.m_form(&env, 0.4).unwrap(), 0.3 - 2.0 - 0.8);
        assert_eq!(m.h_form(&env, 0.4).unwrap(), 0.3 - 2.0 + 0.8);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(Expr::Const),
            (-10.0f64..0.0).prop_map(Expr::Const),
            proptest::sample::select(Var::ALL[..8].to_vec()).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 32, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone(), 0..3usize).prop_map(|(a, b, op)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][op];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Call(Func::Max, vec![a, b])),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Call(Func::Min, vec![a, b])),
                inner.clone().prop_map(|a| Expr::Call(Func::Abs, vec![a])),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn print_parse_is_idempotent(expr in arb_expr(), envs in proptest::collection::vec(proptest::array::uniform9(-5.0f64..5.0), 1000)) {
            let printed = expr.to_string();
            let reparsed = parse_driver(&printed).unwrap();
            prop_assert_eq!(reparsed.canonical(), printed);
            for vals in envs {
                let env = full_env(vals);
                let a = expr.eval(&env).unwrap();
                let b = reparsed.eval(&env).unwrap();
                prop_assert!(a == b || (a.is_nan() && b.is_nan()), "{} vs {}", a, b);
            }
        }

        #[test]
        fn m_form_equals_h_form_plus_correction(
            vals in proptest::collection::vec(proptest::array::uniform9(-5.0f64..5.0), 1000),
            lambda in 0.0f64..3.0,
        ) {
            let f = parse_driver("0.3*y - 0.7*u + max(z, ey) * abs(ez) + exp(0.1*w) * t").unwrap();
            for (i, v) in vals.into_iter().enumerate() {
                let h = (i % 2) as f64;
                let env = full_env(v).with(Var::H, h);
                let u = env.get(Var::U).unwrap();
                let big_f = to_m_form(&f, lambda, h)(&env).unwrap();
                let small_f = f.eval(&env).unwrap();
                prop_assert_eq!(big_f, small_f - lambda * (1.0 - h) * u);
                prop_assert!((big_f - small_f + lambda * (1.0 - h) * u).abs() <= 1e-12 * (1.0 + small_f.abs()));
            }
        }
    }
}
