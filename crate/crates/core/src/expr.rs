//! Closed catalog of scalar functions used for nominal dynamics, interconnections,
//! uncertainties and bounding functions.
//!
//! Functions are written as small arithmetic expressions over the local state
//! `x1..xn` (1-based, matching the `x_{i,k}` notation) and the time `t`:
//!
//! ```text
//! expr  := term   (('+' | '-') term)*
//! term  := unary  (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' ['-'] integer)?
//! atom  := number | 'x'k | 't' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func  := sin | cos | tanh | exp | abs | sqrt | ln
//! ```
//!
//! Every expression can report a sum-norm Lipschitz certificate when one follows
//! from the structure alone (linear maps, sines, cosines, absolute values and
//! their sums and constant scalings).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
    Sqrt,
    Ln,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "ln" => Func::Ln,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tanh => v.tanh(),
            Func::Exp => v.exp(),
            Func::Abs => v.abs(),
            Func::Sqrt => v.sqrt(),
            Func::Ln => v.ln(),
        }
    }

    /// Global bound on |f'| when it exists.
    fn slope_bound(self) -> Option<f64> {
        match self {
            Func::Sin | Func::Cos | Func::Tanh | Func::Abs => Some(1.0),
            Func::Exp | Func::Sqrt | Func::Ln => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 0-based state coordinate.
    Var(usize),
    Time,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(k) => x[*k],
            Expr::Time => t,
            Expr::Neg(a) => -a.eval(x, t),
            Expr::Add(a, b) => a.eval(x, t) + b.eval(x, t),
            Expr::Sub(a, b) => a.eval(x, t) - b.eval(x, t),
            Expr::Mul(a, b) => a.eval(x, t) * b.eval(x, t),
            Expr::Div(a, b) => a.eval(x, t) / b.eval(x, t),
            Expr::Pow(a, n) => a.eval(x, t).powi(*n),
            Expr::Call(f, a) => f.apply(a.eval(x, t)),
        }
    }

    /// Number of state coordinates the expression needs (highest index + 1).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Time => 0,
            Expr::Var(k) => k + 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.arity().max(b.arity())
            }
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Time => true,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on_time(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on_time() || b.depends_on_time()
            }
        }
    }

    fn is_constant(&self) -> bool {
        self.arity() == 0 && !self.depends_on_time()
    }

    /// Per-coordinate bounds `g` with `|∂f/∂x_k| ≤ g[k]` everywhere, padded to `dim`.
    ///
    /// `None` when no global bound follows from the structure (products of
    /// state-dependent factors, `exp`, integer powers above one, ...).
    pub fn partial_bounds(&self, dim: usize) -> Option<Vec<f64>> {
        let mut g = self.partials()?;
        if g.len() > dim {
            return None;
        }
        g.resize(dim, 0.0);
        Some(g)
    }

    /// Sum-norm Lipschitz certificate: `|f(x) − f(y)| ≤ L Σ_k |x_k − y_k|`.
    pub fn lipschitz_certificate(&self, dim: usize) -> Option<f64> {
        self.partial_bounds(dim)
            .map(|g| g.into_iter().fold(0.0, f64::max))
    }

    fn partials(&self) -> Option<Vec<f64>> {
        fn add(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
            if a.len() < b.len() {
                a.resize(b.len(), 0.0);
            }
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += bi;
            }
            a
        }
        fn scale(a: Vec<f64>, s: f64) -> Vec<f64> {
            a.into_iter().map(|v| v * s).collect()
        }
        match self {
            Expr::Const(_) | Expr::Time => Some(Vec::new()),
            Expr::Var(k) => {
                let mut g = vec![0.0; k + 1];
                g[*k] = 1.0;
                Some(g)
            }
            Expr::Neg(a) => a.partials(),
            Expr::Add(a, b) | Expr::Sub(a, b) => Some(add(a.partials()?, b.partials()?)),
            Expr::Mul(a, b) => {
                if a.is_constant() {
                    Some(scale(b.partials()?, a.eval(&[], 0.0).abs()))
                } else if b.is_constant() {
                    Some(scale(a.partials()?, b.eval(&[], 0.0).abs()))
                } else {
                    None
                }
            }
            Expr::Div(a, b) if b.is_constant() => {
                let d = b.eval(&[], 0.0).abs();
                (d > 0.0).then(|| a.partials()).flatten().map(|g| scale(g, 1.0 / d))
            }
            Expr::Div(..) => None,
            Expr::Pow(_, 0) => Some(Vec::new()),
            Expr::Pow(a, 1) => a.partials(),
            Expr::Pow(..) => None,
            Expr::Call(f, a) => f.slope_bound().and_then(|s| a.partials().map(|g| scale(g, s))),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(k) => write!(f, "x{}", k + 1),
            Expr::Time => write!(f, "t"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "({a}^{n})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        let neg = self.eat(b'-');
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        let n: i32 = digits
            .parse()
            .map_err(|_| self.error("exponent must be an integer literal"))?;
        Ok(Expr::Pow(Box::new(base), if neg { -n } else { n }))
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut p = self.pos + 1;
            if p < s.len() && (s[p] == b'+' || s[p] == b'-') {
                p += 1;
            }
            if p < s.len() && s[p].is_ascii_digit() {
                while p < s.len() && s[p].is_ascii_digit() {
                    p += 1;
                }
                self.pos = p;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap_or("");
        text.parse::<f64>().map(Expr::Const).map_err(|_| Error::Parse {
            pos: start,
            msg: format!("invalid number '{text}'"),
        })
    }

    fn ident(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match name {
            "t" => return Ok(Expr::Time),
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            _ => {}
        }
        if let Some(idx) = name.strip_prefix('x') {
            if let Ok(k) = idx.parse::<usize>() {
                if k == 0 {
                    return Err(Error::Parse {
                        pos: start,
                        msg: "state variables are numbered from x1".into(),
                    });
                }
                return Ok(Expr::Var(k - 1));
            }
        }
        let func = Func::from_name(name).ok_or_else(|| Error::Parse {
            pos: start,
            msg: format!("unknown identifier '{name}'"),
        })?;
        if !self.eat(b'(') {
            return Err(self.error("expected '(' after function name"));
        }
        let arg = self.expr()?;
        if !self.eat(b')') {
            return Err(self.error("expected ')'"));
        }
        Ok(Expr::Call(func, Box::new(arg)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: &[f64]) -> f64 {
        Expr::parse(src).unwrap().eval(x, 0.0)
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_eq!(ev("-x1^2", &[3.0]), -9.0);
        assert_eq!(ev("2^-1", &[]), 0.5);
        assert_eq!(ev("(1 + 2) * 3", &[]), 9.0);
        assert_eq!(ev("8 / 2 / 2", &[]), 2.0);
        assert_eq!(ev("1e-3 * 1000", &[]), 1.0);
        assert_eq!(ev("x1 - x2 - x3", &[1.0, 2.0, 3.0]), -4.0);
    }

    #[test]
    fn functions() {
        assert_eq!(ev("cos(0.5*exp(x1))", &[0.0]), 0.5f64.cos());
        assert_eq!(ev("x1*cos(x2^2)", &[3.0, 2.0]), 3.0 * 4.0f64.cos());
        assert_eq!(ev("1 + abs(x1) + abs(x2)", &[-1.0, 2.0]), 4.0);
        assert_eq!(ev("sin(pi)", &[]), std::f64::consts::PI.sin());
    }

    #[test]
    fn time_variable() {
        let e = Expr::parse("sin(t) * x1").unwrap();
        assert!(e.depends_on_time());
        assert_eq!(e.eval(&[2.0], 1.0), 2.0 * 1.0f64.sin());
        assert_eq!(e.lipschitz_certificate(1), None);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Expr::parse("x0"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("foo(1)"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("(1 + 2"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("1 2"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("x1^y"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn arity_counts_highest_index() {
        assert_eq!(Expr::parse("x3 + 1").unwrap().arity(), 3);
        assert_eq!(Expr::parse("2").unwrap().arity(), 0);
    }

    #[test]
    fn certificates() {
        let e = Expr::parse("-7.5*sin(x1) - 0.2*x2").unwrap();
        assert_eq!(e.partial_bounds(2), Some(vec![7.5, 0.2]));
        assert_eq!(e.lipschitz_certificate(2), Some(7.5));
        let e = Expr::parse("1 + abs(x1) + abs(x2)").unwrap();
        assert_eq!(e.lipschitz_certificate(2), Some(1.0));
        let e = Expr::parse("sin(x1) + cos(x1)/2").unwrap();
        assert_eq!(e.lipschitz_certificate(1), Some(1.5));
        assert_eq!(Expr::parse("x1*x2").unwrap().lipschitz_certificate(2), None);
        assert_eq!(Expr::parse("exp(x1)").unwrap().lipschitz_certificate(1), None);
        assert_eq!(Expr::parse("3").unwrap().lipschitz_certificate(2), Some(0.0));
        // Declared dimension smaller than the expression needs.
        assert_eq!(Expr::parse("x3").unwrap().lipschitz_certificate(2), None);
    }

    #[test]
    fn display_reparses_to_same_value() {
        for src in ["-(15*10*0.5/9.81)*sin(x1) - (2/9.81)*x2", "x1*x2^2 + cos(0.5*exp(x2))"] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            let x = [0.3, -1.7];
            assert_eq!(e.eval(&x, 0.0).to_bits(), again.eval(&x, 0.0).to_bits());
        }
    }
}
