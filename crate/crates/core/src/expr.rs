//! Scalar expressions over the state variables `x1..xm` and time `t`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' ['-'] INTEGER)?
//! atom    := NUMBER | 'x'INDEX | 't' | FUNC '(' sum (',' sum)? ')' | '(' sum ')'
//! ```
//!
//! Unary functions: `sin cos exp log abs sqrt tanh`; binary: `min max`.
//! There is no implicit multiplication. Positions in errors are byte offsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::interval::Interval;

/// Distance to a kink of `abs`/`min`/`max` below which the derivative is refused.
pub const KINK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at position {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { name: String, position: usize },
    #[error("variable x{index} at position {position} is out of range for dimension {dim}")]
    VariableOutOfRange {
        index: usize,
        dim: usize,
        position: usize,
    },
    #[error("expression has {expected} state variables but the point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("not differentiable: {0}")]
    NonDifferentiable(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }
}

/// Syntax tree node. `Var` indices are zero-based (`x1` is `Var(0)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Time,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
    Min(Box<Node>, Box<Node>),
    Max(Box<Node>, Box<Node>),
}

impl Node {
    pub fn add(a: Node, b: Node) -> Node {
        Node::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Node, b: Node) -> Node {
        Node::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Node, b: Node) -> Node {
        Node::Mul(Box::new(a), Box::new(b))
    }

    pub fn square(a: Node) -> Node {
        Node::Pow(Box::new(a), 2)
    }

    fn children(&self) -> Vec<&Node> {
        match self {
            Node::Const(_) | Node::Var(_) | Node::Time => vec![],
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => vec![a],
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Min(a, b)
            | Node::Max(a, b) => vec![a, b],
        }
    }

    fn any(&self, pred: &dyn Fn(&Node) -> bool) -> bool {
        pred(self) || self.children().into_iter().any(|c| c.any(pred))
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Var(i) => Some(*i),
            _ => self.children().into_iter().filter_map(Node::max_var).max(),
        }
    }

    fn map_time(&self, t: f64) -> Node {
        let b = |n: &Node| Box::new(n.map_time(t));
        match self {
            Node::Time => Node::Const(t),
            Node::Const(_) | Node::Var(_) => self.clone(),
            Node::Neg(a) => Node::Neg(b(a)),
            Node::Pow(a, k) => Node::Pow(b(a), *k),
            Node::Call(f, a) => Node::Call(*f, b(a)),
            Node::Add(x, y) => Node::Add(b(x), b(y)),
            Node::Sub(x, y) => Node::Sub(b(x), b(y)),
            Node::Mul(x, y) => Node::Mul(b(x), b(y)),
            Node::Div(x, y) => Node::Div(b(x), b(y)),
            Node::Min(x, y) => Node::Min(b(x), b(y)),
            Node::Max(x, y) => Node::Max(b(x), b(y)),
        }
    }
}

/// A parsed expression together with the state dimension it was declared for.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    dim: usize,
}

impl Expr {
    pub fn parse(text: &str, dim: usize) -> Result<Expr, ExprError> {
        let tokens = lex(text)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            dim,
        };
        let root = p.sum()?;
        let tok = p.peek();
        if tok.kind != Tok::End {
            return Err(ExprError::Syntax {
                position: tok.position,
                expected: "operator or end of input".into(),
            });
        }
        Ok(Expr { root, dim })
    }

    /// Wraps a programmatically built tree, checking variable indices.
    pub fn from_node(root: Node, dim: usize) -> Result<Expr, ExprError> {
        if let Some(i) = root.max_var() {
            if i >= dim {
                return Err(ExprError::VariableOutOfRange {
                    index: i + 1,
                    dim,
                    position: 0,
                });
            }
        }
        Ok(Expr { root, dim })
    }

    pub fn constant(value: f64, dim: usize) -> Expr {
        Expr {
            root: Node::Const(value),
            dim,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn uses_time(&self) -> bool {
        self.root.any(&|n| matches!(n, Node::Time))
    }

    /// True if the tree contains `abs`, `min` or `max`.
    pub fn has_kinks(&self) -> bool {
        self.root.any(&|n| {
            matches!(n, Node::Min(..) | Node::Max(..) | Node::Call(Func::Abs, _))
        })
    }

    /// The value if the expression depends on neither state nor time.
    pub fn constant_value(&self) -> Option<f64> {
        if self.root.any(&|n| matches!(n, Node::Var(_) | Node::Time)) {
            return None;
        }
        eval_node(&self.root, &[], 0.0).ok()
    }

    /// Freeze the time variable.
    pub fn at_time(&self, t: f64) -> Expr {
        Expr {
            root: self.root.map_time(t),
            dim: self.dim,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ExprError> {
        if x.len() != self.dim {
            return Err(ExprError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        self.check_dim(x)?;
        eval_node(&self.root, x, t)
    }

    /// Exact forward-mode gradient with respect to `x`.
    pub fn gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.check_dim(x)?;
        let d = grad_node(&self.root, x, t)?;
        Ok(d.tangent)
    }

    /// Value together with its gradient.
    pub fn value_and_gradient(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>), ExprError> {
        self.check_dim(x)?;
        let d = grad_node(&self.root, x, t)?;
        Ok((d.value, d.tangent))
    }

    /// Enclosure of the range over a box. Fails where the enclosure is unbounded
    /// (division by an interval containing zero, log/sqrt of a nonpositive range).
    pub fn eval_interval(&self, t: Interval, x: &[Interval]) -> Result<Interval, ExprError> {
        if x.len() != self.dim {
            return Err(ExprError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        interval_node(&self.root, x, t)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

/// Fully parenthesized form; reparses to an identical tree.
fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => {
            write!(f, "(-{:?})", -c)
        }
        Node::Const(c) => write!(f, "{c:?}"),
        Node::Var(i) => write!(f, "x{}", i + 1),
        Node::Time => write!(f, "t"),
        Node::Neg(a) => {
            write!(f, "(-")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Pow(a, k) => {
            write!(f, "(")?;
            write_node(a, f)?;
            write!(f, "^{k})")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Min(a, b) | Node::Max(a, b) => {
            let name = if matches!(n, Node::Min(..)) { "min" } else { "max" };
            write!(f, "{name}(")?;
            write_node(a, f)?;
            write!(f, ", ")?;
            write_node(b, f)?;
            write!(f, ")")
        }
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            let op = match n {
                Node::Add(..) => "+",
                Node::Sub(..) => "-",
                Node::Mul(..) => "*",
                _ => "/",
            };
            write!(f, "(")?;
            write_node(a, f)?;
            write!(f, " {op} ")?;
            write_node(b, f)?;
            write!(f, ")")
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Deserializes without a dimension context; the dimension is taken from the
/// largest variable index. Callers that know the dimension should reparse.
impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut e = Expr::parse(&s, usize::MAX).map_err(serde::de::Error::custom)?;
        e.dim = e.root.max_var().map_or(0, |i| i + 1);
        Ok(e)
    }
}

// ---------------------------------------------------------------- lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    position: usize,
    /// Source slice, used to check integer exponents.
    text: String,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let slice = &text[start..i];
            let v = f64::from_str(slice).map_err(|_| ExprError::Syntax {
                position: start,
                expected: "number".into(),
            })?;
            out.push(Token {
                kind: Tok::Num(v),
                position: start,
                text: slice.to_string(),
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let slice = &text[start..i];
            out.push(Token {
                kind: Tok::Ident(slice.to_string()),
                position: start,
                text: slice.to_string(),
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            out.push(Token {
                kind: Tok::Sym(c),
                position: start,
                text: c.to_string(),
            });
        } else {
            return Err(ExprError::Syntax {
                position: start,
                expected: "number, identifier, operator or parenthesis".into(),
            });
        }
    }
    out.push(Token {
        kind: Tok::End,
        position: text.len(),
        text: String::new(),
    });
    Ok(out)
}

// ---------------------------------------------------------------- parsing

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.kind != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek().kind == Tok::Sym(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(ExprError::Syntax {
                position: self.peek().position,
                expected: format!("`{c}`"),
            })
        }
    }

    fn sum(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Node::add(lhs, self.product()?);
            } else if self.eat('-') {
                lhs = Node::sub(lhs, self.product()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Node::mul(lhs, self.unary()?);
            } else if self.eat('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat('-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if !self.eat('^') {
            return Ok(base);
        }
        let negative = self.eat('-');
        let tok = self.next();
        let k = match tok.kind {
            Tok::Num(_) if tok.text.bytes().all(|b| b.is_ascii_digit()) => {
                tok.text.parse::<i32>().ok()
            }
            _ => None,
        };
        let k = k.ok_or(ExprError::Syntax {
            position: tok.position,
            expected: "integer exponent".into(),
        })?;
        Ok(Node::Pow(Box::new(base), if negative { -k } else { k }))
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let tok = self.next();
        match tok.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::Sym('(') => {
                let inner = self.sum()?;
                self.expect(')')?;
                Ok(inner)
            }
            Tok::Ident(name) => self.identifier(name, tok.position),
            _ => Err(ExprError::Syntax {
                position: tok.position,
                expected: "number, variable, function or `(`".into(),
            }),
        }
    }

    fn identifier(&mut self, name: String, position: usize) -> Result<Node, ExprError> {
        if name == "t" {
            return Ok(Node::Time);
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits.parse().unwrap_or(usize::MAX);
                if index == 0 || index > self.dim {
                    return Err(ExprError::VariableOutOfRange {
                        index,
                        dim: self.dim,
                        position,
                    });
                }
                return Ok(Node::Var(index - 1));
            }
        }
        let binary = match name.as_str() {
            "min" => Some(true),
            "max" => Some(false),
            _ => None,
        };
        if let Some(is_min) = binary {
            self.expect('(')?;
            let a = self.sum()?;
            self.expect(',')?;
            let b = self.sum()?;
            self.expect(')')?;
            let (a, b) = (Box::new(a), Box::new(b));
            return Ok(if is_min { Node::Min(a, b) } else { Node::Max(a, b) });
        }
        if let Some(func) = Func::from_name(&name) {
            self.expect('(')?;
            let a = self.sum()?;
            self.expect(')')?;
            return Ok(Node::Call(func, Box::new(a)));
        }
        Err(ExprError::UnknownIdentifier { name, position })
    }
}

// ---------------------------------------------------------------- evaluation

fn finite(v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::Domain("non-finite value"))
    }
}

fn eval_node(n: &Node, x: &[f64], t: f64) -> Result<f64, ExprError> {
    let v = match n {
        Node::Const(c) => *c,
        Node::Var(i) => x[*i],
        Node::Time => t,
        Node::Neg(a) => -eval_node(a, x, t)?,
        Node::Add(a, b) => eval_node(a, x, t)? + eval_node(b, x, t)?,
        Node::Sub(a, b) => eval_node(a, x, t)? - eval_node(b, x, t)?,
        Node::Mul(a, b) => eval_node(a, x, t)? * eval_node(b, x, t)?,
        Node::Div(a, b) => {
            let num = eval_node(a, x, t)?;
            let den = eval_node(b, x, t)?;
            if den == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            num / den
        }
        Node::Pow(a, k) => {
            let base = eval_node(a, x, t)?;
            if base == 0.0 && *k < 0 {
                return Err(ExprError::Domain("negative power of zero"));
            }
            base.powi(*k)
        }
        Node::Call(f, a) => {
            let u = eval_node(a, x, t)?;
            match f {
                Func::Sin => u.sin(),
                Func::Cos => u.cos(),
                Func::Exp => u.exp(),
                Func::Log => {
                    if u <= 0.0 {
                        return Err(ExprError::Domain("log of a nonpositive number"));
                    }
                    u.ln()
                }
                Func::Abs => u.abs(),
                Func::Sqrt => {
                    if u < 0.0 {
                        return Err(ExprError::Domain("sqrt of a negative number"));
                    }
                    u.sqrt()
                }
                Func::Tanh => u.tanh(),
            }
        }
        Node::Min(a, b) => eval_node(a, x, t)?.min(eval_node(b, x, t)?),
        Node::Max(a, b) => eval_node(a, x, t)?.max(eval_node(b, x, t)?),
    };
    finite(v)
}

struct Dual {
    value: f64,
    tangent: Vec<f64>,
}

impl Dual {
    fn constant(value: f64, m: usize) -> Dual {
        Dual {
            value,
            tangent: vec![0.0; m],
        }
    }

    /// Chain rule for a unary map with derivative `slope`.
    fn chain(self, value: f64, slope: f64) -> Result<Dual, ExprError> {
        Ok(Dual {
            value: finite(value)?,
            tangent: self
                .tangent
                .into_iter()
                .map(|d| slope * d)
                .collect(),
        })
    }
}

fn grad_node(n: &Node, x: &[f64], t: f64) -> Result<Dual, ExprError> {
    let m = x.len();
    let zip = |a: Dual, b: Dual, value: f64, fa: f64, fb: f64| -> Result<Dual, ExprError> {
        Ok(Dual {
            value: finite(value)?,
            tangent: a
                .tangent
                .iter()
                .zip(&b.tangent)
                .map(|(da, db)| fa * da + fb * db)
                .collect(),
        })
    };
    match n {
        Node::Const(c) => Ok(Dual::constant(*c, m)),
        Node::Time => Ok(Dual::constant(t, m)),
        Node::Var(i) => {
            let mut d = Dual::constant(x[*i], m);
            d.tangent[*i] = 1.0;
            Ok(d)
        }
        Node::Neg(a) => {
            let a = grad_node(a, x, t)?;
            let v = -a.value;
            a.chain(v, -1.0)
        }
        Node::Add(a, b) => {
            let (a, b) = (grad_node(a, x, t)?, grad_node(b, x, t)?);
            let v = a.value + b.value;
            zip(a, b, v, 1.0, 1.0)
        }
        Node::Sub(a, b) => {
            let (a, b) = (grad_node(a, x, t)?, grad_node(b, x, t)?);
            let v = a.value - b.value;
            zip(a, b, v, 1.0, -1.0)
        }
        Node::Mul(a, b) => {
            let (a, b) = (grad_node(a, x, t)?, grad_node(b, x, t)?);
            let (va, vb) = (a.value, b.value);
            zip(a, b, va * vb, vb, va)
        }
        Node::Div(a, b) => {
            let (a, b) = (grad_node(a, x, t)?, grad_node(b, x, t)?);
            let (va, vb) = (a.value, b.value);
            if vb == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            zip(a, b, va / vb, 1.0 / vb, -va / (vb * vb))
        }
        Node::Pow(a, k) => {
            let a = grad_node(a, x, t)?;
            let u = a.value;
            if u == 0.0 && *k < 0 {
                return Err(ExprError::Domain("negative power of zero"));
            }
            let slope = if *k == 0 {
                0.0
            } else {
                *k as f64 * u.powi(k - 1)
            };
            a.chain(u.powi(*k), slope)
        }
        Node::Call(f, a) => {
            let a = grad_node(a, x, t)?;
            let u = a.value;
            match f {
                Func::Sin => a.chain(u.sin(), u.cos()),
                Func::Cos => a.chain(u.cos(), -u.sin()),
                Func::Exp => a.chain(u.exp(), u.exp()),
                Func::Log => {
                    if u <= 0.0 {
                        return Err(ExprError::Domain("log of a nonpositive number"));
                    }
                    a.chain(u.ln(), 1.0 / u)
                }
                Func::Abs => {
                    if u.abs() <= KINK_TOL {
                        return Err(ExprError::NonDifferentiable("abs at its kink"));
                    }
                    a.chain(u.abs(), u.signum())
                }
                Func::Sqrt => {
                    if u < 0.0 {
                        return Err(ExprError::Domain("sqrt of a negative number"));
                    }
                    if u == 0.0 {
                        return Err(ExprError::NonDifferentiable("sqrt at zero"));
                    }
                    let s = u.sqrt();
                    a.chain(s, 0.5 / s)
                }
                Func::Tanh => {
                    let th = u.tanh();
                    a.chain(th, 1.0 - th * th)
                }
            }
        }
        Node::Min(a, b) | Node::Max(a, b) => {
            let (a, b) = (grad_node(a, x, t)?, grad_node(b, x, t)?);
            if (a.value - b.value).abs() <= KINK_TOL {
                return Err(ExprError::NonDifferentiable("min/max at a tie"));
            }
            let pick_a = match n {
                Node::Min(..) => a.value < b.value,
                _ => a.value > b.value,
            };
            Ok(if pick_a { a } else { b })
        }
    }
}

fn interval_node(n: &Node, x: &[Interval], t: Interval) -> Result<Interval, ExprError> {
    let unbounded = |what| ExprError::Domain(what);
    let v = match n {
        Node::Const(c) => Interval::point(*c),
        Node::Var(i) => x[*i],
        Node::Time => t,
        Node::Neg(a) => -interval_node(a, x, t)?,
        Node::Add(a, b) => interval_node(a, x, t)? + interval_node(b, x, t)?,
        Node::Sub(a, b) => interval_node(a, x, t)? - interval_node(b, x, t)?,
        Node::Mul(a, b) => {
            if a == b {
                // x*x is a square, which is tighter than the product bound.
                interval_node(a, x, t)?
                    .powi(2)
                    .ok_or(unbounded("power"))?
            } else {
                interval_node(a, x, t)? * interval_node(b, x, t)?
            }
        }
        Node::Div(a, b) => interval_node(a, x, t)?
            .div(&interval_node(b, x, t)?)
            .ok_or(unbounded("division by a range containing zero"))?,
        Node::Pow(a, k) => interval_node(a, x, t)?
            .powi(*k)
            .ok_or(unbounded("negative power of a range containing zero"))?,
        Node::Call(f, a) => {
            let u = interval_node(a, x, t)?;
            match f {
                Func::Sin => u.sin(),
                Func::Cos => u.cos(),
                Func::Exp => u.exp(),
                Func::Log => u.ln().ok_or(unbounded("log of a nonpositive range"))?,
                Func::Abs => u.abs(),
                Func::Sqrt => u.sqrt().ok_or(unbounded("sqrt of a negative range"))?,
                Func::Tanh => u.tanh(),
            }
        }
        Node::Min(a, b) => interval_node(a, x, t)?.min(&interval_node(b, x, t)?),
        Node::Max(a, b) => interval_node(a, x, t)?.max(&interval_node(b, x, t)?),
    };
    if v.lo.is_nan() || v.hi.is_nan() || !v.is_finite() {
        return Err(unbounded("unbounded range"));
    }
    Ok(v)
}
