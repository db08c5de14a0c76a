//! A small arithmetic language for running costs and terminal data.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 't' | 'T' | 'h' | 'sup' | 'u' ('[' int ']')?
//!        | 'x' ('[' int ']')? '(' expr ')'
//!        | ('abs' | 'sqrt') '(' expr ')' | ('max' | 'min') '(' expr (',' expr)+ ')'
//!        | '(' expr ')'
//! ```
//!
//! `x(s)` reads the stopped path `x(s ^ t)` (linear between nodes), so `x(t)`
//! is the current value and `x(t - h)` the delayed one. `sup` is the running
//! maximum of `|x|` over `[-h, t]`. `u` is the control (running costs only).

use crate::error::{Error, Result};
use crate::path_space::{norm, GridPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Abs,
    Sqrt,
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Time,
    Horizon,
    Delay,
    Sup,
    Control(usize),
    Path { coord: usize, at: Box<Node> },
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Where an expression is evaluated.
#[derive(Clone, Copy, Debug)]
pub struct Context<'a> {
    pub t_idx: usize,
    pub path: &'a GridPath,
    pub control: &'a [f64],
}

/// A parsed expression together with its source text.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = lex(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!("unexpected {:?} in `{source}`", p.tokens[p.pos])));
        }
        Ok(Expr { source: source.to_string(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Largest path coordinate and control coordinate referenced.
    fn max_indices(&self) -> (Option<usize>, Option<usize>) {
        fn walk(n: &Node, acc: &mut (Option<usize>, Option<usize>)) {
            match n {
                Node::Path { coord, at } => {
                    acc.0 = acc.0.max(Some(*coord));
                    walk(at, acc);
                }
                Node::Control(i) => acc.1 = acc.1.max(Some(*i)),
                Node::Neg(a) => walk(a, acc),
                Node::Bin(_, a, b) => {
                    walk(a, acc);
                    walk(b, acc);
                }
                Node::Call(_, args) => args.iter().for_each(|a| walk(a, acc)),
                _ => {}
            }
        }
        let mut acc = (None, None);
        walk(&self.root, &mut acc);
        acc
    }

    /// Check coordinate references against the state and control dimensions
    /// (`controls = 0` forbids `u`).
    pub fn check_dims(&self, n: usize, controls: usize) -> Result<()> {
        let (xi, ui) = self.max_indices();
        if let Some(i) = xi.filter(|&i| i >= n) {
            return Err(Error::Expr(format!("`{}` reads x[{i}] but the state has dimension {n}", self.source)));
        }
        if let Some(i) = ui {
            if controls == 0 {
                return Err(Error::Expr(format!("`{}` reads the control where none is available", self.source)));
            }
            if i >= controls {
                return Err(Error::Expr(format!("`{}` reads u[{i}] but controls have dimension {controls}", self.source)));
            }
        }
        Ok(())
    }

    pub fn eval(&self, ctx: &Context<'_>) -> Result<f64> {
        let v = eval(&self.root, ctx)?;
        if !v.is_finite() {
            return Err(Error::Expr(format!("`{}` evaluated to {v}", self.source)));
        }
        Ok(v)
    }
}

fn eval(n: &Node, ctx: &Context<'_>) -> Result<f64> {
    let spec = ctx.path.spec();
    Ok(match n {
        Node::Num(v) => *v,
        Node::Time => spec.time(ctx.t_idx),
        Node::Horizon => spec.horizon,
        Node::Delay => spec.h,
        Node::Sup => (0..=spec.global(ctx.t_idx)).map(|i| norm(ctx.path.node(i))).fold(0.0, f64::max),
        Node::Control(i) => *ctx.control.get(*i).ok_or(Error::DimensionMismatch {
            expected: i + 1,
            got: ctx.control.len(),
        })?,
        Node::Path { coord, at } => {
            let s = eval(at, ctx)?;
            let now = spec.time(ctx.t_idx);
            if !(s >= -spec.h - 1e-12 * (1.0 + spec.h)) {
                return Err(Error::Expr(format!("x evaluated at {s}, before the start of the grid")));
            }
            // x(s ^ t), with exact node reads where possible
            let s = s.clamp(-spec.h, now);
            if s == now {
                ctx.path.at(ctx.t_idx)[*coord]
            } else {
                ctx.path.value_at(s)[*coord]
            }
        }
        Node::Neg(a) => -eval(a, ctx)?,
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, ctx)?, eval(b, ctx)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => {
                    if b.fract() == 0.0 && b.abs() <= 64.0 {
                        a.powi(b as i32)
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
        Node::Call(f, args) => {
            let vals: Vec<f64> = args.iter().map(|a| eval(a, ctx)).collect::<Result<_>>()?;
            match f {
                Func::Abs => vals[0].abs(),
                Func::Sqrt => vals[0].sqrt(),
                Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse().map_err(|_| Error::Expr(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()[],".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character `{c}` in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Expr(format!("expected `{c}`, found {:?}", self.peek())))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn index(&mut self) -> Result<usize> {
        if !self.eat('[') {
            return Ok(0);
        }
        let i = match self.tokens.get(self.pos) {
            Some(Tok::Num(v)) if v.fract() == 0.0 && *v >= 0.0 => *v as usize,
            other => return Err(Error::Expr(format!("expected a coordinate index, found {other:?}"))),
        };
        self.pos += 1;
        self.expect(']')?;
        Ok(i)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self.tokens.get(self.pos).cloned().ok_or_else(|| Error::Expr("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Op(c) => Err(Error::Expr(format!("unexpected `{c}`"))),
            Tok::Ident(name) => match name.as_str() {
                "t" => Ok(Node::Time),
                "T" => Ok(Node::Horizon),
                "h" => Ok(Node::Delay),
                "sup" => Ok(Node::Sup),
                "u" => Ok(Node::Control(self.index()?)),
                "x" => {
                    let coord = self.index()?;
                    self.expect('(')?;
                    let at = self.expr()?;
                    self.expect(')')?;
                    Ok(Node::Path { coord, at: Box::new(at) })
                }
                "abs" | "sqrt" | "max" | "min" => {
                    let f = match name.as_str() {
                        "abs" => Func::Abs,
                        "sqrt" => Func::Sqrt,
                        "max" => Func::Max,
                        _ => Func::Min,
                    };
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    let ok = match f {
                        Func::Abs | Func::Sqrt => args.len() == 1,
                        Func::Max | Func::Min => args.len() >= 2,
                    };
                    if !ok {
                        return Err(Error::Expr(format!("wrong number of arguments to `{name}`")));
                    }
                    Ok(Node::Call(f, args))
                }
                other => Err(Error::Expr(format!("unknown name `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_space::GridSpec;

    fn path() -> GridPath {
        // nodes -1, -0.5, 0, 0.5, 1 with values 4, -3, 1, 2, 0
        let s = GridSpec::new(1.0, 1.0, 1, 2, 2).unwrap();
        GridPath::scalar(s, &[4.0, -3.0, 1.0, 2.0, 0.0]).unwrap()
    }

    fn at(src: &str, t_idx: usize, u: &[f64]) -> f64 {
        let p = path();
        Expr::parse(src).unwrap().eval(&Context { t_idx, path: &p, control: u }).unwrap()
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(at("1 + 2 * 3", 0, &[]), 7.0);
        assert_eq!(at("(1 + 2) * 3", 0, &[]), 9.0);
        assert_eq!(at("-2^2", 0, &[]), -4.0);
        assert_eq!(at("2^-1", 0, &[]), 0.5);
        assert_eq!(at("8 / 2 / 2", 0, &[]), 2.0);
        assert_eq!(at("1.5e1 - 5", 0, &[]), 10.0);
        assert_eq!(at("max(1, -3, 2) + min(4, 0.5) + abs(-1) + sqrt(9)", 0, &[]), 6.5);
    }

    #[test]
    fn path_reads() {
        assert_eq!(at("x(t)", 1, &[]), 2.0);
        assert_eq!(at("x(t - h)", 2, &[]), 1.0);
        assert_eq!(at("x(t - h)", 1, &[]), -3.0);
        assert_eq!(at("x[0](t - 0.25)", 2, &[]), 1.0);
        assert_eq!(at("x[0](t - 0.75)", 2, &[]), 1.5);
        // reads past t see the stopped path
        assert_eq!(at("x(T)", 1, &[]), 2.0);
        assert_eq!(at("sup", 0, &[]), 4.0);
        assert_eq!(at("t + T + h", 1, &[]), 2.5);
        assert_eq!(at("u * x(t) + u[1]", 2, &[2.0, 3.0]), 3.0);
    }

    #[test]
    fn errors() {
        for bad in ["1 +", "foo", "x t", "max(1)", "abs(1, 2)", "1 $ 2", "(1", "x[a](t)"] {
            assert!(matches!(Expr::parse(bad), Err(Error::Expr(_))), "{bad}");
        }
        let e = Expr::parse("x[1](t) + u").unwrap();
        assert!(e.check_dims(1, 1).is_err());
        assert!(e.check_dims(2, 0).is_err());
        assert!(e.check_dims(2, 1).is_ok());
        let p = path();
        let r = Expr::parse("1 / (x(t) - 1)").unwrap().eval(&Context { t_idx: 0, path: &p, control: &[] });
        assert!(matches!(r, Err(Error::Expr(_))));
        let r = Expr::parse("x(t - 5)").unwrap().eval(&Context { t_idx: 0, path: &p, control: &[] });
        assert!(r.is_err());
    }
}
