//! Expression trees and a recursive-descent parser.
//!
//! Precedence, loosest first: `||`, `&&`, prefix `!`, comparisons,
//! `+ -`, `* /`, unary `-`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("function {name} takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown identifier {0}")]
    UnknownIdentifier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Abs,
    Log,
    Exp,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "log" => Func::Log,
            "exp" => Func::Exp,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Log => "log",
            Func::Exp => "exp",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Col(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn col(name: &str) -> Expr {
        Expr::Col(name.to_owned())
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Expr {
        Expr::Call(f, args)
    }

    /// Every column identifier the expression references.
    pub fn identifiers(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_identifiers(&mut out);
        out
    }

    fn collect_identifiers(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Col(name) => {
                out.insert(name.clone());
            }
            Expr::Unary(_, e) => e.collect_identifiers(out),
            Expr::Binary(_, a, b) => {
                a.collect_identifiers(out);
                b.collect_identifiers(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_identifiers(out)),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Col(name) => write!(f, "{name}"),
            Expr::Unary(UnaryOp::Neg, e) => write!(f, "(-{e})"),
            Expr::Unary(UnaryOp::Not, e) => write!(f, "(!{e})"),
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Lt => "<",
                    BinOp::Le => "<=",
                    BinOp::Gt => ">",
                    BinOp::Ge => ">=",
                    BinOp::Eq => "==",
                    BinOp::Ne => "!=",
                    BinOp::And => "&&",
                    BinOp::Or => "||",
                };
                write!(f, "({a} {sym} {b})")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(usize, Tok)>, ExprError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        loop {
            let (at, tok) = lx.next()?;
            let end = tok == Tok::End;
            out.push((at, tok));
            if end {
                return Ok(out);
            }
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), ExprError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((start, Tok::End));
        };
        let two = self.src.get(self.pos..self.pos + 2);
        for op in ["<=", ">=", "==", "!=", "&&", "||"] {
            if two == Some(op) {
                self.pos += 2;
                return Ok((start, Tok::Op(op)));
            }
        }
        let single = match c {
            b'+' => Some(Tok::Op("+")),
            b'-' => Some(Tok::Op("-")),
            b'*' => Some(Tok::Op("*")),
            b'/' => Some(Tok::Op("/")),
            b'<' => Some(Tok::Op("<")),
            b'>' => Some(Tok::Op(">")),
            b'!' => Some(Tok::Op("!")),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            return Ok((start, tok));
        }
        if c.is_ascii_digit() || c == b'.' {
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                let mut p = self.pos + 1;
                if p < bytes.len() && (bytes[p] == b'+' || bytes[p] == b'-') {
                    p += 1;
                }
                if p < bytes.len() && bytes[p].is_ascii_digit() {
                    while p < bytes.len() && bytes[p].is_ascii_digit() {
                        p += 1;
                    }
                    self.pos = p;
                }
            }
            let text = &self.src[start..self.pos];
            let v = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                offset: start,
                message: format!("bad number {text:?}"),
            })?;
            return Ok((start, Tok::Num(v)));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            return Ok((start, Tok::Ident(self.src[start..self.pos].to_owned())));
        }
        Err(ExprError::Syntax {
            offset: start,
            message: format!("unexpected character {:?}", self.src[start..].chars().next().unwrap()),
        })
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    i: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].1
    }

    fn offset(&self) -> usize {
        self.toks[self.i].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.i].1.clone();
        if t != Tok::End {
            self.i += 1;
        }
        t
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<&'static str> {
        if let Tok::Op(op) = self.peek() {
            if let Some(&hit) = ops.iter().find(|o| *o == op) {
                self.bump();
                return Some(hit);
            }
        }
        None
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and()?;
        while self.eat_op(&["||"]).is_some() {
            lhs = Expr::bin(BinOp::Or, lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.not()?;
        while self.eat_op(&["&&"]).is_some() {
            lhs = Expr::bin(BinOp::And, lhs, self.not()?);
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, ExprError> {
        if self.eat_op(&["!"]).is_some() {
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.add()?;
        while let Some(op) = self.eat_op(&["<", "<=", ">", ">=", "==", "!="]) {
            let op = match op {
                "<" => BinOp::Lt,
                "<=" => BinOp::Le,
                ">" => BinOp::Gt,
                ">=" => BinOp::Ge,
                "==" => BinOp::Eq,
                _ => BinOp::Ne,
            };
            lhs = Expr::bin(op, lhs, self.add()?);
        }
        Ok(lhs)
    }

    fn add(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.mul()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            let op = if op == "+" { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::bin(op, lhs, self.mul()?);
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/"]) {
            let op = if op == "*" { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::bin(op, lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat_op(&["-"]).is_some() {
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() != Tok::LParen {
                    return Ok(Expr::Col(name));
                }
                let func = Func::lookup(&name).ok_or_else(|| ExprError::UnknownFunction(name.clone()))?;
                self.bump();
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        args.push(self.or()?);
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                if *self.peek() != Tok::RParen {
                    return self.error("expected ')'");
                }
                self.bump();
                if args.len() != func.arity() {
                    return Err(ExprError::Arity {
                        name,
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or()?;
                if *self.peek() != Tok::RParen {
                    return self.error("expected ')'");
                }
                self.bump();
                Ok(inner)
            }
            Tok::End => self.error("unexpected end of input"),
            other => self.error(format!("unexpected token {other:?}")),
        }
    }
}

/// Parses `text`, requiring the whole input to be consumed.
pub fn parse_expr(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        toks: Lexer::tokens(text)?,
        i: 0,
    };
    let expr = p.or()?;
    if *p.peek() != Tok::End {
        return p.error("trailing input");
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(name: &str) -> Expr {
        Expr::col(name)
    }

    fn n(v: f64) -> Expr {
        Expr::num(v)
    }

    #[test]
    fn cut_expression() {
        let e = parse_expr("pt > 20 && abs(eta) < 2.4").unwrap();
        let want = Expr::bin(
            BinOp::And,
            Expr::bin(BinOp::Gt, c("pt"), n(20.0)),
            Expr::bin(BinOp::Lt, Expr::call(Func::Abs, vec![c("eta")]), n(2.4)),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn transverse_momentum() {
        let e = parse_expr("sqrt(px*px + py*py)").unwrap();
        let want = Expr::call(
            Func::Sqrt,
            vec![Expr::bin(
                BinOp::Add,
                Expr::bin(BinOp::Mul, c("px"), c("px")),
                Expr::bin(BinOp::Mul, c("py"), c("py")),
            )],
        );
        assert_eq!(e, want);
    }

    #[test]
    fn dangling_operator_reports_offset() {
        match parse_expr("pt >").unwrap_err() {
            ExprError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn precedence_ladder() {
        // unary binds tighter than *, * tighter than +, + tighter than <,
        // < tighter than !, ! tighter than &&, && tighter than ||.
        let e = parse_expr("-a * b + c < d || !e > 1 && f").unwrap();
        let lhs = Expr::bin(
            BinOp::Lt,
            Expr::bin(
                BinOp::Add,
                Expr::bin(BinOp::Mul, Expr::Unary(UnaryOp::Neg, Box::new(c("a"))), c("b")),
                c("c"),
            ),
            c("d"),
        );
        let rhs = Expr::bin(
            BinOp::And,
            Expr::Unary(UnaryOp::Not, Box::new(Expr::bin(BinOp::Gt, c("e"), n(1.0)))),
            c("f"),
        );
        assert_eq!(e, Expr::bin(BinOp::Or, lhs, rhs));
    }

    #[test]
    fn parens_and_left_associativity() {
        assert_eq!(
            parse_expr("a - b - c").unwrap(),
            Expr::bin(BinOp::Sub, Expr::bin(BinOp::Sub, c("a"), c("b")), c("c"))
        );
        assert_eq!(
            parse_expr("a - (b - c)").unwrap(),
            Expr::bin(BinOp::Sub, c("a"), Expr::bin(BinOp::Sub, c("b"), c("c")))
        );
        assert_eq!(parse_expr("1.5e3").unwrap(), n(1500.0));
    }

    #[test]
    fn function_errors() {
        assert_eq!(parse_expr("cosh(x)").unwrap_err(), ExprError::UnknownFunction("cosh".into()));
        assert!(matches!(parse_expr("min(x)").unwrap_err(), ExprError::Arity { .. }));
        assert!(matches!(parse_expr("a b").unwrap_err(), ExprError::Syntax { offset: 2, .. }));
        assert!(matches!(parse_expr("(a").unwrap_err(), ExprError::Syntax { offset: 2, .. }));
        assert!(matches!(parse_expr("a $ b").unwrap_err(), ExprError::Syntax { offset: 2, .. }));
    }

    #[test]
    fn display_reparses_to_same_tree() {
        for src in ["sqrt(px*px + py*py)", "!(a<=b) || min(a, -b) != 3", "exp(log(x)) / 2 >= 1"] {
            let e = parse_expr(src).unwrap();
            assert_eq!(parse_expr(&e.to_string()).unwrap(), e);
        }
    }
}
