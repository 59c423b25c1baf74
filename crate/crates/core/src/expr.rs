//! Scalar expression language for scenario files.
//!
//! Expressions are parsed once into an immutable tree and evaluated with
//! double precision. The grammar is deliberately small:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | name | name '(' expr (',' expr)? ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus (`-x^2 == -(x^2)`) and is right
//! associative. Variables are `x`, `t` and, in field contexts only, `u`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: expected {}", .expected.join(" or "))]
    Syntax { offset: usize, expected: Vec<String> },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("empty expression")]
    Empty,
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => {
                *offset
            }
            ParseError::Empty => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("variable `{0}` is not bound in this context")]
    Unbound(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    T,
    U,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::T => "t",
            Var::U => "u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func1 {
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sech,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func2 {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// Values bound to the expression variables.
#[derive(Debug, Clone, Copy)]
pub struct Bindings {
    pub x: f64,
    pub t: f64,
    pub u: Option<f64>,
}

/// A parsed, immutable scalar expression.
#[derive(Debug, Clone)]
pub struct Expression {
    source: String,
    root: Node,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

/// Parses an expression in the variables `x` and `t`.
pub fn parse(source: &str) -> Result<Expression, ParseError> {
    Expression::parse_with(source, &[Var::X, Var::T])
}

/// Parses an expression that may additionally use the velocity variable `u`.
pub fn parse_field(source: &str) -> Result<Expression, ParseError> {
    Expression::parse_with(source, &[Var::X, Var::T, Var::U])
}

impl Expression {
    pub fn parse_with(source: &str, allowed: &[Var]) -> Result<Self, ParseError> {
        if source.trim().is_empty() {
            return Err(ParseError::Empty);
        }
        let tokens = lex(source)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            allowed,
            end: source.len(),
        };
        let root = parser.expr()?;
        if parser.pos < tokens.len() {
            return Err(ParseError::Syntax {
                offset: tokens[parser.pos].offset,
                expected: vec!["operator".into(), "end of input".into()],
            });
        }
        Ok(Expression {
            source: source.to_string(),
            root,
        })
    }

    pub fn constant(value: f64) -> Self {
        Expression {
            source: format!("{value:?}"),
            root: Node::Const(value),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn depends_on(&self, var: Var) -> bool {
        fn walk(n: &Node, v: Var) -> bool {
            match n {
                Node::Const(_) => false,
                Node::Var(w) => *w == v,
                Node::Neg(a) | Node::Call1(_, a) => walk(a, v),
                Node::Bin(_, a, b) | Node::Call2(_, a, b) => walk(a, v) || walk(b, v),
            }
        }
        walk(&self.root, var)
    }

    /// True when the expression uses no variables at all.
    pub fn is_constant(&self) -> bool {
        !self.depends_on(Var::X) && !self.depends_on(Var::T) && !self.depends_on(Var::U)
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        self.eval_with(&Bindings { x, t, u: None })
    }

    pub fn eval_field(&self, x: f64, t: f64, u: f64) -> Result<f64, EvalError> {
        self.eval_with(&Bindings { x, t, u: Some(u) })
    }

    pub fn eval_with(&self, b: &Bindings) -> Result<f64, EvalError> {
        let v = eval_node(&self.root, b)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::Domain(format!("non-finite result in `{}`", self.source)))
        }
    }
}

impl fmt::Display for Expression {
    /// Fully parenthesised rendering that re-parses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Const(c) if *c < 0.0 => write!(f, "(-{:?})", -c),
        Node::Const(c) => write!(f, "{c:?}"),
        Node::Var(v) => write!(f, "{}", v.name()),
        Node::Neg(a) => {
            write!(f, "(-")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Bin(op, a, b) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            write!(f, "(")?;
            write_node(a, f)?;
            write!(f, "{sym}")?;
            write_node(b, f)?;
            write!(f, ")")
        }
        Node::Call1(func, a) => {
            write!(f, "{}(", func1_name(*func))?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Call2(func, a, b) => {
            let name = match func {
                Func2::Min => "min",
                Func2::Max => "max",
            };
            write!(f, "{name}(")?;
            write_node(a, f)?;
            write!(f, ",")?;
            write_node(b, f)?;
            write!(f, ")")
        }
    }
}

fn func1_name(f: Func1) -> &'static str {
    match f {
        Func1::Exp => "exp",
        Func1::Log => "log",
        Func1::Sin => "sin",
        Func1::Cos => "cos",
        Func1::Tanh => "tanh",
        Func1::Sech => "sech",
        Func1::Abs => "abs",
    }
}

fn eval_node(n: &Node, b: &Bindings) -> Result<f64, EvalError> {
    Ok(match n {
        Node::Const(c) => *c,
        Node::Var(Var::X) => b.x,
        Node::Var(Var::T) => b.t,
        Node::Var(Var::U) => b.u.ok_or(EvalError::Unbound("u"))?,
        Node::Neg(a) => -eval_node(a, b)?,
        Node::Bin(op, l, r) => {
            let l = eval_node(l, b)?;
            let r = eval_node(r, b)?;
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r == 0.0 {
                        return Err(EvalError::Domain("division by zero".into()));
                    }
                    l / r
                }
                BinOp::Pow => {
                    let v = l.powf(r);
                    if !v.is_finite() {
                        return Err(EvalError::Domain(format!("{l}^{r} is not a finite real")));
                    }
                    v
                }
            }
        }
        Node::Call1(func, a) => {
            let a = eval_node(a, b)?;
            match func {
                Func1::Exp => a.exp(),
                Func1::Log => {
                    if a <= 0.0 {
                        return Err(EvalError::Domain(format!("log of non-positive value {a}")));
                    }
                    a.ln()
                }
                Func1::Sin => a.sin(),
                Func1::Cos => a.cos(),
                Func1::Tanh => a.tanh(),
                Func1::Sech => {
                    // cosh overflows near |a|=710 where sech is already 0
                    if a.abs() > 700.0 {
                        0.0
                    } else {
                        1.0 / a.cosh()
                    }
                }
                Func1::Abs => a.abs(),
            }
        }
        Node::Call2(func, l, r) => {
            let l = eval_node(l, b)?;
            let r = eval_node(r, b)?;
            match func {
                Func2::Min => l.min(r),
                Func2::Max => l.max(r),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
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
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    expected: vec!["number".into()],
                })?;
                out.push(Token {
                    tok: Tok::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(src[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset: start,
                    expected: vec!["number".into(), "identifier".into(), "operator".into()],
                })
            }
        };
        out.push(Token { tok, offset: start });
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    allowed: &'a [Var],
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |t| t.offset)
    }

    fn expect(&mut self, tok: Tok, name: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::Syntax {
                offset: self.offset(),
                expected: vec![name.to_string()],
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let offset = self.offset();
        let tok = match self.tokens.get(self.pos) {
            Some(t) => t.tok.clone(),
            None => {
                return Err(ParseError::Syntax {
                    offset,
                    expected: vec![
                        "number".into(),
                        "identifier".into(),
                        "`(`".into(),
                        "`-`".into(),
                    ],
                })
            }
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    self.pos += 1;
                    self.call(&name, offset)
                } else {
                    self.name(&name, offset)
                }
            }
            _ => Err(ParseError::Syntax {
                offset,
                expected: vec![
                    "number".into(),
                    "identifier".into(),
                    "`(`".into(),
                    "`-`".into(),
                ],
            }),
        }
    }

    fn name(&self, name: &str, offset: usize) -> Result<Node, ParseError> {
        let var = match name {
            "x" => Var::X,
            "t" => Var::T,
            "u" => Var::U,
            "pi" => return Ok(Node::Const(std::f64::consts::PI)),
            _ => {
                return Err(ParseError::UnknownIdentifier {
                    name: name.to_string(),
                    offset,
                })
            }
        };
        if self.allowed.contains(&var) {
            Ok(Node::Var(var))
        } else {
            Err(ParseError::UnknownIdentifier {
                name: name.to_string(),
                offset,
            })
        }
    }

    fn call(&mut self, name: &str, offset: usize) -> Result<Node, ParseError> {
        let f1 = match name {
            "exp" => Some(Func1::Exp),
            "log" => Some(Func1::Log),
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "tanh" => Some(Func1::Tanh),
            "sech" => Some(Func1::Sech),
            "abs" => Some(Func1::Abs),
            _ => None,
        };
        if let Some(f) = f1 {
            let arg = self.expr()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(Node::Call1(f, Box::new(arg)));
        }
        let f2 = match name {
            "min" => Func2::Min,
            "max" => Func2::Max,
            _ => {
                return Err(ParseError::UnknownIdentifier {
                    name: name.to_string(),
                    offset,
                })
            }
        };
        let a = self.expr()?;
        self.expect(Tok::Comma, "`,`")?;
        let b = self.expr()?;
        self.expect(Tok::RParen, "`)`")?;
        Ok(Node::Call2(f2, Box::new(a), Box::new(b)))
    }
}
