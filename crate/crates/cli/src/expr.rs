//! Tiny arithmetic expressions over terminal path values.
//!
//! Grammar: `+ - * / ^` with parentheses, unary minus, and the functions
//! exp, log, sin, cos, sqrt, abs, tanh. Identifiers `x1..xm` read the state
//! terminal, `b1..bd` the driver terminal. That is the whole language:
//! functionals needing more than terminal values are presets, not
//! expressions.

use diffvar_core::error::{Error, Result};
use diffvar_core::functional::PathFunctional;
use diffvar_core::grid::Path;

#[derive(Debug, Clone)]
enum Node {
    Number(f64),
    StateCoord(usize),
    DriverCoord(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy)]
enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Tanh,
}

impl Node {
    fn eval(&self, x: &[f64], b: &[f64]) -> f64 {
        match self {
            Node::Number(v) => *v,
            Node::StateCoord(i) => x[*i],
            Node::DriverCoord(i) => b[*i],
            Node::Neg(n) => -n.eval(x, b),
            Node::Add(l, r) => l.eval(x, b) + r.eval(x, b),
            Node::Sub(l, r) => l.eval(x, b) - r.eval(x, b),
            Node::Mul(l, r) => l.eval(x, b) * r.eval(x, b),
            Node::Div(l, r) => l.eval(x, b) / r.eval(x, b),
            Node::Pow(l, r) => l.eval(x, b).powf(r.eval(x, b)),
            Node::Call(f, n) => {
                let v = n.eval(x, b);
                match f {
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Sqrt => v.sqrt(),
                    Func::Abs => v.abs(),
                    Func::Tanh => v.tanh(),
                }
            }
        }
    }
}

/// A compiled expression usable as a path functional.
#[derive(Debug, Clone)]
pub struct ExprFunctional {
    root: Node,
}

impl PathFunctional for ExprFunctional {
    fn eval(&self, x: &Path, beta: &Path) -> f64 {
        self.root.eval(x.terminal(), beta.terminal())
    }
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    m: usize,
    d: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::invalid(format!("expression {:?}: {msg}", self.src))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        self.skip_ws();
        let c = self.chars.get(self.pos).copied();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.bump() {
            Some(x) if x == c => Ok(()),
            other => Err(self.error(&format!("expected {c:?}, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.bump();
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some('-') => {
                    self.bump();
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.power()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.bump();
                    node = Node::Mul(Box::new(node), Box::new(self.power()?));
                }
                Some('/') => {
                    self.bump();
                    node = Node::Div(Box::new(node), Box::new(self.power()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.unary()?;
        if self.peek() == Some('^') {
            self.bump();
            // Right-associative.
            let exp = self.power()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some('-') {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node> {
        match self.peek() {
            Some('(') => {
                self.bump();
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            other => Err(self.error(&format!("unexpected token {other:?}"))),
        }
    }

    fn number(&mut self) -> Result<Node> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let exp_sign = (c == '+' || c == '-')
                && self.pos > start
                && matches!(self.chars[self.pos - 1], 'e' | 'E');
            if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse()
            .map(Node::Number)
            .map_err(|_| self.error(&format!("bad number {text:?}")))
    }

    fn ident(&mut self) -> Result<Node> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == '_')
        {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        let func = match name.as_str() {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            "tanh" => Some(Func::Tanh),
            _ => None,
        };
        if let Some(f) = func {
            self.expect('(')?;
            let arg = self.expr()?;
            self.expect(')')?;
            return Ok(Node::Call(f, Box::new(arg)));
        }
        if let Some(rest) = name.strip_prefix('x') {
            let i: usize = rest
                .parse()
                .map_err(|_| self.error(&format!("bad state coordinate {name:?}")))?;
            if i == 0 || i > self.m {
                return Err(self.error(&format!("state coordinate {name} out of range 1..={}", self.m)));
            }
            return Ok(Node::StateCoord(i - 1));
        }
        if let Some(rest) = name.strip_prefix('b') {
            let i: usize = rest
                .parse()
                .map_err(|_| self.error(&format!("bad driver coordinate {name:?}")))?;
            if i == 0 || i > self.d {
                return Err(self.error(&format!(
                    "driver coordinate {name} out of range 1..={}",
                    self.d
                )));
            }
            return Ok(Node::DriverCoord(i - 1));
        }
        Err(self.error(&format!("unknown identifier {name:?}")))
    }
}

/// Parse an expression against a system with `m` state and `d` driver
/// coordinates.
pub fn parse_expr(src: &str, m: usize, d: usize) -> Result<ExprFunctional> {
    let mut p = Parser {
        chars: src.chars().collect(),
        pos: 0,
        m,
        d,
        src,
    };
    let root = p.expr()?;
    p.skip_ws();
    if p.pos != p.chars.len() {
        return Err(p.error("trailing characters"));
    }
    Ok(ExprFunctional { root })
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffvar_core::grid::TimeGrid;

    fn paths(x_end: f64, b_end: f64) -> (Path, Path) {
        let grid = TimeGrid::new(1).unwrap();
        (
            Path::new(grid, 1, vec![0.0, x_end]).unwrap(),
            Path::new(grid, 1, vec![0.0, b_end]).unwrap(),
        )
    }

    #[test]
    fn arithmetic_and_precedence() {
        let f = parse_expr("1 + 2 * x1 ^ 2 - 3 / 2", 1, 1).unwrap();
        let (x, b) = paths(3.0, 0.0);
        assert!((f.eval(&x, &b) - (1.0 + 18.0 - 1.5)).abs() < 1e-15);
    }

    #[test]
    fn functions_and_unary_minus() {
        let f = parse_expr("exp(-x1) + abs(b1)", 1, 1).unwrap();
        let (x, b) = paths(1.0, -2.0);
        assert!((f.eval(&x, &b) - ((-1.0f64).exp() + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn power_is_right_associative() {
        let f = parse_expr("2 ^ 3 ^ 2", 1, 1).unwrap();
        let (x, b) = paths(0.0, 0.0);
        assert_eq!(f.eval(&x, &b), 512.0);
    }

    #[test]
    fn coordinates_are_validated() {
        assert!(parse_expr("x2", 1, 1).is_err());
        assert!(parse_expr("b3", 2, 2).is_err());
        assert!(parse_expr("y1", 1, 1).is_err());
        assert!(parse_expr("x1 +", 1, 1).is_err());
        assert!(parse_expr("sin x1", 1, 1).is_err());
    }

    #[test]
    fn scientific_numbers() {
        let f = parse_expr("1.5e-1 * x1", 1, 1).unwrap();
        let (x, b) = paths(2.0, 0.0);
        assert!((f.eval(&x, &b) - 0.3).abs() < 1e-15);
    }
}
