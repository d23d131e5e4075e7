//! Tiny arithmetic expression language for custom model coefficients.
//!
//! Variables `theta`, `x`, `y`; constants `pi`, `e`; functions `sin cos tan
//! exp ln log sqrt abs tanh sinh cosh`; operators `+ - * / ^` (`^` binds
//! right).

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub source: String,
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at column {} in `{}`", self.message, self.position + 1, self.source)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    Theta,
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Tanh,
    Sinh,
    Cosh,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
            Func::Tanh => v.tanh(),
            Func::Sinh => v.sinh(),
            Func::Cosh => v.cosh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(Var::Theta) => t,
            Node::Var(Var::X) => x,
            Node::Var(Var::Y) => y,
            Node::Neg(a) => -a.eval(t, x, y),
            Node::Add(a, b) => a.eval(t, x, y) + b.eval(t, x, y),
            Node::Sub(a, b) => a.eval(t, x, y) - b.eval(t, x, y),
            Node::Mul(a, b) => a.eval(t, x, y) * b.eval(t, x, y),
            Node::Div(a, b) => a.eval(t, x, y) / b.eval(t, x, y),
            Node::Pow(a, b) => {
                let (base, ex) = (a.eval(t, x, y), b.eval(t, x, y));
                if ex == 2.0 {
                    base * base
                } else if ex.fract() == 0.0 && ex.abs() < 64.0 {
                    base.powi(ex as i32)
                } else {
                    base.powf(ex)
                }
            }
            Node::Call(f, a) => f.apply(a.eval(t, x, y)),
        }
    }

    fn uses(&self, v: Var) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(w) => *w == v,
            Node::Neg(a) | Node::Call(_, a) => a.uses(v),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.uses(v) || b.uses(v)
            }
        }
    }
}

/// A parsed expression in `(theta, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let mut p = Parser { src: source, bytes: source.as_bytes(), pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self { source: source.to_string(), root })
    }

    pub fn eval(&self, theta: f64, x: f64, y: f64) -> f64 {
        self.root.eval(theta, x, y)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_theta(&self) -> bool {
        self.root.uses(Var::Theta)
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ParseError {
        ParseError { source: self.src.to_string(), position: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            // -x^2 parses as -(x^2); 2^-1 is allowed
            let ex = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(ex)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                match name {
                    "theta" => return Ok(Node::Var(Var::Theta)),
                    "x" => return Ok(Node::Var(Var::X)),
                    "y" => return Ok(Node::Var(Var::Y)),
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "e" => return Ok(Node::Num(std::f64::consts::E)),
                    _ => {}
                }
                let Some(func) = Func::lookup(name) else {
                    self.pos = start;
                    return Err(self.error(&format!("unknown identifier `{name}`")));
                };
                if !self.eat(b'(') {
                    return Err(self.error(&format!("expected `(` after `{name}`")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(Node::Call(func, Box::new(arg)))
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos].is_ascii_digit() {
                while self.pos < b.len() && b[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        self.src[start..self.pos].parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error("malformed number")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, t: f64, x: f64, y: f64) -> f64 {
        Expr::parse(s).unwrap().eval(t, x, y)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0, 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0, 0.0, 0.0), 512.0);
        assert_eq!(ev("-x^2", 0.0, 3.0, 0.0), -9.0);
        assert_eq!(ev("8 / 4 / 2", 0.0, 0.0, 0.0), 1.0);
        assert_eq!(ev("2^-1", 0.0, 0.0, 0.0), 0.5);
        assert_eq!(ev("(1 + 2) * 3", 0.0, 0.0, 0.0), 9.0);
    }

    #[test]
    fn registry_coefficients_round_trip() {
        let y = 0.7;
        assert!((ev("sin(y) - cos(y)", 1.0, 0.0, y) - (y.sin() - y.cos())).abs() < 1e-15);
        assert_eq!(ev("theta * x * y^2", 2.0, 3.0, 0.5), 1.5);
        assert_eq!(ev("-y/theta", 2.0, 0.0, 1.0), -0.5);
        assert_eq!(ev("1e-3 * 2E2", 0.0, 0.0, 0.0), 0.2);
        assert!((ev("exp(1) - e", 0.0, 0.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn theta_usage_is_tracked() {
        assert!(Expr::parse("theta*y").unwrap().uses_theta());
        assert!(!Expr::parse("sin(y)").unwrap().uses_theta());
    }

    #[test]
    fn errors_name_the_problem() {
        for (src, pos) in [("1 +", 3), ("foo(y)", 0), ("sin y", 4), ("(1", 2), ("1 2", 2), ("3..1", 0)] {
            let e = Expr::parse(src).unwrap_err();
            assert_eq!(e.position, pos, "{src}: {e}");
        }
    }
}
