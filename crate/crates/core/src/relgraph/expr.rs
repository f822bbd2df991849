//! Arithmetic expressions for derived columns: `+ - * /` over numerical sibling
//! columns and numeric literals, with parentheses. Nulls propagate; division by
//! zero yields null.

use thiserror::Error;

use super::{SemanticType, TableMeta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at offset {pos}")]
    BadChar { ch: char, pos: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token at offset {pos}")]
    UnexpectedToken { pos: usize },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("type mismatch: column '{column}' is {found}, expected numerical")]
    TypeMismatch { column: String, found: SemanticType },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DerivedExpr {
    Column(String),
    Literal(f64),
    Neg(Box<DerivedExpr>),
    Binary(Box<DerivedExpr>, BinOp, Box<DerivedExpr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Op(char),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].1.is_ascii_alphanumeric() || chars[j].1 == '_') {
                j += 1;
            }
            let end = chars.get(j).map_or(src.len(), |c| c.0);
            out.push((Tok::Ident(src[pos..end].to_string()), pos));
            i = j;
        } else if ch.is_ascii_digit() || ch == '.' {
            let mut j = i;
            while j < chars.len() && (chars[j].1.is_ascii_digit() || chars[j].1 == '.') {
                j += 1;
            }
            let end = chars.get(j).map_or(src.len(), |c| c.0);
            let v = src[pos..end]
                .parse::<f64>()
                .map_err(|_| ExprError::BadChar { ch, pos })?;
            out.push((Tok::Num(v), pos));
            i = j;
        } else if "+-*/".contains(ch) {
            out.push((Tok::Op(ch), pos));
            i += 1;
        } else if ch == '(' {
            out.push((Tok::LParen, pos));
            i += 1;
        } else if ch == ')' {
            out.push((Tok::RParen, pos));
            i += 1;
        } else {
            return Err(ExprError::BadChar { ch, pos });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn expr(&mut self) -> Result<DerivedExpr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = DerivedExpr::Binary(Box::new(lhs), op, Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<DerivedExpr, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = DerivedExpr::Binary(Box::new(lhs), op, Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<DerivedExpr, ExprError> {
        let (tok, at) = self.toks.get(self.pos).cloned().ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        match tok {
            Tok::Ident(name) => Ok(DerivedExpr::Column(name)),
            Tok::Num(v) => Ok(DerivedExpr::Literal(v)),
            Tok::Op('-') => Ok(DerivedExpr::Neg(Box::new(self.factor()?))),
            Tok::LParen => {
                let e = self.expr()?;
                match self.toks.get(self.pos) {
                    Some((Tok::RParen, _)) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    Some((_, p)) => Err(ExprError::UnexpectedToken { pos: *p }),
                    None => Err(ExprError::UnexpectedEnd),
                }
            }
            _ => Err(ExprError::UnexpectedToken { pos: at }),
        }
    }
}

impl DerivedExpr {
    pub fn parse(src: &str) -> Result<DerivedExpr, ExprError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.expr()?;
        match p.toks.get(p.pos) {
            None => Ok(e),
            Some((_, pos)) => Err(ExprError::UnexpectedToken { pos: *pos }),
        }
    }

    /// Type-checks against the raw columns of `table`: every reference must be numerical.
    pub fn check(&self, table: &TableMeta) -> Result<(), ExprError> {
        let mut cols = Vec::new();
        self.columns(&mut cols);
        for c in cols {
            let meta = table.column(c).ok_or_else(|| ExprError::UnknownColumn(c.to_string()))?;
            if meta.stype != SemanticType::Numerical {
                return Err(ExprError::TypeMismatch {
                    column: c.to_string(),
                    found: meta.stype,
                });
            }
        }
        Ok(())
    }

    pub fn columns<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            DerivedExpr::Column(c) => out.push(c),
            DerivedExpr::Literal(_) => {}
            DerivedExpr::Neg(e) => e.columns(out),
            DerivedExpr::Binary(a, _, b) => {
                a.columns(out);
                b.columns(out);
            }
        }
    }

    /// Evaluates with a column lookup that returns `None` for nulls.
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        match self {
            DerivedExpr::Column(c) => lookup(c),
            DerivedExpr::Literal(v) => Some(*v),
            DerivedExpr::Neg(e) => e.eval(lookup).map(|v| -v),
            DerivedExpr::Binary(a, op, b) => {
                let (x, y) = (a.eval(lookup)?, b.eval(lookup)?);
                match op {
                    BinOp::Add => Some(x + y),
                    BinOp::Sub => Some(x - y),
                    BinOp::Mul => Some(x * y),
                    BinOp::Div => (y != 0.0).then(|| x / y),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lookup(name: &str) -> Option<f64> {
        match name {
            "price" => Some(2.0),
            "quantity" => Some(3.0),
            "zero" => Some(0.0),
            _ => None,
        }
    }

    #[test]
    fn evaluates_with_precedence() {
        let e = DerivedExpr::parse("price * quantity").unwrap();
        assert_eq!(e.eval(&lookup), Some(6.0));
        let e = DerivedExpr::parse("price + quantity * 2").unwrap();
        assert_eq!(e.eval(&lookup), Some(8.0));
        let e = DerivedExpr::parse("(price + quantity) * -2").unwrap();
        assert_eq!(e.eval(&lookup), Some(-10.0));
        let e = DerivedExpr::parse("price - quantity - 1").unwrap();
        assert_eq!(e.eval(&lookup), Some(-2.0));
    }

    #[test]
    fn nulls_propagate() {
        let e = DerivedExpr::parse("price * missing").unwrap();
        assert_eq!(e.eval(&lookup), None);
        let e = DerivedExpr::parse("price / zero").unwrap();
        assert_eq!(e.eval(&lookup), None);
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(DerivedExpr::parse("price *"), Err(ExprError::UnexpectedEnd)));
        assert!(matches!(
            DerivedExpr::parse("price $ 2"),
            Err(ExprError::BadChar { ch: '$', pos: 6 })
        ));
        assert!(DerivedExpr::parse("(price").is_err());
        assert!(DerivedExpr::parse("price quantity").is_err());
    }
}
