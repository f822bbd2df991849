//! Predictive query language: `PREDICT <target> FOR EACH <table>.<pk>`.

mod compile;
mod lexer;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use compile::parse_bool;
pub use compile::{compile, CompiledPredicate, EntitySpec, LabelSpec, PredValue, TaskPlan, TaskType, OTHER_CLASS};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse_tokens;

/// Character range `[start, end)` in the query text. Spans are diagnostic only and
/// compare equal regardless of position, so ASTs compare structurally.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Span {
        Span { start, end }
    }

    pub fn join(self, other: Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }

    /// 1-based column of the first character.
    pub fn column(&self) -> usize {
        self.start + 1
    }
}

impl PartialEq for Span {
    fn eq(&self, _: &Span) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PqlError {
    #[error("lexical error at column {}: {message}", span.column())]
    Lex { span: Span, message: String },
    #[error("syntax error at column {}: expected {}, found {found}", span.column(), expected.join(" or "))]
    Syntax {
        span: Span,
        expected: Vec<String>,
        found: String,
    },
    #[error("error at column {}: {message}", span.column())]
    Compile { span: Span, message: String },
}

impl PqlError {
    pub fn span(&self) -> Span {
        match self {
            PqlError::Lex { span, .. } | PqlError::Syntax { span, .. } | PqlError::Compile { span, .. } => *span,
        }
    }

    pub fn column(&self) -> usize {
        self.span().column()
    }

    /// Renders the error with the query text and a caret under the offending span.
    pub fn render(&self, query: &str) -> String {
        let span = self.span();
        let width = span.end.saturating_sub(span.start).max(1);
        format!("{self}\n  {query}\n  {}{}", " ".repeat(span.start), "^".repeat(width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ident {
    pub name: String,
    pub span: Span,
}

impl Ident {
    pub fn new(name: &str) -> Ident {
        Ident {
            name: name.to_string(),
            span: Span::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: Ident,
    pub column: Ident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFn {
    pub fn as_str(self) -> &'static str {
        match self {
            AggFn::Count => "COUNT",
            AggFn::Sum => "SUM",
            AggFn::Avg => "AVG",
            AggFn::Min => "MIN",
            AggFn::Max => "MAX",
        }
    }

    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeUnit {
    Days,
    Hours,
}

impl TimeUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeUnit::Days => "days",
            TimeUnit::Hours => "hours",
        }
    }

    pub fn millis(self) -> i64 {
        match self {
            TimeUnit::Days => crate::time::MS_PER_DAY,
            TimeUnit::Hours => crate::time::MS_PER_HOUR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn apply<T: PartialOrd>(self, a: T, b: T) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }

    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl Literal {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Float(f) => Some(*f),
            Literal::Bool(b) => Some(*b as i64 as f64),
            Literal::Str(_) => None,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => write!(f, "{x:?}"),
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Bool(b) => write!(f, "{}", if *b { "TRUE" } else { "FALSE" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    /// Optional `table.` qualifier as written.
    pub table: Option<Ident>,
    pub column: Ident,
    pub op: CmpOp,
    pub value: Literal,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggExpr {
    pub func: AggFn,
    pub table: Ident,
    /// `None` for `table.*`.
    pub column: Option<Ident>,
    pub start: i64,
    pub end: i64,
    pub unit: TimeUnit,
    pub filter: Vec<Predicate>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Agg(AggExpr),
    Column(ColumnRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub op: CmpOp,
    pub value: Literal,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub target: Target,
    pub comparison: Option<Comparison>,
    pub entity: ColumnRef,
}

/// Tokenizes and parses query text.
pub fn parse(text: &str) -> Result<QueryAst, PqlError> {
    parse_tokens(&tokenize(text)?)
}

/// Canonical single-line rendering: upper-case keywords, lower-case units, single
/// spaces.
pub fn pretty_print(ast: &QueryAst) -> String {
    let mut s = String::from("PREDICT ");
    match &ast.target {
        Target::Agg(a) => {
            s.push_str(a.func.as_str());
            s.push('(');
            s.push_str(&a.table.name);
            s.push('.');
            match &a.column {
                Some(c) => s.push_str(&c.name),
                None => s.push('*'),
            }
            s.push_str(&format!(", {}, {}, {}", a.start, a.end, a.unit.as_str()));
            for (i, p) in a.filter.iter().enumerate() {
                s.push_str(if i == 0 { ", WHERE " } else { " AND " });
                if let Some(t) = &p.table {
                    s.push_str(&t.name);
                    s.push('.');
                }
                s.push_str(&format!("{} {} {}", p.column.name, p.op.as_str(), p.value));
            }
            s.push(')');
        }
        Target::Column(c) => s.push_str(&format!("{}.{}", c.table.name, c.column.name)),
    }
    if let Some(c) = &ast.comparison {
        s.push_str(&format!(" {} {}", c.op.as_str(), c.value));
    }
    s.push_str(&format!(
        " FOR EACH {}.{}",
        ast.entity.table.name, ast.entity.column.name
    ));
    s
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_print(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_query_round_trip() {
        let q = "PREDICT COUNT(orders.*, 0, 30, days)=0 FOR EACH users.user_id";
        let ast = parse(q).unwrap();
        let canon = pretty_print(&ast);
        assert_eq!(canon, "PREDICT COUNT(orders.*, 0, 30, days) = 0 FOR EACH users.user_id");
        assert_eq!(parse(&canon).unwrap(), ast);
        assert_eq!(pretty_print(&parse(&canon).unwrap()), canon);
    }

    #[test]
    fn keyword_case_and_whitespace_normalized() {
        let a = parse("predict   sum(orders.total,0,7,DAYS)\n for each users.user_id").unwrap();
        assert_eq!(
            pretty_print(&a),
            "PREDICT SUM(orders.total, 0, 7, days) FOR EACH users.user_id"
        );
    }

    #[test]
    fn where_clause_round_trip() {
        let q = "PREDICT COUNT(orders.*, -7, 0, hours, WHERE price > 1.5 AND orders.kind = 'a''b') >= 2 FOR EACH users.user_id";
        let ast = parse(q).unwrap();
        assert_eq!(pretty_print(&ast), q);
    }

    #[test]
    fn render_points_at_span() {
        let err = parse("PREDICT @").unwrap_err();
        let r = err.render("PREDICT @");
        assert!(r.ends_with("        ^"));
    }
}
