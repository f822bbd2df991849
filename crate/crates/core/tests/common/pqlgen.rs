//! Random query ASTs for the print/parse round trip.

use proptest::prelude::*;
use relicl::pql::{
    parse, pretty_print, AggExpr, AggFn, CmpOp, ColumnRef, Comparison, Ident, Literal, Predicate, QueryAst, Span,
    Target, TimeUnit,
};

const RESERVED: [&str; 12] = [
    "predict", "for", "each", "where", "and", "count", "sum", "avg", "min", "max", "true", "false",
];

fn ident() -> impl Strategy<Value = Ident> {
    "[a-zA-Z_][a-zA-Z0-9_]{0,9}"
        .prop_filter("reserved word", |s| {
            !RESERVED.contains(&s.to_ascii_lowercase().as_str())
        })
        .prop_map(|s| Ident::new(&s))
}

fn column_ref() -> impl Strategy<Value = ColumnRef> {
    (ident(), ident()).prop_map(|(table, column)| ColumnRef { table, column })
}

fn literal() -> impl Strategy<Value = Literal> {
    prop_oneof![
        (-1_000_000_000_000i64..1_000_000_000_000).prop_map(Literal::Int),
        prop::num::f64::NORMAL.prop_map(Literal::Float),
        (-1000.0f64..1000.0).prop_map(Literal::Float),
        "[a-z' ]{0,6}|\\PC{0,8}".prop_map(Literal::Str),
        prop::bool::ANY.prop_map(Literal::Bool),
    ]
}

fn cmp_op() -> impl Strategy<Value = CmpOp> {
    prop::sample::select(CmpOp::ALL.to_vec())
}

fn predicate() -> impl Strategy<Value = Predicate> {
    (prop::option::of(ident()), ident(), cmp_op(), literal()).prop_map(|(table, column, op, value)| Predicate {
        table,
        column,
        op,
        value,
        span: Span::default(),
    })
}

fn agg() -> impl Strategy<Value = AggExpr> {
    (
        prop::sample::select(AggFn::ALL.to_vec()),
        ident(),
        prop::option::of(ident()),
        -400i64..400,
        1i64..400,
        prop::bool::ANY,
        prop::collection::vec(predicate(), 0..4),
    )
        .prop_map(|(func, table, column, start, len, hours, filter)| AggExpr {
            func,
            table,
            column,
            start,
            end: start + len,
            unit: if hours { TimeUnit::Hours } else { TimeUnit::Days },
            filter,
            span: Span::default(),
        })
}

pub fn query() -> impl Strategy<Value = QueryAst> {
    let agg_query =
        (agg(), prop::option::of((cmp_op(), literal())), column_ref()).prop_map(|(a, cmp, entity)| QueryAst {
            target: Target::Agg(a),
            comparison: cmp.map(|(op, value)| Comparison {
                op,
                value,
                span: Span::default(),
            }),
            entity,
        });
    let column_query = (column_ref(), column_ref()).prop_map(|(c, entity)| QueryAst {
        target: Target::Column(c),
        comparison: None,
        entity,
    });
    prop_oneof![4 => agg_query, 1 => column_query]
}

/// Lower-cases bare keywords and stretches whitespace outside string literals.
pub fn scramble(text: &str, spaces: usize) -> String {
    let mut words = vec![String::new()];
    let mut in_str = false;
    for c in text.chars() {
        if c == '\'' {
            in_str = !in_str;
        }
        if !in_str && c == ' ' {
            words.push(String::new());
        } else {
            words.last_mut().unwrap().push(c);
        }
    }
    let gap = format!("{}\n", " ".repeat(spaces));
    words
        .into_iter()
        .map(|w| match w.as_str() {
            "PREDICT" | "FOR" | "EACH" | "WHERE" | "AND" => w.to_lowercase(),
            _ => w,
        })
        .collect::<Vec<_>>()
        .join(&gap)
}

pub fn check_fixpoint(ast: QueryAst) -> Result<(), TestCaseError> {
    let text = pretty_print(&ast);
    let reparsed = parse(&text).map_err(|e| TestCaseError::fail(e.render(&text)))?;
    prop_assert_eq!(&reparsed, &ast, "{}", text);
    prop_assert_eq!(pretty_print(&reparsed), text);
    Ok(())
}
