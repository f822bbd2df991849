use super::{
    AggExpr, AggFn, CmpOp, ColumnRef, Comparison, Ident, Literal, PqlError, Predicate, QueryAst, Span, Target,
    TimeUnit, Token, TokenKind,
};

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

fn syntax(tok: &Token, expected: &[&str]) -> PqlError {
    PqlError::Syntax {
        span: tok.span,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found: tok.kind.describe(),
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn bump(&mut self) -> &'a Token {
        let t = self.peek();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, kind: TokenKind, what: &str) -> Result<&'a Token, PqlError> {
        let t = self.peek();
        if t.kind == kind {
            Ok(self.bump())
        } else {
            Err(syntax(t, &[what]))
        }
    }

    fn ident(&mut self, what: &str) -> Result<Ident, PqlError> {
        let t = self.peek();
        match &t.kind {
            TokenKind::Ident(name) => {
                self.bump();
                Ok(Ident {
                    name: name.clone(),
                    span: t.span,
                })
            }
            _ => Err(syntax(t, &[what])),
        }
    }

    fn column_ref(&mut self) -> Result<ColumnRef, PqlError> {
        let table = self.ident("table name")?;
        self.expect(TokenKind::Dot, "'.'")?;
        let column = self.ident("column name")?;
        Ok(ColumnRef { table, column })
    }

    fn int(&mut self) -> Result<i64, PqlError> {
        let neg = if self.peek().kind == TokenKind::Minus {
            self.bump();
            true
        } else {
            false
        };
        let t = self.peek();
        match t.kind {
            TokenKind::Int(i) => {
                self.bump();
                Ok(if neg { -i } else { i })
            }
            _ => Err(syntax(t, &["integer"])),
        }
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek().kind {
            TokenKind::Eq => CmpOp::Eq,
            TokenKind::Ne => CmpOp::Ne,
            TokenKind::Lt => CmpOp::Lt,
            TokenKind::Le => CmpOp::Le,
            TokenKind::Gt => CmpOp::Gt,
            TokenKind::Ge => CmpOp::Ge,
            _ => return None,
        };
        self.bump();
        Some(op)
    }

    fn literal(&mut self) -> Result<(Literal, Span), PqlError> {
        let first = self.peek();
        let neg = if first.kind == TokenKind::Minus {
            self.bump();
            true
        } else {
            false
        };
        let t = self.peek();
        let span = first.span.join(t.span);
        let lit = match &t.kind {
            TokenKind::Int(i) => Literal::Int(if neg { -i } else { *i }),
            TokenKind::Float(f) => Literal::Float(if neg { -f } else { *f }),
            TokenKind::Str(s) if !neg => Literal::Str(s.clone()),
            TokenKind::Ident(w) if !neg && w.eq_ignore_ascii_case("true") => Literal::Bool(true),
            TokenKind::Ident(w) if !neg && w.eq_ignore_ascii_case("false") => Literal::Bool(false),
            _ if neg => return Err(syntax(t, &["number"])),
            _ => return Err(syntax(t, &["number", "string", "TRUE", "FALSE"])),
        };
        self.bump();
        Ok((lit, span))
    }

    fn predicate(&mut self) -> Result<Predicate, PqlError> {
        let first = self.ident("column name")?;
        let (table, column) = if self.peek().kind == TokenKind::Dot {
            self.bump();
            (Some(first), self.ident("column name")?)
        } else {
            (None, first)
        };
        let start = table.as_ref().map_or(column.span, |t| t.span);
        let op = self
            .cmp_op()
            .ok_or_else(|| syntax(self.peek(), &["comparison operator"]))?;
        let (value, vspan) = self.literal()?;
        Ok(Predicate {
            table,
            column,
            op,
            value,
            span: start.join(vspan),
        })
    }

    fn agg(&mut self, func: AggFn, start_span: Span) -> Result<AggExpr, PqlError> {
        self.expect(TokenKind::LParen, "'('")?;
        let table = self.ident("table name")?;
        self.expect(TokenKind::Dot, "'.'")?;
        let t = self.peek();
        let column = match &t.kind {
            TokenKind::Star => {
                self.bump();
                None
            }
            TokenKind::Ident(_) => Some(self.ident("column name")?),
            _ => return Err(syntax(t, &["column name", "'*'"])),
        };
        self.expect(TokenKind::Comma, "','")?;
        let win_tok = self.peek();
        let start = self.int()?;
        self.expect(TokenKind::Comma, "','")?;
        let end = self.int()?;
        self.expect(TokenKind::Comma, "','")?;
        let ut = self.peek();
        let unit = match &ut.kind {
            TokenKind::Ident(u) if u.eq_ignore_ascii_case("days") => TimeUnit::Days,
            TokenKind::Ident(u) if u.eq_ignore_ascii_case("hours") => TimeUnit::Hours,
            _ => return Err(syntax(ut, &["'days'", "'hours'"])),
        };
        self.bump();
        if start >= end {
            return Err(PqlError::Compile {
                span: win_tok.span.join(ut.span),
                message: format!("window start {start} must be less than end {end}"),
            });
        }
        let mut filter = Vec::new();
        if self.peek().kind == TokenKind::Comma {
            self.bump();
            self.expect(TokenKind::Where, "WHERE")?;
            filter.push(self.predicate()?);
            while self.peek().kind == TokenKind::And {
                self.bump();
                filter.push(self.predicate()?);
            }
        }
        let close = self.peek();
        if close.kind != TokenKind::RParen {
            let expected: &[&str] = if filter.is_empty() {
                &["','", "')'"]
            } else {
                &["AND", "')'"]
            };
            return Err(syntax(close, expected));
        }
        self.bump();
        Ok(AggExpr {
            func,
            table,
            column,
            start,
            end,
            unit,
            filter,
            span: start_span.join(close.span),
        })
    }

    fn query(&mut self) -> Result<QueryAst, PqlError> {
        self.expect(TokenKind::Predict, "PREDICT")?;
        let t = self.peek();
        let func = match t.kind {
            TokenKind::Count => Some(AggFn::Count),
            TokenKind::Sum => Some(AggFn::Sum),
            TokenKind::Avg => Some(AggFn::Avg),
            TokenKind::Min => Some(AggFn::Min),
            TokenKind::Max => Some(AggFn::Max),
            _ => None,
        };
        let (target, comparison) = match (func, &t.kind) {
            (Some(f), _) => {
                self.bump();
                let agg = self.agg(f, t.span)?;
                let op_tok = self.peek();
                let comparison = match self.cmp_op() {
                    Some(op) => {
                        let (value, vspan) = self.literal()?;
                        Some(Comparison {
                            op,
                            value,
                            span: op_tok.span.join(vspan),
                        })
                    }
                    None => None,
                };
                (Target::Agg(agg), comparison)
            }
            (None, TokenKind::Ident(_)) => (Target::Column(self.column_ref()?), None),
            _ => return Err(syntax(t, &["expression (COUNT, SUM, AVG, MIN, MAX or table.column)"])),
        };
        let ft = self.peek();
        if ft.kind != TokenKind::For {
            let expected: &[&str] = if comparison.is_none() && matches!(target, Target::Agg(_)) {
                &["comparison operator", "FOR"]
            } else {
                &["FOR"]
            };
            return Err(syntax(ft, expected));
        }
        self.bump();
        self.expect(TokenKind::Each, "EACH")?;
        let entity = self.column_ref()?;
        let end = self.peek();
        if end.kind != TokenKind::Eof {
            return Err(syntax(end, &["end of input"]));
        }
        Ok(QueryAst {
            target,
            comparison,
            entity,
        })
    }
}

/// Recursive-descent parser with one token of lookahead.
pub fn parse_tokens(tokens: &[Token]) -> Result<QueryAst, PqlError> {
    if tokens.is_empty() {
        return Err(PqlError::Syntax {
            span: Span::default(),
            expected: vec!["PREDICT".into()],
            found: "end of input".into(),
        });
    }
    Parser { tokens, pos: 0 }.query()
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn listing_ast() {
        let ast = parse("PREDICT COUNT(orders.*, 0, 30, days)=0 FOR EACH users.user_id").unwrap();
        let Target::Agg(a) = &ast.target else { panic!() };
        assert_eq!(a.func, AggFn::Count);
        assert_eq!(a.table.name, "orders");
        assert!(a.column.is_none());
        assert_eq!((a.start, a.end, a.unit), (0, 30, TimeUnit::Days));
        let c = ast.comparison.as_ref().unwrap();
        assert_eq!((c.op, &c.value), (CmpOp::Eq, &Literal::Int(0)));
        assert_eq!(ast.entity.table.name, "users");
        assert_eq!(ast.entity.column.name, "user_id");
    }

    #[test]
    fn static_column() {
        let ast = parse("PREDICT users.age FOR EACH users.user_id").unwrap();
        assert!(matches!(&ast.target, Target::Column(c) if c.column.name == "age"));
        assert!(ast.comparison.is_none());
    }

    #[test]
    fn missing_expression() {
        let err = parse("PREDICT FOR EACH users.user_id").unwrap_err();
        match &err {
            PqlError::Syntax { expected, span, .. } => {
                assert!(expected[0].starts_with("expression"));
                assert_eq!(span.column(), 9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_syntax_errors() {
        assert!(parse("PREDICT COUNT(orders.*, 0, 30) FOR EACH users.user_id").is_err());
        assert!(parse("PREDICT COUNT(orders.*, 0, 30, weeks) FOR EACH users.user_id").is_err());
        assert!(parse("PREDICT COUNT(orders.*, 30, 0, days) FOR EACH users.user_id").is_err());
        assert!(parse("PREDICT users.age FOR EACH users.user_id extra").is_err());
        assert!(parse("PREDICT users.age").is_err());
        assert!(parse("").is_err());
    }
}
