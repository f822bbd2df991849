use serde::{Deserialize, Serialize};

use super::{PqlError, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TokenKind {
    Predict,
    For,
    Each,
    Where,
    And,
    Count,
    Sum,
    Avg,
    Min,
    Max,
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Star,
    Minus,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Eof,
}

impl TokenKind {
    /// Short human description used in diagnostics.
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Predict => "PREDICT".into(),
            TokenKind::For => "FOR".into(),
            TokenKind::Each => "EACH".into(),
            TokenKind::Where => "WHERE".into(),
            TokenKind::And => "AND".into(),
            TokenKind::Count => "COUNT".into(),
            TokenKind::Sum => "SUM".into(),
            TokenKind::Avg => "AVG".into(),
            TokenKind::Min => "MIN".into(),
            TokenKind::Max => "MAX".into(),
            TokenKind::Ident(s) => format!("identifier '{s}'"),
            TokenKind::Int(i) => format!("number {i}"),
            TokenKind::Float(f) => format!("number {f:?}"),
            TokenKind::Str(s) => format!("string '{s}'"),
            TokenKind::LParen => "'('".into(),
            TokenKind::RParen => "')'".into(),
            TokenKind::Comma => "','".into(),
            TokenKind::Dot => "'.'".into(),
            TokenKind::Star => "'*'".into(),
            TokenKind::Minus => "'-'".into(),
            TokenKind::Eq => "'='".into(),
            TokenKind::Ne => "'!='".into(),
            TokenKind::Lt => "'<'".into(),
            TokenKind::Le => "'<='".into(),
            TokenKind::Gt => "'>'".into(),
            TokenKind::Ge => "'>='".into(),
            TokenKind::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word.to_ascii_uppercase().as_str() {
        "PREDICT" => TokenKind::Predict,
        "FOR" => TokenKind::For,
        "EACH" => TokenKind::Each,
        "WHERE" => TokenKind::Where,
        "AND" => TokenKind::And,
        "COUNT" => TokenKind::Count,
        "SUM" => TokenKind::Sum,
        "AVG" => TokenKind::Avg,
        "MIN" => TokenKind::Min,
        "MAX" => TokenKind::Max,
        _ => return None,
    })
}

/// Splits query text into tokens. Spans count characters from 0; diagnostics report
/// 1-based columns. The stream always ends with `Eof`.
pub fn tokenize(text: &str) -> Result<Vec<Token>, PqlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '(' => Some(TokenKind::LParen),
            ')' => Some(TokenKind::RParen),
            ',' => Some(TokenKind::Comma),
            '.' if !chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) => Some(TokenKind::Dot),
            '*' => Some(TokenKind::Star),
            '-' => Some(TokenKind::Minus),
            '=' => Some(TokenKind::Eq),
            '≠' => Some(TokenKind::Ne),
            '≤' => Some(TokenKind::Le),
            '≥' => Some(TokenKind::Ge),
            _ => None,
        };
        if let Some(kind) = single {
            i += 1;
            out.push(Token {
                kind,
                span: Span::new(start, i),
            });
            continue;
        }
        let next = chars.get(i + 1).copied();
        let kind = match c {
            '!' if next == Some('=') => {
                i += 2;
                TokenKind::Ne
            }
            '<' => match next {
                Some('=') => {
                    i += 2;
                    TokenKind::Le
                }
                Some('>') => {
                    i += 2;
                    TokenKind::Ne
                }
                _ => {
                    i += 1;
                    TokenKind::Lt
                }
            },
            '>' => {
                if next == Some('=') {
                    i += 2;
                    TokenKind::Ge
                } else {
                    i += 1;
                    TokenKind::Gt
                }
            }
            '\'' | '"' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => {
                            return Err(PqlError::Lex {
                                span: Span::new(start, chars.len()),
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some(&q) if q == quote => {
                            if chars.get(i + 1) == Some(&quote) {
                                s.push(quote);
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                TokenKind::Str(s)
            }
            c if c.is_ascii_digit() || c == '.' => {
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let mut is_float = false;
                if i < chars.len() && chars[i] == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) {
                    is_float = true;
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        is_float = true;
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lexeme: String = chars[start..i].iter().collect();
                let bad = || PqlError::Lex {
                    span: Span::new(start, i),
                    message: format!("invalid number '{lexeme}'"),
                };
                if is_float {
                    TokenKind::Float(lexeme.parse().map_err(|_| bad())?)
                } else {
                    TokenKind::Int(lexeme.parse().map_err(|_| bad())?)
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                keyword(&word).unwrap_or(TokenKind::Ident(word))
            }
            other => {
                return Err(PqlError::Lex {
                    span: Span::new(start, start + 1),
                    message: format!("illegal character '{other}'"),
                })
            }
        };
        out.push(Token {
            kind,
            span: Span::new(start, i),
        });
    }
    out.push(Token {
        kind: TokenKind::Eof,
        span: Span::new(chars.len(), chars.len()),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(text: &str) -> Vec<TokenKind> {
        tokenize(text).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn keywords_and_punctuation() {
        assert_eq!(
            kinds("PREDICT COUNT("),
            vec![TokenKind::Predict, TokenKind::Count, TokenKind::LParen, TokenKind::Eof]
        );
        assert_eq!(kinds("predict count("), kinds("PREDICT COUNT("));
    }

    #[test]
    fn dotted_reference() {
        assert_eq!(
            kinds("users.user_id"),
            vec![
                TokenKind::Ident("users".into()),
                TokenKind::Dot,
                TokenKind::Ident("user_id".into()),
                TokenKind::Eof
            ]
        );
    }

    #[test]
    fn illegal_character_column() {
        let err = tokenize("PREDICT @").unwrap_err();
        assert_eq!(err.column(), 9);
        assert!(err.to_string().contains("column 9"));
    }

    #[test]
    fn numbers_strings_operators() {
        assert_eq!(
            kinds("1.5 2 1e3 'it''s' <= >= != <> < > ≤"),
            vec![
                TokenKind::Float(1.5),
                TokenKind::Int(2),
                TokenKind::Float(1000.0),
                TokenKind::Str("it's".into()),
                TokenKind::Le,
                TokenKind::Ge,
                TokenKind::Ne,
                TokenKind::Ne,
                TokenKind::Lt,
                TokenKind::Gt,
                TokenKind::Le,
                TokenKind::Eof
            ]
        );
        assert!(tokenize("'open").is_err());
    }
}
