use super::ast::Span;
use super::FrontendError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Float(f64),
    Star,
    Comma,
    Dot,
    LParen,
    RParen,
    Semi,
    Op(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, FrontendError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    macro_rules! advance {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < chars.len() {
        let c = chars[i];
        let span = Span { line, column: col };
        if c.is_whitespace() {
            advance!();
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                advance!();
            }
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), span });
            continue;
        }
        let negative_number = c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || negative_number {
            let start = i;
            advance!();
            while i < chars.len() && chars[i].is_ascii_digit() {
                advance!();
            }
            let mut is_float = false;
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                is_float = true;
                advance!();
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance!();
                }
            }
            let text: String = chars[start..i].iter().collect();
            let tok = if is_float {
                Tok::Float(text.parse().map_err(|_| FrontendError::syntax(span, format!("bad number '{text}'")))?)
            } else {
                Tok::Int(text.parse().map_err(|_| FrontendError::syntax(span, format!("integer out of range '{text}'")))?)
            };
            out.push(Token { tok, span });
            continue;
        }
        if c == '\'' {
            advance!();
            let mut s = String::new();
            loop {
                if i >= chars.len() {
                    return Err(FrontendError::syntax(span, "unterminated string literal"));
                }
                if chars[i] == '\'' {
                    if chars.get(i + 1) == Some(&'\'') {
                        s.push('\'');
                        advance!();
                        advance!();
                        continue;
                    }
                    advance!();
                    break;
                }
                s.push(chars[i]);
                advance!();
            }
            out.push(Token { tok: Tok::Str(s), span });
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let op2 = match two.as_str() {
            "<=" => Some("<="),
            ">=" => Some(">="),
            "<>" => Some("<>"),
            "!=" => Some("<>"),
            _ => None,
        };
        if let Some(op) = op2 {
            advance!();
            advance!();
            out.push(Token { tok: Tok::Op(op), span });
            continue;
        }
        let tok = match c {
            '*' => Tok::Star,
            ',' => Tok::Comma,
            '.' => Tok::Dot,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ';' => Tok::Semi,
            '=' => Tok::Op("="),
            '<' => Tok::Op("<"),
            '>' => Tok::Op(">"),
            other => return Err(FrontendError::syntax(span, format!("unexpected character '{other}'"))),
        };
        advance!();
        out.push(Token { tok, span });
    }
    out.push(Token { tok: Tok::Eof, span: Span { line, column: col } });
    Ok(out)
}
