//! Recursive-descent parser for the query subset:
//!
//! ```text
//! query       := "SELECT" select_list "FROM" rel_ref {"JOIN" rel_ref "ON" eq}
//!                ["WHERE" pred {"AND" pred}] ["GROUP BY" attr_list]
//! select_list := "*" | item {"," item}
//! item        := [agg "("] expr [")"]
//! pred        := operand cmp operand
//! operand     := attr | literal | ident "(" attr {"," attr} ")"
//! cmp         := "=" | "<" | ">" | "<=" | ">=" | "<>"
//! ```

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::FrontendError;
use crate::types::CmpOp;

const RESERVED: [&str; 9] = ["SELECT", "FROM", "JOIN", "ON", "WHERE", "AND", "GROUP", "BY", "AS"];

fn is_reserved(s: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(s))
}

pub fn parse(query_text: &str) -> Result<QueryAst, FrontendError> {
    let tokens = tokenize(query_text)?;
    let mut p = Parser { tokens, pos: 0 };
    let q = p.query()?;
    if p.peek() == &Tok::Semi {
        p.pos += 1;
    }
    if p.peek() != &Tok::Eof {
        return Err(p.unexpected("end of query"));
    }
    Ok(q)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        let i = (self.pos + offset).min(self.tokens.len() - 1);
        &self.tokens[i].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &str) -> FrontendError {
        let found = match self.peek() {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Str(s) => format!("'{s}' (string)"),
            Tok::Int(i) => i.to_string(),
            Tok::Float(x) => x.to_string(),
            Tok::Eof => "end of input".to_string(),
            other => format!("{other:?}"),
        };
        FrontendError::syntax(self.span(), format!("expected {expected}, found {found}"))
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), FrontendError> {
        if self.at_keyword(kw) {
            self.next();
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), FrontendError> {
        if self.peek() == &tok {
            self.next();
            Ok(())
        } else {
            Err(self.unexpected(what))
        }
    }

    fn ident(&mut self) -> Result<(String, Span), FrontendError> {
        match self.peek().clone() {
            Tok::Ident(s) if !is_reserved(&s) => {
                let span = self.span();
                self.next();
                Ok((s, span))
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn query(&mut self) -> Result<QueryAst, FrontendError> {
        self.keyword("SELECT")?;
        let select = if self.peek() == &Tok::Star {
            self.next();
            SelectList::All
        } else {
            let mut items = vec![self.item()?];
            while self.peek() == &Tok::Comma {
                self.next();
                items.push(self.item()?);
            }
            SelectList::Items(items)
        };
        self.keyword("FROM")?;
        let from = self.rel_ref()?;
        let mut joins = Vec::new();
        while self.at_keyword("JOIN") {
            self.next();
            let relation = self.rel_ref()?;
            self.keyword("ON")?;
            let left = self.attr()?;
            self.expect(Tok::Op("="), "'=' in join condition")?;
            let right = self.attr()?;
            joins.push(JoinClause { relation, left, right });
        }
        let mut where_clause = Vec::new();
        if self.at_keyword("WHERE") {
            self.next();
            where_clause.push(self.pred()?);
            while self.at_keyword("AND") {
                self.next();
                where_clause.push(self.pred()?);
            }
        }
        let mut group_by = Vec::new();
        if self.at_keyword("GROUP") {
            self.next();
            self.keyword("BY")?;
            group_by.push(self.attr()?);
            while self.peek() == &Tok::Comma {
                self.next();
                group_by.push(self.attr()?);
            }
        }
        Ok(QueryAst { select, from, joins, where_clause, group_by })
    }

    fn item(&mut self) -> Result<SelectItem, FrontendError> {
        if let Tok::Ident(s) = self.peek() {
            if let Some(agg) = AggFunc::from_keyword(s) {
                if self.peek_at(1) == &Tok::LParen {
                    self.next();
                    self.next();
                    let expr = if self.peek() == &Tok::Star {
                        self.next();
                        SelectExpr::Star
                    } else {
                        SelectExpr::Operand(self.operand()?)
                    };
                    self.expect(Tok::RParen, "')'")?;
                    return Ok(SelectItem { agg, expr });
                }
            }
        }
        Ok(SelectItem { agg: AggFunc::None, expr: SelectExpr::Operand(self.operand()?) })
    }

    fn rel_ref(&mut self) -> Result<RelRef, FrontendError> {
        let (name, span) = self.ident()?;
        let alias = if self.at_keyword("AS") {
            self.next();
            Some(self.ident()?.0)
        } else if matches!(self.peek(), Tok::Ident(s) if !is_reserved(s)) {
            Some(self.ident()?.0)
        } else {
            None
        };
        Ok(RelRef { name, alias, span })
    }

    fn attr(&mut self) -> Result<AttrRef, FrontendError> {
        let (first, span) = self.ident()?;
        if self.peek() == &Tok::Dot {
            self.next();
            let (name, _) = self.ident()?;
            Ok(AttrRef { qualifier: Some(first), name, span })
        } else {
            Ok(AttrRef { qualifier: None, name: first, span })
        }
    }

    fn pred(&mut self) -> Result<Comparison, FrontendError> {
        let left = self.operand()?;
        let op = match self.peek() {
            Tok::Op(o) => match *o {
                "=" => CmpOp::Eq,
                "<>" => CmpOp::Ne,
                "<" => CmpOp::Lt,
                "<=" => CmpOp::Le,
                ">" => CmpOp::Gt,
                ">=" => CmpOp::Ge,
                _ => unreachable!(),
            },
            _ => return Err(self.unexpected("comparison operator")),
        };
        self.next();
        let right = self.operand()?;
        Ok(Comparison { left, op, right })
    }

    fn operand(&mut self) -> Result<Operand, FrontendError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.next();
                Ok(Operand::Literal(Literal::Str(s)))
            }
            Tok::Int(i) => {
                self.next();
                Ok(Operand::Literal(Literal::Int(i)))
            }
            Tok::Float(x) => {
                self.next();
                Ok(Operand::Literal(Literal::Float(x)))
            }
            Tok::Ident(_) => {
                if self.peek_at(1) == &Tok::LParen {
                    let (name, span) = self.ident()?;
                    self.next();
                    let mut args = vec![self.attr()?];
                    while self.peek() == &Tok::Comma {
                        self.next();
                        args.push(self.attr()?);
                    }
                    self.expect(Tok::RParen, "')' closing model call")?;
                    Ok(Operand::Call(ModelCall { name, args, span }))
                } else {
                    Ok(Operand::Attr(self.attr()?))
                }
            }
            _ => Err(self.unexpected("attribute, literal or model call")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMDB: &str = "SELECT count(*) FROM IMDB_MOVIE_REVIEW R WHERE R.date > '06/01/2015' AND R.date < '06/05/2015' AND sentiment_classifier(R.Review) = Positive";
    const MRI: &str = "SELECT MRI_Images FROM Central_Hospital_Organization WHERE Nurse_Location = 'Elderly Care-1' AND Alzheimer_Patient_Name = 'Patient Name' AND Alzheimer_Patient_Age = 'Patient Age'";

    #[test]
    fn imdb_query_shape() {
        let q = parse(IMDB).unwrap();
        let SelectList::Items(items) = &q.select else { panic!() };
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].agg, AggFunc::Count);
        assert_eq!(items[0].expr, SelectExpr::Star);
        assert_eq!(q.from.name, "IMDB_MOVIE_REVIEW");
        assert_eq!(q.from.alias.as_deref(), Some("R"));
        assert_eq!(q.where_clause.len(), 3);
        let ranges: Vec<_> = q.where_clause.iter().filter(|c| matches!(c.op, CmpOp::Gt | CmpOp::Lt)).collect();
        assert_eq!(ranges.len(), 2);
        assert_eq!(q.model_calls().len(), 1);
        assert_eq!(q.model_calls()[0].name, "sentiment_classifier");
        assert_eq!(q.where_clause[2].right, Operand::Attr(AttrRef::new(None, "Positive")));
    }

    #[test]
    fn mri_query_shape() {
        let q = parse(MRI).unwrap();
        assert!(!q.is_aggregate());
        assert_eq!(q.where_clause.len(), 3);
        assert!(q.where_clause.iter().all(|c| c.op == CmpOp::Eq));
        assert!(q.model_calls().is_empty());
    }

    #[test]
    fn select_star() {
        let q = parse("SELECT * FROM T").unwrap();
        assert_eq!(q.select, SelectList::All);
        assert!(!q.is_aggregate());
    }

    #[test]
    fn round_trip_fixed_point() {
        for src in [IMDB, MRI, "select a, sum(T.b) from T join U x on T.id = x.id where 3.5 <= T.c group by a;"] {
            let q = parse(src).unwrap();
            let printed = q.to_string();
            assert_eq!(parse(&printed).unwrap(), q, "{printed}");
            assert_eq!(parse(&printed).unwrap().to_string(), printed);
        }
    }

    #[test]
    fn syntax_error_position() {
        let err = parse("SELECT *\nFROM T WHERE a >").unwrap_err();
        match err {
            FrontendError::Syntax { line, column, .. } => assert_eq!((line, column), (2, 17)),
            other => panic!("{other:?}"),
        }
        assert!(parse("SELECT FROM T").is_err());
        assert!(parse("SELECT * FROM T WHERE a = 'x").is_err());
        assert!(parse("SELECT * FROM T extra junk").is_err());
    }

    #[test]
    fn quotes_escape() {
        let q = parse("SELECT * FROM T WHERE a = 'it''s'").unwrap();
        assert_eq!(q.where_clause[0].right, Operand::Literal(Literal::Str("it's".into())));
        assert_eq!(parse(&q.to_string()).unwrap(), q);
    }
}
