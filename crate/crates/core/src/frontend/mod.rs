//! Query-language frontend: lexer, parser, canonical printer and binder.

pub mod ast;
pub mod bind;
pub mod lexer;
pub mod parser;

pub use ast::{AggFunc, AttrRef, Comparison, Literal, ModelCall, Operand, QueryAst, RelRef, SelectItem, SelectList};
pub use bind::{bind, BoundCall, BoundItem, BoundOperand, BoundPredicate, BoundQuery, BoundRelation, BoundSelect};
pub use parser::parse;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[serde(tag = "kind")]
pub enum FrontendError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("semantic error at line {line}, column {column}: {message}")]
    Semantic { line: usize, column: usize, message: String },
}

impl FrontendError {
    pub fn syntax(span: ast::Span, message: impl Into<String>) -> Self {
        FrontendError::Syntax { line: span.line, column: span.column, message: message.into() }
    }

    pub fn semantic(span: ast::Span, message: impl Into<String>) -> Self {
        FrontendError::Semantic { line: span.line, column: span.column, message: message.into() }
    }

    pub fn position(&self) -> (usize, usize) {
        match self {
            FrontendError::Syntax { line, column, .. } | FrontendError::Semantic { line, column, .. } => {
                (*line, *column)
            }
        }
    }
}

/// Parses and binds in one step.
pub fn compile(query_text: &str, catalog: &crate::catalog::Catalog) -> Result<BoundQuery, FrontendError> {
    bind(parse(query_text)?, catalog)
}
