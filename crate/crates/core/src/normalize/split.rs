//! Heuristic statement boundaries over a lexed token stream.
//!
//! Boundaries fall after every `;` outside parentheses, around block braces,
//! and after the closing `)` of an `if`/`for`/`while`/`switch` header. Each
//! preprocessor directive is one statement. Braces of initializer lists
//! (`= { 1, 2 }`) and braces inside parentheses do not split.

use super::lexer::{Token, TokenKind};

const CONTROL_HEADERS: [&str; 4] = ["if", "for", "while", "switch"];

#[derive(Default)]
struct Splitter {
    statements: Vec<Vec<String>>,
    current: Vec<String>,
}

impl Splitter {
    fn flush(&mut self) {
        if !self.current.is_empty() {
            self.statements.push(std::mem::take(&mut self.current));
        }
    }
}

/// Splits a token stream into statements. Never produces empty statements.
pub fn split_statements(tokens: &[Token]) -> Vec<Vec<String>> {
    let mut sp = Splitter::default();
    let mut paren_depth = 0usize;
    let mut init_depth = 0usize;
    // Paren depth at which a pending control header closes.
    let mut header_close: Option<usize> = None;
    let mut awaiting_header = false;
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if tok.kind == TokenKind::Directive {
            sp.flush();
            let id = tok.directive;
            while i < tokens.len() && tokens[i].kind == TokenKind::Directive && tokens[i].directive == id {
                sp.current.push(tokens[i].text.clone());
                i += 1;
            }
            sp.flush();
            continue;
        }
        let text = tok.text.as_str();
        let prev = sp.current.last().map(String::as_str);
        match text {
            "(" => {
                if awaiting_header {
                    header_close = Some(paren_depth);
                    awaiting_header = false;
                }
                paren_depth += 1;
                sp.current.push(text.into());
            }
            ")" => {
                paren_depth = paren_depth.saturating_sub(1);
                sp.current.push(text.into());
                if header_close == Some(paren_depth) {
                    header_close = None;
                    let next = tokens.get(i + 1).map(|t| t.text.as_str());
                    if next != Some(";") {
                        sp.flush();
                    }
                }
            }
            "{" if paren_depth > 0 || init_depth > 0 || matches!(prev, Some("=") | Some(",") | Some("return")) => {
                init_depth += 1;
                sp.current.push(text.into());
            }
            "}" if init_depth > 0 => {
                init_depth -= 1;
                sp.current.push(text.into());
            }
            "{" => {
                sp.flush();
                sp.current.push(text.into());
                sp.flush();
            }
            "}" => {
                sp.flush();
                sp.current.push(text.into());
                // `};` closes a declaration: keep the semicolon with the brace.
                if tokens.get(i + 1).is_some_and(|t| t.text == ";" && t.kind != TokenKind::Directive) {
                    sp.current.push(";".into());
                    i += 1;
                }
                sp.flush();
            }
            ";" => {
                sp.current.push(text.into());
                if paren_depth == 0 && init_depth == 0 {
                    sp.flush();
                }
            }
            _ => {
                if tok.kind == TokenKind::Ident && CONTROL_HEADERS.contains(&text) && paren_depth == 0 {
                    awaiting_header = true;
                }
                sp.current.push(text.into());
            }
        }
        i += 1;
    }
    sp.flush();
    sp.statements
}
