//! Byte-level lexer for C-like source.
//!
//! Comments are dropped, string and character literals collapse to a single
//! placeholder token, non-ASCII and control bytes are discarded, and
//! preprocessor directives are marked so the splitter can keep each one as a
//! single statement.

use crate::error::{LeoError, Result};

/// Replacement token for string literals.
pub const STRING_TOKEN: &str = "str";
/// Replacement token for character literals.
pub const CHAR_TOKEN: &str = "chr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Number,
    Literal,
    Punct,
    /// A token belonging to a preprocessor line (including the `#`).
    Directive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// Zero-based physical line of the first byte of the token.
    pub line: usize,
    /// Index of the preprocessor directive this token belongs to, if any.
    pub directive: Option<usize>,
}

const PUNCTUATORS: &[&str] = &[
    "<<=", ">>=", "...", "->*", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "::", "##", ".*", "+", "-", "*", "/", "%", "<", ">", "=", "!", "&", "|", "^", "~",
    "?", ":", ";", ",", ".", "(", ")", "[", "]", "{",
];

fn match_punct(rest: &[u8]) -> Option<&'static str> {
    // `}` and `#` are handled as single bytes below.
    PUNCTUATORS.iter().copied().find(|p| rest.starts_with(p.as_bytes()))
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b == b'$'
}

fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    tokens: Vec<Token>,
    /// True until a non-blank token has been produced on the current line.
    line_start: bool,
    directive: Option<usize>,
    directives: usize,
}

impl<'a> Lexer<'a> {
    fn push(&mut self, text: &str, kind: TokenKind) {
        let kind = if self.directive.is_some() { TokenKind::Directive } else { kind };
        self.tokens.push(Token {
            text: text.to_string(),
            kind,
            line: self.line,
            directive: self.directive,
        });
        self.line_start = false;
    }

    fn newline(&mut self) {
        self.line += 1;
        self.line_start = true;
        self.directive = None;
    }

    fn skip_block_comment(&mut self) -> Result<()> {
        let start = self.pos;
        self.pos += 2;
        while self.pos + 1 < self.src.len() {
            if self.src[self.pos] == b'*' && self.src[self.pos + 1] == b'/' {
                self.pos += 2;
                return Ok(());
            }
            if self.src[self.pos] == b'\n' {
                // Keep line accounting, but a comment does not end a directive.
                self.line += 1;
            }
            self.pos += 1;
        }
        Err(LeoError::Normalize {
            offset: start,
            message: "unterminated block comment".into(),
        })
    }

    fn skip_quoted(&mut self, quote: u8) -> Result<()> {
        let start = self.pos;
        self.pos += 1;
        while self.pos < self.src.len() {
            match self.src[self.pos] {
                b'\\' => {
                    if self.src.get(self.pos + 1) == Some(&b'\n') {
                        self.line += 1;
                    }
                    self.pos += 2;
                }
                b'\n' => break,
                b if b == quote => {
                    self.pos += 1;
                    return Ok(());
                }
                _ => self.pos += 1,
            }
        }
        let what = if quote == b'"' { "string" } else { "character" };
        Err(LeoError::Normalize {
            offset: start,
            message: format!("unterminated {what} literal"),
        })
    }

    fn run(mut self) -> Result<Vec<Token>> {
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            let rest = &self.src[self.pos..];
            match b {
                b'\n' => {
                    self.pos += 1;
                    self.newline();
                }
                b'\\' if rest.get(1) == Some(&b'\n') => {
                    // line continuation: stay on the same logical line
                    self.pos += 2;
                    self.line += 1;
                }
                b'\\' if rest.starts_with(b"\\\r\n") => {
                    self.pos += 3;
                    self.line += 1;
                }
                b'/' if rest.get(1) == Some(&b'/') => {
                    while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b'/' if rest.get(1) == Some(&b'*') => self.skip_block_comment()?,
                b'"' => {
                    self.skip_quoted(b'"')?;
                    self.push(STRING_TOKEN, TokenKind::Literal);
                }
                b'\'' => {
                    self.skip_quoted(b'\'')?;
                    self.push(CHAR_TOKEN, TokenKind::Literal);
                }
                b'#' if self.line_start && self.directive.is_none() => {
                    self.directive = Some(self.directives);
                    self.directives += 1;
                    self.pos += 1;
                    self.push("#", TokenKind::Punct);
                }
                _ if is_ident_start(b) => {
                    let start = self.pos;
                    while self.pos < self.src.len() && is_ident_continue(self.src[self.pos]) {
                        self.pos += 1;
                    }
                    // String literal prefixes: L"..", u8"..", R".." and friends.
                    if matches!(self.src.get(self.pos), Some(b'"') | Some(b'\''))
                        && matches!(&self.src[start..self.pos], b"L" | b"u" | b"U" | b"u8")
                    {
                        continue;
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
                    self.push(text, TokenKind::Ident);
                }
                _ if b.is_ascii_digit() || (b == b'.' && rest.get(1).is_some_and(u8::is_ascii_digit)) => {
                    let start = self.pos;
                    self.pos += 1;
                    while self.pos < self.src.len() {
                        let c = self.src[self.pos];
                        let prev = self.src[self.pos - 1];
                        let exponent_sign = (c == b'+' || c == b'-') && matches!(prev, b'e' | b'E' | b'p' | b'P');
                        if is_ident_continue(c) || c == b'.' || exponent_sign {
                            self.pos += 1;
                        } else if c == b'\'' && self.src.get(self.pos + 1).is_some_and(u8::is_ascii_alphanumeric) {
                            // digit separator
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number");
                    self.push(text, TokenKind::Number);
                }
                b'}' => {
                    self.pos += 1;
                    self.push("}", TokenKind::Punct);
                }
                b'#' => {
                    let text = if rest.starts_with(b"##") { "##" } else { "#" };
                    self.pos += text.len();
                    self.push(text, TokenKind::Punct);
                }
                _ => {
                    if let Some(p) = match_punct(rest) {
                        self.pos += p.len();
                        self.push(p, TokenKind::Punct);
                    } else {
                        // whitespace, control characters, stray bytes, non-ASCII
                        self.pos += 1;
                    }
                }
            }
        }
        Ok(self.tokens)
    }
}

/// Tokenizes C-like source text.
pub fn lex(source: &str) -> Result<Vec<Token>> {
    Lexer {
        src: source.as_bytes(),
        pos: 0,
        line: 0,
        tokens: Vec::new(),
        line_start: true,
        directive: None,
        directives: 0,
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<String> {
        lex(src).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn operators_use_longest_match() {
        assert_eq!(texts("a<<=b->c++"), ["a", "<<=", "b", "->", "c", "++"]);
    }

    #[test]
    fn comments_and_literals() {
        assert_eq!(
            texts("x = \"a;b\" + 'c'; // tail\n/* block\n */ y"),
            ["x", "=", "str", "+", "chr", ";", "y"]
        );
    }

    #[test]
    fn escaped_quote_inside_string() {
        assert_eq!(texts(r#"f("a\"b")"#), ["f", "(", "str", ")"]);
    }

    #[test]
    fn non_ascii_is_dropped() {
        assert_eq!(texts("int é = 1;"), ["int", "=", "1", ";"]);
    }

    #[test]
    fn unterminated_comment_reports_offset() {
        match lex("a; /* open") {
            Err(LeoError::Normalize { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unterminated_string_reports_offset() {
        assert!(matches!(lex("x = \"abc\n;"), Err(LeoError::Normalize { offset: 4, .. })));
    }

    #[test]
    fn directive_tokens_are_marked() {
        let toks = lex("#include <stdio.h>\nint x;").unwrap();
        assert!(toks[..7].iter().all(|t| t.directive == Some(0)));
        assert_eq!(toks[7].directive, None);
    }

    #[test]
    fn numbers() {
        assert_eq!(texts("1.5e-3f 0x1F 10u"), ["1.5e-3f", "0x1F", "10u"]);
    }
}
