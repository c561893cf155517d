//! Function-level code normalization and token vocabularies.

mod lexer;
mod split;
mod vocab;

use std::collections::HashMap;

pub use lexer::{lex, Token, TokenKind, CHAR_TOKEN, STRING_TOKEN};
pub use split::split_statements;
pub use vocab::{encode_tokens, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use crate::error::{LeoError, Result};

/// A raw labelled function as ingested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFunction {
    pub id: String,
    pub source_text: String,
    /// 0 = non-vulnerable, 1 = vulnerable.
    pub label: u8,
    pub cwe_tag: Option<String>,
}

impl RawFunction {
    pub fn new(id: impl Into<String>, source_text: impl Into<String>, label: u8) -> Result<Self> {
        let f = RawFunction {
            id: id.into(),
            source_text: source_text.into(),
            label,
            cwe_tag: None,
        };
        if f.label > 1 {
            return Err(LeoError::usage(format!("label {} is not 0 or 1", f.label)));
        }
        if f.source_text.is_empty() {
            return Err(LeoError::usage("empty source text"));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedFunction {
    pub statements: Vec<Vec<String>>,
    /// Original identifier → symbolic name, in first-appearance order.
    pub rename_map: Vec<(String, String)>,
}

impl NormalizedFunction {
    /// One statement per line, tokens separated by single spaces.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.statements {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn token_count(&self) -> usize {
        self.statements.iter().map(Vec::len).sum()
    }
}

/// C and C++ keywords plus common library names that are never renamed.
const ALLOWLIST: &[&str] = &[
    // C keywords
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum", "extern",
    "float", "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return", "short", "signed",
    "sizeof", "static", "struct", "switch", "typedef", "union", "unsigned", "void", "volatile", "while", "_Bool",
    "_Complex", "_Atomic", "_Static_assert", "_Noreturn", "_Alignas", "_Alignof", "_Thread_local",
    // C++ keywords
    "alignas", "alignof", "and", "asm", "bool", "catch", "class", "constexpr", "const_cast", "decltype", "delete",
    "dynamic_cast", "explicit", "export", "false", "friend", "mutable", "namespace", "new", "noexcept", "not",
    "nullptr", "operator", "or", "private", "protected", "public", "reinterpret_cast", "static_assert",
    "static_cast", "template", "this", "throw", "true", "try", "typeid", "typename", "using", "virtual", "xor",
    "override", "final",
    // literal placeholders and common macros/types
    STRING_TOKEN, CHAR_TOKEN, "NULL", "EOF", "main", "size_t", "ssize_t", "off_t", "uint8_t", "uint16_t",
    "uint32_t", "uint64_t", "int8_t", "int16_t", "int32_t", "int64_t", "uintptr_t", "intptr_t", "ptrdiff_t",
    "wchar_t", "FILE", "errno", "va_list", "va_start", "va_end", "va_arg", "assert", "stdin", "stdout", "stderr",
    "uid_t", "gid_t", "pid_t", "time_t", "bool_t",
    // libc
    "printf", "fprintf", "sprintf", "snprintf", "vprintf", "vfprintf", "vsprintf", "vsnprintf", "scanf", "sscanf",
    "fscanf", "puts", "fputs", "gets", "fgets", "putchar", "getchar", "fgetc", "fputc", "getc", "putc", "fopen",
    "fclose", "fread", "fwrite", "fseek", "ftell", "fflush", "feof", "ferror", "rewind", "remove", "rename",
    "perror", "malloc", "calloc", "realloc", "free", "alloca", "memcpy", "memmove", "memset", "memcmp", "memchr",
    "strcpy", "strncpy", "strcat", "strncat", "strcmp", "strncmp", "strlen", "strnlen", "strchr", "strrchr",
    "strstr", "strtok", "strdup", "strndup", "strerror", "strtol", "strtoul", "strtoll", "strtod", "atoi", "atol",
    "atof", "abs", "labs", "exit", "abort", "atexit", "getenv", "system", "qsort", "bsearch", "rand", "srand",
    "time", "clock", "sleep", "usleep", "open", "close", "read", "write", "lseek", "ioctl", "fcntl", "mmap",
    "munmap", "socket", "bind", "listen", "accept", "connect", "send", "recv", "select", "poll", "fork", "execve",
    "execvp", "waitpid", "kill", "signal", "getpid", "getuid", "geteuid", "getgid", "setuid", "setgid", "seteuid",
    "chmod", "chown", "access", "stat", "fstat", "unlink", "pthread_create", "pthread_join",
    "pthread_mutex_lock", "pthread_mutex_unlock", "isdigit", "isalpha", "isalnum", "isspace", "isupper",
    "islower", "toupper", "tolower", "sqrt", "pow", "floor", "ceil", "fabs", "min", "max",
    // C++ standard library
    "std", "cout", "cin", "cerr", "endl", "string", "vector", "map", "set", "unordered_map", "unordered_set",
    "pair", "make_pair", "unique_ptr", "shared_ptr", "make_unique", "make_shared", "move", "swap", "begin", "end",
    "size", "push_back", "emplace_back", "insert", "erase", "find", "at", "data", "c_str", "length", "empty",
    "clear", "resize", "reserve", "sort", "copy",
];

fn is_allowlisted(ident: &str) -> bool {
    ALLOWLIST.contains(&ident)
}

/// Normalizes one function: strips comments and non-ASCII bytes, replaces
/// literals, renames user-defined identifiers and splits into statements.
pub fn normalize_source(raw: &RawFunction) -> Result<NormalizedFunction> {
    normalize_text(&raw.source_text)
}

/// [`normalize_source`] on bare text.
pub fn normalize_text(source: &str) -> Result<NormalizedFunction> {
    let mut tokens = lex(source)?;
    let mut map: HashMap<String, String> = HashMap::new();
    let mut order = Vec::new();
    let (mut vars, mut funcs) = (0usize, 0usize);
    for i in 0..tokens.len() {
        if tokens[i].kind != TokenKind::Ident || is_allowlisted(&tokens[i].text) {
            continue;
        }
        let name = match map.get(&tokens[i].text) {
            Some(n) => n.clone(),
            None => {
                let is_call = tokens.get(i + 1).is_some_and(|t| t.text == "(" && t.kind != TokenKind::Directive);
                let fresh = if is_call {
                    funcs += 1;
                    format!("func{funcs}")
                } else {
                    vars += 1;
                    format!("var{vars}")
                };
                map.insert(tokens[i].text.clone(), fresh.clone());
                order.push((tokens[i].text.clone(), fresh.clone()));
                fresh
            }
        };
        tokens[i].text = name;
    }
    Ok(NormalizedFunction {
        statements: split_statements(&tokens),
        rename_map: order,
    })
}
