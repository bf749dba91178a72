//! A small C scanner: enough lexing to find function definitions, header
//! prototypes and direct call sites without a full parser.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Ident(String),
    Punct(&'static str),
    /// Number, string or character literal. Contents are irrelevant here.
    Literal,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: u32,
}

const PUNCTS: &[&str] = &[
    "->", "...", "::", "(", ")", "{", "}", "[", "]", ";", ",", ".", "=", "*", "&", "+", "-", "/",
    "%", "<", ">", "!", "~", "?", ":", "|", "^", "#",
];

const KEYWORDS: &[&str] = &[
    "if", "else", "while", "for", "do", "switch", "case", "default", "return", "sizeof",
    "alignof", "_Alignof", "__alignof__", "typeof", "__typeof__", "__attribute__", "__asm__",
    "asm", "_Generic", "_Static_assert", "static_assert", "defined", "goto", "break", "continue",
    "void", "char", "short", "int", "long", "float", "double", "signed", "unsigned", "const",
    "volatile", "struct", "union", "enum", "static", "extern", "inline", "register", "typedef",
    "restrict", "__restrict", "__inline", "__extension__", "_Bool", "auto",
];

pub(crate) fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

/// Output of lexing one file.
#[derive(Debug, Default)]
pub(crate) struct Lexed {
    pub tokens: Vec<Token>,
    /// Names introduced by `#define NAME(`.
    pub function_macros: BTreeSet<String>,
}

pub(crate) fn lex(src: &str) -> Lexed {
    let bytes = src.as_bytes();
    let mut out = Lexed::default();
    let mut i = 0;
    let mut line: u32 = 1;
    let mut at_line_start = true;

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            at_line_start = true;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                if bytes[i] == b'\n' {
                    line += 1;
                }
                i += 1;
            }
            i = (i + 2).min(bytes.len());
            continue;
        }
        if c == b'#' && at_line_start {
            let start = i;
            // Directive runs to the end of the line, honoring continuations.
            while i < bytes.len() && bytes[i] != b'\n' {
                if bytes[i] == b'\\' && bytes.get(i + 1) == Some(&b'\n') {
                    line += 1;
                    i += 2;
                    continue;
                }
                i += 1;
            }
            record_macro(&src[start..i], &mut out.function_macros);
            continue;
        }
        at_line_start = false;

        if c == b'"' || c == b'\'' {
            i += 1;
            while i < bytes.len() && bytes[i] != c {
                if bytes[i] == b'\\' {
                    i += 1;
                } else if bytes[i] == b'\n' {
                    // Unterminated literal; resync at the line break.
                    break;
                }
                i += 1;
            }
            i += 1;
            out.tokens.push(Token { tok: Tok::Literal, line });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.tokens.push(Token { tok: Tok::Ident(src[start..i].to_string()), line });
            continue;
        }
        if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.' || bytes[i] == b'_') {
                i += 1;
            }
            out.tokens.push(Token { tok: Tok::Literal, line });
            continue;
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                out.tokens.push(Token { tok: Tok::Punct(p), line });
                i += p.len();
            }
            None => i += rest.chars().next().map_or(1, char::len_utf8),
        }
    }
    out
}

fn record_macro(directive: &str, macros: &mut BTreeSet<String>) {
    let body = directive.trim_start_matches('#').trim_start();
    let Some(rest) = body.strip_prefix("define") else {
        return;
    };
    let rest = rest.trim_start();
    let name_len = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(rest.len());
    if name_len > 0 && rest[name_len..].starts_with('(') {
        macros.insert(rest[..name_len].to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum RawCall {
    Direct { name: String, line: u32, after_member: bool },
    Indirect { line: u32 },
}

#[derive(Debug, Clone)]
pub(crate) struct FnDef {
    pub name: String,
    pub line: u32,
    pub end_line: u32,
    pub is_static: bool,
    pub calls: Vec<RawCall>,
}

#[derive(Debug, Default)]
pub(crate) struct FileSyntax {
    pub functions: Vec<FnDef>,
    /// Prototypes at file scope carrying the `extern` storage class.
    pub extern_prototypes: Vec<String>,
    pub function_macros: BTreeSet<String>,
}

fn ident(t: &Token) -> Option<&str> {
    match &t.tok {
        Tok::Ident(s) => Some(s),
        _ => None,
    }
}

fn is(t: &Token, p: &str) -> bool {
    matches!(t.tok, Tok::Punct(q) if q == p)
}

/// Index of the `(` matching the `)` at `close`.
fn matching_open(tokens: &[Token], close: usize) -> Option<usize> {
    let mut depth = 0usize;
    for j in (0..=close).rev() {
        if is(&tokens[j], ")") {
            depth += 1;
        } else if is(&tokens[j], "(") {
            depth -= 1;
            if depth == 0 {
                return Some(j);
            }
        }
    }
    None
}

/// Strips trailing `__attribute__((...))` groups and qualifier identifiers
/// that can sit between a parameter list and the body.
fn strip_trailing_attributes(stmt: &[Token]) -> &[Token] {
    let mut end = stmt.len();
    loop {
        if end == 0 {
            return &stmt[..0];
        }
        let last = &stmt[end - 1];
        if is(last, ")") {
            if let Some(open) = matching_open(&stmt[..end], end - 1) {
                if open > 0 && ident(&stmt[open - 1]).is_some_and(|s| s.starts_with("__attribute")) {
                    end = open - 1;
                    continue;
                }
            }
            return &stmt[..end];
        }
        match ident(last) {
            Some("const" | "__THROW" | "noexcept") => end -= 1,
            _ => return &stmt[..end],
        }
    }
}

/// Name of the function a file-scope statement declares or defines, if any.
fn declared_function(stmt: &[Token]) -> Option<&str> {
    if stmt.iter().any(|t| is(t, "=")) {
        return None;
    }
    if stmt.first().and_then(ident) == Some("typedef") {
        return None;
    }
    let stmt = strip_trailing_attributes(stmt);
    let close = stmt.len().checked_sub(1)?;
    if !is(&stmt[close], ")") {
        return None;
    }
    let open = matching_open(stmt, close)?;
    let name = ident(stmt.get(open.checked_sub(1)?)?)?;
    if is_keyword(name) {
        return None;
    }
    Some(name)
}

/// Splits a lexed file into function definitions, prototypes and calls.
pub(crate) fn analyze(lexed: Lexed) -> FileSyntax {
    let tokens = lexed.tokens;
    let mut syntax = FileSyntax { function_macros: lexed.function_macros, ..Default::default() };
    let mut stmt_start = 0;
    let mut i = 0;

    while i < tokens.len() {
        if is(&tokens[i], ";") {
            let stmt = &tokens[stmt_start..i];
            let is_extern = stmt.iter().any(|t| ident(t) == Some("extern"));
            if let Some(name) = declared_function(stmt) {
                if is_extern {
                    syntax.extern_prototypes.push(name.to_string());
                }
            }
            i += 1;
            stmt_start = i;
            continue;
        }
        if is(&tokens[i], "{") {
            let stmt = &tokens[stmt_start..i];
            if stmt.len() == 2 && ident(&stmt[0]) == Some("extern") && stmt[1].tok == Tok::Literal {
                // extern "C" { ... }: scope is transparent.
                i += 1;
                stmt_start = i;
                continue;
            }
            let close = find_block_end(&tokens, i);
            if let Some(name) = declared_function(stmt) {
                let is_static = stmt.iter().any(|t| ident(t) == Some("static"));
                let line = stmt
                    .iter()
                    .find(|t| ident(t).is_some())
                    .map_or(tokens[i].line, |t| t.line);
                let body = &tokens[i + 1..close.min(tokens.len())];
                syntax.functions.push(FnDef {
                    name: name.to_string(),
                    line,
                    end_line: tokens.get(close).map_or(tokens[tokens.len() - 1].line, |t| t.line),
                    is_static,
                    calls: calls_in(body),
                });
                i = close + 1;
                stmt_start = i;
            } else {
                // struct/enum/union body or initializer: the statement goes on
                // until the next `;` at file scope.
                i = close + 1;
            }
            continue;
        }
        if is(&tokens[i], "}") {
            // Stray brace (unbalanced source); restart statement tracking.
            i += 1;
            stmt_start = i;
            continue;
        }
        i += 1;
    }
    syntax
}

fn find_block_end(tokens: &[Token], open: usize) -> usize {
    let mut depth = 0usize;
    for (j, t) in tokens.iter().enumerate().skip(open) {
        if is(t, "{") {
            depth += 1;
        } else if is(t, "}") {
            depth -= 1;
            if depth == 0 {
                return j;
            }
        }
    }
    tokens.len()
}

fn calls_in(body: &[Token]) -> Vec<RawCall> {
    let mut calls = Vec::new();
    for (j, t) in body.iter().enumerate() {
        let Some(next) = body.get(j + 1) else { break };
        if !is(next, "(") {
            continue;
        }
        match &t.tok {
            Tok::Ident(name) if !is_keyword(name) => {
                let after_member = j > 0 && (is(&body[j - 1], ".") || is(&body[j - 1], "->"));
                calls.push(RawCall::Direct { name: name.clone(), line: t.line, after_member });
            }
            Tok::Punct(")") => {
                // `(*fp)(...)` style call; casts like `(int)(x)` do not start with `*`.
                if let Some(open) = matching_open(&body[..=j], j) {
                    if body.get(open + 1).is_some_and(|t| is(t, "*")) {
                        calls.push(RawCall::Indirect { line: t.line });
                    }
                }
            }
            _ => {}
        }
    }
    calls
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(src: &str) -> Vec<(String, u32, u32)> {
        analyze(lex(src)).functions.into_iter().map(|f| (f.name, f.line, f.end_line)).collect()
    }

    #[test]
    fn finds_definitions_and_spans() {
        let src = "static int a(void) {\n  return b(1);\n}\n\nint b(int x)\n{\n  return x;\n}\n";
        assert_eq!(names(src), vec![("a".into(), 1, 3), ("b".into(), 5, 8)]);
    }

    #[test]
    fn skips_structs_initializers_and_prototypes() {
        let src = "struct s { int (*fp)(int); };\nint tbl[] = { 1, 2 };\nextern int p(int);\n\
                   typedef int (*cb)(int);\nint r(int);\nint q(void) { return p(2); }\n";
        let syn = analyze(lex(src));
        assert_eq!(syn.functions.len(), 1);
        assert_eq!(syn.functions[0].name, "q");
        assert_eq!(syn.extern_prototypes, vec!["p".to_string()]);
    }

    #[test]
    fn ignores_comments_strings_and_keywords() {
        let src = "void f(void) {\n /* g(); */ // h();\n const char *s = \"k()\";\n if (x) while (y) \
                   return sizeof(int);\n}\n";
        let syn = analyze(lex(src));
        assert!(syn.functions[0].calls.is_empty(), "{:?}", syn.functions[0].calls);
    }

    #[test]
    fn classifies_member_and_pointer_calls() {
        let src = "void f(struct s *p, int (*fp)(void)) { p->cb(p); (*fp)(); (int)(3); g(); }";
        let calls = &analyze(lex(src)).functions[0].calls;
        assert_eq!(
            calls,
            &vec![
                RawCall::Direct { name: "cb".into(), line: 1, after_member: true },
                RawCall::Indirect { line: 1 },
                RawCall::Direct { name: "g".into(), line: 1, after_member: false },
            ]
        );
    }

    #[test]
    fn records_function_like_macros_across_continuations() {
        let src = "#define ERR(c) \\\n  report(c)\n#define PLAIN (1)\nvoid f(void) {\n ERR(1);\n}\n";
        let syn = analyze(lex(src));
        assert!(syn.function_macros.contains("ERR"));
        assert!(!syn.function_macros.contains("PLAIN"));
        assert_eq!(syn.functions[0].line, 4);
    }

    #[test]
    fn attributes_between_params_and_body() {
        let src = "int f(int x) __attribute__((noinline)) { return x; }";
        assert_eq!(names(src)[0].0, "f");
    }
}
