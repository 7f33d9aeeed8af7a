//! Splits question/answer strings into words, punctuation and numerals.

/// One lexical unit of a question or answer.
#[derive(Clone, Debug, PartialEq)]
pub enum Piece {
    Word(String),
    Number { literal: String, value: f64 },
}

impl Piece {
    pub fn text(&self) -> &str {
        match self {
            Piece::Word(w) => w,
            Piece::Number { literal, .. } => literal,
        }
    }
}

fn is_operator(c: char) -> bool {
    matches!(c, '+' | '-' | '*' | '/' | '=' | '^' | '(' | ',')
}

/// Lexes `text`. A numeral is `digits[.digits]`, optionally preceded by a
/// `-` that is glued to the digits and does not follow an operand (a letter,
/// digit, `)` or `.`). So `-12*t - 4482` yields `-12`, `*`, `t`, `-`, `4482`.
pub fn lex(text: &str) -> Vec<Piece> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let unary_minus = c == '-'
            && chars.get(i + 1).is_some_and(char::is_ascii_digit)
            && match i.checked_sub(1).map(|p| chars[p]) {
                None => true,
                Some(p) => p.is_whitespace() || is_operator(p),
            };
        if c.is_ascii_digit() || unary_minus {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let literal: String = chars[start..i].iter().collect();
            let value = literal.parse().expect("lexed numerals always parse");
            out.push(Piece::Number { literal, value });
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Piece::Word(chars[start..i].iter().collect()));
        } else {
            out.push(Piece::Word(c.to_string()));
            i += 1;
        }
    }
    out
}

fn glues_left(tok: &str) -> bool {
    matches!(tok, "." | "?" | "," | ")" | "*" | "^" | "!" | ":")
}

fn glues_right(tok: &str) -> bool {
    matches!(tok, "(" | "*" | "^")
}

/// Joins tokens with the canonical spacing the generators emit: single
/// spaces, none before closing punctuation, none around `*` and `^`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for tok in tokens {
        let tok = tok.as_ref();
        if let Some(p) = prev {
            if !glues_left(tok) && !glues_right(p) {
                out.push(' ');
            }
        }
        out.push_str(tok);
        prev = Some(tok);
    }
    out
}
