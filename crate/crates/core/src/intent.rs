//! Boolean intent rules over scene metadata.
//!
//! ```text
//! rule    := or
//! or      := and ("or" and)*
//! and     := not ("and" not)*
//! not     := "not" not | primary
//! primary := "(" rule ")" | "true" | "false" | "exists" "(" rule ")" | pred
//! pred    := ident op literal
//!          | "bbox" "within" "box" "(" num "," num "," num "," num ")"
//! op      := "==" | "!=" | "<" | "<=" | ">" | ">="
//! ```
//!
//! Outside an `exists(...)` scope identifiers name scene attributes. Inside
//! it they name attributes of one instance, with `category` resolving to the
//! instance category and `bbox within box(...)` testing whether the
//! instance's bbox center lies in the closed box.
//!
//! Missing attributes make `==` and ordering predicates false and `!=` true.
//! A numeric literal compares against the attribute parsed as a number; if
//! parsing fails the predicate is false. String literals compare by exact
//! bytes, ordering predicates lexicographically.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::episode::{validate_box, Instance, MetadataRecord};

/// Maximum nesting depth accepted by the parser.
pub const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds<T: PartialOrd + ?Sized>(self, a: &T, b: &T) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Num(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    True,
    False,
    Not(Box<Rule>),
    And(Vec<Rule>),
    Or(Vec<Rule>),
    /// Instance scope: true iff some instance satisfies the body.
    Exists(Box<Rule>),
    Pred {
        field: String,
        op: CmpOp,
        literal: Literal,
    },
    /// Bbox-center membership in a closed box `[x0, y0, x1, y1]`.
    Within { bbox: [f64; 4] },
}

impl Rule {
    pub fn pred(field: impl Into<String>, op: CmpOp, literal: Literal) -> Self {
        Rule::Pred {
            field: field.into(),
            op,
            literal,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(r: Rule) -> Self {
        Rule::Not(Box::new(r))
    }

    pub fn exists(r: Rule) -> Self {
        Rule::Exists(Box::new(r))
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("syntax error at byte {offset}: {message}{}", expected_suffix(.expected))]
    Syntax {
        offset: usize,
        message: String,
        expected: Vec<&'static str>,
    },
    #[error("scope error: {0}")]
    Scope(String),
}

fn expected_suffix(expected: &[&'static str]) -> String {
    if expected.is_empty() {
        String::new()
    } else {
        format!(" (expected {})", expected.join(", "))
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
    And,
    Or,
    Not,
    True,
    False,
    Exists,
    Bbox,
    Within,
    Box,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier {s:?}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Num(n) => format!("number {n}"),
            Tok::Op(op) => format!("'{}'", op.symbol()),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Eof => "end of input".into(),
            kw => format!("keyword '{}'", keyword_text(kw)),
        }
    }
}

fn keyword_text(t: &Tok) -> &'static str {
    match t {
        Tok::And => "and",
        Tok::Or => "or",
        Tok::Not => "not",
        Tok::True => "true",
        Tok::False => "false",
        Tok::Exists => "exists",
        Tok::Bbox => "bbox",
        Tok::Within => "within",
        Tok::Box => "box",
        _ => "",
    }
}

fn keyword(word: &str) -> Option<Tok> {
    Some(match word {
        "and" => Tok::And,
        "or" => Tok::Or,
        "not" => Tok::Not,
        "true" => Tok::True,
        "false" => Tok::False,
        "exists" => Tok::Exists,
        "bbox" => Tok::Bbox,
        "within" => Tok::Within,
        "box" => Tok::Box,
        _ => return None,
    })
}

/// Whether `word` is usable as a field identifier.
pub fn is_identifier(word: &str) -> bool {
    let mut chars = word.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && keyword(word).is_none()
}

fn syntax(offset: usize, message: impl Into<String>) -> RuleError {
    RuleError::Syntax {
        offset,
        message: message.into(),
        expected: Vec::new(),
    }
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, RuleError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((start, Tok::Comma));
                i += 1;
            }
            b'=' | b'!' | b'<' | b'>' => {
                let next_eq = bytes.get(i + 1) == Some(&b'=');
                let op = match (c, next_eq) {
                    (b'=', true) => CmpOp::Eq,
                    (b'!', true) => CmpOp::Ne,
                    (b'<', true) => CmpOp::Le,
                    (b'>', true) => CmpOp::Ge,
                    (b'<', false) => CmpOp::Lt,
                    (b'>', false) => CmpOp::Gt,
                    _ => {
                        return Err(RuleError::Syntax {
                            offset: start,
                            message: format!("unexpected character '{}'", c as char),
                            expected: vec!["'=='", "'!='"],
                        })
                    }
                };
                i += if next_eq { 2 } else { 1 };
                out.push((start, Tok::Op(op)));
            }
            b'"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = src[i..].chars().next() else {
                        return Err(syntax(start, "unterminated string literal"));
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = src[i..].chars().next() else {
                                return Err(syntax(start, "unterminated string literal"));
                            };
                            i += esc.len_utf8();
                            s.push(match esc {
                                '"' => '"',
                                '\\' => '\\',
                                'n' => '\n',
                                't' => '\t',
                                'r' => '\r',
                                other => {
                                    return Err(syntax(
                                        i - other.len_utf8() - 1,
                                        format!("unknown escape '\\{other}'"),
                                    ))
                                }
                            });
                        }
                        other => s.push(other),
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            b'-' | b'0'..=b'9' | b'.' => {
                if c == b'-' {
                    i += 1;
                }
                let digits_start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let int_digits = i - digits_start;
                let mut frac_digits = 0;
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    let f = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    frac_digits = i - f;
                }
                if int_digits == 0 && frac_digits == 0 {
                    return Err(RuleError::Syntax {
                        offset: start,
                        message: "malformed number".into(),
                        expected: vec!["digit"],
                    });
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    let e = j;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    if j == e {
                        return Err(syntax(i, "malformed exponent"));
                    }
                    i = j;
                }
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| syntax(start, format!("malformed number {text:?}")))?;
                if !value.is_finite() {
                    return Err(syntax(start, format!("number {text:?} out of range")));
                }
                out.push((start, Tok::Num(value)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &src[start..i];
                out.push((start, keyword(word).unwrap_or_else(|| Tok::Ident(word.to_string()))));
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('\u{fffd}');
                return Err(syntax(start, format!("unexpected character {ch:?}")));
            }
        }
    }
    out.push((src.len(), Tok::Eof));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: Vec<&'static str>) -> RuleError {
        RuleError::Syntax {
            offset: self.offset(),
            message: format!("unexpected {}", self.peek().describe()),
            expected,
        }
    }

    fn expect(&mut self, tok: Tok, name: &'static str) -> Result<(), RuleError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(vec![name]))
        }
    }

    fn enter(&mut self) -> Result<(), RuleError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(syntax(self.offset(), format!("nesting deeper than {MAX_DEPTH}")));
        }
        Ok(())
    }

    fn rule(&mut self) -> Result<Rule, RuleError> {
        self.enter()?;
        let mut parts = vec![self.and()?];
        while *self.peek() == Tok::Or {
            self.bump();
            parts.push(self.and()?);
        }
        self.depth -= 1;
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Rule::Or(parts) })
    }

    fn and(&mut self) -> Result<Rule, RuleError> {
        let mut parts = vec![self.not()?];
        while *self.peek() == Tok::And {
            self.bump();
            parts.push(self.not()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Rule::And(parts) })
    }

    fn not(&mut self) -> Result<Rule, RuleError> {
        if *self.peek() == Tok::Not {
            self.bump();
            self.enter()?;
            let inner = self.not()?;
            self.depth -= 1;
            Ok(Rule::not(inner))
        } else {
            self.primary()
        }
    }

    fn number(&mut self) -> Result<f64, RuleError> {
        match self.peek() {
            Tok::Num(n) => {
                let n = *n;
                self.bump();
                Ok(n)
            }
            _ => Err(self.unexpected(vec!["number"])),
        }
    }

    fn primary(&mut self) -> Result<Rule, RuleError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let r = self.rule()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(r)
            }
            Tok::True => {
                self.bump();
                Ok(Rule::True)
            }
            Tok::False => {
                self.bump();
                Ok(Rule::False)
            }
            Tok::Exists => {
                self.bump();
                self.expect(Tok::LParen, "'('")?;
                let r = self.rule()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(Rule::exists(r))
            }
            Tok::Bbox => {
                self.bump();
                self.expect(Tok::Within, "'within'")?;
                self.expect(Tok::Box, "'box'")?;
                self.expect(Tok::LParen, "'('")?;
                let mut b = [0.0; 4];
                for (i, slot) in b.iter_mut().enumerate() {
                    if i > 0 {
                        self.expect(Tok::Comma, "','")?;
                    }
                    *slot = self.number()?;
                }
                self.expect(Tok::RParen, "')'")?;
                Ok(Rule::Within { bbox: b })
            }
            Tok::Ident(field) => {
                self.bump();
                let op = match self.peek() {
                    Tok::Op(op) => *op,
                    _ => return Err(self.unexpected(vec!["comparison operator"])),
                };
                self.bump();
                let literal = match self.bump() {
                    Tok::Str(s) => Literal::Str(s),
                    Tok::Num(n) => Literal::Num(n),
                    _ => {
                        self.pos -= 1;
                        return Err(self.unexpected(vec!["string", "number"]));
                    }
                };
                Ok(Rule::Pred { field, op, literal })
            }
            _ => Err(self.unexpected(vec![
                "'('", "'not'", "'true'", "'false'", "'exists'", "'bbox'", "identifier",
            ])),
        }
    }
}

/// Parses and scope-checks a rule.
pub fn parse_rule(text: &str) -> Result<Rule, RuleError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        depth: 0,
    };
    let rule = p.rule()?;
    if *p.peek() != Tok::Eof {
        return Err(p.unexpected(vec!["'and'", "'or'", "end of input"]));
    }
    validate_scope(&rule)?;
    Ok(rule)
}

/// Checks that `within` and `category` only occur inside `exists`, that
/// scopes do not nest, and that boxes are well formed.
pub fn validate_scope(rule: &Rule) -> Result<(), RuleError> {
    fn walk(r: &Rule, in_instance: bool) -> Result<(), RuleError> {
        match r {
            Rule::True | Rule::False => Ok(()),
            Rule::Not(x) => walk(x, in_instance),
            Rule::And(xs) | Rule::Or(xs) => xs.iter().try_for_each(|x| walk(x, in_instance)),
            Rule::Exists(x) => {
                if in_instance {
                    return Err(RuleError::Scope("exists(...) cannot be nested".into()));
                }
                walk(x, true)
            }
            Rule::Pred { field, .. } => {
                if !is_identifier(field) {
                    return Err(RuleError::Scope(format!("invalid field name {field:?}")));
                }
                if !in_instance && field == "category" {
                    return Err(RuleError::Scope(
                        "'category' is an instance field; wrap it in exists(...)".into(),
                    ));
                }
                Ok(())
            }
            Rule::Within { bbox } => {
                if !in_instance {
                    return Err(RuleError::Scope(
                        "'bbox within' is an instance predicate; wrap it in exists(...)".into(),
                    ));
                }
                validate_box(bbox).map_err(RuleError::Scope)
            }
        }
    }
    walk(rule, false)
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

/// Collapses `And`/`Or` nodes with fewer than two children.
fn effective(rule: &Rule) -> &Rule {
    match rule {
        Rule::And(xs) if xs.is_empty() => &Rule::True,
        Rule::Or(xs) if xs.is_empty() => &Rule::False,
        Rule::And(xs) | Rule::Or(xs) if xs.len() == 1 => effective(&xs[0]),
        other => other,
    }
}

fn write_literal(out: &mut String, lit: &Literal) {
    match lit {
        Literal::Num(n) => write!(out, "{n}").unwrap(),
        Literal::Str(s) => {
            out.push('"');
            for ch in s.chars() {
                match ch {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c => out.push(c),
                }
            }
            out.push('"');
        }
    }
}

fn write_atom(out: &mut String, rule: &Rule) {
    let r = effective(rule);
    if matches!(r, Rule::And(_) | Rule::Or(_)) {
        out.push('(');
        write_rule(out, r);
        out.push(')');
    } else {
        write_rule(out, r);
    }
}

fn write_rule(out: &mut String, rule: &Rule) {
    match effective(rule) {
        Rule::True => out.push_str("true"),
        Rule::False => out.push_str("false"),
        Rule::Not(x) => {
            out.push_str("not ");
            write_atom(out, x);
        }
        r @ (Rule::And(xs) | Rule::Or(xs)) => {
            let sep = if matches!(r, Rule::And(_)) { " and " } else { " or " };
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    out.push_str(sep);
                }
                write_atom(out, x);
            }
        }
        Rule::Exists(x) => {
            out.push_str("exists(");
            write_rule(out, x);
            out.push(')');
        }
        Rule::Pred { field, op, literal } => {
            write!(out, "{field} {} ", op.symbol()).unwrap();
            write_literal(out, literal);
        }
        Rule::Within { bbox: [a, b, c, d] } => {
            write!(out, "bbox within box({a}, {b}, {c}, {d})").unwrap();
        }
    }
}

/// Canonical text form. Parsing it back yields the same tree for any rule the
/// parser can produce; `And`/`Or` with fewer than two children print as their
/// Boolean equivalent.
pub fn pretty_print(rule: &Rule) -> String {
    let mut s = String::new();
    write_rule(&mut s, rule);
    s
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_print(self))
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn compare(value: Option<&str>, op: CmpOp, literal: &Literal) -> bool {
    let Some(value) = value else {
        return op == CmpOp::Ne;
    };
    match literal {
        Literal::Str(s) => op.holds(value, s.as_str()),
        Literal::Num(n) => match value.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => op.holds(&v, n),
            _ => false,
        },
    }
}

fn eval_instance(rule: &Rule, inst: &Instance) -> bool {
    match rule {
        Rule::True => true,
        Rule::False => false,
        Rule::Not(x) => !eval_instance(x, inst),
        Rule::And(xs) => xs.iter().all(|x| eval_instance(x, inst)),
        Rule::Or(xs) => xs.iter().any(|x| eval_instance(x, inst)),
        // nested scopes are rejected by validation
        Rule::Exists(_) => false,
        Rule::Pred { field, op, literal } => {
            let value = if field == "category" {
                Some(inst.category.as_str())
            } else {
                inst.attributes.get(field).map(String::as_str)
            };
            compare(value, *op, literal)
        }
        Rule::Within { bbox: [x0, y0, x1, y1] } => {
            let (cx, cy) = inst.center();
            *x0 <= cx && cx <= *x1 && *y0 <= cy && cy <= *y1
        }
    }
}

/// `meta ⊨ rule`. Total: every failure folds to `false`.
pub fn evaluate(rule: &Rule, meta: &MetadataRecord) -> bool {
    match rule {
        Rule::True => true,
        Rule::False => false,
        Rule::Not(x) => !evaluate(x, meta),
        Rule::And(xs) => xs.iter().all(|x| evaluate(x, meta)),
        Rule::Or(xs) => xs.iter().any(|x| evaluate(x, meta)),
        Rule::Exists(body) => meta.instances.iter().any(|i| eval_instance(body, i)),
        Rule::Pred { field, op, literal } => {
            compare(meta.scene_attributes.get(field).map(String::as_str), *op, literal)
        }
        // instance-only predicate outside a scope
        Rule::Within { .. } => false,
    }
}

/// Scene ids satisfying `rule`, in corpus order.
pub fn retrieve_by_rule(rule: &Rule, corpus: &[MetadataRecord]) -> Vec<String> {
    corpus
        .iter()
        .filter(|m| evaluate(rule, m))
        .map(|m| m.scene_id.clone())
        .collect()
}
