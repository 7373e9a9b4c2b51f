//! S-expression Boolean query language with `term` and `nn` operators.
//!
//! Grammar:
//! ```text
//! expr  := (and expr+) | (or expr+) | (term ns:value)
//!        | (nn key :radius r [:nprobe p]) | (nn key :topk k [:nprobe p])
//! ```
//! The parser is total: every input produces either an AST or a syntax error
//! carrying the byte offset and what was expected. Range rules (radius in
//! (0, 2], positive counts, known embedding keys) are reported by
//! [`validate_query`] as diagnostics, so programmatically built nodes get
//! the same checks as parsed ones.

use crate::EngineError;
use std::collections::BTreeSet;
use std::fmt;

/// Nearest-neighbor match mode: exactly one of radius or top-K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NnMode {
    /// Match documents with estimated cosine distance ≤ radius (inclusive).
    Radius(f64),
    /// Match the K globally closest documents for this key.
    TopK(usize),
}

/// Parsed query AST.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryNode {
    And(Vec<QueryNode>),
    Or(Vec<QueryNode>),
    Term { namespace: String, value: String },
    Nn { key: String, mode: NnMode, nprobe: Option<usize> },
}

impl QueryNode {
    /// True if any `nn` node occurs in this subtree.
    pub fn contains_nn(&self) -> bool {
        match self {
            QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().any(QueryNode::contains_nn),
            QueryNode::Term { .. } => false,
            QueryNode::Nn { .. } => true,
        }
    }

    /// Embedding keys referenced by `nn` nodes, in first-occurrence order.
    pub fn nn_keys(&self) -> Vec<&str> {
        fn walk<'a>(node: &'a QueryNode, out: &mut Vec<&'a str>) {
            match node {
                QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().for_each(|c| walk(c, out)),
                QueryNode::Term { .. } => {}
                QueryNode::Nn { key, .. } => {
                    if !out.contains(&key.as_str()) {
                        out.push(key);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }
}

/// A validation finding: the node path (root.0.1 style) plus a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.message, self.path)
    }
}

/// Parses query text into an AST.
pub fn parse_query(text: &str) -> Result<QueryNode, EngineError> {
    let mut parser = Parser { bytes: text.as_bytes(), pos: 0 };
    let node = parser.parse_expr()?;
    parser.skip_ws();
    if parser.pos != parser.bytes.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(node)
}

/// Prints the canonical single-space form. `parse_query(print_query(q))`
/// reproduces `q` exactly (floats print in shortest round-trip form).
pub fn print_query(q: &QueryNode) -> String {
    let mut out = String::new();
    write_node(q, &mut out);
    out
}

fn write_node(q: &QueryNode, out: &mut String) {
    match q {
        QueryNode::And(children) | QueryNode::Or(children) => {
            out.push('(');
            out.push_str(if matches!(q, QueryNode::And(_)) { "and" } else { "or" });
            for c in children {
                out.push(' ');
                write_node(c, out);
            }
            out.push(')');
        }
        QueryNode::Term { namespace, value } => {
            out.push_str("(term ");
            out.push_str(namespace);
            out.push(':');
            out.push_str(value);
            out.push(')');
        }
        QueryNode::Nn { key, mode, nprobe } => {
            out.push_str("(nn ");
            out.push_str(key);
            match mode {
                NnMode::Radius(r) => {
                    out.push_str(" :radius ");
                    out.push_str(&r.to_string());
                }
                NnMode::TopK(k) => {
                    out.push_str(" :topk ");
                    out.push_str(&k.to_string());
                }
            }
            if let Some(p) = nprobe {
                out.push_str(" :nprobe ");
                out.push_str(&p.to_string());
            }
            out.push(')');
        }
    }
}

/// Checks structural invariants and key resolution; returns one diagnostic
/// per violation. An empty list means the query is valid.
pub fn validate_query(q: &QueryNode, known_embedding_keys: &BTreeSet<String>) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    validate_node(q, "root", known_embedding_keys, &mut diags);
    diags
}

fn validate_node(
    q: &QueryNode,
    path: &str,
    keys: &BTreeSet<String>,
    diags: &mut Vec<Diagnostic>,
) {
    let diag = |diags: &mut Vec<Diagnostic>, message: String| {
        diags.push(Diagnostic { path: path.to_string(), message });
    };
    match q {
        QueryNode::And(children) | QueryNode::Or(children) => {
            if children.is_empty() {
                diag(diags, "boolean operator needs at least one child".into());
            }
            for (i, c) in children.iter().enumerate() {
                validate_node(c, &format!("{path}.{i}"), keys, diags);
            }
        }
        QueryNode::Term { namespace, value } => {
            if namespace.is_empty() {
                diag(diags, "term namespace is empty".into());
            }
            if value.is_empty() {
                diag(diags, "term value is empty".into());
            }
            for (part, name) in [(namespace, "namespace"), (value, "value")] {
                if part.chars().any(|c| c.is_whitespace() || c == '(' || c == ')') {
                    diag(diags, format!("term {name} contains whitespace or parentheses"));
                }
            }
        }
        QueryNode::Nn { key, mode, nprobe } => {
            if key.is_empty() || key.chars().any(|c| c.is_whitespace() || c == '(' || c == ')') {
                diag(diags, "nn key is empty or contains whitespace/parentheses".into());
            } else if !keys.contains(key) {
                diag(diags, format!("unknown embedding key {key:?}"));
            }
            match mode {
                NnMode::Radius(r) => {
                    if !r.is_finite() || *r <= 0.0 || *r > 2.0 {
                        diag(diags, format!("radius {r} out of (0, 2]"));
                    }
                }
                NnMode::TopK(k) => {
                    if *k == 0 {
                        diag(diags, "topk must be at least 1".into());
                    }
                }
            }
            if *nprobe == Some(0) {
                diag(diags, "nprobe must be at least 1".into());
            }
        }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> EngineError {
        EngineError::QuerySyntax { offset: self.pos, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, byte: u8, what: &str) -> Result<(), EngineError> {
        self.skip_ws();
        if self.pos < self.bytes.len() && self.bytes[self.pos] == byte {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    /// Reads a run of non-whitespace, non-parenthesis bytes.
    fn atom(&mut self, what: &str) -> Result<&'a str, EngineError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.error(format!("expected {what}")));
        }
        // Atom boundaries fall on ASCII delimiters, so the slice stays valid
        // UTF-8.
        Ok(std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("atom sliced at ASCII boundaries"))
    }

    fn peek_is(&mut self, byte: u8) -> bool {
        self.skip_ws();
        self.pos < self.bytes.len() && self.bytes[self.pos] == byte
    }

    fn parse_expr(&mut self) -> Result<QueryNode, EngineError> {
        self.expect(b'(', "'('")?;
        let op_pos = {
            self.skip_ws();
            self.pos
        };
        let op = self.atom("operator (and, or, term, nn)")?;
        match op {
            "and" | "or" => {
                let mut children = Vec::new();
                while self.peek_is(b'(') {
                    children.push(self.parse_expr()?);
                }
                if children.is_empty() {
                    return Err(self.error(format!("expected at least one subexpression for ({op} ...)")));
                }
                self.expect(b')', "')'")?;
                Ok(if op == "and" { QueryNode::And(children) } else { QueryNode::Or(children) })
            }
            "term" => {
                self.skip_ws();
                let atom_pos = self.pos;
                let atom = self.atom("term of the form namespace:value")?;
                let Some(colon) = atom.find(':') else {
                    self.pos = atom_pos;
                    return Err(self.error("expected ':' separating namespace and value"));
                };
                let (namespace, value) = (&atom[..colon], &atom[colon + 1..]);
                if namespace.is_empty() {
                    self.pos = atom_pos;
                    return Err(self.error("term namespace is empty"));
                }
                if value.is_empty() {
                    self.pos = atom_pos + colon + 1;
                    return Err(self.error("term value is empty"));
                }
                self.expect(b')', "')'")?;
                Ok(QueryNode::Term { namespace: namespace.to_string(), value: value.to_string() })
            }
            "nn" => self.parse_nn(),
            other => {
                self.pos = op_pos;
                Err(self.error(format!("unknown operator {other:?}, expected and, or, term, or nn")))
            }
        }
    }

    fn parse_nn(&mut self) -> Result<QueryNode, EngineError> {
        let key = self.atom("embedding key")?.to_string();
        let mut radius: Option<f64> = None;
        let mut topk: Option<usize> = None;
        let mut nprobe: Option<usize> = None;
        loop {
            self.skip_ws();
            if self.peek_is(b')') {
                break;
            }
            let attr_pos = self.pos;
            let attr = self.atom("attribute :radius, :topk, or :nprobe")?;
            match attr {
                ":radius" => {
                    if radius.is_some() {
                        self.pos = attr_pos;
                        return Err(self.error("duplicate :radius attribute"));
                    }
                    let val_pos = {
                        self.skip_ws();
                        self.pos
                    };
                    let raw = self.atom("number after :radius")?;
                    let r: f64 = raw.parse().map_err(|_| {
                        self.clone_error_at(val_pos, format!("expected number after :radius, got {raw:?}"))
                    })?;
                    if !r.is_finite() {
                        self.pos = val_pos;
                        return Err(self.error("radius must be finite"));
                    }
                    radius = Some(r);
                }
                ":topk" => {
                    if topk.is_some() {
                        self.pos = attr_pos;
                        return Err(self.error("duplicate :topk attribute"));
                    }
                    let val_pos = {
                        self.skip_ws();
                        self.pos
                    };
                    let raw = self.atom("positive integer after :topk")?;
                    let k: usize = raw.parse().map_err(|_| {
                        self.clone_error_at(val_pos, format!("expected positive integer after :topk, got {raw:?}"))
                    })?;
                    topk = Some(k);
                }
                ":nprobe" => {
                    if nprobe.is_some() {
                        self.pos = attr_pos;
                        return Err(self.error("duplicate :nprobe attribute"));
                    }
                    let val_pos = {
                        self.skip_ws();
                        self.pos
                    };
                    let raw = self.atom("positive integer after :nprobe")?;
                    let p: usize = raw.parse().map_err(|_| {
                        self.clone_error_at(val_pos, format!("expected positive integer after :nprobe, got {raw:?}"))
                    })?;
                    nprobe = Some(p);
                }
                other => {
                    self.pos = attr_pos;
                    return Err(self.error(format!(
                        "unknown attribute {other:?}, expected :radius, :topk, or :nprobe"
                    )));
                }
            }
        }
        self.expect(b')', "')'")?;
        let mode = match (radius, topk) {
            (Some(r), None) => NnMode::Radius(r),
            (None, Some(k)) => NnMode::TopK(k),
            _ => return Err(self.error("nn requires exactly one of :radius or :topk")),
        };
        Ok(QueryNode::Nn { key, mode, nprobe })
    }

    fn clone_error_at(&self, pos: usize, message: String) -> EngineError {
        EngineError::QuerySyntax { offset: pos, message }
    }
}
