//! Tagged caption grammar: `⟨SEG_C⟩…⟨/SEG_C⟩` marks the central entity,
//! `⟨SEG_S⟩…⟨/SEG_S⟩` the associated ones.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CENTRAL_OPEN: &str = "⟨SEG_C⟩";
pub const CENTRAL_CLOSE: &str = "⟨/SEG_C⟩";
pub const SUPPORT_OPEN: &str = "⟨SEG_S⟩";
pub const SUPPORT_CLOSE: &str = "⟨/SEG_S⟩";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Central,
    Association,
}

/// Content-token range `[start, end)` belonging to one entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
    pub entity: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Caption tokens (tags removed) with the tagged entity spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCaption {
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece<'a> {
    Word(&'a str),
    Open(SpanKind),
    Close(SpanKind),
}

const TAGS: [(&str, Piece<'static>); 4] = [
    (CENTRAL_OPEN, Piece::Open(SpanKind::Central)),
    (CENTRAL_CLOSE, Piece::Close(SpanKind::Central)),
    (SUPPORT_OPEN, Piece::Open(SpanKind::Association)),
    (SUPPORT_CLOSE, Piece::Close(SpanKind::Association)),
];

fn lex(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let next = TAGS
                .iter()
                .filter_map(|(t, p)| rest.find(t).map(|i| (i, *t, *p)))
                .min_by_key(|(i, _, _)| *i);
            match next {
                Some((0, t, p)) => {
                    out.push(p);
                    rest = &rest[t.len()..];
                }
                Some((i, _, _)) => {
                    out.push(Piece::Word(&rest[..i]));
                    rest = &rest[i..];
                }
                None => {
                    out.push(Piece::Word(rest));
                    rest = "";
                }
            }
        }
    }
    out
}

fn kind_name(k: SpanKind) -> &'static str {
    match k {
        SpanKind::Central => "SEG_C",
        SpanKind::Association => "SEG_S",
    }
}

/// Parses a tagged caption. Entities are numbered in order of appearance.
pub fn parse_seg_caption(text: &str) -> Result<SegCaption> {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    let mut open: Option<(SpanKind, usize)> = None;
    for piece in lex(text) {
        match piece {
            Piece::Word(w) => tokens.push(w.to_string()),
            Piece::Open(k) => {
                if let Some((outer, _)) = open {
                    return Err(Error::NestedTags(alloc::format!(
                        "{} opened inside {} at token {}",
                        kind_name(k),
                        kind_name(outer),
                        tokens.len()
                    )));
                }
                open = Some((k, tokens.len()));
            }
            Piece::Close(k) => match open {
                Some((ok, start)) if ok == k => {
                    if start == tokens.len() {
                        return Err(Error::EmptySpan(start));
                    }
                    spans.push(Span {
                        start,
                        end: tokens.len(),
                        kind: k,
                        entity: spans.len(),
                    });
                    open = None;
                }
                Some((ok, _)) => {
                    return Err(Error::UnbalancedTags(alloc::format!(
                        "{} closed while {} is open",
                        kind_name(k),
                        kind_name(ok)
                    )))
                }
                None => {
                    return Err(Error::UnbalancedTags(alloc::format!(
                        "{} closed at token {} without an opening tag",
                        kind_name(k),
                        tokens.len()
                    )))
                }
            },
        }
    }
    if let Some((k, start)) = open {
        return Err(Error::UnbalancedTags(alloc::format!(
            "{} opened at token {start} is never closed",
            kind_name(k)
        )));
    }
    let central = spans.iter().filter(|s| s.kind == SpanKind::Central).count();
    if central != 1 {
        return Err(Error::CentralSpanCount(central));
    }
    Ok(SegCaption { tokens, spans })
}

/// Canonical text form: tokens separated by single spaces, opening tags
/// glued to the first token of their span and closing tags to the last.
pub fn serialize_seg_caption(c: &SegCaption) -> String {
    let mut out = String::new();
    for (i, tok) in c.tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        for s in c.spans.iter().filter(|s| s.start == i) {
            out.push_str(match s.kind {
                SpanKind::Central => CENTRAL_OPEN,
                SpanKind::Association => SUPPORT_OPEN,
            });
        }
        out.push_str(tok);
        for s in c.spans.iter().filter(|s| s.end == i + 1) {
            out.push_str(match s.kind {
                SpanKind::Central => CENTRAL_CLOSE,
                SpanKind::Association => SUPPORT_CLOSE,
            });
        }
    }
    out
}

impl SegCaption {
    /// Token stream with tags as standalone tokens, e.g. for a decoder.
    pub fn tagged_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            for s in self.spans.iter().filter(|s| s.start == i) {
                out.push(
                    match s.kind {
                        SpanKind::Central => CENTRAL_OPEN,
                        SpanKind::Association => SUPPORT_OPEN,
                    }
                    .to_string(),
                );
            }
            out.push(tok.clone());
            for s in self.spans.iter().filter(|s| s.end == i + 1) {
                out.push(
                    match s.kind {
                        SpanKind::Central => CENTRAL_CLOSE,
                        SpanKind::Association => SUPPORT_CLOSE,
                    }
                    .to_string(),
                );
            }
        }
        out
    }

    pub fn phrase(&self, span: &Span) -> &[String] {
        &self.tokens[span.start..span.end]
    }

    /// Spans of one entity in caption order.
    pub fn entity_spans(&self, entity: usize) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.entity == entity)
    }
}

/// Best-effort reading of a possibly malformed tagged token stream, as a
/// decoder may produce: content tokens and the spans of properly closed
/// tag pairs. Stray or nested tags are skipped.
pub fn lenient_spans<S: AsRef<str>>(tagged: &[S]) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut open: Option<(SpanKind, usize)> = None;
    for t in tagged {
        let t = t.as_ref();
        match TAGS.iter().find(|(s, _)| *s == t).map(|(_, p)| *p) {
            Some(Piece::Open(k)) => open = Some((k, tokens.len())),
            Some(Piece::Close(k)) => {
                if let Some((ok, start)) = open {
                    if ok == k && start < tokens.len() {
                        spans.push((start, tokens.len()));
                    }
                }
                open = None;
            }
            _ => tokens.push(t.to_string()),
        }
    }
    (tokens, spans)
}

/// `Y[n][j] = 1` iff content position `j < positions` lies in a span of
/// entity `entity_order[n]`.
pub fn build_y(c: &SegCaption, entity_order: &[usize], positions: usize) -> Result<Tensor> {
    for s in &c.spans {
        if !entity_order.contains(&s.entity) {
            return Err(Error::UnknownEntity(s.entity));
        }
    }
    let mut y = vec![0.0; entity_order.len() * positions];
    for (n, &e) in entity_order.iter().enumerate() {
        for s in c.entity_spans(e) {
            for j in s.start..s.end.min(positions) {
                y[n * positions + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![entity_order.len(), positions], y)
}
