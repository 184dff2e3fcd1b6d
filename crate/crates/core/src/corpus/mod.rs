//! Document model: books as preorder sequences of discourse elements, axiom
//! mentions over them, gold annotations and the synthetic corpus generator.

mod document;
mod gold;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use document::{load_corpus, load_document, save_documents, DocNode, DocTypography};
pub use gold::GoldAnnotations;
pub use synth::{generate_synthetic_corpus, synthesize_documents, AxiomTemplate, SynthConfig, AXIOM_LIBRARY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Axiom,
    Theorem,
    Corollary,
    Property,
    #[default]
    None,
}

impl LabelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axiom" | "postulate" => Some(Self::Axiom),
            "theorem" => Some(Self::Theorem),
            "corollary" => Some(Self::Corollary),
            "property" => Some(Self::Property),
            "" | "none" => Some(Self::None),
            _ => None,
        }
    }

    /// Label announced by the words of a heading, e.g. "Theorem 6.1".
    pub fn from_words(tokens: &[String]) -> Self {
        for t in tokens {
            match t.to_ascii_lowercase().as_str() {
                "axiom" | "postulate" => return Self::Axiom,
                "theorem" => return Self::Theorem,
                "corollary" => return Self::Corollary,
                "property" => return Self::Property,
                _ => {}
            }
        }
        Self::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Axiom => "axiom",
            Self::Theorem => "theorem",
            Self::Corollary => "corollary",
            Self::Property => "property",
            Self::None => "",
        }
    }

    pub fn is_some(self) -> bool {
        self != Self::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Typography {
    pub bold: bool,
    pub italic: bool,
    pub underline: bool,
    pub boxed: bool,
    pub colored: bool,
    pub font_scale: f64,
    pub labeled_kind: LabelKind,
}

impl Default for Typography {
    fn default() -> Self {
        Self {
            bold: false,
            italic: false,
            underline: false,
            boxed: false,
            colored: false,
            font_scale: 1.0,
            labeled_kind: LabelKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Sentence,
    Heading,
    Title,
    Figure,
    Table,
    Caption,
    Equation,
}

impl ElementKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sentence" => Self::Sentence,
            "heading" => Self::Heading,
            "title" => Self::Title,
            "figure" => Self::Figure,
            "table" => Self::Table,
            "caption" => Self::Caption,
            "equation" => Self::Equation,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sentence => "sentence",
            Self::Heading => "heading",
            Self::Title => "title",
            Self::Figure => "figure",
            Self::Table => "table",
            Self::Caption => "caption",
            Self::Equation => "equation",
        }
    }
}

/// One unit of sequence labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscourseElement {
    pub id: String,
    pub book_id: String,
    pub seq_index: usize,
    pub kind: ElementKind,
    /// Tokens with their original case.
    pub text: Vec<String>,
    pub typography: Typography,
    /// Labels of the container nodes from the document root down to this
    /// element's parent.
    pub hierarchy_path: Vec<String>,
    pub figure_refs: Vec<String>,
    pub equation_payload: Option<String>,
    /// Label of the nearest enclosing section, from its typography or its
    /// heading words.
    pub section_label: LabelKind,
}

impl DiscourseElement {
    pub fn has_equation(&self) -> bool {
        self.equation_payload.is_some()
    }

    /// Element-level label: explicit typography label, else one announced by
    /// the element's own words.
    pub fn mention_label(&self) -> LabelKind {
        if self.typography.labeled_kind.is_some() {
            self.typography.labeled_kind
        } else {
            LabelKind::from_words(&self.text)
        }
    }

    pub fn same_node(&self, other: &DiscourseElement) -> bool {
        self.hierarchy_path == other.hierarchy_path
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Book {
    pub book_id: String,
    pub elements: Vec<DiscourseElement>,
}

impl Book {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Caption text of a referenced figure. A caption is linked to the figure
    /// element it immediately follows, or carries the figure reference itself.
    pub fn caption_of(&self, figure_ref: &str) -> Option<&[String]> {
        for (k, el) in self.elements.iter().enumerate() {
            if el.kind == ElementKind::Figure && el.figure_refs.iter().any(|r| r == figure_ref) {
                if let Some(next) = self.elements.get(k + 1) {
                    if next.kind == ElementKind::Caption {
                        return Some(&next.text);
                    }
                }
            }
        }
        self.elements
            .iter()
            .find(|e| e.kind == ElementKind::Caption && e.figure_refs.iter().any(|r| r == figure_ref))
            .map(|e| e.text.as_slice())
    }

    pub fn mention_elements(&self, m: &AxiomMention) -> &[DiscourseElement] {
        &self.elements[m.start..=m.end]
    }

    /// Concatenated tokens of a mention.
    pub fn mention_tokens(&self, m: &AxiomMention) -> Vec<String> {
        self.mention_elements(m)
            .iter()
            .flat_map(|e| e.text.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub books: Vec<Book>,
}

impl Corpus {
    pub fn new(books: Vec<Book>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for b in &books {
            if !seen.insert(b.book_id.clone()) {
                return Err(Error::DuplicateBook(b.book_id.clone()));
            }
        }
        Ok(Self { books })
    }

    pub fn book(&self, id: &str) -> Option<&Book> {
        self.books.iter().find(|b| b.book_id == id)
    }

    pub fn book_index(&self, id: &str) -> Option<usize> {
        self.books.iter().position(|b| b.book_id == id)
    }

    /// Keeps only the listed books, in the given order.
    pub fn subset(&self, ids: &[&str]) -> Result<Corpus> {
        let books = ids
            .iter()
            .map(|id| {
                self.book(id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownBook(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(books)
    }
}

/// Contiguous inclusive element span hypothesized to state one axiom.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxiomMention {
    pub book_id: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram_ref: Option<String>,
}

impl AxiomMention {
    pub fn new(book_id: impl Into<String>, start: usize, end: usize) -> Self {
        assert!(start <= end, "mention span must satisfy start <= end");
        Self {
            book_id: book_id.into(),
            start,
            end,
            diagram_ref: None,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlap(&self, other: &AxiomMention) -> usize {
        if self.book_id != other.book_id {
            return 0;
        }
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }

    pub fn same_span(&self, other: &AxiomMention) -> bool {
        self.book_id == other.book_id && self.start == other.start && self.end == other.end
    }
}

/// Identification tag set, in tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    B,
    I,
    O,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::B, Tag::I, Tag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }

    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "B" => Some(Tag::B),
            "I" => Some(Tag::I),
            "O" => Some(Tag::O),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::O => "O",
        })
    }
}

/// Turns a B/I/O sequence into mentions. `B` always opens a mention, `I`
/// extends the open one, and an `I` with nothing open starts a new mention.
pub fn extract_mentions(book: &Book, tags: &[Tag]) -> Result<Vec<AxiomMention>> {
    if tags.len() != book.len() {
        return Err(Error::LengthMismatch {
            tags: tags.len(),
            elements: book.len(),
        });
    }
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let close = |start: usize, end: usize, out: &mut Vec<AxiomMention>| {
        let mut m = AxiomMention::new(book.book_id.clone(), start, end);
        m.diagram_ref = book.elements[start..=end]
            .iter()
            .find_map(|e| e.figure_refs.first().cloned());
        out.push(m);
    };
    for (k, tag) in tags.iter().enumerate() {
        match (tag, open) {
            (Tag::B, Some(s)) => {
                close(s, k - 1, &mut out);
                open = Some(k);
            }
            (Tag::B, None) | (Tag::I, None) => open = Some(k),
            (Tag::I, Some(_)) => {}
            (Tag::O, Some(s)) => {
                close(s, k - 1, &mut out);
                open = None;
            }
            (Tag::O, None) => {}
        }
    }
    if let Some(s) = open {
        close(s, tags.len() - 1, &mut out);
    }
    Ok(out)
}

/// Inverse of [`extract_mentions`] for non-overlapping spans.
pub fn tags_from_mentions(len: usize, mentions: &[AxiomMention]) -> Vec<Tag> {
    let mut tags = vec![Tag::O; len];
    for m in mentions {
        tags[m.start] = Tag::B;
        for t in &mut tags[m.start + 1..=m.end] {
            *t = Tag::I;
        }
    }
    tags
}
