use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Book, Corpus, DiscourseElement, ElementKind, LabelKind, Typography};
use crate::error::{Error, Result};
use crate::text::{figure_refs, looks_like_equation, tokenize};

/// Node of the hierarchical document format (one JSON file per book).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocNode {
    pub kind: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub typography: DocTypography,
    #[serde(default)]
    pub equation: Option<String>,
    #[serde(default)]
    pub children: Vec<DocNode>,
    /// Only meaningful on the root; overrides the file stem as book id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub book_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTypography {
    #[serde(default)]
    pub bold: bool,
    #[serde(default)]
    pub italic: bool,
    #[serde(default)]
    pub underline: bool,
    #[serde(default)]
    pub boxed: bool,
    #[serde(default)]
    pub colored: bool,
    #[serde(default = "one")]
    pub font_scale: f64,
    #[serde(default)]
    pub label: String,
}

fn one() -> f64 {
    1.0
}

impl Default for DocTypography {
    fn default() -> Self {
        Self {
            bold: false,
            italic: false,
            underline: false,
            boxed: false,
            colored: false,
            font_scale: 1.0,
            label: String::new(),
        }
    }
}

impl DocNode {
    pub fn container(kind: &str, children: Vec<DocNode>) -> Self {
        Self::leaf(kind, "", children)
    }

    pub fn element(kind: &str, text: &str) -> Self {
        Self::leaf(kind, text, Vec::new())
    }

    fn leaf(kind: &str, text: &str, children: Vec<DocNode>) -> Self {
        Self {
            kind: kind.into(),
            text: text.into(),
            typography: DocTypography::default(),
            equation: None,
            children,
            book_id: None,
        }
    }
}

const CONTAINER_KINDS: &[&str] = &[
    "document",
    "book",
    "chapter",
    "section",
    "subsection",
    "subsubsection",
    "paragraph",
    "block",
    "box",
    "list",
    "item",
];

fn is_section_like(kind: &str) -> bool {
    matches!(kind, "chapter" | "section" | "subsection" | "subsubsection")
}

struct Inherited {
    bold: bool,
    italic: bool,
    underline: bool,
    boxed: bool,
    colored: bool,
    label: LabelKind,
    section_label: LabelKind,
}

struct Flattener<'a> {
    source: &'a Path,
    book_id: String,
    elements: Vec<DiscourseElement>,
}

impl Flattener<'_> {
    fn err(&self, node_path: &[String], message: impl std::fmt::Display) -> Error {
        let node = if node_path.is_empty() {
            "<root>".to_string()
        } else {
            node_path.join("/")
        };
        Error::Document {
            path: self.source.to_path_buf(),
            message: format!("node {node}: {message}"),
        }
    }

    fn typography(&self, node: &DocNode, at: &[String], inh: &Inherited) -> Result<Typography> {
        let t = &node.typography;
        if !(t.font_scale > 0.0 && t.font_scale.is_finite()) {
            return Err(self.err(at, format!("font_scale must be positive, got {}", t.font_scale)));
        }
        let label = LabelKind::parse(&t.label)
            .ok_or_else(|| self.err(at, format!("unknown label `{}`", t.label)))?;
        Ok(Typography {
            bold: t.bold || inh.bold,
            italic: t.italic || inh.italic,
            underline: t.underline || inh.underline,
            boxed: t.boxed || inh.boxed,
            colored: t.colored || inh.colored,
            font_scale: t.font_scale,
            labeled_kind: if label.is_some() { label } else { inh.label },
        })
    }

    fn push(&mut self, kind: ElementKind, text: &str, typography: Typography, path: &[String], equation: Option<String>, section_label: LabelKind) {
        let seq_index = self.elements.len();
        self.elements.push(DiscourseElement {
            id: format!("{}:{}", self.book_id, seq_index),
            book_id: self.book_id.clone(),
            seq_index,
            kind,
            text: tokenize(text),
            typography,
            hierarchy_path: path.to_vec(),
            figure_refs: figure_refs(text),
            equation_payload: equation,
            section_label,
        });
    }

    fn visit(&mut self, node: &DocNode, label: String, parent_path: &[String], inh: &Inherited) -> Result<()> {
        let mut here = parent_path.to_vec();
        here.push(label);
        if let Some(kind) = ElementKind::parse(&node.kind) {
            if !node.children.is_empty() {
                return Err(self.err(&here, "element nodes cannot have children"));
            }
            let typography = self.typography(node, &here, inh)?;
            let (kind, equation) = match kind {
                ElementKind::Equation => {
                    let payload = node.equation.clone().unwrap_or_else(|| node.text.clone());
                    if payload.trim().is_empty() {
                        return Err(self.err(&here, "equation node without content"));
                    }
                    (ElementKind::Equation, Some(payload))
                }
                ElementKind::Sentence if node.equation.is_some() => (ElementKind::Equation, node.equation.clone()),
                ElementKind::Sentence if looks_like_equation(&node.text) => {
                    (ElementKind::Equation, Some(node.text.trim().to_string()))
                }
                other => (other, None),
            };
            let text = if node.text.is_empty() {
                equation.clone().unwrap_or_default()
            } else {
                node.text.clone()
            };
            self.push(kind, &text, typography, parent_path, equation, inh.section_label);
            return Ok(());
        }
        if !CONTAINER_KINDS.contains(&node.kind.as_str()) {
            return Err(self.err(&here, format!("unknown node kind `{}`", node.kind)));
        }
        let typography = self.typography(node, &here, inh)?;
        let heading_words = tokenize(&node.text);
        let own_label = if typography.labeled_kind.is_some() {
            typography.labeled_kind
        } else {
            LabelKind::from_words(&heading_words)
        };
        let section_label = if is_section_like(&node.kind) {
            own_label
        } else {
            inh.section_label
        };
        if !node.text.trim().is_empty() {
            self.push(ElementKind::Heading, &node.text, typography.clone(), &here, None, section_label);
        }
        let child_inh = Inherited {
            bold: typography.bold,
            italic: typography.italic,
            underline: typography.underline,
            boxed: typography.boxed,
            colored: typography.colored,
            label: typography.labeled_kind,
            section_label,
        };
        for (i, child) in node.children.iter().enumerate() {
            self.visit(child, format!("{}#{}", child.kind, i), &here, &child_inh)?;
        }
        Ok(())
    }
}

/// Flattens a document tree into a book by preorder traversal.
pub fn load_document(source: &Path, default_id: &str, root: &DocNode) -> Result<Book> {
    let book_id = root.book_id.clone().unwrap_or_else(|| default_id.to_string());
    let mut f = Flattener {
        source,
        book_id: book_id.clone(),
        elements: Vec::new(),
    };
    let inh = Inherited {
        bold: false,
        italic: false,
        underline: false,
        boxed: false,
        colored: false,
        label: LabelKind::None,
        section_label: LabelKind::None,
    };
    f.visit(root, format!("{}#0", root.kind), &[], &inh)?;
    Ok(Book {
        book_id,
        elements: f.elements,
    })
}

/// Loads every `*.json` file of a directory as one book, in file-name order.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    let mut books = Vec::with_capacity(files.len());
    for path in files {
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root: DocNode = serde_json::from_str(&raw).map_err(|e| Error::Document {
            path: path.clone(),
            message: format!("malformed document: {e}"),
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        books.push(load_document(&path, &stem, &root)?);
    }
    Corpus::new(books)
}

/// Writes one `<book_id>.json` per document root.
pub fn save_documents(dir: &Path, docs: &[(String, DocNode)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, root) in docs {
        let path = dir.join(format!("{id}.json"));
        let json = serde_json::to_string_pretty(root).expect("document trees serialize");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(t: &str) -> DocNode {
        DocNode::element("sentence", t)
    }

    #[test]
    fn three_sentences_under_a_section() {
        let root = DocNode::container(
            "document",
            vec![DocNode::container("section", vec![sentence("One ."), sentence("Two ."), sentence("Three .")])],
        );
        let book = load_document(Path::new("x.json"), "x", &root).unwrap();
        assert_eq!(book.len(), 3);
        for (k, e) in book.elements.iter().enumerate() {
            assert_eq!(e.seq_index, k);
            assert_eq!(e.hierarchy_path, ["document#0", "section#0"]);
        }
    }

    #[test]
    fn boxed_theorem_block() {
        let mut block = DocNode::container(
            "block",
            vec![
                sentence("The square on the hypotenuse equals the sum of the squares on the legs ."),
                DocNode {
                    equation: Some("BC^2 + AC^2 = AB^2".into()),
                    ..DocNode::element("equation", "")
                },
            ],
        );
        block.typography.boxed = true;
        block.typography.label = "theorem".into();
        let root = DocNode::container(
            "document",
            vec![DocNode::container("section", vec![sentence("Right triangles are special ."), block])],
        );
        let book = load_document(Path::new("x.json"), "x", &root).unwrap();
        assert_eq!(book.len(), 3);
        let e1 = &book.elements[1];
        assert!(e1.typography.boxed);
        assert_eq!(e1.typography.labeled_kind, LabelKind::Theorem);
        assert!(!book.elements[0].typography.boxed);
        assert_eq!(book.elements[2].kind, ElementKind::Equation);
        assert_eq!(book.elements[2].equation_payload.as_deref(), Some("BC^2 + AC^2 = AB^2"));
    }

    #[test]
    fn equation_like_sentence_is_detected() {
        let root = DocNode::container("document", vec![sentence("PA × PB = PT^2")]);
        let book = load_document(Path::new("x.json"), "x", &root).unwrap();
        assert_eq!(book.elements[0].kind, ElementKind::Equation);
        assert!(book.elements[0].has_equation());
    }

    #[test]
    fn errors_name_the_node() {
        let root = DocNode::container("document", vec![DocNode::container("section", vec![DocNode::element("widget", "x")])]);
        let err = load_document(Path::new("bad.json"), "bad", &root).unwrap_err().to_string();
        assert!(err.contains("bad.json"), "{err}");
        assert!(err.contains("document#0/section#0/widget#0"), "{err}");

        let mut neg = sentence("x");
        neg.typography.font_scale = 0.0;
        let root = DocNode::container("document", vec![neg]);
        assert!(load_document(Path::new("bad.json"), "bad", &root).is_err());
    }

    #[test]
    fn container_heading_sets_section_label() {
        let mut sec = DocNode::container("section", vec![sentence("Consider a triangle .")]);
        sec.text = "Theorem 6.1 Angle sum".into();
        let root = DocNode::container("document", vec![sec]);
        let book = load_document(Path::new("x.json"), "x", &root).unwrap();
        assert_eq!(book.elements[0].kind, ElementKind::Heading);
        assert_eq!(book.elements[1].section_label, LabelKind::Theorem);
    }

    #[test]
    fn directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).unwrap().books.is_empty());
        let root = DocNode::container("document", vec![sentence("a .")]);
        save_documents(dir.path(), &[("b1".into(), root.clone()), ("b2".into(), root.clone())]).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.books.len(), 2);
        assert_eq!(c.books[0].book_id, "b1");

        let mut dup = root;
        dup.book_id = Some("b1".into());
        save_documents(dir.path(), &[("b3".into(), dup)]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::DuplicateBook(_))));

        fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("broken.json"));
    }
}
