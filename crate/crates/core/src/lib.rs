//! Harvesting geometry axioms from formatted textbooks, parsing them into
//! weighted Horn rules, and answering questions with them.

pub mod align;
pub mod corpus;
pub mod crf;
pub mod equation;
pub mod eval;
pub mod error;
pub mod features;
pub mod joint;
pub mod logic;
pub mod optim;
pub mod parser;
pub mod solver;
pub mod text;

pub use corpus::{AxiomMention, Book, Corpus, DiscourseElement, GoldAnnotations, Tag};
pub use error::{Error, Result};
