use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AxiomMention, Corpus};
use crate::error::{Error, Result};

/// Gold mentions, their partition into ordered global axioms, and gold parses.
///
/// Mentions are stored flat; `clusters` and `parses` refer to indices into
/// `mentions`. Cluster order is the global axiom order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotations {
    pub mentions: Vec<GoldMention>,
    #[serde(default)]
    pub clusters: Vec<Vec<usize>>,
    /// Rule text per mention index.
    #[serde(default)]
    pub parses: BTreeMap<usize, String>,
    /// Gold premise/conclusion split per mention index, as a token boundary
    /// within the mention text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<usize, usize>,
    /// Optional gold answers for problems, keyed by problem id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problems: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMention {
    pub book: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram: Option<String>,
}

impl GoldMention {
    pub fn to_mention(&self) -> AxiomMention {
        AxiomMention {
            book_id: self.book.clone(),
            start: self.start,
            end: self.end,
            diagram_ref: self.diagram.clone(),
        }
    }
}

impl GoldAnnotations {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gold: GoldAnnotations = serde_json::from_str(&raw).map_err(|e| Error::Document {
            path: path.to_path_buf(),
            message: format!("malformed gold file: {e}"),
        })?;
        gold.validate().map_err(|e| Error::Document {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(gold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("gold annotations serialize");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Clusters must partition exactly the gold mentions.
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Ok(());
        }
        let mut seen = vec![false; self.mentions.len()];
        for c in &self.clusters {
            for &m in c {
                match seen.get_mut(m) {
                    None => return Err(Error::InvalidArgument(format!("cluster refers to unknown mention {m}"))),
                    Some(true) => return Err(Error::InvalidArgument(format!("mention {m} is in two clusters"))),
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("mention {m} is in no cluster")));
        }
        Ok(())
    }

    /// Gold mentions of one book, sorted by start.
    pub fn mentions_for(&self, book_id: &str) -> Vec<AxiomMention> {
        let mut v: Vec<AxiomMention> = self
            .mentions
            .iter()
            .filter(|m| m.book == book_id)
            .map(GoldMention::to_mention)
            .collect();
        v.sort_by_key(|m| m.start);
        v
    }

    /// Index of the cluster holding each mention.
    pub fn cluster_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.mentions.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                out[m] = Some(c);
            }
        }
        out
    }

    pub fn mention_index(&self, m: &AxiomMention) -> Option<usize> {
        self.mentions
            .iter()
            .position(|g| g.book == m.book_id && g.start == m.start && g.end == m.end)
    }

    /// Restricts to the given books, renumbering mentions.
    pub fn restrict(&self, corpus: &Corpus) -> GoldAnnotations {
        let mut remap = vec![None; self.mentions.len()];
        let mut mentions = Vec::new();
        for (i, m) in self.mentions.iter().enumerate() {
            if corpus.book(&m.book).is_some() {
                remap[i] = Some(mentions.len());
                mentions.push(m.clone());
            }
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| c.iter().filter_map(|&m| remap[m]).collect::<Vec<_>>())
            .filter(|c| !c.is_empty())
            .collect();
        let parses = self
            .parses
            .iter()
            .filter_map(|(&m, r)| remap[m].map(|n| (n, r.clone())))
            .collect();
        let splits = self
            .splits
            .iter()
            .filter_map(|(&m, &s)| remap[m].map(|n| (n, s)))
            .collect();
        GoldAnnotations {
            mentions,
            clusters,
            parses,
            splits,
            problems: self.problems.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm(book: &str, start: usize, end: usize) -> GoldMention {
        GoldMention {
            book: book.into(),
            start,
            end,
            diagram: None,
        }
    }

    #[test]
    fn partition_is_checked() {
        let mut g = GoldAnnotations {
            mentions: vec![gm("a", 0, 1), gm("b", 2, 2)],
            clusters: vec![vec![0, 1]],
            ..Default::default()
        };
        assert!(g.validate().is_ok());
        g.clusters = vec![vec![0]];
        assert!(g.validate().is_err());
        g.clusters = vec![vec![0, 1], vec![1]];
        assert!(g.validate().is_err());
    }

    #[test]
    fn file_format_round_trips() {
        let mut g = GoldAnnotations {
            mentions: vec![gm("a", 0, 1), gm("b", 2, 2)],
            clusters: vec![vec![1, 0]],
            ..Default::default()
        };
        g.parses.insert(0, "1 :: isTriangle(triangle(A,B,C)) => eq(BC^2 = AB^2) .".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gold.json");
        g.save(&p).unwrap();
        let raw = fs::read_to_string(&p).unwrap();
        assert!(raw.contains("\"book\": \"a\""));
        assert!(raw.contains("\"0\":"));
        assert_eq!(GoldAnnotations::load(&p).unwrap(), g);
    }
}
