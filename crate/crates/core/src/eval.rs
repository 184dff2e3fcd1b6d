//! Identification, alignment, parsing and question-answering metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::AxiomMention;
use crate::error::{Error, Result};
use crate::logic::HornRule;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    /// Undefined ratios (zero denominators) count as 0.
    pub fn from_counts(true_pos: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self::new(ratio(true_pos, predicted), ratio(true_pos, gold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Strict,
    /// Overlap must exceed half of both spans.
    Relaxed,
    /// Overlap must exceed half of the gold span only.
    RelaxedGoldOnly,
}

pub fn spans_match(pred: &AxiomMention, gold: &AxiomMention, mode: MatchMode) -> bool {
    match mode {
        MatchMode::Strict => pred.same_span(gold),
        MatchMode::Relaxed => {
            let o = pred.overlap(gold);
            2 * o > pred.len() && 2 * o > gold.len()
        }
        MatchMode::RelaxedGoldOnly => 2 * pred.overlap(gold) > gold.len(),
    }
}

/// Greedy one-to-one matching: candidate pairs by descending overlap, ties by
/// earlier gold then earlier prediction. Returns (pred, gold) index pairs.
pub fn match_mentions(pred: &[AxiomMention], gold: &[AxiomMention], mode: MatchMode) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if spans_match(p, g, mode) {
                cands.push((p.overlap(g), g.start, p.start, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)).then(a.4.cmp(&b.4)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gold.len()];
    let mut out = Vec::new();
    for (_, _, _, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

pub fn ident_prf(pred: &[AxiomMention], gold: &[AxiomMention], mode: MatchMode) -> Prf {
    Prf::from_counts(match_mentions(pred, gold, mode).len(), pred.len(), gold.len())
}

fn labels_of(clusters: &[Vec<usize>]) -> Result<BTreeMap<usize, usize>> {
    let mut out = BTreeMap::new();
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            if out.insert(m, c).is_some() {
                return Err(Error::InvalidArgument(format!("item {m} appears in two clusters")));
            }
        }
    }
    Ok(out)
}

fn paired_labels(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<Vec<(usize, usize)>> {
    let p = labels_of(pred)?;
    let g = labels_of(gold)?;
    if p.keys().ne(g.keys()) {
        return Err(Error::InvalidArgument("partitions cover different items".into()));
    }
    Ok(p.iter().map(|(k, &c)| (c, g[k])).collect())
}

/// Pairwise same-cluster decisions over all unordered item pairs.
pub fn alignment_pair_prf(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<Prf> {
    let l = paired_labels(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for i in 0..l.len() {
        for j in i + 1..l.len() {
            let sp = l[i].0 == l[j].0;
            let sg = l[i].1 == l[j].1;
            np += sp as usize;
            ng += sg as usize;
            tp += (sp && sg) as usize;
        }
    }
    Ok(Prf::from_counts(tp, np, ng))
}

/// Normalized mutual information `I / sqrt(H_p H_g)`. When an entropy is zero
/// the score is 1 if both partitions are a single cluster, else 0.
pub fn nmi(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    let l = paired_labels(pred, gold)?;
    if l.is_empty() {
        return Err(Error::InvalidArgument("nmi of an empty universe".into()));
    }
    let n = l.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut mp: BTreeMap<usize, f64> = BTreeMap::new();
    let mut mg: BTreeMap<usize, f64> = BTreeMap::new();
    for &(a, b) in &l {
        *joint.entry((a, b)).or_default() += 1.0;
        *mp.entry(a).or_default() += 1.0;
        *mg.entry(b).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -m.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
    let (hp, hg) = (entropy(&mp), entropy(&mg));
    if hp <= 0.0 || hg <= 0.0 {
        return Ok(if mp.len() == 1 && mg.len() == 1 { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| c / n * (c * n / (mp[&a] * mg[&b])).ln())
        .sum();
    Ok((mi / (hp * hg).sqrt()).clamp(0.0, 1.0))
}

/// Partition of the gold mentions in which each gold mention takes the
/// cluster of the prediction it is relaxed-matched to; unmatched gold
/// mentions are singletons.
pub fn project_to_gold(pred: &[AxiomMention], pred_clusters: &[Vec<usize>], gold: &[AxiomMention]) -> Result<Vec<Vec<usize>>> {
    let pl = labels_of(pred_clusters)?;
    let mut by_book: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in pred.iter().enumerate() {
        by_book.entry(p.book_id.as_str()).or_default().0.push(i);
    }
    for (j, g) in gold.iter().enumerate() {
        by_book.entry(g.book_id.as_str()).or_default().1.push(j);
    }
    let mut assigned: Vec<Option<usize>> = vec![None; gold.len()];
    for (ps, gs) in by_book.values() {
        let pm: Vec<AxiomMention> = ps.iter().map(|&i| pred[i].clone()).collect();
        let gm: Vec<AxiomMention> = gs.iter().map(|&j| gold[j].clone()).collect();
        for (i, j) in match_mentions(&pm, &gm, MatchMode::Relaxed) {
            assigned[gs[j]] = pl.get(&ps[i]).copied();
        }
    }
    let mut clusters: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
    for (j, a) in assigned.iter().enumerate() {
        let key = match a {
            Some(c) => (true, *c),
            None => (false, j),
        };
        clusters.entry(key).or_default().push(j);
    }
    Ok(clusters.into_values().collect())
}

/// NMI over gold mentions after [`project_to_gold`].
pub fn end_to_end_nmi(
    pred: &[AxiomMention],
    pred_clusters: &[Vec<usize>],
    gold: &[AxiomMention],
    gold_clusters: &[Vec<usize>],
) -> Result<f64> {
    nmi(&project_to_gold(pred, pred_clusters, gold)?, gold_clusters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseLevel {
    Literal,
    Full,
}

fn rule_items(r: &HornRule) -> Vec<String> {
    let c = r.canonical();
    let mut v: Vec<String> = c.premise.items().into_iter().map(|i| format!("premise {i}")).collect();
    v.extend(c.conclusion.items().into_iter().map(|i| format!("conclusion {i}")));
    v
}

/// Parse accuracy with rules paired by global axiom; a missing prediction
/// counts as a miss.
pub fn parse_prf(pred: &[Option<HornRule>], gold: &[HornRule], level: ParseLevel) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            tags: pred.len(),
            elements: gold.len(),
        });
    }
    match level {
        ParseLevel::Full => {
            let predicted = pred.iter().filter(|p| p.is_some()).count();
            let tp = pred
                .iter()
                .zip(gold)
                .filter(|(p, g)| p.as_ref().is_some_and(|p| p.canonical().body() == g.canonical().body()))
                .count();
            Ok(Prf::from_counts(tp, predicted, gold.len()))
        }
        ParseLevel::Literal => {
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for (p, g) in pred.iter().zip(gold) {
                let gi = rule_items(g);
                ng += gi.len();
                if let Some(p) = p {
                    let pi = rule_items(p);
                    np += pi.len();
                    let mut pool: BTreeMap<&String, usize> = BTreeMap::new();
                    for x in &gi {
                        *pool.entry(x).or_default() += 1;
                    }
                    for x in &pi {
                        if let Some(c) = pool.get_mut(x).filter(|c| **c > 0) {
                            *c -= 1;
                            tp += 1;
                        }
                    }
                }
            }
            Ok(Prf::from_counts(tp, np, ng))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerOutcome {
    Correct,
    Wrong,
    Abstain,
}

/// `100 (correct - 0.25 wrong) / n`; zero for no questions.
pub fn sat_score(answers: &[AnswerOutcome]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let c = answers.iter().filter(|a| **a == AnswerOutcome::Correct).count() as f64;
    let w = answers.iter().filter(|a| **a == AnswerOutcome::Wrong).count() as f64;
    100.0 * (c - 0.25 * w) / answers.len() as f64
}

/// Ordered `metric value` report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn push_prf(&mut self, prefix: &str, prf: Prf) {
        self.push(format!("{prefix}.precision"), prf.precision);
        self.push(format!("{prefix}.recall"), prf.recall);
        self.push(format!("{prefix}.f1"), prf.f1);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(n, v)| format!("{n}  {v:.4}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.entries.iter().map(|(n, v)| (n.clone(), serde_json::json!(v))).collect();
        serde_json::Value::Object(map)
    }
}

/// Distinct items of a partition, for sanity checks.
pub fn universe(clusters: &[Vec<usize>]) -> BTreeSet<usize> {
    clusters.iter().flatten().copied().collect()
}
