//! Premise/conclusion parsing of axiom mentions into weighted horn rules,
//! and fusion of the parses of one axiom across books.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::ElementKind;
use crate::crf::FeatureIndex;
use crate::equation::{Equation, Naming};
use crate::error::{Error, Result};
use crate::eval::{parse_prf, ParseLevel};
use crate::features::{split_features, FeatureOptions, MarkerTable, MentionText};
use crate::logic::{Formula, HornRule, Lexicon, Literal, Provenance, SlotType, Term};
use crate::optim::{minimize_robust, OptimConfig};
use crate::text::is_point_label;

/// A premise/conclusion boundary over the mention tokens. The premise is
/// `tokens[..split]` and the conclusion `tokens[split..]`; a forced candidate
/// takes the prose tokens as premise and the equation elements as
/// conclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitCandidate {
    pub split: usize,
    pub forced: bool,
}

impl SplitCandidate {
    pub fn premise_span(&self) -> std::ops::Range<usize> {
        0..self.split
    }

    pub fn conclusion_span(&self, n: usize) -> std::ops::Range<usize> {
        if self.forced {
            n..n
        } else {
            self.split..n
        }
    }
}

fn is_title(text: &MentionText, i: usize) -> bool {
    matches!(text.elements[text.element_of[i]].kind, ElementKind::Heading | ElementKind::Title)
}

/// Tokens of the elements that carry no equation.
pub fn prose_tokens(text: &MentionText) -> Vec<String> {
    text.tokens
        .iter()
        .zip(&text.element_of)
        .filter(|(_, e)| text.equations[**e].is_none())
        .map(|(t, _)| t.clone())
        .collect()
}

/// Every inter-token boundary of the mention text.
pub fn boundary_splits(text: &MentionText) -> Vec<SplitCandidate> {
    (1..text.tokens.len())
        .map(|split| SplitCandidate { split, forced: false })
        .collect()
}

pub fn enumerate_splits(text: &MentionText) -> Result<Vec<SplitCandidate>> {
    if text.elements.is_empty() || (text.tokens.is_empty() && !text.has_equation()) {
        return Err(Error::InvalidArgument("cannot split an empty mention".into()));
    }
    if text.has_equation() {
        return Ok(vec![SplitCandidate {
            split: prose_tokens(text).len(),
            forced: true,
        }]);
    }
    let c = boundary_splits(text);
    if c.is_empty() {
        return Err(Error::InvalidArgument("a one-token mention has no split".into()));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub w: BTreeMap<String, f64>,
    pub beam_size: usize,
    /// Formulas kept per span by the mapper.
    pub span_k: usize,
    pub lambda: f64,
    pub markers: MarkerTable,
}

impl Default for SplitModel {
    fn default() -> Self {
        Self {
            w: BTreeMap::new(),
            beam_size: 10,
            span_k: 3,
            lambda: 0.1,
            markers: MarkerTable::default(),
        }
    }
}

const SPLIT_HEADER: &str = "geoharvest-split-model v1";

impl SplitModel {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.span_k == 0 {
            return Err(Error::Config("beam_size and span_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{SPLIT_HEADER}\nbeam\t{}\nspan_k\t{}\nlambda\t{}\n",
            self.beam_size, self.span_k, self.lambda
        );
        for m in &self.markers.markers {
            let _ = writeln!(s, "marker\t{m}");
        }
        for (name, w) in &self.w {
            let _ = writeln!(s, "weight\t{name}\t{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SPLIT_HEADER) {
            return Err(Error::Model(format!("expected header `{SPLIT_HEADER}`")));
        }
        let mut m = SplitModel {
            markers: MarkerTable { markers: Vec::new() },
            ..Default::default()
        };
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Model(format!("line {}: malformed `{line}`", i + 2));
            match parts.as_slice() {
                ["beam", v] => m.beam_size = v.parse().map_err(|_| bad())?,
                ["span_k", v] => m.span_k = v.parse().map_err(|_| bad())?,
                ["lambda", v] => m.lambda = v.parse().map_err(|_| bad())?,
                ["marker", k] => m.markers.markers.push(k.to_string()),
                ["weight", name, v] => {
                    let w: f64 = v.parse().map_err(|_| bad())?;
                    if !w.is_finite() {
                        return Err(bad());
                    }
                    m.w.insert(name.to_string(), w);
                }
                _ => return Err(bad()),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn score_split(text: &MentionText, cand: &SplitCandidate, model: &SplitModel, opts: &FeatureOptions) -> Result<f64> {
    if cand.forced {
        return Ok(0.0);
    }
    Ok(split_features(text, cand.split, &model.markers, opts)?.dot(&model.w))
}

#[derive(Debug, Clone, PartialEq)]
struct Entity {
    pos: usize,
    types: Vec<String>,
    /// Point labels, or `None` for a generic noun.
    label: Option<String>,
    noun: Option<String>,
}

fn is_article_a(tokens: &[String], i: usize) -> bool {
    tokens[i] == "A"
        && tokens
            .get(i + 1)
            .is_some_and(|n| n.chars().next().is_some_and(char::is_lowercase))
}

fn label_types(label: &str) -> Vec<String> {
    let t: &[&str] = match label.len() {
        1 => &["point"],
        2 => &["line", "arc"],
        3 => &["triangle", "angle"],
        _ => &["polygon"],
    };
    t.iter().map(|s| s.to_string()).collect()
}

fn entities(tokens: &[String], lex: &Lexicon, triggers: &[crate::logic::TriggerMatch]) -> Vec<Entity> {
    let mut inside: BTreeMap<usize, &str> = BTreeMap::new();
    for m in triggers {
        for k in m.start..m.start + m.len {
            inside.insert(k, &m.symbol);
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if is_point_label(tok) && !is_article_a(tokens, i) {
            out.push(Entity {
                pos: i,
                types: label_types(tok),
                label: Some(tok.clone()),
                noun: None,
            });
            i += 1;
            continue;
        }
        let Some(ty) = lex.noun_type(tok) else {
            i += 1;
            continue;
        };
        let mut labels = Vec::new();
        let mut j = i + 1;
        while j < tokens.len() {
            if is_point_label(&tokens[j]) && tokens[j].len() == lex.constructor(ty).map_or(tokens[j].len(), |c| c.arg_types.len()) {
                labels.push(j);
                j += 1;
            } else if (tokens[j] == "," || tokens[j] == "and") && !labels.is_empty() {
                j += 1;
            } else {
                break;
            }
        }
        if labels.is_empty() {
            let excluded = inside.get(&i).is_some_and(|sym| {
                lex.predicate(sym)
                    .is_some_and(|p| !p.arg_types.iter().any(|s| s.iter().any(|t| t == ty)))
            });
            if !excluded {
                out.push(Entity {
                    pos: i,
                    types: vec![ty.to_string()],
                    label: None,
                    noun: Some(ty.to_string()),
                });
            }
            i += 1;
        } else {
            for &l in &labels {
                out.push(Entity {
                    pos: l,
                    types: vec![ty.to_string()],
                    label: Some(tokens[l].clone()),
                    noun: None,
                });
            }
            i = j;
        }
    }
    out
}

fn entity_term(e: &Entity, ty: &str, lex: &Lexicon) -> Option<Term> {
    match (&e.label, &e.noun) {
        (Some(l), _) => {
            let pts: Vec<Term> = l.chars().map(|c| Term::Const(c.to_string())).collect();
            if ty == "point" {
                (pts.len() == 1).then(|| pts[0].clone())
            } else {
                let c = lex.constructor(ty)?;
                (c.arg_types.len() == pts.len()).then(|| Term::App(c.name.clone(), pts))
            }
        }
        (None, Some(noun)) => Some(Term::Var(format!("v_{noun}"))),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Assignment {
    literal: Literal,
    bound: usize,
    /// Generic fillers, then distance to the trigger; lower is preferred.
    penalty: (usize, usize),
}

fn slot_assignments(
    pred: &crate::logic::PredicateDef,
    at: usize,
    ents: &[Entity],
    lex: &Lexicon,
    fresh: &mut usize,
    limit: usize,
) -> Vec<Assignment> {
    let slots = &pred.arg_types;
    let options: Vec<Vec<(usize, String)>> = slots
        .iter()
        .map(|slot: &SlotType| {
            let mut v: Vec<(usize, String)> = Vec::new();
            for (ei, e) in ents.iter().enumerate() {
                if let Some(ty) = slot.iter().find(|t| e.types.contains(t)) {
                    v.push((ei, ty.clone()));
                }
            }
            v
        })
        .collect();
    let mut out = Vec::new();
    let mut chosen: Vec<Option<(usize, String)>> = Vec::new();
    fn rec(
        k: usize,
        options: &[Vec<(usize, String)>],
        chosen: &mut Vec<Option<(usize, String)>>,
        out: &mut Vec<Vec<Option<(usize, String)>>>,
    ) {
        if k == options.len() {
            out.push(chosen.clone());
            return;
        }
        let mut any = false;
        for (ei, ty) in &options[k] {
            let used = chosen.iter().flatten().any(|(e, _)| e == ei);
            let ordered = chosen
                .iter()
                .enumerate()
                .filter_map(|(j, c)| c.as_ref().map(|c| (j, c)))
                .all(|(j, (e, _))| options[j] != options[k] || e < ei);
            if !used && ordered {
                any = true;
                chosen.push(Some((*ei, ty.clone())));
                rec(k + 1, options, chosen, out);
                chosen.pop();
            }
        }
        if !any {
            chosen.push(None);
            rec(k + 1, options, chosen, out);
            chosen.pop();
        }
    }
    let mut combos = Vec::new();
    rec(0, &options, &mut chosen, &mut combos);
    for combo in combos {
        let mut args = Vec::new();
        let mut bound = 0;
        let mut generic = 0;
        let mut dist = 0;
        for (k, c) in combo.iter().enumerate() {
            let term = c.as_ref().and_then(|(ei, ty)| entity_term(&ents[*ei], ty, lex));
            match term {
                Some(t) => {
                    let e = &ents[c.as_ref().expect("filled").0];
                    bound += 1;
                    generic += usize::from(e.label.is_none());
                    dist += e.pos.abs_diff(at);
                    args.push(t);
                }
                None => {
                    *fresh += 1;
                    args.push(Term::Var(format!("u{}_{}", *fresh, slots[k][0])));
                }
            }
        }
        out.push(Assignment {
            literal: lex.coerce_literal(&Literal::new(pred.name.clone(), args)),
            bound,
            penalty: (generic, dist),
        });
    }
    out.sort_by(|a, b| b.bound.cmp(&a.bound).then(a.penalty.cmp(&b.penalty)));
    out.truncate(limit);
    out
}

fn is_type_predicate(lex: &Lexicon, name: &str) -> bool {
    lex.predicate(name).is_some_and(|p| {
        p.arg_types.len() == 1
            && p.triggers
                .iter()
                .any(|t| t.len() == 1 && lex.noun_type(&t[0]).is_some_and(|ty| p.arg_types[0].iter().any(|a| a == ty)))
    })
}

/// Drops `isTriangle(t)`-style literals whose argument another literal
/// already mentions.
fn drop_redundant_type_literals(literals: Vec<Literal>, lex: &Lexicon) -> Vec<Literal> {
    let keep: Vec<bool> = literals
        .iter()
        .enumerate()
        .map(|(i, l)| {
            !(is_type_predicate(lex, &l.predicate)
                && literals
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && o.args.contains(&l.args[0])))
        })
        .collect();
    literals.into_iter().zip(keep).filter(|(_, k)| *k).map(|(l, _)| l).collect()
}

/// A formula with its mapper score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFormula {
    pub formula: Formula,
    pub score: f64,
}

/// Top-`k` distinct formulas for a token span plus any equation payloads.
pub fn map_span_to_formulas(tokens: &[String], equations: &[String], lex: &Lexicon, k: usize) -> Result<Vec<ScoredFormula>> {
    let eqs = equations
        .iter()
        .map(|e| Equation::parse(e, Naming::Ground))
        .collect::<Result<Vec<_>>>()?;
    let triggers: Vec<_> = lex.find_triggers(tokens).into_iter().filter(|m| !m.function).collect();
    if triggers.is_empty() && eqs.is_empty() {
        return Ok(vec![ScoredFormula {
            formula: Formula::default(),
            score: 0.0,
        }]);
    }
    let ents = entities(tokens, lex, &triggers);
    let mut fresh = 0;
    let trigger_tokens: usize = triggers.iter().map(|m| m.len).sum();
    let mut total_slots = 0;
    // (literals, bound, penalty)
    let mut beam: Vec<(Vec<Literal>, usize, (usize, usize))> = vec![(Vec::new(), 0, (0, 0))];
    for m in &triggers {
        let pred = lex.predicate(&m.symbol).expect("predicate trigger");
        total_slots += pred.arg_types.len();
        let alts = slot_assignments(pred, m.start, &ents, lex, &mut fresh, k.max(1));
        let mut next = Vec::new();
        for (lits, bound, pen) in &beam {
            for a in &alts {
                let mut l = lits.clone();
                l.push(a.literal.clone());
                next.push((l, bound + a.bound, (pen.0 + a.penalty.0, pen.1 + a.penalty.1)));
            }
        }
        next.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        next.truncate(k.max(1) * 4);
        beam = next;
    }
    let denom = (tokens.len() + total_slots + eqs.len()) as f64;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (lits, bound, _) in beam {
        let mut literals: Vec<Literal> = Vec::new();
        for l in lits {
            if !literals.contains(&l) {
                literals.push(l);
            }
        }
        let literals = drop_redundant_type_literals(literals, lex);
        let formula = Formula {
            literals,
            equations: eqs.clone(),
        };
        let key = formula.items().join(" , ");
        if !seen.insert(key) {
            continue;
        }
        let score = (trigger_tokens + bound + eqs.len()) as f64 / denom;
        out.push(ScoredFormula { formula, score });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

fn side_formulas(text: &MentionText, cand: &SplitCandidate, premise: bool, lex: &Lexicon, k: usize) -> Result<Vec<ScoredFormula>> {
    if cand.forced {
        if premise {
            let tokens: Vec<String> = (0..text.tokens.len())
                .filter(|&i| text.equations[text.element_of[i]].is_none() && !is_title(text, i))
                .map(|i| text.tokens[i].clone())
                .collect();
            return map_span_to_formulas(&tokens, &[], lex, k);
        }
        let eqs: Vec<String> = text.equations.iter().flatten().cloned().collect();
        return map_span_to_formulas(&[], &eqs, lex, k);
    }
    let span = if premise { cand.premise_span() } else { cand.conclusion_span(text.tokens.len()) };
    let tokens: Vec<String> = span.filter(|&i| !is_title(text, i)).map(|i| text.tokens[i].clone()).collect();
    map_span_to_formulas(&tokens, &[], lex, k)
}

/// Beam of rules for one mention, best first, confidences normalized over
/// the beam.
pub fn parse_mention(text: &MentionText, model: &SplitModel, lex: &Lexicon, opts: &FeatureOptions) -> Result<Vec<HornRule>> {
    model.validate()?;
    let mut splits = enumerate_splits(text)?
        .into_iter()
        .map(|c| score_split(text, &c, model, opts).map(|s| (s, c)))
        .collect::<Result<Vec<_>>>()?;
    splits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    splits.truncate(model.beam_size);
    let mut cands: Vec<(f64, HornRule)> = Vec::new();
    for (s, c) in &splits {
        let prem = side_formulas(text, c, true, lex, model.span_k)?;
        let concl = side_formulas(text, c, false, lex, model.span_k)?;
        for p in &prem {
            for q in &concl {
                if q.formula.is_empty() {
                    continue;
                }
                let rule = HornRule::new(p.formula.clone(), q.formula.clone(), 1.0).lifted();
                cands.push((s + p.score + q.score, rule));
            }
        }
    }
    Ok(finish_beam(cands, model.beam_size))
}

fn finish_beam(mut cands: Vec<(f64, HornRule)>, beam_size: usize) -> Vec<HornRule> {
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut seen = BTreeSet::new();
    let mut kept: Vec<(f64, HornRule)> = Vec::new();
    for (s, r) in cands {
        if seen.insert(r.canonical().body()) {
            kept.push((s, r));
            if kept.len() == beam_size {
                break;
            }
        }
    }
    let m = kept.iter().map(|k| k.0).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = kept.iter().map(|k| (k.0 - m).exp()).sum();
    kept.into_iter()
        .map(|(s, mut r)| {
            r.confidence = (s - m).exp() / z;
            r
        })
        .collect()
}

/// Best combined score over every split, premise formula and conclusion
/// formula.
pub fn best_combined_score(text: &MentionText, model: &SplitModel, lex: &Lexicon, opts: &FeatureOptions) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for c in enumerate_splits(text)? {
        let s = score_split(text, &c, model, opts)?;
        let prem = side_formulas(text, &c, true, lex, model.span_k)?;
        let concl = side_formulas(text, &c, false, lex, model.span_k)?;
        for p in &prem {
            for q in concl.iter().filter(|q| !q.formula.is_empty()) {
                let v = s + p.score + q.score;
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                }
            }
        }
    }
    Ok(best)
}

/// Combined score of the top rule of a beam; recomputed so callers can
/// compare beams of different sizes.
pub fn beam_best_score(text: &MentionText, model: &SplitModel, lex: &Lexicon, opts: &FeatureOptions) -> Result<Option<f64>> {
    let mut splits = enumerate_splits(text)?
        .into_iter()
        .map(|c| score_split(text, &c, model, opts).map(|s| (s, c)))
        .collect::<Result<Vec<_>>>()?;
    splits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    splits.truncate(model.beam_size);
    let mut best: Option<f64> = None;
    for (s, c) in &splits {
        let prem = side_formulas(text, c, true, lex, model.span_k)?;
        let concl = side_formulas(text, c, false, lex, model.span_k)?;
        for p in &prem {
            for q in concl.iter().filter(|q| !q.formula.is_empty()) {
                let v = s + p.score + q.score;
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                }
            }
        }
    }
    Ok(best)
}

/// Parses many mentions in parallel. Provenance ranks follow beam order.
pub fn parse_all(
    texts: &[(Provenance, Option<String>, MentionText)],
    model: &SplitModel,
    lex: &Lexicon,
    opts: &FeatureOptions,
) -> Result<Vec<Vec<HornRule>>> {
    texts
        .par_iter()
        .map(|(prov, diagram, text)| {
            let beam = parse_mention(text, model, lex, opts)?;
            Ok(beam
                .into_iter()
                .enumerate()
                .map(|(rank, mut r)| {
                    r.provenance = Some(Provenance { rank, ..prov.clone() });
                    r.diagram = diagram.clone();
                    r
                })
                .collect())
        })
        .collect()
}

/// A mention text with its gold split boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitExample {
    pub text: MentionText,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitTrainConfig {
    pub lambda_grid: Vec<f64>,
    pub optim: OptimConfig,
    pub beam_size: usize,
    pub span_k: usize,
}

impl Default for SplitTrainConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.01, 0.1, 1.0],
            optim: OptimConfig::default(),
            beam_size: 10,
            span_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitGridResult {
    pub lambda: f64,
    pub dev_accuracy: Option<f64>,
}

struct CompiledSplit {
    feats: Vec<Vec<(usize, f64)>>,
    gold: usize,
}

fn compile_splits(ex: &[SplitExample], markers: &MarkerTable, opts: &FeatureOptions, index: &mut FeatureIndex) -> Result<Vec<CompiledSplit>> {
    let mut out = Vec::new();
    for e in ex {
        let cands = boundary_splits(&e.text);
        let Some(gold) = cands.iter().position(|c| c.split == e.gold) else {
            return Err(Error::InvalidArgument(format!(
                "gold split {} is not a boundary of a {}-token mention",
                e.gold,
                e.text.tokens.len()
            )));
        };
        let feats = cands
            .iter()
            .map(|c| {
                let f = split_features(&e.text, c.split, markers, opts)?;
                Ok(f.iter().map(|(n, v)| (index.intern(n), v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(CompiledSplit { feats, gold });
    }
    Ok(out)
}

fn split_objective(data: &[CompiledSplit], w: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let mut g: Vec<f64> = w.iter().map(|x| 2.0 * lambda * x).collect();
    let mut v: f64 = lambda * w.iter().map(|x| x * x).sum::<f64>();
    for d in data {
        let s: Vec<f64> = d.feats.iter().map(|f| f.iter().map(|(i, x)| w[*i] * x).sum()).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        v += z - s[d.gold];
        for (j, f) in d.feats.iter().enumerate() {
            let p = (s[j] - z).exp();
            for (i, x) in f {
                g[*i] += p * x;
            }
        }
        for (i, x) in &d.feats[d.gold] {
            g[*i] -= x;
        }
    }
    (v, g)
}

/// Negative log-likelihood of the gold splits and its gradient by feature
/// name, at `model`'s weights.
pub fn split_nll_gradient(ex: &[SplitExample], model: &SplitModel, opts: &FeatureOptions) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut index = FeatureIndex::default();
    for n in model.w.keys() {
        index.intern(n);
    }
    let data = compile_splits(ex, &model.markers, opts, &mut index)?;
    let (v, g) = split_objective(&data, &index.to_dense(&model.w), model.lambda);
    Ok((v, index.names.iter().cloned().zip(g).filter(|(_, g)| *g != 0.0).collect()))
}

fn fit_split(ex: &[SplitExample], markers: &MarkerTable, lambda: f64, cfg: &SplitTrainConfig, opts: &FeatureOptions) -> Result<SplitModel> {
    let mut index = FeatureIndex::default();
    let data = compile_splits(ex, markers, opts, &mut index)?;
    let f = |w: &[f64]| split_objective(&data, w, lambda);
    let m = minimize_robust(&f, vec![0.0; index.len()], cfg.optim)?;
    Ok(SplitModel {
        w: index.to_sparse(&m.x),
        beam_size: cfg.beam_size,
        span_k: cfg.span_k,
        lambda,
        markers: markers.clone(),
    })
}

/// Fraction of examples whose highest-scoring boundary is the gold one.
pub fn split_accuracy(ex: &[SplitExample], model: &SplitModel, opts: &FeatureOptions) -> Result<f64> {
    if ex.is_empty() {
        return Ok(0.0);
    }
    let mut right = 0;
    for e in ex {
        let mut best: Option<(f64, usize)> = None;
        for c in boundary_splits(&e.text) {
            let s = score_split(&e.text, &c, model, opts)?;
            if best.is_none_or(|b| s > b.0) {
                best = Some((s, c.split));
            }
        }
        right += usize::from(best.map(|b| b.1) == Some(e.gold));
    }
    Ok(right as f64 / ex.len() as f64)
}

/// Grid search over λ by dev split accuracy, then a final fit on train + dev.
pub fn train_split_model(
    train: &[SplitExample],
    dev: &[SplitExample],
    cfg: &SplitTrainConfig,
    opts: &FeatureOptions,
) -> Result<(SplitModel, Vec<SplitGridResult>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("split training needs at least one labeled mention".into()));
    }
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| l.is_nan() || *l < 0.0) {
        return Err(Error::Config("lambda grid must be nonempty and nonnegative".into()));
    }
    let all: Vec<SplitExample> = train.iter().chain(dev).cloned().collect();
    let markers = MarkerTable::from_training(&all.iter().map(|e| (e.text.tokens.clone(), e.gold)).collect::<Vec<_>>());
    let mut results = Vec::new();
    let chosen = if dev.is_empty() || cfg.lambda_grid.len() == 1 {
        cfg.lambda_grid[0]
    } else {
        let mut best = (f64::NEG_INFINITY, cfg.lambda_grid[0]);
        for &lambda in &cfg.lambda_grid {
            let m = fit_split(train, &markers, lambda, cfg, opts)?;
            let acc = split_accuracy(dev, &m, opts)?;
            log::info!("lambda {lambda}: dev split accuracy {acc:.4}");
            results.push(SplitGridResult {
                lambda,
                dev_accuracy: Some(acc),
            });
            if acc > best.0 {
                best = (acc, lambda);
            }
        }
        best.1
    };
    let model = fit_split(&all, &markers, chosen, cfg, opts)?;
    if results.is_empty() {
        results.push(SplitGridResult {
            lambda: chosen,
            dev_accuracy: None,
        });
    }
    Ok((model, results))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FusionMethod {
    Majority,
    Average,
    SourceConfidence,
    PredicateScore,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] = [
        FusionMethod::Majority,
        FusionMethod::Average,
        FusionMethod::SourceConfidence,
        FusionMethod::PredicateScore,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "majority" => Ok(FusionMethod::Majority),
            "average" => Ok(FusionMethod::Average),
            "source_confidence" => Ok(FusionMethod::SourceConfidence),
            "predicate_score" => Ok(FusionMethod::PredicateScore),
            _ => Err(Error::Config(format!("unknown fusion method `{s}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMethod::Majority => "majority",
            FusionMethod::Average => "average",
            FusionMethod::SourceConfidence => "source_confidence",
            FusionMethod::PredicateScore => "predicate_score",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Per-source weights; empty means uniform.
    pub source_weights: Vec<f64>,
    /// Fraction of the largest predicate support a predicate needs.
    pub tau: f64,
    /// Parses per source counted by the average heuristic.
    pub top: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            source_weights: Vec::new(),
            tau: 0.5,
            top: 5,
        }
    }
}

struct Tally {
    rule: HornRule,
    beams: BTreeSet<usize>,
    per_source: BTreeMap<usize, f64>,
    total: f64,
}

fn tally(beams: &[Vec<HornRule>], top: Option<usize>) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for (s, beam) in beams.iter().enumerate() {
        let take = top.unwrap_or(beam.len());
        for r in beam.iter().take(take) {
            let c = r.canonical();
            let t = out.entry(c.body()).or_insert_with(|| Tally {
                rule: r.clone(),
                beams: BTreeSet::new(),
                per_source: BTreeMap::new(),
                total: 0.0,
            });
            t.beams.insert(s);
            *t.per_source.entry(s).or_default() += r.confidence;
            t.total += r.confidence;
        }
    }
    out
}

type Example = (f64, Option<Literal>, Option<Equation>);

fn pick_max(t: &BTreeMap<String, Tally>, key: impl Fn(&Tally) -> (f64, f64)) -> (&Tally, f64) {
    let mut best: Option<(&Tally, (f64, f64))> = None;
    for v in t.values() {
        let k = key(v);
        let better = match &best {
            None => true,
            Some((_, bk)) => k.0 > bk.0 || (k.0 == bk.0 && k.1 > bk.1),
        };
        if better {
            best = Some((v, k));
        }
    }
    let (t, k) = best.expect("nonempty tally");
    (t, k.0)
}

fn predicate_items(f: &Formula) -> Vec<(String, Option<Literal>, Option<Equation>)> {
    let mut v: Vec<(String, Option<Literal>, Option<Equation>)> = f
        .literals
        .iter()
        .map(|l| (l.predicate.clone(), Some(l.clone()), None))
        .collect();
    v.extend(f.equations.iter().map(|e| (format!("eq:{}", e.canonical_template()), None, Some(e.clone()))));
    v
}

fn assemble(beams: &[Vec<HornRule>], weights: &[f64], tau: f64) -> Option<HornRule> {
    let n = beams.len() as f64;
    let mut support: [BTreeMap<String, f64>; 2] = Default::default();
    let mut example: [BTreeMap<String, Example>; 2] = Default::default();
    let mut seen_in: [BTreeMap<String, BTreeSet<usize>>; 2] = Default::default();
    for (s, beam) in beams.iter().enumerate() {
        for r in beam {
            for (side, f) in [&r.premise, &r.conclusion].into_iter().enumerate() {
                let mut once = BTreeSet::new();
                for (name, lit, eq) in predicate_items(f) {
                    if !once.insert(name.clone()) {
                        continue;
                    }
                    *support[side].entry(name.clone()).or_default() += weights[s] * r.confidence / n;
                    seen_in[side].entry(name.clone()).or_default().insert(s);
                    let e = example[side].entry(name).or_insert((f64::NEG_INFINITY, None, None));
                    if r.confidence > e.0 {
                        *e = (r.confidence, lit, eq);
                    }
                }
            }
        }
    }
    let base = beams
        .iter()
        .enumerate()
        .filter_map(|(s, b)| b.first().map(|r| (weights[s] * r.confidence, r)))
        .fold(None::<(f64, &HornRule)>, |acc, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        })?
        .1;
    let max = support.iter().flat_map(|m| m.values()).copied().fold(0.0, f64::max);
    let keep = |side: usize, name: &str| support[side].get(name).copied().unwrap_or(0.0) > tau * max - 1e-12;
    let mut sides = [Formula::default(), Formula::default()];
    for (side, f) in [&base.premise, &base.conclusion].into_iter().enumerate() {
        let mut have = BTreeSet::new();
        for (name, lit, eq) in predicate_items(f) {
            if keep(side, &name) && have.insert(name) {
                match (lit, eq) {
                    (Some(l), _) => sides[side].literals.push(l),
                    (_, Some(e)) => sides[side].equations.push(e),
                    _ => {}
                }
            }
        }
        for (name, (_, lit, eq)) in &example[side] {
            let agreed = seen_in[side].get(name).is_some_and(|s| s.len() >= 2);
            if agreed && keep(side, name) && have.insert(name.clone()) {
                match (lit, eq) {
                    (Some(l), _) => sides[side].literals.push(l.clone()),
                    (_, Some(e)) => sides[side].equations.push(e.clone()),
                    _ => {}
                }
            }
        }
    }
    if sides[1].is_empty() {
        sides[1] = base.conclusion.clone();
    }
    let [premise, conclusion] = sides;
    let mut r = HornRule::new(premise, conclusion, 1.0);
    r.diagram = base.diagram.clone();
    let items = predicate_items(&r.premise).into_iter().map(|i| (0, i.0)).chain(predicate_items(&r.conclusion).into_iter().map(|i| (1, i.0)));
    let scores: Vec<f64> = items.map(|(s, n)| support[s].get(&n).copied().unwrap_or(0.0)).collect();
    r.confidence = if max > 0.0 && !scores.is_empty() {
        (scores.iter().sum::<f64>() / scores.len() as f64 / max).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Some(r)
}

/// Fuses per-source beams for one axiom into a single rule.
pub fn fuse(beams: &[Vec<HornRule>], method: FusionMethod, params: &FusionParams) -> Result<HornRule> {
    if beams.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("fusion needs at least one nonempty beam".into()));
    }
    let weights: Vec<f64> = if params.source_weights.is_empty() {
        vec![1.0 / beams.len() as f64; beams.len()]
    } else if params.source_weights.len() == beams.len() {
        params.source_weights.clone()
    } else {
        return Err(Error::InvalidArgument(format!(
            "{} source weights for {} beams",
            params.source_weights.len(),
            beams.len()
        )));
    };
    let sources = beams.len() as f64;
    let (rule, confidence) = match method {
        FusionMethod::Majority => {
            let t = tally(beams, None);
            let (best, count) = pick_max(&t, |v| (v.beams.len() as f64, v.total));
            (best.rule.clone(), count / sources)
        }
        FusionMethod::Average => {
            let t = tally(beams, Some(params.top));
            let (best, mean) = pick_max(&t, |v| (v.total / sources, v.beams.len() as f64));
            (best.rule.clone(), mean)
        }
        FusionMethod::SourceConfidence => {
            let t = tally(beams, None);
            let score = |v: &Tally| v.per_source.iter().map(|(s, c)| weights[*s] * c).sum::<f64>();
            let (best, s) = pick_max(&t, |v| (score(v), v.total));
            (best.rule.clone(), s / weights.iter().sum::<f64>().max(f64::MIN_POSITIVE))
        }
        FusionMethod::PredicateScore if beams.iter().filter(|b| !b.is_empty()).count() == 1 => {
            let top = beams.iter().find_map(|b| b.first()).expect("a nonempty beam");
            (top.clone(), top.confidence)
        }
        FusionMethod::PredicateScore => {
            let r = assemble(beams, &weights, params.tau).expect("a nonempty beam");
            let c = r.confidence;
            (r, c)
        }
    };
    Ok(HornRule {
        confidence: confidence.clamp(0.0, 1.0),
        ..rule
    })
}

/// Dev beams for one axiom (one beam per source) and its gold rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionExample {
    pub beams: Vec<Vec<HornRule>>,
    pub gold: HornRule,
}

fn fusion_f1(dev: &[FusionExample], w: &[f64]) -> Result<f64> {
    let params = FusionParams {
        source_weights: w.to_vec(),
        ..Default::default()
    };
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for e in dev {
        pred.push(if e.beams.iter().all(Vec::is_empty) {
            None
        } else {
            Some(fuse(&e.beams, FusionMethod::SourceConfidence, &params)?)
        });
        gold.push(e.gold.clone());
    }
    Ok(parse_prf(&pred, &gold, ParseLevel::Full)?.f1)
}

fn simplex_points(sources: usize, steps: usize) -> Vec<Vec<usize>> {
    if sources == 1 {
        return vec![vec![steps]];
    }
    let mut out = Vec::new();
    for first in 0..=steps {
        for mut rest in simplex_points(sources - 1, steps - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Source weights on the 0.1 simplex grid maximizing dev full-parse F1 of
/// source-confidence fusion. Ties go to the point closest to uniform.
pub fn learn_source_confidence(dev: &[FusionExample], sources: usize) -> Result<Vec<f64>> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("source confidence learning needs gold rules".into()));
    }
    if sources == 0 || dev.iter().any(|e| e.beams.len() != sources) {
        return Err(Error::InvalidArgument(format!("every example needs {sources} beams")));
    }
    if sources == 1 {
        return Ok(vec![1.0]);
    }
    let uniform = 1.0 / sources as f64;
    let dist = |w: &[f64]| w.iter().map(|x| (x - uniform).abs()).sum::<f64>();
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let consider = |best: &mut Option<(f64, f64, Vec<f64>)>, w: Vec<f64>| -> Result<()> {
        let f = fusion_f1(dev, &w)?;
        let d = dist(&w);
        let better = match best {
            None => true,
            Some((bf, bd, _)) => f > *bf + 1e-12 || ((f - *bf).abs() <= 1e-12 && d < *bd - 1e-12),
        };
        if better {
            *best = Some((f, d, w));
        }
        Ok(())
    };
    consider(&mut best, vec![uniform; sources])?;
    if sources <= 6 {
        for p in simplex_points(sources, 10) {
            consider(&mut best, p.iter().map(|&k| k as f64 / 10.0).collect())?;
        }
    } else {
        let mut w = vec![uniform; sources];
        for _ in 0..10 {
            let before = w.clone();
            for s in 0..sources {
                for k in 0..=10 {
                    let v = k as f64 / 10.0;
                    let rest: f64 = w.iter().enumerate().filter(|(i, _)| *i != s).map(|(_, x)| x).sum();
                    let mut c = w.clone();
                    for (i, x) in c.iter_mut().enumerate() {
                        *x = if i == s {
                            v
                        } else if rest > 0.0 {
                            *x * (1.0 - v) / rest
                        } else {
                            (1.0 - v) / (sources - 1) as f64
                        };
                    }
                    consider(&mut best, c)?;
                }
                w = best.as_ref().expect("seeded").2.clone();
            }
            if w == before {
                break;
            }
        }
    }
    Ok(best.expect("seeded").2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_document, DocNode};
    use crate::text::tokenize;

    fn text_of(nodes: Vec<DocNode>) -> MentionText {
        let root = DocNode::container("block", nodes);
        let book = load_document(Path::new("m.json"), "m", &root).unwrap();
        MentionText::from_elements(&book.elements)
    }

    fn formula_text(f: &Formula) -> String {
        f.items().join(" , ")
    }

    #[test]
    fn split_enumeration() {
        let t = text_of(vec![DocNode::element("sentence", "a b c d e")]);
        assert_eq!(enumerate_splits(&t).unwrap().len(), 4);
        let t = text_of(vec![DocNode::element("sentence", "a b c"), DocNode::element("sentence", "d e f g")]);
        let c = enumerate_splits(&t).unwrap();
        assert_eq!(c.len(), 6);
        assert!(c.iter().any(|c| c.split == 3));
        let t = text_of(vec![
            DocNode::element("sentence", "in a triangle"),
            DocNode {
                equation: Some("AB = 2".into()),
                ..DocNode::element("equation", "")
            },
        ]);
        assert_eq!(enumerate_splits(&t).unwrap(), vec![SplitCandidate { split: 3, forced: true }]);
    }

    #[test]
    fn zero_weights_score_zero() {
        let t = text_of(vec![DocNode::element("sentence", "if p then q holds")]);
        let m = SplitModel::default();
        for c in enumerate_splits(&t).unwrap() {
            assert_eq!(score_split(&t, &c, &m, &FeatureOptions::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn mapper_fixtures() {
        let lex = Lexicon::builtin();
        let f = map_span_to_formulas(&tokenize("the triangle ABC"), &[], lex, 3).unwrap();
        assert_eq!(formula_text(&f[0].formula), "isTriangle(triangle(A,B,C))");
        assert!((f[0].score - 2.0 / 4.0).abs() < 1e-12);
        let f = map_span_to_formulas(&tokenize("a right triangle"), &[], lex, 3).unwrap();
        assert_eq!(formula_text(&f[0].formula), "isRightTriangle(v_triangle)");
        let f = map_span_to_formulas(&[], &["BC^2 + AC^2 = AB^2".to_string()], lex, 3).unwrap();
        assert!(f[0].formula.literals.is_empty());
        assert_eq!(f[0].formula.equations.len(), 1);
        let f = map_span_to_formulas(&tokenize("nothing here"), &[], lex, 3).unwrap();
        assert!(f[0].formula.is_empty() && f[0].score == 0.0);
    }

    #[test]
    fn pythagoras_mention() {
        let t = text_of(vec![
            DocNode::element("sentence", "If ABC is a triangle and AC is perpendicular to BC , then the square of AB equals the sum of the squares of BC and AC ."),
            DocNode {
                equation: Some("BC^2 + AC^2 = AB^2".into()),
                ..DocNode::element("equation", "")
            },
        ]);
        let beam = parse_mention(&t, &SplitModel::default(), Lexicon::builtin(), &FeatureOptions::default()).unwrap();
        let gold = HornRule::parse("1 :: isTriangle(triangle(A,B,C)) , perpendicular(line(A,C),line(B,C)) => eq(BC^2 + AC^2 = AB^2) .").unwrap();
        assert_eq!(beam[0].canonical().body(), gold.canonical().body());
        let total: f64 = beam.iter().map(|r| r.confidence).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_training_learns_then() {
        let mk = |s: &str| {
            let t = text_of(vec![DocNode::element("sentence", s)]);
            let gold = t.tokens.iter().position(|x| x == "then").unwrap();
            SplitExample { text: t, gold }
        };
        let train = vec![
            mk("if two lines meet then angles are equal"),
            mk("when AB is parallel to CD then alternate angles match"),
            mk("if a triangle is isosceles then base angles are equal"),
        ];
        let dev = vec![mk("if a point lies on a circle then it is on the boundary")];
        let (m, grid) = train_split_model(&train, &dev, &SplitTrainConfig::default(), &FeatureOptions::default()).unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(split_accuracy(&dev, &m, &FeatureOptions::default()).unwrap(), 1.0);
        let again = train_split_model(&train, &dev, &SplitTrainConfig::default(), &FeatureOptions::default()).unwrap().0;
        assert_eq!(again, m);
        assert_eq!(SplitModel::from_text(&m.to_text()).unwrap(), m);
    }

    fn rule(body: &str, c: f64) -> HornRule {
        HornRule::parse(&format!("{c} :: {body} .")).unwrap()
    }

    #[test]
    fn majority_counts_beams() {
        let (p, q, r) = ("isTriangle(T) => isIsosceles(T)", "parallel(L,M) => parallel(M,L)", "similar(S,T) => similar(T,S)");
        let beams = vec![
            vec![rule(p, 0.5), rule(q, 0.5)],
            vec![rule(p, 0.5), rule(r, 0.5)],
            vec![rule(q, 0.5), rule(p, 0.5)],
        ];
        let f = fuse(&beams, FusionMethod::Majority, &FusionParams::default()).unwrap();
        assert_eq!(f.canonical().body(), rule(p, 1.0).canonical().body());
        for m in FusionMethod::ALL {
            let single = fuse(&beams[..1], m, &FusionParams::default()).unwrap();
            assert_eq!(single.canonical().body(), rule(p, 1.0).canonical().body(), "{m:?}");
        }
        assert!(fuse(&[vec![], vec![]], FusionMethod::Majority, &FusionParams::default()).is_err());
    }

    #[test]
    fn source_weights_prefer_reliable_source() {
        let right = "isTriangle(T) => isIsosceles(T)";
        let wrong = "isTriangle(T) => isEquilateral(T)";
        let dev: Vec<FusionExample> = (0..3)
            .map(|_| FusionExample {
                beams: vec![vec![rule(right, 1.0)], vec![rule(wrong, 1.0)], vec![rule(wrong, 1.0)]],
                gold: rule(right, 1.0),
            })
            .collect();
        let w = learn_source_confidence(&dev, 3).unwrap();
        assert!(w[0] > w[1] && w[0] > w[2], "{w:?}");
        let same: Vec<FusionExample> = (0..2)
            .map(|_| FusionExample {
                beams: vec![vec![rule(right, 1.0)], vec![rule(right, 1.0)]],
                gold: rule(right, 1.0),
            })
            .collect();
        assert_eq!(learn_source_confidence(&same, 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(learn_source_confidence(&dev[..1].iter().map(|e| FusionExample { beams: e.beams[..1].to_vec(), gold: e.gold.clone() }).collect::<Vec<_>>(), 1).unwrap(), vec![1.0]);
    }
}
