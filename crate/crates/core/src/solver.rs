//! Max-product deduction over weighted horn rules: grounding, most probable
//! explanations, answer selection and explanation rendering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equation::{approx_equal, evaluate_equation, parse_term, EqOutcome, Equation, Naming};
use crate::error::{Error, Result};
use crate::logic::{HornRule, Lexicon, Literal, Subst, Term};

/// A declared literal or measure value.
#[derive(Debug, Clone, PartialEq)]
pub enum Fact {
    Lit(Literal),
    Value(Term, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFact {
    pub fact: Fact,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Measure(Term),
    Lit(Literal),
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Measure(t) => write!(f, "{}", t.equation_form()),
            Query::Lit(l) => write!(f, "{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryProblem {
    pub id: String,
    pub facts: Vec<WeightedFact>,
    pub query: Query,
    pub choices: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFact {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawProblem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    facts: Vec<RawFact>,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<f64>>,
}

fn is_measure(t: &Term) -> bool {
    matches!(t, Term::App(f, _) if f == "measure" || f == "lengthOf" || f == "areaOf" || f == "radiusOf")
}

impl GeometryProblem {
    pub fn from_json(text: &str, id: &str) -> Result<Self> {
        let raw: RawProblem = serde_json::from_str(text).map_err(|e| Error::Parse(format!("problem {id}: {e}")))?;
        let lex = Lexicon::builtin();
        let mut facts = Vec::new();
        for f in raw.facts {
            if !(f.w > 0.0 && f.w <= 1.0) {
                return Err(Error::Parse(format!("problem {id}: fact weight {} outside (0,1]", f.w)));
            }
            let fact = match (f.lit, f.bind, f.value) {
                (Some(l), None, None) => Fact::Lit(lex.coerce_literal(&Literal::parse(&l, Naming::Ground)?).normalized()),
                (None, Some(b), Some(v)) => Fact::Value(parse_term(&b, Naming::Ground)?.normalized(), v),
                _ => return Err(Error::Parse(format!("problem {id}: a fact needs `lit`, or `bind` with `value`"))),
            };
            facts.push(WeightedFact { fact, weight: f.w });
        }
        let query = parse_query(&raw.query)?;
        Ok(GeometryProblem {
            id: raw.id.unwrap_or_else(|| id.to_string()),
            facts,
            query,
            choices: raw.choices,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_json(&text, &id)
    }

    pub fn to_json(&self) -> String {
        let facts = self
            .facts
            .iter()
            .map(|f| match &f.fact {
                Fact::Lit(l) => RawFact {
                    lit: Some(l.to_string()),
                    bind: None,
                    value: None,
                    w: f.weight,
                },
                Fact::Value(t, v) => RawFact {
                    lit: None,
                    bind: Some(t.to_string()),
                    value: Some(*v),
                    w: f.weight,
                },
            })
            .collect();
        let query = match &self.query {
            Query::Measure(t) => t.to_string(),
            Query::Lit(l) => l.to_string(),
        };
        let raw = RawProblem {
            id: Some(self.id.clone()),
            facts,
            query,
            choices: self.choices.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("problem serializes")
    }
}

pub fn parse_query(text: &str) -> Result<Query> {
    let t = parse_term(text, Naming::Ground).or_else(|_| Literal::parse(text, Naming::Ground).map(|l| Term::App(l.predicate, l.args)))?;
    if is_measure(&t) {
        return Ok(Query::Measure(t.normalized()));
    }
    match t {
        Term::App(p, args) => Ok(Query::Lit(Lexicon::builtin().coerce_literal(&Literal::new(p, args)).normalized())),
        other => Err(Error::Parse(format!("query `{other}` is neither a measure nor a literal"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_depth: usize,
    pub tolerance: f64,
    pub grounding_cap: usize,
    /// Relative tolerance for matching a derived value to a choice.
    pub choice_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_depth: 50,
            tolerance: 1e-12,
            grounding_cap: 1_000_000,
            choice_tolerance: 1e-3,
        }
    }
}

/// A rule instance with every variable replaced by a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRule {
    pub rule: usize,
    pub subst: Subst,
    pub premise: Vec<Literal>,
    pub premise_eqs: Vec<Equation>,
    pub conclusion: Vec<Literal>,
    pub conclusion_eqs: Vec<Equation>,
    pub confidence: f64,
}

impl GroundRule {
    fn key(&self) -> String {
        let lits = |v: &[Literal]| v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
        let eqs = |v: &[Equation]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "{}|{}|{}|{}|{}",
            self.rule,
            lits(&self.premise),
            eqs(&self.premise_eqs),
            lits(&self.conclusion),
            eqs(&self.conclusion_eqs)
        )
    }
}

fn unify(pattern: &Term, ground: &Term, s: &Subst) -> Vec<Subst> {
    match (pattern, ground) {
        (Term::Var(v), g) => match s.get(v) {
            Some(b) if b.normalized() == g.normalized() => vec![s.clone()],
            Some(_) => Vec::new(),
            None => {
                let mut s = s.clone();
                s.insert(v.clone(), g.clone());
                vec![s]
            }
        },
        (Term::Const(a), Term::Const(b)) if a == b => vec![s.clone()],
        (Term::App(f, pa), Term::App(g, ga)) if f == g && pa.len() == ga.len() => {
            let mut orders: Vec<Vec<usize>> = vec![(0..ga.len()).collect()];
            match (f.as_str(), ga.len()) {
                ("line", 2) => orders.push(vec![1, 0]),
                ("angle", 3) => orders.push(vec![2, 1, 0]),
                _ => {}
            }
            let mut out: Vec<Subst> = Vec::new();
            for ord in orders {
                let mut cur = vec![s.clone()];
                for (p, &gi) in pa.iter().zip(&ord) {
                    cur = cur.iter().flat_map(|c| unify(p, &ga[gi], c)).collect();
                }
                for c in cur {
                    if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

fn unify_literal(pattern: &Literal, ground: &Literal, s: &Subst) -> Vec<Subst> {
    if pattern.predicate != ground.predicate || pattern.args.len() != ground.args.len() {
        return Vec::new();
    }
    let mut cur = vec![s.clone()];
    for (p, g) in pattern.args.iter().zip(&ground.args) {
        cur = cur.iter().flat_map(|c| unify(p, g, c)).collect();
    }
    cur
}

fn collect_entities(t: &Term, lex: &Lexicon, out: &mut BTreeMap<String, BTreeSet<Term>>) {
    match t {
        Term::Const(_) => {
            out.entry("point".into()).or_default().insert(t.clone());
        }
        Term::Var(_) => {}
        Term::App(f, args) => {
            if lex.function(f).is_some() && !is_measure(t) {
                out.entry(lex.term_type(t)).or_default().insert(t.normalized());
            }
            for a in args {
                collect_entities(a, lex, out);
            }
        }
    }
}

fn literal_entities(l: &Literal, lex: &Lexicon, out: &mut BTreeMap<String, BTreeSet<Term>>) {
    for a in &l.args {
        collect_entities(a, lex, out);
    }
}

struct Grounder<'a> {
    rules: &'a [HornRule],
    lex: &'a Lexicon,
    cap: usize,
    known: BTreeSet<Literal>,
    entities: BTreeMap<String, BTreeSet<Term>>,
    seen: BTreeSet<String>,
    out: Vec<GroundRule>,
}

impl Grounder<'_> {
    fn instantiate(&mut self, r: usize, s: &Subst) -> Result<bool> {
        let rule = &self.rules[r];
        let mut sub = |t: &Term| t.substitute(s).normalized();
        let g = GroundRule {
            rule: r,
            subst: s.clone(),
            premise: rule.premise.literals.iter().map(|l| l.map_terms(&mut sub)).collect(),
            premise_eqs: rule.premise.equations.iter().map(|e| e.map_terms(&mut sub)).collect(),
            conclusion: rule.conclusion.literals.iter().map(|l| l.map_terms(&mut sub)).collect(),
            conclusion_eqs: rule.conclusion.equations.iter().map(|e| e.map_terms(&mut sub)).collect(),
            confidence: rule.confidence,
        };
        if !self.seen.insert(g.key()) {
            return Ok(false);
        }
        if self.out.len() >= self.cap {
            return Err(Error::GroundingCap { cap: self.cap });
        }
        for l in &g.conclusion {
            literal_entities(l, self.lex, &mut self.entities);
            self.known.insert(l.clone());
        }
        self.out.push(g);
        Ok(true)
    }

    fn matches(&self, lits: &[Literal], s: Subst) -> Vec<Subst> {
        let Some((first, rest)) = lits.split_first() else {
            return vec![s];
        };
        let mut out = Vec::new();
        for k in &self.known {
            for s2 in unify_literal(first, k, &s) {
                out.extend(self.matches(rest, s2));
            }
        }
        out
    }

    fn round(&mut self) -> Result<bool> {
        let mut grew = false;
        for r in 0..self.rules.len() {
            let rule = &self.rules[r];
            let types = self.lex.infer_var_types(rule);
            let vars = {
                let mut v = rule.vars();
                let mut seen = BTreeSet::new();
                v.retain(|x| seen.insert(x.clone()));
                v
            };
            for s in self.matches(&rule.premise.literals, Subst::new()) {
                let free: Vec<&String> = vars.iter().filter(|v| !s.contains_key(*v)).collect();
                let domains: Vec<Vec<Term>> = free
                    .iter()
                    .map(|v| {
                        let tys = types.get(*v).cloned().unwrap_or_else(|| vec!["point".into()]);
                        let mut d: Vec<Term> = Vec::new();
                        for ty in tys {
                            if let Some(e) = self.entities.get(&ty) {
                                d.extend(e.iter().cloned());
                            }
                        }
                        d
                    })
                    .collect();
                let total = domains.iter().try_fold(1usize, |acc, d| acc.checked_mul(d.len()));
                if total.is_none_or(|t| t > self.cap) {
                    return Err(Error::GroundingCap { cap: self.cap });
                }
                let mut idx = vec![0usize; free.len()];
                if domains.iter().any(Vec::is_empty) {
                    continue;
                }
                loop {
                    let mut s2 = s.clone();
                    for (k, v) in free.iter().enumerate() {
                        s2.insert((*v).clone(), domains[k][idx[k]].clone());
                    }
                    grew |= self.instantiate(r, &s2)?;
                    let mut k = 0;
                    while k < idx.len() {
                        idx[k] += 1;
                        if idx[k] < domains[k].len() {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == idx.len() {
                        break;
                    }
                }
            }
        }
        Ok(grew)
    }
}

/// Instances of `rules` whose literal premises are declared or derivable by
/// other instances, found by iterating to a fixpoint. Variables that occur
/// only outside the literal premises range over the problem's entities of
/// their type.
pub fn ground_rules(rules: &[HornRule], problem: &GeometryProblem, lex: &Lexicon, cfg: &SolverConfig) -> Result<Vec<GroundRule>> {
    for (i, r) in rules.iter().enumerate() {
        if !(r.confidence > 0.0 && r.confidence <= 1.0) {
            return Err(Error::InvalidArgument(format!("rule {i} has confidence {} outside (0,1]", r.confidence)));
        }
    }
    let coerced: Vec<HornRule> = rules
        .iter()
        .map(|r| HornRule {
            premise: crate::logic::Formula {
                literals: r.premise.literals.iter().map(|l| lex.coerce_literal(l)).collect(),
                equations: r.premise.equations.clone(),
            },
            conclusion: crate::logic::Formula {
                literals: r.conclusion.literals.iter().map(|l| lex.coerce_literal(l)).collect(),
                equations: r.conclusion.equations.clone(),
            },
            ..r.clone()
        })
        .collect();
    let mut g = Grounder {
        rules: &coerced,
        lex,
        cap: cfg.grounding_cap,
        known: BTreeSet::new(),
        entities: BTreeMap::new(),
        seen: BTreeSet::new(),
        out: Vec::new(),
    };
    for f in &problem.facts {
        match &f.fact {
            Fact::Lit(l) => {
                literal_entities(l, lex, &mut g.entities);
                g.known.insert(l.normalized());
            }
            Fact::Value(t, _) => collect_entities(t, lex, &mut g.entities),
        }
    }
    match &problem.query {
        Query::Measure(t) => collect_entities(t, lex, &mut g.entities),
        Query::Lit(l) => literal_entities(l, lex, &mut g.entities),
    }
    while g.round()? {}
    Ok(g.out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ItemKey {
    Lit(Literal),
    Measure(Term),
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemKey::Lit(l) => write!(f, "{l}"),
            ItemKey::Measure(t) => write!(f, "{}", t.equation_form()),
        }
    }
}

/// One derivation in an explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub rule: usize,
    pub bindings: Subst,
    pub derived: ItemKey,
    pub value: Option<f64>,
    pub premises: Vec<ItemKey>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Explanation {
    pub steps: Vec<Step>,
    pub probability: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    prob: f64,
    value: Option<f64>,
    depth: usize,
    back: Option<(usize, Vec<ItemKey>)>,
}

#[derive(Debug, Clone)]
struct Cand {
    prob: f64,
    depth: usize,
    seq: usize,
    key: ItemKey,
    entry: Entry,
}

impl PartialEq for Cand {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.prob
            .total_cmp(&o.prob)
            .then(o.depth.cmp(&self.depth))
            .then(o.seq.cmp(&self.seq))
    }
}

/// Outcome of a fully bound conclusion equation.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub rule: usize,
    pub terms: Vec<Term>,
    pub consistent: bool,
    pub probability: f64,
}

/// Every finalized item with its best probability, plus equation checks.
#[derive(Debug, Clone)]
pub struct Inference {
    ground: Vec<GroundRule>,
    best: HashMap<ItemKey, Entry>,
    pub checks: Vec<Check>,
}

impl Inference {
    pub fn probability(&self, key: &ItemKey) -> f64 {
        self.best.get(key).map_or(0.0, |e| e.prob)
    }

    pub fn value(&self, t: &Term) -> Option<f64> {
        self.best.get(&ItemKey::Measure(t.normalized())).and_then(|e| e.value)
    }

    pub fn ground_rules(&self) -> &[GroundRule] {
        &self.ground
    }

    pub fn num_items(&self) -> usize {
        self.best.len()
    }

    /// Backpointer chain of `key` in derivation order.
    pub fn explain(&self, key: &ItemKey) -> Explanation {
        let Some(e) = self.best.get(key) else {
            return Explanation::default();
        };
        let mut steps = Vec::new();
        let mut done = BTreeSet::new();
        self.collect(key, &mut steps, &mut done);
        Explanation {
            steps,
            probability: e.prob,
        }
    }

    fn collect(&self, key: &ItemKey, steps: &mut Vec<Step>, done: &mut BTreeSet<ItemKey>) {
        if !done.insert(key.clone()) {
            return;
        }
        let e = &self.best[key];
        if let Some((g, prem)) = &e.back {
            for p in prem {
                self.collect(p, steps, done);
            }
            let gr = &self.ground[*g];
            steps.push(Step {
                rule: gr.rule,
                bindings: gr.subst.clone(),
                derived: key.clone(),
                value: e.value,
                premises: prem.clone(),
                probability: e.prob,
            });
        }
    }
}

fn eq_measure_terms(e: &Equation) -> Vec<Term> {
    e.distinct_terms().into_iter().map(|t| t.normalized()).collect()
}

/// Max-product forward chaining over ground rules, finalizing the most
/// probable pending item first.
pub fn infer(problem: &GeometryProblem, ground: Vec<GroundRule>, cfg: &SolverConfig) -> Inference {
    let mut watch: HashMap<ItemKey, Vec<usize>> = HashMap::new();
    let mut unconditional = Vec::new();
    for (i, g) in ground.iter().enumerate() {
        let mut keys: Vec<ItemKey> = g.premise.iter().map(|l| ItemKey::Lit(l.clone())).collect();
        for e in g.premise_eqs.iter().chain(&g.conclusion_eqs) {
            keys.extend(eq_measure_terms(e).into_iter().map(ItemKey::Measure));
        }
        keys.sort();
        keys.dedup();
        if g.premise.is_empty() && g.premise_eqs.is_empty() {
            unconditional.push(i);
        }
        for k in keys {
            watch.entry(k).or_default().push(i);
        }
    }
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut push = |heap: &mut BinaryHeap<Cand>, key: ItemKey, entry: Entry| {
        seq += 1;
        heap.push(Cand {
            prob: entry.prob,
            depth: entry.depth,
            seq,
            key,
            entry,
        });
    };
    for f in &problem.facts {
        let (key, value) = match &f.fact {
            Fact::Lit(l) => (ItemKey::Lit(l.normalized()), None),
            Fact::Value(t, v) => (ItemKey::Measure(t.normalized()), Some(*v)),
        };
        push(
            &mut heap,
            key,
            Entry {
                prob: f.weight,
                value,
                depth: 0,
                back: None,
            },
        );
    }
    let mut inf = Inference {
        ground,
        best: HashMap::new(),
        checks: Vec::new(),
    };
    let mut checked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let fire = |inf: &mut Inference, checked: &mut BTreeSet<(usize, usize)>, gi: usize, out: &mut Vec<(ItemKey, Entry)>| {
        let g = &inf.ground[gi];
        let mut prob = g.confidence;
        let mut depth = 0;
        let mut prem = Vec::new();
        for l in &g.premise {
            let k = ItemKey::Lit(l.clone());
            match inf.best.get(&k) {
                Some(e) => {
                    prob *= e.prob;
                    depth = depth.max(e.depth);
                    prem.push(k);
                }
                None => return,
            }
        }
        let lookup = |t: &Term| inf.best.get(&ItemKey::Measure(t.normalized())).and_then(|e| e.value);
        for e in &g.premise_eqs {
            if evaluate_equation(e, &lookup) != EqOutcome::Consistent {
                return;
            }
            for t in eq_measure_terms(e) {
                let k = ItemKey::Measure(t);
                let en = &inf.best[&k];
                if !prem.contains(&k) {
                    prob *= en.prob;
                    depth = depth.max(en.depth);
                    prem.push(k);
                }
            }
        }
        if depth + 1 > cfg.max_depth {
            return;
        }
        for l in &g.conclusion {
            out.push((
                ItemKey::Lit(l.clone()),
                Entry {
                    prob,
                    value: None,
                    depth: depth + 1,
                    back: Some((gi, prem.clone())),
                },
            ));
        }
        let mut new_checks = Vec::new();
        for (ei, e) in g.conclusion_eqs.iter().enumerate() {
            let terms = eq_measure_terms(e);
            let bound: Vec<ItemKey> = terms
                .iter()
                .filter(|t| lookup(t).is_some())
                .map(|t| ItemKey::Measure(t.clone()))
                .collect();
            let mut p = prob;
            let mut d = depth;
            let mut pr = prem.clone();
            for k in &bound {
                let en = &inf.best[k];
                if !pr.contains(k) {
                    p *= en.prob;
                    d = d.max(en.depth);
                    pr.push(k.clone());
                }
            }
            match evaluate_equation(e, &lookup) {
                EqOutcome::Derived(t, v) => out.push((
                    ItemKey::Measure(t.normalized()),
                    Entry {
                        prob: p,
                        value: Some(v),
                        depth: d + 1,
                        back: Some((gi, pr)),
                    },
                )),
                EqOutcome::Consistent | EqOutcome::Inconsistent if checked.insert((gi, ei)) => new_checks.push(Check {
                    rule: g.rule,
                    terms: terms.clone(),
                    consistent: evaluate_equation(e, &lookup) == EqOutcome::Consistent,
                    probability: p,
                }),
                _ => {}
            }
        }
        inf.checks.extend(new_checks);
    };
    let mut out = Vec::new();
    for &gi in &unconditional {
        fire(&mut inf, &mut checked, gi, &mut out);
    }
    for (k, e) in out.drain(..) {
        push(&mut heap, k, e);
    }
    while let Some(c) = heap.pop() {
        if inf.best.contains_key(&c.key) || c.prob < cfg.tolerance {
            continue;
        }
        inf.best.insert(c.key.clone(), c.entry);
        if let Some(rs) = watch.get(&c.key) {
            for &gi in rs {
                fire(&mut inf, &mut checked, gi, &mut out);
            }
        }
        for (k, e) in out.drain(..) {
            if !inf.best.contains_key(&k) {
                push(&mut heap, k, e);
            }
        }
    }
    inf
}

/// Probability and explanation of the query under its most probable proof;
/// `(0, empty)` when underivable.
pub fn mpe_infer(problem: &GeometryProblem, rules: &[HornRule], lex: &Lexicon, cfg: &SolverConfig) -> Result<(f64, Explanation, Inference)> {
    let ground = ground_rules(rules, problem, lex, cfg)?;
    let inf = infer(problem, ground, cfg);
    let key = match &problem.query {
        Query::Measure(t) => ItemKey::Measure(t.clone()),
        Query::Lit(l) => ItemKey::Lit(l.clone()),
    };
    let ex = inf.explain(&key);
    Ok((ex.probability, ex, inf))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerKind {
    Choice(usize),
    Value(f64),
    Holds,
    Abstain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub kind: AnswerKind,
    pub value: Option<f64>,
    pub probability: f64,
    pub explanation: Explanation,
}

/// Answers from the derived value when one matches a choice, else from the
/// choice whose assumption is confirmed with the highest probability and
/// never contradicted; abstains otherwise.
pub fn answer_question(problem: &GeometryProblem, rules: &[HornRule], lex: &Lexicon, cfg: &SolverConfig) -> Result<Answer> {
    let (p, ex, inf) = mpe_infer(problem, rules, lex, cfg)?;
    let abstain = Answer {
        kind: AnswerKind::Abstain,
        value: None,
        probability: 0.0,
        explanation: Explanation::default(),
    };
    let term = match &problem.query {
        Query::Lit(_) => {
            return Ok(if p > 0.0 {
                Answer {
                    kind: AnswerKind::Holds,
                    value: None,
                    probability: p,
                    explanation: ex,
                }
            } else {
                abstain
            })
        }
        Query::Measure(t) => t.clone(),
    };
    let derived = inf.value(&term);
    let Some(choices) = &problem.choices else {
        return Ok(match derived {
            Some(v) => Answer {
                kind: AnswerKind::Value(v),
                value: Some(v),
                probability: p,
                explanation: ex,
            },
            None => abstain,
        });
    };
    if let Some(v) = derived {
        if let Some(i) = choices.iter().position(|c| approx_equal(v, *c, cfg.choice_tolerance)) {
            return Ok(Answer {
                kind: AnswerKind::Choice(i),
                value: Some(v),
                probability: p,
                explanation: ex,
            });
        }
    }
    let mut best: Option<(f64, usize, Explanation)> = None;
    for (i, &c) in choices.iter().enumerate() {
        let mut assumed = problem.clone();
        assumed.facts.retain(|f| !matches!(&f.fact, Fact::Value(t, _) if *t == term));
        assumed.facts.push(WeightedFact {
            fact: Fact::Value(term.clone(), c),
            weight: 1.0,
        });
        assumed.choices = None;
        let ground = ground_rules(rules, &assumed, lex, cfg)?;
        let inf = infer(&assumed, ground, cfg);
        let relevant: Vec<&Check> = inf.checks.iter().filter(|ch| ch.terms.contains(&term)).collect();
        if relevant.iter().any(|ch| !ch.consistent) {
            continue;
        }
        let Some(conf) = relevant.iter().map(|ch| ch.probability).max_by(f64::total_cmp) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| conf > b.0) {
            best = Some((conf, i, Explanation::default()));
        }
    }
    Ok(match best {
        Some((conf, i, ex)) => Answer {
            kind: AnswerKind::Choice(i),
            value: Some(choices[i]),
            probability: conf,
            explanation: ex,
        },
        None => abstain,
    })
}

/// Reads `index: name` lines; blank lines and `#` comments are skipped.
pub fn parse_axiom_names(text: &str) -> Result<BTreeMap<usize, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, name) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("axiom name line without `:`: `{line}`")))?;
        let k: usize = k.trim().parse().map_err(|_| Error::Parse(format!("bad rule index `{}`", k.trim())))?;
        out.insert(k, name.trim().to_string());
    }
    Ok(out)
}

fn fmt_value(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round())
    } else {
        format!("{v:.4}")
    }
}

/// One line per step: the axiom name (or rule text), its bindings and the
/// derived fact.
pub fn render_explanation(ex: &Explanation, rules: &[HornRule], names: &BTreeMap<usize, String>, query: &Query) -> Vec<String> {
    if ex.steps.is_empty() {
        return vec![format!("(1) {query} is a declared fact (probability {:.4})", ex.probability)];
    }
    ex.steps
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let name = names
                .get(&s.rule)
                .cloned()
                .or_else(|| rules.get(s.rule).map(|r| r.body()))
                .unwrap_or_else(|| format!("rule {}", s.rule));
            let bind: Vec<String> = s.bindings.iter().map(|(v, t)| format!("{v}={}", t.equation_form())).collect();
            let fact = match s.value {
                Some(v) => format!("{} = {}", s.derived, fmt_value(v)),
                None => s.derived.to_string(),
            };
            format!("({}) {name} [{}] => {fact} (probability {:.4})", k + 1, bind.join(", "), s.probability)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(s: &str) -> WeightedFact {
        WeightedFact {
            fact: Fact::Lit(Lexicon::builtin().coerce_literal(&Literal::parse(s, Naming::Ground).unwrap()).normalized()),
            weight: 1.0,
        }
    }

    fn val(t: &str, v: f64) -> WeightedFact {
        WeightedFact {
            fact: Fact::Value(parse_term(t, Naming::Ground).unwrap().normalized(), v),
            weight: 1.0,
        }
    }

    fn rules(lines: &[&str]) -> Vec<HornRule> {
        lines.iter().map(|l| HornRule::parse(l).unwrap()).collect()
    }

    #[test]
    fn grounding_counts() {
        let lex = Lexicon::builtin();
        let r = rules(&["1 :: isTriangle(T) => isIsosceles(T) ."]);
        let p = GeometryProblem {
            id: "t".into(),
            facts: vec![lit("isTriangle(A,B,C)"), lit("isTriangle(D,E,F)")],
            query: parse_query("isIsosceles(triangle(A,B,C))").unwrap(),
            choices: None,
        };
        assert_eq!(ground_rules(&r, &p, lex, &SolverConfig::default()).unwrap().len(), 2);
        let p2 = GeometryProblem {
            facts: vec![lit("parallel(line(A,B),line(C,D))")],
            ..p.clone()
        };
        assert_eq!(ground_rules(&r, &p2, lex, &SolverConfig::default()).unwrap().len(), 0);
    }

    #[test]
    fn grounding_cap_is_an_error() {
        let r = rules(&["1 :: liesOn(P,line(A,B)) => liesOn(P,line(B,A)) , collinear(P,A,B,Q) ."]);
        let p = GeometryProblem {
            id: "c".into(),
            facts: vec![lit("liesOn(C,line(A,B))"), lit("liesOn(D,line(A,B))")],
            query: parse_query("liesOn(C,line(A,B))").unwrap(),
            choices: None,
        };
        let cfg = SolverConfig { grounding_cap: 3, ..SolverConfig::default() };
        assert!(matches!(ground_rules(&r, &p, Lexicon::builtin(), &cfg), Err(Error::GroundingCap { cap: 3 })));
    }

    #[test]
    fn declared_query() {
        let mut f = lit("isTriangle(A,B,C)");
        f.weight = 0.9;
        let p = GeometryProblem {
            id: "t".into(),
            facts: vec![f],
            query: parse_query("isTriangle(triangle(A,B,C))").unwrap(),
            choices: None,
        };
        let (prob, ex, _) = mpe_infer(&p, &[], Lexicon::builtin(), &SolverConfig::default()).unwrap();
        assert_eq!(prob, 0.9);
        assert!(ex.steps.is_empty());
        let lines = render_explanation(&ex, &[], &BTreeMap::new(), &p.query);
        assert!(lines[0].contains("declared fact"));
    }

    #[test]
    fn pythagoras_length() {
        let r = rules(&["1 :: isTriangle(triangle(A,B,C)) , perpendicular(line(A,C),line(B,C)) => eq(BC^2 + AC^2 = AB^2) ."]);
        let p = GeometryProblem {
            id: "p".into(),
            facts: vec![lit("isTriangle(X,Y,Z)"), lit("perpendicular(line(X,Z),line(Y,Z))"), val("YZ", 3.0), val("XZ", 4.0)],
            query: parse_query("XY").unwrap(),
            choices: None,
        };
        let a = answer_question(&p, &r, Lexicon::builtin(), &SolverConfig::default()).unwrap();
        assert!((a.value.unwrap() - 5.0).abs() < 1e-6, "{a:?}");
    }

    #[test]
    fn probabilities_multiply() {
        let r = rules(&["0.5 :: p(a) => q(a) .", "0.9 :: q(a) , p(a) => s(a) ."]);
        let mut f = lit("p(a)");
        f.weight = 0.8;
        let p = GeometryProblem {
            id: "m".into(),
            facts: vec![f],
            query: Query::Lit(Literal::parse("s(a)", Naming::Ground).unwrap()),
            choices: None,
        };
        let (prob, ex, _) = mpe_infer(&p, &r, Lexicon::builtin(), &SolverConfig::default()).unwrap();
        assert!((prob - 0.9 * 0.8 * 0.5 * 0.8).abs() < 1e-12);
        assert_eq!(ex.steps.len(), 2);
    }

    #[test]
    fn abstains_without_support() {
        let p = GeometryProblem {
            id: "a".into(),
            facts: vec![lit("isTriangle(A,B,C)")],
            query: parse_query("∠ABC").unwrap(),
            choices: Some(vec![30.0, 60.0]),
        };
        let a = answer_question(&p, &[], Lexicon::builtin(), &SolverConfig::default()).unwrap();
        assert_eq!(a.kind, AnswerKind::Abstain);
    }

    #[test]
    fn inscribed_angle_chain() {
        let lex = Lexicon::builtin();
        let r = crate::logic::parse_rules(include_str!("../data/inscribed_angle/rules.txt")).unwrap();
        let names = parse_axiom_names(include_str!("../data/inscribed_angle/names.txt")).unwrap();
        let p = GeometryProblem::from_json(include_str!("../data/inscribed_angle/problem.json"), "f").unwrap();
        let a = answer_question(&p, &r, lex, &SolverConfig::default()).unwrap();
        assert_eq!(a.kind, AnswerKind::Choice(2));
        assert!((a.value.unwrap() - 60.0).abs() < 1e-9);
        let rules_used: Vec<usize> = a.explanation.steps.iter().map(|s| s.rule).collect();
        assert_eq!(rules_used, vec![0, 1, 2, 3]);
        let lines = render_explanation(&a.explanation, &r, &names, &p.query);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].contains("half the central angle") && lines[3].ends_with("= 60 (probability 1.0000)"), "{lines:?}");
        assert_eq!(lines, render_explanation(&a.explanation, &r, &names, &p.query));
    }

    #[test]
    fn pythagoras_grounds_once() {
        let lex = Lexicon::builtin();
        let r = crate::logic::parse_rules(include_str!("../data/pythagoras/rules.txt")).unwrap();
        let p = GeometryProblem::from_json(include_str!("../data/pythagoras/problem.json"), "p").unwrap();
        let g = ground_rules(&r, &p, lex, &SolverConfig::default()).unwrap();
        assert_eq!(g.len(), 1);
        let s: Vec<String> = g[0].subst.iter().map(|(k, v)| format!("{k}={v}")).collect();
        assert_eq!(s, ["A=A", "B=B", "C=C"]);
    }

    #[test]
    fn problem_json_round_trip() {
        let text = r#"{"facts":[{"lit":"isTriangle(A,B,C)","w":0.98},{"bind":"measure(angle(A,M,O))","value":90,"w":1.0}],"query":"measure(angle(A,D,B))","choices":[30,45,60,90]}"#;
        let p = GeometryProblem::from_json(text, "x").unwrap();
        assert_eq!(p.facts.len(), 2);
        assert_eq!(GeometryProblem::from_json(&p.to_json(), "x").unwrap(), p);
        assert!(GeometryProblem::from_json(r#"{"facts":[{"w":1.0}],"query":"AB"}"#, "y").is_err());
    }
}
