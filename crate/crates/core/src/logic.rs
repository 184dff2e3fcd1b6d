//! Terms, literals, horn rules, the rule text format and the lexicon.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::equation::{parse_app, Equation, Naming};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Var(String),
    Const(String),
    App(String, Vec<Term>),
}

pub type Subst = BTreeMap<String, Term>;

fn letter_name(i: usize) -> String {
    if i < 26 {
        ((b'A' + i as u8) as char).to_string()
    } else {
        format!("P{i}")
    }
}

impl Term {
    pub fn measure_of_angle(points: Vec<Term>) -> Term {
        Term::App("measure".into(), vec![Term::App("angle".into(), points)])
    }

    pub fn length_of_line(points: Vec<Term>) -> Term {
        Term::App("lengthOf".into(), vec![Term::App("line".into(), points)])
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Var(n) | Term::Const(n) | Term::App(n, _) => n,
        }
    }

    pub fn is_atom(&self) -> bool {
        !matches!(self, Term::App(..))
    }

    pub fn is_ground(&self) -> bool {
        match self {
            Term::Var(_) => false,
            Term::Const(_) => true,
            Term::App(_, a) => a.iter().all(Term::is_ground),
        }
    }

    /// Variable names in first-occurrence order.
    pub fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Term::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Term::Const(_) => {}
            Term::App(_, a) => a.iter().for_each(|t| t.collect_vars(out)),
        }
    }

    pub fn substitute(&self, s: &Subst) -> Term {
        match self {
            Term::Var(v) => s.get(v).cloned().unwrap_or_else(|| self.clone()),
            Term::Const(_) => self.clone(),
            Term::App(f, a) => Term::App(f.clone(), a.iter().map(|t| t.substitute(s)).collect()),
        }
    }

    /// Sorts the endpoints of `line(P,Q)` and the outer points of
    /// `angle(P,Q,R)`; other constructors keep their argument order.
    pub fn normalized(&self) -> Term {
        match self {
            Term::App(f, a) => {
                let mut args: Vec<Term> = a.iter().map(Term::normalized).collect();
                match (f.as_str(), args.len()) {
                    ("line", 2) if args[0] > args[1] => args.swap(0, 1),
                    ("angle", 3) if args[0] > args[2] => args.swap(0, 2),
                    _ => {}
                }
                Term::App(f.clone(), args)
            }
            _ => self.clone(),
        }
    }

    /// Renames atoms that look like point labels (uppercase initial) to A, B,
    /// C, ... in the order first seen through `map`.
    pub fn rename_points(&self, map: &mut BTreeMap<String, String>) -> Term {
        match self {
            Term::Var(n) | Term::Const(n) if n.chars().next().is_some_and(char::is_uppercase) => {
                let next = letter_name(map.len());
                let new = map.entry(n.clone()).or_insert(next).clone();
                if matches!(self, Term::Var(_)) {
                    Term::Var(new)
                } else {
                    Term::Const(new)
                }
            }
            Term::App(f, a) => Term::App(f.clone(), a.iter().map(|t| t.rename_points(map)).collect()),
            _ => self.clone(),
        }
    }

    /// Variables turned into constants of the same name, or back.
    pub fn with_atoms_as(&self, var: bool) -> Term {
        match self {
            Term::Var(n) | Term::Const(n) => {
                if var {
                    Term::Var(n.clone())
                } else {
                    Term::Const(n.clone())
                }
            }
            Term::App(f, a) => Term::App(f.clone(), a.iter().map(|t| t.with_atoms_as(var)).collect()),
        }
    }

    fn single_letter_points(args: &[Term]) -> Option<String> {
        args.iter()
            .map(|t| match t {
                Term::Var(n) | Term::Const(n) if n.len() == 1 && n.chars().all(|c| c.is_ascii_uppercase()) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Short form used inside equations: `∠ABC`, `AB`, else the full term.
    pub fn equation_form(&self) -> String {
        if let Term::App(f, a) = self {
            if let [Term::App(g, pts)] = a.as_slice() {
                let short = Term::single_letter_points(pts);
                match (f.as_str(), g.as_str(), short) {
                    ("measure", "angle", Some(s)) if pts.len() == 3 => return format!("∠{s}"),
                    ("lengthOf", "line", Some(s)) if pts.len() == 2 => return s,
                    _ => {}
                }
            }
        }
        self.to_string()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(n) | Term::Const(n) => write!(f, "{n}"),
            Term::App(name, args) => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl Literal {
    pub fn new(predicate: impl Into<String>, args: Vec<Term>) -> Self {
        Self {
            predicate: predicate.into(),
            args,
        }
    }

    pub fn parse(text: &str, naming: Naming) -> Result<Literal> {
        let (predicate, args) = parse_app(text.trim(), naming)?;
        Ok(Literal { predicate, args })
    }

    pub fn substitute(&self, s: &Subst) -> Literal {
        Literal::new(self.predicate.clone(), self.args.iter().map(|t| t.substitute(s)).collect())
    }

    pub fn normalized(&self) -> Literal {
        Literal::new(self.predicate.clone(), self.args.iter().map(Term::normalized).collect())
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(Term::is_ground)
    }

    pub fn collect_vars(&self, out: &mut Vec<String>) {
        self.args.iter().for_each(|t| t.collect_vars(out));
    }

    pub fn map_terms(&self, f: &mut impl FnMut(&Term) -> Term) -> Literal {
        Literal::new(self.predicate.clone(), self.args.iter().map(f).collect())
    }

    /// Argument structure with every atom erased; used to order literals
    /// before variables are named.
    fn skeleton(&self) -> String {
        fn sk(t: &Term) -> String {
            match t {
                Term::Var(_) => "_".into(),
                Term::Const(c) => c.clone(),
                Term::App(f, a) => format!("{f}({})", a.iter().map(sk).collect::<Vec<_>>().join(",")),
            }
        }
        format!("{}({})", self.predicate, self.args.iter().map(sk).collect::<Vec<_>>().join(","))
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// Conjunction of literals and equations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Formula {
    pub literals: Vec<Literal>,
    pub equations: Vec<Equation>,
}

impl Formula {
    pub fn is_empty(&self) -> bool {
        self.literals.is_empty() && self.equations.is_empty()
    }

    pub fn map_terms(&self, f: &mut impl FnMut(&Term) -> Term) -> Formula {
        Formula {
            literals: self.literals.iter().map(|l| l.map_terms(f)).collect(),
            equations: self.equations.iter().map(|e| e.map_terms(f)).collect(),
        }
    }

    pub fn collect_vars(&self, out: &mut Vec<String>) {
        for l in &self.literals {
            l.collect_vars(out);
        }
        for e in &self.equations {
            for t in e.terms() {
                t.collect_vars(out);
            }
        }
    }

    pub fn items(&self) -> Vec<String> {
        self.literals
            .iter()
            .map(|l| l.to_string())
            .chain(self.equations.iter().map(|e| format!("eq({e})")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub book_id: String,
    pub start: usize,
    pub end: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HornRule {
    pub premise: Formula,
    pub conclusion: Formula,
    pub confidence: f64,
    pub provenance: Option<Provenance>,
    /// Figure attached to the premise, passed through from the mention.
    pub diagram: Option<String>,
}

fn split_top_level(s: &str, sep: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if c == sep && depth == 0 {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    out.push(cur);
    out.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

/// Parses `lit , lit , eq(...)` into a formula.
pub fn parse_formula(text: &str, naming: Naming) -> Result<Formula> {
    let mut f = Formula::default();
    for item in split_top_level(text, ',') {
        if let Some(inner) = item.strip_prefix("eq(").and_then(|r| r.strip_suffix(')')) {
            f.equations.push(Equation::parse(inner, naming)?);
        } else {
            f.literals.push(Literal::parse(&item, naming)?);
        }
    }
    Ok(f)
}

impl HornRule {
    pub fn new(premise: Formula, conclusion: Formula, confidence: f64) -> Self {
        Self {
            premise,
            conclusion,
            confidence,
            provenance: None,
            diagram: None,
        }
    }

    /// Reads `conf :: lit , lit => lit , eq(...) .`
    pub fn parse(line: &str) -> Result<HornRule> {
        let body = line.trim();
        let body = body.strip_suffix('.').unwrap_or(body).trim();
        let (conf, rest) = body
            .split_once("::")
            .ok_or_else(|| Error::Parse(format!("rule without `::`: `{line}`")))?;
        let confidence: f64 = conf
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad confidence `{}`", conf.trim())))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Parse(format!("confidence {confidence} outside [0,1]")));
        }
        let (prem, concl) = rest
            .split_once("=>")
            .ok_or_else(|| Error::Parse(format!("rule without `=>`: `{line}`")))?;
        let premise = parse_formula(prem, Naming::Rule)?;
        let conclusion = parse_formula(concl, Naming::Rule)?;
        if conclusion.is_empty() {
            return Err(Error::Parse(format!("rule with empty conclusion: `{line}`")));
        }
        Ok(HornRule::new(premise, conclusion, confidence))
    }

    pub fn vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.premise.collect_vars(&mut out);
        self.conclusion.collect_vars(&mut out);
        out
    }

    /// Rule text without the confidence prefix, used as a stable identity.
    pub fn body(&self) -> String {
        let p = self.premise.items().join(" , ");
        let c = self.conclusion.items().join(" , ");
        if p.is_empty() {
            format!("=> {c}")
        } else {
            format!("{p} => {c}")
        }
    }

    /// Variables renamed A, B, ... in first-use order, literals sorted.
    /// Ties between literals of the same shape are resolved by trying their
    /// orderings and keeping the smallest rendering.
    pub fn canonical(&self) -> HornRule {
        let sort_side = |f: &Formula| {
            let mut lits = f.literals.clone();
            lits.sort_by_key(|l| l.skeleton());
            lits
        };
        let prem = sort_side(&self.premise);
        let concl = sort_side(&self.conclusion);
        let mut best: Option<(String, HornRule)> = None;
        let mut orders = tie_permutations(&prem);
        let concl_orders = tie_permutations(&concl);
        if orders.len() * concl_orders.len() > 5040 {
            orders.truncate(1);
        }
        for po in &orders {
            for co in &concl_orders {
                let cand = self.renamed_with(po.iter().map(|&i| prem[i].clone()).collect(), co.iter().map(|&i| concl[i].clone()).collect());
                let key = cand.body();
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, cand));
                }
            }
        }
        best.expect("at least one ordering").1
    }

    fn renamed_with(&self, prem: Vec<Literal>, concl: Vec<Literal>) -> HornRule {
        let ordered = HornRule {
            premise: Formula {
                literals: prem,
                equations: self.premise.equations.clone(),
            },
            conclusion: Formula {
                literals: concl,
                equations: self.conclusion.equations.clone(),
            },
            ..self.clone()
        };
        let mut map = BTreeMap::new();
        for (i, v) in ordered.vars().into_iter().enumerate() {
            map.insert(v, Term::Var(letter_name(i)));
        }
        let mut rename = |t: &Term| t.substitute(&map);
        let mut out = HornRule {
            premise: ordered.premise.map_terms(&mut rename),
            conclusion: ordered.conclusion.map_terms(&mut rename),
            ..self.clone()
        };
        out.premise.literals.sort();
        out.conclusion.literals.sort();
        out
    }

    /// All premise and conclusion items of the canonical rule as strings.
    pub fn canonical_items(&self) -> Vec<String> {
        let c = self.canonical();
        let mut v = c.premise.items();
        v.extend(c.conclusion.items());
        v
    }

    /// Constants lifted to variables (a parsed mention names concrete points;
    /// the rule quantifies over them).
    pub fn lifted(&self) -> HornRule {
        let mut lift = |t: &Term| t.with_atoms_as(true);
        HornRule {
            premise: self.premise.map_terms(&mut lift),
            conclusion: self.conclusion.map_terms(&mut lift),
            ..self.clone()
        }
    }
}

fn tie_permutations(lits: &[Literal]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, l) in lits.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if lits[g[0]].skeleton() == l.skeleton() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut orders = vec![Vec::new()];
    for g in groups {
        let perms = permutations(&g);
        let mut next = Vec::new();
        for o in &orders {
            for p in &perms {
                let mut n = o.clone();
                n.extend(p);
                next.push(n);
                if next.len() > 5040 {
                    return vec![(0..lits.len()).collect()];
                }
            }
        }
        orders = next;
    }
    orders
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

impl fmt::Display for HornRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} :: {} .", fmt_conf(self.confidence), self.body())
    }
}

fn fmt_conf(c: f64) -> String {
    if c == 1.0 {
        "1".into()
    } else {
        let s = format!("{c:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// One rule per line; blank lines and `#` comments are skipped.
pub fn parse_rules(text: &str) -> Result<Vec<HornRule>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| HornRule::parse(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn format_rules(rules: &[HornRule]) -> String {
    rules.iter().map(|r| format!("{r}\n")).collect()
}

/// Allowed types for one argument slot.
pub type SlotType = Vec<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDef {
    pub name: String,
    pub arg_types: Vec<SlotType>,
    /// Lowercased token sequences.
    pub triggers: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub arg_types: Vec<SlotType>,
    pub result: String,
    pub triggers: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeDef {
    pub name: String,
    pub nouns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerMatch {
    pub start: usize,
    pub len: usize,
    pub symbol: String,
    pub function: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lexicon {
    pub types: Vec<TypeDef>,
    pub predicates: Vec<PredicateDef>,
    pub functions: Vec<FunctionDef>,
}

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.txt");

fn quoted_list(s: &str) -> Result<Vec<String>> {
    s.split('|')
        .map(|p| {
            let p = p.trim();
            p.strip_prefix('"')
                .and_then(|p| p.strip_suffix('"'))
                .map(|p| p.to_lowercase())
                .ok_or_else(|| Error::Parse(format!("expected a quoted phrase, found `{p}`")))
        })
        .collect()
}

fn slot_types(s: &str) -> Vec<SlotType> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',')
        .map(|t| t.split('|').map(|x| x.trim().to_string()).collect())
        .collect()
}

fn name_arity(s: &str) -> Result<(String, usize)> {
    let (n, a) = s
        .trim()
        .split_once('/')
        .ok_or_else(|| Error::Parse(format!("expected name/arity, found `{s}`")))?;
    let arity = a
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad arity in `{s}`")))?;
    Ok((n.trim().to_string(), arity))
}

impl Lexicon {
    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::parse(BUILTIN_LEXICON).expect("builtin lexicon parses"))
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut lex = Lexicon::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Parse(format!("lexicon line {}: {e}", no + 1));
            let parts: Vec<&str> = line.splitn(3, " : ").collect();
            if let Some(name) = line.strip_prefix("type ") {
                let (name, nouns) = match name.split_once(" : ") {
                    Some((n, q)) => (n.trim(), quoted_list(q).map_err(at)?),
                    None => (name.trim(), Vec::new()),
                };
                lex.types.push(TypeDef {
                    name: name.to_string(),
                    nouns,
                });
            } else if let Some(rest) = line.strip_prefix("fn ") {
                let parts: Vec<&str> = rest.splitn(3, " : ").collect();
                if parts.len() < 2 {
                    return Err(at(Error::Parse("function needs a signature".into())));
                }
                let (name, arity) = name_arity(parts[0]).map_err(at)?;
                let (args, result) = parts[1]
                    .split_once("->")
                    .ok_or_else(|| at(Error::Parse("function signature needs `->`".into())))?;
                let arg_types = slot_types(args);
                if arg_types.len() != arity {
                    return Err(at(Error::Parse(format!("{name}: arity {arity} but {} types", arg_types.len()))));
                }
                let triggers = match parts.get(2) {
                    Some(q) => quoted_list(q).map_err(at)?,
                    None => Vec::new(),
                };
                lex.functions.push(FunctionDef {
                    name,
                    arg_types,
                    result: result.trim().to_string(),
                    triggers: triggers.iter().map(|t| crate::text::tokenize(t)).collect(),
                });
            } else {
                if parts.len() != 3 {
                    return Err(at(Error::Parse(format!("malformed predicate line `{line}`"))));
                }
                let (name, arity) = name_arity(parts[0]).map_err(at)?;
                let arg_types = slot_types(parts[1]);
                if arg_types.len() != arity {
                    return Err(at(Error::Parse(format!("{name}: arity {arity} but {} types", arg_types.len()))));
                }
                let triggers = quoted_list(parts[2]).map_err(at)?;
                lex.predicates.push(PredicateDef {
                    name,
                    arg_types,
                    triggers: triggers.iter().map(|t| crate::text::tokenize(t)).collect(),
                });
            }
        }
        lex.validate()?;
        Ok(lex)
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for n in self
            .predicates
            .iter()
            .map(|p| &p.name)
            .chain(self.functions.iter().map(|f| &f.name))
        {
            if !names.insert(n.clone()) {
                return Err(Error::Parse(format!("lexicon symbol `{n}` defined twice")));
            }
        }
        let mut triggers = BTreeSet::new();
        for p in &self.predicates {
            for t in &p.triggers {
                if !triggers.insert(t.clone()) {
                    return Err(Error::Parse(format!("trigger `{}` maps to two predicates", t.join(" "))));
                }
            }
        }
        let known: BTreeSet<&str> = self.types.iter().map(|t| t.name.as_str()).collect();
        for ty in self
            .predicates
            .iter()
            .flat_map(|p| p.arg_types.iter())
            .chain(self.functions.iter().flat_map(|f| f.arg_types.iter()))
            .flatten()
            .chain(self.functions.iter().map(|f| &f.result))
        {
            if !known.contains(ty.as_str()) {
                return Err(Error::Parse(format!("unknown type `{ty}` in lexicon")));
            }
        }
        Ok(())
    }

    pub fn predicate(&self, name: &str) -> Option<&PredicateDef> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Constructor building an entity of `ty` from points, e.g. `triangle/3`.
    pub fn constructor(&self, ty: &str) -> Option<&FunctionDef> {
        self.functions
            .iter()
            .find(|f| f.result == ty && f.name == ty && f.arg_types.iter().all(|a| a == &["point"]))
    }

    /// Trigger occurrences in `tokens`, scanned left to right without overlap.
    /// At each position the longest trigger wins, then lexicon order with
    /// predicates before functions.
    pub fn find_triggers(&self, tokens: &[String]) -> Vec<TriggerMatch> {
        let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let mut best: Option<TriggerMatch> = None;
            let candidates = self
                .predicates
                .iter()
                .map(|p| (&p.name, &p.triggers, false))
                .chain(self.functions.iter().map(|f| (&f.name, &f.triggers, true)));
            for (name, triggers, function) in candidates {
                for t in triggers {
                    let fits = !t.is_empty() && lower.len() - i >= t.len() && lower[i..i + t.len()] == t[..];
                    if fits && best.as_ref().is_none_or(|b| t.len() > b.len) {
                        best = Some(TriggerMatch {
                            start: i,
                            len: t.len(),
                            symbol: name.clone(),
                            function,
                        });
                    }
                }
            }
            match best {
                Some(m) => {
                    i += m.len;
                    out.push(m);
                }
                None => i += 1,
            }
        }
        out
    }

    /// Type named by a noun; plural forms with a trailing `s` also match.
    pub fn noun_type(&self, word: &str) -> Option<&str> {
        let w = word.to_lowercase();
        let singular = w.strip_suffix('s').unwrap_or(&w);
        self.types
            .iter()
            .find(|t| t.nouns.iter().any(|n| *n == w || n == singular))
            .map(|t| t.name.as_str())
    }

    /// Result type of a compound term; atoms are points.
    pub fn term_type(&self, t: &Term) -> String {
        match t {
            Term::App(f, _) => self.function(f).map(|d| d.result.clone()).unwrap_or_else(|| "point".into()),
            _ => "point".into(),
        }
    }

    /// Expands shorthand arguments: `isTriangle(A,B,C)` becomes
    /// `isTriangle(triangle(A,B,C))` when the single slot has a point
    /// constructor.
    pub fn coerce_literal(&self, lit: &Literal) -> Literal {
        let Some(def) = self.predicate(&lit.predicate) else {
            return lit.clone();
        };
        if def.arg_types.len() == 1 && lit.args.len() > 1 && lit.args.iter().all(Term::is_atom) {
            for ty in &def.arg_types[0] {
                if let Some(c) = self.constructor(ty) {
                    if c.arg_types.len() == lit.args.len() {
                        return Literal::new(lit.predicate.clone(), vec![Term::App(c.name.clone(), lit.args.clone())]);
                    }
                }
            }
        }
        lit.clone()
    }

    /// Types each variable can take, from the slots it occupies. Variables
    /// under constructors are points; a variable seen in several slots gets
    /// the intersection.
    pub fn infer_var_types(&self, rule: &HornRule) -> BTreeMap<String, SlotType> {
        let mut out: BTreeMap<String, SlotType> = BTreeMap::new();
        let mut note = |v: &str, types: &SlotType| {
            out.entry(v.to_string())
                .and_modify(|cur| cur.retain(|t| types.contains(t)))
                .or_insert_with(|| types.clone());
        };
        fn walk(lex: &Lexicon, t: &Term, slot: &SlotType, note: &mut dyn FnMut(&str, &SlotType)) {
            match t {
                Term::Var(v) => note(v, slot),
                Term::Const(_) => {}
                Term::App(f, args) => {
                    let def = lex.function(f);
                    for (i, a) in args.iter().enumerate() {
                        let s = def
                            .and_then(|d| d.arg_types.get(i).cloned())
                            .unwrap_or_else(|| vec!["point".to_string()]);
                        walk(lex, a, &s, note);
                    }
                }
            }
        }
        let point = vec!["point".to_string()];
        for f in [&rule.premise, &rule.conclusion] {
            for l in &f.literals {
                let def = self.predicate(&l.predicate);
                for (i, a) in l.args.iter().enumerate() {
                    let slot = def.and_then(|d| d.arg_types.get(i).cloned()).unwrap_or_else(|| point.clone());
                    walk(self, a, &slot, &mut note);
                }
            }
            for e in &f.equations {
                for t in e.terms() {
                    match t {
                        Term::Var(v) => note(v, &vec!["measure".to_string()]),
                        _ => walk(self, t, &point, &mut note),
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PYTH: &str = "1 :: isTriangle(triangle(A,B,C)) , perpendicular(line(A,C),line(B,C)) => eq(BC^2 + AC^2 = AB^2) .";

    #[test]
    fn rule_text_round_trips() {
        let r = HornRule::parse(PYTH).unwrap();
        assert_eq!(r.premise.literals.len(), 2);
        assert_eq!(r.conclusion.equations.len(), 1);
        assert_eq!(r.to_string(), PYTH);
        assert_eq!(HornRule::parse(&r.to_string()).unwrap(), r);
        let lit = HornRule::parse("0.25 :: => perpendicular(line(A,M),line(O,A)) .").unwrap();
        assert!(lit.premise.is_empty());
        assert_eq!(lit.confidence, 0.25);
        assert!(HornRule::parse("1 :: isTriangle(T) => .").is_err());
        assert!(HornRule::parse("2 :: a(X) => b(X) .").is_err());
    }

    #[test]
    fn canonical_ignores_names_and_order() {
        let a = HornRule::parse(PYTH).unwrap();
        let b = HornRule::parse(
            "1 :: perpendicular(line(X,Z),line(Y,Z)) , isTriangle(triangle(X,Y,Z)) => eq(YZ^2 + XZ^2 = XY^2) .",
        )
        .unwrap();
        assert_eq!(a.canonical().body(), b.canonical().body());
        let c = a.canonical();
        assert_eq!(c.canonical().body(), c.body());
        let d = HornRule::parse("1 :: isTriangle(triangle(A,B,C)) => eq(BC^2 = AB^2) .").unwrap();
        assert_ne!(a.canonical().body(), d.canonical().body());
    }

    #[test]
    fn canonical_handles_same_shape_literals() {
        let a = HornRule::parse("1 :: isTriangle(triangle(A,B,C)) , isTriangle(triangle(D,E,F)) => congruent(triangle(A,B,C),triangle(D,E,F)) .").unwrap();
        let b = HornRule::parse("1 :: isTriangle(triangle(D,E,F)) , isTriangle(triangle(A,B,C)) => congruent(triangle(A,B,C),triangle(D,E,F)) .").unwrap();
        assert_eq!(a.canonical().body(), b.canonical().body());
    }

    #[test]
    fn builtin_lexicon_loads() {
        let lex = Lexicon::builtin();
        assert!(lex.types.len() >= 10);
        assert!(lex.predicates.len() + lex.functions.len() >= 30);
        assert_eq!(lex.noun_type("Triangles"), Some("triangle"));
        assert_eq!(lex.constructor("angle").unwrap().arg_types.len(), 3);
        let lit = Literal::parse("isTriangle(A,B,C)", Naming::Ground).unwrap();
        assert_eq!(lex.coerce_literal(&lit).to_string(), "isTriangle(triangle(A,B,C))");
    }

    #[test]
    fn triggers_prefer_longest_match() {
        let lex = Lexicon::builtin();
        let toks = crate::text::tokenize("AC is at right angles to BC in a right triangle");
        let m: Vec<_> = lex.find_triggers(&toks).into_iter().map(|m| (m.start, m.symbol)).collect();
        assert_eq!(m, vec![(2, "perpendicular".to_string()), (9, "isRightTriangle".to_string())]);
    }

    #[test]
    fn lexicon_rejects_duplicates() {
        let text = "type point : \"point\"\np/1 : point : \"x\"\nq/1 : point : \"x\"\n";
        assert!(Lexicon::parse(text).is_err());
        assert!(Lexicon::parse("p/2 : point : \"x\"").is_err());
        assert!(Lexicon::parse("p/1 : blob : \"x\"").is_err());
    }

    #[test]
    fn var_types_follow_slots() {
        let lex = Lexicon::builtin();
        let r = HornRule::parse("1 :: isTriangle(T) , liesOn(P,K) => eq(AB = 2) .").unwrap();
        let t = lex.infer_var_types(&r);
        assert_eq!(t["T"], vec!["triangle"]);
        assert_eq!(t["K"], vec!["line", "circle"]);
        assert_eq!(t["A"], vec!["point"]);
        assert_eq!(t["P"], vec!["point"]);
    }

    #[test]
    fn normalization_sorts_only_lines_and_angles() {
        let t = Literal::parse("similar(triangle(M,O,A),triangle(M,O,B))", Naming::Ground).unwrap();
        assert_eq!(t.normalized(), t);
        let a = Literal::parse("interior(M,angle(B,O,A))", Naming::Ground).unwrap();
        assert_eq!(a.normalized().to_string(), "interior(M,angle(A,O,B))");
    }
}
