//! Equation trees over measure terms: parsing, printing, template
//! canonicalization and numeric evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::logic::Term;

/// How bare identifiers are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Naming {
    /// Identifiers starting with an uppercase letter are variables.
    Rule,
    /// Every identifier is a constant.
    Ground,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Angle,
    Op(char),
    Eq,
    LParen,
    RParen,
    Comma,
}

fn lex(text: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let raw: String = chars[start..i].iter().collect();
            let v = raw
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{raw}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            out.push(match c {
                '∠' => Tok::Angle,
                '=' => Tok::Eq,
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                '+' => Tok::Op('+'),
                '-' | '−' => Tok::Op('-'),
                '*' | '×' | '·' => Tok::Op('*'),
                '/' | '÷' => Tok::Op('/'),
                '^' => Tok::Op('^'),
                other => return Err(Error::Parse(format!("unexpected character `{other}`"))),
            });
            i += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Term(Term),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub lhs: Expr,
    pub rhs: Expr,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    naming: Naming,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(Error::Parse(format!("expected {want:?}, found {other:?}"))),
        }
    }

    fn atom_term(&self, name: String) -> Term {
        let var = self.naming == Naming::Rule && name.chars().next().is_some_and(|c| c.is_uppercase());
        if var {
            Term::Var(name)
        } else {
            Term::Const(name)
        }
    }

    fn term(&mut self) -> Result<Term> {
        match self.next() {
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::LParen) {
                    self.pos += 1;
                    let mut args = Vec::new();
                    if self.peek() != Some(&Tok::RParen) {
                        loop {
                            args.push(self.term()?);
                            if self.peek() == Some(&Tok::Comma) {
                                self.pos += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen)?;
                    Ok(Term::App(name, args))
                } else {
                    Ok(self.atom_term(name))
                }
            }
            other => Err(Error::Parse(format!("expected a term, found {other:?}"))),
        }
    }

    fn points(&self, label: &str) -> Vec<Term> {
        label.chars().map(|c| self.atom_term(c.to_string())).collect()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.product()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().cloned() {
                Some(Tok::Op(c @ ('*' | '/'))) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
                    lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
                }
                // implicit product after a number: 2x, 0.5∠AOB, 3(AB)
                Some(Tok::Ident(_) | Tok::Angle | Tok::LParen) if matches!(lhs, Expr::Num(_)) => {
                    let rhs = self.unary()?;
                    lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Tok::Op('-')) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.peek() == Some(&Tok::Op('+')) {
            self.pos += 1;
        }
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Op('^')) {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Angle) => {
                self.pos += 1;
                match self.next() {
                    Some(Tok::Ident(label)) if label.len() == 3 && label.chars().all(|c| c.is_ascii_uppercase()) => {
                        Ok(Expr::Term(Term::measure_of_angle(self.points(&label))))
                    }
                    other => Err(Error::Parse(format!("expected three point labels after ∠, found {other:?}"))),
                }
            }
            Some(Tok::Ident(name)) => {
                if self.toks.get(self.pos + 1) == Some(&Tok::LParen) {
                    return Ok(Expr::Term(self.term()?));
                }
                self.pos += 1;
                let caps = name.chars().all(|c| c.is_ascii_uppercase());
                Ok(Expr::Term(match name.len() {
                    2 if caps => Term::length_of_line(self.points(&name)),
                    3 if caps => Term::measure_of_angle(self.points(&name)),
                    _ => self.atom_term(name),
                }))
            }
            other => Err(Error::Parse(format!("expected an operand, found {other:?}"))),
        }
    }
}

/// Parses a single term, e.g. `measure(angle(A,B,C))`, `∠ABC` or `BC`.
pub fn parse_term(text: &str, naming: Naming) -> Result<Term> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        naming,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input in term `{text}`")));
    }
    match e {
        Expr::Term(t) => Ok(t),
        _ => Err(Error::Parse(format!("`{text}` is not a term"))),
    }
}

/// Term with arguments, e.g. a literal argument list; shares the equation lexer.
pub(crate) fn parse_app(text: &str, naming: Naming) -> Result<(String, Vec<Term>)> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        naming,
    };
    let t = p.term()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input in `{text}`")));
    }
    match t {
        Term::App(name, args) => Ok((name, args)),
        Term::Var(name) | Term::Const(name) => Ok((name, Vec::new())),
    }
}

impl Equation {
    pub fn parse(text: &str, naming: Naming) -> Result<Equation> {
        let toks = lex(text)?;
        let eqs = toks.iter().filter(|t| **t == Tok::Eq).count();
        if eqs != 1 {
            return Err(Error::Parse(format!("equation needs exactly one `=`: `{text}`")));
        }
        let mut p = Parser { toks, pos: 0, naming };
        let lhs = p.expr()?;
        p.expect(Tok::Eq)?;
        let rhs = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(Error::Parse(format!("trailing input in equation `{text}`")));
        }
        Ok(Equation { lhs, rhs })
    }

    /// Leaf terms in left-to-right order, repeats included.
    pub fn terms(&self) -> Vec<&Term> {
        let mut out = Vec::new();
        self.lhs.collect_terms(&mut out);
        self.rhs.collect_terms(&mut out);
        out
    }

    /// Distinct leaf terms in first-occurrence order.
    pub fn distinct_terms(&self) -> Vec<Term> {
        let mut seen = BTreeSet::new();
        self.terms()
            .into_iter()
            .filter(|t| seen.insert((*t).clone()))
            .cloned()
            .collect()
    }

    pub fn map_terms(&self, f: &mut impl FnMut(&Term) -> Term) -> Equation {
        Equation {
            lhs: self.lhs.map_terms(f),
            rhs: self.rhs.map_terms(f),
        }
    }

    pub fn normalized(&self) -> Equation {
        self.map_terms(&mut |t| t.normalized())
    }

    /// Point labels renamed A, B, C, ... in first-occurrence order, operators
    /// and spacing normalized.
    pub fn canonical_template(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let renamed = self.map_terms(&mut |t| t.rename_points(&mut map));
        renamed.to_string()
    }
}

/// True when both strings parse and share a canonical template; never fails.
pub fn equation_template_match(a: &str, b: &str) -> bool {
    match (Equation::parse(a, Naming::Ground), Equation::parse(b, Naming::Ground)) {
        (Ok(x), Ok(y)) => x.canonical_template() == y.canonical_template(),
        _ => false,
    }
}

impl Expr {
    fn collect_terms<'a>(&'a self, out: &mut Vec<&'a Term>) {
        match self {
            Expr::Num(_) => {}
            Expr::Term(t) => out.push(t),
            Expr::Neg(e) => e.collect_terms(out),
            Expr::Bin(_, a, b) => {
                a.collect_terms(out);
                b.collect_terms(out);
            }
        }
    }

    fn map_terms(&self, f: &mut impl FnMut(&Term) -> Term) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Term(t) => Expr::Term(f(t)),
            Expr::Neg(e) => Expr::Neg(Box::new(e.map_terms(f))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.map_terms(f)), Box::new(b.map_terms(f))),
        }
    }

    fn contains(&self, t: &Term) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Term(u) => u == t,
            Expr::Neg(e) => e.contains(t),
            Expr::Bin(_, a, b) => a.contains(t) || b.contains(t),
        }
    }

    fn eval(&self, lookup: &dyn Fn(&Term) -> Option<f64>) -> Option<f64> {
        Some(match self {
            Expr::Num(v) => *v,
            Expr::Term(t) => lookup(t)?,
            Expr::Neg(e) => -e.eval(lookup)?,
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(lookup)?, b.eval(lookup)?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Num(v) if *v < 0.0 => 3,
            Expr::Num(_) | Expr::Term(_) => 5,
            Expr::Neg(_) => 3,
            Expr::Bin(op, _, _) => op.precedence(),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool| {
            if paren {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => write!(f, "{}", fmt_num(*v)),
            Expr::Term(t) => write!(f, "{}", t.equation_form()),
            Expr::Neg(e) => {
                write!(f, "-")?;
                wrap(f, e, e.precedence() < 3)
            }
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                let (left_paren, right_paren) = if *op == BinOp::Pow {
                    (a.precedence() <= p, b.precedence() < p)
                } else {
                    let strict = matches!(op, BinOp::Sub | BinOp::Div);
                    (a.precedence() < p, b.precedence() < p || (strict && b.precedence() == p))
                };
                wrap(f, a, left_paren)?;
                if *op == BinOp::Pow {
                    write!(f, "^")?;
                } else {
                    write!(f, " {} ", op.symbol())?;
                }
                wrap(f, b, right_paren)
            }
        }
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.lhs, self.rhs)
    }
}

/// Result of evaluating an equation against known measure values.
#[derive(Debug, Clone, PartialEq)]
pub enum EqOutcome {
    Derived(Term, f64),
    Consistent,
    Inconsistent,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Degrees,
    Length,
    Other,
}

fn unit_of(t: &Term) -> Unit {
    match t {
        Term::App(f, args) if f == "measure" && matches!(args.first(), Some(Term::App(k, _)) if k == "angle") => Unit::Degrees,
        Term::App(f, _) if f == "lengthOf" => Unit::Length,
        _ => Unit::Other,
    }
}

pub const CONSISTENCY_TOLERANCE: f64 = 1e-6;

pub fn approx_equal(a: f64, b: f64, rel: f64) -> bool {
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= rel * scale.max(1e-9)
}

/// Solves for the single unbound term, or checks a fully bound equation.
pub fn evaluate_equation(eq: &Equation, lookup: &dyn Fn(&Term) -> Option<f64>) -> EqOutcome {
    let terms = eq.distinct_terms();
    let units: BTreeSet<_> = terms
        .iter()
        .map(unit_of)
        .filter(|u| *u != Unit::Other)
        .map(|u| u == Unit::Degrees)
        .collect();
    if units.len() > 1 {
        return EqOutcome::Inconsistent;
    }
    let unbound: Vec<&Term> = terms.iter().filter(|t| lookup(t).is_none()).collect();
    match unbound.len() {
        0 => {
            let (Some(l), Some(r)) = (eq.lhs.eval(lookup), eq.rhs.eval(lookup)) else {
                return EqOutcome::Inconsistent;
            };
            if l.is_finite() && r.is_finite() && approx_equal(l, r, CONSISTENCY_TOLERANCE) {
                EqOutcome::Consistent
            } else {
                EqOutcome::Inconsistent
            }
        }
        1 => {
            let x = unbound[0].clone();
            match solve_for(eq, &x, lookup) {
                Some(v) if v.is_finite() => EqOutcome::Derived(x, v),
                _ => EqOutcome::Inconsistent,
            }
        }
        _ => EqOutcome::NotApplicable,
    }
}

fn solve_for(eq: &Equation, x: &Term, lookup: &dyn Fn(&Term) -> Option<f64>) -> Option<f64> {
    let count = eq.terms().into_iter().filter(|t| *t == x).count();
    if count == 1 {
        let (side, other) = if eq.lhs.contains(x) { (&eq.lhs, &eq.rhs) } else { (&eq.rhs, &eq.lhs) };
        let v = other.eval(lookup)?;
        if let Some(r) = isolate(side, x, v, lookup) {
            return Some(r);
        }
    }
    linear_solve(eq, x, lookup)
}

fn isolate(e: &Expr, x: &Term, v: f64, lookup: &dyn Fn(&Term) -> Option<f64>) -> Option<f64> {
    match e {
        Expr::Term(t) if t == x => Some(v),
        Expr::Num(_) | Expr::Term(_) => None,
        Expr::Neg(a) => isolate(a, x, -v, lookup),
        Expr::Bin(op, a, b) => {
            let in_left = a.contains(x);
            let (inner, known) = if in_left { (a, b.eval(lookup)?) } else { (b, a.eval(lookup)?) };
            let target = match (op, in_left) {
                (BinOp::Add, _) => v - known,
                (BinOp::Sub, true) => v + known,
                (BinOp::Sub, false) => known - v,
                (BinOp::Mul, _) => {
                    if known == 0.0 {
                        return None;
                    }
                    v / known
                }
                (BinOp::Div, true) => v * known,
                (BinOp::Div, false) => {
                    if v == 0.0 {
                        return None;
                    }
                    known / v
                }
                (BinOp::Pow, true) => {
                    if v < 0.0 || known == 0.0 {
                        return None;
                    }
                    v.powf(1.0 / known)
                }
                (BinOp::Pow, false) => return None,
            };
            isolate(inner, x, target, lookup)
        }
    }
}

/// Fallback for equations linear in `x` where `x` occurs more than once.
fn linear_solve(eq: &Equation, x: &Term, lookup: &dyn Fn(&Term) -> Option<f64>) -> Option<f64> {
    let f = |val: f64| {
        let with = |t: &Term| if t == x { Some(val) } else { lookup(t) };
        Some(eq.lhs.eval(&with)? - eq.rhs.eval(&with)?)
    };
    let (f0, f1, f2) = (f(0.0)?, f(1.0)?, f(2.0)?);
    let slope = f1 - f0;
    if slope == 0.0 || !approx_equal(f2 - f1, slope, 1e-9) {
        return None;
    }
    Some(-f0 / slope)
}
