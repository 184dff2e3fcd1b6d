//! Linear-chain CRF over discourse elements with tags B, I, O.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{extract_mentions, Book, Tag};
use crate::error::{Error, Result};
use crate::eval::{ident_prf, MatchMode};
use crate::features::{conjoin, ident_observations, FeatureOptions, GeometryKeywordTable, IdentObs, MarkerTable};
use crate::optim::{minimize_robust, OptimConfig};

const T: usize = 3;

/// Log-potentials of one book. Position 0 is scored from the start state,
/// position k > 0 by the `[prev][cur]` matrix `trans[k - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeScores {
    pub start: [f64; T],
    pub trans: Vec<[[f64; T]; T]>,
}

impl LatticeScores {
    pub fn zeros(n: usize) -> Self {
        Self {
            start: [0.0; T],
            trans: vec![[[0.0; T]; T]; n.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.trans.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Score of tag `cur` at position `k` after `prev` (ignored at k = 0).
    pub fn score(&self, k: usize, prev: usize, cur: usize) -> f64 {
        if k == 0 {
            self.start[cur]
        } else {
            self.trans[k - 1][prev][cur]
        }
    }

    /// Adds `c` to every entry at position `k`.
    pub fn shift(&mut self, k: usize, c: f64) {
        if k == 0 {
            self.start.iter_mut().for_each(|v| *v += c);
        } else {
            self.trans[k - 1].iter_mut().flatten().for_each(|v| *v += c);
        }
    }

    pub fn path_score(&self, tags: &[Tag]) -> f64 {
        let mut s = 0.0;
        for (k, t) in tags.iter().enumerate() {
            let prev = if k == 0 { 0 } else { tags[k - 1].index() };
            s += self.score(k, prev, t.index());
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.start.iter().chain(self.trans.iter().flatten().flatten()).all(|v| v.is_finite())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn forward(lat: &LatticeScores) -> Vec<[f64; T]> {
    let n = lat.len();
    let mut alpha = vec![[0.0; T]; n];
    alpha[0] = lat.start;
    for k in 1..n {
        for j in 0..T {
            let terms: [f64; T] = std::array::from_fn(|i| alpha[k - 1][i] + lat.trans[k - 1][i][j]);
            alpha[k][j] = log_sum_exp(&terms);
        }
    }
    alpha
}

fn backward(lat: &LatticeScores) -> Vec<[f64; T]> {
    let n = lat.len();
    let mut beta = vec![[0.0; T]; n];
    for k in (0..n - 1).rev() {
        for i in 0..T {
            let terms: [f64; T] = std::array::from_fn(|j| lat.trans[k][i][j] + beta[k + 1][j]);
            beta[k][i] = log_sum_exp(&terms);
        }
    }
    beta
}

/// Log of the sum over all tag sequences of exp(path score).
pub fn log_partition(lat: &LatticeScores) -> f64 {
    let alpha = forward(lat);
    log_sum_exp(&alpha[lat.len() - 1])
}

/// Highest-scoring sequence and its score. Among equal-scoring sequences the
/// one that is smallest in tag order, compared left to right, wins.
pub fn viterbi_with_score(lat: &LatticeScores) -> (Vec<Tag>, f64) {
    let n = lat.len();
    // best[k][j]: best score of positions k+1.. given tag j at k
    let mut best = vec![[0.0; T]; n];
    for k in (0..n - 1).rev() {
        for i in 0..T {
            best[k][i] = (0..T)
                .map(|j| lat.trans[k][i][j] + best[k + 1][j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let pick = |vals: [f64; T]| {
        let mut arg = 0;
        for j in 1..T {
            if vals[j] > vals[arg] {
                arg = j;
            }
        }
        (arg, vals[arg])
    };
    let (first, total) = pick(std::array::from_fn(|j| lat.start[j] + best[0][j]));
    let mut tags = vec![first];
    for k in 1..n {
        let i = tags[k - 1];
        let (j, _) = pick(std::array::from_fn(|j| lat.trans[k - 1][i][j] + best[k][j]));
        tags.push(j);
    }
    (tags.into_iter().map(Tag::from_index).collect(), total)
}

pub fn viterbi(lat: &LatticeScores) -> Vec<Tag> {
    viterbi_with_score(lat).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub log_z: f64,
    /// P(y_k = j).
    pub unary: Vec<[f64; T]>,
    /// P(y_{k-1} = i, y_k = j) at index k - 1.
    pub pairwise: Vec<[[f64; T]; T]>,
}

pub fn marginals(lat: &LatticeScores) -> Marginals {
    let alpha = forward(lat);
    let beta = backward(lat);
    let n = lat.len();
    let log_z = log_sum_exp(&alpha[n - 1]);
    let unary = (0..n)
        .map(|k| std::array::from_fn(|j| (alpha[k][j] + beta[k][j] - log_z).exp()))
        .collect();
    let pairwise = (1..n)
        .map(|k| {
            std::array::from_fn(|i| {
                std::array::from_fn(|j| (alpha[k - 1][i] + lat.trans[k - 1][i][j] + beta[k][j] - log_z).exp())
            })
        })
        .collect();
    Marginals { log_z, unary, pairwise }
}

/// Identification model: weights by feature name plus the resources used to
/// compute features.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentModel {
    pub theta: BTreeMap<String, f64>,
    pub lambda: f64,
    pub keywords: GeometryKeywordTable,
    pub markers: MarkerTable,
}

impl Default for IdentModel {
    fn default() -> Self {
        Self {
            theta: BTreeMap::new(),
            lambda: 0.0,
            keywords: GeometryKeywordTable::default(),
            markers: MarkerTable::default(),
        }
    }
}

const MODEL_HEADER: &str = "geoharvest-ident-model v1";

impl IdentModel {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MODEL_HEADER}\nlambda\t{}\n", self.lambda);
        for k in &self.keywords.keywords {
            let _ = writeln!(s, "keyword\t{k}");
        }
        for m in &self.markers.markers {
            let _ = writeln!(s, "marker\t{m}");
        }
        for (name, w) in &self.theta {
            let _ = writeln!(s, "weight\t{name}\t{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MODEL_HEADER) {
            return Err(Error::Model(format!("expected header `{MODEL_HEADER}`")));
        }
        let mut m = IdentModel {
            keywords: GeometryKeywordTable {
                keywords: Default::default(),
            },
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
                ["lambda", v] => m.lambda = v.parse().map_err(|_| bad())?,
                ["keyword", k] => {
                    m.keywords.keywords.insert(k.to_string());
                }
                ["marker", k] => m.markers.markers.push(k.to_string()),
                ["weight", name, v] => {
                    let w: f64 = v.parse().map_err(|_| bad())?;
                    if !w.is_finite() {
                        return Err(bad());
                    }
                    m.theta.insert(name.to_string(), w);
                }
                _ => return Err(bad()),
            }
        }
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

/// Per-position observations of a whole book.
pub fn observe_book(book: &Book, kw: &GeometryKeywordTable, opts: &FeatureOptions) -> Vec<IdentObs> {
    (0..book.len()).map(|k| ident_observations(book, k, kw, opts)).collect()
}

pub fn lattice_from_obs(obs: &[IdentObs], theta: &BTreeMap<String, f64>) -> LatticeScores {
    let n = obs.len().max(1);
    let mut lat = LatticeScores::zeros(n);
    for (k, o) in obs.iter().enumerate() {
        for cur in Tag::ALL {
            if k == 0 {
                lat.start[cur.index()] = conjoin(o, None, cur).dot(theta);
            } else {
                for prev in Tag::ALL {
                    lat.trans[k - 1][prev.index()][cur.index()] = conjoin(o, Some(prev), cur).dot(theta);
                }
            }
        }
    }
    lat
}

pub fn build_lattice(book: &Book, model: &IdentModel, opts: &FeatureOptions) -> LatticeScores {
    lattice_from_obs(&observe_book(book, &model.keywords, opts), &model.theta)
}

pub fn decode(book: &Book, model: &IdentModel, opts: &FeatureOptions) -> Vec<Tag> {
    if book.is_empty() {
        return Vec::new();
    }
    viterbi(&build_lattice(book, model, opts))
}

/// Feature indices interned for training.
#[derive(Debug, Clone, Default)]
pub struct FeatureIndex {
    pub names: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureIndex {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_dense(&self, w: &BTreeMap<String, f64>) -> Vec<f64> {
        self.names.iter().map(|n| w.get(n).copied().unwrap_or(0.0)).collect()
    }

    pub fn to_sparse(&self, w: &[f64]) -> BTreeMap<String, f64> {
        self.names
            .iter()
            .zip(w)
            .filter(|(_, v)| **v != 0.0)
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }
}

type SparseRow = Vec<(usize, f64)>;

/// A labeled book with every factor's features resolved to indices.
#[derive(Debug, Clone)]
pub struct CompiledBook {
    /// `factors[k][prev * 3 + cur]`; at k = 0 only `prev = 0` is used.
    factors: Vec<Vec<SparseRow>>,
    gold: Vec<Tag>,
}

impl CompiledBook {
    pub fn new(obs: &[IdentObs], gold: &[Tag], index: &mut FeatureIndex) -> Self {
        let factors = obs
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let mut rows = Vec::with_capacity(T * T);
                for prev in Tag::ALL {
                    for cur in Tag::ALL {
                        let p = if k == 0 { None } else { Some(prev) };
                        let fv = conjoin(o, p, cur);
                        rows.push(fv.iter().map(|(name, v)| (index.intern(name), v)).collect());
                    }
                }
                rows
            })
            .collect();
        Self {
            factors,
            gold: gold.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn row(&self, k: usize, prev: usize, cur: usize) -> &SparseRow {
        &self.factors[k][if k == 0 { cur } else { prev * T + cur }]
    }

    pub fn lattice(&self, w: &[f64]) -> LatticeScores {
        let dot = |r: &SparseRow| r.iter().map(|(i, v)| w[*i] * v).sum::<f64>();
        let mut lat = LatticeScores::zeros(self.len());
        for k in 0..self.len() {
            for cur in 0..T {
                if k == 0 {
                    lat.start[cur] = dot(self.row(0, 0, cur));
                } else {
                    for prev in 0..T {
                        lat.trans[k - 1][prev][cur] = dot(self.row(k, prev, cur));
                    }
                }
            }
        }
        lat
    }

    /// Adds `scale` times the feature counts of a tag path to `out`.
    pub fn add_path_counts(&self, tags: &[Tag], scale: f64, out: &mut [f64]) {
        for (k, t) in tags.iter().enumerate() {
            let prev = if k == 0 { 0 } else { tags[k - 1].index() };
            for (i, v) in self.row(k, prev, t.index()) {
                out[*i] += scale * v;
            }
        }
    }

    /// Adds `scale` times the expected feature counts to `out`; returns log Z.
    pub fn add_expected_counts(&self, lat: &LatticeScores, scale: f64, out: &mut [f64]) -> f64 {
        let m = marginals(lat);
        for cur in 0..T {
            for (i, v) in self.row(0, 0, cur) {
                out[*i] += scale * m.unary[0][cur] * v;
            }
        }
        for k in 1..self.len() {
            for prev in 0..T {
                for cur in 0..T {
                    let p = m.pairwise[k - 1][prev][cur];
                    if p == 0.0 {
                        continue;
                    }
                    for (i, v) in self.row(k, prev, cur) {
                        out[*i] += scale * p * v;
                    }
                }
            }
        }
        m.log_z
    }

    /// Negative log-likelihood of the gold tags and its gradient.
    pub fn nll(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let lat = self.lattice(w);
        let log_z = self.add_expected_counts(&lat, 1.0, grad);
        self.add_path_counts(&self.gold, -1.0, grad);
        log_z - lat.path_score(&self.gold)
    }
}

/// Regularized objective over compiled books.
pub fn objective(books: &[CompiledBook], w: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let dim = w.len();
    let (value, mut grad) = books
        .par_iter()
        .map(|b| {
            let mut g = vec![0.0; dim];
            let v = b.nll(w, &mut g);
            (v, g)
        })
        .reduce(
            || (0.0, vec![0.0; dim]),
            |(va, mut ga), (vb, gb)| {
                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                (va + vb, ga)
            },
        );
    let reg: f64 = w.iter().map(|x| x * x).sum();
    grad.iter_mut().zip(w).for_each(|(g, x)| *g += 2.0 * lambda * x);
    (value + lambda * reg, grad)
}

/// A book with gold tags.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBook<'a> {
    pub book: &'a Book,
    pub tags: &'a [Tag],
}

fn compile(labeled: &[LabeledBook<'_>], kw: &GeometryKeywordTable, opts: &FeatureOptions, index: &mut FeatureIndex) -> Result<Vec<CompiledBook>> {
    let obs: Vec<Vec<IdentObs>> = labeled
        .par_iter()
        .map(|l| observe_book(l.book, kw, opts))
        .collect();
    labeled
        .iter()
        .zip(&obs)
        .filter(|(l, _)| !l.book.is_empty())
        .map(|(l, o)| {
            if l.tags.len() != l.book.len() {
                return Err(Error::LengthMismatch {
                    tags: l.tags.len(),
                    elements: l.book.len(),
                });
            }
            Ok(CompiledBook::new(o, l.tags, index))
        })
        .collect()
}

/// Objective value and gradient by feature name at the model's weights.
pub fn nll_gradient(labeled: &[LabeledBook<'_>], model: &IdentModel, opts: &FeatureOptions) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut index = FeatureIndex::default();
    for name in model.theta.keys() {
        index.intern(name);
    }
    let books = compile(labeled, &model.keywords, opts, &mut index)?;
    let w = index.to_dense(&model.theta);
    let (v, g) = objective(&books, &w, model.lambda);
    Ok((v, index.names.iter().cloned().zip(g).filter(|(_, g)| *g != 0.0).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_grid: Vec<f64>,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.01, 0.1, 1.0],
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub lambda: f64,
    pub dev_f1: Option<f64>,
}

fn fit(books: &[CompiledBook], index: &FeatureIndex, lambda: f64, optim: OptimConfig) -> Result<BTreeMap<String, f64>> {
    let f = |w: &[f64]| objective(books, w, lambda);
    let m = minimize_robust(&f, vec![0.0; index.len()], optim).map_err(|e| match e {
        Error::Divergence(v) => Error::Optimizer(format!("identification training diverged (value {v}) at lambda {lambda}")),
        other => Error::Optimizer(format!("identification training failed at lambda {lambda}: {other}")),
    })?;
    Ok(index.to_sparse(&m.x))
}

/// Strict mention F1 of `model` on labeled books.
pub fn strict_f1(labeled: &[LabeledBook<'_>], model: &IdentModel, opts: &FeatureOptions) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for l in labeled {
        pred.extend(extract_mentions(l.book, &decode(l.book, model, opts))?);
        gold.extend(extract_mentions(l.book, l.tags)?);
    }
    Ok(ident_prf(&pred, &gold, MatchMode::Strict).f1)
}

/// Grid search over λ by dev strict F1, then a final fit on train + dev.
pub fn train_identification(
    train: &[LabeledBook<'_>],
    dev: &[LabeledBook<'_>],
    cfg: &TrainConfig,
    opts: &FeatureOptions,
) -> Result<(IdentModel, Vec<GridResult>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("identification training needs at least one book".into()));
    }
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| l.is_nan() || *l < 0.0) {
        return Err(Error::Config("lambda grid must be nonempty and nonnegative".into()));
    }
    let kw = GeometryKeywordTable::default();
    let mut results = Vec::new();
    let chosen = if dev.is_empty() || cfg.lambda_grid.len() == 1 {
        if dev.is_empty() && cfg.lambda_grid.len() > 1 {
            log::warn!("no development books; using lambda {}", cfg.lambda_grid[0]);
        }
        cfg.lambda_grid[0]
    } else {
        let mut index = FeatureIndex::default();
        let books = compile(train, &kw, opts, &mut index)?;
        let mut best = (f64::NEG_INFINITY, cfg.lambda_grid[0]);
        for &lambda in &cfg.lambda_grid {
            let model = IdentModel {
                theta: fit(&books, &index, lambda, cfg.optim)?,
                lambda,
                keywords: kw.clone(),
                ..Default::default()
            };
            let f1 = strict_f1(dev, &model, opts)?;
            log::info!("lambda {lambda}: dev strict F1 {f1:.4}");
            results.push(GridResult { lambda, dev_f1: Some(f1) });
            if f1 > best.0 {
                best = (f1, lambda);
            }
        }
        best.1
    };
    let all: Vec<LabeledBook<'_>> = train.iter().chain(dev).copied().collect();
    let mut index = FeatureIndex::default();
    let books = compile(&all, &kw, opts, &mut index)?;
    let model = IdentModel {
        theta: fit(&books, &index, chosen, cfg.optim)?,
        lambda: chosen,
        keywords: kw,
        ..Default::default()
    };
    if results.is_empty() {
        results.push(GridResult {
            lambda: chosen,
            dev_f1: None,
        });
    }
    Ok((model, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_document, tags_from_mentions, AxiomMention, DocNode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(n: usize, rng: &mut ChaCha8Rng) -> LatticeScores {
        let mut lat = LatticeScores::zeros(n);
        lat.start = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        for m in &mut lat.trans {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
        }
        lat
    }

    fn all_paths(n: usize) -> Vec<Vec<Tag>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p: Vec<Tag>| Tag::ALL.into_iter().map(move |t| [p.clone(), vec![t]].concat()))
                .collect();
        }
        out
    }

    #[test]
    fn zero_lattice_cases() {
        let lat = LatticeScores::zeros(5);
        assert!((log_partition(&lat) - 5.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(viterbi(&lat), vec![Tag::B; 5]);
        let mut one = LatticeScores::zeros(1);
        one.start = [1.0, 0.0, 0.0];
        assert!((log_partition(&one) - (1f64.exp() + 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn rewarding_inside_gives_b_then_i() {
        let mut lat = LatticeScores::zeros(4);
        lat.start[0] = 1.0;
        for m in &mut lat.trans {
            for row in m.iter_mut() {
                row[1] = 1.0;
            }
        }
        assert_eq!(viterbi(&lat), vec![Tag::B, Tag::I, Tag::I, Tag::I]);
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(1..=6);
            let lat = random_lattice(n, &mut rng);
            let scores: Vec<f64> = all_paths(n).iter().map(|p| lat.path_score(p)).collect();
            let lz = log_sum_exp(&scores);
            assert!((log_partition(&lat) - lz).abs() < 1e-10);
            let (path, s) = viterbi_with_score(&lat);
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((s - best).abs() < 1e-10);
            assert!((lat.path_score(&path) - best).abs() < 1e-10);
            let m = marginals(&lat);
            for u in &m.unary {
                assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            assert!((s - m.log_z).exp() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(5, &mut rng);
        let mut shifted = lat.clone();
        shifted.shift(2, 3.7);
        assert_eq!(viterbi(&lat), viterbi(&shifted));
        let (a, b) = (marginals(&lat), marginals(&shifted));
        for (x, y) in a.unary.iter().zip(&b.unary) {
            for j in 0..T {
                assert!((x[j] - y[j]).abs() < 1e-10);
            }
        }
    }

    fn fixture() -> (Book, Vec<Tag>) {
        let mut kids = Vec::new();
        for i in 0..12 {
            if i % 4 == 1 {
                let mut n = DocNode::element("sentence", "the sum of the angles of a triangle is 180");
                n.typography.label = "theorem".into();
                kids.push(n);
            } else {
                kids.push(DocNode::element("sentence", "some filler words here"));
            }
        }
        let book = load_document(Path::new("x"), "x", &DocNode::container("section", kids)).unwrap();
        let mentions: Vec<AxiomMention> = (0..3).map(|j| AxiomMention::new("x", 4 * j + 1, 4 * j + 1)).collect();
        let tags = tags_from_mentions(12, &mentions);
        (book, tags)
    }

    #[test]
    fn single_feature_lattice() {
        let (book, _) = fixture();
        let mut model = IdentModel::default();
        model.theta.insert("thm_label∧B".into(), 2.0);
        let lat = build_lattice(&book, &model, &FeatureOptions::default());
        for prev in 0..T {
            assert_eq!(lat.trans[0][prev], [2.0, 0.0, 0.0]);
            assert_eq!(lat.trans[1][prev], [0.0, 0.0, 0.0]);
        }
        assert_eq!(build_lattice(&book, &IdentModel::default(), &FeatureOptions::default()), LatticeScores::zeros(12));
    }

    #[test]
    fn uniform_nll_and_finite_differences() {
        let (book, tags) = fixture();
        let lb = [LabeledBook { book: &book, tags: &tags }];
        let opts = FeatureOptions::default();
        let (v, g) = nll_gradient(&lb, &IdentModel::default(), &opts).unwrap();
        assert!((v - 12.0 * 3f64.ln()).abs() < 1e-9);
        assert!(!g.is_empty());

        let mut index = FeatureIndex::default();
        let books = compile(&lb, &GeometryKeywordTable::default(), &opts, &mut index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..index.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (_, grad) = objective(&books, &w, 0.3);
        let h = 1e-5;
        for i in 0..w.len() {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (objective(&books, &a, 0.3).0 - objective(&books, &b, 0.3).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "{} {fd} {}", index.names[i], grad[i]);
        }
    }

    #[test]
    fn separable_training_recovers_mentions() {
        let (book, tags) = fixture();
        let lb = [LabeledBook { book: &book, tags: &tags }];
        let cfg = TrainConfig {
            lambda_grid: vec![0.01],
            ..Default::default()
        };
        let (model, grid) = train_identification(&lb, &[], &cfg, &FeatureOptions::default()).unwrap();
        assert_eq!(grid[0].lambda, 0.01);
        assert_eq!(strict_f1(&lb, &model, &FeatureOptions::default()).unwrap(), 1.0);
        let back = IdentModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
    }
}
