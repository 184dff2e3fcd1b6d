//! Cross-book alignment of mentions to a shared ordered slot sequence.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AxiomMention, Book, Corpus, GoldAnnotations};
use crate::crf::FeatureIndex;
use crate::error::{Error, Result};
use crate::eval::{alignment_pair_prf, Prf};
use crate::features::{align_features, FeatureOptions, MentionView};

pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    Hard,
    Soft,
}

impl ConstraintMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => Err(Error::Config(format!("constraint mode must be hard or soft, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        }
    }
}

/// Slot per mention, grouped by book in mention order. Slot 0 means
/// unaligned; slots run 1..=num_slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentState {
    pub slots: Vec<Vec<usize>>,
    pub num_slots: usize,
}

impl AlignmentState {
    pub fn unaligned(sizes: &[usize], num_slots: usize) -> Self {
        Self {
            slots: sizes.iter().map(|&n| vec![0; n]).collect(),
            num_slots,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.slots.iter().map(Vec::len).collect()
    }
}

/// No nonzero slot repeated within a book.
pub fn satisfies_c1(book: &[usize]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    book.iter().filter(|&&s| s != 0).all(|s| seen.insert(*s))
}

/// Pairs i < j with nonzero slots in decreasing order.
pub fn order_violations(book: &[usize]) -> usize {
    let mut n = 0;
    for i in 0..book.len() {
        for j in i + 1..book.len() {
            if book[i] != 0 && book[j] != 0 && book[i] > book[j] {
                n += 1;
            }
        }
    }
    n
}

/// C1 and the ordering constraint in every book, slots in range.
pub fn feasible(state: &AlignmentState) -> bool {
    state.slots.iter().all(|b| {
        b.iter().all(|&s| s <= state.num_slots) && satisfies_c1(b) && {
            let nz: Vec<usize> = b.iter().copied().filter(|&s| s != 0).collect();
            nz.windows(2).all(|w| w[0] < w[1])
        }
    })
}

/// Mention ids per book plus a pairwise score `φ·g` between ids.
pub struct Scorer<'a> {
    pub members: &'a [Vec<usize>],
    pub pair: &'a (dyn Fn(usize, usize) -> f64 + Sync),
    pub mode: ConstraintMode,
    pub nu: f64,
}

impl Scorer<'_> {
    fn check_shape(&self, state: &AlignmentState) -> Result<()> {
        if state.sizes() != self.members.iter().map(Vec::len).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("alignment state does not match the mention sets".into()));
        }
        Ok(())
    }
}

/// Sum of pair scores over cross-book pairs sharing a nonzero slot, minus
/// ν per ordering violation in soft mode.
pub fn alignment_log_score(state: &AlignmentState, sc: &Scorer<'_>) -> Result<f64> {
    sc.check_shape(state)?;
    match sc.mode {
        ConstraintMode::Hard if !feasible(state) => {
            return Err(Error::Constraint("alignment violates a hard constraint".into()))
        }
        ConstraintMode::Soft if !state.slots.iter().all(|b| satisfies_c1(b)) => {
            return Err(Error::Constraint("an axiom appears twice in one book".into()))
        }
        _ => {}
    }
    let mut by_slot: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (b, book) in state.slots.iter().enumerate() {
        for (i, &s) in book.iter().enumerate() {
            if s != 0 {
                by_slot.entry(s).or_default().push(sc.members[b][i]);
            }
        }
    }
    let mut total = 0.0;
    for ids in by_slot.values() {
        for x in 0..ids.len() {
            for y in x + 1..ids.len() {
                total += (sc.pair)(ids[x], ids[y]);
            }
        }
    }
    if sc.mode == ConstraintMode::Soft {
        total -= sc.nu * state.slots.iter().map(|b| order_violations(b) as f64).sum::<f64>();
    }
    Ok(total)
}

/// Candidate slots for mention `i` of book `b` with their unnormalized log
/// conditional probabilities.
pub fn slot_logits(state: &AlignmentState, sc: &Scorer<'_>, b: usize, i: usize) -> Vec<(usize, f64)> {
    let book = &state.slots[b];
    let used: Vec<usize> = book.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &s)| s).collect();
    let (lo, hi) = match sc.mode {
        ConstraintMode::Hard => (
            book[..i].iter().rev().find(|&&s| s != 0).copied().unwrap_or(0),
            book[i + 1..].iter().find(|&&s| s != 0).copied().unwrap_or(state.num_slots + 1),
        ),
        ConstraintMode::Soft => (0, state.num_slots + 1),
    };
    let me = sc.members[b][i];
    let mut out = vec![(0, 0.0)];
    for k in (lo + 1)..hi {
        if used.contains(&k) {
            continue;
        }
        let mut logit = 0.0;
        for (b2, other) in state.slots.iter().enumerate() {
            if b2 == b {
                continue;
            }
            for (j, &s) in other.iter().enumerate() {
                if s == k {
                    logit += (sc.pair)(me, sc.members[b2][j]);
                }
            }
        }
        if sc.mode == ConstraintMode::Soft && sc.nu != 0.0 {
            let before = book[..i].iter().filter(|&&s| s != 0 && s > k).count();
            let after = book[i + 1..].iter().filter(|&&s| s != 0 && s < k).count();
            logit -= sc.nu * (before + after) as f64;
        }
        out.push((k, logit));
    }
    out
}

/// Samples an index from unnormalized log weights; returns it with its
/// normalized log probability.
pub fn sample_log_weights(logits: &[f64], rng: &mut impl Rng) -> (usize, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = ws.iter().sum();
    let mut u = rng.random::<f64>() * z;
    let mut pick = ws.len() - 1;
    for (k, w) in ws.iter().enumerate() {
        if u < *w {
            pick = k;
            break;
        }
        u -= w;
    }
    (pick, (ws[pick] / z).ln())
}

/// Resamples one mention's slot from its conditional. Returns the log
/// probability of the drawn slot.
pub fn gibbs_step(state: &mut AlignmentState, sc: &Scorer<'_>, b: usize, i: usize, rng: &mut impl Rng) -> f64 {
    let cands = slot_logits(state, sc, b, i);
    debug_assert!(!cands.is_empty());
    let logits: Vec<f64> = cands.iter().map(|c| c.1).collect();
    let (k, lp) = sample_log_weights(&logits, rng);
    state.slots[b][i] = cands[k].0;
    lp
}

/// One systematic sweep over every mention of every unclamped book.
pub fn gibbs_sweep(state: &mut AlignmentState, sc: &Scorer<'_>, clamped: &[bool], rng: &mut impl Rng) {
    for b in 0..state.slots.len() {
        if clamped.get(b).copied().unwrap_or(false) {
            continue;
        }
        for i in 0..state.slots[b].len() {
            gibbs_step(state, sc, b, i, rng);
        }
    }
}

/// Greedy start for unclamped books: in book order, each mention takes the
/// occupied feasible slot with the highest positive score, else the lowest
/// unused feasible slot, else 0.
pub fn greedy_init(state: &mut AlignmentState, sc: &Scorer<'_>, clamped: &[bool]) {
    for b in 0..state.slots.len() {
        if clamped.get(b).copied().unwrap_or(false) {
            continue;
        }
        for i in 0..state.slots[b].len() {
            state.slots[b][i] = 0;
        }
        for i in 0..state.slots[b].len() {
            let occupied = |k: usize, st: &AlignmentState| {
                st.slots
                    .iter()
                    .enumerate()
                    .any(|(b2, o)| b2 != b && o.contains(&k))
            };
            let hard = Scorer { mode: ConstraintMode::Hard, ..*sc };
            let cands = slot_logits(state, &hard, b, i);
            let best = cands
                .iter()
                .filter(|(k, _)| *k != 0 && occupied(*k, state))
                .fold(None::<(usize, f64)>, |acc, &(k, l)| match acc {
                    Some((_, bl)) if bl >= l => acc,
                    _ => Some((k, l)),
                });
            let slot = match best {
                Some((k, l)) if l > 0.0 => k,
                _ => cands
                    .iter()
                    .map(|c| c.0)
                    .find(|&k| k != 0 && !occupied(k, state))
                    .unwrap_or(0),
            };
            state.slots[b][i] = slot;
        }
    }
}

/// Mentions sharing a nonzero slot form a cluster, ordered by slot; each
/// unaligned mention is its own cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub slot: usize,
    /// (book index, mention index) pairs.
    pub members: Vec<(usize, usize)>,
}

impl Cluster {
    pub fn is_unaligned(&self) -> bool {
        self.slot == 0
    }
}

pub fn clusters_from_state(state: &AlignmentState) -> Vec<Cluster> {
    let mut by_slot: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut singles = Vec::new();
    for (b, book) in state.slots.iter().enumerate() {
        for (i, &s) in book.iter().enumerate() {
            if s == 0 {
                singles.push(Cluster {
                    slot: 0,
                    members: vec![(b, i)],
                });
            } else {
                by_slot.entry(s).or_default().push((b, i));
            }
        }
    }
    let mut out: Vec<Cluster> = by_slot
        .into_iter()
        .map(|(slot, members)| Cluster { slot, members })
        .collect();
    out.extend(singles);
    out
}

/// Clusters as lists of flat mention indices (books concatenated in order).
pub fn flat_partition(state: &AlignmentState) -> Vec<Vec<usize>> {
    let mut offsets = vec![0];
    for b in &state.slots {
        offsets.push(offsets.last().unwrap() + b.len());
    }
    clusters_from_state(state)
        .into_iter()
        .map(|c| c.members.iter().map(|&(b, i)| offsets[b] + i).collect())
        .collect()
}

/// Pair features between mentions, computed on demand and interned.
pub struct PairTable<'c> {
    books: &'c [Book],
    mentions: Vec<(usize, AxiomMention)>,
    lookup: HashMap<(usize, usize, usize), usize>,
    rows: HashMap<(usize, usize), SparseRow>,
    pub index: FeatureIndex,
    opts: FeatureOptions,
}

impl<'c> PairTable<'c> {
    pub fn new(books: &'c [Book], opts: FeatureOptions) -> Self {
        Self {
            books,
            mentions: Vec::new(),
            lookup: HashMap::new(),
            rows: HashMap::new(),
            index: FeatureIndex::default(),
            opts,
        }
    }

    pub fn books(&self) -> &'c [Book] {
        self.books
    }

    /// Id of a mention of book `b`, registering it if new.
    pub fn intern(&mut self, b: usize, m: &AxiomMention) -> usize {
        let key = (b, m.start, m.end);
        if let Some(&id) = self.lookup.get(&key) {
            return id;
        }
        self.mentions.push((b, m.clone()));
        self.lookup.insert(key, self.mentions.len() - 1);
        self.mentions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn mention(&self, id: usize) -> &(usize, AxiomMention) {
        &self.mentions[id]
    }

    fn key(a: usize, b: usize) -> (usize, usize) {
        (a.min(b), a.max(b))
    }

    /// Computes every missing cross-book pair among `members`.
    pub fn ensure(&mut self, members: &[Vec<usize>]) -> Result<()> {
        let mut missing = Vec::new();
        for (b1, xs) in members.iter().enumerate() {
            for ys in &members[b1 + 1..] {
                for &x in xs {
                    for &y in ys {
                        let k = Self::key(x, y);
                        if !self.rows.contains_key(&k) {
                            missing.push(k);
                        }
                    }
                }
            }
        }
        missing.sort_unstable();
        missing.dedup();
        self.ensure_pairs(&missing)
    }

    /// Computes rows between `id` and all of `others`.
    pub fn ensure_against(&mut self, id: usize, others: &[usize]) -> Result<()> {
        let missing: Vec<(usize, usize)> = others
            .iter()
            .map(|&o| Self::key(id, o))
            .filter(|k| !self.rows.contains_key(k))
            .collect();
        self.ensure_pairs(&missing)
    }

    fn ensure_pairs(&mut self, missing: &[(usize, usize)]) -> Result<()> {
        let books = self.books;
        let mentions = &self.mentions;
        let opts = &self.opts;
        let computed: Vec<Result<_>> = missing
            .par_iter()
            .map(|&(x, y)| {
                let (bx, mx) = &mentions[x];
                let (by, my) = &mentions[y];
                align_features(&MentionView::new(&books[*bx], mx), &MentionView::new(&books[*by], my), opts)
            })
            .collect();
        for (&k, fv) in missing.iter().zip(computed) {
            let fv = fv?;
            let row = fv.iter().map(|(n, v)| (self.index.intern(n), v)).collect();
            self.rows.insert(k, row);
        }
        Ok(())
    }

    pub fn row(&self, a: usize, b: usize) -> Option<&SparseRow> {
        self.rows.get(&Self::key(a, b))
    }

    /// Dense pair-score matrix over all registered ids for weights `w`
    /// (indexed like `self.index`); pairs without features score 0.
    pub fn score_matrix(&self, w: &[f64]) -> ScoreMatrix {
        let n = self.mentions.len();
        let mut s = vec![0.0; n * n];
        for (&(a, b), row) in &self.rows {
            let v: f64 = row.iter().map(|(i, x)| w.get(*i).copied().unwrap_or(0.0) * x).sum();
            s[a * n + b] = v;
            s[b * n + a] = v;
        }
        ScoreMatrix { n, s }
    }

    /// Σ g over cross-book pairs sharing a nonzero slot.
    pub fn state_counts(&self, state: &AlignmentState, members: &[Vec<usize>]) -> Vec<f64> {
        let mut out = vec![0.0; self.index.len()];
        self.add_state_counts(state, members, 1.0, &mut out);
        out
    }

    pub fn add_state_counts(&self, state: &AlignmentState, members: &[Vec<usize>], scale: f64, out: &mut Vec<f64>) {
        if out.len() < self.index.len() {
            out.resize(self.index.len(), 0.0);
        }
        let mut by_slot: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (b, book) in state.slots.iter().enumerate() {
            for (i, &s) in book.iter().enumerate() {
                if s != 0 {
                    by_slot.entry(s).or_default().push(members[b][i]);
                }
            }
        }
        for ids in by_slot.values() {
            for x in 0..ids.len() {
                for y in x + 1..ids.len() {
                    if let Some(row) = self.row(ids[x], ids[y]) {
                        for (i, v) in row {
                            out[*i] += scale * v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    n: usize,
    s: Vec<f64>,
}

impl ScoreMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        if a < self.n && b < self.n {
            self.s[a * self.n + b]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub burn_in: usize,
    pub num_samples: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burn_in: 5,
            num_samples: 10,
            thinning: 1,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.thinning == 0 {
            return Err(Error::Config("sampler needs num_samples and thinning ≥ 1".into()));
        }
        Ok(())
    }
}

/// Average of Σ g over retained Gibbs samples; books flagged in `clamped`
/// keep their slots. `state` is advanced in place.
pub fn expected_pair_features(
    state: &mut AlignmentState,
    sc: &Scorer<'_>,
    table: &PairTable<'_>,
    clamped: &[bool],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut acc = vec![0.0; table.index.len()];
    if clamped.len() == state.slots.len() && clamped.iter().all(|c| *c) {
        table.add_state_counts(state, sc.members, 1.0, &mut acc);
        return acc;
    }
    for _ in 0..cfg.burn_in {
        gibbs_sweep(state, sc, clamped, rng);
    }
    let scale = 1.0 / cfg.num_samples as f64;
    for _ in 0..cfg.num_samples {
        for _ in 0..cfg.thinning {
            gibbs_sweep(state, sc, clamped, rng);
        }
        table.add_state_counts(state, sc.members, scale, &mut acc);
    }
    acc
}

/// Alignment weights and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignModel {
    pub phi: BTreeMap<String, f64>,
    pub mu: f64,
    pub nu: f64,
    pub mode: ConstraintMode,
    /// Slot count; 0 picks the default of twice the largest book.
    pub num_slots: usize,
}

impl Default for AlignModel {
    fn default() -> Self {
        Self {
            phi: BTreeMap::new(),
            mu: 0.01,
            nu: 1.0,
            mode: ConstraintMode::Soft,
            num_slots: 0,
        }
    }
}

const MODEL_HEADER: &str = "geoharvest-align-model v1";

impl AlignModel {
    pub fn slots_for(&self, sizes: &[usize]) -> usize {
        if self.num_slots > 0 {
            self.num_slots
        } else {
            default_num_slots(sizes)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MODEL_HEADER}\nmu\t{}\nnu\t{}\nmode\t{}\nslots\t{}\n",
            self.mu,
            self.nu,
            self.mode.as_str(),
            self.num_slots
        );
        for (n, w) in &self.phi {
            let _ = writeln!(s, "weight\t{n}\t{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MODEL_HEADER) {
            return Err(Error::Model(format!("expected header `{MODEL_HEADER}`")));
        }
        let mut m = AlignModel::default();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Model(format!("line {}: malformed `{line}`", i + 2));
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                ["mu", v] => m.mu = v.parse().map_err(|_| bad())?,
                ["nu", v] => m.nu = v.parse().map_err(|_| bad())?,
                ["mode", v] => m.mode = ConstraintMode::parse(v)?,
                ["slots", v] => m.num_slots = v.parse().map_err(|_| bad())?,
                ["weight", n, v] => {
                    let w: f64 = v.parse().map_err(|_| bad())?;
                    if !w.is_finite() {
                        return Err(bad());
                    }
                    m.phi.insert(n.to_string(), w);
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

pub fn default_num_slots(sizes: &[usize]) -> usize {
    (2 * sizes.iter().copied().max().unwrap_or(0)).max(1)
}

/// Drops the fewest aligned mentions (to slot 0) so that each book's slots
/// increase: keeps a longest increasing subsequence.
pub fn project_feasible(state: &AlignmentState) -> AlignmentState {
    let mut out = state.clone();
    for book in &mut out.slots {
        let idx: Vec<usize> = (0..book.len()).filter(|&i| book[i] != 0).collect();
        let vals: Vec<usize> = idx.iter().map(|&i| book[i]).collect();
        let n = vals.len();
        let mut len = vec![1usize; n];
        let mut prev = vec![usize::MAX; n];
        for j in 0..n {
            for i in 0..j {
                if vals[i] < vals[j] && len[i] + 1 > len[j] {
                    len[j] = len[i] + 1;
                    prev[j] = i;
                }
            }
        }
        let mut keep = vec![false; n];
        if let Some(mut j) = (0..n).max_by_key(|&j| (len[j], std::cmp::Reverse(j))) {
            loop {
                keep[j] = true;
                if prev[j] == usize::MAX {
                    break;
                }
                j = prev[j];
            }
        }
        for (t, &i) in idx.iter().enumerate() {
            if !keep[t] {
                book[i] = 0;
            }
        }
    }
    out
}

/// Mentions of a set of books, registered in a pair table, with optional
/// gold slots.
pub struct AlignData<'c> {
    pub table: PairTable<'c>,
    pub members: Vec<Vec<usize>>,
    pub mentions: Vec<Vec<AxiomMention>>,
    pub gold: Option<AlignmentState>,
}

impl<'c> AlignData<'c> {
    /// `gold_clusters` lists, per global axiom in order, (book index,
    /// mention index) members; cluster c maps to slot c + 1.
    pub fn new(
        books: &'c [Book],
        mentions: Vec<Vec<AxiomMention>>,
        gold_clusters: Option<&[Vec<(usize, usize)>]>,
        opts: FeatureOptions,
    ) -> Result<Self> {
        if books.len() != mentions.len() {
            return Err(Error::InvalidArgument("one mention list per book required".into()));
        }
        let mut table = PairTable::new(books, opts);
        let members: Vec<Vec<usize>> = mentions
            .iter()
            .enumerate()
            .map(|(b, ms)| ms.iter().map(|m| table.intern(b, m)).collect())
            .collect();
        table.ensure(&members)?;
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let gold = gold_clusters.map(|cl| {
            let u = default_num_slots(&sizes).max(cl.len());
            let mut st = AlignmentState::unaligned(&sizes, u);
            for (c, ms) in cl.iter().enumerate() {
                for &(b, i) in ms {
                    st.slots[b][i] = c + 1;
                }
            }
            st
        });
        Ok(Self {
            table,
            members,
            mentions,
            gold,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Gold mentions of every book with their gold clusters.
    pub fn from_gold(corpus: &'c Corpus, gold: &GoldAnnotations, opts: FeatureOptions) -> Result<Self> {
        let mentions: Vec<Vec<AxiomMention>> = corpus.books.iter().map(|b| gold.mentions_for(&b.book_id)).collect();
        let mut clusters = Vec::new();
        for c in &gold.clusters {
            let mut members = Vec::new();
            for &g in c {
                let gm = gold.mentions[g].to_mention();
                let Some(b) = corpus.book_index(&gm.book_id) else { continue };
                if let Some(i) = mentions[b].iter().position(|m| m.same_span(&gm)) {
                    members.push((b, i));
                }
            }
            clusters.push(members);
        }
        Self::new(&corpus.books, mentions, Some(&clusters), opts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignTrainConfig {
    pub mu_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    pub mode: ConstraintMode,
    pub max_iters: usize,
    pub tolerance: f64,
    pub learning_rate: f64,
    pub sampler: SamplerConfig,
    /// Sweeps when decoding.
    pub decode_sweeps: usize,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            mu_grid: vec![0.01],
            nu_grid: vec![5.0],
            mode: ConstraintMode::Soft,
            max_iters: 100,
            tolerance: 1e-4,
            learning_rate: 0.5,
            sampler: SamplerConfig::default(),
            decode_sweeps: 30,
        }
    }
}

fn gold_for_mode(gold: &AlignmentState, mode: ConstraintMode) -> AlignmentState {
    match mode {
        ConstraintMode::Hard => project_feasible(gold),
        ConstraintMode::Soft => gold.clone(),
    }
}

/// Stochastic gradient ascent on the conditional likelihood of the gold
/// slots of the books flagged in `train`, with a persistent free chain.
pub fn fit_alignment(
    data: &AlignData<'_>,
    train: &[bool],
    mu: f64,
    nu: f64,
    cfg: &AlignTrainConfig,
) -> Result<AlignModel> {
    cfg.sampler.validate()?;
    let gold = data
        .gold
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("alignment training needs gold clusters".into()))?;
    let n_train = train.iter().filter(|t| **t).count();
    if n_train < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment training needs at least two books with gold alignments, got {n_train}"
        )));
    }
    let gold = gold_for_mode(gold, cfg.mode);
    // Books outside the training set take no part.
    let members: Vec<Vec<usize>> = data
        .members
        .iter()
        .zip(train)
        .map(|(m, &t)| if t { m.clone() } else { Vec::new() })
        .collect();
    let mut gold_train = gold.clone();
    for (b, &t) in train.iter().enumerate() {
        if !t {
            gold_train.slots[b].clear();
        }
    }
    let dim = data.table.index.len();
    let clamped = data.table.state_counts(&gold_train, &members);
    let norm = clamped.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let mut w = vec![0.0; dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let mut free = gold_train.clone();
    let no_clamp = vec![false; members.len()];
    for it in 0..cfg.max_iters {
        let sm = data.table.score_matrix(&w);
        let pair = |a: usize, b: usize| sm.get(a, b);
        let sc = Scorer {
            members: &members,
            pair: &pair,
            mode: cfg.mode,
            nu,
        };
        let expected = expected_pair_features(&mut free, &sc, &data.table, &no_clamp, &cfg.sampler, &mut rng);
        let grad: Vec<f64> = (0..dim).map(|i| clamped[i] - expected[i] - 2.0 * mu * w[i]).collect();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / norm;
        if !gnorm.is_finite() {
            return Err(Error::Optimizer(format!("alignment training diverged at mu {mu}")));
        }
        if gnorm < cfg.tolerance {
            break;
        }
        // Proximal step on the L2 term.
        let eta = cfg.learning_rate / (1.0 + it as f64 / 10.0) / norm;
        for i in 0..dim {
            w[i] = (w[i] + eta * (clamped[i] - expected[i])) / (1.0 + 2.0 * eta * mu);
        }
    }
    Ok(AlignModel {
        phi: data.table.index.to_sparse(&w),
        mu,
        nu,
        mode: cfg.mode,
        num_slots: gold.num_slots,
    })
}

/// Highest-scoring state visited by a Gibbs chain started from the greedy
/// initialization. Books flagged in `clamped` keep the slots of `init`.
pub fn decode_alignment(
    sc: &Scorer<'_>,
    init: AlignmentState,
    clamped: &[bool],
    sweeps: usize,
    seed: u64,
) -> Result<AlignmentState> {
    let mut state = init;
    greedy_init(&mut state, sc, clamped);
    let mut best = (alignment_log_score(&state, sc)?, state.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..sweeps {
        gibbs_sweep(&mut state, sc, clamped, &mut rng);
        let s = alignment_log_score(&state, sc)?;
        if s > best.0 {
            best = (s, state.clone());
        }
    }
    Ok(best.1)
}

/// Decodes every book under `model`.
pub fn align_all(data: &AlignData<'_>, model: &AlignModel, sweeps: usize, seed: u64) -> Result<AlignmentState> {
    let w = data.table.index.to_dense(&model.phi);
    let sm = data.table.score_matrix(&w);
    let pair = |a: usize, b: usize| sm.get(a, b);
    let sc = Scorer {
        members: &data.members,
        pair: &pair,
        mode: model.mode,
        nu: model.nu,
    };
    let sizes = data.sizes();
    let init = AlignmentState::unaligned(&sizes, model.slots_for(&sizes));
    decode_alignment(&sc, init, &vec![false; sizes.len()], sweeps, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignGridResult {
    pub mu: f64,
    pub nu: f64,
    pub dev_f1: Option<f64>,
}

fn dev_pair_f1(data: &AlignData<'_>, model: &AlignModel, train: &[bool], dev: &[bool], cfg: &AlignTrainConfig) -> Result<Prf> {
    let gold = data.gold.as_ref().expect("gold checked");
    let gold_m = gold_for_mode(gold, model.mode);
    let members: Vec<Vec<usize>> = data
        .members
        .iter()
        .enumerate()
        .map(|(b, m)| if train[b] || dev[b] { m.clone() } else { Vec::new() })
        .collect();
    let w = data.table.index.to_dense(&model.phi);
    let sm = data.table.score_matrix(&w);
    let pair = |a: usize, b: usize| sm.get(a, b);
    let sc = Scorer {
        members: &members,
        pair: &pair,
        mode: model.mode,
        nu: model.nu,
    };
    let mut init = gold_m.clone();
    for b in 0..members.len() {
        if !train[b] {
            init.slots[b] = vec![0; members[b].len()];
        }
    }
    let decoded = decode_alignment(&sc, init, train, cfg.decode_sweeps, cfg.sampler.seed)?;
    let mut gold_used = gold.clone();
    for (m, g) in members.iter().zip(gold_used.slots.iter_mut()) {
        if m.is_empty() {
            g.clear();
        }
    }
    alignment_pair_prf(&flat_partition(&decoded), &flat_partition(&gold_used))
}

/// Grid search of μ and ν on dev pairwise F1 (training books clamped at
/// gold, dev books decoded), then a final fit on train + dev.
pub fn train_alignment(
    data: &AlignData<'_>,
    train: &[bool],
    dev: &[bool],
    cfg: &AlignTrainConfig,
) -> Result<(AlignModel, Vec<AlignGridResult>)> {
    if cfg.mu_grid.is_empty() || cfg.nu_grid.is_empty() {
        return Err(Error::Config("mu and nu grids must be nonempty".into()));
    }
    let nus: Vec<f64> = match cfg.mode {
        ConstraintMode::Hard => vec![cfg.nu_grid[0]],
        ConstraintMode::Soft => cfg.nu_grid.clone(),
    };
    let has_dev = dev.iter().any(|d| *d) && data.gold.is_some();
    let mut results = Vec::new();
    let mut chosen = (cfg.mu_grid[0], nus[0]);
    if has_dev && cfg.mu_grid.len() * nus.len() > 1 {
        let mut best = f64::NEG_INFINITY;
        for &mu in &cfg.mu_grid {
            for &nu in &nus {
                let model = fit_alignment(data, train, mu, nu, cfg)?;
                let f1 = dev_pair_f1(data, &model, train, dev, cfg)?.f1;
                log::info!("mu {mu} nu {nu}: dev pairwise F1 {f1:.4}");
                results.push(AlignGridResult { mu, nu, dev_f1: Some(f1) });
                if f1 > best {
                    best = f1;
                    chosen = (mu, nu);
                }
            }
        }
    } else if !has_dev && cfg.mu_grid.len() * nus.len() > 1 {
        log::warn!("no development books; using mu {} nu {}", chosen.0, chosen.1);
    }
    let both: Vec<bool> = train.iter().zip(dev).map(|(a, b)| *a || *b).collect();
    let model = fit_alignment(data, &both, chosen.0, chosen.1, cfg)?;
    if results.is_empty() {
        results.push(AlignGridResult {
            mu: chosen.0,
            nu: chosen.1,
            dev_f1: None,
        });
    }
    Ok((model, results))
}

/// Lines `book_id  start  end  slot`.
pub fn format_alignment(book_ids: &[String], mentions: &[Vec<AxiomMention>], state: &AlignmentState) -> String {
    let mut s = String::new();
    for (b, ms) in mentions.iter().enumerate() {
        for (i, m) in ms.iter().enumerate() {
            let _ = writeln!(s, "{}  {}  {}  {}", book_ids[b], m.start, m.end, state.slots[b][i]);
        }
    }
    s
}

/// Parses alignment lines into (book id, mention, slot) triples.
pub fn parse_alignment(text: &str) -> Result<Vec<(String, AxiomMention, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("alignment line {}: `{line}`", i + 1));
        if parts.len() != 4 {
            return Err(bad());
        }
        let start: usize = parts[1].parse().map_err(|_| bad())?;
        let end: usize = parts[2].parse().map_err(|_| bad())?;
        let slot: usize = parts[3].parse().map_err(|_| bad())?;
        out.push((parts[0].to_string(), AxiomMention::new(parts[0], start, end), slot));
    }
    Ok(out)
}
