//! Joint identification and alignment: block Metropolis-Hastings moves over
//! tags, Gibbs sweeps over slots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    alignment_log_score, feasible, gibbs_step, gibbs_sweep, greedy_init, sample_log_weights, slot_logits,
    AlignModel, AlignmentState, ConstraintMode, PairTable, ScoreMatrix, Scorer,
};
use crate::corpus::{extract_mentions, AxiomMention, Book, Tag};
use crate::crf::{build_lattice, decode, CompiledBook, FeatureIndex, IdentModel, LatticeScores};
use crate::error::{Error, Result};
use crate::features::FeatureOptions;

pub type Span = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MoveKind {
    Update,
    Delete,
    Introduce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveConfig {
    /// Longest mention an introduce move may create.
    pub max_len: usize,
    /// How far an update may move each boundary.
    pub window: usize,
    /// Exact MH ratio; false accepts with min(1, exp(Δ alignment score)).
    pub exact: bool,
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self {
            max_len: 10,
            window: 2,
            exact: true,
        }
    }
}

/// Mentions per book as sorted disjoint spans, their pair-table ids, and the
/// slot assignment over them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointState {
    pub spans: Vec<Vec<Span>>,
    pub members: Vec<Vec<usize>>,
    pub align: AlignmentState,
}

impl JointState {
    pub fn tags(&self, b: usize, n: usize) -> Vec<Tag> {
        tags_of(&self.spans[b], n)
    }
}

pub fn tags_of(spans: &[Span], n: usize) -> Vec<Tag> {
    let mut t = vec![Tag::O; n];
    for &(s, e) in spans {
        t[s] = Tag::B;
        for x in &mut t[s + 1..=e] {
            *x = Tag::I;
        }
    }
    t
}

/// Rewrites an `I` that does not continue a mention as `B`.
pub fn normalize_tags(tags: &[Tag]) -> Vec<Tag> {
    let mut out = tags.to_vec();
    for k in 0..out.len() {
        if out[k] == Tag::I && (k == 0 || out[k - 1] == Tag::O) {
            out[k] = Tag::B;
        }
    }
    out
}

pub fn spans_of(tags: &[Tag]) -> Vec<Span> {
    let tags = normalize_tags(tags);
    let mut out: Vec<Span> = Vec::new();
    for (k, t) in tags.iter().enumerate() {
        match t {
            Tag::B => out.push((k, k)),
            Tag::I => out.last_mut().expect("normalized").1 = k,
            Tag::O => {}
        }
    }
    out
}

/// Maximal runs of elements outside every mention.
pub fn gaps(spans: &[Span], n: usize) -> Vec<Span> {
    let mut out = Vec::new();
    let mut next = 0;
    for &(s, e) in spans {
        if s > next {
            out.push((next, s - 1));
        }
        next = e + 1;
    }
    if next < n {
        out.push((next, n - 1));
    }
    out
}

pub fn deletable(spans: &[Span], max_len: usize) -> Vec<usize> {
    (0..spans.len()).filter(|&i| spans[i].1 - spans[i].0 < max_len).collect()
}

pub fn applicable_kinds(spans: &[Span], n: usize, cfg: &MoveConfig) -> Vec<MoveKind> {
    let mut k = Vec::new();
    if !spans.is_empty() {
        k.push(MoveKind::Update);
    }
    if !deletable(spans, cfg.max_len).is_empty() {
        k.push(MoveKind::Delete);
    }
    if !gaps(spans, n).is_empty() {
        k.push(MoveKind::Introduce);
    }
    k
}

pub fn introduce_candidates(gap: Span, max_len: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for s in gap.0..=gap.1 {
        for e in s..=gap.1.min(s + max_len - 1) {
            out.push((s, e));
        }
    }
    out
}

/// Boundary shifts of mention `i` within `window`, not touching neighbours.
pub fn update_candidates(spans: &[Span], i: usize, n: usize, window: usize) -> Vec<Span> {
    let (s, e) = spans[i];
    let lo = if i == 0 { 0 } else { spans[i - 1].1 + 1 };
    let hi = if i + 1 == spans.len() { n - 1 } else { spans[i + 1].0 - 1 };
    let mut out = Vec::new();
    for s2 in s.saturating_sub(window).max(lo)..=(s + window).min(hi) {
        for e2 in e.saturating_sub(window).max(s2)..=(e + window).min(hi) {
            out.push((s2, e2));
        }
    }
    out
}

/// Log-probabilities of placing a mention at each candidate inside
/// `region` (cleared to O first), scored by the identification lattice.
pub fn candidate_log_probs(lat: &LatticeScores, tags: &[Tag], region: Span, cands: &[Span]) -> Vec<f64> {
    let n = tags.len();
    let logits: Vec<f64> = cands
        .iter()
        .map(|&(cs, ce)| {
            let at = |k: usize| {
                if (cs..=ce).contains(&k) {
                    if k == cs {
                        Tag::B
                    } else {
                        Tag::I
                    }
                } else if (region.0..=region.1).contains(&k) {
                    Tag::O
                } else {
                    tags[k]
                }
            };
            let last = (region.1 + 1).min(n - 1);
            (region.0..=last)
                .map(|k| {
                    let prev = if k == 0 { 0 } else { at(k - 1).index() };
                    lat.score(k, prev, at(k).index())
                })
                .sum()
        })
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - z).collect()
}

fn pick(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

fn sample_from_log_probs(lp: &[f64], rng: &mut impl Rng) -> usize {
    sample_log_weights(lp, rng).0
}

/// Scoring context shared by moves: lattices per book, the pair table and
/// alignment weights.
pub struct JointContext<'c> {
    pub lattices: Vec<LatticeScores>,
    pub table: PairTable<'c>,
    pub phi: BTreeMap<String, f64>,
    pub mode: ConstraintMode,
    pub nu: f64,
    pub num_slots: usize,
    pub moves: MoveConfig,
    scores: ScoreMatrix,
    scored_rows: usize,
    scored_len: usize,
}

impl<'c> JointContext<'c> {
    pub fn new(
        lattices: Vec<LatticeScores>,
        table: PairTable<'c>,
        align: &AlignModel,
        num_slots: usize,
        moves: MoveConfig,
    ) -> Self {
        let w = table.index.to_dense(&align.phi);
        let scores = table.score_matrix(&w);
        let (scored_rows, scored_len) = (table.num_rows(), table.len());
        Self {
            lattices,
            table,
            phi: align.phi.clone(),
            mode: align.mode,
            nu: align.nu,
            num_slots,
            moves,
            scores,
            scored_rows,
            scored_len,
        }
    }

    pub fn set_phi(&mut self, phi: BTreeMap<String, f64>) {
        self.phi = phi;
        self.scored_rows = usize::MAX;
        self.refresh();
    }

    fn refresh(&mut self) {
        if self.table.num_rows() != self.scored_rows || self.table.len() != self.scored_len {
            let w = self.table.index.to_dense(&self.phi);
            self.scores = self.table.score_matrix(&w);
            self.scored_rows = self.table.num_rows();
            self.scored_len = self.table.len();
        }
    }

    /// Registers a span of book `b` and its pair features against the
    /// current mentions of other books.
    pub fn intern(&mut self, st_members: &[Vec<usize>], b: usize, span: Span) -> Result<usize> {
        let id = self.table.intern(b, &AxiomMention::new(self.table.books()[b].book_id.clone(), span.0, span.1));
        let others: Vec<usize> = st_members
            .iter()
            .enumerate()
            .filter(|(b2, _)| *b2 != b)
            .flat_map(|(_, m)| m.iter().copied())
            .collect();
        self.table.ensure_against(id, &others)?;
        self.refresh();
        Ok(id)
    }

    pub fn with_scorer<R>(&self, members: &[Vec<usize>], f: impl FnOnce(&Scorer<'_>) -> R) -> R {
        let scores = &self.scores;
        let pair = |a: usize, b: usize| scores.get(a, b);
        let sc = Scorer {
            members,
            pair: &pair,
            mode: self.mode,
            nu: self.nu,
        };
        f(&sc)
    }

    pub fn ident_score(&self, st: &JointState) -> f64 {
        self.lattices
            .iter()
            .enumerate()
            .map(|(b, lat)| lat.path_score(&st.tags(b, lat.len())))
            .sum()
    }

    pub fn align_score(&self, st: &JointState) -> Result<f64> {
        self.with_scorer(&st.members, |sc| alignment_log_score(&st.align, sc))
    }

    /// Identification path score plus alignment score.
    pub fn joint_log_score(&self, st: &JointState) -> Result<f64> {
        validate_state(st, &self.lattices, self.mode)?;
        Ok(self.ident_score(st) + self.align_score(st)?)
    }

    /// State from tag sequences with every mention unaligned.
    pub fn state_from_tags(&mut self, tags: &[Vec<Tag>]) -> Result<JointState> {
        let spans: Vec<Vec<Span>> = tags.iter().map(|t| spans_of(t)).collect();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); spans.len()];
        for (b, sp) in spans.iter().enumerate() {
            for &s in sp {
                let books = self.table.books();
                let id = self.table.intern(b, &AxiomMention::new(books[b].book_id.clone(), s.0, s.1));
                members[b].push(id);
            }
        }
        self.table.ensure(&members)?;
        self.refresh();
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        Ok(JointState {
            spans,
            members,
            align: AlignmentState::unaligned(&sizes, self.num_slots),
        })
    }
}

/// Checks one tag per element, disjoint sorted spans, agreement of spans
/// and slots, and the hard constraints in hard mode.
pub fn validate_state(st: &JointState, lattices: &[LatticeScores], mode: ConstraintMode) -> Result<()> {
    if st.spans.len() != lattices.len() || st.members.len() != st.spans.len() || st.align.slots.len() != st.spans.len() {
        return Err(Error::Constraint("joint state does not cover every book".into()));
    }
    for (b, sp) in st.spans.iter().enumerate() {
        let n = lattices[b].len();
        let mut next = 0;
        for &(s, e) in sp {
            if s < next || e < s || e >= n {
                return Err(Error::Constraint(format!("book {b}: overlapping or out-of-range mention ({s}, {e})")));
            }
            next = e + 1;
        }
        if st.members[b].len() != sp.len() || st.align.slots[b].len() != sp.len() {
            return Err(Error::Constraint(format!("book {b}: mentions and alignment disagree")));
        }
    }
    if mode == ConstraintMode::Hard && !feasible(&st.align) {
        return Err(Error::Constraint("alignment violates a hard constraint".into()));
    }
    Ok(())
}

/// Outcome of one MH proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct MoveOutcome {
    pub kind: MoveKind,
    pub accepted: bool,
    /// log Q(new | old) - log Q(old | new).
    pub log_ratio: f64,
}

/// One block move on book `b`, accepted or rejected in place.
pub fn mh_step(st: &mut JointState, ctx: &mut JointContext<'_>, b: usize, rng: &mut impl Rng) -> Result<Option<MoveOutcome>> {
    let cfg = ctx.moves;
    let n = ctx.lattices[b].len();
    let spans = st.spans[b].clone();
    let kinds = applicable_kinds(&spans, n, &cfg);
    if kinds.is_empty() {
        return Ok(None);
    }
    let kind = kinds[pick(rng, kinds.len())];
    let tags = tags_of(&spans, n);
    let mut log_qf = -(kinds.len() as f64).ln();
    let log_qb;
    let mut next = st.clone();
    match kind {
        MoveKind::Delete => {
            let del = deletable(&spans, cfg.max_len);
            let t = del[pick(rng, del.len())];
            log_qf -= (del.len() as f64).ln();
            let removed = spans[t];
            let z = st.align.slots[b][t];
            let lp_z = ctx.with_scorer(&st.members, |sc| {
                let cands = slot_logits(&st.align, sc, b, t);
                let logits: Vec<f64> = cands.iter().map(|c| c.1).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lz = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                cands.iter().find(|c| c.0 == z).map(|c| c.1 - lz)
            });
            let lp_z = lp_z.ok_or_else(|| Error::Constraint("current slot is not a candidate".into()))?;
            next.spans[b].remove(t);
            next.members[b].remove(t);
            next.align.slots[b].remove(t);
            let new_tags = tags_of(&next.spans[b], n);
            let gaps_b = gaps(&next.spans[b], n);
            let gap = *gaps_b
                .iter()
                .find(|g| g.0 <= removed.0 && removed.1 <= g.1)
                .expect("deleted span lies in a gap");
            let cands = introduce_candidates(gap, cfg.max_len);
            let lp = candidate_log_probs(&ctx.lattices[b], &new_tags, gap, &cands);
            let q = lp[cands.iter().position(|c| *c == removed).expect("span is a candidate")];
            let kinds_b = applicable_kinds(&next.spans[b], n, &cfg);
            log_qb = -(kinds_b.len() as f64).ln() - (gaps_b.len() as f64).ln() + q + lp_z;
        }
        MoveKind::Introduce => {
            let gs = gaps(&spans, n);
            let g = gs[pick(rng, gs.len())];
            log_qf -= (gs.len() as f64).ln();
            let cands = introduce_candidates(g, cfg.max_len);
            let lp = candidate_log_probs(&ctx.lattices[b], &tags, g, &cands);
            let c = sample_from_log_probs(&lp, rng);
            log_qf += lp[c];
            let span = cands[c];
            let i = spans.iter().filter(|s| s.0 < span.0).count();
            let id = ctx.intern(&st.members, b, span)?;
            next.spans[b].insert(i, span);
            next.members[b].insert(i, id);
            next.align.slots[b].insert(i, 0);
            let members = next.members.clone();
            let lp_z = ctx.with_scorer(&members, |sc| gibbs_step(&mut next.align, sc, b, i, rng));
            log_qf += lp_z;
            let kinds_b = applicable_kinds(&next.spans[b], n, &cfg);
            let del_b = deletable(&next.spans[b], cfg.max_len);
            log_qb = -(kinds_b.len() as f64).ln() - (del_b.len() as f64).ln();
        }
        MoveKind::Update => {
            let t = pick(rng, spans.len());
            log_qf -= (spans.len() as f64).ln();
            let cands = update_candidates(&spans, t, n, cfg.window);
            let region = region_of(spans[t], &cands);
            let lp = candidate_log_probs(&ctx.lattices[b], &tags, region, &cands);
            let c = sample_from_log_probs(&lp, rng);
            log_qf += lp[c];
            let span = cands[c];
            let id = ctx.intern(&st.members, b, span)?;
            next.spans[b][t] = span;
            next.members[b][t] = id;
            let new_tags = tags_of(&next.spans[b], n);
            let back = update_candidates(&next.spans[b], t, n, cfg.window);
            let back_region = region_of(span, &back);
            let blp = candidate_log_probs(&ctx.lattices[b], &new_tags, back_region, &back);
            let q = blp[back.iter().position(|c| *c == spans[t]).expect("update is reversible")];
            let kinds_b = applicable_kinds(&next.spans[b], n, &cfg);
            log_qb = -(kinds_b.len() as f64).ln() - (next.spans[b].len() as f64).ln() + q;
        }
    }
    let lat = &ctx.lattices[b];
    let d_ai = lat.path_score(&tags_of(&next.spans[b], n)) - lat.path_score(&tags);
    let d_aa = ctx.align_score(&next)? - ctx.align_score(st)?;
    let log_ratio = log_qf - log_qb;
    let log_alpha = if cfg.exact { d_ai + d_aa - log_ratio } else { d_aa };
    let accepted = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
    if accepted {
        *st = next;
    }
    Ok(Some(MoveOutcome {
        kind,
        accepted,
        log_ratio,
    }))
}

fn region_of(old: Span, cands: &[Span]) -> Span {
    let lo = cands.iter().map(|c| c.0).min().unwrap_or(old.0).min(old.0);
    let hi = cands.iter().map(|c| c.1).max().unwrap_or(old.1).max(old.1);
    (lo, hi)
}

/// One MH proposal per unclamped book, then one Gibbs sweep over slots.
pub fn chain_step(st: &mut JointState, ctx: &mut JointContext<'_>, clamped: &[bool], rng: &mut impl Rng) -> Result<()> {
    for b in 0..st.spans.len() {
        if !clamped.get(b).copied().unwrap_or(false) {
            mh_step(st, ctx, b, rng)?;
        }
    }
    let members = st.members.clone();
    ctx.with_scorer(&members, |sc| gibbs_sweep(&mut st.align, sc, clamped, rng));
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub moves: MoveConfig,
    pub steps: usize,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            moves: MoveConfig::default(),
            steps: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDecoded {
    pub tags: Vec<Vec<Tag>>,
    pub mentions: Vec<Vec<AxiomMention>>,
    pub align: AlignmentState,
    pub score: f64,
}

/// Builds the scoring context for `books` under the two models.
pub fn context_for<'c>(
    books: &'c [Book],
    ident: &IdentModel,
    align: &AlignModel,
    cfg: &JointConfig,
    opts: &FeatureOptions,
) -> JointContext<'c> {
    let lattices: Vec<LatticeScores> = books
        .iter()
        .map(|b| {
            if b.is_empty() {
                LatticeScores::zeros(1)
            } else {
                build_lattice(b, ident, opts)
            }
        })
        .collect();
    let table = PairTable::new(books, opts.clone());
    let max_len = books.iter().map(|b| b.len()).max().unwrap_or(1);
    let num_slots = if align.num_slots > 0 { align.num_slots } else { 2 * max_len.clamp(1, 64) };
    JointContext::new(lattices, table, align, num_slots, cfg.moves)
}

/// Runs the chain from the identification Viterbi tags with greedy slots
/// and returns the highest-scoring state visited.
pub fn joint_decode(books: &[Book], ident: &IdentModel, align: &AlignModel, cfg: &JointConfig, opts: &FeatureOptions) -> Result<JointDecoded> {
    if books.iter().any(Book::is_empty) {
        return Err(Error::InvalidArgument("joint decoding needs nonempty books".into()));
    }
    let mut ctx = context_for(books, ident, align, cfg, opts);
    let tags: Vec<Vec<Tag>> = books.iter().map(|b| decode(b, ident, opts)).collect();
    let mut st = ctx.state_from_tags(&tags)?;
    let sizes: Vec<usize> = st.members.iter().map(Vec::len).collect();
    let most = sizes.iter().copied().max().unwrap_or(0);
    if align.num_slots == 0 {
        ctx.num_slots = (2 * most).max(1);
    }
    st.align = AlignmentState::unaligned(&sizes, ctx.num_slots);
    let clamped = vec![false; books.len()];
    let members = st.members.clone();
    ctx.with_scorer(&members, |sc| greedy_init(&mut st.align, sc, &clamped));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (ctx.joint_log_score(&st)?, st.clone());
    for _ in 0..cfg.steps {
        chain_step(&mut st, &mut ctx, &clamped, &mut rng)?;
        let s = ctx.joint_log_score(&st)?;
        if s > best.0 {
            best = (s, st.clone());
        }
    }
    let (score, st) = best;
    let tags: Vec<Vec<Tag>> = (0..books.len()).map(|b| st.tags(b, books[b].len())).collect();
    let mentions = books
        .iter()
        .zip(&tags)
        .map(|(b, t)| extract_mentions(b, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointDecoded {
        tags,
        mentions,
        align: st.align,
        score,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrainConfig {
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub learning_rate: f64,
    pub chain: JointConfig,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            steps_per_iteration: 5,
            learning_rate: 0.05,
            chain: JointConfig::default(),
        }
    }
}

/// Refines independently trained models on the joint likelihood. Books with
/// `gold` are clamped in the clamped chain; books without gold are sampled
/// in both chains. With no unlabeled books the models are returned as given,
/// since the clamped expectations are then exact and the independent
/// optima already solve the problem.
pub fn joint_refine(
    books: &[Book],
    gold: &[Option<(Vec<Tag>, Vec<usize>)>],
    ident: &IdentModel,
    align: &AlignModel,
    cfg: &JointTrainConfig,
    opts: &FeatureOptions,
) -> Result<(IdentModel, AlignModel)> {
    if gold.len() != books.len() {
        return Err(Error::InvalidArgument("one gold entry per book required".into()));
    }
    if gold.iter().all(Option::is_some) || cfg.iterations == 0 {
        return Ok((ident.clone(), align.clone()));
    }
    let mut ident = ident.clone();
    let mut align = align.clone();
    let mut index = FeatureIndex::default();
    for n in ident.theta.keys() {
        index.intern(n);
    }
    let compiled: Vec<CompiledBook> = books
        .iter()
        .map(|b| {
            let obs = crate::crf::observe_book(b, &ident.keywords, opts);
            CompiledBook::new(&obs, &vec![Tag::O; b.len()], &mut index)
        })
        .collect();
    let mut theta = index.to_dense(&ident.theta);
    let mut ctx = context_for(books, &ident, &align, &cfg.chain, opts);
    let init_tags: Vec<Vec<Tag>> = books
        .iter()
        .zip(gold)
        .map(|(b, g)| match g {
            Some((t, _)) => normalize_tags(t),
            None => decode(b, &ident, opts),
        })
        .collect();
    let mut clamped_state = ctx.state_from_tags(&init_tags)?;
    for (b, g) in gold.iter().enumerate() {
        if let Some((_, slots)) = g {
            if slots.len() != clamped_state.align.slots[b].len() {
                return Err(Error::InvalidArgument(format!("book {b}: gold slots do not match gold mentions")));
            }
            clamped_state.align.slots[b] = slots.clone();
        }
    }
    let need = clamped_state.align.slots.iter().flatten().copied().max().unwrap_or(0);
    ctx.num_slots = ctx.num_slots.max(need);
    clamped_state.align.num_slots = ctx.num_slots;
    if ctx.mode == ConstraintMode::Hard {
        clamped_state.align = crate::align::project_feasible(&clamped_state.align);
    }
    let mut free_state = clamped_state.clone();
    let clamp_mask: Vec<bool> = gold.iter().map(Option::is_some).collect();
    let free_mask = vec![false; books.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain.seed);
    for it in 0..cfg.iterations {
        let mut g_theta = vec![0.0; index.len()];
        let mut g_phi = vec![0.0; ctx.table.index.len()];
        let scale = 1.0 / cfg.steps_per_iteration.max(1) as f64;
        for _ in 0..cfg.steps_per_iteration.max(1) {
            chain_step(&mut clamped_state, &mut ctx, &clamp_mask, &mut rng)?;
            chain_step(&mut free_state, &mut ctx, &free_mask, &mut rng)?;
            for (b, cb) in compiled.iter().enumerate() {
                cb.add_path_counts(&clamped_state.tags(b, cb.len()), scale, &mut g_theta);
                cb.add_path_counts(&free_state.tags(b, cb.len()), -scale, &mut g_theta);
            }
            ctx.table.add_state_counts(&clamped_state.align, &clamped_state.members, scale, &mut g_phi);
            ctx.table.add_state_counts(&free_state.align, &free_state.members, -scale, &mut g_phi);
        }
        let eta = cfg.learning_rate / (1.0 + it as f64);
        for (w, g) in theta.iter_mut().zip(&g_theta) {
            *w = (*w + eta * g) / (1.0 + 2.0 * eta * ident.lambda);
        }
        let mut phi = ctx.table.index.to_dense(&align.phi);
        phi.resize(g_phi.len(), 0.0);
        for (w, g) in phi.iter_mut().zip(&g_phi) {
            *w = (*w + eta * g) / (1.0 + 2.0 * eta * align.mu);
        }
        ident.theta = index.to_sparse(&theta);
        align.phi = ctx.table.index.to_sparse(&phi);
        ctx.lattices = compiled.iter().map(|cb| cb.lattice(&theta)).collect();
        ctx.set_phi(align.phi.clone());
    }
    Ok((ident, align))
}

/// Lines `book_id seq_index tag`.
pub fn format_tags(book_ids: &[String], tags: &[Vec<Tag>]) -> String {
    let mut s = String::new();
    for (id, ts) in book_ids.iter().zip(tags) {
        for (k, t) in ts.iter().enumerate() {
            let _ = writeln!(s, "{id} {k} {t}");
        }
    }
    s
}

pub fn parse_tags(text: &str) -> Result<BTreeMap<String, Vec<Tag>>> {
    let mut out: BTreeMap<String, Vec<Tag>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("tag line {}: `{line}`", i + 1));
        let [id, k, t] = parts.as_slice() else { return Err(bad()) };
        let k: usize = k.parse().map_err(|_| bad())?;
        let t = Tag::parse(t).ok_or_else(bad)?;
        let v = out.entry(id.to_string()).or_default();
        if v.len() != k {
            return Err(bad());
        }
        v.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::satisfies_c1;

    #[test]
    fn span_helpers() {
        let t = vec![Tag::O, Tag::I, Tag::I, Tag::O, Tag::B, Tag::B];
        assert_eq!(spans_of(&t), vec![(1, 2), (4, 4), (5, 5)]);
        assert_eq!(normalize_tags(&t)[1], Tag::B);
        assert_eq!(gaps(&[(1, 2), (4, 4)], 7), vec![(0, 0), (3, 3), (5, 6)]);
        assert_eq!(tags_of(&[(1, 2)], 4), vec![Tag::O, Tag::B, Tag::I, Tag::O]);
        let cfg = MoveConfig::default();
        assert_eq!(applicable_kinds(&[], 4, &cfg), vec![MoveKind::Introduce]);
        assert_eq!(introduce_candidates((0, 2), 2), vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]);
        let u = update_candidates(&[(0, 0), (3, 4), (7, 7)], 1, 9, 2);
        assert!(u.iter().all(|&(s, e)| s >= 1 && e <= 6 && s <= e));
        assert!(u.contains(&(3, 4)));
    }

    #[test]
    fn candidate_probabilities_normalize() {
        let mut lat = LatticeScores::zeros(5);
        lat.trans[1][2][0] = 1.5;
        let c = introduce_candidates((0, 4), 3);
        let lp = candidate_log_probs(&lat, &[Tag::O; 5], (0, 4), &c);
        let s: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tag_file_round_trip() {
        let text = format_tags(&["a".into()], &[vec![Tag::B, Tag::I, Tag::O]]);
        assert_eq!(text, "a 0 B\na 1 I\na 2 O\n");
        assert_eq!(parse_tags(&text).unwrap()["a"], vec![Tag::B, Tag::I, Tag::O]);
        assert!(parse_tags("a 1 B\n").is_err());
    }

    fn toy_book(n: usize) -> Book {
        named_book("toy", n)
    }

    fn named_book(id: &str, n: usize) -> Book {
        use crate::corpus::{load_document, DocNode};
        let nodes = (0..n).map(|k| DocNode::element("sentence", &format!("word{k} here"))).collect();
        let root = DocNode::container("section", nodes);
        load_document(std::path::Path::new("toy.json"), id, &root).unwrap()
    }

    fn all_span_sets(n: usize, from: usize) -> Vec<Vec<Span>> {
        let mut out = vec![Vec::new()];
        for s in from..n {
            for e in s..n {
                for rest in all_span_sets(n, e + 1) {
                    let mut v = vec![(s, e)];
                    v.extend(rest);
                    out.push(v);
                }
            }
        }
        out
    }

    fn all_slotings(m: usize, u: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..m {
            out = out
                .into_iter()
                .flat_map(|v| (0..=u).map(move |z| [v.clone(), vec![z]].concat()))
                .collect();
        }
        out.into_iter().filter(|v| satisfies_c1(v)).collect()
    }

    #[test]
    fn single_book_chain_matches_enumeration() {
        use crate::align::order_violations;
        use std::collections::HashMap;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let mut lat = LatticeScores::zeros(n);
        for t in lat.trans.iter_mut().flatten().flatten() {
            *t = rng.random_range(-1.0..1.0);
        }
        for t in &mut lat.start {
            *t = rng.random_range(-1.0..1.0);
        }
        let books = vec![toy_book(n)];
        let align = AlignModel { nu: 1.0, ..AlignModel::default() };
        let mut ctx = JointContext::new(vec![lat.clone()], PairTable::new(&books, FeatureOptions::default()), &align, 2, MoveConfig::default());
        let mut target: HashMap<(Vec<Span>, Vec<usize>), f64> = HashMap::new();
        for sp in all_span_sets(n, 0) {
            for z in all_slotings(sp.len(), 2) {
                let w = lat.path_score(&tags_of(&sp, n)) - order_violations(&z) as f64;
                target.insert((sp.clone(), z), w.exp());
            }
        }
        let total: f64 = target.values().sum();
        let mut st = ctx.state_from_tags(&[vec![Tag::O; n]]).unwrap();
        let mut counts: HashMap<(Vec<Span>, Vec<usize>), f64> = HashMap::new();
        let steps = 40_000;
        for _ in 0..steps {
            chain_step(&mut st, &mut ctx, &[false], &mut rng).unwrap();
            *counts.entry((st.spans[0].clone(), st.align.slots[0].clone())).or_default() += 1.0;
        }
        assert!(counts.keys().all(|k| target.contains_key(k)));
        let tv: f64 = target.iter().map(|(k, w)| (w / total - counts.get(k).unwrap_or(&0.0) / steps as f64).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.08, "tv {tv}");
    }

    #[test]
    fn two_book_hard_chain_matches_enumeration() {
        use crate::features::{align_features, MentionView};
        use std::collections::HashMap;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let books = vec![named_book("a", n), named_book("b", n)];
        let lats: Vec<LatticeScores> = (0..2)
            .map(|_| {
                let mut lat = LatticeScores::zeros(n);
                for t in lat.trans.iter_mut().flatten().flatten() {
                    *t = rng.random_range(-1.0..1.0);
                }
                lat
            })
            .collect();
        let mut phi = BTreeMap::new();
        phi.insert("pair_bias".to_string(), 0.8);
        phi.insert("elem_count_diff".to_string(), -0.7);
        let align = AlignModel { phi: phi.clone(), mode: ConstraintMode::Hard, ..AlignModel::default() };
        let mut ctx = JointContext::new(lats.clone(), PairTable::new(&books, FeatureOptions::default()), &align, 2, MoveConfig::default());
        let pair = |sa: Span, sb: Span| {
            let ma = AxiomMention::new("a", sa.0, sa.1);
            let mb = AxiomMention::new("b", sb.0, sb.1);
            let f = align_features(&MentionView { book: &books[0], mention: &ma }, &MentionView { book: &books[1], mention: &mb }, &FeatureOptions::default()).unwrap();
            f.dot(&phi)
        };
        let increasing = |z: &Vec<usize>| {
            let nz: Vec<usize> = z.iter().copied().filter(|&s| s != 0).collect();
            nz.windows(2).all(|w| w[0] < w[1])
        };
        type Key = (Vec<Span>, Vec<usize>, Vec<Span>, Vec<usize>);
        let mut target: HashMap<Key, f64> = HashMap::new();
        for sa in all_span_sets(n, 0) {
            for za in all_slotings(sa.len(), 2).into_iter().filter(|z| increasing(z)) {
                for sb in all_span_sets(n, 0) {
                    for zb in all_slotings(sb.len(), 2).into_iter().filter(|z| increasing(z)) {
                        let mut w = lats[0].path_score(&tags_of(&sa, n)) + lats[1].path_score(&tags_of(&sb, n));
                        for (i, &x) in za.iter().enumerate() {
                            for (j, &y) in zb.iter().enumerate() {
                                if x != 0 && x == y {
                                    w += pair(sa[i], sb[j]);
                                }
                            }
                        }
                        target.insert((sa.clone(), za.clone(), sb.clone(), zb), w.exp());
                    }
                }
            }
        }
        let total: f64 = target.values().sum();
        let mut st = ctx.state_from_tags(&[vec![Tag::O; n], vec![Tag::O; n]]).unwrap();
        let mut counts: HashMap<Key, f64> = HashMap::new();
        let steps = 100_000;
        for _ in 0..steps {
            chain_step(&mut st, &mut ctx, &[false, false], &mut rng).unwrap();
            assert!(feasible(&st.align));
            let k = (st.spans[0].clone(), st.align.slots[0].clone(), st.spans[1].clone(), st.align.slots[1].clone());
            *counts.entry(k).or_default() += 1.0;
        }
        let tv: f64 = target.iter().map(|(k, w)| (w / total - counts.get(k).unwrap_or(&0.0) / steps as f64).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.08, "tv {tv} over {} states", target.len());
    }
}

