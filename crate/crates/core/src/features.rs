//! Sparse feature extraction for identification (f), alignment (g) and
//! premise/conclusion splits (h).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{AxiomMention, Book, DiscourseElement, ElementKind, LabelKind, Tag};
use crate::equation::equation_template_match;
use crate::error::{Error, Result};
use crate::logic::Lexicon;
use crate::text::{
    bigram_overlap, dice, greedy_match_ratio, is_point_label, is_punct, lcs_ratio, skip_bigram_similarity,
    unigram_overlap, words,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    entries: BTreeMap<String, f64>,
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates; entries that end at zero are dropped.
    pub fn add(&mut self, name: impl Into<String>, value: f64) {
        if value == 0.0 {
            return;
        }
        let name = name.into();
        let v = self.entries.entry(name.clone()).or_insert(0.0);
        *v += value;
        if *v == 0.0 {
            self.entries.remove(&name);
        }
    }

    pub fn get(&self, name: &str) -> f64 {
        self.entries.get(name).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, weights: &BTreeMap<String, f64>) -> f64 {
        self.entries
            .iter()
            .map(|(k, v)| weights.get(k).copied().unwrap_or(0.0) * v)
            .sum()
    }
}

impl FromIterator<(String, f64)> for FeatureVector {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        let mut f = FeatureVector::new();
        for (k, v) in iter {
            f.add(k, v);
        }
        f
    }
}

pub type RstHook = Arc<dyn Fn(&DiscourseElement, &DiscourseElement) -> Option<String> + Send + Sync>;
pub type EduHook = Arc<dyn Fn(&[String], usize) -> f64 + Send + Sync>;
pub type AlignHook = Arc<dyn Fn(&MentionView<'_>, &MentionView<'_>) -> f64 + Send + Sync>;

/// Optional external analyzers. Absent hooks emit no features.
#[derive(Clone, Default)]
pub struct AnalyzerHooks {
    pub rst_relation: Option<RstHook>,
    pub edu_boundary_prob: Option<EduHook>,
    pub external_align_score: Option<AlignHook>,
}

impl fmt::Debug for AnalyzerHooks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyzerHooks")
            .field("rst_relation", &self.rst_relation.is_some())
            .field("edu_boundary_prob", &self.edu_boundary_prob.is_some())
            .field("external_align_score", &self.external_align_score.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryKeywordTable {
    pub keywords: BTreeSet<String>,
}

impl Default for GeometryKeywordTable {
    fn default() -> Self {
        let kw = ["hence", "if", "equal", "equals", "twice", "proportion", "ratio", "product", "sum", "therefore"];
        Self {
            keywords: kw.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GeometryKeywordTable {
    pub fn contains_any(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.keywords.contains(&t.to_lowercase()))
    }

    pub fn to_lines(&self) -> String {
        self.keywords.iter().map(|k| format!("{k}\n")).collect()
    }

    pub fn from_lines(text: &str) -> Self {
        Self {
            keywords: text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&text))
    }
}

const DEFAULT_MARKERS: &[&str] = &[
    "if", "then", "hence", "so", "therefore", "thus", "when", "where", "and", "because", "since", "given", "let", ",",
    "is", "are", "the", "for", "in", "of",
];

/// Discourse markers seen at span edges.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerTable {
    pub markers: Vec<String>,
}

impl Default for MarkerTable {
    fn default() -> Self {
        Self {
            markers: DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MarkerTable {
    pub const SIZE: usize = 100;

    /// Most frequent first/last tokens of gold premise and conclusion spans,
    /// ties broken alphabetically.
    pub fn from_training(examples: &[(Vec<String>, usize)]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (tokens, split) in examples {
            let (l, r) = tokens.split_at((*split).min(tokens.len()));
            for span in [l, r] {
                if let (Some(a), Some(b)) = (span.first(), span.last()) {
                    *counts.entry(a.to_lowercase()).or_default() += 1;
                    *counts.entry(b.to_lowercase()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self {
            markers: ranked.into_iter().take(Self::SIZE).map(|(w, _)| w).collect(),
        }
    }

    pub fn contains(&self, w: &str) -> bool {
        self.markers.iter().any(|m| m == w)
    }

    pub fn to_lines(&self) -> String {
        self.markers.iter().map(|k| format!("{k}\n")).collect()
    }

    pub fn from_lines(text: &str) -> Self {
        Self {
            markers: text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureFamily {
    Identification,
    Alignment,
    Parsing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGroup {
    pub family: FeatureFamily,
    pub id: &'static str,
    pub label: &'static str,
}

macro_rules! group {
    ($fam:ident, $id:literal, $label:literal) => {
        FeatureGroup {
            family: FeatureFamily::$fam,
            id: $id,
            label: $label,
        }
    };
}

/// Ablatable groups, one per feature table row.
pub const FEATURE_GROUPS: &[FeatureGroup] = &[
    group!(Identification, "sentence_overlap", "Sentence Overlap"),
    group!(Identification, "geometry_entities", "Geometry entities"),
    group!(Identification, "keywords", "Keywords"),
    group!(Identification, "rst_edge", "RST edge"),
    group!(Identification, "axiom_mention", "Axiom, Theorem, Corollary Mention"),
    group!(Identification, "equation", "Equation"),
    group!(Identification, "associated_diagram", "Associated Diagram"),
    group!(Identification, "bold_underline", "Bold / Underline"),
    group!(Identification, "bounding_box", "Bounding box"),
    group!(Identification, "json_structure", "JSON structure"),
    group!(Alignment, "overlap", "Unigram, Bigram, Dependency and Entity Overlap"),
    group!(Alignment, "lcs", "Longest Common Subsequence"),
    group!(Alignment, "element_count", "Number of discourse elements"),
    group!(Alignment, "alignment_scores", "Alignment Scores"),
    group!(Alignment, "mt_metrics", "MT Metrics"),
    group!(Alignment, "summarization", "Summarization Metrics"),
    group!(Alignment, "json_structure", "JSON structure"),
    group!(Alignment, "equation_template", "Equation Template"),
    group!(Alignment, "image_caption", "Image Caption"),
    group!(Parsing, "span_similarity", "Span Similarity"),
    group!(Parsing, "relations", "No. of Relations"),
    group!(Parsing, "span_lengths", "Span Lengths"),
    group!(Parsing, "relative_position", "Relative Position"),
    group!(Parsing, "discourse_markers", "Discourse Markers"),
    group!(Parsing, "punctuation", "Punctuation"),
    group!(Parsing, "text_organization", "Text Organization"),
    group!(Parsing, "rst_parse", "RST Parse"),
    group!(Parsing, "segmenter", "Soricut and Marcu Segmenter"),
    group!(Parsing, "head_attachment", "Head / Common Ancestor/ Attachment Node"),
    group!(Parsing, "syntax", "Syntax"),
    group!(Parsing, "dominance", "Dominance"),
    group!(Parsing, "json_structure", "JSON Structure"),
];

/// Disabled feature groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ablation {
    disabled: BTreeSet<(FeatureFamily, &'static str)>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    /// Accepts `family:id`, a bare id, or a table row label (case-insensitive).
    /// A bare name shared by several families disables all of them.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Ablation::default();
        for n in names {
            a.disable(n.as_ref())?;
        }
        Ok(a)
    }

    pub fn disable(&mut self, name: &str) -> Result<()> {
        let (fam, key) = match name.split_once(':') {
            Some((f, k)) => (Some(f.trim().to_lowercase()), k.trim().to_lowercase()),
            None => (None, name.trim().to_lowercase()),
        };
        let fam_ok = |g: &FeatureGroup| match fam.as_deref() {
            None => true,
            Some("ident" | "identification") => g.family == FeatureFamily::Identification,
            Some("align" | "alignment") => g.family == FeatureFamily::Alignment,
            Some("parse" | "parsing" | "split") => g.family == FeatureFamily::Parsing,
            Some(_) => false,
        };
        let hits: Vec<&FeatureGroup> = FEATURE_GROUPS
            .iter()
            .filter(|g| fam_ok(g) && (g.id == key || g.label.to_lowercase() == key))
            .collect();
        if hits.is_empty() {
            return Err(Error::Config(format!("unknown feature group `{name}`")));
        }
        for g in hits {
            self.disabled.insert((g.family, g.id));
        }
        Ok(())
    }

    pub fn enabled(&self, family: FeatureFamily, id: &str) -> bool {
        !self.disabled.iter().any(|(f, g)| *f == family && *g == id)
    }

    pub fn is_empty(&self) -> bool {
        self.disabled.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeatureOptions {
    pub hooks: AnalyzerHooks,
    pub ablation: Ablation,
}

/// Tag letter used in feature names; `S` is the start state.
pub fn tag_char(t: Option<Tag>) -> char {
    match t {
        None => 'S',
        Some(Tag::B) => 'B',
        Some(Tag::I) => 'I',
        Some(Tag::O) => 'O',
    }
}

/// Observation part of the identification features at one position.
/// `unary` entries are conjoined with the current tag, `pair` entries with
/// the (previous, current) tag pair. Relations between elements k-1 and k are
/// attached to position k.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentObs {
    pub unary: Vec<(String, f64)>,
    pub pair: Vec<(String, f64)>,
}

/// Geometry entities in a token sequence: lexicon triggers, type nouns,
/// point labels and numbers.
pub fn geometry_entities(tokens: &[String], lex: &Lexicon) -> Vec<String> {
    let mut out: Vec<String> = lex.find_triggers(tokens).into_iter().map(|m| m.symbol).collect();
    for t in tokens {
        if is_point_label(t) || t.chars().all(|c| c.is_ascii_digit()) {
            out.push(t.clone());
        } else if let Some(ty) = lex.noun_type(t) {
            out.push(format!("type:{ty}"));
        }
    }
    out
}

fn label_obs(kind: LabelKind) -> Option<&'static str> {
    match kind {
        LabelKind::Axiom => Some("axiom_label"),
        LabelKind::Theorem => Some("thm_label"),
        LabelKind::Corollary => Some("cor_label"),
        LabelKind::Property => Some("prop_label"),
        LabelKind::None => None,
    }
}

pub fn ident_observations(book: &Book, k: usize, kw: &GeometryKeywordTable, opts: &FeatureOptions) -> IdentObs {
    use FeatureFamily::Identification as F;
    let on = |g: &str| opts.ablation.enabled(F, g);
    let lex = Lexicon::builtin();
    let el = &book.elements[k];
    let prev = k.checked_sub(1).map(|p| &book.elements[p]);
    let mut obs = IdentObs::default();

    if on("sentence_overlap") {
        if let Some(p) = prev {
            obs.pair.push(("uni_prev".into(), unigram_overlap(&p.text, &el.text)));
            obs.pair.push(("bi_prev".into(), bigram_overlap(&p.text, &el.text)));
        }
    }
    if on("geometry_entities") && !el.text.is_empty() {
        let n = geometry_entities(&el.text, lex).len() as f64;
        obs.unary.push(("geo_entities".into(), n / el.text.len() as f64));
    }
    if on("keywords") && kw.contains_any(&el.text) {
        obs.unary.push(("keyword".into(), 1.0));
    }
    if on("rst_edge") {
        if let (Some(p), Some(hook)) = (prev, &opts.hooks.rst_relation) {
            if let Some(rel) = hook(p, el) {
                obs.pair.push((format!("rst={rel}"), 1.0));
            }
        }
    }
    if on("axiom_mention") {
        if let Some(name) = label_obs(el.mention_label()) {
            obs.unary.push((name.into(), 1.0));
        }
        if let Some(name) = label_obs(el.section_label) {
            obs.unary.push((format!("sec_{name}"), 1.0));
        }
        if let Some(name) = prev.and_then(|p| label_obs(p.mention_label())) {
            obs.pair.push((format!("prev_{name}"), 1.0));
        }
    }
    if on("equation") && el.has_equation() {
        obs.unary.push(("eq".into(), 1.0));
        obs.pair.push(("eq".into(), 1.0));
    }
    if on("associated_diagram") && !el.figure_refs.is_empty() && el.kind != ElementKind::Caption {
        obs.unary.push(("figref".into(), 1.0));
    }
    if on("bold_underline") {
        if el.typography.bold {
            obs.unary.push(("bold".into(), 1.0));
        }
        if el.typography.underline {
            obs.unary.push(("underline".into(), 1.0));
        }
        if let Some(p) = prev {
            if p.typography.bold {
                obs.pair.push(("bold_prev".into(), 1.0));
            }
            if p.typography.underline {
                obs.pair.push(("underline_prev".into(), 1.0));
            }
        }
    }
    if on("bounding_box") {
        if el.typography.boxed {
            obs.unary.push(("box".into(), 1.0));
        }
        if prev.is_some_and(|p| p.typography.boxed && el.typography.boxed) {
            obs.pair.push(("box_pair".into(), 1.0));
        }
    }
    if on("json_structure") && prev.is_some_and(|p| p.same_node(el)) {
        obs.pair.push(("same_node".into(), 1.0));
    }
    obs.unary.retain(|(_, v)| *v != 0.0);
    obs.pair.retain(|(_, v)| *v != 0.0);
    obs
}

/// Full feature vector for one factor: observations conjoined with tags plus
/// the transition and per-tag bias indicators.
pub fn ident_features(
    book: &Book,
    k: usize,
    y_prev: Option<Tag>,
    y_cur: Tag,
    kw: &GeometryKeywordTable,
    opts: &FeatureOptions,
) -> FeatureVector {
    let obs = ident_observations(book, k, kw, opts);
    conjoin(&obs, y_prev, y_cur)
}

pub fn conjoin(obs: &IdentObs, y_prev: Option<Tag>, y_cur: Tag) -> FeatureVector {
    let c = tag_char(Some(y_cur));
    let pc = format!("{}{}", tag_char(y_prev), c);
    let mut f = FeatureVector::new();
    f.add(format!("trans∧{pc}"), 1.0);
    f.add(format!("bias∧{c}"), 1.0);
    for (name, v) in &obs.unary {
        f.add(format!("{name}∧{c}"), *v);
    }
    for (name, v) in &obs.pair {
        f.add(format!("{name}∧{pc}"), *v);
    }
    f
}

/// A mention together with the book it lives in.
#[derive(Debug, Clone, Copy)]
pub struct MentionView<'a> {
    pub book: &'a Book,
    pub mention: &'a AxiomMention,
}

impl<'a> MentionView<'a> {
    pub fn new(book: &'a Book, mention: &'a AxiomMention) -> Self {
        Self { book, mention }
    }

    pub fn elements(&self) -> &'a [DiscourseElement] {
        self.book.mention_elements(self.mention)
    }

    pub fn tokens(&self) -> Vec<String> {
        self.book.mention_tokens(self.mention)
    }

    pub fn equations(&self) -> Vec<&'a str> {
        self.elements()
            .iter()
            .filter_map(|e| e.equation_payload.as_deref())
            .collect()
    }

    pub fn caption(&self) -> Option<&'a [String]> {
        self.mention.diagram_ref.as_deref().and_then(|r| self.book.caption_of(r))
    }
}

pub fn align_features(a: &MentionView<'_>, b: &MentionView<'_>, opts: &FeatureOptions) -> Result<FeatureVector> {
    use FeatureFamily::Alignment as F;
    if a.book.book_id == b.book.book_id {
        return Err(Error::InvalidArgument(format!(
            "alignment features need mentions from different books, both are in `{}`",
            a.book.book_id
        )));
    }
    let on = |g: &str| opts.ablation.enabled(F, g);
    let lex = Lexicon::builtin();
    let (ta, tb) = (a.tokens(), b.tokens());
    let (wa, wb) = (words(&ta), words(&tb));
    let mut f = FeatureVector::new();
    f.add("pair_bias", 1.0);
    if on("overlap") {
        f.add("unigram_overlap", unigram_overlap(&ta, &tb));
        f.add("bigram_overlap", bigram_overlap(&ta, &tb));
        let ea: BTreeSet<String> = geometry_entities(&ta, lex).into_iter().filter(|e| !is_point_label(e)).collect();
        let eb: BTreeSet<String> = geometry_entities(&tb, lex).into_iter().filter(|e| !is_point_label(e)).collect();
        f.add("entity_overlap", dice(&ea, &eb));
    }
    if on("lcs") {
        f.add("lcs", lcs_ratio(&wa, &wb));
    }
    if on("element_count") {
        f.add("elem_count_diff", (a.mention.len() as f64 - b.mention.len() as f64).abs());
    }
    if on("alignment_scores") {
        let score = match &opts.hooks.external_align_score {
            Some(h) => h(a, b),
            None => greedy_match_ratio(&wa, &wb),
        };
        f.add("align_score", score);
    }
    if on("mt_metrics") {
        f.add("mt_fmean", meteor_like(&wa, &wb));
    }
    if on("summarization") {
        f.add("rouge_s", skip_bigram_similarity(&wa, &wb));
    }
    if on("json_structure") {
        let boxed = |v: &MentionView<'_>| v.elements().iter().any(|e| e.typography.boxed);
        let labeled = |v: &MentionView<'_>| v.elements().iter().any(|e| e.typography.labeled_kind.is_some());
        if boxed(a) && boxed(b) {
            f.add("both_boxed", 1.0);
        }
        if labeled(a) && labeled(b) {
            f.add("both_labeled", 1.0);
        }
        if a.mention.diagram_ref.is_some() && b.mention.diagram_ref.is_some() {
            f.add("both_diagram", 1.0);
        }
    }
    if on("equation_template") {
        let hit = a
            .equations()
            .iter()
            .any(|x| b.equations().iter().any(|y| equation_template_match(x, y)));
        if hit {
            f.add("eq_template", 1.0);
        }
    }
    if on("image_caption") {
        if let (Some(ca), Some(cb)) = (a.caption(), b.caption()) {
            f.add("caption_overlap", unigram_overlap(ca, cb));
        }
    }
    Ok(f)
}

/// Harmonic mean of exact unigram precision and recall, weighted toward
/// recall; a stand-in for an MT metric.
fn meteor_like(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut pool: BTreeMap<&str, usize> = BTreeMap::new();
    for w in b {
        *pool.entry(w.as_str()).or_default() += 1;
    }
    let mut m = 0usize;
    for w in a {
        if let Some(n) = pool.get_mut(w.as_str()) {
            if *n > 0 {
                *n -= 1;
                m += 1;
            }
        }
    }
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / a.len() as f64;
    let r = m as f64 / b.len() as f64;
    10.0 * p * r / (r + 9.0 * p)
}

/// Concatenated mention text with token provenance, the unit split by the
/// parser.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionText {
    pub tokens: Vec<String>,
    /// Element offset within the mention for each token.
    pub element_of: Vec<usize>,
    pub paths: Vec<Vec<String>>,
    /// Equation payload per element offset, if any.
    pub equations: Vec<Option<String>>,
    pub elements: Vec<DiscourseElement>,
}

impl MentionText {
    pub fn new(view: &MentionView<'_>) -> Self {
        Self::from_elements(view.elements())
    }

    pub fn from_elements(elements: &[DiscourseElement]) -> Self {
        let mut tokens = Vec::new();
        let mut element_of = Vec::new();
        for (i, e) in elements.iter().enumerate() {
            for t in &e.text {
                tokens.push(t.clone());
                element_of.push(i);
            }
        }
        Self {
            tokens,
            element_of,
            paths: elements.iter().map(|e| e.hierarchy_path.clone()).collect(),
            equations: elements.iter().map(|e| e.equation_payload.clone()).collect(),
            elements: elements.to_vec(),
        }
    }

    pub fn has_equation(&self) -> bool {
        self.equations.iter().any(Option::is_some)
    }
}

/// Lexical head of a span: first lexicon trigger, else first content word.
pub fn span_head(tokens: &[String], lex: &Lexicon) -> Option<usize> {
    if let Some(m) = lex.find_triggers(tokens).first() {
        return Some(m.start);
    }
    const STOP: &[&str] = &["the", "a", "an", "of", "to", "is", "are", "and", "if", "then", "in", "at", "on"];
    tokens
        .iter()
        .position(|t| !is_punct(t) && !STOP.contains(&t.to_lowercase().as_str()))
}

fn relations(tokens: &[String], lex: &Lexicon) -> BTreeSet<String> {
    lex.find_triggers(tokens).into_iter().map(|m| m.symbol).collect()
}

fn labels(tokens: &[String]) -> BTreeSet<String> {
    tokens.iter().filter(|t| is_point_label(t)).cloned().collect()
}

/// Split features for the boundary before token `split`.
pub fn split_features(
    text: &MentionText,
    split: usize,
    markers: &MarkerTable,
    opts: &FeatureOptions,
) -> Result<FeatureVector> {
    use FeatureFamily::Parsing as F;
    let n = text.tokens.len();
    if split == 0 || split >= n {
        return Err(Error::InvalidArgument(format!("split {split} outside mention of {n} tokens")));
    }
    let on = |g: &str| opts.ablation.enabled(F, g);
    let lex = Lexicon::builtin();
    let (left, right) = text.tokens.split_at(split);
    let mut f = FeatureVector::new();
    if on("span_similarity") {
        let wl: BTreeSet<String> = words(left).into_iter().collect();
        let wr: BTreeSet<String> = words(right).into_iter().collect();
        f.add("sim_words", dice(&wl, &wr));
        f.add("sim_relations", dice(&relations(left, lex), &relations(right, lex)));
        f.add("sim_args", dice(&labels(left), &labels(right)));
    }
    if on("relations") {
        f.add("relations_left", lex.find_triggers(left).len() as f64);
        f.add("relations_right", lex.find_triggers(right).len() as f64);
    }
    if on("span_lengths") {
        let (a, b) = (left.len() as f64, right.len() as f64);
        f.add("len_ratio", a.min(b) / a.max(b));
    }
    if on("relative_position") {
        if let Some(h) = span_head(left, lex) {
            f.add("head_left_offset", (split - h) as f64 / n as f64);
        }
        if let Some(h) = span_head(right, lex) {
            f.add("head_right_offset", h as f64 / n as f64);
        }
    }
    if on("discourse_markers") {
        let edges = [
            ("marker_left", left.last()),
            ("marker_right", right.first()),
            ("marker_lfirst", left.first()),
            ("marker_rlast", right.last()),
        ];
        for (name, tok) in edges {
            if let Some(t) = tok {
                let w = t.to_lowercase();
                if markers.contains(&w) {
                    f.add(format!("{name}={w}"), 1.0);
                }
            }
        }
    }
    if on("punctuation") && (is_punct(&left[left.len() - 1]) || is_punct(&right[0])) {
        f.add("punct_border", 1.0);
    }
    let (el, er) = (text.element_of[split - 1], text.element_of[split]);
    let same_sentence = el == er;
    let same_paragraph = text.paths[el] == text.paths[er];
    if on("text_organization") {
        if same_sentence {
            f.add("same_sentence", 1.0);
        }
        if same_paragraph {
            f.add("same_paragraph", 1.0);
        }
    }
    if on("rst_parse") && !same_sentence {
        if let Some(h) = &opts.hooks.rst_relation {
            if let Some(rel) = h(&text.elements[el], &text.elements[er]) {
                f.add("rst_boundary", 1.0);
                f.add(format!("rst={rel}"), 1.0);
            }
        }
    }
    if on("segmenter") {
        if let Some(h) = &opts.hooks.edu_boundary_prob {
            f.add("edu_prob", h(&text.tokens, split).clamp(0.0, 1.0));
        }
    }
    if on("json_structure") {
        let one_node = text.paths.iter().all(|p| *p == text.paths[0]);
        if one_node && same_paragraph {
            f.add("same_node∧same_paragraph", 1.0);
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_document, DocNode};
    use crate::text::tokenize;

    fn book(nodes: Vec<DocNode>) -> Book {
        let root = DocNode::container("section", nodes);
        load_document(Path::new("t.json"), "t", &root).unwrap()
    }

    fn theorem_sentence(text: &str) -> DocNode {
        let mut n = DocNode::element("sentence", text);
        n.typography.label = "theorem".into();
        n
    }

    #[test]
    fn labeled_theorem_fires_on_current_tag() {
        let b = book(vec![DocNode::element("sentence", "intro words"), theorem_sentence("a theorem statement")]);
        let f = ident_features(&b, 1, Some(Tag::O), Tag::B, &GeometryKeywordTable::default(), &FeatureOptions::default());
        assert_eq!(f.get("thm_label∧B"), 1.0);
        assert_eq!(f.get("trans∧OB"), 1.0);
    }

    #[test]
    fn plain_element_only_overlap_and_transition() {
        let b = book(vec![DocNode::element("sentence", "look here now"), DocNode::element("sentence", "look here again")]);
        let f = ident_features(&b, 1, Some(Tag::O), Tag::O, &GeometryKeywordTable::default(), &FeatureOptions::default());
        let names: Vec<&str> = f.iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("uni_prev") || n.starts_with("bi_prev") || n.starts_with("trans") || n.starts_with("bias") || n.starts_with("same_node")), "{names:?}");
    }

    #[test]
    fn identical_neighbours_overlap_fully() {
        let b = book(vec![DocNode::element("sentence", "w x y z"), DocNode::element("sentence", "w x y z")]);
        let obs = ident_observations(&b, 1, &GeometryKeywordTable::default(), &FeatureOptions::default());
        assert!(obs.pair.contains(&("uni_prev".to_string(), 1.0)));
    }

    #[test]
    fn ablation_removes_group() {
        let b = book(vec![theorem_sentence("if a theorem")]);
        let opts = FeatureOptions {
            ablation: Ablation::from_names(&["Axiom, Theorem, Corollary Mention"]).unwrap(),
            ..Default::default()
        };
        let f = ident_features(&b, 0, None, Tag::B, &GeometryKeywordTable::default(), &opts);
        assert_eq!(f.get("thm_label∧B"), 0.0);
        assert_eq!(f.get("keyword∧B"), 1.0);
        assert!(Ablation::from_names(&["no such group"]).is_err());
    }

    fn two_books(ta: &str, tb: &str, eqa: Option<&str>, eqb: Option<&str>) -> (Book, Book) {
        let mk = |id: &str, t: &str, e: Option<&str>| {
            let mut kids = vec![DocNode::element("sentence", t)];
            if let Some(e) = e {
                kids.push(DocNode {
                    equation: Some(e.into()),
                    ..DocNode::element("equation", "")
                });
            }
            load_document(Path::new(id), id, &DocNode::container("section", kids)).unwrap()
        };
        (mk("a", ta, eqa), mk("b", tb, eqb))
    }

    #[test]
    fn identical_mentions_overlap_fully() {
        let (a, b) = two_books("the angles of a triangle", "the angles of a triangle", None, None);
        let m = AxiomMention::new("a", 0, 0);
        let n = AxiomMention::new("b", 0, 0);
        let f = align_features(&MentionView::new(&a, &m), &MentionView::new(&b, &n), &FeatureOptions::default()).unwrap();
        for name in ["unigram_overlap", "bigram_overlap", "entity_overlap", "lcs", "align_score", "rouge_s", "mt_fmean"] {
            assert_eq!(f.get(name), 1.0, "{name}");
        }
        assert_eq!(f.get("elem_count_diff"), 0.0);
        assert!(align_features(&MentionView::new(&a, &m), &MentionView::new(&a, &m), &FeatureOptions::default()).is_err());
    }

    #[test]
    fn equation_template_feature() {
        let (a, b) = two_books("secant", "secant", Some("PA × PB = PT^2"), Some("PA × PB = PC^2"));
        let m = AxiomMention::new("a", 0, 1);
        let n = AxiomMention::new("b", 0, 1);
        let f = align_features(&MentionView::new(&a, &m), &MentionView::new(&b, &n), &FeatureOptions::default()).unwrap();
        assert_eq!(f.get("eq_template"), 1.0);
    }

    fn text(s: &str) -> MentionText {
        let b = book(vec![DocNode::element("sentence", s)]);
        MentionText::from_elements(&b.elements)
    }

    #[test]
    fn split_examples() {
        let t = text("if AB is a line then AB is long");
        let at_then = t.tokens.iter().position(|w| w == "then").unwrap() + 1;
        let f = split_features(&t, at_then, &MarkerTable::default(), &FeatureOptions::default()).unwrap();
        assert_eq!(f.get("marker_left=then"), 1.0);

        let t = text("AB is a line , so AB is long");
        let comma = t.tokens.iter().position(|w| w == ",").unwrap() + 1;
        let f = split_features(&t, comma, &MarkerTable::default(), &FeatureOptions::default()).unwrap();
        assert_eq!(f.get("punct_border"), 1.0);

        let t = text("a b c d e f g h i j");
        let f = split_features(&t, 5, &MarkerTable::default(), &FeatureOptions::default()).unwrap();
        assert_eq!(f.get("len_ratio"), 1.0);
        assert!(split_features(&t, 0, &MarkerTable::default(), &FeatureOptions::default()).is_err());
        assert!(split_features(&t, 10, &MarkerTable::default(), &FeatureOptions::default()).is_err());
    }

    #[test]
    fn marker_table_counts_span_edges() {
        let ex = vec![(tokenize("if x then y"), 3), (tokenize("if z then w"), 3)];
        let m = MarkerTable::from_training(&ex);
        assert_eq!(&m.markers[..2], &["if".to_string(), "then".to_string()]);
        assert!(m.markers.len() <= MarkerTable::SIZE);
    }

    #[test]
    fn keyword_table_has_required_words() {
        let kw = GeometryKeywordTable::default();
        for w in ["hence", "if", "equal", "twice", "proportion", "ratio", "product"] {
            assert!(kw.keywords.contains(w));
        }
        assert_eq!(GeometryKeywordTable::from_lines(&kw.to_lines()), kw);
    }
}
