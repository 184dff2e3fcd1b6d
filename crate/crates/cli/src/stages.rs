//! Pipeline stages. Each reads its declared input artifacts, writes its
//! outputs and a manifest, and is deterministic given the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use geoharvest::align::{align_all, flat_partition, format_alignment, parse_alignment, AlignData, AlignModel, AlignmentState};
use geoharvest::corpus::{extract_mentions, load_corpus, save_documents, synthesize_documents, tags_from_mentions, Corpus};
use geoharvest::crf::{decode, train_identification, IdentModel, LabeledBook};
use geoharvest::eval::{
    alignment_pair_prf, ident_prf, match_mentions, nmi, parse_prf, project_to_gold, sat_score, AnswerOutcome, MatchMode, MetricReport,
    ParseLevel,
};
use geoharvest::features::{Ablation, FeatureOptions, MentionText, MentionView};
use geoharvest::joint::{format_tags, joint_decode, joint_refine, parse_tags};
use geoharvest::logic::{format_rules, parse_rules, HornRule, Lexicon, Provenance};
use geoharvest::parser::{
    fuse, learn_source_confidence, parse_all, train_split_model, FusionExample, FusionParams, SplitExample, SplitModel,
};
use geoharvest::solver::{answer_question, parse_axiom_names, render_explanation, AnswerKind, GeometryProblem};
use geoharvest::{AxiomMention, GoldAnnotations, Tag};

use crate::config::{DecodeMode, PipelineConfig};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    TrainIdent,
    TrainAlign,
    TrainJoint,
    TrainSplit,
    Decode,
    Parse,
    Fuse,
    Solve,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainIdent => "train-ident",
            Stage::TrainAlign => "train-align",
            Stage::TrainJoint => "train-joint",
            Stage::TrainSplit => "train-split",
            Stage::Decode => "decode",
            Stage::Parse => "parse",
            Stage::Fuse => "fuse",
            Stage::Solve => "solve",
            Stage::Eval => "eval",
        }
    }
}

/// Artifact locations derived from the configured directories.
pub struct Artifacts {
    pub ident: PathBuf,
    pub align: PathBuf,
    pub ident_joint: PathBuf,
    pub align_joint: PathBuf,
    pub split: PathBuf,
    pub tags: PathBuf,
    pub alignment: PathBuf,
    pub parses: PathBuf,
    pub rules: PathBuf,
    pub answers: PathBuf,
    pub explanations: PathBuf,
    pub metrics: PathBuf,
    pub metrics_json: PathBuf,
    pub ablation: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let m = &cfg.paths.models;
        let o = &cfg.paths.output;
        Self {
            ident: m.join("ident.model"),
            align: m.join("align.model"),
            ident_joint: m.join("ident-joint.model"),
            align_joint: m.join("align-joint.model"),
            split: m.join("split.model"),
            tags: o.join("tags.txt"),
            alignment: o.join("alignment.txt"),
            parses: o.join("parses.txt"),
            rules: o.join("rules.txt"),
            answers: o.join("answers.json"),
            explanations: o.join("explanations.txt"),
            metrics: o.join("metrics.txt"),
            metrics_json: o.join("metrics.json"),
            ablation: o.join("ablation.tsv"),
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing input artifact: {what} ({})", path.display());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    art: Artifacts,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn new(stage: Stage, cfg: &'a PipelineConfig) -> Self {
        Self {
            cfg,
            art: Artifacts::new(cfg),
            manifest: Manifest::new(stage.name(), cfg.to_toml()),
        }
    }

    fn input(&mut self, path: &Path, what: &str) -> Result<()> {
        require(path, what)?;
        self.manifest.input(path)
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let p = self.cfg.paths.corpus.clone();
        self.input(&p, "corpus directory")?;
        Ok(load_corpus(&p)?)
    }

    fn gold(&mut self, corpus: &Corpus) -> Result<GoldAnnotations> {
        let p = self.cfg.paths.gold.clone();
        self.input(&p, "gold annotations")?;
        Ok(GoldAnnotations::load(&p)?.restrict(corpus))
    }

    fn save(&mut self, path: &Path, text: &str) -> Result<()> {
        write(path, text)?;
        self.manifest.output(path)
    }

    fn finish(self) -> Result<PathBuf> {
        self.manifest.write(&self.cfg.paths.output)
    }
}

/// Book indices for training, dev and test.
pub fn roles(cfg: &PipelineConfig, corpus: &Corpus) -> Result<[Vec<usize>; 3]> {
    let d = &cfg.data;
    if d.train.is_empty() && d.dev.is_empty() && d.test.is_empty() {
        let n = corpus.books.len();
        let train = n.div_ceil(2);
        let dev = (n / 4).min(n - train);
        return Ok([(0..train).collect(), (train..train + dev).collect(), (train + dev..n).collect()]);
    }
    let idx = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| corpus.book_index(id).ok_or_else(|| anyhow!("data split names unknown book `{id}`")))
            .collect()
    };
    Ok([idx(&d.train)?, idx(&d.dev)?, idx(&d.test)?])
}

fn gold_tags(corpus: &Corpus, gold: &GoldAnnotations) -> Vec<Vec<Tag>> {
    corpus
        .books
        .iter()
        .map(|b| tags_from_mentions(b.len(), &gold.mentions_for(&b.book_id)))
        .collect()
}

fn lexicon(cfg: &PipelineConfig) -> Result<Option<Lexicon>> {
    cfg.paths.lexicon.as_ref().map(|p| Lexicon::load(p).map_err(Into::into)).transpose()
}

pub fn synth(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Synth, cfg);
    let (docs, gold) = synthesize_documents(&cfg.synth)?;
    if cfg.paths.corpus.exists() {
        fs::remove_dir_all(&cfg.paths.corpus).with_context(|| format!("clearing {}", cfg.paths.corpus.display()))?;
    }
    save_documents(&cfg.paths.corpus, &docs)?;
    run.manifest.output(&cfg.paths.corpus)?;
    let text = serde_json::to_string_pretty(&gold)? + "\n";
    run.save(&cfg.paths.gold, &text)?;
    info!("synthesized {} books with {} gold mentions", docs.len(), gold.mentions.len());
    run.finish()
}

fn train_ident_model(cfg: &PipelineConfig, corpus: &Corpus, gold: &GoldAnnotations, opts: &FeatureOptions) -> Result<IdentModel> {
    let [train, dev, _] = roles(cfg, corpus)?;
    let tags = gold_tags(corpus, gold);
    let lb = |ix: &[usize]| -> Vec<LabeledBook> {
        ix.iter()
            .map(|&b| LabeledBook {
                book: &corpus.books[b],
                tags: &tags[b],
            })
            .collect()
    };
    let (model, grid) = train_identification(&lb(&train), &lb(&dev), &cfg.ident_train(), opts)?;
    for g in grid {
        info!("ident lambda {} dev strict F1 {:?}", g.lambda, g.dev_f1);
    }
    Ok(model)
}

pub fn train_ident(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::TrainIdent, cfg);
    let corpus = run.corpus()?;
    let gold = run.gold(&corpus)?;
    let model = train_ident_model(cfg, &corpus, &gold, &cfg.feature_options()?)?;
    let path = run.art.ident.clone();
    run.save(&path, &model.to_text())?;
    run.finish()
}

fn train_align_model(cfg: &PipelineConfig, corpus: &Corpus, gold: &GoldAnnotations, opts: &FeatureOptions) -> Result<AlignModel> {
    let [train, dev, _] = roles(cfg, corpus)?;
    let data = AlignData::from_gold(corpus, gold, opts.clone())?;
    let mask = |ix: &[usize]| (0..corpus.books.len()).map(|b| ix.contains(&b)).collect::<Vec<bool>>();
    let (mut model, grid) = geoharvest::align::train_alignment(&data, &mask(&train), &mask(&dev), &cfg.align_train())?;
    for g in grid {
        info!("align mu {} nu {} dev {:?}", g.mu, g.nu, g.dev_f1);
    }
    if cfg.align.num_slots > 0 {
        model.num_slots = cfg.align.num_slots;
    }
    Ok(model)
}

pub fn train_align(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::TrainAlign, cfg);
    let corpus = run.corpus()?;
    let gold = run.gold(&corpus)?;
    let model = train_align_model(cfg, &corpus, &gold, &cfg.feature_options()?)?;
    let path = run.art.align.clone();
    run.save(&path, &model.to_text())?;
    run.finish()
}

pub fn train_joint(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::TrainJoint, cfg);
    let corpus = run.corpus()?;
    let gold = run.gold(&corpus)?;
    let (ip, ap) = (run.art.ident.clone(), run.art.align.clone());
    run.input(&ip, "identification model")?;
    run.input(&ap, "alignment model")?;
    let ident = IdentModel::load(&ip)?;
    let align = AlignModel::load(&ap)?;
    let opts = cfg.feature_options()?;
    let [train, dev, _] = roles(cfg, &corpus)?;
    let tags = gold_tags(&corpus, &gold);
    let data = AlignData::from_gold(&corpus, &gold, opts.clone())?;
    let slots = data.gold.as_ref().map(|g| g.slots.clone()).unwrap_or_default();
    let labeled: Vec<Option<(Vec<Tag>, Vec<usize>)>> = (0..corpus.books.len())
        .map(|b| (train.contains(&b) || dev.contains(&b)).then(|| (tags[b].clone(), slots[b].clone())))
        .collect();
    let (ident, align) = joint_refine(&corpus.books, &labeled, &ident, &align, &cfg.joint_train(), &opts)?;
    let (ij, aj) = (run.art.ident_joint.clone(), run.art.align_joint.clone());
    run.save(&ij, &ident.to_text())?;
    run.save(&aj, &align.to_text())?;
    run.finish()
}

pub fn split_examples(corpus: &Corpus, gold: &GoldAnnotations, books: &[usize]) -> Vec<SplitExample> {
    gold.mentions
        .iter()
        .enumerate()
        .filter_map(|(mi, gm)| {
            let m = gm.to_mention();
            let b = corpus.book_index(&m.book_id)?;
            if !books.contains(&b) {
                return None;
            }
            let split = *gold.splits.get(&mi)?;
            Some(SplitExample {
                text: MentionText::new(&MentionView { book: &corpus.books[b], mention: &m }),
                gold: split,
            })
        })
        .collect()
}

fn train_split(cfg: &PipelineConfig, corpus: &Corpus, gold: &GoldAnnotations, opts: &FeatureOptions) -> Result<SplitModel> {
    let [train, dev, _] = roles(cfg, corpus)?;
    let tr = split_examples(corpus, gold, &train);
    let dv = split_examples(corpus, gold, &dev);
    let (model, grid) = train_split_model(&tr, &dv, &cfg.split_train(), opts)?;
    for g in grid {
        info!("split lambda {} dev accuracy {:?}", g.lambda, g.dev_accuracy);
    }
    Ok(model)
}

pub fn train_split_stage(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::TrainSplit, cfg);
    let corpus = run.corpus()?;
    let gold = run.gold(&corpus)?;
    let model = train_split(cfg, &corpus, &gold, &cfg.feature_options()?)?;
    let path = run.art.split.clone();
    run.save(&path, &model.to_text())?;
    run.finish()
}

pub fn decode_stage(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Decode, cfg);
    let corpus = run.corpus()?;
    let use_joint = cfg.decode.refined && run.art.ident_joint.exists() && run.art.align_joint.exists();
    let (ip, ap) = if use_joint {
        (run.art.ident_joint.clone(), run.art.align_joint.clone())
    } else {
        (run.art.ident.clone(), run.art.align.clone())
    };
    run.input(&ip, "identification model")?;
    run.input(&ap, "alignment model")?;
    let ident = IdentModel::load(&ip)?;
    let mut align = AlignModel::load(&ap)?;
    if cfg.align.num_slots > 0 {
        align.num_slots = cfg.align.num_slots;
    }
    let opts = cfg.feature_options()?;
    let ids: Vec<String> = corpus.books.iter().map(|b| b.book_id.clone()).collect();
    let (tags, mentions, state) = match cfg.decode.mode {
        DecodeMode::Joint => {
            let d = joint_decode(&corpus.books, &ident, &align, &cfg.joint_chain(), &opts)?;
            (d.tags, d.mentions, d.align)
        }
        DecodeMode::Pipeline => {
            let tags: Vec<Vec<Tag>> = corpus.books.iter().map(|b| decode(b, &ident, &opts)).collect();
            let mentions = corpus
                .books
                .iter()
                .zip(&tags)
                .map(|(b, t)| extract_mentions(b, t))
                .collect::<Result<Vec<_>, _>>()?;
            let data = AlignData::new(&corpus.books, mentions, None, opts.clone())?;
            let state = align_all(&data, &align, cfg.align.decode_sweeps, cfg.seed)?;
            (tags, data.mentions, state)
        }
    };
    let (tp, alp) = (run.art.tags.clone(), run.art.alignment.clone());
    run.save(&tp, &format_tags(&ids, &tags))?;
    run.save(&alp, &format_alignment(&ids, &mentions, &state))?;
    info!("decoded {} mentions", mentions.iter().map(Vec::len).sum::<usize>());
    run.finish()
}

/// A `# key fields...` header with the rules listed under it.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleGroup {
    pub header: Vec<String>,
    pub rules: Vec<HornRule>,
}

pub fn format_groups(groups: &[RuleGroup]) -> String {
    let mut s = String::new();
    for g in groups {
        let _ = writeln!(s, "# {}", g.header.join(" "));
        s.push_str(&format_rules(&g.rules));
    }
    s
}

pub fn parse_groups(text: &str) -> Result<Vec<RuleGroup>> {
    let mut out: Vec<RuleGroup> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            out.push(RuleGroup {
                header: h.split_whitespace().map(str::to_string).collect(),
                rules: Vec::new(),
            });
            continue;
        }
        let rule = HornRule::parse(line).map_err(|e| anyhow!("line {}: {e}", i + 1))?;
        match out.last_mut() {
            Some(g) => g.rules.push(rule),
            None => bail!("line {}: rule before any `#` header", i + 1),
        }
    }
    Ok(out)
}

fn mention_header(book: &str, m: &AxiomMention, slot: usize) -> Vec<String> {
    vec!["mention".into(), book.into(), m.start.to_string(), m.end.to_string(), slot.to_string()]
}

fn header_mention(h: &[String]) -> Option<(AxiomMention, usize)> {
    match h {
        [k, book, s, e, slot] if k == "mention" => Some((AxiomMention::new(book.as_str(), s.parse().ok()?, e.parse().ok()?), slot.parse().ok()?)),
        _ => None,
    }
}

pub fn parse_stage(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Parse, cfg);
    let corpus = run.corpus()?;
    let (sp, alp) = (run.art.split.clone(), run.art.alignment.clone());
    run.input(&sp, "split model")?;
    run.input(&alp, "alignment file")?;
    let model = SplitModel::load(&sp)?;
    let aligned = parse_alignment(&read(&alp)?)?;
    let lex_owned = lexicon(cfg)?;
    let lex = lex_owned.as_ref().unwrap_or_else(|| Lexicon::builtin());
    let mut texts = Vec::new();
    for (book_id, m, _) in &aligned {
        let book = corpus.book(book_id).ok_or_else(|| anyhow!("alignment names unknown book `{book_id}`"))?;
        if m.end >= book.len() {
            bail!("mention {}..{} lies outside book `{book_id}`", m.start, m.end);
        }
        let prov = Provenance {
            book_id: book_id.clone(),
            start: m.start,
            end: m.end,
            rank: 0,
        };
        let diagram = book.elements[m.start..=m.end].iter().flat_map(|e| e.figure_refs.first()).next().cloned();
        texts.push((prov, diagram, MentionText::new(&MentionView { book, mention: m })));
    }
    let mut model = model;
    model.beam_size = cfg.split.beam_size;
    model.span_k = cfg.split.span_k;
    let beams = parse_all(&texts, &model, lex, &cfg.feature_options()?)?;
    let groups: Vec<RuleGroup> = aligned
        .iter()
        .zip(beams)
        .map(|((b, m, slot), rules)| RuleGroup {
            header: mention_header(b, m, *slot),
            rules,
        })
        .collect();
    let pp = run.art.parses.clone();
    run.save(&pp, &format_groups(&groups))?;
    run.finish()
}

fn source_order(groups: &[(AxiomMention, usize, Vec<HornRule>)]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for (m, _, _) in groups {
        if !ids.contains(&m.book_id) {
            ids.push(m.book_id.clone());
        }
    }
    ids
}

/// Gold rule per gold cluster, with the index of the first mention carrying
/// a parse.
fn gold_cluster_rules(gold: &GoldAnnotations) -> Result<Vec<Option<HornRule>>> {
    gold.clusters
        .iter()
        .map(|c| {
            c.iter()
                .find_map(|mi| gold.parses.get(mi))
                .map(|t| HornRule::parse(t).map_err(Into::into))
                .transpose()
        })
        .collect()
}

/// Predicted mention index matched to each gold mention.
fn match_to_gold(pred: &[AxiomMention], gold: &[AxiomMention]) -> Vec<Option<usize>> {
    let mut out = vec![None; gold.len()];
    for (i, j) in match_mentions(pred, gold, MatchMode::Relaxed) {
        out[j] = Some(i);
    }
    out
}

fn learned_weights(cfg: &PipelineConfig, parsed: &[(AxiomMention, usize, Vec<HornRule>)], sources: &[String]) -> Result<Vec<f64>> {
    if !cfg.paths.gold.exists() || !cfg.paths.corpus.exists() {
        info!("no gold annotations; source weights stay uniform");
        return Ok(Vec::new());
    }
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let gold = GoldAnnotations::load(&cfg.paths.gold)?.restrict(&corpus);
    let [train, dev, _] = roles(cfg, &corpus)?;
    let labeled: Vec<&str> = train.iter().chain(&dev).map(|&b| corpus.books[b].book_id.as_str()).collect();
    let pred: Vec<AxiomMention> = parsed.iter().map(|p| p.0.clone()).collect();
    let gm: Vec<AxiomMention> = gold.mentions.iter().map(|m| m.to_mention()).collect();
    let matched = match_to_gold(&pred, &gm);
    let mut dev_examples = Vec::new();
    for (c, rule) in gold.clusters.iter().zip(gold_cluster_rules(&gold)?) {
        let Some(rule) = rule else { continue };
        let mut beams = vec![Vec::new(); sources.len()];
        for &mi in c {
            if !labeled.contains(&gm[mi].book_id.as_str()) {
                continue;
            }
            if let (Some(p), Some(s)) = (matched[mi], sources.iter().position(|x| *x == gm[mi].book_id)) {
                beams[s] = parsed[p].2.clone();
            }
        }
        if beams.iter().any(|b| !b.is_empty()) {
            dev_examples.push(FusionExample { beams, gold: rule });
        }
    }
    if dev_examples.is_empty() {
        return Ok(Vec::new());
    }
    let w = learn_source_confidence(&dev_examples, sources.len())?;
    info!("learned source weights {w:?}");
    Ok(w)
}

pub fn fuse_stage(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Fuse, cfg);
    let pp = run.art.parses.clone();
    run.input(&pp, "parse beams")?;
    let parsed: Vec<(AxiomMention, usize, Vec<HornRule>)> = parse_groups(&read(&pp)?)?
        .into_iter()
        .map(|g| {
            let (m, slot) = header_mention(&g.header).ok_or_else(|| anyhow!("bad parse header `{}`", g.header.join(" ")))?;
            Ok((m, slot, g.rules))
        })
        .collect::<Result<_>>()?;
    let sources = source_order(&parsed);
    let method = cfg.fusion_method();
    let mut weights = cfg.fusion.source_weights.clone();
    if weights.is_empty() && method == geoharvest::parser::FusionMethod::SourceConfidence {
        if cfg.paths.gold.exists() {
            run.manifest.input(&cfg.paths.gold)?;
        }
        weights = learned_weights(cfg, &parsed, &sources)?;
    }
    if !weights.is_empty() && weights.len() != sources.len() {
        bail!("fusion.source_weights has {} entries for {} books", weights.len(), sources.len());
    }
    let params = FusionParams {
        source_weights: weights,
        tau: cfg.fusion.tau,
        top: cfg.fusion.top,
    };
    let mut by_slot: BTreeMap<usize, Vec<Vec<HornRule>>> = BTreeMap::new();
    let mut groups = Vec::new();
    for (m, slot, rules) in &parsed {
        if *slot == 0 {
            if let Some(top) = rules.first() {
                groups.push(RuleGroup {
                    header: vec!["mention".into(), m.book_id.clone(), m.start.to_string(), m.end.to_string(), "0".into()],
                    rules: vec![top.clone()],
                });
            }
            continue;
        }
        let s = sources.iter().position(|x| *x == m.book_id).expect("source listed");
        by_slot.entry(*slot).or_insert_with(|| vec![Vec::new(); sources.len()])[s].extend(rules.iter().cloned());
    }
    let mut fused = Vec::new();
    for (slot, beams) in &by_slot {
        if beams.iter().all(Vec::is_empty) {
            continue;
        }
        fused.push(RuleGroup {
            header: vec!["axiom".into(), slot.to_string()],
            rules: vec![fuse(beams, method, &params)?],
        });
    }
    fused.extend(groups);
    let rp = run.art.rules.clone();
    run.save(&rp, &format_groups(&fused))?;
    info!("fused {} axioms", by_slot.len());
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    /// `choice`, `value`, `holds` or `abstain`.
    pub kind: String,
    pub choice: Option<usize>,
    pub value: Option<f64>,
    pub probability: f64,
}

fn problem_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

pub fn solve_stage(cfg: &PipelineConfig, rules_override: Option<&Path>) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Solve, cfg);
    let rp = rules_override.map(Path::to_path_buf).unwrap_or_else(|| run.art.rules.clone());
    run.input(&rp, "rule base")?;
    let problems_path = cfg
        .paths
        .problems
        .clone()
        .ok_or_else(|| anyhow!("missing input artifact: paths.problems is not set"))?;
    run.input(&problems_path, "problems")?;
    let rules = parse_rules(&read(&rp)?)?;
    let names = match &cfg.paths.axiom_names {
        Some(p) => {
            run.input(p, "axiom names")?;
            parse_axiom_names(&read(p)?)?
        }
        None => BTreeMap::new(),
    };
    let lex_owned = lexicon(cfg)?;
    let lex = lex_owned.as_ref().unwrap_or_else(|| Lexicon::builtin());
    let scfg = cfg.solver_config();
    let mut records = Vec::new();
    let mut text = String::new();
    for f in problem_files(&problems_path)? {
        let p = GeometryProblem::load(&f)?;
        let a = answer_question(&p, &rules, lex, &scfg)?;
        let (kind, choice) = match a.kind {
            AnswerKind::Choice(i) => ("choice", Some(i)),
            AnswerKind::Value(_) => ("value", None),
            AnswerKind::Holds => ("holds", None),
            AnswerKind::Abstain => ("abstain", None),
        };
        let _ = writeln!(text, "## {} ({kind}, probability {:.4})", p.id, a.probability);
        if a.kind != AnswerKind::Abstain {
            for line in render_explanation(&a.explanation, &rules, &names, &p.query) {
                let _ = writeln!(text, "{line}");
            }
        }
        records.push(AnswerRecord {
            id: p.id.clone(),
            kind: kind.into(),
            choice,
            value: a.value,
            probability: a.probability,
        });
    }
    let (ap, ep) = (run.art.answers.clone(), run.art.explanations.clone());
    run.save(&ap, &(serde_json::to_string_pretty(&records)? + "\n"))?;
    run.save(&ep, &text)?;
    run.finish()
}

fn majority_slot(slots: impl Iterator<Item = usize>) -> Option<usize> {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for s in slots.filter(|&s| s != 0) {
        *count.entry(s).or_default() += 1;
    }
    count.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(s, _)| s)
}

/// Metrics over whichever prediction artifacts exist.
pub fn evaluate(cfg: &PipelineConfig, run_manifest: Option<&mut Manifest>) -> Result<MetricReport> {
    let art = Artifacts::new(cfg);
    let mut seen = Vec::new();
    require(&cfg.paths.gold, "gold annotations")?;
    seen.push(cfg.paths.gold.clone());
    let corpus = if cfg.paths.corpus.exists() { Some(load_corpus(&cfg.paths.corpus)?) } else { None };
    let mut gold = GoldAnnotations::load(&cfg.paths.gold)?;
    if let Some(c) = &corpus {
        gold = gold.restrict(c);
    }
    let gm: Vec<AxiomMention> = gold.mentions.iter().map(|m| m.to_mention()).collect();
    let mut r = MetricReport::default();

    let mut pred: Vec<AxiomMention> = Vec::new();
    if art.tags.exists() {
        seen.push(art.tags.clone());
        let tags = parse_tags(&read(&art.tags)?)?;
        for (id, t) in &tags {
            let mentions = match corpus.as_ref().and_then(|c| c.book(id)) {
                Some(book) => extract_mentions(book, t)?,
                None => spans_from_tags(id, t),
            };
            pred.extend(mentions);
        }
    }
    let aligned = if art.alignment.exists() {
        seen.push(art.alignment.clone());
        parse_alignment(&read(&art.alignment)?)?
    } else {
        Vec::new()
    };
    if pred.is_empty() {
        pred = aligned.iter().map(|a| a.1.clone()).collect();
    }
    r.push_prf("ident.strict", ident_prf(&pred, &gm, MatchMode::Strict));
    r.push_prf("ident.relaxed", ident_prf(&pred, &gm, MatchMode::Relaxed));
    if let Some(c) = &corpus {
        let [_, _, test] = roles(cfg, c)?;
        let ids: Vec<&str> = test.iter().map(|&b| c.books[b].book_id.as_str()).collect();
        let p: Vec<AxiomMention> = pred.iter().filter(|m| ids.contains(&m.book_id.as_str())).cloned().collect();
        let g: Vec<AxiomMention> = gm.iter().filter(|m| ids.contains(&m.book_id.as_str())).cloned().collect();
        r.push_prf("test.ident.strict", ident_prf(&p, &g, MatchMode::Strict));
        r.push_prf("test.ident.relaxed", ident_prf(&p, &g, MatchMode::Relaxed));
    }

    let am: Vec<AxiomMention> = aligned.iter().map(|a| a.1.clone()).collect();
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut singles = Vec::new();
    for (i, (_, _, slot)) in aligned.iter().enumerate() {
        if *slot == 0 {
            singles.push(vec![i]);
        } else {
            clusters.entry(*slot).or_default().push(i);
        }
    }
    let pred_part: Vec<Vec<usize>> = clusters.into_values().chain(singles).collect();
    if gm.is_empty() {
        r.push_prf("align.pairwise", Default::default());
        r.push("align.nmi", 0.0);
    } else {
        let projected = project_to_gold(&am, &pred_part, &gm)?;
        let gold_part = complete_partition(&gold.clusters, gm.len());
        r.push_prf("align.pairwise", alignment_pair_prf(&projected, &gold_part)?);
        r.push("align.nmi", if am.is_empty() { 0.0 } else { nmi(&projected, &gold_part)? });
    }

    let matched = match_to_gold(&am, &gm);
    let gold_rules: Vec<(usize, HornRule)> = gold
        .parses
        .iter()
        .map(|(mi, t)| HornRule::parse(t).map(|h| (*mi, h)))
        .collect::<Result<_, _>>()?;
    let golds: Vec<HornRule> = gold_rules.iter().map(|g| g.1.clone()).collect();
    if art.parses.exists() && !golds.is_empty() {
        seen.push(art.parses.clone());
        let parsed = parse_groups(&read(&art.parses)?)?;
        let mut top: BTreeMap<AxiomMention, HornRule> = BTreeMap::new();
        for g in parsed {
            if let (Some((m, _)), Some(rule)) = (header_mention(&g.header), g.rules.into_iter().next()) {
                top.insert(m, rule);
            }
        }
        let preds: Vec<Option<HornRule>> = gold_rules
            .iter()
            .map(|(mi, _)| matched[*mi].and_then(|p| top.get(&am[p]).cloned()))
            .collect();
        r.push_prf("parse.literal", parse_prf(&preds, &golds, ParseLevel::Literal)?);
        r.push_prf("parse.full", parse_prf(&preds, &golds, ParseLevel::Full)?);
    } else {
        r.push_prf("parse.literal", Default::default());
        r.push_prf("parse.full", Default::default());
    }
    let cluster_rules = gold_cluster_rules(&gold)?;
    if art.rules.exists() && cluster_rules.iter().any(Option::is_some) {
        seen.push(art.rules.clone());
        let fused: BTreeMap<usize, HornRule> = parse_groups(&read(&art.rules)?)?
            .into_iter()
            .filter_map(|g| match g.header.as_slice() {
                [k, s] if k == "axiom" => Some((s.parse().ok()?, g.rules.into_iter().next()?)),
                _ => None,
            })
            .collect();
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for (c, rule) in gold.clusters.iter().zip(cluster_rules) {
            let Some(rule) = rule else { continue };
            let slot = majority_slot(c.iter().filter_map(|&mi| matched[mi].map(|p| aligned[p].2)));
            preds.push(slot.and_then(|s| fused.get(&s).cloned()));
            golds.push(rule);
        }
        r.push_prf("fused.literal", parse_prf(&preds, &golds, ParseLevel::Literal)?);
        r.push_prf("fused.full", parse_prf(&preds, &golds, ParseLevel::Full)?);
    }

    if art.answers.exists() {
        seen.push(art.answers.clone());
        let answers: Vec<AnswerRecord> = serde_json::from_str(&read(&art.answers)?)?;
        let key = gold.problems.clone().unwrap_or_default();
        let outcomes: Vec<AnswerOutcome> = answers
            .iter()
            .filter_map(|a| {
                let want = key.get(&a.id)?;
                Some(match (a.kind.as_str(), a.value) {
                    ("abstain", _) | (_, None) => AnswerOutcome::Abstain,
                    (_, Some(v)) if (v - want).abs() <= cfg.solver.choice_tolerance * want.abs().max(1.0) => AnswerOutcome::Correct,
                    _ => AnswerOutcome::Wrong,
                })
            })
            .collect();
        r.push("sat.questions", outcomes.len() as f64);
        r.push("sat.score", sat_score(&outcomes));
    }
    if let Some(m) = run_manifest {
        for p in seen {
            m.input(&p)?;
        }
    }
    Ok(r)
}

fn spans_from_tags(id: &str, tags: &[Tag]) -> Vec<AxiomMention> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, t) in tags.iter().enumerate() {
        match t {
            Tag::B => {
                if let Some(s) = start {
                    out.push(AxiomMention::new(id, s, k - 1));
                }
                start = Some(k);
            }
            Tag::I if start.is_none() => start = Some(k),
            Tag::I => {}
            Tag::O => {
                if let Some(s) = start.take() {
                    out.push(AxiomMention::new(id, s, k - 1));
                }
            }
        }
    }
    if let Some(s) = start {
        out.push(AxiomMention::new(id, s, tags.len() - 1));
    }
    out
}

/// Gold clusters plus a singleton for every mention they leave out.
fn complete_partition(clusters: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let mut covered = vec![false; n];
    let mut out: Vec<Vec<usize>> = clusters.iter().filter(|c| !c.is_empty()).cloned().collect();
    for &m in clusters.iter().flatten() {
        covered[m] = true;
    }
    out.extend((0..n).filter(|&m| !covered[m]).map(|m| vec![m]));
    out
}

pub fn eval_stage(cfg: &PipelineConfig) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Eval, cfg);
    let report = evaluate(cfg, Some(&mut run.manifest))?;
    let (mp, jp) = (run.art.metrics.clone(), run.art.metrics_json.clone());
    run.save(&mp, &report.to_text())?;
    run.save(&jp, &(serde_json::to_string_pretty(&report.to_json())? + "\n"))?;
    print!("{}", report.to_text());
    run.finish()
}

/// One ablation row: metrics after retraining with `disabled` switched off.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub ident_strict_f1: f64,
    pub ident_relaxed_f1: f64,
    pub align_nmi: f64,
    pub parse_literal_f1: f64,
    pub parse_full_f1: f64,
}

fn ablation_row(cfg: &PipelineConfig, corpus: &Corpus, gold: &GoldAnnotations, group: &str, opts: &FeatureOptions) -> Result<AblationRow> {
    let [_, _, test] = roles(cfg, corpus)?;
    let eval_books: Vec<usize> = if test.is_empty() { (0..corpus.books.len()).collect() } else { test };
    let ident = train_ident_model(cfg, corpus, gold, opts)?;
    let mut pred = Vec::new();
    let mut gm = Vec::new();
    for &b in &eval_books {
        let book = &corpus.books[b];
        pred.extend(extract_mentions(book, &decode(book, &ident, opts))?);
        gm.extend(gold.mentions_for(&book.book_id));
    }
    let align = train_align_model(cfg, corpus, gold, opts)?;
    let data = AlignData::from_gold(corpus, gold, opts.clone())?;
    let state: AlignmentState = align_all(&data, &align, cfg.align.decode_sweeps, cfg.seed)?;
    let gold_state = data.gold.clone().unwrap_or_else(|| AlignmentState::unaligned(&data.sizes(), 1));
    let align_nmi = if data.sizes().iter().sum::<usize>() == 0 { 0.0 } else { nmi(&flat_partition(&state), &flat_partition(&gold_state))? };
    let split = train_split(cfg, corpus, gold, opts)?;
    let lex = Lexicon::builtin();
    let mut texts = Vec::new();
    let mut golds = Vec::new();
    for (mi, g) in gold.mentions.iter().enumerate() {
        let m = g.to_mention();
        let Some(b) = corpus.book_index(&m.book_id) else { continue };
        let Some(rule) = gold.parses.get(&mi) else { continue };
        if !eval_books.contains(&b) {
            continue;
        }
        let prov = Provenance { book_id: m.book_id.clone(), start: m.start, end: m.end, rank: 0 };
        texts.push((prov, None, MentionText::new(&MentionView { book: &corpus.books[b], mention: &m })));
        golds.push(HornRule::parse(rule)?);
    }
    let beams = parse_all(&texts, &split, lex, opts)?;
    let preds: Vec<Option<HornRule>> = beams.into_iter().map(|b| b.into_iter().next()).collect();
    Ok(AblationRow {
        group: group.into(),
        ident_strict_f1: ident_prf(&pred, &gm, MatchMode::Strict).f1,
        ident_relaxed_f1: ident_prf(&pred, &gm, MatchMode::Relaxed).f1,
        align_nmi,
        parse_literal_f1: parse_prf(&preds, &golds, ParseLevel::Literal)?.f1,
        parse_full_f1: parse_prf(&preds, &golds, ParseLevel::Full)?.f1,
    })
}

/// Retrains per ablated group and reports a metric table; the first row is
/// the unablated baseline.
pub fn run_ablation(cfg: &PipelineConfig, groups: &[String]) -> Result<Vec<AblationRow>> {
    for g in groups {
        Ablation::from_names(&[g])?;
    }
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let gold = GoldAnnotations::load(&cfg.paths.gold)?.restrict(&corpus);
    let base = cfg.feature_options()?;
    let mut rows = vec![ablation_row(cfg, &corpus, &gold, "none", &base)?];
    for g in groups {
        let mut names = cfg.ablation.clone();
        names.push(g.clone());
        let opts = FeatureOptions {
            ablation: Ablation::from_names(&names)?,
            ..FeatureOptions::default()
        };
        rows.push(ablation_row(cfg, &corpus, &gold, g, &opts)?);
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("group\tident.strict.f1\tident.relaxed.f1\talign.nmi\tparse.literal.f1\tparse.full.f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.group, r.ident_strict_f1, r.ident_relaxed_f1, r.align_nmi, r.parse_literal_f1, r.parse_full_f1
        );
    }
    s
}

pub fn ablate_stage(cfg: &PipelineConfig, groups: &[String]) -> Result<PathBuf> {
    let mut run = Run::new(Stage::Eval, cfg);
    run.manifest.stage = "ablate".into();
    require(&cfg.paths.corpus, "corpus directory")?;
    require(&cfg.paths.gold, "gold annotations")?;
    run.manifest.input(&cfg.paths.corpus)?;
    run.manifest.input(&cfg.paths.gold)?;
    let rows = run_ablation(cfg, groups)?;
    let table = format_ablation(&rows);
    let p = run.art.ablation.clone();
    run.save(&p, &table)?;
    print!("{table}");
    run.finish()
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<PathBuf> {
    match stage {
        Stage::Synth => synth(cfg),
        Stage::TrainIdent => train_ident(cfg),
        Stage::TrainAlign => train_align(cfg),
        Stage::TrainJoint => train_joint(cfg),
        Stage::TrainSplit => train_split_stage(cfg),
        Stage::Decode => decode_stage(cfg),
        Stage::Parse => parse_stage(cfg),
        Stage::Fuse => fuse_stage(cfg),
        Stage::Solve => solve_stage(cfg, None),
        Stage::Eval => eval_stage(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_groups_round_trip() {
        let g = vec![
            RuleGroup {
                header: vec!["mention".into(), "b1".into(), "3".into(), "5".into(), "2".into()],
                rules: vec![HornRule::parse("0.7 :: isTriangle(T) => eq(x = 180) .").unwrap()],
            },
            RuleGroup {
                header: vec!["axiom".into(), "4".into()],
                rules: Vec::new(),
            },
        ];
        let text = format_groups(&g);
        assert_eq!(parse_groups(&text).unwrap(), g);
        assert!(parse_groups("1 :: p(a) => q(a) .").is_err());
    }

    #[test]
    fn tag_spans_without_a_book() {
        use Tag::*;
        let m = spans_from_tags("x", &[O, B, I, B, O, I]);
        let got: Vec<(usize, usize)> = m.iter().map(|m| (m.start, m.end)).collect();
        assert_eq!(got, vec![(1, 2), (3, 3), (5, 5)]);
    }

    #[test]
    fn default_roles_split_in_order() {
        let (corpus, _) = geoharvest::corpus::generate_synthetic_corpus(&Default::default()).unwrap();
        let [a, b, c] = roles(&PipelineConfig::default(), &corpus).unwrap();
        assert_eq!((a, b, c), (vec![0, 1], vec![2], vec![3]));
    }
}
