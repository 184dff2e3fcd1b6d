//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary is always printed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use geoharvest::align::{
    feasible, gibbs_step, gibbs_sweep, order_violations, satisfies_c1, train_alignment, AlignData, AlignModel, AlignTrainConfig,
    AlignmentState, ConstraintMode, PairTable, Scorer,
};
use geoharvest::corpus::{
    extract_mentions, generate_synthetic_corpus, load_document, tags_from_mentions, AxiomMention, Book, DocNode, SynthConfig, Tag,
};
use geoharvest::crf::{
    decode, log_partition, nll_gradient, train_identification, viterbi_with_score, IdentModel, LabeledBook, LatticeScores, TrainConfig,
};
use geoharvest::eval::{end_to_end_nmi, ident_prf, nmi, sat_score, AnswerOutcome, MatchMode};
use geoharvest::features::{FeatureOptions, MentionText};
use geoharvest::joint::{chain_step, joint_decode, tags_of, JointConfig, JointContext, MoveConfig, Span};
use geoharvest::logic::{parse_rules, HornRule, Lexicon, Literal};
use geoharvest::parser::{
    best_combined_score, enumerate_splits, fuse, map_span_to_formulas, parse_mention, score_split, FusionMethod, FusionParams, SplitModel,
};
use geoharvest::solver::{answer_question, mpe_infer, parse_axiom_names, render_explanation, AnswerKind, Fact, GeometryProblem, ItemKey,
    Query, SolverConfig, WeightedFact};
use geoharvest::align::flat_partition;
use geoharvest::equation::Naming;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t0: Instant, limit: Duration) -> Result<(), String> {
    let e = t0.elapsed();
    ensure(e < limit, || format!("took {e:.2?}, limit {limit:?}"))
}

fn tv(target: &HashMap<String, f64>, counts: &HashMap<String, f64>, n: f64) -> f64 {
    let z: f64 = target.values().sum();
    let keys: BTreeSet<&String> = target.keys().chain(counts.keys()).collect();
    keys.into_iter()
        .map(|k| (target.get(k).unwrap_or(&0.0) / z - counts.get(k).unwrap_or(&0.0) / n).abs())
        .sum::<f64>()
        / 2.0
}

fn random_lattice(n: usize, ties: bool, rng: &mut ChaCha8Rng) -> LatticeScores {
    let mut lat = LatticeScores::zeros(n);
    let draw = |rng: &mut ChaCha8Rng| if ties { rng.random_range(-1..=1) as f64 } else { rng.random_range(-2.0..2.0) };
    for v in lat.start.iter_mut() {
        *v = draw(rng);
    }
    for v in lat.trans.iter_mut().flatten().flatten() {
        *v = draw(rng);
    }
    lat
}

fn all_paths(n: usize) -> Vec<Vec<Tag>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| Tag::ALL.iter().map(move |t| [p.clone(), vec![*t]].concat()))
            .collect();
    }
    out
}

fn crf_oracle() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let lat = random_lattice(n, case % 2 == 0, &mut rng);
        let paths = all_paths(n);
        let scores: Vec<f64> = paths.iter().map(|p| lat.path_score(p)).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        // paths are generated in lexicographic tag order, so the first maximum is the tie-break winner
        let best = scores.iter().position(|&s| s == m).unwrap();
        let (vp, _) = viterbi_with_score(&lat);
        ensure(vp == paths[best], || format!("case {case}: viterbi {vp:?} vs brute force {:?}", paths[best]))?;
        let err = (log_partition(&lat) - lz).abs();
        worst = worst.max(err);
        ensure(err < 1e-10, || format!("case {case}: log partition off by {err:e}"))?;
    }
    within(t0, Duration::from_secs(5))?;
    Ok(format!("100 lattices, max |ΔlogZ| {worst:.1e}, {:.2?}", t0.elapsed()))
}

fn random_book(id: &str, n: usize, rng: &mut ChaCha8Rng) -> Book {
    const WORDS: &[&str] = &["the", "angles", "of", "a", "triangle", "sum", "to", "180", "parallel", "lines", "circle", "equal", "proof", "if", "then"];
    let nodes = (0..n)
        .map(|_| {
            let len = rng.random_range(2..7);
            let text: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let kind = if rng.random_bool(0.2) { "heading" } else { "sentence" };
            let mut node = DocNode::element(kind, &text.join(" "));
            node.typography.bold = rng.random_bool(0.3);
            node.typography.boxed = rng.random_bool(0.2);
            if rng.random_bool(0.3) {
                node.typography.label = ["theorem", "axiom", "corollary"][rng.random_range(0..3)].into();
            }
            node
        })
        .collect();
    load_document(Path::new("random.json"), id, &DocNode::container("section", nodes)).unwrap()
}

fn gradient_check() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let opts = FeatureOptions::default();
    let h = 1e-5;
    let mut coords = 0;
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = rng.random_range(2..=8);
        let book = random_book("g", n, &mut rng);
        let tags: Vec<Tag> = (0..n).map(|_| Tag::from_index(rng.random_range(0..3))).collect();
        let lb = [LabeledBook { book: &book, tags: &tags }];
        let (_, keys) = nll_gradient(&lb, &IdentModel::default(), &opts).map_err(|e| e.to_string())?;
        let mut model = IdentModel::default();
        for k in keys.keys() {
            model.theta.insert(k.clone(), rng.random_range(-1.0..1.0));
        }
        let (_, grad) = nll_gradient(&lb, &model, &opts).map_err(|e| e.to_string())?;
        for (k, g) in &grad {
            let mut plus = model.clone();
            *plus.theta.entry(k.clone()).or_default() += h;
            let mut minus = model.clone();
            *minus.theta.entry(k.clone()).or_default() -= h;
            let fp = nll_gradient(&lb, &plus, &opts).map_err(|e| e.to_string())?.0;
            let fm = nll_gradient(&lb, &minus, &opts).map_err(|e| e.to_string())?.0;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
            coords += 1;
            ensure(rel <= 1e-4, || format!("case {case} `{k}`: analytic {g} vs numeric {fd}"))?;
        }
    }
    within(t0, Duration::from_secs(10))?;
    Ok(format!("20 instances, {coords} coordinates, max rel err {worst:.1e}, {:.2?}", t0.elapsed()))
}

fn hard_closure() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let sizes = [5usize, 4, 6];
    let mut members = Vec::new();
    let mut next = 0;
    for &n in &sizes {
        members.push((next..next + n).collect::<Vec<_>>());
        next += n;
    }
    let scores: Vec<f64> = (0..next * next).map(|_| rng.random_range(-2.0..3.0)).collect();
    let pair = move |a: usize, b: usize| scores[a.min(b) * next + a.max(b)];
    let sc = Scorer {
        members: &members,
        pair: &pair,
        mode: ConstraintMode::Hard,
        nu: 0.0,
    };
    let u = 8;
    let mut st = AlignmentState {
        slots: vec![vec![1, 0, 3, 0, 7], vec![0, 2, 0, 8], vec![1, 2, 0, 0, 5, 6]],
        num_slots: u,
    };
    ensure(feasible(&st), || "start state infeasible".into())?;
    let steps = 10_000;
    for step in 0..steps {
        let b = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[b]);
        gibbs_step(&mut st, &sc, b, i, &mut rng);
        let c1 = st.slots.iter().all(|x| satisfies_c1(x));
        let c2 = st.slots.iter().all(|x| order_violations(x) == 0);
        let c3 = st.slots.iter().flatten().all(|&s| s <= u) && st.sizes() == sizes;
        ensure(c1 && c2 && c3, || format!("step {step}: {:?} violates C1 {c1} C2 {c2} C3 {c3}", st.slots))?;
    }
    Ok(format!("{steps} single-site steps, no violation"))
}

fn all_alignments(sizes: &[usize], u: usize) -> Vec<AlignmentState> {
    let mut out = vec![Vec::<Vec<usize>>::new()];
    for &n in sizes {
        let mut books = vec![Vec::new()];
        for _ in 0..n {
            books = books.into_iter().flat_map(|b: Vec<usize>| (0..=u).map(move |z| [b.clone(), vec![z]].concat())).collect();
        }
        out = out
            .into_iter()
            .flat_map(|s| books.iter().map(move |b| [s.clone(), vec![b.clone()]].concat()))
            .collect();
    }
    out.into_iter().map(|slots| AlignmentState { slots, num_slots: u }).collect()
}

fn toy_weight(st: &AlignmentState, members: &[Vec<usize>], pair: &dyn Fn(usize, usize) -> f64, nu: f64) -> f64 {
    let mut s = 0.0;
    for (b1, x) in st.slots.iter().enumerate() {
        for (b2, y) in st.slots.iter().enumerate().skip(b1 + 1) {
            for (i, &a) in x.iter().enumerate() {
                for (j, &c) in y.iter().enumerate() {
                    if a != 0 && a == c {
                        s += pair(members[b1][i], members[b2][j]);
                    }
                }
            }
        }
    }
    s -= nu * st.slots.iter().map(|b| order_violations(b) as f64).sum::<f64>();
    s.exp()
}

fn toy_pair(a: usize, b: usize) -> f64 {
    [[0.0, 0.0, 1.2, -0.4], [0.0, 0.0, 0.3, 0.9]][a.min(b)][a.max(b)]
}

fn sample_toy(mode: ConstraintMode, nu: f64, sweeps: usize, seed: u64) -> HashMap<String, f64> {
    let members = vec![vec![0, 1], vec![2, 3]];
    let pair = |a: usize, b: usize| toy_pair(a, b);
    let sc = Scorer {
        members: &members,
        pair: &pair,
        mode,
        nu,
    };
    let mut st = AlignmentState::unaligned(&[2, 2], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 {
        gibbs_sweep(&mut st, &sc, &[false, false], &mut rng);
    }
    let mut counts = HashMap::new();
    for _ in 0..sweeps {
        gibbs_sweep(&mut st, &sc, &[false, false], &mut rng);
        *counts.entry(format!("{:?}", st.slots)).or_default() += 1.0;
    }
    counts
}

fn toy_target(filter: impl Fn(&AlignmentState) -> bool, nu: f64) -> HashMap<String, f64> {
    let members = vec![vec![0, 1], vec![2, 3]];
    all_alignments(&[2, 2], 2)
        .into_iter()
        .filter(|s| filter(s))
        .map(|s| (format!("{:?}", s.slots), toy_weight(&s, &members, &toy_pair, nu)))
        .collect()
}

fn gibbs_toy() -> Result<String, String> {
    let t0 = Instant::now();
    let sweeps = 50_000;
    let counts = sample_toy(ConstraintMode::Hard, 0.0, sweeps, 404);
    let target = toy_target(feasible, 0.0);
    let d = tv(&target, &counts, sweeps as f64);
    ensure(d < 0.05, || format!("TV {d:.4} over {} feasible states", target.len()))?;
    within(t0, Duration::from_secs(30))?;
    Ok(format!("TV {d:.4} over {} feasible states, {:.2?}", target.len(), t0.elapsed()))
}

fn joint_toy() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 4;
    let lat = random_lattice(n, false, &mut rng);
    let nodes = (0..n).map(|k| DocNode::element("sentence", &format!("item{k} text"))).collect();
    let books = vec![load_document(Path::new("toy.json"), "toy", &DocNode::container("section", nodes)).unwrap()];
    let nu = 0.7;
    let align = AlignModel {
        nu,
        mode: ConstraintMode::Soft,
        ..AlignModel::default()
    };
    let moves = MoveConfig { exact: true, ..MoveConfig::default() };
    let mut ctx = JointContext::new(vec![lat.clone()], PairTable::new(&books, FeatureOptions::default()), &align, 2, moves);
    let mut target = HashMap::new();
    for spans in span_sets(n, 0) {
        for z in all_alignments(&[spans.len()], 2).into_iter().filter(|s| satisfies_c1(&s.slots[0])) {
            let w = lat.path_score(&tags_of(&spans, n)) - nu * order_violations(&z.slots[0]) as f64;
            target.insert(format!("{spans:?}{:?}", z.slots[0]), w.exp());
        }
    }
    let mut st = ctx.state_from_tags(&[vec![Tag::O; n]]).map_err(|e| e.to_string())?;
    let steps = 100_000;
    let mut counts = HashMap::new();
    for _ in 0..steps {
        chain_step(&mut st, &mut ctx, &[false], &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(format!("{:?}{:?}", st.spans[0], st.align.slots[0])).or_default() += 1.0;
    }
    let d = tv(&target, &counts, steps as f64);
    ensure(d < 0.08, || format!("TV {d:.4} over {} joint states", target.len()))?;
    Ok(format!("TV {d:.4} over {} joint states", target.len()))
}

fn span_sets(n: usize, from: usize) -> Vec<Vec<Span>> {
    let mut out = vec![Vec::new()];
    for s in from..n {
        for e in s..n {
            for rest in span_sets(n, e + 1) {
                out.push([vec![(s, e)], rest].concat());
            }
        }
    }
    out
}

fn soft_constraints() -> Result<String, String> {
    let sweeps = 50_000;
    let strict = sample_toy(ConstraintMode::Soft, 20.0, sweeps, 606);
    let violating: f64 = strict
        .iter()
        .filter(|(k, _)| {
            let slots: Vec<Vec<usize>> = serde_json::from_str(k).unwrap();
            slots.iter().any(|b| order_violations(b) > 0)
        })
        .map(|(_, c)| c)
        .sum::<f64>()
        / sweeps as f64;
    ensure(violating < 0.01, || format!("ν=20 leaves {:.2}% on violating states", 100.0 * violating))?;
    let free = sample_toy(ConstraintMode::Soft, 0.0, sweeps, 607);
    let target = toy_target(|s| s.slots.iter().all(|b| satisfies_c1(b)), 0.0);
    let d = tv(&target, &free, sweeps as f64);
    ensure(d < 0.05, || format!("ν=0 TV {d:.4} against the unconstrained target"))?;
    Ok(format!("ν=20 violating mass {:.3}%, ν=0 TV {d:.4}", 100.0 * violating + 0.0))
}

fn beam_completeness() -> Result<String, String> {
    const VOCAB: &[&str] = &[
        "if", "then", "the", "a", "triangle", "ABC", "angles", "sum", "180", "lines", "AB", "CD", "are", "parallel", "circle", "O",
        "equal", "is", "similar", "DEF", "right", "angle", "so", "and",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let lex = Lexicon::builtin();
    let opts = FeatureOptions::default();
    let names = ["sim_words", "sim_relations", "sim_args", "relations_left", "relations_right", "len_ratio", "head_left_offset", "head_right_offset"];
    let mut narrower_differs = 0;
    let mut done = 0;
    while done < 50 {
        let len = rng.random_range(2..=12);
        let words: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
        let cut = rng.random_range(1..=len);
        let mut nodes = vec![DocNode::element("sentence", &words[..cut].join(" "))];
        if cut < len {
            nodes.push(DocNode::element("sentence", &words[cut..].join(" ")));
        }
        let book = load_document(Path::new("m.json"), "m", &DocNode::container("section", nodes)).unwrap();
        let text = MentionText::from_elements(&book.elements);
        let mut model = SplitModel::default();
        for n in names {
            model.w.insert(n.into(), rng.random_range(-3.0..3.0));
        }
        let cands = enumerate_splits(&text).map_err(|e| e.to_string())?;
        let mut best = f64::NEG_INFINITY;
        let mut winners: BTreeSet<String> = BTreeSet::new();
        for c in &cands {
            let s = score_split(&text, c, &model, &opts).map_err(|e| e.to_string())?;
            let prem = map_span_to_formulas(&text.tokens[c.premise_span()], &[], lex, model.span_k).map_err(|e| e.to_string())?;
            let concl = map_span_to_formulas(&text.tokens[c.conclusion_span(len)], &[], lex, model.span_k).map_err(|e| e.to_string())?;
            for p in &prem {
                for q in concl.iter().filter(|q| !q.formula.is_empty()) {
                    let v = s + p.score + q.score;
                    let body = HornRule::new(p.formula.clone(), q.formula.clone(), 1.0).lifted().canonical().body();
                    if v > best + 1e-12 {
                        best = v;
                        winners.clear();
                    }
                    if (v - best).abs() <= 1e-12 {
                        winners.insert(body);
                    }
                }
            }
        }
        if winners.is_empty() {
            continue;
        }
        done += 1;
        let full = SplitModel { beam_size: cands.len(), ..model.clone() };
        let beam = parse_mention(&text, &full, lex, &opts).map_err(|e| e.to_string())?;
        let top = beam.first().map(|r| r.canonical().body()).unwrap_or_default();
        ensure(winners.contains(&top), || format!("`{}`: beam top `{top}` not among {winners:?}", words.join(" ")))?;
        let exhaustive = best_combined_score(&text, &full, lex, &opts).map_err(|e| e.to_string())?;
        ensure(exhaustive.is_some_and(|e| (e - best).abs() < 1e-12), || format!("exhaustive score {exhaustive:?} vs oracle {best}"))?;
        let narrow = SplitModel { beam_size: 1, ..model };
        let top1 = parse_mention(&text, &narrow, lex, &opts).map_err(|e| e.to_string())?;
        if top1.first().is_none_or(|r| !winners.contains(&r.canonical().body())) {
            narrower_differs += 1;
        }
    }
    Ok(format!("50 mentions match the exhaustive optimum; beam size 1 misses {narrower_differs}"))
}

fn fusion_fixture() -> Result<String, String> {
    let r = |s: &str, c: f64| {
        let mut h = HornRule::parse(&format!("1 :: {s} .")).unwrap();
        h.confidence = c;
        h
    };
    let a = "p(X) => q(X)";
    let b = "p(X) , r(X) => q(X)";
    let c = "s(X) => q(X)";
    let d = "p(X) => t(X)";
    let beams = vec![
        vec![r(a, 0.5), r(b, 0.3), r(d, 0.2)],
        vec![r(b, 0.6), r(a, 0.4)],
        vec![r(c, 0.97), r(b, 0.03)],
    ];
    let body = |s: &str| HornRule::parse(&format!("1 :: {s} .")).unwrap().canonical().body();
    // winners and confidences enumerated by hand
    let expect = [
        (FusionMethod::Majority, FusionParams::default(), b, 1.0),
        (FusionMethod::Average, FusionParams::default(), c, 0.97 / 3.0),
        (
            FusionMethod::SourceConfidence,
            FusionParams { source_weights: vec![0.6, 0.3, 0.1], ..FusionParams::default() },
            a,
            0.6 * 0.5 + 0.3 * 0.4,
        ),
        (FusionMethod::PredicateScore, FusionParams::default(), a, (2.03 + 2.8) / 2.0 / 2.8),
    ];
    let mut out = Vec::new();
    for (m, p, want, conf) in expect {
        let got = fuse(&beams, m, &p).map_err(|e| e.to_string())?;
        ensure(got.canonical().body() == body(want), || format!("{}: got `{}`, want `{want}`", m.as_str(), got.body()))?;
        ensure((got.confidence - conf).abs() < 1e-9, || format!("{}: confidence {} vs {conf}", m.as_str(), got.confidence))?;
        out.push(format!("{}={}", m.as_str(), got.body()));
    }
    Ok(out.join("; "))
}

fn fixture(name: &str) -> (Vec<HornRule>, GeometryProblem) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name);
    let rules = parse_rules(&std::fs::read_to_string(dir.join("rules.txt")).unwrap()).unwrap();
    (rules, GeometryProblem::load(&dir.join("problem.json")).unwrap())
}

fn solver_fixtures() -> Result<String, String> {
    let lex = Lexicon::builtin();
    let cfg = SolverConfig::default();
    let t0 = Instant::now();
    let (rules, problem) = fixture("inscribed_angle");
    let names_text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/inscribed_angle/names.txt")).unwrap();
    let names = parse_axiom_names(&names_text).map_err(|e| e.to_string())?;
    let a = answer_question(&problem, &rules, lex, &cfg).map_err(|e| e.to_string())?;
    ensure(a.kind == AnswerKind::Choice(2) && a.value.is_some_and(|v| (v - 60.0).abs() < 1e-9), || format!("inscribed angle answer {a:?}"))?;
    let lines = render_explanation(&a.explanation, &rules, &names, &problem.query);
    ensure(lines.len() == 4, || format!("{} explanation steps", lines.len()))?;
    for (line, name) in lines.iter().zip(names.values()) {
        ensure(line.contains(name.as_str()), || format!("step `{line}` does not name `{name}`"))?;
    }
    within(t0, Duration::from_secs(1))?;
    let t1 = Instant::now();
    let (rules, problem) = fixture("pythagoras");
    let a = answer_question(&problem, &rules, lex, &cfg).map_err(|e| e.to_string())?;
    let ab = a.value.unwrap_or(f64::NAN);
    ensure((ab - 5.0).abs() <= 5.0 * 1e-6, || format!("AB = {ab}"))?;
    within(t1, Duration::from_secs(1))?;
    Ok(format!("∠ADB = 60 in {} steps; AB = {ab}", lines.len()))
}

struct PropInstance {
    rules: Vec<(Vec<usize>, usize, f64)>,
    facts: BTreeMap<usize, f64>,
    query: usize,
}

fn oracle_best(inst: &PropInstance, goal: usize, path: &mut Vec<usize>) -> (f64, BTreeSet<(usize, usize)>) {
    let mut best = (inst.facts.get(&goal).copied().unwrap_or(0.0), BTreeSet::new());
    if path.contains(&goal) {
        return (0.0, BTreeSet::new());
    }
    path.push(goal);
    for (ri, (prem, concl, conf)) in inst.rules.iter().enumerate() {
        if *concl != goal {
            continue;
        }
        let mut p = *conf;
        let mut used = BTreeSet::from([(ri, goal)]);
        for &q in prem {
            let (pq, uq) = oracle_best(inst, q, path);
            p *= pq;
            used.extend(uq);
        }
        if p > best.0 {
            best = (p, used);
        }
    }
    path.pop();
    best
}

fn solver_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let lex = Lexicon::builtin();
    let cfg = SolverConfig::default();
    let atom = |i: usize| format!("p{i}(c)");
    let mut nonzero = 0;
    let mut proofs = 0;
    for case in 0..50 {
        let atoms = 8;
        let nr = rng.random_range(1..=6);
        let rules: Vec<(Vec<usize>, usize, f64)> = (0..nr)
            .map(|_| {
                let k = rng.random_range(1..=3);
                let prem: BTreeSet<usize> = (0..k).map(|_| rng.random_range(0..atoms)).collect();
                let conf = rng.random_range(1..=10) as f64 / 10.0;
                (prem.into_iter().collect(), rng.random_range(0..atoms), conf)
            })
            .collect();
        let nf = rng.random_range(1..=8);
        let facts: BTreeMap<usize, f64> = (0..nf).map(|_| (rng.random_range(0..atoms), rng.random_range(1..=10) as f64 / 10.0)).collect();
        let inst = PropInstance { rules, facts, query: rng.random_range(0..atoms) };
        let text: Vec<String> = inst
            .rules
            .iter()
            .map(|(p, c, w)| format!("{w} :: {} => {} .", p.iter().map(|&i| atom(i)).collect::<Vec<_>>().join(" , "), atom(*c)))
            .collect();
        let horn = parse_rules(&text.join("\n")).map_err(|e| e.to_string())?;
        let lit = |i: usize| Literal::parse(&atom(i), Naming::Ground).unwrap();
        let problem = GeometryProblem {
            id: format!("case{case}"),
            facts: inst.facts.iter().map(|(&i, &w)| WeightedFact { fact: Fact::Lit(lit(i)), weight: w }).collect(),
            query: Query::Lit(lit(inst.query)),
            choices: None,
        };
        let (p, ex, _) = mpe_infer(&problem, &horn, lex, &cfg).map_err(|e| e.to_string())?;
        let (want, used) = oracle_best(&inst, inst.query, &mut Vec::new());
        ensure((p - want).abs() <= 1e-12 * want.max(1e-300), || format!("case {case}: solver {p} vs enumeration {want}"))?;
        if want > 0.0 {
            nonzero += 1;
        }
        let got: BTreeSet<(usize, usize)> = ex
            .steps
            .iter()
            .map(|s| match &s.derived {
                ItemKey::Lit(l) => (s.rule, l.predicate[1..].parse::<usize>().unwrap()),
                ItemKey::Measure(_) => (usize::MAX, 0),
            })
            .collect();
        // compare proofs only when the optimum is unique
        let second = second_best(&inst, want);
        if second < want - 1e-9 {
            proofs += 1;
            ensure(got == used, || format!("case {case}: proof {got:?} vs enumeration {used:?}"))?;
        }
    }
    Ok(format!("50 instances, {nonzero} derivable, {proofs} unique proofs compared"))
}

/// Best probability of any proof tree whose rule set differs from the
/// optimum, by enumerating every proof tree.
fn second_best(inst: &PropInstance, best: f64) -> f64 {
    fn all(inst: &PropInstance, goal: usize, path: &mut Vec<usize>) -> Vec<(f64, BTreeSet<(usize, usize)>)> {
        let mut out = Vec::new();
        if let Some(&w) = inst.facts.get(&goal) {
            out.push((w, BTreeSet::new()));
        }
        if path.contains(&goal) {
            return out;
        }
        path.push(goal);
        for (ri, (prem, concl, conf)) in inst.rules.iter().enumerate() {
            if *concl != goal {
                continue;
            }
            let mut partial = vec![(*conf, BTreeSet::from([(ri, goal)]))];
            for &q in prem {
                let sub = all(inst, q, path);
                partial = partial
                    .iter()
                    .flat_map(|(p, u)| sub.iter().map(move |(pq, uq)| (p * pq, u.union(uq).cloned().collect())))
                    .collect();
            }
            out.extend(partial);
        }
        path.pop();
        out
    }
    let trees = all(inst, inst.query, &mut Vec::new());
    let top = trees.iter().map(|t| t.0).fold(0.0, f64::max);
    if (top - best).abs() > 1e-12 {
        return f64::INFINITY;
    }
    let winners: BTreeSet<&BTreeSet<(usize, usize)>> = trees.iter().filter(|t| (t.0 - top).abs() <= 1e-9).map(|t| &t.1).collect();
    if winners.len() > 1 {
        top
    } else {
        trees.iter().filter(|t| (t.0 - top).abs() > 1e-9).map(|t| t.0).fold(0.0, f64::max)
    }
}

fn end_to_end() -> Result<String, String> {
    let t0 = Instant::now();
    let cfg = SynthConfig {
        num_books: 4,
        num_global_axioms: 12,
        mention_drop_rate: 0.1,
        order_swap_rate: 0.1,
        paraphrase_noise: 0.3,
        ..SynthConfig::default()
    };
    let (corpus, gold) = generate_synthetic_corpus(&cfg).map_err(|e| e.to_string())?;
    let opts = FeatureOptions::default();
    let tags: Vec<Vec<Tag>> = corpus.books.iter().map(|b| tags_from_mentions(b.len(), &gold.mentions_for(&b.book_id))).collect();
    let lb: Vec<LabeledBook> = corpus.books.iter().zip(&tags).map(|(book, tags)| LabeledBook { book, tags }).collect();
    let (ident, _) = train_identification(&lb[..2], &lb[2..3], &TrainConfig::default(), &opts).map_err(|e| e.to_string())?;
    let data = AlignData::from_gold(&corpus, &gold, opts.clone()).map_err(|e| e.to_string())?;
    let acfg = AlignTrainConfig { mode: ConstraintMode::Soft, ..AlignTrainConfig::default() };
    let (align, _) = train_alignment(&data, &[true, true, false, false], &[false, false, true, false], &acfg).map_err(|e| e.to_string())?;
    let gm: Vec<AxiomMention> = gold.mentions.iter().map(|m| m.to_mention()).collect();
    let mut ident_only = Vec::new();
    for b in &corpus.books {
        ident_only.extend(extract_mentions(b, &decode(b, &ident, &opts)).map_err(|e| e.to_string())?);
    }
    let jd = joint_decode(&corpus.books, &ident, &align, &JointConfig::default(), &opts).map_err(|e| e.to_string())?;
    let joint: Vec<AxiomMention> = jd.mentions.iter().flatten().cloned().collect();
    let f_ident = 100.0 * ident_prf(&ident_only, &gm, MatchMode::Relaxed).f1;
    let f_joint = 100.0 * ident_prf(&joint, &gm, MatchMode::Relaxed).f1;
    let score = end_to_end_nmi(&joint, &flat_partition(&jd.align), &gm, &gold.clusters).map_err(|e| e.to_string())?;
    ensure(f_joint >= f_ident - 1.0, || format!("joint relaxed F1 {f_joint:.2} < ident-only {f_ident:.2} - 1"))?;
    ensure(score >= 0.80, || format!("NMI {score:.3}"))?;
    within(t0, Duration::from_secs(300))?;
    Ok(format!("relaxed F1 joint {f_joint:.1} vs ident-only {f_ident:.1}, NMI {score:.3}, {:.1?}", t0.elapsed()))
}

fn random_partition(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = rng.random_range(1..=n.min(6));
    let mut parts = vec![Vec::new(); k];
    for i in 0..n {
        parts[rng.random_range(0..k)].push(i);
    }
    parts.retain(|p| !p.is_empty());
    parts
}

fn contingency_nmi(a: &[Vec<usize>], b: &[Vec<usize>], n: usize) -> f64 {
    let n = n as f64;
    let h = |p: &[Vec<usize>]| -p.iter().map(|c| c.len() as f64 / n).map(|q| q * q.ln()).sum::<f64>();
    let (ha, hb) = (h(a), h(b));
    if ha == 0.0 || hb == 0.0 {
        return if a.len() == 1 && b.len() == 1 { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for x in a {
        for y in b {
            let nij = x.iter().filter(|i| y.contains(i)).count() as f64;
            if nij > 0.0 {
                mi += nij / n * (n * nij / (x.len() as f64 * y.len() as f64)).ln();
            }
        }
    }
    mi / (ha * hb).sqrt()
}

fn metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..30);
        let a = random_partition(n, &mut rng);
        let b = random_partition(n, &mut rng);
        let got = nmi(&a, &b).map_err(|e| e.to_string())?;
        let want = contingency_nmi(&a, &b, n);
        worst = worst.max((got - want).abs());
    }
    ensure(worst < 1e-12, || format!("nmi differs from the contingency table by {worst:e}"))?;
    use AnswerOutcome::*;
    let sat = sat_score(&[Correct, Correct, Correct, Wrong]);
    ensure(sat == 68.75, || format!("sat {sat}"))?;
    for case in 0..100 {
        let rand_mentions = |rng: &mut ChaCha8Rng| -> Vec<AxiomMention> {
            let mut pos = 0;
            let mut out = Vec::new();
            while pos < 40 {
                let s = pos + rng.random_range(0..4);
                let e = s + rng.random_range(0..4);
                out.push(AxiomMention::new("b", s, e));
                pos = e + 1;
            }
            out
        };
        let gold = rand_mentions(&mut rng);
        let pred = rand_mentions(&mut rng);
        let s = ident_prf(&pred, &gold, MatchMode::Strict).f1;
        let r = ident_prf(&pred, &gold, MatchMode::Relaxed).f1;
        ensure(s <= r, || format!("case {case}: strict {s} > relaxed {r}"))?;
    }
    Ok(format!("max nmi gap {worst:.1e}, sat {sat}, strict ≤ relaxed on 100 sets"))
}

fn main() {
    let checks: [(&str, Check); 12] = [
        ("crf oracle equivalence", crf_oracle),
        ("gradient check", gradient_check),
        ("hard-constraint closure", hard_closure),
        ("gibbs correctness", gibbs_toy),
        ("joint MH stationarity", joint_toy),
        ("soft-constraint behavior", soft_constraints),
        ("beam completeness", beam_completeness),
        ("fusion oracles", fusion_fixture),
        ("solver fixtures", solver_fixtures),
        ("solver oracle equivalence", solver_oracle),
        ("end-to-end directional check", end_to_end),
        ("metrics", metrics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
