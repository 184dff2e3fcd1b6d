//! Seeded synthetic textbooks. Every book walks the same global axiom
//! sequence, dropping some axioms, swapping some neighbours, and rendering each
//! mention from a template with optional paraphrase and typography noise.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::document::{load_document, DocNode};
use super::gold::{GoldAnnotations, GoldMention};
use super::Corpus;
use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_books: usize,
    pub num_global_axioms: usize,
    pub mention_drop_rate: f64,
    pub order_swap_rate: f64,
    pub paraphrase_noise: f64,
    pub typography_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_books: 4,
            num_global_axioms: 12,
            mention_drop_rate: 0.1,
            order_swap_rate: 0.1,
            paraphrase_noise: 0.3,
            typography_noise: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_global_axioms < 1 {
            return Err(Error::Config("num_global_axioms must be at least 1".into()));
        }
        for (name, p) in [
            ("mention_drop_rate", self.mention_drop_rate),
            ("order_swap_rate", self.order_swap_rate),
            ("paraphrase_noise", self.paraphrase_noise),
            ("typography_noise", self.typography_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

/// One global axiom: statement paraphrases, optional equation and gold rule.
///
/// In statements, `||` marks the gold premise/conclusion split; it is removed
/// before rendering.
#[derive(Debug, Clone, Copy)]
pub struct AxiomTemplate {
    pub name: &'static str,
    pub label: &'static str,
    pub statements: &'static [&'static str],
    pub equation: Option<&'static str>,
    pub diagram: bool,
    pub rule: &'static str,
}

pub const AXIOM_LIBRARY: &[AxiomTemplate] = &[
    AxiomTemplate {
        name: "Pythagoras Theorem",
        label: "theorem",
        statements: &[
            "If ABC is a triangle and AC is perpendicular to BC , then the square of AB equals the sum of the squares of BC and AC .",
            "In a right triangle ABC with the right angle at C , the square on the hypotenuse AB is equal to the sum of the squares on the legs .",
            "For any triangle ABC in which side AC is at right angles to side BC , the sides satisfy the relation below .",
        ],
        equation: Some("BC^2 + AC^2 = AB^2"),
        diagram: true,
        rule: "1 :: isTriangle(triangle(A,B,C)) , perpendicular(line(A,C),line(B,C)) => eq(BC^2 + AC^2 = AB^2) .",
    },
    AxiomTemplate {
        name: "Angle Sum Property",
        label: "property",
        statements: &[
            "The sum of the interior angles of a triangle ABC is 180 degrees .",
            "In every triangle ABC the three angles add up to two right angles .",
            "The angles CAB , ABC and BCA of the triangle ABC together measure 180 degrees .",
        ],
        equation: Some("∠CAB + ∠ABC + ∠BCA = 180"),
        diagram: false,
        rule: "1 :: isTriangle(triangle(A,B,C)) => eq(∠CAB + ∠ABC + ∠BCA = 180) .",
    },
    AxiomTemplate {
        name: "Exterior Angle Theorem",
        label: "theorem",
        statements: &[
            "If the side BC of a triangle ABC is produced to a point D , then the exterior angle ACD is equal to the sum of the two interior opposite angles .",
            "When side BC of triangle ABC is extended to D , the exterior angle ACD equals the sum of the opposite interior angles .",
        ],
        equation: Some("∠ACD = ∠CAB + ∠ABC"),
        diagram: true,
        rule: "1 :: isTriangle(triangle(A,B,C)) , liesOn(D,line(B,C)) => eq(∠ACD = ∠CAB + ∠ABC) .",
    },
    AxiomTemplate {
        name: "Complementary Angles",
        label: "axiom",
        statements: &[
            "Two angles ABC and CBD are complementary when their measures add up to 90 degrees .",
            "Angles ABC and CBD are called complementary if together they make a right angle .",
        ],
        equation: Some("∠ABC + ∠CBD = 90"),
        diagram: true,
        rule: "1 :: complementary(angle(A,B,C),angle(C,B,D)) => eq(∠ABC + ∠CBD = 90) .",
    },
    AxiomTemplate {
        name: "Linear Pair Axiom",
        label: "axiom",
        statements: &[
            "If a point B lies on the line AC between A and C , then the angles ABD and DBC form a linear pair .",
            "When B lies on line AC , the adjacent angles ABD and DBC are supplementary .",
        ],
        equation: Some("∠ABD + ∠DBC = 180"),
        diagram: false,
        rule: "1 :: liesOn(B,line(A,C)) => eq(∠ABD + ∠DBC = 180) .",
    },
    AxiomTemplate {
        name: "Vertically Opposite Angles",
        label: "theorem",
        statements: &[
            "If two lines AB and CD intersect at the point O , then the vertically opposite angles AOC and BOD are equal .",
            "When lines AB and CD meet at O , the vertically opposite angles AOC and BOD have equal measure .",
        ],
        equation: Some("∠AOC = ∠BOD"),
        diagram: true,
        rule: "1 :: intersectAt(line(A,B),line(C,D),O) => eq(∠AOC = ∠BOD) .",
    },
    AxiomTemplate {
        name: "Isosceles Triangle Theorem",
        label: "theorem",
        statements: &[
            "In an isosceles triangle ABC with AB = AC , the angles opposite to the equal sides are equal .",
            "The base angles ABC and ACB of an isosceles triangle ABC are equal .",
        ],
        equation: Some("∠ABC = ∠ACB"),
        diagram: false,
        rule: "1 :: isIsosceles(triangle(A,B,C)) => eq(∠ABC = ∠ACB) .",
    },
    AxiomTemplate {
        name: "Alternate Interior Angles",
        label: "axiom",
        statements: &[
            "If a transversal PQ intersects two parallel lines AB and CD at P and Q , then the alternate interior angles APQ and PQD are equal .",
            "When AB is parallel to CD and a transversal meets them at P and Q , the alternate angles APQ and PQD are equal .",
        ],
        equation: Some("∠APQ = ∠PQD"),
        diagram: true,
        rule: "1 :: parallel(line(A,B),line(C,D)) , liesOn(P,line(A,B)) , liesOn(Q,line(C,D)) => eq(∠APQ = ∠PQD) .",
    },
    AxiomTemplate {
        name: "Similar Triangles Theorem",
        label: "theorem",
        statements: &[
            "If triangle ABC is similar to triangle DEF , then their corresponding angles ABC and DEF are equal .",
            "Corresponding angles ABC and DEF of similar triangles ABC and DEF are equal .",
        ],
        equation: Some("∠ABC = ∠DEF"),
        diagram: false,
        rule: "1 :: similar(triangle(A,B,C),triangle(D,E,F)) => eq(∠ABC = ∠DEF) .",
    },
    AxiomTemplate {
        name: "Central Angle Theorem",
        label: "theorem",
        statements: &[
            "The angle AOB subtended by an arc AB at the centre O of a circle is double the angle ADB subtended by it at any point D on the circle .",
            "An arc AB of a circle with centre O subtends at the centre an angle AOB that is twice the angle ADB at any point D on the circle .",
        ],
        equation: Some("∠ADB = 0.5 × ∠AOB"),
        diagram: true,
        rule: "1 :: center(O,circle(O)) , liesOn(A,circle(O)) , liesOn(B,circle(O)) , liesOn(D,circle(O)) => eq(∠ADB = 0.5 * ∠AOB) .",
    },
    AxiomTemplate {
        name: "Secant Tangent Theorem",
        label: "theorem",
        statements: &[
            "If a secant from a point P meets a circle K at A and B and PT is a tangent to the circle K , then the product of PA and PB equals the square of PT .",
            "For a tangent PT and a secant through P meeting the circle K at A and B , the following product relation holds .",
        ],
        equation: Some("PA × PB = PT^2"),
        diagram: true,
        rule: "1 :: tangent(line(P,T),circle(K)) , liesOn(A,circle(K)) , liesOn(B,circle(K)) => eq(PA * PB = PT^2) .",
    },
    AxiomTemplate {
        name: "Tangent Radius Theorem",
        label: "theorem",
        statements: &[
            "If AM is a tangent at the point A of a circle with centre O , then || the tangent AM is perpendicular to the radius OA .",
            "For a circle with centre O and a tangent AM at A , || the radius OA is perpendicular to the tangent AM .",
        ],
        equation: None,
        diagram: true,
        rule: "1 :: tangent(line(A,M),circle(O)) , center(O,circle(O)) => perpendicular(line(A,M),line(O,A)) .",
    },
    AxiomTemplate {
        name: "Angle Addition Postulate",
        label: "axiom",
        statements: &[
            "If a point M lies in the interior of an angle AOB , then the angle AOB is the sum of the angles AOM and MOB .",
            "When M is in the interior of angle AOB , angle AOB equals angle AOM plus angle MOB .",
        ],
        equation: Some("∠AOB = ∠AOM + ∠MOB"),
        diagram: false,
        rule: "1 :: interior(M,angle(A,O,B)) => eq(∠AOB = ∠AOM + ∠MOB) .",
    },
    AxiomTemplate {
        name: "Parallelogram Diagonals",
        label: "property",
        statements: &[
            "The diagonals AC and BD of a parallelogram ABCD bisect each other at the point O .",
            "In a parallelogram ABCD the diagonals AC and BD meet at O and bisect each other .",
        ],
        equation: Some("AO = OC"),
        diagram: true,
        rule: "1 :: isParallelogram(polygon(A,B,C,D)) , intersectAt(line(A,C),line(B,D),O) => eq(AO = OC) .",
    },
    AxiomTemplate {
        name: "Equilateral Triangle Corollary",
        label: "corollary",
        statements: &[
            "Each angle of an equilateral triangle ABC measures 60 degrees .",
            "All three angles of an equilateral triangle ABC are equal to 60 degrees .",
        ],
        equation: Some("∠ABC = 60"),
        diagram: false,
        rule: "1 :: isEquilateral(triangle(A,B,C)) => eq(∠ABC = 60) .",
    },
    AxiomTemplate {
        name: "Right Angle Corollary",
        label: "corollary",
        statements: &[
            "If AB is perpendicular to BC , then the angle ABC is a right angle .",
            "When line AB is perpendicular to line BC the angle ABC measures 90 degrees .",
        ],
        equation: Some("∠ABC = 90"),
        diagram: false,
        rule: "1 :: perpendicular(line(A,B),line(B,C)) => eq(∠ABC = 90) .",
    },
    AxiomTemplate {
        name: "Midpoint Theorem",
        label: "axiom",
        statements: &[
            "If M is the midpoint of the segment AB , then AM is equal to MB .",
            "The midpoint M of a segment AB divides it into two equal parts AM and MB .",
        ],
        equation: Some("AM = MB"),
        diagram: false,
        rule: "1 :: midpoint(M,line(A,B)) => eq(AM = MB) .",
    },
    AxiomTemplate {
        name: "SSS Congruence",
        label: "axiom",
        statements: &[
            "If the three sides of triangle ABC are equal to the three sides of triangle DEF , then || the triangle ABC is congruent to the triangle DEF .",
            "When the sides of triangle ABC equal the sides of triangle DEF , || triangle ABC and triangle DEF are congruent .",
        ],
        equation: None,
        diagram: false,
        rule: "1 :: isTriangle(triangle(A,B,C)) , isTriangle(triangle(D,E,F)) => congruent(triangle(A,B,C),triangle(D,E,F)) .",
    },
];

const FILLER: &[&str] = &[
    "In this chapter we study some basic shapes .",
    "Look at the figure carefully before reading further .",
    "Many of these facts were known to ancient mathematicians .",
    "We will use this result in later chapters .",
    "Students often find it helpful to draw a rough sketch .",
    "Let us now verify this with an example .",
    "Example : find the value of x if the two angles are equal .",
    "Try to measure the angles with a protractor .",
    "The ratio of the two lengths is called the scale factor .",
    "Hence we can compute unknown lengths in many problems .",
    "Exercise : if AB is 6 cm and BC is 8 cm , find the length of AC .",
    "Activity : cut out a paper triangle and fold it along a line .",
    "Recall that a line segment has two end points .",
    "The next section builds on these ideas .",
    "Check your answer by drawing the figure to scale .",
    "Observe the pattern in the table below .",
];

const FILLER_EQUATIONS: &[&str] = &["2x + 30 = 90", "x = 45", "3y - 12 = 60", "AB = 6 + 4"];

const LABEL_POOL: &[char] = &[
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'J', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z',
];

fn template(i: usize) -> (&'static AxiomTemplate, usize) {
    (&AXIOM_LIBRARY[i % AXIOM_LIBRARY.len()], i / AXIOM_LIBRARY.len())
}

/// Replaces standalone capital-letter tokens (point labels) letter by letter.
fn relabel(text: &str, map: &HashMap<char, char>) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let run = &chars[start..i];
            let is_label = run.len() <= 4 && run.iter().all(|c| c.is_ascii_uppercase());
            for c in run {
                out.push(if is_label { *map.get(c).unwrap_or(c) } else { *c });
            }
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

fn random_relabeling(rng: &mut ChaCha8Rng) -> HashMap<char, char> {
    let mut targets = LABEL_POOL.to_vec();
    targets.shuffle(rng);
    LABEL_POOL.iter().copied().zip(targets).collect()
}

struct RenderedMention {
    node: DocNode,
    /// Gold split as a token boundary of the mention text, when the template
    /// marks one.
    split: Option<usize>,
    rule: String,
}

fn sentence(text: &str) -> DocNode {
    DocNode::element("sentence", text)
}

fn render_mention(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    axiom_index: usize,
    number: usize,
    figure: Option<&str>,
) -> RenderedMention {
    let (t, round) = template(axiom_index);
    let paraphrase = rng.random::<f64>() < cfg.paraphrase_noise;
    let variant = if paraphrase && t.statements.len() > 1 {
        1 + rng.random_range(0..t.statements.len() - 1)
    } else {
        0
    };
    let relabel_points = rng.random::<f64>() < cfg.paraphrase_noise;
    let map = if relabel_points {
        random_relabeling(rng)
    } else {
        HashMap::new()
    };
    let plain = rng.random::<f64>() < cfg.typography_noise;

    let mut children = Vec::new();
    if !plain {
        let suffix = if round > 0 { format!(" {}", round + 1) } else { String::new() };
        let title = format!(
            "{} {} : {}{}",
            capitalize(t.label),
            number,
            t.name,
            suffix
        );
        let mut heading = DocNode::element("heading", &title);
        heading.typography.bold = true;
        children.push(heading);
    }
    let statement = relabel(t.statements[variant], &map);
    let (before, after) = match statement.split_once("||") {
        Some((b, a)) => (b.trim().to_string(), Some(a.trim().to_string())),
        None => (statement.clone(), None),
    };
    let prefix_tokens: usize = children.iter().map(|c: &DocNode| tokenize(&c.text).len()).sum();
    let split = after.as_ref().map(|_| prefix_tokens + tokenize(&before).len());
    let text = match &after {
        Some(a) => format!("{before} {a}"),
        None => before,
    };
    let mut stmt = sentence(&text);
    if plain {
        stmt.typography.italic = rng.random::<f64>() < 0.5;
    }
    children.push(stmt);
    if let Some(eq) = t.equation {
        let eq = relabel(eq, &map);
        children.push(DocNode {
            equation: Some(eq),
            ..DocNode::element("equation", "")
        });
    }
    if let Some(fig) = figure {
        children.push(sentence(&format!("See {fig} .")));
    }
    let mut node = DocNode::container(if plain { "paragraph" } else { "block" }, children);
    if !plain {
        node.typography.boxed = true;
        node.typography.colored = true;
        node.typography.label = t.label.to_string();
    }
    RenderedMention {
        node,
        split,
        rule: relabel(t.rule, &map),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn filler(rng: &mut ChaCha8Rng) -> DocNode {
    if rng.random::<f64>() < 0.15 {
        let eq = FILLER_EQUATIONS[rng.random_range(0..FILLER_EQUATIONS.len())];
        DocNode {
            equation: Some(eq.into()),
            ..DocNode::element("equation", "")
        }
    } else {
        sentence(FILLER[rng.random_range(0..FILLER.len())])
    }
}

/// Global axiom order of one book after drops and adjacent swaps.
fn book_order(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..cfg.num_global_axioms)
        .filter(|_| rng.random::<f64>() >= cfg.mention_drop_rate)
        .collect();
    let mut i = 0;
    while i + 1 < kept.len() {
        if rng.random::<f64>() < cfg.order_swap_rate {
            kept.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    kept
}

struct PendingMention {
    axiom: usize,
    section_index: usize,
    split: Option<usize>,
    rule: String,
    figure: Option<String>,
}

/// Document trees plus gold annotations; [`generate_synthetic_corpus`] is
/// this followed by flattening.
pub fn synthesize_documents(cfg: &SynthConfig) -> Result<(Vec<(String, DocNode)>, GoldAnnotations)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::new();
    let mut gold = GoldAnnotations::default();
    let mut by_axiom: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for b in 0..cfg.num_books {
        let book_id = format!("book{b}");
        let order = book_order(&mut rng, cfg);
        let chapter_no = 1 + b;
        let mut sections = Vec::new();
        let mut pending = Vec::new();
        let mut figure_no = 0;
        for (k, &axiom) in order.iter().enumerate() {
            if rng.random::<f64>() < 0.3 {
                let mut s = DocNode::container("section", (0..2).map(|_| filler(&mut rng)).collect());
                s.text = format!("{chapter_no}.{} Practice", sections.len() + 1);
                sections.push(s);
            }
            let (t, _) = template(axiom);
            let mut children = Vec::new();
            for _ in 0..rng.random_range(1..=2) {
                children.push(filler(&mut rng));
            }
            let figure = if t.diagram {
                figure_no += 1;
                let fig = format!("Figure {chapter_no}.{figure_no}");
                children.push(DocNode::element("figure", &fig));
                children.push(DocNode::element("caption", &format!("Diagram for the {}", t.name.to_lowercase())));
                Some(fig)
            } else {
                None
            };
            let rendered = render_mention(&mut rng, cfg, axiom, k + 1, figure.as_deref());
            children.push(rendered.node);
            for _ in 0..rng.random_range(0..=2) {
                children.push(filler(&mut rng));
            }
            let mut section = DocNode::container("section", children);
            section.text = format!("{chapter_no}.{} {}", sections.len() + 1, t.name);
            pending.push(PendingMention {
                axiom,
                section_index: sections.len(),
                split: rendered.split,
                rule: rendered.rule,
                figure,
            });
            sections.push(section);
        }
        let mut chapter = DocNode::container("chapter", sections);
        chapter.text = format!("Chapter {chapter_no} Geometry");
        let root = DocNode::container("document", vec![chapter]);

        // Locate each axiom block in the flattened book: the block is the only
        // child of its section that is a container.
        let book = load_document(Path::new(&book_id), &book_id, &root)?;
        for p in pending {
            let block_kind = |e: &&crate::corpus::DiscourseElement| {
                e.hierarchy_path.len() == 4
                    && e.hierarchy_path[2] == format!("section#{}", p.section_index)
                    && (e.hierarchy_path[3].starts_with("block#") || e.hierarchy_path[3].starts_with("paragraph#"))
            };
            let idx: Vec<usize> = book.elements.iter().filter(block_kind).map(|e| e.seq_index).collect();
            let (start, end) = (idx[0], *idx.last().expect("mention block has elements"));
            let mi = gold.mentions.len();
            gold.mentions.push(GoldMention {
                book: book_id.clone(),
                start,
                end,
                diagram: p.figure.clone(),
            });
            gold.parses.insert(mi, p.rule);
            if let Some(s) = p.split {
                gold.splits.insert(mi, s);
            }
            by_axiom.entry(p.axiom).or_default().push(mi);
        }
        docs.push((book_id, root));
    }
    gold.clusters = by_axiom.into_values().collect();
    Ok((docs, gold))
}

/// Deterministic given `cfg.seed`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<(Corpus, GoldAnnotations)> {
    let (docs, gold) = synthesize_documents(cfg)?;
    let books = docs
        .iter()
        .map(|(id, root)| load_document(Path::new(id), id, root))
        .collect::<Result<Vec<_>>>()?;
    Ok((Corpus::new(books)?, gold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_mentions, tags_from_mentions};

    fn quiet(num_books: usize, axioms: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_books,
            num_global_axioms: axioms,
            mention_drop_rate: 0.0,
            order_swap_rate: 0.0,
            paraphrase_noise: 0.0,
            typography_noise: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_noise_book_has_axioms_in_order() {
        let (corpus, gold) = generate_synthetic_corpus(&quiet(1, 2, 7)).unwrap();
        assert_eq!(corpus.books.len(), 1);
        assert_eq!(gold.mentions.len(), 2);
        assert_eq!(gold.clusters, vec![vec![0], vec![1]]);
        assert!(gold.mentions[0].end < gold.mentions[1].start);
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate_synthetic_corpus(&quiet(1, 2, 7)).unwrap();
        let b = generate_synthetic_corpus(&quiet(1, 2, 7)).unwrap();
        assert_eq!(a, b);
        let noisy = SynthConfig::default();
        assert_eq!(generate_synthetic_corpus(&noisy).unwrap(), generate_synthetic_corpus(&noisy).unwrap());
    }

    #[test]
    fn full_swap_reverses_a_pair() {
        let cfg = SynthConfig {
            order_swap_rate: 1.0,
            ..quiet(1, 2, 7)
        };
        let (_, gold) = generate_synthetic_corpus(&cfg).unwrap();
        // cluster 0 is global axiom 0; its mention must come after axiom 1's
        let first = &gold.mentions[gold.clusters[0][0]];
        let second = &gold.mentions[gold.clusters[1][0]];
        assert!(first.start > second.end);
    }

    #[test]
    fn rejects_empty_axiom_set() {
        assert!(generate_synthetic_corpus(&quiet(1, 0, 7)).is_err());
        let bad = SynthConfig {
            paraphrase_noise: 1.5,
            ..quiet(1, 2, 7)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gold_tags_reproduce_gold_mentions() {
        let (corpus, gold) = generate_synthetic_corpus(&quiet(3, 10, 3)).unwrap();
        for book in &corpus.books {
            let want = gold.mentions_for(&book.book_id);
            let tags = tags_from_mentions(book.len(), &want);
            assert_eq!(extract_mentions(book, &tags).unwrap(), want);
        }
    }

    #[test]
    fn relabel_touches_only_point_labels() {
        let map: HashMap<char, char> = [('A', 'X'), ('B', 'Y'), ('T', 'C')].into_iter().collect();
        assert_eq!(relabel("isTriangle(A,B) AB^2 ∠TAB", &map), "isTriangle(X,Y) XY^2 ∠CXY");
    }

    #[test]
    fn marked_split_lands_after_then() {
        let idx = AXIOM_LIBRARY.iter().position(|t| t.name == "Tangent Radius Theorem").unwrap();
        let cfg = quiet(1, idx + 1, 2);
        let (corpus, gold) = generate_synthetic_corpus(&cfg).unwrap();
        let mi = *gold.clusters[idx].first().unwrap();
        let m = gold.mentions[mi].to_mention();
        let toks = corpus.books[0].mention_tokens(&m);
        let s = gold.splits[&mi];
        assert_eq!(toks[s - 1], "then");
    }
}
