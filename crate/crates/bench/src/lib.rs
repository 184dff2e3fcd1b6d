//! Shared fixtures for the benchmarks: a synthetic corpus with models trained
//! on it once.

use geoharvest::align::{train_alignment, AlignData, AlignModel, AlignTrainConfig};
use geoharvest::corpus::{generate_synthetic_corpus, tags_from_mentions, Corpus, SynthConfig};
use geoharvest::crf::{train_identification, IdentModel, LabeledBook, TrainConfig};
use geoharvest::features::FeatureOptions;
use geoharvest::GoldAnnotations;

pub struct Fixture {
    pub corpus: Corpus,
    pub gold: GoldAnnotations,
    pub opts: FeatureOptions,
    pub ident: IdentModel,
    pub align: AlignModel,
}

impl Fixture {
    pub fn new(num_books: usize) -> Self {
        let cfg = SynthConfig {
            num_books,
            ..SynthConfig::default()
        };
        let (corpus, gold) = generate_synthetic_corpus(&cfg).expect("synthetic corpus");
        let opts = FeatureOptions::default();
        let tags: Vec<_> = corpus
            .books
            .iter()
            .map(|b| tags_from_mentions(b.len(), &gold.mentions_for(&b.book_id)))
            .collect();
        let labeled: Vec<LabeledBook> = corpus.books.iter().zip(&tags).map(|(book, tags)| LabeledBook { book, tags }).collect();
        let (ident, _) = train_identification(&labeled, &[], &TrainConfig::default(), &opts).expect("identification");
        let data = AlignData::from_gold(&corpus, &gold, opts.clone()).expect("alignment data");
        let all = vec![true; corpus.books.len()];
        let none = vec![false; corpus.books.len()];
        let (align, _) = train_alignment(&data, &all, &none, &AlignTrainConfig::default()).expect("alignment");
        Self {
            corpus,
            gold,
            opts,
            ident,
            align,
        }
    }
}
