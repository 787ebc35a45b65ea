//! Corpus records, episode and pair construction, batching, and the synthetic toy corpus.

mod batch;
mod corpus;
mod episodes;
mod toy;

pub use batch::{batch_with_padding, Batch, MelStore};
pub use corpus::{
    partition_utterances, read_corpus_manifest, read_keyword_list, word_length,
    write_corpus_manifest, write_keyword_list, Partition, UtteranceRecord,
};
pub use episodes::{
    build_episodes, build_episodes_with, levenshtein, read_pairs, write_pairs, Difficulty, Episode,
    EpisodeOptions, EpisodeSet, PairExample, DEFAULT_HARD_THRESHOLD, MIN_KEYWORDS, PAIR_HEADER,
};
pub use toy::{synth_toy_corpus, ToyCorpus, ToyKeyword, TOY_WORDS};
