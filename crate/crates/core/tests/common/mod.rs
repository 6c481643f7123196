#![allow(dead_code)]

use kgdialog_core::codec::{prepare_examples, TextCodec, TurnExample};
use kgdialog_core::corpus::{DialogueEpisode, KnowledgeBase, Split};
use kgdialog_core::retriever::{IndexConfig, InvertedIndex};
use kgdialog_core::toy::{by_split, toy};
use kgdialog_nn::TransformerConfig;

pub struct Toy {
    pub kb: KnowledgeBase,
    pub episodes: Vec<DialogueEpisode>,
    pub index: InvertedIndex,
    pub codec: TextCodec,
    pub train: Vec<TurnExample>,
    pub test: Vec<TurnExample>,
}

pub fn toy_setup() -> Toy {
    let (kb, episodes) = toy().unwrap();
    let index = InvertedIndex::build(&kb, IndexConfig { bucket_count: 1 << 16, ngram_order: 2 }).unwrap();
    let codec = TextCodec::train(&kb, &episodes, 300, 48).unwrap();
    let train = prepare_examples(&codec, &index, &kb, &by_split(&episodes, Split::Train)).unwrap();
    let test = prepare_examples(&codec, &index, &kb, &by_split(&episodes, Split::TestSeen)).unwrap();
    Toy { kb, episodes, index, codec, train, test }
}

pub fn model_config(codec: &TextCodec) -> TransformerConfig {
    TransformerConfig {
        layers: 2,
        heads: 2,
        model_dim: 32,
        ffn_dim: 64,
        max_len: codec.max_len,
        vocab_size: codec.vocab_size(),
        dropout_rate: 0.0,
        seed: 3,
    }
}
