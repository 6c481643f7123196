//! Bundled toy data and seeded synthetic generators for tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    parse_dialogues, CheckedSentence, DialogueEpisode, DialogueTurn, KnowledgeBase, KnowledgeDocument, Speaker, Split,
};
use crate::error::Result;
use crate::retriever::STOP_WORDS;

pub const TOY_KB: &str = include_str!("../data/toy_kb.jsonl");
pub const TOY_DIALOGUES: &str = include_str!("../data/toy_dialogues.json");

/// The bundled 25-article knowledge base.
pub fn toy_kb() -> KnowledgeBase {
    let mut docs = Vec::new();
    for line in TOY_KB.lines().skip(1) {
        docs.push(serde_json::from_str::<KnowledgeDocument>(line).expect("bundled kb parses"));
    }
    KnowledgeBase::from_documents(docs).expect("bundled kb validates")
}

/// The bundled dialogues: 20 `train` episodes plus 4 held-out `test_seen`.
pub fn toy_dialogues(kb: &KnowledgeBase) -> Vec<DialogueEpisode> {
    parse_dialogues(TOY_DIALOGUES, kb).expect("bundled dialogues validate")
}

fn word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables = rng.random_range(2..=3);
    (0..syllables).map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())).collect()
}

/// A seeded vocabulary of `n` distinct pseudo-words.
pub fn vocabulary(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(&mut rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Zipf-like draw: index `i` has weight `1 / (i + 1)`.
fn zipf<'a>(rng: &mut ChaCha8Rng, words: &'a [String], cdf: &[f64]) -> &'a str {
    let u = rng.random::<f64>() * cdf.last().unwrap();
    let i = cdf.partition_point(|&c| c < u).min(words.len() - 1);
    &words[i]
}

fn zipf_cdf(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (0..n)
        .map(|i| {
            acc += 1.0 / (i as f64 + 1.0);
            acc
        })
        .collect()
}

pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub vocabulary: Vec<String>,
}

/// `docs` articles of 1-3 paragraphs with 2-5 sentences each; words are
/// Zipf-distributed pseudo-words with stop words mixed in. Some documents
/// share a title to exercise tie-breaking.
pub fn synthetic_corpus(docs: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocabulary(2000, seed ^ 0x5eed);
    let cdf = zipf_cdf(vocab.len());
    let mut out = Vec::with_capacity(docs);
    for d in 0..docs {
        let mut sentences = Vec::new();
        let mut para_breaks = Vec::new();
        let paragraphs = rng.random_range(1..=3);
        for p in 0..paragraphs {
            if p > 0 {
                para_breaks.push(sentences.len());
            }
            for _ in 0..rng.random_range(2..=5) {
                let n = rng.random_range(4..=12);
                let mut words: Vec<String> = Vec::with_capacity(n);
                for _ in 0..n {
                    if rng.random_bool(0.25) {
                        words.push(STOP_WORDS.choose(&mut rng).unwrap().to_string());
                    } else {
                        words.push(zipf(&mut rng, &vocab, &cdf).to_string());
                    }
                }
                let mut s = words.join(" ");
                s[..1].make_ascii_uppercase();
                s.push('.');
                sentences.push(s);
            }
        }
        let title = format!("{} {}", zipf(&mut rng, &vocab, &cdf), zipf(&mut rng, &vocab, &cdf));
        out.push(KnowledgeDocument { doc_id: format!("doc{d:05}"), title, sentences, para_breaks });
    }
    SyntheticCorpus { kb: KnowledgeBase::from_documents(out).expect("synthetic corpus validates"), vocabulary: vocab }
}

/// `n` queries of 1-6 words drawn from the vocabulary and stop words; some
/// are empty or stop-word-only.
pub fn random_queries(vocab: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = zipf_cdf(vocab.len());
    (0..n)
        .map(|i| match i % 50 {
            0 => String::new(),
            1 => "the of and".into(),
            _ => {
                let len = rng.random_range(1..=6);
                (0..len)
                    .map(|_| {
                        if rng.random_bool(0.2) {
                            STOP_WORDS.choose(&mut rng).unwrap().to_string()
                        } else {
                            zipf(&mut rng, vocab, &cdf).to_string()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        })
        .collect()
}

/// Episodes alternating apprentice/wizard over `kb` until `wizard_turns`
/// wizard turns exist. Utterances splice words from the topic article and
/// from random other articles so consecutive turns query different text.
pub fn scripted_dialogues(kb: &KnowledgeBase, wizard_turns: usize, seed: u64) -> Vec<DialogueEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = kb.documents();
    let mut episodes = Vec::new();
    let mut made = 0;
    while made < wizard_turns {
        let topic = docs.choose(&mut rng).unwrap();
        let mut turns = Vec::new();
        let mut speaker = if rng.random_bool(0.5) { Speaker::Apprentice } else { Speaker::Wizard };
        for _ in 0..rng.random_range(4..=8) {
            let source = if rng.random_bool(0.5) { topic } else { docs.choose(&mut rng).unwrap() };
            let sentence_index = rng.random_range(0..source.sentences.len());
            let words: Vec<&str> = source.sentences[sentence_index].split(' ').collect();
            let take = rng.random_range(1..=words.len().min(5));
            let start = rng.random_range(0..=words.len() - take);
            let text = words[start..start + take].join(" ");
            turns.push(match speaker {
                Speaker::Apprentice => DialogueTurn::new(Speaker::Apprentice, &text),
                Speaker::Wizard => {
                    made += 1;
                    let checked = if rng.random_bool(0.2) {
                        CheckedSentence::NoSentence
                    } else {
                        CheckedSentence::Ref { doc_id: source.doc_id.clone(), sentence_index }
                    };
                    DialogueTurn::wizard(&text, checked)
                }
            });
            speaker = speaker.other();
            if made == wizard_turns {
                break;
            }
        }
        episodes.push(DialogueEpisode { topic: topic.title.clone(), topic_doc: topic.doc_id.clone(), turns, split: Split::Train });
    }
    episodes
}

/// Toy episodes in the given split.
pub fn by_split(episodes: &[DialogueEpisode], split: Split) -> Vec<DialogueEpisode> {
    episodes.iter().filter(|e| e.split == split).cloned().collect()
}

/// Bundled toy data as `(kb, all episodes)`.
pub fn toy() -> Result<(KnowledgeBase, Vec<DialogueEpisode>)> {
    let kb = toy_kb();
    let eps = toy_dialogues(&kb);
    Ok((kb, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_counts;

    #[test]
    fn toy_data_loads() {
        let (kb, eps) = toy().unwrap();
        assert_eq!(kb.len(), 25);
        let counts = split_counts(&eps);
        assert_eq!(counts[&Split::Train].dialogues, 20);
        assert_eq!(counts[&Split::TestSeen].dialogues, 4);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic_corpus(30, 7);
        let b = synthetic_corpus(30, 7);
        assert_eq!(a.kb.documents(), b.kb.documents());
        assert_ne!(a.kb.documents(), synthetic_corpus(30, 8).kb.documents());
    }

    #[test]
    fn scripted_turn_count() {
        let c = synthetic_corpus(40, 1);
        let eps = scripted_dialogues(&c.kb, 50, 3);
        let n: usize = eps.iter().map(|e| e.wizard_turns().count()).sum();
        assert_eq!(n, 50);
        crate::corpus::validate_dialogues(eps, &c.kb).unwrap();
    }
}
