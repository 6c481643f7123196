//! Conversion from the public Wizard of Wikipedia release layout:
//! a JSON array of `{chosen_topic, dialog: [{speaker, text,
//! checked_sentence: {"chosen_<Title>_<i>": sentence}}]}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{validate_dialogues, CheckedSentence, DialogueEpisode, DialogueTurn, KnowledgeBase, Speaker, Split, NO_SENTENCE};
use crate::error::{Error, Result};
use crate::text::normalize;

#[derive(Deserialize)]
struct RawEpisode {
    chosen_topic: String,
    dialog: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: String,
    text: String,
    #[serde(default)]
    checked_sentence: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConvertStats {
    pub episodes: usize,
    /// Episodes whose topic has no article in the knowledge base.
    pub skipped_episodes: usize,
    pub wizard_turns: usize,
    /// Wizard turns whose checked sentence could not be located.
    pub unresolved: usize,
}

fn speaker(s: &str) -> Result<Speaker> {
    if s.ends_with("Wizard") {
        Ok(Speaker::Wizard)
    } else if s.ends_with("Apprentice") {
        Ok(Speaker::Apprentice)
    } else {
        Err(Error::Format(format!("unknown speaker {s:?}")))
    }
}

/// `chosen_Blue_Whale_3` -> `Blue Whale`.
fn title_of_key(key: &str) -> Option<String> {
    let (_, rest) = key.split_once('_')?;
    let (title, idx) = rest.rsplit_once('_')?;
    idx.parse::<usize>().ok()?;
    Some(title.replace('_', " "))
}

fn locate(kb: &KnowledgeBase, topic_doc: &str, key: &str, sentence: &str) -> Option<CheckedSentence> {
    let want = normalize(sentence);
    let mut docs = Vec::new();
    if let Some(d) = title_of_key(key).and_then(|t| kb.find_title(&t)) {
        docs.push(d);
    }
    docs.extend(kb.get(topic_doc));
    docs.into_iter().find_map(|d| {
        d.sentences
            .iter()
            .position(|s| *s == want)
            .map(|i| CheckedSentence::Ref { doc_id: d.doc_id.clone(), sentence_index: i })
    })
}

pub fn convert_released(json: &str, kb: &KnowledgeBase, split: Split) -> Result<(Vec<DialogueEpisode>, ConvertStats)> {
    let raw: Vec<RawEpisode> = serde_json::from_str(json)?;
    let mut stats = ConvertStats::default();
    let mut out = Vec::with_capacity(raw.len());
    for ep in raw {
        let Some(doc) = kb.find_title(&ep.chosen_topic) else {
            stats.skipped_episodes += 1;
            continue;
        };
        let topic_doc = doc.doc_id.clone();
        let mut turns = Vec::with_capacity(ep.dialog.len());
        for t in &ep.dialog {
            let sp = speaker(&t.speaker)?;
            let mut turn = DialogueTurn::new(sp, &t.text);
            if sp == Speaker::Wizard {
                stats.wizard_turns += 1;
                turn.checked_sentence = match t.checked_sentence.iter().next() {
                    Some((k, _)) if k == NO_SENTENCE => Some(CheckedSentence::NoSentence),
                    Some((k, v)) => locate(kb, &topic_doc, k, v),
                    None => None,
                };
                if turn.checked_sentence.is_none() {
                    stats.unresolved += 1;
                }
            }
            turns.push(turn);
        }
        out.push(DialogueEpisode { topic: ep.chosen_topic, topic_doc, turns, split });
        stats.episodes += 1;
    }
    Ok((validate_dialogues(out, kb)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KnowledgeDocument;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_documents(vec![
            KnowledgeDocument::new("d1", "Blue Whale", vec!["Blue whales are huge.".into(), "They eat krill.".into()]),
            KnowledgeDocument::new("d2", "Krill", vec!["Krill are small crustaceans.".into()]),
        ])
        .unwrap()
    }

    #[test]
    fn converts_released_episode() {
        let json = r#"[{"chosen_topic": "Blue Whale", "persona": "x", "dialog": [
            {"speaker": "1_Apprentice", "text": "Tell me about whales."},
            {"speaker": "0_Wizard", "text": "They eat krill!", "checked_sentence": {"chosen_Blue_Whale_1": "They eat krill."}},
            {"speaker": "1_Apprentice", "text": "What is krill?"},
            {"speaker": "0_Wizard", "text": "Tiny crustaceans.", "checked_sentence": {"partner_Krill_0": "Krill are small crustaceans."}},
            {"speaker": "1_Apprentice", "text": "Cool."},
            {"speaker": "0_Wizard", "text": "Yes.", "checked_sentence": {"no_passages_used": "no_passages_used"}},
            {"speaker": "1_Apprentice", "text": "Bye."},
            {"speaker": "0_Wizard", "text": "Bye.", "checked_sentence": {"chosen_Nowhere_0": "Not in the KB."}}
        ]}, {"chosen_topic": "Missing", "dialog": []}]"#;
        let (eps, stats) = convert_released(json, &kb(), Split::Train).unwrap();
        assert_eq!(stats, ConvertStats { episodes: 1, skipped_episodes: 1, wizard_turns: 4, unresolved: 1 });
        let t = &eps[0].turns;
        assert_eq!(eps[0].topic_doc, "d1");
        assert_eq!(t[1].checked_sentence, Some(CheckedSentence::Ref { doc_id: "d1".into(), sentence_index: 1 }));
        assert_eq!(t[3].checked_sentence, Some(CheckedSentence::Ref { doc_id: "d2".into(), sentence_index: 0 }));
        assert_eq!(t[5].checked_sentence, Some(CheckedSentence::NoSentence));
        assert_eq!(t[7].checked_sentence, None);
    }

    #[test]
    fn key_titles() {
        assert_eq!(title_of_key("chosen_Blue_Whale_12").as_deref(), Some("Blue Whale"));
        assert_eq!(title_of_key("chosen_x"), None);
    }

    #[test]
    fn bad_speaker_rejected() {
        let json = r#"[{"chosen_topic": "Krill", "dialog": [{"speaker": "Narrator", "text": "hi"}]}]"#;
        assert!(convert_released(json, &kb(), Split::Train).is_err());
    }
}
