//! Sentence templates and rule-based pronoun injection.

use std::collections::{BTreeMap, BTreeSet};

use super::{Action, Background, Character, Pronoun};
use crate::error::{Error, Result};

fn subject(chars: &[Character]) -> String {
    let names: Vec<&str> = chars.iter().map(|c| c.name()).collect();
    names.join(" and ")
}

/// `"<Names> <action> on the <background>."`
pub fn opening_sentence(chars: &[Character], action: Action, bg: Background) -> String {
    format!(
        "{} {} on the {}.",
        subject(chars),
        action.phrase(chars.len() > 1),
        bg.word()
    )
}

/// `"<Names> <action>."`, before pronoun injection.
pub fn plain_sentence(chars: &[Character], action: Action) -> String {
    format!("{} {}.", subject(chars), action.phrase(chars.len() > 1))
}

/// `"<Pronoun> <action>."`
pub fn pronoun_sentence(pronoun: Pronoun, action: Action) -> String {
    format!("{} {}.", pronoun.word(), action.phrase(pronoun == Pronoun::They))
}

pub fn entity_map(chars: &[Character]) -> BTreeMap<String, Pronoun> {
    chars.iter().map(|c| (c.name().to_string(), c.pronoun())).collect()
}

/// Words that may open a sentence without being an entity.
const NON_ENTITY: &[&str] = &["He", "She", "They", "It", "The", "A", "An"];

/// Replace the subject of every sentence whose entities were all mentioned
/// before with the mapped pronoun (`They` for joint mentions).
///
/// The subject is the leading run of capitalised words joined by `and`.
pub fn inject_coreferences(sentences: &[String], entities: &BTreeMap<String, Pronoun>) -> Result<Vec<String>> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let mut names = Vec::new();
        let mut end = 0;
        while end < words.len() {
            let w = words[end].trim_end_matches(['.', ',', '!', '?']);
            let capitalised = w.chars().next().is_some_and(|c| c.is_uppercase());
            if !capitalised || NON_ENTITY.contains(&w) {
                break;
            }
            if !entities.contains_key(w) {
                return Err(Error::UnknownEntity(w.to_string()));
            }
            names.push(w.to_string());
            end += 1;
            if words.get(end) == Some(&"and") {
                end += 1;
            } else {
                break;
            }
        }
        if names.is_empty() || !names.iter().all(|n| seen.contains(n)) {
            seen.extend(names);
            out.push(sentence.clone());
            continue;
        }
        let pronoun = if names.len() == 1 {
            entities[&names[0]]
        } else {
            Pronoun::They
        };
        let mut rewritten = vec![pronoun.word()];
        rewritten.extend_from_slice(&words[end..]);
        out.push(rewritten.join(" "));
    }
    Ok(out)
}
