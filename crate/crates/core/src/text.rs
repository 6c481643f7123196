//! Text normalization and the rule-based sentence splitter.

use unicode_normalization::UnicodeNormalization;

/// NFC form with runs of whitespace collapsed to one space and ends trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Words that end in a period without ending a sentence. Compared
/// case-sensitively against the word before the period.
pub const ABBREVIATIONS: &[&str] = &[
    "Dr", "Mr", "Mrs", "Ms", "Prof", "Sr", "Jr", "St", "Mt", "Ft", "Gen", "Col", "Lt", "Sgt", "Capt", "Rev", "Gov",
    "Sen", "Rep", "Inc", "Ltd", "Co", "Corp", "Bros", "No", "vs", "etc", "approx", "ca", "cf", "e.g", "i.e", "U.S",
    "U.K", "Jan", "Feb", "Mar", "Apr", "Jun", "Jul", "Aug", "Sep", "Sept", "Oct", "Nov", "Dec",
];

const TERMINALS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 4] = ['"', '\'', ')', ']'];

fn ends_with_abbreviation(before: &str) -> bool {
    let word = before.rsplit(' ').next().unwrap_or("");
    let word = word.trim_start_matches(['(', '"', '\'', '[']);
    if ABBREVIATIONS.contains(&word) {
        return true;
    }
    // single capital initials: "J. R. R. Tolkien"
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase())
}

/// Splits a paragraph after `.`, `!` or `?` (optionally followed by closing
/// quotes or brackets) when the next word starts with an uppercase letter
/// or digit, unless the period ends an abbreviation or a single capital
/// initial. Whitespace is normalized first, so joining the output with
/// single spaces gives back the normalized paragraph.
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let text = normalize(paragraph);
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if TERMINALS.contains(&c) {
            let mut j = i + 1;
            while j < chars.len() && (TERMINALS.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
                j += 1;
            }
            let boundary = j + 1 < chars.len()
                && chars[j].1 == ' '
                && (chars[j + 1].1.is_uppercase() || chars[j + 1].1.is_ascii_digit());
            let abbreviated = c == '.' && j == i + 1 && ends_with_abbreviation(&text[start..chars[i].0]);
            if boundary && !abbreviated {
                out.push(text[start..chars[j].0].to_string());
                start = chars[j + 1].0;
                i = j + 1;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if start < text.len() {
        out.push(text[start..].to_string());
    }
    out
}
