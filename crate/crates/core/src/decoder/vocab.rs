use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const INST_OPEN: &str = "[INST]";
pub const INST_CLOSE: &str = "[/INST]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const INST_OPEN_ID: u32 = 4;
pub const INST_CLOSE_ID: u32 = 5;

const SPECIALS: [&str; 6] = [PAD, UNK, BOS, EOS, INST_OPEN, INST_CLOSE];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Lowercased word split: runs of alphanumerics (and apostrophes) form words,
/// every other non-space character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_word_char(c) {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Closed word-level vocabulary with dense ids; specials occupy ids 0..6.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(split_words)
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces, attaching closing punctuation to the
    /// previous token and opening brackets to the next. Specials other than
    /// UNK are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            if self.is_special(id) && id != UNK_ID {
                continue;
            }
            let tok = self.token(id);
            let closing = matches!(tok, "." | "," | "?" | "!" | ";" | ":" | "]" | ")");
            if !glue_next && !closing {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "[" | "(");
        }
        out
    }
}

/// The text round trip defines the normalised form of a string.
pub fn normalize(text: &str) -> String {
    let words = split_words(text);
    let v = Vocabulary::build([text]);
    let ids: Vec<u32> = words.iter().map(|w| v.id(w).unwrap_or(UNK_ID)).collect();
    v.detokenize(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_ids() {
        let v = Vocabulary::build(["A zebra in a field."]);
        let ids = v.tokenize("A zebra in a field.");
        let words: Vec<&str> = ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(words, ["a", "zebra", "in", "a", "field", "."]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("giraffe"), vec![UNK_ID]);
        assert_eq!(v.id(BOS), Some(BOS_ID));
        assert_eq!(v.id(INST_CLOSE), Some(INST_CLOSE_ID));
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let text = "what is in this image? answer with one noun, chosen from [zebra, airplane, surfer].";
        let v = Vocabulary::build([text]);
        assert_eq!(v.detokenize(&v.tokenize(text)), text);
        assert_eq!(split_words("man's hat")[0], "man's");
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocabulary::build(["two zebras"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("zebras"), v.id("zebras"));
    }
}
