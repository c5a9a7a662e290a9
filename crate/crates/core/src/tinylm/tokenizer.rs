use std::collections::HashMap;

use crate::synthworld::{Record, VOCABULARY};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

const PUNCT: [char; 4] = ['.', '?', ':', ','];

/// Word-level tokenizer over the closed grammar vocabulary.
///
/// Punctuation is split from the preceding word and re-attached on decode,
/// so canonical text round-trips exactly. Unknown words map to `<unk>`.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(VOCABULARY.iter()).copied().collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &'static str {
        self.words.get(id as usize).copied().unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut word = chunk;
            let mut tail = Vec::new();
            while word.len() > 1 && word.ends_with(PUNCT) {
                let (w, p) = word.split_at(word.len() - 1);
                tail.push(p);
                word = w;
            }
            out.push(self.id(word));
            out.extend(tail.iter().rev().map(|p| self.id(p)));
        }
        out
    }

    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let mut s = String::new();
        for (i, t) in tokens.iter().enumerate() {
            let w = self.word(*t);
            let is_punct = w.len() == 1 && w.ends_with(PUNCT);
            if i > 0 && !is_punct {
                s.push(' ');
            }
            s.push_str(w);
        }
        s
    }

    /// Language-model sequence for a text-only record:
    /// `<bos> text <eos>` or `<bos> context <sep> instruction <sep> answer <eos>`.
    /// Multimodal records have no text-only rendering.
    pub fn encode_record(&self, record: &Record) -> Option<Vec<u32>> {
        let mut seq = vec![BOS];
        match record {
            Record::Caption { caption, .. } => seq.extend(self.tokenize(caption)),
            Record::Filler { text } => seq.extend(self.tokenize(text)),
            Record::Qa { context, instruction, answer, .. } => {
                seq.extend(self.tokenize(context));
                seq.push(SEP);
                seq.extend(self.tokenize(instruction));
                seq.push(SEP);
                seq.extend(self.tokenize(answer));
            }
            Record::Mm { .. } => return None,
        }
        seq.push(EOS);
        Some(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::build_text_corpus;

    #[test]
    fn empty_round_trip() {
        let t = Tokenizer::new();
        assert!(t.tokenize("").is_empty());
        assert_eq!(t.detokenize(&[]), "");
    }

    #[test]
    fn simple_round_trip() {
        let t = Tokenizer::new();
        let ids = t.tokenize("red circle");
        assert_eq!(ids.len(), 2);
        assert_eq!(t.detokenize(&ids), "red circle");
        let q = "Consider the following information: a red circle What shape is at top-left?";
        assert_eq!(t.detokenize(&t.tokenize(q)), q);
        assert!(!t.tokenize(q).contains(&UNK));
    }

    #[test]
    fn unknown_words() {
        let t = Tokenizer::new();
        assert_eq!(t.tokenize("zebra red"), vec![UNK, t.id("red")]);
    }

    #[test]
    fn every_corpus_line_round_trips() {
        let t = Tokenizer::new();
        for r in build_text_corpus(3000, 5, 0.4) {
            let texts: Vec<&str> = match &r {
                Record::Caption { caption, .. } => vec![caption],
                Record::Filler { text } => vec![text],
                Record::Qa { context, instruction, answer, .. } => vec![context, instruction, answer],
                Record::Mm { .. } => unreachable!(),
            };
            for s in texts {
                let ids = t.tokenize(s);
                assert!(!ids.contains(&UNK), "{s}");
                assert_eq!(t.detokenize(&ids), s);
            }
        }
    }

    #[test]
    fn vocabulary_size_near_two_hundred() {
        let n = Tokenizer::new().vocab_size();
        assert!((120..=220).contains(&n), "{n}");
    }
}
