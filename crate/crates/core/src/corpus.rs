//! Corpus ingestion: placeholder substitution, whitespace tokenization,
//! frequency-ranked vocabulary and sentence encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use regex::Regex;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const OOV: u32 = 3;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default cap on sentence length (tokens) applied during ingestion.
pub const DEFAULT_MAX_TOKENS: usize = 50;

/// Regex rewrite rules standing in for named-entity tagging.
///
/// Lines are lowercased first; then every digit run (with internal `.`/`,`
/// separators) becomes `<cardinal>`, and, when enabled, month and weekday
/// names become `<date>`.
#[derive(Debug, Clone)]
pub struct Placeholders {
    rules: Vec<(Regex, String)>,
}

impl Placeholders {
    pub fn new(date_rule: bool) -> Self {
        let mut rules = vec![(
            Regex::new(r"\d+(?:[.,]\d+)*").expect("static regex"),
            "<cardinal>".to_string(),
        )];
        if date_rule {
            rules.push((
                Regex::new(
                    r"\b(?:january|february|march|april|may|june|july|august|september|october|november|december|monday|tuesday|wednesday|thursday|friday|saturday|sunday)\b",
                )
                .expect("static regex"),
                "<date>".to_string(),
            ));
        }
        Self { rules }
    }

    /// Adds a custom rule applied after the built-in ones.
    pub fn with_rule(mut self, pattern: &str, replacement: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::Config(e.to_string()))?;
        self.rules.push((re, replacement.to_string()));
        Ok(self)
    }

    pub fn apply(&self, line: &str) -> String {
        let mut out = line.to_lowercase();
        for (re, rep) in &self.rules {
            if re.is_match(&out) {
                out = re.replace_all(&out, rep.as_str()).into_owned();
            }
        }
        out
    }
}

impl Default for Placeholders {
    fn default() -> Self {
        Self::new(true)
    }
}

/// Applies the default placeholder rules (digits and date words).
pub fn apply_placeholders(line: &str) -> String {
    Placeholders::default().apply(line)
}

/// Token ↔ id mapping. Ids `0..4` are reserved for `<pad>`, `<bos>`,
/// `<eos>` and `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary of at most `max_size` entries (reserved included)
    /// from whitespace-tokenized lines. Tokens are ranked by descending
    /// frequency with lexicographic tie-breaking.
    pub fn build<I, S>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 5 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary max_size must be at least 5, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any_line = false;
        for line in lines {
            any_line = true;
            for tok in line.as_ref().split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if !any_line || counts.is_empty() {
            return Err(Error::Empty("vocabulary input stream"));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
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

    /// Id for `token`, mapping unknown or reserved surfaces to OOV.
    pub fn id_or_oov(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) if id >= RESERVED.len() as u32 || id == OOV => id,
            _ => OOV,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Result<Sentence> {
        let ids: Vec<u32> = line.split_whitespace().map(|t| self.id_or_oov(t)).collect();
        Sentence::new(ids, 0)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[OOV as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            let line = line?;
            tokens.push(line.trim_end_matches('\r').to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Format(
                "vocabulary file must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("duplicate token in vocabulary file".into()));
        }
        Ok(vocab)
    }
}

/// A tokenized sentence. BOS/EOS are implicit and never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub ids: Vec<u32>,
    /// Zero-based line number in the source file.
    pub source_line: usize,
}

impl Sentence {
    pub fn new(ids: Vec<u32>, source_line: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        if ids.iter().any(|&id| matches!(id, PAD | BOS | EOS)) {
            return Err(Error::InvalidArgument(
                "sentence contains a reserved pad/bos/eos id".into(),
            ));
        }
        Ok(Self { ids, source_line })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An ordered training set of encoded sentences.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

/// Counters collected while ingesting a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: usize,
    pub empty: usize,
    pub too_long: usize,
    pub tokens: usize,
    pub oov_tokens: usize,
}

impl IngestStats {
    pub fn oov_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.oov_tokens as f64 / self.tokens as f64
        }
    }
}

impl Corpus {
    /// Encodes already-normalized lines, dropping empty lines and lines longer
    /// than `max_tokens`.
    pub fn ingest<I, S>(lines: I, vocab: &Vocabulary, max_tokens: usize) -> (Self, IngestStats)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut stats = IngestStats::default();
        let mut sentences = Vec::new();
        for (lineno, line) in lines.into_iter().enumerate() {
            stats.lines += 1;
            let ids: Vec<u32> = line
                .as_ref()
                .split_whitespace()
                .map(|t| vocab.id_or_oov(t))
                .collect();
            if ids.is_empty() {
                stats.empty += 1;
                continue;
            }
            if ids.len() > max_tokens {
                stats.too_long += 1;
                continue;
            }
            stats.tokens += ids.len();
            stats.oov_tokens += ids.iter().filter(|&&id| id == OOV).count();
            sentences.push(Sentence {
                ids,
                source_line: lineno,
            });
        }
        (Self { sentences }, stats)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sentence {
        &self.sentences[i]
    }
}

/// Reads a UTF-8 corpus file, one sentence per line.
pub fn read_lines<R: BufRead>(r: R) -> Result<Vec<String>> {
    r.lines()
        .map(|l| l.map(|s| s.trim_end_matches('\r').to_string()).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_examples() {
        assert_eq!(apply_placeholders("I paid 12 dollars"), "i paid <cardinal> dollars");
        assert_eq!(apply_placeholders("no digits here"), "no digits here");
        assert_eq!(apply_placeholders(""), "");
        assert_eq!(
            apply_placeholders("Open Monday until 9.30"),
            "open <date> until <cardinal>"
        );
        assert_eq!(Placeholders::new(false).apply("Monday"), "monday");
    }

    #[test]
    fn frequency_cut_and_tie_break() {
        let v = Vocabulary::build(["a a b", "a b c"], 6).unwrap();
        assert_eq!(v.tokens()[4..], ["a", "b"]);
        assert_eq!(v.id_or_oov("c"), OOV);

        let v = Vocabulary::build(["b a b a"], 5).unwrap();
        assert_eq!(v.tokens()[4..], ["a"]);
    }

    #[test]
    fn build_rejects_empty_and_small() {
        assert!(Vocabulary::build(Vec::<String>::new(), 10).is_err());
        assert!(Vocabulary::build(["   "], 10).is_err());
        assert!(Vocabulary::build(["a"], 4).is_err());
    }

    #[test]
    fn encode_and_decode() {
        let v = Vocabulary::build(["the food", "the"], 10).unwrap();
        let s = v.encode("the food").unwrap();
        assert_eq!(s.ids, vec![v.id("the").unwrap(), v.id("food").unwrap()]);
        assert_eq!(v.decode(&s.ids), "the food");
        assert_eq!(v.encode("zzzunknown").unwrap().ids, vec![OOV]);
        assert!(v.encode("  ").is_err());
        // reserved surfaces in text never leak their reserved ids
        assert_eq!(v.encode("<eos> <pad>").unwrap().ids, vec![OOV, OOV]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(["x y z z"], 100).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("<pad>\n<bos>\n<eos>\n<unk>\nz\n"));
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::read_from(&b"a\nb\n"[..]).is_err());
    }

    #[test]
    fn ingest_drops_long_and_empty() {
        let v = Vocabulary::build(["a b c"], 10).unwrap();
        let lines = ["a b", "", "a b c a b c", "q"];
        let (c, stats) = Corpus::ingest(lines, &v, 4);
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(1).source_line, 3);
        assert_eq!(stats.empty, 1);
        assert_eq!(stats.too_long, 1);
        assert_eq!(stats.oov_tokens, 1);
        assert!((stats.oov_rate() - 1.0 / 3.0).abs() < 1e-12);
    }
}
