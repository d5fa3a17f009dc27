//! Seeded synthetic corpora for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// `n` distinct lowercase pseudo-words of two or three CV syllables. They
/// avoid digits and calendar names, so placeholder rules leave them alone.
pub fn pseudo_words<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(rng).expect("nonempty"),
                    VOWELS.choose(rng).expect("nonempty")
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    pub bases: usize,
    /// Fixed tokens per base sentence.
    pub base_len: usize,
    /// Positions per base that take a random filler.
    pub slots: usize,
    pub content_words: usize,
    pub fillers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self {
            bases: 200,
            base_len: 10,
            slots: 2,
            content_words: 400,
            fillers: 60,
            train: 2000,
            valid: 200,
            test: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Sentences built from shared templates: each template is a fixed random
/// word sequence with a few slots filled independently per sentence, so
/// sentences from one template are lexical neighbors of each other.
pub fn templated_corpus(spec: &TemplateSpec) -> Result<SplitCorpus> {
    if spec.bases == 0 || spec.slots == 0 || spec.fillers == 0 || spec.slots > spec.base_len {
        return Err(Error::InvalidArgument(format!("bad template spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = pseudo_words(spec.content_words + spec.fillers, &mut rng);
    let (content, fillers) = words.split_at(spec.content_words);
    let templates: Vec<(Vec<&str>, Vec<usize>)> = (0..spec.bases)
        .map(|_| {
            let base: Vec<&str> = (0..spec.base_len)
                .map(|_| content.choose(&mut rng).expect("nonempty").as_str())
                .collect();
            let mut slots: Vec<usize> = (0..spec.base_len).collect();
            slots.shuffle(&mut rng);
            slots.truncate(spec.slots);
            (base, slots)
        })
        .collect();
    let mut make = |count: usize, offset: usize| -> Vec<String> {
        (0..count)
            .map(|i| {
                let (base, slots) = &templates[(i + offset) % templates.len()];
                let mut s = base.clone();
                for &p in slots {
                    s[p] = fillers.choose(&mut rng).expect("nonempty");
                }
                s.join(" ")
            })
            .collect()
    };
    let train = make(spec.train, 0);
    let valid = make(spec.valid, 7);
    let test = make(spec.test, 13);
    Ok(SplitCorpus { train, valid, test })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionSpec {
    /// Words that fill the substitution slot.
    pub slot_words: usize,
    pub bases: usize,
    /// Sentences per base, each with a distinct slot word.
    pub variants: usize,
    pub base_len: usize,
    pub content_words: usize,
    /// Most frequent recurring word pairs to report as relations.
    pub relations: usize,
    pub seed: u64,
}

impl Default for SubstitutionSpec {
    fn default() -> Self {
        Self {
            slot_words: 60,
            bases: 600,
            variants: 4,
            base_len: 6,
            content_words: 300,
            relations: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionCorpus {
    pub sentences: Vec<String>,
    /// `(from, to)` word pairs seen as a substitution in at least two bases,
    /// most frequent first.
    pub pairs: Vec<(String, String)>,
}

const ARTICLES: &[&str] = &["the", "a"];

/// Groups of sentences that differ only in one slot word (and a leading
/// article, redrawn per sentence). Every slot word can replace every other,
/// so a word pair is a relation only by recurring across bases.
pub fn substitution_corpus(spec: &SubstitutionSpec) -> Result<SubstitutionCorpus> {
    if spec.variants < 2 || spec.variants > spec.slot_words || spec.bases == 0 {
        return Err(Error::InvalidArgument(format!("bad substitution spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = pseudo_words(spec.content_words + spec.slot_words, &mut rng);
    let (content, slot_words) = words.split_at(spec.content_words);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut sentences = Vec::new();
    for _ in 0..spec.bases {
        let base: Vec<&str> = (0..spec.base_len)
            .map(|_| content.choose(&mut rng).expect("nonempty").as_str())
            .collect();
        let slot = rng.gen_range(0..=spec.base_len);
        let chosen = rand::seq::index::sample(&mut rng, spec.slot_words, spec.variants).into_vec();
        for &a in &chosen {
            for &b in &chosen {
                if a != b {
                    *counts.entry((a, b)).or_default() += 1;
                }
            }
        }
        for &w in &chosen {
            let mut s = vec![*ARTICLES.choose(&mut rng).expect("nonempty")];
            s.extend(&base[..slot]);
            s.push(&slot_words[w]);
            s.extend(&base[slot..]);
            sentences.push(s.join(" "));
        }
    }
    let mut ranked: Vec<((usize, usize), usize)> = counts.into_iter().filter(|&(_, n)| n >= 2).collect();
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let pairs = ranked
        .into_iter()
        .take(spec.relations)
        .map(|((a, b), _)| (slot_words[a].clone(), slot_words[b].clone()))
        .collect();
    Ok(SubstitutionCorpus { sentences, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_distinct_and_alphabetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = pseudo_words(500, &mut rng);
        assert_eq!(w.iter().collect::<BTreeSet<_>>().len(), 500);
        assert!(w.iter().all(|s| s.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn templated_sizes_and_determinism() {
        let spec = TemplateSpec {
            train: 50,
            valid: 5,
            test: 6,
            bases: 10,
            ..TemplateSpec::default()
        };
        let a = templated_corpus(&spec).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (50, 5, 6));
        assert!(a.train.iter().all(|s| s.split(' ').count() == spec.base_len));
        assert_eq!(a, templated_corpus(&spec).unwrap());
    }

    #[test]
    fn substitution_groups_differ_in_one_word() {
        let spec = SubstitutionSpec {
            bases: 40,
            ..SubstitutionSpec::default()
        };
        let c = substitution_corpus(&spec).unwrap();
        assert_eq!(c.sentences.len(), 40 * spec.variants);
        assert!(!c.pairs.is_empty() && c.pairs.len() <= spec.relations);
        for group in c.sentences.chunks(spec.variants) {
            let first: Vec<&str> = group[0].split(' ').skip(1).collect();
            for other in &group[1..] {
                let o: Vec<&str> = other.split(' ').skip(1).collect();
                assert_eq!(first.iter().zip(&o).filter(|(x, y)| x != y).count(), 1);
            }
        }
        for (from, to) in &c.pairs {
            let bases_with_both = c
                .sentences
                .chunks(spec.variants)
                .filter(|g| {
                    let has = |w: &str| g.iter().any(|s| s.split(' ').any(|t| t == w));
                    has(from) && has(to)
                })
                .count();
            assert!(bases_with_both >= 2, "{from} {to}");
        }
    }
}
