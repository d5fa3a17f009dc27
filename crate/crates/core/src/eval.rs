//! Perplexity lower bounds with language-model smoothing, edit random walks,
//! attribute-controlled editing and analogy evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::log_sum_exp;
use crate::corpus::{Corpus, Vocabulary};
use crate::editor::Hypothesis;
use crate::editvec::{sample_prior, word_diff};
use crate::error::{Error, Result};
use crate::neighbors::LshIndex;
use crate::train::{derive_seed, NeuralEditor};

/// Lower bounds on `log p(x)` under the prototype-then-edit model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceBound {
    /// `log Σ_{x′∈𝒩(x)} exp(ELBO(x, x′)) − log|𝒳|`; `−∞` when 𝒩(x) is empty.
    pub log_sum: f64,
    /// `mean_{x′∈𝒩(x)} ELBO(x, x′) − log|𝒳|`, the looser Jensen form.
    pub jensen: f64,
    pub neighbors: usize,
}

/// Combines per-prototype ELBO estimates into both bound forms.
pub fn combine_bound(elbos: &[f64], corpus_size: usize) -> SentenceBound {
    let log_n = (corpus_size as f64).ln();
    if elbos.is_empty() {
        return SentenceBound {
            log_sum: f64::NEG_INFINITY,
            jensen: f64::NEG_INFINITY,
            neighbors: 0,
        };
    }
    SentenceBound {
        log_sum: log_sum_exp(elbos) - log_n,
        jensen: elbos.iter().sum::<f64>() / elbos.len() as f64 - log_n,
        neighbors: elbos.len(),
    }
}

/// Bound on `log p(x)` summing over the verified training neighbors of `x`.
/// Each ELBO is the mean of `m` one-sample estimates.
pub fn sentence_logprob_bound<R: Rng + ?Sized>(
    model: &NeuralEditor,
    index: &LshIndex,
    train: &Corpus,
    x: &[u32],
    m: usize,
    rng: &mut R,
) -> Result<SentenceBound> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count m must be at least 1".into()));
    }
    let mut elbos = Vec::new();
    for (id, _) in index.query_neighborhood(x, None) {
        let proto = &train.sentences[id].ids;
        let mut acc = 0.0;
        for _ in 0..m {
            acc += model.elbo_sample(x, proto, rng)?;
        }
        elbos.push(acc / m as f64);
    }
    Ok(combine_bound(&elbos, train.sentences.len()))
}

/// Everything known about one evaluated sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceScore {
    pub bound: SentenceBound,
    /// Language-model log-probability.
    pub nlm: f64,
    /// Tokens scored, EOS included.
    pub tokens: usize,
}

/// Scores every sentence under both models. Work is split over sentences;
/// sentence `i` draws its noise from `(seed, i)`.
pub fn score_sentences(
    editor: &NeuralEditor,
    nlm: &NeuralEditor,
    index: &LshIndex,
    train: &Corpus,
    sentences: &[Vec<u32>],
    m: usize,
    seed: u64,
) -> Result<Vec<SentenceScore>> {
    sentences
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, 0xe7a1]));
            let bound = sentence_logprob_bound(editor, index, train, x, m, &mut rng)?;
            let nlm_lp: f64 = nlm.editor.nlm_logprobs(x)?.iter().sum();
            Ok(SentenceScore {
                bound,
                nlm: nlm_lp,
                tokens: x.len() + 1,
            })
        })
        .collect()
}

/// `log(λ·exp(bound) + (1−λ)·exp(nlm))`, exact at the endpoints.
pub fn smoothed_logprob(bound: f64, nlm: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        nlm
    } else if lambda == 1.0 {
        bound
    } else {
        log_sum_exp(&[lambda.ln() + bound, (1.0 - lambda).ln() + nlm])
    }
}

/// `exp(−Σ log p / Σ tokens)`.
pub fn perplexity(logprobs: &[f64], tokens: &[usize]) -> f64 {
    let total: usize = tokens.iter().sum();
    (-logprobs.iter().sum::<f64>() / total as f64).exp()
}

fn smoothed_ppl(scores: &[SentenceScore], lambda: f64) -> f64 {
    let lps: Vec<f64> = scores
        .iter()
        .map(|s| smoothed_logprob(s.bound.log_sum, s.nlm, lambda))
        .collect();
    let toks: Vec<usize> = scores.iter().map(|s| s.tokens).collect();
    perplexity(&lps, &toks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityReport {
    pub scores: Vec<SentenceScore>,
    pub lambda: f64,
    /// Validation perplexity for each grid value, in grid order.
    pub validation: Vec<(f64, f64)>,
    /// Infinite when some sentence has no neighbor.
    pub editor_ppl: f64,
    pub nlm_ppl: f64,
    pub smoothed_ppl: f64,
    /// Fraction of test sentences with a nonempty neighborhood.
    pub covered: f64,
}

/// Chooses λ on the validation scores (grid argmin, first on ties) and
/// reports test perplexities.
pub fn smoothed_perplexity(
    test: &[SentenceScore],
    validation: &[SentenceScore],
    grid: &[f64],
) -> Result<PerplexityReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if grid.is_empty() || grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidArgument(format!("lambda grid must be nonempty within [0, 1]: {grid:?}")));
    }
    let curve: Vec<(f64, f64)> = grid.iter().map(|&l| (l, smoothed_ppl(validation, l))).collect();
    let mut best = curve[0];
    for &c in &curve[1..] {
        if c.1 < best.1 {
            best = c;
        }
    }
    let toks: Vec<usize> = test.iter().map(|s| s.tokens).collect();
    let bounds: Vec<f64> = test.iter().map(|s| s.bound.log_sum).collect();
    let nlm: Vec<f64> = test.iter().map(|s| s.nlm).collect();
    Ok(PerplexityReport {
        scores: test.to_vec(),
        lambda: best.0,
        validation: curve,
        editor_ppl: perplexity(&bounds, &toks),
        nlm_ppl: perplexity(&nlm, &toks),
        smoothed_ppl: smoothed_ppl(test, best.0),
        covered: test.iter().filter(|s| s.bound.neighbors > 0).count() as f64 / test.len() as f64,
    })
}

impl PerplexityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sentence,tokens,neighbors,bound,jensen_bound,nlm_logprob,smoothed_logprob")?;
        for (i, s) in self.scores.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{}",
                s.tokens,
                s.bound.neighbors,
                s.bound.log_sum,
                s.bound.jensen,
                s.nlm,
                smoothed_logprob(s.bound.log_sum, s.nlm, self.lambda)
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("sentences: {}\n", self.scores.len()));
        s.push_str(&format!("covered by a neighbor: {:.4}\n", self.covered));
        s.push_str(&format!("lambda: {}\n", self.lambda));
        for (l, p) in &self.validation {
            s.push_str(&format!("validation lambda={l}: perplexity {p:.4}\n"));
        }
        s.push_str(&format!("editor-only perplexity: {:.4}\n", self.editor_ppl));
        s.push_str(&format!("nlm perplexity: {:.4}\n", self.nlm_ppl));
        s.push_str(&format!("smoothed perplexity: {:.4}\n", self.smoothed_ppl));
        s
    }
}

/// One sentence of an edit sequence with the decoder log-probability of
/// producing it from its predecessor (0 for the seed).
#[derive(Debug, Clone, PartialEq)]
pub struct WalkStep {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

/// Repeatedly applies prior-sampled edits starting from `seed`. If a decode
/// comes back empty it cannot serve as the next prototype, so the previous
/// sentence is kept for that step.
pub fn random_walk<R: Rng + ?Sized>(
    model: &NeuralEditor,
    seed: &[u32],
    steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<WalkStep>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("a walk needs at least one step".into()));
    }
    if seed.is_empty() {
        return Err(Error::Empty("walk seed"));
    }
    let d_w = model.edit_dim() / 2;
    let mut session = model.editor.session()?;
    let mut out = vec![WalkStep {
        tokens: seed.to_vec(),
        logprob: 0.0,
    }];
    for _ in 0..steps {
        let prev = out.last().expect("nonempty").tokens.clone();
        let z = sample_prior(d_w, rng);
        let Hypothesis { tokens, logprob, .. } = session.sample(Some(&prev), Some(&z), temperature, rng)?;
        out.push(if tokens.is_empty() {
            WalkStep {
                tokens: prev,
                logprob,
            }
        } else {
            WalkStep { tokens, logprob }
        });
    }
    Ok(out)
}

/// Attribute a controlled edit must reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    ShorterThan(usize),
    Contains(u32),
}

impl Predicate {
    pub fn holds(&self, tokens: &[u32]) -> bool {
        match *self {
            Self::ShorterThan(n) => tokens.len() < n,
            Self::Contains(w) => tokens.contains(&w),
        }
    }

    /// `None` when the keyword is not in the vocabulary, so no edit can
    /// ever satisfy it.
    pub fn contains_word(vocab: &Vocabulary, word: &str) -> Option<Self> {
        vocab.id(word).map(Self::Contains)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlResult {
    pub tokens: Vec<u32>,
    /// Cumulative decoder log-probability of the winning sequence.
    pub logprob: f64,
    /// Winning walk, `None` when the prototype itself qualified.
    pub walk: Option<usize>,
}

/// Runs `n_seq` walks of `steps` edits and returns the endpoint of the most
/// probable sequence whose endpoint satisfies `predicate`. The prototype is
/// a zero-step sequence of log-probability 0, so it wins when it qualifies.
/// Walk `i` draws from `(seed, i)`.
pub fn controlled_edit(
    model: &NeuralEditor,
    prototype: &[u32],
    predicate: Predicate,
    n_seq: usize,
    steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Option<ControlResult>> {
    if predicate.holds(prototype) {
        return Ok(Some(ControlResult {
            tokens: prototype.to_vec(),
            logprob: 0.0,
            walk: None,
        }));
    }
    let walks: Vec<Vec<WalkStep>> = (0..n_seq)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, 0xc0]));
            random_walk(model, prototype, steps, temperature, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut best: Option<ControlResult> = None;
    for (i, walk) in walks.into_iter().enumerate() {
        let end = &walk.last().expect("nonempty").tokens;
        if !predicate.holds(end) {
            continue;
        }
        let lp: f64 = walk.iter().map(|s| s.logprob).sum();
        if best.as_ref().map_or(true, |b| lp > b.logprob) {
            best = Some(ControlResult {
                tokens: end.clone(),
                logprob: lp,
                walk: Some(i),
            });
        }
    }
    Ok(best)
}

/// Writes a walk as `step<TAB>sentence` lines.
pub fn write_walk<W: Write>(walk: &[WalkStep], vocab: &Vocabulary, mut w: W) -> Result<()> {
    for (i, s) in walk.iter().enumerate() {
        writeln!(w, "{i}\t{}", vocab.decode(&s.tokens))?;
    }
    Ok(())
}

/// The fixed function-word list used when mining analogies.
pub const STOP_WORDS: &str = include_str!("../data/stopwords.txt");

/// Stop-word ids present in `vocab`.
pub fn stop_word_ids(vocab: &Vocabulary) -> BTreeSet<u32> {
    STOP_WORDS.lines().filter_map(|w| vocab.id(w.trim())).collect()
}

/// `from` in the first sentence becomes `to` in the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordPair {
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalogyQuad {
    pub x1: Vec<u32>,
    pub x2: Vec<u32>,
    pub y1: Vec<u32>,
    pub y2: Vec<u32>,
    pub pair: WordPair,
}

/// Content-word multiset with one occurrence of `w` removed, or `None` if
/// `w` is absent.
fn without_one(content: &[u32], w: u32) -> Option<Vec<u32>> {
    let pos = content.iter().position(|&t| t == w)?;
    let mut out = content.to_vec();
    out.remove(pos);
    Some(out)
}

/// Sentence pairs `(a, b)` where `b` is `a` with `from` replaced by `to`,
/// ignoring order and stop words. Results are index pairs into `corpus`,
/// sorted.
pub fn mine_substitution_pairs(corpus: &[Vec<u32>], pair: WordPair, stop: &BTreeSet<u32>) -> Vec<(usize, usize)> {
    let content: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| {
            let mut c: Vec<u32> = s.iter().copied().filter(|t| !stop.contains(t)).collect();
            c.sort_unstable();
            c
        })
        .collect();
    let mut with_to: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, c) in content.iter().enumerate() {
        if let Some(key) = without_one(c, pair.to) {
            with_to.entry(key).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (i, c) in content.iter().enumerate() {
        let Some(key) = without_one(c, pair.from) else { continue };
        if let Some(js) = with_to.get(&key) {
            for &j in js {
                if i != j && corpus[i] != corpus[j] {
                    out.push((i, j));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Quads from every ordered pairing of distinct mined pairs that share a
/// word pair. Sentence pairs with identical token sequences are merged.
pub fn mine_analogy_quads(corpus: &[Vec<u32>], pairs: &[WordPair], stop: &BTreeSet<u32>) -> Vec<AnalogyQuad> {
    let mut quads = Vec::new();
    for &pair in pairs {
        let mined: BTreeSet<(&[u32], &[u32])> = mine_substitution_pairs(corpus, pair, stop)
            .into_iter()
            .map(|(a, b)| (&corpus[a][..], &corpus[b][..]))
            .collect();
        let mined: Vec<_> = mined.into_iter().collect();
        for (i, &(x1, x2)) in mined.iter().enumerate() {
            for (j, &(y1, y2)) in mined.iter().enumerate() {
                if i != j {
                    quads.push(AnalogyQuad {
                        x1: x1.to_vec(),
                        x2: x2.to_vec(),
                        y1: y1.to_vec(),
                        y2: y2.to_vec(),
                        pair,
                    });
                }
            }
        }
    }
    quads
}

/// Hits at each cutoff for one quad.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadOutcome {
    pub pair: WordPair,
    /// Beam rank of the gold sentence, if it appeared.
    pub edit_rank: Option<usize>,
    pub random_rank: Option<usize>,
}

/// Rank (0-based) of `gold` among beam results.
pub fn gold_rank(beam: &[Hypothesis], gold: &[u32]) -> Option<usize> {
    beam.iter().position(|h| h.tokens == gold)
}

/// Beam width used for cutoffs up to `max_k`.
pub fn analogy_beam_width(max_k: usize) -> usize {
    max_k.max(20)
}

/// Applies `ẑ = f(x₁, x₂)` to `y₁` and checks where `y₂` lands in the beam;
/// the baseline does the same with a prior draw seeded by `(seed, quad)`.
pub fn analogy_outcomes(model: &NeuralEditor, quads: &[AnalogyQuad], beam: usize, seed: u64) -> Result<Vec<QuadOutcome>> {
    let d_w = model.edit_dim() / 2;
    quads
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut session = model.editor.session()?;
            let z_hat = model.posterior_mode(&q.x2, &q.x1)?;
            let edit = session.beam_search(Some(&q.y1), Some(&z_hat), beam)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, 0xa4]));
            let z_rand = sample_prior(d_w, &mut rng);
            let random = session.beam_search(Some(&q.y1), Some(&z_rand), beam)?;
            Ok(QuadOutcome {
                pair: q.pair,
                edit_rank: gold_rank(&edit, &q.y2),
                random_rank: gold_rank(&random, &q.y2),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub pair: Option<WordPair>,
    pub k: usize,
    pub quads: usize,
    pub edit: f64,
    pub random: f64,
}

/// Top-k accuracy per word pair and overall (`pair = None`).
pub fn analogy_accuracy(outcomes: &[QuadOutcome], ks: &[usize]) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<Option<WordPair>, Vec<&QuadOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(Some(o.pair)).or_default().push(o);
        groups.entry(None).or_default().push(o);
    }
    let hit = |r: Option<usize>, k: usize| r.is_some_and(|r| r < k);
    let mut rows = Vec::new();
    for (pair, os) in groups {
        for &k in ks {
            let n = os.len() as f64;
            rows.push(AccuracyRow {
                pair,
                k,
                quads: os.len(),
                edit: os.iter().filter(|o| hit(o.edit_rank, k)).count() as f64 / n,
                random: os.iter().filter(|o| hit(o.random_rank, k)).count() as f64 / n,
            });
        }
    }
    rows
}

/// `relation,k,quads,edit_accuracy,random_accuracy` with words spelled out.
pub fn write_analogy_csv<W: Write>(rows: &[AccuracyRow], vocab: &Vocabulary, mut w: W) -> Result<()> {
    writeln!(w, "relation,k,quads,edit_accuracy,random_accuracy")?;
    for r in rows {
        let rel = match r.pair {
            Some(p) => format!("{}->{}", vocab.decode(&[p.from]), vocab.decode(&[p.to])),
            None => "all".to_string(),
        };
        writeln!(w, "{rel},{},{},{},{}", r.k, r.quads, r.edit, r.random)?;
    }
    Ok(())
}

/// Content words inserted and deleted going from `x1` to `x2`.
pub fn content_diff(x1: &[u32], x2: &[u32], stop: &BTreeSet<u32>) -> (Vec<u32>, Vec<u32>) {
    let d = word_diff(x2, x1);
    let keep = |v: Vec<u32>| v.into_iter().filter(|t| !stop.contains(t)).collect();
    (keep(d.inserted), keep(d.deleted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn score(bound: f64, nlm: f64, tokens: usize) -> SentenceScore {
        SentenceScore {
            bound: SentenceBound {
                log_sum: bound,
                jensen: bound,
                neighbors: usize::from(bound.is_finite()),
            },
            nlm,
            tokens,
        }
    }

    #[test]
    fn single_neighbor_bound() {
        let b = combine_bound(&[-12.5], 100);
        assert!((b.log_sum - (-12.5 - 100f64.ln())).abs() < 1e-12);
        assert_eq!(b.log_sum, b.jensen);
        assert_eq!(combine_bound(&[], 5).log_sum, f64::NEG_INFINITY);
    }

    #[test]
    fn more_neighbors_never_lower_bound() {
        let mut elbos = vec![-10.0];
        let mut prev = combine_bound(&elbos, 50).log_sum;
        for e in [-30.0, -5.0, -11.0, -200.0] {
            elbos.push(e);
            let b = combine_bound(&elbos, 50);
            assert!(b.log_sum >= prev);
            assert!(b.jensen <= b.log_sum);
            prev = b.log_sum;
        }
    }

    #[test]
    fn lambda_zero_is_nlm_and_uniform_gives_v() {
        let v: f64 = 10.0;
        let scores: Vec<_> = (0..5)
            .map(|i| {
                let t = 3 + i;
                score(if i % 2 == 0 { -4.0 } else { f64::NEG_INFINITY }, -(t as f64) * v.ln(), t)
            })
            .collect();
        let r = smoothed_perplexity(&scores, &scores, &[0.0]).unwrap();
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.smoothed_ppl, r.nlm_ppl);
        assert!((r.nlm_ppl - 10.0).abs() < 1e-9);
        assert!(r.editor_ppl.is_infinite());
        assert!((r.covered - 0.6).abs() < 1e-12);
    }

    #[test]
    fn lambda_is_validation_argmin() {
        let val = vec![score(-2.0, -9.0, 4), score(f64::NEG_INFINITY, -8.0, 4)];
        let grid = [0.1, 0.5, 0.9];
        let r = smoothed_perplexity(&val, &val, &grid).unwrap();
        let best = grid
            .iter()
            .map(|&l| smoothed_ppl(&val, l))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(smoothed_ppl(&val, r.lambda), best);
        assert!(smoothed_perplexity(&[], &val, &grid).is_err());
        assert!(smoothed_perplexity(&val, &val, &[1.5]).is_err());
    }

    #[test]
    fn smoothed_probability_is_a_mixture() {
        for l in [0.0, 0.3, 1.0] {
            let p = smoothed_logprob(-1.0, -3.0, l).exp();
            let want = l * (-1.0f64).exp() + (1.0 - l) * (-3.0f64).exp();
            assert!((p - want).abs() < 1e-12 && p > 0.0 && p <= 1.0);
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["this was a good restaurant", "this was the best restaurant", "good food", "best food here", "nice"],
            100,
        )
        .unwrap()
    }

    #[test]
    fn analogy_mining_examples() {
        let v = vocab();
        let stop = stop_word_ids(&v);
        let enc = |s: &str| v.encode(s).unwrap().ids;
        let corpus = vec![
            enc("this was a good restaurant"),
            enc("this was the best restaurant"),
            enc("good food"),
            enc("food best"),
            enc("good nice food"),
            enc("best food here"),
        ];
        let pair = WordPair {
            from: v.id("good").unwrap(),
            to: v.id("best").unwrap(),
        };
        let mined = mine_substitution_pairs(&corpus, pair, &stop);
        // stop words ignored, reordering allowed, two-content-word diffs excluded
        assert_eq!(mined, vec![(0, 1), (2, 3)]);
        let quads = mine_analogy_quads(&corpus, &[pair], &stop);
        assert_eq!(quads.len(), 2);
        let q = quads.iter().find(|q| q.x1 == corpus[0]).unwrap();
        assert_eq!((&q.x2, &q.y1, &q.y2), (&corpus[1], &corpus[2], &corpus[3]));
        let (ins, del) = content_diff(&q.x1, &q.x2, &stop);
        assert_eq!((ins, del), (vec![pair.to], vec![pair.from]));
    }

    #[test]
    fn accuracy_monotone_in_k() {
        let p = WordPair { from: 4, to: 5 };
        let outcomes = vec![
            QuadOutcome {
                pair: p,
                edit_rank: Some(0),
                random_rank: None,
            },
            QuadOutcome {
                pair: p,
                edit_rank: Some(4),
                random_rank: Some(9),
            },
            QuadOutcome {
                pair: p,
                edit_rank: None,
                random_rank: None,
            },
        ];
        let rows = analogy_accuracy(&outcomes, &[1, 5, 10]);
        let all: Vec<_> = rows.iter().filter(|r| r.pair.is_none()).collect();
        assert_eq!(all.len(), 3);
        assert!((all[0].edit - 1.0 / 3.0).abs() < 1e-12);
        assert!((all[1].edit - 2.0 / 3.0).abs() < 1e-12);
        for w in all.windows(2) {
            assert!(w[1].edit >= w[0].edit && w[1].random >= w[0].random);
        }
        assert!((all[2].random - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn predicates() {
        assert!(Predicate::ShorterThan(3).holds(&[1, 2]));
        assert!(!Predicate::ShorterThan(2).holds(&[1, 2]));
        assert!(Predicate::Contains(7).holds(&[4, 7]));
        assert!(Predicate::contains_word(&vocab(), "zebra").is_none());
        assert_eq!(STOP_WORDS.lines().count(), 50);
    }
}
