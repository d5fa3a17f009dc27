//! `protoedit` command-line driver.
//!
//! Every subcommand resolves its configuration (schema defaults, then the
//! `--config` file, then flags), prints it, and then runs. A preprocessed
//! data directory holds `vocab.txt` and `corpus.txt`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protoedit::config::RunConfig;
use protoedit::corpus::{read_lines, Corpus, Placeholders, Vocabulary};
use protoedit::editvec::{sample_prior, EditNoiseConfig, NORM_MAX};
use protoedit::eval::{
    analogy_accuracy, analogy_outcomes, controlled_edit, mine_analogy_quads, random_walk, score_sentences,
    smoothed_perplexity, stop_word_ids, write_analogy_csv, write_walk, Predicate, WordPair,
};
use protoedit::neighbors::{mine_pairs_bfs, read_pairs_tsv, training_pairs, write_pairs_tsv, LshIndex, LshParams};
use protoedit::train::{
    derive_seed, train, train_nlm, write_metrics_csv, Checkpoint, NeuralEditor, Objective, OptimizerKind,
    TrainConfig, TrainPair,
};

#[derive(Parser)]
#[command(name = "protoedit", version, about = "Prototype-then-edit sentence generation")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file, in this order.
#[derive(Args)]
struct GlobalOpts {
    /// `key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Worker threads; 0 means all cores for mining and evaluation, one for training.
    #[arg(long, global = true)]
    threads: Option<String>,
    #[arg(long, global = true)]
    kappa: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<String>,
    #[arg(long, global = true)]
    beam: Option<String>,
    #[arg(long, global = true)]
    steps: Option<String>,
    #[arg(long = "n-seq", global = true)]
    n_seq: Option<String>,
    /// Comma-separated λ values in [0, 1].
    #[arg(long = "lambda-grid", global = true)]
    lambda_grid: Option<String>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Normalize a raw corpus and build its vocabulary.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mine neighbor pairs with the LSH index.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the neural editor on mined pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the language-model baseline on the corpus.
    TrainNlm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Smoothed perplexity on held-out text, λ tuned on validation text.
    EvalPpl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        editor: PathBuf,
        #[arg(long)]
        nlm: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample edits of a prototype under prior edit vectors.
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prototype: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random walk of repeated prior edits.
    Walk {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        start: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Most probable edit sequence reaching an attribute.
    Control {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prototype: String,
        #[arg(long, conflicts_with = "contains", required_unless_present = "contains")]
        shorter_than: Option<usize>,
        #[arg(long)]
        contains: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k analogy accuracy on substitution quads mined from the corpus.
    Analogy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// One `from to` word pair per line.
        #[arg(long)]
        relations: PathBuf,
        /// Evaluate a seeded sample of at most this many quads.
        #[arg(long)]
        max_quads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cmd {
    fn parallel_by_default(&self) -> bool {
        !matches!(self, Cmd::Train { .. } | Cmd::TrainNlm { .. })
    }
}

fn resolve(opts: &GlobalOpts) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &opts.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.merge_text(&text)?;
    }
    let flags = [
        ("seed", &opts.seed),
        ("threads", &opts.threads),
        ("kappa", &opts.kappa),
        ("epsilon", &opts.epsilon),
        ("temperature", &opts.temperature),
        ("beam", &opts.beam),
        ("steps", &opts.steps),
        ("n_seq", &opts.n_seq),
        ("lambda_grid", &opts.lambda_grid),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &opts.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects key=value, got {kv:?}");
        };
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_text(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_lines(BufReader::new(f))?)
}

struct Data {
    vocab: Vocabulary,
    corpus: Corpus,
    placeholders: Placeholders,
    max_tokens: usize,
}

impl Data {
    fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let vpath = dir.join("vocab.txt");
        let vf = File::open(&vpath).with_context(|| format!("opening {}", vpath.display()))?;
        let vocab = Vocabulary::read_from(BufReader::new(vf))?;
        let lines = read_text(&dir.join("corpus.txt"))?;
        let n = lines.len();
        let (corpus, _) = Corpus::ingest(&lines, &vocab, usize::MAX);
        ensure!(corpus.len() == n, "{} has empty lines", dir.join("corpus.txt").display());
        ensure!(!corpus.is_empty(), "corpus in {} is empty", dir.display());
        Ok(Self {
            vocab,
            corpus,
            placeholders: Placeholders::new(cfg.get("date_rule")?),
            max_tokens: cfg.get("max_tokens")?,
        })
    }

    /// Normalizes and encodes raw text; lines that are empty or too long
    /// are dropped.
    fn encode_raw(&self, lines: &[String]) -> Vec<Vec<u32>> {
        let normalized: Vec<String> = lines.iter().map(|l| self.placeholders.apply(l)).collect();
        let (c, stats) = Corpus::ingest(&normalized, &self.vocab, self.max_tokens);
        if stats.empty + stats.too_long > 0 {
            info!("dropped {} empty and {} overlong lines", stats.empty, stats.too_long);
        }
        c.sentences.into_iter().map(|s| s.ids).collect()
    }

    fn encode_one(&self, line: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = self
            .placeholders
            .apply(line)
            .split_whitespace()
            .map(|t| self.vocab.id_or_oov(t))
            .collect();
        ensure!(!ids.is_empty(), "sentence {line:?} has no tokens");
        Ok(ids)
    }

    fn sentences(&self) -> Vec<Vec<u32>> {
        self.corpus.sentences.iter().map(|s| s.ids.clone()).collect()
    }

    fn index(&self, cfg: &RunConfig) -> Result<LshIndex> {
        let params = LshParams {
            bands: cfg.get("lsh_bands")?,
            rows: cfg.get("lsh_rows")?,
            seed: cfg.get("seed")?,
            include_self: false,
        };
        Ok(LshIndex::build(&self.corpus, params)?)
    }
}

fn train_config(cfg: &RunConfig, vocab_size: usize, pair_file: Option<&Path>) -> Result<TrainConfig> {
    let optimizer: OptimizerKind = cfg.get("optimizer")?;
    let tc = TrainConfig {
        lr: cfg.get("lr")?,
        batch_size: cfg.get("batch_size")?,
        epochs: cfg.get("epochs")?,
        seed: cfg.get("seed")?,
        clip: cfg.get("clip")?,
        optimizer,
        noise: EditNoiseConfig {
            kappa: cfg.get("kappa")?,
            epsilon: cfg.get("epsilon")?,
            norm_max: NORM_MAX,
        },
        edit_word_dim: cfg.get("edit_word_dim")?,
        layers: cfg.get("layers")?,
        hidden: cfg.get("hidden")?,
        word_dim: cfg.get("word_dim")?,
        vocab_size,
        max_len: cfg.get("max_len")?,
        record_timing: cfg.get("record_timing")?,
        pair_file: pair_file.map(|p| p.display().to_string()),
    };
    tc.validate()?;
    Ok(tc)
}

fn load_model(path: &Path, data: &Data, objective: Objective) -> Result<NeuralEditor> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ensure!(
        ck.objective == objective,
        "{} holds a {:?} model, expected {:?}",
        path.display(),
        ck.objective,
        objective
    );
    ensure!(
        ck.config.vocab_size == data.vocab.len(),
        "{} was trained with vocabulary size {}, data has {}",
        path.display(),
        ck.config.vocab_size,
        data.vocab.len()
    );
    Ok(NeuralEditor::from_params(&ck.config, ck.params)?)
}

fn save_training(
    trainer: &protoedit::train::Trainer,
    metrics: &[protoedit::train::EpochMetrics],
    out: &Path,
    metrics_path: Option<&Path>,
) -> Result<()> {
    trainer.checkpoint().save(out)?;
    let mut w = output(metrics_path)?;
    write_metrics_csv(metrics, &mut w)?;
    w.flush()?;
    if let Some(last) = metrics.last() {
        info!("epoch {} mean loss {:.4}", last.epoch, last.mean_loss);
    }
    Ok(())
}

fn run(cmd: Cmd, cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    match cmd {
        Cmd::Preprocess { input, out_dir } => {
            let placeholders = Placeholders::new(cfg.get("date_rule")?);
            let lines: Vec<String> = read_text(&input)?.iter().map(|l| placeholders.apply(l)).collect();
            let vocab = Vocabulary::build(&lines, cfg.get("vocab_size")?)?;
            let (corpus, stats) = Corpus::ingest(&lines, &vocab, cfg.get("max_tokens")?);
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let mut v = output(Some(&out_dir.join("vocab.txt")))?;
            vocab.write_to(&mut v)?;
            v.flush()?;
            let mut c = output(Some(&out_dir.join("corpus.txt")))?;
            for s in &corpus.sentences {
                writeln!(c, "{}", vocab.decode(&s.ids))?;
            }
            c.flush()?;
            println!(
                "lines={} kept={} empty={} too_long={} vocab={} oov_rate={:.4}",
                stats.lines,
                corpus.len(),
                stats.empty,
                stats.too_long,
                vocab.len(),
                stats.oov_rate()
            );
        }
        Cmd::Mine { data, out } => {
            let data = Data::load(&data, cfg)?;
            let index = data.index(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x3173]));
            let mined = mine_pairs_bfs(&index, cfg.get("mine_seeds")?, cfg.get("mine_budget")?, &mut rng);
            let mut w = output(Some(&out))?;
            write_pairs_tsv(&mined.edges, &mut w)?;
            w.flush()?;
            println!(
                "edges={} encountered={} visited={}",
                mined.edges.len(),
                mined.encountered,
                mined.visited
            );
        }
        Cmd::Train {
            data,
            pairs,
            out,
            metrics,
        } => {
            let data = Data::load(&data, cfg)?;
            let f = File::open(&pairs).with_context(|| format!("opening {}", pairs.display()))?;
            let edges = read_pairs_tsv(BufReader::new(f))?;
            let n = data.corpus.len();
            let examples: Vec<TrainPair> = training_pairs(&edges)
                .into_iter()
                .map(|(p, t)| {
                    ensure!(p < n && t < n, "pair ({p}, {t}) out of range for a corpus of {n}");
                    Ok(TrainPair {
                        prototype: data.corpus.sentences[p].ids.clone(),
                        target: data.corpus.sentences[t].ids.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            ensure!(!examples.is_empty(), "{} has no pairs", pairs.display());
            let tc = train_config(cfg, data.vocab.len(), Some(&pairs))?;
            let (trainer, m) = train(&examples, &tc)?;
            save_training(&trainer, &m, &out, metrics.as_deref())?;
        }
        Cmd::TrainNlm { data, out, metrics } => {
            let data = Data::load(&data, cfg)?;
            let tc = train_config(cfg, data.vocab.len(), None)?;
            let (trainer, m) = train_nlm(&data.sentences(), &tc)?;
            save_training(&trainer, &m, &out, metrics.as_deref())?;
        }
        Cmd::EvalPpl {
            data,
            editor,
            nlm,
            valid,
            test,
            out,
        } => {
            let data = Data::load(&data, cfg)?;
            let editor = load_model(&editor, &data, Objective::Edit)?;
            let nlm = load_model(&nlm, &data, Objective::Language)?;
            let index = data.index(cfg)?;
            let valid = data.encode_raw(&read_text(&valid)?);
            let test = data.encode_raw(&read_text(&test)?);
            let m: usize = cfg.get("samples")?;
            let sv = score_sentences(&editor, &nlm, &index, &data.corpus, &valid, m, derive_seed(&[seed, 1]))?;
            let st = score_sentences(&editor, &nlm, &index, &data.corpus, &test, m, derive_seed(&[seed, 2]))?;
            let report = smoothed_perplexity(&st, &sv, &cfg.get_list("lambda_grid")?)?;
            if let Some(p) = out {
                let mut w = output(Some(&p))?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            print!("{}", report.summary());
        }
        Cmd::Generate {
            data,
            model,
            prototype,
            count,
            out,
        } => {
            let data = Data::load(&data, cfg)?;
            let model = load_model(&model, &data, Objective::Edit)?;
            let proto = data.encode_one(&prototype)?;
            let tau: f64 = cfg.get("temperature")?;
            let mut session = model.editor.session()?;
            let mut w = output(out.as_deref())?;
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, 0x9e]));
                let z = sample_prior(model.edit_dim() / 2, &mut rng);
                let h = session.sample(Some(&proto), Some(&z), tau, &mut rng)?;
                writeln!(w, "{:.6}\t{}", h.logprob, data.vocab.decode(&h.tokens))?;
            }
            w.flush()?;
        }
        Cmd::Walk {
            data,
            model,
            start,
            out,
        } => {
            let data = Data::load(&data, cfg)?;
            let model = load_model(&model, &data, Objective::Edit)?;
            let start = data.encode_one(&start)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x3a]));
            let walk = random_walk(&model, &start, cfg.get("steps")?, cfg.get("temperature")?, &mut rng)?;
            let mut w = output(out.as_deref())?;
            write_walk(&walk, &data.vocab, &mut w)?;
            w.flush()?;
        }
        Cmd::Control {
            data,
            model,
            prototype,
            shorter_than,
            contains,
            out,
        } => {
            let data = Data::load(&data, cfg)?;
            let model = load_model(&model, &data, Objective::Edit)?;
            let proto = data.encode_one(&prototype)?;
            let predicate = match (shorter_than, contains) {
                (Some(n), _) => Predicate::ShorterThan(n),
                (None, Some(word)) => Predicate::contains_word(&data.vocab, &word)
                    .with_context(|| format!("keyword {word:?} is not in the vocabulary"))?,
                (None, None) => bail!("give --shorter-than or --contains"),
            };
            let result = controlled_edit(
                &model,
                &proto,
                predicate,
                cfg.get("n_seq")?,
                cfg.get("steps")?,
                cfg.get("temperature")?,
                seed,
            )?;
            let mut w = output(out.as_deref())?;
            match result {
                Some(r) => {
                    let walk = r.walk.map_or_else(|| "prototype".to_string(), |i| i.to_string());
                    writeln!(w, "{walk}\t{:.6}\t{}", r.logprob, data.vocab.decode(&r.tokens))?;
                }
                None => writeln!(w, "none\tno edit sequence satisfied the predicate")?,
            }
            w.flush()?;
        }
        Cmd::Analogy {
            data,
            model,
            relations,
            max_quads,
            out,
        } => {
            let data = Data::load(&data, cfg)?;
            let model = load_model(&model, &data, Objective::Edit)?;
            let mut pairs = Vec::new();
            for (i, line) in read_text(&relations)?.iter().enumerate() {
                let words: Vec<&str> = line.split_whitespace().collect();
                if words.is_empty() {
                    continue;
                }
                let [from, to] = words[..] else {
                    bail!("{} line {}: expected two words", relations.display(), i + 1);
                };
                let id = |w: &str| {
                    data.vocab
                        .id(w)
                        .with_context(|| format!("relation word {w:?} is not in the vocabulary"))
                };
                pairs.push(WordPair { from: id(from)?, to: id(to)? });
            }
            ensure!(!pairs.is_empty(), "{} has no relations", relations.display());
            let stop = stop_word_ids(&data.vocab);
            let mut quads = mine_analogy_quads(&data.sentences(), &pairs, &stop);
            ensure!(!quads.is_empty(), "no analogy quads found in the corpus");
            if let Some(limit) = max_quads {
                quads.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x9a])));
                quads.truncate(limit);
            }
            let ks: Vec<usize> = cfg.get_list("top_k")?;
            let beam: usize = cfg.get("beam")?;
            let max_k = ks.iter().copied().max().unwrap_or(1);
            ensure!(beam >= max_k, "beam {beam} is narrower than top_k {max_k}");
            let outcomes = analogy_outcomes(&model, &quads, beam, seed)?;
            let mut w = output(out.as_deref())?;
            write_analogy_csv(&analogy_accuracy(&outcomes, &ks), &data.vocab, &mut w)?;
            w.flush()?;
            println!("quads={}", quads.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PROTOEDIT_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    let result = resolve(&cli.opts).and_then(|cfg| {
        print!("# resolved config\n{}", cfg.render());
        let threads: usize = cfg.get("threads")?;
        let threads = match threads {
            0 if cli.cmd.parallel_by_default() => 0,
            0 => 1,
            n => n,
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("starting worker threads")?;
        run(cli.cmd, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
