//! ELBO training over mined pairs, the language-model baseline, the
//! optimizers and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId, ParamId, Params};
use crate::config::{parse_key_values, parse_value};
use crate::editor::{Bound, EditorConfig, EditorModel};
use crate::editvec::{self, EditEmbeddings, EditNoiseConfig, EditVector, PosteriorNoise};
use crate::error::{Error, Result};
use crate::neighbors::mix64;
use crate::tensor::Tensor;

/// Scale of the uniform initialization of the edit embeddings Φ.
const EDIT_EMB_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

impl OptimizerKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }
}

/// What a training example contributes to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// One-sample ELBO `−log p_edit(x | x′, z̃) + KL`.
    Edit,
    /// Language-model NLL of the target alone.
    Language,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
    pub noise: EditNoiseConfig,
    /// Edit word-embedding width d_w; the edit vector has `2·d_w` entries.
    pub edit_word_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Fill the `tokens_per_sec` metrics column (makes metrics files vary
    /// between runs).
    pub record_timing: bool,
    /// Where the training pairs came from, echoed for provenance only.
    pub pair_file: Option<String>,
}

impl TrainConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 1,
            clip: 5.0,
            optimizer: OptimizerKind::Adam,
            noise: EditNoiseConfig {
                kappa: 25.0,
                epsilon: 1.0,
                norm_max: editvec::NORM_MAX,
            },
            edit_word_dim: 64,
            layers: 1,
            hidden: 128,
            word_dim: 64,
            vocab_size,
            max_len: 50,
            record_timing: false,
            pair_file: None,
        }
    }

    pub fn editor_config(&self) -> EditorConfig {
        EditorConfig {
            layers: self.layers,
            hidden: self.hidden,
            word_dim: self.word_dim,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            edit_dim: 2 * self.edit_word_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.batch_size == 0 || self.edit_word_dim == 0 {
            return Err(Error::Config("batch_size and edit_word_dim must be positive".into()));
        }
        self.noise.validate()?;
        self.editor_config().validate()
    }

    /// `key=value` lines sufficient to rebuild this config.
    pub fn echo(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("lr", self.lr.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("epochs", self.epochs.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("clip", self.clip.to_string());
        kv.insert("optimizer", self.optimizer.as_str().to_string());
        kv.insert("kappa", self.noise.kappa.to_string());
        kv.insert("epsilon", self.noise.epsilon.to_string());
        kv.insert("norm_max", self.noise.norm_max.to_string());
        kv.insert("edit_word_dim", self.edit_word_dim.to_string());
        kv.insert("layers", self.layers.to_string());
        kv.insert("hidden", self.hidden.to_string());
        kv.insert("word_dim", self.word_dim.to_string());
        kv.insert("vocab_size", self.vocab_size.to_string());
        kv.insert("max_len", self.max_len.to_string());
        kv.insert("record_timing", self.record_timing.to_string());
        kv.insert("pair_file", self.pair_file.clone().unwrap_or_default());
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut kv = parse_key_values(text)?;
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| Error::Config(format!("config echo lacks {k}")))
        };
        let pair_file = take("pair_file")?;
        let cfg = Self {
            lr: parse_value("lr", &take("lr")?)?,
            batch_size: parse_value("batch_size", &take("batch_size")?)?,
            epochs: parse_value("epochs", &take("epochs")?)?,
            seed: parse_value("seed", &take("seed")?)?,
            clip: parse_value("clip", &take("clip")?)?,
            optimizer: parse_value("optimizer", &take("optimizer")?)?,
            noise: EditNoiseConfig {
                kappa: parse_value("kappa", &take("kappa")?)?,
                epsilon: parse_value("epsilon", &take("epsilon")?)?,
                norm_max: parse_value("norm_max", &take("norm_max")?)?,
            },
            edit_word_dim: parse_value("edit_word_dim", &take("edit_word_dim")?)?,
            layers: parse_value("layers", &take("layers")?)?,
            hidden: parse_value("hidden", &take("hidden")?)?,
            word_dim: parse_value("word_dim", &take("word_dim")?)?,
            vocab_size: parse_value("vocab_size", &take("vocab_size")?)?,
            max_len: parse_value("max_len", &take("max_len")?)?,
            record_timing: parse_value("record_timing", &take("record_timing")?)?,
            pair_file: (!pair_file.is_empty()).then_some(pair_file),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key {k:?} in config echo")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Editor plus edit embeddings Φ, sharing one parameter set.
#[derive(Debug, Clone)]
pub struct NeuralEditor {
    pub editor: EditorModel,
    pub emb: EditEmbeddings,
    pub noise: EditNoiseConfig,
}

impl NeuralEditor {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x1417]));
        let mut editor = EditorModel::new(cfg.editor_config(), &mut rng)?;
        let emb = EditEmbeddings::register(
            &mut editor.params,
            cfg.vocab_size,
            cfg.edit_word_dim,
            EDIT_EMB_INIT,
            &mut rng,
        )?;
        Ok(Self {
            editor,
            emb,
            noise: cfg.noise,
        })
    }

    pub fn from_params(cfg: &TrainConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let emb = EditEmbeddings::lookup(&params)
            .ok_or_else(|| Error::Format("checkpoint lacks edit embeddings".into()))?;
        if emb.dim != cfg.edit_word_dim || params.get(emb.id).rows() != cfg.vocab_size {
            return Err(Error::Format("edit embedding shape does not match config".into()));
        }
        Ok(Self {
            editor: EditorModel::from_params(cfg.editor_config(), params)?,
            emb,
            noise: cfg.noise,
        })
    }

    pub fn params(&self) -> &Params {
        &self.editor.params
    }

    pub fn edit_dim(&self) -> usize {
        self.emb.edit_dim()
    }

    pub fn kl_total(&self) -> f64 {
        editvec::kl_total(&self.noise, self.edit_dim())
    }

    /// Deterministic edit vector f(x, x′) with truncated norm.
    pub fn posterior_mode(&self, x: &[u32], x_prime: &[u32]) -> Result<EditVector> {
        editvec::posterior_mode(self.params(), &self.emb, x, x_prime, &self.noise)
    }

    /// One reparameterized posterior draw, as a plain vector.
    pub fn sample_posterior<R: rand::Rng + ?Sized>(
        &self,
        x: &[u32],
        x_prime: &[u32],
        rng: &mut R,
    ) -> Result<EditVector> {
        let mut g = Graph::new();
        let s = editvec::sample_posterior(&mut g, self.params(), &self.emb, x, x_prime, &self.noise, rng)?;
        Ok(edit_vector_from_row(g.value(s.z).data()))
    }

    /// One-sample ELBO `log p_edit(x | x′, z̃) − KL` (an estimate of a lower
    /// bound on `log p(x | x′)`).
    pub fn elbo_sample<R: rand::Rng + ?Sized>(&self, x: &[u32], x_prime: &[u32], rng: &mut R) -> Result<f64> {
        let z = self.sample_posterior(x, x_prime, rng)?;
        let lp: f64 = self.editor.decode_logprobs(x, x_prime, &z)?.iter().sum();
        Ok(lp - self.kl_total())
    }
}

/// Wraps a raw `z` as an [`EditVector`].
pub fn edit_vector_from_row(z: &[f64]) -> EditVector {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return EditVector::zeros(z.len());
    }
    EditVector {
        z: z.to_vec(),
        norm,
        dir: z.iter().map(|v| v / norm).collect(),
    }
}

/// Loss nodes for one example.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Total loss (reconstruction NLL plus the constant KL).
    pub loss: NodeId,
    /// Summed reconstruction NLL.
    pub nll: NodeId,
}

/// One-sample negative ELBO for the pair `(x, x′)`. The KL term enters as a
/// constant: it depends only on (κ, ε, d).
pub fn elbo_loss<R: rand::Rng + ?Sized>(
    g: &mut Graph,
    model: &NeuralEditor,
    bound: &Bound,
    x: &[u32],
    x_prime: &[u32],
    rng: &mut R,
) -> Result<LossNodes> {
    let post = editvec::sample_posterior(g, model.params(), &model.emb, x, x_prime, &model.noise, rng)?;
    elbo_loss_at(g, model, bound, x, x_prime, post.z)
}

/// Negative ELBO with a given posterior sample node.
pub fn elbo_loss_at(
    g: &mut Graph,
    model: &NeuralEditor,
    bound: &Bound,
    x: &[u32],
    x_prime: &[u32],
    z: NodeId,
) -> Result<LossNodes> {
    let enc = model.editor.encode(g, bound, x_prime)?;
    let per_step = model.editor.decode_nll(g, bound, Some(&enc), Some(z), x)?;
    let nll = g.sum(per_step);
    let loss = g.add_const(nll, model.kl_total());
    Ok(LossNodes { loss, nll })
}

/// Language-model NLL of `x` (EOS included).
pub fn nlm_loss(g: &mut Graph, model: &NeuralEditor, bound: &Bound, x: &[u32]) -> Result<LossNodes> {
    let per_step = model.editor.decode_nll(g, bound, None, None, x)?;
    let nll = g.sum(per_step);
    Ok(LossNodes { loss: nll, nll })
}

/// A training example: target `x` and prototype `x′` (unused for the
/// language model).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrainPair {
    pub prototype: Vec<u32>,
    pub target: Vec<u32>,
}

/// Stateless seed derivation shared by training and evaluation.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Fixed noise draws for one example, so that loss evaluations can be
/// repeated exactly (finite differences, reproducibility).
pub fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, index as u64]))
}

/// Per-example result: loss, summed NLL, target tokens (EOS included) and
/// sparse parameter gradients.
#[derive(Debug)]
pub struct ExampleGrad {
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
    pub grads: Vec<(ParamId, Tensor)>,
}

pub fn example_gradient(
    model: &NeuralEditor,
    objective: Objective,
    ex: &TrainPair,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleGrad> {
    let mut g = Graph::new();
    let bound = model.editor.bind(&mut g)?;
    let nodes = match objective {
        Objective::Edit => elbo_loss(&mut g, model, &bound, &ex.target, &ex.prototype, rng)?,
        Objective::Language => nlm_loss(&mut g, model, &bound, &ex.target)?,
    };
    let loss = g.value(nodes.loss).item();
    let nll = g.value(nodes.nll).item();
    let grads = g.backward(nodes.loss)?;
    Ok(ExampleGrad {
        loss,
        nll,
        tokens: ex.target.len() + 1,
        grads: grads.params().map(|(p, t)| (p, t.clone())).collect(),
    })
}

/// Mean loss and dense mean gradient over a batch. Examples are processed in
/// parallel and merged in batch order.
pub fn batch_gradient(
    model: &NeuralEditor,
    objective: Objective,
    batch: &[(&TrainPair, ChaCha8Rng)],
) -> Result<(Vec<ExampleGrad>, Vec<Tensor>)> {
    let results: Vec<ExampleGrad> = batch
        .par_iter()
        .map(|(ex, rng)| example_gradient(model, objective, ex, &mut rng.clone()))
        .collect::<Result<_>>()?;
    let mut dense: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    for r in &results {
        for (p, t) in &r.grads {
            dense[p.0].add_assign(t);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    dense.iter_mut().for_each(|t| t.scale_assign(inv));
    Ok((results, dense))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|t| t.scale_assign(s));
    }
    norm
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &Params) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn apply(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.into_iter().zip(grads) {
                    for (p, gi) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, id) in ids.into_iter().enumerate() {
                    let p = params.get_mut(id).data_mut();
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, &gj) in grads[i].data().iter().enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-example loss.
    pub mean_loss: f64,
    /// Summed reconstruction NLL over the epoch.
    pub nll: f64,
    /// Target tokens seen, EOS included.
    pub tokens: usize,
    pub tokens_per_sec: Option<f64>,
}

impl EpochMetrics {
    pub fn token_nll(&self) -> f64 {
        self.nll / self.tokens as f64
    }
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mean_loss,tokens_per_sec")?;
    for m in metrics {
        let tps = m.tokens_per_sec.map(|t| format!("{t:.1}")).unwrap_or_default();
        writeln!(w, "{},{},{}", m.epoch, m.mean_loss, tps)?;
    }
    Ok(())
}

/// Optimizer, model and epoch counter for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: NeuralEditor,
    pub cfg: TrainConfig,
    pub objective: Objective,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, objective: Objective) -> Result<Self> {
        let model = NeuralEditor::new(&cfg)?;
        let opt = OptimizerState::new(cfg.optimizer, cfg.lr, model.params());
        Ok(Self {
            model,
            cfg,
            objective,
            opt,
            epoch: 0,
        })
    }

    /// Runs one shuffled epoch. Examples are put in canonical (sorted) order
    /// before shuffling, so the input order does not matter.
    pub fn run_epoch(&mut self, data: &[TrainPair]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let mut canonical: Vec<&TrainPair> = data.iter().collect();
        canonical.sort();
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..canonical.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, epoch as u64, 0x5f]));
        order.shuffle(&mut shuffle_rng);

        let start = Instant::now();
        let (mut loss_sum, mut nll_sum, mut tokens) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<(&TrainPair, ChaCha8Rng)> = chunk
                .iter()
                .map(|&i| (canonical[i], example_rng(self.cfg.seed, epoch, i)))
                .collect();
            let (results, mut grads) = batch_gradient(&self.model, self.objective, &batch)?;
            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: batch_loss,
                });
            }
            loss_sum += batch_loss;
            nll_sum += results.iter().map(|r| r.nll).sum::<f64>();
            tokens += results.iter().map(|r| r.tokens).sum::<usize>();
            let norm = clip_global_norm(&mut grads, self.cfg.clip);
            debug!("epoch {epoch} step {step}: loss {:.4} grad norm {norm:.3}", batch_loss / chunk.len() as f64);
            self.opt.apply(&mut self.model.editor.params, &grads);
        }
        self.epoch = epoch;
        let secs = start.elapsed().as_secs_f64();
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            nll: nll_sum,
            tokens,
            tokens_per_sec: self.cfg.record_timing.then(|| tokens as f64 / secs.max(1e-9)),
        };
        info!(
            "epoch {epoch}: mean loss {:.4}, per-token nll {:.4}",
            m.mean_loss,
            m.token_nll()
        );
        Ok(m)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn fit(&mut self, data: &[TrainPair]) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            out.push(self.run_epoch(data)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            objective: self.objective,
            params: self.model.params().clone(),
            opt: self.opt.clone(),
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = NeuralEditor::from_params(&ck.config, ck.params)?;
        if ck.opt.m.len() != model.params().len() || ck.opt.v.len() != model.params().len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            model,
            cfg: ck.config,
            objective: ck.objective,
            opt: ck.opt,
            epoch: ck.epoch,
        })
    }
}

/// Trains the editor on `(x′, x)` pairs.
pub fn train(pairs: &[TrainPair], cfg: &TrainConfig) -> Result<(Trainer, Vec<EpochMetrics>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let mut t = Trainer::new(cfg.clone(), Objective::Edit)?;
    let metrics = t.fit(pairs)?;
    Ok((t, metrics))
}

/// Trains the language-model baseline on plain sentences.
pub fn train_nlm(sentences: &[Vec<u32>], cfg: &TrainConfig) -> Result<(Trainer, Vec<EpochMetrics>)> {
    if sentences.is_empty() {
        return Err(Error::Empty("training sentences"));
    }
    let data: Vec<TrainPair> = sentences
        .iter()
        .map(|s| TrainPair {
            prototype: Vec::new(),
            target: s.clone(),
        })
        .collect();
    let mut t = Trainer::new(cfg.clone(), Objective::Language)?;
    let metrics = t.fit(&data)?;
    Ok((t, metrics))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PROTOEDT";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub objective: Objective,
    pub params: Params,
    pub opt: OptimizerState,
    /// Completed epochs. Per-example noise is derived from (seed, epoch,
    /// index), so seed and epoch are the whole RNG state.
    pub epoch: usize,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn write_f64_section<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    w.write_all(&[DTYPE_F64])?;
    write_u64(w, t.rows() as u64)?;
    write_u64(w, t.cols() as u64)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_u64_section<W: Write>(w: &mut W, name: &str, v: u64) -> Result<()> {
    write_str(w, name)?;
    w.write_all(&[DTYPE_U64])?;
    write_u64(w, 1)?;
    write_u64(w, 1)?;
    write_u64(w, v)
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8, _>(r)?))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

enum Section {
    F64(Tensor),
    U64(u64),
}

fn read_section<R: Read>(r: &mut R) -> Result<(String, Section)> {
    let name = read_str(r)?;
    let [dtype] = read_exact::<1, _>(r)?;
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    match dtype {
        DTYPE_F64 => {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("section {name} is too large")))?;
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Format(format!("truncated section {name}: {e}")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((name, Section::F64(Tensor::from_vec(rows, cols, data)?)))
        }
        DTYPE_U64 if rows == 1 && cols == 1 => Ok((name, Section::U64(read_u64(r)?))),
        _ => Err(Error::Format(format!("section {name} has unsupported dtype {dtype}"))),
    }
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        let mut echo = self.config.echo();
        echo.push_str(match self.objective {
            Objective::Edit => "objective=edit\n",
            Objective::Language => "objective=language\n",
        });
        write_str(&mut w, &echo)?;
        let n_sections = 3 * self.params.len() as u64 + 3;
        write_u64(&mut w, n_sections)?;
        for (id, name, t) in self.params.iter() {
            write_f64_section(&mut w, &format!("param/{name}"), t)?;
            write_f64_section(&mut w, &format!("adam_m/{name}"), &self.opt.m[id.0])?;
            write_f64_section(&mut w, &format!("adam_v/{name}"), &self.opt.v[id.0])?;
        }
        write_u64_section(&mut w, "state/step", self.opt.step)?;
        write_u64_section(&mut w, "state/epoch", self.epoch as u64)?;
        write_u64_section(&mut w, "state/seed", self.config.seed)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_exact::<8, _>(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut echo = read_str(&mut r)?;
        let objective = if let Some(rest) = strip_line(&echo, "objective=edit") {
            echo = rest;
            Objective::Edit
        } else if let Some(rest) = strip_line(&echo, "objective=language") {
            echo = rest;
            Objective::Language
        } else {
            return Err(Error::Format("checkpoint lacks objective".into()));
        };
        let config = TrainConfig::from_echo(&echo)?;
        let n_sections = read_u64(&mut r)?;
        let mut params = Params::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let (mut step, mut epoch, mut seed) = (None, None, None);
        for _ in 0..n_sections {
            let (name, section) = read_section(&mut r)?;
            match (name.split_once('/'), section) {
                (Some(("param", p)), Section::F64(t)) => {
                    params.add(p, t);
                }
                (Some(("adam_m", _)), Section::F64(t)) => m.push(t),
                (Some(("adam_v", _)), Section::F64(t)) => v.push(t),
                (Some(("state", "step")), Section::U64(x)) => step = Some(x),
                (Some(("state", "epoch")), Section::U64(x)) => epoch = Some(x as usize),
                (Some(("state", "seed")), Section::U64(x)) => seed = Some(x),
                _ => return Err(Error::Format(format!("unexpected checkpoint section {name}"))),
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let missing = |what: &str| Error::Format(format!("checkpoint lacks {what}"));
        let step = step.ok_or_else(|| missing("step count"))?;
        let epoch = epoch.ok_or_else(|| missing("epoch"))?;
        if seed != Some(config.seed) {
            return Err(Error::Format("checkpoint seed does not match its config".into()));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            opt: OptimizerState {
                kind: config.optimizer,
                lr: config.lr,
                step,
                m,
                v,
            },
            config,
            objective,
            params,
            epoch,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn strip_line(text: &str, line: &str) -> Option<String> {
    let mut found = false;
    let rest: String = text
        .lines()
        .filter(|l| {
            let hit = !found && l.trim() == line;
            found |= hit;
            !hit
        })
        .map(|l| format!("{l}\n"))
        .collect();
    found.then_some(rest)
}

/// Draws the posterior noise used by [`elbo_loss`] without a graph, for
/// callers that need to replay it.
pub fn draw_noise<R: rand::Rng + ?Sized>(model: &NeuralEditor, degenerate: bool, rng: &mut R) -> Result<PosteriorNoise> {
    let kappa = if degenerate { 0.0 } else { model.noise.kappa };
    PosteriorNoise::draw(kappa, model.edit_dim(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(vocab: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 4,
            epochs: 3,
            seed: 3,
            hidden: 8,
            word_dim: 6,
            edit_word_dim: 3,
            max_len: 8,
            ..TrainConfig::new(vocab)
        }
    }

    fn toy_pairs() -> Vec<TrainPair> {
        vec![
            TrainPair {
                prototype: vec![4, 5, 6],
                target: vec![4, 5, 7],
            },
            TrainPair {
                prototype: vec![4, 5, 7],
                target: vec![4, 5, 6],
            },
            TrainPair {
                prototype: vec![8, 9],
                target: vec![8, 9, 10],
            },
        ]
    }

    #[test]
    fn zero_kl_config_gives_plain_reconstruction() {
        let mut cfg = tiny_cfg(12);
        cfg.noise = EditNoiseConfig {
            kappa: 0.0,
            epsilon: editvec::NORM_MAX,
            norm_max: editvec::NORM_MAX,
        };
        let model = NeuralEditor::new(&cfg).unwrap();
        assert_eq!(model.kl_total(), 0.0);
        let mut g = Graph::new();
        let b = model.editor.bind(&mut g).unwrap();
        let mut rng = example_rng(1, 1, 0);
        let n = elbo_loss(&mut g, &model, &b, &[4, 5], &[4, 6], &mut rng).unwrap();
        assert_eq!(g.value(n.loss).item(), g.value(n.nll).item());
    }

    #[test]
    fn loss_at_least_kl_and_kl_has_no_gradient() {
        let cfg = tiny_cfg(12);
        let model = NeuralEditor::new(&cfg).unwrap();
        let ex = &toy_pairs()[0];
        let with_kl = example_gradient(&model, Objective::Edit, ex, &mut example_rng(2, 1, 0)).unwrap();
        assert!(with_kl.loss >= model.kl_total());
        assert!((with_kl.loss - with_kl.nll - model.kl_total()).abs() < 1e-12);

        // same noise, loss = NLL only
        let mut g = Graph::new();
        let b = model.editor.bind(&mut g).unwrap();
        let n = elbo_loss(&mut g, &model, &b, &ex.target, &ex.prototype, &mut example_rng(2, 1, 0)).unwrap();
        let grads = g.backward(n.nll).unwrap();
        let nll_only: BTreeMap<ParamId, &Tensor> = grads.params().collect();
        assert_eq!(nll_only.len(), with_kl.grads.len());
        for (p, t) in &with_kl.grads {
            assert_eq!(nll_only[p].data(), t.data());
        }
    }

    #[test]
    fn initial_nlm_loss_near_log_v() {
        let v = 20;
        let cfg = tiny_cfg(v);
        let model = NeuralEditor::new(&cfg).unwrap();
        let lp = model.editor.nlm_logprobs(&[4, 5, 6, 7]).unwrap();
        let per_token = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((per_token - (v as f64).ln()).abs() < 0.5, "{per_token}");
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0]), Tensor::row(vec![12.0])];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 13.0);
        let after: f64 = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
        let mut small = vec![Tensor::row(vec![0.3])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].data(), &[0.3]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::row(vec![1.0, -1.0]));
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &p);
        opt.apply(&mut p, &[Tensor::row(vec![2.0, -0.5])]);
        let w = p.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        let mut sgd = OptimizerState::new(OptimizerKind::Sgd, 0.1, &p);
        sgd.apply(&mut p, &[Tensor::row(vec![1.0, 0.0])]);
        assert!((p.get(id).data()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn seeded_runs_identical_and_order_invariant() {
        let cfg = tiny_cfg(12);
        let pairs = toy_pairs();
        let (_, a) = train(&pairs, &cfg).unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        let (tb, b) = train(&rev, &cfg).unwrap();
        assert_eq!(a, b);
        let (tc, _) = train(&pairs, &cfg).unwrap();
        assert_eq!(tb.checkpoint().to_bytes(), tc.checkpoint().to_bytes());
    }

    #[test]
    fn single_pair_memorized() {
        let mut cfg = tiny_cfg(12);
        cfg.hidden = 16;
        cfg.epochs = 150;
        cfg.batch_size = 1;
        let pair = TrainPair {
            prototype: vec![4, 5, 6, 7],
            target: vec![4, 9, 6, 7, 10],
        };
        let (t, metrics) = train(std::slice::from_ref(&pair), &cfg).unwrap();
        assert!(metrics.last().unwrap().token_nll() < 0.05, "{:?}", metrics.last());
        let z = t.model.posterior_mode(&pair.target, &pair.prototype).unwrap();
        let out = t.model.editor.greedy(&pair.prototype, &z).unwrap();
        assert_eq!(out.tokens, pair.target);
    }

    #[test]
    fn nlm_overfits_single_sentence() {
        let mut cfg = tiny_cfg(12);
        cfg.hidden = 16;
        cfg.epochs = 400;
        let sent = vec![4u32, 4, 4, 4, 4];
        let (t, _) = train_nlm(std::slice::from_ref(&sent), &cfg).unwrap();
        let lp = t.model.editor.nlm_logprobs(&sent).unwrap();
        let ppl = (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
        assert!(ppl < 1.1, "{ppl}");
        assert!(lp[..5].iter().all(|l| l.exp() > 0.9), "{lp:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let mut cfg = tiny_cfg(12);
        cfg.epochs = 2;
        let pairs = toy_pairs();
        let (t, _) = train(&pairs, &cfg).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let loaded = Checkpoint::read(&bytes[..]).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded, t.checkpoint());

        // two epochs, save, one more == three straight
        let mut resumed = Trainer::from_checkpoint(loaded).unwrap();
        resumed.cfg.epochs = 3;
        resumed.fit(&pairs).unwrap();
        cfg.epochs = 3;
        let (straight, _) = train(&pairs, &cfg).unwrap();
        assert_eq!(resumed.model.params(), straight.model.params());

        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::read(&bad[..]), Err(Error::Format(_))));
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::read(&b"NOTACKPT"[..]).is_err());
    }

    #[test]
    fn config_echo_round_trip() {
        let mut cfg = tiny_cfg(30);
        cfg.pair_file = Some("pairs.tsv".into());
        cfg.optimizer = OptimizerKind::Sgd;
        assert_eq!(TrainConfig::from_echo(&cfg.echo()).unwrap(), cfg);
        assert!(TrainConfig::from_echo(&format!("{}extra=1\n", cfg.echo())).is_err());
    }

    #[test]
    fn metrics_csv_format() {
        let m = vec![EpochMetrics {
            epoch: 1,
            mean_loss: 2.5,
            nll: 10.0,
            tokens: 4,
            tokens_per_sec: None,
        }];
        let mut out = Vec::new();
        write_metrics_csv(&m, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,mean_loss,tokens_per_sec\n1,2.5,\n");
    }
}
