//! The neural editor p_edit(x | x′, z).
//!
//! A stacked biLSTM encodes the prototype. A stacked LSTM decoder consumes
//! `[previous-token embedding ⊕ z]` at every step; its top-layer state attends
//! bilinearly over the encoder's top-layer states, and `[state ⊕ context]`
//! feeds the output softmax. The decoder's initial hidden states are an affine
//! map of the mean encoder state.
//!
//! Language-model mode runs the same decoder with a zero edit vector, zero
//! attention context and zero initial state.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, Params};
use crate::corpus::{BOS, EOS, PAD};
use crate::editvec::EditVector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
    /// Maximum number of decoding steps (tokens emitted, EOS included).
    pub max_len: usize,
    /// Edit-vector dimension, `2·d_w` of the edit embeddings.
    pub edit_dim: usize,
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("word_dim", self.word_dim),
            ("vocab_size", self.vocab_size),
            ("edit_dim", self.edit_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("editor {name} must be positive")));
            }
        }
        if self.max_len < 2 {
            return Err(Error::InvalidArgument("editor max_len must be at least 2".into()));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::InvalidArgument("editor vocabulary must include EOS".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EditorIds {
    emb: ParamId,
    enc: Vec<[LstmIds; 2]>,
    init: Vec<(ParamId, ParamId)>,
    dec: Vec<LstmIds>,
    att: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Editor parameters plus the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct EditorModel {
    cfg: EditorConfig,
    pub params: Params,
    ids: EditorIds,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

fn lstm_params<R: Rng + ?Sized>(params: &mut Params, prefix: &str, input: usize, h: usize, rng: &mut R) -> LstmIds {
    let scale = 1.0 / ((input + h) as f64).sqrt();
    let wx = params.add(format!("{prefix}.wx"), uniform(rng, input, 4 * h, scale));
    let wh = params.add(format!("{prefix}.wh"), uniform(rng, h, 4 * h, scale));
    let mut bias = Tensor::zeros(1, 4 * h);
    // forget gate starts open
    bias.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
    let b = params.add(format!("{prefix}.b"), bias);
    LstmIds { wx, wh, b }
}

fn lookup_lstm(params: &Params, prefix: &str) -> Result<LstmIds> {
    let get = |s: &str| {
        params
            .id(&format!("{prefix}.{s}"))
            .ok_or_else(|| Error::Format(format!("missing parameter {prefix}.{s}")))
    };
    Ok(LstmIds {
        wx: get("wx")?,
        wh: get("wh")?,
        b: get("b")?,
    })
}

impl EditorModel {
    pub fn new<R: Rng + ?Sized>(cfg: EditorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, dw, v) = (cfg.hidden, cfg.word_dim, cfg.vocab_size);
        let mut params = Params::new();
        let emb = params.add("emb.in", uniform(rng, v, dw, 0.1));
        let mut enc = Vec::new();
        for l in 0..cfg.layers {
            let input = if l == 0 { dw } else { 2 * h };
            enc.push([
                lstm_params(&mut params, &format!("enc.l{l}.fwd"), input, h, rng),
                lstm_params(&mut params, &format!("enc.l{l}.bwd"), input, h, rng),
            ]);
        }
        let mut init = Vec::new();
        let mut dec = Vec::new();
        let s2 = 1.0 / ((2 * h) as f64).sqrt();
        for l in 0..cfg.layers {
            init.push((
                params.add(format!("dec.init.l{l}.w"), uniform(rng, 2 * h, h, s2)),
                params.add(format!("dec.init.l{l}.b"), Tensor::zeros(1, h)),
            ));
            let input = if l == 0 { dw + cfg.edit_dim } else { h };
            dec.push(lstm_params(&mut params, &format!("dec.l{l}"), input, h, rng));
        }
        let att = params.add("att.w", uniform(rng, h, 2 * h, 1.0 / (h as f64).sqrt()));
        let out_w = params.add("out.w", uniform(rng, 3 * h, v, 1.0 / ((3 * h) as f64).sqrt()));
        let out_b = params.add("out.b", Tensor::zeros(1, v));
        Ok(Self {
            cfg,
            params,
            ids: EditorIds {
                emb,
                enc,
                init,
                dec,
                att,
                out_w,
                out_b,
            },
        })
    }

    /// Rebuilds a model around loaded parameters, checking every shape.
    pub fn from_params(cfg: EditorConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Self::new(cfg, &mut rng)?;
        for (_, name, t) in template.params.iter() {
            let got = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if params.get(got).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(got).shape(),
                    t.shape()
                )));
            }
        }
        let get = |n: &str| params.id(n).expect("checked above");
        let mut enc = Vec::new();
        let mut init = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.layers {
            enc.push([
                lookup_lstm(&params, &format!("enc.l{l}.fwd"))?,
                lookup_lstm(&params, &format!("enc.l{l}.bwd"))?,
            ]);
            init.push((get(&format!("dec.init.l{l}.w")), get(&format!("dec.init.l{l}.b"))));
            dec.push(lookup_lstm(&params, &format!("dec.l{l}"))?);
        }
        let ids = EditorIds {
            emb: get("emb.in"),
            enc,
            init,
            dec,
            att: get("att.w"),
            out_w: get("out.w"),
            out_b: get("out.b"),
        };
        Ok(Self { cfg, params, ids })
    }

    pub fn config(&self) -> &EditorConfig {
        &self.cfg
    }

    /// Number of scalar editor parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Output-layer parameters, exposed for tests and diagnostics.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.ids.out_w, self.ids.out_b)
    }

    /// Registers every editor parameter on `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let p = &self.params;
        let bind_lstm = |g: &mut Graph, ids: &LstmIds| LstmNodes {
            wx: g.param(p, ids.wx),
            wh: g.param(p, ids.wh),
            b: g.param(p, ids.b),
        };
        let emb = g.param(p, self.ids.emb);
        let enc = self
            .ids
            .enc
            .iter()
            .map(|[f, b]| [bind_lstm(g, f), bind_lstm(g, b)])
            .collect();
        let init = self
            .ids
            .init
            .iter()
            .map(|(w, b)| (g.param(p, *w), g.param(p, *b)))
            .collect();
        let dec: Vec<LstmNodes> = self.ids.dec.iter().map(|d| bind_lstm(g, d)).collect();
        let dw = self.cfg.word_dim;
        let dec0_emb = g.slice(dec[0].wx, 0, 0, dw)?;
        let dec0_z = g.slice(dec[0].wx, 0, dw, self.cfg.edit_dim)?;
        Ok(Bound {
            emb,
            enc,
            init,
            dec,
            dec0_emb,
            dec0_z,
            att: g.param(p, self.ids.att),
            out_w: g.param(p, self.ids.out_w),
            out_b: g.param(p, self.ids.out_b),
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_z(&self, z: &EditVector) -> Result<()> {
        if z.dim() != self.cfg.edit_dim {
            return Err(Error::InvalidArgument(format!(
                "edit vector has dimension {}, editor expects {}",
                z.dim(),
                self.cfg.edit_dim
            )));
        }
        Ok(())
    }

    /// Runs the prototype encoder. Returns `T × 2h` top-layer states and the
    /// per-layer decoder initial states.
    pub fn encode(&self, g: &mut Graph, b: &Bound, prototype: &[u32]) -> Result<Encoded> {
        if prototype.is_empty() {
            return Err(Error::Empty("prototype"));
        }
        self.check_tokens(prototype)?;
        let mut x = g.embedding(b.emb, prototype)?;
        for layer in &b.enc {
            let fwd = lstm_layer(g, &layer[0], x, false, None)?;
            let bwd = lstm_layer(g, &layer[1], x, true, None)?;
            x = g.concat(&[fwd, bwd], 1)?;
        }
        let mean = g.mean_rows(x);
        let mut init = Vec::with_capacity(b.init.len());
        for &(w, bias) in &b.init {
            let m = g.matmul(mean, w)?;
            init.push(g.add_row(m, bias)?);
        }
        Ok(Encoded { states: x, init })
    }

    /// Per-layer `z·W_z + b` added to every first-layer input projection.
    fn z_projection(&self, g: &mut Graph, b: &Bound, z: Option<NodeId>) -> Result<NodeId> {
        match z {
            Some(z) => {
                let zp = g.matmul(z, b.dec0_z)?;
                g.add_row(zp, b.dec[0].b)
            }
            None => Ok(b.dec[0].b),
        }
    }

    /// Teacher-forced negative log-likelihood of each of the `T + 1` target
    /// steps (tokens then EOS) as a `(T+1) × 1` node. `enc = None` and
    /// `z = None` select language-model mode.
    pub fn decode_nll(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc: Option<&Encoded>,
        z: Option<NodeId>,
        target: &[u32],
    ) -> Result<NodeId> {
        self.check_tokens(target)?;
        let h = self.cfg.hidden;
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let mut targets = target.to_vec();
        targets.push(EOS);
        let steps = inputs.len();

        let emb = g.embedding(b.emb, &inputs)?;
        let zrow = self.z_projection(g, b, z)?;
        let xp = g.matmul(emb, b.dec0_emb)?;
        let mut xproj = g.add_row(xp, zrow)?;
        let mut top = xproj;
        for (l, layer) in b.dec.iter().enumerate() {
            if l > 0 {
                let xp = g.matmul(top, layer.wx)?;
                xproj = g.add_row(xp, layer.b)?;
            }
            let h0 = enc.map(|e| e.init[l]);
            top = recurrent_pass(g, layer.wh, xproj, false, h0, h)?;
        }
        let ctx = match enc {
            Some(e) => attention(g, b, top, e.states)?,
            None => g.constant(Tensor::zeros(steps, 2 * h)),
        };
        let logits = output_logits(g, b, top, ctx)?;
        g.cross_entropy(logits, &targets)
    }

    fn z_node(&self, g: &mut Graph, z: &EditVector) -> Result<NodeId> {
        self.check_z(z)?;
        Ok(g.constant(Tensor::row(z.z.clone())))
    }

    /// Per-step log-probabilities `log p(x_t | x_<t, x′, z)` for the tokens
    /// of `x` followed by EOS.
    pub fn decode_logprobs(&self, x: &[u32], prototype: &[u32], z: &EditVector) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let enc = self.encode(&mut g, &b, prototype)?;
        let zn = self.z_node(&mut g, z)?;
        let nll = self.decode_nll(&mut g, &b, Some(&enc), Some(zn), x)?;
        Ok(g.value(nll).data().iter().map(|v| -v).collect())
    }

    /// Language-model per-step log-probabilities (no prototype, zero edit).
    pub fn nlm_logprobs(&self, x: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let nll = self.decode_nll(&mut g, &b, None, None, x)?;
        Ok(g.value(nll).data().iter().map(|v| -v).collect())
    }

    /// A reusable inference session with parameters bound once.
    pub fn session(&self) -> Result<Session<'_>> {
        Session::new(self)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        prototype: &[u32],
        z: &EditVector,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Hypothesis> {
        self.session()?.sample(Some(prototype), Some(z), temperature, rng)
    }

    pub fn greedy(&self, prototype: &[u32], z: &EditVector) -> Result<Hypothesis> {
        self.session()?.greedy(Some(prototype), Some(z))
    }

    pub fn beam_search(&self, prototype: &[u32], z: &EditVector, k: usize) -> Result<Vec<Hypothesis>> {
        self.session()?.beam_search(Some(prototype), Some(z), k)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
}

/// Parameter nodes of an editor bound to one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    emb: NodeId,
    enc: Vec<[LstmNodes; 2]>,
    init: Vec<(NodeId, NodeId)>,
    dec: Vec<LstmNodes>,
    dec0_emb: NodeId,
    dec0_z: NodeId,
    att: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

/// Encoder output on a graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `T × 2h` top-layer states.
    pub states: NodeId,
    /// Decoder initial hidden state per layer, each `1 × h`.
    pub init: Vec<NodeId>,
}

fn lstm_layer(g: &mut Graph, p: &LstmNodes, inputs: NodeId, reverse: bool, h0: Option<NodeId>) -> Result<NodeId> {
    let h = g.value(p.wh).rows();
    let xp = g.matmul(inputs, p.wx)?;
    let xproj = g.add_row(xp, p.b)?;
    recurrent_pass(g, p.wh, xproj, reverse, h0, h)
}

/// Runs the recurrence over precomputed input projections (`T × 4h`),
/// returning the `T × h` hidden states in input order.
fn recurrent_pass(
    g: &mut Graph,
    wh: NodeId,
    xproj: NodeId,
    reverse: bool,
    h0: Option<NodeId>,
    h: usize,
) -> Result<NodeId> {
    let t_len = g.value(xproj).rows();
    let mut hs = h0.unwrap_or_else(|| g.constant(Tensor::zeros(1, h)));
    let mut cs = g.constant(Tensor::zeros(1, h));
    let mut outs = vec![hs; t_len];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let x_t = g.slice(xproj, 0, t, 1)?;
        let rec = g.matmul(hs, wh)?;
        let pre = g.add(x_t, rec)?;
        let hc = g.lstm_cell(pre, cs)?;
        hs = g.slice(hc, 1, 0, h)?;
        cs = g.slice(hc, 1, h, h)?;
        outs[t] = hs;
    }
    g.concat(&outs, 0)
}

/// Bilinear attention: `softmax_i(s_tᵀ W a_i)`, context `Σ_i α_i a_i`.
fn attention(g: &mut Graph, b: &Bound, queries: NodeId, states: NodeId) -> Result<NodeId> {
    let proj = g.matmul(queries, b.att)?;
    let keys = g.transpose(states);
    let scores = g.matmul(proj, keys)?;
    let alpha = g.softmax(scores, 1)?;
    g.matmul(alpha, states)
}

fn output_logits(g: &mut Graph, b: &Bound, top: NodeId, ctx: NodeId) -> Result<NodeId> {
    let joined = g.concat(&[top, ctx], 1)?;
    let logits = g.matmul(joined, b.out_w)?;
    g.add_row(logits, b.out_b)
}

/// A decoded sequence (without BOS/EOS) and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// Whether EOS was produced before the length cap.
    pub finished: bool,
}

/// Tokens the decoder may emit during generation.
pub fn is_emittable(token: u32) -> bool {
    token != PAD && token != BOS
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::autodiff::log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// Log-probabilities restricted to emittable tokens and renormalized, at
/// temperature `tau` (`tau = 1` leaves logits unchanged).
pub fn emission_logprobs(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if is_emittable(i as u32) { l / tau } else { f64::NEG_INFINITY })
        .collect();
    log_softmax(&scaled)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct StepState {
    h: Vec<NodeId>,
    c: Vec<NodeId>,
}

/// Conditioning computed once per (prototype, z).
#[derive(Debug, Clone)]
pub struct Conditioned {
    enc: Option<Encoded>,
    zrow: NodeId,
}

/// Parameters bound once to a graph that is rewound between queries.
pub struct Session<'m> {
    model: &'m EditorModel,
    g: Graph,
    b: Bound,
    base: usize,
}

impl<'m> Session<'m> {
    fn new(model: &'m EditorModel) -> Result<Self> {
        let mut g = Graph::new();
        let b = model.bind(&mut g)?;
        let base = g.len();
        Ok(Self { model, g, b, base })
    }

    pub fn model(&self) -> &EditorModel {
        self.model
    }

    fn rewind(&mut self) {
        self.g.truncate(self.base);
    }

    /// Encodes the prototype and projects z. Both `None` selects LM mode.
    pub fn condition(&mut self, prototype: Option<&[u32]>, z: Option<&EditVector>) -> Result<Conditioned> {
        self.rewind();
        let enc = match prototype {
            Some(p) => Some(self.model.encode(&mut self.g, &self.b, p)?),
            None => None,
        };
        let zn = match z {
            Some(z) => Some(self.model.z_node(&mut self.g, z)?),
            None => None,
        };
        let zrow = self.model.z_projection(&mut self.g, &self.b, zn)?;
        Ok(Conditioned { enc, zrow })
    }

    /// Total teacher-forced log-probability of `x` (EOS included).
    pub fn logprob(&mut self, prototype: Option<&[u32]>, z: Option<&EditVector>, x: &[u32]) -> Result<f64> {
        self.rewind();
        let enc = match prototype {
            Some(p) => Some(self.model.encode(&mut self.g, &self.b, p)?),
            None => None,
        };
        let zn = match z {
            Some(z) => Some(self.model.z_node(&mut self.g, z)?),
            None => None,
        };
        let nll = self.model.decode_nll(&mut self.g, &self.b, enc.as_ref(), zn, x)?;
        Ok(-self.g.value(nll).data().iter().sum::<f64>())
    }

    fn initial_state(&mut self, cond: &Conditioned) -> StepState {
        let (layers, h) = (self.model.cfg.layers, self.model.cfg.hidden);
        let zero = self.g.constant(Tensor::zeros(1, h));
        let hs = match &cond.enc {
            Some(e) => e.init.clone(),
            None => vec![zero; layers],
        };
        StepState {
            h: hs,
            c: vec![zero; layers],
        }
    }

    /// Advances `n` decoder states (each a row of `state`) by one input
    /// token each; returns the new states and the `n × V` output logits.
    fn step(&mut self, cond: &Conditioned, state: &StepState, tokens: &[u32]) -> Result<(StepState, Tensor)> {
        let g = &mut self.g;
        let b = &self.b;
        let h = self.model.cfg.hidden;
        let e = g.embedding(b.emb, tokens)?;
        let xp = g.matmul(e, b.dec0_emb)?;
        let mut x = g.add_row(xp, cond.zrow)?;
        let mut next = StepState {
            h: Vec::with_capacity(state.h.len()),
            c: Vec::with_capacity(state.c.len()),
        };
        for (l, layer) in b.dec.iter().enumerate() {
            if l > 0 {
                let xp = g.matmul(next.h[l - 1], layer.wx)?;
                x = g.add_row(xp, layer.b)?;
            }
            let rec = g.matmul(state.h[l], layer.wh)?;
            let pre = g.add(x, rec)?;
            let hc = g.lstm_cell(pre, state.c[l])?;
            next.h.push(g.slice(hc, 1, 0, h)?);
            next.c.push(g.slice(hc, 1, h, h)?);
        }
        let top = *next.h.last().expect("at least one layer");
        let ctx = match &cond.enc {
            Some(enc) => attention(g, b, top, enc.states)?,
            None => g.constant(Tensor::zeros(tokens.len(), 2 * h)),
        };
        let logits = output_logits(g, b, top, ctx)?;
        Ok((next, g.value(logits).clone()))
    }

    /// Stacks the given rows of a batched state.
    fn gather(&mut self, state: &StepState, rows: &[usize]) -> Result<StepState> {
        let mut pick = |t: NodeId| -> Result<NodeId> {
            let parts = rows
                .iter()
                .map(|&r| self.g.slice(t, 0, r, 1))
                .collect::<Result<Vec<_>>>()?;
            self.g.concat(&parts, 0)
        };
        Ok(StepState {
            h: state.h.iter().map(|&t| pick(t)).collect::<Result<_>>()?,
            c: state.c.iter().map(|&t| pick(t)).collect::<Result<_>>()?,
        })
    }

    /// Emission distribution over the full vocabulary after consuming
    /// `prefix` (BOS implied), at temperature 1 and without masking.
    pub fn next_token_logprobs(&mut self, cond: &Conditioned, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut state = self.initial_state(cond);
        let mut logits = Tensor::zeros(0, 0);
        for &tok in std::iter::once(&BOS).chain(prefix) {
            let (s, l) = self.step(cond, &state, &[tok])?;
            state = s;
            logits = l;
        }
        Ok(log_softmax(logits.data()))
    }

    /// Autoregressive sampling at temperature `tau` (`0` = argmax).
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        prototype: Option<&[u32]>,
        z: Option<&EditVector>,
        tau: f64,
        rng: &mut R,
    ) -> Result<Hypothesis> {
        if !(tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be ≥ 0, got {tau}")));
        }
        let cond = self.condition(prototype, z)?;
        let mut state = self.initial_state(&cond);
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let mut prev = BOS;
        for _ in 0..self.model.cfg.max_len {
            let (s, logits) = self.step(&cond, &state, &[prev])?;
            state = s;
            let model_lp = emission_logprobs(logits.data(), 1.0);
            let tok = if tau == 0.0 {
                argmax(&model_lp)
            } else {
                let lp = emission_logprobs(logits.data(), tau);
                sample_index(&lp, rng)
            };
            logprob += model_lp[tok];
            if tok as u32 == EOS {
                return Ok(Hypothesis {
                    tokens,
                    logprob,
                    finished: true,
                });
            }
            tokens.push(tok as u32);
            prev = tok as u32;
        }
        Ok(Hypothesis {
            tokens,
            logprob,
            finished: false,
        })
    }

    pub fn greedy(&mut self, prototype: Option<&[u32]>, z: Option<&EditVector>) -> Result<Hypothesis> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        self.sample(prototype, z, 0.0, &mut unused)
    }

    /// Length-bounded beam search over summed log-probabilities. Hypotheses
    /// that emit EOS retire into the result pool; survivors at the length cap
    /// are retired unfinished. Returns at most `k` results, best first.
    pub fn beam_search(
        &mut self,
        prototype: Option<&[u32]>,
        z: Option<&EditVector>,
        k: usize,
    ) -> Result<Vec<Hypothesis>> {
        if k == 0 {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        let cond = self.condition(prototype, z)?;
        let mut state = self.initial_state(&cond);
        let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.model.cfg.max_len {
            let inputs: Vec<u32> = live.iter().map(|(t, _)| t.last().copied().unwrap_or(BOS)).collect();
            let (next, logits) = self.step(&cond, &state, &inputs)?;
            let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
            for (i, (_, score)) in live.iter().enumerate() {
                for (tok, lp) in emission_logprobs(logits.row_slice(i), 1.0).into_iter().enumerate() {
                    if lp.is_finite() {
                        expansions.push((i, tok as u32, score + lp));
                    }
                }
            }
            let order = |a: &(usize, u32, f64), b: &(usize, u32, f64)| {
                b.2.total_cmp(&a.2)
                    .then_with(|| live[a.0].0.cmp(&live[b.0].0))
                    .then_with(|| a.1.cmp(&b.1))
            };
            if expansions.len() > k {
                expansions.select_nth_unstable_by(k - 1, order);
                expansions.truncate(k);
            }
            expansions.sort_by(order);
            let mut next_live = Vec::new();
            let mut parents = Vec::new();
            for (i, tok, score) in expansions {
                let mut tokens = live[i].0.clone();
                if tok == EOS {
                    done.push(Hypothesis {
                        tokens,
                        logprob: score,
                        finished: true,
                    });
                } else {
                    tokens.push(tok);
                    next_live.push((tokens, score));
                    parents.push(i);
                }
            }
            live = next_live;
            if live.is_empty() {
                break;
            }
            state = self.gather(&next, &parents)?;
        }
        done.extend(live.into_iter().map(|(tokens, logprob)| Hypothesis {
            tokens,
            logprob,
            finished: false,
        }));
        done.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)));
        done.truncate(k);
        Ok(done)
    }
}

fn sample_index<R: Rng + ?Sized>(logprobs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        if lp.is_finite() {
            acc += lp.exp();
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
