//! Edit vectors: the prior p(z), the approximate posterior q(z | x, x′) and
//! the deterministic edit representation f(x, x′) built from sums of
//! inserted and deleted word vectors.
//!
//! q perturbs the direction of f with vMF noise of fixed concentration κ and
//! its (truncated) norm with uniform noise of width ε. Because κ and ε are
//! fixed, KL(q ‖ p) is the same constant for every pair.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vmf;

/// Upper end of the prior's norm distribution, Unif(0, 10).
pub const NORM_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditNoiseConfig {
    pub kappa: f64,
    pub epsilon: f64,
    pub norm_max: f64,
}

impl EditNoiseConfig {
    pub fn new(kappa: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            kappa,
            epsilon,
            norm_max: NORM_MAX,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("kappa must be ≥ 0, got {}", self.kappa)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= self.norm_max) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, {}], got {}",
                self.norm_max, self.epsilon
            )));
        }
        Ok(())
    }

    /// Largest norm the posterior window may start at, so that
    /// `[f̃, f̃ + ε]` stays inside the prior's `[0, norm_max]`.
    pub fn norm_cap(&self) -> f64 {
        self.norm_max - self.epsilon
    }
}

/// Multiset difference between a target and its prototype.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditDiff {
    /// Tokens in the target but not the prototype (sorted, with multiplicity).
    pub inserted: Vec<u32>,
    /// Tokens in the prototype but not the target.
    pub deleted: Vec<u32>,
}

impl EditDiff {
    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty() && self.deleted.is_empty()
    }
}

/// Token multiset difference of `x` (target) against `x_prime` (prototype),
/// cancelling occurrences pairwise.
pub fn word_diff(x: &[u32], x_prime: &[u32]) -> EditDiff {
    let mut balance: BTreeMap<u32, i64> = BTreeMap::new();
    for &t in x {
        *balance.entry(t).or_default() += 1;
    }
    for &t in x_prime {
        *balance.entry(t).or_default() -= 1;
    }
    let mut diff = EditDiff::default();
    for (t, n) in balance {
        let target = if n > 0 { &mut diff.inserted } else { &mut diff.deleted };
        target.extend(std::iter::repeat(t).take(n.unsigned_abs() as usize));
    }
    diff
}

/// The word-vector table Φ used by q. Stored in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditEmbeddings {
    pub id: ParamId,
    pub dim: usize,
}

impl EditEmbeddings {
    pub const PARAM_NAME: &'static str = "edit.phi";

    /// Registers a `vocab × dim` table initialized uniformly in ±`scale`.
    pub fn register<R: Rng + ?Sized>(
        params: &mut Params,
        vocab: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("edit word dimension must be positive".into()));
        }
        let data = (0..vocab * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        let id = params.add(Self::PARAM_NAME, Tensor::from_vec(vocab, dim, data)?);
        Ok(Self { id, dim })
    }

    pub fn lookup(params: &Params) -> Option<Self> {
        let id = params.id(Self::PARAM_NAME)?;
        Some(Self {
            id,
            dim: params.get(id).cols(),
        })
    }

    /// Dimension of the edit vector, `2·d_w`.
    pub fn edit_dim(&self) -> usize {
        2 * self.dim
    }
}

/// f(x, x′) and its derived quantities as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EditRepr {
    /// `Σ_I Φ ⊕ Σ_D Φ`, shape `1 × 2d_w`.
    pub f: NodeId,
    pub norm: NodeId,
    /// `f / ‖f‖`; `None` when f vanishes.
    pub dir: Option<NodeId>,
    /// `min(‖f‖, norm_max − ε)`.
    pub truncated_norm: NodeId,
}

impl EditRepr {
    pub fn is_degenerate(&self) -> bool {
        self.dir.is_none()
    }
}

fn summed_rows(g: &mut Graph, table: NodeId, ids: &[u32], dim: usize) -> Result<NodeId> {
    if ids.is_empty() {
        return Ok(g.constant(Tensor::zeros(1, dim)));
    }
    let rows = g.embedding(table, ids)?;
    let mean = g.mean_rows(rows);
    Ok(g.scale(mean, ids.len() as f64))
}

pub fn edit_representation(
    g: &mut Graph,
    params: &Params,
    emb: &EditEmbeddings,
    diff: &EditDiff,
    cfg: &EditNoiseConfig,
) -> Result<EditRepr> {
    let table = g.param(params, emb.id);
    let ins = summed_rows(g, table, &diff.inserted, emb.dim)?;
    let del = summed_rows(g, table, &diff.deleted, emb.dim)?;
    let f = g.concat(&[ins, del], 1)?;
    let norm = g.norm(f);
    let dir = if g.value(norm).item() > 0.0 {
        Some(g.div_scalar(f, norm)?)
    } else {
        None
    };
    let truncated_norm = g.clamp_max(norm, cfg.norm_cap());
    Ok(EditRepr {
        f,
        norm,
        dir,
        truncated_norm,
    })
}

/// A concrete edit vector `z = norm · dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditVector {
    pub z: Vec<f64>,
    pub norm: f64,
    pub dir: Vec<f64>,
}

impl EditVector {
    pub fn from_parts(norm: f64, dir: Vec<f64>) -> Self {
        let z = dir.iter().map(|d| d * norm).collect();
        Self { z, norm, dir }
    }

    pub fn zeros(d: usize) -> Self {
        let mut dir = vec![0.0; d];
        dir[0] = 1.0;
        Self {
            z: vec![0.0; d],
            norm: 0.0,
            dir,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// z ~ p(z): norm ~ Unif(0, norm_max), direction uniform on the sphere.
pub fn sample_prior<R: Rng + ?Sized>(d_w: usize, rng: &mut R) -> EditVector {
    let norm = rng.gen_range(0.0..NORM_MAX);
    let dir = vmf::sample_uniform_sphere(2 * d_w, rng);
    EditVector::from_parts(norm, dir)
}

/// Parameter-free randomness behind one posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorNoise {
    /// Cosine between z_dir and f_dir, from the vMF radial sampler.
    pub w: f64,
    /// Gaussian vector whose projection orthogonal to f_dir gives the
    /// tangent direction.
    pub gauss: Vec<f64>,
    /// Uniform position inside the norm window.
    pub u: f64,
}

impl PosteriorNoise {
    pub fn draw<R: Rng + ?Sized>(kappa: f64, d: usize, rng: &mut R) -> Result<Self> {
        let w = vmf::sample_radial(kappa, d, rng)?;
        let gauss = vmf::standard_normal_vec(d, rng);
        let u = rng.gen();
        Ok(Self { w, gauss, u })
    }
}

/// One reparameterized draw from q(z | x, x′) as a graph node.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorSample {
    pub z: NodeId,
    pub repr: EditRepr,
}

/// Builds `z = (f̃ + ε·u) · (w·f_dir + √(1−w²)·v)` with
/// `v = normalize(g − (g·f_dir)·f_dir)`. Gradients flow into Φ through
/// `f_dir` and `f̃`. A vanishing f (identity edit) falls back to a uniform
/// direction and the window `[0, ε]`.
pub fn posterior_from_noise(
    g: &mut Graph,
    repr: EditRepr,
    noise: &PosteriorNoise,
    cfg: &EditNoiseConfig,
) -> Result<NodeId> {
    let d = g.value(repr.f).cols();
    if noise.gauss.len() != d {
        return Err(Error::InvalidArgument(format!(
            "posterior noise has dimension {}, edit vector {d}",
            noise.gauss.len()
        )));
    }
    let Some(dir) = repr.dir else {
        let n = noise.gauss.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let scale = cfg.epsilon * noise.u / n;
        let z = noise.gauss.iter().map(|x| x * scale).collect();
        return Ok(g.constant(Tensor::row(z)));
    };
    let gauss = g.constant(Tensor::row(noise.gauss.clone()));
    let along = g.mul(gauss, dir)?;
    let along = g.sum(along);
    let proj = g.mul_scalar(dir, along)?;
    let tangent = g.sub(gauss, proj)?;
    let tnorm = g.norm(tangent);
    let v = g.div_scalar(tangent, tnorm)?;
    let radial = g.scale(dir, noise.w);
    let side = g.scale(v, (1.0 - noise.w * noise.w).max(0.0).sqrt());
    let z_dir = g.add(radial, side)?;
    let z_norm = g.add_const(repr.truncated_norm, cfg.epsilon * noise.u);
    g.mul_scalar(z_dir, z_norm)
}

/// Draws z ~ q(z | x, x′) on the graph.
#[allow(clippy::too_many_arguments)]
pub fn sample_posterior<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &Params,
    emb: &EditEmbeddings,
    x: &[u32],
    x_prime: &[u32],
    cfg: &EditNoiseConfig,
    rng: &mut R,
) -> Result<PosteriorSample> {
    let diff = word_diff(x, x_prime);
    let repr = edit_representation(g, params, emb, &diff, cfg)?;
    let kappa = if repr.is_degenerate() { 0.0 } else { cfg.kappa };
    let noise = PosteriorNoise::draw(kappa, emb.edit_dim(), rng)?;
    let z = posterior_from_noise(g, repr, &noise, cfg)?;
    Ok(PosteriorSample { z, repr })
}

/// The deterministic edit `f̃_norm · f_dir` (zero for identity edits).
pub fn posterior_mode(
    params: &Params,
    emb: &EditEmbeddings,
    x: &[u32],
    x_prime: &[u32],
    cfg: &EditNoiseConfig,
) -> Result<EditVector> {
    let mut g = Graph::new();
    let repr = edit_representation(&mut g, params, emb, &word_diff(x, x_prime), cfg)?;
    Ok(match repr.dir {
        None => EditVector::zeros(emb.edit_dim()),
        Some(dir) => EditVector::from_parts(
            g.value(repr.truncated_norm).item(),
            g.value(dir).data().to_vec(),
        ),
    })
}

/// KL(q ‖ p): vMF-to-uniform on the `d`-dimensional direction plus
/// `log(norm_max / ε)` for the norm. Independent of the pair.
pub fn kl_total(cfg: &EditNoiseConfig, d: usize) -> f64 {
    vmf::vmf_kl_to_uniform(cfg.kappa, d) + (cfg.norm_max / cfg.epsilon).ln()
}
