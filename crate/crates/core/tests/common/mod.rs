//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use protoedit::corpus::{BOS, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoedit::editvec::{EditNoiseConfig, EditVector, NORM_MAX};
use protoedit::train::{NeuralEditor, TrainConfig, TrainPair};

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// With `w = cos θ`, the vMF cosine density on the (d−1)-sphere is
/// proportional to `exp(κ cos θ) sin^{d−2} θ` in θ, smooth on `[0, π]`.
/// Scaled by `exp(−κ)` to stay finite.
fn theta_weight(kappa: f64, d: usize, theta: f64) -> f64 {
    (kappa * (theta.cos() - 1.0)).exp() * theta.sin().powi(d as i32 - 2)
}

const QUAD_N: usize = 200_000;

/// `E[W]` by quadrature.
pub fn quad_mean_cosine(kappa: f64, d: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let num = simpson(|t| t.cos() * theta_weight(kappa, d, t), 0.0, pi, QUAD_N);
    let den = simpson(|t| theta_weight(kappa, d, t), 0.0, pi, QUAD_N);
    num / den
}

/// KL(vMF ‖ uniform) = κ·E_q[W] − log E_uniform[exp(κW)], both by quadrature.
pub fn quad_kl(kappa: f64, d: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let z_kappa = simpson(|t| theta_weight(kappa, d, t), 0.0, pi, QUAD_N);
    let z_zero = simpson(|t| theta_weight(0.0, d, t), 0.0, pi, QUAD_N);
    let log_mgf = kappa + (z_kappa / z_zero).ln();
    kappa * quad_mean_cosine(kappa, d) - log_mgf
}

/// CDF of W on a θ grid, returned as `(w ascending, P(W ≤ w))`.
pub fn radial_cdf_table(kappa: f64, d: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let pi = std::f64::consts::PI;
    let h = pi / n as f64;
    // cumulative trapezoid from θ = π (w = −1) down to θ = 0 (w = 1)
    let mut ws = Vec::with_capacity(n + 1);
    let mut cum = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    let mut prev = theta_weight(kappa, d, pi);
    ws.push(-1.0);
    cum.push(0.0);
    for i in (0..n).rev() {
        let t = i as f64 * h;
        let cur = theta_weight(kappa, d, t);
        acc += 0.5 * (prev + cur) * h;
        prev = cur;
        ws.push(t.cos());
        cum.push(acc);
    }
    let total = acc;
    cum.iter_mut().for_each(|c| *c /= total);
    (ws, cum)
}

pub fn interp_cdf(table: &(Vec<f64>, Vec<f64>), w: f64) -> f64 {
    let (ws, cs) = table;
    match ws.partition_point(|&x| x < w) {
        0 => 0.0,
        i if i >= ws.len() => 1.0,
        i => {
            let (x0, x1) = (ws[i - 1], ws[i]);
            let t = if x1 > x0 { (w - x0) / (x1 - x0) } else { 0.0 };
            cs[i - 1] + t * (cs[i] - cs[i - 1])
        }
    }
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at α = 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    (-(0.005f64).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Renormalizes a full next-token distribution over the tokens generation
/// may emit.
pub fn emission_from_full(full: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| i as u32 != PAD && i as u32 != BOS;
    let mass: f64 = full
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, l)| l.exp())
        .sum();
    full.iter()
        .enumerate()
        .map(|(i, l)| if allowed(i) { l - mass.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Every possible decoder outcome with at most `cap` steps over `alphabet`
/// (which contains EOS): finished strings end at EOS, strings that reach
/// the cap without it are unfinished. Returns `(tokens without EOS, finished)`.
pub fn enumerate_outcomes(alphabet: &[u32], cap: usize) -> Vec<(Vec<u32>, bool)> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..cap {
        let mut next = Vec::new();
        for prefix in &frontier {
            for &t in alphabet {
                if t == EOS {
                    out.push((prefix.clone(), true));
                } else {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push(p);
                }
            }
        }
        frontier = next;
    }
    out.extend(frontier.into_iter().map(|p| (p, false)));
    out
}

/// A small model for exact checks.
pub fn toy_config(vocab: usize, edit_word_dim: usize, layers: usize, hidden: usize) -> TrainConfig {
    TrainConfig {
        layers,
        hidden,
        word_dim: 4,
        edit_word_dim,
        max_len: 6,
        seed: 11,
        noise: EditNoiseConfig {
            kappa: 5.0,
            epsilon: 1.0,
            norm_max: protoedit::editvec::NORM_MAX,
        },
        ..TrainConfig::new(vocab)
    }
}

pub fn toy_model(vocab: usize, edit_word_dim: usize, layers: usize, hidden: usize) -> NeuralEditor {
    NeuralEditor::new(&toy_config(vocab, edit_word_dim, layers, hidden)).expect("valid toy config")
}

/// Sharpens the output layer so decoding is not near-uniform.
pub fn sharpen(model: &mut NeuralEditor, factor: f64) {
    let (w, _) = model.editor.output_layer();
    model.editor.params.get_mut(w).scale_assign(factor);
}

/// `log p(x | x′)` for a model with a 2-dim edit vector, integrating the
/// prior in polar coordinates: norm uniform on [0, NORM_MAX], angle uniform.
pub fn exact_log_marginal(model: &NeuralEditor, x: &[u32], proto: &[u32]) -> f64 {
    let n_theta = 96;
    let n_r = 120;
    let session_lp = |z: &EditVector| -> f64 { model.editor.decode_logprobs(x, proto, z).expect("decode").iter().sum() };
    let hr = NORM_MAX / n_r as f64;
    let mut acc = 0.0;
    for j in 0..n_theta {
        let theta = 2.0 * std::f64::consts::PI * j as f64 / n_theta as f64;
        let dir = vec![theta.cos(), theta.sin()];
        let mut inner = 0.0;
        for i in 0..=n_r {
            let r = i as f64 * hr;
            let w = if i == 0 || i == n_r {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            inner += w * session_lp(&EditVector::from_parts(r, dir.clone())).exp();
        }
        acc += inner * hr / 3.0;
    }
    (acc / n_theta as f64 / NORM_MAX).ln()
}

/// Random short prototypes, each with one or two word edits.
pub fn toy_edit_pairs(n: usize, seed: u64) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = 4..34u32;
    (0..n)
        .map(|_| {
            let proto: Vec<u32> = (0..rng.gen_range(4..=7)).map(|_| rng.gen_range(words.clone())).collect();
            let mut target = proto.clone();
            for _ in 0..rng.gen_range(1..=2) {
                let pos = rng.gen_range(0..target.len());
                match rng.gen_range(0..3) {
                    0 => target[pos] = rng.gen_range(words.clone()),
                    1 => target.insert(pos, rng.gen_range(words.clone())),
                    _ if target.len() > 2 => {
                        target.remove(pos);
                    }
                    _ => target.push(rng.gen_range(words.clone())),
                }
            }
            TrainPair {
                prototype: proto,
                target,
            }
        })
        .collect()
}

