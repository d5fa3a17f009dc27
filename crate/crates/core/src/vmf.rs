//! von Mises–Fisher kernel: log-domain modified Bessel functions, Wood's
//! rejection sampler, mean resultant length and KL divergence to the uniform
//! distribution on the sphere.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Proposals allowed per radial draw before giving up.
pub const MAX_REJECTIONS: usize = 1000;

/// `log I_order(x)` for the modified Bessel function of the first kind.
///
/// Uses the large-argument Hankel expansion when it converges to machine
/// precision (x ≥ 30 and order small relative to x), otherwise the ascending
/// power series summed with running rescaling. Both paths stay in the log
/// domain, so large arguments do not overflow.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    if !(order >= 0.0) || !(x >= 0.0) || !order.is_finite() || !x.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "log_bessel_i requires finite order ≥ 0 and x ≥ 0, got ({order}, {x})"
        )));
    }
    if x == 0.0 {
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if x >= 30.0 {
        if let Some(v) = log_bessel_i_hankel(order, x) {
            return Ok(v);
        }
    }
    Ok(log_bessel_i_series(order, x))
}

fn log_bessel_i_series(order: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let log_lead = order * (0.5 * x).ln() - ln_gamma(order + 1.0);
    // terms relative to the leading one; rescale when they get large
    let mut log_scale = 0.0;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut k = 0.0_f64;
    loop {
        k += 1.0;
        let ratio = q / (k * (k + order));
        term *= ratio;
        sum += term;
        if sum > 1e280 {
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
        if ratio < 1.0 && term < sum * 1e-17 {
            break;
        }
        if k > 1e7 {
            break;
        }
    }
    log_lead + log_scale + sum.ln()
}

fn log_bessel_i_hankel(order: f64, x: f64) -> Option<f64> {
    let mu = 4.0 * order * order;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut prev = f64::INFINITY;
    let done = |sum: f64| Some(x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln());
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        term *= -(mu - odd * odd) / (8.0 * kf * x);
        // half-integer orders terminate exactly
        if term == 0.0 {
            return done(sum);
        }
        let mag = term.abs();
        if mag > prev {
            return None;
        }
        prev = mag;
        sum += term;
        if mag < 1e-17 * sum.abs() {
            return done(sum);
        }
    }
    None
}

/// Mean direction and concentration of a vMF distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mean_dir: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mean_dir: Vec<f64>, kappa: f64) -> Result<Self> {
        if mean_dir.len() < 2 {
            return Err(Error::InvalidArgument("vMF dimension must be at least 2".into()));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("kappa must be finite and ≥ 0, got {kappa}")));
        }
        let norm = mean_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mean direction has norm {norm}")));
        }
        Ok(Self { mean_dir, kappa })
    }

    pub fn mean_dir(&self) -> &[f64] {
        &self.mean_dir
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mean_dir.len()
    }
}

/// Draws the cosine `w = z·μ` of a vMF(κ) sample on the (d−1)-sphere using
/// Wood's Beta-envelope rejection scheme.
pub fn sample_radial<R: Rng + ?Sized>(kappa: f64, d: usize, rng: &mut R) -> Result<f64> {
    let m1 = (d - 1) as f64;
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    // ln(1 - x0²) written to stay accurate when b is tiny
    let c = kappa * x0 + m1 * (4.0 * b / ((1.0 + b) * (1.0 + b))).ln();
    let beta = Beta::new(0.5 * m1, 0.5 * m1)
        .map_err(|e| Error::InvalidArgument(format!("beta envelope: {e}")))?;
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.gen();
        if kappa * w + m1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return Ok(w);
        }
    }
    Err(Error::RejectionLimit(MAX_REJECTIONS))
}

/// Projects `g` onto the hyperplane orthogonal to the unit vector `mu` and
/// normalizes; `None` if the projection vanishes.
pub fn orthogonal_unit(mu: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let dot: f64 = mu.iter().zip(g).map(|(a, b)| a * b).sum();
    let v: Vec<f64> = g.iter().zip(mu).map(|(gi, mi)| gi - dot * mi).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.into_iter().map(|x| x / n).collect())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Exact sample from vMF(μ, κ): `z = w·μ + √(1−w²)·v` with `w` from the
/// radial sampler and `v` uniform on the subsphere orthogonal to μ.
pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, rng: &mut R) -> Result<Vec<f64>> {
    let d = params.dim();
    let w = sample_radial(params.kappa, d, rng)?;
    let v = loop {
        let g = standard_normal_vec(d, rng);
        if let Some(v) = orthogonal_unit(&params.mean_dir, &g) {
            break v;
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    Ok(params
        .mean_dir
        .iter()
        .zip(&v)
        .map(|(m, vi)| w * m + s * vi)
        .collect())
}

/// Uniform draw on the unit (d−1)-sphere.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g = standard_normal_vec(d, rng);
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`, the expected cosine to the mean.
pub fn mean_resultant_length(kappa: f64, d: usize) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    let nu = 0.5 * d as f64;
    let hi = log_bessel_i(nu, kappa).expect("valid bessel arguments");
    let lo = log_bessel_i(nu - 1.0, kappa).expect("valid bessel arguments");
    (hi - lo).exp()
}

/// KL(vMF(μ, κ) ‖ uniform) on the (d−1)-sphere:
/// `κ·A_d(κ) + (d/2−1)·log(κ/2) − log I_{d/2−1}(κ) − log Γ(d/2)`.
pub fn vmf_kl_to_uniform(kappa: f64, d: usize) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    let nu = 0.5 * d as f64 - 1.0;
    let log_i = log_bessel_i(nu, kappa).expect("valid bessel arguments");
    let kl = kappa * mean_resultant_length(kappa, d) + nu * (0.5 * kappa).ln()
        - log_i
        - ln_gamma(0.5 * d as f64);
    kl.max(0.0)
}

/// The alternative closed form with `I_{d/2} − d/(2κ)` in the ratio's
/// denominator. Kept only so reports can show how far it is from
/// [`vmf_kl_to_uniform`]; it is not a valid KL.
pub fn kl_ratio_denominator_variant(kappa: f64, d: usize) -> f64 {
    if kappa <= 0.0 {
        return f64::NAN;
    }
    let h = 0.5 * d as f64;
    let i_h = log_bessel_i(h, kappa).expect("valid bessel arguments");
    let i_h1 = log_bessel_i(h + 1.0, kappa).expect("valid bessel arguments");
    let (ih, ih1) = (i_h.exp(), i_h1.exp());
    let ratio = (ih1 + ih * d as f64 / (2.0 * kappa)) / (ih - d as f64 / (2.0 * kappa));
    kappa * ratio + h * (0.5 * kappa).ln() - (i_h + ln_gamma(h + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn bessel_zero_and_errors() {
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(log_bessel_i(1.0, 0.0).unwrap(), f64::NEG_INFINITY);
        assert!(log_bessel_i(-1.0, 1.0).is_err());
        assert!(log_bessel_i(1.0, -1.0).is_err());
        assert!(log_bessel_i(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn half_order_closed_form() {
        // I_{1/2}(x) = sqrt(2/(πx)) sinh x ; I_{3/2}(x) = sqrt(2/(πx)) (cosh x − sinh x / x)
        for &x in &[0.1, 1.0, 2.0, 10.0, 29.0, 31.0, 50.0, 300.0, 700.0] {
            let pref = 0.5 * (2.0 / (PI * x)).ln();
            // log sinh x = x + log((1 − e^{−2x})/2)
            let log_sinh = x + (-(-2.0 * x).exp()).ln_1p() - 2f64.ln();
            let want = pref + log_sinh;
            let got = log_bessel_i(0.5, x).unwrap();
            let tol = if x <= 50.0 { 1e-9 } else { 1e-6 };
            assert!(rel(got, want) < tol, "x={x}: {got} vs {want}");

            let log_cosh = x + (-2.0 * x).exp().ln_1p() - 2f64.ln();
            let v = (log_cosh.exp() - log_sinh.exp() / x).ln();
            if v.is_finite() {
                let got = log_bessel_i(1.5, x).unwrap();
                assert!(rel(got, pref + v) < 1e-9, "x={x}");
            }
        }
    }

    #[test]
    fn large_argument_leading_asymptotic() {
        let v = log_bessel_i(0.0, 700.0).unwrap();
        assert!(v.is_finite());
        let lead = 700.0 - 0.5 * (2.0 * PI * 700.0).ln();
        assert!((v - lead).abs() < 1e-3);
    }

    #[test]
    fn series_and_hankel_agree_at_switch() {
        for &nu in &[0.0, 0.5, 1.0, 2.5, 4.0] {
            for &x in &[30.0, 40.0, 80.0] {
                let s = log_bessel_i_series(nu, x);
                let h = log_bessel_i_hankel(nu, x).unwrap();
                assert!(rel(s, h) < 1e-12, "nu={nu} x={x}: {s} vs {h}");
            }
        }
        // order large relative to x: asymptotic refuses, series takes over
        assert!(log_bessel_i_hankel(40.0, 30.0).is_none());
    }

    #[test]
    fn recurrence_holds() {
        // I_{ν−1} − I_{ν+1} = (2ν/x) I_ν, checked as a ratio to I_ν
        for &nu in &[1.0, 1.5, 2.5, 5.0, 24.0, 63.0] {
            for &x in &[0.3, 2.0, 17.0, 45.0, 120.0, 900.0] {
                let l0 = log_bessel_i(nu, x).unwrap();
                let lm = log_bessel_i(nu - 1.0, x).unwrap();
                let lp = log_bessel_i(nu + 1.0, x).unwrap();
                let lhs = (lm - l0).exp() - (lp - l0).exp();
                assert!(rel(lhs, 2.0 * nu / x) < 1e-8, "nu={nu} x={x}");
            }
        }
    }

    #[test]
    fn mean_resultant_examples() {
        assert_eq!(mean_resultant_length(0.0, 3), 0.0);
        let want = 1.0 / 2f64.tanh() - 0.5;
        assert!((mean_resultant_length(2.0, 3) - want).abs() < 1e-12);
        assert!((want - 0.53731).abs() < 1e-5);
        assert!(mean_resultant_length(5.0, 10) > mean_resultant_length(1.0, 10));
        let mut prev = 0.0;
        for k in 1..200 {
            let a = mean_resultant_length(k as f64 * 0.5, 64);
            assert!(a > prev && a < 1.0);
            prev = a;
        }
    }

    #[test]
    fn kl_basic_shape() {
        assert_eq!(vmf_kl_to_uniform(0.0, 10), 0.0);
        let mut prev = 0.0;
        for k in 1..60 {
            let v = vmf_kl_to_uniform(k as f64, 10);
            assert!(v > prev);
            prev = v;
        }
        assert!(vmf_kl_to_uniform(25.0, 10) > vmf_kl_to_uniform(1.0, 10));
    }

    #[test]
    fn kl_d3_closed_form() {
        // on S², C(κ) = κ/(4π sinh κ): KL = κ(coth κ − 1/κ) + log(κ / sinh κ)
        for &k in &[0.5f64, 2.0, 5.0, 25.0] {
            let want: f64 = k * (1.0 / k.tanh() - 1.0 / k) + (k / k.sinh()).ln();
            assert!(rel(vmf_kl_to_uniform(k, 3), want) < 1e-10);
        }
    }

    #[test]
    fn sampler_unit_norm_and_concentration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = vec![0.6, 0.0, 0.8];
        let p = VmfParams::new(mu.clone(), 1e6).unwrap();
        for _ in 0..200 {
            let z = sample_vmf(&p, &mut rng).unwrap();
            let n: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            let c: f64 = z.iter().zip(&mu).map(|(a, b)| a * b).sum();
            assert!(c > 0.999);
        }
    }

    #[test]
    fn uniform_when_kappa_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = VmfParams::new(vec![1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let n = 100_000;
        let mut mean = [0.0; 4];
        for _ in 0..n {
            let z = sample_vmf(&p, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&z) {
                *m += v / n as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 4.0 / (n as f64).sqrt(), "{mean:?}");
        }
    }

    #[test]
    fn invalid_params() {
        assert!(VmfParams::new(vec![1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn orthogonal_unit_is_orthogonal() {
        let mu = [0.0, 1.0, 0.0];
        let v = orthogonal_unit(&mu, &[0.3, 5.0, -0.4]).unwrap();
        assert!(v[1].abs() < 1e-15);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(orthogonal_unit(&mu, &[0.0, 2.0, 0.0]).is_none());
    }
}
