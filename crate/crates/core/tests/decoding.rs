mod common;

use protoedit::corpus::EOS;
use protoedit::editvec::sample_prior;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn unit_temperature_sampling_matches_model_distribution() {
    // One decoding step from a fixed (prototype, z): the first token is
    // drawn straight from the model's next-token distribution.
    let mut model = common::toy_model(8, 2, 1, 6);
    common::sharpen(&mut model, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z = sample_prior(2, &mut rng);
    let proto = [4u32, 5, 6];
    let mut session = model.editor.session().unwrap();
    let cond = session.condition(Some(&proto), Some(&z)).unwrap();
    let expected: Vec<f64> = common::emission_from_full(&session.next_token_logprobs(&cond, &[]).unwrap())
        .iter()
        .map(|l| l.exp())
        .collect();

    let n = 10_000;
    let mut counts = vec![0usize; expected.len()];
    for _ in 0..n {
        let h = session.sample(Some(&proto), Some(&z), 1.0, &mut rng).unwrap();
        let tok = h.tokens.first().copied().unwrap_or(EOS);
        counts[tok as usize] += 1;
    }
    let cells: Vec<(usize, f64)> = counts
        .iter()
        .zip(&expected)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| (c, p * n as f64))
        .collect();
    assert!(cells.iter().all(|&(_, e)| e >= 5.0), "sparse cells {cells:?}");
    let stat: f64 = cells.iter().map(|&(c, e)| (c as f64 - e).powi(2) / e).sum();
    let critical = ChiSquared::new((cells.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi-square {stat:.2} ≥ {critical:.2}");
}
