use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flashkit::bench::fit_exponent;

const LENGTHS: [f64; 5] = [256.0, 512.0, 1024.0, 2048.0, 4096.0];

#[test]
fn exact_power_laws() {
    for (p, c) in [(1.0, 3.0), (2.0, 0.01)] {
        let pts: Vec<(f64, f64)> = LENGTHS.iter().map(|&t| (t, c * f64::powf(t, p))).collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!((fit.slope - p).abs() < 1e-6, "{fit:?}");
        assert!((fit.r2 - 1.0).abs() < 1e-9);
    }
}

#[test]
fn noisy_quadratic_stays_near_two() {
    // 1000 trials of +-5% uniform multiplicative noise.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let pts: Vec<(f64, f64)> = LENGTHS
            .iter()
            .map(|&t| (t, 1e-3 * t * t * (1.0 + rng.random_range(-0.05..=0.05))))
            .collect();
        let slope = fit_exponent(&pts).unwrap().slope;
        assert!((1.85..=2.15).contains(&slope), "{slope}");
    }
}

#[test]
fn too_few_points_error() {
    assert!(fit_exponent(&[(1.0, 1.0), (2.0, 4.0)]).is_err());
    assert!(fit_exponent(&[(2.0, 1.0), (2.0, 4.0), (4.0, 9.0)]).is_err());
}
