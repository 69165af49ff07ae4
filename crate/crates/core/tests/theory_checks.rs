use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use grantfree::amp::{decide_activity, default_energy_threshold, Decision};
use grantfree::coherent::mrc_sinr_closed_form;
use grantfree::model::{
    apply_power_control, generate_geometry, generate_pilots, LargeScaleProfile, PowerPolicy, SystemConfig,
};
use grantfree::theory::{asymptotic_sinr, detection_error_probabilities};

fn cn(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

#[test]
fn energy_rule_matches_closed_form_within_three_stderr() {
    let (beta, mu2) = (1.0, 0.5);
    let draws = 200_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [2usize, 4, 8] {
        let zeta = default_energy_threshold(m, beta, mu2);
        let p = detection_error_probabilities(m, zeta, beta, mu2).unwrap();
        let (mut miss, mut fa) = (0u64, 0u64);
        for _ in 0..draws {
            let active: Vec<Complex64> = (0..m).map(|_| cn(&mut rng, beta + mu2)).collect();
            let idle: Vec<Complex64> = (0..m).map(|_| cn(&mut rng, mu2)).collect();
            let d = Decision::Energy { zeta: None };
            miss += u64::from(!decide_activity(&active, beta, 0.5, mu2, d).unwrap());
            fa += u64::from(decide_activity(&idle, beta, 0.5, mu2, d).unwrap());
        }
        for (pred, hits, what) in [(p.pr_md, miss, "miss"), (p.pr_fa, fa, "false alarm")] {
            let rate = hits as f64 / draws as f64;
            let se = (pred * (1.0 - pred) / draws as f64).sqrt();
            assert!((rate - pred).abs() <= 3.0 * se, "M={m} {what}: sampled {rate}, predicted {pred}");
        }
    }
}

#[test]
fn closed_form_errors_match_sampling_at_small_arrays() {
    let (beta, mu2) = (1.0, 0.1);
    let draws = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for m in [4usize, 16, 64] {
        let p = detection_error_probabilities(m, default_energy_threshold(m, beta, mu2), beta, mu2).unwrap();
        let (mut miss, mut fa) = (0usize, 0usize);
        for _ in 0..draws {
            let e: f64 = (0..m).map(|_| cn(&mut rng, 1.0).norm_sqr()).sum();
            miss += usize::from((beta + mu2) * e <= p.zeta);
            fa += usize::from(mu2 * e > p.zeta);
        }
        assert!((miss as f64 / draws as f64 - p.pr_md).abs() < 2e-3, "M={m}");
        assert!((fa as f64 / draws as f64 - p.pr_fa).abs() < 2e-3, "M={m}");
    }
}

fn scenario(policy: PowerPolicy) -> (SystemConfig, LargeScaleProfile, grantfree::model::PilotBook, Vec<f64>) {
    let cfg = SystemConfig { n_devices: 12, pilot_len: 6, power_policy: policy, ..SystemConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let profile = generate_geometry(&cfg, &mut rng);
    let book = generate_pilots(&cfg, &mut rng);
    let powers = apply_power_control(&profile, &cfg);
    (cfg, profile, book, powers)
}

#[test]
fn large_array_sinr_approaches_the_limit() {
    let (cfg, profile, book, powers) = scenario(PowerPolicy::Npc);
    let active = [0usize, 3, 4, 7, 9];
    for &k in &active {
        let limit = asymptotic_sinr(k, &active, &book, &powers, &profile.betas).unwrap().value();
        let ratios: Vec<f64> = [100usize, 10_000, 1_000_000, 100_000_000]
            .iter()
            .map(|&m| {
                let c = SystemConfig { n_antennas: m, ..cfg.clone() };
                mrc_sinr_closed_form(k, &active, &book, &powers, &profile, &c).unwrap() / limit
            })
            .collect();
        assert!(ratios.windows(2).all(|w| (w[1] - 1.0).abs() <= (w[0] - 1.0).abs()), "{ratios:?}");
        assert!((ratios[3] - 1.0).abs() < 1e-3, "{ratios:?}");
    }
}

#[test]
fn channel_inversion_limit_is_pilot_geometry_only() {
    let (_, profile, book, powers) = scenario(PowerPolicy::Sci);
    let active = [1usize, 2, 5, 8];
    for &k in &active {
        let want = 1.0
            / active
                .iter()
                .filter(|&&j| j != k)
                .map(|&j| book.inner(k, j).norm_sqr())
                .sum::<f64>();
        let got = asymptotic_sinr(k, &active, &book, &powers, &profile.betas).unwrap().value();
        assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
    }
}
