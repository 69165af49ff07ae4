use num_complex::Complex64;
use proptest::prelude::*;

use grantfree::amp::{activity_posterior, decide_activity, denoise, denoiser_divergence, Decision};
use grantfree::coherent::{achievable_rate, LinearCode};
use grantfree::harness::{MetricRow, MetricsReport};
use grantfree::model::{PilotKind, PowerPolicy, SystemConfig};
use grantfree::theory::{collision_probability, detection_error_probabilities, threshold_interval};

fn complex_vec(max_len: usize, scale: f64) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-scale..scale, -scale..scale), 1..=max_len)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
}

proptest! {
    #[test]
    fn posterior_is_a_probability(x in complex_vec(64, 10.0), beta in 1e-3f64..1e3, eps in 1e-4f64..=1.0, mu2 in 1e-4f64..1e2) {
        let v = activity_posterior(&x, beta, eps, mu2).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let d = denoiser_divergence(&x, beta, eps, mu2).unwrap();
        prop_assert!(d.is_finite() && d >= 0.0);
    }

    #[test]
    fn denoiser_shrinks_along_the_input(x in complex_vec(32, 5.0), beta in 1e-2f64..1e2, eps in 1e-3f64..=1.0, mu2 in 1e-3f64..1e1) {
        // eta(x) = s x with 0 <= s <= beta/(beta+mu2)
        let out = denoise(&x, beta, eps, mu2).unwrap();
        let g = beta / (beta + mu2);
        let k = x.iter().position(|z| z.norm() > 1e-9);
        if let Some(k) = k {
            let s = out[k] / x[k];
            prop_assert!(s.im.abs() <= 1e-12 * s.re.abs().max(1e-300));
            prop_assert!(s.re >= 0.0 && s.re <= g * (1.0 + 1e-12));
            for (o, z) in out.iter().zip(&x) {
                prop_assert!((o - z * s.re).norm() <= 1e-12 * z.norm().max(1e-300) + 1e-300);
            }
        }
    }

    #[test]
    fn everyone_active_means_declared_active(x in complex_vec(16, 1.0), beta in 1e-2f64..1e2, mu2 in 1e-3f64..1e1) {
        prop_assert!(decide_activity(&x, beta, 1.0, mu2, Decision::Posterior).unwrap());
    }

    #[test]
    fn collision_monotone(tau_p in 2u32..12, n in 2u64..300) {
        let p = collision_probability(tau_p, n);
        prop_assert!((0.0..=1.0).contains(&p));
        let (more_devices, longer) = (collision_probability(tau_p, n + 1), collision_probability(tau_p + 1, n));
        prop_assert!(more_devices >= p && longer <= p);
        // strict until the probability rounds to one
        if p < 0.999 {
            prop_assert!(more_devices > p && longer < p);
        }
    }

    #[test]
    fn detection_errors_are_probabilities(m in 1usize..256, beta in 1e-3f64..1e3, mu2 in 1e-3f64..1e2, t in 0.01f64..0.99) {
        let (lo, hi) = threshold_interval(m, beta, mu2);
        let zeta = lo + t * (hi - lo);
        let p = detection_error_probabilities(m, zeta, beta, mu2).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.pr_md) && (0.0..=1.0).contains(&p.pr_fa));
        prop_assert!(p.zeta_md < p.zeta_fa);
    }

    #[test]
    fn rate_grows_with_sinr(a in 0.0f64..1e3, b in 0.0f64..1e3, tau in 2usize..500, frac in 0.0f64..1.0) {
        let tau_p = ((tau as f64 * frac) as usize).max(1);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(achievable_rate(lo, tau, tau_p) <= achievable_rate(hi, tau, tau_p));
        prop_assert_eq!(achievable_rate(hi, tau, tau), 0.0);
    }

    #[test]
    fn codes_round_trip(bits in prop::collection::vec(0u8..2, 4), len in prop::sample::select(vec![1usize, 3, 11, 15, 19])) {
        let h = LinearCode::Hamming74;
        prop_assert_eq!(h.decode_hard(&h.encode_bits(&bits).unwrap()).unwrap(), bits.clone());
        let r = LinearCode::repetition(len).unwrap();
        let llrs: Vec<f64> = r.encode(&bits[..1]).unwrap();
        prop_assert_eq!(r.decode_llrs(&llrs).unwrap(), bits[..1].to_vec());
    }

    #[test]
    fn report_csv_round_trip(values in prop::collection::vec((-1e6f64..1e6, 0.0f64..1.0, 0u64..100_000), 0..20)) {
        let report = MetricsReport {
            rows: values
                .iter()
                .enumerate()
                .map(|(i, (v, e, n))| MetricRow {
                    sweep_param: "pilot_len".into(),
                    sweep_value: *v,
                    metric: format!("amp/metric_{i}"),
                    estimate: *e,
                    stderr: e / 7.0,
                    n_trials: *n,
                })
                .collect(),
        };
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        prop_assert_eq!(&MetricsReport::read_csv(csv.as_slice()).unwrap(), &report);
        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        prop_assert_eq!(&MetricsReport::read_json(json.as_slice()).unwrap(), &report);
    }

    #[test]
    fn config_text_round_trip(
        n in 1usize..5000, m in 1usize..512, tau_p in 1usize..200, extra in 0usize..300,
        eps in 1e-4f64..=1.0, bits in 0u32..8, gaussian: bool, sci: bool,
    ) {
        let cfg = SystemConfig {
            n_devices: n,
            n_antennas: m,
            pilot_len: tau_p,
            coherence_len: tau_p + extra,
            activity_prob: eps,
            info_bits: bits,
            pilot_kind: if gaussian { PilotKind::Gaussian } else { PilotKind::Bernoulli },
            power_policy: if sci { PowerPolicy::Sci } else { PowerPolicy::Npc },
            ..SystemConfig::default()
        };
        prop_assert!(cfg.validate().is_ok());
        prop_assert_eq!(SystemConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
    }
}
