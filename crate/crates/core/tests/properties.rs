use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use p2es::config::RunConfig;
use p2es::diffusion::{ddim_step, ddpm_step, linear_schedule, temporal_noise};
use p2es::eval::{dtw, kl_divergence, mw_metric, s_theta, smoothed_histogram};
use p2es::groupfinder::affinity::{flatten_upper, pearson_matrix, reshape_upper};
use p2es::groupfinder::encoders::{argmax_first, cosine};
use p2es::model::denoiser::{Denoiser, DenoiserConfig, Stage};
use p2es::model::losses::{loss_axis, loss_freq, loss_lead};
use p2es::qrs::QrsMask;
use p2es::signals::{concat, segment, Modality, Preprocessor, SignalSegment, LEAD_I, LEAD_II};
use p2es::spectral::{dft_real, frequency_deblur, gaussian_lowpass_mask, highfreq_mask, idft_real, spectral_entropy, BlurConfig};

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n)
}

fn leads(l: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_of(n), l)
}

fn conj_symmetric(m: &[f64]) -> bool {
    let n = m.len();
    (1..n).all(|k| m[k] == m[n - k])
}

fn ecg(samples: Vec<Vec<f64>>) -> SignalSegment {
    SignalSegment::ecg12(samples, 125.0, "p").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_of_concat_is_identity(chunks in prop::collection::vec(vec_of(250), 1..5)) {
        let segs: Vec<SignalSegment> =
            chunks.into_iter().map(|c| SignalSegment::ppg(c, 125.0, "p").unwrap()).collect();
        prop_assert_eq!(segment(&concat(&segs).unwrap(), 2.0).unwrap(), segs);
    }

    #[test]
    fn preprocessing_is_idempotent_on_conformant_input(
        tones in prop::collection::vec((10usize..60, 0.1..2.0f64, 0.0..std::f64::consts::TAU), 1..4),
    ) {
        // Whole-cycle tones between 5 and 30 Hz over 2 s at the target rate.
        let x: Vec<f64> = (0..250)
            .map(|i| tones.iter().map(|(c, a, p)| a * (2.0 * std::f64::consts::PI * *c as f64 * i as f64 / 250.0 + p).sin()).sum())
            .collect();
        let pre = Preprocessor::default();
        let once = pre.condition(&SignalSegment::ppg(x, 125.0, "p").unwrap(), Modality::Ecg).unwrap();
        let twice = pre.condition(&once, Modality::Ecg).unwrap();
        let err = once.samples[0].iter().zip(&twice.samples[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max deviation {err}");
    }

    #[test]
    fn parseval_and_real_round_trip(n in prop::sample::select(vec![8usize, 250, 256]), seed in any::<u64>()) {
        let x: Vec<f64> = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let c = dft_real(&x);
        let ex = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ec = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!((ex - ec).abs() < 1e-9);
        let (back, imag) = idft_real(&c);
        prop_assert!(imag < 1e-9);
        prop_assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn masks_are_conjugate_symmetric(n in 4usize..300, t in 1usize..100, f_lo in 0.0..60.0f64, width in 0.5..10.0f64) {
        prop_assert!(conj_symmetric(&highfreq_mask(n, 125.0, f_lo, width).unwrap()));
        prop_assert!(conj_symmetric(&gaussian_lowpass_mask(t, 100, n, 125.0, &BlurConfig::default()).unwrap()));
    }

    #[test]
    fn deblur_without_gain_is_identity(x in leads(12, 64)) {
        let s = ecg(x);
        let out = frequency_deblur(&s, 0.0).unwrap();
        for (a, b) in s.samples.iter().flatten().zip(out.samples.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_entropy_ignores_scale(x in vec_of(128), k in 0.01..100.0f64) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let y: Vec<f64> = x.iter().map(|v| k * v).collect();
        prop_assert!((spectral_entropy(&x).unwrap() - spectral_entropy(&y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn affinity_is_symmetric_unit_diagonal_and_affine_invariant(
        chest in leads(6, 40),
        gains in prop::collection::vec((0.1..10.0f64, -5.0..5.0f64), 6),
    ) {
        let a = pearson_matrix(&chest).unwrap();
        for i in 0..6 {
            prop_assert!((a.0[i][i] - 1.0).abs() < 1e-12);
            for j in 0..6 {
                prop_assert_eq!(a.0[i][j], a.0[j][i]);
            }
        }
        let scaled: Vec<Vec<f64>> =
            chest.iter().zip(&gains).map(|(c, (g, b))| c.iter().map(|v| g * v + b).collect()).collect();
        prop_assert!(a.frobenius_distance(&pearson_matrix(&scaled).unwrap()) < 1e-9);
        prop_assert_eq!(reshape_upper(&flatten_upper(&a)).unwrap(), a);
    }

    #[test]
    fn cosine_assignment_ignores_positive_scale(
        z in vec_of(8),
        cents in prop::collection::vec(vec_of(8), 2..8),
        k in 1e-3..1e3f64,
    ) {
        let zs: Vec<f64> = z.iter().map(|v| k * v).collect();
        let pick = |q: &[f64]| argmax_first(&cents.iter().map(|c| cosine(q, c)).collect::<Vec<_>>());
        prop_assert_eq!(pick(&z), pick(&zs));
    }

    #[test]
    fn qrs_samples_carry_no_temporal_noise(
        x in leads(3, 32),
        eps in leads(3, 32),
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 32), 3),
        t in 1usize..=50,
    ) {
        let s = linear_schedule(50, 1e-4, 0.2).unwrap();
        let mask = QrsMask { mask: bits, peak_indices: vec![Vec::new(); 3], half_width: 0 };
        let x_t = temporal_noise(&x, t, &s, &mask, &eps).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for l in 0..3 {
            for n in 0..32 {
                if mask.mask[l][n] {
                    prop_assert_eq!(x_t[l][n], a * x[l][n]);
                }
            }
        }
    }

    #[test]
    fn lead_loss_ignores_common_offsets(
        pred in leads(4, 16),
        gt in leads(4, 16),
        common in vec_of(16),
        shift in -3.0..3.0f64,
    ) {
        let base = loss_lead(&pred, &gt).unwrap();
        let moved: Vec<Vec<f64>> = pred.iter().map(|c| c.iter().zip(&common).map(|(a, b)| a + b + shift).collect()).collect();
        prop_assert!((loss_lead(&moved, &gt).unwrap() - base).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn freq_loss_equals_time_domain_norm(pred in leads(12, 20), gt in leads(12, 20)) {
        let l2 = pred.iter().flatten().zip(gt.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((loss_freq(&pred, &gt).unwrap() - l2).abs() < 1e-9 * (1.0 + l2));
    }

    #[test]
    fn axis_loss_is_bounded(pred in leads(12, 10), gt in leads(12, 10)) {
        let v = loss_axis(&pred, &gt).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&v));
    }

    #[test]
    fn stage_boundaries_sit_at_thirds(third in 1usize..400) {
        let total = 3 * third;
        prop_assert_eq!(Stage::for_step(third, total), Stage::Detail);
        prop_assert_eq!(Stage::for_step(third + 1, total), Stage::Structural);
        prop_assert_eq!(Stage::for_step(2 * third, total), Stage::Structural);
        prop_assert_eq!(Stage::for_step(2 * third + 1, total), Stage::Coarse);
        prop_assert_eq!(Stage::for_step(total, total), Stage::Coarse);
    }

    #[test]
    fn dtw_is_bounded_by_l1(x in vec_of(12), y in vec_of(12)) {
        let l1: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(dtw(&x, &y).unwrap() <= l1 + 1e-12);
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(-1.0..1.0f64, 1..60), b in prop::collection::vec(-1.0..1.0f64, 1..60)) {
        let p = smoothed_histogram(&a, -1.0, 1.0, 16);
        let q = smoothed_histogram(&b, -1.0, 1.0, 16);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mw_is_shift_equivariant(x in prop::collection::vec(-5.0..5.0f64, 2..80), y in prop::collection::vec(-5.0..5.0f64, 2..80), c in -10.0..10.0f64) {
        let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!((mw_metric(&xs, &y).unwrap() - mw_metric(&x, &y).unwrap() - c).abs() < 1e-9);
    }

    #[test]
    fn s_theta_ignores_common_positive_scale(gen in leads(12, 8), gt in leads(12, 8), k in 0.01..100.0f64) {
        let sum = |x: &[Vec<f64>], l: usize| x[l].iter().sum::<f64>().abs();
        prop_assume!(sum(&gen, LEAD_I) + sum(&gen, LEAD_II) > 1e-3 && sum(&gt, LEAD_I) + sum(&gt, LEAD_II) > 1e-3);
        let mut scaled = gen.clone();
        for l in [LEAD_I, LEAD_II] {
            scaled[l].iter_mut().for_each(|v| *v *= k);
        }
        let (a, b) = (ecg(gen), ecg(gt));
        prop_assert!((s_theta(&a, &b).unwrap() - s_theta(&ecg(scaled), &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn run_config_round_trips(seed in any::<u64>(), steps in 2usize..2000, eta in 0.0..1.0f64, epochs in 1usize..500, frac in 0.05..0.95f64) {
        let mut c = RunConfig { seed, train_fraction: frac, ..RunConfig::default() };
        c.schedule.steps = steps;
        c.ddim.eta = eta;
        c.training.epochs = epochs;
        prop_assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn parameter_count_ignores_step_count(a in 2usize..2000, b in 2usize..2000) {
        let p = |steps| Denoiser::new(&DenoiserConfig::with_steps(steps), 1).unwrap();
        let (da, db) = (p(a), p(b));
        let trainable = |d: &Denoiser| d.store.trainable_mask().iter().filter(|m| **m != 0.0).count();
        prop_assert_eq!(trainable(&da), trainable(&db));
        prop_assert_eq!(da.block_count("ppg.dense"), 1);
        prop_assert_eq!(da.block_count("affinity"), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Data is a point mass at `c`, so the oracle noise estimate is exact.
    /// DDIM over every step with η matched to σ_t = √β_t should reproduce
    /// DDPM's run mean.
    #[test]
    fn full_ddim_matches_ddpm_means(c in vec_of(6), seed in any::<u64>()) {
        let steps = 20;
        let s = linear_schedule(steps, 1e-4, 0.2).unwrap();
        let oracle = |x: &[f64], t: usize| -> Vec<f64> {
            let ab = s.alpha_bar(t);
            x.iter().zip(&c).map(|(v, c0)| (v - ab.sqrt() * c0) / (1.0 - ab).sqrt()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runs = 1000;
        let (mut m_ddpm, mut m_ddim) = (vec![0.0; 6], vec![0.0; 6]);
        for _ in 0..runs {
            let start: Vec<f64> = p2es::diffusion::gaussian_like(1, 6, &mut rng).remove(0);
            let (mut a, mut b) = (start.clone(), start);
            for t in (1..=steps).rev() {
                a = ddpm_step(&a, t, &oracle(&a, t), &s, &mut rng).unwrap();
                let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
                let posterior = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
                let eta = if t > 1 { (s.beta(t) / posterior).sqrt() } else { 0.0 };
                b = ddim_step(&b, t, t - 1, &oracle(&b, t), &s, eta, &mut rng).unwrap();
            }
            for i in 0..6 {
                m_ddpm[i] += a[i] / runs as f64;
                m_ddim[i] += b[i] / runs as f64;
            }
        }
        let mse = m_ddpm.iter().zip(&m_ddim).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 6.0;
        prop_assert!(mse < 0.05, "mse {mse}");
    }
}
