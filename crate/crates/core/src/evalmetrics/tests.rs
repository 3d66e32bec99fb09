use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn record(id: usize, adv: usize, exemplar: usize) -> SampleRecord {
    // Leaf 0 under a concept that also holds label 1; labels 2 and 3 are A_Text.
    SampleRecord {
        task_id: format!("t{id}"),
        leaf: 0,
        a_text: vec![2, 3],
        verdicts: BTreeMap::from([("surrogate".to_string(), Verdict { adv, exemplar })]),
        ms_ssim: None,
        l2_diff: None,
        trace: TraceSummary::default(),
    }
}

#[test]
fn relative_asr_of_the_worked_example() {
    // Exemplars 0..3 correct, 3 wrong; attacks on 0 and 1 succeed, 2 fails,
    // and the attack on the misclassified exemplar also lands in A_Text.
    let recs = vec![record(0, 2, 0), record(1, 3, 1), record(2, 0, 0), record(3, 2, 3)];
    assert_eq!(accuracy(&recs, Which::Exemplar, "surrogate").unwrap(), 0.75);
    let v = asr_relative(&recs, "surrogate").unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-15, "{v}");
    assert_eq!(asr(&recs, "surrogate").unwrap(), 0.75);
}

#[test]
fn relative_asr_edge_cases() {
    let all = vec![record(0, 2, 0), record(1, 3, 1)];
    assert_eq!(asr_relative(&all, "surrogate").unwrap(), 1.0);
    let none = vec![record(0, 2, 2), record(1, 3, 3)];
    assert!(matches!(asr_relative(&none, "surrogate"), Err(Error::UndefinedMetric(_))));
    assert!(matches!(asr_relative(&[], "surrogate"), Err(Error::Contract(_))));
    assert!(matches!(asr_relative(&all, "other"), Err(Error::Contract(_))));
}

#[test]
fn accuracy_cases() {
    let recs = vec![record(0, 0, 0), record(1, 1, 1), record(2, 0, 0), record(3, 2, 1)];
    assert_eq!(accuracy(&recs, Which::Adv, "surrogate").unwrap(), 0.75);
    assert_eq!(accuracy(&recs, Which::Exemplar, "surrogate").unwrap(), 1.0);
    let wrong = vec![record(0, 2, 3)];
    assert_eq!(accuracy(&wrong, Which::Adv, "surrogate").unwrap(), 0.0);
    assert!(matches!(accuracy(&[], Which::Adv, "surrogate"), Err(Error::Contract(_))));
}

#[test]
fn relative_asr_properties_on_random_record_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked_identity = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..20);
        let all_correct = rng.random_bool(0.3);
        let recs: Vec<SampleRecord> = (0..k)
            .map(|i| {
                let ex = if all_correct { rng.random_range(0..2) } else { rng.random_range(0..4) };
                record(i, rng.random_range(0..4), ex)
            })
            .collect();
        match asr_relative(&recs, "surrogate") {
            Ok(v) => {
                assert!((0.0..=1.0).contains(&v), "{v}");
                if accuracy(&recs, Which::Exemplar, "surrogate").unwrap() == 1.0 {
                    assert!((v - asr(&recs, "surrogate").unwrap()).abs() < 1e-15);
                    checked_identity += 1;
                }
            }
            Err(Error::UndefinedMetric(_)) => {
                assert_eq!(accuracy(&recs, Which::Exemplar, "surrogate").unwrap(), 0.0)
            }
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked_identity > 200);
}

#[test]
fn records_round_trip_through_text() {
    let mut a = record(0, 2, 0);
    a.verdicts.insert("victim".into(), Verdict { adv: 1, exemplar: 3 });
    a.ms_ssim = Some(0.912345678901234);
    a.l2_diff = Some(2.5);
    a.trace = TraceSummary {
        iterations: 40,
        denoiser_calls: 120,
        clipped_steps: 7,
        final_deviation: Some(2.4999999),
    };
    let b = record(1, 3, 1);
    let text = a.to_text() + &b.to_text();
    assert_eq!(SampleRecord::parse_all(&text).unwrap(), vec![a, b]);
    assert!(SampleRecord::parse_all("task x\nleaf 1\n").is_err());
    assert!(SampleRecord::parse_all("leaf 1\nend\n").is_err());
    assert!(SampleRecord::parse_all("task x\nbogus 1\nend\n").is_err());
}

#[test]
fn l2_diff_is_the_euclidean_distance() {
    let a = Tensor::from_slice(&[0.0, 0.0]);
    let b = Tensor::from_slice(&[3.0, 4.0]);
    assert_eq!(l2_diff(&a, &b).unwrap(), 5.0);
    assert!(l2_diff(&a, &Tensor::from_slice(&[1.0])).is_err());
}

// Reference MS-SSIM: direct 2D windows, no separability, loops spelled out.
fn oracle_ms_ssim(a: &[f64], b: &[f64], side: usize, levels: usize, range: f64) -> f64 {
    let k = 11usize;
    let mut g = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            s += *v;
        }
    }
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let w: Vec<f64> = MS_SSIM_WEIGHTS[..levels].to_vec();
    let wsum: f64 = w.iter().sum();
    let (mut x, mut y, mut n) = (a.to_vec(), b.to_vec(), side);
    let mut out = 1.0;
    for (l, wl) in w.iter().enumerate() {
        let m = n - k + 1;
        let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
        for r in 0..m {
            for c in 0..m {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i][j] / s;
                        let (p, q) = (x[(r + i) * n + c + j], y[(r + i) * n + c + j]);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let cs = (2.0 * (sxy - mx * my) + c2) / ((sxx - mx * mx) + (syy - my * my) + c2);
                cs_sum += cs;
                ssim_sum += cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            }
        }
        let last = l + 1 == levels;
        let v = if last { ssim_sum } else { cs_sum } / (m * m) as f64;
        out *= v.max(0.0).powf(wl / wsum);
        if !last {
            let h = n / 2;
            let pool = |z: &[f64]| {
                let mut o = vec![0.0; h * h];
                for r in 0..h {
                    for c in 0..h {
                        o[r * h + c] =
                            (z[2 * r * n + 2 * c] + z[2 * r * n + 2 * c + 1] + z[(2 * r + 1) * n + 2 * c] + z[(2 * r + 1) * n + 2 * c + 1])
                                / 4.0;
                    }
                }
                o
            };
            x = pool(&x);
            y = pool(&y);
            n = h;
        }
    }
    out
}

fn smooth_image(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (fx, fy, ph) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.0..6.0));
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            0.6 * (fx * r + fy * c + ph).sin()
        })
        .collect()
}

fn noisy(base: &[f64], amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|v| v + amp * rng.random_range(-1.0..1.0)).collect()
}

fn img(side: usize, v: Vec<f64>) -> Tensor {
    Tensor::new(vec![side, side], v).unwrap()
}

#[test]
fn matches_the_direct_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (side, levels) in [(16, 1), (24, 2), (44, 3), (32, 2)] {
        let a = smooth_image(side, &mut rng);
        let b = noisy(&a, 0.3, &mut rng);
        let want = oracle_ms_ssim(&a, &b, side, levels, 2.0);
        let got = ms_ssim(&img(side, a), &img(side, b), levels).unwrap();
        assert!((got - want).abs() < 1e-12, "side {side}: {got} vs {want}");
    }
}

#[test]
fn level_feasibility() {
    let m = MsSsim::new(1);
    assert_eq!(m.max_levels(10), 0);
    assert_eq!(m.max_levels(16), 1);
    assert_eq!(m.max_levels(22), 2);
    assert_eq!(m.max_levels(176), 5);
    assert_eq!(m.max_levels(1000), 5);
    let x = Tensor::zeros(&[16, 16]);
    match ms_ssim(&x, &x, 2) {
        Err(Error::Levels { requested: 2, max_feasible: 1 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(ms_ssim(&x, &x, 0), Err(Error::Levels { .. })));
    assert!(ms_ssim(&x, &Tensor::zeros(&[16, 17]), 1).is_err());
    assert!(ms_ssim(&Tensor::zeros(&[4]), &Tensor::zeros(&[4]), 1).is_err());
}

#[test]
fn independent_noise_scores_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = ms_ssim(&img(16, a), &img(16, b), 1).unwrap();
    assert!(v < 0.5, "{v}");
}

#[test]
fn channels_are_averaged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = smooth_image(16, &mut rng);
    let b = noisy(&a, 0.5, &mut rng);
    let single = ms_ssim(&img(16, a.clone()), &img(16, b.clone()), 1).unwrap();
    let mut ca = a.clone();
    ca.extend(&a);
    let mut cb = b;
    cb.extend(&a);
    let two = ms_ssim(&Tensor::new(vec![2, 16, 16], ca).unwrap(), &Tensor::new(vec![2, 16, 16], cb).unwrap(), 1).unwrap();
    assert!((two - (single + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn decreases_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let amps = [0.05, 0.1, 0.2, 0.4, 0.8];
    let mut means = [0.0; 5];
    for _ in 0..50 {
        let a = smooth_image(24, &mut rng);
        for (m, amp) in means.iter_mut().zip(amps) {
            let b = noisy(&a, amp, &mut rng);
            *m += ms_ssim(&img(24, a.clone()), &img(24, b), 2).unwrap() / 50.0;
        }
    }
    assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
}

proptest! {
    #[test]
    fn self_similarity_and_symmetry(seed in any::<u64>(), amp in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = smooth_image(24, &mut rng);
        let b = noisy(&a, amp, &mut rng);
        let (ta, tb) = (img(24, a), img(24, b));
        let s = ms_ssim(&ta, &ta, 2).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-6);
        let ab = ms_ssim(&ta, &tb, 2).unwrap();
        let ba = ms_ssim(&tb, &ta, 2).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }
}
