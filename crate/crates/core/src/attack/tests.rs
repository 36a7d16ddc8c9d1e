use super::*;
use crate::data::Provenance;
use crate::fl::{InterleaveRatio, Method, ProtectionConfig};
use crate::he::SimulatorBackend;
use crate::model::{ModelArch, Shape};
use alloc::vec;
use alloc::vec::Vec;
use proptest::prelude::*;
use rand::Rng;

/// The bundled 8×8 digits, parsed directly so core tests need no IO crate.
fn digits() -> Dataset {
    let raw: &[u8] = include_bytes!(concat!(env!("CARGO_MANIFEST_DIR"), "/../altfl/data/digits8x8.afld"));
    let u32_at = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as usize;
    let (count, classes) = (u32_at(20), u32_at(24));
    let labels: Vec<usize> = (0..count).map(|i| u16::from_le_bytes([raw[28 + 2 * i], raw[29 + 2 * i]]) as usize).collect();
    let data = &raw[28 + 2 * count..];
    let samples = data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(Shape::new(1, 8, 8), classes, samples, labels, Provenance::Authentic).unwrap()
}

fn pool(size: usize) -> CandidatePool {
    CandidatePool::from_dataset(&digits(), size).unwrap()
}

fn noise_pool(n: usize, seed: u64) -> CandidatePool {
    let mut r = crate::rng::stream(seed, &[77]);
    let samples = (0..n * 64).map(|_| r.random_range(0.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 10).collect();
    CandidatePool::from_dataset(&Dataset::new(Shape::new(1, 8, 8), 10, samples, labels, Provenance::Authentic).unwrap(), n).unwrap()
}

fn env<'a>(pool: &'a CandidatePool, arch: &'a ModelArch, backend: &'a SimulatorBackend) -> AttackEnv<'a> {
    AttackEnv { pool, arch, lr: 0.1, clip_norm: crate::DEFAULT_CLIP_NORM, warmup: 256, backend }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn infer_gradient_examples() {
    let g = infer_gradient(&[1.0, 2.0], &[0.9, 2.2], 0.1, &EncryptionMask::none(2)).unwrap();
    let v: Vec<f64> = g.values.iter().map(|v| v.unwrap()).collect();
    assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12);
    let g = infer_gradient(&[1.0, 2.0], &[0.9, 2.2], 0.1, &EncryptionMask::from_bits(vec![false, true])).unwrap();
    assert!(g.values[0].is_some() && g.values[1].is_none());
    assert!(infer_gradient(&[1.0, 2.0], &[0.9, 2.2], 0.1, &EncryptionMask::all(2)).unwrap().fully_hidden());
    assert_eq!(infer_gradient(&[1.0], &[0.9], 0.0, &EncryptionMask::none(1)), Err(AttackError::ZeroLearningRate));
}

#[test]
fn iip_examples() {
    let p = noise_pool(100, 1);
    let targets = [3, 10, 42, 99];
    let exact: Vec<Vec<f64>> = targets.iter().map(|&t| p.image(t).to_vec()).collect();
    assert_eq!(iip_score(&exact, &p, &targets).unwrap(), 1.0);
    let mut three = exact.clone();
    three[2] = p.image(7).to_vec();
    assert_eq!(iip_score(&three, &p, &targets).unwrap(), 0.75);
    assert_eq!(CandidatePool::from_dataset(p.dataset(), 0), Err(AttackError::EmptyPool));
}

#[test]
fn noise_reconstructions_score_at_chance() {
    let p = pool(1000);
    let mut r = crate::rng::stream(5, &[1]);
    let mut hits = 0usize;
    let trials = 2000;
    for _ in 0..trials {
        let t = r.random_range(0..p.len());
        let img: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
        hits += iip_score(&[img], &p, &[t]).unwrap() as usize;
    }
    assert!((hits as f64 / trials as f64) <= 0.05, "{hits}");
}

#[test]
fn identification_requires_a_matching_source() {
    let p = noise_pool(50, 2);
    let recs = vec![p.image(4).to_vec(), p.image(9).to_vec()];
    let hit = identified_targets(&recs, &[vec![0], vec![0, 1]], &p, &[4, 9]).unwrap();
    assert_eq!(hit, [true, true]);
    let hit = identified_targets(&recs, &[vec![1], vec![0]], &p, &[4, 9]).unwrap();
    assert_eq!(hit, [false, false]);
}

#[test]
fn pool_drops_duplicates() {
    let ds = Dataset::new(Shape::new(1, 1, 2), 2, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0], vec![0, 0, 1], Provenance::Authentic).unwrap();
    let p = CandidatePool::from_dataset(&ds, 10).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p.nearest(&[0.9, 0.1]).unwrap(), 1);
}

#[test]
fn passive_configs_reject_batches() {
    let mut c = AttackConfig::new(AttackKind::Dlg);
    c.batch_size = 2;
    assert!(c.validate().is_err());
    assert!(AttackConfig::new(AttackKind::Rtf).validate().is_ok());
    assert_eq!(AttackKind::from_name("rtf"), Some(AttackKind::Rtf));
}

#[test]
fn cah_single_sample_is_exact() {
    let p = pool(300);
    for seed in 0..5 {
        let params = cah_model(Shape::new(1, 8, 8), 64, 10, &p, 1, seed).unwrap();
        let t = (seed as usize * 37) % p.len();
        let batch = p.dataset().batch(&[t]);
        let next = crate::model::apply_step(&params, &crate::model::batch_gradient(&params, &batch).unwrap().1, 0.1).unwrap();
        let obs = infer_gradient(params.values(), next.values(), 0.1, &EncryptionMask::none(params.len())).unwrap();
        let rec = cah_attack(&obs, &params, &p.mean_image()).unwrap();
        assert!(!rec.images.is_empty(), "seed {seed}: no active row");
        for img in &rec.images {
            assert!(mse(img, p.image(t)) <= 1e-8);
        }
    }
}

#[test]
fn cah_recovers_half_of_a_batch_of_eight() {
    let p = pool(1000);
    let mut exact = 0usize;
    let seeds = 20;
    for seed in 0..seeds {
        let params = cah_model(Shape::new(1, 8, 8), 64, 10, &p, 8, seed).unwrap();
        let mut r = crate::rng::stream(seed, &[9]);
        let targets = rand::seq::index::sample(&mut r, p.len(), 8).into_vec();
        let batch = p.dataset().batch(&targets);
        let next = crate::model::apply_step(&params, &crate::model::batch_gradient(&params, &batch).unwrap().1, 0.1).unwrap();
        let obs = infer_gradient(params.values(), next.values(), 0.1, &EncryptionMask::none(params.len())).unwrap();
        let rec = cah_attack(&obs, &params, &p.mean_image()).unwrap();
        // Analytic oracle: which targets fire a row alone.
        let lay = &params.network().layout()[0];
        let fires = |row: usize, x: &[f64]| {
            let w = &params.values()[lay.weight_offset + row * 64..lay.weight_offset + (row + 1) * 64];
            w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params.values()[lay.bias_offset + row] > 0.0
        };
        let mut oracle = 0;
        for &t in &targets {
            let alone = (0..64).any(|row| fires(row, p.image(t)) && targets.iter().filter(|&&u| fires(row, p.image(u))).count() == 1);
            let got = rec.images.iter().any(|img| mse(img, p.image(t)) <= 1e-8);
            assert!(!alone || got, "seed {seed}: target {t} isolated but not recovered");
            oracle += alone as usize;
            exact += got as usize;
        }
        assert!(exact >= oracle);
    }
    assert!(exact * 2 >= seeds as usize * 8, "{exact} of {}", seeds * 8);
}

#[test]
fn rtf_single_bin_is_exact() {
    let p = pool(300);
    for seed in 0..5 {
        let params = rtf_model(Shape::new(1, 8, 8), 16, 10, &p, seed).unwrap();
        let t = (seed as usize * 53) % p.len();
        let batch = p.dataset().batch(&[t]);
        let next = crate::model::apply_step(&params, &crate::model::batch_gradient(&params, &batch).unwrap().1, 0.1).unwrap();
        let obs = infer_gradient(params.values(), next.values(), 0.1, &EncryptionMask::none(params.len())).unwrap();
        let rec = rtf_attack(&obs, &params, &p.mean_image()).unwrap();
        assert_eq!(rec.images.len(), 1, "seed {seed}");
        assert!(mse(&rec.images[0], p.image(t)) <= 1e-8);
    }
}

#[test]
fn rtf_batch_of_eight_with_32_bins() {
    let p = pool(1000);
    let (backend, arch) = (SimulatorBackend::default(), ModelArch::desk_default());
    let e = env(&p, &arch, &backend);
    let mut cfg = AttackConfig::new(AttackKind::Rtf);
    cfg.bins = 32;
    let rate = success_rate(&e, &cfg, &ProtectionConfig::plain(), 100, 3).unwrap();
    // Each sample is alone in its bin with probability about (31/32)^7.
    assert!(rate >= 0.75, "{rate}");
}

#[test]
fn degenerate_bins_recover_nothing() {
    let p = pool(50);
    let params = rtf_model(Shape::new(1, 8, 8), 1, 10, &p, 0).unwrap();
    let batch = p.dataset().batch(&[0, 1, 2, 3]);
    let next = crate::model::apply_step(&params, &crate::model::batch_gradient(&params, &batch).unwrap().1, 0.1).unwrap();
    let obs = infer_gradient(params.values(), next.values(), 0.1, &EncryptionMask::none(params.len())).unwrap();
    let rec = rtf_attack(&obs, &params, &p.mean_image()).unwrap();
    for img in &rec.images {
        assert!((0..4).all(|t| mse(img, p.image(t)) > 1e-4));
    }
    let xs: Vec<&[f64]> = (0..4).map(|i| p.image(i)).collect();
    assert_eq!(rtf_sources(&params, &xs), vec![vec![0, 1, 2, 3]]);
}

#[test]
fn full_encryption_defeats_every_attack() {
    let p = pool(200);
    let (backend, arch) = (SimulatorBackend::default(), ModelArch::desk_default());
    let e = env(&p, &arch, &backend);
    let prot = ProtectionConfig::new(Method::Mp, 0.0, 1.0, InterleaveRatio::ZERO);
    for kind in AttackKind::ALL {
        let mut cfg = AttackConfig::new(kind);
        cfg.iterations = cfg.iterations.min(20);
        assert_eq!(success_rate(&e, &cfg, &prot, 10, 1).unwrap(), 0.0, "{kind}");
    }
}

#[test]
fn pi_rate_is_the_mixture_of_its_halves() {
    let p = pool(300);
    let (backend, arch) = (SimulatorBackend::default(), ModelArch::desk_default());
    let e = env(&p, &arch, &backend);
    let cfg = AttackConfig::new(AttackKind::Rtf);
    let pi = ProtectionConfig::new(Method::Pi, 0.05, 0.3, InterleaveRatio::new(1, 2).unwrap());
    let trials = 20;
    let rate = success_rate(&e, &cfg, &pi, trials, 9).unwrap();
    let settings = trial_settings(&pi, trials);
    assert_eq!(settings.iter().filter(|s| s.eta == 0.0).count(), 10);
    let half = |range: core::ops::Range<usize>, s: TrialSetting| {
        range.map(|k| run_trial(&e, &cfg, s, trial_seed(9, k)).unwrap().success).sum::<f64>() / 10.0
    };
    let a = half(0..10, TrialSetting { sigma: 0.05, eta: 0.0 });
    let b = half(10..20, TrialSetting { sigma: 0.0, eta: 0.3 });
    assert_eq!(rate, (a + b) / 2.0);
}

#[test]
fn dlg_recovers_an_unprotected_target() {
    let p = pool(1000);
    let (backend, arch) = (SimulatorBackend::default(), ModelArch::desk_default());
    let e = env(&p, &arch, &backend);
    let out = run_trial(&e, &AttackConfig::new(AttackKind::Dlg), TrialSetting { sigma: 0.0, eta: 0.0 }, 4).unwrap();
    assert!(out.loss.unwrap() <= 1e-4, "{:?}", out.loss);
    assert_eq!(out.success, 1.0);
}

#[test]
fn inverting_recovers_an_unprotected_target() {
    let p = pool(1000);
    let (backend, arch) = (SimulatorBackend::default(), ModelArch::desk_default());
    let e = env(&p, &arch, &backend);
    let out = run_trial(&e, &AttackConfig::new(AttackKind::Inverting), TrialSetting { sigma: 0.0, eta: 0.0 }, 4).unwrap();
    assert_eq!(out.success, 1.0);
}

#[test]
fn hidden_observation_fails_passive_attacks() {
    let p = pool(100);
    let params = crate::model::init_model(&ModelArch::desk_default(), 0).unwrap();
    let obs = ObservedGradient { values: vec![None; params.len()], round: crate::fl::RoundData::Authentic, sigma: 0.0 };
    for kind in [AttackKind::Dlg, AttackKind::Inverting] {
        let cfg = AttackConfig::new(kind);
        let rec = if kind == AttackKind::Dlg { dlg_attack(&obs, &params, &cfg, 0) } else { inverting_attack(&obs, &params, &cfg, 0) };
        assert!(rec.unwrap().failed);
    }
    let _ = p;
}

#[test]
fn label_inference_reads_the_output_bias() {
    let p = pool(100);
    let params = crate::model::init_model(&ModelArch::desk_default(), 2).unwrap();
    for t in 0..20 {
        let batch = p.dataset().batch(&[t]);
        let g = crate::model::batch_gradient(&params, &batch).unwrap().1;
        let obs = ObservedGradient { values: g.into_iter().map(Some).collect(), round: crate::fl::RoundData::Authentic, sigma: 0.0 };
        assert_eq!(infer_label(&obs, params.network()), Some(p.dataset().label(t)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iip_is_bounded(n in 1usize..6, seed in any::<u64>()) {
        let p = noise_pool(40, 3);
        let mut r = crate::rng::stream(seed, &[2]);
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..p.len())).collect();
        let recs: Vec<Vec<f64>> = (0..n).map(|_| (0..64).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let s = iip_score(&recs, &p, &targets).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let own: Vec<Vec<f64>> = targets.iter().map(|&t| p.image(t).to_vec()).collect();
        prop_assert_eq!(iip_score(&own, &p, &targets).unwrap(), 1.0);
    }

    #[test]
    fn inferred_values_match_the_mask(bits in proptest::collection::vec(any::<bool>(), 1..40), lr in 0.01f64..1.0) {
        let prev: Vec<f64> = (0..bits.len()).map(|i| i as f64 * 0.5).collect();
        let next: Vec<f64> = prev.iter().map(|v| v - lr * 2.0).collect();
        let g = infer_gradient(&prev, &next, lr, &EncryptionMask::from_bits(bits.clone())).unwrap();
        for (v, b) in g.values.iter().zip(&bits) {
            prop_assert_eq!(v.is_none(), *b);
            if let Some(v) = v {
                prop_assert!((v - 2.0).abs() < 1e-9);
            }
        }
    }
}
