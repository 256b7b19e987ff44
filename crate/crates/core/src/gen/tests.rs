use super::*;

fn small_cfg() -> GeneratorConfig {
    GeneratorConfig {
        feature_dim: 2,
        num_classes: 2,
        class_center_scale: 2.0,
        caption_offset_scale: 0.7,
        conditional_std: 0.4,
        guidance_scale: 1.0,
        ddim_steps: 20,
        ..GeneratorConfig::default()
    }
}

fn log_gaussian(z: &[f64], mean: &[f64], var: f64, alpha: f64) -> f64 {
    // Unnormalized: constants cancel in the finite difference.
    -0.5 * z
        .iter()
        .zip(mean)
        .map(|(zk, mk)| (zk - alpha * mk).powi(2))
        .sum::<f64>()
        / var
}

/// `eps = -sigma * grad log p(z)` by central differences.
fn fd_epsilon(log_p: impl Fn(&[f64]) -> f64, z: &[f64], sigma: f64) -> Vec<f64> {
    let h = 1e-5;
    (0..z.len())
        .map(|k| {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[k] += h;
            zm[k] -= h;
            -sigma * (log_p(&zp) - log_p(&zm)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

#[test]
fn zero_scales_give_zero_mean() {
    let cfg = GeneratorConfig {
        class_center_scale: 0.0,
        caption_offset_scale: 0.0,
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    for i in 0..20 {
        let p = g.prompt(i, &format!("caption {i}"));
        let c = g.caption_to_component(&p).unwrap();
        assert!(c.mean.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn component_is_deterministic() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let p = g.prompt(3, "a dog on a skateboard");
    assert_eq!(p, g.prompt(3, "a dog on a skateboard"));
    let a = g.caption_to_component(&p).unwrap();
    let b = g.caption_to_component(&p).unwrap();
    assert_eq!(a, b);
    assert!(a.class_id < 10);
}

#[test]
fn caption_means_center_on_class_center() {
    let cfg = GeneratorConfig {
        feature_dim: 8,
        num_classes: 1,
        class_center_scale: 3.0,
        caption_offset_scale: 1.0,
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    let n = 1000;
    let mut acc = [0.0; 8];
    for i in 0..n {
        let c = g
            .caption_to_component(&g.prompt(i, &format!("caption number {i}")))
            .unwrap();
        assert_eq!(c.class_id, 0);
        for (a, m) in acc.iter_mut().zip(&c.mean) {
            *a += m / n as f64;
        }
    }
    let se = 1.0 / (n as f64).sqrt();
    for (a, c) in acc.iter().zip(g.class_center(0)) {
        assert!((a - c).abs() < 3.0 * se, "{a} vs {c}");
    }
}

#[test]
fn epsilon_cond_vanishes_on_scaled_mean() {
    let g = Generator::new(small_cfg()).unwrap();
    let p = g.prompt(0, "x");
    let mu = g.caption_to_component(&p).unwrap().mean;
    for level in [0, 7, 19] {
        let lvl = g.schedule().level(level).unwrap();
        let z: Vec<f64> = mu.iter().map(|m| lvl.alpha * m).collect();
        let eps = g.epsilon_cond(&z, level, &p).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-12), "{eps:?}");
    }
}

#[test]
fn epsilon_cond_point_mass_limit() {
    let cfg = GeneratorConfig {
        conditional_std: 0.0,
        ..small_cfg()
    };
    let g = Generator::new(cfg).unwrap();
    let p = g.prompt(1, "y");
    let mu = g.caption_to_component(&p).unwrap().mean;
    let z = [0.3, -1.2];
    for level in 0..20 {
        let lvl = g.schedule().level(level).unwrap();
        let eps = g.epsilon_cond(&z, level, &p).unwrap();
        for k in 0..2 {
            let expected = (z[k] - lvl.alpha * mu[k]) / lvl.sigma;
            assert!((eps[k] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}

#[test]
fn epsilon_cond_matches_finite_difference_score() {
    let g = Generator::new(small_cfg()).unwrap();
    let mut rng = rng_from(11, &[]);
    for trial in 0..50u64 {
        let p = g.prompt(trial, &format!("t{trial}"));
        let mu = g.caption_to_component(&p).unwrap().mean;
        let level = (trial as usize * 7) % 20;
        let lvl = g.schedule().level(level).unwrap();
        let z = standard_normal_vec(&mut rng, 2, 1.5);
        let var = lvl.alpha.powi(2) * 0.16 + lvl.sigma.powi(2);
        let oracle = fd_epsilon(|z| log_gaussian(z, &mu, var, lvl.alpha), &z, lvl.sigma);
        let eps = g.epsilon_cond(&z, level, &p).unwrap();
        assert!(rel_err(&eps, &oracle) < 1e-5, "trial {trial}");
    }
}

#[test]
fn epsilon_uncond_single_class_equals_inflated_conditional() {
    let cfg = GeneratorConfig {
        num_classes: 1,
        ..small_cfg()
    };
    let g = Generator::new(cfg).unwrap();
    let center = g.class_center(0).to_vec();
    let var = g.marginal_variance();
    let z = [0.8, -0.1];
    for level in 0..20 {
        let lvl = g.schedule().level(level).unwrap();
        let a = g.epsilon_uncond(&z, level).unwrap();
        let b = gaussian_epsilon(&z, &center, var, lvl);
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() <= 1e-12 * b[k].abs().max(1.0));
        }
    }
}

#[test]
fn symmetric_centers_cancel() {
    let centers = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    let lvl = NoiseLevel {
        alpha: 0.6,
        sigma: 0.8,
    };
    let z = [0.0, 1.7];
    let eps = mixture_epsilon(&z, &centers, 0.5, lvl);
    assert!(eps[0].abs() < 1e-15);
    assert!(eps[1] > 0.0);
}

#[test]
fn epsilon_uncond_matches_finite_difference_score() {
    let g = Generator::new(small_cfg()).unwrap();
    let centers: Vec<Vec<f64>> = (0..2).map(|k| g.class_center(k).to_vec()).collect();
    let mut rng = rng_from(12, &[]);
    for trial in 0..50usize {
        let level = (trial * 3) % 20;
        let lvl = g.schedule().level(level).unwrap();
        let z = standard_normal_vec(&mut rng, 2, 2.0);
        let var = lvl.alpha.powi(2) * g.marginal_variance() + lvl.sigma.powi(2);
        let log_p = |z: &[f64]| {
            let terms: Vec<f64> = centers
                .iter()
                .map(|c| log_gaussian(z, c, var, lvl.alpha))
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        };
        let oracle = fd_epsilon(log_p, &z, lvl.sigma);
        let eps = g.epsilon_uncond(&z, level).unwrap();
        assert!(rel_err(&eps, &oracle) < 1e-5, "trial {trial}");
    }
}

#[test]
fn guidance_endpoints_and_arithmetic() {
    let g = Generator::new(small_cfg()).unwrap();
    let p = g.prompt(4, "guided");
    let z = [0.2, 0.9];
    let cond = g.epsilon_cond(&z, 5, &p).unwrap();
    let uncond = g.epsilon_uncond(&z, 5).unwrap();
    assert_eq!(g.cfg_epsilon(&z, 5, &p, 1.0).unwrap(), cond);
    assert_eq!(g.cfg_epsilon(&z, 5, &p, 0.0).unwrap(), uncond);
    assert_eq!(
        combine_guidance(&[1.0, 0.0], &[0.0, 1.0], 2.0),
        vec![2.0, -1.0]
    );
}

#[test]
fn guidance_is_affine_in_scale() {
    let g = Generator::new(small_cfg()).unwrap();
    let p = g.prompt(9, "affine");
    let mut rng = rng_from(5, &[]);
    for _ in 0..100 {
        let z = standard_normal_vec(&mut rng, 2, 1.0);
        let w1: f64 = rng.random_range(0.0..12.0);
        let w2: f64 = rng.random_range(0.0..12.0);
        let mid = g.cfg_epsilon(&z, 10, &p, 0.5 * (w1 + w2)).unwrap();
        let a = g.cfg_epsilon(&z, 10, &p, w1).unwrap();
        let b = g.cfg_epsilon(&z, 10, &p, w2).unwrap();
        for k in 0..2 {
            let avg = 0.5 * (a[k] + b[k]);
            assert!((mid[k] - avg).abs() <= 1e-12 * avg.abs().max(1.0));
        }
    }
}

#[test]
fn zero_sigma_level_is_rejected() {
    let g = Generator::with_schedule(
        small_cfg(),
        DiffusionSchedule::from_alphas(&[0.5, 1.0]).unwrap(),
    )
    .unwrap();
    let p = g.prompt(0, "clean");
    assert!(g.epsilon_cond(&[0.0, 0.0], 0, &p).is_ok());
    assert!(matches!(
        g.epsilon_cond(&[0.0, 0.0], 1, &p),
        Err(Error::ZeroNoiseLevel { index: 1 })
    ));
    assert!(matches!(
        g.epsilon_uncond(&[0.0, 0.0], 1),
        Err(Error::ZeroNoiseLevel { index: 1 })
    ));
    assert!(matches!(
        g.ddim_sample(&p, 1),
        Err(Error::ZeroNoiseLevel { index: 1 })
    ));
}

#[test]
fn point_mass_sampling_converges_to_mean() {
    let cfg = GeneratorConfig {
        conditional_std: 0.0,
        feature_dim: 16,
        ddim_steps: 200,
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    let p = g.prompt(2, "point");
    let mu = g.caption_to_component(&p).unwrap().mean;
    for seed in 0..20 {
        let s = g.ddim_sample_with_scale(&p, seed, 1.0).unwrap();
        let dist: f64 = s
            .feature
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "{dist}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let p = g.prompt(0, "same");
    assert_eq!(
        g.ddim_sample(&p, 42).unwrap(),
        g.ddim_sample(&p, 42).unwrap()
    );
    assert_ne!(
        g.ddim_sample(&p, 42).unwrap(),
        g.ddim_sample(&p, 43).unwrap()
    );
}

#[test]
fn dataset_shape_and_seeds() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let captions: Vec<PromptSpec> = (0..3).map(|i| g.prompt(i, &format!("c{i}"))).collect();
    let m = generate_dataset(&g, &captions, 1, 7).unwrap();
    assert_eq!(m.records().len(), 3);
    assert_eq!(m.num_captions(), 3);

    let m = generate_dataset(&g, &captions[..2], 10, 7).unwrap();
    assert_eq!(m.records().len(), 20);
    for group in m.groups() {
        assert_eq!(group.sample_indices.len(), 10);
        let mut seeds: Vec<u64> = group
            .sample_indices
            .iter()
            .map(|&i| m.record(i).latent_seed)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }
    assert_eq!(m, generate_dataset(&g, &captions[..2], 10, 7).unwrap());
    assert_ne!(m, generate_dataset(&g, &captions[..2], 10, 8).unwrap());
}

#[test]
fn dataset_rejects_bad_inputs() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let p = g.prompt(0, "a");
    assert!(generate_dataset(&g, &[], 1, 0).is_err());
    assert!(generate_dataset(&g, &[p], 0, 0).is_err());
    assert!(generate_dataset(&g, &[p, p], 1, 0).is_err());
}

#[test]
fn guidance_mix_draws_from_set() {
    let cfg = GeneratorConfig {
        guidance_mix: vec![2.0, 3.0],
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    let captions: Vec<PromptSpec> = (0..20).map(|i| g.prompt(i, &format!("c{i}"))).collect();
    let m = generate_dataset(&g, &captions, 4, 1).unwrap();
    let twos = m
        .records()
        .iter()
        .filter(|r| r.guidance_scale == 2.0)
        .count();
    let threes = m
        .records()
        .iter()
        .filter(|r| r.guidance_scale == 3.0)
        .count();
    assert_eq!(twos + threes, 80);
    assert!(twos > 20 && threes > 20);
}

#[test]
fn manifest_round_trip_is_bit_exact() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let captions: Vec<PromptSpec> = (0..4).map(|i| g.prompt(i, &format!("c{i}"))).collect();
    let m = generate_dataset(&g, &captions, 3, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    m.write(&path).unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().contains("\"config_hash\""));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        GeneratorConfig {
            feature_dim: 1,
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            guidance_scale: f64::NAN,
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            ddim_steps: 0,
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            caption_offset_scale: -1.0,
            ..GeneratorConfig::default()
        },
    ];
    for cfg in bad {
        assert!(Generator::new(cfg).is_err());
    }
}
