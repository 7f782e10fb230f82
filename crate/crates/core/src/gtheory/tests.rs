use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn key(t: usize, l: usize, s: usize, c: usize, u: usize, x: usize) -> NestingKey {
    NestingKey {
        teacher: format!("T{t}"),
        lesson: format!("L{l}"),
        stage: s as u8,
        chapter: c as u32,
        utterance: u as u32,
        sentence: x as u32,
    }
}

/// Draws `n` normals, then centers and rescales them to population
/// variance `var` exactly.
fn exact(rng: &mut ChaCha8Rng, n: usize, var: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(rng)).collect();
    let m = z.iter().sum::<f64>() / n as f64;
    let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    z.iter().map(|x| (x - m) / v.sqrt() * var.sqrt()).collect()
}

#[test]
fn proportion_examples() {
    let eq = VarianceComponents { sigma2: [2.5; 7] };
    for p in variance_proportions(&eq).unwrap() {
        assert!((p - 1.0 / 7.0).abs() < 1e-15);
    }
    let vc = VarianceComponents {
        sigma2: [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0],
    };
    let p = variance_proportions(&vc).unwrap();
    assert_eq!(p[Level::Teacher.index()], 0.25);
    assert_eq!(p[Level::Residual.index()], 0.5);
    let scaled = VarianceComponents {
        sigma2: vc.sigma2.map(|v| 3.0 * v),
    };
    assert_eq!(variance_proportions(&scaled).unwrap(), p);
    assert!(variance_proportions(&VarianceComponents::default()).is_err());
}

#[test]
fn recovers_teacher_and_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (nt, no) = (200, 50);
    let t = exact(&mut rng, nt, 1.0);
    let mut obs = Vec::new();
    let mut idx = 0;
    for (i, te) in t.iter().enumerate() {
        let e = exact(&mut rng, no, 1.0);
        for ej in e {
            obs.push((key(i, idx, 0, 0, 0, 0), te + ej));
            idx += 1;
        }
    }
    let r = fit_nested_components(&obs, &EmConfig::default()).unwrap();
    let vt = r.components.get(Level::Teacher);
    let ve = r.components.get(Level::Residual);
    assert!((vt - 1.0).abs() < 0.1, "teacher {vt}");
    assert!((ve - 1.0).abs() < 0.1, "residual {ve}");
    assert_eq!(r.components.get(Level::Lesson), 0.0);
    assert!(r.merges.contains(&Merge {
        level: Level::Lesson,
        into: Some(Level::Residual)
    }));
    assert!(r.merges.contains(&Merge {
        level: Level::Utterance,
        into: Some(Level::Residual)
    }));
    let total: f64 = r.proportions.unwrap().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn identical_scores_are_degenerate() {
    let obs: Vec<_> = (0..20).map(|i| (key(i % 4, i % 8, 0, 0, i, i), 0.7)).collect();
    let r = fit_nested_components(&obs, &EmConfig::default()).unwrap();
    assert!(r.degenerate);
    assert!(r.proportions.is_none());
    assert_eq!(r.components.total(), 0.0);
}

#[test]
fn single_lesson_per_teacher_merges_teacher_and_lesson() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut obs = Vec::new();
    for t in 0..30 {
        let te = noise.sample(&mut rng);
        for c in 0..3 {
            for u in 0..4 {
                for x in 0..2 {
                    obs.push((key(t, t, c, c, u, x), te + noise.sample(&mut rng)));
                }
            }
        }
    }
    let r = fit_nested_components(&obs, &EmConfig::default()).unwrap();
    assert!(r.merges.contains(&Merge {
        level: Level::Lesson,
        into: Some(Level::Teacher)
    }));
    assert_eq!(r.components.get(Level::Lesson), 0.0);
    assert!(r.components.get(Level::Teacher) > 0.3);
    // Stage and chapter coincide here as well.
    assert!(r.merges.contains(&Merge {
        level: Level::Chapter,
        into: Some(Level::Stage)
    }));
}

fn balanced(seed: u64, sizes: [usize; 4], vars: [f64; 4], resid: f64) -> Vec<(NestingKey, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nt, nl, nc, nu] = sizes;
    let n = |v: f64| Normal::new(0.0, v.sqrt()).unwrap();
    let mut obs = Vec::new();
    for t in 0..nt {
        let a = n(vars[0]).sample(&mut rng);
        for l in 0..nl {
            let b = n(vars[1]).sample(&mut rng);
            for c in 0..nc {
                let g = n(vars[2]).sample(&mut rng);
                for u in 0..nu {
                    let d = n(vars[3]).sample(&mut rng);
                    for x in 0..3 {
                        let e = n(resid).sample(&mut rng);
                        let lesson = t * nl + l;
                        obs.push((key(t, lesson, c / 2, c, u, x), a + b + g + d + e));
                    }
                }
            }
        }
    }
    obs
}

#[test]
fn reml_matches_anova_on_balanced_designs() {
    let obs = balanced(7, [20, 3, 4, 3], [0.6, 0.4, 0.2, 0.3], 1.0);
    let cfg = EmConfig {
        method: Method::Reml,
        ..Default::default()
    };
    let r = fit_nested_components(&obs, &cfg).unwrap();
    let paths: Vec<[u64; 5]> = obs.iter().map(|(k, _)| path(k)).collect();
    let y: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
    let (mom, mom_e) = method_of_moments(&NestedDesign::from_paths(&paths).unwrap(), &y).unwrap();
    assert!(mom.iter().all(|&v| v > 0.0), "{mom:?}");
    for (h, level) in Level::FITTED.iter().enumerate() {
        let em = r.components.get(*level);
        assert!((em / mom[h] - 1.0).abs() < 0.01, "{level}: EM {em} vs ANOVA {}", mom[h]);
    }
    assert!((r.components.get(Level::Residual) / mom_e - 1.0).abs() < 0.01);
}

/// Dense Gaussian log-likelihood of the nested model, for checking the
/// tree recursion.
fn dense_ml_loglik(obs: &[(NestingKey, f64)], s: &[f64; 5], se: f64) -> f64 {
    let n = obs.len();
    let paths: Vec<[u64; 5]> = obs.iter().map(|(k, _)| path(k)).collect();
    let mut v = DMatrix::<f64>::identity(n, n) * se;
    for i in 0..n {
        for j in 0..n {
            for h in 0..5 {
                if paths[i][..=h] == paths[j][..=h] {
                    v[(i, j)] += s[h];
                }
            }
        }
    }
    let y = DVector::from_iterator(n, obs.iter().map(|(_, v)| *v));
    let ones = DVector::from_element(n, 1.0);
    let chol = v.cholesky().unwrap();
    let vi1 = chol.solve(&ones);
    let viy = chol.solve(&y);
    let mu = ones.dot(&viy) / ones.dot(&vi1);
    let r = &y - &ones * mu;
    let quad = r.dot(&chol.solve(&r));
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

#[test]
fn tree_likelihood_matches_dense_computation() {
    let obs = balanced(3, [8, 2, 4, 2], [0.5, 0.3, 0.2, 0.4], 0.8);
    // Drop a few observations so the design is unbalanced.
    let obs: Vec<_> = obs.into_iter().enumerate().filter(|(i, _)| i % 7 != 3).map(|(_, o)| o).collect();
    let r = fit_nested_components(&obs, &EmConfig::default()).unwrap();
    let c = &r.components.sigma2;
    let s = [c[0], c[1], c[2], c[3], c[4]];
    let dense = dense_ml_loglik(&obs, &s, c[6]);
    let paths: Vec<[u64; 5]> = obs.iter().map(|(k, _)| path(k)).collect();
    let y: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
    let fit = fit_nested(&NestedDesign::from_paths(&paths).unwrap(), &y, &EmConfig::default()).unwrap();
    assert!((fit.log_likelihood - dense).abs() < 1e-6 * dense.abs(), "{} vs {dense}", fit.log_likelihood);
    // The EM fixed point is a local maximum of the dense likelihood.
    let interior: Vec<usize> = (0..5).filter(|&h| s[h] > 0.05).collect();
    assert!(interior.len() >= 3, "{s:?}");
    for h in interior {
        for f in [0.9, 1.1] {
            let mut t = s;
            t[h] *= f;
            let moved = dense_ml_loglik(&obs, &t, c[6]);
            assert!(moved <= dense + 1e-6, "level {h} x{f}: {moved} > {dense}; {s:?} iters {}", fit.iterations);
        }
    }
}

#[test]
fn shift_and_scale_behave() {
    let obs = balanced(11, [10, 3, 4, 2], [0.5, 0.5, 0.25, 0.2], 1.0);
    let base = fit_nested_components(&obs, &EmConfig::default()).unwrap();
    let moved: Vec<_> = obs.iter().map(|(k, v)| (k.clone(), 3.0 * v + 5.0)).collect();
    let r = fit_nested_components(&moved, &EmConfig::default()).unwrap();
    for l in Level::ALL {
        let (a, b) = (base.components.get(l), r.components.get(l));
        assert!((b - 9.0 * a).abs() <= 1e-6 * (9.0 * a).max(1e-3), "{l}: {a} {b}");
        let (p, q) = (base.proportion(l).unwrap(), r.proportion(l).unwrap());
        assert!((p - q).abs() < 1e-6);
    }
}

#[test]
fn oracle_scorers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut lesson_mean = Vec::new();
    let mut pure_noise = Vec::new();
    for t in 0..20 {
        let te = noise.sample(&mut rng);
        for l in 0..4 {
            let le = te + noise.sample(&mut rng);
            for c in 0..6 {
                for u in 0..5 {
                    for x in 0..3 {
                        let k = key(t, t * 4 + l, c / 2, c, u, x);
                        lesson_mean.push((k.clone(), le));
                        pure_noise.push((k, noise.sample(&mut rng)));
                    }
                }
            }
        }
    }
    let r = fit_nested_components(&lesson_mean, &EmConfig::default()).unwrap();
    let p = r.proportions.unwrap();
    assert!(p[Level::Teacher.index()] + p[Level::Lesson.index()] >= 0.95, "{p:?}");
    let r = fit_nested_components(&pure_noise, &EmConfig::default()).unwrap();
    assert!(r.proportion(Level::Residual).unwrap() >= 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn proportions_are_a_distribution(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let obs: Vec<_> = balanced(seed, [5, 2, 2, 2], [0.3, 0.0, 0.2, 0.1], 1.0)
            .into_iter()
            .map(|(k, v)| (k, v * scale))
            .collect();
        let r = fit_nested_components(&obs, &EmConfig::default()).unwrap();
        let p = r.proportions.unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(r.components.sigma2.iter().all(|&v| v >= 0.0));
    }
}
