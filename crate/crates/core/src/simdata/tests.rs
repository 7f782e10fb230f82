use super::*;
use crate::corpus::{build_labeled_windows, read_transcripts, WindowConfig};
use crate::embeddings::payload_checksum;
use crate::gtheory::{fit_nested_components, EmConfig, Level};
use crate::metrics::{rater_matrix, rater_vs_rest_benchmark, spearman, BenchmarkConfig};
use crate::taucca::kendall_tau;

fn small() -> SimConfig {
    SimConfig {
        teachers: 6,
        lessons_per_year: 2,
        years: 2,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_corpus() {
    let items = ItemRegistry::builtin();
    let a = simulate(&small(), &items).unwrap();
    let b = simulate(&small(), &items).unwrap();
    assert_eq!(a.transcripts, b.transcripts);
    assert_eq!(a.ratings, b.ratings);
    assert_eq!(a.vam, b.vam);
    assert_eq!(payload_checksum(&a.store), payload_checksum(&b.store));
    let c = simulate(&SimConfig { seed: 8, ..small() }, &items).unwrap();
    assert_ne!(a.ratings, c.ratings);
}

#[test]
fn noiseless_raters_agree_perfectly() {
    let items = ItemRegistry::builtin();
    let cfg = SimConfig {
        rater_noise: 0.0,
        item_variance: 0.0,
        ..small()
    };
    let out = simulate(&cfg, &items).unwrap();
    let m = rater_matrix(&out.ratings, &items).unwrap();
    let mqi: Vec<&str> = m.sources().iter().filter(|s| s.starts_with("mqi")).map(|s| s.as_str()).collect();
    let mut sub = RatingMatrix::new(mqi.iter().copied()).unwrap();
    for (k, v) in m.rows() {
        for (i, s) in mqi.iter().enumerate() {
            if let Some(x) = v[m.source_index(s).unwrap()] {
                sub.set(k.clone(), i, x).unwrap();
            }
        }
    }
    let r = rater_vs_rest_benchmark(&sub, &BenchmarkConfig::default()).unwrap();
    assert!(r.excluded.is_empty());
    for v in &r.raters {
        assert!((v.rho - 1.0).abs() < 1e-12, "{} {}", v.rater, v.rho);
    }
}

use crate::metrics::RatingMatrix;

#[test]
fn latent_recovers_planted_proportions() {
    let items = ItemRegistry::builtin();
    let cfg = SimConfig {
        teachers: 50,
        lessons_per_year: 4,
        years: 1,
        ..Default::default()
    };
    let out = simulate(&cfg, &items).unwrap();
    let reml = EmConfig {
        method: crate::gtheory::Method::Reml,
        ..Default::default()
    };
    let r = fit_nested_components(&out.truth.sentence_latent, &reml).unwrap();
    let v = cfg.variances;
    let total: f64 = v.as_array().iter().sum();
    let planted = [
        (Level::Teacher, v.teacher),
        (Level::Lesson, v.lesson),
        (Level::Stage, v.stage),
        (Level::Chapter, v.chapter),
        (Level::Utterance, v.utterance),
        (Level::Residual, v.sentence),
    ];
    for (level, var) in planted {
        let p = r.proportion(level).unwrap();
        assert!((p - var / total).abs() < 0.05, "{level}: {p} vs {}; {:?}", var / total, r.components);
    }
}

#[test]
fn anova_recovers_planted_components_exactly() {
    let items = ItemRegistry::builtin();
    let cfg = small();
    let out = simulate(&cfg, &items).unwrap();
    let paths: Vec<[u64; 5]> = out
        .truth
        .sentence_latent
        .iter()
        .map(|(k, _)| {
            let h = |s: &str| crate::hash::fnv1a64(s.as_bytes());
            [h(&k.teacher), h(&k.lesson), k.stage as u64, k.chapter as u64, k.utterance as u64]
        })
        .collect();
    let y: Vec<f64> = out.truth.sentence_latent.iter().map(|(_, v)| *v).collect();
    let design = crate::gtheory::NestedDesign::from_paths(&paths).unwrap();
    let (comp, resid) = crate::gtheory::method_of_moments(&design, &y).unwrap();
    let v = cfg.variances.as_array();
    for h in 0..5 {
        assert!((comp[h] - v[h]).abs() < 1e-9, "level {h}: {} vs {}", comp[h], v[h]);
    }
    assert!((resid - v[5]).abs() < 1e-9);
}

#[test]
fn labels_are_monotone_in_latent() {
    let items = ItemRegistry::builtin();
    let out = simulate(&SimConfig::default(), &items).unwrap();
    let mqi = items.indices(Instrument::Mqi);
    let (mut q, mut lab) = (Vec::new(), Vec::new());
    for ((lesson, inst, c), v) in &out.truth.chapter_latent {
        if *inst != Instrument::Mqi {
            continue;
        }
        q.push(*v);
        let mean = mqi.iter().map(|&j| out.truth.true_labels[&(lesson.clone(), *c, j)]).sum::<f64>() / mqi.len() as f64;
        lab.push(mean);
    }
    let rho = spearman(&q, &lab).unwrap();
    assert!(rho >= 0.99, "{rho}");
}

#[test]
fn noiseless_vam_orders_teachers() {
    let items = ItemRegistry::builtin();
    let out = simulate(
        &SimConfig {
            vam_noise: 0.0,
            ..small()
        },
        &items,
    )
    .unwrap();
    let rows: Vec<&VamRecord> = out.vam.iter().filter(|r| r.year == 2010).collect();
    let te: Vec<f64> = rows.iter().map(|r| out.truth.teacher_effects[&r.teacher]).collect();
    for m in 0..3 {
        let v: Vec<f64> = rows.iter().map(|r| r.measures[m]).collect();
        assert_eq!(kendall_tau(&te, &v).unwrap(), 1.0);
    }
}

#[test]
fn written_corpus_feeds_the_pipeline() {
    let items = ItemRegistry::builtin();
    let out = simulate(&small(), &items).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sim(dir.path(), &out).unwrap();
    let back = read_transcripts(dir.path().join(CORPUS_FILE)).unwrap();
    assert_eq!(back, out.transcripts);
    let store = EmbeddingStore::load(dir.path().join(EMBEDDINGS_FILE)).unwrap();
    assert_eq!(store.len(), out.store.len());
    let windows = build_labeled_windows(
        &back,
        &out.ratings,
        &items,
        &Instrument::ALL,
        &WindowConfig::default(),
    )
    .unwrap();
    // 6 MQI chapters × 5 utterances per lesson.
    assert_eq!(windows.len(), back.len() * 30);
    for w in &windows {
        store.window(w).unwrap();
        assert!(w.labels.iter().all(Option::is_some));
        // Window keys agree with the planted hierarchy.
        let k = w.key(Instrument::Mqi).unwrap();
        let (pk, _) = out
            .truth
            .sentence_latent
            .iter()
            .find(|(pk, _)| pk.lesson == k.lesson && pk.sentence == k.sentence)
            .unwrap();
        assert_eq!(pk, &k);
    }
}

