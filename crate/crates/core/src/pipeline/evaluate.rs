//! The three analysis stages over scored checkpoints.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::scores::{read_scores, ScoreTable};
use super::{require, Pipeline, UnitLevel};
use crate::corpus::{read_ratings, NestingKey};
use crate::error::{Error, Result};
use crate::gtheory::{fit_nested_components, Level};
use crate::hash::{derive_seed, derive_seed_str};
use crate::items::{Instrument, ItemRegistry};
use crate::metrics::{
    partial_spearman_point, partial_spearman_values, rater_matrix, rater_vs_rest_benchmark, RatingMatrix, RowKey,
};
use crate::taucca::{
    item_weighted_tau, kcca_from_bases, null_band, permutation_null_from_bases, read_vam, stack_vam, tau_gram,
    KernelBasis, ScoredUnit,
};

pub const HUMAN: &str = "human";
const PANEL: &str = "panel";

fn checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch}")
}

/// Errors that make one statistic unavailable without failing the stage.
fn soft<T>(r: Result<T>, what: &str) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::Undefined(_) | Error::Invalid(_))) => {
            log::warn!("{what}: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require(path)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

fn selected_items(p: &Pipeline) -> Vec<usize> {
    let inst = p.config().instrument.instruments();
    (0..p.items().len())
        .filter(|&j| inst.contains(&p.items().item(j).instrument))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanRow {
    pub config_digest: String,
    pub seed: u64,
    /// `epoch_{k}`, or `human` for the rater-vs-rest band.
    pub checkpoint: String,
    pub epoch: Option<u32>,
    pub level: String,
    /// Item code, `ALL`, or `ALL-MQI` / `ALL-CLASS`.
    pub item: String,
    /// For `human` rows: band mean, Q1 and Q3.
    pub rho: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// Shared rows, or raters in the band for `human` rows.
    pub n: usize,
    pub n_items: usize,
    pub null_lo: Option<f64>,
    pub null_hi: Option<f64>,
}

pub fn read_spearman_csv(path: impl AsRef<Path>) -> Result<Vec<SpearmanRow>> {
    read_rows(path.as_ref())
}

/// Keeps rows passing `keep`, with every source.
fn restrict(m: &RatingMatrix, keep: impl Fn(&RowKey) -> bool) -> Result<RatingMatrix> {
    let mut out = RatingMatrix::new(m.sources().iter().cloned())?;
    for (k, v) in m.rows().filter(|(k, _)| keep(k)) {
        for (s, x) in v.iter().enumerate() {
            if let Some(x) = x {
                out.set(k.clone(), s, *x)?;
            }
        }
    }
    Ok(out)
}

/// Partial Spearman of `a` against `b` under random relabelings of lessons
/// in `a`. Chapters and items stay aligned, so each replicate keeps the
/// item structure and breaks only the lesson pairing.
pub fn lesson_permutation_null(
    m: &RatingMatrix,
    a: usize,
    b: usize,
    n_perm: usize,
    seed: u64,
    reml_polish: bool,
) -> Vec<f64> {
    let lookup: HashMap<&RowKey, f64> = m.rows().filter_map(|(k, v)| v[a].map(|x| (k, x))).collect();
    let rows: Vec<(&RowKey, f64)> = m
        .rows()
        .filter_map(|(k, v)| v[b].filter(|_| v[a].is_some()).map(|y| (k, y)))
        .collect();
    let lessons: Vec<&str> = rows
        .iter()
        .map(|(k, _)| k.lesson.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    (0..n_perm)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let mut perm = lessons.clone();
            perm.shuffle(&mut rng);
            let map: HashMap<&str, &str> = lessons.iter().copied().zip(perm).collect();
            let (mut xa, mut xb, mut xi) = (Vec::new(), Vec::new(), Vec::new());
            for (k, y) in &rows {
                let moved = RowKey {
                    lesson: map[k.lesson.as_str()].to_string(),
                    chapter: k.chapter,
                    item: k.item,
                };
                if let Some(x) = lookup.get(&moved) {
                    xa.push(*x);
                    xb.push(*y);
                    xi.push(k.item);
                }
            }
            partial_spearman_point(&xa, &xb, &xi, reml_polish).ok()
        })
        .collect()
}

/// Model-vs-panel partial Spearman per checkpoint on held-out lessons, at
/// chapter and lesson level, plus the human rater-vs-rest band.
pub fn eval_spearman(p: &Pipeline) -> Result<Vec<SpearmanRow>> {
    let cfg = &p.config().spearman;
    let items = p.items();
    let table = read_scores(p.window_scores_path(), items)?;
    let ratings_path = p.ratings_path();
    require(&ratings_path)?;
    let selected = selected_items(p);
    let keep: BTreeSet<usize> = selected.iter().copied().collect();
    let ratings: Vec<_> = read_ratings(&ratings_path)?
        .into_iter()
        .filter(|r| items.index_of(&r.item).is_some_and(|j| keep.contains(&j)))
        .collect();
    let raters = rater_matrix(&ratings, items)?;

    let mut test: BTreeSet<&str> = table.rows.iter().filter(|r| r.test).map(|r| r.lesson_id.as_str()).collect();
    if test.is_empty() {
        log::warn!("no held-out lessons; evaluating on all lessons");
        test = table.rows.iter().map(|r| r.lesson_id.as_str()).collect();
    }
    let epochs = table.epochs();
    let mut m = RatingMatrix::new([PANEL])?;
    for (k, v) in raters.rows().filter(|(k, _)| test.contains(k.lesson.as_str())) {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        if !xs.is_empty() {
            m.set(k.clone(), 0, xs.iter().sum::<f64>() / xs.len() as f64)?;
        }
    }
    for &e in &epochs {
        let src = m.add_source(checkpoint_name(e))?;
        for (k, v) in chapter_means(&table, e, items, &selected, |l| test.contains(l)) {
            m.set(k, src, v)?;
        }
    }

    let mut scopes: Vec<(String, Vec<usize>)> = vec![("ALL".into(), selected.clone())];
    let insts = p.config().instrument.instruments();
    if insts.len() > 1 {
        for inst in insts {
            let js: Vec<usize> = selected.iter().copied().filter(|&j| items.item(j).instrument == inst).collect();
            scopes.push((format!("ALL-{}", inst.as_str().to_uppercase()), js));
        }
    }
    scopes.extend(selected.iter().map(|&j| (items.item(j).code.clone(), vec![j])));

    let (digest, seed) = (p.digest().to_string(), p.config().seed);
    let mut rows = Vec::new();
    let levels = [("chapter", m.clone(), raters.clone()), ("lesson", m.aggregate_lesson(), raters.aggregate_lesson())];
    for (li, (level, lm, rm)) in levels.iter().enumerate() {
        if let Some(b) = soft(rater_vs_rest_benchmark(rm, &cfg.benchmark), "rater band")? {
            rows.push(SpearmanRow {
                config_digest: digest.clone(),
                seed,
                checkpoint: HUMAN.into(),
                epoch: None,
                level: level.to_string(),
                item: "ALL".into(),
                rho: Some(b.band.mean),
                ci_lo: Some(b.band.q1),
                ci_hi: Some(b.band.q3),
                n: b.raters.len(),
                n_items: selected.len(),
                null_lo: None,
                null_hi: None,
            });
        }
        for &e in &epochs {
            let src = lm.source_index(&checkpoint_name(e))?;
            for (si, (scope, js)) in scopes.iter().enumerate() {
                let sub = restrict(lm, |k| js.contains(&k.item))?;
                let (a, b, it) = sub.shared(src, 0);
                let what = format!("{} {level} {scope}", checkpoint_name(e));
                let r = soft(partial_spearman_values(&a, &b, &it, &cfg.partial), &what)?;
                let null = if si < scopes.len() - selected.len() && cfg.null_permutations > 0 {
                    let s = derive_seed(derive_seed_str(seed, "spearman-null"), &[e as u64, li as u64, si as u64]);
                    let null = lesson_permutation_null(&sub, src, 0, cfg.null_permutations, s, cfg.partial.reml_polish);
                    (!null.is_empty()).then(|| null_band(&null, cfg.null_level))
                } else {
                    None
                };
                rows.push(SpearmanRow {
                    config_digest: digest.clone(),
                    seed,
                    checkpoint: checkpoint_name(e),
                    epoch: Some(e),
                    level: level.to_string(),
                    item: scope.clone(),
                    rho: r.map(|r| r.rho),
                    ci_lo: r.map(|r| r.ci_lo),
                    ci_hi: r.map(|r| r.ci_hi),
                    n: a.len(),
                    n_items: r.map_or(0, |r| r.n_items),
                    null_lo: null.map(|b| b.0),
                    null_hi: null.map(|b| b.1),
                });
            }
        }
    }
    write_rows(&p.spearman_csv(), &rows)?;
    log::info!("wrote {} spearman rows", rows.len());
    Ok(rows)
}

/// Mean window score per `(lesson, chapter, item)` under each item's own
/// chapterization.
fn chapter_means(
    table: &ScoreTable,
    epoch: u32,
    items: &ItemRegistry,
    selected: &[usize],
    keep_lesson: impl Fn(&str) -> bool,
) -> Vec<(RowKey, f64)> {
    let mut acc: BTreeMap<RowKey, (f64, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.epoch == epoch && keep_lesson(&r.lesson_id)) {
        for &j in selected {
            let Some(c) = r.chapter(items.item(j).instrument) else {
                continue;
            };
            let slot = acc
                .entry(RowKey {
                    lesson: r.lesson_id.clone(),
                    chapter: Some(c.chapter),
                    item: j,
                })
                .or_insert((0.0, 0));
            slot.0 += r.scores[j];
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtheoryRow {
    pub config_digest: String,
    pub seed: u64,
    pub checkpoint: String,
    pub epoch: u32,
    /// Item code, or `MEAN` for the average over items.
    pub item: String,
    /// `T`, `L`, `S`, `C`, `U`, `X` or `e`.
    pub level: String,
    pub sigma2: f64,
    pub rho: Option<f64>,
    pub n_units: usize,
    /// Level this one is reported on when confounded; `mean` when absorbed
    /// by the intercept.
    pub merged_into: String,
    pub degenerate: bool,
    pub converged: bool,
}

pub fn read_gtheory_csv(path: impl AsRef<Path>) -> Result<Vec<GtheoryRow>> {
    read_rows(path.as_ref())
}

/// Nested variance decomposition of prefix-window scores, per checkpoint
/// and item.
pub fn eval_gtheory(p: &Pipeline) -> Result<Vec<GtheoryRow>> {
    let items = p.items();
    let table = read_scores(p.prefix_scores_path(), items)?;
    let selected = selected_items(p);
    let em = &p.config().gtheory.em;
    let (digest, seed) = (p.digest().to_string(), p.config().seed);
    let mut rows = Vec::new();
    for e in table.epochs() {
        let fits: Vec<(usize, _)> = selected
            .par_iter()
            .map(|&j| {
                let inst = items.item(j).instrument;
                let obs: Vec<(NestingKey, f64)> = table
                    .rows
                    .iter()
                    .filter(|r| r.epoch == e)
                    .filter_map(|r| {
                        r.chapter(inst).map(|c| {
                            let key = NestingKey {
                                teacher: r.teacher_id.clone(),
                                lesson: r.lesson_id.clone(),
                                stage: c.stage,
                                chapter: c.chapter,
                                utterance: r.utterance,
                                sentence: r.sentence,
                            };
                            (key, r.scores[j])
                        })
                    })
                    .collect();
                Ok((j, fit_nested_components(&obs, em)?))
            })
            .collect::<Result<_>>()?;
        let row = |item: String, level: Level| GtheoryRow {
            config_digest: digest.clone(),
            seed,
            checkpoint: checkpoint_name(e),
            epoch: e,
            item,
            level: level.symbol().into(),
            sigma2: 0.0,
            rho: None,
            n_units: 0,
            merged_into: String::new(),
            degenerate: false,
            converged: true,
        };
        for (j, fit) in &fits {
            for level in Level::ALL {
                let merged_into = fit
                    .merges
                    .iter()
                    .find(|m| m.level == level)
                    .map(|m| m.into.map_or("mean".to_string(), |l| l.symbol().to_string()))
                    .unwrap_or_default();
                rows.push(GtheoryRow {
                    sigma2: fit.components.get(level),
                    rho: fit.proportion(level),
                    n_units: fit.n_units[level.index()],
                    merged_into,
                    degenerate: fit.degenerate,
                    converged: fit.converged,
                    ..row(items.item(*j).code.clone(), level)
                });
            }
        }
        let with_props: Vec<_> = fits.iter().filter(|(_, f)| f.proportions.is_some()).collect();
        for level in Level::ALL {
            let sigma2 = fits.iter().map(|(_, f)| f.components.get(level)).sum::<f64>() / fits.len() as f64;
            let rho = (!with_props.is_empty()).then(|| {
                with_props.iter().map(|(_, f)| f.proportion(level).unwrap()).sum::<f64>() / with_props.len() as f64
            });
            rows.push(GtheoryRow {
                sigma2,
                rho,
                degenerate: with_props.is_empty(),
                converged: fits.iter().all(|(_, f)| f.converged),
                ..row("MEAN".into(), level)
            });
        }
    }
    write_rows(&p.gtheory_csv(), &rows)?;
    log::info!("wrote {} gtheory rows", rows.len());
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauccaRow {
    pub config_digest: String,
    pub seed: u64,
    pub checkpoint: String,
    pub epoch: u32,
    /// `cca` for canonical correlations, `item` for weighted τ per item.
    pub kind: String,
    /// Unit level for `cca`; `teacher_year` for `item` rows.
    pub level: String,
    pub item: String,
    /// 1-based canonical component for `cca` rows.
    pub component: Option<usize>,
    pub value: Option<f64>,
    pub rank: Option<usize>,
    pub kappa_x: Option<f64>,
    pub kappa_y: Option<f64>,
    pub n_units: usize,
    /// Permutation band of the first correlation, on component 1.
    pub null_lo: Option<f64>,
    pub null_hi: Option<f64>,
}

pub fn read_taucca_csv(path: impl AsRef<Path>) -> Result<Vec<TauccaRow>> {
    read_rows(path.as_ref())
}

struct Units {
    units: Vec<ScoredUnit>,
    profiles: Vec<Vec<f64>>,
}

/// Chapter units under the first selected instrument and lesson units whose
/// profiles are the mean of their chapter profiles.
fn unit_profiles(table: &ScoreTable, epoch: u32, instrument: Instrument, selected: &[usize]) -> (Units, Units) {
    let mut acc: BTreeMap<(&str, u32), (&str, i32, Vec<f64>, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.epoch == epoch) {
        let Some(c) = r.chapter(instrument) else {
            continue;
        };
        let slot = acc
            .entry((r.lesson_id.as_str(), c.chapter))
            .or_insert_with(|| (r.teacher_id.as_str(), r.year, vec![0.0; selected.len()], 0));
        for (s, &j) in slot.2.iter_mut().zip(selected) {
            *s += r.scores[j];
        }
        slot.3 += 1;
    }
    let mut chapters = Units {
        units: Vec::new(),
        profiles: Vec::new(),
    };
    let mut lessons: BTreeMap<&str, (&str, i32, Vec<f64>, usize)> = BTreeMap::new();
    for ((lesson, c), (teacher, year, sums, n)) in acc {
        let prof: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        let slot = lessons
            .entry(lesson)
            .or_insert_with(|| (teacher, year, vec![0.0; prof.len()], 0));
        for (a, v) in slot.2.iter_mut().zip(&prof) {
            *a += v;
        }
        slot.3 += 1;
        chapters.units.push(ScoredUnit {
            unit: format!("{lesson}#{c}"),
            teacher: teacher.to_string(),
            year,
        });
        chapters.profiles.push(prof);
    }
    let mut les = Units {
        units: Vec::new(),
        profiles: Vec::new(),
    };
    for (lesson, (teacher, year, sums, n)) in lessons {
        les.units.push(ScoredUnit {
            unit: lesson.to_string(),
            teacher: teacher.to_string(),
            year,
        });
        les.profiles.push(sums.iter().map(|s| s / n as f64).collect());
    }
    (chapters, les)
}

/// Kendall-τ kernel CCA of score profiles against VAM per checkpoint and
/// unit level, plus per-item weighted τ at the teacher-year level.
pub fn eval_taucca(p: &Pipeline) -> Result<Vec<TauccaRow>> {
    let items = p.items();
    let cfg = &p.config().taucca;
    let mut table = read_scores(p.window_scores_path(), items)?;
    if cfg.held_out_only {
        table.rows.retain(|r| r.test);
    }
    let vam = read_vam(p.vam_path())?;
    let selected = selected_items(p);
    let primary = p.config().instrument.instruments()[0];
    let (digest, seed) = (p.digest().to_string(), p.config().seed);
    let mut rows = Vec::new();
    // The VAM side depends only on the units, so its basis is reused.
    let mut y_cache: BTreeMap<UnitLevel, (Vec<String>, KernelBasis)> = BTreeMap::new();
    for e in table.epochs() {
        let (chapters, lessons) = unit_profiles(&table, e, primary, &selected);
        let base = TauccaRow {
            config_digest: digest.clone(),
            seed,
            checkpoint: checkpoint_name(e),
            epoch: e,
            kind: "cca".into(),
            level: String::new(),
            item: String::new(),
            component: None,
            value: None,
            rank: None,
            kappa_x: None,
            kappa_y: None,
            n_units: 0,
            null_lo: None,
            null_hi: None,
        };
        for &level in &cfg.levels {
            let u = match level {
                UnitLevel::Lesson => &lessons,
                UnitLevel::Chapter => &chapters,
            };
            let stacked = stack_vam(&vam, &u.units)?;
            let ids: Vec<String> = stacked.kept.iter().map(|&i| u.units[i].unit.clone()).collect();
            let prof: Vec<Vec<f64>> = stacked.kept.iter().map(|&i| u.profiles[i].clone()).collect();
            let requested = cfg.kcca.rank_for(ids.len());
            let kx = tau_gram(ids.clone(), &prof, cfg.variant)?;
            let bx = KernelBasis::new(&kx, requested)?;
            let by = match y_cache.get(&level) {
                Some((cached, b)) if *cached == ids => b.clone(),
                _ => {
                    let ky = tau_gram(ids.clone(), &stacked.unit_vam, cfg.variant)?;
                    let b = KernelBasis::new(&ky, requested)?;
                    y_cache.insert(level, (ids.clone(), b.clone()));
                    b
                }
            };
            let what = format!("{} {} kcca", checkpoint_name(e), level.as_str());
            let Some(res) = soft(kcca_from_bases(&bx, &by, requested, &cfg.kcca), &what)? else {
                continue;
            };
            if let Some(note) = &res.note {
                log::info!("{what}: {note}");
            }
            let null = if cfg.null_permutations > 0 {
                let s = derive_seed(derive_seed_str(seed, "taucca-null"), &[e as u64, level as u64]);
                let null = permutation_null_from_bases(&bx, &by, requested, &cfg.kcca, cfg.null_permutations, s)?;
                Some(null_band(&null, cfg.null_level))
            } else {
                None
            };
            for (c, v) in res.correlations.iter().enumerate() {
                rows.push(TauccaRow {
                    level: level.as_str().into(),
                    component: Some(c + 1),
                    value: Some(*v),
                    rank: Some(res.rank),
                    kappa_x: Some(res.kappa_x),
                    kappa_y: Some(res.kappa_y),
                    n_units: ids.len(),
                    null_lo: null.filter(|_| c == 0).map(|b| b.0),
                    null_hi: null.filter(|_| c == 0).map(|b| b.1),
                    ..base.clone()
                });
            }
        }
        let stacked = stack_vam(&vam, &lessons.units)?;
        if let Some(taus) = soft(item_weighted_tau(&stacked, &lessons.profiles), "item weighted tau")? {
            for (&j, t) in selected.iter().zip(taus) {
                rows.push(TauccaRow {
                    kind: "item".into(),
                    level: "teacher_year".into(),
                    item: items.item(j).code.clone(),
                    value: t,
                    n_units: stacked.teacher_years.len(),
                    ..base.clone()
                });
            }
        }
    }
    write_rows(&p.taucca_csv(), &rows)?;
    log::info!("wrote {} taucca rows", rows.len());
    Ok(rows)
}
