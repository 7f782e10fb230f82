//! Synthetic corpus with planted structure: a latent instruction quality
//! built from nested Gaussian effects drives rater panels, sentence
//! embeddings and value-added measures.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{equipartition_chapters, stage_split, write_ratings, write_transcripts, NestingKey, RatingRecord, Transcript, N_STAGES};
use crate::embeddings::{synth_embed, EmbeddingStore, SentenceId, SynthEmbedConfig};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::items::{Instrument, ItemRegistry};
use crate::metrics::quantile_sorted;
use crate::taucca::{write_vam, VamRecord};

const TAG_LATENT: u64 = 1;
const TAG_ITEMS: u64 = 2;
const TAG_RATINGS: u64 = 3;
const TAG_EMBED: u64 = 4;
const TAG_VAM: u64 = 5;
const TAG_TEXT: u64 = 6;

/// Number of latent coordinates handed to the embedder: one per level.
pub const N_LATENT: usize = 6;

const VOCAB: [&str; 48] = [
    "number", "fraction", "equal", "line", "count", "think", "share", "show", "group", "half", "whole", "part",
    "add", "take", "more", "less", "table", "graph", "point", "model", "pattern", "rule", "check", "answer",
    "why", "how", "look", "here", "next", "same", "different", "explain", "write", "draw", "side", "shape",
    "angle", "area", "total", "divide", "times", "minus", "plus", "step", "try", "again", "right", "idea",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelVariances {
    pub teacher: f64,
    pub lesson: f64,
    pub stage: f64,
    pub chapter: f64,
    pub utterance: f64,
    pub sentence: f64,
}

impl Default for LevelVariances {
    fn default() -> Self {
        LevelVariances {
            teacher: 0.4,
            lesson: 0.3,
            stage: 0.05,
            chapter: 0.15,
            utterance: 0.1,
            sentence: 0.5,
        }
    }
}

impl LevelVariances {
    pub fn as_array(&self) -> [f64; N_LATENT] {
        [self.teacher, self.lesson, self.stage, self.chapter, self.utterance, self.sentence]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub teachers: usize,
    pub lessons_per_year: usize,
    pub years: usize,
    pub first_year: i32,
    /// MQI chapters per stage; the latent hierarchy follows this chapterization.
    pub mqi_chapters_per_stage: u32,
    pub class_chapters_per_stage: u32,
    pub utterances_per_chapter: usize,
    pub sentences_per_utterance: usize,
    pub words_per_sentence: usize,
    pub variances: LevelVariances,
    pub mqi_raters: usize,
    pub class_raters: usize,
    pub raters_per_lesson: usize,
    pub rater_noise: f64,
    pub item_variance: f64,
    /// Items whose loading on the latent is nearly zero.
    pub weak_items: Vec<String>,
    pub weak_loading: f64,
    pub signal_strength: f64,
    pub embed_dim: usize,
    pub vam_measures: usize,
    pub vam_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            teachers: 40,
            lessons_per_year: 4,
            years: 2,
            first_year: 2010,
            mqi_chapters_per_stage: 2,
            class_chapters_per_stage: 1,
            utterances_per_chapter: 5,
            sentences_per_utterance: 3,
            words_per_sentence: 8,
            variances: LevelVariances::default(),
            mqi_raters: 8,
            class_raters: 4,
            raters_per_lesson: 2,
            rater_noise: 0.3,
            item_variance: 0.5,
            weak_items: vec!["USEPROD".into(), "CLPRDT".into()],
            weak_loading: 0.05,
            signal_strength: 1.0,
            embed_dim: 64,
            vam_measures: 3,
            vam_noise: 0.5,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, items: &ItemRegistry) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("simdata: {m}")));
        let counts = [
            ("teachers", self.teachers),
            ("lessons_per_year", self.lessons_per_year),
            ("years", self.years),
            ("mqi_chapters_per_stage", self.mqi_chapters_per_stage as usize),
            ("class_chapters_per_stage", self.class_chapters_per_stage as usize),
            ("utterances_per_chapter", self.utterances_per_chapter),
            ("sentences_per_utterance", self.sentences_per_utterance),
            ("words_per_sentence", self.words_per_sentence),
            ("mqi_raters", self.mqi_raters),
            ("class_raters", self.class_raters),
            ("raters_per_lesson", self.raters_per_lesson),
            ("vam_measures", self.vam_measures),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.raters_per_lesson > self.mqi_raters.min(self.class_raters) {
            return bad("raters_per_lesson exceeds a rater pool".into());
        }
        if self.mqi_chapters_per_stage % self.class_chapters_per_stage != 0 {
            return bad("MQI chapters per stage must be a multiple of CLASS chapters per stage".into());
        }
        let scalars = [
            ("rater_noise", self.rater_noise),
            ("item_variance", self.item_variance),
            ("signal_strength", self.signal_strength),
            ("vam_noise", self.vam_noise),
            ("weak_loading", self.weak_loading),
        ];
        for (name, v) in scalars.into_iter().chain(
            ["teacher", "lesson", "stage", "chapter", "utterance", "sentence"]
                .into_iter()
                .zip(self.variances.as_array()),
        ) {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(w) = self.weak_items.iter().find(|c| items.index_of(c).is_none()) {
            return bad(format!("unknown weak item {w}"));
        }
        SynthEmbedConfig::new(self.embed_dim, 0)?;
        Ok(())
    }

    pub fn lessons_per_teacher(&self) -> usize {
        self.lessons_per_year * self.years
    }

    /// Children per parent at each level below the root, teacher first.
    fn fanout(&self) -> [usize; N_LATENT] {
        [
            self.teachers,
            self.lessons_per_teacher(),
            N_STAGES as usize,
            self.mqi_chapters_per_stage as usize,
            self.utterances_per_chapter,
            self.sentences_per_utterance,
        ]
    }
}

pub fn teacher_id(t: usize) -> String {
    format!("t{t:03}")
}

pub fn lesson_id(t: usize, l: usize) -> String {
    format!("t{t:03}-l{l:02}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTruth {
    /// Planted variance of each level, teacher to sentence.
    pub variances: [f64; N_LATENT],
    /// Latent quality of every sentence with its (MQI) nesting key.
    pub sentence_latent: Vec<(NestingKey, f64)>,
    pub teacher_effects: BTreeMap<String, f64>,
    /// Mean latent per `(lesson, instrument, chapter)`.
    pub chapter_latent: BTreeMap<(String, Instrument, u32), f64>,
    pub loadings: Vec<f64>,
    pub item_effects: Vec<f64>,
    /// Noise-free normalized label per rated `(lesson, chapter, item)` cell.
    pub true_labels: BTreeMap<(String, u32, usize), f64>,
    pub vam_slopes: Vec<f64>,
    pub vam_offsets: Vec<f64>,
}

pub struct SimOutput {
    pub transcripts: Vec<Transcript>,
    pub ratings: Vec<RatingRecord>,
    pub vam: Vec<VamRecord>,
    pub store: EmbeddingStore,
    pub truth: SimTruth,
}

/// Centers a level and rescales it to population variance `var`.
fn standardize(x: &mut [f64], var: f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let s = if ss > 0.0 { (var * n / ss).sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - m) * s);
}

/// Centers every block of `group` siblings and rescales so the pooled
/// within-parent sample variance is `target`.
fn center_within(x: &mut [f64], group: usize, target: f64) {
    let df = (x.len() - x.len() / group) as f64;
    if df == 0.0 {
        // A single child per parent cannot vary apart from its parent.
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for b in x.chunks_mut(group) {
        let m = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= m);
    }
    let ss = x.iter().map(|v| v * v).sum::<f64>();
    let s = if ss > 0.0 { (target * df / ss).sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v *= s);
}

/// Level effects, each flattened in teacher-major order.
fn latent_effects(cfg: &SimConfig) -> [Vec<f64>; N_LATENT] {
    let fan = cfg.fanout();
    // Units per teacher at each level.
    let mut per_teacher = [1usize; N_LATENT];
    for h in 1..N_LATENT {
        per_teacher[h] = per_teacher[h - 1] * fan[h];
    }
    let blocks: Vec<[Vec<f64>; N_LATENT]> = (0..cfg.teachers)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_LATENT, t as u64]));
            std::array::from_fn(|h| (0..per_teacher[h]).map(|_| StandardNormal.sample(&mut rng)).collect())
        })
        .collect();
    let vars = cfg.variances.as_array();
    // Effects are centered within their parent, so a unit's mean carries none
    // of the noise from the levels below it. Level h therefore absorbs the
    // expected variance of those means, Σ_{k>h} σ²_k / (units of k per unit
    // of h), which makes every balanced ANOVA mean square equal its
    // expectation exactly.
    std::array::from_fn(|h| {
        let mut level: Vec<f64> = blocks.iter().flat_map(|b| b[h].iter().copied()).collect();
        let mut target = vars[h];
        let mut below = 1usize;
        for k in h + 1..N_LATENT {
            below *= fan[k];
            target += vars[k] / below as f64;
        }
        let group = if h == 0 { level.len() } else { fan[h] };
        if vars[h] == 0.0 && target == 0.0 {
            level.iter_mut().for_each(|v| *v = 0.0);
        } else {
            center_within(&mut level, group, target);
        }
        level
    })
}

fn sentence_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut s: Vec<&str> = (0..words).map(|_| *VOCAB.choose(rng).unwrap()).collect();
    let first = s[0].to_string();
    let cap = first[..1].to_uppercase() + &first[1..];
    s[0] = &cap;
    let mut text = s.join(" ");
    text.push('.');
    text
}

pub fn simulate(cfg: &SimConfig, items: &ItemRegistry) -> Result<SimOutput> {
    cfg.validate(items)?;
    let fan = cfg.fanout();
    let effects = latent_effects(cfg);
    let n_lt = cfg.lessons_per_teacher();
    let k_mqi = N_STAGES * cfg.mqi_chapters_per_stage;
    let k_class = N_STAGES * cfg.class_chapters_per_stage;
    let sent_per_lesson = k_mqi as usize * cfg.utterances_per_chapter * cfg.sentences_per_utterance;
    let sent_per_chapter = cfg.utterances_per_chapter * cfg.sentences_per_utterance;

    let mut embed_cfg = SynthEmbedConfig::new(cfg.embed_dim, derive_seed(cfg.seed, &[TAG_EMBED]))?;
    if cfg.signal_strength > 0.0 {
        embed_cfg = embed_cfg.with_signal(N_LATENT);
    }

    // Transcripts, latent and embeddings, one lesson at a time.
    struct Lesson {
        transcript: Transcript,
        keys: Vec<(NestingKey, f64)>,
        vectors: Vec<(SentenceId, Vec<f64>)>,
    }
    let lessons: Vec<Lesson> = (0..cfg.teachers * n_lt)
        .into_par_iter()
        .map(|g| -> Result<Lesson> {
            let (t, l) = (g / n_lt, g % n_lt);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_TEXT, g as u64]));
            let mut tr = Transcript {
                lesson_id: lesson_id(t, l),
                teacher_id: teacher_id(t),
                year: cfg.first_year + (l / cfg.lessons_per_year) as i32,
                utterances: Vec::new(),
            };
            let mut keys = Vec::with_capacity(sent_per_lesson);
            let mut vectors = Vec::with_capacity(sent_per_lesson);
            let mut idx = [t, g, 0, 0, 0, 0];
            for s in 0..N_STAGES as usize {
                idx[2] = g * fan[2] + s;
                for c in 0..fan[3] {
                    idx[3] = idx[2] * fan[3] + c;
                    for u in 0..fan[4] {
                        idx[4] = idx[3] * fan[4] + u;
                        let texts: Vec<String> = (0..fan[5]).map(|_| sentence_text(&mut rng, cfg.words_per_sentence)).collect();
                        let utterance = tr.utterances.len() as u32;
                        for (x, text) in texts.iter().enumerate() {
                            idx[5] = idx[4] * fan[5] + x;
                            let z: [f64; N_LATENT] = std::array::from_fn(|h| effects[h][idx[h]]);
                            let q: f64 = z.iter().sum();
                            let sentence = tr.n_sentences() as u32 + x as u32;
                            keys.push((
                                NestingKey {
                                    teacher: tr.teacher_id.clone(),
                                    lesson: tr.lesson_id.clone(),
                                    stage: s as u8,
                                    chapter: (s * fan[3] + c + 1) as u32,
                                    utterance,
                                    sentence,
                                },
                                q,
                            ));
                            let signal = z.map(|v| v * cfg.signal_strength);
                            let latent = (cfg.signal_strength > 0.0).then_some(&signal[..]);
                            vectors.push((SentenceId::of(&tr.lesson_id, sentence), synth_embed(text, latent, &embed_cfg)?));
                        }
                        tr.push_utterance("T".into(), &texts.join(" "));
                    }
                }
            }
            Ok(Lesson {
                transcript: tr,
                keys,
                vectors,
            })
        })
        .collect::<Result<_>>()?;

    // Chapter latent per instrument, taken from the same equipartition the
    // pipeline applies to the written transcripts.
    let mut chapter_latent = BTreeMap::new();
    for les in &lessons {
        for (inst, k) in [(Instrument::Mqi, k_mqi), (Instrument::Class, k_class)] {
            let seg = equipartition_chapters(&les.transcript, &stage_split(k, N_STAGES))?;
            let mut acc = vec![(0.0, 0usize); k as usize];
            for (i, (_, q)) in les.keys.iter().enumerate() {
                let c = seg.sentence_chapter[i] as usize - 1;
                acc[c].0 += q;
                acc[c].1 += 1;
            }
            for (c, (s, n)) in acc.into_iter().enumerate() {
                chapter_latent.insert((les.transcript.lesson_id.clone(), inst, c as u32 + 1), s / n as f64);
            }
        }
    }
    debug_assert!(lessons
        .iter()
        .all(|l| l.keys.len() == sent_per_lesson && l.keys.chunks(sent_per_chapter).count() == k_mqi as usize));

    // Items: loadings and intercept shifts.
    let mut irng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_ITEMS]));
    let loadings: Vec<f64> = items
        .items()
        .iter()
        .map(|it| {
            let l = irng.random_range(0.6..1.4);
            if cfg.weak_items.contains(&it.code) {
                cfg.weak_loading
            } else {
                l
            }
        })
        .collect();
    let mut item_effects: Vec<f64> = (0..items.len()).map(|_| StandardNormal.sample(&mut irng)).collect();
    standardize(&mut item_effects, cfg.item_variance);

    // Equal-probability thresholds of each instrument's noise-free marginal.
    let z_true = |lesson: &str, inst: Instrument, c: u32, j: usize| {
        loadings[j] * chapter_latent[&(lesson.to_string(), inst, c)] + item_effects[j]
    };
    let mut thresholds: BTreeMap<Instrument, Vec<f64>> = BTreeMap::new();
    for inst in Instrument::ALL {
        let idx = items.indices(inst);
        let Some(&j0) = idx.first() else { continue };
        let k = if inst == Instrument::Mqi { k_mqi } else { k_class };
        let mut pool: Vec<f64> = lessons
            .iter()
            .flat_map(|l| {
                let id = &l.transcript.lesson_id;
                let idx = &idx;
                (1..=k).flat_map(move |c| idx.iter().map(move |&j| z_true(id, inst, c, j)))
            })
            .collect();
        pool.sort_by(f64::total_cmp);
        let cats = (items.item(j0).scale_max - items.item(j0).scale_min + 1) as usize;
        thresholds.insert(inst, (1..cats).map(|q| quantile_sorted(&pool, q as f64 / cats as f64)).collect());
    }
    let discretize = |j: usize, z: f64| -> i32 {
        let spec = items.item(j);
        let c = thresholds[&spec.instrument].iter().filter(|&&t| z > t).count() as i32;
        if spec.reverse_coded {
            spec.scale_max - c
        } else {
            spec.scale_min + c
        }
    };

    // Rater panels.
    let pools: BTreeMap<Instrument, Vec<String>> = [
        (Instrument::Mqi, (0..cfg.mqi_raters).map(|r| format!("mqi-r{r:02}")).collect()),
        (Instrument::Class, (0..cfg.class_raters).map(|r| format!("class-r{r:02}")).collect()),
    ]
    .into();
    let mut true_labels = BTreeMap::new();
    let per_lesson: Vec<Vec<RatingRecord>> = lessons
        .par_iter()
        .enumerate()
        .map(|(g, les)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_RATINGS, g as u64]));
            let id = &les.transcript.lesson_id;
            let mut out = Vec::new();
            for inst in Instrument::ALL {
                let idx = items.indices(inst);
                if idx.is_empty() {
                    continue;
                }
                let k = if inst == Instrument::Mqi { k_mqi } else { k_class };
                let mut panel: Vec<&String> = pools[&inst].iter().collect();
                panel.shuffle(&mut rng);
                panel.truncate(cfg.raters_per_lesson);
                panel.sort();
                for c in 1..=k {
                    for &j in &idx {
                        let z = z_true(id, inst, c, j);
                        for rater in &panel {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            out.push(RatingRecord {
                                lesson_id: id.clone(),
                                chapter: c,
                                item: items.item(j).code.clone(),
                                rater: (*rater).clone(),
                                score: discretize(j, z + cfg.rater_noise * e),
                            });
                        }
                    }
                }
            }
            out
        })
        .collect();
    for les in &lessons {
        let id = &les.transcript.lesson_id;
        for inst in Instrument::ALL {
            let k = if inst == Instrument::Mqi { k_mqi } else { k_class };
            for c in 1..=k {
                for j in items.indices(inst) {
                    let label = items.item(j).normalize(discretize(j, z_true(id, inst, c, j)) as f64)?;
                    true_labels.insert((id.clone(), c, j), label);
                }
            }
        }
    }
    let ratings: Vec<RatingRecord> = per_lesson.into_iter().flatten().collect();

    // Value-added: slopes spread around one, offsets chosen so the measures'
    // order changes across the teacher distribution.
    let m = cfg.vam_measures;
    let vam_slopes: Vec<f64> = (0..m)
        .map(|i| if m == 1 { 1.0 } else { 0.6 + 0.8 * i as f64 / (m - 1) as f64 })
        .collect();
    let vam_offsets: Vec<f64> = (0..m)
        .map(|i| {
            if m == 1 {
                0.0
            } else {
                let u = 2.0 * i as f64 / (m - 1) as f64 - 1.0;
                -0.2 * u * u
            }
        })
        .collect();
    let sd_t = cfg.variances.teacher.sqrt();
    let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_VAM]));
    let mut vam = Vec::new();
    let mut teacher_effects = BTreeMap::new();
    for t in 0..cfg.teachers {
        let te = effects[0][t];
        teacher_effects.insert(teacher_id(t), te);
        for y in 0..cfg.years {
            let measures = (0..m)
                .map(|i| {
                    let e: f64 = StandardNormal.sample(&mut vrng);
                    vam_slopes[i] * te + vam_offsets[i] * sd_t + cfg.vam_noise * e
                })
                .collect();
            vam.push(VamRecord {
                teacher: teacher_id(t),
                year: cfg.first_year + y as i32,
                measures,
                weight: 1.0,
            });
        }
    }

    let provenance = if cfg.signal_strength > 0.0 {
        format!("synthetic-signal-{}", cfg.signal_strength)
    } else {
        "synthetic".to_string()
    };
    let mut store = EmbeddingStore::new(cfg.embed_dim, provenance)?;
    let mut transcripts = Vec::with_capacity(lessons.len());
    let mut sentence_latent = Vec::with_capacity(lessons.len() * sent_per_lesson);
    for les in lessons {
        for (id, v) in les.vectors {
            store.insert(id, v)?;
        }
        sentence_latent.extend(les.keys);
        transcripts.push(les.transcript);
    }

    Ok(SimOutput {
        transcripts,
        ratings,
        vam,
        store,
        truth: SimTruth {
            variances: cfg.variances.as_array(),
            sentence_latent,
            teacher_effects,
            chapter_latent,
            loadings,
            item_effects,
            true_labels,
            vam_slopes,
            vam_offsets,
        },
    })
}

/// File names written by [`write_sim`].
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const RATINGS_FILE: &str = "ratings.csv";
pub const VAM_FILE: &str = "vam.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.embs";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Serialize)]
struct TruthFile<'a> {
    variances: &'a [f64; N_LATENT],
    teacher_effects: &'a BTreeMap<String, f64>,
    loadings: &'a [f64],
    item_effects: &'a [f64],
    vam_slopes: &'a [f64],
    vam_offsets: &'a [f64],
}

/// Writes the corpus, ratings, VAM table, embedding store and a summary of
/// the planted truth into `dir`.
pub fn write_sim(dir: impl AsRef<Path>, out: &SimOutput) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_transcripts(dir.join(CORPUS_FILE), &out.transcripts)?;
    write_ratings(dir.join(RATINGS_FILE), &out.ratings)?;
    write_vam(dir.join(VAM_FILE), &out.vam)?;
    out.store.save(dir.join(EMBEDDINGS_FILE))?;
    let t = &out.truth;
    serde_json::to_writer_pretty(
        File::create(dir.join(TRUTH_FILE))?,
        &TruthFile {
            variances: &t.variances,
            teacher_effects: &t.teacher_effects,
            loadings: &t.loadings,
            item_effects: &t.item_effects,
            vam_slopes: &t.vam_slopes,
            vam_offsets: &t.vam_offsets,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests;
