use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Window;
use crate::error::{Error, Result};
use crate::items::{Instrument, ItemRegistry};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub lesson_id: String,
    /// 1-based chapter index under the item's instrument.
    pub chapter: u32,
    pub item: String,
    pub rater: String,
    pub score: i32,
}

impl RatingRecord {
    fn describe(&self) -> String {
        format!(
            "rating (lesson {}, chapter {}, item {}, rater {}, score {})",
            self.lesson_id, self.chapter, self.item, self.rater, self.score
        )
    }
}

pub fn read_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_ratings(path: impl AsRef<Path>, ratings: &[RatingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in ratings {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `(lesson, chapter, item index)` key of one rated cell.
pub type CellKey = (String, u32, usize);

/// Validates ratings and returns one normalized label per rated cell, the
/// mean over raters of each rater's normalized (and reverse-coded) score.
pub fn normalized_cell_labels(
    ratings: &[RatingRecord],
    items: &ItemRegistry,
) -> Result<BTreeMap<CellKey, f64>> {
    let mut seen = HashSet::new();
    let mut sums: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
    for r in ratings {
        let idx = items
            .index_of(&r.item)
            .ok_or_else(|| Error::invalid(format!("{}: unregistered item", r.describe())))?;
        if r.chapter == 0 {
            return Err(Error::invalid(format!(
                "{}: chapters are numbered from 1",
                r.describe()
            )));
        }
        let label = items
            .item(idx)
            .normalize(r.score as f64)
            .map_err(|_| Error::invalid(format!("{}: score outside item scale", r.describe())))?;
        if !seen.insert((&r.lesson_id, r.chapter, idx, &r.rater)) {
            return Err(Error::invalid(format!("{}: duplicate rating", r.describe())));
        }
        let e = sums.entry((r.lesson_id.clone(), r.chapter, idx)).or_default();
        e.0 += label;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect())
}

/// Number of rated chapters per lesson and instrument (the highest chapter
/// index that carries any rating).
pub fn chapter_counts(
    ratings: &[RatingRecord],
    items: &ItemRegistry,
) -> Result<BTreeMap<(String, Instrument), u32>> {
    let mut out: BTreeMap<(String, Instrument), u32> = BTreeMap::new();
    for r in ratings {
        let idx = items
            .index_of(&r.item)
            .ok_or_else(|| Error::invalid(format!("{}: unregistered item", r.describe())))?;
        let inst = items.item(idx).instrument;
        let e = out.entry((r.lesson_id.clone(), inst)).or_default();
        *e = (*e).max(r.chapter);
    }
    Ok(out)
}

/// Fills each window's label vector from the ratings of the chapter holding
/// its final sentence, per instrument. Unrated items stay masked.
pub fn join_and_normalize_labels(
    windows: &mut [Window],
    ratings: &[RatingRecord],
    items: &ItemRegistry,
) -> Result<()> {
    let cells = normalized_cell_labels(ratings, items)?;
    for w in windows.iter_mut() {
        w.labels = vec![None; items.len()];
        for (idx, spec) in items.items().iter().enumerate() {
            if let Some(ch) = w.chapter(spec.instrument) {
                w.labels[idx] = cells.get(&(w.lesson_id.clone(), ch.chapter, idx)).copied();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ChapterRef;

    fn rating(lesson: &str, chapter: u32, item: &str, rater: &str, score: i32) -> RatingRecord {
        RatingRecord {
            lesson_id: lesson.into(),
            chapter,
            item: item.into(),
            rater: rater.into(),
            score,
        }
    }

    fn window(mqi: u32, class: u32) -> Window {
        Window {
            lesson_id: "L1".into(),
            teacher_id: "T1".into(),
            year: 2011,
            sentences: vec![0],
            utterance: 0,
            chapters: [
                Some(ChapterRef { stage: 0, chapter: mqi }),
                Some(ChapterRef { stage: 0, chapter: class }),
            ],
            labels: vec![],
        }
    }

    #[test]
    fn averages_raters_after_normalization() {
        let items = ItemRegistry::builtin();
        let ratings = vec![
            rating("L1", 1, "EXPL", "r1", 3),
            rating("L1", 1, "EXPL", "r2", 2),
            rating("L1", 1, "LANGIMP", "r1", 1),
            rating("L1", 1, "CLPC", "c1", 4),
        ];
        let mut w = vec![window(1, 1), window(2, 1)];
        join_and_normalize_labels(&mut w, &ratings, &items).unwrap();
        let expl = items.index_of("EXPL").unwrap();
        let langimp = items.index_of("LANGIMP").unwrap();
        let clpc = items.index_of("CLPC").unwrap();
        assert_eq!(w[0].labels[expl], Some(0.75));
        assert_eq!(w[0].labels[langimp], Some(1.0));
        assert_eq!(w[0].labels[clpc], Some(0.5));
        // Second window sits in an unrated MQI chapter but the same CLASS one.
        assert_eq!(w[1].labels[expl], None);
        assert_eq!(w[1].labels[clpc], Some(0.5));
        assert_eq!(w[0].labels.iter().filter(|l| l.is_some()).count(), 3);
    }

    #[test]
    fn out_of_scale_score_names_record() {
        let items = ItemRegistry::builtin();
        let err = normalized_cell_labels(&[rating("L9", 2, "EXPL", "r7", 4)], &items).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("L9") && msg.contains("r7") && msg.contains("EXPL"), "{msg}");
    }

    #[test]
    fn rejects_duplicates_and_unknown_items() {
        let items = ItemRegistry::builtin();
        let dup = vec![rating("L1", 1, "EXPL", "r1", 3), rating("L1", 1, "EXPL", "r1", 2)];
        assert!(normalized_cell_labels(&dup, &items).is_err());
        assert!(normalized_cell_labels(&[rating("L1", 1, "NOPE", "r1", 1)], &items).is_err());
    }

    #[test]
    fn chapter_counts_per_instrument() {
        let items = ItemRegistry::builtin();
        let ratings = vec![
            rating("L1", 6, "EXPL", "r1", 3),
            rating("L1", 2, "EXPL", "r1", 3),
            rating("L1", 3, "CLPC", "c1", 3),
        ];
        let c = chapter_counts(&ratings, &items).unwrap();
        assert_eq!(c[&("L1".to_string(), Instrument::Mqi)], 6);
        assert_eq!(c[&("L1".to_string(), Instrument::Class)], 3);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let ratings = vec![rating("L1", 1, "EXPL", "r1", 3)];
        write_ratings(&p, &ratings).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("lesson_id,chapter,item,rater,score"));
        assert_eq!(read_ratings(&p).unwrap(), ratings);
    }
}
