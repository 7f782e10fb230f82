//! Per-window checkpoint scores on disk.

use std::path::Path;

use crate::corpus::{ChapterRef, Window};
use crate::error::{Error, Result};
use crate::items::{Instrument, ItemRegistry};
use crate::optim::LessonSplit;

const META: [&str; 13] = [
    "config_digest",
    "seed",
    "epoch",
    "split",
    "lesson_id",
    "teacher_id",
    "year",
    "utterance",
    "sentence",
    "mqi_stage",
    "mqi_chapter",
    "class_stage",
    "class_chapter",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub epoch: u32,
    /// Whether the lesson was held out of training.
    pub test: bool,
    pub lesson_id: String,
    pub teacher_id: String,
    pub year: i32,
    pub utterance: u32,
    /// Final sentence of the window.
    pub sentence: u32,
    pub chapters: [Option<ChapterRef>; 2],
    pub scores: Vec<f64>,
}

impl ScoreRow {
    pub fn chapter(&self, instrument: Instrument) -> Option<ChapterRef> {
        self.chapters[instrument.index()]
    }
}

/// Scores of every window under every checkpoint, in checkpoint-major
/// window order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub items: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(items: &ItemRegistry) -> Self {
        ScoreTable {
            items: items.codes().map(str::to_string).collect(),
            rows: Vec::new(),
        }
    }

    pub fn extend(&mut self, epoch: u32, windows: &[Window], scores: Vec<Vec<f64>>, split: &LessonSplit) {
        for (w, s) in windows.iter().zip(scores) {
            self.rows.push(ScoreRow {
                epoch,
                test: !split.is_train(&w.lesson_id),
                lesson_id: w.lesson_id.clone(),
                teacher_id: w.teacher_id.clone(),
                year: w.year,
                utterance: w.utterance,
                sentence: w.last_sentence(),
                chapters: w.chapters,
                scores: s,
            });
        }
    }

    /// Sorted distinct epochs.
    pub fn epochs(&self) -> Vec<u32> {
        let mut e: Vec<u32> = self.rows.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_scores(path: impl AsRef<Path>, table: &ScoreTable, digest: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = META.to_vec();
    header.extend(table.items.iter().map(String::as_str));
    w.write_record(&header)?;
    let seed = seed.to_string();
    for r in &table.rows {
        let [m, c] = r.chapters;
        let mut rec = vec![
            digest.to_string(),
            seed.clone(),
            r.epoch.to_string(),
            if r.test { "test" } else { "train" }.to_string(),
            r.lesson_id.clone(),
            r.teacher_id.clone(),
            r.year.to_string(),
            r.utterance.to_string(),
            r.sentence.to_string(),
            opt(m.map(|x| x.stage)),
            opt(m.map(|x| x.chapter)),
            opt(c.map(|x| x.stage)),
            opt(c.map(|x| x.chapter)),
        ];
        // Display for f64 is the shortest string that reads back exactly.
        rec.extend(r.scores.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>, items: &ItemRegistry) -> Result<ScoreTable> {
    let path = path.as_ref();
    super::require(path)?;
    let source_name = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let codes: Vec<String> = items.codes().map(str::to_string).collect();
    let expected: Vec<&str> = META.iter().copied().chain(codes.iter().map(String::as_str)).collect();
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            source_name,
            line: 1,
            message: "header does not match the item registry".into(),
        });
    }
    let mut table = ScoreTable {
        items: codes,
        rows: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |what: &str| Error::Parse {
            source_name: source_name.clone(),
            line: i + 2,
            message: format!("bad {what}"),
        };
        fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        let chapter = |s: usize| -> Result<Option<ChapterRef>> {
            match (&rec[s], &rec[s + 1]) {
                ("", "") => Ok(None),
                (a, b) => Ok(Some(ChapterRef {
                    stage: num(a).ok_or_else(|| err("stage"))?,
                    chapter: num(b).ok_or_else(|| err("chapter"))?,
                })),
            }
        };
        let scores = (META.len()..rec.len())
            .map(|c| num::<f64>(&rec[c]).filter(|v| v.is_finite()).ok_or_else(|| err("score")))
            .collect::<Result<Vec<_>>>()?;
        table.rows.push(ScoreRow {
            epoch: num(&rec[2]).ok_or_else(|| err("epoch"))?,
            test: match &rec[3] {
                "test" => true,
                "train" => false,
                _ => return Err(err("split")),
            },
            lesson_id: rec[4].to_string(),
            teacher_id: rec[5].to_string(),
            year: num(&rec[6]).ok_or_else(|| err("year"))?,
            utterance: num(&rec[7]).ok_or_else(|| err("utterance"))?,
            sentence: num(&rec[8]).ok_or_else(|| err("sentence"))?,
            chapters: [chapter(9)?, chapter(11)?],
            scores,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let items = ItemRegistry::builtin();
        let mut t = ScoreTable::new(&items);
        let n = items.len();
        for (k, test) in [(0u32, true), (1, false)] {
            t.rows.push(ScoreRow {
                epoch: k + 1,
                test,
                lesson_id: format!("L{k}"),
                teacher_id: "T".into(),
                year: 2011,
                utterance: 3,
                sentence: 9,
                chapters: [Some(ChapterRef { stage: 1, chapter: 2 }), None],
                scores: (0..n).map(|j| (j as f64 + 0.1) / 7.0 + k as f64 * 1e-17).collect(),
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &t, "abc", 7).unwrap();
        assert_eq!(read_scores(&p, &items).unwrap(), t);
        assert_eq!(t.epochs(), vec![1, 2]);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.csv");
        match read_scores(&p, &ItemRegistry::builtin()) {
            Err(Error::MissingArtifact(q)) => assert_eq!(q, p),
            other => panic!("{other:?}"),
        }
    }
}
