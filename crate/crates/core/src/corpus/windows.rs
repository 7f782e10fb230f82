use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segment::{ChapterRef, Segmentation};
use super::Transcript;
use crate::embeddings::SentenceId;
use crate::error::{Error, Result};
use crate::items::{Instrument, N_ITEMS};

/// Position of one sentence in the teacher ⊃ lesson ⊃ stage ⊃ chapter ⊃
/// utterance ⊃ sentence hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NestingKey {
    pub teacher: String,
    pub lesson: String,
    pub stage: u8,
    pub chapter: u32,
    pub utterance: u32,
    pub sentence: u32,
}

/// Where window boundaries fall in prefix mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixUnit {
    /// One window per utterance, ending at its last sentence.
    Utterance,
    /// One window per sentence.
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
    pub prefix_mode: bool,
    pub prefix_unit: PrefixUnit,
    pub teacher_only: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_len: 16,
            stride: 1,
            prefix_mode: true,
            prefix_unit: PrefixUnit::Utterance,
            teacher_only: true,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::invalid("window_len and stride must be at least 1"));
        }
        Ok(())
    }
}

/// Chapterizations of one lesson, one per instrument that rated it.
#[derive(Clone, Debug, Default)]
pub struct LessonSegmentation {
    pub mqi: Option<Segmentation>,
    pub class: Option<Segmentation>,
}

impl LessonSegmentation {
    pub fn get(&self, instrument: Instrument) -> Option<&Segmentation> {
        match instrument {
            Instrument::Mqi => self.mqi.as_ref(),
            Instrument::Class => self.class.as_ref(),
        }
    }

    /// The finer chapterization, used to cut windows. MQI chapters are half
    /// the duration of CLASS chapters, so MQI wins when both exist.
    pub fn primary(&self) -> Option<(Instrument, &Segmentation)> {
        self.mqi
            .as_ref()
            .map(|s| (Instrument::Mqi, s))
            .or(self.class.as_ref().map(|s| (Instrument::Class, s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lesson_id: String,
    pub teacher_id: String,
    pub year: i32,
    /// Sentence ordinals, ascending, all within one lesson.
    pub sentences: Vec<u32>,
    /// Utterance of the final sentence.
    pub utterance: u32,
    /// Chapter of the final sentence under each instrument, indexed by
    /// [`Instrument::index`].
    pub chapters: [Option<ChapterRef>; 2],
    /// Normalized labels; `None` marks an item without ratings.
    pub labels: Vec<Option<f64>>,
}

impl Window {
    pub fn last_sentence(&self) -> u32 {
        *self.sentences.last().expect("windows are non-empty")
    }

    pub fn chapter(&self, instrument: Instrument) -> Option<ChapterRef> {
        self.chapters[instrument.index()]
    }

    pub fn key(&self, instrument: Instrument) -> Option<NestingKey> {
        self.chapter(instrument).map(|c| NestingKey {
            teacher: self.teacher_id.clone(),
            lesson: self.lesson_id.clone(),
            stage: c.stage,
            chapter: c.chapter,
            utterance: self.utterance,
            sentence: self.last_sentence(),
        })
    }

    pub fn sentence_ids(&self) -> impl Iterator<Item = SentenceId> + '_ {
        self.sentences
            .iter()
            .map(|&s| SentenceId::of(&self.lesson_id, s))
    }

    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }
}

/// Cuts a lesson into windows along its primary chapterization.
///
/// Windows never cross a chapter boundary. In prefix mode each window ends at
/// an utterance (or sentence) boundary and holds at most the last
/// `window_len` eligible sentences of the chapter up to that point; otherwise
/// windows of `window_len` sentences are stepped by `stride`. Every window
/// records its final sentence's chapter under each available instrument.
pub fn build_windows(
    t: &Transcript,
    segs: &LessonSegmentation,
    cfg: &WindowConfig,
) -> Result<Vec<Window>> {
    cfg.validate()?;
    let Some((_, primary)) = segs.primary() else {
        return Ok(Vec::new());
    };
    let table = t.sentence_table();
    if primary.sentence_chapter.len() != table.len() {
        return Err(Error::invalid(format!(
            "lesson {}: segmentation covers {} sentences, transcript has {}",
            t.lesson_id,
            primary.sentence_chapter.len(),
            table.len()
        )));
    }

    let mut out = Vec::new();
    for chapter in 1..=primary.n_chapters() {
        let eligible: Vec<u32> = (0..table.len() as u32)
            .filter(|&s| primary.sentence_chapter[s as usize] == chapter)
            .filter(|&s| !cfg.teacher_only || table[s as usize].1 == super::SpeakerRole::Teacher)
            .collect();
        if eligible.is_empty() {
            log::warn!(
                "lesson {} chapter {chapter}: no eligible sentences, no windows emitted",
                t.lesson_id
            );
            continue;
        }
        for span in window_spans(&eligible, &table, cfg) {
            let sentences = eligible[span].to_vec();
            let last = *sentences.last().unwrap();
            let mut chapters = [None, None];
            for inst in Instrument::ALL {
                if let Some(seg) = segs.get(inst) {
                    chapters[inst.index()] = Some(seg.chapter_of(last));
                }
            }
            out.push(Window {
                lesson_id: t.lesson_id.clone(),
                teacher_id: t.teacher_id.clone(),
                year: t.year,
                utterance: table[last as usize].0,
                sentences,
                chapters,
                labels: vec![None; N_ITEMS],
            });
        }
    }
    Ok(out)
}

fn window_spans(
    eligible: &[u32],
    table: &[(u32, super::SpeakerRole, u32)],
    cfg: &WindowConfig,
) -> Vec<std::ops::Range<usize>> {
    let n = eligible.len();
    let len = cfg.window_len;
    if cfg.prefix_mode {
        (0..n)
            .filter(|&i| match cfg.prefix_unit {
                PrefixUnit::Sentence => true,
                PrefixUnit::Utterance => {
                    i + 1 == n
                        || table[eligible[i + 1] as usize].0 != table[eligible[i] as usize].0
                }
            })
            .map(|end| (end + 1).saturating_sub(len)..end + 1)
            .collect()
    } else if n < len {
        vec![0..n]
    } else {
        (0..=n - len)
            .step_by(cfg.stride)
            .map(|start| start..start + len)
            .collect()
    }
}

pub fn write_windows(path: impl AsRef<Path>, windows: &[Window]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for win in windows {
        serde_json::to_writer(&mut w, win)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_windows(path: impl AsRef<Path>) -> Result<Vec<Window>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment::equipartition_chapters;
    use crate::corpus::transcript::{Sentence, SpeakerRole, Utterance};

    /// Builds a lesson from utterance sizes (in sentences), one word each
    /// sentence, with the given speaker roles.
    fn lesson(utts: &[(usize, SpeakerRole)]) -> Transcript {
        let mut next = 0u32;
        let utterances = utts
            .iter()
            .enumerate()
            .map(|(u, &(n, role))| Utterance {
                index: u as u32,
                speaker: format!("{role:?}"),
                role,
                sentences: (0..n)
                    .map(|_| {
                        next += 1;
                        Sentence {
                            index: next - 1,
                            text: "Word.".into(),
                            word_count: 1,
                        }
                    })
                    .collect(),
            })
            .collect();
        Transcript {
            lesson_id: "L1".into(),
            teacher_id: "T1".into(),
            year: 2011,
            utterances,
        }
    }

    fn single_chapter(t: &Transcript) -> LessonSegmentation {
        LessonSegmentation {
            mqi: Some(equipartition_chapters(t, &[1]).unwrap()),
            class: None,
        }
    }

    #[test]
    fn prefix_mode_one_window_per_utterance() {
        let t = lesson(&[(3, SpeakerRole::Teacher), (2, SpeakerRole::Teacher)]);
        let cfg = WindowConfig {
            window_len: 8,
            ..Default::default()
        };
        let w = build_windows(&t, &single_chapter(&t), &cfg).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].last_sentence(), 2);
        assert_eq!(w[1].last_sentence(), 4);
        assert_eq!(w[1].sentences, vec![0, 1, 2, 3, 4]);
        assert_eq!(w[1].utterance, 1);
    }

    #[test]
    fn prefix_mode_clips_to_window_len() {
        let t = lesson(&[(3, SpeakerRole::Teacher), (2, SpeakerRole::Teacher)]);
        let cfg = WindowConfig {
            window_len: 2,
            ..Default::default()
        };
        let w = build_windows(&t, &single_chapter(&t), &cfg).unwrap();
        assert_eq!(w[0].sentences, vec![1, 2]);
        assert_eq!(w[1].sentences, vec![3, 4]);
    }

    #[test]
    fn sliding_windows_step_by_stride() {
        let t = lesson(&[(10, SpeakerRole::Teacher)]);
        let cfg = WindowConfig {
            window_len: 4,
            stride: 2,
            prefix_mode: false,
            ..Default::default()
        };
        let w = build_windows(&t, &single_chapter(&t), &cfg).unwrap();
        let starts: Vec<u32> = w.iter().map(|w| w.sentences[0]).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
    }

    #[test]
    fn short_chapter_gives_single_clipped_window() {
        let t = lesson(&[(2, SpeakerRole::Teacher)]);
        let cfg = WindowConfig {
            window_len: 3,
            prefix_mode: false,
            ..Default::default()
        };
        let w = build_windows(&t, &single_chapter(&t), &cfg).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].sentences, vec![0, 1]);
    }

    #[test]
    fn student_speech_excluded_by_default() {
        let t = lesson(&[
            (2, SpeakerRole::Teacher),
            (1, SpeakerRole::Student),
            (1, SpeakerRole::Teacher),
        ]);
        let w = build_windows(&t, &single_chapter(&t), &WindowConfig::default()).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].sentences, vec![0, 1, 3]);
        let cfg = WindowConfig {
            teacher_only: false,
            ..Default::default()
        };
        assert_eq!(build_windows(&t, &single_chapter(&t), &cfg).unwrap().len(), 3);
    }

    #[test]
    fn chapter_without_teacher_speech_yields_nothing() {
        let t = lesson(&[(2, SpeakerRole::Student), (2, SpeakerRole::Teacher)]);
        let segs = LessonSegmentation {
            mqi: Some(equipartition_chapters(&t, &[2]).unwrap()),
            class: None,
        };
        let w = build_windows(&t, &segs, &WindowConfig::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].chapter(Instrument::Mqi).unwrap().chapter, 2);
    }

    #[test]
    fn windows_carry_both_chapterizations() {
        let t = lesson(&[(4, SpeakerRole::Teacher), (4, SpeakerRole::Teacher)]);
        let segs = LessonSegmentation {
            mqi: Some(equipartition_chapters(&t, &[2, 1, 1]).unwrap()),
            class: Some(equipartition_chapters(&t, &[1, 0, 1]).unwrap()),
        };
        let w = build_windows(&t, &segs, &WindowConfig::default()).unwrap();
        let last = w.last().unwrap();
        assert_eq!(last.chapter(Instrument::Mqi).unwrap().chapter, 4);
        assert_eq!(
            last.chapter(Instrument::Class).unwrap(),
            ChapterRef { stage: 2, chapter: 2 }
        );
        let key = last.key(Instrument::Mqi).unwrap();
        assert_eq!((key.stage, key.chapter, key.sentence), (2, 4, 7));
    }
}
