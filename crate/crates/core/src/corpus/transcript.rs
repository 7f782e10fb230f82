use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Teacher,
    Student,
    Other,
}

impl SpeakerRole {
    pub fn from_label(label: &str) -> Self {
        let l = label.trim().to_ascii_lowercase();
        match l.as_str() {
            "t" | "teacher" => SpeakerRole::Teacher,
            "s" | "student" | "students" | "multiple students" => SpeakerRole::Student,
            _ if l.starts_with("student") => SpeakerRole::Student,
            _ => SpeakerRole::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    /// Ordinal across the whole lesson.
    pub index: u32,
    pub text: String,
    pub word_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: u32,
    pub speaker: String,
    pub role: SpeakerRole,
    pub sentences: Vec<Sentence>,
}

impl Utterance {
    pub fn is_teacher(&self) -> bool {
        self.role == SpeakerRole::Teacher
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub lesson_id: String,
    pub teacher_id: String,
    pub year: i32,
    pub utterances: Vec<Utterance>,
}

impl Transcript {
    pub fn sentences(&self) -> impl Iterator<Item = (&Utterance, &Sentence)> {
        self.utterances
            .iter()
            .flat_map(|u| u.sentences.iter().map(move |s| (u, s)))
    }

    pub fn n_sentences(&self) -> usize {
        self.utterances.iter().map(|u| u.sentences.len()).sum()
    }

    pub fn total_words(&self) -> u64 {
        self.sentences().map(|(_, s)| s.word_count as u64).sum()
    }

    /// Flattened per-sentence view `(utterance index, role, word count)`.
    pub fn sentence_table(&self) -> Vec<(u32, SpeakerRole, u32)> {
        self.sentences()
            .map(|(u, s)| (u.index, u.role, s.word_count))
            .collect()
    }

    /// Splits `text` into sentences and appends it as the next utterance;
    /// returns false (appending nothing) when it holds no words.
    pub fn push_utterance(&mut self, speaker: String, text: &str) -> bool {
        let next_sentence = self.n_sentences() as u32;
        let sentences: Vec<Sentence> = split_sentences(text)
            .into_iter()
            .enumerate()
            .map(|(i, t)| Sentence {
                index: next_sentence + i as u32,
                word_count: t.split_whitespace().count() as u32,
                text: t,
            })
            .collect();
        if sentences.is_empty() {
            return false;
        }
        self.utterances.push(Utterance {
            index: self.utterances.len() as u32,
            role: SpeakerRole::from_label(&speaker),
            speaker,
            sentences,
        });
        true
    }
}

/// Collapses whitespace and splits after runs of `.`, `!` or `?` that are
/// followed by whitespace or the end of the text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = normalized.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let terminal = matches!(c, '.' | '!' | '?');
        let boundary = match chars.peek() {
            None => true,
            Some(n) => n.is_whitespace(),
        };
        if terminal && boundary {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let rest = current.trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

#[derive(Deserialize)]
struct RawRecord {
    lesson_id: Option<String>,
    teacher_id: Option<String>,
    year: Option<i32>,
    speaker: Option<String>,
    utterance_text: Option<String>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    lesson_id: &'a str,
    teacher_id: &'a str,
    year: i32,
    speaker: &'a str,
    utterance_text: String,
}

fn required<T>(v: Option<T>, field: &str, source: &str, line: usize) -> Result<T> {
    v.ok_or_else(|| Error::Parse {
        source_name: source.to_string(),
        line,
        message: format!("missing field {field}"),
    })
}

/// Parses line-delimited JSON utterance records, grouping them into lessons
/// in order of first appearance.
pub fn parse_transcripts(reader: impl BufRead, source_name: &str) -> Result<Vec<Transcript>> {
    let mut lessons: Vec<Transcript> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        let lesson_id = required(rec.lesson_id, "lesson_id", source_name, line_no)?;
        let teacher_id = required(rec.teacher_id, "teacher_id", source_name, line_no)?;
        let year = required(rec.year, "year", source_name, line_no)?;
        let speaker = required(rec.speaker, "speaker", source_name, line_no)?;
        let text = required(rec.utterance_text, "utterance_text", source_name, line_no)?;
        if lesson_id.is_empty() {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: line_no,
                message: "empty lesson_id".into(),
            });
        }
        let slot = *index.entry(lesson_id.clone()).or_insert_with(|| {
            lessons.push(Transcript {
                lesson_id: lesson_id.clone(),
                teacher_id: teacher_id.clone(),
                year,
                utterances: Vec::new(),
            });
            lessons.len() - 1
        });
        let lesson = &mut lessons[slot];
        if lesson.teacher_id != teacher_id || lesson.year != year {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: line_no,
                message: format!("lesson {lesson_id} changes teacher or year"),
            });
        }
        if !lesson.push_utterance(speaker, &text) {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: line_no,
                message: "utterance has no words".into(),
            });
        }
    }
    Ok(lessons)
}

pub fn read_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_transcripts(BufReader::new(file), &path.display().to_string())
}

/// Reads a file holding exactly one lesson.
pub fn parse_transcript(path: impl AsRef<Path>) -> Result<Transcript> {
    let path = path.as_ref();
    let mut lessons = read_transcripts(path)?;
    match lessons.len() {
        0 => Err(Error::invalid(format!("{}: empty lesson", path.display()))),
        1 => Ok(lessons.remove(0)),
        n => Err(Error::invalid(format!(
            "{}: expected one lesson, found {n}",
            path.display()
        ))),
    }
}

pub fn write_transcripts(path: impl AsRef<Path>, lessons: &[Transcript]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in lessons {
        for u in &t.utterances {
            let rec = OutRecord {
                lesson_id: &t.lesson_id,
                teacher_id: &t.teacher_id,
                year: t.year,
                speaker: &u.speaker,
                utterance_text: u
                    .sentences
                    .iter()
                    .map(|s| s.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Transcript>> {
        parse_transcripts(text.as_bytes(), "test")
    }

    #[test]
    fn splits_two_sentences() {
        let t = parse(
            r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"Good   morning. Open your books."}"#,
        )
        .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].utterances.len(), 1);
        let s = &t[0].utterances[0].sentences;
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "Good morning.");
        assert_eq!(s[1].text, "Open your books.");
        assert_eq!(s[1].word_count, 3);
        assert!(t[0].utterances[0].is_teacher());
    }

    #[test]
    fn decimal_points_do_not_split() {
        assert_eq!(
            split_sentences("That is 3.5 apples! Right?"),
            vec!["That is 3.5 apples!", "Right?"]
        );
        assert_eq!(split_sentences("no terminator"), vec!["no terminator"]);
        assert_eq!(split_sentences("Wait... what?!"), vec!["Wait...", "what?!"]);
    }

    #[test]
    fn missing_lesson_id_reports_line_one() {
        let err = parse(r#"{"teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"Hi."}"#)
            .unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("lesson_id"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn utterance_indices_monotone() {
        let text = [
            r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"One. Two."}"#,
            r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"Student","utterance_text":"Three."}"#,
            r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"Four five six."}"#,
        ]
        .join("\n");
        let t = &parse(&text).unwrap()[0];
        let idx: Vec<u32> = t.utterances.iter().map(|u| u.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        let sidx: Vec<u32> = t.sentences().map(|(_, s)| s.index).collect();
        assert_eq!(sidx, vec![0, 1, 2, 3]);
        assert_eq!(t.utterances[1].role, SpeakerRole::Student);
        assert_eq!(t.total_words(), 6);
    }

    #[test]
    fn malformed_and_empty_records() {
        assert!(matches!(parse("{not json"), Err(Error::Parse { line: 1, .. })));
        let empty = r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"   "}"#;
        assert!(parse(empty).is_err());
    }

    #[test]
    fn roundtrip_through_file() {
        let text = [
            r#"{"lesson_id":"L1","teacher_id":"T1","year":2011,"speaker":"T","utterance_text":"One. Two."}"#,
            r#"{"lesson_id":"L2","teacher_id":"T1","year":2012,"speaker":"T","utterance_text":"Three."}"#,
        ]
        .join("\n");
        let lessons = parse(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_transcripts(&p, &lessons).unwrap();
        assert_eq!(read_transcripts(&p).unwrap(), lessons);
        assert!(parse_transcript(&p).is_err());
    }
}
