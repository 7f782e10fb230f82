//! Word-equipartition of a lesson into stages and chapters.

use serde::{Deserialize, Serialize};

use super::Transcript;
use crate::error::{Error, Result};

/// Stage and chapter of one sentence. Chapters are numbered from 1 within a
/// lesson; stages from 0 (beginning, middle, end for the usual three).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChapterRef {
    pub stage: u8,
    pub chapter: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// `K + 1` word offsets; chapter `k` (1-based) covers
    /// `[boundaries[k-1], boundaries[k])`.
    pub boundaries: Vec<u64>,
    /// Stage of each chapter, indexed by `chapter - 1`.
    pub chapter_stage: Vec<u8>,
    /// Chapter of each sentence, indexed by sentence ordinal.
    pub sentence_chapter: Vec<u32>,
}

impl Segmentation {
    pub fn n_chapters(&self) -> u32 {
        self.chapter_stage.len() as u32
    }

    pub fn chapter_of(&self, sentence: u32) -> ChapterRef {
        let chapter = self.sentence_chapter[sentence as usize];
        ChapterRef {
            stage: self.chapter_stage[chapter as usize - 1],
            chapter,
        }
    }
}

/// Spreads `chapters` over `n_stages` as evenly as possible, earlier stages
/// taking the remainder.
pub fn stage_split(chapters: u32, n_stages: u32) -> Vec<u32> {
    if n_stages == 0 {
        return Vec::new();
    }
    let base = chapters / n_stages;
    let extra = chapters % n_stages;
    (0..n_stages).map(|s| base + u32::from(s < extra)).collect()
}

/// Word boundaries `⌊k·W/K⌋` for `k = 0..=K`.
pub fn word_boundaries(total_words: u64, chapters: u32) -> Vec<u64> {
    let k_total = chapters as u128;
    (0..=chapters as u128)
        .map(|k| (k * total_words as u128 / k_total) as u64)
        .collect()
}

/// Assigns every sentence to the chapter holding its midpoint word.
///
/// `chapters_per_stage[s]` is the number of chapters in stage `s`; stage
/// boundaries therefore always fall on chapter boundaries.
pub fn equipartition_chapters(t: &Transcript, chapters_per_stage: &[u32]) -> Result<Segmentation> {
    let k: u32 = chapters_per_stage.iter().sum();
    if k == 0 {
        return Err(Error::invalid(format!(
            "lesson {}: zero chapters requested",
            t.lesson_id
        )));
    }
    let total = t.total_words();
    if (k as u64) > total {
        return Err(Error::invalid(format!(
            "lesson {}: {k} chapters exceed {total} words",
            t.lesson_id
        )));
    }
    let boundaries = word_boundaries(total, k);
    let chapter_stage: Vec<u8> = chapters_per_stage
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| std::iter::repeat_n(s as u8, n as usize))
        .collect();

    let mut sentence_chapter = Vec::with_capacity(t.n_sentences());
    let mut first_word = 0u64;
    let mut chapter = 1usize;
    for (_, s) in t.sentences() {
        let last_word = first_word + s.word_count as u64 - 1;
        // Doubled midpoint keeps the comparison in integers.
        let mid2 = first_word + last_word;
        while chapter < k as usize && mid2 >= 2 * boundaries[chapter] {
            chapter += 1;
        }
        sentence_chapter.push(chapter as u32);
        first_word = last_word + 1;
    }
    Ok(Segmentation {
        boundaries,
        chapter_stage,
        sentence_chapter,
    })
}
